//! Pre-training loop: lesion augmentation, siamese forward passes, balanced
//! teacher assignments, prototype/EMA momentum updates, a decoupled-decay
//! adaptive optimizer on flattened parameters, and byte-exact checkpoints.
//!
//! The whole run is a pure function of (dataset bytes, config): every random
//! draw comes from a counter-derived stream, so resuming from a checkpoint
//! needs no RNG state and reproduces the uninterrupted run exactly.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignments::{teacher_probs, PrototypeBank};
use crate::backbone::{
    decode, decode_backward, ema_blend, encode_backward, encode_batch, patchify, project,
    project_backward, substitute_mask_tokens, ModelCfg, ModelParams, TeacherParams,
};
use crate::error::{Error, Result};
use crate::losses::{contrastive_losses, restoration_loss, total_loss, LossBreakdown};
use crate::nn::FlatIo;
use crate::phantom::{DatasetManifest, Image, Label};
use crate::rng::derive_rng;
use crate::slm::{augment_once, TokenLabels};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// peak learning rate is base_lr * batch / 256
    pub base_lr: f32,
    pub wd_lo: f32,
    pub wd_hi: f32,
    pub tau_s: f32,
    pub tau_t_lo: f32,
    pub tau_t_hi: f32,
    pub lambda_lo: f32,
    pub lambda_hi: f32,
    /// prototype momentum
    pub momentum: f32,
    /// abnormal-patch weight in the restoration loss
    pub beta: f64,
    /// lesion draws per image; epochs cycle through them
    pub n_draws: usize,
    pub r_lo: usize,
    pub r_hi: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_position_wise: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub model: ModelCfg,
    // ablation switches, all on for the full method
    pub with_category: bool,
    pub with_restoration: bool,
    pub with_substitution: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 32,
            base_lr: 0.0005,
            wd_lo: 0.04,
            wd_hi: 0.4,
            tau_s: 0.1,
            tau_t_lo: 0.04,
            tau_t_hi: 0.07,
            lambda_lo: 0.99,
            lambda_hi: 1.0,
            momentum: 0.9,
            beta: 4.0,
            n_draws: 9,
            r_lo: 1,
            r_hi: 4,
            sinkhorn_iters: 3,
            sinkhorn_position_wise: true,
            seed: 0,
            checkpoint_every: 10,
            model: ModelCfg::default(),
            with_category: true,
            with_restoration: true,
            with_substitution: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch < 2 {
            return Err(Error::Config(format!("batch must be >= 2, got {}", self.batch)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        for (name, lo, hi) in [
            ("weight decay", self.wd_lo, self.wd_hi),
            ("tau_t", self.tau_t_lo, self.tau_t_hi),
            ("lambda", self.lambda_lo, self.lambda_hi),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name} range is not ordered: {lo} > {hi}")));
            }
        }
        if self.r_lo > self.r_hi || self.r_lo == 0 {
            return Err(Error::Config("lesion count range must be ordered and >= 1".into()));
        }
        if self.n_draws == 0 {
            return Err(Error::Config("N must be >= 1".into()));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f32 {
        self.base_lr * self.batch as f32 / 256.0
    }

    /// Warm-up epochs: 2.5% of the total, at least one.
    pub fn warmup_epochs(&self) -> usize {
        ((self.epochs as f64 * 0.025).round() as usize).max(1)
    }
}

/// Per-step schedule values, precomputed for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    pub lr: Vec<f32>,
    pub wd: Vec<f32>,
    pub tau_t: Vec<f32>,
    pub lambda: Vec<f32>,
}

pub fn make_schedules(cfg: &TrainConfig, steps_per_epoch: usize) -> Result<Schedules> {
    if steps_per_epoch == 0 {
        return Err(Error::Config("zero steps per epoch".into()));
    }
    let total = cfg.epochs * steps_per_epoch;
    let warm = cfg.warmup_epochs() * steps_per_epoch;
    let peak = cfg.peak_lr();
    let last = (total - 1).max(1) as f32;
    let mut lr = Vec::with_capacity(total);
    let mut wd = Vec::with_capacity(total);
    let mut tau_t = Vec::with_capacity(total);
    let mut lambda = Vec::with_capacity(total);
    for s in 0..total {
        if s < warm {
            lr.push(peak * s as f32 / warm as f32);
        } else {
            let u = (s - warm) as f32 / ((total - warm).max(2) - 1) as f32;
            lr.push(peak * 0.5 * (1.0 + (std::f32::consts::PI * u).cos()));
        }
        let u_all = s as f32 / last;
        wd.push(cfg.wd_lo + (cfg.wd_hi - cfg.wd_lo) * 0.5 * (1.0 - (std::f32::consts::PI * u_all).cos()));
        let u_warm = if warm <= 1 { 1.0 } else { (s as f32 / (warm - 1) as f32).min(1.0) };
        tau_t.push(cfg.tau_t_lo + (cfg.tau_t_hi - cfg.tau_t_lo) * u_warm);
        lambda.push(
            cfg.lambda_hi
                - (cfg.lambda_hi - cfg.lambda_lo) * 0.5 * (1.0 + (std::f32::consts::PI * u_all).cos()),
        );
    }
    Ok(Schedules { lr, wd, tau_t, lambda })
}

/// Adaptive-moment optimizer with decoupled weight decay on a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        AdamW {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// `decay` is a per-parameter weight-decay multiplier (1.0 for linear
    /// weight matrices, 0.0 for biases, norms and embeddings).
    pub fn step(
        &mut self,
        params: &mut [f32],
        grads: &[f32],
        lr: f32,
        wd: f32,
        decay: &[f32],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len()
        {
            return Err(Error::Integrity("optimizer length mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, (&g, &d)), (m, v)) in params
            .iter_mut()
            .zip(grads.iter().zip(decay.iter()))
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *p -= lr * wd * d * *p; // decay decoupled from the adaptive step
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Everything the loop mutates, checkpointable as one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub teacher: TeacherParams,
    pub bank: PrototypeBank,
    pub opt: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(cfg.seed, "init", &[]);
        let params = ModelParams::init(&cfg.model, &mut rng);
        let teacher = params.teacher_view();
        let bank = PrototypeBank::new(cfg.model.tokens(), cfg.model.k, cfg.momentum)?;
        let opt = AdamW::new(params.len_flat());
        Ok(TrainState {
            cfg,
            params,
            teacher,
            bank,
            opt,
            step: 0,
        })
    }
}

/// One paired batch: clean normal images, their lesioned views, token labels.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub clean: Vec<Image>,
    pub augmented: Vec<Image>,
    pub labels: Vec<TokenLabels>,
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// One optimization step. Order of effects: teacher forward, balanced
/// teacher assignments, prototype update, student forward and consistency
/// losses, substitution + decode + restoration loss, backward and optimizer
/// step on the student side, EMA blend into the teacher.
pub fn train_step(state: &mut TrainState, batch: &TrainBatch, sched: &Schedules) -> Result<LossBreakdown> {
    let cfg = state.cfg.clone();
    let mcfg = &cfg.model;
    let l = mcfg.tokens();
    let s = state.step as usize;
    if s >= sched.lr.len() {
        return Err(Error::Config(format!("step {s} beyond schedule length {}", sched.lr.len())));
    }
    let (lr, wd, tau_t, lambda) = (sched.lr[s], sched.wd[s], sched.tau_t[s], sched.lambda[s]);

    // (1) teacher sees clean normals, no gradients anywhere on this side
    let clean_refs: Vec<&Image> = batch.clean.iter().collect();
    let (zt, _) = encode_batch(&state.teacher.enc, &clean_refs, mcfg)?;
    let (logits_t, _) = project(&state.teacher.head, &zt)?;

    // (2) balanced teacher assignments, (3) prototype momentum update
    let normal_labels: Vec<TokenLabels> = (0..batch.clean.len())
        .map(|_| TokenLabels::all_normal(l))
        .collect();
    let teacher_block = teacher_probs(
        &logits_t,
        tau_t,
        cfg.sinkhorn_iters,
        cfg.sinkhorn_position_wise,
        l,
        normal_labels,
    )?;
    state.bank.update(&teacher_block)?;

    // (4)-(5) student forward on the lesioned views; consistency losses
    let aug_refs: Vec<&Image> = batch.augmented.iter().collect();
    let (zs, enc_trace) = encode_batch(&state.params.enc, &aug_refs, mcfg)?;
    let (logits_s, head_trace) = project(&state.params.head, &zs)?;
    let bank64 = to_f64(&state.bank.c);
    let cst = contrastive_losses(
        &to_f64(&logits_s),
        l,
        &batch.labels,
        &bank64,
        cfg.tau_s as f64,
        cfg.tau_s as f64,
        cfg.with_category,
    )?;

    // (6) substitute lesioned tokens, decode, restoration loss against clean x
    let z_dec = if cfg.with_substitution {
        substitute_mask_tokens(&zs, &batch.labels, &state.params.mask_token)?
    } else {
        zs.clone()
    };
    let (y, dec_trace) = decode(&state.params.dec, &z_dec, mcfg)?;
    let mut targets = Array2::<f32>::zeros((batch.clean.len() * l, mcfg.patch_pixels()));
    for (i, img) in batch.clean.iter().enumerate() {
        let p = patchify(img, mcfg.patch)?;
        targets
            .slice_mut(ndarray::s![i * l..(i + 1) * l, ..])
            .assign(&p);
    }
    let (l_recon, dy64) = if cfg.with_restoration {
        restoration_loss(&to_f64(&y), &to_f64(&targets), &batch.labels, l, cfg.beta)?
    } else {
        (0.0, Array2::zeros((y.nrows(), y.ncols())))
    };

    let breakdown = total_loss(
        cst.l_stru,
        cst.l_cate,
        l_recon,
        cst.stru_anchors,
        cst.cate_anchors,
    )
    .map_err(|e| {
        Error::Numerical(format!(
            "step {}: non-finite loss (stru {:.4e}, cate {:.4e}, recon {:.4e}): {e}",
            state.step, cst.l_stru, cst.l_cate, l_recon
        ))
    })?;

    // (7) backward: restoration path, then consistency path, then optimizer
    let mut grad = ModelParams::zeros(mcfg);
    let dz_dec = decode_backward(&state.params.dec, &dec_trace, &to_f32(&dy64), mcfg, &mut grad.dec);
    // substituted rows route their gradient into the mask token, not the encoder
    let mut dz_enc = dz_dec;
    if cfg.with_substitution {
        for (i, lab) in batch.labels.iter().enumerate() {
            for (j, &abnormal) in lab.labels.iter().enumerate() {
                if abnormal {
                    let row = dz_enc.row(i * l + j).to_owned();
                    grad.mask_token += &row;
                    dz_enc.row_mut(i * l + j).fill(0.0);
                }
            }
        }
    }
    let dz_head = project_backward(
        &state.params.head,
        &head_trace,
        &to_f32(&cst.d_logits),
        &mut grad.head,
    );
    dz_enc += &dz_head;
    encode_backward(&state.params.enc, &enc_trace, &dz_enc, mcfg, &mut grad.enc);

    let gflat = grad.to_flat();
    if gflat.iter().any(|v| !v.is_finite()) {
        let norm: f64 = gflat.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        return Err(Error::Numerical(format!(
            "step {}: non-finite gradient (loss {:.4e}, grad norm {norm:.4e})",
            state.step, breakdown.l_total
        )));
    }
    let mut pflat = state.params.to_flat();
    state.opt.step(&mut pflat, &gflat, lr, wd, &state.params.decay_mask())?;
    state.params.from_flat(&pflat);

    // (8) EMA blend of encoder + head into the teacher
    let student_view = state.params.teacher_view();
    ema_blend(&mut state.teacher, &student_view, lambda)?;

    state.step += 1;
    Ok(breakdown)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"ATOKCKP1";
const CKPT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    put_u64(buf, vs.len() as u64);
    for &v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::persistence(self.path, "truncated checkpoint"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    let cfg_json =
        serde_json::to_vec(&state.cfg).map_err(|e| Error::persistence(path, e.to_string()))?;
    put_u64(&mut buf, cfg_json.len() as u64);
    buf.extend_from_slice(&cfg_json);
    put_u64(&mut buf, state.step);
    put_u64(&mut buf, state.bank.step);
    buf.extend_from_slice(&state.bank.momentum.to_le_bytes());
    put_f32s(&mut buf, state.bank.c.as_slice().expect("contiguous bank"));
    put_f32s(&mut buf, &state.params.to_flat());
    put_f32s(&mut buf, &state.teacher.to_flat());
    put_u64(&mut buf, state.opt.t);
    put_f32s(&mut buf, &state.opt.m);
    put_f32s(&mut buf, &state.opt.v);
    let f = fs::File::create(path).map_err(|e| Error::persistence(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&buf).map_err(|e| Error::persistence(path, e))?;
    w.flush().map_err(|e| Error::persistence(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::persistence(path, e))?;
    if data.len() < 12 || &data[..8] != CKPT_MAGIC {
        return Err(Error::persistence(path, "bad checkpoint magic"));
    }
    let mut r = ByteReader { data: &data, pos: 8, path };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::persistence(
            path,
            format!("checkpoint version {version}, expected {CKPT_VERSION}"),
        ));
    }
    let cfg_len = r.u64()? as usize;
    let cfg: TrainConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::persistence(path, e.to_string()))?;
    cfg.validate()?;
    let step = r.u64()?;
    let bank_step = r.u64()?;
    let momentum = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let bank_c = r.f32s()?;
    let l = cfg.model.tokens();
    let k = cfg.model.k;
    if bank_c.len() != l * k {
        return Err(Error::persistence(path, "prototype bank size mismatch"));
    }
    let mut bank = PrototypeBank::new(l, k, momentum)?;
    bank.c = Array2::from_shape_vec((l, k), bank_c).expect("sized above");
    bank.step = bank_step;
    let mut params = ModelParams::zeros(&cfg.model);
    let pflat = r.f32s()?;
    if pflat.len() != params.len_flat() {
        return Err(Error::persistence(path, "parameter size mismatch"));
    }
    params.from_flat(&pflat);
    let mut teacher = params.teacher_view();
    let tflat = r.f32s()?;
    if tflat.len() != teacher.len_flat() {
        return Err(Error::persistence(path, "teacher size mismatch"));
    }
    teacher.from_flat(&tflat);
    let mut opt = AdamW::new(params.len_flat());
    opt.t = r.u64()?;
    opt.m = r.f32s()?;
    opt.v = r.f32s()?;
    if opt.m.len() != params.len_flat() || opt.v.len() != params.len_flat() {
        return Err(Error::persistence(path, "optimizer state size mismatch"));
    }
    Ok(TrainState { cfg, params, teacher, bank, opt, step })
}

// ---------------------------------------------------------------------------
// Full pre-training run
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str = "step l_stru l_cate l_recon l_total lr tau_t lambda";

pub fn format_metrics_line(step: u64, bd: &LossBreakdown, lr: f32, tau_t: f32, lambda: f32) -> String {
    format!(
        "{step} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
        bd.l_stru, bd.l_cate, bd.l_recon, bd.l_total, lr, tau_t, lambda
    )
}

/// Deterministic epoch ordering of training images.
fn epoch_order(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = derive_rng(seed, "epoch-order", &[epoch as u64]);
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Assemble the paired batch for one step: the epoch's lesion draw of each
/// clean image, derived purely from (seed, image id, draw index).
pub fn make_batch(
    images: &[Image],
    indices: &[usize],
    cfg: &TrainConfig,
    draw: u64,
) -> Result<TrainBatch> {
    let mut clean = Vec::with_capacity(indices.len());
    let mut augmented = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let img = &images[idx];
        let view = augment_once(
            img,
            cfg.seed,
            idx as u64,
            draw,
            cfg.model.patch,
            (cfg.r_lo, cfg.r_hi),
        )?;
        clean.push(img.clone());
        augmented.push(view.augmented);
        labels.push(view.labels);
    }
    Ok(TrainBatch { clean, augmented, labels })
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub epoch_mean_total: Vec<f64>,
}

/// Load every training-split normal image of the manifest into memory.
pub fn load_train_images(manifest: &DatasetManifest) -> Result<Vec<Image>> {
    let mut images = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        if entry.split == "train" && entry.label == Label::Normal {
            images.push(manifest.load_image(i)?);
        }
    }
    if images.is_empty() {
        return Err(Error::Degenerate("no normal training images in manifest".into()));
    }
    Ok(images)
}

pub fn pretrain(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let images = load_train_images(manifest)?;
    if images.len() < cfg.batch {
        return Err(Error::Degenerate(format!(
            "dataset has {} normal images, batch needs {}",
            images.len(),
            cfg.batch
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::persistence(out_dir, e))?;
    let mut state = TrainState::new(cfg.clone())?;
    resume_loop(&mut state, &images, out_dir, None, None)
}

/// Continue a run from a loaded state (also the fresh-start path).
/// `stop_after_epoch` interrupts early without altering the schedules,
/// which always span the configured total epoch count.
pub fn resume_loop(
    state: &mut TrainState,
    images: &[Image],
    out_dir: &Path,
    metrics_log: Option<PathBuf>,
    stop_after_epoch: Option<usize>,
) -> Result<PretrainOutcome> {
    let cfg = state.cfg.clone();
    let steps_per_epoch = images.len() / cfg.batch;
    let sched = make_schedules(&cfg, steps_per_epoch)?;
    let log_path = metrics_log.unwrap_or_else(|| out_dir.join("metrics.log"));
    let fresh = state.step == 0;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::persistence(&log_path, e))?;
    if fresh {
        writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::persistence(&log_path, e))?;
    }
    let ckpt_path = out_dir.join("checkpoint.bin");
    let start_epoch = state.step as usize / steps_per_epoch;
    let end_epoch = stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut epoch_mean_total = Vec::new();
    for epoch in start_epoch..end_epoch {
        let order = epoch_order(images.len(), cfg.seed, epoch);
        let draw = (epoch % cfg.n_draws) as u64;
        let mut epoch_sum = 0.0f64;
        let first_step_of_epoch = (epoch * steps_per_epoch) as u64;
        for b in 0..steps_per_epoch {
            if first_step_of_epoch + (b as u64) < state.step {
                continue; // already trained before the interruption
            }
            let idx = &order[b * cfg.batch..(b + 1) * cfg.batch];
            let batch = make_batch(images, idx, &cfg, draw)?;
            let s = state.step as usize;
            let bd = match train_step(state, &batch, &sched) {
                Ok(bd) => bd,
                Err(e) => {
                    // leave the last good checkpoint on disk and report
                    return Err(e);
                }
            };
            writeln!(
                log,
                "{}",
                format_metrics_line(s as u64, &bd, sched.lr[s], sched.tau_t[s], sched.lambda[s])
            )
            .map_err(|e| Error::persistence(&log_path, e))?;
            epoch_sum += bd.l_total;
        }
        epoch_mean_total.push(epoch_sum / steps_per_epoch as f64);
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == end_epoch {
            save_checkpoint(state, &ckpt_path)?;
        }
    }
    log.flush().map_err(|e| Error::persistence(&log_path, e))?;
    if !ckpt_path.exists() {
        save_checkpoint(state, &ckpt_path)?;
    }
    Ok(PretrainOutcome {
        checkpoint: ckpt_path,
        metrics_log: log_path,
        epoch_mean_total,
    })
}
