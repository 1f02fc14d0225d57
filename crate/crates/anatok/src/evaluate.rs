//! Evaluation harness: reconstruction-based normality scoring, detection
//! metrics with a brute-force-verified AUC, a frozen-encoder linear probe,
//! and a position-cluster silhouette.

use ndarray::{Array1, Array2, Axis};

use crate::backbone::{
    decode, encode, global_average_pool, patchify, DecoderParams, EncoderParams, ModelCfg,
};
use crate::error::{Error, Result};
use crate::nn::FlatIo;
use crate::phantom::{generate_phantom, Image, PhantomConfig};
use crate::slm::augment_once;

/// One held-out evaluation image. Abnormal samples carry their pre-lesion
/// source for reconstruction plots.
#[derive(Debug, Clone)]
pub struct HoldoutSample {
    pub id: String,
    pub image: Image,
    pub normal: bool,
    pub source: Option<Image>,
}

/// Deterministic held-out set: fresh phantoms, half of them lesioned.
/// `seed` must not overlap the training phantom seed range.
pub fn build_holdout(
    pcfg: &PhantomConfig,
    patch: usize,
    r_range: (usize, usize),
    seed: u64,
    n_normal: usize,
    n_abnormal: usize,
) -> Result<Vec<HoldoutSample>> {
    let mut out = Vec::with_capacity(n_normal + n_abnormal);
    for i in 0..n_normal {
        out.push(HoldoutSample {
            id: format!("holdout_n{i:05}"),
            image: generate_phantom(seed.wrapping_add(i as u64), pcfg)?,
            normal: true,
            source: None,
        });
    }
    for i in 0..n_abnormal {
        let clean = generate_phantom(seed.wrapping_add((n_normal + i) as u64), pcfg)?;
        let view = augment_once(&clean, seed, (n_normal + i) as u64, 0, patch, r_range)?;
        out.push(HoldoutSample {
            id: format!("holdout_a{i:05}"),
            image: view.augmented,
            normal: false,
            source: Some(clean),
        });
    }
    Ok(out)
}

/// One evaluated image: its normality score and per-patch residuals.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub normal: bool,
    /// per-patch sum of squared pixel errors
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Normality score from per-patch residuals: the inverse of the mean
/// exponentiated squared error, 1.0 exactly for a perfect reconstruction.
pub fn anomaly_score_from_residuals(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::Integrity("no patch residuals".into()));
    }
    if residuals.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Numerical("invalid patch residual".into()));
    }
    let mean_exp = residuals.iter().map(|r| r.exp()).sum::<f64>() / residuals.len() as f64;
    Ok(1.0 / mean_exp)
}

/// Encode (no mask substitution — labels are unknown at inference), decode,
/// and score one image. Residual per patch is the pixel-sum squared error.
pub fn score_image(
    enc: &EncoderParams,
    dec: &DecoderParams,
    cfg: &ModelCfg,
    image: &Image,
) -> Result<(f64, Vec<f64>)> {
    let z = encode(enc, image, cfg)?;
    let (y, _) = decode(dec, &z, cfg)?;
    let x = patchify(image, cfg.patch)?;
    if y.raw_dim() != x.raw_dim() {
        return Err(Error::Integrity("reconstruction shape mismatch".into()));
    }
    let residuals: Vec<f64> = y
        .rows()
        .into_iter()
        .zip(x.rows())
        .map(|(yr, xr)| {
            yr.iter()
                .zip(xr.iter())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .collect();
    let score = anomaly_score_from_residuals(&residuals)?;
    Ok((score, residuals))
}

/// Rank-based AUC with rank-averaged ties; `labels[i]` true marks the
/// positive class (higher score = more positive).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation("scores/labels length mismatch".into()));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Evaluation("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // rank-average tied scores
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels.iter())
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    Ok((pos_rank_sum - npos as f64 * (npos as f64 + 1.0) / 2.0) / (npos as f64 * nneg as f64))
}

/// Detection metrics over scored samples. The positive class is NORMAL
/// (scores are normality); threshold maximizes Youden's J, predictions are
/// `score >= threshold`.
pub fn detect(samples: &[ScoredSample]) -> Result<MetricsReport> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.normal).collect();
    metrics_from_scores(&scores, &labels)
}

pub fn metrics_from_scores(scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    let auc_val = auc(scores, labels)?;
    let npos = labels.iter().filter(|&&l| l).count() as f64;
    let nneg = labels.len() as f64 - npos;
    // scan unique thresholds descending; J = TPR - FPR
    let mut cand: Vec<f64> = scores.to_vec();
    cand.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cand.dedup();
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &thr in &cand {
        let tp = scores
            .iter()
            .zip(labels.iter())
            .filter(|(&s, &l)| l && s >= thr)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels.iter())
            .filter(|(&s, &l)| !l && s >= thr)
            .count() as f64;
        let j = tp / npos - fp / nneg;
        if j > best.0 {
            best = (j, thr);
        }
    }
    let thr = best.1;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        match (l, s >= thr) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / labels.len() as f64;
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(MetricsReport {
        auc: auc_val,
        acc,
        f1,
        threshold: thr,
        tp,
        fp,
        tn,
        fn_,
    })
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

/// Global-average-pooled encoder features, one row per image.
pub fn pooled_features(
    enc: &EncoderParams,
    cfg: &ModelCfg,
    images: &[&Image],
) -> Result<Array2<f32>> {
    let l = cfg.tokens();
    let mut out = Array2::<f32>::zeros((images.len(), cfg.dim));
    for (i, img) in images.iter().enumerate() {
        let z = encode(enc, img, cfg)?;
        out.row_mut(i).assign(&global_average_pool(&z, l).row(0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Full-batch logistic regression on fixed features; features are
/// standardized with the training split's statistics.
pub fn logistic_probe(
    train_x: &Array2<f64>,
    train_y: &[bool],
    test_x: &Array2<f64>,
    test_y: &[bool],
    pcfg: &ProbeConfig,
) -> Result<MetricsReport> {
    let n = train_x.nrows();
    let d = train_x.ncols();
    if n != train_y.len() || test_x.nrows() != test_y.len() || test_x.ncols() != d {
        return Err(Error::Evaluation("probe shape mismatch".into()));
    }
    if train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y) {
        return Err(Error::Evaluation("probe training labels are single-class".into()));
    }
    let mean = train_x.mean_axis(Axis(0)).expect("nonempty");
    let mut std = Array1::<f64>::zeros(d);
    for j in 0..d {
        let col = train_x.column(j);
        let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
        std[j] = var.sqrt().max(1e-8);
    }
    let norm = |x: &Array2<f64>| {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            row -= &mean;
            row /= &std;
        }
        z
    };
    let xtr = norm(train_x);
    let xte = norm(test_x);
    let ytr: Vec<f64> = train_y.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();

    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    for _ in 0..pcfg.epochs {
        let logits = xtr.dot(&w) + b;
        let p = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let err = &p - &Array1::from_vec(ytr.clone());
        let gw = xtr.t().dot(&err) / n as f64 + pcfg.l2 * &w;
        let gb = err.sum() / n as f64;
        w -= &(pcfg.lr * &gw);
        b -= pcfg.lr * gb;
    }
    let scores: Vec<f64> = xte.dot(&w).iter().map(|v| v + b).collect();
    metrics_from_scores(&scores, test_y)
}

/// Probe on frozen encoder features; the encoder is verified bit-identical
/// before and after (it is only read, but the contract is asserted).
pub fn linear_probe(
    enc: &EncoderParams,
    cfg: &ModelCfg,
    train: &[(&Image, bool)],
    test: &[(&Image, bool)],
    pcfg: &ProbeConfig,
) -> Result<MetricsReport> {
    let frozen = enc.to_flat();
    let tr_imgs: Vec<&Image> = train.iter().map(|(i, _)| *i).collect();
    let te_imgs: Vec<&Image> = test.iter().map(|(i, _)| *i).collect();
    let tr_y: Vec<bool> = train.iter().map(|(_, y)| *y).collect();
    let te_y: Vec<bool> = test.iter().map(|(_, y)| *y).collect();
    let xtr = pooled_features(enc, cfg, &tr_imgs)?.mapv(|v| v as f64);
    let xte = pooled_features(enc, cfg, &te_imgs)?.mapv(|v| v as f64);
    let report = logistic_probe(&xtr, &tr_y, &xte, &te_y, pcfg)?;
    if enc.to_flat() != frozen {
        return Err(Error::Integrity("encoder changed during probing".into()));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Position-cluster silhouette
// ---------------------------------------------------------------------------

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0; // zero vectors carry no direction
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Mean silhouette of feature rows under the given group assignment,
/// cosine distance; tokens in zero-spread configurations score 0.
pub fn silhouette(features: &Array2<f32>, groups: &[usize]) -> Result<f64> {
    let n = features.nrows();
    if n != groups.len() {
        return Err(Error::Evaluation("silhouette shape mismatch".into()));
    }
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Evaluation("silhouette needs >= 2 groups".into()));
    }
    let mut counts = vec![0usize; k];
    for &g in groups {
        counts[g] += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::Evaluation("every group needs >= 2 members".into()));
    }
    let rows: Vec<&[f32]> = (0..n)
        .map(|i| features.row(i).to_slice().expect("contiguous"))
        .collect();
    let mut total = 0.0f64;
    for i in 0..n {
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if i != j {
                sums[groups[j]] += cosine_distance(rows[i], rows[j]);
            }
        }
        let gi = groups[i];
        let a = sums[gi] / (counts[gi] - 1) as f64;
        let b = (0..k)
            .filter(|&g| g != gi)
            .map(|g| sums[g] / counts[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / n as f64)
}

/// Group token index j of an (gh x gw) patch grid into a 3x3 position grid.
pub fn position_group(j: usize, grid_h: usize, grid_w: usize) -> usize {
    let (r, c) = (j / grid_w, j % grid_w);
    let rb = (r * 3) / grid_h;
    let cb = (c * 3) / grid_w;
    rb * 3 + cb
}

/// Silhouette of region-pooled encoder features over a 3x3 position grid:
/// each image contributes nine feature rows, one per grid region (token
/// features averaged within the region). Pooling per landmark region keeps
/// the measurement about regional anatomy rather than patch-local texture.
pub fn cluster_quality(
    enc: &EncoderParams,
    cfg: &ModelCfg,
    images: &[&Image],
) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Evaluation("cluster quality needs >= 2 images".into()));
    }
    let l = cfg.tokens();
    let (gh, gw) = (cfg.img_h / cfg.patch, cfg.img_w / cfg.patch);
    if gh < 3 || gw < 3 {
        return Err(Error::Evaluation("position grid needs >= 3x3 patches".into()));
    }
    let mut feats = Array2::<f32>::zeros((images.len() * 9, cfg.dim));
    let mut groups = Vec::with_capacity(images.len() * 9);
    for (i, img) in images.iter().enumerate() {
        let z = encode(enc, img, cfg)?;
        let mut counts = [0usize; 9];
        for j in 0..l {
            let g = position_group(j, gh, gw);
            let mut row = feats.row_mut(i * 9 + g);
            row += &z.row(j);
            counts[g] += 1;
        }
        for g in 0..9 {
            let mut row = feats.row_mut(i * 9 + g);
            row.mapv_inplace(|v| v / counts[g] as f32);
            groups.push(g);
        }
    }
    silhouette(&feats, &groups)
}
