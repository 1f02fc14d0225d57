//! Flat key=value run configuration with section prefixes
//! (`phantom.`, `train.`, `eval.`). Unknown keys are rejected so typos
//! cannot silently fall back to defaults; `render` emits the fully
//! resolved configuration in the same format it parses.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::trainer::TrainConfig;

/// Evaluation options: held-out data volume and probe hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// seed base for held-out phantoms; must not collide with training seeds
    pub seed: u64,
    pub normal_count: usize,
    pub abnormal_count: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 1_000_000,
            normal_count: 200,
            abnormal_count: 200,
            probe_epochs: 500,
            probe_lr: 0.5,
            probe_l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse value {raw:?} for key {key}")))
}

impl RunConfig {
    /// Parse the key=value text; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        // keep the model geometry tied to the phantom geometry
        cfg.train.model.img_h = cfg.phantom.height;
        cfg.train.model.img_w = cfg.phantom.width;
        cfg.phantom.patch = cfg.train.model.patch;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "phantom.height" => self.phantom.height = parse_value(key, v)?,
            "phantom.width" => self.phantom.width = parse_value(key, v)?,
            "phantom.pos_jitter" => self.phantom.pos_jitter = parse_value(key, v)?,
            "phantom.intensity_jitter" => self.phantom.intensity_jitter = parse_value(key, v)?,
            "phantom.noise_sigma" => self.phantom.noise_sigma = parse_value(key, v)?,
            "phantom.blur_sigma" => self.phantom.blur_sigma = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch" => self.train.batch = parse_value(key, v)?,
            "train.base_lr" => self.train.base_lr = parse_value(key, v)?,
            "train.wd_lo" => self.train.wd_lo = parse_value(key, v)?,
            "train.wd_hi" => self.train.wd_hi = parse_value(key, v)?,
            "train.tau_s" => self.train.tau_s = parse_value(key, v)?,
            "train.tau_t_lo" => self.train.tau_t_lo = parse_value(key, v)?,
            "train.tau_t_hi" => self.train.tau_t_hi = parse_value(key, v)?,
            "train.lambda_lo" => self.train.lambda_lo = parse_value(key, v)?,
            "train.lambda_hi" => self.train.lambda_hi = parse_value(key, v)?,
            "train.momentum" => self.train.momentum = parse_value(key, v)?,
            "train.beta" => self.train.beta = parse_value(key, v)?,
            "train.n_draws" => self.train.n_draws = parse_value(key, v)?,
            "train.r_lo" => self.train.r_lo = parse_value(key, v)?,
            "train.r_hi" => self.train.r_hi = parse_value(key, v)?,
            "train.sinkhorn_iters" => self.train.sinkhorn_iters = parse_value(key, v)?,
            "train.sinkhorn_position_wise" => {
                self.train.sinkhorn_position_wise = parse_value(key, v)?
            }
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_value(key, v)?,
            "train.with_category" => self.train.with_category = parse_value(key, v)?,
            "train.with_restoration" => self.train.with_restoration = parse_value(key, v)?,
            "train.with_substitution" => self.train.with_substitution = parse_value(key, v)?,
            "train.patch" => self.train.model.patch = parse_value(key, v)?,
            "train.dim" => self.train.model.dim = parse_value(key, v)?,
            "train.depth" => self.train.model.depth = parse_value(key, v)?,
            "train.heads" => self.train.model.heads = parse_value(key, v)?,
            "train.dec_dim" => self.train.model.dec_dim = parse_value(key, v)?,
            "train.dec_depth" => self.train.model.dec_depth = parse_value(key, v)?,
            "train.dec_heads" => self.train.model.dec_heads = parse_value(key, v)?,
            "train.head_hidden" => self.train.model.head_hidden = parse_value(key, v)?,
            "train.k" => self.train.model.k = parse_value(key, v)?,
            "eval.seed" => self.eval.seed = parse_value(key, v)?,
            "eval.normal_count" => self.eval.normal_count = parse_value(key, v)?,
            "eval.abnormal_count" => self.eval.abnormal_count = parse_value(key, v)?,
            "eval.probe_epochs" => self.eval.probe_epochs = parse_value(key, v)?,
            "eval.probe_lr" => self.eval.probe_lr = parse_value(key, v)?,
            "eval.probe_l2" => self.eval.probe_l2 = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key: {key}"))),
        }
        Ok(())
    }

    /// Fully resolved configuration in parseable form.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let p = &self.phantom;
        let t = &self.train;
        let m = &t.model;
        let e = &self.eval;
        let _ = write!(
            s,
            "phantom.height={}\nphantom.width={}\nphantom.pos_jitter={}\nphantom.intensity_jitter={}\nphantom.noise_sigma={}\nphantom.blur_sigma={}\n",
            p.height, p.width, p.pos_jitter, p.intensity_jitter, p.noise_sigma, p.blur_sigma
        );
        let _ = write!(
            s,
            "train.epochs={}\ntrain.batch={}\ntrain.base_lr={}\ntrain.wd_lo={}\ntrain.wd_hi={}\ntrain.tau_s={}\ntrain.tau_t_lo={}\ntrain.tau_t_hi={}\ntrain.lambda_lo={}\ntrain.lambda_hi={}\ntrain.momentum={}\ntrain.beta={}\ntrain.n_draws={}\ntrain.r_lo={}\ntrain.r_hi={}\ntrain.sinkhorn_iters={}\ntrain.sinkhorn_position_wise={}\ntrain.seed={}\ntrain.checkpoint_every={}\ntrain.with_category={}\ntrain.with_restoration={}\ntrain.with_substitution={}\n",
            t.epochs, t.batch, t.base_lr, t.wd_lo, t.wd_hi, t.tau_s, t.tau_t_lo, t.tau_t_hi,
            t.lambda_lo, t.lambda_hi, t.momentum, t.beta, t.n_draws, t.r_lo, t.r_hi,
            t.sinkhorn_iters, t.sinkhorn_position_wise, t.seed, t.checkpoint_every,
            t.with_category, t.with_restoration, t.with_substitution
        );
        let _ = write!(
            s,
            "train.patch={}\ntrain.dim={}\ntrain.depth={}\ntrain.heads={}\ntrain.dec_dim={}\ntrain.dec_depth={}\ntrain.dec_heads={}\ntrain.head_hidden={}\ntrain.k={}\n",
            m.patch, m.dim, m.depth, m.heads, m.dec_dim, m.dec_depth, m.dec_heads, m.head_hidden, m.k
        );
        let _ = write!(
            s,
            "eval.seed={}\neval.normal_count={}\neval.abnormal_count={}\neval.probe_epochs={}\neval.probe_lr={}\neval.probe_l2={}\n",
            e.seed, e.normal_count, e.abnormal_count, e.probe_epochs, e.probe_lr, e.probe_l2
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        if self.eval.normal_count == 0 || self.eval.abnormal_count == 0 {
            return Err(Error::Config("eval needs both classes".into()));
        }
        Ok(())
    }
}
