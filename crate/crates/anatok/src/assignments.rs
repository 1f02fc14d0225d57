//! Token probability computation and the spatial-aware prototype bank.
//!
//! Student probabilities are temperature softmax rows. Teacher probabilities
//! are balanced with Sinkhorn-Knopp, applied independently per token
//! position over the B x K slice (a global mode over all B*L tokens exists
//! behind a flag for ablation). Prototypes are per-position probability
//! rows updated by momentum from teacher batch means, never by gradient.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::slm::TokenLabels;

/// Per-token probability rows for a batch: row i*L + j is token j of image i.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProbBlock {
    pub probs: Array2<f32>, // (B*L, K)
    pub tokens_per_image: usize,
    pub labels: Vec<TokenLabels>,
}

impl TokenProbBlock {
    pub fn batch(&self) -> usize {
        self.probs.nrows() / self.tokens_per_image
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, image: usize, token: usize) -> ndarray::ArrayView1<'_, f32> {
        self.probs.row(image * self.tokens_per_image + token)
    }
}

fn check_finite(logits: &Array2<f32>) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    Ok(())
}

/// Row-wise softmax of logits / tau_s.
pub fn student_probs(
    logits: &Array2<f32>,
    tau_s: f32,
    tokens_per_image: usize,
    labels: Vec<TokenLabels>,
) -> Result<TokenProbBlock> {
    if tau_s <= 0.0 {
        return Err(Error::Config(format!("tau_s must be positive, got {tau_s}")));
    }
    check_finite(logits)?;
    Ok(TokenProbBlock {
        probs: softmax_rows(logits, tau_s),
        tokens_per_image,
        labels,
    })
}

/// One Sinkhorn balance of a (rows x K) slice: alternate column normalization
/// to mass rows/K and row normalization to 1, ending on the row step.
fn sinkhorn_slice(logits: &Array2<f32>, tau: f32, iters: usize) -> Result<Array2<f32>> {
    let rows = logits.nrows() as f32;
    let k = logits.ncols() as f32;
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(Error::Numerical("sinkhorn slice has no finite entry".into()));
    }
    let mut m = logits.mapv(|v| ((v - max) / tau).exp());
    for _ in 0..iters {
        // columns to mass rows/K
        let col_sums = m.sum_axis(Axis(0));
        for (mut col, &cs) in m.columns_mut().into_iter().zip(col_sums.iter()) {
            if cs > 0.0 {
                let target = rows / k;
                col.mapv_inplace(|v| v * target / cs);
            }
        }
        // rows to 1
        for mut row in m.rows_mut() {
            let rs = row.sum();
            if rs > 0.0 {
                row.mapv_inplace(|v| v / rs);
            }
        }
    }
    Ok(m)
}

/// Teacher probabilities via Sinkhorn-Knopp.
pub fn teacher_probs(
    logits: &Array2<f32>,
    tau_t: f32,
    iters: usize,
    position_wise: bool,
    tokens_per_image: usize,
    labels: Vec<TokenLabels>,
) -> Result<TokenProbBlock> {
    if tau_t <= 0.0 {
        return Err(Error::Config(format!("tau_t must be positive, got {tau_t}")));
    }
    if iters == 0 {
        return Err(Error::Config("sinkhorn iterations must be >= 1".into()));
    }
    check_finite(logits)?;
    let l = tokens_per_image;
    let batch = logits.nrows() / l;
    let probs = if position_wise {
        let mut out = Array2::<f32>::zeros(logits.raw_dim());
        let mut slice = Array2::<f32>::zeros((batch, logits.ncols()));
        for j in 0..l {
            for i in 0..batch {
                slice.row_mut(i).assign(&logits.row(i * l + j));
            }
            let balanced = sinkhorn_slice(&slice, tau_t, iters)?;
            for i in 0..batch {
                out.row_mut(i * l + j).assign(&balanced.row(i));
            }
        }
        out
    } else {
        sinkhorn_slice(logits, tau_t, iters)?
    };
    Ok(TokenProbBlock {
        probs,
        tokens_per_image,
        labels,
    })
}

/// L x K matrix of per-position probability prototypes with momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub c: Array2<f32>, // (L, K)
    pub momentum: f32,
    pub step: u64,
}

impl PrototypeBank {
    pub fn new(l: usize, k: usize, momentum: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "prototype momentum must be in [0,1], got {momentum}"
            )));
        }
        Ok(PrototypeBank {
            c: Array2::zeros((l, k)),
            momentum,
            step: 0,
        })
    }

    /// Momentum update from a teacher block of real normal images.
    pub fn update(&mut self, teacher: &TokenProbBlock) -> Result<()> {
        let l = self.c.nrows();
        let k = self.c.ncols();
        if teacher.tokens_per_image != l || teacher.k() != k {
            return Err(Error::Integrity(format!(
                "teacher block ({}, {}) does not match bank ({l}, {k})",
                teacher.tokens_per_image,
                teacher.k()
            )));
        }
        let batch = teacher.batch();
        let mut means = Array2::<f32>::zeros((l, k));
        for j in 0..l {
            let mut acc = Array1::<f32>::zeros(k);
            for i in 0..batch {
                acc += &teacher.row(i, j);
            }
            acc.mapv_inplace(|v| v / batch as f32);
            means.row_mut(j).assign(&acc);
        }
        if self.step == 0 {
            self.c = means;
        } else {
            let m = self.momentum;
            self.c.zip_mut_with(&means, |c, &q| *c = m * *c + (1.0 - m) * q);
        }
        self.step += 1;
        Ok(())
    }
}

/// Disjoint partition of a block's tokens at each position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSplit {
    /// image indices of normal tokens at each position j
    pub normal: Vec<Vec<usize>>,
    /// image indices of abnormal tokens at each position j
    pub abnormal: Vec<Vec<usize>>,
}

impl TokenSplit {
    pub fn normal_count(&self, j: usize) -> usize {
        self.normal[j].len()
    }

    pub fn abnormal_count(&self, j: usize) -> usize {
        self.abnormal[j].len()
    }

    pub fn total_normal(&self) -> usize {
        self.normal.iter().map(Vec::len).sum()
    }
}

/// Split tokens by their labels; B+_j + B-_j = B at every position.
pub fn split_tokens(block: &TokenProbBlock) -> TokenSplit {
    let l = block.tokens_per_image;
    let batch = block.batch();
    let mut normal = vec![Vec::new(); l];
    let mut abnormal = vec![Vec::new(); l];
    for (i, lab) in block.labels.iter().enumerate().take(batch) {
        for (j, &ab) in lab.labels.iter().enumerate() {
            if ab {
                abnormal[j].push(i);
            } else {
                normal[j].push(i);
            }
        }
    }
    TokenSplit { normal, abnormal }
}

/// Column masses of the per-position B x K slice after the column step of a
/// final extra round (the pre-row-normalization balance used by tests).
pub fn sinkhorn_column_masses(
    logits: &Array2<f32>,
    tau: f32,
    iters: usize,
) -> Result<Array1<f32>> {
    // run iters-1 full rounds plus one column step
    let rows = logits.nrows() as f32;
    let k = logits.ncols() as f32;
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut m = logits.mapv(|v| ((v - max) / tau).exp());
    for round in 0..iters {
        let col_sums = m.sum_axis(Axis(0));
        for (mut col, &cs) in m.columns_mut().into_iter().zip(col_sums.iter()) {
            if cs > 0.0 {
                col.mapv_inplace(|v| v * (rows / k) / cs);
            }
        }
        if round + 1 == iters {
            break; // measure before the final row step
        }
        for mut row in m.rows_mut() {
            let rs = row.sum();
            if rs > 0.0 {
                row.mapv_inplace(|v| v / rs);
            }
        }
    }
    Ok(m.sum_axis(Axis(0)))
}
