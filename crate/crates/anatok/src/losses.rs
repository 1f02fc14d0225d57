//! Training objectives: structure-consistency and category-consistency
//! contrastive losses over token probability rows, and the weighted
//! restoration loss over decoded patches.
//!
//! Everything here runs in f64 so analytic gradients can be validated
//! against central finite differences to tight tolerances; the training
//! loop converts to and from its f32 tensors at the boundary. The
//! similarity kernel is f(q,c) = exp(-H(q,c)/tau) with cross-entropy H,
//! so f is 1 when the rows agree (up to the probability floor) and decays
//! as they diverge.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::slm::TokenLabels;

/// Floor applied inside every log so one-hot rows stay finite.
pub const PROB_FLOOR: f64 = 1e-8;

/// Cross-entropy H(q, c) = -sum_k q_k * log(max(c_k, floor)).
pub fn cross_entropy_sim(q: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> f64 {
    -q.iter()
        .zip(c.iter())
        .map(|(&qk, &ck)| qk * ck.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// f(q, c) = exp(-H(q, c) / tau), in (0, 1] for stochastic rows.
pub fn similarity_kernel(q: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>, tau: f64) -> f64 {
    (-cross_entropy_sim(q, c) / tau).exp()
}

fn softmax64(row: ArrayView1<'_, f64>, tau: f64) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = row.mapv(|v| ((v - max) / tau).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// dL/dz for z -> softmax(z / tau) = q, given dL/dq.
fn softmax64_backward(q: ArrayView1<'_, f64>, dq: ArrayView1<'_, f64>, tau: f64) -> Array1<f64> {
    let dot: f64 = q.iter().zip(dq.iter()).map(|(&a, &b)| a * b).sum();
    Array1::from_iter(q.iter().zip(dq.iter()).map(|(&qk, &dk)| qk * (dk - dot) / tau))
}

/// log(max(v, floor)) per element.
fn floored_log(row: ArrayView1<'_, f64>) -> Array1<f64> {
    row.mapv(|v| v.max(PROB_FLOOR).ln())
}

fn normal_indices(labels: &[TokenLabels], j: usize) -> (Vec<usize>, Vec<usize>) {
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for (i, lab) in labels.iter().enumerate() {
        if lab.labels[j] {
            abnormal.push(i);
        } else {
            normal.push(i);
        }
    }
    (normal, abnormal)
}

/// Structure-consistency loss over normal anchors: each normal token's row
/// is contrasted against its own position's prototype versus all others.
/// Returns (loss, dL/dprobs, anchor count). Gradients never touch the bank.
pub fn structure_loss(
    probs: &Array2<f64>,
    tokens_per_image: usize,
    labels: &[TokenLabels],
    bank: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, usize)> {
    let l = tokens_per_image;
    let k = probs.ncols();
    if bank.nrows() != l || bank.ncols() != k {
        return Err(Error::Integrity(format!(
            "bank shape ({}, {}) does not match tokens ({l}, {k})",
            bank.nrows(),
            bank.ncols()
        )));
    }
    let batch = probs.nrows() / l;
    // log(max(c_l, floor)) rows, reused by every anchor
    let log_bank: Vec<Array1<f64>> = bank.rows().into_iter().map(floored_log).collect();

    let mut loss = 0.0;
    let mut dprobs = Array2::<f64>::zeros(probs.raw_dim());
    let mut anchors = 0usize;
    for j in 0..l {
        for i in 0..batch {
            if labels[i].labels[j] {
                continue;
            }
            anchors += 1;
            let q = probs.row(i * l + j);
            // s_m = q . log c_m / tau; term = -(s_j - logsumexp_m s_m)
            let scores: Vec<f64> = log_bank
                .iter()
                .map(|lc| q.iter().zip(lc.iter()).map(|(&a, &b)| a * b).sum::<f64>() / tau)
                .collect();
            let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - smax).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += -(scores[j] - (smax + z.ln()));
            // d term/dq = -(log c_j - sum_m p_m log c_m) / tau
            let mut dq = log_bank[j].clone();
            for (m, lc) in log_bank.iter().enumerate() {
                let p = exps[m] / z;
                dq.zip_mut_with(lc, |d, &v| *d -= p * v);
            }
            dq.mapv_inplace(|v| -v / tau);
            dprobs.row_mut(i * l + j).zip_mut_with(&dq, |d, &g| *d += g);
        }
    }
    if anchors == 0 {
        return Ok((0.0, dprobs, 0));
    }
    let inv = 1.0 / anchors as f64;
    dprobs.mapv_inplace(|v| v * inv);
    Ok((loss * inv, dprobs, anchors))
}

/// Category-consistency loss: normal anchors are pulled toward the other
/// normal rows at their position and pushed from abnormal rows there.
///
/// The self-pair is excluded from the positive sum, so anchoring requires
/// at least two normal tokens at the position; positions with fewer are
/// skipped to keep every term finite. The abnormal-versus-prototype push
/// term applies to an anchor image's own abnormal token at the position,
/// which cannot exist here (one token per image and position), so its
/// contribution is structurally zero.
pub fn category_loss(
    probs: &Array2<f64>,
    tokens_per_image: usize,
    labels: &[TokenLabels],
    tau: f64,
) -> Result<(f64, Array2<f64>, usize)> {
    let l = tokens_per_image;
    let logs: Vec<Array1<f64>> = probs.rows().into_iter().map(floored_log).collect();
    let row = |i: usize, j: usize| probs.row(i * l + j);
    // f(q_x, q_y) via the precomputed floored log of q_y
    let sim = |x: ArrayView1<'_, f64>, ly: &Array1<f64>| -> f64 {
        (x.iter().zip(ly.iter()).map(|(&a, &b)| a * b).sum::<f64>() / tau).exp()
    };

    let mut loss = 0.0;
    let mut dprobs = Array2::<f64>::zeros(probs.raw_dim());
    let mut anchors = 0usize;
    for j in 0..l {
        let (normal, abnormal) = normal_indices(labels, j);
        if normal.len() < 2 {
            continue;
        }
        for &i in &normal {
            anchors += 1;
            let qi = row(i, j);
            let pos: Vec<(usize, f64)> = normal
                .iter()
                .filter(|&&b| b != i)
                .map(|&b| (b, sim(qi, &logs[b * l + j])))
                .collect();
            let neg: Vec<(usize, f64)> = abnormal
                .iter()
                .map(|&a| (a, sim(qi, &logs[a * l + j])))
                .collect();
            let sp: f64 = pos.iter().map(|&(_, f)| f).sum();
            let sn: f64 = neg.iter().map(|&(_, f)| f).sum();
            loss += (sp + sn).ln() - sp.ln();

            let d_total = 1.0 / (sp + sn);
            let d_pos = d_total - 1.0 / sp;
            // chain d term/d f into dq_i and dq_other for every pair
            for (&(b, f), coeff) in pos
                .iter()
                .zip(std::iter::repeat(d_pos))
                .chain(neg.iter().zip(std::iter::repeat(d_total)))
            {
                let other = b * l + j;
                let scale = coeff * f / tau;
                // d f/d q_i = f * log(q_other) / tau
                dprobs
                    .row_mut(i * l + j)
                    .zip_mut_with(&logs[other], |d, &v| *d += scale * v);
                // d f/d q_other,k = f * q_i,k / q_other,k / tau above the floor
                let qo = probs.row(other);
                let mut dst = dprobs.row_mut(other);
                for kk in 0..qi.len() {
                    if qo[kk] > PROB_FLOOR {
                        dst[kk] += scale * qi[kk] / qo[kk];
                    }
                }
            }
        }
    }
    if anchors == 0 {
        return Ok((0.0, dprobs, 0));
    }
    let inv = 1.0 / anchors as f64;
    dprobs.mapv_inplace(|v| v * inv);
    Ok((loss * inv, dprobs, anchors))
}

/// Joint contrastive objective on raw student logits: softmax at tau_s,
/// both losses, and the chained gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub l_stru: f64,
    pub l_cate: f64,
    pub d_logits: Array2<f64>,
    pub stru_anchors: usize,
    pub cate_anchors: usize,
}

pub fn contrastive_losses(
    logits: &Array2<f64>,
    tokens_per_image: usize,
    labels: &[TokenLabels],
    bank: &Array2<f64>,
    tau_s: f64,
    tau_f: f64,
    with_category: bool,
) -> Result<ContrastiveOutput> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite student logits".into()));
    }
    let mut probs = Array2::<f64>::zeros(logits.raw_dim());
    for (mut dst, src) in probs.rows_mut().into_iter().zip(logits.rows()) {
        dst.assign(&softmax64(src, tau_s));
    }
    let (l_stru, d_stru, stru_anchors) =
        structure_loss(&probs, tokens_per_image, labels, bank, tau_f)?;
    let (l_cate, d_cate, cate_anchors) = if with_category {
        category_loss(&probs, tokens_per_image, labels, tau_f)?
    } else {
        (0.0, Array2::zeros(probs.raw_dim()), 0)
    };
    let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
    for (idx, mut dst) in d_logits.rows_mut().into_iter().enumerate() {
        let dq = &d_stru.row(idx) + &d_cate.row(idx);
        dst.assign(&softmax64_backward(probs.row(idx), dq.view(), tau_s));
    }
    Ok(ContrastiveOutput {
        l_stru,
        l_cate,
        d_logits,
        stru_anchors,
        cate_anchors,
    })
}

/// Weighted restoration loss over patch rows: per-patch mean squared pixel
/// error, weighted beta on abnormal patches, averaged over all patches.
/// Returns (loss, dL/dy).
pub fn restoration_loss(
    y: &Array2<f64>,
    x: &Array2<f64>,
    labels: &[TokenLabels],
    tokens_per_image: usize,
    beta: f64,
) -> Result<(f64, Array2<f64>)> {
    if y.raw_dim() != x.raw_dim() {
        return Err(Error::Integrity(format!(
            "restoration shapes differ: y {:?} vs x {:?}",
            y.shape(),
            x.shape()
        )));
    }
    if beta < 1.0 {
        return Err(Error::Config(format!("beta must be >= 1, got {beta}")));
    }
    let l = tokens_per_image;
    let rows = y.nrows();
    let px = y.ncols() as f64;
    let mut loss = 0.0;
    let mut dy = Array2::<f64>::zeros(y.raw_dim());
    for r in 0..rows {
        let (i, j) = (r / l, r % l);
        let w = if labels[i].labels[j] { beta } else { 1.0 };
        let diff = &y.index_axis(Axis(0), r) - &x.index_axis(Axis(0), r);
        loss += w * diff.iter().map(|d| d * d).sum::<f64>() / px;
        let scale = w * 2.0 / (px * rows as f64);
        dy.row_mut(r).assign(&diff.mapv(|d| d * scale));
    }
    Ok((loss / rows as f64, dy))
}

/// Per-step scalar record of every objective term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_stru: f64,
    pub l_cate: f64,
    pub l_cst: f64,
    pub l_recon: f64,
    pub l_total: f64,
    pub stru_anchors: usize,
    pub cate_anchors: usize,
}

/// Unweighted sum of the parts, rejecting non-finite inputs by name.
pub fn total_loss(
    l_stru: f64,
    l_cate: f64,
    l_recon: f64,
    stru_anchors: usize,
    cate_anchors: usize,
) -> Result<LossBreakdown> {
    for (name, v) in [("l_stru", l_stru), ("l_cate", l_cate), ("l_recon", l_recon)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} is not finite: {v}")));
        }
    }
    let l_cst = l_stru + l_cate;
    Ok(LossBreakdown {
        l_stru,
        l_cate,
        l_cst,
        l_recon,
        l_total: l_cst + l_recon,
        stru_anchors,
        cate_anchors,
    })
}
