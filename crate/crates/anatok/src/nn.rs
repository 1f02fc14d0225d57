//! Minimal dense NN primitives with explicit forward/backward passes.
//!
//! Everything is f32 on row-major ndarray buffers. Gradients are accumulated
//! into mirror structs of the same shape as the parameters, and whole
//! parameter trees can be round-tripped through a flat f32 vector (used by
//! the optimizer, EMA updates and checkpointing).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f32 = 1e-5;

/// Flat serialization of a parameter tree in a fixed field order.
pub trait FlatIo {
    fn len_flat(&self) -> usize;
    fn write_flat(&self, out: &mut Vec<f32>);
    fn read_flat(&mut self, src: &[f32], pos: &mut usize);
    /// 1.0 where decoupled weight decay applies (linear weight matrices),
    /// 0.0 for biases, norm parameters, positional embeddings and the
    /// mask token; same layout as `write_flat`.
    fn write_decay_mask(&self, out: &mut Vec<f32>);

    fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len_flat());
        self.write_flat(&mut out);
        out
    }

    fn decay_mask(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len_flat());
        self.write_decay_mask(&mut out);
        out
    }

    fn from_flat(&mut self, src: &[f32]) {
        let mut pos = 0;
        self.read_flat(src, &mut pos);
        assert_eq!(pos, src.len(), "flat buffer length mismatch");
    }
}

impl FlatIo for Array1<f32> {
    fn len_flat(&self) -> usize {
        self.len()
    }
    fn write_flat(&self, out: &mut Vec<f32>) {
        out.extend(self.iter());
    }
    fn read_flat(&mut self, src: &[f32], pos: &mut usize) {
        for v in self.iter_mut() {
            *v = src[*pos];
            *pos += 1;
        }
    }
    fn write_decay_mask(&self, out: &mut Vec<f32>) {
        out.extend(std::iter::repeat(0.0).take(self.len()));
    }
}

impl FlatIo for Array2<f32> {
    fn len_flat(&self) -> usize {
        self.len()
    }
    fn write_flat(&self, out: &mut Vec<f32>) {
        out.extend(self.iter());
    }
    fn read_flat(&mut self, src: &[f32], pos: &mut usize) {
        for v in self.iter_mut() {
            *v = src[*pos];
            *pos += 1;
        }
    }
    // bare matrices in a parameter tree are positional embeddings
    fn write_decay_mask(&self, out: &mut Vec<f32>) {
        out.extend(std::iter::repeat(0.0).take(self.len()));
    }
}

macro_rules! flat_io_fields {
    ($ty:ty, $($field:ident),+) => {
        impl FlatIo for $ty {
            fn len_flat(&self) -> usize {
                0 $(+ self.$field.len_flat())+
            }
            fn write_flat(&self, out: &mut Vec<f32>) {
                $(self.$field.write_flat(out);)+
            }
            fn read_flat(&mut self, src: &[f32], pos: &mut usize) {
                $(self.$field.read_flat(src, pos);)+
            }
            fn write_decay_mask(&self, out: &mut Vec<f32>) {
                $(self.$field.write_decay_mask(out);)+
            }
        }
    };
}
pub(crate) use flat_io_fields;

impl<T: FlatIo> FlatIo for Vec<T> {
    fn len_flat(&self) -> usize {
        self.iter().map(FlatIo::len_flat).sum()
    }
    fn write_flat(&self, out: &mut Vec<f32>) {
        for item in self {
            item.write_flat(out);
        }
    }
    fn read_flat(&mut self, src: &[f32], pos: &mut usize) {
        for item in self {
            item.read_flat(src, pos);
        }
    }
    fn write_decay_mask(&self, out: &mut Vec<f32>) {
        for item in self {
            item.write_decay_mask(out);
        }
    }
}

/// Truncated normal: resample anything beyond two sigma.
pub fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f32) -> f32 {
    loop {
        let u1: f32 = rng.gen_range(1e-7..1.0f32);
        let u2: f32 = rng.gen_range(0.0..1.0f32);
        let n = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
        if n.abs() <= 2.0 {
            return sigma * n;
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f32>, // (d_in, d_out)
    pub b: Array1<f32>,
}

impl FlatIo for Linear {
    fn len_flat(&self) -> usize {
        self.w.len_flat() + self.b.len_flat()
    }
    fn write_flat(&self, out: &mut Vec<f32>) {
        self.w.write_flat(out);
        self.b.write_flat(out);
    }
    fn read_flat(&mut self, src: &[f32], pos: &mut usize) {
        self.w.read_flat(src, pos);
        self.b.read_flat(src, pos);
    }
    fn write_decay_mask(&self, out: &mut Vec<f32>) {
        out.extend(std::iter::repeat(1.0).take(self.w.len()));
        out.extend(std::iter::repeat(0.0).take(self.b.len()));
    }
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Array2::zeros((d_in, d_out)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn xavier(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f32).sqrt();
        Linear {
            w: Array2::from_shape_fn((d_in, d_out), |_| rng.gen_range(-bound..bound)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.w) + &self.b
    }

    /// Returns dL/dx; accumulates dL/dw, dL/db into `grad`.
    pub fn backward(&self, x: &Array2<f32>, dy: &Array2<f32>, grad: &mut Linear) -> Array2<f32> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub g: Array1<f32>,
    pub b: Array1<f32>,
}

flat_io_fields!(LayerNorm, g, b);

pub struct LayerNormCache {
    pub xhat: Array2<f32>,
    pub inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            g: Array1::ones(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            g: Array1::zeros(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let n = x.ncols() as f32;
        let mut xhat = x.clone();
        let mut inv_std = Array1::<f32>::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mu = row.sum() / n;
            row.mapv_inplace(|v| v - mu);
            let var = row.iter().map(|&v| v * v).sum::<f32>() / n;
            *is = 1.0 / (var + LN_EPS).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.g + &self.b;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f32>,
        grad: &mut LayerNorm,
    ) -> Array2<f32> {
        let n = dy.ncols() as f32;
        grad.g += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.b += &dy.sum_axis(Axis(0));
        let mut dx = Array2::<f32>::zeros(dy.raw_dim());
        for ((dyr, xr), (mut dxr, &is)) in dy
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(dx.rows_mut().into_iter().zip(cache.inv_std.iter()))
        {
            // dxhat = dy * g
            let mut m1 = 0.0f32;
            let mut m2 = 0.0f32;
            for ((&d, &x), &g) in dyr.iter().zip(xr.iter()).zip(self.g.iter()) {
                let dxh = d * g;
                m1 += dxh;
                m2 += dxh * x;
            }
            m1 /= n;
            m2 /= n;
            for (((dst, &d), &x), &g) in dxr
                .iter_mut()
                .zip(dyr.iter())
                .zip(xr.iter())
                .zip(self.g.iter())
            {
                *dst = is * (d * g - m1 - x * m2);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;

pub fn gelu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        let inner = GELU_C * (v + GELU_A * v * v * v);
        let t = inner.tanh();
        let sech2 = 1.0 - t * t;
        let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * sech2 * dinner;
    }
    dx
}

/// Row-wise softmax of `x / tau` with max subtraction.
pub fn softmax_rows(x: &Array2<f32>, tau: f32) -> Array2<f32> {
    let mut out = x.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Given p = softmax(x / tau) and dL/dp, return dL/dx.
pub fn softmax_rows_backward(p: &Array2<f32>, dp: &Array2<f32>, tau: f32) -> Array2<f32> {
    let mut dx = Array2::<f32>::zeros(p.raw_dim());
    for ((pr, dpr), mut dxr) in p
        .rows()
        .into_iter()
        .zip(dp.rows())
        .zip(dx.rows_mut())
    {
        let dot: f32 = pr.iter().zip(dpr.iter()).map(|(&p, &d)| p * d).sum();
        for ((dst, &p), &d) in dxr.iter_mut().zip(pr.iter()).zip(dpr.iter()) {
            *dst = p * (d - dot) / tau;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over one image's L tokens
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub qkv: Linear,  // d -> 3d
    pub proj: Linear, // d -> d
    pub heads: usize,
}

impl FlatIo for Attention {
    fn len_flat(&self) -> usize {
        self.qkv.len_flat() + self.proj.len_flat()
    }
    fn write_flat(&self, out: &mut Vec<f32>) {
        self.qkv.write_flat(out);
        self.proj.write_flat(out);
    }
    fn read_flat(&mut self, src: &[f32], pos: &mut usize) {
        self.qkv.read_flat(src, pos);
        self.proj.read_flat(src, pos);
    }
    fn write_decay_mask(&self, out: &mut Vec<f32>) {
        self.qkv.write_decay_mask(out);
        self.proj.write_decay_mask(out);
    }
}

pub struct AttentionCache {
    pub x: Array2<f32>,   // (B*L, d) input
    pub qkv: Array2<f32>, // (B*L, 3d)
    /// per image, per head: softmax attention matrix (L, L)
    pub attn: Vec<Vec<Array2<f32>>>,
    pub concat: Array2<f32>, // (B*L, d) pre-projection
}

impl Attention {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Attention {
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            heads,
        }
    }

    pub fn xavier(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            qkv: Linear::xavier(dim, 3 * dim, rng),
            proj: Linear::xavier(dim, dim, rng),
            heads,
        }
    }

    /// `x` is (B*L, d); images are contiguous row blocks of length `l`.
    pub fn forward(&self, x: &Array2<f32>, l: usize) -> (Array2<f32>, AttentionCache) {
        let d = x.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let batch = x.nrows() / l;
        let qkv = self.qkv.forward(x);
        let mut concat = Array2::<f32>::zeros((x.nrows(), d));
        let mut attn = Vec::with_capacity(batch);
        for i in 0..batch {
            let rows = i * l..(i + 1) * l;
            let block = qkv.slice(ndarray::s![rows.clone(), ..]);
            let mut per_head = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = block.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let k = block.slice(ndarray::s![.., d + h * dh..d + (h + 1) * dh]);
                let v = block.slice(ndarray::s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut scores = q.dot(&k.t());
                scores.mapv_inplace(|s| s * scale);
                let a = softmax_rows(&scores, 1.0);
                let o = a.dot(&v);
                concat
                    .slice_mut(ndarray::s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&o);
                per_head.push(a);
            }
            attn.push(per_head);
        }
        let y = self.proj.forward(&concat);
        let cache = AttentionCache {
            x: x.clone(),
            qkv,
            attn,
            concat,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f32>,
        l: usize,
        grad: &mut Attention,
    ) -> Array2<f32> {
        let d = cache.x.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let batch = cache.x.nrows() / l;
        let dconcat = self.proj.backward(&cache.concat, dy, &mut grad.proj);
        let mut dqkv = Array2::<f32>::zeros(cache.qkv.raw_dim());
        for i in 0..batch {
            let rows = i * l..(i + 1) * l;
            let block = cache.qkv.slice(ndarray::s![rows.clone(), ..]);
            for h in 0..self.heads {
                let q = block.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                let k = block.slice(ndarray::s![.., d + h * dh..d + (h + 1) * dh]);
                let v = block.slice(ndarray::s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let a = &cache.attn[i][h];
                let do_ = dconcat.slice(ndarray::s![rows.clone(), h * dh..(h + 1) * dh]);
                let da = do_.dot(&v.t());
                let dv = a.t().dot(&do_);
                // softmax backward on each attention row
                let ds = softmax_rows_backward(a, &da, 1.0);
                let dq = ds.dot(&k).mapv(|s| s * scale);
                let dk = ds.t().dot(&q).mapv(|s| s * scale);
                dqkv.slice_mut(ndarray::s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&dq);
                dqkv.slice_mut(ndarray::s![rows.clone(), d + h * dh..d + (h + 1) * dh])
                    .assign(&dk);
                dqkv.slice_mut(ndarray::s![
                    rows.clone(),
                    2 * d + h * dh..2 * d + (h + 1) * dh
                ])
                .assign(&dv);
            }
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

// ---------------------------------------------------------------------------
// Pre-norm transformer block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear, // d -> 4d
    pub fc2: Linear, // 4d -> d
}

flat_io_fields!(Block, ln1, attn, ln2, fc1, fc2);

pub struct BlockCache {
    pub ln1: LayerNormCache,
    pub attn: AttentionCache,
    pub x1: Array2<f32>,
    pub ln2: LayerNormCache,
    pub h_pre: Array2<f32>, // fc1 output before GELU
    pub h_act: Array2<f32>, // GELU(h_pre)
    pub ln2_out: Array2<f32>,
}

impl Block {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Block {
            ln1: LayerNorm::zeros(dim),
            attn: Attention::zeros(dim, heads),
            ln2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, 4 * dim),
            fc2: Linear::zeros(4 * dim, dim),
        }
    }

    pub fn xavier(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::xavier(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::xavier(dim, 4 * dim, rng),
            fc2: Linear::xavier(4 * dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f32>, l: usize) -> (Array2<f32>, BlockCache) {
        let (n1, ln1_cache) = self.ln1.forward(x);
        let (attn_out, attn_cache) = self.attn.forward(&n1, l);
        let x1 = x + &attn_out;
        let (n2, ln2_cache) = self.ln2.forward(&x1);
        let h_pre = self.fc1.forward(&n2);
        let h_act = gelu(&h_pre);
        let mlp_out = self.fc2.forward(&h_act);
        let y = &x1 + &mlp_out;
        let cache = BlockCache {
            ln1: ln1_cache,
            attn: attn_cache,
            x1,
            ln2: ln2_cache,
            h_pre,
            h_act,
            ln2_out: n2,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: &Array2<f32>,
        l: usize,
        grad: &mut Block,
    ) -> Array2<f32> {
        let dh_act = self.fc2.backward(&cache.h_act, dy, &mut grad.fc2);
        let dh_pre = gelu_backward(&cache.h_pre, &dh_act);
        let dn2 = self.fc1.backward(&cache.ln2_out, &dh_pre, &mut grad.fc1);
        let mut dx1 = self.ln2.backward(&cache.ln2, &dn2, &mut grad.ln2);
        dx1 += dy;
        let dn1 = self.attn.backward(&cache.attn, &dx1, l, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dn1, &mut grad.ln1);
        dx += &dx1;
        dx
    }
}
