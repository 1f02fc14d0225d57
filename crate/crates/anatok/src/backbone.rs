//! Siamese ViT encoder, projection head, mask-token substitution, decoder
//! and EMA teacher update.
//!
//! Images are split into non-overlapping raster-order patches; token j always
//! corresponds to patch j. There is no class token: the losses and the
//! evaluation pool operate on the L image tokens directly.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{flat_io_fields, Block, BlockCache, FlatIo, LayerNorm, LayerNormCache, Linear};
use crate::nn::trunc_normal;
use crate::phantom::Image;
use crate::slm::TokenLabels;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelCfg {
    pub img_h: usize,
    pub img_w: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub head_hidden: usize,
    pub k: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        // desk scale
        ModelCfg {
            img_h: 64,
            img_w: 64,
            patch: 8,
            dim: 96,
            depth: 4,
            heads: 4,
            dec_dim: 96,
            dec_depth: 2,
            dec_heads: 4,
            head_hidden: 256,
            k: 64,
        }
    }
}

impl ModelCfg {
    pub fn full_scale() -> Self {
        ModelCfg {
            img_h: 224,
            img_w: 224,
            patch: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 8,
            head_hidden: 256,
            k: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.img_h, self.img_w, self.patch
            )));
        }
        if self.dim % self.heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Config("dim must be divisible by heads".into()));
        }
        if !(64..=256).contains(&self.k) {
            return Err(Error::Config(format!("K must be in [64,256], got {}", self.k)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }
}

/// Image -> (L, patch*patch) raster-order patch rows.
pub fn patchify(image: &Image, patch: usize) -> Result<Array2<f32>> {
    let (h, w) = image.pixels.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Integrity(format!(
            "image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::<f32>::zeros((gh * gw, patch * patch));
    for py in 0..gh {
        for px in 0..gw {
            let win = image
                .pixels
                .slice(s![py * patch..(py + 1) * patch, px * patch..(px + 1) * patch]);
            let mut row = out.row_mut(py * gw + px);
            for (dst, &v) in row.iter_mut().zip(win.iter()) {
                *dst = v;
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify` for a single image's (L, patch*patch) rows.
pub fn unpatchify(patches: &Array2<f32>, patch: usize, img_h: usize, img_w: usize) -> Image {
    let (gh, gw) = (img_h / patch, img_w / patch);
    let mut pixels = Array2::<f32>::zeros((img_h, img_w));
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut win =
                pixels.slice_mut(s![py * patch..(py + 1) * patch, px * patch..(px + 1) * patch]);
            for (dst, &v) in win.iter_mut().zip(row.iter()) {
                *dst = v;
            }
        }
    }
    Image::new(pixels)
}

// ---------------------------------------------------------------------------
// Parameter trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub pos: Array2<f32>, // (L, dim)
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

flat_io_fields!(EncoderParams, patch_embed, pos, blocks, ln_f);

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

flat_io_fields!(HeadParams, fc1, fc2);

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub adapter: Linear,  // dim -> dec_dim
    pub pos: Array2<f32>, // (L, dec_dim)
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out: Linear, // dec_dim -> patch*patch
}

flat_io_fields!(DecoderParams, adapter, pos, blocks, ln_f, out);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc: EncoderParams,
    pub head: HeadParams,
    pub dec: DecoderParams,
    pub mask_token: Array1<f32>, // (dim)
}

flat_io_fields!(ModelParams, enc, head, dec, mask_token);

/// EMA side: encoder plus projection head, blended from the student's.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams {
    pub enc: EncoderParams,
    pub head: HeadParams,
}

flat_io_fields!(TeacherParams, enc, head);

impl EncoderParams {
    pub fn zeros(cfg: &ModelCfg) -> Self {
        EncoderParams {
            patch_embed: Linear::zeros(cfg.patch_pixels(), cfg.dim),
            pos: Array2::zeros((cfg.tokens(), cfg.dim)),
            blocks: (0..cfg.depth)
                .map(|_| Block::zeros(cfg.dim, cfg.heads))
                .collect(),
            ln_f: LayerNorm::zeros(cfg.dim),
        }
    }

    pub fn init(cfg: &ModelCfg, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            patch_embed: Linear::xavier(cfg.patch_pixels(), cfg.dim, rng),
            pos: Array2::from_shape_fn((cfg.tokens(), cfg.dim), |_| trunc_normal(rng, 0.02)),
            blocks: (0..cfg.depth)
                .map(|_| Block::xavier(cfg.dim, cfg.heads, rng))
                .collect(),
            ln_f: LayerNorm::new(cfg.dim),
        }
    }
}

impl HeadParams {
    pub fn zeros(cfg: &ModelCfg) -> Self {
        HeadParams {
            fc1: Linear::zeros(cfg.dim, cfg.head_hidden),
            fc2: Linear::zeros(cfg.head_hidden, cfg.k),
        }
    }

    pub fn init(cfg: &ModelCfg, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            fc1: Linear::xavier(cfg.dim, cfg.head_hidden, rng),
            fc2: Linear::xavier(cfg.head_hidden, cfg.k, rng),
        }
    }
}

impl DecoderParams {
    pub fn zeros(cfg: &ModelCfg) -> Self {
        DecoderParams {
            adapter: Linear::zeros(cfg.dim, cfg.dec_dim),
            pos: Array2::zeros((cfg.tokens(), cfg.dec_dim)),
            blocks: (0..cfg.dec_depth)
                .map(|_| Block::zeros(cfg.dec_dim, cfg.dec_heads))
                .collect(),
            ln_f: LayerNorm::zeros(cfg.dec_dim),
            out: Linear::zeros(cfg.dec_dim, cfg.patch_pixels()),
        }
    }

    pub fn init(cfg: &ModelCfg, rng: &mut ChaCha8Rng) -> Self {
        DecoderParams {
            adapter: Linear::xavier(cfg.dim, cfg.dec_dim, rng),
            pos: Array2::from_shape_fn((cfg.tokens(), cfg.dec_dim), |_| trunc_normal(rng, 0.02)),
            blocks: (0..cfg.dec_depth)
                .map(|_| Block::xavier(cfg.dec_dim, cfg.dec_heads, rng))
                .collect(),
            ln_f: LayerNorm::new(cfg.dec_dim),
            out: Linear::xavier(cfg.dec_dim, cfg.patch_pixels(), rng),
        }
    }
}

impl ModelParams {
    pub fn zeros(cfg: &ModelCfg) -> Self {
        ModelParams {
            enc: EncoderParams::zeros(cfg),
            head: HeadParams::zeros(cfg),
            dec: DecoderParams::zeros(cfg),
            mask_token: Array1::zeros(cfg.dim),
        }
    }

    pub fn init(cfg: &ModelCfg, rng: &mut ChaCha8Rng) -> Self {
        ModelParams {
            enc: EncoderParams::init(cfg, rng),
            head: HeadParams::init(cfg, rng),
            dec: DecoderParams::init(cfg, rng),
            mask_token: Array1::from_shape_fn(cfg.dim, |_| trunc_normal(rng, 0.02)),
        }
    }

    pub fn teacher_view(&self) -> TeacherParams {
        TeacherParams {
            enc: self.enc.clone(),
            head: self.head.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

pub struct EncoderTrace {
    pub patches: Array2<f32>, // (B*L, p*p)
    pub blocks: Vec<BlockCache>,
    pub ln_f: LayerNormCache,
    pub batch: usize,
}

/// Encode a batch; images are stacked as contiguous row blocks of L tokens.
pub fn encode_batch(
    params: &EncoderParams,
    images: &[&Image],
    cfg: &ModelCfg,
) -> Result<(Array2<f32>, EncoderTrace)> {
    let l = cfg.tokens();
    if params.pos.nrows() != l {
        return Err(Error::Integrity(format!(
            "positional embedding has {} rows, expected {l}",
            params.pos.nrows()
        )));
    }
    let mut patches = Array2::<f32>::zeros((images.len() * l, cfg.patch_pixels()));
    for (i, img) in images.iter().enumerate() {
        if img.height() != cfg.img_h || img.width() != cfg.img_w {
            return Err(Error::Integrity(format!(
                "image {}x{} does not match configured {}x{}",
                img.height(),
                img.width(),
                cfg.img_h,
                cfg.img_w
            )));
        }
        patches
            .slice_mut(s![i * l..(i + 1) * l, ..])
            .assign(&patchify(img, cfg.patch)?);
    }
    let mut x = params.patch_embed.forward(&patches);
    for i in 0..images.len() {
        let mut block = x.slice_mut(s![i * l..(i + 1) * l, ..]);
        block += &params.pos;
    }
    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (y, cache) = blk.forward(&x, l);
        caches.push(cache);
        x = y;
    }
    let (z, ln_cache) = params.ln_f.forward(&x);
    Ok((
        z,
        EncoderTrace {
            patches,
            blocks: caches,
            ln_f: ln_cache,
            batch: images.len(),
        },
    ))
}

/// Deterministic evaluation-mode forward; the trace is discarded.
pub fn encode(params: &EncoderParams, image: &Image, cfg: &ModelCfg) -> Result<Array2<f32>> {
    let (z, _) = encode_batch(params, &[image], cfg)?;
    Ok(z)
}

/// Backpropagate dL/dz through the encoder, accumulating parameter grads.
pub fn encode_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    dz: &Array2<f32>,
    cfg: &ModelCfg,
    grad: &mut EncoderParams,
) {
    let l = cfg.tokens();
    let mut dx = params.ln_f.backward(&trace.ln_f, dz, &mut grad.ln_f);
    for ((blk, cache), gblk) in params
        .blocks
        .iter()
        .zip(trace.blocks.iter())
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        dx = blk.backward(cache, &dx, l, gblk);
    }
    // positional embedding gradient: sum over batch per position
    for i in 0..trace.batch {
        grad.pos += &dx.slice(s![i * l..(i + 1) * l, ..]);
    }
    params
        .patch_embed
        .backward(&trace.patches, &dx, &mut grad.patch_embed);
}

/// Project token features to K-dimensional logits, token-independent.
pub fn project(head: &HeadParams, z: &Array2<f32>) -> Result<(Array2<f32>, HeadTrace)> {
    if z.ncols() != head.fc1.w.nrows() {
        return Err(Error::Integrity(format!(
            "token width {} does not match head input {}",
            z.ncols(),
            head.fc1.w.nrows()
        )));
    }
    let h_pre = head.fc1.forward(z);
    let h_act = crate::nn::gelu(&h_pre);
    let logits = head.fc2.forward(&h_act);
    Ok((
        logits,
        HeadTrace {
            z: z.clone(),
            h_pre,
            h_act,
        },
    ))
}

pub struct HeadTrace {
    pub z: Array2<f32>,
    pub h_pre: Array2<f32>,
    pub h_act: Array2<f32>,
}

pub fn project_backward(
    head: &HeadParams,
    trace: &HeadTrace,
    dlogits: &Array2<f32>,
    grad: &mut HeadParams,
) -> Array2<f32> {
    let dh_act = head.fc2.backward(&trace.h_act, dlogits, &mut grad.fc2);
    let dh_pre = crate::nn::gelu_backward(&trace.h_pre, &dh_act);
    head.fc1.backward(&trace.z, &dh_pre, &mut grad.fc1)
}

/// Replace labeled rows with the mask token; other rows are bit-identical.
pub fn substitute_mask_tokens(
    z: &Array2<f32>,
    labels: &[TokenLabels],
    z_mask: &Array1<f32>,
) -> Result<Array2<f32>> {
    let l = if labels.is_empty() {
        0
    } else {
        labels[0].len()
    };
    if labels.iter().any(|lab| lab.len() != l) || labels.len() * l != z.nrows() {
        return Err(Error::Integrity(format!(
            "label shape does not match {} token rows",
            z.nrows()
        )));
    }
    if z.ncols() != z_mask.len() {
        return Err(Error::Integrity("mask token width mismatch".into()));
    }
    let mut out = z.clone();
    for (i, lab) in labels.iter().enumerate() {
        for (j, &abnormal) in lab.labels.iter().enumerate() {
            if abnormal {
                out.row_mut(i * l + j).assign(z_mask);
            }
        }
    }
    Ok(out)
}

pub struct DecoderTrace {
    pub z_in: Array2<f32>,
    pub adapted: Array2<f32>,
    pub blocks: Vec<BlockCache>,
    pub ln_f: LayerNormCache,
    pub ln_out: Array2<f32>,
    pub batch: usize,
}

/// Decode token features to per-token patch pixels (B*L, patch*patch).
pub fn decode(
    dec: &DecoderParams,
    z: &Array2<f32>,
    cfg: &ModelCfg,
) -> Result<(Array2<f32>, DecoderTrace)> {
    if z.ncols() != dec.adapter.w.nrows() {
        return Err(Error::Integrity(format!(
            "decoder input width {} does not match adapter {}",
            z.ncols(),
            dec.adapter.w.nrows()
        )));
    }
    let l = cfg.tokens();
    if z.nrows() % l != 0 {
        return Err(Error::Integrity("token rows not a multiple of L".into()));
    }
    let batch = z.nrows() / l;
    let adapted = dec.adapter.forward(z);
    let mut x = adapted.clone();
    for i in 0..batch {
        let mut block = x.slice_mut(s![i * l..(i + 1) * l, ..]);
        block += &dec.pos;
    }
    let mut caches = Vec::with_capacity(dec.blocks.len());
    for blk in &dec.blocks {
        let (y, cache) = blk.forward(&x, l);
        caches.push(cache);
        x = y;
    }
    let (ln_out, ln_cache) = dec.ln_f.forward(&x);
    let y = dec.out.forward(&ln_out);
    Ok((
        y,
        DecoderTrace {
            z_in: z.clone(),
            adapted,
            blocks: caches,
            ln_f: ln_cache,
            ln_out,
            batch,
        },
    ))
}

/// Backpropagate dL/dy through the decoder; returns dL/dz (decoder input).
pub fn decode_backward(
    dec: &DecoderParams,
    trace: &DecoderTrace,
    dy: &Array2<f32>,
    cfg: &ModelCfg,
    grad: &mut DecoderParams,
) -> Array2<f32> {
    let l = cfg.tokens();
    let dln_out = dec.out.backward(&trace.ln_out, dy, &mut grad.out);
    let mut dx = dec.ln_f.backward(&trace.ln_f, &dln_out, &mut grad.ln_f);
    for ((blk, cache), gblk) in dec
        .blocks
        .iter()
        .zip(trace.blocks.iter())
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        dx = blk.backward(cache, &dx, l, gblk);
    }
    for i in 0..trace.batch {
        grad.pos += &dx.slice(s![i * l..(i + 1) * l, ..]);
    }
    dec.adapter.backward(&trace.z_in, &dx, &mut grad.adapter)
}

/// Teacher update: every parameter p_T <- lambda * p_T + (1 - lambda) * p_S.
pub fn ema_blend<T: FlatIo>(teacher: &mut T, student: &T, lambda: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
    }
    if teacher.len_flat() != student.len_flat() {
        return Err(Error::Integrity(
            "teacher/student parameter trees differ in shape".into(),
        ));
    }
    if lambda == 1.0 {
        return Ok(()); // bit-exact identity
    }
    let mut t = teacher.to_flat();
    let s = student.to_flat();
    if lambda == 0.0 {
        teacher.from_flat(&s);
        return Ok(());
    }
    for (tv, &sv) in t.iter_mut().zip(s.iter()) {
        *tv = lambda * *tv + (1.0 - lambda) * sv;
    }
    teacher.from_flat(&t);
    Ok(())
}

/// Pool token features by global average over L tokens (one row per image).
pub fn global_average_pool(z: &Array2<f32>, l: usize) -> Array2<f32> {
    let batch = z.nrows() / l;
    let mut out = Array2::<f32>::zeros((batch, z.ncols()));
    for i in 0..batch {
        let block = z.slice(s![i * l..(i + 1) * l, ..]);
        out.row_mut(i).assign(&block.mean_axis(Axis(0)).unwrap());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn tiny_cfg() -> ModelCfg {
        ModelCfg {
            img_h: 16,
            img_w: 16,
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            head_hidden: 16,
            k: 64,
        }
    }

    fn tiny_phantom(seed: u64) -> Image {
        let cfg = PhantomConfig {
            height: 16,
            width: 16,
            patch: 4,
            ..Default::default()
        };
        generate_phantom(seed, &cfg).unwrap()
    }

    #[test]
    fn encode_is_deterministic_with_expected_shape() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(1, "bb-test", &[]);
        let params = EncoderParams::init(&cfg, &mut rng);
        let img = tiny_phantom(0);
        let a = encode(&params, &img, &cfg).unwrap();
        let b = encode(&params, &img, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (cfg.tokens(), cfg.dim));
    }

    #[test]
    fn permuting_input_patches_changes_corresponding_tokens() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(2, "bb-test", &[]);
        let params = EncoderParams::init(&cfg, &mut rng);
        let img = tiny_phantom(1);
        let mut swapped = img.clone();
        // swap patches 0 and 3 (top-left corner with patch at grid (0,3))
        for y in 0..4 {
            for x in 0..4 {
                let a = swapped.pixels[[y, x]];
                swapped.pixels[[y, x]] = swapped.pixels[[y, 12 + x]];
                swapped.pixels[[y, 12 + x]] = a;
            }
        }
        let za = encode(&params, &img, &cfg).unwrap();
        let zb = encode(&params, &swapped, &cfg).unwrap();
        assert_ne!(za.row(0), zb.row(0));
        assert_ne!(za.row(3), zb.row(3));
    }

    #[test]
    fn patch_embedding_is_token_local_pre_attention() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(3, "bb-test", &[]);
        let params = EncoderParams::init(&cfg, &mut rng);
        let img = tiny_phantom(2);
        let mut zeroed = img.clone();
        zeroed.pixels.slice_mut(s![4..8, 4..8]).fill(0.0); // patch j=5
        let pa = params.patch_embed.forward(&patchify(&img, 4).unwrap());
        let pb = params.patch_embed.forward(&patchify(&zeroed, 4).unwrap());
        for j in 0..cfg.tokens() {
            if j == 5 {
                assert_ne!(pa.row(j), pb.row(j));
            } else {
                assert_eq!(pa.row(j), pb.row(j));
            }
        }
    }

    #[test]
    fn patchify_unpatchify_round_trip() {
        let img = tiny_phantom(3);
        let patches = patchify(&img, 4).unwrap();
        let back = unpatchify(&patches, 4, 16, 16);
        assert_eq!(img.pixels, back.pixels);
    }

    #[test]
    fn project_shapes_and_constant_rows() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(4, "bb-test", &[]);
        let head = HeadParams::init(&cfg, &mut rng);
        let z = Array2::<f32>::from_elem((6, cfg.dim), 0.3);
        let (logits, _) = project(&head, &z).unwrap();
        assert_eq!(logits.dim(), (6, cfg.k));
        for j in 1..6 {
            assert_eq!(logits.row(0), logits.row(j));
        }
        let zero_head = HeadParams::zeros(&cfg);
        let (zl, _) = project(&zero_head, &z).unwrap();
        assert!(zl.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn substitution_changes_exactly_labeled_rows() {
        let cfg = tiny_cfg();
        let l = cfg.tokens();
        let mut rng = derive_rng(5, "bb-test", &[]);
        let z = Array2::from_shape_fn((2 * l, cfg.dim), |_| rng.gen_range(-1.0..1.0f32));
        let z_mask = Array1::from_shape_fn(cfg.dim, |_| rng.gen_range(-1.0..1.0f32));
        for _ in 0..100 {
            let labels: Vec<TokenLabels> = (0..2)
                .map(|_| TokenLabels {
                    labels: (0..l).map(|_| rng.gen_bool(0.3)).collect(),
                })
                .collect();
            let out = substitute_mask_tokens(&z, &labels, &z_mask).unwrap();
            for i in 0..2 {
                for j in 0..l {
                    if labels[i].labels[j] {
                        assert_eq!(out.row(i * l + j), z_mask.view());
                    } else {
                        assert_eq!(out.row(i * l + j), z.row(i * l + j));
                    }
                }
            }
            // idempotent for fixed labels
            let again = substitute_mask_tokens(&out, &labels, &z_mask).unwrap();
            assert_eq!(out, again);
        }
        // all labels false -> identity
        let none = vec![TokenLabels::all_normal(l), TokenLabels::all_normal(l)];
        assert_eq!(substitute_mask_tokens(&z, &none, &z_mask).unwrap(), z);
    }

    #[test]
    fn decode_shape_matches_image() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(6, "bb-test", &[]);
        let dec = DecoderParams::init(&cfg, &mut rng);
        let z = Array2::from_shape_fn((cfg.tokens(), cfg.dim), |_| rng.gen_range(-1.0..1.0f32));
        let (y, _) = decode(&dec, &z, &cfg).unwrap();
        assert_eq!(y.dim(), (cfg.tokens(), cfg.patch_pixels()));
        let img = unpatchify(&y, cfg.patch, cfg.img_h, cfg.img_w);
        assert_eq!(img.pixels.dim(), (16, 16));
        let (y2, _) = decode(&dec, &z, &cfg).unwrap();
        assert_eq!(y, y2);
    }

    /// Finite-difference probe: moving the mask token moves the decoded
    /// output whenever any label is true.
    #[test]
    fn decoder_output_depends_on_mask_token() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(7, "bb-test", &[]);
        let dec = DecoderParams::init(&cfg, &mut rng);
        let z = Array2::from_shape_fn((cfg.tokens(), cfg.dim), |_| rng.gen_range(-1.0..1.0f32));
        let mut z_mask = Array1::from_shape_fn(cfg.dim, |_| rng.gen_range(-1.0..1.0f32));
        let mut labels = TokenLabels::all_normal(cfg.tokens());
        labels.labels[2] = true;
        let run = |zm: &Array1<f32>| {
            let zt = substitute_mask_tokens(&z, std::slice::from_ref(&labels), zm).unwrap();
            decode(&dec, &zt, &cfg).unwrap().0.sum()
        };
        let f0 = run(&z_mask);
        z_mask[0] += 1e-2;
        let f1 = run(&z_mask);
        assert!(
            ((f1 - f0) / 1e-2).abs() > 1e-4,
            "finite difference {} too small",
            (f1 - f0) / 1e-2
        );
    }

    #[test]
    fn ema_endpoints_are_exact() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(8, "bb-test", &[]);
        let student = ModelParams::init(&cfg, &mut rng);
        let mut rng2 = derive_rng(9, "bb-test", &[]);
        let other = ModelParams::init(&cfg, &mut rng2);

        let mut teacher = other.teacher_view();
        ema_blend(&mut teacher, &student.teacher_view(), 1.0).unwrap();
        assert_eq!(teacher, other.teacher_view());

        ema_blend(&mut teacher, &student.teacher_view(), 0.0).unwrap();
        assert_eq!(teacher, student.teacher_view());
    }

    #[test]
    fn ema_arithmetic_and_convexity() {
        let mut t = Array1::from_vec(vec![1.0f32, -2.0]);
        let s = Array1::from_vec(vec![0.0f32, 2.0]);
        ema_blend(&mut t, &s, 0.99).unwrap();
        assert!((t[0] - 0.99).abs() < 1e-7);
        // every updated value lies between teacher and student
        assert!(t[1] >= -2.0 && t[1] <= 2.0);
    }

    #[test]
    fn encoder_backward_matches_finite_diff() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(10, "bb-test", &[]);
        let params = EncoderParams::init(&cfg, &mut rng);
        let img = tiny_phantom(4);
        let weights =
            Array2::from_shape_fn((cfg.tokens(), cfg.dim), |_| rng.gen_range(-0.5..0.5f32));
        let (_, trace) = encode_batch(&params, &[&img], &cfg).unwrap();
        let mut grad = EncoderParams::zeros(&cfg);
        encode_backward(&params, &trace, &weights, &cfg, &mut grad);
        // check the positional-embedding gradient entries by finite differences
        let mut p2 = params.clone();
        let h = 1e-3f32;
        for &(r, c) in &[(0usize, 0usize), (3, 5), (7, 2)] {
            p2.pos[[r, c]] = params.pos[[r, c]] + h;
            let zp = (encode(&p2, &img, &cfg).unwrap() * &weights).sum();
            p2.pos[[r, c]] = params.pos[[r, c]] - h;
            let zm = (encode(&p2, &img, &cfg).unwrap() * &weights).sum();
            p2.pos[[r, c]] = params.pos[[r, c]];
            let fd = (zp - zm) / (2.0 * h);
            let an = grad.pos[[r, c]];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2) < 3e-2,
                "pos[{r},{c}]: fd {fd} vs analytic {an}"
            );
        }
    }
}
