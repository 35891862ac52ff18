//! Residual convolutional denoiser on the periodic ring.
//!
//! The backbone is shared by the diffusion student and the quintile
//! baseline: an input projection over the conditioning channels, `depth`
//! residual blocks (channel norm -> silu -> circular conv -> +embedding
//! bias -> silu -> circular conv), and a normalized output head. The
//! embedding vector (noise level and/or seasonal phase) enters each
//! block as a learned per-channel bias, spatially uniform, so the whole
//! network is equivariant under cyclic shifts of the ring.
//!
//! Parameters live in one flat `Vec<f64>` addressed through [`Layout`];
//! gradients use the same layout, which keeps Adam, checkpointing,
//! freezing and finite-difference probing trivial.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

pub const NORM_EPS: f64 = 1e-5;

/// Architecture descriptor; shapes of every parameter array follow it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Ring length K.
    pub grid: usize,
    /// Input channels (noised state + conditioning history).
    pub in_channels: usize,
    /// Output channels (1 denoised field, or 5 class logits).
    pub out_channels: usize,
    /// Embedding inputs (c_noise, sin, cos) or (sin, cos).
    pub emb_inputs: usize,
    pub width: usize,
    pub depth: usize,
    /// Odd kernel size of every circular convolution.
    pub kernel: usize,
}

impl Arch {
    /// Diffusion student: 1 noised channel + 4-frame history, phase and
    /// noise-level embedding.
    pub fn student(grid: usize, width: usize, depth: usize, kernel: usize) -> Self {
        Arch {
            grid,
            in_channels: 1 + crate::targets::CONDITIONING_FRAMES,
            out_channels: 1,
            emb_inputs: 3,
            width,
            depth,
            kernel,
        }
    }

    /// Quintile classifier: history only, phase embedding, 5 logits.
    pub fn quantile(grid: usize, width: usize, depth: usize, kernel: usize) -> Self {
        Arch {
            grid,
            in_channels: crate::targets::CONDITIONING_FRAMES,
            out_channels: 5,
            emb_inputs: 2,
            width,
            depth,
            kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::config("kernel must be odd"));
        }
        if self.grid < self.kernel {
            return Err(Error::config("grid must be at least the kernel size"));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::config("width and depth must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Debug, Clone)]
pub struct BlockRanges {
    pub norm_scale: Range<usize>,
    pub norm_offset: Range<usize>,
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub emb_w: Range<usize>,
    pub emb_b: Range<usize>,
    pub conv2_w: Range<usize>,
}

/// Flat-buffer offsets of every parameter array.
///
/// The input projection and the second block convolution carry no bias:
/// their outputs only ever feed per-channel normalizations (directly or
/// through the residual sum), which remove per-channel constants, so
/// those biases would be exactly gradient-free.
#[derive(Debug, Clone)]
pub struct Layout {
    pub in_w: Range<usize>,
    pub emb1_w: Range<usize>,
    pub emb1_b: Range<usize>,
    pub emb2_w: Range<usize>,
    pub emb2_b: Range<usize>,
    pub blocks: Vec<BlockRanges>,
    pub out_scale: Range<usize>,
    pub out_offset: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(arch: &Arch) -> Self {
        let w = arch.width;
        let mut off = 0usize;
        let mut take = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let in_w = take(w * arch.in_channels * arch.kernel);
        let emb1_w = take(w * arch.emb_inputs);
        let emb1_b = take(w);
        let emb2_w = take(w * w);
        let emb2_b = take(w);
        let blocks = (0..arch.depth)
            .map(|_| BlockRanges {
                norm_scale: take(w),
                norm_offset: take(w),
                conv1_w: take(w * w * arch.kernel),
                conv1_b: take(w),
                emb_w: take(w * w),
                emb_b: take(w),
                conv2_w: take(w * w * arch.kernel),
            })
            .collect();
        let out_scale = take(w);
        let out_offset = take(w);
        let out_w = take(arch.out_channels * w * arch.kernel);
        let out_b = take(arch.out_channels);
        Layout {
            in_w,
            emb1_w,
            emb1_b,
            emb2_w,
            emb2_b,
            blocks,
            out_scale,
            out_offset,
            out_w,
            out_b,
            total: off,
        }
    }

    /// Every named array; block arrays get a `blockN.` prefix so tests
    /// can group probes by layer type.
    pub fn named_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("in_w".to_string(), self.in_w.clone()),
            ("emb1_w".to_string(), self.emb1_w.clone()),
            ("emb1_b".to_string(), self.emb1_b.clone()),
            ("emb2_w".to_string(), self.emb2_w.clone()),
            ("emb2_b".to_string(), self.emb2_b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.norm_scale"), b.norm_scale.clone()));
            out.push((format!("block{i}.norm_offset"), b.norm_offset.clone()));
            out.push((format!("block{i}.conv1_w"), b.conv1_w.clone()));
            out.push((format!("block{i}.conv1_b"), b.conv1_b.clone()));
            out.push((format!("block{i}.emb_w"), b.emb_w.clone()));
            out.push((format!("block{i}.emb_b"), b.emb_b.clone()));
            out.push((format!("block{i}.conv2_w"), b.conv2_w.clone()));
        }
        out.push(("out_scale".to_string(), self.out_scale.clone()));
        out.push(("out_offset".to_string(), self.out_offset.clone()));
        out.push(("out_w".to_string(), self.out_w.clone()));
        out.push(("out_b".to_string(), self.out_b.clone()));
        out
    }

    /// Ranges updated during fine-tuning: the input projection, the
    /// final output block and all normalization scales/offsets.
    pub fn finetune_trainable(&self) -> Vec<Range<usize>> {
        let mut out = vec![self.in_w.clone()];
        for b in &self.blocks {
            out.push(b.norm_scale.clone());
            out.push(b.norm_offset.clone());
        }
        out.push(self.out_scale.clone());
        out.push(self.out_offset.clone());
        out.push(self.out_w.clone());
        out.push(self.out_b.clone());
        out
    }
}

/// All learnable arrays of the network in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub arch: Arch,
    pub data: Vec<f64>,
}

impl NetParams {
    /// Seeded initialization: He-style weights, unit norm scales, zero
    /// biases. The output convolution starts at zero so the initial
    /// denoiser is the pure skip path (and the initial classifier is
    /// uniform); tests that probe gradients use `zero_out = false`.
    pub fn init(arch: Arch, seed: u64, zero_out: bool) -> Result<Self> {
        arch.validate()?;
        use rand_distr::{Distribution, Normal};
        let layout = arch.layout();
        let mut rng = crate::rng::stream_rng(seed, crate::rng::stream::TRAIN_INIT, 0);
        let mut data = vec![0.0; layout.total];

        let mut fill_normal = |range: &Range<usize>, std: f64, data: &mut Vec<f64>| {
            let dist = Normal::new(0.0, std).unwrap();
            for v in &mut data[range.clone()] {
                *v = dist.sample(&mut rng);
            }
        };

        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        fill_normal(&layout.in_w, he(arch.in_channels * arch.kernel), &mut data);
        fill_normal(&layout.emb1_w, he(arch.emb_inputs), &mut data);
        fill_normal(&layout.emb2_w, he(arch.width), &mut data);
        for b in &layout.blocks {
            data[b.norm_scale.clone()].fill(1.0);
            fill_normal(&b.conv1_w, he(arch.width * arch.kernel), &mut data);
            fill_normal(&b.emb_w, he(arch.width), &mut data);
            fill_normal(&b.conv2_w, he(arch.width * arch.kernel), &mut data);
        }
        data[layout.out_scale.clone()].fill(1.0);
        if !zero_out {
            fill_normal(&layout.out_w, he(arch.width * arch.kernel), &mut data);
        }
        let params = NetParams { arch, data };
        debug_assert!(params.all_finite());
        Ok(params)
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

/// Circular convolution: out[o][k] = b[o] + sum_{c,j} w[o][c][j] * in[c][(k+j-r) mod K].
/// An empty bias slice means no bias.
fn conv_forward(
    w: &[f64],
    b: &[f64],
    input: &[f64],
    out: &mut [f64],
    c_out: usize,
    c_in: usize,
    kernel: usize,
    k: usize,
) {
    let r = kernel / 2;
    for o in 0..c_out {
        let orow = &mut out[o * k..(o + 1) * k];
        orow.fill(if b.is_empty() { 0.0 } else { b[o] });
        for ci in 0..c_in {
            let irow = &input[ci * k..(ci + 1) * k];
            for j in 0..kernel {
                let wv = w[(o * c_in + ci) * kernel + j];
                let shift = (j + k - r) % k;
                let split = k - shift;
                for kk in 0..split {
                    orow[kk] += wv * irow[kk + shift];
                }
                for kk in split..k {
                    orow[kk] += wv * irow[kk + shift - k];
                }
            }
        }
    }
}

/// Gradients of a circular convolution. `din` may be empty when the
/// input gradient is not needed (first layer).
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    input: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    din: &mut [f64],
    c_out: usize,
    c_in: usize,
    kernel: usize,
    k: usize,
) {
    let r = kernel / 2;
    for o in 0..c_out {
        let dorow = &dout[o * k..(o + 1) * k];
        if !db.is_empty() {
            db[o] += dorow.iter().sum::<f64>();
        }
        for ci in 0..c_in {
            let irow = &input[ci * k..(ci + 1) * k];
            for j in 0..kernel {
                let shift = (j + k - r) % k;
                let split = k - shift;
                let mut acc = 0.0;
                for kk in 0..split {
                    acc += dorow[kk] * irow[kk + shift];
                }
                for kk in split..k {
                    acc += dorow[kk] * irow[kk + shift - k];
                }
                dw[(o * c_in + ci) * kernel + j] += acc;
            }
        }
    }
    if !din.is_empty() {
        for ci in 0..c_in {
            let drow = &mut din[ci * k..(ci + 1) * k];
            for o in 0..c_out {
                let dorow = &dout[o * k..(o + 1) * k];
                for j in 0..kernel {
                    let wv = w[(o * c_in + ci) * kernel + j];
                    // din[m] += wv * dout[(m - j + r) mod K]
                    let shift = (k + r - j % k) % k;
                    let split = k - shift;
                    for m in 0..split {
                        drow[m] += wv * dorow[m + shift];
                    }
                    for m in split..k {
                        drow[m] += wv * dorow[m + shift - k];
                    }
                }
            }
        }
    }
}

/// Per-channel normalization over the ring, then affine scale/offset.
/// Returns (normed, inv_sigma); output written to `out`.
fn norm_forward(
    input: &[f64],
    scale: &[f64],
    offset: &[f64],
    out: &mut [f64],
    normed: &mut [f64],
    inv_sigma: &mut [f64],
    width: usize,
    k: usize,
) {
    for c in 0..width {
        let row = &input[c * k..(c + 1) * k];
        let mu = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_sigma[c] = inv;
        for kk in 0..k {
            let n = (row[kk] - mu) * inv;
            normed[c * k + kk] = n;
            out[c * k + kk] = scale[c] * n + offset[c];
        }
    }
}

/// Backward of [`norm_forward`]; adds into dscale/doffset, writes dinput.
#[allow(clippy::too_many_arguments)]
fn norm_backward(
    dout: &[f64],
    normed: &[f64],
    inv_sigma: &[f64],
    scale: &[f64],
    dscale: &mut [f64],
    doffset: &mut [f64],
    dinput: &mut [f64],
    width: usize,
    k: usize,
) {
    let inv_k = 1.0 / k as f64;
    for c in 0..width {
        let d = &dout[c * k..(c + 1) * k];
        let n = &normed[c * k..(c + 1) * k];
        let mut sum_d = 0.0;
        let mut sum_dn = 0.0;
        for kk in 0..k {
            dscale[c] += d[kk] * n[kk];
            doffset[c] += d[kk];
            sum_d += d[kk];
            sum_dn += d[kk] * n[kk];
        }
        let mean_d = sum_d * inv_k;
        let mean_dn = sum_dn * inv_k;
        let g = scale[c] * inv_sigma[c];
        for kk in 0..k {
            dinput[c * k + kk] = g * (d[kk] - mean_d - n[kk] * mean_dn);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

// ---------------------------------------------------------------------------
// Whole-network forward / backward
// ---------------------------------------------------------------------------

/// Activations retained for the backward pass of one sample.
pub struct Cache {
    x: Vec<f64>,
    emb_in: Vec<f64>,
    e1_pre: Vec<f64>,
    e1: Vec<f64>,
    emb: Vec<f64>,
    blocks: Vec<BlockCache>,
    normed_o: Vec<f64>,
    inv_o: Vec<f64>,
    ao: Vec<f64>,
    so: Vec<f64>,
}

struct BlockCache {
    normed: Vec<f64>,
    inv: Vec<f64>,
    a: Vec<f64>,
    s1: Vec<f64>,
    c1: Vec<f64>,
    s2: Vec<f64>,
}

/// Forward pass. `x_channels` is `[in_channels x K]`, `emb_in` has
/// `emb_inputs` entries. Returns `[out_channels x K]` and the cache.
pub fn forward_cached(params: &NetParams, x_channels: &[f64], emb_in: &[f64]) -> (Vec<f64>, Cache) {
    let arch = &params.arch;
    let k = arch.grid;
    let w = arch.width;
    debug_assert_eq!(x_channels.len(), arch.in_channels * k);
    debug_assert_eq!(emb_in.len(), arch.emb_inputs);
    let layout = arch.layout();
    let p = &params.data;

    // Embedding MLP.
    let mut e1_pre = vec![0.0; w];
    for c in 0..w {
        let mut acc = p[layout.emb1_b.start + c];
        for e in 0..arch.emb_inputs {
            acc += p[layout.emb1_w.start + c * arch.emb_inputs + e] * emb_in[e];
        }
        e1_pre[c] = acc;
    }
    let e1: Vec<f64> = e1_pre.iter().map(|v| silu(*v)).collect();
    let mut emb = vec![0.0; w];
    for c in 0..w {
        let mut acc = p[layout.emb2_b.start + c];
        for e in 0..w {
            acc += p[layout.emb2_w.start + c * w + e] * e1[e];
        }
        emb[c] = acc;
    }

    // Input projection (biasless; see Layout docs).
    let mut h = vec![0.0; w * k];
    conv_forward(
        &p[layout.in_w.clone()],
        &[],
        x_channels,
        &mut h,
        w,
        arch.in_channels,
        arch.kernel,
        k,
    );

    // Residual blocks.
    let mut blocks = Vec::with_capacity(arch.depth);
    for b in &layout.blocks {
        let mut a = vec![0.0; w * k];
        let mut normed = vec![0.0; w * k];
        let mut inv = vec![0.0; w];
        norm_forward(
            &h,
            &p[b.norm_scale.clone()],
            &p[b.norm_offset.clone()],
            &mut a,
            &mut normed,
            &mut inv,
            w,
            k,
        );
        let s1: Vec<f64> = a.iter().map(|v| silu(*v)).collect();
        let mut c1 = vec![0.0; w * k];
        conv_forward(
            &p[b.conv1_w.clone()],
            &p[b.conv1_b.clone()],
            &s1,
            &mut c1,
            w,
            w,
            arch.kernel,
            k,
        );
        // Per-channel embedding bias, uniform across the ring.
        for c in 0..w {
            let mut eb = p[b.emb_b.start + c];
            for e in 0..w {
                eb += p[b.emb_w.start + c * w + e] * emb[e];
            }
            for kk in 0..k {
                c1[c * k + kk] += eb;
            }
        }
        let s2: Vec<f64> = c1.iter().map(|v| silu(*v)).collect();
        let mut c2 = vec![0.0; w * k];
        conv_forward(
            &p[b.conv2_w.clone()],
            &[],
            &s2,
            &mut c2,
            w,
            w,
            arch.kernel,
            k,
        );
        for (hv, cv) in h.iter_mut().zip(&c2) {
            *hv += cv;
        }
        blocks.push(BlockCache { normed, inv, a, s1, c1, s2 });
    }

    // Output head.
    let mut ao = vec![0.0; w * k];
    let mut normed_o = vec![0.0; w * k];
    let mut inv_o = vec![0.0; w];
    norm_forward(
        &h,
        &p[layout.out_scale.clone()],
        &p[layout.out_offset.clone()],
        &mut ao,
        &mut normed_o,
        &mut inv_o,
        w,
        k,
    );
    let so: Vec<f64> = ao.iter().map(|v| silu(*v)).collect();
    let mut out = vec![0.0; arch.out_channels * k];
    conv_forward(
        &p[layout.out_w.clone()],
        &p[layout.out_b.clone()],
        &so,
        &mut out,
        arch.out_channels,
        w,
        arch.kernel,
        k,
    );

    let cache = Cache {
        x: x_channels.to_vec(),
        emb_in: emb_in.to_vec(),
        e1_pre,
        e1,
        emb,
        blocks,
        normed_o,
        inv_o,
        ao,
        so,
    };
    (out, cache)
}

/// Forward pass without keeping activations.
pub fn forward(params: &NetParams, x_channels: &[f64], emb_in: &[f64]) -> Vec<f64> {
    forward_cached(params, x_channels, emb_in).0
}

/// Accumulate parameter gradients for one sample into `grad`, given the
/// gradient of the loss with respect to the network output.
pub fn backward(params: &NetParams, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
    let arch = &params.arch;
    let k = arch.grid;
    let w = arch.width;
    let layout = arch.layout();
    let p = &params.data;
    debug_assert_eq!(dout.len(), arch.out_channels * k);
    debug_assert_eq!(grad.len(), layout.total);

    // Output head.
    let mut dso = vec![0.0; w * k];
    {
        let (dw, rest) = split_two(grad, &layout.out_w, &layout.out_b);
        conv_backward(
            &p[layout.out_w.clone()],
            &cache.so,
            dout,
            dw,
            rest,
            &mut dso,
            arch.out_channels,
            w,
            arch.kernel,
            k,
        );
    }
    let dao: Vec<f64> = dso
        .iter()
        .zip(&cache.ao)
        .map(|(d, a)| d * dsilu(*a))
        .collect();
    let mut dh = vec![0.0; w * k];
    {
        let (dscale, doffset) = split_two(grad, &layout.out_scale, &layout.out_offset);
        norm_backward(
            &dao,
            &cache.normed_o,
            &cache.inv_o,
            &p[layout.out_scale.clone()],
            dscale,
            doffset,
            &mut dh,
            w,
            k,
        );
    }

    // Blocks in reverse; the residual skip adds dh into the block input.
    let mut demb = vec![0.0; w];
    for (bi, b) in layout.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        // Branch gradient = dh (residual output gradient).
        let mut ds2 = vec![0.0; w * k];
        conv_backward(
            &p[b.conv2_w.clone()],
            &bc.s2,
            &dh,
            &mut grad[b.conv2_w.clone()],
            &mut [],
            &mut ds2,
            w,
            w,
            arch.kernel,
            k,
        );
        let dc1: Vec<f64> = ds2
            .iter()
            .zip(&bc.c1)
            .map(|(d, c)| d * dsilu(*c))
            .collect();
        // Embedding bias gradient and its pull on the embedding vector.
        let deb: Vec<f64> = (0..w)
            .map(|c| dc1[c * k..(c + 1) * k].iter().sum())
            .collect();
        for c in 0..w {
            grad[b.emb_b.start + c] += deb[c];
            for e in 0..w {
                grad[b.emb_w.start + c * w + e] += deb[c] * cache.emb[e];
                demb[e] += deb[c] * p[b.emb_w.start + c * w + e];
            }
        }
        let mut ds1 = vec![0.0; w * k];
        {
            let (dw, db) = split_two(grad, &b.conv1_w, &b.conv1_b);
            conv_backward(
                &p[b.conv1_w.clone()],
                &bc.s1,
                &dc1,
                dw,
                db,
                &mut ds1,
                w,
                w,
                arch.kernel,
                k,
            );
        }
        let da: Vec<f64> = ds1
            .iter()
            .zip(&bc.a)
            .map(|(d, a)| d * dsilu(*a))
            .collect();
        let mut dh_norm = vec![0.0; w * k];
        {
            let (dscale, doffset) = split_two(grad, &b.norm_scale, &b.norm_offset);
            norm_backward(
                &da,
                &bc.normed,
                &bc.inv,
                &p[b.norm_scale.clone()],
                dscale,
                doffset,
                &mut dh_norm,
                w,
                k,
            );
        }
        for (h, n) in dh.iter_mut().zip(&dh_norm) {
            *h += n;
        }
    }

    // Input projection (biasless; input gradient not needed).
    conv_backward(
        &p[layout.in_w.clone()],
        &cache.x,
        &dh,
        &mut grad[layout.in_w.clone()],
        &mut [],
        &mut [],
        w,
        arch.in_channels,
        arch.kernel,
        k,
    );

    // Embedding MLP.
    for c in 0..w {
        grad[layout.emb2_b.start + c] += demb[c];
        for e in 0..w {
            grad[layout.emb2_w.start + c * w + e] += demb[c] * cache.e1[e];
        }
    }
    let mut de1 = vec![0.0; w];
    for e in 0..w {
        let mut acc = 0.0;
        for c in 0..w {
            acc += demb[c] * p[layout.emb2_w.start + c * w + e];
        }
        de1[e] = acc;
    }
    for c in 0..w {
        let dpre = de1[c] * dsilu(cache.e1_pre[c]);
        grad[layout.emb1_b.start + c] += dpre;
        for e in 0..arch.emb_inputs {
            grad[layout.emb1_w.start + c * arch.emb_inputs + e] += dpre * cache.emb_in[e];
        }
    }
}

/// Two disjoint mutable slices of the gradient buffer. The second range
/// must start after the first ends (true for every layout pair used).
fn split_two<'a>(
    grad: &'a mut [f64],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch() -> Arch {
        Arch::student(8, 6, 2, 3)
    }

    fn random_inputs(arch: &Arch, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = crate::rng::stream_rng(seed, 0xaa, 0);
        let x: Vec<f64> = (0..arch.in_channels * arch.grid)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let e: Vec<f64> = (0..arch.emb_inputs)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        (x, e)
    }

    /// Naive re-implementation straight from the architecture
    /// definition: explicit gather with modulo indexing, no shared code
    /// with the production path.
    fn naive_forward(params: &NetParams, x: &[f64], emb_in: &[f64]) -> Vec<f64> {
        let arch = &params.arch;
        let (k, w, kern) = (arch.grid, arch.width, arch.kernel);
        let r = kern / 2;
        let l = arch.layout();
        let p = &params.data;

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let silu = |v: f64| v * sig(v);

        let conv = |wts: &[f64], bias: &[f64], inp: &[f64], co: usize, ci: usize| -> Vec<f64> {
            let mut out = vec![0.0; co * k];
            for o in 0..co {
                for kk in 0..k {
                    let mut acc = if bias.is_empty() { 0.0 } else { bias[o] };
                    for c in 0..ci {
                        for j in 0..kern {
                            let idx = (kk + j + k - r) % k;
                            acc += wts[(o * ci + c) * kern + j] * inp[c * k + idx];
                        }
                    }
                    out[o * k + kk] = acc;
                }
            }
            out
        };
        let norm = |inp: &[f64], scale: &[f64], offset: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; w * k];
            for c in 0..w {
                let row = &inp[c * k..(c + 1) * k];
                let mu: f64 = row.iter().sum::<f64>() / k as f64;
                let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
                let sd = (var + NORM_EPS).sqrt();
                for kk in 0..k {
                    out[c * k + kk] = scale[c] * (row[kk] - mu) / sd + offset[c];
                }
            }
            out
        };

        let mut e1 = vec![0.0; w];
        for c in 0..w {
            let mut acc = p[l.emb1_b.start + c];
            for e in 0..arch.emb_inputs {
                acc += p[l.emb1_w.start + c * arch.emb_inputs + e] * emb_in[e];
            }
            e1[c] = silu(acc);
        }
        let mut emb = vec![0.0; w];
        for c in 0..w {
            let mut acc = p[l.emb2_b.start + c];
            for e in 0..w {
                acc += p[l.emb2_w.start + c * w + e] * e1[e];
            }
            emb[c] = acc;
        }

        let mut h = conv(&p[l.in_w.clone()], &[], x, w, arch.in_channels);
        for b in &l.blocks {
            let a = norm(&h, &p[b.norm_scale.clone()], &p[b.norm_offset.clone()]);
            let s1: Vec<f64> = a.iter().map(|v| silu(*v)).collect();
            let mut c1 = conv(&p[b.conv1_w.clone()], &p[b.conv1_b.clone()], &s1, w, w);
            for c in 0..w {
                let mut eb = p[b.emb_b.start + c];
                for e in 0..w {
                    eb += p[b.emb_w.start + c * w + e] * emb[e];
                }
                for kk in 0..k {
                    c1[c * k + kk] += eb;
                }
            }
            let s2: Vec<f64> = c1.iter().map(|v| silu(*v)).collect();
            let c2 = conv(&p[b.conv2_w.clone()], &[], &s2, w, w);
            for i in 0..w * k {
                h[i] += c2[i];
            }
        }
        let ao = norm(&h, &p[l.out_scale.clone()], &p[l.out_offset.clone()]);
        let so: Vec<f64> = ao.iter().map(|v| silu(*v)).collect();
        conv(&p[l.out_w.clone()], &p[l.out_b.clone()], &so, arch.out_channels, w)
    }

    #[test]
    fn forward_matches_naive_loop_oracle() {
        let arch = tiny_arch();
        let params = NetParams::init(arch, 1, false).unwrap();
        for seed in 0..3 {
            let (x, e) = random_inputs(&arch, seed);
            let ours = forward(&params, &x, &e);
            let naive = naive_forward(&params, &x, &e);
            for (a, b) in ours.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_shift_equivariant() {
        let arch = tiny_arch();
        let params = NetParams::init(arch, 2, false).unwrap();
        let (x, e) = random_inputs(&arch, 9);
        let k = arch.grid;
        let shift_channels = |v: &[f64], ch: usize| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for c in 0..ch {
                for kk in 0..k {
                    out[c * k + kk] = v[c * k + (kk + k - 1) % k];
                }
            }
            out
        };
        let y = forward(&params, &x, &e);
        let y_shift_input = forward(&params, &shift_channels(&x, arch.in_channels), &e);
        let y_shifted = shift_channels(&y, arch.out_channels);
        for (a, b) in y_shift_input.iter().zip(&y_shifted) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Analytic gradients against central finite differences on every
    /// parameter array, scalar objective sum(out^2)/2.
    #[test]
    fn backward_matches_finite_differences() {
        let arch = tiny_arch();
        let params = NetParams::init(arch, 3, false).unwrap();
        let (x, e) = random_inputs(&arch, 4);

        let loss = |p: &NetParams| -> f64 {
            let out = forward(p, &x, &e);
            0.5 * out.iter().map(|v| v * v).sum::<f64>()
        };

        let (out, cache) = forward_cached(&params, &x, &e);
        let mut grad = params.zeros_like();
        backward(&params, &cache, &out, &mut grad);

        let layout = arch.layout();
        let mut rng = crate::rng::stream_rng(5, 0xfd, 0);
        let h = 1e-5;
        for (name, range) in layout.named_ranges() {
            let len = range.end - range.start;
            for _ in 0..8.min(len) {
                let idx = range.start + rng.gen_range(0..len);
                let mut p_hi = params.clone();
                p_hi.data[idx] += h;
                let mut p_lo = params.clone();
                p_lo.data[idx] -= h;
                let fd = (loss(&p_hi) - loss(&p_lo)) / (2.0 * h);
                let a = grad[idx];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                let rel = (a - fd).abs() / denom;
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {a}, fd {fd}, rel {rel}");
            }
        }
    }

    #[test]
    fn layout_total_consistent() {
        let arch = tiny_arch();
        let layout = arch.layout();
        let named = layout.named_ranges();
        let sum: usize = named.iter().map(|(_, r)| r.end - r.start).sum();
        assert_eq!(sum, layout.total);
        // Ranges are contiguous and ordered.
        let mut pos = 0;
        for (_, r) in named {
            assert_eq!(r.start, pos);
            pos = r.end;
        }
    }
}
