//! The reconstruction network: a stack of parameter-free attention blocks, a
//! time-index MLP feeding a cross-attention block, an output head predicting
//! the noise, and the data-consistency projection that pins measured k-space.
//!
//! The full operator is `R = DC . x0_from_eps . LHAN`: the network predicts
//! the injected noise, the schedule inverts the forward marginal to an image
//! estimate, and the DC layer replaces its k-space at sampled locations with
//! the measurements. Backward passes are written by hand; the DC/FFT/coil
//! chain is linear, so its gradient is the same projection applied with zero
//! measurements.

mod model;
mod tensor;

pub use model::{BackboneModel, Catb, ModelConfig, PabBlock};
pub use tensor::{sigmoid, symmetric_activation, Conv2d, Linear, Tensor};

use crate::error::{DmsmError, Result};
use crate::kspace::{
    apply_coils, combine_coils, fft2c, ifft2c, zero_fill_recon, CoilSensitivities, ComplexImage,
    KSpaceData, SamplingMask,
};
use crate::schedule::NoiseSchedule;
use num_complex::Complex64;

const NORM_GUARD: f64 = 1e-8;

/// Pack a single-coil complex image into a `[2, h, w]` real tensor.
pub fn complex_to_channels(img: &ComplexImage) -> Tensor {
    assert_eq!(img.coils(), 1);
    let (h, w) = (img.height(), img.width());
    let mut t = Tensor::zeros(&[2, h, w]);
    for (i, z) in img.coil(0).iter().enumerate() {
        t.data[i] = z.re;
        t.data[h * w + i] = z.im;
    }
    t
}

/// Inverse of [`complex_to_channels`].
pub fn channels_to_complex(t: &Tensor) -> ComplexImage {
    assert_eq!(t.shape[0], 2);
    let (h, w) = (t.shape[1], t.shape[2]);
    let mut img = ComplexImage::zeros(1, h, w);
    for i in 0..h * w {
        img.coil_mut(0)[i] = Complex64::new(t.data[i], t.data[h * w + i]);
    }
    img
}

// ---------------------------------------------------------------------------
// Parameter-free attention block
// ---------------------------------------------------------------------------

pub(crate) struct PabCache {
    s1: Tensor,
    h_map: Tensor,
    v_map: Tensor,
}

fn sigmoid_slice(src: &[f64], dst: &mut [f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = sigmoid(s);
    }
}

fn pab_forward_cached(block: &PabBlock, o_prev: &Tensor) -> (Tensor, PabCache) {
    let a1 = block.conv1.forward(o_prev);
    let mut s1 = Tensor::zeros(&a1.shape);
    sigmoid_slice(&a1.data, &mut s1.data);
    let a2 = block.conv2.forward(&s1);
    let mut h_map = Tensor::zeros(&a2.shape);
    sigmoid_slice(&a2.data, &mut h_map.data);
    let mut v_map = Tensor::zeros(&h_map.shape);
    for (v, &h) in v_map.data.iter_mut().zip(&h_map.data) {
        *v = symmetric_activation(h);
    }
    let mut out = Tensor::zeros(&h_map.shape);
    for i in 0..out.data.len() {
        // O = (O_prev + H) * V
        out.data[i] = (o_prev.data[i] + h_map.data[i]) * v_map.data[i];
    }
    (out, PabCache { s1, h_map, v_map })
}

/// One parameter-free attention block:
/// `H = sig(W2 * sig(W1 * O)), V = sig(H) - 0.5, out = (O + H) .* V`.
pub fn pab_forward(block: &PabBlock, o_prev: &Tensor) -> Result<Tensor> {
    if o_prev.shape[0] != block.conv1.in_channels() {
        return Err(DmsmError::ShapeMismatch(format!(
            "pab_forward: input has {} channels, block expects {}",
            o_prev.shape[0],
            block.conv1.in_channels()
        )));
    }
    Ok(pab_forward_cached(block, o_prev).0)
}

/// Returns the gradient with respect to `o_prev`, accumulating parameter
/// gradients into the matching block of `grads`.
fn pab_backward(
    block: &PabBlock,
    o_prev: &Tensor,
    cache: &PabCache,
    grad_out: &Tensor,
    gblock: &mut PabBlock,
) -> Tensor {
    let n = grad_out.data.len();
    let mut g_h = vec![0.0; n];
    let mut g_o_prev_direct = vec![0.0; n];
    for i in 0..n {
        let v = cache.v_map.data[i];
        let u = o_prev.data[i] + cache.h_map.data[i];
        let g_u = grad_out.data[i] * v;
        // dV/dH = sig'(H) with sig(H) = V + 0.5
        let g_v = grad_out.data[i] * u;
        g_h[i] = g_u + g_v * (v + 0.5) * (0.5 - v);
        g_o_prev_direct[i] = g_u;
    }
    // H = sig(A2): dH/dA2 = H (1 - H)
    let mut g_a2 = Tensor::zeros(&grad_out.shape);
    for i in 0..n {
        let h = cache.h_map.data[i];
        g_a2.data[i] = g_h[i] * h * (1.0 - h);
    }
    let g_s1 = block
        .conv2
        .backward(&cache.s1, &g_a2, &mut gblock.conv2.w, &mut gblock.conv2.b, true)
        .unwrap();
    let mut g_a1 = Tensor::zeros(&g_s1.shape);
    for i in 0..n {
        let s = cache.s1.data[i];
        g_a1.data[i] = g_s1.data[i] * s * (1.0 - s);
    }
    let mut g_o_prev = block
        .conv1
        .backward(o_prev, &g_a1, &mut gblock.conv1.w, &mut gblock.conv1.b, true)
        .unwrap();
    for i in 0..n {
        g_o_prev.data[i] += g_o_prev_direct[i];
    }
    g_o_prev
}

// ---------------------------------------------------------------------------
// Time-index MLP
// ---------------------------------------------------------------------------

pub(crate) struct TimeMlpCache {
    /// Layer inputs: `inputs[l]` feeds layer `l`; `inputs[layers]` is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers (ReLU masks for backward).
    pre: Vec<Vec<f64>>,
}

fn time_mlp_forward(mlp: &[Linear], t_norm: f64) -> TimeMlpCache {
    let layers = mlp.len();
    let mut inputs = Vec::with_capacity(layers + 1);
    let mut pre = Vec::with_capacity(layers);
    inputs.push(vec![t_norm]);
    for (l, lin) in mlp.iter().enumerate() {
        let z = lin.forward(inputs.last().unwrap());
        pre.push(z.clone());
        let a = if l + 1 < layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            z
        };
        inputs.push(a);
    }
    TimeMlpCache { inputs, pre }
}

fn time_mlp_backward(mlp: &[Linear], cache: &TimeMlpCache, grad_out: &[f64], gmlp: &mut [Linear]) {
    let layers = mlp.len();
    let mut g = grad_out.to_vec();
    for l in (0..layers).rev() {
        if l + 1 < layers {
            for (gi, &z) in g.iter_mut().zip(&cache.pre[l]) {
                if z <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        g = mlp[l].backward(&cache.inputs[l], &g, &mut gmlp[l].w, &mut gmlp[l].b);
    }
}

/// Embed a diffusion time index through the MLP: input is `t / T`, output a
/// latent vector of the configured width.
pub fn time_embed(t: usize, t_steps: usize, mlp: &[Linear]) -> Result<Vec<f64>> {
    if t < 1 || t > t_steps {
        return Err(DmsmError::InvalidArgument(format!(
            "time index {t} outside 1..={t_steps}"
        )));
    }
    let cache = time_mlp_forward(mlp, t as f64 / t_steps as f64);
    Ok(cache.inputs.last().unwrap().clone())
}

// ---------------------------------------------------------------------------
// Cross-attention transformer block
// ---------------------------------------------------------------------------

/// Fixed sinusoidal positional encoding for `count` tokens of width `dim`.
fn positional_encoding(count: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; count * dim];
    for pos in 0..count {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Cross-attention weights of the image tokens against the single time token.
/// A softmax over one key is identically one, so this exists to make that
/// property checkable rather than to influence the output.
pub fn catb_attention_weights(catb: &Catb, o_n: &Tensor, w_l: &[f64]) -> Vec<f64> {
    let (c, h, w) = (o_n.shape[0], o_n.shape[1], o_n.shape[2]);
    let tokens = h * w;
    let pe = positional_encoding(tokens, c);
    let mut key_in = w_l.to_vec();
    for (k, &b) in key_in.iter_mut().zip(&catb.pe_bias.data) {
        *k += b;
    }
    let key = catb.key.forward(&key_in);
    let scale = 1.0 / (catb.key.out_dim() as f64).sqrt();
    let mut weights = Vec::with_capacity(tokens);
    for tok in 0..tokens {
        let mut q_in = vec![0.0; c];
        for ch in 0..c {
            q_in[ch] = o_n.plane(ch)[tok] + pe[tok * c + ch];
        }
        let q = catb.query.forward(&q_in);
        let logit: f64 = q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() * scale;
        // Stabilized softmax over the singleton key axis.
        let m = logit;
        weights.push((logit - m).exp() / (logit - m).exp());
    }
    weights
}

pub(crate) struct CatbCache {
    sigma: Vec<f64>,
    guarded: Vec<bool>,
    normed: Tensor,
    v_att: Vec<f64>,
    scale: Vec<f64>,
}

fn catb_forward_cached(catb: &Catb, o_n: &Tensor, w_l: &[f64]) -> (Tensor, CatbCache) {
    let (c, h, w) = (o_n.shape[0], o_n.shape[1], o_n.shape[2]);
    let hw = h * w;
    // att = softmax(QK^T / sqrt(n)) V over a single key token, which reduces
    // to V(w_l); the query/key projections cannot reach the output and carry
    // exactly zero gradient.
    let v_att = catb.value.forward(w_l);
    let scale = catb.alpha.forward(&v_att);

    let mut sigma = vec![0.0; c];
    let mut guarded = vec![false; c];
    let mut normed = Tensor::zeros(&o_n.shape);
    for ch in 0..c {
        let plane = o_n.plane(ch);
        let m: f64 = plane.iter().sum::<f64>() / hw as f64;
        let var: f64 = plane.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
        let s = var.sqrt();
        sigma[ch] = s;
        if s < NORM_GUARD {
            guarded[ch] = true; // channel passes through via the residual
            continue;
        }
        let dst = normed.plane_mut(ch);
        for (d, &x) in dst.iter_mut().zip(plane) {
            *d = (x - m) / s;
        }
    }

    let mut out = o_n.clone();
    for ch in 0..c {
        if guarded[ch] {
            continue;
        }
        let n_plane = normed.plane(ch).to_vec();
        let dst = out.plane_mut(ch);
        for (d, nv) in dst.iter_mut().zip(n_plane) {
            *d += scale[ch] * nv;
        }
    }
    (out, CatbCache { sigma, guarded, normed, v_att, scale })
}

/// Cross-attention transformer block: modulates the channel-normalized
/// feature map by a per-channel scale derived from the time embedding and
/// adds the residual.
pub fn catb_forward(catb: &Catb, o_n: &Tensor, w_l: &[f64]) -> Result<Tensor> {
    if o_n.shape.len() != 3 || o_n.shape[0] != catb.alpha.out_dim() {
        return Err(DmsmError::ShapeMismatch(format!(
            "catb_forward: feature map {:?} vs alpha out {}",
            o_n.shape,
            catb.alpha.out_dim()
        )));
    }
    if w_l.len() != catb.value.in_dim() {
        return Err(DmsmError::ShapeMismatch(format!(
            "catb_forward: embedding len {} vs value in {}",
            w_l.len(),
            catb.value.in_dim()
        )));
    }
    Ok(catb_forward_cached(catb, o_n, w_l).0)
}

/// Backward through the CATB. Returns `(grad_o_n, grad_w_l)`.
fn catb_backward(
    catb: &Catb,
    o_n: &Tensor,
    w_l: &[f64],
    cache: &CatbCache,
    grad_out: &Tensor,
    gcatb: &mut Catb,
) -> (Tensor, Vec<f64>) {
    let (c, h, w) = (o_n.shape[0], o_n.shape[1], o_n.shape[2]);
    let hw = h * w;
    let mut g_on = grad_out.clone(); // residual path
    let mut g_scale = vec![0.0; c];
    for ch in 0..c {
        if cache.guarded[ch] {
            continue;
        }
        let g_oc = grad_out.plane(ch);
        let normed = cache.normed.plane(ch);
        g_scale[ch] = g_oc.iter().zip(normed).map(|(a, b)| a * b).sum();

        // Normalization backward: x_hat = (x - mu) / sigma with population
        // statistics over the spatial axis.
        let s = cache.sigma[ch];
        let g_n: Vec<f64> = g_oc.iter().map(|&g| g * cache.scale[ch]).collect();
        let mean_gn: f64 = g_n.iter().sum::<f64>() / hw as f64;
        let mean_gn_xhat: f64 =
            g_n.iter().zip(normed).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        let dst = g_on.plane_mut(ch);
        for i in 0..hw {
            dst[i] += (g_n[i] - mean_gn - normed[i] * mean_gn_xhat) / s;
        }
    }
    let g_v = catb.alpha.backward(&cache.v_att, &g_scale, &mut gcatb.alpha.w, &mut gcatb.alpha.b);
    let g_wl = catb.value.backward(w_l, &g_v, &mut gcatb.value.w, &mut gcatb.value.b);
    // query/key/pe_bias receive no gradient through the singleton softmax
    (g_on, g_wl)
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

pub struct LhanCache {
    x_in: Tensor,
    /// chain[0] is the lifted input, chain[i] the output of PAB i.
    chain: Vec<Tensor>,
    pab: Vec<PabCache>,
    concat: Tensor,
    o_n: Tensor,
    w_l: Vec<f64>,
    mlp: TimeMlpCache,
    catb: CatbCache,
    catb_out: Tensor,
}

/// Forward pass of the network: 4-channel input (noisy image stacked on the
/// zero-filled condition) to a 2-channel noise estimate, with every
/// intermediate needed by the backward pass cached.
pub fn lhan_forward(
    model: &BackboneModel,
    x_in: &Tensor,
    t: usize,
    t_steps: usize,
) -> Result<(Tensor, LhanCache)> {
    if x_in.shape.len() != 3 || x_in.shape[0] != 4 {
        return Err(DmsmError::ShapeMismatch(format!(
            "lhan_forward expects [4, h, w] input, got {:?}",
            x_in.shape
        )));
    }
    if t < 1 || t > t_steps {
        return Err(DmsmError::InvalidArgument(format!(
            "time index {t} outside 1..={t_steps}"
        )));
    }
    let cfg = model.config();
    let c = cfg.channels;
    let (h, w) = (x_in.shape[1], x_in.shape[2]);

    let o0 = model.input_conv.forward(x_in);
    let mut chain = Vec::with_capacity(cfg.n_pab + 1);
    let mut pab_caches = Vec::with_capacity(cfg.n_pab);
    chain.push(o0);
    for block in &model.pab {
        let (out, cache) = pab_forward_cached(block, chain.last().unwrap());
        chain.push(out);
        pab_caches.push(cache);
    }

    let sources = cfg.concat_sources();
    let mut concat = Tensor::zeros(&[cfg.fuse_in_channels(), h, w]);
    if sources.is_empty() {
        concat.data.copy_from_slice(&chain[0].data);
    } else {
        for (slot, &idx) in sources.iter().enumerate() {
            concat.data[slot * c * h * w..(slot + 1) * c * h * w]
                .copy_from_slice(&chain[idx].data);
        }
    }
    let o_n = model.fuse_conv.forward(&concat);

    let mlp = time_mlp_forward(&model.time_mlp, t as f64 / t_steps as f64);
    let w_l = mlp.inputs.last().unwrap().clone();
    let (catb_out, catb_cache) = catb_forward_cached(&model.catb, &o_n, &w_l);
    let eps = model.head_conv.forward(&catb_out);

    Ok((
        eps,
        LhanCache {
            x_in: x_in.clone(),
            chain,
            pab: pab_caches,
            concat,
            o_n,
            w_l,
            mlp,
            catb: catb_cache,
            catb_out,
        },
    ))
}

/// Backward pass matching [`lhan_forward`]; accumulates into `grads`.
pub fn lhan_backward(
    model: &BackboneModel,
    cache: &LhanCache,
    grad_eps: &Tensor,
    grads: &mut BackboneModel,
) {
    let cfg = model.config();
    let c = cfg.channels;
    let (h, w) = (cache.x_in.shape[1], cache.x_in.shape[2]);

    let g_catb_out = model
        .head_conv
        .backward(&cache.catb_out, grad_eps, &mut grads.head_conv.w, &mut grads.head_conv.b, true)
        .unwrap();

    let (g_on, g_wl) =
        catb_backward(&model.catb, &cache.o_n, &cache.w_l, &cache.catb, &g_catb_out, &mut grads.catb);
    time_mlp_backward(&model.time_mlp, &cache.mlp, &g_wl, &mut grads.time_mlp);

    let g_concat = model
        .fuse_conv
        .backward(&cache.concat, &g_on, &mut grads.fuse_conv.w, &mut grads.fuse_conv.b, true)
        .unwrap();

    // Scatter concat gradient back onto chain outputs.
    let sources = cfg.concat_sources();
    let mut g_chain: Vec<Option<Tensor>> = vec![None; cache.chain.len()];
    if sources.is_empty() {
        let mut g = Tensor::zeros(&[c, h, w]);
        g.data.copy_from_slice(&g_concat.data);
        g_chain[0] = Some(g);
    } else {
        for (slot, &idx) in sources.iter().enumerate() {
            let mut g = Tensor::zeros(&[c, h, w]);
            g.data
                .copy_from_slice(&g_concat.data[slot * c * h * w..(slot + 1) * c * h * w]);
            g_chain[idx] = Some(g);
        }
    }

    // Walk the PAB chain in reverse, merging skip gradients.
    let mut g_flow: Option<Tensor> = None;
    for i in (0..cfg.n_pab).rev() {
        let g_out = match (g_flow.take(), g_chain[i + 1].take()) {
            (Some(mut a), Some(b)) => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += y;
                }
                a
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => Tensor::zeros(&[c, h, w]),
        };
        let g_in = pab_backward(
            &model.pab[i],
            &cache.chain[i],
            &cache.pab[i],
            &g_out,
            &mut grads.pab[i],
        );
        g_flow = Some(g_in);
    }
    let g_o0 = match (g_flow, g_chain[0].take()) {
        (Some(mut a), Some(b)) => {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
            a
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => Tensor::zeros(&[c, h, w]),
    };
    model.input_conv.backward(
        &cache.x_in,
        &g_o0,
        &mut grads.input_conv.w,
        &mut grads.input_conv.b,
        false,
    );
}

// ---------------------------------------------------------------------------
// Data-consistency layer and the full reconstruction operator
// ---------------------------------------------------------------------------

/// Replace the k-space of `x` with the measured data wherever the reference
/// was sampled:
/// `out = combine(ifft( fft(apply(x)) .* (1 - M) + y_ref ))`,
/// the projection mask being the mask `y_ref` was acquired under.
pub fn dc_layer(
    x: &ComplexImage,
    y_ref: &KSpaceData,
    coils: &CoilSensitivities,
) -> Result<ComplexImage> {
    let mut k = fft2c(&apply_coils(x, coils)?)?;
    let (n_coils, h, w) = k.shape();
    if y_ref.data().shape() != (n_coils, h, w) {
        return Err(DmsmError::ShapeMismatch(format!(
            "dc_layer: estimate k-space {:?} vs reference {:?}",
            k.shape(),
            y_ref.data().shape()
        )));
    }
    let grid = y_ref.mask().grid();
    for ci in 0..n_coils {
        let measured = y_ref.data().coil(ci);
        let plane = k.coil_mut(ci);
        for i in 0..h * w {
            if grid[i] == 1 {
                plane[i] = measured[i];
            }
        }
    }
    combine_coils(&ifft2c(&k)?, coils)
}

/// Linear part of the DC layer (measurements zeroed):
/// `combine(ifft((1 - M) .* fft(apply(x))))`. The operator is self-adjoint,
/// so this is also the gradient map of [`dc_layer`].
pub fn dc_project_null(
    x: &ComplexImage,
    mask: &SamplingMask,
    coils: &CoilSensitivities,
) -> Result<ComplexImage> {
    let mut k = fft2c(&apply_coils(x, coils)?)?;
    let (n_coils, h, w) = k.shape();
    let grid = mask.grid();
    for ci in 0..n_coils {
        let plane = k.coil_mut(ci);
        for i in 0..h * w {
            if grid[i] == 1 {
                plane[i] = Complex64::ZERO;
            }
        }
    }
    combine_coils(&ifft2c(&k)?, coils)
}

/// Output bundle of the backbone operator.
pub struct Reconstruction {
    /// DC-projected image estimate.
    pub x_hat: ComplexImage,
    /// Raw noise prediction (drives the diffusion loss).
    pub eps_hat: ComplexImage,
    /// Zero-filled condition image used as network input.
    pub condition: ComplexImage,
    /// Backward-pass cache, kept when training.
    pub cache: Option<LhanCache>,
}

/// Full reconstruction operator
/// `x_hat = DC( x0_from_eps( x_t, LHAN([x_t || zero_fill(y)], t) ), y )`.
pub fn backbone_reconstruct(
    model: &BackboneModel,
    x_t: &ComplexImage,
    y: &KSpaceData,
    coils: &CoilSensitivities,
    t: usize,
    sched: &NoiseSchedule,
    keep_cache: bool,
) -> Result<Reconstruction> {
    backbone_reconstruct_conditioned(model, x_t, y, y, coils, t, sched, keep_cache)
}

/// Reconstruction with distinct data-consistency and conditioning sources:
/// the network sees `zero_fill(y_cond)` while the DC projection always pins
/// the measured data of `y_dc`. The reverse sampler conditions on re-noised
/// measurements but must stay consistent with what was actually acquired.
#[allow(clippy::too_many_arguments)]
pub fn backbone_reconstruct_conditioned(
    model: &BackboneModel,
    x_t: &ComplexImage,
    y_dc: &KSpaceData,
    y_cond: &KSpaceData,
    coils: &CoilSensitivities,
    t: usize,
    sched: &NoiseSchedule,
    keep_cache: bool,
) -> Result<Reconstruction> {
    let y = y_dc;
    let condition = zero_fill_recon(y_cond, coils)?;
    if !condition.same_shape(x_t) {
        return Err(DmsmError::ShapeMismatch(format!(
            "backbone_reconstruct: x_t {:?} vs condition {:?}",
            x_t.shape(),
            condition.shape()
        )));
    }
    let (h, w) = (x_t.height(), x_t.width());
    let mut x_in = Tensor::zeros(&[4, h, w]);
    {
        let xt_t = complex_to_channels(x_t);
        let cond_t = complex_to_channels(&condition);
        x_in.data[..2 * h * w].copy_from_slice(&xt_t.data);
        x_in.data[2 * h * w..].copy_from_slice(&cond_t.data);
    }
    let (eps_tensor, cache) = lhan_forward(model, &x_in, t, sched.t_steps())?;
    let eps_hat = channels_to_complex(&eps_tensor);
    let x0_hat = sched.x0_from_eps(x_t, t, &eps_hat)?;
    let x_hat = if model.config().use_dc {
        dc_layer(&x0_hat, y, coils)?
    } else {
        x0_hat
    };
    Ok(Reconstruction {
        x_hat,
        eps_hat,
        condition,
        cache: keep_cache.then_some(cache),
    })
}

/// Pull a gradient on `x_hat` back to a gradient on `eps_hat` through the DC
/// projection and the marginal inversion (both linear in the estimate).
pub fn reconstruct_backward_to_eps(
    grad_x_hat: &ComplexImage,
    y_mask: &SamplingMask,
    coils: &CoilSensitivities,
    t: usize,
    sched: &NoiseSchedule,
    use_dc: bool,
) -> Result<ComplexImage> {
    let g_x0 = if use_dc {
        dc_project_null(grad_x_hat, y_mask, coils)?
    } else {
        grad_x_hat.clone()
    };
    let ab = sched.alpha_bar(t);
    Ok(g_x0.scaled(-(1.0 - ab).sqrt() / ab.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{generate_vd_mask, undersample};
    use crate::rng::{NormalSource, StreamKind};
    use crate::schedule::{build_schedule, ScheduleKind};

    fn filled(shape: &[usize], seed: u64) -> Tensor {
        let mut src = NormalSource::from_stream(seed, StreamKind::Init, 42);
        let mut t = Tensor::zeros(shape);
        src.fill(&mut t.data);
        t
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut src = NormalSource::from_stream(seed, StreamKind::Data, 11);
        let data = (0..h * w).map(|_| Complex64::new(src.next(), src.next())).collect();
        ComplexImage::new(1, h, w, data).unwrap()
    }

    #[test]
    fn pab_zero_weights_constant_chain() {
        // With zero convolutions and zero input: H = sig(0) = 0.5,
        // V = sig(0.5) - 0.5, O = 0.5 * V everywhere.
        let block = PabBlock { conv1: Conv2d::zeros(3, 3, 3), conv2: Conv2d::zeros(3, 3, 3) };
        let input = Tensor::zeros(&[3, 8, 8]);
        let out = pab_forward(&block, &input).unwrap();
        let v = sigmoid(0.5) - 0.5;
        let expect = 0.5 * v;
        assert!((expect - 0.0612296656009273).abs() < 1e-12);
        for &o in &out.data {
            assert!((o - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pab_attention_bounded_below_half() {
        let block = PabBlock {
            conv1: Conv2d { w: filled(&[2, 2, 3, 3], 1), b: filled(&[2], 2) },
            conv2: Conv2d { w: filled(&[2, 2, 3, 3], 3), b: filled(&[2], 4) },
        };
        let input = filled(&[2, 8, 8], 5);
        let (_, cache) = pab_forward_cached(&block, &input);
        for &v in &cache.v_map.data {
            assert!(v.abs() < 0.5);
        }
    }

    #[test]
    fn pab_matches_scalar_oracle() {
        // Singleton 1x1 kernels make every pixel independent, so the whole
        // chain collapses to a scalar formula we can evaluate by hand.
        let mut src = NormalSource::from_stream(9, StreamKind::Init, 0);
        for _ in 0..50 {
            let mut conv1 = Conv2d::zeros(1, 1, 1);
            let mut conv2 = Conv2d::zeros(1, 1, 1);
            conv1.w.data[0] = src.next();
            conv1.b.data[0] = src.next();
            conv2.w.data[0] = src.next();
            conv2.b.data[0] = src.next();
            let block = PabBlock { conv1: conv1.clone(), conv2: conv2.clone() };
            let mut input = Tensor::zeros(&[1, 8, 8]);
            src.fill(&mut input.data);
            let out = pab_forward(&block, &input).unwrap();
            for i in 0..64 {
                let x = input.data[i];
                let h = sigmoid(conv2.w.data[0] * sigmoid(conv1.w.data[0] * x + conv1.b.data[0]) + conv2.b.data[0]);
                let v = sigmoid(h) - 0.5;
                let expect = (x + h) * v;
                assert!((out.data[i] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn time_embed_properties() {
        let cfg = ModelConfig::default();
        let model = BackboneModel::init(&cfg, 3).unwrap();
        let a = time_embed(5, 50, &model.time_mlp).unwrap();
        let b = time_embed(5, 50, &model.time_mlp).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        let c = time_embed(6, 50, &model.time_mlp).unwrap();
        assert_ne!(a, c, "distinct t must embed differently");
        assert!(time_embed(0, 50, &model.time_mlp).is_err());
        assert!(time_embed(51, 50, &model.time_mlp).is_err());

        let zero = BackboneModel::zeros(&cfg);
        let z = time_embed(7, 50, &zero.time_mlp).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn catb_singleton_softmax_is_one() {
        let cfg = ModelConfig::default();
        let model = BackboneModel::init(&cfg, 5).unwrap();
        let o_n = filled(&[32, 8, 8], 6);
        let w_l = time_embed(3, 10, &model.time_mlp).unwrap();
        let weights = catb_attention_weights(&model.catb, &o_n, &w_l);
        assert_eq!(weights.len(), 64);
        assert!(weights.iter().all(|&w| (w - 1.0).abs() < 1e-15));
    }

    #[test]
    fn catb_zero_alpha_is_identity() {
        let cfg = ModelConfig::default();
        let model = BackboneModel::init(&cfg, 7).unwrap(); // alpha zero-init
        let o_n = filled(&[32, 8, 8], 8);
        let w_l = time_embed(2, 10, &model.time_mlp).unwrap();
        let out = catb_forward(&model.catb, &o_n, &w_l).unwrap();
        assert_eq!(out, o_n);
    }

    #[test]
    fn catb_guard_passes_constant_channels_through() {
        let cfg = ModelConfig::default();
        let mut model = BackboneModel::init(&cfg, 9).unwrap();
        // Non-zero alpha so the modulation path would normally act.
        model.catb.alpha.w = filled(&[32, 32], 10);
        model.catb.alpha.b = filled(&[32], 11);
        let mut o_n = Tensor::zeros(&[32, 8, 8]);
        for ch in 0..32 {
            o_n.plane_mut(ch).fill(ch as f64 * 0.37 - 1.0);
        }
        let w_l = time_embed(4, 10, &model.time_mlp).unwrap();
        let out = catb_forward(&model.catb, &o_n, &w_l).unwrap();
        assert_eq!(out, o_n, "sigma = 0 channels must pass through unchanged");
    }

    #[test]
    fn lhan_preserves_spatial_shape() {
        let cfg = ModelConfig::default();
        let model = BackboneModel::init(&cfg, 12).unwrap();
        for &(h, w) in &[(16, 16), (32, 32), (64, 64), (16, 32)] {
            let x = filled(&[4, h, w], (h + w) as u64);
            let (eps, _) = lhan_forward(&model, &x, 3, 10).unwrap();
            assert_eq!(eps.shape, vec![2, h, w]);
        }
    }

    #[test]
    fn dc_layer_cases() {
        let (h, w) = (16, 16);
        let coils = CoilSensitivities::identity(h, w);
        let x = random_image(h, w, 20);

        // All-zero projection mask: identity.
        let empty_mask = {
            let grid = vec![0u8; h * w];
            SamplingMask::new(h, w, grid, crate::kspace::AcsRegion::empty(), 256.0).unwrap()
        };
        let y_zero = KSpaceData::new(ComplexImage::zeros(1, h, w), empty_mask).unwrap();
        let out = dc_layer(&x, &y_zero, &coils).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-10);

        // All-ones mask, identity coil: output is ifft of the measurements.
        let truth = random_image(h, w, 21);
        let y_full = KSpaceData::fully_sampled(fft2c(&truth).unwrap());
        let out = dc_layer(&x, &y_full, &coils).unwrap();
        assert!(out.max_abs_diff(&truth) < 1e-10);

        // Idempotence in the single-coil case.
        let mask = generate_vd_mask(h, w, 2.0, 2, 5).unwrap();
        let y = undersample(&y_full, &mask).unwrap();
        let once = dc_layer(&x, &y, &coils).unwrap();
        let twice = dc_layer(&once, &y, &coils).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-8, "DC projection must be idempotent");
    }

    #[test]
    fn reconstruct_enforces_data_consistency() {
        let (h, w) = (16, 16);
        let cfg = ModelConfig::default();
        let model = BackboneModel::init(&cfg, 33).unwrap();
        let sched = build_schedule(10, 0.01, 0.2, ScheduleKind::Linear).unwrap();
        let coils = CoilSensitivities::identity(h, w);
        let truth = random_image(h, w, 30);
        let mask = generate_vd_mask(h, w, 2.0, 2, 6).unwrap();
        let y = undersample(&KSpaceData::fully_sampled(fft2c(&truth).unwrap()), &mask).unwrap();
        let x_t = random_image(h, w, 31);

        let rec = backbone_reconstruct(&model, &x_t, &y, &coils, 5, &sched, false).unwrap();
        rec.x_hat.check_finite().unwrap();
        let k_hat = fft2c(&apply_coils(&rec.x_hat, &coils).unwrap()).unwrap();
        for i in 0..h * w {
            if mask.grid()[i] == 1 {
                let diff = (k_hat.coil(0)[i] - y.data().coil(0)[i]).norm();
                assert!(diff < 1e-6, "measured k-space must be preserved, diff {diff}");
            }
        }
    }

    #[test]
    fn reconstruct_with_oracle_eps_recovers_dc_truth() {
        // If the network output were the true noise, the operator reduces to
        // DC applied to the true x0.
        let (h, w) = (16, 16);
        let sched = build_schedule(10, 0.01, 0.2, ScheduleKind::Linear).unwrap();
        let coils = CoilSensitivities::identity(h, w);
        let x0 = random_image(h, w, 40);
        let eps = random_image(h, w, 41);
        let t = 6;
        let x_t = sched.forward_noise(&x0, t, &eps).unwrap();
        let mask = generate_vd_mask(h, w, 2.0, 2, 7).unwrap();
        let y = undersample(&KSpaceData::fully_sampled(fft2c(&x0).unwrap()), &mask).unwrap();

        let x0_rec = sched.x0_from_eps(&x_t, t, &eps).unwrap();
        let via_op = dc_layer(&x0_rec, &y, &coils).unwrap();
        let direct = dc_layer(&x0, &y, &coils).unwrap();
        assert!(via_op.max_abs_diff(&direct) < 1e-9);
    }

    #[test]
    fn untrained_model_smoke_on_phantom() {
        // Random weights on a real phantom at R=4: the operator stays finite
        // and a PSNR is computable, however poor.
        let gt = crate::data::make_phantom(64, 64, 9).unwrap();
        let coils = crate::data::make_coil_maps(64, 64, 5).unwrap();
        let mask = generate_vd_mask(64, 64, 4.0, 8, 4).unwrap();
        let y = undersample(
            &KSpaceData::fully_sampled(fft2c(&apply_coils(&gt, &coils).unwrap()).unwrap()),
            &mask,
        )
        .unwrap();
        let sched = build_schedule(10, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let model = BackboneModel::init(&ModelConfig::default(), 123).unwrap();
        let x_t = random_image(64, 64, 50);
        let rec = backbone_reconstruct(&model, &x_t, &y, &coils, 7, &sched, false).unwrap();
        rec.x_hat.check_finite().unwrap();
        let psnr = crate::metrics::psnr(&rec.x_hat, &gt, None).unwrap().db();
        assert!(psnr.is_finite());
    }

    #[test]
    fn dc_project_null_is_self_adjoint() {
        let (h, w) = (16, 16);
        let mask = generate_vd_mask(h, w, 2.0, 2, 8).unwrap();
        let coils = CoilSensitivities::identity(h, w);
        let a = random_image(h, w, 50);
        let b = random_image(h, w, 51);
        let pa = dc_project_null(&a, &mask, &coils).unwrap();
        let pb = dc_project_null(&b, &mask, &coils).unwrap();
        let inner = |x: &ComplexImage, y: &ComplexImage| -> Complex64 {
            x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p.conj() * q).sum()
        };
        let lhs = inner(&pa, &b);
        let rhs = inner(&a, &pb);
        assert!((lhs - rhs).norm() < 1e-8);
    }
}
