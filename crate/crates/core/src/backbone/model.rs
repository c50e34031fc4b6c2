//! Backbone parameter container: PAB convolution stacks, the time-index MLP,
//! cross-attention projections and the output head, plus a canonical named
//! ordering used by the optimizer and the checkpoint format.

use super::tensor::{Conv2d, Linear, Tensor};
use crate::error::{DmsmError, Result};
use crate::rng::{NormalSource, StreamKind};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width of the PAB trunk.
    pub channels: usize,
    /// Number of parameter-free attention blocks.
    pub n_pab: usize,
    /// 1-based PAB indices whose outputs are concatenated before the fuse
    /// convolution; indices beyond `n_pab` are ignored.
    pub concat_blocks: Vec<usize>,
    /// Width of the time embedding and the attention key dimension.
    pub time_embed_dim: usize,
    /// Depth of the time-index MLP.
    pub time_mlp_layers: usize,
    /// Apply the data-consistency projection after the network (the w/o-DC
    /// ablation disables it). Stored with the architecture so a trained
    /// variant keeps its operator at inference time.
    #[serde(default = "default_true")]
    pub use_dc: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            n_pab: 5,
            concat_blocks: vec![1, 3, 5],
            time_embed_dim: 32,
            time_mlp_layers: 12,
            use_dc: true,
        }
    }
}

impl ModelConfig {
    /// Exact parameter count this architecture will allocate.
    pub fn param_count_estimate(&self) -> usize {
        let c = self.channels;
        let e = self.time_embed_dim;
        let conv = |oc: usize, ic: usize, k: usize| oc * ic * k * k + oc;
        let lin = |o: usize, i: usize| o * i + o;
        let mut total = conv(c, 4, 3) + self.n_pab * 2 * conv(c, c, 3);
        total += conv(c, self.fuse_in_channels(), 1);
        for l in 0..self.time_mlp_layers {
            total += lin(e, if l == 0 { 1 } else { e });
        }
        total += lin(e, c) + lin(e, e) + lin(e, e) + lin(c, e) + e;
        total += conv(2, c, 3);
        total
    }

    /// Sanity bounds; checkpoint headers and config files are untrusted, so
    /// absurd architectures are rejected before any allocation.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels > 256 {
            return Err(DmsmError::Config(format!(
                "channels must lie in 1..=256, got {}",
                self.channels
            )));
        }
        if self.n_pab > 32 {
            return Err(DmsmError::Config(format!("n_pab must be at most 32, got {}", self.n_pab)));
        }
        if self.concat_blocks.len() > 32 {
            return Err(DmsmError::Config("too many concat blocks".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim > 1024 {
            return Err(DmsmError::Config(format!(
                "time_embed_dim must lie in 1..=1024, got {}",
                self.time_embed_dim
            )));
        }
        if self.time_mlp_layers == 0 || self.time_mlp_layers > 64 {
            return Err(DmsmError::Config(format!(
                "time_mlp_layers must lie in 1..=64, got {}",
                self.time_mlp_layers
            )));
        }
        let params = self.param_count_estimate();
        if params > 4_000_000 {
            return Err(DmsmError::Config(format!(
                "architecture of {params} parameters exceeds the 4M container limit"
            )));
        }
        Ok(())
    }

    /// PAB indices actually concatenated (deduplicated, clamped to `n_pab`).
    pub fn concat_sources(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &i in &self.concat_blocks {
            if i >= 1 && i <= self.n_pab && !out.contains(&i) {
                out.push(i);
            }
        }
        out.sort_unstable();
        out
    }

    /// Input channel count of the fuse convolution.
    pub fn fuse_in_channels(&self) -> usize {
        let k = self.concat_sources().len().max(1);
        k * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PabBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catb {
    /// Query projection of image tokens (unused by the singleton-key softmax
    /// but part of the architecture; its gradient is exactly zero).
    pub query: Linear,
    /// Key projection of the time token.
    pub key: Linear,
    /// Value projection of the time token.
    pub value: Linear,
    /// Projection of the attention output to a per-channel scale; zero-init
    /// makes the whole block the identity at the start of training.
    pub alpha: Linear,
    /// Learned bias standing in for a positional encoding on the single
    /// (non-spatial) time token.
    pub pe_bias: Tensor,
}

/// All learnable parameters of the reconstruction network.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    cfg: ModelConfig,
    pub input_conv: Conv2d,
    pub pab: Vec<PabBlock>,
    pub fuse_conv: Conv2d,
    pub time_mlp: Vec<Linear>,
    pub catb: Catb,
    pub head_conv: Conv2d,
}

impl BackboneModel {
    /// All-zero parameter container (used for gradients and moments).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let e = cfg.time_embed_dim;
        let pab = (0..cfg.n_pab)
            .map(|_| PabBlock { conv1: Conv2d::zeros(c, c, 3), conv2: Conv2d::zeros(c, c, 3) })
            .collect();
        let time_mlp = (0..cfg.time_mlp_layers)
            .map(|l| Linear::zeros(e, if l == 0 { 1 } else { e }))
            .collect();
        Self {
            cfg: cfg.clone(),
            input_conv: Conv2d::zeros(c, 4, 3),
            pab,
            fuse_conv: Conv2d::zeros(c, cfg.fuse_in_channels(), 1),
            time_mlp,
            catb: Catb {
                query: Linear::zeros(e, c),
                key: Linear::zeros(e, e),
                value: Linear::zeros(e, e),
                alpha: Linear::zeros(c, e),
                pe_bias: Tensor::zeros(&[e]),
            },
            head_conv: Conv2d::zeros(2, c, 3),
        }
    }

    /// Random initialization. Convolutions and projections use scaled normal
    /// draws; the attention output projection starts at zero so the CATB is
    /// initially the identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut model = Self::zeros(cfg);
        let mut src = NormalSource::from_stream(seed, StreamKind::Init, 0);
        let init_conv = |conv: &mut Conv2d, src: &mut NormalSource| {
            let fan_in = (conv.in_channels() * conv.kernel() * conv.kernel()) as f64;
            let s = (1.0 / fan_in).sqrt();
            for v in conv.w.data.iter_mut() {
                *v = s * src.next();
            }
        };
        init_conv(&mut model.input_conv, &mut src);
        for block in &mut model.pab {
            init_conv(&mut block.conv1, &mut src);
            init_conv(&mut block.conv2, &mut src);
        }
        init_conv(&mut model.fuse_conv, &mut src);
        init_conv(&mut model.head_conv, &mut src);
        for lin in &mut model.time_mlp {
            let s = (2.0 / lin.in_dim() as f64).sqrt();
            for v in lin.w.data.iter_mut() {
                *v = s * src.next();
            }
        }
        for lin in [&mut model.catb.query, &mut model.catb.key, &mut model.catb.value] {
            let s = (1.0 / lin.in_dim() as f64).sqrt();
            for v in lin.w.data.iter_mut() {
                *v = s * src.next();
            }
        }
        // catb.alpha and pe_bias stay zero.
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.collect_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Named parameter tensors in canonical order. The optimizer, gradient
    /// container and checkpoint layout all follow this order.
    pub fn collect_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("input_conv.w".into(), &self.input_conv.w));
        out.push(("input_conv.b".into(), &self.input_conv.b));
        for (i, block) in self.pab.iter().enumerate() {
            out.push((format!("pab{i}.conv1.w"), &block.conv1.w));
            out.push((format!("pab{i}.conv1.b"), &block.conv1.b));
            out.push((format!("pab{i}.conv2.w"), &block.conv2.w));
            out.push((format!("pab{i}.conv2.b"), &block.conv2.b));
        }
        out.push(("fuse_conv.w".into(), &self.fuse_conv.w));
        out.push(("fuse_conv.b".into(), &self.fuse_conv.b));
        for (i, lin) in self.time_mlp.iter().enumerate() {
            out.push((format!("time_mlp{i}.w"), &lin.w));
            out.push((format!("time_mlp{i}.b"), &lin.b));
        }
        out.push(("catb.query.w".into(), &self.catb.query.w));
        out.push(("catb.query.b".into(), &self.catb.query.b));
        out.push(("catb.key.w".into(), &self.catb.key.w));
        out.push(("catb.key.b".into(), &self.catb.key.b));
        out.push(("catb.value.w".into(), &self.catb.value.w));
        out.push(("catb.value.b".into(), &self.catb.value.b));
        out.push(("catb.alpha.w".into(), &self.catb.alpha.w));
        out.push(("catb.alpha.b".into(), &self.catb.alpha.b));
        out.push(("catb.pe_bias".into(), &self.catb.pe_bias));
        out.push(("head_conv.w".into(), &self.head_conv.w));
        out.push(("head_conv.b".into(), &self.head_conv.b));
        out
    }

    /// Visit parameters mutably in the same canonical order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        let mut i = 0;
        let step = |t: &mut Tensor, f: &mut dyn FnMut(usize, &mut Tensor), i: &mut usize| {
            f(*i, t);
            *i += 1;
        };
        step(&mut self.input_conv.w, &mut f, &mut i);
        step(&mut self.input_conv.b, &mut f, &mut i);
        for block in &mut self.pab {
            step(&mut block.conv1.w, &mut f, &mut i);
            step(&mut block.conv1.b, &mut f, &mut i);
            step(&mut block.conv2.w, &mut f, &mut i);
            step(&mut block.conv2.b, &mut f, &mut i);
        }
        step(&mut self.fuse_conv.w, &mut f, &mut i);
        step(&mut self.fuse_conv.b, &mut f, &mut i);
        for lin in &mut self.time_mlp {
            step(&mut lin.w, &mut f, &mut i);
            step(&mut lin.b, &mut f, &mut i);
        }
        step(&mut self.catb.query.w, &mut f, &mut i);
        step(&mut self.catb.query.b, &mut f, &mut i);
        step(&mut self.catb.key.w, &mut f, &mut i);
        step(&mut self.catb.key.b, &mut f, &mut i);
        step(&mut self.catb.value.w, &mut f, &mut i);
        step(&mut self.catb.value.b, &mut f, &mut i);
        step(&mut self.catb.alpha.w, &mut f, &mut i);
        step(&mut self.catb.alpha.b, &mut f, &mut i);
        step(&mut self.catb.pe_bias, &mut f, &mut i);
        step(&mut self.head_conv.w, &mut f, &mut i);
        step(&mut self.head_conv.b, &mut f, &mut i);
    }

    /// Accumulate another parameter container (used to merge per-branch
    /// gradient buffers).
    pub fn accumulate(&mut self, other: &Self) {
        let theirs: Vec<&Tensor> = other.collect_params().into_iter().map(|(_, t)| t).collect();
        self.visit_params_mut(|i, mine| {
            for (a, b) in mine.data.iter_mut().zip(&theirs[i].data) {
                *a += b;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        self.collect_params().iter().all(|(_, t)| t.is_finite())
    }
}
