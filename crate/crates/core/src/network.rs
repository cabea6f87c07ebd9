//! End-to-end per-pixel classifier: embedding, three encoder blocks with
//! 2×2 downsampling between them, nearest upsampling back to full
//! resolution and a pointwise classification head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dcss::{self, DcssEncoder, DcssOptions, NUM_STAGES};
use crate::error::{Error, Result};
use crate::lgi::{self, LgiAttention};
use crate::params::{ParamId, ParamStore};
use crate::ssm::Discretization;
use crate::tensor::NdArray;

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Gated,
    Sum,
    AdaptiveSum,
    Concat,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "sum" => Ok(Self::Sum),
            "adaptive_sum" => Ok(Self::AdaptiveSum),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected gated, sum, adaptive_sum or concat)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gated => "gated",
            Self::Sum => "sum",
            Self::AdaptiveSum => "adaptive_sum",
            Self::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub groups_spe: usize,
    pub groups_spa: usize,
    pub state_size: usize,
    pub num_classes: usize,
    pub gn_groups: usize,
    pub tau: usize,
    pub fusion_mode: FusionMode,
    pub use_pos_encoding: bool,
    pub use_lgi: bool,
    /// Add the first block's full-resolution output to the upsampled map.
    pub full_res_skip: bool,
    /// Number of encoder blocks, at most three.
    pub num_blocks: usize,
    pub discretization: Discretization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            patch_size: 9,
            groups_spe: 16,
            groups_spa: 16,
            state_size: 16,
            num_classes: 16,
            gn_groups: 8,
            tau: lgi::DEFAULT_TAU,
            fusion_mode: FusionMode::Gated,
            use_pos_encoding: true,
            use_lgi: true,
            full_res_skip: false,
            num_blocks: NUM_STAGES,
            discretization: Discretization::Zoh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        let fail = |m: String| Err(Error::Config(m));
        if d == 0 || self.gn_groups == 0 || !d.is_multiple_of(self.gn_groups) {
            return fail(format!("embed_dim {d} must be a positive multiple of gn_groups {}", self.gn_groups));
        }
        if self.use_lgi && (self.tau == 0 || !d.is_multiple_of(self.tau)) {
            return fail(format!("embed_dim {d} must be divisible by tau {}", self.tau));
        }
        if self.patch_size == 0 || self.state_size == 0 || self.num_classes == 0 {
            return fail("patch_size, state_size and num_classes must be positive".into());
        }
        if self.groups_spe == 0 || self.groups_spa == 0 {
            return fail("group counts must be positive".into());
        }
        if self.num_blocks > NUM_STAGES {
            return fail(format!("at most {NUM_STAGES} blocks supported"));
        }
        Ok(())
    }
}

/// Min / max / mean of one activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(a: &NdArray) -> Self {
        Self { min: a.min(), max: a.max(), mean: a.mean() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub spe: Summary,
    pub spa: Summary,
    pub fused: Summary,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
    pub logits_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ConvIds {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct NormIds {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone)]
enum FusionIds {
    Gated(ConvIds),
    Sum,
    AdaptiveSum { alpha: ParamId, beta: ParamId },
    Concat(ConvIds),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub encoder: DcssEncoder,
    pub lgi: Option<LgiAttention>,
    fusion: FusionIds,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub bands: usize,
    pub store: ParamStore,
    embed_conv: ConvIds,
    embed_norm: NormIds,
    pub blocks: Vec<Block>,
    head_conv1: ConvIds,
    head_norm: NormIds,
    head_conv2: ConvIds,
}

fn add_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_out: usize, d_in: usize) -> Result<ConvIds> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let kernel = NdArray::from_fn(&[d_out, d_in], |_| rng.gen_range(-bound..bound));
    Ok(ConvIds {
        kernel: store.add(format!("{name}.weight"), kernel)?,
        bias: store.add(format!("{name}.bias"), NdArray::zeros(&[d_out]))?,
    })
}

fn add_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<NormIds> {
    Ok(NormIds {
        scale: store.add(format!("{name}.scale"), NdArray::full(&[c], 1.0))?,
        shift: store.add(format!("{name}.shift"), NdArray::zeros(&[c]))?,
    })
}

impl Model {
    /// Build a model with parameters drawn from `ChaCha8(seed)`.
    pub fn new(cfg: ModelConfig, bands: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if bands == 0 {
            return Err(Error::Config("input must have at least one band".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let embed_conv = add_conv(&mut store, &mut rng, "embed.conv", d, bands)?;
        let embed_norm = add_norm(&mut store, "embed.norm", d)?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let prefix = format!("block{}", i + 1);
            let encoder = DcssEncoder::new(
                &mut store,
                &format!("{prefix}.dcss"),
                d,
                dcss::stage_patch(cfg.patch_size, i),
                cfg.groups_spe,
                cfg.groups_spa,
                cfg.state_size,
                &mut rng,
            )?;
            let lgi = if cfg.use_lgi {
                Some(LgiAttention::new(&mut store, &format!("{prefix}.lgi"), d, cfg.tau, &mut rng)?)
            } else {
                None
            };
            let fusion = match cfg.fusion_mode {
                FusionMode::Gated => {
                    FusionIds::Gated(add_conv(&mut store, &mut rng, &format!("{prefix}.fuse"), 1, 2 * d)?)
                }
                FusionMode::Sum => FusionIds::Sum,
                FusionMode::AdaptiveSum => FusionIds::AdaptiveSum {
                    alpha: store.add(format!("{prefix}.fuse.alpha"), NdArray::full(&[1], 0.5))?,
                    beta: store.add(format!("{prefix}.fuse.beta"), NdArray::full(&[1], 0.5))?,
                },
                FusionMode::Concat => {
                    FusionIds::Concat(add_conv(&mut store, &mut rng, &format!("{prefix}.fuse"), d, 2 * d)?)
                }
            };
            blocks.push(Block { encoder, lgi, fusion });
        }
        let head_conv1 = add_conv(&mut store, &mut rng, "head.conv1", d, d)?;
        let head_norm = add_norm(&mut store, "head.norm", d)?;
        let head_conv2 = add_conv(&mut store, &mut rng, "head.conv2", cfg.num_classes, d)?;
        Ok(Self { cfg, bands, store, embed_conv, embed_norm, blocks, head_conv1, head_norm, head_conv2 })
    }

    fn conv(&self, g: &mut Graph, ids: &ConvIds, x: Var) -> Result<Var> {
        let k = g.param(&self.store, ids.kernel);
        let b = g.param(&self.store, ids.bias);
        g.pointwise_conv(x, k, Some(b))
    }

    fn norm(&self, g: &mut Graph, ids: &NormIds, x: Var) -> Result<Var> {
        let s = g.param(&self.store, ids.scale);
        let b = g.param(&self.store, ids.shift);
        g.group_norm(x, self.cfg.gn_groups, s, b, GN_EPS)
    }

    /// `SiLU(GN(Conv1×1(I)))`.
    pub fn embed(&self, g: &mut Graph, cube: Var) -> Result<Var> {
        let x = self.conv(g, &self.embed_conv, cube)?;
        let x = self.norm(g, &self.embed_norm, x)?;
        g.silu(x)
    }

    pub fn fuse(&self, g: &mut Graph, block: &Block, f_spe: Var, f_spa: Var) -> Result<Var> {
        match &block.fusion {
            FusionIds::Gated(ids) => {
                let cat = g.concat(&[f_spe, f_spa], 0)?;
                let logit = self.conv(g, ids, cat)?;
                let w = g.sigmoid(logit)?;
                gated_combine(g, f_spe, f_spa, w)
            }
            FusionIds::Sum => g.add(f_spe, f_spa),
            FusionIds::AdaptiveSum { alpha, beta } => {
                let a = g.param(&self.store, *alpha);
                let b = g.param(&self.store, *beta);
                let x = g.scale_by_entry(f_spe, a, 0)?;
                let y = g.scale_by_entry(f_spa, b, 0)?;
                g.add(x, y)
            }
            FusionIds::Concat(ids) => {
                let cat = g.concat(&[f_spe, f_spa], 0)?;
                self.conv(g, ids, cat)
            }
        }
    }

    /// One encoder block with its residual connection.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        index: usize,
        f: Var,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let block = &self.blocks[index];
        let opts = DcssOptions {
            use_pos_encoding: self.cfg.use_pos_encoding,
            discretization: self.cfg.discretization,
        };
        let (mut f_spe, mut f_spa) = block.encoder.forward(g, &self.store, f, opts)?;
        if let Some(lgi) = &block.lgi {
            (f_spe, f_spa) = lgi.forward(g, &self.store, f, f_spe, f_spa)?;
        }
        let fused = self.fuse(g, block, f_spe, f_spa)?;
        if let Some(t) = trace {
            let s = g.shape(f);
            t.stages.push(StageTrace {
                height: s[1],
                width: s[2],
                patch: block.encoder.patch,
                spe: Summary::of(g.value(f_spe)),
                spa: Summary::of(g.value(f_spa)),
                fused: Summary::of(g.value(fused)),
            });
        }
        g.add(f, fused)
    }

    /// `Conv²(SiLU(GN(Conv¹(F))))`.
    pub fn classify(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let x = self.conv(g, &self.head_conv1, f)?;
        let x = self.norm(g, &self.head_norm, x)?;
        let x = g.silu(x)?;
        self.conv(g, &self.head_conv2, x)
    }

    /// Logits `[K, H, W]` for a cube `[C, H, W]`.
    pub fn forward(&self, g: &mut Graph, cube: &NdArray, mut trace: Option<&mut ForwardTrace>) -> Result<Var> {
        cube.expect_rank(3, "model input")?;
        if cube.dim(0) != self.bands {
            return Err(Error::Dimension(format!(
                "model expects {} bands, cube has {}",
                self.bands,
                cube.dim(0)
            )));
        }
        let (h, w) = (cube.dim(1), cube.dim(2));
        let input = g.constant(cube.clone());
        let mut f = self.embed(g, input)?;
        let mut first = None;
        for i in 0..self.blocks.len() {
            if i > 0 {
                f = g.avg_pool2x2(f)?;
            }
            f = self.block_forward(g, i, f, trace.as_deref_mut())?;
            if i == 0 {
                first = Some(f);
            }
        }
        let factor = 1usize << self.blocks.len().saturating_sub(1);
        if factor > 1 {
            f = g.upsample_nearest(f, factor, h, w)?;
            if let (true, Some(skip)) = (self.cfg.full_res_skip, first) {
                f = g.add(f, skip)?;
            }
        }
        let logits = self.classify(g, f)?;
        if let Some(t) = trace {
            t.logits_shape = g.shape(logits).to_vec();
        }
        Ok(logits)
    }

    /// Logits without keeping the graph.
    pub fn logits(&self, cube: &NdArray) -> Result<NdArray> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, cube, None)?;
        Ok(g.value(out).clone())
    }

    /// Per-pixel predicted class, 1-based, row-major `H·W`.
    pub fn predict(&self, cube: &NdArray) -> Result<Vec<u16>> {
        Ok(argmax_classes(&self.logits(cube)?))
    }

    /// Same architecture bound to another parameter store.
    pub fn with_store(&self, store: &ParamStore) -> Self {
        Self {
            cfg: self.cfg.clone(),
            bands: self.bands,
            store: store.clone(),
            embed_conv: self.embed_conv.clone(),
            embed_norm: self.embed_norm.clone(),
            blocks: self.blocks.clone(),
            head_conv1: self.head_conv1.clone(),
            head_norm: self.head_norm.clone(),
            head_conv2: self.head_conv2.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Set every block's group weights and fusion output to zero so each
    /// block reduces to its residual path.
    pub fn zero_block_outputs(&mut self) {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.push(b.encoder.spectral.weights);
            ids.push(b.encoder.spatial.weights);
            if let FusionIds::Concat(c) = &b.fusion {
                ids.push(c.kernel);
                ids.push(c.bias);
            }
        }
        for id in ids {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Gated fusion parameters of block `i`, if that block uses gated fusion.
    pub fn gated_fusion_ids(&self, i: usize) -> Option<(ParamId, ParamId)> {
        match &self.blocks[i].fusion {
            FusionIds::Gated(c) => Some((c.kernel, c.bias)),
            _ => None,
        }
    }

    pub fn classifier_output_ids(&self) -> (ParamId, ParamId) {
        (self.head_conv2.kernel, self.head_conv2.bias)
    }
}

/// `w ⊙ F_spe + (1 − w) ⊙ F_spa` with a per-pixel weight `w: [1, H, W]`.
pub fn gated_combine(g: &mut Graph, f_spe: Var, f_spa: Var, w: Var) -> Result<Var> {
    g.convex_combine(f_spe, f_spa, w)
}

/// Fuse two feature maps outside a model, given the mode's parameters.
pub fn fuse_arrays(
    mode: FusionMode,
    f_spe: &NdArray,
    f_spa: &NdArray,
    params: &FuseParams,
) -> Result<NdArray> {
    let mut g = Graph::new();
    let a = g.constant(f_spe.clone());
    let b = g.constant(f_spa.clone());
    let out = match mode {
        FusionMode::Gated => {
            let cat = g.concat(&[a, b], 0)?;
            let k = g.constant(params.kernel.clone());
            let bias = g.constant(params.bias.clone());
            let logit = g.pointwise_conv(cat, k, Some(bias))?;
            let w = g.sigmoid(logit)?;
            gated_combine(&mut g, a, b, w)?
        }
        FusionMode::Sum => g.add(a, b)?,
        FusionMode::AdaptiveSum => {
            let x = g.affine(a, params.alpha, 0.0)?;
            let y = g.affine(b, params.beta, 0.0)?;
            g.add(x, y)?
        }
        FusionMode::Concat => {
            let cat = g.concat(&[a, b], 0)?;
            let k = g.constant(params.kernel.clone());
            let bias = g.constant(params.bias.clone());
            g.pointwise_conv(cat, k, Some(bias))?
        }
    };
    Ok(g.value(out).clone())
}

/// Parameters for [`fuse_arrays`]; the kernel is `[1, 2D]` for gated mode
/// and `[D, 2D]` for concat mode.
#[derive(Debug, Clone)]
pub struct FuseParams {
    pub kernel: NdArray,
    pub bias: NdArray,
    pub alpha: f64,
    pub beta: f64,
}

pub fn argmax_classes(logits: &NdArray) -> Vec<u16> {
    let k = logits.dim(0);
    let hw = logits.len() / k;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if logits.data()[c * hw + p] > logits.data()[best * hw + p] {
                    best = c;
                }
            }
            (best + 1) as u16
        })
        .collect()
}

/// Analytic count of trainable scalars for a configuration.
pub fn count_params(cfg: &ModelConfig, bands: usize) -> usize {
    let d = cfg.embed_dim;
    let n = cfg.state_size;
    let conv = |o: usize, i: usize| o * i + o;
    let scan = |c: usize| c * n + 2 * n * c + c * c + 2 * c;
    let multi = |channels: usize, groups: usize| {
        let g = dcss::effective_groups(channels, groups);
        g * scan(channels / g) + g
    };
    let mut total = conv(d, bands) + 2 * d;
    for i in 0..cfg.num_blocks {
        let p = dcss::stage_patch(cfg.patch_size, i);
        total += multi(p * p, cfg.groups_spe) + multi(d, cfg.groups_spa);
        if cfg.use_lgi {
            total += LgiAttention::param_count(d, cfg.tau);
        }
        total += match cfg.fusion_mode {
            FusionMode::Gated => conv(1, 2 * d),
            FusionMode::Sum => 0,
            FusionMode::AdaptiveSum => 2,
            FusionMode::Concat => conv(d, 2 * d),
        };
    }
    total + conv(d, d) + 2 * d + conv(cfg.num_classes, d)
}

/// Multiply-accumulate estimate of one forward pass, split into the
/// attention share and the total.
pub fn estimate_macs(cfg: &ModelConfig, bands: usize, h: usize, w: usize) -> (u64, u64) {
    let d = cfg.embed_dim as u64;
    let n = cfg.state_size as u64;
    let mut lgi = 0u64;
    let mut total = (bands as u64) * d * (h * w) as u64;
    let (mut hh, mut ww) = (h, w);
    for i in 0..cfg.num_blocks {
        let p = dcss::stage_patch(cfg.patch_size, i);
        let patches = (hh.div_ceil(p) * ww.div_ceil(p)) as u64;
        let pp = (p * p) as u64;
        let scan_cost = |len: u64, channels: usize, groups: usize| {
            let g = dcss::effective_groups(channels, groups) as u64;
            let c = channels as u64 / g;
            // projections plus the state update per step
            g * len * (2 * n * c + c * c + 3 * c * n)
        };
        total += patches * (scan_cost(d, p * p, cfg.groups_spe) + scan_cost(pp, cfg.embed_dim, cfg.groups_spa));
        let pix = (hh * ww) as u64;
        if cfg.use_lgi {
            let hidden = d / cfg.tau as u64;
            let a = 2 * d * hidden + hidden * d + 2 * d * pix + 2 * d * pix + 18 * pix;
            lgi += a;
            total += a;
        }
        total += match cfg.fusion_mode {
            FusionMode::Gated => 2 * d * pix + 2 * d * pix,
            FusionMode::Sum | FusionMode::AdaptiveSum => d * pix,
            FusionMode::Concat => 2 * d * d * pix,
        };
        hh = hh.div_ceil(2);
        ww = ww.div_ceil(2);
    }
    total += (d * d + d * cfg.num_classes as u64) * (h * w) as u64;
    (lgi, total)
}

/// Zero-mean inputs shared by tests and gradient checks.
pub fn random_cube(c: usize, h: usize, w: usize, seed: u64) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdArray::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
}

/// Fixed random projection used to reduce an output to a scalar.
pub fn probe_weights(shape: &[usize], seed: u64) -> Arc<NdArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Arc::new(NdArray::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
}
