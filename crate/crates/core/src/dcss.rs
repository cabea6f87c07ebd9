//! Dual-channel spatial-spectral encoder.
//!
//! A feature map `[D, H, W]` is tiled into non-overlapping `P×P` patches.
//! Each patch is read two ways: the spectral sequence runs along the band
//! axis (length `D`, one channel per pixel) and the spatial sequence runs
//! along the pixels in row-major order (length `P²`, one channel per band).
//! Each sequence gets an additive sinusoidal position table, is split into
//! contiguous channel groups, and every group is scanned by its own
//! selective-scan instance, scaled by a learnable per-group weight and
//! concatenated back.

use std::sync::Arc;

use log::{info, warn};
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{self, Discretization, SsmParams};
use crate::tensor::ops::GATHER_ZERO;
use crate::tensor::NdArray;

/// Non-overlapping tiling of a `[D, H, W]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// Row-major patches, each `[P, P, D]`.
    pub patches: Vec<NdArray>,
    pub grid_dims: (usize, usize),
    pub pad: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn grid_dims(h: usize, w: usize, p: usize) -> (usize, usize) {
    (h.div_ceil(p), w.div_ceil(p))
}

/// Gather map from `[D, H, W]` to tokens `[B, P², D]` (patches row-major,
/// pixels row-major within a patch), zero-filled where padding applies.
pub fn patch_tokens_index(d: usize, h: usize, w: usize, p: usize) -> Vec<u32> {
    let (rows, cols) = grid_dims(h, w, p);
    let mut idx = Vec::with_capacity(rows * cols * p * p * d);
    for r in 0..rows {
        for c in 0..cols {
            for pi in 0..p {
                for pj in 0..p {
                    let (y, x) = (r * p + pi, c * p + pj);
                    for ch in 0..d {
                        if y < h && x < w {
                            idx.push(((ch * h + y) * w + x) as u32);
                        } else {
                            idx.push(GATHER_ZERO);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Gather map from tokens `[B, P², D]` back to `[D, H, W]`, dropping padding.
pub fn unpatch_index(d: usize, h: usize, w: usize, p: usize) -> Vec<u32> {
    let (_, cols) = grid_dims(h, w, p);
    let mut idx = Vec::with_capacity(d * h * w);
    for ch in 0..d {
        for y in 0..h {
            for x in 0..w {
                let patch = (y / p) * cols + x / p;
                let pixel = (y % p) * p + x % p;
                idx.push(((patch * p * p + pixel) * d + ch) as u32);
            }
        }
    }
    idx
}

/// Gather map swapping the last two axes of `[B, R, C]`.
pub fn transpose_last2_index(b: usize, r: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(b * r * c);
    for bi in 0..b {
        for j in 0..c {
            for i in 0..r {
                idx.push(((bi * r + i) * c + j) as u32);
            }
        }
    }
    idx
}

fn check_patch(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Parameter("patch size must be at least 1".into()));
    }
    Ok(())
}

pub fn patchify(f: &NdArray, p: usize) -> Result<PatchGrid> {
    check_patch(p)?;
    f.expect_rank(3, "patchify")?;
    let (d, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    let (rows, cols) = grid_dims(h, w, p);
    let idx = patch_tokens_index(d, h, w, p);
    let per = p * p * d;
    let patches = idx
        .chunks(per)
        .map(|chunk| {
            let data = chunk
                .iter()
                .map(|&i| if i == GATHER_ZERO { 0.0 } else { f.data()[i as usize] })
                .collect();
            NdArray::new(&[p, p, d], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchGrid {
        patches,
        grid_dims: (rows, cols),
        pad: (rows * p - h, cols * p - w),
        patch_size: p,
        channels: d,
        height: h,
        width: w,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<NdArray> {
    let (d, h, w, p) = (grid.channels, grid.height, grid.width, grid.patch_size);
    let flat: Vec<f64> = grid.patches.iter().flat_map(|t| t.data().iter().copied()).collect();
    let idx = unpatch_index(d, h, w, p);
    let data = idx.iter().map(|&i| flat[i as usize]).collect();
    NdArray::new(&[d, h, w], data)
}

/// Both scan orders of one patch token `[P, P, D]`: spectral `[D, P²]` and
/// spatial `[P², D]`.
pub fn flatten_dual(token: &NdArray) -> Result<(NdArray, NdArray)> {
    token.expect_rank(3, "flatten_dual")?;
    let (p, q, d) = (token.dim(0), token.dim(1), token.dim(2));
    let spa = token.reshape(&[p * q, d])?;
    let spe = spa.transpose2()?;
    Ok((spe, spa))
}

/// Which axis a grouped sequence scans along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Spectral,
    Spatial,
}

/// `[S_L, N_G, D_G]` sequence split into contiguous channel groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSeq {
    pub seq: NdArray,
    pub domain: Domain,
}

impl GroupedSeq {
    pub fn seq_len(&self) -> usize {
        self.seq.dim(0)
    }

    pub fn groups(&self) -> usize {
        self.seq.dim(1)
    }

    pub fn group_channels(&self) -> usize {
        self.seq.dim(2)
    }

    /// Group `i` as a `[S_L, D_G]` sequence.
    pub fn group(&self, i: usize) -> NdArray {
        let (l, g, c) = (self.seq_len(), self.groups(), self.group_channels());
        NdArray::from_fn(&[l, c], |k| self.seq.data()[((k / c) * g + i) * c + k % c])
    }

    /// Concatenate the groups back to `[S_L, N_G·D_G]`.
    pub fn concat(&self) -> NdArray {
        let (l, g, c) = (self.seq_len(), self.groups(), self.group_channels());
        self.seq.reshape(&[l, g * c]).expect("same element count")
    }
}

pub fn group_split(x: &NdArray, groups: usize, domain: Domain) -> Result<GroupedSeq> {
    x.expect_rank(2, "group_split")?;
    let (l, c) = (x.dim(0), x.dim(1));
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "cannot split C={c} channels into N_G={groups} equal groups"
        )));
    }
    Ok(GroupedSeq { seq: x.reshape(&[l, groups, c / groups])?, domain })
}

/// Largest divisor of `channels` not above `configured`.
pub fn effective_groups(channels: usize, configured: usize) -> usize {
    (1..=configured.max(1).min(channels.max(1)))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Additive sinusoidal table: `PE[pos, 2k] = sin(pos/10000^{2k/C})`,
/// `PE[pos, 2k+1] = cos(pos/10000^{2k/C})`.
pub fn cosine_positional_encoding(seq_len: usize, channels: usize) -> NdArray {
    NdArray::from_fn(&[seq_len, channels], |i| {
        let (pos, col) = (i / channels.max(1), i % channels.max(1));
        let k2 = (col - col % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(k2 / channels as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Scan each group with its own instance, scale by `w[i]`, concatenate.
pub fn multi_group_mamba(
    x: &GroupedSeq,
    groups: &[SsmParams],
    weights: &[f64],
    mode: Discretization,
) -> Result<NdArray> {
    let n_g = x.groups();
    if groups.len() != n_g || weights.len() != n_g {
        return Err(Error::Config(format!(
            "{n_g} groups but {} scan instances and {} weights",
            groups.len(),
            weights.len()
        )));
    }
    let (l, c) = (x.seq_len(), x.group_channels());
    let mut out = NdArray::zeros(&[l, n_g * c]);
    for (i, (p, &wi)) in groups.iter().zip(weights).enumerate() {
        let y = ssm::selective_scan(p, &x.group(i), mode)?;
        for t in 0..l {
            for k in 0..c {
                out.set(&[t, i * c + k], wi * y.at(&[t, k]));
            }
        }
    }
    Ok(out)
}

/// `(H_i, W_i, P_i)` for one encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

pub const NUM_STAGES: usize = 3;

/// Patch sizes halve by floor division (never below 1) and spatial extents
/// halve with ceiling, matching the high-side padded 2×2 pooling.
pub fn stage_plan(h: usize, w: usize, p0: usize) -> Result<Vec<Stage>> {
    check_patch(p0)?;
    if p0 < 4 {
        warn!("base patch size {p0} < 4: the last stage collapses to 1×1 patches");
    }
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let (mut hh, mut ww) = (h, w);
    for i in 0..NUM_STAGES {
        stages.push(Stage { height: hh, width: ww, patch: (p0 >> i).max(1) });
        hh = hh.div_ceil(2);
        ww = ww.div_ceil(2);
    }
    Ok(stages)
}

/// Patch size of stage `i` (zero-based).
pub fn stage_patch(p0: usize, i: usize) -> usize {
    (p0 >> i).max(1)
}

/// Parameters of one multi-group scan: per-group S6 weights plus the group
/// weight vector `w`.
#[derive(Debug, Clone)]
pub struct MultiGroupParams {
    pub groups: Vec<[ParamId; 6]>,
    pub weights: ParamId,
    pub group_channels: usize,
}

const SCAN_FIELDS: [&str; 6] = ["a_log", "b_proj", "c_proj", "delta_proj", "delta_bias", "d_skip"];

impl MultiGroupParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        configured_groups: usize,
        state: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n_g = effective_groups(channels, configured_groups);
        if n_g != configured_groups {
            info!("{prefix}: {channels} channels not divisible by {configured_groups} groups, using {n_g}");
        }
        let d_g = channels / n_g;
        let mut groups = Vec::with_capacity(n_g);
        for gi in 0..n_g {
            let p = SsmParams::init(d_g, state, rng);
            let arrays = p.arrays().map(|a| a.clone());
            let mut ids = Vec::with_capacity(6);
            for (field, a) in SCAN_FIELDS.iter().zip(arrays) {
                ids.push(store.add(format!("{prefix}.g{gi}.{field}"), a)?);
            }
            groups.push(ids.try_into().expect("six fields"));
        }
        let weights = store.add(format!("{prefix}.w"), NdArray::full(&[n_g], 1.0))?;
        Ok(Self { groups, weights, group_channels: d_g })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// `x: [B, L, N_G·D_G]` → `[B, L, N_G·D_G]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Discretization,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = self.group_channels;
        if shape.len() != 3 || shape[2] != c * self.num_groups() {
            return dim_err(format!(
                "multi-group scan expects [B, L, {}], got {shape:?}",
                c * self.num_groups()
            ));
        }
        let w = g.param(store, self.weights);
        let mut outs = Vec::with_capacity(self.num_groups());
        for (i, ids) in self.groups.iter().enumerate() {
            let xi = if self.num_groups() == 1 { x } else { g.narrow(x, 2, i * c, c)? };
            let p = ids.map(|id| g.param(store, id));
            let y = g.selective_scan(xi, p, mode)?;
            outs.push(g.scale_by_entry(y, w, i)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 2)
        }
    }
}

/// Encoder for one stage: a spectral and a spatial multi-group scan.
#[derive(Debug, Clone)]
pub struct DcssEncoder {
    pub patch: usize,
    pub channels: usize,
    pub spectral: MultiGroupParams,
    pub spatial: MultiGroupParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DcssOptions {
    pub use_pos_encoding: bool,
    pub discretization: Discretization,
}

impl Default for DcssOptions {
    fn default() -> Self {
        Self { use_pos_encoding: true, discretization: Discretization::Zoh }
    }
}

impl DcssEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        patch: usize,
        groups_spe: usize,
        groups_spa: usize,
        state: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_patch(patch)?;
        let spectral = MultiGroupParams::new(
            store,
            &format!("{prefix}.spe"),
            patch * patch,
            groups_spe,
            state,
            rng,
        )?;
        let spatial =
            MultiGroupParams::new(store, &format!("{prefix}.spa"), channels, groups_spa, state, rng)?;
        Ok(Self { patch, channels, spectral, spatial })
    }

    /// Shape laws: spectral groups cover `P²` pixels, spatial groups cover
    /// `D` bands.
    pub fn check_shape_laws(&self) -> Result<()> {
        let spe = self.spectral.num_groups() * self.spectral.group_channels;
        let spa = self.spatial.num_groups() * self.spatial.group_channels;
        if spe != self.patch * self.patch || spa != self.channels {
            return dim_err(format!(
                "group layout broken: spectral {spe} vs P²={}, spatial {spa} vs D={}",
                self.patch * self.patch,
                self.channels
            ));
        }
        Ok(())
    }

    /// `f: [D, H, W]` → `(F_spe, F_spa)`, both `[D, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        opts: DcssOptions,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(f).to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return dim_err(format!(
                "encoder expects [{}, H, W], got {shape:?}",
                self.channels
            ));
        }
        let (d, h, w, p) = (shape[0], shape[1], shape[2], self.patch);
        let (rows, cols) = grid_dims(h, w, p);
        let b = rows * cols;
        let pp = p * p;

        let tokens = g.gather(f, &[b, pp, d], Arc::new(patch_tokens_index(d, h, w, p)))?;
        let unpatch = Arc::new(unpatch_index(d, h, w, p));

        // spatial: sequence over pixels, channels are bands
        let mut spa = tokens;
        if opts.use_pos_encoding {
            spa = g.add_tiled_const(spa, Arc::new(cosine_positional_encoding(pp, d)))?;
        }
        let spa = self.spatial.forward(g, store, spa, opts.discretization)?;
        let f_spa = g.gather(spa, &[d, h, w], unpatch.clone())?;

        // spectral: sequence over bands, channels are pixels
        let mut spe = g.gather(tokens, &[b, d, pp], Arc::new(transpose_last2_index(b, pp, d)))?;
        if opts.use_pos_encoding {
            spe = g.add_tiled_const(spe, Arc::new(cosine_positional_encoding(d, pp)))?;
        }
        let spe = self.spectral.forward(g, store, spe, opts.discretization)?;
        let spe = g.gather(spe, &[b, pp, d], Arc::new(transpose_last2_index(b, d, pp)))?;
        let f_spe = g.gather(spe, &[d, h, w], unpatch)?;

        Ok((f_spe, f_spa))
    }
}

/// Forward an encoder without keeping the graph.
pub fn dcss_forward(
    enc: &DcssEncoder,
    store: &ParamStore,
    f: &NdArray,
    opts: DcssOptions,
) -> Result<(NdArray, NdArray)> {
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let (a, b) = enc.forward(&mut g, store, x, opts)?;
    Ok((g.value(a).clone(), g.value(b).clone()))
}

/// Read a multi-group parameter set back out of the store.
pub fn group_scan_params(store: &ParamStore, mg: &MultiGroupParams) -> Result<(Vec<SsmParams>, Vec<f64>)> {
    let groups = mg
        .groups
        .iter()
        .map(|ids| SsmParams::from_arrays(ids.map(|id| store.value(id).clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok((groups, store.value(mg.weights).data().to_vec()))
}
