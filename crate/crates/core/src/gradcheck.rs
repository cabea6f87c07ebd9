//! Central finite-difference checks of the tape's reverse pass.
//!
//! Each case stores its differentiable inputs in a [`ParamStore`], builds a
//! graph from them, reduces the output to a scalar with a fixed random
//! projection, and compares every analytic partial with
//! `(L(θ + h) − L(θ − h)) / 2h`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dcss::{DcssEncoder, DcssOptions};
use crate::error::{Error, Result};
use crate::lgi::LgiAttention;
use crate::network::{probe_weights, random_cube, FusionMode, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{Discretization, SsmParams};
use crate::tensor::NdArray;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name, flat index, analytic and numeric partials.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl CheckResult {
    pub fn passed(&self, cfg: &GradcheckConfig) -> bool {
        self.max_rel_err <= cfg.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} {:>6} partials  max rel err {:.3e}", self.name, self.checked, self.max_rel_err)?;
        if let Some((p, i, a, n)) = &self.worst {
            write!(f, "  (worst {p}[{i}]: analytic {a:.6e}, numeric {n:.6e})")?;
        }
        Ok(())
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return g.sum(out);
    }
    let w = probe_weights(g.shape(out), g.value(out).len() as u64);
    g.weighted_sum(out, w)
}

/// Check every scalar of every array in `store`.
pub fn check_store(
    name: &str,
    store: &mut ParamStore,
    cfg: &GradcheckConfig,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<CheckResult> {
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, store)?;
        let l = reduce(&mut g, out)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let loss = reduce(&mut g, out)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<NdArray> = store.iter().map(|p| NdArray::zeros(p.value.shape())).collect();
    for (id, gr) in grads.params() {
        analytic[id.index()].add_assign(gr);
    }
    let mut result = CheckResult { name: name.to_string(), checked: 0, max_rel_err: 0.0, worst: None };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * cfg.step);
            let a = analytic[id.index()].data()[i];
            let e = rel_err(a, numeric, cfg.floor);
            result.checked += 1;
            if e > result.max_rel_err || result.worst.is_none() {
                result.max_rel_err = result.max_rel_err.max(e);
                result.worst = Some((store.get(id).name.clone(), i, a, numeric));
            }
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Op,
    Block,
    Model,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Self::Op),
            "block" => Ok(Self::Block),
            "model" => Ok(Self::Model),
            other => Err(Error::Config(format!("unknown gradcheck level `{other}` (op, block or model)"))),
        }
    }
}

struct Inputs {
    store: ParamStore,
    ids: Vec<ParamId>,
    rng: ChaCha8Rng,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), ids: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn random(mut self, shape: &[usize]) -> Self {
        let v = NdArray::from_fn(shape, |_| self.rng.gen_range(-1.0..1.0));
        self.push(v)
    }

    fn push(mut self, v: NdArray) -> Self {
        let name = format!("in{}", self.ids.len());
        self.ids.push(self.store.add(name, v).expect("fresh names"));
        self
    }

    fn ssm(mut self, d: usize, n: usize) -> Self {
        let p = SsmParams::init(d, n, &mut self.rng);
        // move Δ away from the lower end so perturbations stay informative
        let p = SsmParams { delta_bias: p.delta_bias.map(|b| b + 1.0), ..p };
        let [a, b, c, dp, db, ds] = p.arrays().map(|a| a.clone());
        self.push(a).push(b).push(c).push(dp).push(db).push(ds)
    }

    fn run(
        mut self,
        name: &str,
        cfg: &GradcheckConfig,
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    ) -> Result<CheckResult> {
        let ids = self.ids.clone();
        check_store(name, &mut self.store, cfg, |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &vars)
        })
    }
}

/// Every differentiable primitive on small random inputs.
pub fn op_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let t = |seed| Inputs::new(seed);
    let mut out = vec![
        t(1).random(&[2, 3]).random(&[2, 3]).run("add", cfg, |g, v| g.add(v[0], v[1]))?,
        t(2).random(&[2, 3]).random(&[2, 3]).run("sub", cfg, |g, v| g.sub(v[0], v[1]))?,
        t(3).random(&[2, 3]).random(&[2, 3]).run("mul", cfg, |g, v| g.mul(v[0], v[1]))?,
        t(4).random(&[5]).run("affine", cfg, |g, v| g.affine(v[0], -1.5, 0.25))?,
        t(5).random(&[2, 3, 4]).random(&[2, 1, 4]).run("mul_broadcast", cfg, |g, v| g.mul_broadcast(v[0], v[1]))?,
        t(27).random(&[2, 2, 3]).random(&[2, 2, 3]).random(&[1, 2, 3]).run("convex_combine", cfg, |g, v| {
            let w = g.sigmoid(v[2])?;
            g.convex_combine(v[0], v[1], w)
        })?,
        t(6).random(&[3, 2]).random(&[3]).run("scale_by_entry", cfg, |g, v| g.scale_by_entry(v[0], v[1], 1))?,
        t(7).random(&[2, 3, 4]).run("add_tiled_const", cfg, |g, v| {
            g.add_tiled_const(v[0], Arc::new(NdArray::from_fn(&[3, 4], |i| i as f64 * 0.1)))
        })?,
        t(8).random(&[7]).run("silu", cfg, |g, v| g.silu(v[0]))?,
        t(9).random(&[7]).run("sigmoid", cfg, |g, v| g.sigmoid(v[0]))?,
        t(10).random(&[7]).run("softplus", cfg, |g, v| g.softplus(v[0]))?,
        t(11).random(&[3, 4, 5]).random(&[2, 3]).random(&[2]).run("pointwise_conv", cfg, |g, v| {
            g.pointwise_conv(v[0], v[1], Some(v[2]))
        })?,
        t(12).random(&[2, 5, 6]).random(&[3, 2, 3, 3]).run("dilated_conv3x3 d=1", cfg, |g, v| {
            g.dilated_conv3x3(v[0], v[1], 1)
        })?,
        t(13).random(&[2, 5, 6]).random(&[1, 2, 3, 3]).run("dilated_conv3x3 d=2", cfg, |g, v| {
            g.dilated_conv3x3(v[0], v[1], 2)
        })?,
        t(14).random(&[4, 3, 3]).random(&[4]).random(&[4]).run("group_norm", cfg, |g, v| {
            g.group_norm(v[0], 2, v[1], v[2], 1e-5)
        })?,
        t(15).random(&[2, 5, 4]).run("avg_pool2x2", cfg, |g, v| g.avg_pool2x2(v[0]))?,
        t(16).random(&[3, 4, 5]).run("global_avg_pool", cfg, |g, v| g.global_avg_pool(v[0]))?,
        t(17).random(&[3, 4, 5]).run("global_max_pool", cfg, |g, v| g.global_max_pool(v[0]))?,
        t(18).random(&[3, 4, 5]).run("channel_mean", cfg, |g, v| g.channel_mean(v[0]))?,
        t(19).random(&[3, 4, 5]).run("channel_max", cfg, |g, v| g.channel_max(v[0]))?,
        t(20).random(&[2, 3, 3]).run("upsample_nearest", cfg, |g, v| g.upsample_nearest(v[0], 2, 5, 6))?,
        t(21).random(&[2, 3]).random(&[1, 3]).run("concat axis 0", cfg, |g, v| g.concat(&[v[0], v[1]], 0))?,
        t(22).random(&[2, 3]).random(&[2, 2]).run("concat axis 1", cfg, |g, v| g.concat(&[v[0], v[1]], 1))?,
        t(23).random(&[3, 4]).run("narrow", cfg, |g, v| g.narrow(v[0], 1, 1, 2))?,
        t(24).random(&[2, 3]).run("gather", cfg, |g, v| g.gather(v[0], &[4], Arc::new(vec![5, 0, u32::MAX, 5])))?,
        t(25).random(&[6]).run("sum", cfg, |g, v| g.sum(v[0]))?,
        t(26).random(&[3, 2, 3]).run("masked_cross_entropy", cfg, |g, v| {
            g.masked_cross_entropy(v[0], Arc::new(vec![(0, 2), (3, 0), (5, 1)]))
        })?,
    ];
    for (seed, mode, name) in [
        (30, Discretization::Zoh, "selective_scan zoh"),
        (31, Discretization::Simplified, "selective_scan simplified"),
    ] {
        out.push(t(seed).random(&[2, 5, 3]).ssm(3, 2).run(name, cfg, move |g, v| {
            g.selective_scan(v[0], [v[1], v[2], v[3], v[4], v[5], v[6]], mode)
        })?);
    }
    Ok(out)
}

fn tiny_model_config(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        patch_size: 2,
        groups_spe: 2,
        groups_spa: 2,
        state_size: 2,
        num_classes: 3,
        gn_groups: 2,
        tau: 4,
        fusion_mode: fusion,
        ..Default::default()
    }
}

fn model_case(name: &str, cfg: &GradcheckConfig, mcfg: ModelConfig, h: usize, w: usize) -> Result<CheckResult> {
    let bands = 4;
    let mut rest = Model::new(mcfg, bands, 3)?;
    let cube = random_cube(bands, h, w, 5);
    let mut store = std::mem::take(&mut rest.store);
    check_store(name, &mut store, cfg, |g, s| {
        let m = rest.with_store(s);
        m.forward(g, &cube, None)
    })
}

/// Composite blocks: embedding, encoder, attention, fusion and one full
/// block, each at toy size.
pub fn block_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);

    let mut store = ParamStore::new();
    let enc = DcssEncoder::new(&mut store, "enc", 4, 2, 2, 2, 2, &mut rng)?;
    let x = store.add("x", random_cube(4, 3, 5, 41))?;
    for p in store.iter_mut() {
        if p.name.ends_with("delta_bias") {
            p.value = p.value.map(|b| b + 1.0);
        }
    }
    out.push(check_store("dcss_encoder", &mut store, cfg, |g, s| {
        let f = g.param(s, x);
        let (a, b) = enc.forward(g, s, f, DcssOptions::default())?;
        let b = g.affine(b, 0.5, 0.0)?;
        g.add(a, b)
    })?);

    let mut store = ParamStore::new();
    let lgi = LgiAttention::new(&mut store, "lgi", 8, 4, &mut rng)?;
    let f = store.add("f", random_cube(8, 4, 5, 42))?;
    let spe = store.add("spe", random_cube(8, 4, 5, 43))?;
    let spa = store.add("spa", random_cube(8, 4, 5, 44))?;
    out.push(check_store("lgi_attention", &mut store, cfg, |g, s| {
        let (f, a, b) = (g.param(s, f), g.param(s, spe), g.param(s, spa));
        let (x, y) = lgi.forward(g, s, f, a, b)?;
        g.sub(x, y)
    })?);

    for mode in [FusionMode::Gated, FusionMode::AdaptiveSum, FusionMode::Concat] {
        let mut rest = Model::new(tiny_model_config(mode), 4, 7)?;
        let mut store = std::mem::take(&mut rest.store);
        let a = store.add("fa", random_cube(8, 3, 3, 45))?;
        let b = store.add("fb", random_cube(8, 3, 3, 46))?;
        out.push(check_store(&format!("fuse {mode}"), &mut store, cfg, |g, s| {
            let m = rest.with_store(s);
            let (x, y) = (g.param(s, a), g.param(s, b));
            m.fuse(g, &m.blocks[0], x, y)
        })?);
    }

    let mut rest = Model::new(tiny_model_config(FusionMode::Gated), 4, 8)?;
    let mut store = std::mem::take(&mut rest.store);
    let cube = store.add("cube", random_cube(4, 5, 5, 47))?;
    out.push(check_store("embed", &mut store, cfg, |g, s| {
        let m = rest.with_store(s);
        let c = g.param(s, cube);
        m.embed(g, c)
    })?);
    out.push(check_store("hs_mamba_block", &mut store, cfg, |g, s| {
        let m = rest.with_store(s);
        let c = g.param(s, cube);
        let f = m.embed(g, c)?;
        m.block_forward(g, 0, f, None)
    })?);
    Ok(out)
}

/// The whole network at `D=8, H=W=8, P=2, N=2`, three classes.
pub fn model_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    Ok(vec![model_case("model end-to-end", cfg, tiny_model_config(FusionMode::Gated), 8, 8)?])
}

pub fn run_level(level: Level, cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    match level {
        Level::Op => op_suite(cfg),
        Level::Block => block_suite(cfg),
        Level::Model => model_suite(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", NdArray::new(&[2], vec![0.3, -0.7]).unwrap()).unwrap();
        let cfg = GradcheckConfig::default();
        // x² through `mul` is right; a constant-scaled copy treated as an
        // input is not differentiated through and must be flagged
        let ok = check_store("square", &mut store, &cfg, |g, s| {
            let x = g.param(s, id);
            g.mul(x, x)
        })
        .unwrap();
        assert!(ok.passed(&cfg), "{ok}");
        let bad = check_store("detached", &mut store, &cfg, |g, s| {
            let x = g.param(s, id);
            let c = g.constant(s.value(id).clone());
            g.mul(x, c)
        })
        .unwrap();
        assert!(!bad.passed(&cfg), "{bad}");
    }

    #[test]
    fn op_suite_passes() {
        let cfg = GradcheckConfig::default();
        for r in op_suite(&cfg).unwrap() {
            assert!(r.passed(&cfg), "{r}");
        }
    }
}
