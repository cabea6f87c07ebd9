//! State-space mathematics: zero-order-hold discretization, the recurrent and
//! convolutional forms of a time-invariant scan, and the selective scan whose
//! timescale and projections depend on the input token.
//!
//! The state matrix is diagonal throughout, so every matrix exponential and
//! inverse reduces to elementwise operations on the diagonal.

use std::time::Instant;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::ops::{sigmoid_scalar, softplus_scalar};
use crate::tensor::NdArray;

/// Below this `|Δ·A|` the ZOH input factor uses its series limit `Δ·B`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// How the input matrix is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`.
    #[default]
    Zoh,
    /// `B̄ = ΔB`, the first-order shortcut. Kept for cross-checking.
    Simplified,
}

/// Per-step decay and input-injection factors of a diagonal SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedPair {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `(exp(ΔA) − 1)/A`, the ZOH input factor per unit of `B`.
fn zoh_gain<T: Float>(delta: T, a: T) -> T {
    let u = delta * a;
    if u.abs() < T::from(ZOH_SERIES_THRESHOLD).unwrap() {
        delta
    } else {
        u.exp_m1() / a
    }
}

/// `(u·eᵘ − (eᵘ − 1))/u²`, so that `∂/∂A [(e^{ΔA} − 1)/A] = Δ²·ψ(ΔA)`.
fn zoh_gain_dadj(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        0.5 + u / 3.0 + u * u / 8.0 + u * u * u / 30.0
    } else {
        (u * u.exp() - u.exp_m1()) / (u * u)
    }
}

/// Zero-order-hold discretization of a diagonal system with step `delta`.
pub fn discretize_zoh(a: &[f64], b: &[f64], delta: f64) -> Result<DiscretizedPair> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("timescale must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return dim_err(format!("A has {} entries but B has {}", a.len(), b.len()));
    }
    let a_bar = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let b_bar = a.iter().zip(b).map(|(&ai, &bi)| zoh_gain(delta, ai) * bi).collect();
    Ok(DiscretizedPair { a_bar, b_bar })
}

/// Parameters of a scan: either fixed for all steps or one pair per step.
#[derive(Debug, Clone)]
pub enum ScanParams {
    Lti(DiscretizedPair),
    Varying(Vec<DiscretizedPair>),
}

impl ScanParams {
    fn state_size(&self) -> usize {
        match self {
            ScanParams::Lti(p) => p.a_bar.len(),
            ScanParams::Varying(ps) => ps.first().map_or(0, |p| p.a_bar.len()),
        }
    }

    fn pair(&self, t: usize) -> &DiscretizedPair {
        match self {
            ScanParams::Lti(p) => p,
            ScanParams::Varying(ps) => &ps[t],
        }
    }
}

/// `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C·h_t`, starting from `h_0 = 0`.
pub fn recurrent_scan(params: &ScanParams, c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = params.state_size();
    if c.len() != n {
        return dim_err(format!("C has {} entries for state size {n}", c.len()));
    }
    if let ScanParams::Varying(ps) = params {
        if ps.len() < x.len() {
            return dim_err(format!("{} step parameters for {} inputs", ps.len(), x.len()));
        }
    }
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let p = params.pair(t);
        let mut acc = 0.0;
        for k in 0..n {
            h[k] = p.a_bar[k] * h[k] + p.b_bar[k] * xt;
            acc += c[k] * h[k];
        }
        y.push(acc);
    }
    Ok(y)
}

/// The causal kernel `K̄ = (CB̄, CĀB̄, …, CĀ^{L−1}B̄)`.
pub fn ssm_kernel(pair: &DiscretizedPair, c: &[f64], len: usize) -> Vec<f64> {
    let mut power: Vec<f64> = vec![1.0; pair.a_bar.len()];
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(
            c.iter()
                .zip(&power)
                .zip(&pair.b_bar)
                .map(|((ci, pi), bi)| ci * pi * bi)
                .sum(),
        );
        for (p, a) in power.iter_mut().zip(&pair.a_bar) {
            *p *= a;
        }
    }
    kernel
}

/// Convolutional form of the time-invariant scan.
pub fn kernel_scan(params: &ScanParams, c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let pair = match params {
        ScanParams::Lti(p) => p,
        ScanParams::Varying(_) => {
            return Err(Error::Mode(
                "kernel scan requires time-invariant parameters".into(),
            ))
        }
    };
    if c.len() != pair.a_bar.len() {
        return dim_err(format!("C has {} entries for state size {}", c.len(), pair.a_bar.len()));
    }
    let kernel = ssm_kernel(pair, c, x.len());
    Ok((0..x.len())
        .map(|t| (0..=t).map(|s| kernel[s] * x[t - s]).sum())
        .collect())
}

/// First-order linear recurrence `h_t = a_t·h_{t−1} + b_t` evaluated with a
/// chunked two-level scan over the associative operator
/// `(a₁,b₁)∘(a₂,b₂) = (a₁a₂, a₂b₁ + b₂)`. Returns every `h_t`.
pub fn associative_linear_scan(a: &[f64], b: &[f64], chunk: usize) -> Vec<f64> {
    let chunk = chunk.max(1);
    let len = a.len();
    // local scans within each chunk, each starting from zero state
    let mut local = vec![0.0; len];
    let mut carries = Vec::new();
    for start in (0..len).step_by(chunk) {
        let end = (start + chunk).min(len);
        let (mut prod, mut h) = (1.0, 0.0);
        for t in start..end {
            h = a[t] * h + b[t];
            prod *= a[t];
            local[t] = h;
        }
        carries.push((prod, h));
    }
    // exclusive prefix over chunk aggregates
    let mut incoming = Vec::with_capacity(carries.len());
    let mut state = 0.0;
    for &(prod, h) in &carries {
        incoming.push(state);
        state = prod * state + h;
    }
    let mut out = local;
    for (ci, start) in (0..len).step_by(chunk).enumerate() {
        let end = (start + chunk).min(len);
        let mut decay = 1.0;
        for t in start..end {
            decay *= a[t];
            out[t] += decay * incoming[ci];
        }
    }
    out
}

/// Learnable parameters of one selective-scan instance over `D` channels
/// with an `N`-dimensional diagonal state per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `[D, N]`; the state matrix is `A = −exp(a_log)`.
    pub a_log: NdArray,
    /// `[N, D]`, produces `B_t` from the token.
    pub b_proj: NdArray,
    /// `[N, D]`, produces `C_t` from the token.
    pub c_proj: NdArray,
    /// `[D, D]` timescale projection.
    pub delta_proj: NdArray,
    /// `[D]` timescale bias.
    pub delta_bias: NdArray,
    /// `[D]` skip scale.
    pub d_skip: NdArray,
}

impl SsmParams {
    pub fn channels(&self) -> usize {
        self.a_log.dim(0)
    }

    pub fn state_size(&self) -> usize {
        self.a_log.dim(1)
    }

    /// Default initialization: `a_log = ln(1..=N)` per channel, timescale
    /// bias such that `softplus(bias)` is log-uniform in `[1e-3, 0.1]`,
    /// projections uniform in `±1/√D`, skip scale 1.
    pub fn init(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let a_log = NdArray::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln());
        let bound = 1.0 / (channels as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            NdArray::from_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        let b_proj = uniform(&[state, channels]);
        let c_proj = uniform(&[state, channels]);
        let delta_proj = uniform(&[channels, channels]);
        let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
        let delta_bias = NdArray::from_fn(&[channels], |_| {
            let dt: f64 = rng.gen_range(lo..hi).exp();
            inverse_softplus(dt)
        });
        Self {
            a_log,
            b_proj,
            c_proj,
            delta_proj,
            delta_bias,
            d_skip: NdArray::full(&[channels], 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.a_log.dim(0), self.a_log.dim(1));
        let ok = self.a_log.rank() == 2
            && self.b_proj.shape() == [n, d]
            && self.c_proj.shape() == [n, d]
            && self.delta_proj.shape() == [d, d]
            && self.delta_bias.shape() == [d]
            && self.d_skip.shape() == [d];
        if ok {
            Ok(())
        } else {
            dim_err(format!("inconsistent selective-scan parameters for D={d}, N={n}"))
        }
    }

    /// Parameter arrays in a fixed order.
    pub fn arrays(&self) -> [&NdArray; 6] {
        [&self.a_log, &self.b_proj, &self.c_proj, &self.delta_proj, &self.delta_bias, &self.d_skip]
    }

    pub fn from_arrays(arrays: [NdArray; 6]) -> Result<Self> {
        let [a_log, b_proj, c_proj, delta_proj, delta_bias, d_skip] = arrays;
        let p = Self { a_log, b_proj, c_proj, delta_proj, delta_bias, d_skip };
        p.validate()?;
        Ok(p)
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    // x = log(e^y − 1) = y + log(1 − e^{−y})
    y + (-(-y).exp_m1()).ln()
}

/// Plain slices of selective-scan parameters in any float type.
struct ScanWeights<'a, T> {
    a_log: &'a [T],
    b_proj: &'a [T],
    c_proj: &'a [T],
    delta_proj: &'a [T],
    delta_bias: &'a [T],
    d_skip: &'a [T],
}

fn softplus_t<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Forward selective scan over one sequence `x: [L, D]` without saving
/// intermediates.
fn scan_infer<T: Float>(
    w: &ScanWeights<'_, T>,
    x: &[T],
    len: usize,
    d: usize,
    n: usize,
    mode: Discretization,
) -> Vec<T> {
    let neg_a: Vec<T> = w.a_log.iter().map(|v| -v.exp()).collect();
    let mut h = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); len * d];
    let mut bt = vec![T::zero(); n];
    let mut ct = vec![T::zero(); n];
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        for k in 0..n {
            let (mut sb, mut sc) = (T::zero(), T::zero());
            for j in 0..d {
                sb = sb + w.b_proj[k * d + j] * xt[j];
                sc = sc + w.c_proj[k * d + j] * xt[j];
            }
            bt[k] = sb;
            ct[k] = sc;
        }
        for ch in 0..d {
            let mut z = w.delta_bias[ch];
            for j in 0..d {
                z = z + w.delta_proj[ch * d + j] * xt[j];
            }
            let dt = softplus_t(z);
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let a = neg_a[ch * n + k];
                let gain = match mode {
                    Discretization::Zoh => zoh_gain(dt, a),
                    Discretization::Simplified => dt,
                };
                hs[k] = (dt * a).exp() * hs[k] + gain * bt[k] * xt[ch];
                acc = acc + ct[k] * hs[k];
            }
            y[t * d + ch] = acc + w.d_skip[ch] * xt[ch];
        }
    }
    y
}

/// Selective (S6) scan of one sequence `x: [L, D]`.
///
/// Per step: `B_t = b_proj·x_t`, `C_t = c_proj·x_t`,
/// `Δ_t = softplus(delta_proj·x_t + delta_bias)`; each channel keeps an
/// `N`-dim diagonal state discretized with its own `Δ_t`, and
/// `y_t = C_t·h_t + d_skip ⊙ x_t`.
pub fn selective_scan(params: &SsmParams, x: &NdArray, mode: Discretization) -> Result<NdArray> {
    params.validate()?;
    x.expect_rank(2, "selective_scan input")?;
    let (len, d) = (x.dim(0), x.dim(1));
    if d != params.channels() {
        return dim_err(format!("input has {d} channels, scan expects {}", params.channels()));
    }
    let w = ScanWeights {
        a_log: params.a_log.data(),
        b_proj: params.b_proj.data(),
        c_proj: params.c_proj.data(),
        delta_proj: params.delta_proj.data(),
        delta_bias: params.delta_bias.data(),
        d_skip: params.d_skip.data(),
    };
    let y = scan_infer(&w, x.data(), len, d, params.state_size(), mode);
    NdArray::new(&[len, d], y)
}

/// Intermediates kept by [`selective_scan_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ScanCache {
    batch: usize,
    len: usize,
    /// `[B, L, D, N]` states after each step.
    states: Vec<f64>,
    /// `[B, L, D]` pre-softplus timescales.
    z: Vec<f64>,
    /// `[B, L, N]`
    b_t: Vec<f64>,
    /// `[B, L, N]`
    c_t: Vec<f64>,
}

/// Batched selective scan over `x: [B, L, D]` keeping what the backward pass
/// needs.
pub fn selective_scan_forward(
    params: &SsmParams,
    x: &NdArray,
    mode: Discretization,
) -> Result<(NdArray, ScanCache)> {
    params.validate()?;
    x.expect_rank(3, "selective_scan_forward input")?;
    let (batch, len, d) = (x.dim(0), x.dim(1), x.dim(2));
    if d != params.channels() {
        return dim_err(format!("input has {d} channels, scan expects {}", params.channels()));
    }
    let n = params.state_size();
    let neg_a: Vec<f64> = params.a_log.data().iter().map(|v| -v.exp()).collect();
    let (wb, wc, wdt) = (params.b_proj.data(), params.c_proj.data(), params.delta_proj.data());
    let (bdt, dskip) = (params.delta_bias.data(), params.d_skip.data());

    let mut states = vec![0.0; batch * len * d * n];
    let mut zs = vec![0.0; batch * len * d];
    let mut bts = vec![0.0; batch * len * n];
    let mut cts = vec![0.0; batch * len * n];
    let mut y = vec![0.0; batch * len * d];
    let mut h = vec![0.0; d * n];

    for b in 0..batch {
        h.fill(0.0);
        for t in 0..len {
            let row = b * len + t;
            let xt = &x.data()[row * d..(row + 1) * d];
            let bt = &mut bts[row * n..(row + 1) * n];
            let ct = &mut cts[row * n..(row + 1) * n];
            for k in 0..n {
                let wbk = &wb[k * d..(k + 1) * d];
                let wck = &wc[k * d..(k + 1) * d];
                bt[k] = wbk.iter().zip(xt).map(|(w, v)| w * v).sum();
                ct[k] = wck.iter().zip(xt).map(|(w, v)| w * v).sum();
            }
            for ch in 0..d {
                let wrow = &wdt[ch * d..(ch + 1) * d];
                let z = bdt[ch] + wrow.iter().zip(xt).map(|(w, v)| w * v).sum::<f64>();
                zs[row * d + ch] = z;
                let dt = softplus_scalar(z);
                let hs = &mut h[ch * n..(ch + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    let a = neg_a[ch * n + k];
                    let gain = match mode {
                        Discretization::Zoh => zoh_gain(dt, a),
                        Discretization::Simplified => dt,
                    };
                    hs[k] = (dt * a).exp() * hs[k] + gain * bt[k] * xt[ch];
                    acc += ct[k] * hs[k];
                }
                y[row * d + ch] = acc + dskip[ch] * xt[ch];
            }
            states[row * d * n..(row + 1) * d * n].copy_from_slice(&h);
        }
    }
    let out = NdArray::new(&[batch, len, d], y)?;
    out.ensure_finite("selective_scan")?;
    Ok((out, ScanCache { batch, len, states, z: zs, b_t: bts, c_t: cts }))
}

/// Gradients of a selective scan, in the field order of [`SsmParams`].
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub x: NdArray,
    pub params: [NdArray; 6],
}

pub fn selective_scan_backward(
    params: &SsmParams,
    x: &NdArray,
    cache: &ScanCache,
    grad: &NdArray,
    mode: Discretization,
) -> ScanGrads {
    let (batch, len) = (cache.batch, cache.len);
    let d = params.channels();
    let n = params.state_size();
    let neg_a: Vec<f64> = params.a_log.data().iter().map(|v| -v.exp()).collect();
    let (wb, wc, wdt) = (params.b_proj.data(), params.c_proj.data(), params.delta_proj.data());
    let dskip = params.d_skip.data();
    let xd = x.data();
    let gd = grad.data();

    let mut gx = vec![0.0; batch * len * d];
    let mut ga_log = vec![0.0; d * n];
    let mut gwb = vec![0.0; n * d];
    let mut gwc = vec![0.0; n * d];
    let mut gwdt = vec![0.0; d * d];
    let mut gbdt = vec![0.0; d];
    let mut gdskip = vec![0.0; d];

    let mut gbt = vec![0.0; len * n];
    let mut gct = vec![0.0; len * n];
    let mut gz = vec![0.0; len * d];
    let mut carry = vec![0.0; n];

    for b in 0..batch {
        gbt.fill(0.0);
        gct.fill(0.0);
        for ch in 0..d {
            carry.fill(0.0);
            for t in (0..len).rev() {
                let row = b * len + t;
                let xv = xd[row * d + ch];
                let gy = gd[row * d + ch];
                gdskip[ch] += gy * xv;
                gx[row * d + ch] += gy * dskip[ch];
                let z = cache.z[row * d + ch];
                let dt = softplus_scalar(z);
                let bt = &cache.b_t[row * n..(row + 1) * n];
                let ct = &cache.c_t[row * n..(row + 1) * n];
                let h_now = &cache.states[(row * d + ch) * n..(row * d + ch + 1) * n];
                let h_prev = (t > 0).then(|| {
                    let prow = row - 1;
                    &cache.states[(prow * d + ch) * n..(prow * d + ch + 1) * n]
                });
                let mut gdt = 0.0;
                for k in 0..n {
                    let a = neg_a[ch * n + k];
                    let u = dt * a;
                    let abar = u.exp();
                    let (gain, dgain_ddt, dgain_da) = match mode {
                        Discretization::Zoh if u.abs() < ZOH_SERIES_THRESHOLD => (dt, 1.0, 0.0),
                        Discretization::Zoh => (u.exp_m1() / a, abar, dt * dt * zoh_gain_dadj(u)),
                        Discretization::Simplified => (dt, 1.0, 0.0),
                    };
                    let hp = h_prev.map_or(0.0, |hp| hp[k]);
                    let gh = gy * ct[k] + carry[k];
                    gct[t * n + k] += gy * h_now[k];
                    let g_abar = gh * hp;
                    let g_bbar = gh * xv;
                    gx[row * d + ch] += gh * gain * bt[k];
                    gdt += g_abar * a * abar + g_bbar * bt[k] * dgain_ddt;
                    let g_a = g_abar * dt * abar + g_bbar * bt[k] * dgain_da;
                    ga_log[ch * n + k] += g_a * a;
                    gbt[t * n + k] += g_bbar * gain;
                    carry[k] = gh * abar;
                }
                gz[t * d + ch] = gdt * sigmoid_scalar(z);
            }
        }
        for t in 0..len {
            let row = b * len + t;
            let xt = &xd[row * d..(row + 1) * d];
            let gxt = &mut gx[row * d..(row + 1) * d];
            for ch in 0..d {
                let g = gz[t * d + ch];
                if g == 0.0 {
                    continue;
                }
                gbdt[ch] += g;
                for j in 0..d {
                    gwdt[ch * d + j] += g * xt[j];
                    gxt[j] += g * wdt[ch * d + j];
                }
            }
            for k in 0..n {
                let (g_b, g_c) = (gbt[t * n + k], gct[t * n + k]);
                for j in 0..d {
                    gwb[k * d + j] += g_b * xt[j];
                    gwc[k * d + j] += g_c * xt[j];
                    gxt[j] += g_b * wb[k * d + j] + g_c * wc[k * d + j];
                }
            }
        }
    }

    let mk = |shape: &[usize], v: Vec<f64>| NdArray::new(shape, v).expect("shape by construction");
    ScanGrads {
        x: mk(x.shape(), gx),
        params: [
            mk(&[d, n], ga_log),
            mk(&[n, d], gwb),
            mk(&[n, d], gwc),
            mk(&[d, d], gwdt),
            mk(&[d], gbdt),
            mk(&[d], gdskip),
        ],
    }
}

/// Scalar precision used by [`benchmark_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

/// Times the selective scan at each sequence length.
pub fn benchmark_scan(
    lengths: &[usize],
    channels: usize,
    state: usize,
    repeats: usize,
    precision: Precision,
) -> Result<Vec<BenchRow>> {
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter("benchmark lengths must be ascending".into()));
    }
    if repeats == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let params = SsmParams::init(channels, state, &mut rng);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let x: Vec<f64> = (0..len * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let samples = match precision {
            Precision::F64 => time_scan::<f64>(&params, &x, len, repeats),
            Precision::F32 => time_scan::<f32>(&params, &x, len, repeats),
        };
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(BenchRow { len, mean_seconds: mean, std_seconds: std });
    }
    Ok(rows)
}

fn time_scan<T: Float>(params: &SsmParams, x: &[f64], len: usize, repeats: usize) -> Vec<f64> {
    let cast = |a: &NdArray| -> Vec<T> { a.data().iter().map(|&v| T::from(v).unwrap()).collect() };
    let owned = params.arrays().map(cast);
    let w = ScanWeights {
        a_log: &owned[0],
        b_proj: &owned[1],
        c_proj: &owned[2],
        delta_proj: &owned[3],
        delta_bias: &owned[4],
        d_skip: &owned[5],
    };
    let xs: Vec<T> = x.iter().map(|&v| T::from(v).unwrap()).collect();
    let (d, n) = (params.channels(), params.state_size());
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            let y = scan_infer(&w, &xs, len, d, n, Discretization::Zoh);
            std::hint::black_box(&y);
            start.elapsed().as_secs_f64().max(1e-9)
        })
        .collect()
}

/// CSV rendering `L,mean_seconds,std_seconds`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,mean_seconds,std_seconds\n");
    for r in rows {
        s.push_str(&format!("{},{:.9},{:.9}\n", r.len, r.mean_seconds, r.std_seconds));
    }
    s
}

/// Least-squares slope of `log(time)` against `log(L)`.
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> =
        rows.iter().map(|r| ((r.len as f64).ln(), r.mean_seconds.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_params(rng: &mut ChaCha8Rng, d: usize, n: usize) -> SsmParams {
        let mut p = SsmParams::init(d, n, rng);
        p.a_log = NdArray::from_fn(&[d, n], |_| rng.gen_range(-1.0..1.0));
        p.delta_bias = NdArray::from_fn(&[d], |_| rng.gen_range(-1.0..1.0));
        p.d_skip = NdArray::from_fn(&[d], |_| rng.gen_range(-1.0..1.0));
        p
    }

    #[test]
    fn zoh_scalar_closed_form() {
        let p = discretize_zoh(&[-1.0], &[1.0], std::f64::consts::LN_2).unwrap();
        assert!((p.a_bar[0] - 0.5).abs() < 1e-15);
        assert!((p.b_bar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_product_uses_series_limit() {
        let p = discretize_zoh(&[-1e-12], &[3.0], 0.5).unwrap();
        assert!((p.a_bar[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.b_bar[0], 1.5);
    }

    #[test]
    fn zoh_rejects_nonpositive_delta() {
        assert!(matches!(discretize_zoh(&[-1.0], &[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(discretize_zoh(&[-1.0], &[1.0], -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn recurrent_memoryless_and_decay() {
        let memoryless =
            ScanParams::Lti(DiscretizedPair { a_bar: vec![0.0], b_bar: vec![1.0] });
        assert_eq!(recurrent_scan(&memoryless, &[1.0], &[3.0, 5.0]).unwrap(), vec![3.0, 5.0]);
        let half = ScanParams::Lti(DiscretizedPair { a_bar: vec![0.5], b_bar: vec![1.0] });
        assert_eq!(recurrent_scan(&half, &[1.0], &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.5, 0.25]);
        assert!(recurrent_scan(&half, &[1.0], &[]).unwrap().is_empty());
    }

    #[test]
    fn kernel_closed_form_and_impulse() {
        let pair = DiscretizedPair { a_bar: vec![0.5], b_bar: vec![1.0] };
        assert_eq!(ssm_kernel(&pair, &[1.0], 3), vec![1.0, 0.5, 0.25]);
        let y = kernel_scan(&ScanParams::Lti(pair), &[1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn kernel_scan_rejects_varying() {
        let p = DiscretizedPair { a_bar: vec![0.5], b_bar: vec![1.0] };
        let v = ScanParams::Varying(vec![p.clone(), p]);
        assert!(matches!(kernel_scan(&v, &[1.0], &[1.0, 2.0]), Err(Error::Mode(_))));
    }

    #[test]
    fn two_state_matches_dense_matrix_recurrence() {
        let pair = DiscretizedPair { a_bar: vec![0.9, -0.3], b_bar: vec![0.2, 1.5] };
        let c = [0.7, -1.1];
        let x = [1.0, -2.0, 0.5, 3.0, 0.0];
        let y = recurrent_scan(&ScanParams::Lti(pair), &c, &x).unwrap();
        // dense 2x2 form with explicit zero off-diagonals
        let a = [[0.9, 0.0], [0.0, -0.3]];
        let mut h = [0.0, 0.0];
        for (t, &xt) in x.iter().enumerate() {
            let nh = [
                a[0][0] * h[0] + a[0][1] * h[1] + 0.2 * xt,
                a[1][0] * h[0] + a[1][1] * h[1] + 1.5 * xt,
            ];
            h = nh;
            assert!((y[t] - (c[0] * h[0] + c[1] * h[1])).abs() < 1e-14);
        }
    }

    #[test]
    fn associative_scan_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut h = 0.0;
        let seq: Vec<f64> = a.iter().zip(&b).map(|(a, b)| { h = a * h + b; h }).collect();
        for chunk in [1, 7, 64, 1000, 4096] {
            let par = associative_linear_scan(&a, &b, chunk);
            let err = seq.iter().zip(&par).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(err <= 1e-10, "chunk {chunk}: {err}");
        }
    }

    #[test]
    fn degenerate_timescale_is_pure_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = rand_params(&mut rng, 3, 4);
        p.delta_proj = NdArray::zeros(&[3, 3]);
        p.delta_bias = NdArray::full(&[3], -800.0);
        let x = NdArray::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
        let y = selective_scan(&p, &x, Discretization::Zoh).unwrap();
        for t in 0..5 {
            for c in 0..3 {
                let want = p.d_skip.data()[c] * x.at(&[t, c]);
                assert!((y.at(&[t, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cached_forward_matches_inference_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(&mut rng, 3, 5);
        let x = NdArray::from_fn(&[2, 7, 3], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = selective_scan_forward(&p, &x, Discretization::Zoh).unwrap();
        for b in 0..2 {
            let xs = NdArray::new(&[7, 3], x.data()[b * 21..(b + 1) * 21].to_vec()).unwrap();
            let ys = selective_scan(&p, &xs, Discretization::Zoh).unwrap();
            for (a, e) in ys.data().iter().zip(&y.data()[b * 21..(b + 1) * 21]) {
                assert!((a - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn benchmark_edge_cases() {
        assert!(benchmark_scan(&[16, 32], 1, 1, 0, Precision::F64).unwrap().is_empty());
        let rows = benchmark_scan(&[8], 1, 1, 2, Precision::F32).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].mean_seconds > 0.0);
        assert!(benchmark_scan(&[32, 16], 1, 1, 1, Precision::F64).is_err());
    }

    #[test]
    fn init_respects_timescale_range_and_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SsmParams::init(16, 16, &mut rng);
        for &b in p.delta_bias.data() {
            let dt = softplus_scalar(b);
            assert!((1e-3 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
        assert!(p.a_log.data().iter().all(|v| -v.exp() < 0.0));
        assert!((p.a_log.at(&[3, 15]) - 16f64.ln()).abs() < 1e-15);
    }
}
