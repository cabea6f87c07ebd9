//! Lightweight global inline attention: whole-map channel weights and
//! spatial weights that gate the two encoder branches.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::NdArray;

pub const DEFAULT_TAU: usize = 4;
pub const SPATIAL_DILATION: usize = 2;

/// Channel attention: dual global pooling into a `2D → D/τ → D` bottleneck.
#[derive(Debug, Clone)]
pub struct SpeAttnParams {
    pub reduce_kernel: ParamId,
    pub reduce_bias: ParamId,
    pub expand_kernel: ParamId,
    pub expand_bias: ParamId,
    pub tau: usize,
}

/// Spatial attention: channel mean/max into a dilated 3×3 conv.
#[derive(Debug, Clone)]
pub struct SpaAttnParams {
    pub kernel: ParamId,
}

#[derive(Debug, Clone)]
pub struct LgiAttention {
    pub spe: SpeAttnParams,
    pub spa: SpaAttnParams,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> NdArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    NdArray::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl LgiAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        tau: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if tau == 0 || !channels.is_multiple_of(tau) || channels / tau == 0 {
            return Err(Error::Config(format!(
                "attention reduction ratio {tau} must divide D={channels}"
            )));
        }
        let hidden = channels / tau;
        let spe = SpeAttnParams {
            reduce_kernel: store
                .add(format!("{prefix}.spe.reduce.weight"), uniform(rng, &[hidden, 2 * channels], 2 * channels))?,
            reduce_bias: store.add(format!("{prefix}.spe.reduce.bias"), NdArray::zeros(&[hidden]))?,
            expand_kernel: store
                .add(format!("{prefix}.spe.expand.weight"), uniform(rng, &[channels, hidden], hidden))?,
            expand_bias: store.add(format!("{prefix}.spe.expand.bias"), NdArray::zeros(&[channels]))?,
            tau,
        };
        let spa = SpaAttnParams {
            kernel: store.add(format!("{prefix}.spa.kernel"), uniform(rng, &[1, 2, 3, 3], 18))?,
        };
        Ok(Self { spe, spa })
    }

    /// Parameter count for a given width.
    pub fn param_count(channels: usize, tau: usize) -> usize {
        let hidden = channels / tau;
        hidden * 2 * channels + hidden + channels * hidden + channels + 18
    }
}

/// `W_spe = σ(Conv²(SiLU(Conv¹([avgpool; maxpool]))))`, shape `[D, 1, 1]`.
pub fn spe_compressed_atten(g: &mut Graph, store: &ParamStore, p: &SpeAttnParams, f: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 3 {
        return dim_err(format!("channel attention expects [D,H,W], got {shape:?}"));
    }
    if !shape[0].is_multiple_of(p.tau) {
        return Err(Error::Config(format!("D={} not divisible by τ={}", shape[0], p.tau)));
    }
    let avg = g.global_avg_pool(f)?;
    let max = g.global_max_pool(f)?;
    let cat = g.concat(&[avg, max], 0)?;
    let (k1, b1) = (g.param(store, p.reduce_kernel), g.param(store, p.reduce_bias));
    let (k2, b2) = (g.param(store, p.expand_kernel), g.param(store, p.expand_bias));
    let hidden = g.pointwise_conv(cat, k1, Some(b1))?;
    let hidden = g.silu(hidden)?;
    let w = g.pointwise_conv(hidden, k2, Some(b2))?;
    g.sigmoid(w)
}

/// `W_spa = σ(SiLU(DilatedConv3×3([mean_c; max_c])))`, shape `[1, H, W]`.
pub fn spa_extended_atten(g: &mut Graph, store: &ParamStore, p: &SpaAttnParams, f: Var) -> Result<Var> {
    let avg = g.channel_mean(f)?;
    let max = g.channel_max(f)?;
    let cat = g.concat(&[avg, max], 0)?;
    let k = g.param(store, p.kernel);
    let conv = g.dilated_conv3x3(cat, k, SPATIAL_DILATION)?;
    let act = g.silu(conv)?;
    g.sigmoid(act)
}

/// `F_spe ⊙ (1 + W_spe)` and `F_spa ⊙ (1 + W_spa)`, broadcasting the channel
/// gate over space and the spatial gate over channels.
pub fn apply_global_gates(
    g: &mut Graph,
    f_spe: Var,
    f_spa: Var,
    w_spe: Var,
    w_spa: Var,
) -> Result<(Var, Var)> {
    let gate_spe = g.affine(w_spe, 1.0, 1.0)?;
    let gate_spa = g.affine(w_spa, 1.0, 1.0)?;
    Ok((g.mul_broadcast(f_spe, gate_spe)?, g.mul_broadcast(f_spa, gate_spa)?))
}

impl LgiAttention {
    /// Compute both gates from the whole map and apply them.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        f_spe: Var,
        f_spa: Var,
    ) -> Result<(Var, Var)> {
        let w_spe = spe_compressed_atten(g, store, &self.spe, image)?;
        let w_spa = spa_extended_atten(g, store, &self.spa, image)?;
        apply_global_gates(g, f_spe, f_spa, w_spe, w_spa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, LgiAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let lgi = LgiAttention::new(&mut store, "lgi", d, 4, &mut rng).unwrap();
        (store, lgi)
    }

    #[test]
    fn zero_weights_give_half_gate() {
        let (mut store, lgi) = setup(8);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let f = g.constant(NdArray::from_fn(&[8, 3, 3], |i| i as f64));
        let w = spe_compressed_atten(&mut g, &store, &lgi.spe, f).unwrap();
        assert_eq!(g.shape(w), &[8, 1, 1]);
        assert!(g.value(w).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spatial_extent_preserved() {
        let (store, lgi) = setup(4);
        for hw in [5, 9, 16] {
            let mut g = Graph::new();
            let f = g.constant(NdArray::from_fn(&[4, hw, hw], |i| (i as f64).sin()));
            let w = spa_extended_atten(&mut g, &store, &lgi.spa, f).unwrap();
            assert_eq!(g.shape(w), &[1, hw, hw]);
        }
    }

    #[test]
    fn tau_must_divide() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(LgiAttention::new(&mut store, "x", 6, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn gates_identity_and_doubling() {
        let mut g = Graph::new();
        let f = g.constant(NdArray::from_fn(&[2, 2, 2], |i| i as f64 + 1.0));
        let zero_c = g.constant(NdArray::zeros(&[2, 1, 1]));
        let zero_s = g.constant(NdArray::zeros(&[1, 2, 2]));
        let (a, b) = apply_global_gates(&mut g, f, f, zero_c, zero_s).unwrap();
        assert_eq!(g.value(a), g.value(f));
        assert_eq!(g.value(b), g.value(f));
        let one_c = g.constant(NdArray::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
        let (a, _) = apply_global_gates(&mut g, f, f, one_c, zero_s).unwrap();
        assert_eq!(&g.value(a).data()[..4], &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(&g.value(a).data()[4..], &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn param_count_formula() {
        let (store, _) = setup(8);
        assert_eq!(store.num_scalars(), LgiAttention::param_count(8, 4));
    }

    #[test]
    fn channel_gate_ignores_pixel_order() {
        let (store, lgi) = setup(8);
        let (h, w) = (4, 5);
        let base = NdArray::from_fn(&[8, h, w], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let perm: Vec<usize> = (0..h * w).map(|p| (p * 7 + 3) % (h * w)).collect();
        let shuffled = NdArray::from_fn(&[8, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            base.data()[c * h * w + perm[p]]
        });
        let mut g = Graph::new();
        let (a, b) = (g.constant(base), g.constant(shuffled));
        let wa = spe_compressed_atten(&mut g, &store, &lgi.spe, a).unwrap();
        let wb = spe_compressed_atten(&mut g, &store, &lgi.spe, b).unwrap();
        for (x, y) in g.value(wa).data().iter().zip(g.value(wb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_gate_follows_translation() {
        let (store, lgi) = setup(4);
        let field = NdArray::from_fn(&[4, 12, 12], |i| ((i * 53 % 97) as f64 / 40.0) - 1.2);
        let crop = |dy: usize, dx: usize| {
            NdArray::from_fn(&[4, 10, 10], |i| {
                let (c, y, x) = (i / 100, i / 10 % 10, i % 10);
                field.data()[c * 144 + (y + dy) * 12 + x + dx]
            })
        };
        let mut g = Graph::new();
        let (a, b) = (g.constant(crop(0, 0)), g.constant(crop(1, 2)));
        let wa = spa_extended_atten(&mut g, &store, &lgi.spa, a).unwrap();
        let wb = spa_extended_atten(&mut g, &store, &lgi.spa, b).unwrap();
        let (va, vb) = (g.value(wa).data(), g.value(wb).data());
        for y in 2..6 {
            for x in 2..6 {
                assert_eq!(vb[y * 10 + x], va[(y + 1) * 10 + x + 2]);
            }
        }
    }

    #[test]
    fn gated_output_at_most_doubles() {
        let (store, lgi) = setup(8);
        let mut g = Graph::new();
        let img = g.constant(NdArray::from_fn(&[8, 5, 5], |i| (i as f64 * 0.7).cos()));
        let fs = g.constant(NdArray::from_fn(&[8, 5, 5], |i| (i as f64 * 1.3).sin() * 3.0));
        let (a, b) = lgi.forward(&mut g, &store, img, fs, fs).unwrap();
        let bound = 2.0 * g.value(fs).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for v in g.value(a).data().iter().chain(g.value(b).data()) {
            assert!(v.abs() <= bound);
        }
    }
}
