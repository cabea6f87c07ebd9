use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hsmamba::dcss::{group_split, patchify, unpatchify, Domain};
use hsmamba::network::{fuse_arrays, random_cube, FuseParams, FusionMode};
use hsmamba::ssm::{
    associative_linear_scan, discretize_zoh, kernel_scan, recurrent_scan, selective_scan, Discretization,
    ScanParams, SsmParams,
};
use hsmamba::tensor::NdArray;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patchify_roundtrip(d in 1usize..4, h in 1usize..20, w in 1usize..20, p in 1usize..7, seed in any::<u64>()) {
        let f = random_cube(d, h, w, seed);
        let grid = patchify(&f, p).unwrap();
        prop_assert_eq!(grid.len(), h.div_ceil(p) * w.div_ceil(p));
        prop_assert_eq!(unpatchify(&grid).unwrap(), f);
    }

    #[test]
    fn group_split_roundtrip(len in 1usize..10, groups in 1usize..6, per in 1usize..5, seed in any::<u64>()) {
        let x = random_cube(1, len, groups * per, seed).reshape(&[len, groups * per]).unwrap();
        let g = group_split(&x, groups, Domain::Spatial).unwrap();
        prop_assert_eq!(g.groups() * g.group_channels(), groups * per);
        for i in 0..groups {
            let part = g.group(i);
            for t in 0..len {
                for c in 0..per {
                    prop_assert_eq!(part.at(&[t, c]), x.at(&[t, i * per + c]));
                }
            }
        }
        prop_assert_eq!(g.concat(), x);
    }

    #[test]
    fn gated_fusion_stays_between_branches(seed in any::<u64>(), bias in -20.0f64..20.0, scale in 0.01f64..10.0) {
        let a = random_cube(3, 2, 2, seed);
        let b = random_cube(3, 2, 2, seed.wrapping_add(1)).scale(scale);
        let p = FuseParams {
            kernel: random_cube(1, 1, 6, seed.wrapping_add(2)).reshape(&[1, 6]).unwrap(),
            bias: NdArray::full(&[1], bias),
            alpha: 0.5,
            beta: 0.5,
        };
        let f = fuse_arrays(FusionMode::Gated, &a, &b, &p).unwrap();
        for i in 0..f.len() {
            let (x, y) = (a.data()[i], b.data()[i]);
            prop_assert!(f.data()[i] >= x.min(y) && f.data()[i] <= x.max(y));
        }
    }

    #[test]
    fn scan_forms_agree(
        a in prop::collection::vec(-3.0f64..-0.01, 1..6),
        delta in 0.01f64..1.0,
        x in prop::collection::vec(-1.0f64..1.0, 1..40),
    ) {
        let n = a.len();
        let b: Vec<f64> = (0..n).map(|k| 0.3 + k as f64 * 0.1).collect();
        let c: Vec<f64> = (0..n).map(|k| 1.0 - k as f64 * 0.2).collect();
        let pair = discretize_zoh(&a, &b, delta).unwrap();
        let params = ScanParams::Lti(pair.clone());
        let r = recurrent_scan(&params, &c, &x).unwrap();
        let k = kernel_scan(&params, &c, &x).unwrap();
        for (u, v) in r.iter().zip(&k) {
            prop_assert!((u - v).abs() < 1e-10);
        }
        let steps: Vec<f64> = x.iter().map(|&xt| pair.b_bar[0] * xt).collect();
        let decay = vec![pair.a_bar[0]; x.len()];
        let h = associative_linear_scan(&decay, &steps, 7);
        let single = recurrent_scan(&ScanParams::Lti(discretize_zoh(&a[..1], &b[..1], delta).unwrap()), &[1.0], &x).unwrap();
        for (u, v) in h.iter().zip(&single) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn selective_scan_is_causal(len in 2usize..12, cut in 1usize..11, seed in any::<u64>()) {
        let cut = cut.min(len - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SsmParams::init(3, 2, &mut rng);
        let x = random_cube(1, len, 3, seed).reshape(&[len, 3]).unwrap();
        let mut y = x.clone();
        for v in &mut y.data_mut()[cut * 3..] {
            *v += 1.0;
        }
        let (fx, fy) = (
            selective_scan(&params, &x, Discretization::Zoh).unwrap(),
            selective_scan(&params, &y, Discretization::Zoh).unwrap(),
        );
        prop_assert_eq!(&fx.data()[..cut * 3], &fy.data()[..cut * 3]);
    }
}
