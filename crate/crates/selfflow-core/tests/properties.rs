//! Property tests over the numeric invariants.

use proptest::prelude::*;

use selfflow_core::rng::Philox;
use selfflow_core::schedules::{eval_grid, timeshift, TimestepDistribution};
use selfflow_core::tensor::{self, Tensor};

proptest! {
    #[test]
    fn timeshift_stays_in_unit_interval_and_inverts(
        alpha in 0.05f64..20.0,
        t in 0.0f64..=1.0,
    ) {
        let s = timeshift(alpha, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let back = timeshift(1.0 / alpha, s).unwrap();
        prop_assert!((back - t).abs() < 1e-12);
    }

    #[test]
    fn timeshift_monotone(alpha in 0.05f64..20.0, a in 0.0f64..1.0, d in 1e-6f64..0.5) {
        let b = (a + d).min(1.0);
        prop_assert!(timeshift(alpha, a).unwrap() < timeshift(alpha, b).unwrap());
    }

    #[test]
    fn eval_grids_descend(n in 1usize..120, shift in 0.1f64..10.0) {
        let g = eval_grid(n, shift).unwrap();
        prop_assert_eq!(g.timesteps.len(), n + 1);
        prop_assert_eq!(g.timesteps[0], 1.0);
        prop_assert_eq!(*g.timesteps.last().unwrap(), 0.0);
        for w in g.timesteps.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..5000, rows in 1usize..5, cols in 2usize..9) {
        let mut rng = Philox::seed(seed);
        let t = Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| 4.0 * rng.normal()).collect(),
        ).unwrap();
        let s = tensor::softmax_last(&t);
        for row in s.data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn interpolate_affine_in_tau(seed in 0u64..5000, lo in 0.0f64..0.5, hi in 0.5f64..1.0) {
        let mut rng = Philox::seed(seed);
        let n: usize = 2 * 3 * 2;
        let x0 = Tensor::new(vec![2, 3, 2], (0..n).map(|_| rng.normal()).collect()).unwrap();
        let x1 = Tensor::new(vec![2, 3, 2], (0..n).map(|_| rng.normal()).collect()).unwrap();
        let mid = 0.5 * (lo + hi);
        let at = |t: f64| {
            selfflow_core::flow::interpolate(&x0, &x1, &Tensor::full(&[2, 3], t)).unwrap()
        };
        let (a, b, c) = (at(lo), at(mid), at(hi));
        for i in 0..n {
            prop_assert!((b.data()[i] - 0.5 * (a.data()[i] + c.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn tokenize_roundtrip(seed in 0u64..5000) {
        let mut rng = Philox::seed(seed);
        let image: Vec<f64> = (0..256).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let toks = selfflow_core::data::tokenize(&image).unwrap();
        prop_assert_eq!(selfflow_core::data::detokenize(&toks).unwrap(), image);
    }

    #[test]
    fn sampled_timesteps_stay_in_unit_interval(seed in 0u64..500, alpha in 0.2f64..8.0) {
        let d = TimestepDistribution::LogitNormal { mu: 0.0, sigma: 1.0, trainshift: alpha };
        let mut rng = Philox::seed(seed);
        for x in d.sample_n(&mut rng, 256) {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
