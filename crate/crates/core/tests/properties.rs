use fracnls::config::{parse_config, ExperimentKind, RunConfig};
use fracnls::field::{apply_group, mass, sobolev_norm, ComplexField, GridSpec, SobolevIndex};
use fracnls::io::fmt_f64;
use fracnls::kernel::{fbm_covariance, HurstKernel};
use fracnls::nonlinearity::NonlinearitySpec;
use fracnls::noise::ConvolutionPath;
use fracnls::solver::{solve_mild, SolverConfig};
use fracnls::stats::wilson_interval;
use num_complex::Complex64;
use proptest::prelude::*;

fn field(n: usize) -> impl Strategy<Value = ComplexField> {
    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), n).prop_map(move |v| {
        let grid = GridSpec::new(1, n, std::f64::consts::PI).unwrap();
        ComplexField::from_values(grid, v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_is_an_isometry(u in field(32), t in -10.0f64..10.0, s in 0.0f64..2.0) {
        let v = apply_group(&u, t);
        let (a, b) = (sobolev_norm(&u, SobolevIndex(s)), sobolev_norm(&v, SobolevIndex(s)));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn group_composes(u in field(16), t in -3.0f64..3.0, r in -3.0f64..3.0) {
        let lhs = apply_group(&apply_group(&u, t), r);
        let rhs = apply_group(&u, t + r);
        let d = sobolev_norm(&lhs.sub(&rhs).unwrap(), SobolevIndex::L2);
        prop_assert!(d <= 1e-11 * sobolev_norm(&u, SobolevIndex::L2).max(1.0));
    }

    #[test]
    fn field_csv_round_trips(u in field(16)) {
        let back = ComplexField::from_csv(*u.grid(), &u.to_csv()).unwrap();
        prop_assert_eq!(back.values(), u.values());
    }

    #[test]
    fn float_format_round_trips(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn kernel_is_homogeneous(h in 0.05f64..0.95, s in 0.05f64..1.0, gap in 0.01f64..1.0, a in 0.2f64..5.0) {
        let k = HurstKernel::new(h).unwrap();
        let base = k.eval(s + gap, s).unwrap();
        let scaled = k.eval(a * (s + gap), a * s).unwrap();
        prop_assert!((scaled - a.powf(h - 0.5) * base).abs() <= 1e-8 * base.abs().max(1.0));
    }

    #[test]
    fn fbm_covariance_is_a_covariance(h in 0.01f64..0.99, t in 0.0f64..3.0, s in 0.0f64..3.0) {
        let r = fbm_covariance(h, t, s).unwrap();
        prop_assert!((r - fbm_covariance(h, s, t).unwrap()).abs() < 1e-14);
        let (vt, vs) = (t.powf(2.0 * h), s.powf(2.0 * h));
        prop_assert!(r * r <= vt * vs * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(n in 1usize..5000, frac in 0.0f64..=1.0) {
        let hits = ((n as f64) * frac).floor() as usize;
        let (lo, hi) = wilson_interval(hits, n);
        let p = hits as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-15 && p <= hi + 1e-15 && hi <= 1.0);
    }

    #[test]
    fn config_round_trips(h in 0.51f64..0.99, seed in any::<u64>(), n in 1usize..512) {
        let mut cfg = RunConfig::defaults(ExperimentKind::Fbm);
        cfg.hurst = h;
        cfg.seed = seed;
        cfg.n = n;
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn noiseless_kerr_conserves_mass(u in field(32), lambda in prop::sample::select(vec![-1.0, 1.0]), sigma in 0.5f64..1.5) {
        let u = u.scale(Complex64::new(0.3, 0.0));
        let nl = NonlinearitySpec::kerr(lambda, sigma).unwrap();
        let cfg = SolverConfig::new(0.05, 1e-3, 1e12, &u).unwrap();
        let z = ConvolutionPath::zero(*u.grid(), cfg.timegrid, 0.7);
        let traj = solve_mild(&u, &nl, &z, 0.0, &cfg).unwrap();
        let m0 = mass(&u);
        for f in traj.fields() {
            prop_assert!((mass(f) - m0).abs() <= 1e-12 * m0.max(1e-300));
        }
    }
}
