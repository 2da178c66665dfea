use kinlayer::diagnostics::{fit_decay, grazing_exponent_fit, w1p_norm, DerivativeField, DerivativeMethod};
use kinlayer::field::Field;
use kinlayer::io::{Bundle, FieldSidecar, FIELD_SCHEMA};
use kinlayer::kinetic_weight::{chi_prime, chi_unchecked, verify_velocity_lemma, WeightSpec};
use kinlayer::transport::{transport_sweep, SweepScheme};
use kinlayer::LabConfig;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chi_is_a_monotone_clamp_with_bounded_slope(s in 0.0f64..12.0) {
        let c = chi_unchecked(s);
        let d = chi_prime(s);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(s * d - 4.0 * c <= 0.0);
        prop_assert!(chi_unchecked(s + 1e-3) >= c);
    }

    #[test]
    fn alpha_never_decreases_away_from_the_wall(
        x in 0.0f64..50.0,
        dx in 0.0f64..10.0,
        xi1 in -5.0f64..5.0,
        nu0 in 0.5f64..20.0,
        u in -0.05f64..0.05,
    ) {
        let spec = WeightSpec::new(nu0, u).unwrap();
        prop_assert!(spec.alpha(x + dx, xi1) >= spec.alpha(x, xi1));
        prop_assert!(spec.alpha_tilde(x, xi1) >= (xi1 + u).abs());
    }

    #[test]
    fn single_precision_weight_tracks_double(x in 0.0f64..5.0, xi1 in -3.0f64..3.0) {
        let s64 = WeightSpec::new(5.2f64, 0.02).unwrap();
        let s32 = WeightSpec::new(5.2f32, 0.02).unwrap();
        let a = s64.alpha(x, xi1);
        let b = f64::from(s32.alpha(x as f32, xi1 as f32));
        prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a));
    }

    #[test]
    fn velocity_lemma_holds_for_any_seed(seed in any::<u64>(), nu0 in 1.0f64..12.0) {
        let spec = WeightSpec::new(nu0, 0.02).unwrap();
        let v = verify_velocity_lemma(&spec, 200, seed, 1e-12);
        prop_assert_eq!(v.violations, 0);
    }

    #[test]
    fn exponential_sweep_is_exact_for_constant_sources(
        d in prop_oneof![0.01f64..3.0, -3.0f64..-0.01],
        a in 0.1f64..15.0,
        q in -2.0f64..2.0,
        g_in in -1.0f64..1.0,
    ) {
        let x: Vec<f64> = (0..40).map(|j| 0.05 * f64::from(j).powf(1.5)).collect();
        let source = Field::from_rows(x.iter().map(|_| vec![q]).collect()).unwrap();
        let g = transport_sweep(&x, &[d], &[a], &source, &[g_in], SweepScheme::Exponential).unwrap();
        let l = *x.last().unwrap();
        for (j, &xj) in x.iter().enumerate() {
            let dist = if d > 0.0 { xj } else { l - xj };
            let exact = q / a + (g_in - q / a) * (-a * dist / d.abs()).exp();
            prop_assert!((g.row(j)[0] - exact).abs() < 1e-12 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn w1p_norm_is_absolutely_homogeneous(scale in -5.0f64..5.0, p in 1.0f64..1.99) {
        let x: Vec<f64> = (0..30).map(|j| 0.1 * f64::from(j)).collect();
        let rows: Vec<Vec<f64>> = x.iter().map(|xj| vec![(-xj).exp(), xj.sin(), 1.0 / (1.0 + xj)]).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| scale * v).collect()).collect();
        let q = [0.5, 1.0, 0.25];
        let w = [1.0, 2.0, 0.5];
        let df = DerivativeField::dense(DerivativeMethod::FiniteDifference, x.clone(), &Field::from_rows(rows).unwrap()).unwrap();
        let ds = DerivativeField::dense(DerivativeMethod::FiniteDifference, x, &Field::from_rows(scaled).unwrap()).unwrap();
        let a = w1p_norm(&df, &q, &w, p, 0.01).unwrap();
        let b = w1p_norm(&ds, &q, &w, p, 0.01).unwrap();
        prop_assert!((b - scale.abs() * a).abs() <= 1e-12 * (1.0 + b));
    }

    #[test]
    fn decay_fit_recovers_any_rate(rate in 0.001f64..0.2, amp in 1e-6f64..1e3) {
        let x: Vec<f64> = (0..60).map(|j| 1.0 + 2.0 * f64::from(j)).collect();
        let y: Vec<f64> = x.iter().map(|xj| amp * (-rate * xj).exp()).collect();
        let fit = fit_decay(&x, &y, 1.0, 200.0, 1e-12).unwrap();
        prop_assert!((fit.slope + rate).abs() < 1e-9);
    }

    #[test]
    fn grazing_fit_recovers_any_power(k in -2.5f64..0.5, c in 1e-3f64..1e3) {
        let s: Vec<f64> = (0..12).map(|j| 0.01 * 30f64.powf(f64::from(j) / 11.0)).collect();
        let v: Vec<f64> = s.iter().map(|sj| c * sj.powf(k)).collect();
        let fit = grazing_exponent_fit(&s, &v, 0.01, 0.3).unwrap();
        prop_assert!((fit.exponent - k).abs() < 1e-9);
    }

    #[test]
    fn canonical_config_text_parses_back_to_the_same_hash(
        n in (2usize..8).prop_map(|k| 2 * k),
        theta in 0.01f64..0.24,
        u in 0.001f64..0.05,
        eps in 0.0f64..0.01,
        space_n in 2usize..500,
    ) {
        let cfg = LabConfig { vel_n: n, theta, u, eps, space_n, ..LabConfig::default() };
        cfg.validate().unwrap();
        let back = LabConfig::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back.canonical(), cfg.canonical());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bundles_round_trip_bit_for_bit(
        data in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12),
        h in prop::collection::vec(-1e3f64..1e3, 3),
        case in any::<u32>(),
    ) {
        let g = Field { nx: 3, nv: 2, data: data[..6].to_vec() };
        let f = Field { nx: 3, nv: 2, data: data[6..].to_vec() };
        let b = Bundle {
            sidecar: FieldSidecar {
                schema: FIELD_SCHEMA.into(),
                dtype: "f64-le".into(),
                order: "station-major".into(),
                shape: [3, 2],
                x: vec![0.0, 0.5, 2.0],
                velocities: vec![[0.25, 0.5, 0.5], [-1.25, 0.5, 1.5]],
                weights: vec![0.5, 0.125],
                files: vec!["g.bin".into(), "f.bin".into()],
                config_hash: format!("{case:08x}"),
            },
            g,
            f,
            h: h.clone(),
            moments: h.iter().map(|v| [*v, -v / 3.0]).collect(),
            history: h.iter().map(|v| v.abs()).collect(),
        };
        let dir = std::env::temp_dir().join(format!("kinlayer-prop-{}-{case}", std::process::id()));
        b.write(&dir).unwrap();
        let r = Bundle::read(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        prop_assert_eq!(r.g.data, b.g.data);
        prop_assert_eq!(r.f.data, b.f.data);
        prop_assert_eq!(r.h, b.h);
        prop_assert_eq!(r.moments, b.moments);
        prop_assert_eq!(r.history, b.history);
        prop_assert_eq!(r.sidecar, b.sidecar);
    }
}
