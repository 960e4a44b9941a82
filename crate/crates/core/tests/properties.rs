use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajflow::checkpoint::Checkpoint;
use trajflow::config::{self, ConfigDoc};
use trajflow::flow::{affine_forward, affine_inverse, CouplingParams};
use trajflow::metrics::energy_distance;
use trajflow::model::{TrainConfig, TrainMode};
use trajflow::sampling::cfg_scalar;
use trajflow::schedule::{covariance_for_times, forward_coeffs, posterior_coeffs, TimeSchedule};
use trajflow::verify::random_model;
use trajflow::Tensor;

fn level_pair() -> impl Strategy<Value = (f64, f64)> {
    (0.01f64..1.0, 0.0f64..1.0).prop_map(|(t, frac)| (t, t * frac * 0.999))
}

fn sorted_levels() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..0.99, 1..7).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        v.push(1.0);
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_mean_is_consistent((t, s) in level_pair()) {
        let k = posterior_coeffs(t, s).unwrap();
        prop_assert!((k.a * (1.0 - t) + k.b - (1.0 - s)).abs() < 1e-12);
        prop_assert!(k.c >= 0.0);
        if s > 0.0 {
            let f = forward_coeffs(s, t).unwrap();
            prop_assert!((k.c * t - s * f.sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_is_below_prior((t, s) in level_pair()) {
        // conditioning on x_t cannot increase the spread of x_s given x_0
        let k = posterior_coeffs(t, s).unwrap();
        prop_assert!(k.c <= s + 1e-12);
    }

    #[test]
    fn trajectory_covariance_is_psd(times in sorted_levels()) {
        let s = covariance_for_times(&times);
        let eig = s.clone().symmetric_eigenvalues();
        prop_assert!(eig.min() > -1e-12);
        for i in 0..times.len() {
            prop_assert!((s[(i, i)] - times[i] * times[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_schedules_are_increasing(steps in 1usize..32, frac in 0.0f64..0.99) {
        let t_min = frac * (1.0f64 / steps as f64).min(0.05);
        let sch = TimeSchedule::uniform(steps, t_min).unwrap();
        prop_assert_eq!(sch.step_count(), steps);
        prop_assert!(sch.times().windows(2).all(|w| w[0] < w[1]));
        let back = TimeSchedule::parse(&sch.to_line()).unwrap();
        prop_assert_eq!(back.times(), sch.times());
    }

    #[test]
    fn affine_coupling_inverts(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        mu in prop::collection::vec(-3.0f64..3.0, 6),
        log_sigma in prop::collection::vec(-4.0f64..4.0, 6),
    ) {
        let x = Tensor::new(&[2, 3], x).unwrap();
        let cp = CouplingParams::new(
            Tensor::new(&[2, 3], mu).unwrap(),
            Tensor::new(&[2, 3], log_sigma.iter().map(|v| v.exp()).collect()).unwrap(),
        ).unwrap();
        let (z, ld) = affine_forward(&x, &cp).unwrap();
        let back = affine_inverse(&z, &cp).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-9);
        let want: f64 = -log_sigma[..3].iter().sum::<f64>();
        prop_assert!((ld[0] - want).abs() < 1e-12);
    }

    #[test]
    fn guidance_without_weight_is_identity(
        mc in -5.0f64..5.0, mu in -5.0f64..5.0, sc in 0.01f64..5.0, su in 0.01f64..5.0,
    ) {
        prop_assert_eq!(cfg_scalar(mc, sc, mu, su, 0.0), (mc, sc));
    }

    #[test]
    fn guided_scale_never_exceeds_conditional(
        mc in -5.0f64..5.0, mu in -5.0f64..5.0, sc in 0.01f64..5.0, su in 0.01f64..5.0, w in 0.0f64..8.0,
    ) {
        let (m, s) = cfg_scalar(mc, sc, mu, su, w);
        prop_assert!(m.is_finite());
        prop_assert!(s > 0.0 && s <= sc * (1.0 + 1e-12));
    }

    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-3.0f64..3.0, 2..40),
        b in prop::collection::vec(-3.0f64..3.0, 2..40),
    ) {
        let (a, b) = (Tensor::new(&[a.len(), 1], a).unwrap(), Tensor::new(&[b.len(), 1], b).unwrap());
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(energy_distance(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        data in prop::collection::vec(any::<f64>(), 0..20),
        kind in "[a-z-]{0,12}",
        text in "[ -~\n]{0,40}",
    ) {
        let ck = Checkpoint {
            kind,
            config: text,
            tensors: vec![("w".into(), Tensor::new(&[data.len()], data).unwrap())],
        };
        let bytes = ck.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn train_config_survives_text(
        lr in 1e-6f64..1.0, iters in 1u64..100_000, batch in 1usize..512,
        lambda in 0.0f64..10.0, seed in any::<u64>(), pairwise in any::<bool>(),
    ) {
        let mut tc = TrainConfig { iters, batch, lambda, seed, ..TrainConfig::default() };
        tc.optim.lr = lr;
        tc.mode = if pairwise { TrainMode::Pairwise } else { TrainMode::EndToEnd };
        let mut doc = ConfigDoc::new();
        config::train_config_to(&mut doc, "train", &tc);
        let back = config::train_config_from(&ConfigDoc::parse(&doc.to_text()).unwrap(), "train", TrainConfig::default()).unwrap();
        prop_assert_eq!(back, tc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn transporter_inverts_random_weights(seed in any::<u64>(), dim in 1usize..6, t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(dim, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[16, dim], &mut rng);
        let tr = m.transporter();
        let (u, ld) = tr.apply(&m.params, &x, &[t; 16], &[2; 16]).unwrap();
        let (back, _) = tr.inverse(&m.params, &u, &[t; 16], &[2; 16]).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-8);
        prop_assert!(ld.iter().all(|v| v.is_finite()));
    }
}
