use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajflow::checkpoint::{self, Checkpoint};
use trajflow::cond::Conditions;
use trajflow::data::{Dataset, DatasetParams};
use trajflow::flow::PredictorKind;
use trajflow::model::*;
use trajflow::sampling::{sample, score_denoise, SampleRequest, ScoreConfig};
use trajflow::schedule::sample_trajectory;

fn small_config(dim: usize, steps: Vec<usize>) -> NtmConfig {
    let mut cfg = NtmConfig::new(dim);
    cfg.transporter.hidden = 8;
    cfg.predictor = PredictorKind::Mlp { hidden: 16, layers: 2 };
    cfg.steps = steps;
    cfg
}

fn quick_train(cfg: NtmConfig, ds: &Dataset, mode: TrainMode, iters: u64, seed: u64) -> (NtmModel, Vec<StepRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NtmModel::new(cfg, &mut rng).unwrap();
    let tc = TrainConfig {
        mode,
        iters,
        batch: 32,
        cfg_dropout: 0.0,
        optim: OptimConfig {
            lr: 3e-3,
            warmup: 10,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut tr = NtmTrainer::new(&model, tc).unwrap();
    let recs = (0..iters)
        .map(|_| {
            let (x, c) = ds.sample(32, &mut rng);
            tr.step(&mut model, &x, &c, &mut rng).unwrap()
        })
        .collect();
    (model, recs)
}

fn mean_nll(recs: &[StepRecord]) -> f64 {
    recs.iter().map(|r| r.nll).sum::<f64>() / recs.len() as f64
}

#[test]
fn training_lowers_nll_in_both_modes() {
    let ds = Dataset::by_name("gauss1d", DatasetParams::default()).unwrap();
    for mode in [TrainMode::EndToEnd, TrainMode::Pairwise] {
        let (_, recs) = quick_train(small_config(1, vec![2, 4]), &ds, mode, 300, 0);
        let (head, tail) = (mean_nll(&recs[..30]), mean_nll(&recs[270..]));
        assert!(tail < head, "{mode:?}: {head} -> {tail}");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = Dataset::by_name("two_moons", DatasetParams::default()).unwrap();
    let (a, ra) = quick_train(small_config(2, vec![4]), &ds, TrainMode::EndToEnd, 20, 7);
    let (b, rb) = quick_train(small_config(2, vec![4]), &ds, TrainMode::EndToEnd, 20, 7);
    assert_eq!(ra, rb);
    assert_eq!(a.params.to_named(), b.params.to_named());
}

#[test]
fn checkpoint_restores_sampling_exactly() {
    let ds = Dataset::by_name("two_moons", DatasetParams::default()).unwrap();
    let (model, _) = quick_train(small_config(2, vec![2, 4]), &ds, TrainMode::EndToEnd, 10, 1);
    let bytes = checkpoint::ntm_checkpoint(&model).to_bytes();
    let back = checkpoint::ntm_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(checkpoint::ntm_checkpoint(&back).to_bytes(), bytes);
    for steps in [2, 4] {
        let req = SampleRequest::new(Conditions::Unconditional(64), steps);
        let a = sample(&model, &req, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample(&back, &req, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.x, b.x);
    }
}

#[test]
fn wrong_step_count_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = NtmModel::new(small_config(2, vec![4]), &mut rng).unwrap();
    let err = sample(&model, &SampleRequest::new(Conditions::Unconditional(4), 3), &mut rng).unwrap_err();
    assert!(err.is_invalid_argument());
}

#[test]
fn finetuned_model_survives_checkpoint_with_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fm = FlowMatchModel::new(
        FmConfig {
            dim: 2,
            net: VelocityConfig {
                hidden: 16,
                layers: 2,
                ..Default::default()
            },
        },
        &mut rng,
    )
    .unwrap();
    let mut cfg = small_config(2, vec![4]);
    cfg.t_min_range = (0.02, 0.02);
    let model = finetune_init(&fm, cfg, &mut rng).unwrap();
    let ck = checkpoint::ntm_checkpoint(&model);
    let back = checkpoint::ntm_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let reference = back.reference.as_ref().expect("backbone kept");
    assert_eq!(reference.params.to_named(), fm.params.to_named());
    let sch = back.sample_schedule(4).unwrap();
    let u = Conditions::Unconditional(32);
    let post = fm
        .sample_posterior(&sch, 32, &u, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let s = sample(&back, &SampleRequest::new(u, 4), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(post[0], s.x);
}

#[test]
fn guidance_weight_zero_matches_unguided_sampling() {
    let ds = Dataset::by_name("gauss_mixture_2d", DatasetParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cfg = small_config(2, vec![4]);
    cfg.cond = ds.condition_spec();
    let model = NtmModel::new(cfg, &mut rng).unwrap();
    let (_, conds) = ds.sample(16, &mut rng);
    let plain = SampleRequest::new(conds.clone(), 4);
    let a = sample(&model, &plain, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample(
        &model,
        &SampleRequest {
            guidance: 0.0,
            ..plain.clone()
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(a.x, b.x);
    let g = sample(
        &model,
        &SampleRequest { guidance: 2.0, ..plain },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert!(g.x.is_finite());
}

#[test]
fn clipping_only_touches_outlying_gradients() {
    let ds = Dataset::by_name("two_moons", DatasetParams::default()).unwrap();
    let (model, _) = quick_train(small_config(2, vec![4]), &ds, TrainMode::EndToEnd, 10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, _) = ds.sample(8, &mut rng);
    let traj = sample_trajectory(&x, &model.sample_schedule(4).unwrap(), &mut rng).unwrap();
    let u = Conditions::Unconditional(8);
    let exact = score_denoise(&model, &traj, &u, &ScoreConfig::exact()).unwrap();
    let full = score_denoise(
        &model,
        &traj,
        &u,
        &ScoreConfig {
            clip_percentile: Some(100.0),
            ..ScoreConfig::default()
        },
    )
    .unwrap();
    assert_eq!(exact.x0, full.x0);
    let clipped = score_denoise(&model, &traj, &u, &ScoreConfig::default()).unwrap();
    let cap = exact.grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(clipped.grad.data().iter().all(|v| v.abs() <= cap));
}
