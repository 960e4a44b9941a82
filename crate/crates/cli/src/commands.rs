//! Command implementations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajflow::checkpoint::{self, Checkpoint};
use trajflow::cond::{ConditionSpec, Conditions};
use trajflow::config::{self, ConfigDoc};
use trajflow::data::Dataset;
use trajflow::flow::PredictorKind;
use trajflow::metrics::energy_distance;
use trajflow::model::{finetune_init, FlowMatchModel, FmTrainer, NtmModel, NtmTrainer, TrainConfig};
use trajflow::sampling::{
    distill_targets, sample, score_denoise, CovarianceMode, Denoiser, DenoiserTrainer, SampleRequest, ScoreConfig,
};
use trajflow::schedule::{forward_log_density, sample_trajectory};
use trajflow::verify::{self, Suite};
use trajflow::Tensor;

use crate::artifacts::{coord_header, density_ppm, fmt, Csv, Run};

pub const FM_CKPT: &str = "fm.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const DENOISER_CKPT: &str = "denoiser.ckpt";

/// A failure with a specific process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub msg: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

pub const EXIT_PROPERTY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_REQUEST: u8 = 4;
pub const EXIT_OPTIONAL: u8 = 5;

fn exit(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit { code, msg: msg.into() }.into()
}

fn config_error(e: trajflow::Error) -> anyhow::Error {
    exit(EXIT_CONFIG, e.to_string())
}

fn request_error(e: trajflow::Error) -> anyhow::Error {
    if e.is_invalid_argument() {
        exit(EXIT_REQUEST, e.to_string())
    } else {
        e.into()
    }
}

fn load_config(path: &Path) -> Result<ConfigDoc> {
    ConfigDoc::load(path).map_err(|e| match e {
        trajflow::Error::Io(io) => exit(EXIT_CONFIG, format!("cannot read config {}: {io}", path.display())),
        other => config_error(other),
    })
}

fn prefixed(section: &str, names: &[&str]) -> Vec<String> {
    names.iter().map(|n| format!("{section}.{n}")).collect()
}

fn check_known(doc: &ConfigDoc, groups: &[&[&str]], train: &[&str]) -> Result<()> {
    let mut known: Vec<String> = groups.iter().flat_map(|g| g.iter().map(|s| s.to_string())).collect();
    // written into snapshots so they can be fed back in
    known.extend(["model.dim", "fm.dim", "denoiser.dim"].map(String::from));
    let mut sections: Vec<String> = known
        .iter()
        .filter_map(|k| k.split_once('.').map(|(s, _)| s.to_string()))
        .collect();
    for sec in train {
        known.extend(prefixed(sec, config::TRAIN_KEYS));
        sections.push(sec.to_string());
    }
    sections.sort();
    sections.dedup();
    let known: Vec<&str> = known.iter().map(String::as_str).collect();
    let sections: Vec<&str> = sections.iter().map(String::as_str).collect();
    doc.check_known(&sections, &known).map_err(config_error)
}

/// Accepts a checkpoint file or a run directory holding `default_name`.
fn resolve_checkpoint(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn load_checkpoint(path: &Path, default_name: &str, what: &str) -> Result<(Checkpoint, PathBuf)> {
    let path = resolve_checkpoint(path, default_name);
    if !path.is_file() {
        return Err(exit(
            EXIT_MISSING,
            format!("{what} checkpoint {} not found", path.display()),
        ));
    }
    let ck = Checkpoint::load(&path).map_err(|e| exit(EXIT_MISSING, format!("{}: {e}", path.display())))?;
    Ok((ck, path))
}

fn train_config(doc: &ConfigDoc, base: TrainConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut tc = config::train_config_from(doc, "train", base).map_err(config_error)?;
    if let Some(s) = seed {
        tc.seed = s;
    }
    Ok(tc)
}

fn dataset(doc: &ConfigDoc) -> Result<Dataset> {
    config::dataset_from(doc).map_err(config_error)
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
}

pub fn pretrain_fm(args: TrainArgs) -> Result<()> {
    let doc = load_config(args.config)?;
    check_known(&doc, &[config::DATA_KEYS, config::FM_KEYS], &["train"])?;
    let ds = dataset(&doc)?;
    let fm_cfg = config::fm_config_from(&doc, ds.dim(), ds.condition_spec()).map_err(config_error)?;
    let tc = train_config(&doc, TrainConfig::default(), args.seed)?;

    let mut snap = ConfigDoc::new();
    config::dataset_to(&mut snap, &ds);
    config::fm_config_to(&mut snap, &fm_cfg);
    config::train_config_to(&mut snap, "train", &tc);
    let mut run = Run::create(args.out, "pretrain-fm", tc.seed, snap.to_text())?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut fm = FlowMatchModel::new(fm_cfg, &mut rng)?;
    let mut trainer = FmTrainer::new(&fm, tc.clone())?;
    let mut csv = Csv::create(&mut run, "metrics.csv", &["step", "loss", "lr", "wall_ms"])?;
    let mut last = f64::NAN;
    for _ in 0..tc.iters {
        let (x, c) = ds.sample(tc.batch, &mut rng);
        let r = trainer.step(&mut fm, &x, &c, &mut rng)?;
        last = r.loss;
        csv.row(&[
            r.step.to_string(),
            fmt(r.loss),
            fmt(r.lr),
            format!("{:.3}", run.elapsed_ms()),
        ])?;
    }
    csv.finish()?;
    run.write_checkpoint(FM_CKPT, &checkpoint::fm_checkpoint(&fm).to_bytes())?;
    println!("pretrain-fm: {} steps, final loss {last}", tc.iters);
    run.finish()
}

const NTM_HEADER: [&str; 9] = [
    "step",
    "nll",
    "aux",
    "total",
    "lambda",
    "grad_norm",
    "lr",
    "mu_drift",
    "wall_ms",
];

fn train_loop(
    run: &mut Run,
    model: &mut NtmModel,
    ds: &Dataset,
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut trainer = NtmTrainer::new(model, tc.clone())?;
    let mut csv = Csv::create(run, "metrics.csv", &NTM_HEADER)?;
    let mut last = f64::NAN;
    for _ in 0..tc.iters {
        let (x, c) = ds.sample(tc.batch, rng);
        let r = trainer.step(model, &x, &c, rng)?;
        last = r.nll;
        csv.row(&[
            r.step.to_string(),
            fmt(r.nll),
            fmt(r.aux),
            fmt(r.total),
            fmt(r.lambda),
            fmt(r.grad_norm),
            fmt(r.lr),
            fmt(r.mu_drift),
            format!("{:.3}", run.elapsed_ms()),
        ])?;
    }
    csv.finish()?;
    Ok(last)
}

fn model_groups() -> [&'static [&'static str]; 2] {
    [config::DATA_KEYS, config::MODEL_KEYS]
}

pub fn train(args: TrainArgs) -> Result<()> {
    let doc = load_config(args.config)?;
    check_known(&doc, &model_groups(), &["train"])?;
    let ds = dataset(&doc)?;
    let cfg = config::ntm_config_from(&doc, ds.dim(), ds.condition_spec()).map_err(config_error)?;
    let tc = train_config(&doc, TrainConfig::default(), args.seed)?;

    let mut snap = ConfigDoc::new();
    config::dataset_to(&mut snap, &ds);
    config::ntm_config_to(&mut snap, &cfg);
    config::train_config_to(&mut snap, "train", &tc);
    let mut run = Run::create(args.out, "train", tc.seed, snap.to_text())?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = NtmModel::new(cfg, &mut rng)?;
    let last = train_loop(&mut run, &mut model, &ds, &tc, &mut rng)?;
    run.write_checkpoint(MODEL_CKPT, &checkpoint::ntm_checkpoint(&model).to_bytes())?;
    println!("train: {} steps, final nll {last} nats/dim", tc.iters);
    run.finish()
}

/// Mean-alignment weight used when the config does not set one.
pub const FINETUNE_LAMBDA: f64 = 2.5;
/// Lowest training level for a finetuned model when not configured; the
/// posterior predictor is undefined at `t = 0`.
pub const FINETUNE_T_MIN: f64 = 0.02;

pub fn finetune(args: TrainArgs, fm_checkpoint: &Path) -> Result<()> {
    let doc = load_config(args.config)?;
    check_known(&doc, &model_groups(), &["train"])?;
    let (fm_ck, fm_path) = load_checkpoint(fm_checkpoint, FM_CKPT, "flow-matching")?;
    let fm = checkpoint::fm_from_checkpoint(&fm_ck)
        .map_err(|e| exit(EXIT_MISSING, format!("{}: {e}", fm_path.display())))?;
    let ds = dataset(&doc)?;
    if ds.dim() != fm.dim() {
        return Err(exit(
            EXIT_CONFIG,
            format!("dataset has dimension {}, backbone has {}", ds.dim(), fm.dim()),
        ));
    }
    let mut cfg = config::ntm_config_from(&doc, ds.dim(), ds.condition_spec()).map_err(config_error)?;
    if !doc.contains("model.t_min_lo") {
        cfg.t_min_range.0 = FINETUNE_T_MIN.min(cfg.t_min_range.1);
    }
    cfg.predictor = PredictorKind::Posterior {
        net: fm.config.net.clone(),
    };
    cfg.cond = fm.config.net.cond;
    cfg.validate().map_err(|e| exit(EXIT_CONFIG, e.to_string()))?;
    let base = TrainConfig {
        lambda: FINETUNE_LAMBDA,
        ..TrainConfig::default()
    };
    let tc = train_config(&doc, base, args.seed)?;

    let mut snap = ConfigDoc::new();
    config::dataset_to(&mut snap, &ds);
    config::ntm_config_to(&mut snap, &cfg);
    config::train_config_to(&mut snap, "train", &tc);
    snap.set(
        "finetune.fm_checkpoint_hash",
        checkpoint::content_hash(&fm_ck.to_bytes()),
    );
    let mut run = Run::create(args.out, "finetune", tc.seed, snap.to_text())?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = finetune_init(&fm, cfg, &mut rng)?;
    let last = train_loop(&mut run, &mut model, &ds, &tc, &mut rng)?;
    run.write_checkpoint(MODEL_CKPT, &checkpoint::ntm_checkpoint(&model).to_bytes())?;
    println!("finetune: {} steps, final nll {last} nats/dim", tc.iters);
    run.finish()
}

fn load_model(path: &Path) -> Result<(NtmModel, Checkpoint)> {
    let (ck, path) = load_checkpoint(path, MODEL_CKPT, "trajectory-model")?;
    let model =
        checkpoint::ntm_from_checkpoint(&ck).map_err(|e| exit(EXIT_MISSING, format!("{}: {e}", path.display())))?;
    Ok((model, ck))
}

/// Conditions for `n` generated samples: classes in rotation for a
/// class-conditional model, null otherwise.
pub fn sampling_conditions(spec: ConditionSpec, n: usize, class: Option<usize>) -> Result<Conditions> {
    match spec {
        ConditionSpec::Class { classes } => {
            if let Some(c) = class.filter(|&c| c >= classes) {
                return Err(exit(
                    EXIT_REQUEST,
                    format!("class {c} out of range (model has {classes})"),
                ));
            }
            Ok(Conditions::Labels(
                (0..n).map(|i| Some(class.unwrap_or(i % classes))).collect(),
            ))
        }
        other => {
            if class.is_some() {
                return Err(exit(EXIT_REQUEST, "--class needs a class-conditional model"));
            }
            Ok(Conditions::null(other, n))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DenoiseMode {
    None,
    Score,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScoreMode {
    Joint,
    Diagonal,
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub n: usize,
    pub steps: usize,
    pub cfg_w: f64,
    pub denoise: DenoiseMode,
    pub denoiser: Option<&'a Path>,
    pub score_mode: ScoreMode,
    pub clip_percentile: f64,
    pub class: Option<usize>,
    pub trajectory: bool,
    pub seed: u64,
    pub out: &'a Path,
}

fn score_config(mode: ScoreMode, clip: f64) -> Result<ScoreConfig> {
    if !(0.0..=100.0).contains(&clip) {
        return Err(exit(EXIT_REQUEST, format!("clip percentile {clip} outside [0, 100]")));
    }
    Ok(ScoreConfig {
        mode: match mode {
            ScoreMode::Joint => CovarianceMode::Joint,
            ScoreMode::Diagonal => CovarianceMode::Diagonal,
        },
        clip_percentile: (clip > 0.0).then_some(clip),
    })
}

pub fn sample_cmd(args: SampleArgs) -> Result<()> {
    let (model, ck) = load_model(args.checkpoint)?;
    model.check_steps(args.steps).map_err(request_error)?;
    if args.cfg_w.is_nan() || args.cfg_w < 0.0 {
        return Err(exit(
            EXIT_REQUEST,
            format!("--cfg-w must be nonnegative, got {}", args.cfg_w),
        ));
    }
    let score = score_config(args.score_mode, args.clip_percentile)?;
    let denoiser = match args.denoise {
        DenoiseMode::Learned => {
            let Some(p) = args.denoiser else {
                return Err(exit(
                    EXIT_OPTIONAL,
                    "--denoise learned needs a distilled denoiser; run `trajflow distill-denoiser` \
                     on this checkpoint and pass its output with --denoiser <dir>",
                ));
            };
            let (dck, dpath) = load_checkpoint(p, DENOISER_CKPT, "denoiser")?;
            let den = checkpoint::denoiser_from_checkpoint(&dck)
                .map_err(|e| exit(EXIT_MISSING, format!("{}: {e}", dpath.display())))?;
            if den.config.dim != model.dim() {
                return Err(exit(EXIT_REQUEST, "denoiser dimension differs from the model"));
            }
            Some(den)
        }
        _ => None,
    };
    let conds = sampling_conditions(model.config.cond, args.n, args.class)?;
    if args.cfg_w > 0.0 && conds.is_unconditional() {
        return Err(exit(EXIT_REQUEST, "--cfg-w needs a conditional model"));
    }

    let mut snap = ConfigDoc::new();
    snap.set("sample.checkpoint_hash", checkpoint::content_hash(&ck.to_bytes()));
    snap.set("sample.n", args.n);
    snap.set("sample.steps", args.steps);
    snap.set("sample.cfg_w", args.cfg_w);
    snap.set("sample.denoise", format!("{:?}", args.denoise).to_lowercase());
    snap.set("sample.score_mode", format!("{:?}", args.score_mode).to_lowercase());
    snap.set("sample.clip_percentile", args.clip_percentile);
    if let Some(c) = args.class {
        snap.set("sample.class", c);
    }
    let mut run = Run::create(args.out, "sample", args.seed, snap.to_text())?;

    let d = model.dim();
    let mut header = coord_header(d);
    let (x, traj) = if args.n == 0 {
        (Tensor::zeros(&[0, d]), None)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let req = SampleRequest {
            guidance: args.cfg_w,
            keep_trajectory: args.trajectory || args.denoise == DenoiseMode::Score,
            ..SampleRequest::new(conds.clone(), args.steps)
        };
        let s = sample(&model, &req, &mut rng).map_err(request_error)?;
        let x = match (args.denoise, &s.trajectory) {
            (DenoiseMode::None, _) => s.x.clone(),
            (DenoiseMode::Score, Some(t)) => score_denoise(&model, t, &conds, &score)?.x0,
            (DenoiseMode::Score, None) => unreachable!("trajectory requested for score denoising"),
            (DenoiseMode::Learned, _) => denoiser.as_ref().expect("checked above").apply(s.u_t0(), &conds)?,
        };
        (x, s.trajectory.filter(|_| args.trajectory))
    };

    let with_labels = matches!(conds, Conditions::Labels(_));
    if with_labels {
        header.push("label".into());
    }
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::create(&mut run, "samples.csv", &hdr)?;
    for i in 0..x.rows() {
        let mut row: Vec<String> = x.row(i).iter().map(|&v| fmt(v)).collect();
        if let Conditions::Labels(l) = &conds {
            row.push(l[i].map_or(String::new(), |c| c.to_string()));
        }
        csv.row(&row)?;
    }
    csv.finish()?;
    if let Some(t) = traj {
        let mut hdr = vec!["sample".to_string(), "level".into(), "t".into()];
        hdr.extend(coord_header(d));
        let hdr: Vec<&str> = hdr.iter().map(String::as_str).collect();
        let mut csv = Csv::create(&mut run, "trajectory.csv", &hdr)?;
        for i in 0..t.batch() {
            for k in 0..=t.step_count() {
                let mut row = vec![i.to_string(), k.to_string(), fmt(t.time(i, k))];
                row.extend(t.level(k).row(i).iter().map(|&v| fmt(v)));
                csv.row(&row)?;
            }
        }
        csv.finish()?;
    }
    run.write("density.ppm", &density_ppm(&x))?;
    println!("sample: wrote {} samples to {}", x.rows(), run.dir.display());
    run.finish()
}

pub const DISTILL_KEYS: &[&str] = &["distill.steps", "distill.score_mode", "distill.clip_percentile"];

pub fn distill_denoiser(args: TrainArgs, model_checkpoint: &Path) -> Result<()> {
    let doc = load_config(args.config)?;
    check_known(
        &doc,
        &[config::DATA_KEYS, config::DENOISER_KEYS, DISTILL_KEYS],
        &["train"],
    )?;
    let (model, ck) = load_model(model_checkpoint)?;
    let ds = dataset(&doc)?;
    if ds.dim() != model.dim() {
        return Err(exit(
            EXIT_CONFIG,
            format!("dataset has dimension {}, model has {}", ds.dim(), model.dim()),
        ));
    }
    let dcfg = config::denoiser_config_from(&doc, model.dim(), model.config.cond).map_err(config_error)?;
    let tc = train_config(&doc, TrainConfig::default(), args.seed)?;
    let steps: usize = doc
        .get_or("distill.steps", model.config.steps[0])
        .map_err(config_error)?;
    model
        .check_steps(steps)
        .map_err(|e| exit(EXIT_CONFIG, doc.invalid("distill.steps", e).to_string()))?;
    let mode = match doc.raw("distill.score_mode").unwrap_or("joint") {
        "joint" => ScoreMode::Joint,
        "diagonal" => ScoreMode::Diagonal,
        other => {
            return Err(config_error(
                doc.invalid("distill.score_mode", format!("unknown mode `{other}`")),
            ))
        }
    };
    let clip: f64 = doc.get_or("distill.clip_percentile", 99.0).map_err(config_error)?;
    let score = score_config(mode, clip).map_err(|e| exit(EXIT_CONFIG, e.to_string()))?;

    let mut snap = ConfigDoc::new();
    config::dataset_to(&mut snap, &ds);
    config::denoiser_config_to(&mut snap, &dcfg);
    config::train_config_to(&mut snap, "train", &tc);
    snap.set("distill.steps", steps);
    snap.set("distill.score_mode", format!("{mode:?}").to_lowercase());
    snap.set("distill.clip_percentile", clip);
    snap.set(
        "distill.model_checkpoint_hash",
        checkpoint::content_hash(&ck.to_bytes()),
    );
    let mut run = Run::create(args.out, "distill-denoiser", tc.seed, snap.to_text())?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut den = Denoiser::new(dcfg, &mut rng)?;
    let mut trainer = DenoiserTrainer::new(&den, tc.clone())?;
    let mut csv = Csv::create(&mut run, "metrics.csv", &["step", "loss", "lr", "wall_ms"])?;
    let lr = tc.lr_schedule();
    let mut last = f64::NAN;
    for step in 0..tc.iters {
        let (x, c) = ds.sample(tc.batch, &mut rng);
        let (u, target) = distill_targets(&model, &x, &c, steps, &score, &mut rng)?;
        last = trainer.step(&mut den, &u, &target, &c, &mut rng)?;
        csv.row(&[
            step.to_string(),
            fmt(last),
            fmt(lr.at(step)),
            format!("{:.3}", run.elapsed_ms()),
        ])?;
    }
    csv.finish()?;
    run.write_checkpoint(DENOISER_CKPT, &checkpoint::denoiser_checkpoint(&den).to_bytes())?;
    println!("distill-denoiser: {} steps, final mse {last}", tc.iters);
    run.finish()
}

pub fn verify_cmd(suite: &str, seed: u64) -> Result<()> {
    let suites = Suite::parse_set(suite).map_err(request_error)?;
    let checks = verify::run(&suites, seed)?;
    print!("{}", verify::report(&checks));
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(exit(EXIT_PROPERTY, format!("{failed} properties failed")));
    }
    Ok(())
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub steps: usize,
    pub energy_distance: f64,
    /// Variational bound on `-log p(x_{t_0})` of held-out data, nats per
    /// dimension.
    pub heldout_nll: f64,
    pub wall_ms_per_sample: f64,
}

/// Held-out NLL bound, energy distance and sampling cost at each step count.
pub fn evaluate(model: &NtmModel, ds: &Dataset, steps: &[usize], n: usize, seed: u64) -> Result<Vec<EvalRow>> {
    let d = model.dim() as f64;
    let (held, held_conds) = ds.sample(n, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64));
    let (_, gen_conds) = ds.sample(n, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x6765_6e73));
    let gen_conds = if model.config.cond.is_none() {
        Conditions::Unconditional(n)
    } else {
        gen_conds
    };
    let mut rows = Vec::new();
    for &t in steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let schedule = model.sample_schedule(t).map_err(request_error)?;
        let traj = sample_trajectory(&held, &schedule, &mut rng)?;
        let nll = model.trajectory_nll(&traj, &held_conds)?;
        let logq = forward_log_density(&traj)?;
        let bound = nll.iter().zip(&logq).map(|(a, b)| a + b).sum::<f64>() / (n as f64 * d);
        let clock = Instant::now();
        let s = sample(model, &SampleRequest::new(gen_conds.clone(), t), &mut rng)?;
        let ms = clock.elapsed().as_secs_f64() * 1e3 / n as f64;
        rows.push(EvalRow {
            steps: t,
            energy_distance: energy_distance(&s.x, &held)?,
            heldout_nll: bound,
            wall_ms_per_sample: ms,
        });
    }
    Ok(rows)
}

pub fn eval_table(rows: &[EvalRow]) -> String {
    let mut out = format!(
        "{:>4}  {:>16}  {:>20}  {:>18}\n",
        "T", "energy_distance", "heldout_nll(nats/d)", "wall_ms_per_sample"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>4}  {:>16.6}  {:>20.6}  {:>18.6}\n",
            r.steps, r.energy_distance, r.heldout_nll, r.wall_ms_per_sample
        ));
    }
    out
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a str,
    pub steps: &'a [usize],
    pub n: usize,
    pub seed: u64,
    pub out: &'a Path,
}

/// A dataset name with default parameters, or a config file whose `[data]`
/// section describes it.
fn eval_dataset(spec: &str) -> Result<Dataset> {
    let path = Path::new(spec);
    if path.is_file() {
        return dataset(&load_config(path)?);
    }
    Dataset::by_name(spec, Default::default()).map_err(request_error)
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let (model, ck) = load_model(args.checkpoint)?;
    if args.n < 2 {
        return Err(exit(EXIT_REQUEST, "--n must be at least 2"));
    }
    for &t in args.steps {
        model.check_steps(t).map_err(request_error)?;
    }
    let ds = eval_dataset(args.dataset)?;
    if ds.dim() != model.dim() {
        return Err(exit(
            EXIT_REQUEST,
            format!("dataset has dimension {}, model has {}", ds.dim(), model.dim()),
        ));
    }
    let mut snap = ConfigDoc::new();
    config::dataset_to(&mut snap, &ds);
    snap.set("eval.checkpoint_hash", checkpoint::content_hash(&ck.to_bytes()));
    snap.set(
        "eval.steps",
        args.steps.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    snap.set("eval.n", args.n);
    let mut run = Run::create(args.out, "eval", args.seed, snap.to_text())?;
    let rows = evaluate(&model, &ds, args.steps, args.n, args.seed)?;
    let mut csv = Csv::create(
        &mut run,
        "eval.csv",
        &["T", "energy_distance", "heldout_nll", "wall_ms_per_sample"],
    )?;
    for r in &rows {
        csv.row(&[
            r.steps.to_string(),
            fmt(r.energy_distance),
            fmt(r.heldout_nll),
            fmt(r.wall_ms_per_sample),
        ])?;
    }
    csv.finish()?;
    print!("{}", eval_table(&rows));
    run.finish()
}

/// Reads `TRAJFLOW_THREADS` and sizes the global worker pool.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TRAJFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        exit(
            EXIT_CONFIG,
            format!("TRAJFLOW_THREADS must be a positive integer, got `{v}`"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}
