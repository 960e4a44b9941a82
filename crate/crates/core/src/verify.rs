//! Property suites reporting each measured value against its threshold.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cond::Conditions;
use crate::error::{Error, Result};
use crate::flow::{affine_forward, affine_inverse, factor_nll, CouplingParams, PredictorKind};
use crate::gradcore::{Tape, Tensor, Var};
use crate::metrics::energy_distance;
use crate::model::ntm::{NtmConfig, NtmModel};
use crate::nn::ParamSet;
use crate::oracle::{exact_gaussian_model, GaussianTrajectoryOracle};
use crate::sampling::{cfg_scalar, score_denoise, ScoreConfig};
use crate::schedule::{covariance_for_times, forward_coeffs, posterior_coeffs, sample_trajectory, TimeSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Schedule,
    Flow,
    Gradients,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Schedule, Suite::Flow, Suite::Gradients, Suite::Oracle];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Schedule => "schedule",
            Suite::Flow => "flow",
            Suite::Gradients => "gradients",
            Suite::Oracle => "oracle",
        }
    }

    /// Parses a suite name; `all` selects every suite.
    pub fn parse_set(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Ok(vec![s.parse()?])
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite `{s}`")))
    }
}

/// One property with its measurement; passes when `measured <= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            measured,
            threshold,
        }
    }

    pub fn passed(&self) -> bool {
        self.measured <= self.threshold
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<10} {:<52} {:>12.3e} <= {:.1e}",
            if self.passed() { "ok" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.measured,
            self.threshold
        )
    }
}

/// Aligned report with a summary line.
pub fn report(checks: &[Check]) -> String {
    let mut out = format!(
        "{:<4} {:<10} {:<52} {:>12}    {}\n",
        "", "suite", "property", "measured", "threshold"
    );
    for c in checks {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    out.push_str(&format!("{} checks, {failed} failed\n", checks.len()));
    out
}

pub fn run(suites: &[Suite], seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &s in suites {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.extend(match s {
            Suite::Schedule => schedule_suite(&mut rng)?,
            Suite::Flow => flow_suite(&mut rng)?,
            Suite::Gradients => gradient_suite(&mut rng)?,
            Suite::Oracle => oracle_suite(&mut rng)?,
        });
    }
    Ok(out)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------- schedule

/// Largest standardized error of the per-level mean and variance of
/// `n` forward trajectories started from the fixed value `x0`.
pub fn marginal_error(schedule: &TimeSchedule, x0: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let traj = sample_trajectory(&Tensor::full(&[n, 1], x0), schedule, rng)?;
    let mut worst: f64 = 0.0;
    for (k, &t) in schedule.times().iter().enumerate() {
        let lvl = traj.level(k);
        let m = lvl.mean();
        let v = lvl.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        let (em, ev) = ((1.0 - t) * x0, t * t);
        if t == 0.0 {
            worst = worst.max(if (m - em).abs() < 1e-12 && v < 1e-24 {
                0.0
            } else {
                f64::INFINITY
            });
            continue;
        }
        let se_m = t / (n as f64).sqrt();
        let se_v = t * t * (2.0 / (n - 1) as f64).sqrt();
        worst = worst.max((m - em).abs() / se_m).max((v - ev).abs() / se_v);
    }
    Ok(worst)
}

/// Least-squares fit of `x_s ≈ a x_t + b x_0` over `n` simulated triples;
/// returns `(a, b, residual std)`.
pub fn regress_posterior(t: f64, s: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64)> {
    let fc = forward_coeffs(s, t)?;
    let (mut stt, mut st0, mut s00, mut sst, mut ss0) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = normal(rng);
        let xs = (1.0 - s) * x0 + s * normal(rng);
        let xt = fc.alpha * xs + fc.sigma * normal(rng);
        stt += xt * xt;
        st0 += xt * x0;
        s00 += x0 * x0;
        sst += xs * xt;
        ss0 += xs * x0;
        rows.push((x0, xs, xt));
    }
    let det = stt * s00 - st0 * st0;
    let a = (sst * s00 - ss0 * st0) / det;
    let b = (ss0 * stt - sst * st0) / det;
    let rss: f64 = rows.iter().map(|&(x0, xs, xt)| (xs - a * xt - b * x0).powi(2)).sum();
    Ok((a, b, (rss / (n - 2) as f64).sqrt()))
}

/// Largest entrywise gap between the Monte Carlo covariance of `n`
/// trajectories from `x_0 = 0` and the analytic matrix.
pub fn covariance_error(schedule: &TimeSchedule, n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let traj = sample_trajectory(&Tensor::zeros(&[n, 1]), schedule, rng)?;
    let l = schedule.times().len();
    let s = covariance_for_times(schedule.times());
    let levels: Vec<Tensor> = (0..l).map(|k| traj.level(k)).collect();
    let means: Vec<f64> = levels.iter().map(Tensor::mean).collect();
    let mut worst: f64 = 0.0;
    for i in 0..l {
        for j in 0..=i {
            let c = levels[i]
                .data()
                .iter()
                .zip(levels[j].data())
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum::<f64>()
                / (n - 1) as f64;
            worst = worst.max((c - s[(i, j)]).abs());
        }
    }
    Ok(worst)
}

fn schedule_suite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let su = Suite::Schedule;
    let mut out = Vec::new();
    for steps in [2, 4, 8] {
        let sch = TimeSchedule::uniform(steps, 0.02)?;
        let e = marginal_error(&sch, 0.7, 100_000, rng)?;
        out.push(Check::new(su, format!("marginal mean/var z-score, T={steps}"), e, 3.0));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let t = rng.random_range(0.1..1.0);
        let s = rng.random_range(0.02..t - 0.02);
        let (a, b, c) = regress_posterior(t, s, 1_000_000, rng)?;
        let k = posterior_coeffs(t, s)?;
        worst = worst.max((a - k.a).abs()).max((b - k.b).abs()).max((c - k.c).abs());
    }
    out.push(Check::new(
        su,
        "posterior (A, B, C) vs regression, 10 pairs",
        worst,
        1e-2,
    ));
    let mut ident: f64 = 0.0;
    for i in 1..=10 {
        let t = i as f64 / 10.0;
        for j in 0..10 {
            let s = t * (j as f64 + 0.5) / 10.0;
            let k = posterior_coeffs(t, s)?;
            let f = forward_coeffs(s, t)?;
            ident = ident
                .max((k.a * (1.0 - t) + k.b - (1.0 - s)).abs())
                .max((k.c * t - s * f.sigma).abs());
        }
    }
    out.push(Check::new(su, "A(1-t)+B=1-s and C t=s sigma, 100 points", ident, 1e-12));
    let sch = TimeSchedule::uniform(4, 0.02)?;
    out.push(Check::new(
        su,
        "trajectory covariance vs Monte Carlo, T=4",
        covariance_error(&sch, 1_000_000, rng)?,
        1e-2,
    ));
    let eig = covariance_for_times(sch.times()).symmetric_eigenvalues();
    out.push(Check::new(
        su,
        "trajectory covariance min eigenvalue (negated)",
        -eig.min(),
        1e-10,
    ));
    Ok(out)
}

// -------------------------------------------------------------------- flow

fn perturb(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for t in ps.values_mut() {
        let noise = Tensor::randn(t.shape(), rng);
        for (v, z) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += scale * z;
        }
    }
}

/// Small model whose weights are perturbed from initialization by
/// `scale` times standard normal noise; `scale = 0` leaves a fresh model.
pub fn random_model(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<NtmModel> {
    let mut cfg = NtmConfig::new(dim);
    cfg.transporter.hidden = 8;
    cfg.predictor = PredictorKind::Mlp { hidden: 8, layers: 2 };
    cfg.steps = vec![2];
    let mut m = NtmModel::new(cfg, rng)?;
    perturb(&mut m.params, rng, scale);
    Ok(m)
}

/// `∫ exp(-NLL(x_s | x_t)) dx_s` by the trapezoid rule on a cube of
/// `points` nodes per axis, centred where the predicted mean decodes to.
pub fn factor_mass(model: &NtmModel, x_t: &[f64], t: f64, s: f64, half_width: f64, points: usize) -> Result<f64> {
    let d = model.dim();
    let tr = model.transporter();
    let x_t = Tensor::new(&[1, d], x_t.to_vec())?;
    let (u_t, _) = tr.apply(&model.params, &x_t, &[t], &[2])?;
    let center = {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let cp = model
            .predictor()
            .params(&p, &tape.constant(u_t), &[t], &[s], &Conditions::Unconditional(1))?
            .values()?;
        tr.inverse(&model.params, &cp.mu, &[s], &[2])?.0
    };
    let h = 2.0 * half_width / (points - 1) as f64;
    let total = points.pow(d as u32);
    let mut mass = 0.0;
    let chunk = 20_000;
    let mut start = 0;
    while start < total {
        let n = chunk.min(total - start);
        let mut xs = Vec::with_capacity(n * d);
        for idx in start..start + n {
            let mut r = idx;
            for j in 0..d {
                xs.push(center.data()[j] - half_width + (r % points) as f64 * h);
                r /= points;
            }
        }
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let xs = tape.constant(Tensor::new(&[n, d], xs)?);
        let xt = tape.constant(Tensor::new(&[n, d], x_t.data().repeat(n))?);
        let nll = factor_nll(
            tr,
            model.predictor(),
            &p,
            &xs,
            &xt,
            &vec![s; n],
            &vec![t; n],
            &vec![2; n],
            &Conditions::Unconditional(n),
        )?
        .nll
        .value();
        mass += nll.data().iter().map(|v| (-v).exp()).sum::<f64>();
        start += n;
    }
    Ok(mass * h.powi(d as i32))
}

/// Encodes every level of trajectories to standard-normal noise and decodes
/// them back; returns the largest reconstruction error.
pub fn model_round_trip(model: &NtmModel, x: &Tensor, t: f64, s: f64) -> Result<f64> {
    let n = x.rows();
    let tr = model.transporter();
    let steps = vec![model.config.steps[0]; n];
    let (u_s, _) = tr.apply(&model.params, x, &vec![s; n], &steps)?;
    let (u_t, _) = tr.apply(&model.params, x, &vec![t; n], &steps)?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let cp = model
        .predictor()
        .params(
            &p,
            &tape.constant(u_t),
            &vec![t; n],
            &vec![s; n],
            &Conditions::Unconditional(n),
        )?
        .values()?;
    let (z, _) = affine_forward(&u_s, &cp)?;
    let u_back = affine_inverse(&z, &cp)?;
    let (x_back, _) = tr.inverse(&model.params, &u_back, &vec![s; n], &steps)?;
    x_back.max_abs_diff(x)
}

/// Largest change at positions scanned before a perturbed one, over every
/// block and position.
pub fn causality_violation(model: &NtmModel, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = model.dim();
    let tr = model.transporter();
    let x = Tensor::randn(&[1, d], rng);
    let mut worst: f64 = 0.0;
    for b in 0..tr.block_count() {
        let order = tr.scan_order(b);
        let base = tr.block_apply(b, &model.params, &x, &[0.4], &[2])?;
        for (rank, &n) in order.iter().enumerate() {
            let mut xp = x.clone();
            xp.data_mut()[n] += 0.5;
            let out = tr.block_apply(b, &model.params, &xp, &[0.4], &[2])?;
            for &m in &order[..rank] {
                worst = worst.max((out.data()[m] - base.data()[m]).abs());
            }
        }
    }
    Ok(worst)
}

fn flow_suite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let su = Suite::Flow;
    let mut out = Vec::new();
    let x = Tensor::randn(&[64, 4], rng);
    let cp = CouplingParams::new(Tensor::randn(&[64, 4], rng), Tensor::randn(&[64, 4], rng).map(f64::exp))?;
    let (z, _) = affine_forward(&x, &cp)?;
    out.push(Check::new(
        su,
        "affine coupling round trip",
        affine_inverse(&z, &cp)?.max_abs_diff(&x)?,
        1e-10,
    ));

    let fresh = random_model(4, 0.0, rng)?;
    let (u, ld) = fresh
        .transporter()
        .apply(&fresh.params, &x, &vec![0.3; 64], &vec![2; 64])?;
    let ident = u.max_abs_diff(&x)? + ld.iter().map(|v| v.abs()).fold(0.0, f64::max);
    out.push(Check::new(su, "zero-head transporter is the identity", ident, 0.0));

    let model = random_model(4, 0.4, rng)?;
    let xs = Tensor::randn(&[1000, 4], rng);
    let (u, _) = model
        .transporter()
        .apply(&model.params, &xs, &vec![0.3; 1000], &vec![2; 1000])?;
    let (back, _) = model
        .transporter()
        .inverse(&model.params, &u, &vec![0.3; 1000], &vec![2; 1000])?;
    out.push(Check::new(
        su,
        "transporter round trip, 2 blocks x 4 positions",
        back.max_abs_diff(&xs)?,
        1e-8,
    ));
    out.push(Check::new(
        su,
        "full model round trip, 1k inputs",
        model_round_trip(&model, &xs, 0.5, 0.25)?,
        1e-7,
    ));
    out.push(Check::new(
        su,
        "transporter causality probe",
        causality_violation(&model, rng)?,
        0.0,
    ));

    let small = random_model(3, 0.1, rng)?;
    let mut worst: f64 = 0.0;
    for (t, s) in [(1.0, 0.5), (0.5, 0.05)] {
        let x_t: Vec<f64> = (0..3).map(|_| normal(rng)).collect();
        let m = factor_mass(&small, &x_t, t, s, 16.0, 129)?;
        worst = worst.max((m - 1.0).abs());
    }
    out.push(Check::new(
        su,
        "quadrature of exp(-NLL) over x_s, 3 positions",
        worst,
        1e-3,
    ));

    // factorization: end-to-end NLL equals the sum of independent factors
    let traj = sample_trajectory(&Tensor::randn(&[8, 3], rng), &TimeSchedule::uniform(2, 0.02)?, rng)?;
    let tape = Tape::new();
    let p = small.params.bind_frozen(&tape);
    let states = tape.constant(traj.states.clone());
    let terms = small.nll(&p, &states, &traj.times, &Conditions::Unconditional(8))?;
    let mut gap: f64 = 0.0;
    for k in 1..=2 {
        let (t, s) = (traj.time(0, k), traj.time(0, k - 1));
        let f = factor_nll(
            small.transporter(),
            small.predictor(),
            &p,
            &tape.constant(traj.level(k - 1)),
            &tape.constant(traj.level(k)),
            &[s; 8],
            &[t; 8],
            &[2; 8],
            &Conditions::Unconditional(8),
        )?;
        for (a, b) in terms.factor(k).iter().zip(f.nll.value().data()) {
            gap = gap.max((a - b).abs());
        }
    }
    out.push(Check::new(
        su,
        "trajectory NLL equals the sum of its factors",
        gap,
        1e-10,
    ));
    Ok(out)
}

// --------------------------------------------------------------- gradients

/// Relative error with an absolute floor for near-zero entries.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Central finite differences of `f` with step `h`.
pub fn fd_gradient(f: &dyn Fn(&[Tensor]) -> Result<f64>, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.data_mut()[j] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest [`rel_err`] between tape gradients and finite differences of the
/// scalar built by `build` from leaves holding `inputs`.
pub fn gradient_error(
    build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    inputs: &[Tensor],
) -> Result<f64> {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&tape, &leaves)?;
    let g = tape.backward(&out)?;
    let f = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        build(&tape, &leaves)?.value().item()
    };
    let fd = fd_gradient(&f, inputs, 1e-5)?;
    let mut worst: f64 = 0.0;
    for (leaf, num) in leaves.iter().zip(&fd) {
        let a = g.get_or_zeros(leaf);
        for (x, y) in a.data().iter().zip(num.data()) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    Ok(worst)
}

/// Random differentiable composite of depth at most 6 over a `[r, c]`
/// input, a same-shaped second input, and a `[c, c2]` weight.
#[derive(Clone, Debug)]
pub struct Composite {
    pub shapes: Vec<Vec<usize>>,
    ops: Vec<u8>,
}

const COMPOSITE_OPS: u8 = 12;

impl Composite {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let r = rng.random_range(1..=8);
        let c = rng.random_range(2..=8);
        let c2 = rng.random_range(1..=8);
        let depth = rng.random_range(1..=6);
        Self {
            shapes: vec![vec![r, c], vec![r, c], vec![c, c2]],
            ops: (0..depth).map(|_| rng.random_range(0..COMPOSITE_OPS)).collect(),
        }
    }

    pub fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.shapes.iter().map(|s| Tensor::randn(s, rng)).collect()
    }

    pub fn build<'t>(&self, tape: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        let (x, y, w) = (v[0], v[1], v[2]);
        let mut h = x;
        let mut square = true;
        for &op in &self.ops {
            let width = h.shape()[1];
            let other = if width == y.shape()[1] { Some(y) } else { None };
            h = match (op, other) {
                (0, Some(y)) => h.add(&y)?,
                (1, Some(y)) => h.mul(&y)?,
                (2, Some(y)) => h.div(&y.square().shift(1.0))?,
                (3, _) if square && width == w.shape()[0] => {
                    square = false;
                    h.matmul(&w)?
                }
                (4, _) => h.tanh(),
                (5, _) => h.gelu(),
                (6, _) => h.tanh().exp(),
                (7, _) => h.square().shift(1.0).log(),
                (8, _) => h.square().shift(0.5).sqrt(),
                (9, _) => h.softmax().scale(3.0),
                (10, _) if width > 1 => {
                    let a = h.narrow(0, width / 2)?;
                    tape.concat(&[h, a.scale(-0.5)])?
                }
                (11, _) => {
                    let rows = h.shape()[0];
                    let s = h.sum_last().reshape(&[rows, 1])?.broadcast_to(&h.shape())?;
                    h.sub(&s)?.scale(0.5)
                }
                _ => h.scale(1.5).shift(-0.2),
            };
        }
        h.square().sum().add(&h.mean())
    }
}

/// A scalar-valued graph over tape inputs.
pub type Build = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// Primitive battery: each entry is one small graph.
pub fn primitive_battery() -> Vec<(&'static str, Build)> {
    let b = |f: Build| f;
    vec![
        ("add", b(Box::new(|_, v| Ok(v[0].add(&v[1])?.square().sum())))),
        ("sub", b(Box::new(|_, v| Ok(v[0].sub(&v[1])?.square().sum())))),
        ("mul", b(Box::new(|_, v| Ok(v[0].mul(&v[1])?.sum())))),
        (
            "div",
            b(Box::new(|_, v| Ok(v[0].div(&v[1].square().shift(1.0))?.sum()))),
        ),
        ("exp", b(Box::new(|_, v| Ok(v[0].exp().sum())))),
        ("log", b(Box::new(|_, v| Ok(v[0].square().shift(0.3).log().sum())))),
        ("tanh", b(Box::new(|_, v| Ok(v[0].tanh().sum())))),
        ("gelu", b(Box::new(|_, v| Ok(v[0].gelu().sum())))),
        ("sqrt", b(Box::new(|_, v| Ok(v[0].square().shift(0.2).sqrt().sum())))),
        ("mean", b(Box::new(|_, v| Ok(v[0].square().mean())))),
        ("sum_last", b(Box::new(|_, v| Ok(v[0].sum_last().square().sum())))),
        (
            "matmul",
            b(Box::new(|_, v| {
                Ok(v[0].matmul(&v[1].reshape(&[3, 3])?)?.square().sum())
            })),
        ),
        (
            "bmm",
            b(Box::new(|_, v| {
                let a = v[0].reshape(&[1, 3, 3])?;
                Ok(a.bmm(&a, true)?.square().sum())
            })),
        ),
        ("softmax", b(Box::new(|_, v| Ok(v[0].softmax().mul(&v[1])?.sum())))),
        (
            "masked_softmax",
            b(Box::new(|_, v| {
                let mask = [true, false, true, true, true, false, true, true, true];
                Ok(v[0]
                    .reshape(&[3, 3])?
                    .masked_softmax(&mask)?
                    .mul(&v[1].reshape(&[3, 3])?)?
                    .sum())
            })),
        ),
        (
            "narrow/concat",
            b(Box::new(|t, v| {
                let a = v[0].narrow(1, 2)?;
                Ok(t.concat(&[a, v[1]])?.square().sum())
            })),
        ),
        (
            "concat_rows/gather",
            b(Box::new(|t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                Ok(c.gather_rows(&[5, 0, 0, 2])?.tanh().sum())
            })),
        ),
        (
            "broadcast",
            b(Box::new(|_, v| {
                let row = v[0].narrow(0, 1)?.reshape(&[3, 1])?;
                Ok(row.broadcast_to(&[3, 3])?.mul(&v[1])?.sum())
            })),
        ),
    ]
}

fn gradient_suite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let su = Suite::Gradients;
    let mut out = Vec::new();
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for (name, f) in primitive_battery() {
        let inputs = vec![Tensor::randn(&[3, 3], rng), Tensor::randn(&[3, 3], rng)];
        let e = gradient_error(&*f, &inputs)?;
        if e >= worst {
            worst = e;
            worst_name = name;
        }
    }
    out.push(Check::new(
        su,
        format!("primitive battery (worst: {worst_name})"),
        worst,
        1e-6,
    ));
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = Composite::random(rng);
        let inputs = c.inputs(rng);
        worst = worst.max(gradient_error(&|t, v| c.build(t, v), &inputs)?);
    }
    out.push(Check::new(
        su,
        "100 random composites vs finite differences",
        worst,
        1e-6,
    ));

    let model = random_model(3, 0.3, rng)?;
    let traj = sample_trajectory(&Tensor::randn(&[2, 3], rng), &TimeSchedule::uniform(2, 0.02)?, rng)?;
    let times = traj.times.clone();
    let e = gradient_error(
        &|t, v| {
            let p = model.params.bind_frozen(t);
            model.nll(&p, &v[0], &times, &Conditions::Unconditional(2))?.total()
        },
        std::slice::from_ref(&traj.states),
    )?;
    out.push(Check::new(su, "trajectory NLL w.r.t. states", e, 1e-5));
    Ok(out)
}

// ------------------------------------------------------------------ oracle

fn oracle_suite(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let su = Suite::Oracle;
    let mut out = Vec::new();
    let sch = TimeSchedule::uniform(4, 0.02)?;
    let (mean, var) = (0.3, 0.8);
    let oracle = GaussianTrajectoryOracle::new(mean, var, sch.times())?;
    let eig = oracle.joint_cov().clone().symmetric_eigenvalues();
    out.push(Check::new(
        su,
        "joint covariance min eigenvalue (negated)",
        -eig.min(),
        1e-10,
    ));

    let model = exact_gaussian_model(&[mean], &[var], vec![4], 0.02)?;
    let n = 256;
    let x0 = Tensor::randn(&[n, 1], rng).map(|z| mean + var.sqrt() * z);
    let traj = sample_trajectory(&x0, &sch, rng)?;
    let nll = model.trajectory_nll(&traj, &Conditions::Unconditional(n))?;
    let mut gap: f64 = 0.0;
    for (b, v) in nll.iter().enumerate() {
        let path: Vec<f64> = (0..5).map(|k| traj.level(k).data()[b]).collect();
        gap = gap.max((v - oracle.trajectory_nll(&path)?).abs());
    }
    out.push(Check::new(
        su,
        "exact model NLL vs closed-form joint Gaussian",
        gap,
        1e-6,
    ));

    let den = score_denoise(&model, &traj, &Conditions::Unconditional(n), &ScoreConfig::exact())?;
    let mut gap: f64 = 0.0;
    for b in 0..n {
        let path: Vec<f64> = (0..5).map(|k| traj.level(k).data()[b]).collect();
        gap = gap.max((den.x0.data()[b] - oracle.posterior_mean(&path)?).abs());
    }
    out.push(Check::new(su, "score denoising vs E[x0 | trajectory]", gap, 1e-3));

    let mut cfg_gap: f64 = 0.0;
    for _ in 0..1000 {
        let (mc, mu) = (normal(rng), normal(rng));
        let sc = normal(rng).exp();
        let w = rng.random_range(0.0..5.0);
        let (m0, s0) = cfg_scalar(mc, sc, mu, normal(rng).exp(), 0.0);
        let (m1, s1) = cfg_scalar(mc, sc, mu, sc, w);
        cfg_gap = cfg_gap
            .max((m0 - mc).abs())
            .max((s0 - sc).abs())
            .max((m1 - ((1.0 + w) * mc - w * mu)).abs() / (1.0 + w) / (1.0 + mu.abs() + mc.abs()))
            .max((s1 - sc).abs());
    }
    out.push(Check::new(
        su,
        "guidance: w=0 identity and s=1 linear form",
        cfg_gap,
        1e-12,
    ));

    let a = Tensor::randn(&[2000, 1], rng);
    let b = Tensor::randn(&[2000, 1], rng);
    out.push(Check::new(
        su,
        "energy distance N(0,1) vs N(0,1)",
        energy_distance(&a, &b)?,
        1e-2,
    ));
    Ok(out)
}
