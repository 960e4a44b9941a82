//! Timestep grids, the Markovian forward process and its Gaussian
//! reverse posterior.
//!
//! The forward marginal is `x_t = (1-t) x_0 + t ε`. Consecutive states are
//! linked by `x_t = α x_s + σ ε` with `α = (1-t)/(1-s)` and
//! `σ² = t² - α² s²`, which preserves that marginal at every level.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Largest admissible minimum noise level.
pub const T_MIN_MAX: f64 = 0.05;

/// Ascending noise levels `t_0 < t_1 < … < t_T = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSchedule {
    times: Vec<f64>,
}

impl TimeSchedule {
    /// Uniform grid `k/T` with the first entry replaced by `t_min`.
    pub fn uniform(step_count: usize, t_min: f64) -> Result<Self> {
        if step_count == 0 {
            return Err(Error::invalid("step count must be at least 1"));
        }
        if !(0.0..=T_MIN_MAX).contains(&t_min) {
            return Err(Error::invalid(format!("t_min {t_min} outside [0, {T_MIN_MAX}]")));
        }
        let first = 1.0 / step_count as f64;
        if t_min >= first {
            return Err(Error::invalid(format!(
                "t_min {t_min} must be below the first grid point {first}"
            )));
        }
        let mut times: Vec<f64> = (0..=step_count).map(|k| k as f64 / step_count as f64).collect();
        times[0] = t_min;
        Ok(Self { times })
    }

    /// Validates an explicit list of levels.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a schedule needs at least two levels"));
        }
        if times.last() != Some(&1.0) {
            return Err(Error::invalid("the last level must be exactly 1"));
        }
        if !(0.0..=T_MIN_MAX).contains(&times[0]) {
            return Err(Error::invalid(format!("t_0 = {} outside [0, {T_MIN_MAX}]", times[0])));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("levels must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn step_count(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    /// Resolution-dependent shift of the interior levels; `t_0` and the
    /// terminal level are preserved.
    pub fn shifted(&self, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        let mu = shift_mu(seq_len);
        let n = self.times.len();
        let mut times = self.times.clone();
        for t in &mut times[1..n - 1] {
            *t = shift_level(*t, mu);
        }
        Self::from_times(times)
    }

    /// Comma-separated decimals, round-trippable through [`Self::parse`].
    pub fn to_line(&self) -> String {
        self.times
            .iter()
            .map(|t| format!("{t:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let times = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad level `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_times(times)
    }
}

/// Shift exponent for a token count: 0.5 at 256 rising linearly to 1.15 at 4096.
pub fn shift_mu(seq_len: usize) -> f64 {
    0.5 + 0.65 * (seq_len as f64 - 256.0) / (4096.0 - 256.0)
}

/// `e^μ / (e^μ + 1/t - 1)`.
pub fn shift_level(t: f64, mu: f64) -> f64 {
    let e = mu.exp();
    e / (e + 1.0 / t - 1.0)
}

/// Coefficients of the transition `x_t = α x_s + σ ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardCoeffs {
    pub alpha: f64,
    pub sigma: f64,
}

pub fn forward_coeffs(s: f64, t: f64) -> Result<ForwardCoeffs> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s >= t {
        return Err(Error::invalid(format!(
            "forward transition needs 0 <= s < t <= 1, got s={s}, t={t}"
        )));
    }
    let alpha = (1.0 - t) / (1.0 - s);
    let sigma = (t * t - alpha * alpha * s * s).max(0.0).sqrt();
    Ok(ForwardCoeffs { alpha, sigma })
}

/// `α x_s + σ noise`.
pub fn forward_transition(x_s: &Tensor, s: f64, t: f64, noise: &Tensor) -> Result<Tensor> {
    let c = forward_coeffs(s, t)?;
    x_s.zip_map(noise, |x, e| c.alpha * x + c.sigma * e)
}

/// `p(x_s | x_t, x_0) = N(a x_t + b x_0, c²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Closed-form reverse posterior for `0 <= s < t <= 1`.
///
/// At `s = 0` the posterior collapses onto `x_0`, giving `(0, 1, 0)`.
pub fn posterior_coeffs(t: f64, s: f64) -> Result<PosteriorCoeffs> {
    if !(t > 0.0 && t <= 1.0 && s >= 0.0 && s < t) {
        return Err(Error::invalid(format!(
            "posterior needs 0 <= s < t <= 1 and t > 0, got t={t}, s={s}"
        )));
    }
    if s == 0.0 {
        return Ok(PosteriorCoeffs { a: 0.0, b: 1.0, c: 0.0 });
    }
    let t2 = t * t;
    let mix = (t - s) * (t + s - 2.0 * t * s);
    let a = s * s * (1.0 - t) / (t2 * (1.0 - s));
    let b = mix / (t2 * (1.0 - s));
    let c = (s * s * mix).max(0.0).sqrt() / (t * (1.0 - s));
    Ok(PosteriorCoeffs { a, b, c })
}

/// Per-coordinate covariance of the trajectory given `x_0`:
/// `min² (1 - max) / (1 - min)` off the diagonal and `t²` on it.
pub fn trajectory_covariance(schedule: &TimeSchedule) -> DMatrix<f64> {
    covariance_for_times(schedule.times())
}

pub fn covariance_for_times(times: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return times[i] * times[i];
        }
        let (lo, hi) = if times[i] < times[j] {
            (times[i], times[j])
        } else {
            (times[j], times[i])
        };
        lo * lo * (1.0 - hi) / (1.0 - lo)
    })
}

/// Stacked states of a forward trajectory.
///
/// `states` has shape `[T+1, B, D]`, level-major; `times` has shape
/// `[B, T+1]` so every row may carry its own minimum level.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Tensor,
    pub times: Tensor,
}

impl Trajectory {
    pub fn new(states: Tensor, times: Tensor) -> Result<Self> {
        let s = states.shape();
        let t = times.shape();
        if s.len() != 3 || t.len() != 2 || t[0] != s[1] || t[1] != s[0] || s[0] < 2 {
            return Err(Error::ShapeMismatch {
                op: "trajectory",
                lhs: s.to_vec(),
                rhs: t.to_vec(),
            });
        }
        Ok(Self { states, times })
    }

    pub fn step_count(&self) -> usize {
        self.states.shape()[0] - 1
    }

    pub fn batch(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// State at level `k` as `[B, D]`.
    pub fn level(&self, k: usize) -> Tensor {
        self.states
            .slice_rows(k, 1)
            .and_then(|l| l.reshape(&[self.batch(), self.dim()]))
            .expect("level index in range")
    }

    pub fn time(&self, row: usize, k: usize) -> f64 {
        self.times.data()[row * (self.step_count() + 1) + k]
    }

    /// Levels stacked from per-level `[B, D]` tensors.
    pub fn from_levels(levels: &[Tensor], times: Tensor) -> Result<Self> {
        let b = levels.first().map_or(0, Tensor::rows);
        let d = levels.first().map_or(0, Tensor::row_len);
        let states = Tensor::concat_rows(levels)?.reshape(&[levels.len(), b, d])?;
        Self::new(states, times)
    }
}

fn randn_like<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Forward trajectory on one shared schedule.
pub fn sample_trajectory<R: Rng + ?Sized>(x0: &Tensor, schedule: &TimeSchedule, rng: &mut R) -> Result<Trajectory> {
    let rows = vec![schedule.times().to_vec(); x0.rows()];
    sample_trajectory_rows(x0, &rows, rng)
}

/// Forward trajectory where row `b` follows `times[b]`.
///
/// The anchor is the forward marginal at `t_0`, `(1-t_0) x_0 + t_0 ε`; each
/// later level applies one forward transition. All rows must share `T`.
pub fn sample_trajectory_rows<R: Rng + ?Sized>(x0: &Tensor, times: &[Vec<f64>], rng: &mut R) -> Result<Trajectory> {
    if x0.shape().len() != 2 || x0.rows() != times.len() {
        return Err(Error::invalid(format!(
            "x0 of shape {:?} needs one schedule per row ({} given)",
            x0.shape(),
            times.len()
        )));
    }
    let (b, d) = (x0.rows(), x0.row_len());
    let levels = times.first().map_or(0, Vec::len);
    if levels < 2 || times.iter().any(|t| t.len() != levels) {
        return Err(Error::invalid("all rows need the same step count"));
    }
    let mut coeffs = Vec::with_capacity(b * levels);
    for row in times {
        coeffs.push(ForwardCoeffs {
            alpha: 1.0 - row[0],
            sigma: row[0],
        });
        for k in 1..levels {
            coeffs.push(forward_coeffs(row[k - 1], row[k])?);
        }
    }
    let mut states = vec![0.0; levels * b * d];
    let noise = randn_like(b * d, rng);
    for r in 0..b {
        let c = coeffs[r * levels];
        for j in 0..d {
            states[r * d + j] = c.alpha * x0.data()[r * d + j] + c.sigma * noise[r * d + j];
        }
    }
    for k in 1..levels {
        let noise = randn_like(b * d, rng);
        for r in 0..b {
            let c = coeffs[r * levels + k];
            for j in 0..d {
                let prev = states[((k - 1) * b + r) * d + j];
                states[(k * b + r) * d + j] = c.alpha * prev + c.sigma * noise[r * d + j];
            }
        }
    }
    let flat_times: Vec<f64> = times.iter().flatten().copied().collect();
    Trajectory::new(
        Tensor::new(&[levels, b, d], states)?,
        Tensor::new(&[b, levels], flat_times)?,
    )
}

/// `log q(x_{t_1..t_T} | x_{t_0})` of each row under the forward process,
/// in nats. Adding it to a model's trajectory NLL gives a variational upper
/// bound on `-log p(x_{t_0})`.
pub fn forward_log_density(traj: &Trajectory) -> Result<Vec<f64>> {
    let (b, d) = (traj.batch(), traj.dim());
    let mut out = vec![0.0; b];
    for k in 1..=traj.step_count() {
        let (lo, hi) = (traj.level(k - 1), traj.level(k));
        for (r, o) in out.iter_mut().enumerate() {
            let c = forward_coeffs(traj.time(r, k - 1), traj.time(r, k))?;
            let norm = -c.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            for j in 0..d {
                let z = (hi.row(r)[j] - c.alpha * lo.row(r)[j]) / c.sigma;
                *o += norm - 0.5 * z * z;
            }
        }
    }
    Ok(out)
}
