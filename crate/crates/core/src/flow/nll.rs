//! Exact trajectory negative log-likelihood.
//!
//! Each reverse factor `p(x_s | x_t)` is evaluated by transporting both
//! states to latent space, scoring the cleaner latent under the predictor's
//! Gaussian, and adding the transporter's log-Jacobian at the cleaner level.
//! The top level is standard normal and is never transported.

use crate::cond::Conditions;
use crate::error::{Error, Result};
use crate::flow::predictor::Predictor;
use crate::flow::transporter::Transporter;
use crate::gradcore::{Tensor, Var};
use crate::nn::Bound;

/// `½ log 2π`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-level summary of one NLL evaluation, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NllDiagnostics {
    /// `‖z_k‖²` for factors `k = 1..=T` (index `k - 1`).
    pub z_sq: Vec<f64>,
    /// `Σ log σ_P` per factor.
    pub log_sigma_p: Vec<f64>,
    /// `Σ log σ_T` of the transporter at the cleaner level of each factor.
    pub log_sigma_t: Vec<f64>,
    /// `½‖x_T‖²` of the top level.
    pub top_sq: f64,
}

/// Terms of a trajectory NLL recorded on a tape.
pub struct NllTerms<'t> {
    pub steps: usize,
    pub batch: usize,
    pub dim: usize,
    /// NLL of each reverse factor including its `(D/2) log 2π`, `[T*B, 1]`,
    /// level-major: rows `(k-1)*B .. k*B` hold factor `k`.
    pub factors: Var<'t>,
    /// Standard-normal NLL of the top level, `[B, 1]`.
    pub top: Var<'t>,
    /// Predictor mean for every factor, `[T*B, D]`.
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
    pub z: Var<'t>,
    /// Summed transporter log-scales at the cleaner level of each factor.
    pub log_scale: Var<'t>,
    /// Noisier state of every factor in data space, `[T*B, D]`.
    pub x_t: Tensor,
    /// Noise levels of the noisier and cleaner state of every factor.
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

impl<'t> NllTerms<'t> {
    /// Sum over the batch of the full trajectory NLL.
    pub fn total(&self) -> Result<Var<'t>> {
        self.factors.sum().add(&self.top.sum())
    }

    /// Full NLL of each trajectory.
    pub fn per_trajectory(&self) -> Vec<f64> {
        let f = self.factors.value();
        let top = self.top.value();
        (0..self.batch)
            .map(|b| {
                let mut acc = top.data()[b];
                for k in 0..self.steps {
                    acc += f.data()[k * self.batch + b];
                }
                acc
            })
            .collect()
    }

    /// NLL of factor `k` (1-based) for each batch row.
    pub fn factor(&self, k: usize) -> Vec<f64> {
        let f = self.factors.value();
        f.data()[(k - 1) * self.batch..k * self.batch].to_vec()
    }

    pub fn diagnostics(&self) -> NllDiagnostics {
        let per_level = |v: &Tensor, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            let rows = self.batch * self.dim;
            (0..self.steps)
                .map(|k| v.data()[k * rows..(k + 1) * rows].iter().map(|&x| f(x)).sum::<f64>() / self.batch as f64)
                .collect()
        };
        let top = self.top.value();
        let top_sq = top
            .data()
            .iter()
            .map(|v| v - self.dim as f64 * HALF_LOG_2PI)
            .sum::<f64>()
            / self.batch as f64;
        NllDiagnostics {
            z_sq: per_level(&self.z.value(), &|x| x * x),
            log_sigma_p: per_level(&self.log_sigma.value(), &|x| x),
            log_sigma_t: per_level(&self.log_scale.value(), &|x| x),
            top_sq,
        }
    }
}

/// NLL of trajectories `states` (`[T+1, B, D]`, level-major) whose row `b`
/// follows levels `times[b, ..]`.
pub fn trajectory_nll<'t>(
    transporter: &Transporter,
    predictor: &Predictor,
    p: &Bound<'t>,
    states: &Var<'t>,
    times: &Tensor,
    conds: &Conditions,
) -> Result<NllTerms<'t>> {
    let shape = states.shape();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::invalid(format!(
            "trajectory states must be [T+1, B, D], got {shape:?}"
        )));
    }
    let (levels, b, d) = (shape[0], shape[1], shape[2]);
    let steps = levels - 1;
    if times.shape() != [b, levels] {
        return Err(Error::invalid(format!(
            "schedule of shape {:?} does not match {levels} levels of {b} rows",
            times.shape()
        )));
    }
    if conds.len() != b {
        return Err(Error::invalid("one condition per trajectory required"));
    }
    for r in 0..b {
        let row = &times.data()[r * levels..(r + 1) * levels];
        if row[steps] != 1.0 || row.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("trajectory levels must increase strictly and end at 1"));
        }
    }
    let level_t = |k: usize| -> Vec<f64> { (0..b).map(|r| times.data()[r * levels + k]).collect() };
    let mut t_lower = Vec::with_capacity(steps * b);
    let mut t_upper = Vec::with_capacity(steps * b);
    for k in 0..steps {
        t_lower.extend(level_t(k));
        t_upper.extend(level_t(k + 1));
    }
    let step_col = vec![steps; steps * b];

    let flat = states.reshape(&[levels * b, d])?;
    let lower_idx: Vec<usize> = (0..steps * b).collect();
    let upper_idx: Vec<usize> = (b..levels * b).collect();
    let top_idx: Vec<usize> = (steps * b..levels * b).collect();
    let lower = flat.gather_rows(&lower_idx)?;
    let top = flat.gather_rows(&top_idx)?;

    let tr = transporter.forward(p, &lower, &t_lower, &step_col)?;
    let u_all = p.tape().concat_rows(&[tr.u, top])?;
    let u_upper = u_all.gather_rows(&upper_idx)?;
    let cp = predictor.params(p, &u_upper, &t_upper, &t_lower, &conds.tile(steps))?;

    let z = tr.u.sub(&cp.mu)?.div(&cp.sigma)?;
    let factors = z
        .square()
        .scale(0.5)
        .add(&cp.log_sigma)?
        .add(&tr.log_scale)?
        .sum_last()
        .shift(d as f64 * HALF_LOG_2PI);
    let top_nll = top.square().scale(0.5).sum_last().shift(d as f64 * HALF_LOG_2PI);
    let x_t = flat.value().slice_rows(b, steps * b)?;
    Ok(NllTerms {
        steps,
        batch: b,
        dim: d,
        factors,
        top: top_nll,
        mu: cp.mu,
        log_sigma: cp.log_sigma,
        z,
        log_scale: tr.log_scale,
        x_t,
        t: t_upper,
        s: t_lower,
    })
}

/// Terms of independent single reverse factors.
pub struct FactorTerms<'t> {
    /// NLL of each factor including `(D/2) log 2π`, `[N, 1]`.
    pub nll: Var<'t>,
    pub mu: Var<'t>,
}

/// NLL of `p(x_s | x_t)` for independent rows, transporting both states.
#[allow(clippy::too_many_arguments)]
pub fn factor_nll<'t>(
    transporter: &Transporter,
    predictor: &Predictor,
    p: &Bound<'t>,
    x_s: &Var<'t>,
    x_t: &Var<'t>,
    s: &[f64],
    t: &[f64],
    steps: &[usize],
    conds: &Conditions,
) -> Result<FactorTerms<'t>> {
    let d = x_s.shape()[1];
    let lower = transporter.forward(p, x_s, s, steps)?;
    let upper = transporter.forward(p, x_t, t, steps)?;
    let cp = predictor.params(p, &upper.u, t, s, conds)?;
    let z = lower.u.sub(&cp.mu)?.div(&cp.sigma)?;
    let nll = z
        .square()
        .scale(0.5)
        .add(&cp.log_sigma)?
        .add(&lower.log_scale)?
        .sum_last()
        .shift(d as f64 * HALF_LOG_2PI);
    Ok(FactorTerms { nll, mu: cp.mu })
}
