//! Covariance-weighted gradient correction of a trajectory.

use crate::cond::Conditions;
use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor};
use crate::model::NtmModel;
use crate::schedule::{covariance_for_times, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceMode {
    /// Full trajectory covariance couples every level.
    Joint,
    /// Only the per-level variance `t_k²` is used.
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreConfig {
    pub mode: CovarianceMode,
    /// Clamp `|g|` at this percentile (in `(0, 100]`) per trajectory.
    pub clip_percentile: Option<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: CovarianceMode::Joint,
            clip_percentile: Some(99.0),
        }
    }
}

impl ScoreConfig {
    /// Joint covariance without clipping.
    pub fn exact() -> Self {
        Self {
            mode: CovarianceMode::Joint,
            clip_percentile: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScoreDenoised {
    /// Estimate of the clean sample read at the cleanest level, `[B, D]`.
    pub x0: Tensor,
    /// `(x_k - (S g)_k)/(1 - t_k)` for every level below the top, `[T, B, D]`.
    pub levels: Tensor,
    /// Gradient of the trajectory NLL after clipping, `[T+1, B, D]`.
    pub grad: Tensor,
}

/// Linear-interpolated percentile of `v` (sorted in place).
fn percentile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Gradient of the full trajectory NLL with respect to the states.
pub fn nll_gradient(model: &NtmModel, traj: &Trajectory, conds: &Conditions) -> Result<Tensor> {
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let states = tape.leaf(traj.states.clone());
    let total = model.nll(&p, &states, &traj.times, conds)?.total()?;
    let g = tape.backward(&total)?;
    Ok(g.get_or_zeros(&states))
}

/// Denoises `traj` with `x̂ - S ∇ L`, divided per level by `1 - t_k`.
pub fn score_denoise(
    model: &NtmModel,
    traj: &Trajectory,
    conds: &Conditions,
    cfg: &ScoreConfig,
) -> Result<ScoreDenoised> {
    if let Some(q) = cfg.clip_percentile {
        if !(q > 0.0 && q <= 100.0) {
            return Err(Error::invalid(format!("percentile {q} outside (0, 100]")));
        }
    }
    let mut grad = nll_gradient(model, traj, conds)?;
    let (steps, b, d) = (traj.step_count(), traj.batch(), traj.dim());
    let levels = steps + 1;
    let idx = |k: usize, r: usize, j: usize| (k * b + r) * d + j;
    if let Some(q) = cfg.clip_percentile {
        let g = grad.data_mut();
        for r in 0..b {
            let mut mags: Vec<f64> = (0..levels)
                .flat_map(|k| (0..d).map(move |j| (k, j)))
                .map(|(k, j)| g[idx(k, r, j)].abs())
                .collect();
            let cap = percentile(&mut mags, q);
            for k in 0..levels {
                for j in 0..d {
                    let v = &mut g[idx(k, r, j)];
                    *v = v.clamp(-cap, cap);
                }
            }
        }
    }
    let x = traj.states.data();
    let g = grad.data();
    let mut out = vec![0.0; steps * b * d];
    for r in 0..b {
        let times: Vec<f64> = (0..levels).map(|k| traj.time(r, k)).collect();
        let s = covariance_for_times(&times);
        for k in 0..steps {
            for j in 0..d {
                let sg = match cfg.mode {
                    CovarianceMode::Joint => (0..levels).map(|l| s[(k, l)] * g[idx(l, r, j)]).sum(),
                    CovarianceMode::Diagonal => s[(k, k)] * g[idx(k, r, j)],
                };
                out[idx(k, r, j)] = (x[idx(k, r, j)] - sg) / (1.0 - times[k]);
            }
        }
    }
    let levels_t = Tensor::new(&[steps, b, d], out)?;
    let x0 = levels_t.slice_rows(0, 1)?.reshape(&[b, d])?;
    Ok(ScoreDenoised {
        x0,
        levels: levels_t,
        grad,
    })
}
