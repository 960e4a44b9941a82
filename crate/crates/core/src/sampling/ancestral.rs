//! Few-step ancestral sampling through the predictor in latent space.

use rand::Rng;

use crate::cond::Conditions;
use crate::error::{Error, Result};
use crate::flow::{affine_inverse, CouplingParams};
use crate::gradcore::{Tape, Tensor};
use crate::model::NtmModel;
use crate::sampling::cfg::cfg_combine;
use crate::schedule::{TimeSchedule, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    /// One condition per sample; its length sets the sample count.
    pub conds: Conditions,
    pub guidance: f64,
    pub steps: usize,
    /// Overrides the model's sampling minimum level.
    pub t_min: Option<f64>,
    /// Also decode every intermediate level to data space.
    pub keep_trajectory: bool,
}

impl SampleRequest {
    pub fn new(conds: Conditions, steps: usize) -> Self {
        Self {
            conds,
            guidance: 0.0,
            steps,
            t_min: None,
            keep_trajectory: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sampled {
    /// Decoded state at the cleanest level, `[n, D]`.
    pub x: Tensor,
    /// Latent states, cleanest first; the last one is the top-level noise.
    pub latents: Vec<Tensor>,
    /// Data-space trajectory when requested.
    pub trajectory: Option<Trajectory>,
    pub schedule: TimeSchedule,
    /// Transporter network evaluations spent decoding.
    pub decode_evals: usize,
}

impl Sampled {
    /// Latent state at the cleanest level.
    pub fn u_t0(&self) -> &Tensor {
        &self.latents[0]
    }
}

/// `(μ_P, σ_P)` for moving every row of `u` from `t` to `s`.
pub fn predictor_step(model: &NtmModel, u: &Tensor, t: f64, s: f64, conds: &Conditions) -> Result<CouplingParams> {
    let n = u.rows();
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let cp = model
        .predictor()
        .params(&p, &tape.constant(u.clone()), &vec![t; n], &vec![s; n], conds)?;
    cp.values()
}

/// Guided coupling for one step; the unconditional branch is only evaluated
/// when `w > 0`.
fn guided_step(model: &NtmModel, u: &Tensor, t: f64, s: f64, req: &SampleRequest) -> Result<CouplingParams> {
    let cond = predictor_step(model, u, t, s, &req.conds)?;
    if req.guidance == 0.0 {
        return Ok(cond);
    }
    let uncond = predictor_step(model, u, t, s, &req.conds.nulled())?;
    cfg_combine(&cond, &uncond, req.guidance)
}

/// Draws `û_{t_T} ~ N(0, I)`, then one `[n, D]` normal per step, and decodes
/// the cleanest latent through the inverse transporter.
pub fn sample<R: Rng + ?Sized>(model: &NtmModel, req: &SampleRequest, rng: &mut R) -> Result<Sampled> {
    if !(req.guidance >= 0.0) {
        return Err(Error::invalid("guidance scale must be nonnegative"));
    }
    if req.guidance > 0.0 && req.conds.is_unconditional() {
        return Err(Error::invalid("guidance needs a conditional model"));
    }
    let schedule = match req.t_min {
        Some(t0) => model.schedule(req.steps, t0)?,
        None => model.sample_schedule(req.steps)?,
    };
    let n = req.conds.len();
    let d = model.dim();
    let times = schedule.times();
    let steps = schedule.step_count();
    let mut latents = vec![Tensor::zeros(&[n, d]); steps + 1];
    latents[steps] = Tensor::randn(&[n, d], rng);
    for k in (1..=steps).rev() {
        let cp = guided_step(model, &latents[k], times[k], times[k - 1], req)?;
        let z = Tensor::randn(&[n, d], rng);
        latents[k - 1] = affine_inverse(&z, &cp)?;
    }
    let decode = |k: usize| -> Result<(Tensor, usize)> {
        if k == steps {
            return Ok((latents[k].clone(), 0));
        }
        model
            .transporter()
            .inverse(&model.params, &latents[k], &vec![times[k]; n], &vec![steps; n])
    };
    let (x, mut decode_evals) = decode(0)?;
    let trajectory = if req.keep_trajectory {
        let mut levels = vec![x.clone()];
        for k in 1..=steps {
            let (xk, e) = decode(k)?;
            decode_evals += e;
            levels.push(xk);
        }
        let tt = Tensor::new(&[n, steps + 1], times.repeat(n))?;
        Some(Trajectory::from_levels(&levels, tt)?)
    } else {
        None
    };
    Ok(Sampled {
        x,
        latents,
        trajectory,
        schedule,
        decode_evals,
    })
}
