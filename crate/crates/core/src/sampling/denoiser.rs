//! One-pass denoiser distilled from trajectory score denoising.

use rand::Rng;

use crate::cond::{CondEmbedding, ConditionSpec, Conditions};
use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::model::train::{OptimConfig, TrainConfig};
use crate::model::NtmModel;
use crate::nn::{clip_global_norm, AdamW, Bound, Init, Linear, ParamSet};
use crate::sampling::score::{score_denoise, ScoreConfig};
use crate::schedule::sample_trajectory;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: usize,
    pub cond: ConditionSpec,
    pub cond_width: usize,
}

impl DenoiserConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: 32,
            cond: ConditionSpec::None,
            cond_width: 16,
        }
    }
}

/// Position-wise MLP with one dense layer mixing all positions, added as a
/// residual to its input `u_{t_0}`. The output head starts at zero, so a
/// fresh denoiser copies its input through.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    input: Linear,
    mix: Linear,
    hidden: Linear,
    head: Linear,
    cond: CondEmbedding,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (config.dim, config.hidden);
        if d == 0 || h == 0 {
            return Err(Error::invalid("denoiser needs positive dimension and width"));
        }
        let mut ps = ParamSet::new();
        let cond = CondEmbedding::new(&mut ps, "denoiser.cond", config.cond, config.cond_width, rng)?;
        let input = Linear::new(&mut ps, "denoiser.in", 1 + d + cond.width, h, true, Init::FanIn, rng)?;
        let mix = Linear::new(&mut ps, "denoiser.mix", d * h, d * h, true, Init::FanIn, rng)?;
        let hidden = Linear::new(&mut ps, "denoiser.hidden", h, h, true, Init::FanIn, rng)?;
        let head = Linear::new(&mut ps, "denoiser.head", h, 1, true, Init::Zero, rng)?;
        Ok(Self {
            config,
            params: ps,
            input,
            mix,
            hidden,
            head,
            cond,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, u: &Var<'t>, conds: &Conditions) -> Result<Var<'t>> {
        let tape = p.tape();
        let shape = u.shape();
        let (d, h) = (self.config.dim, self.config.hidden);
        if shape.len() != 2 || shape[1] != d || conds.len() != shape[0] {
            return Err(Error::invalid(format!(
                "denoiser expects [{}, {d}] with one condition per row, got {shape:?}",
                conds.len()
            )));
        }
        let b = shape[0];
        let mut onehot = vec![0.0; b * d * d];
        for r in 0..b * d {
            onehot[r * d + r % d] = 1.0;
        }
        let mut parts = vec![
            u.reshape(&[b * d, 1])?,
            tape.constant(Tensor::new(&[b * d, d], onehot)?),
        ];
        if let Some(c) = self.cond.forward(p, conds)? {
            let idx: Vec<usize> = (0..b * d).map(|r| r / d).collect();
            parts.push(c.gather_rows(&idx)?);
        }
        let x = self.input.forward(p, &tape.concat(&parts)?)?.gelu();
        let mixed = self.mix.forward(p, &x.reshape(&[b, d * h])?)?.gelu();
        let x = x.add(&mixed.reshape(&[b * d, h])?)?;
        let x = self.hidden.forward(p, &x)?.gelu();
        let out = self.head.forward(p, &x)?.reshape(&[b, d])?;
        u.add(&out)
    }

    /// Tape-free single evaluation.
    pub fn apply(&self, u_t0: &Tensor, conds: &Conditions) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.forward(&p, &tape.constant(u_t0.clone()), conds)?.value())
    }
}

/// Regression pairs `(u_{t_0}, x̂_0^den)` built from forward trajectories of
/// real samples `x0` on the model's sampling schedule.
pub fn distill_targets<R: Rng + ?Sized>(
    model: &NtmModel,
    x0: &Tensor,
    conds: &Conditions,
    steps: usize,
    score: &ScoreConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let schedule = model.sample_schedule(steps)?;
    let traj = sample_trajectory(x0, &schedule, rng)?;
    let target = score_denoise(model, &traj, conds, score)?.x0;
    let n = x0.rows();
    let (u, _) = model.transporter().apply(
        &model.params,
        &traj.level(0),
        &vec![schedule.t_min(); n],
        &vec![steps; n],
    )?;
    Ok((u, target))
}

/// Optimizer state for denoiser distillation.
pub struct DenoiserTrainer {
    pub config: TrainConfig,
    opt: AdamW,
    step: u64,
}

impl DenoiserTrainer {
    pub fn new(denoiser: &Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let OptimConfig {
            beta1,
            beta2,
            weight_decay,
            ..
        } = config.optim;
        Ok(Self {
            opt: AdamW::new(&denoiser.params, beta1, beta2, weight_decay),
            config,
            step: 0,
        })
    }

    /// Mean squared error on one batch, followed by one update.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        denoiser: &mut Denoiser,
        u_t0: &Tensor,
        target: &Tensor,
        conds: &Conditions,
        rng: &mut R,
    ) -> Result<f64> {
        let lr = self.config.lr_schedule().at(self.step);
        let conds = conds.dropout(self.config.cfg_dropout, rng);
        let tape = Tape::new();
        let p = denoiser.params.bind(&tape);
        let out = denoiser.forward(&p, &tape.constant(u_t0.clone()), &conds)?;
        let loss = out.sub(&tape.constant(target.clone()))?.square().mean();
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("denoiser loss {value}"),
            });
        }
        let g = tape.backward(&loss)?;
        let mut grads = p.grads(&g);
        clip_global_norm(&mut grads, self.config.optim.grad_clip);
        self.opt.update(&mut denoiser.params, &grads, lr)?;
        self.step += 1;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_denoiser_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let den = Denoiser::new(DenoiserConfig::new(3), &mut rng).unwrap();
        let u = Tensor::randn(&[4, 3], &mut rng);
        assert_eq!(den.apply(&u, &Conditions::Unconditional(4)).unwrap(), u);
    }
}
