//! Toy flow-matching backbone: velocity regression and its samplers.

use rand::Rng;

use crate::cond::{CondEmbedding, ConditionSpec, Conditions};
use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::nn::{self, Bound, Init, Linear, ParamSet};
use crate::schedule::{posterior_coeffs, TimeSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityConfig {
    pub hidden: usize,
    pub layers: usize,
    pub cond: ConditionSpec,
    pub cond_width: usize,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 3,
            cond: ConditionSpec::None,
            cond_width: 32,
        }
    }
}

/// MLP `v(x, t, y)` with a zero-initialized output layer.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    dim: usize,
    layers: Vec<Linear>,
    head: Linear,
    cond: CondEmbedding,
}

impl VelocityNet {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        cfg: &VelocityConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let cond = CondEmbedding::new(ps, &format!("{name}.cond"), cfg.cond, cfg.cond_width, rng)?;
        let mut width = dim + nn::TIME_EMB + cond.width;
        let mut layers = Vec::new();
        for l in 0..cfg.layers.max(1) {
            layers.push(Linear::new(
                ps,
                &format!("{name}.l{l}"),
                width,
                cfg.hidden,
                true,
                Init::FanIn,
                rng,
            )?);
            width = cfg.hidden;
        }
        let head = Linear::new(ps, &format!("{name}.head"), width, dim, true, Init::Zero, rng)?;
        Ok(Self {
            dim,
            layers,
            head,
            cond,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.head.fan_in
    }

    /// Velocity and last hidden features.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, t: &[f64], conds: &Conditions) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let mut parts = vec![*x, tape.constant(nn::time_embedding(t))];
        if let Some(c) = self.cond.forward(p, conds)? {
            parts.push(c);
        }
        let mut h = tape.concat(&parts)?;
        for layer in &self.layers {
            h = layer.forward(p, &h)?.gelu();
        }
        Ok((self.head.forward(p, &h)?, h))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmConfig {
    pub dim: usize,
    pub net: VelocityConfig,
}

/// Velocity model trained by regressing `ε - x_0` on `x_t = (1-t) x_0 + t ε`.
#[derive(Clone, Debug)]
pub struct FlowMatchModel {
    pub config: FmConfig,
    pub params: ParamSet,
    net: VelocityNet,
}

/// Parameter-name prefix of the velocity network.
pub const FM_PREFIX: &str = "fm";

impl FlowMatchModel {
    pub fn new<R: Rng + ?Sized>(config: FmConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = VelocityNet::new(&mut params, FM_PREFIX, config.dim, &config.net, rng)?;
        Ok(Self { config, params, net })
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Per-element mean squared velocity error on the tape.
    pub fn loss<'t>(&self, p: &Bound<'t>, x0: &Tensor, eps: &Tensor, t: &[f64], conds: &Conditions) -> Result<Var<'t>> {
        let tape = p.tape();
        let d = self.dim();
        let mut xt = x0.clone();
        let mut target = x0.clone();
        {
            let (xd, ed) = (x0.data(), eps.data());
            let xt = xt.data_mut();
            for i in 0..xd.len() {
                let ti = t[i / d];
                xt[i] = (1.0 - ti) * xd[i] + ti * ed[i];
            }
            let tg = target.data_mut();
            for i in 0..xd.len() {
                tg[i] = ed[i] - xd[i];
            }
        }
        let (v, _) = self.net.forward(p, &tape.constant(xt), t, conds)?;
        Ok(v.sub(&tape.constant(target))?.square().mean())
    }

    /// Tape-free velocity.
    pub fn velocity(&self, x: &Tensor, t: &[f64], conds: &Conditions) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.net.forward(&p, &tape.constant(x.clone()), t, conds)?.0.value())
    }

    /// Euler integration of `dx/dt = v` from `t = 1` to `t = 0`.
    pub fn sample_euler(&self, noise: &Tensor, steps: usize, conds: &Conditions) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::invalid("Euler sampler needs at least one step"));
        }
        let n = noise.rows();
        let dt = 1.0 / steps as f64;
        let mut x = noise.clone();
        for k in (1..=steps).rev() {
            let t = vec![k as f64 * dt; n];
            let v = self.velocity(&x, &t, conds)?;
            x = x.zip_map(&v, |x, v| x - dt * v)?;
        }
        Ok(x)
    }

    /// Ancestral sampling through the Gaussian posterior implied by the
    /// velocity's clean estimate `x̂_0 = x_t - t v`. Draws the terminal noise
    /// and then one `[n, D]` normal per step from `rng`; returns every level,
    /// cleanest first.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        schedule: &TimeSchedule,
        n: usize,
        conds: &Conditions,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let d = self.dim();
        let times = schedule.times();
        let steps = schedule.step_count();
        let mut levels = vec![Tensor::zeros(&[n, d]); steps + 1];
        levels[steps] = Tensor::randn(&[n, d], rng);
        for k in (1..=steps).rev() {
            let (t, s) = (times[k], times[k - 1]);
            let c = posterior_coeffs(t, s)?;
            let x = &levels[k];
            let v = self.velocity(x, &vec![t; n], conds)?;
            let z = Tensor::randn(&[n, d], rng);
            // same operation order as the finetuned predictor at initialization
            let x0 = x.zip_map(&v, |x, v| x - v * t)?;
            let mu = x.map(|x| x * c.a).zip_map(&x0.map(|x0| x0 * c.b), |a, b| a + b)?;
            levels[k - 1] = z.map(|z| z * c.c).zip_map(&mu, |a, m| a + m)?;
        }
        Ok(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> FlowMatchModel {
        let cfg = FmConfig {
            dim: 2,
            net: VelocityConfig {
                hidden: 16,
                layers: 2,
                ..Default::default()
            },
        };
        FlowMatchModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_network_returns_noise() {
        let m = model();
        let noise = Tensor::randn(&[5, 2], &mut ChaCha8Rng::seed_from_u64(1));
        let x = m.sample_euler(&noise, 7, &Conditions::Unconditional(5)).unwrap();
        assert_eq!(x, noise);
    }

    #[test]
    fn zero_network_loss_is_target_energy() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[4, 2], &mut rng);
        let eps = Tensor::randn(&[4, 2], &mut rng);
        let tape = Tape::new();
        let p = m.params.bind(&tape);
        let l = m
            .loss(&p, &x0, &eps, &[0.1, 0.2, 0.3, 0.4], &Conditions::Unconditional(4))
            .unwrap()
            .value()
            .item()
            .unwrap();
        let expect = eps.zip_map(&x0, |e, x| (e - x) * (e - x)).unwrap().mean();
        assert!((l - expect).abs() < 1e-14);
    }
}
