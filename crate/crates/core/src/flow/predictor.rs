//! Gaussian affine coupling across trajectory levels: `(μ_P, σ_P)` of the
//! cleaner latent given the noisier one.

use rand::Rng;

use crate::cond::{CondEmbedding, ConditionSpec, Conditions};
use crate::error::{Error, Result};
use crate::flow::coupling::CouplingVars;
use crate::flow::transporter::RAW_CLAMP;
use crate::gradcore::{Tensor, Var};
use crate::model::fm::{VelocityConfig, VelocityNet};
use crate::nn::{self, Bound, Init, Linear, ParamSet};
use crate::oracle::reverse_linear;
use crate::schedule::posterior_coeffs;

/// Architecture of the predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictorKind {
    /// MLP over `(u_t, t, s, y)` with a zero-initialized output head.
    Mlp { hidden: usize, layers: usize },
    /// Velocity backbone mapped through the Gaussian posterior, with a
    /// learned log-scale correction.
    Posterior { net: VelocityConfig },
    /// Exact reverse conditional of per-coordinate Gaussian data; has no
    /// parameters.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
}

impl Default for PredictorKind {
    fn default() -> Self {
        PredictorKind::Mlp { hidden: 128, layers: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct MlpPredictor {
    layers: Vec<Linear>,
    head: Linear,
    cond: CondEmbedding,
}

#[derive(Clone, Debug)]
pub struct PosteriorPredictor {
    net: VelocityNet,
    proj_out: Linear,
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Mlp(MlpPredictor),
    Posterior(PosteriorPredictor),
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
}

/// Name prefix of the velocity backbone inside a finetuned predictor.
pub const POSTERIOR_NET: &str = "predictor.fm";

impl Predictor {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        dim: usize,
        kind: &PredictorKind,
        cond: ConditionSpec,
        cond_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            PredictorKind::Mlp { hidden, layers } => {
                let cond = CondEmbedding::new(ps, "predictor.cond", cond, cond_width, rng)?;
                let mut width = dim + 2 * nn::TIME_EMB + cond.width;
                let mut ls = Vec::new();
                for l in 0..(*layers).max(1) {
                    ls.push(Linear::new(
                        ps,
                        &format!("predictor.l{l}"),
                        width,
                        *hidden,
                        true,
                        Init::FanIn,
                        rng,
                    )?);
                    width = *hidden;
                }
                let head = Linear::new(ps, "predictor.head", width, 2 * dim, true, Init::Zero, rng)?;
                Ok(Predictor::Mlp(MlpPredictor { layers: ls, head, cond }))
            }
            PredictorKind::Posterior { net } => {
                if net.cond != cond {
                    return Err(Error::invalid(
                        "backbone conditioning differs from the model conditioning",
                    ));
                }
                let net = VelocityNet::new(ps, POSTERIOR_NET, dim, net, rng)?;
                let proj_out = Linear::new(ps, "predictor.proj_out", net.hidden_width(), dim, true, Init::Zero, rng)?;
                Ok(Predictor::Posterior(PosteriorPredictor { net, proj_out }))
            }
            PredictorKind::Gaussian { mean, var } => {
                if mean.len() != dim || var.len() != dim || var.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::invalid(
                        "Gaussian predictor needs a positive variance per coordinate",
                    ));
                }
                Ok(Predictor::Gaussian {
                    mean: mean.clone(),
                    var: var.clone(),
                })
            }
        }
    }

    /// `(μ_P, σ_P)` for each row of `u_t`, moving from level `t` to `s`.
    pub fn params<'t>(
        &self,
        p: &Bound<'t>,
        u_t: &Var<'t>,
        t: &[f64],
        s: &[f64],
        conds: &Conditions,
    ) -> Result<CouplingVars<'t>> {
        let tape = p.tape();
        let shape = u_t.shape();
        let (n, d) = (shape[0], shape[1]);
        if t.len() != n || s.len() != n || conds.len() != n {
            return Err(Error::invalid("predictor inputs disagree on batch size"));
        }
        if t.iter().zip(s).any(|(t, s)| s >= t) {
            return Err(Error::invalid("predictor needs s < t"));
        }
        match self {
            Predictor::Mlp(m) => {
                let mut parts = vec![
                    *u_t,
                    tape.constant(nn::time_embedding(t)),
                    tape.constant(nn::time_embedding(s)),
                ];
                if let Some(c) = m.cond.forward(p, conds)? {
                    parts.push(c);
                }
                let mut h = tape.concat(&parts)?;
                for layer in &m.layers {
                    h = layer.forward(p, &h)?.gelu();
                }
                let out = m.head.forward(p, &h)?;
                let mu = out.narrow(0, d)?;
                let raw = out.narrow(d, d)?.clamp(-RAW_CLAMP, RAW_CLAMP);
                Ok(CouplingVars::from_raw(mu, raw))
            }
            Predictor::Posterior(m) => {
                let mut a = Vec::with_capacity(n);
                let mut b = Vec::with_capacity(n);
                let mut c = Vec::with_capacity(n);
                for i in 0..n {
                    let k = posterior_coeffs(t[i], s[i])?;
                    if k.c <= 0.0 {
                        return Err(Error::invalid("posterior predictor needs a positive target level"));
                    }
                    a.push(k.a);
                    b.push(k.b);
                    c.push(k.c);
                }
                let col = |v: Vec<f64>| Tensor::new(&[n, 1], v);
                let (v, h) = m.net.forward(p, u_t, t, conds)?;
                let x0 = u_t.sub(&v.mul_const(&col(t.to_vec())?)?)?;
                let mu = u_t.mul_const(&col(a)?)?.add(&x0.mul_const(&col(b)?)?)?;
                let delta = m.proj_out.forward(p, &h)?.clamp(-RAW_CLAMP, RAW_CLAMP);
                let log_c = col(c.iter().map(|c| c.ln()).collect())?;
                Ok(CouplingVars {
                    mu,
                    sigma: delta.exp().mul_const(&col(c)?)?,
                    log_sigma: delta.add_const(&log_c)?,
                })
            }
            Predictor::Gaussian { mean, var } => {
                let mut slope = Vec::with_capacity(n * d);
                let mut icpt = Vec::with_capacity(n * d);
                let mut log_sd = Vec::with_capacity(n * d);
                for i in 0..n {
                    for j in 0..d {
                        let (k, c, sd) = reverse_linear(mean[j], var[j], t[i], s[i]);
                        slope.push(k);
                        icpt.push(c);
                        log_sd.push(sd.ln());
                    }
                }
                let mu = u_t
                    .mul_const(&Tensor::new(&[n, d], slope)?)?
                    .add_const(&Tensor::new(&[n, d], icpt)?)?;
                let log_sigma = tape.constant(Tensor::new(&[n, d], log_sd)?);
                Ok(CouplingVars {
                    mu,
                    sigma: log_sigma.exp(),
                    log_sigma,
                })
            }
        }
    }

    /// The velocity backbone of a finetuned predictor.
    pub fn backbone(&self) -> Option<&VelocityNet> {
        match self {
            Predictor::Posterior(m) => Some(&m.net),
            _ => None,
        }
    }
}
