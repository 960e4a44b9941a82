//! Optimization loops for the flow-matching backbone and the trajectory
//! model.

use rand::Rng;

use crate::cond::Conditions;
use crate::error::{Error, Result};
use crate::flow::factor_nll;
use crate::gradcore::{Tape, Tensor, Var};
use crate::model::fm::FlowMatchModel;
use crate::model::ntm::NtmModel;
use crate::nn::{clip_global_norm, cosine_decay, AdamW, CosineSchedule};
use crate::schedule::{forward_coeffs, sample_trajectory_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Every reverse factor of a full trajectory per example.
    EndToEnd,
    /// One uniformly chosen consecutive pair per example.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            min_lr: 1e-6,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optim: OptimConfig,
    pub batch: usize,
    pub iters: u64,
    pub cfg_dropout: f64,
    /// Initial weight of the mean-alignment loss, cosine-annealed to zero.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::EndToEnd,
            optim: OptimConfig::default(),
            batch: 128,
            iters: 2000,
            cfg_dropout: 0.1,
            lambda: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::invalid("dropout probability must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("aux-loss weight must be nonnegative"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> CosineSchedule {
        CosineSchedule {
            peak: self.optim.lr,
            floor: self.optim.min_lr.min(self.optim.lr),
            warmup: self.optim.warmup,
            total: self.iters,
        }
    }

    /// Aux-loss weight at `step`.
    pub fn lambda_at(&self, step: u64) -> f64 {
        cosine_decay(self.lambda, step, self.iters)
    }
}

/// Loss components of one trajectory-model update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// NLL per dimension and reverse factor, excluding the top level.
    pub nll: f64,
    pub aux: f64,
    pub total: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Root-mean-square gap between the predictor mean and the reference
    /// mean; zero without a reference.
    pub mu_drift: f64,
}

/// Loss on a tape for a batch, without updating anything.
pub struct NtmLoss<'t> {
    pub nll: Var<'t>,
    pub aux: Option<Var<'t>>,
}

/// Draws per-row step counts and minimum levels, groups rows by step count
/// and evaluates the configured objective.
pub fn ntm_loss<'t, R: Rng + ?Sized>(
    model: &NtmModel,
    p: &crate::nn::Bound<'t>,
    x0: &Tensor,
    conds: &Conditions,
    mode: TrainMode,
    rng: &mut R,
) -> Result<NtmLoss<'t>> {
    let tape = p.tape();
    let (b, d) = (x0.rows(), x0.row_len());
    let allowed = &model.config.steps;
    let (lo, hi) = model.config.t_min_range;
    let steps: Vec<usize> = (0..b).map(|_| allowed[rng.random_range(0..allowed.len())]).collect();
    let t_min: Vec<f64> = (0..b)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect();
    let mut groups: Vec<usize> = steps.clone();
    groups.sort_unstable();
    groups.dedup();

    let mut nll_acc: Option<Var<'t>> = None;
    let mut aux_acc: Option<Var<'t>> = None;
    let mut aux_count = 0usize;
    let add = |acc: &mut Option<Var<'t>>, v: Var<'t>| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(a) => a.add(&v)?,
            None => v,
        });
        Ok(())
    };
    for &t_steps in &groups {
        let rows: Vec<usize> = (0..b).filter(|&r| steps[r] == t_steps).collect();
        let times = rows
            .iter()
            .map(|&r| Ok(model.schedule(t_steps, t_min[r])?.times().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let xg = gather(x0, &rows)?;
        let cg = conds.select(&rows);
        let (nll_sum, mu, x_t, t, s, gcond) = match mode {
            TrainMode::EndToEnd => {
                let traj = sample_trajectory_rows(&xg, &times, rng)?;
                let states = tape.constant(traj.states.clone());
                let terms = model.nll(p, &states, &traj.times, &cg)?;
                let scaled = terms.factors.sum().scale(1.0 / (d * t_steps) as f64);
                let gcond = cg.tile(t_steps);
                (
                    scaled,
                    terms.mu,
                    terms.x_t.clone(),
                    terms.t.clone(),
                    terms.s.clone(),
                    gcond,
                )
            }
            TrainMode::Pairwise => {
                let n = rows.len();
                let mut x_s = vec![0.0; n * d];
                let mut x_t = vec![0.0; n * d];
                let mut s = Vec::with_capacity(n);
                let mut t = Vec::with_capacity(n);
                for tr in &times {
                    let k = rng.random_range(1..=t_steps);
                    s.push(tr[k - 1]);
                    t.push(tr[k]);
                }
                let e1 = Tensor::randn(&[n, d], rng);
                let e2 = Tensor::randn(&[n, d], rng);
                for i in 0..n {
                    let fc = forward_coeffs(s[i], t[i])?;
                    for j in 0..d {
                        let idx = i * d + j;
                        x_s[idx] = (1.0 - s[i]) * xg.data()[idx] + s[i] * e1.data()[idx];
                        x_t[idx] = fc.alpha * x_s[idx] + fc.sigma * e2.data()[idx];
                    }
                }
                let xs = tape.constant(Tensor::new(&[n, d], x_s)?);
                let xt_t = Tensor::new(&[n, d], x_t)?;
                let xt = tape.constant(xt_t.clone());
                let terms = factor_nll(
                    model.transporter(),
                    model.predictor(),
                    p,
                    &xs,
                    &xt,
                    &s,
                    &t,
                    &vec![t_steps; n],
                    &cg,
                )?;
                (terms.nll.sum().scale(1.0 / d as f64), terms.mu, xt_t, t, s, cg)
            }
        };
        add(&mut nll_acc, nll_sum)?;
        if let Some(mu_fm) = model.reference_mean(&x_t, &t, &s, &gcond)? {
            aux_count += mu_fm.numel();
            let gap = mu.sub(&tape.constant(mu_fm))?.square().sum();
            add(&mut aux_acc, gap)?;
        }
    }
    let nll = nll_acc
        .ok_or_else(|| Error::invalid("empty batch"))?
        .scale(1.0 / b as f64);
    let aux = aux_acc.map(|a| a.scale(1.0 / aux_count as f64));
    Ok(NtmLoss { nll, aux })
}

fn gather(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let w = x.row_len();
    let mut out = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::new(&[rows.len(), w], out)
}

/// Optimizer state for trajectory-model training.
pub struct NtmTrainer {
    pub config: TrainConfig,
    opt: AdamW,
    step: u64,
}

impl NtmTrainer {
    pub fn new(model: &NtmModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let o = &config.optim;
        let opt = AdamW::new(&model.params, o.beta1, o.beta2, o.weight_decay);
        Ok(Self { config, opt, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update on clean samples `x0`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &mut NtmModel,
        x0: &Tensor,
        conds: &Conditions,
        rng: &mut R,
    ) -> Result<StepRecord> {
        let step = self.step;
        let lambda = self.config.lambda_at(step);
        let lr = self.config.lr_schedule().at(step);
        let conds = conds.dropout(self.config.cfg_dropout, rng);

        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let loss = ntm_loss(model, &p, x0, &conds, self.config.mode, rng)?;
        let nll = loss.nll.value().item()?;
        let (total, aux) = match loss.aux {
            Some(a) if lambda > 0.0 => (loss.nll.add(&a.scale(lambda))?, a.value().item()?),
            Some(a) => (loss.nll, a.value().item()?),
            None => (loss.nll, 0.0),
        };
        let total_v = total.value().item()?;
        if !total_v.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("nll={nll} aux={aux} lambda={lambda} lr={lr}"),
            });
        }
        let g = tape.backward(&total)?;
        let mut grads = p.grads(&g);
        let grad_norm = clip_global_norm(&mut grads, self.config.optim.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {grad_norm} at nll={nll}"),
            });
        }
        self.opt.update(&mut model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            nll,
            aux,
            total: total_v,
            lambda,
            grad_norm,
            lr,
            mu_drift: aux.sqrt(),
        })
    }
}

/// One flow-matching update record.
#[derive(Clone, Debug, PartialEq)]
pub struct FmRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Optimizer state for the flow-matching backbone.
pub struct FmTrainer {
    pub config: TrainConfig,
    opt: AdamW,
    step: u64,
}

impl FmTrainer {
    pub fn new(model: &FlowMatchModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let o = &config.optim;
        let opt = AdamW::new(&model.params, o.beta1, o.beta2, o.weight_decay);
        Ok(Self { config, opt, step: 0 })
    }

    /// One velocity-regression update with `t ~ U(0, 1)`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &mut FlowMatchModel,
        x0: &Tensor,
        conds: &Conditions,
        rng: &mut R,
    ) -> Result<FmRecord> {
        let step = self.step;
        let lr = self.config.lr_schedule().at(step);
        let conds = conds.dropout(self.config.cfg_dropout, rng);
        let n = x0.rows();
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let eps = Tensor::randn(x0.shape(), rng);
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let loss = model.loss(&p, x0, &eps, &t, &conds)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("flow-matching loss {value}"),
            });
        }
        let g = tape.backward(&loss)?;
        let mut grads = p.grads(&g);
        clip_global_norm(&mut grads, self.config.optim.grad_clip);
        self.opt.update(&mut model.params, &grads, lr)?;
        self.step += 1;
        Ok(FmRecord { step, loss: value, lr })
    }
}
