//! The assembled model: transporter, predictor, schedule policy and
//! conditioning.

use rand::Rng;

use crate::cond::{ConditionSpec, Conditions};
use crate::error::{Error, Result};
use crate::flow::{trajectory_nll, NllTerms, Predictor, PredictorKind, Transporter, TransporterConfig};
use crate::gradcore::{Tape, Tensor, Var};
use crate::model::fm::FlowMatchModel;
use crate::nn::{Bound, ParamSet};
use crate::schedule::{posterior_coeffs, TimeSchedule, Trajectory, T_MIN_MAX};

#[derive(Clone, Debug, PartialEq)]
pub struct NtmConfig {
    pub dim: usize,
    pub transporter: TransporterConfig,
    pub predictor: PredictorKind,
    pub cond: ConditionSpec,
    pub cond_width: usize,
    /// Allowed trajectory step counts.
    pub steps: Vec<usize>,
    /// Per-example minimum level drawn uniformly from this range in training.
    pub t_min_range: (f64, f64),
    /// Minimum level used when sampling.
    pub sample_t_min: f64,
    /// Token count for the resolution shift of interior levels, if any.
    pub shift_seq_len: Option<usize>,
}

impl NtmConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            transporter: TransporterConfig::default(),
            predictor: PredictorKind::default(),
            cond: ConditionSpec::None,
            cond_width: 32,
            steps: vec![4],
            t_min_range: (0.0, T_MIN_MAX),
            sample_t_min: 0.02,
            shift_seq_len: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("model dimension must be positive"));
        }
        if self.steps.is_empty() {
            return Err(Error::invalid("the allowed step-count set is empty"));
        }
        let (lo, hi) = self.t_min_range;
        if !(0.0 <= lo && lo <= hi && hi <= T_MIN_MAX) {
            return Err(Error::invalid(format!(
                "t_min range [{lo}, {hi}] must lie within [0, {T_MIN_MAX}]"
            )));
        }
        for &s in &self.steps {
            TimeSchedule::uniform(s, hi)?;
            TimeSchedule::uniform(s, self.sample_t_min)?;
        }
        if let PredictorKind::Posterior { .. } = self.predictor {
            if lo <= 0.0 || self.sample_t_min <= 0.0 {
                return Err(Error::invalid(
                    "a finetuned predictor needs strictly positive minimum levels",
                ));
            }
        }
        Ok(())
    }
}

/// Normalizing trajectory model.
#[derive(Clone, Debug)]
pub struct NtmModel {
    pub config: NtmConfig,
    pub params: ParamSet,
    transporter: Transporter,
    predictor: Predictor,
    /// Frozen backbone anchoring the predictor mean during finetuning.
    pub reference: Option<FlowMatchModel>,
}

impl NtmModel {
    pub fn new<R: Rng + ?Sized>(config: NtmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut tcfg = config.transporter.clone();
        tcfg.steps_embedding = config.steps.len() > 1;
        let transporter = Transporter::new(&mut params, "transporter", config.dim, tcfg, rng)?;
        let predictor = Predictor::new(
            &mut params,
            config.dim,
            &config.predictor,
            config.cond,
            config.cond_width,
            rng,
        )?;
        Ok(Self {
            config,
            params,
            transporter,
            predictor,
            reference: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn transporter(&self) -> &Transporter {
        &self.transporter
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn check_steps(&self, steps: usize) -> Result<()> {
        if self.config.steps.contains(&steps) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "step count {steps} is not in the model's set {:?}",
                self.config.steps
            )))
        }
    }

    /// Schedule for `steps` starting at `t_min`, shifted if configured.
    pub fn schedule(&self, steps: usize, t_min: f64) -> Result<TimeSchedule> {
        self.check_steps(steps)?;
        let base = TimeSchedule::uniform(steps, t_min)?;
        match self.config.shift_seq_len {
            Some(len) => base.shifted(len),
            None => Ok(base),
        }
    }

    /// Sampling schedule for `steps`.
    pub fn sample_schedule(&self, steps: usize) -> Result<TimeSchedule> {
        self.schedule(steps, self.config.sample_t_min)
    }

    /// NLL terms on a tape.
    pub fn nll<'t>(&self, p: &Bound<'t>, states: &Var<'t>, times: &Tensor, conds: &Conditions) -> Result<NllTerms<'t>> {
        let steps = states.shape()[0].saturating_sub(1);
        self.check_steps(steps)?;
        trajectory_nll(&self.transporter, &self.predictor, p, states, times, conds)
    }

    /// Full NLL of each trajectory, in nats.
    pub fn trajectory_nll(&self, traj: &Trajectory, conds: &Conditions) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let states = tape.constant(traj.states.clone());
        Ok(self.nll(&p, &states, &traj.times, conds)?.per_trajectory())
    }

    /// Mean of the reference backbone's Gaussian posterior, in data space.
    pub fn reference_mean(&self, x_t: &Tensor, t: &[f64], s: &[f64], conds: &Conditions) -> Result<Option<Tensor>> {
        let Some(fm) = &self.reference else {
            return Ok(None);
        };
        let v = fm.velocity(x_t, t, conds)?;
        let d = x_t.row_len();
        let mut out = x_t.clone();
        let (xd, vd) = (x_t.data(), v.data());
        let coeffs = t
            .iter()
            .zip(s)
            .map(|(&t, &s)| posterior_coeffs(t, s))
            .collect::<Result<Vec<_>>>()?;
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let r = i / d;
            let c = coeffs[r];
            let x0 = xd[i] - vd[i] * t[r];
            *o = xd[i] * c.a + x0 * c.b;
        }
        Ok(Some(out))
    }
}
