//! Closed-form joint Gaussian over `(x_0, x_{t_0}, …, x_{t_T})` for
//! one-dimensional Gaussian data.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, GaussianHandle};
use crate::error::{Error, Result};
use crate::flow::PredictorKind;
use crate::model::ntm::{NtmConfig, NtmModel};
use crate::schedule::{covariance_for_times, TimeSchedule};

#[derive(Clone, Debug)]
pub struct GaussianTrajectoryOracle {
    times: Vec<f64>,
    mean: f64,
    var: f64,
    /// joint over `(x_0, trajectory)`
    joint_mean: DVector<f64>,
    joint_cov: DMatrix<f64>,
    traj_chol: Cholesky<f64, Dyn>,
}

impl GaussianTrajectoryOracle {
    pub fn new(mean: f64, var: f64, times: &[f64]) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::invalid("data variance must be positive"));
        }
        let n = times.len();
        let s = covariance_for_times(times);
        let c = |i: usize| 1.0 - times[i];
        let mut joint_cov = DMatrix::zeros(n + 1, n + 1);
        let mut joint_mean = DVector::zeros(n + 1);
        joint_cov[(0, 0)] = var;
        joint_mean[0] = mean;
        for i in 0..n {
            joint_mean[i + 1] = c(i) * mean;
            joint_cov[(0, i + 1)] = c(i) * var;
            joint_cov[(i + 1, 0)] = c(i) * var;
            for j in 0..n {
                joint_cov[(i + 1, j + 1)] = s[(i, j)] + c(i) * c(j) * var;
            }
        }
        let block = joint_cov.view((1, 1), (n, n)).into_owned();
        let traj_chol =
            Cholesky::new(block).ok_or_else(|| Error::invalid("trajectory covariance is not positive definite"))?;
        Ok(Self {
            times: times.to_vec(),
            mean,
            var,
            joint_mean,
            joint_cov,
            traj_chol,
        })
    }

    /// Oracle for a dataset with a Gaussian form.
    pub fn for_dataset(ds: &Dataset, schedule: &TimeSchedule) -> Result<Self> {
        let GaussianHandle { mean, var } = ds.gaussian()?;
        if mean.len() != 1 {
            return Err(Error::invalid("oracle needs one-dimensional data"));
        }
        Self::new(mean[0], var[0], schedule.times())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn data_mean(&self) -> f64 {
        self.mean
    }

    pub fn data_var(&self) -> f64 {
        self.var
    }

    /// Mean of `(x_0, x_{t_0}, …, x_{t_T})`.
    pub fn joint_mean(&self) -> &DVector<f64> {
        &self.joint_mean
    }

    /// Covariance of `(x_0, x_{t_0}, …, x_{t_T})`.
    pub fn joint_cov(&self) -> &DMatrix<f64> {
        &self.joint_cov
    }

    fn centered(&self, traj: &[f64]) -> Result<DVector<f64>> {
        let n = self.times.len();
        if traj.len() != n {
            return Err(Error::invalid(format!(
                "trajectory has {} levels, oracle has {n}",
                traj.len()
            )));
        }
        Ok(DVector::from_fn(n, |i, _| traj[i] - self.joint_mean[i + 1]))
    }

    /// `E[x_0 | trajectory]`.
    pub fn posterior_mean(&self, traj: &[f64]) -> Result<f64> {
        let r = self.centered(traj)?;
        let w = self.traj_chol.solve(&r);
        let cross = self.joint_cov.view((0, 1), (1, self.times.len()));
        Ok(self.mean + (cross * w)[0])
    }

    /// Exact negative log-density of one trajectory.
    pub fn trajectory_nll(&self, traj: &[f64]) -> Result<f64> {
        let r = self.centered(traj)?;
        let w = self.traj_chol.solve(&r);
        let n = self.times.len() as f64;
        let logdet: f64 = self.traj_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        Ok(0.5 * r.dot(&w) + 0.5 * logdet + 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Moments of the exact reverse conditional `p(x_s | x_t)` for data
/// `N(mean, var)`, as `(slope, intercept, std)` of
/// `x_s | x_t ~ N(slope x_t + intercept, std²)`.
pub fn reverse_linear(mean: f64, var: f64, t: f64, s: f64) -> (f64, f64, f64) {
    let cov_noise = if s == 0.0 { 0.0 } else { s * s * (1.0 - t) / (1.0 - s) };
    let var_s = (1.0 - s).powi(2) * var + s * s;
    let var_t = (1.0 - t).powi(2) * var + t * t;
    let cov = (1.0 - s) * (1.0 - t) * var + cov_noise;
    let slope = cov / var_t;
    let intercept = (1.0 - s) * mean - slope * (1.0 - t) * mean;
    let cond_var = (var_s - cov * cov / var_t).max(0.0);
    (slope, intercept, cond_var.sqrt())
}

/// Trajectory model whose likelihood is exact for data `N(mean, var)` in
/// every coordinate: identity transporter and the closed-form reverse
/// conditional as predictor.
pub fn exact_gaussian_model(mean: &[f64], var: &[f64], steps: Vec<usize>, sample_t_min: f64) -> Result<NtmModel> {
    let mut cfg = NtmConfig::new(mean.len());
    cfg.predictor = PredictorKind::Gaussian {
        mean: mean.to_vec(),
        var: var.to_vec(),
    };
    cfg.transporter.hidden = 4;
    cfg.steps = steps;
    cfg.sample_t_min = sample_t_min;
    cfg.t_min_range = (sample_t_min, sample_t_min);
    NtmModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_noise_is_independent() {
        let o = GaussianTrajectoryOracle::new(0.0, 1.0, &[0.0, 1.0]).unwrap();
        let c = o.joint_cov();
        assert_eq!(c[(0, 2)], 0.0);
        assert_eq!(c[(2, 2)], 1.0);
        assert_eq!(c[(0, 0)], 1.0);
    }

    #[test]
    fn marginal_variance_and_posterior_mean() {
        let t = 0.3;
        let o = GaussianTrajectoryOracle::new(0.0, 1.0, &[t, 1.0]).unwrap();
        let v = (1.0 - t) * (1.0 - t) + t * t;
        assert!((o.joint_cov()[(1, 1)] - v).abs() < 1e-15);
        // the terminal level carries no information about x_0
        let m = o.posterior_mean(&[0.8, -0.4]).unwrap();
        assert!((m - (1.0 - t) * 0.8 / v).abs() < 1e-12);
    }
}
