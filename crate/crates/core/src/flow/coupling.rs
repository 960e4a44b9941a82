use crate::error::{Error, Result};
use crate::gradcore::{Tensor, Var};

/// Shift and positive scale of an affine coupling, shaped like its input.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl CouplingParams {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "coupling params",
                lhs: mu.shape().to_vec(),
                rhs: sigma.shape().to_vec(),
            });
        }
        Ok(Self { mu, sigma })
    }

    /// `μ = 0`, `σ = 1`.
    pub fn identity(shape: &[usize]) -> Self {
        Self {
            mu: Tensor::zeros(shape),
            sigma: Tensor::ones(shape),
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.mu.shape() {
            return Err(Error::ShapeMismatch {
                op: "affine coupling",
                lhs: x.shape().to_vec(),
                rhs: self.mu.shape().to_vec(),
            });
        }
        if self.sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidState("coupling scale must be strictly positive".into()));
        }
        Ok(())
    }
}

/// `z = (x - μ)/σ` with `log|det| = -Σ log σ` per leading index.
pub fn affine_forward(x: &Tensor, p: &CouplingParams) -> Result<(Tensor, Vec<f64>)> {
    p.check(x)?;
    let z = x.zip_map(&p.mu, |x, m| x - m)?.zip_map(&p.sigma, |d, s| d / s)?;
    let w = x.row_len();
    let logdet = p
        .sigma
        .data()
        .chunks(w.max(1))
        .map(|c| -c.iter().map(|s| s.ln()).sum::<f64>())
        .collect();
    Ok((z, logdet))
}

/// `x = z σ + μ`.
pub fn affine_inverse(z: &Tensor, p: &CouplingParams) -> Result<Tensor> {
    p.check(z)?;
    z.zip_map(&p.sigma, |z, s| z * s)?.zip_map(&p.mu, |v, m| v + m)
}

/// Coupling outputs recorded on a tape; `sigma` and `log_sigma` describe the
/// same scale but are carried separately so neither is recomputed from the
/// other.
#[derive(Clone, Copy, Debug)]
pub struct CouplingVars<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    pub log_sigma: Var<'t>,
}

impl<'t> CouplingVars<'t> {
    /// `σ = exp(raw)` with `raw` already clamped.
    pub fn from_raw(mu: Var<'t>, raw: Var<'t>) -> Self {
        Self {
            mu,
            sigma: raw.exp(),
            log_sigma: raw,
        }
    }

    pub fn values(&self) -> Result<CouplingParams> {
        CouplingParams::new(self.mu.value(), self.sigma.value())
    }
}
