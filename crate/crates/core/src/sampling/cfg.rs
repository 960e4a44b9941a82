//! Classifier-free guidance applied in closed form to Gaussian couplings.

use crate::error::{Error, Result};
use crate::flow::CouplingParams;

/// Guided `(μ, σ)` for one coordinate.
///
/// With `s = clip((σ_c/σ_u)², 0, 1)` the guided Gaussian has precision
/// `(1 + w - w s)/σ_c²` and mean `((1+w) μ_c - w s μ_u)/(1 + w - w s)`.
pub fn cfg_scalar(mu_c: f64, sigma_c: f64, mu_u: f64, sigma_u: f64, w: f64) -> (f64, f64) {
    if w == 0.0 {
        return (mu_c, sigma_c);
    }
    let s = ((sigma_c / sigma_u).powi(2)).clamp(0.0, 1.0);
    let denom = 1.0 + w - w * s;
    ((((1.0 + w) * mu_c) - w * s * mu_u) / denom, sigma_c / denom.sqrt())
}

/// Elementwise guidance of conditional parameters by unconditional ones.
pub fn cfg_combine(cond: &CouplingParams, uncond: &CouplingParams, w: f64) -> Result<CouplingParams> {
    if !(w >= 0.0) {
        return Err(Error::invalid(format!("guidance scale must be nonnegative, got {w}")));
    }
    if cond.mu.shape() != uncond.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: cond.mu.shape().to_vec(),
            rhs: uncond.mu.shape().to_vec(),
        });
    }
    let all_sigma = cond.sigma.data().iter().chain(uncond.sigma.data());
    if all_sigma.into_iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("guidance needs strictly positive scales"));
    }
    let mut mu = cond.mu.clone();
    let mut sigma = cond.sigma.clone();
    let (mc, sc) = (cond.mu.data(), cond.sigma.data());
    let (mu_u, su) = (uncond.mu.data(), uncond.sigma.data());
    for (i, (m, s)) in mu.data_mut().iter_mut().zip(sigma.data_mut()).enumerate() {
        (*m, *s) = cfg_scalar(mc[i], sc[i], mu_u[i], su[i], w);
    }
    CouplingParams::new(mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scales_give_linear_guidance() {
        let (m, s) = cfg_scalar(1.0, 0.3, 0.0, 0.3, 2.0);
        assert_eq!(m, 3.0);
        assert!((s - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sharp_conditional_keeps_its_mean() {
        let (m, s) = cfg_scalar(0.7, 1e-9, -4.0, 1.0, 3.0);
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - 1e-9 / 2.0).abs() < 1e-20);
    }

    #[test]
    fn negative_scale_is_rejected() {
        let p = CouplingParams::identity(&[1, 1]);
        assert!(cfg_combine(&p, &p, -1.0).unwrap_err().is_invalid_argument());
    }
}
