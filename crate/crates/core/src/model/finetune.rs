//! Initialization of a trajectory model from a flow-matching backbone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::predictor::POSTERIOR_NET;
use crate::flow::PredictorKind;
use crate::gradcore::Tensor;
use crate::model::fm::{FlowMatchModel, FM_PREFIX};
use crate::model::ntm::{NtmConfig, NtmModel};

/// Builds a model whose predictor reproduces the backbone's Gaussian
/// posterior exactly: identity transporter, posterior-mapped mean, and a
/// zero log-scale correction. The backbone is also kept frozen as the
/// reference for the mean-alignment loss.
pub fn finetune_init<R: Rng + ?Sized>(fm: &FlowMatchModel, mut config: NtmConfig, rng: &mut R) -> Result<NtmModel> {
    if config.dim != fm.dim() {
        return Err(Error::invalid(format!(
            "backbone has dimension {}, model config has {}",
            fm.dim(),
            config.dim
        )));
    }
    config.cond = fm.config.net.cond;
    config.predictor = PredictorKind::Posterior {
        net: fm.config.net.clone(),
    };
    let mut model = NtmModel::new(config, rng)?;
    let prefix = format!("{FM_PREFIX}.");
    for (name, value) in fm.params.iter() {
        let local = name
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::InvalidState(format!("unexpected backbone parameter `{name}`")))?;
        let target = format!("{POSTERIOR_NET}.{local}");
        let id = model
            .params
            .id_of(&target)
            .ok_or_else(|| Error::InvalidState(format!("missing predictor parameter `{target}`")))?;
        *model.params.get_mut(id) = value.clone();
    }
    model.reference = Some(fm.clone());
    Ok(model)
}

/// Mean squared difference; zero for identical inputs.
pub fn aux_loss(mu_p: &Tensor, mu_fm: &Tensor) -> Result<f64> {
    Ok(mu_p.zip_map(mu_fm, |a, b| (a - b) * (a - b))?.mean())
}
