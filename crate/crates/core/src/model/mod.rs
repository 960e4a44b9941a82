pub mod finetune;
pub mod fm;
pub mod ntm;
pub mod train;

pub use finetune::{aux_loss, finetune_init};
pub use fm::{FlowMatchModel, FmConfig, VelocityConfig, VelocityNet, FM_PREFIX};
pub use ntm::{NtmConfig, NtmModel};
pub use train::{FmRecord, FmTrainer, NtmTrainer, OptimConfig, StepRecord, TrainConfig, TrainMode};
