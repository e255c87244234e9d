//! Adversarial multi-task training of the memory network.

mod adam;
mod checkpoint;
mod discriminator;
mod loss;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use discriminator::{DiscLayout, Discriminator};
pub use loss::{d_loss, g_loss, GLoss, LossWeights};
pub use trainer::{
    objective_grad_check, train, write_loss_csv, LossRecord, Objective, TrainConfig, DIVERGENCE_LIMIT,
};
