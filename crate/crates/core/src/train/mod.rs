pub mod checkpoint;
pub mod iu;
pub mod loops;
pub mod metrics;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use iu::{mean_iu, IuAccumulator, IuReport};
pub use loops::{
    background_fraction, evaluate, predict_mask, pretrain_classifier, train, train_mil,
    train_step, Objective, TrainOptions, TrainOutcome,
};
pub use metrics::MetricsWriter;
pub use optim::{sgd_step, OptimHyper, OptimState};
