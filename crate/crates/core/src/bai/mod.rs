//! Bidirectional autoencoder intertwining: voxel and representation
//! autoencoders whose decoders are swapped through two translators, with
//! per-subject bias modulation around the shared voxel path.

pub mod adapt;
pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod model;
pub mod train;

pub use adapt::{adapt_new_subject, saliency_objective, voxel_saliency, SaliencyTarget};
pub use checkpoint::{BaiManifest, ModelEntry};
pub use eval::{score_all, score_subject, SubjectScores};
pub use loss::{loss_total, CycleReduction, Lambdas, LossGraph, TERM_NAMES};
pub use model::{BaiArch, BaiModel, RepBatch, Reps, Sbmm, Site, Variant, D_LAT};
pub use train::{fit, train_bai, BaiBundle, Batch, LossHistory, TrainOutcome, TrainingConfig};
