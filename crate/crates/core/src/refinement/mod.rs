//! Error-tolerant decoding: a query transformer refining semantic embeddings,
//! per-site gates weighting the edge and color features, the generator of
//! imprecise training pairs, and their training against a frozen denoiser.

pub mod pairs;
pub mod srm;
pub mod train;
pub mod vcm;

pub use pairs::{corrupt_semantic, ImprecisePairSet, PairsManifest};
pub use srm::{srm_loss, Srm, SRM_DIM, SRM_LAYERS, SRM_QUERIES};
pub use train::{srm_cosines, srm_win_rate, train_refinement, train_srm, RefineArch, RefineConfig};
pub use vcm::{Vcm, ALPHA_EPS, VCM_HIDDEN};
