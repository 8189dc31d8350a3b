//! Evidential fusion toolkit for semi-supervised volumetric segmentation.
//!
//! The crate is organised as a pipeline of small, mostly pure stages:
//!
//! - [`tensor_io`]: dense voxel grids and NPY v1.0 file I/O.
//! - [`evidence`]: Dirichlet evidence to basic probability assignments.
//! - [`fusion`]: the two-source probability-assignment fusion rule.
//! - [`uncertainty`]: entropy-scaled uncertainty of fused assignments.
//! - [`vwal`]: uncertainty ranking and the epoch-dependent voxel weights.
//! - [`mixing`]: box-mask copy-paste mixing and restoration.
//! - [`trainer`]: a small teacher/student trainer on synthetic volumes.

pub mod error;
pub mod evidence;
pub mod fusion;
pub mod mixing;
pub mod tensor_io;
pub mod trainer;
pub mod uncertainty;
pub mod vwal;

pub use error::{Error, ErrorKind, Result};
pub use evidence::{
    belief_to_probability, evidence_to_belief, renormalize, BeliefAssignment, BeliefVolume,
};
pub use fusion::{fuse_volumes, ipaf_fuse, FusionConfig};
pub use mixing::{generate_mask, mix_pair, restore_predictions, MixMask, MixedPair};
pub use tensor_io::{load_labels, load_tensor, save_labels, save_tensor, LabelGrid, VoxelGrid};
pub use uncertainty::{fused_uncertainty, uncertainty_volume, EntropyMode, UncertaintyVolume};
pub use vwal::{dynamic_weight, rank_voxels, weighted_loss, RankMap, RankOrder, WeightSchedule};
