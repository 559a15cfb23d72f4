//! One-shot reconstruction of a Gaussian head from image features and a mesh prior.

mod features;
mod model;
mod prior;

pub use features::{synthetic_features, GlobalFeature, LocalFeatureMap};
pub use model::{
    completion_branch, completion_on_tape, init_feature_plane, merge_vars, reconstruct,
    reconstruct_on_tape, visible_branch, visible_on_tape, FeaturePlane, PlanePlacement,
    ReconConfig, ReconInputs, ReconParams, ReconVars,
};
pub use prior::{PriorMesh, Region};
