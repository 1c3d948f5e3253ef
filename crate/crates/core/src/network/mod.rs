//! Group-wise residual backbones and sampling-based branch augmentation.
//!
//! A branch attached after group `g` of a `G`-group backbone receives one
//! residual block per deeper group `g+1..=G`, each copying that group's
//! width and first-block stride. The branch therefore downsamples exactly
//! like the backbone and ends with the same feature width, so every
//! classifier's pre-FC feature vector is comparable with the deepest one.

mod checkpoint;
mod flops;
mod model;
mod spec;

pub use checkpoint::{Checkpoint, ManifestEntry};
pub use flops::{conv_macs, linear_macs};
pub use model::{
    ExitOutput, ExitWalker, ForwardOutput, Mode, MultiExitNetwork, NormUpdate, RunningStats, NORM_EPS,
    NORM_MOMENTUM,
};
pub use spec::{validate_attach_points, ArchConfig, BackboneSpec, BlockShape, BranchSpec, GroupSpec, StemSpec};
