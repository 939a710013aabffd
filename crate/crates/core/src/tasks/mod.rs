//! Desk-scale task instances: synthetic sparse coding, 1-D deconvolution and
//! 1-D layer separation, with their generators and quality metrics.

pub mod container;
pub mod deconv;
pub mod metrics;
pub mod separation;
pub mod sparse_coding;

pub use container::{Array, Container};
pub use deconv::{build_deconv_operator, gen_deconv, DeconvDefaults, DeconvInstance, DeconvTask, NetInit, NetSpec};
pub use metrics::{psnr, ssim};
pub use separation::{build_separation_operator, gen_separation, SeparationDefaults, SeparationInstance, SeparationTask};
pub use sparse_coding::{
    build_sparse_coding_operator, gen_sparse_coding, SparseCodingDefaults, SparseCodingInstance, SparseCodingTask,
    LADMM_TRAINABLE,
};

/// Generator behind every instance: ChaCha20 keyed by the seed, with
/// independent streams selected by stream id.
pub const PRNG_NAME: &str = "chacha20";
