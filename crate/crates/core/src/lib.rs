//! Open-world recognition engine.
//!
//! Classifies instances among known classes, rejects instances of unseen
//! classes, and grows a cascade of one-class classifiers so each detected
//! class is learned without retraining earlier nodes. The root node is a
//! dense multi-class network whose activations are revised through per-class
//! Weibull calibration before accept/reject; each leaf node is a one-class
//! feature network with a distance threshold around its class center.

pub mod cascade;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod evt;
pub mod leaf;
pub mod nn;
pub mod openmax;
pub mod tensor;

pub use cascade::{CascadeModel, Instance, ReferenceSet, StageTransition};
pub use config::RunConfig;
pub use data::Dataset;
pub use error::{Error, Result};
pub use eval::{StageReport, StreamSchedule};
pub use evt::WeibullModel;
pub use leaf::{Buffer, LeafModel};
pub use openmax::{Decision, RootModel};
pub use tensor::Tensor;

/// Label value reserved for "unknown class".
pub const UNKNOWN_LABEL: u32 = 0;

/// Derives an independent stream seed from a master seed and a role tag.
///
/// Splitmix64 over the master seed xored with an FNV-1a hash of the tag:
/// stable across platforms and releases.
pub(crate) fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
