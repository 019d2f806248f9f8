//! Gradient-guided layer-wise quantization for small MLPs.
//!
//! The crate covers the whole pipeline: a dense linear-algebra kernel, a tanh
//! MLP that supplies calibration activations and per-sample output gradients,
//! plain and gradient-weighted grouped Hessians, scalar k-means baselines, the
//! LNQ alternating solver with its coordinate-descent engines, brute-force
//! oracles, and the on-disk formats used by the command-line tool.

pub mod checks;
pub mod error;
pub mod guidedquant;
pub mod hessian;
pub mod io;
pub mod linalg;
pub mod lnq;
pub mod model;
pub mod oracle;
pub mod quant;
pub mod scalar_quant;

pub use error::{Error, Result};
pub use guidedquant::{run_job, Method, QuantJob, QuantOutcome, QuantReport};
pub use hessian::{ChannelPartition, HessianKind, HessianSet};
pub use linalg::{CholeskyFactor, Matrix};
pub use lnq::{CdEngine, LnqConfig};
pub use model::{Dataset, LayerCalibration, LossKind, MlpModel};
pub use quant::{ChannelQuantState, Codebook, QuantizedLayer};

/// Derives a child seed from `seed` and a stream index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
