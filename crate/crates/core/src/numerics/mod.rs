//! Dense-array math for the fixed actor/critic architecture.
//!
//! Everything here is value-level: no autodiff graph, just a hand-written
//! forward pass that records what the backward pass needs.

mod array;
mod gemm;
mod mlp;
mod optim;
mod rng;

pub use array::RealArray;
pub use mlp::{mlp_backward, mlp_forward, MlpGradients, MlpLayout, MlpParams, MlpTape, OutputHead};
pub use optim::{adam_step, clip_rows_to_unit_norm, clip_to_unit_norm, polyak_update, AdamConfig, AdamState};
pub use rng::Rng;

/// Stability constant inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Returns `Err(NonFinite)` if any entry of `data` is NaN or infinite.
pub(crate) fn ensure_finite(data: &[f64], what: &'static str) -> crate::Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(what))
    }
}
