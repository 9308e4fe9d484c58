//! MiTA (Mixture of Top-k Activations) attention.
//!
//! Landmark queries pooled from the sequence compress the key-value cache
//! into a shared expert and, via their top-k activated keys, carve it into
//! `m` deformable experts. Each query attends to the shared expert plus the
//! one expert it is routed to, so the per-query cost is `m + k` instead of
//! `N`.
//!
//! Alongside the mechanism itself the crate carries the reference oracles
//! (dense attention, its fast-weight MLP form, the compression-only and
//! route-only variants), closed-form backward passes, a small transformer
//! training harness on synthetic recall tasks, and diagnostics.

pub mod attention;
pub mod bench;
pub mod checks;
pub mod diag;
pub mod error;
pub mod grad;
pub mod math;
pub mod mechanism;
pub mod mita;
pub mod train;

pub use attention::{fast_weight_mlp, full_attention, multi_head, AttentionInput};
pub use error::{MitaError, Result};
pub use math::{Mat, Rng, Scalar};
pub use mechanism::Mechanism;
pub use mita::{mita_attention, MitaConfig};
