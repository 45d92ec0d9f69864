//! Desk-scale implementation of landmark-guided-knowledge navigation.
//!
//! The crate is organized around the moving parts of the method:
//!
//! - [`tensor`] — dense rank-≤3 tensors with reverse-mode autodiff, the
//!   substrate every neural module runs on.
//! - [`kb`] — construction and persistence of the aligned description /
//!   noun-list knowledge stores.
//! - [`matching`] — embedding providers and top-k cosine retrieval that
//!   binds view sub-regions to knowledge entries.
//! - [`env`] — the discrete graph-world simulator: scenes, observations,
//!   topological-map bookkeeping, teacher oracle, episode execution.
//! - [`model`] — the LGK network: instruction/panorama/topo encoders, the
//!   KGL and KGDA blocks, local/global branches, and dynamic fusion.
//! - [`metrics`] — NE / SR / OSR / SPL / RGS / RGSPL, per episode and
//!   aggregated.
//! - [`train`] — seeded imitation training against the shortest-path
//!   teacher.
//! - [`fixtures`] — generator for the planted-correlation training suite
//!   used by the learnability checks.

pub mod env;
pub mod fixtures;
pub mod kb;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
