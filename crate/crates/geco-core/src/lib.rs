//! Optimal-transport soft assignment for geometry-aware feature matching.
//!
//! The crate is organized around a differentiable assignment pipeline:
//! patch features ([`features`]) are compared by cosine similarity into a
//! dustbin-augmented score matrix, marginal distributions are estimated from
//! masks and keypoint visibility ([`marginals`]), and a log-domain Sinkhorn
//! solver produces a transport plan ([`solver`]) in either balanced or
//! KL-relaxed unbalanced mode. A binary cross-entropy loss on sparse plan
//! entries and its analytic gradient through the unrolled iterations live in
//! [`loss`]; exact small-instance references and synthetic data generation in
//! [`exact`] and [`synth`]; matching metrics (PCK and its geometry-aware
//! decomposition) in [`matching`]; centroid-based part segmentation metrics in
//! [`segmentation`]; and a small linear-adapter trainer in [`trainer`].

pub mod error;
pub mod exact;
pub mod features;
pub mod loss;
pub mod marginals;
pub mod matching;
pub mod segmentation;
pub mod solver;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
