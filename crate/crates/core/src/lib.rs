//! Weakly-supervised catheter segmentation in 3D frustum ultrasound.
//!
//! The pipeline stages are:
//!
//! 1. **volume** – dense 3D scalar/label volumes with a bit-exact binary container.
//! 2. **geometry** – frustum (polar) to Cartesian scan conversion and back.
//! 3. **phantom** – deterministic synthetic frustum generator (tube + speckle).
//! 4. **frangi** – multiscale 3D vesselness line filtering, the shape prior.
//! 5. **crf** – binary dense-CRF mean-field inference for pseudo-mask refinement.
//! 6. **network** – compact 3D CNN (classifier / localization / ROI decoder heads)
//!    with hand-rolled reverse-mode gradients and a FLOPs analyzer.
//! 7. **weaksup** – probability-map fusion, pseudo-label bootstrapping and the
//!    three-phase training schedule.
//! 8. **metrics** – Dice and volumetric-similarity evaluation.

pub mod crf;
pub mod frangi;
pub mod geometry;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod volume;
pub mod weaksup;

pub use volume::{BoundingBox3, CartesianVolume, FrustumVolume, MaskVolume};
