//! Voxel radiance fields trained together with an adaptable monocular depth
//! provider.
//!
//! The field learns from posed color images; the provider contributes
//! relative depth that is aligned patch by patch with scale-shift least
//! squares, gated by cross-view confidence masks, and in turn adapted toward
//! the field's multi-view-consistent geometry.

pub mod ablation;
pub mod align;
pub mod camera;
pub mod confidence;
pub mod dataset;
pub mod field;
pub mod maps;
pub mod metrics;
pub mod optim;
pub mod provider;
pub mod render;
pub mod scene;
pub mod trainer;
