//! Multi-view pseudo-label refinement for monocular 3D object detection.
//!
//! The crate consumes per-frame noisy 3D detections, instance masks, depth
//! maps, and ego motion, builds object tracks with motion estimates, and
//! optimizes each detection's translation and size against silhouette,
//! photometric, depth, and prior losses rendered differentiably across
//! multiple views. It also ships the KITTI-format I/O, detection metrics,
//! and a deterministic synthetic-scene harness used to verify the pipeline.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod geom;
pub mod img;
pub mod kitti;
pub mod losses;
pub mod motion;
pub mod refine;
pub mod render;
pub mod shape;
pub mod synth;
