//! Multi-view keypoint correspondence toolkit for monocular object
//! viewpoint estimation.
//!
//! The pipeline works against a single 3D template model with annotated
//! keypoints. Rendered views of the template are matched against a query
//! image in descriptor space, producing one spatial correspondence map per
//! keypoint per view. The maps from all views are fused into a multi-view
//! correspondence set, from which the object pose (azimuth, elevation,
//! tilt) is decoded — here by an exhaustive grid-search estimator scoring
//! reprojected keypoints against the maps.
//!
//! Module map:
//! - [`geometry`]: Euler poses, rotation algebra, geodesic distance,
//!   pinhole keypoint projection, and the fixed multi-view schedule.
//! - [`template`]: the annotated 3D template model (keypoints + skeleton).
//! - [`skeleton`]: dense keypoint generation along skeleton edges,
//!   occlusion pruning, and correspondence pair sampling.
//! - [`descriptor`]: unit-normalized descriptor maps, the correspondence
//!   contrastive loss with analytic gradients, and a small trainable
//!   per-pixel descriptor head.
//! - [`correspondence`]: the rectified-correlation + softmax kernel that
//!   turns descriptors into correspondence maps, and multi-view fusion.
//! - [`pipeline`]: pairs rendered views with a query image and assembles
//!   the fused multi-view correspondence set.
//! - [`estimator`]: angle binning, the structure-aware classification
//!   loss, pose decoding, and the grid-search pose estimator.
//! - [`eval`]: viewpoint metrics (median error, accuracy at a threshold,
//!   average viewpoint precision).
//! - [`formats`]: the DMAP / FGRD / CSET binary tensor formats.
//! - [`synth`]: synthetic renders with oracle descriptors for closed-loop
//!   testing of the full pipeline.
//! - [`heatmap`]: PGM/PPM emission of correspondence maps.

pub mod correspondence;
pub mod descriptor;
pub mod pipeline;
pub mod estimator;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod heatmap;
pub mod skeleton;
pub mod synth;
pub mod template;
