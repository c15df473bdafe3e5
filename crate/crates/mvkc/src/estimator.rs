//! Pose inference from a multi-view correspondence set.
//!
//! Angles are discretized into centered bins: azimuth and tilt bins wrap
//! around their 360-degree period with bin j centered at j * width, while
//! elevation bins tile [-90, 90] edge-to-edge. The classification loss is
//! a soft-label cross-entropy whose target weights decay exponentially
//! with the angular distance between bin centers.
//!
//! The built-in estimator needs no training: it scores every pose on a
//! hypothesis grid by projecting the template keypoints under that pose
//! and reading the fused correspondence maps at the projected locations.

use crate::correspondence::MultiViewCorrespondenceSet;
use crate::geometry::{
    euler_to_rotation, project_keypoints, Camera, EulerPose, GeometryError, Keypoint3D,
};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("angle {angle} outside the {kind:?} domain")]
    AngleOutOfDomain { angle: f64, kind: AngleKind },
    #[error("sigma must be > 0, got {0}")]
    InvalidSigma(f64),
    #[error("distribution sums to {0}, expected 1 within 1e-6")]
    NotNormalized(f64),
    #[error("ground-truth bin {bin} out of range for {bins} bins")]
    BinOutOfRange { bin: usize, bins: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "channel layout mismatch: set has {views} views x {keypoints} keypoints, \
         expected {expected_views} x {expected_keypoints}"
    )]
    LayoutMismatch {
        views: usize,
        keypoints: usize,
        expected_views: usize,
        expected_keypoints: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which Euler angle a binning discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AngleKind {
    /// Periodic over [0, 360).
    Azimuth,
    /// Bounded on [-90, 90].
    Elevation,
    /// Periodic over [-180, 180).
    Tilt,
}

/// Uniform binning of one angle. Azimuth/tilt bins are centered (bin j
/// covers [j*w - w/2, j*w + w/2) modulo the period); elevation bins tile
/// [-90, 90] with the last bin closed at 90.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleBinning {
    kind: AngleKind,
    bins: usize,
}

impl AngleBinning {
    pub fn new(kind: AngleKind, bins: usize) -> Result<Self, EstimatorError> {
        if bins < 2 {
            return Err(EstimatorError::InvalidBinning(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        Ok(Self { kind, bins })
    }

    pub fn kind(&self) -> AngleKind {
        self.kind
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> f64 {
        match self.kind {
            AngleKind::Azimuth | AngleKind::Tilt => 360.0 / self.bins as f64,
            AngleKind::Elevation => 180.0 / self.bins as f64,
        }
    }

    /// The representative angle of bin j.
    pub fn center(&self, bin: usize) -> f64 {
        let w = self.width();
        match self.kind {
            AngleKind::Azimuth => (bin as f64 * w).rem_euclid(360.0),
            AngleKind::Tilt => (bin as f64 * w + 180.0).rem_euclid(360.0) - 180.0,
            AngleKind::Elevation => -90.0 + (bin as f64 + 0.5) * w,
        }
    }

    /// Distance between bin centers in degrees: circular for the periodic
    /// angles, absolute for elevation.
    pub fn center_distance(&self, a: usize, b: usize) -> f64 {
        let w = self.width();
        match self.kind {
            AngleKind::Azimuth | AngleKind::Tilt => {
                let diff = ((a as f64 - b as f64) * w).rem_euclid(360.0);
                diff.min(360.0 - diff)
            }
            AngleKind::Elevation => (a as f64 - b as f64).abs() * w,
        }
    }
}

/// Maps an angle to its bin index under the centered-bin convention.
pub fn encode_bin(angle: f64, binning: &AngleBinning) -> Result<usize, EstimatorError> {
    if !angle.is_finite() {
        return Err(EstimatorError::AngleOutOfDomain {
            angle,
            kind: binning.kind,
        });
    }
    let w = binning.width();
    match binning.kind {
        AngleKind::Azimuth => {
            if !(0.0..360.0).contains(&angle) {
                return Err(EstimatorError::AngleOutOfDomain {
                    angle,
                    kind: binning.kind,
                });
            }
            let j = ((angle + w / 2.0).rem_euclid(360.0) / w).floor() as usize;
            Ok(j.min(binning.bins - 1))
        }
        AngleKind::Tilt => {
            if !(-180.0..180.0).contains(&angle) {
                return Err(EstimatorError::AngleOutOfDomain {
                    angle,
                    kind: binning.kind,
                });
            }
            let j = ((angle + w / 2.0).rem_euclid(360.0) / w).floor() as usize;
            Ok(j.min(binning.bins - 1))
        }
        AngleKind::Elevation => {
            if !(-90.0..=90.0).contains(&angle) {
                return Err(EstimatorError::AngleOutOfDomain {
                    angle,
                    kind: binning.kind,
                });
            }
            let j = ((angle + 90.0) / w).floor() as usize;
            Ok(j.min(binning.bins - 1))
        }
    }
}

/// Discrete probability vector over the bins of one angle.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleBinDistribution {
    probs: Vec<f64>,
}

impl AngleBinDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, EstimatorError> {
        if probs.len() < 2 {
            return Err(EstimatorError::InvalidBinning(format!(
                "distribution needs at least 2 bins, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EstimatorError::InvalidArgument(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EstimatorError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Lowest index among maximal entries.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Soft-target weights for the structure-aware loss: w_j proportional to
/// exp(-d(j, gt)/sigma) with d the bin-center distance in degrees.
pub fn geometric_aware_weights(
    gt_bin: usize,
    sigma: f64,
    binning: &AngleBinning,
) -> Result<Vec<f64>, EstimatorError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(EstimatorError::InvalidSigma(sigma));
    }
    if gt_bin >= binning.bins {
        return Err(EstimatorError::BinOutOfRange {
            bin: gt_bin,
            bins: binning.bins,
        });
    }
    let mut weights: Vec<f64> = (0..binning.bins)
        .map(|j| (-binning.center_distance(j, gt_bin) / sigma).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(weights)
}

/// Structure-aware classification loss and its gradient with respect to
/// pre-softmax scores: L = -sum_j w_j log p_j, dL/dscore = p - w.
pub fn geometric_aware_loss(
    pred: &AngleBinDistribution,
    gt_bin: usize,
    sigma: f64,
    binning: &AngleBinning,
) -> Result<(f64, Vec<f64>), EstimatorError> {
    if pred.len() != binning.bins {
        return Err(EstimatorError::InvalidBinning(format!(
            "prediction has {} bins, binning has {}",
            pred.len(),
            binning.bins
        )));
    }
    let weights = geometric_aware_weights(gt_bin, sigma, binning)?;
    let loss = -weights
        .iter()
        .zip(pred.probs())
        .map(|(w, p)| {
            if *w == 0.0 {
                0.0
            } else {
                w * p.max(f64::MIN_POSITIVE).ln()
            }
        })
        .sum::<f64>();
    let gradient = pred
        .probs()
        .iter()
        .zip(&weights)
        .map(|(p, w)| p - w)
        .collect();
    Ok((loss, gradient))
}

/// Picks the argmax bin center of each angle; ties break toward the
/// lowest index.
pub fn decode_pose(
    azimuth: &AngleBinDistribution,
    elevation: &AngleBinDistribution,
    tilt: &AngleBinDistribution,
    binning: &PoseBinning,
) -> Result<EulerPose, EstimatorError> {
    let az = binning.azimuth.center(azimuth.argmax());
    let el = binning.elevation.center(elevation.argmax());
    let ti = binning.tilt.center(tilt.argmax());
    Ok(EulerPose::new(az, el, ti)?)
}

/// The three per-angle binnings used by the estimator surface.
#[derive(Debug, Clone, Copy)]
pub struct PoseBinning {
    pub azimuth: AngleBinning,
    pub elevation: AngleBinning,
    pub tilt: AngleBinning,
}

impl PoseBinning {
    pub fn uniform(bins: usize) -> Result<Self, EstimatorError> {
        Ok(Self {
            azimuth: AngleBinning::new(AngleKind::Azimuth, bins)?,
            elevation: AngleBinning::new(AngleKind::Elevation, bins)?,
            tilt: AngleBinning::new(AngleKind::Tilt, bins)?,
        })
    }
}

/// Finite pose grid with per-hypothesis scores. Iteration order is
/// azimuth-major, then elevation, then tilt; ties in scoring resolve to
/// the first pose in this order.
#[derive(Debug, Clone)]
pub struct PoseHypothesisGrid {
    poses: Vec<EulerPose>,
    scores: Vec<f64>,
}

impl PoseHypothesisGrid {
    /// Builds the grid from an azimuth step and explicit elevation/tilt
    /// sets. Azimuth nodes are 0, step, 2*step, ... below 360.
    pub fn build(
        azimuth_step: f64,
        elevations: &[f64],
        tilts: &[f64],
    ) -> Result<Self, EstimatorError> {
        if azimuth_step <= 0.0 || !azimuth_step.is_finite() {
            return Err(EstimatorError::InvalidArgument(format!(
                "azimuth step must be > 0, got {azimuth_step}"
            )));
        }
        if elevations.is_empty() || tilts.is_empty() {
            return Err(EstimatorError::InvalidArgument(
                "elevation and tilt sets must be non-empty".into(),
            ));
        }
        let mut poses = Vec::new();
        let mut az = 0.0;
        while az < 360.0 {
            for &el in elevations {
                for &ti in tilts {
                    poses.push(EulerPose::new(az, el, ti)?);
                }
            }
            az += azimuth_step;
        }
        Ok(Self {
            scores: vec![0.0; poses.len()],
            poses,
        })
    }

    pub fn from_poses(poses: Vec<EulerPose>) -> Result<Self, EstimatorError> {
        if poses.is_empty() {
            return Err(EstimatorError::InvalidArgument(
                "pose grid must be non-empty".into(),
            ));
        }
        Ok(Self {
            scores: vec![0.0; poses.len()],
            poses,
        })
    }

    pub fn poses(&self) -> &[EulerPose] {
        &self.poses
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Text dump: one `az el ti score` line per hypothesis in grid order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (pose, score) in self.poses.iter().zip(&self.scores) {
            out.push_str(&format!(
                "{} {} {} {}\n",
                pose.azimuth(),
                pose.elevation(),
                pose.tilt(),
                score
            ));
        }
        out
    }
}

/// Anything that turns a multi-view correspondence set (plus, optionally,
/// the query image's own descriptor map) into per-angle distributions.
/// External learned heads plug in through this surface; the built-in
/// implementation is [`SearchEstimator`].
pub trait PoseEstimator {
    fn estimate(
        &self,
        mvk: &MultiViewCorrespondenceSet,
        query_descriptors: Option<&crate::descriptor::DescriptorMap>,
    ) -> Result<
        (
            AngleBinDistribution,
            AngleBinDistribution,
            AngleBinDistribution,
        ),
        EstimatorError,
    >;
}

/// The built-in non-learned estimator as a [`PoseEstimator`]: scores a
/// hypothesis grid against the correspondence maps. The optional query
/// descriptor map in the interface is accepted and ignored — it exists for
/// learned heads that fuse it as a second input.
pub struct SearchEstimator {
    pub template: Vec<Keypoint3D>,
    pub camera: Camera,
    pub grid: PoseHypothesisGrid,
    pub view_schedule: Vec<EulerPose>,
    pub config: SearchConfig,
}

impl PoseEstimator for SearchEstimator {
    fn estimate(
        &self,
        mvk: &MultiViewCorrespondenceSet,
        _query_descriptors: Option<&crate::descriptor::DescriptorMap>,
    ) -> Result<
        (
            AngleBinDistribution,
            AngleBinDistribution,
            AngleBinDistribution,
        ),
        EstimatorError,
    > {
        let outcome = search_estimate(
            mvk,
            &self.template,
            &self.camera,
            &self.grid,
            &self.view_schedule,
            &self.config,
        )?;
        Ok((outcome.azimuth, outcome.elevation, outcome.tilt))
    }
}

/// Configuration for [`search_estimate`].
#[derive(Debug, Clone, Copy)]
pub struct SearchConfig {
    /// Added inside the log so softmax tails never produce -inf.
    pub epsilon: f64,
    pub binning: PoseBinning,
}

impl SearchConfig {
    pub fn new(binning: PoseBinning) -> Self {
        Self {
            epsilon: 1e-9,
            binning,
        }
    }
}

/// Everything the grid search returns: the best pose, the scored grid, and
/// softmax distributions over the per-angle marginal max scores.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_pose: EulerPose,
    pub grid: PoseHypothesisGrid,
    pub azimuth: AngleBinDistribution,
    pub elevation: AngleBinDistribution,
    pub tilt: AngleBinDistribution,
}

/// Scores one hypothesis: mean of log(map value + epsilon) over the terms
/// (view, keypoint) where the keypoint is visible in that view's render
/// and its projection under the hypothesis lands inside the map. Poses
/// with no valid term score -inf.
fn score_pose(
    pose: &EulerPose,
    template: &[Keypoint3D],
    camera: &Camera,
    mvk: &MultiViewCorrespondenceSet,
    view_visibility: &[Vec<bool>],
    scale: (f64, f64),
    epsilon: f64,
) -> f64 {
    let rotation = euler_to_rotation(pose);
    let mut total = 0.0;
    let mut terms = 0usize;
    let (sx, sy) = scale;
    let offset = Vector3::new(0.0, 0.0, camera.distance);
    let projections: Vec<Option<(f64, f64)>> = template
        .iter()
        .map(|kp| {
            let cam_point = rotation.apply(&kp.position) + offset;
            if cam_point.z > 0.0 {
                let x = (camera.focal * cam_point.x / cam_point.z + camera.cx) * sx;
                let y = (camera.focal * cam_point.y / cam_point.z + camera.cy) * sy;
                Some((x, y))
            } else {
                None
            }
        })
        .collect();
    for (view, visibility) in view_visibility.iter().enumerate() {
        for (k, visible) in visibility.iter().enumerate() {
            if !visible {
                continue;
            }
            let Some((x, y)) = projections[k] else {
                continue;
            };
            let Some(value) = mvk.channel(view, k).sample(x, y) else {
                continue;
            };
            total += (value + epsilon).ln();
            terms += 1;
        }
    }
    if terms == 0 {
        f64::NEG_INFINITY
    } else {
        total / terms as f64
    }
}

/// Exhaustive pose search over a hypothesis grid.
///
/// The channel layout of `mvk` must match the schedule length times the
/// template keypoint count, with channel (view * N + k) holding keypoint
/// k's map from view `view`. Keypoints invisible in a view's render are
/// skipped, mirroring how occluded keypoints carry no reliable
/// correspondence.
pub fn search_estimate(
    mvk: &MultiViewCorrespondenceSet,
    template: &[Keypoint3D],
    camera: &Camera,
    grid: &PoseHypothesisGrid,
    view_schedule: &[EulerPose],
    config: &SearchConfig,
) -> Result<SearchOutcome, EstimatorError> {
    if grid.is_empty() {
        return Err(EstimatorError::InvalidArgument(
            "hypothesis grid is empty".into(),
        ));
    }
    if mvk.views() != view_schedule.len() || mvk.keypoints_per_view() != template.len() {
        return Err(EstimatorError::LayoutMismatch {
            views: mvk.views(),
            keypoints: mvk.keypoints_per_view(),
            expected_views: view_schedule.len(),
            expected_keypoints: template.len(),
        });
    }
    camera.validate()?;
    // Correspondence maps live at descriptor-map resolution; rescale
    // pixel-space projections when the map grid differs from the camera
    // image size.
    let axis_scale = |map_extent: usize, camera_extent: u32| {
        if map_extent == camera_extent as usize {
            1.0
        } else {
            (map_extent as f64 - 1.0).max(0.0) / (camera_extent as f64 - 1.0).max(1e-12)
        }
    };
    let scale = (
        axis_scale(mvk.width(), camera.width),
        axis_scale(mvk.height(), camera.height),
    );

    let view_visibility: Vec<Vec<bool>> = view_schedule
        .iter()
        .map(|view_pose| {
            Ok(project_keypoints(template, view_pose, camera)?
                .iter()
                .map(|p| p.visible)
                .collect())
        })
        .collect::<Result<_, EstimatorError>>()?;

    let scores: Vec<f64> = grid
        .poses()
        .par_iter()
        .map(|pose| {
            score_pose(
                pose,
                template,
                camera,
                mvk,
                &view_visibility,
                scale,
                config.epsilon,
            )
        })
        .collect();

    // Sequential argmax with strict improvement: lowest index wins ties.
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }

    let azimuth = marginal_distribution(grid.poses(), &scores, &config.binning.azimuth, |p| {
        p.azimuth()
    })?;
    let elevation =
        marginal_distribution(grid.poses(), &scores, &config.binning.elevation, |p| {
            p.elevation()
        })?;
    let tilt = marginal_distribution(grid.poses(), &scores, &config.binning.tilt, |p| p.tilt())?;

    let mut scored_grid = grid.clone();
    scored_grid.scores = scores;
    Ok(SearchOutcome {
        best_pose: scored_grid.poses[best],
        grid: scored_grid,
        azimuth,
        elevation,
        tilt,
    })
}

/// Softmax over per-bin maxima of the hypothesis scores. Bins hit by no
/// hypothesis stay at probability 0; if every score is -inf the
/// distribution falls back to uniform.
fn marginal_distribution(
    poses: &[EulerPose],
    scores: &[f64],
    binning: &AngleBinning,
    angle: impl Fn(&EulerPose) -> f64,
) -> Result<AngleBinDistribution, EstimatorError> {
    let mut max_scores = vec![f64::NEG_INFINITY; binning.bins()];
    for (pose, score) in poses.iter().zip(scores) {
        let bin = encode_bin(angle(pose), binning)?;
        if *score > max_scores[bin] {
            max_scores[bin] = *score;
        }
    }
    let peak = max_scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        let uniform = vec![1.0 / binning.bins() as f64; binning.bins()];
        return AngleBinDistribution::new(uniform);
    }
    let mut probs: Vec<f64> = max_scores
        .iter()
        .map(|s| {
            if *s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - peak).exp()
            }
        })
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    AngleBinDistribution::new(probs)
}
