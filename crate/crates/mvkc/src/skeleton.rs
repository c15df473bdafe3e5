//! Dense keypoint generation along skeleton edges, occlusion pruning, and
//! correspondence pair sampling.
//!
//! Dense keypoints carry a canonical id scheme shared by every image of a
//! category: sparse keypoints first in declaration order, then the interior
//! samples of each skeleton edge in edge declaration order, then sample
//! order. The same (skeleton, samples-per-edge) pair therefore always maps
//! a given id to the same semantic point, which is what makes cross-image
//! positive pairs well defined.

use crate::geometry::ProjectedKeypoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton edge ({0}, {1}) is a self-loop")]
    SelfLoop(String, String),
    #[error("skeleton edge endpoint `{0}` is not a known keypoint")]
    UnknownEndpoint(String),
    #[error("duplicate keypoint name `{0}`")]
    DuplicateName(String),
    #[error("keypoint `{0}` has non-finite coordinates")]
    NonFiniteCoordinate(String),
    #[error("depth list length {got} does not match dense keypoint count {expected}")]
    DepthLengthMismatch { got: usize, expected: usize },
    #[error("no dense keypoint is visible in both images")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ordered sparse 2D keypoints with unique names and finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKeypoints2D {
    points: Vec<NamedKeypoint2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedKeypoint2D {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl SparseKeypoints2D {
    pub fn new(points: Vec<NamedKeypoint2D>) -> Result<Self, SkeletonError> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.name.clone()) {
                return Err(SkeletonError::DuplicateName(p.name.clone()));
            }
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(SkeletonError::NonFiniteCoordinate(p.name.clone()));
            }
        }
        Ok(Self { points })
    }

    pub fn from_projections(projections: &[ProjectedKeypoint]) -> Result<Self, SkeletonError> {
        Self::new(
            projections
                .iter()
                .map(|p| NamedKeypoint2D {
                    name: p.name.clone(),
                    x: p.x,
                    y: p.y,
                    visible: p.visible,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[NamedKeypoint2D] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Undirected skeleton edges over keypoint names; validated against the
/// keypoint name universe at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    edges: Vec<(String, String)>,
}

impl SkeletonSpec {
    pub fn new(
        edges: Vec<(String, String)>,
        universe: &HashSet<String>,
    ) -> Result<Self, SkeletonError> {
        for (a, b) in &edges {
            if a == b {
                return Err(SkeletonError::SelfLoop(a.clone(), b.clone()));
            }
            for end in [a, b] {
                if !universe.contains(end) {
                    return Err(SkeletonError::UnknownEndpoint(end.clone()));
                }
            }
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }
}

/// Densified keypoints with canonical contiguous ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKeypoints2D {
    points: Vec<DenseKeypoint2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseKeypoint2D {
    pub dense_id: usize,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl DenseKeypoints2D {
    pub fn points(&self) -> &[DenseKeypoint2D] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_points(points: Vec<DenseKeypoint2D>) -> Self {
        Self { points }
    }
}

/// Resolves each edge to (sparse index a, sparse index b), failing on
/// endpoints missing from the sparse set.
fn resolve_edges(
    sparse: &SparseKeypoints2D,
    skeleton: &SkeletonSpec,
) -> Result<Vec<(usize, usize)>, SkeletonError> {
    let index: HashMap<&str, usize> = sparse
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    skeleton
        .edges
        .iter()
        .map(|(a, b)| {
            let ia = *index
                .get(a.as_str())
                .ok_or_else(|| SkeletonError::UnknownEndpoint(a.clone()))?;
            let ib = *index
                .get(b.as_str())
                .ok_or_else(|| SkeletonError::UnknownEndpoint(b.clone()))?;
            Ok((ia, ib))
        })
        .collect()
}

/// Samples `samples_per_edge` interior points on each skeleton edge at
/// parameters t = j/(s+1), j = 1..s. Edge endpoints are not duplicated; an
/// interior point is visible iff both endpoints are visible.
pub fn densify(
    sparse: &SparseKeypoints2D,
    skeleton: &SkeletonSpec,
    samples_per_edge: usize,
) -> Result<DenseKeypoints2D, SkeletonError> {
    let edges = resolve_edges(sparse, skeleton)?;
    let mut points: Vec<DenseKeypoint2D> = sparse
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| DenseKeypoint2D {
            dense_id: i,
            x: p.x,
            y: p.y,
            visible: p.visible,
        })
        .collect();
    let mut next_id = sparse.len();
    for (ia, ib) in edges {
        let a = &sparse.points[ia];
        let b = &sparse.points[ib];
        for j in 1..=samples_per_edge {
            let t = j as f64 / (samples_per_edge + 1) as f64;
            points.push(DenseKeypoint2D {
                dense_id: next_id,
                x: a.x + t * (b.x - a.x),
                y: a.y + t * (b.y - a.y),
                visible: a.visible && b.visible,
            });
            next_id += 1;
        }
    }
    Ok(DenseKeypoints2D { points })
}

/// Interpolates a per-sparse-point scalar (typically depth) onto the dense
/// id scheme, using the same edge traversal as [`densify`].
pub fn interpolate_dense_values(
    sparse: &SparseKeypoints2D,
    values: &[f64],
    skeleton: &SkeletonSpec,
    samples_per_edge: usize,
) -> Result<Vec<f64>, SkeletonError> {
    if values.len() != sparse.len() {
        return Err(SkeletonError::DepthLengthMismatch {
            got: values.len(),
            expected: sparse.len(),
        });
    }
    let edges = resolve_edges(sparse, skeleton)?;
    let mut out = values.to_vec();
    for (ia, ib) in edges {
        for j in 1..=samples_per_edge {
            let t = j as f64 / (samples_per_edge + 1) as f64;
            out.push(values[ia] + t * (values[ib] - values[ia]));
        }
    }
    Ok(out)
}

/// Occlusion pruning policy: a point is marked invisible when another
/// point that is visible in the input projects within `radius_px` of it at
/// strictly smaller depth by `depth_margin`.
#[derive(Debug, Clone, Copy)]
pub struct PruneConfig {
    pub radius_px: f64,
    pub depth_margin: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            radius_px: 4.0,
            depth_margin: 1e-3,
        }
    }
}

/// Drops occluded and already-invisible points. Occluders are evaluated
/// against input visibility, so a point that is itself occluded still
/// shadows points behind it (single-pass semantics).
pub fn prune(
    dense: &DenseKeypoints2D,
    depths: &[f64],
    policy: &PruneConfig,
) -> Result<DenseKeypoints2D, SkeletonError> {
    if depths.len() != dense.len() {
        return Err(SkeletonError::DepthLengthMismatch {
            got: depths.len(),
            expected: dense.len(),
        });
    }
    let pts = &dense.points;
    let survivors = pts
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            if !p.visible {
                return false;
            }
            let occluded = pts.iter().enumerate().any(|(j, q)| {
                j != *i
                    && q.visible
                    && depths[j] < depths[*i] - policy.depth_margin
                    && (q.x - p.x).hypot(q.y - p.y) <= policy.radius_px
            });
            !occluded
        })
        .map(|(_, p)| p.clone())
        .collect();
    Ok(DenseKeypoints2D { points: survivors })
}

/// One training pair: a location in image 1, a location in image 2, and a
/// binary correspondence label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencePair {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub positive: bool,
}

/// Batch of positive/negative correspondence pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondencePairBatch {
    pub pairs: Vec<CorrespondencePair>,
}

impl CorrespondencePairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.positive).count()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), SkeletonError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for pair in &self.pairs {
            serde_json::to_writer(&mut out, pair)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, SkeletonError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut pairs = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line)?);
        }
        Ok(Self { pairs })
    }
}

/// Negative sampling configuration for [`make_pairs`]. `width`/`height`
/// bound the uniform sampling domain in image 2; negatives closer than
/// `min_negative_distance` pixels to the true correspondence are
/// rejection-resampled.
#[derive(Debug, Clone, Copy)]
pub struct PairConfig {
    pub negatives_per_positive: usize,
    pub min_negative_distance: f64,
    pub width: u32,
    pub height: u32,
}

impl PairConfig {
    pub fn new(negatives_per_positive: usize, width: u32, height: u32) -> Self {
        Self {
            negatives_per_positive,
            min_negative_distance: 8.0,
            width,
            height,
        }
    }
}

/// Builds one positive pair per dense id visible in both images, plus
/// uniformly sampled negatives for each positive. Deterministic given the
/// seed.
pub fn make_pairs(
    image1: &DenseKeypoints2D,
    image2: &DenseKeypoints2D,
    config: &PairConfig,
    rng_seed: u64,
) -> Result<CorrespondencePairBatch, SkeletonError> {
    if config.width < 1 || config.height < 1 {
        return Err(SkeletonError::InvalidArgument(
            "pair sampling domain must be at least 1x1".into(),
        ));
    }
    let by_id: HashMap<usize, &DenseKeypoint2D> = image2
        .points
        .iter()
        .filter(|p| p.visible)
        .map(|p| (p.dense_id, p))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pairs = Vec::new();
    for p1 in image1.points.iter().filter(|p| p.visible) {
        let Some(p2) = by_id.get(&p1.dense_id) else {
            continue;
        };
        pairs.push(CorrespondencePair {
            a: [p1.x, p1.y],
            b: [p2.x, p2.y],
            positive: true,
        });
        for _ in 0..config.negatives_per_positive {
            let neg = loop {
                let x = rng.gen_range(0.0..=(config.width - 1) as f64);
                let y = rng.gen_range(0.0..=(config.height - 1) as f64);
                if (x - p2.x).hypot(y - p2.y) >= config.min_negative_distance {
                    break [x, y];
                }
            };
            pairs.push(CorrespondencePair {
                a: [p1.x, p1.y],
                b: neg,
                positive: false,
            });
        }
    }
    if pairs.is_empty() {
        return Err(SkeletonError::EmptyBatch);
    }
    Ok(CorrespondencePairBatch { pairs })
}

/// Checks a per-template visibility requirement: returns false when any
/// required keypoint is missing or invisible, in which case the image
/// should be skipped for pair generation.
pub fn required_visible_satisfied(sparse: &SparseKeypoints2D, required: &[String]) -> bool {
    required.iter().all(|name| {
        sparse
            .points
            .iter()
            .any(|p| &p.name == name && p.visible)
    })
}

/// One image's keypoint annotation record, stored as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub image: String,
    /// (azimuth, elevation, tilt) in degrees.
    pub pose: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficult: Option<bool>,
    pub keypoints: Vec<AnnotationKeypoint>,
}

/// One keypoint in an annotation record, addressed by name (sparse
/// annotations) or dense id (densified annotations).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationKeypoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_id: Option<usize>,
    pub xy: [f64; 2],
    pub visible: bool,
}

impl AnnotationRecord {
    pub fn sparse_keypoints(&self) -> Result<SparseKeypoints2D, SkeletonError> {
        let points = self
            .keypoints
            .iter()
            .map(|k| {
                let name = k.name.clone().ok_or_else(|| {
                    SkeletonError::InvalidArgument(
                        "annotation keypoint is missing a name".into(),
                    )
                })?;
                Ok(NamedKeypoint2D {
                    name,
                    x: k.xy[0],
                    y: k.xy[1],
                    visible: k.visible,
                })
            })
            .collect::<Result<Vec<_>, SkeletonError>>()?;
        SparseKeypoints2D::new(points)
    }

    pub fn dense_keypoints(&self) -> Result<DenseKeypoints2D, SkeletonError> {
        let points = self
            .keypoints
            .iter()
            .map(|k| {
                let dense_id = k.dense_id.ok_or_else(|| {
                    SkeletonError::InvalidArgument(
                        "annotation keypoint is missing a dense_id".into(),
                    )
                })?;
                Ok(DenseKeypoint2D {
                    dense_id,
                    x: k.xy[0],
                    y: k.xy[1],
                    visible: k.visible,
                })
            })
            .collect::<Result<Vec<_>, SkeletonError>>()?;
        Ok(DenseKeypoints2D { points })
    }
}

pub fn save_annotations(
    records: &[AnnotationRecord],
    path: impl AsRef<Path>,
) -> Result<(), SkeletonError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, SkeletonError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
