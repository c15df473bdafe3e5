//! Correspondence maps from descriptor correlation.
//!
//! For a keypoint descriptor q (unit norm) and a descriptor map L2, the
//! rectified correlation grid is H[i,j] = max(0, q . L2[i,j]); softmax over
//! the whole grid turns it into a spatial probability map that concentrates
//! on the best-correlating location. Stacking the maps of all keypoints of
//! one view gives a correspondence set; concatenating the sets of m views
//! (view-major) gives the multi-view set.
//!
//! Maps are computed per keypoint in parallel, but each map's reduction
//! runs in a fixed row-major order, so results are bit-identical no matter
//! how work is scheduled.

use crate::descriptor::{DescriptorError, DescriptorMap};
use rayon::prelude::*;
use thiserror::Error;

/// Sum-to-one tolerance for correspondence maps.
pub const MAP_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("dimension mismatch: descriptor has {descriptor}, map stores {map}")]
    DimensionMismatch { descriptor: usize, map: usize },
    #[error("keypoint {id} at ({x}, {y}) is outside the descriptor map")]
    KeypointOutOfBounds { id: usize, x: f64, y: f64 },
    #[error("keypoint list is empty")]
    EmptySet,
    #[error("map {index} has shape {got}, expected {expected}")]
    InconsistentShape {
        index: usize,
        got: String,
        expected: String,
    },
    #[error("correspondence map entries sum to {0}, expected 1 within 1e-6")]
    NotNormalized(f64),
    #[error("correspondence map contains a non-positive or non-finite entry")]
    InvalidEntry,
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

/// Softmax-normalized h x w probability map for one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    keypoint_id: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl CorrespondenceMap {
    /// Validates the probability-map invariants: strictly positive finite
    /// entries summing to 1 within 1e-6.
    pub fn new(
        keypoint_id: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, CorrespondenceError> {
        if data.len() != height * width {
            return Err(CorrespondenceError::InconsistentShape {
                index: keypoint_id,
                got: format!("{} values", data.len()),
                expected: format!("{height}x{width}"),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CorrespondenceError::InvalidEntry);
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > MAP_SUM_TOL {
            return Err(CorrespondenceError::NotNormalized(sum));
        }
        Ok(Self {
            keypoint_id,
            height,
            width,
            data,
        })
    }

    pub fn keypoint_id(&self) -> usize {
        self.keypoint_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear interpolation of the probability surface.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        Some(
            self.at(y0, x0) * (1.0 - tx) * (1.0 - ty)
                + self.at(y0, x1) * tx * (1.0 - ty)
                + self.at(y1, x0) * (1.0 - tx) * ty
                + self.at(y1, x1) * tx * ty,
        )
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Rectified correlation of one keypoint descriptor against every location
/// of a descriptor map: H[i,j] = max(0, q . L2[i,j]).
pub fn hadamard(
    keypoint_descriptor: &[f64],
    map: &DescriptorMap,
) -> Result<Vec<f64>, CorrespondenceError> {
    if keypoint_descriptor.len() != map.dim() {
        return Err(CorrespondenceError::DimensionMismatch {
            descriptor: keypoint_descriptor.len(),
            map: map.dim(),
        });
    }
    let d = map.dim();
    let out = map
        .data()
        .chunks(d)
        .map(|cell| {
            let dot: f64 = keypoint_descriptor
                .iter()
                .zip(cell)
                .map(|(a, b)| a * b)
                .sum();
            dot.max(0.0)
        })
        .collect();
    Ok(out)
}

/// Softmax over the whole grid, computed with max-subtraction. The
/// summation runs in row-major order so the result is reproducible.
pub fn softmax_map(
    keypoint_id: usize,
    height: usize,
    width: usize,
    grid: &[f64],
) -> Result<CorrespondenceMap, CorrespondenceError> {
    if grid.len() != height * width {
        return Err(CorrespondenceError::InconsistentShape {
            index: keypoint_id,
            got: format!("{} values", grid.len()),
            expected: format!("{height}x{width}"),
        });
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(CorrespondenceError::InvalidEntry);
    }
    let max = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = grid.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = data.iter().sum();
    for v in data.iter_mut() {
        *v /= sum;
    }
    CorrespondenceMap::new(keypoint_id, height, width, data)
}

/// Ordered stack of correspondence maps for one (view, query) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    maps: Vec<CorrespondenceMap>,
}

impl CorrespondenceSet {
    pub fn new(maps: Vec<CorrespondenceMap>) -> Result<Self, CorrespondenceError> {
        if maps.is_empty() {
            return Err(CorrespondenceError::EmptySet);
        }
        let (h, w) = (maps[0].height(), maps[0].width());
        for (i, m) in maps.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(CorrespondenceError::InconsistentShape {
                    index: i,
                    got: format!("{}x{}", m.height(), m.width()),
                    expected: format!("{h}x{w}"),
                });
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[CorrespondenceMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn height(&self) -> usize {
        self.maps[0].height()
    }

    pub fn width(&self) -> usize {
        self.maps[0].width()
    }
}

/// Computes the correspondence set of image-1 keypoints against image 2.
///
/// Each keypoint samples L1 bilinearly at its (possibly sub-pixel)
/// location, correlates against all of L2, and softmax-normalizes. Output
/// order follows the input keypoint order. Parallel over keypoints;
/// bit-identical to the sequential computation.
pub fn correspondence_set(
    map1: &DescriptorMap,
    keypoints: &[(usize, f64, f64)],
    map2: &DescriptorMap,
) -> Result<CorrespondenceSet, CorrespondenceError> {
    if keypoints.is_empty() {
        return Err(CorrespondenceError::EmptySet);
    }
    if map1.dim() != map2.dim() {
        return Err(CorrespondenceError::DimensionMismatch {
            descriptor: map1.dim(),
            map: map2.dim(),
        });
    }
    let maps = keypoints
        .par_iter()
        .map(|&(id, x, y)| {
            let descriptor = map1.sample(x, y).map_err(|_| {
                CorrespondenceError::KeypointOutOfBounds { id, x, y }
            })?;
            let grid = hadamard(&descriptor, map2)?;
            softmax_map(id, map2.height(), map2.width(), &grid)
        })
        .collect::<Result<Vec<_>, CorrespondenceError>>()?;
    CorrespondenceSet::new(maps)
}

/// View-major concatenation of per-view correspondence sets: channel
/// index = view * N + keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewCorrespondenceSet {
    views: usize,
    keypoints_per_view: usize,
    maps: Vec<CorrespondenceMap>,
}

impl MultiViewCorrespondenceSet {
    pub fn from_parts(
        views: usize,
        keypoints_per_view: usize,
        maps: Vec<CorrespondenceMap>,
    ) -> Result<Self, CorrespondenceError> {
        if views == 0 || keypoints_per_view == 0 || maps.len() != views * keypoints_per_view {
            return Err(CorrespondenceError::InconsistentShape {
                index: 0,
                got: format!("{} maps", maps.len()),
                expected: format!("{views} views x {keypoints_per_view} keypoints"),
            });
        }
        let (h, w) = (maps[0].height(), maps[0].width());
        for (i, m) in maps.iter().enumerate() {
            if m.height() != h || m.width() != w {
                return Err(CorrespondenceError::InconsistentShape {
                    index: i,
                    got: format!("{}x{}", m.height(), m.width()),
                    expected: format!("{h}x{w}"),
                });
            }
        }
        Ok(Self {
            views,
            keypoints_per_view,
            maps,
        })
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn keypoints_per_view(&self) -> usize {
        self.keypoints_per_view
    }

    pub fn channels(&self) -> usize {
        self.maps.len()
    }

    pub fn height(&self) -> usize {
        self.maps[0].height()
    }

    pub fn width(&self) -> usize {
        self.maps[0].width()
    }

    pub fn maps(&self) -> &[CorrespondenceMap] {
        &self.maps
    }

    pub fn channel(&self, view: usize, keypoint: usize) -> &CorrespondenceMap {
        &self.maps[view * self.keypoints_per_view + keypoint]
    }
}

/// Concatenates per-view sets in view order. All sets must share keypoint
/// count and spatial shape.
pub fn fuse_views(
    sets: &[CorrespondenceSet],
) -> Result<MultiViewCorrespondenceSet, CorrespondenceError> {
    if sets.is_empty() {
        return Err(CorrespondenceError::EmptySet);
    }
    let n = sets[0].len();
    let (h, w) = (sets[0].height(), sets[0].width());
    for (i, s) in sets.iter().enumerate() {
        if s.len() != n || s.height() != h || s.width() != w {
            return Err(CorrespondenceError::InconsistentShape {
                index: i,
                got: format!("{} maps of {}x{}", s.len(), s.height(), s.width()),
                expected: format!("{n} maps of {h}x{w}"),
            });
        }
    }
    let maps = sets
        .iter()
        .flat_map(|s| s.maps().iter().cloned())
        .collect();
    MultiViewCorrespondenceSet::from_parts(sets.len(), n, maps)
}
