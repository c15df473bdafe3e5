//! Synthetic renders with oracle descriptors.
//!
//! A synthetic render replaces the RGB image + descriptor CNN with a
//! directly constructed descriptor map: every dense keypoint id owns a
//! fixed random unit d-vector, stamped (bilinearly splatted) at the
//! keypoint's projected sub-pixel location over a low-similarity
//! background. Background vectors are rejection-sampled to correlate at
//! most [`SynthConfig::background_max_dot`] with every keypoint vector, so
//! the correlation argmax is unambiguous.
//!
//! The keypoint vector table and the background depend only on the seed
//! (and template/config), not on the pose, so renders of different views
//! share the same oracle descriptors — which is exactly what makes the
//! closed pipeline loop work.

use crate::descriptor::{DescriptorError, DescriptorMap, FeatureGrid, LinearDescriptorHead};
use crate::geometry::{project_keypoints, Camera, EulerPose, GeometryError};
use crate::skeleton::{
    densify, interpolate_dense_values, prune, AnnotationKeypoint, AnnotationRecord, PruneConfig,
    SkeletonError, SparseKeypoints2D,
};
use crate::template::Template;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Standard normal sample via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform random unit vector in d dimensions.
pub fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random affine head with N(0, scale^2) weights and zero bias; the usual
/// starting point for descriptor training.
pub fn random_head(
    channels: usize,
    dim: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LinearDescriptorHead, DescriptorError> {
    let weight: Vec<f64> = (0..channels * dim).map(|_| scale * gaussian(rng)).collect();
    LinearDescriptorHead::new(channels, dim, weight, vec![0.0; dim])
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Descriptor dimensionality d.
    pub dim: usize,
    pub samples_per_edge: usize,
    /// Occlusion pruning applied before stamping, when set.
    pub prune: Option<PruneConfig>,
    /// Magnitude of the per-render descriptor corruption: each stamped
    /// vector becomes normalize(v + noise * u) for a random unit u.
    pub noise: f64,
    /// Seed for the noise stream, independent of the base-descriptor seed
    /// so different renders can share the vector table but not the noise.
    pub noise_seed: u64,
    /// Maximum allowed correlation between background cells and any
    /// keypoint vector.
    pub background_max_dot: f64,
}

impl SynthConfig {
    pub fn new(dim: usize, samples_per_edge: usize) -> Self {
        Self {
            dim,
            samples_per_edge,
            prune: None,
            noise: 0.0,
            noise_seed: 0,
            background_max_dot: 0.3,
        }
    }
}

/// One synthetic render: the oracle feature grid (identical values to the
/// descriptor map, so the identity head reproduces it), the descriptor
/// map, and the dense keypoint annotation.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub features: FeatureGrid,
    pub descriptors: DescriptorMap,
    pub annotation: AnnotationRecord,
}

/// The fixed id -> unit-vector table for a template at a given density.
pub fn oracle_descriptor_table(
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    (0..count).map(|_| random_unit_vector(rng, dim)).collect()
}

/// The pose-independent half of a synthetic scene: the dense-id descriptor
/// table and the background grid. Built once per (template, camera, seed,
/// config) and reusable across any number of renders.
#[derive(Debug, Clone)]
pub struct OracleWorld {
    pub table: Vec<Vec<f64>>,
    background: Vec<f64>,
    height: usize,
    width: usize,
    dim: usize,
}

/// Draws the descriptor table and a low-correlation background.
pub fn build_world(
    template: &Template,
    camera: &Camera,
    seed: u64,
    config: &SynthConfig,
) -> Result<OracleWorld, SynthError> {
    if config.dim == 0 {
        return Err(SynthError::InvalidArgument(
            "descriptor dimension must be >= 1".into(),
        ));
    }
    camera.validate()?;
    let (h, w, d) = (camera.height as usize, camera.width as usize, config.dim);
    let dense_count = template.keypoints.len()
        + template.skeleton.edges().len() * config.samples_per_edge;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = oracle_descriptor_table(dense_count, d, &mut rng);
    let mut background = vec![0.0f64; h * w * d];
    for cell in 0..h * w {
        let vector = loop {
            let candidate = random_unit_vector(&mut rng, d);
            let clash = table.iter().any(|v| {
                v.iter().zip(&candidate).map(|(a, b)| a * b).sum::<f64>()
                    > config.background_max_dot
            });
            if !clash {
                break candidate;
            }
        };
        background[cell * d..(cell + 1) * d].copy_from_slice(&vector);
    }
    Ok(OracleWorld {
        table,
        background,
        height: h,
        width: w,
        dim: d,
    })
}

/// Renders the template at `pose` into an oracle descriptor map.
///
/// Deterministic given (template, camera, pose, seed, config). The base
/// keypoint vectors and the background are drawn before anything
/// pose-dependent, so they are shared across renders with the same seed.
pub fn synthesize(
    template: &Template,
    camera: &Camera,
    pose: &EulerPose,
    seed: u64,
    config: &SynthConfig,
    image_label: &str,
) -> Result<SynthOutput, SynthError> {
    let world = build_world(template, camera, seed, config)?;
    synthesize_with_world(&world, template, camera, pose, config, image_label)
}

/// Renders against a prebuilt [`OracleWorld`]; only stamping and
/// projection happen here.
pub fn synthesize_with_world(
    world: &OracleWorld,
    template: &Template,
    camera: &Camera,
    pose: &EulerPose,
    config: &SynthConfig,
    image_label: &str,
) -> Result<SynthOutput, SynthError> {
    camera.validate()?;
    let (h, w, d) = (world.height, world.width, world.dim);
    if h != camera.height as usize || w != camera.width as usize || d != config.dim {
        return Err(SynthError::InvalidArgument(format!(
            "world shape {h}x{w}x{d} does not match camera {}x{} and dim {}",
            camera.height, camera.width, config.dim
        )));
    }
    let mut grid = world.background.clone();
    let table = &world.table;

    // Pose-dependent part: project, densify, prune, stamp.
    let projections = project_keypoints(&template.keypoints, pose, camera)?;
    let sparse = SparseKeypoints2D::from_projections(&projections)?;
    let depths: Vec<f64> = projections.iter().map(|p| p.depth).collect();
    let dense = densify(&sparse, &template.skeleton, config.samples_per_edge)?;
    let dense_depths =
        interpolate_dense_values(&sparse, &depths, &template.skeleton, config.samples_per_edge)?;

    let mut visible: Vec<bool> = dense.points().iter().map(|p| p.visible).collect();
    if let Some(policy) = &config.prune {
        let survivors = prune(&dense, &dense_depths, policy)?;
        let mut keep = vec![false; dense.len()];
        for p in survivors.points() {
            keep[p.dense_id] = true;
        }
        for (v, k) in visible.iter_mut().zip(&keep) {
            *v = *v && *k;
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let mut stamp_accum = vec![0.0f64; h * w * d];
    let mut stamp_weight = vec![0.0f64; h * w];
    for (point, is_visible) in dense.points().iter().zip(&visible) {
        if !is_visible {
            continue;
        }
        let vector = if config.noise > 0.0 {
            let direction = random_unit_vector(&mut noise_rng, d);
            let mixed: Vec<f64> = table[point.dense_id]
                .iter()
                .zip(&direction)
                .map(|(v, u)| v + config.noise * u)
                .collect();
            let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
            mixed.into_iter().map(|x| x / norm).collect()
        } else {
            table[point.dense_id].clone()
        };
        let x0 = point.x.floor() as usize;
        let y0 = point.y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let tx = point.x - x0 as f64;
        let ty = point.y - y0 as f64;
        for (pixel, weight) in [
            (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
            (y0 * w + x1, tx * (1.0 - ty)),
            (y1 * w + x0, (1.0 - tx) * ty),
            (y1 * w + x1, tx * ty),
        ] {
            if weight == 0.0 {
                continue;
            }
            stamp_weight[pixel] += weight;
            for (slot, v) in stamp_accum[pixel * d..(pixel + 1) * d]
                .iter_mut()
                .zip(&vector)
            {
                *slot += weight * v;
            }
        }
    }
    // Cells touched by any keypoint carry only keypoint signal (weighted
    // blend across colliding keypoints); the background survives only in
    // untouched cells. Normalization later restores unit length, so a cell
    // splatted by a single keypoint holds that keypoint's vector exactly.
    for pixel in 0..h * w {
        if stamp_weight[pixel] == 0.0 {
            continue;
        }
        grid[pixel * d..(pixel + 1) * d]
            .copy_from_slice(&stamp_accum[pixel * d..(pixel + 1) * d]);
    }

    let features = FeatureGrid::new(h, w, d, grid.clone())?;
    let descriptors = DescriptorMap::normalize(h, w, d, grid)?;
    let annotation = AnnotationRecord {
        image: image_label.to_string(),
        pose: pose.as_array(),
        bbox: None,
        difficult: None,
        keypoints: dense
            .points()
            .iter()
            .zip(&visible)
            .map(|(p, v)| AnnotationKeypoint {
                name: None,
                dense_id: Some(p.dense_id),
                xy: [p.x, p.y],
                visible: *v,
            })
            .collect(),
    };
    Ok(SynthOutput {
        features,
        descriptors,
        annotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Keypoint3D;
    use approx::assert_abs_diff_eq;

    fn toy_template() -> Template {
        Template::new(
            "toy",
            vec![
                Keypoint3D::new("origin", 0.0, 0.0, 0.0),
                Keypoint3D::new("tip", 0.5, 0.0, 0.0),
            ],
            vec![("origin".to_string(), "tip".to_string())],
            vec![],
        )
        .unwrap()
    }

    fn toy_camera() -> Camera {
        Camera {
            focal: 40.0,
            cx: 12.0,
            cy: 12.0,
            distance: 4.0,
            height: 25,
            width: 25,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let template = toy_template();
        let camera = toy_camera();
        let pose = EulerPose::new(25.0, 10.0, 0.0).unwrap();
        let config = SynthConfig::new(8, 2);
        let a = synthesize(&template, &camera, &pose, 7, &config, "img").unwrap();
        let b = synthesize(&template, &camera, &pose, 7, &config, "img").unwrap();
        let bits = |m: &DescriptorMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.descriptors), bits(&b.descriptors));
        assert_eq!(a.annotation, b.annotation);
        let c = synthesize(&template, &camera, &pose, 8, &config, "img").unwrap();
        assert_ne!(bits(&a.descriptors), bits(&c.descriptors));
    }

    #[test]
    fn origin_keypoint_is_annotated_at_principal_point() {
        let template = toy_template();
        let camera = toy_camera();
        let pose = EulerPose::new(123.0, 10.0, 0.0).unwrap();
        let out = synthesize(&template, &camera, &pose, 1, &SynthConfig::new(8, 0), "img")
            .unwrap();
        let origin = &out.annotation.keypoints[0];
        assert_abs_diff_eq!(origin.xy[0], camera.cx, epsilon = 1e-9);
        assert_abs_diff_eq!(origin.xy[1], camera.cy, epsilon = 1e-9);
        assert!(origin.visible);
    }

    #[test]
    fn descriptor_map_has_unit_norms() {
        let out = synthesize(
            &toy_template(),
            &toy_camera(),
            &EulerPose::new(40.0, 10.0, 0.0).unwrap(),
            3,
            &SynthConfig::new(6, 1),
            "img",
        )
        .unwrap();
        for cell in out.descriptors.data().chunks(6) {
            let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn background_respects_correlation_cap() {
        let template = toy_template();
        let camera = toy_camera();
        let pose = EulerPose::new(0.0, 10.0, 0.0).unwrap();
        let config = SynthConfig::new(12, 1);
        let out = synthesize(&template, &camera, &pose, 5, &config, "img").unwrap();

        // Rebuild the table the same way to check background cells.
        let dense_count = 2 + template.skeleton.edges().len() * config.samples_per_edge;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = oracle_descriptor_table(dense_count, config.dim, &mut rng);

        // Collect stamped pixels to exclude them.
        let mut stamped = std::collections::HashSet::new();
        for kp in &out.annotation.keypoints {
            if !kp.visible {
                continue;
            }
            let x0 = kp.xy[0].floor() as usize;
            let y0 = kp.xy[1].floor() as usize;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                stamped.insert((y0 + dy).min(24) * 25 + (x0 + dx).min(24));
            }
        }
        for cell in 0..25 * 25 {
            if stamped.contains(&cell) {
                continue;
            }
            let vec = &out.descriptors.data()[cell * 12..(cell + 1) * 12];
            for v in &table {
                let dot: f64 = vec.iter().zip(v).map(|(a, b)| a * b).sum();
                assert!(
                    dot <= config.background_max_dot + 1e-9,
                    "background cell {cell} correlates {dot}"
                );
            }
        }
    }

    #[test]
    fn views_share_the_descriptor_table() {
        let template = toy_template();
        let camera = toy_camera();
        let config = SynthConfig::new(8, 1);
        let a = synthesize(
            &template,
            &camera,
            &EulerPose::new(0.0, 10.0, 0.0).unwrap(),
            11,
            &config,
            "a",
        )
        .unwrap();
        let b = synthesize(
            &template,
            &camera,
            &EulerPose::new(120.0, 10.0, 0.0).unwrap(),
            11,
            &config,
            "b",
        )
        .unwrap();
        // Sample each render at the tip keypoint; the descriptors should
        // correlate strongly because they come from the same table entry.
        let tip_a = &a.annotation.keypoints[1];
        let tip_b = &b.annotation.keypoints[1];
        assert!(tip_a.visible && tip_b.visible);
        let da = a.descriptors.sample(tip_a.xy[0], tip_a.xy[1]).unwrap();
        let db = b.descriptors.sample(tip_b.xy[0], tip_b.xy[1]).unwrap();
        let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
        assert!(dot > 0.8, "cross-view keypoint correlation too weak: {dot}");
    }

    #[test]
    fn degenerate_pose_errors() {
        let template = Template::new(
            "behind",
            vec![Keypoint3D::new("b", 0.0, 0.0, -9.0)],
            vec![],
            vec![],
        )
        .unwrap();
        let camera = toy_camera();
        let result = synthesize(
            &template,
            &camera,
            &EulerPose::new(0.0, 0.0, 0.0).unwrap(),
            1,
            &SynthConfig::new(4, 0),
            "img",
        );
        assert!(matches!(
            result,
            Err(SynthError::Geometry(GeometryError::DegeneratePose))
        ));
    }
}
