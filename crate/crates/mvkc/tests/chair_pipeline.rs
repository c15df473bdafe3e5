//! Integration tests on the chair fixture: occlusion pruning against a
//! brute-force oracle, score dominance of the true pose, and bit-exact
//! file round trips of the fused correspondence set.

use mvkc::correspondence::MultiViewCorrespondenceSet;
use mvkc::estimator::{search_estimate, PoseBinning, PoseHypothesisGrid, SearchConfig};
use mvkc::formats::{read_correspondence_set, write_correspondence_set};
use mvkc::geometry::{project_keypoints, viewpoint_schedule, Camera, EulerPose};
use mvkc::pipeline::multi_view_correspondence;
use mvkc::skeleton::{
    densify, interpolate_dense_values, prune, PruneConfig, SparseKeypoints2D,
};
use mvkc::synth::{build_world, synthesize_with_world, SynthConfig};
use mvkc::template::Template;

fn chair() -> Template {
    Template::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/chair.json"
    ))
    .unwrap()
}

fn camera() -> Camera {
    Camera::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/camera.json"
    ))
    .unwrap()
}

// Side-on chair: the near-side leg samples occlude the far-side ones. The
// pruned set must match an independent all-pairs occlusion check, and the
// occlusion must actually fire.
#[test]
fn chair_side_view_pruning_matches_all_pairs_oracle() {
    let template = chair();
    let camera = camera();
    let pose = EulerPose::new(90.0, 10.0, 0.0).unwrap();
    let projections = project_keypoints(&template.keypoints, &pose, &camera).unwrap();
    let sparse = SparseKeypoints2D::from_projections(&projections).unwrap();
    let depths: Vec<f64> = projections.iter().map(|p| p.depth).collect();
    let dense = densify(&sparse, &template.skeleton, 3).unwrap();
    let dense_depths =
        interpolate_dense_values(&sparse, &depths, &template.skeleton, 3).unwrap();
    let policy = PruneConfig::default();
    let pruned = prune(&dense, &dense_depths, &policy).unwrap();

    // Brute-force oracle over the raw tuples.
    let points = dense.points();
    let mut expected = Vec::new();
    for i in 0..points.len() {
        if !points[i].visible {
            continue;
        }
        let occluded = (0..points.len()).any(|j| {
            j != i
                && points[j].visible
                && dense_depths[j] < dense_depths[i] - policy.depth_margin
                && (points[j].x - points[i].x).hypot(points[j].y - points[i].y)
                    <= policy.radius_px
        });
        if !occluded {
            expected.push(points[i].dense_id);
        }
    }
    let got: Vec<usize> = pruned.points().iter().map(|p| p.dense_id).collect();
    assert_eq!(got, expected);
    assert!(
        pruned.len() < dense.len(),
        "side view should occlude far-side samples ({} of {} kept)",
        pruned.len(),
        dense.len()
    );
}

// With oracle descriptors and the exact ground-truth pose present in the
// grid, that pose must take the strictly highest score.
#[test]
fn exact_ground_truth_pose_dominates_the_grid() {
    let template = chair();
    let camera = camera();
    let config = SynthConfig::new(32, 3);
    let world = build_world(&template, &camera, 77, &config).unwrap();
    let schedule = viewpoint_schedule(3).unwrap();
    let views: Vec<_> = schedule
        .iter()
        .map(|pose| {
            synthesize_with_world(&world, &template, &camera, pose, &config, "view")
                .unwrap()
                .descriptors
        })
        .collect();
    let gt_pose = EulerPose::new(137.0, 10.0, 0.0).unwrap();
    let query =
        synthesize_with_world(&world, &template, &camera, &gt_pose, &config, "query").unwrap();
    let mvk =
        multi_view_correspondence(&query.descriptors, &views, &schedule, &template, &camera)
            .unwrap();

    // Grid: the ground truth plus the regular 5-degree nodes around it.
    let mut poses = vec![gt_pose];
    let mut azimuth = 0.0;
    while azimuth < 360.0 {
        poses.push(EulerPose::new(azimuth, 10.0, 0.0).unwrap());
        azimuth += 5.0;
    }
    let grid = PoseHypothesisGrid::from_poses(poses).unwrap();
    let outcome = search_estimate(
        &mvk,
        &template.keypoints,
        &camera,
        &grid,
        &schedule,
        &SearchConfig::new(PoseBinning::uniform(72).unwrap()),
    )
    .unwrap();
    assert_eq!(outcome.best_pose.as_array(), gt_pose.as_array());
    let scores = outcome.grid.scores();
    for (i, score) in scores.iter().enumerate().skip(1) {
        assert!(
            scores[0] > *score,
            "ground truth score {} not strictly above node {i} ({score})",
            scores[0]
        );
    }
}

// The fused set written to disk, read back, and re-fused from its
// single-view slices reproduces the in-memory maps bit for bit.
#[test]
fn fused_set_survives_disk_and_refusion_bitwise() {
    let template = chair();
    let camera = camera();
    let config = SynthConfig::new(16, 1);
    let world = build_world(&template, &camera, 3, &config).unwrap();
    let schedule = viewpoint_schedule(3).unwrap();
    let views: Vec<_> = schedule
        .iter()
        .map(|pose| {
            synthesize_with_world(&world, &template, &camera, pose, &config, "view")
                .unwrap()
                .descriptors
        })
        .collect();
    let query_pose = EulerPose::new(200.0, 10.0, 0.0).unwrap();
    let query =
        synthesize_with_world(&world, &template, &camera, &query_pose, &config, "query")
            .unwrap();
    let mvk =
        multi_view_correspondence(&query.descriptors, &views, &schedule, &template, &camera)
            .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps.cset");
    write_correspondence_set(&mvk, &path).unwrap();
    let reread = read_correspondence_set(&path).unwrap();

    // Re-fuse from per-view slices of the re-read set.
    let n = reread.keypoints_per_view();
    let maps = reread.maps().to_vec();
    let refused = MultiViewCorrespondenceSet::from_parts(reread.views(), n, maps).unwrap();

    // In-memory values are f64; the file stores f32. Writing both to disk
    // again must agree bit for bit.
    let path_a = dir.path().join("a.cset");
    let path_b = dir.path().join("b.cset");
    write_correspondence_set(&mvk, &path_a).unwrap();
    write_correspondence_set(&refused, &path_b).unwrap();
    assert_eq!(
        std::fs::read(&path_a).unwrap(),
        std::fs::read(&path_b).unwrap()
    );
    assert_eq!(reread.views(), 3);
    assert_eq!(n, template.keypoints.len());
}
