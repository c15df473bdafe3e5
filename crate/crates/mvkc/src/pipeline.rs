//! Glue between rendered template views and a query image: computes the
//! per-view correspondence sets at the template's projected keypoint
//! locations and fuses them into the multi-view set.

use crate::correspondence::{
    correspondence_set, fuse_views, softmax_map, CorrespondenceError, CorrespondenceMap,
    CorrespondenceSet, MultiViewCorrespondenceSet,
};
use crate::descriptor::DescriptorMap;
use crate::geometry::{project_keypoints, Camera, EulerPose, GeometryError};
use crate::template::Template;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("got {views} view descriptor maps for a schedule of {schedule}")]
    ViewCountMismatch { views: usize, schedule: usize },
    #[error("view {view} descriptor map is {got}, expected {expected} to match the query")]
    ViewShapeMismatch {
        view: usize,
        got: String,
        expected: String,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
}

/// Correspondence set of one rendered view against the query image.
///
/// Keypoints visible in the view correlate normally; keypoints the view
/// does not see (behind the camera or out of frame) contribute a uniform
/// map, keeping the channel layout intact without injecting fake evidence.
pub fn view_correspondence_set(
    view_descriptors: &DescriptorMap,
    view_pose: &EulerPose,
    query_descriptors: &DescriptorMap,
    template: &Template,
    camera: &Camera,
) -> Result<CorrespondenceSet, PipelineError> {
    let projections = project_keypoints(&template.keypoints, view_pose, camera)?;
    let scale_x = map_scale(view_descriptors.width(), camera.width);
    let scale_y = map_scale(view_descriptors.height(), camera.height);

    let visible: Vec<(usize, f64, f64)> = projections
        .iter()
        .enumerate()
        .filter(|(_, p)| p.visible)
        .map(|(k, p)| (k, p.x * scale_x, p.y * scale_y))
        .collect();
    let computed = if visible.is_empty() {
        None
    } else {
        Some(correspondence_set(
            view_descriptors,
            &visible,
            query_descriptors,
        )?)
    };

    let (h, w) = (query_descriptors.height(), query_descriptors.width());
    let uniform = vec![0.0; h * w];
    let mut maps: Vec<CorrespondenceMap> = Vec::with_capacity(template.keypoints.len());
    let mut from_computed = computed.as_ref().map(|s| s.maps().iter()).unwrap_or_default();
    for (k, projection) in projections.iter().enumerate() {
        if projection.visible {
            let map = from_computed.next().expect("one map per visible keypoint");
            maps.push(CorrespondenceMap::new(k, h, w, map.data().to_vec())?);
        } else {
            maps.push(softmax_map(k, h, w, &uniform)?);
        }
    }
    Ok(CorrespondenceSet::new(maps)?)
}

/// Pairs every rendered view with the query image and fuses the resulting
/// sets view-major. `views` must follow the schedule order.
pub fn multi_view_correspondence(
    query_descriptors: &DescriptorMap,
    views: &[DescriptorMap],
    schedule: &[EulerPose],
    template: &Template,
    camera: &Camera,
) -> Result<MultiViewCorrespondenceSet, PipelineError> {
    if views.len() != schedule.len() {
        return Err(PipelineError::ViewCountMismatch {
            views: views.len(),
            schedule: schedule.len(),
        });
    }
    let sets = views
        .iter()
        .zip(schedule)
        .map(|(view, pose)| {
            view_correspondence_set(view, pose, query_descriptors, template, camera)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fuse_views(&sets)?)
}

fn map_scale(map_extent: usize, camera_extent: u32) -> f64 {
    if map_extent == camera_extent as usize {
        1.0
    } else {
        (map_extent as f64 - 1.0).max(0.0) / (camera_extent as f64 - 1.0).max(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{viewpoint_schedule, Keypoint3D};
    use crate::synth::{build_world, synthesize_with_world, SynthConfig};

    fn toy_template() -> Template {
        Template::new(
            "toy",
            vec![
                Keypoint3D::new("a", 0.3, 0.0, -0.3),
                Keypoint3D::new("b", -0.3, 0.2, 0.3),
                Keypoint3D::new("c", 0.0, -0.35, 0.0),
            ],
            vec![
                ("a".to_string(), "b".to_string()),
                ("b".to_string(), "c".to_string()),
            ],
            vec![],
        )
        .unwrap()
    }

    fn toy_camera() -> Camera {
        Camera {
            focal: 60.0,
            cx: 24.0,
            cy: 24.0,
            distance: 3.0,
            height: 49,
            width: 49,
        }
    }

    #[test]
    fn multi_view_set_peaks_at_query_keypoints() {
        let template = toy_template();
        let camera = toy_camera();
        let config = SynthConfig::new(16, 1);
        let world = build_world(&template, &camera, 5, &config).unwrap();
        let schedule = viewpoint_schedule(2).unwrap();
        let views: Vec<DescriptorMap> = schedule
            .iter()
            .map(|pose| {
                synthesize_with_world(&world, &template, &camera, pose, &config, "view")
                    .unwrap()
                    .descriptors
            })
            .collect();
        let query_pose = EulerPose::new(75.0, 10.0, 0.0).unwrap();
        let query =
            synthesize_with_world(&world, &template, &camera, &query_pose, &config, "query")
                .unwrap();

        let mvk = multi_view_correspondence(
            &query.descriptors,
            &views,
            &schedule,
            &template,
            &camera,
        )
        .unwrap();
        assert_eq!(mvk.views(), 2);
        assert_eq!(mvk.keypoints_per_view(), 3);

        // Each channel's argmax should sit within a couple of pixels of the
        // query-image projection of its keypoint.
        let query_proj =
            crate::geometry::project_keypoints(&template.keypoints, &query_pose, &camera)
                .unwrap();
        for view in 0..2 {
            for (k, proj) in query_proj.iter().enumerate() {
                if !proj.visible {
                    continue;
                }
                let (ay, ax) = mvk.channel(view, k).argmax();
                let err = (ax as f64 - proj.x).hypot(ay as f64 - proj.y);
                assert!(
                    err <= 2.0,
                    "view {view} keypoint {k}: argmax ({ax}, {ay}) vs ({}, {})",
                    proj.x,
                    proj.y
                );
            }
        }
    }

    #[test]
    fn view_count_mismatch_is_rejected() {
        let template = toy_template();
        let camera = toy_camera();
        let config = SynthConfig::new(8, 0);
        let out = crate::synth::synthesize(
            &template,
            &camera,
            &EulerPose::new(0.0, 10.0, 0.0).unwrap(),
            1,
            &config,
            "x",
        )
        .unwrap();
        let schedule = viewpoint_schedule(2).unwrap();
        let result = multi_view_correspondence(
            &out.descriptors,
            std::slice::from_ref(&out.descriptors),
            &schedule,
            &template,
            &camera,
        );
        assert!(matches!(
            result,
            Err(PipelineError::ViewCountMismatch { .. })
        ));
    }
}
