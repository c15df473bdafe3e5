//! The annotated 3D template model: named keypoints, skeleton edges, and
//! optional per-category visibility requirements.
//!
//! File format (JSON):
//!
//! ```json
//! {
//!   "name": "chair",
//!   "keypoints": [ { "name": "leg_front_left", "xyz": [x, y, z] }, ... ],
//!   "skeleton": [ ["leg_front_left", "seat_front_left"], ... ],
//!   "required_visible": ["seat_front_left"]
//! }
//! ```
//!
//! `required_visible` is optional; images in which any listed keypoint is
//! invisible are skipped during correspondence pair generation.

use crate::geometry::Keypoint3D;
use crate::skeleton::{SkeletonError, SkeletonSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate keypoint name `{0}`")]
    DuplicateKeypoint(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("required-visible keypoint `{0}` is not a template keypoint")]
    UnknownRequiredKeypoint(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateFile {
    name: String,
    keypoints: Vec<TemplateKeypoint>,
    skeleton: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    required_visible: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateKeypoint {
    name: String,
    xyz: [f64; 3],
}

/// An annotated template model, validated on construction.
#[derive(Debug, Clone)]
pub struct Template {
    pub name: String,
    pub keypoints: Vec<Keypoint3D>,
    pub skeleton: SkeletonSpec,
    pub required_visible: Vec<String>,
}

impl Template {
    pub fn new(
        name: impl Into<String>,
        keypoints: Vec<Keypoint3D>,
        edges: Vec<(String, String)>,
        required_visible: Vec<String>,
    ) -> Result<Self, TemplateError> {
        let mut seen = HashSet::new();
        for kp in &keypoints {
            if !seen.insert(kp.name.clone()) {
                return Err(TemplateError::DuplicateKeypoint(kp.name.clone()));
            }
        }
        let skeleton = SkeletonSpec::new(edges, &seen)?;
        for name in &required_visible {
            if !seen.contains(name) {
                return Err(TemplateError::UnknownRequiredKeypoint(name.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            keypoints,
            skeleton,
            required_visible,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let file: TemplateFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let keypoints = file
            .keypoints
            .into_iter()
            .map(|k| Keypoint3D::new(k.name, k.xyz[0], k.xyz[1], k.xyz[2]))
            .collect();
        Template::new(file.name, keypoints, file.skeleton, file.required_visible)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TemplateError> {
        let file = TemplateFile {
            name: self.name.clone(),
            keypoints: self
                .keypoints
                .iter()
                .map(|k| TemplateKeypoint {
                    name: k.name.clone(),
                    xyz: [k.position.x, k.position.y, k.position.z],
                })
                .collect(),
            skeleton: self.skeleton.edges().to_vec(),
            required_visible: self.required_visible.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn keypoint_names(&self) -> Vec<&str> {
        self.keypoints.iter().map(|k| k.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let kps = vec![
            Keypoint3D::new("a", 0.0, 0.0, 0.0),
            Keypoint3D::new("a", 1.0, 0.0, 0.0),
        ];
        assert!(matches!(
            Template::new("t", kps, vec![], vec![]),
            Err(TemplateError::DuplicateKeypoint(_))
        ));
    }

    #[test]
    fn unknown_edge_endpoint_rejected() {
        let kps = vec![Keypoint3D::new("a", 0.0, 0.0, 0.0)];
        let edges = vec![("a".to_string(), "missing".to_string())];
        assert!(matches!(
            Template::new("t", kps, edges, vec![]),
            Err(TemplateError::Skeleton(_))
        ));
    }

    #[test]
    fn roundtrips_through_json() {
        let kps = vec![
            Keypoint3D::new("a", 0.0, 0.5, 0.0),
            Keypoint3D::new("b", 1.0, -0.5, 0.25),
        ];
        let edges = vec![("a".to_string(), "b".to_string())];
        let t = Template::new("toy", kps, edges, vec!["a".to_string()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        t.save(&path).unwrap();
        let back = Template::load(&path).unwrap();
        assert_eq!(back.name, "toy");
        assert_eq!(back.keypoints, t.keypoints);
        assert_eq!(back.skeleton.edges(), t.skeleton.edges());
        assert_eq!(back.required_visible, t.required_visible);
    }
}
