//! Subcommand implementations.

use crate::config::{resolve, resolve_required, PipelineConfig};
use crate::error::CliError;
use mvkc::correspondence::MultiViewCorrespondenceSet;
use mvkc::descriptor::{train_head, TrainItem, TrainOptions};
use mvkc::estimator::{
    search_estimate, PoseBinning, PoseHypothesisGrid, SearchConfig, SearchOutcome,
};
use mvkc::eval::{
    detection_metrics, pose_metrics, BoundingBox, Detection, GroundTruthObject, PoseRecord,
};
use mvkc::formats::{
    read_correspondence_set, read_descriptor_map, read_feature_grid, write_correspondence_set,
    write_descriptor_map, write_feature_grid,
};
use mvkc::geometry::{viewpoint_schedule, Camera, EulerPose};
use mvkc::heatmap::{write_pgm, write_ppm};
use mvkc::pipeline::multi_view_correspondence;
use mvkc::skeleton::{
    densify, load_annotations, make_pairs, save_annotations, AnnotationKeypoint,
    AnnotationRecord, CorrespondencePairBatch, PairConfig, PruneConfig,
};
use mvkc::synth::{synthesize, SynthConfig};
use mvkc::template::Template;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn load_template(
    flag: Option<PathBuf>,
    config: &PipelineConfig,
) -> Result<Template, CliError> {
    let path = resolve_required(flag, config.template.clone(), "template")?;
    Ok(Template::load(path)?)
}

fn load_camera(flag: Option<PathBuf>, config: &PipelineConfig) -> Result<Camera, CliError> {
    let path = resolve_required(flag, config.camera.clone(), "camera")?;
    Ok(Camera::load(path)?)
}

pub fn schedule(views: Option<usize>, config: &PipelineConfig) -> Result<(), CliError> {
    let m = resolve(views, config.views, 3);
    let poses = viewpoint_schedule(m).map_err(|e| CliError::usage(e.to_string()))?;
    for pose in poses {
        println!("{} {} {}", pose.azimuth(), pose.elevation(), pose.tilt());
    }
    Ok(())
}

fn parse_pose(text: &str) -> Result<EulerPose, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::usage(format!(
            "pose must be \"az,el,ti\", got `{text}`"
        )));
    }
    let values: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| CliError::usage(format!("pose component `{p}` is not a number")))
        })
        .collect::<Result<_, _>>()?;
    Ok(EulerPose::new(values[0], values[1], values[2])?)
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    template: Option<PathBuf>,
    camera: Option<PathBuf>,
    pose_text: &str,
    out_prefix: &Path,
    seed: Option<u64>,
    samples_per_edge: Option<usize>,
    dim: Option<usize>,
    noise: Option<f64>,
    noise_seed: Option<u64>,
    prune: bool,
    config: &PipelineConfig,
) -> Result<(), CliError> {
    let template = load_template(template, config)?;
    let camera = load_camera(camera, config)?;
    let pose = parse_pose(pose_text)?;
    let seed = resolve(seed, config.seed, 0);
    let mut synth_config = SynthConfig::new(
        resolve(dim, config.dim, 32),
        resolve(samples_per_edge, config.samples_per_edge, 3),
    );
    synth_config.noise = resolve(noise, config.noise, 0.0);
    synth_config.noise_seed = noise_seed.unwrap_or(seed);
    if prune {
        synth_config.prune = Some(PruneConfig::default());
    }
    let label = out_prefix.to_string_lossy().to_string();
    let output = synthesize(&template, &camera, &pose, seed, &synth_config, &label)?;
    write_feature_grid(&output.features, path_with_ext(out_prefix, "fgrd"))?;
    write_descriptor_map(&output.descriptors, path_with_ext(out_prefix, "dmap"))?;
    save_annotations(
        std::slice::from_ref(&output.annotation),
        path_with_ext(out_prefix, "json"),
    )?;
    Ok(())
}

fn path_with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

pub fn densify_cmd(
    template: Option<PathBuf>,
    annotations: &Path,
    samples_per_edge: Option<usize>,
    out: &Path,
    config: &PipelineConfig,
) -> Result<(), CliError> {
    let template = load_template(template, config)?;
    let samples = resolve(samples_per_edge, config.samples_per_edge, 3);
    let records = load_annotations(annotations)?;
    if records.is_empty() {
        return Err(CliError::usage("annotation file contains no records"));
    }
    let mut dense_records = Vec::with_capacity(records.len());
    for record in &records {
        let sparse = record.sparse_keypoints()?;
        let dense = densify(&sparse, &template.skeleton, samples)?;
        dense_records.push(AnnotationRecord {
            image: record.image.clone(),
            pose: record.pose,
            bbox: record.bbox,
            difficult: record.difficult,
            keypoints: dense
                .points()
                .iter()
                .map(|p| AnnotationKeypoint {
                    name: None,
                    dense_id: Some(p.dense_id),
                    xy: [p.x, p.y],
                    visible: p.visible,
                })
                .collect(),
        });
    }
    save_annotations(&dense_records, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn pairs(
    file_a: PathBuf,
    file_b: PathBuf,
    camera: Option<PathBuf>,
    template: Option<PathBuf>,
    negatives: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    config: &PipelineConfig,
) -> Result<(), CliError> {
    let camera = load_camera(camera, config)?;
    let records_a = load_annotations(&file_a)?;
    let records_b = load_annotations(&file_b)?;
    if records_a.len() != records_b.len() || records_a.is_empty() {
        return Err(CliError::usage(format!(
            "annotation files must pair record-for-record; got {} and {} records",
            records_a.len(),
            records_b.len()
        )));
    }
    // The per-category visibility requirement maps required names onto
    // the canonical dense ids (sparse keypoints come first, in template
    // declaration order).
    let required_ids: Vec<usize> = match resolve(template, config.template.clone(), PathBuf::new())
    {
        p if p.as_os_str().is_empty() => Vec::new(),
        p => {
            let template = Template::load(p)?;
            template
                .required_visible
                .iter()
                .filter_map(|name| {
                    template
                        .keypoints
                        .iter()
                        .position(|k| &k.name == name)
                })
                .collect()
        }
    };
    let negatives = resolve(negatives, config.negatives, 3);
    let seed = resolve(seed, config.seed, 0);
    let pair_config = PairConfig::new(negatives, camera.width, camera.height);
    let mut batch = CorrespondencePairBatch::default();
    for (index, (a, b)) in records_a.iter().zip(&records_b).enumerate() {
        let dense_a = a.dense_keypoints()?;
        let dense_b = b.dense_keypoints()?;
        let satisfied = |dense: &mvkc::skeleton::DenseKeypoints2D| {
            required_ids.iter().all(|id| {
                dense
                    .points()
                    .iter()
                    .any(|p| p.dense_id == *id && p.visible)
            })
        };
        if !satisfied(&dense_a) || !satisfied(&dense_b) {
            continue; // image misses a required keypoint
        }
        let item = make_pairs(&dense_a, &dense_b, &pair_config, seed.wrapping_add(index as u64))?;
        batch.pairs.extend(item.pairs);
    }
    if batch.is_empty() {
        return Err(CliError::usage(
            "no correspondence pairs were generated (no common visible keypoints)",
        ));
    }
    batch.save_jsonl(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_head_cmd(
    features_a: &Path,
    features_b: &Path,
    pairs: &Path,
    dim: Option<usize>,
    steps: usize,
    learning_rate: f64,
    margin: Option<f64>,
    seed: Option<u64>,
    out: &Path,
    trace_out: Option<&Path>,
    config: &PipelineConfig,
) -> Result<(), CliError> {
    use rand::SeedableRng;
    let grid_a = read_feature_grid(features_a)?;
    let grid_b = read_feature_grid(features_b)?;
    let batch = CorrespondencePairBatch::load_jsonl(pairs)?;
    if batch.is_empty() {
        return Err(CliError::usage("pair file contains no pairs"));
    }
    let dim = resolve(dim, config.dim, 16);
    let seed = resolve(seed, config.seed, 0);
    let margin = resolve(margin, config.margin, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = mvkc::synth::random_head(grid_a.channels(), dim, 0.3, &mut rng)?;
    let item = TrainItem {
        features1: grid_a,
        features2: grid_b,
        batch,
    };
    let outcome = train_head(
        &head,
        std::slice::from_ref(&item),
        &TrainOptions {
            steps,
            learning_rate,
            margin,
            rng_seed: seed,
        },
    )?;
    std::fs::write(out, serde_json::to_string_pretty(&outcome.head).unwrap())?;
    if let Some(path) = trace_out {
        std::fs::write(path, serde_json::to_string(&outcome.trace).unwrap())?;
    }
    println!(
        "initial loss {} final loss {}",
        outcome.trace.first().unwrap(),
        outcome.trace.last().unwrap()
    );
    Ok(())
}

pub fn corrmap(
    query: &Path,
    views: &[PathBuf],
    template: Option<PathBuf>,
    camera: Option<PathBuf>,
    out: &Path,
    config: &PipelineConfig,
) -> Result<(), CliError> {
    if views.is_empty() {
        return Err(CliError::usage("at least one view descriptor map is required"));
    }
    let template = load_template(template, config)?;
    let camera = load_camera(camera, config)?;
    let query_map = read_descriptor_map(query)?;
    let view_maps = views
        .iter()
        .map(read_descriptor_map)
        .collect::<Result<Vec<_>, _>>()?;
    let schedule =
        viewpoint_schedule(view_maps.len()).map_err(|e| CliError::usage(e.to_string()))?;
    let mvk = multi_view_correspondence(&query_map, &view_maps, &schedule, &template, &camera)?;
    write_correspondence_set(&mvk, out)?;
    Ok(())
}

pub fn fuse(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::usage("at least one input correspondence set is required"));
    }
    let sets = inputs
        .iter()
        .map(read_correspondence_set)
        .collect::<Result<Vec<_>, _>>()?;
    let first = &sets[0];
    let (n, h, w) = (first.keypoints_per_view(), first.height(), first.width());
    let mut maps = Vec::new();
    let mut total_views = 0;
    for (i, set) in sets.iter().enumerate() {
        if set.keypoints_per_view() != n || set.height() != h || set.width() != w {
            return Err(CliError::usage(format!(
                "input {i} has layout {}x{}x{}x{}, expected _x{n}x{h}x{w}",
                set.views(),
                set.keypoints_per_view(),
                set.height(),
                set.width()
            )));
        }
        total_views += set.views();
        maps.extend(set.maps().iter().cloned());
    }
    let fused = MultiViewCorrespondenceSet::from_parts(total_views, n, maps)
        .map_err(|e| CliError::usage(e.to_string()))?;
    write_correspondence_set(&fused, out)?;
    Ok(())
}

#[derive(Serialize)]
struct DistributionDump {
    azimuth: Vec<f64>,
    elevation: Vec<f64>,
    tilt: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate(
    cset: &Path,
    template: Option<PathBuf>,
    camera: Option<PathBuf>,
    az_step: Option<f64>,
    elevations: Option<Vec<f64>>,
    tilts: Option<Vec<f64>>,
    bins: Option<usize>,
    dist_out: Option<&Path>,
    grid_out: Option<&Path>,
    config: &PipelineConfig,
) -> Result<(), CliError> {
    let template = load_template(template, config)?;
    let camera = load_camera(camera, config)?;
    let mvk = read_correspondence_set(cset)?;
    let schedule =
        viewpoint_schedule(mvk.views()).map_err(|e| CliError::usage(e.to_string()))?;
    let az_step = resolve(az_step, config.az_step, 5.0);
    let elevations = resolve(elevations, config.elevations.clone(), vec![10.0]);
    let tilts = resolve(tilts, config.tilts.clone(), vec![0.0]);
    let bins = resolve(bins, config.bins, 360);
    let grid = PoseHypothesisGrid::build(az_step, &elevations, &tilts)?;
    let search_config = SearchConfig::new(PoseBinning::uniform(bins)?);
    let outcome: SearchOutcome = search_estimate(
        &mvk,
        &template.keypoints,
        &camera,
        &grid,
        &schedule,
        &search_config,
    )?;
    println!(
        "{} {} {}",
        outcome.best_pose.azimuth(),
        outcome.best_pose.elevation(),
        outcome.best_pose.tilt()
    );
    if let Some(path) = dist_out {
        let dump = DistributionDump {
            azimuth: outcome.azimuth.probs().to_vec(),
            elevation: outcome.elevation.probs().to_vec(),
            tilt: outcome.tilt.probs().to_vec(),
        };
        std::fs::write(path, serde_json::to_string(&dump).unwrap())?;
    }
    if let Some(path) = grid_out {
        std::fs::write(path, outcome.grid.dump())?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PosePrediction {
    image: String,
    pose: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct DetectionPrediction {
    image: String,
    bbox: [f64; 4],
    score: f64,
    azimuth: f64,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| CliError::format(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn eval_cmd(
    predictions: &Path,
    ground_truth: &Path,
    mode: &str,
    avp_n: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let gt_records = load_annotations(ground_truth)?;
    let report = match mode {
        "pose" => {
            let preds: Vec<PosePrediction> = read_jsonl(predictions)?;
            if preds.is_empty() {
                return Err(CliError::usage("predictions file is empty"));
            }
            let records = preds
                .iter()
                .map(|p| {
                    let gt = gt_records
                        .iter()
                        .find(|g| g.image == p.image)
                        .ok_or_else(|| {
                            CliError::usage(format!("no ground truth for image `{}`", p.image))
                        })?;
                    Ok(PoseRecord {
                        image: p.image.clone(),
                        predicted: EulerPose::new(p.pose[0], p.pose[1], p.pose[2])?,
                        ground_truth: EulerPose::new(gt.pose[0], gt.pose[1], gt.pose[2])?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            pose_metrics(&records)?
        }
        "detection" => {
            let preds: Vec<DetectionPrediction> = read_jsonl(predictions)?;
            if preds.is_empty() {
                return Err(CliError::usage("predictions file is empty"));
            }
            let detections = preds
                .iter()
                .map(|p| {
                    Ok(Detection {
                        image: p.image.clone(),
                        bbox: BoundingBox::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3])?,
                        score: p.score,
                        azimuth: p.azimuth,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let objects = gt_records
                .iter()
                .map(|g| {
                    let bbox = g.bbox.ok_or_else(|| {
                        CliError::format(format!(
                            "ground truth for `{}` is missing a bbox",
                            g.image
                        ))
                    })?;
                    Ok(GroundTruthObject {
                        image: g.image.clone(),
                        bbox: BoundingBox::new(bbox[0], bbox[1], bbox[2], bbox[3])?,
                        azimuth: g.pose[0],
                        difficult: g.difficult.unwrap_or(false),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            detection_metrics(&detections, &objects, avp_n)?
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown mode `{other}` (expected pose or detection)"
            )))
        }
    };
    let json = serde_json::to_string(&report).unwrap();
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    Ok(())
}

pub fn heatmap_cmd(cset: &Path, channel: usize, out: &Path, color: bool) -> Result<(), CliError> {
    let set = read_correspondence_set(cset)?;
    if channel >= set.channels() {
        return Err(CliError::usage(format!(
            "channel {channel} out of range (set has {})",
            set.channels()
        )));
    }
    let map = &set.maps()[channel];
    if color {
        write_ppm(map, out)?;
    } else {
        write_pgm(map, out)?;
    }
    Ok(())
}
