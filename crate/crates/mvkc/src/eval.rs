//! Viewpoint-estimation metrics: median geodesic error, accuracy at a
//! threshold, and joint detection + viewpoint average precision.
//!
//! Pose error is the geodesic rotation distance between predicted and
//! ground-truth poses. `acc_theta` counts errors strictly below the
//! threshold; a record whose error is exactly the threshold does not
//! count. `med_err` uses the lower median for even record counts so
//! fixtures stay exact.
//!
//! AVP-n follows the standard detection protocol: detections sorted by
//! descending confidence match greedily to unmatched ground truth at
//! IoU >= 0.5 (a matched detection consumes its ground truth whether or
//! not the viewpoint agrees), a true positive must additionally land in
//! the ground truth's azimuth sector out of n centered sectors, and the
//! precision-recall curve integrates with the every-point interpolation
//! rule. Ground truths flagged difficult are excluded from matching and
//! from the recall denominator.

use crate::estimator::{encode_bin, AngleBinning, AngleKind, EstimatorError};
use crate::geometry::{euler_to_rotation, geodesic_distance, EulerPose};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record list is empty")]
    EmptyRecords,
    #[error("theta must be > 0, got {0}")]
    InvalidTheta(f64),
    #[error("view count n must be >= 1")]
    InvalidViewCount,
    #[error("invalid box ({x0}, {y0}, {x1}, {y1}): corners must satisfy x0 < x1, y0 < y1")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// One evaluated image: predicted and ground-truth pose.
#[derive(Debug, Clone)]
pub struct PoseRecord {
    pub image: String,
    pub predicted: EulerPose,
    pub ground_truth: EulerPose,
}

/// Axis-aligned box with x0 < x1 and y0 < y1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, EvalError> {
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(EvalError::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// A scored detection with a predicted azimuth.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image: String,
    pub bbox: BoundingBox,
    pub score: f64,
    pub azimuth: f64,
}

/// A ground-truth object for detection evaluation.
#[derive(Debug, Clone)]
pub struct GroundTruthObject {
    pub image: String,
    pub bbox: BoundingBox,
    pub azimuth: f64,
    pub difficult: bool,
}

/// Geodesic pose error in radians.
pub fn pose_error_radians(record: &PoseRecord) -> f64 {
    let predicted = euler_to_rotation(&record.predicted);
    let truth = euler_to_rotation(&record.ground_truth);
    geodesic_distance(&predicted, &truth)
}

/// Geodesic pose error in degrees.
pub fn pose_error_degrees(record: &PoseRecord) -> f64 {
    pose_error_radians(record).to_degrees()
}

/// Median geodesic error in degrees (lower median for even counts).
pub fn med_err(records: &[PoseRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut errors: Vec<f64> = records.iter().map(pose_error_degrees).collect();
    errors.sort_by(|a, b| a.total_cmp(b));
    Ok(errors[(errors.len() - 1) / 2])
}

/// Fraction of records whose geodesic error is strictly below `theta`
/// radians.
pub fn acc_theta(records: &[PoseRecord], theta: f64) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if theta <= 0.0 || !theta.is_finite() {
        return Err(EvalError::InvalidTheta(theta));
    }
    let hits = records
        .iter()
        .filter(|r| pose_error_radians(r) < theta)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Outcome of the greedy matching pass, shared by AVP and plain AP.
struct MatchedDetections {
    /// Per detection, in descending-score order: matched ground-truth
    /// index (into the non-difficult list) if any.
    matches: Vec<Option<usize>>,
    /// Detection order after the stable sort by descending score.
    order: Vec<usize>,
    total_ground_truth: usize,
}

fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
) -> MatchedDetections {
    let usable: Vec<(usize, &GroundTruthObject)> = ground_truth
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.difficult)
        .collect();
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (slot, (_, g)) in usable.iter().enumerate() {
        by_image.entry(g.image.as_str()).or_default().push(slot);
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut taken = vec![false; usable.len()];
    let mut matches = Vec::with_capacity(detections.len());
    for &det_idx in &order {
        let det = &detections[det_idx];
        let mut best: Option<(usize, f64)> = None;
        if let Some(slots) = by_image.get(det.image.as_str()) {
            for &slot in slots {
                if taken[slot] {
                    continue;
                }
                let overlap = iou(&det.bbox, &usable[slot].1.bbox);
                if overlap >= 0.5 && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((slot, overlap));
                }
            }
        }
        match best {
            Some((slot, _)) => {
                taken[slot] = true;
                matches.push(Some(slot));
            }
            None => matches.push(None),
        }
    }
    MatchedDetections {
        matches,
        order,
        total_ground_truth: usable.len(),
    }
}

/// Area under the precision-recall curve with the every-point
/// interpolation rule (precision envelope from the right).
fn area_under_pr(mut tp_flags: Vec<bool>, total_ground_truth: usize) -> f64 {
    if total_ground_truth == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let mut points = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, flag) in tp_flags.iter_mut().enumerate() {
        if *flag {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / total_ground_truth as f64;
        points.push((recall, precision));
    }
    // envelope: precision at recall r is the max precision at recall >= r
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (i, (_, p)) in points.iter().enumerate().rev() {
        running = running.max(*p);
        envelope[i] = running;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, (r, _)) in points.iter().enumerate() {
        area += (r - prev_recall) * envelope[i];
        prev_recall = *r;
    }
    area
}

/// Average viewpoint precision at n azimuth sectors.
pub fn avp_n(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    n: usize,
) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidViewCount);
    }
    let matched = match_detections(detections, ground_truth);
    let usable: Vec<&GroundTruthObject> =
        ground_truth.iter().filter(|g| !g.difficult).collect();
    // n = 1 is a single all-encompassing sector; AngleBinning itself
    // requires >= 2 bins.
    let binning = if n >= 2 {
        Some(AngleBinning::new(AngleKind::Azimuth, n)?)
    } else {
        None
    };
    let mut tp_flags = Vec::with_capacity(matched.order.len());
    for (pos, &det_idx) in matched.order.iter().enumerate() {
        let tp = match matched.matches[pos] {
            Some(slot) => match &binning {
                Some(b) => {
                    let pred_bin =
                        encode_bin(detections[det_idx].azimuth.rem_euclid(360.0), b)?;
                    let gt_bin = encode_bin(usable[slot].azimuth.rem_euclid(360.0), b)?;
                    pred_bin == gt_bin
                }
                None => true,
            },
            None => false,
        };
        tp_flags.push(tp);
    }
    Ok(area_under_pr(tp_flags, matched.total_ground_truth))
}

/// Detection-only average precision with the same matching rule; ignores
/// viewpoint entirely.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
) -> Result<f64, EvalError> {
    let matched = match_detections(detections, ground_truth);
    let tp_flags = matched.matches.iter().map(|m| m.is_some()).collect();
    Ok(area_under_pr(tp_flags, matched.total_ground_truth))
}

/// The metric report emitted by the evaluation command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub med_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<AccReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avp: Option<HashMap<String, f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccReport {
    #[serde(rename = "pi/6")]
    pub pi_6: f64,
    #[serde(rename = "pi/8")]
    pub pi_8: f64,
    #[serde(rename = "pi/12")]
    pub pi_12: f64,
}

/// Computes the pose-mode metrics at the three standard thresholds.
pub fn pose_metrics(records: &[PoseRecord]) -> Result<MetricReport, EvalError> {
    use std::f64::consts::PI;
    Ok(MetricReport {
        med_err: Some(med_err(records)?),
        acc: Some(AccReport {
            pi_6: acc_theta(records, PI / 6.0)?,
            pi_8: acc_theta(records, PI / 8.0)?,
            pi_12: acc_theta(records, PI / 12.0)?,
        }),
        avp: None,
    })
}

/// Computes the detection-mode metric (AVP at `n` sectors).
pub fn detection_metrics(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    n: usize,
) -> Result<MetricReport, EvalError> {
    let mut avp = HashMap::new();
    avp.insert(n.to_string(), avp_n(detections, ground_truth, n)?);
    Ok(MetricReport {
        med_err: None,
        acc: None,
        avp: Some(avp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn record(err_deg: f64) -> PoseRecord {
        PoseRecord {
            image: format!("img-{err_deg}"),
            predicted: EulerPose::new(err_deg, 0.0, 0.0).unwrap(),
            ground_truth: EulerPose::new(0.0, 0.0, 0.0).unwrap(),
        }
    }

    fn fixture_records() -> Vec<PoseRecord> {
        vec![record(10.0), record(20.0), record(40.0)]
    }

    #[test]
    fn med_err_fixture() {
        assert_abs_diff_eq!(med_err(&fixture_records()).unwrap(), 20.0, epsilon = 1e-9);
        let zero = vec![record(0.0), record(0.0)];
        assert_eq!(med_err(&zero).unwrap(), 0.0);
        assert!(matches!(med_err(&[]), Err(EvalError::EmptyRecords)));
    }

    #[test]
    fn med_err_uses_lower_median_for_even_counts() {
        let records = vec![record(10.0), record(20.0), record(30.0), record(40.0)];
        assert_abs_diff_eq!(med_err(&records).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn med_err_matches_sort_oracle_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut records: Vec<PoseRecord> = (0..50)
            .map(|_| PoseRecord {
                image: "x".into(),
                predicted: EulerPose::new(
                    rng.gen_range(0.0..360.0),
                    rng.gen_range(-90.0..=90.0),
                    rng.gen_range(-180.0..180.0),
                )
                .unwrap(),
                ground_truth: EulerPose::new(
                    rng.gen_range(0.0..360.0),
                    rng.gen_range(-90.0..=90.0),
                    rng.gen_range(-180.0..180.0),
                )
                .unwrap(),
            })
            .collect();
        let value = med_err(&records).unwrap();
        // independent oracle: gather errors, selection via full sort
        let mut errors: Vec<f64> = records.iter().map(pose_error_degrees).collect();
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(value, errors[(errors.len() - 1) / 2]);
        // permutation invariance
        for swap in [(0usize, 49usize), (3, 17), (22, 8)] {
            records.swap(swap.0, swap.1);
        }
        assert_eq!(med_err(&records).unwrap(), value);
    }

    #[test]
    fn acc_theta_fixture() {
        let records = fixture_records();
        assert_abs_diff_eq!(
            acc_theta(&records, PI / 6.0).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            acc_theta(&records, PI / 12.0).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        // strictness at the boundary: a record whose error equals theta
        // exactly does not count
        let boundary_theta = pose_error_radians(&records[1]);
        assert_abs_diff_eq!(
            acc_theta(&records, boundary_theta).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            acc_theta(&records, 0.0),
            Err(EvalError::InvalidTheta(_))
        ));
    }

    #[test]
    fn acc_theta_pi_boundary() {
        // geodesic errors never exceed pi, so theta = pi catches everything
        // except an error of exactly pi, which counts as not-less.
        let records = fixture_records();
        assert_eq!(acc_theta(&records, PI).unwrap(), 1.0);
        let boundary = vec![record(180.0)];
        assert_eq!(acc_theta(&boundary, PI).unwrap(), 0.0);
    }

    #[test]
    fn acc_theta_monotone_in_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let records: Vec<PoseRecord> = (0..rng.gen_range(1..30))
                .map(|_| record(rng.gen_range(0.0..180.0)))
                .collect();
            let a12 = acc_theta(&records, PI / 12.0).unwrap();
            let a8 = acc_theta(&records, PI / 8.0).unwrap();
            let a6 = acc_theta(&records, PI / 6.0).unwrap();
            assert!(a12 <= a8 && a8 <= a6);
        }
    }

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let unit = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        assert_eq!(iou(&unit, &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        // shifted by half its width: intersection 0.5, union 1.5
        assert_abs_diff_eq!(
            iou(&unit, &bb(0.5, 0.0, 1.5, 1.0)),
            1.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(matches!(
            BoundingBox::new(1.0, 0.0, 0.0, 1.0),
            Err(EvalError::InvalidBox { .. })
        ));
    }

    fn det(image: &str, bbox: BoundingBox, score: f64, azimuth: f64) -> Detection {
        Detection {
            image: image.into(),
            bbox,
            score,
            azimuth,
        }
    }

    fn gt(image: &str, bbox: BoundingBox, azimuth: f64, difficult: bool) -> GroundTruthObject {
        GroundTruthObject {
            image: image.into(),
            bbox,
            azimuth,
            difficult,
        }
    }

    #[test]
    fn avp_single_perfect_detection() {
        let g = vec![gt("a", bb(0.0, 0.0, 10.0, 10.0), 10.0, false)];
        let d = vec![det("a", bb(0.0, 0.0, 10.0, 10.0), 0.9, 12.0)];
        assert_abs_diff_eq!(avp_n(&d, &g, 4).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn avp_localization_failure_scores_zero() {
        let g = vec![gt("a", bb(0.0, 0.0, 10.0, 10.0), 10.0, false)];
        // IoU 0.4 < 0.5
        let d = vec![det("a", bb(6.0, 0.0, 16.0, 10.0), 0.9, 10.0)];
        assert_eq!(avp_n(&d, &g, 4).unwrap(), 0.0);
    }

    // Hand-walked PR table (verified independently):
    //   D1 0.9 TP (IoU 1, bins agree)       p=1    r=1/3
    //   D2 0.8 FP (matched, bins disagree)  p=1/2  r=1/3
    //   D3 0.7 TP (IoU 0.9, bins agree)     p=2/3  r=2/3
    //   D4 0.6 FP (its ground truth taken)  p=1/2  r=2/3
    // every-point area: 1/3 * 1 + 1/3 * 2/3 = 5/9.
    fn avp_fixture() -> (Vec<Detection>, Vec<GroundTruthObject>) {
        let ground_truth = vec![
            gt("a", bb(0.0, 0.0, 10.0, 10.0), 10.0, false),
            gt("a", bb(20.0, 0.0, 30.0, 10.0), 100.0, false),
            gt("b", bb(0.0, 0.0, 10.0, 10.0), 200.0, false),
        ];
        let detections = vec![
            det("a", bb(0.0, 0.0, 10.0, 10.0), 0.9, 350.0),
            det("a", bb(20.0, 0.0, 30.0, 10.0), 0.8, 190.0),
            det("b", bb(0.0, 0.0, 9.0, 10.0), 0.7, 181.0),
            det("a", bb(0.0, 0.0, 10.0, 10.0), 0.6, 10.0),
        ];
        (detections, ground_truth)
    }

    #[test]
    fn avp_hand_walked_fixture() {
        let (detections, ground_truth) = avp_fixture();
        assert_abs_diff_eq!(
            avp_n(&detections, &ground_truth, 4).unwrap(),
            5.0 / 9.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn avp_never_exceeds_detection_ap() {
        let (detections, ground_truth) = avp_fixture();
        let ap = average_precision(&detections, &ground_truth).unwrap();
        assert_abs_diff_eq!(ap, 1.0, epsilon = 1e-12);
        assert!(avp_n(&detections, &ground_truth, 4).unwrap() <= ap);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let images = ["a", "b", "c"];
            let ground_truth: Vec<GroundTruthObject> = (0..rng.gen_range(1..6))
                .map(|_| {
                    let x = rng.gen_range(0.0..50.0);
                    let y = rng.gen_range(0.0..50.0);
                    gt(
                        images[rng.gen_range(0..3)],
                        bb(x, y, x + rng.gen_range(5.0..15.0), y + rng.gen_range(5.0..15.0)),
                        rng.gen_range(0.0..360.0),
                        rng.gen_bool(0.2),
                    )
                })
                .collect();
            let detections: Vec<Detection> = (0..rng.gen_range(1..8))
                .map(|_| {
                    let source = &ground_truth[rng.gen_range(0..ground_truth.len())];
                    let jitter = rng.gen_range(-3.0..3.0);
                    det(
                        &source.image.clone(),
                        bb(
                            source.bbox.x0 + jitter,
                            source.bbox.y0,
                            source.bbox.x1 + jitter,
                            source.bbox.y1,
                        ),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..360.0),
                    )
                })
                .collect();
            for n in [1, 4, 8] {
                let avp = avp_n(&detections, &ground_truth, n).unwrap();
                let ap = average_precision(&detections, &ground_truth).unwrap();
                assert!(
                    avp <= ap + 1e-12,
                    "AVP-{n} {avp} exceeded detection AP {ap}"
                );
            }
        }
    }

    #[test]
    fn duplicate_detections_on_one_ground_truth() {
        let g = vec![gt("a", bb(0.0, 0.0, 10.0, 10.0), 0.0, false)];
        let d = vec![
            det("a", bb(0.0, 0.0, 10.0, 10.0), 0.9, 0.0),
            det("a", bb(0.0, 0.0, 10.0, 10.0), 0.8, 0.0),
        ];
        // second detection is a false positive even with perfect IoU and bin
        let avp = avp_n(&d, &g, 4).unwrap();
        assert_abs_diff_eq!(avp, 1.0, epsilon = 1e-12);
        // reversing scores must not change the outcome (stable protocol)
        let d_rev = vec![d[1].clone(), d[0].clone()];
        assert_abs_diff_eq!(avp_n(&d_rev, &g, 4).unwrap(), avp, epsilon = 1e-12);
    }

    #[test]
    fn difficult_ground_truth_is_excluded() {
        let g = vec![
            gt("a", bb(0.0, 0.0, 10.0, 10.0), 0.0, false),
            gt("a", bb(20.0, 0.0, 30.0, 10.0), 0.0, true),
        ];
        let d = vec![det("a", bb(0.0, 0.0, 10.0, 10.0), 0.9, 0.0)];
        // the difficult object does not enter the recall denominator
        assert_abs_diff_eq!(avp_n(&d, &g, 4).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn avp_argument_errors() {
        let (detections, ground_truth) = avp_fixture();
        assert!(matches!(
            avp_n(&detections, &ground_truth, 0),
            Err(EvalError::InvalidViewCount)
        ));
    }

    #[test]
    fn pose_metrics_report() {
        let report = pose_metrics(&fixture_records()).unwrap();
        assert_abs_diff_eq!(report.med_err.unwrap(), 20.0, epsilon = 1e-9);
        let acc = report.acc.unwrap();
        assert_abs_diff_eq!(acc.pi_6, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(acc.pi_8, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(acc.pi_12, 1.0 / 3.0, epsilon = 1e-12);
    }
}
