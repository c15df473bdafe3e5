//! Unit-normalized descriptor maps, the correspondence contrastive loss
//! with analytic gradients, and a minimal trainable per-pixel descriptor
//! head.
//!
//! The loss over a batch of N pairs with labels s and margin m is
//!
//! ```text
//! L = 1/(2N) * sum_i { s_i * D_i^2 + (1 - s_i) * max(0, m - D_i^2) }
//! ```
//!
//! where D_i is the Euclidean distance between the descriptors sampled at
//! the two locations of pair i. The hinge acts on the squared distance.
//! Every gradient in this module is exact: backpropagation through unit
//! normalization uses the spherical Jacobian (I - v v^T)/|u|, and the
//! subgradient at the hinge boundary (m - D^2 = 0) is taken as zero.

use crate::skeleton::CorrespondencePairBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit-norm tolerance for stored descriptor vectors.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample location ({x}, {y}) outside [0, {max_x}] x [0, {max_y}]")]
    OutOfBounds {
        x: f64,
        y: f64,
        max_x: f64,
        max_y: f64,
    },
    #[error("correspondence batch is empty")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("descriptor vector at (y={y}, x={x}) has norm {norm} (expected 1 within 1e-6)")]
    NotUnitNorm { y: usize, x: usize, norm: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
}

/// h x w grid of unit-norm d-vectors, row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorMap {
    /// Normalizes raw per-location vectors to unit length. Zero vectors
    /// become the first basis vector e0. Total function.
    pub fn normalize(
        height: usize,
        width: usize,
        dim: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, DescriptorError> {
        check_grid_shape(height, width, dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite("descriptor data".into()));
        }
        for vec in data.chunks_mut(dim) {
            normalize_in_place(vec);
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    /// Wraps data that is already unit-normalized (e.g. read from a DMAP
    /// file), validating the norm invariant.
    pub fn from_unit_data(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self, DescriptorError> {
        check_grid_shape(height, width, dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite("descriptor data".into()));
        }
        for (i, vec) in data.chunks(dim).enumerate() {
            let norm = l2_norm(vec);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(DescriptorError::NotUnitNorm {
                    y: i / width,
                    x: i % width,
                    norm,
                });
            }
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The stored descriptor at integer grid coordinates.
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Bilinear interpolation of the four surrounding descriptors,
    /// re-normalized to unit length.
    pub fn sample(&self, x: f64, y: f64) -> Result<Vec<f64>, DescriptorError> {
        Ok(self.sample_with_context(x, y)?.output)
    }

    /// Like [`Self::sample`], also returning what backpropagation needs.
    pub fn sample_with_context(&self, x: f64, y: f64) -> Result<SampleContext, DescriptorError> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
            return Err(DescriptorError::OutOfBounds { x, y, max_x, max_y });
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        let neighbors = [
            (y0 * self.width + x0, (1.0 - tx) * (1.0 - ty)),
            (y0 * self.width + x1, tx * (1.0 - ty)),
            (y1 * self.width + x0, (1.0 - tx) * ty),
            (y1 * self.width + x1, tx * ty),
        ];
        let mut blend = vec![0.0; self.dim];
        for &(pixel, weight) in &neighbors {
            if weight == 0.0 {
                continue;
            }
            let start = pixel * self.dim;
            for (out, value) in blend.iter_mut().zip(&self.data[start..start + self.dim]) {
                *out += weight * value;
            }
        }
        let blend_norm = l2_norm(&blend);
        let mut output = blend;
        normalize_in_place(&mut output);
        Ok(SampleContext {
            neighbors,
            blend_norm,
            output,
        })
    }
}

/// Bilinear sampling record: neighbor pixels with weights, the norm of the
/// un-normalized blend, and the unit-length output descriptor.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub neighbors: [(usize, f64); 4],
    pub blend_norm: f64,
    pub output: Vec<f64>,
}

fn check_grid_shape(
    height: usize,
    width: usize,
    dim: usize,
    len: usize,
) -> Result<(), DescriptorError> {
    if height == 0 || width == 0 || dim == 0 {
        return Err(DescriptorError::ShapeMismatch(format!(
            "grid dimensions must be positive, got {height}x{width}x{dim}"
        )));
    }
    if len != height * width * dim {
        return Err(DescriptorError::ShapeMismatch(format!(
            "expected {} values for {height}x{width}x{dim}, got {len}",
            height * width * dim
        )));
    }
    Ok(())
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Divides by the L2 norm; a zero vector becomes e0.
fn normalize_in_place(v: &mut [f64]) {
    let norm = l2_norm(v);
    if norm == 0.0 {
        v[0] = 1.0;
        for x in v.iter_mut().skip(1) {
            *x = 0.0;
        }
    } else {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Removes the component of `grad` along the unit vector `unit` and scales
/// by 1/norm: the exact Jacobian of v = u/|u| applied to a cotangent.
/// Zero norm (the e0 convention) propagates no gradient.
fn normalize_backward(grad: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; grad.len()];
    }
    let along: f64 = grad.iter().zip(unit).map(|(g, v)| g * v).sum();
    grad.iter()
        .zip(unit)
        .map(|(g, v)| (g - along * v) / norm)
        .collect()
}

/// h x w x c raw input features; the stand-in for CNN features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, DescriptorError> {
        check_grid_shape(height, width, channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite("feature data".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Per-location affine descriptor head (1x1 receptive field):
/// u = W^T f + b with W of shape (channels, dim).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDescriptorHead {
    pub in_channels: usize,
    pub dim: usize,
    /// Row-major (channel, output) weights, length in_channels * dim.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearDescriptorHead {
    pub fn new(
        in_channels: usize,
        dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, DescriptorError> {
        if weight.len() != in_channels * dim || bias.len() != dim {
            return Err(DescriptorError::ShapeMismatch(format!(
                "head expects {} weights and {} biases, got {} and {}",
                in_channels * dim,
                dim,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite("head parameters".into()));
        }
        Ok(Self {
            in_channels,
            dim,
            weight,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            in_channels: dim,
            dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Raw affine output for one feature vector.
    fn forward_vec(&self, features: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (c, &f) in features.iter().enumerate() {
            let row = &self.weight[c * self.dim..(c + 1) * self.dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * f;
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Per-pixel norms of the raw (pre-normalization) head outputs; the
/// training backward pass needs them for the spherical Jacobian.
struct RawHeadOutput {
    norms: Vec<f64>,
}

fn apply_head_raw(
    head: &LinearDescriptorHead,
    features: &FeatureGrid,
) -> Result<(RawHeadOutput, DescriptorMap), DescriptorError> {
    if head.in_channels != features.channels() {
        return Err(DescriptorError::ShapeMismatch(format!(
            "head expects {} input channels, features have {}",
            head.in_channels,
            features.channels()
        )));
    }
    let (h, w, d) = (features.height(), features.width(), head.dim);
    let mut raw = vec![0.0; h * w * d];
    for (pixel, chunk) in raw.chunks_mut(d).enumerate() {
        let y = pixel / w;
        let x = pixel % w;
        head.forward_vec(features.at(y, x), chunk);
    }
    let norms: Vec<f64> = raw.chunks(d).map(l2_norm).collect();
    let map = DescriptorMap::normalize(h, w, d, raw)?;
    Ok((RawHeadOutput { norms }, map))
}

/// Runs the affine head at every location and unit-normalizes the result.
pub fn apply_head(
    head: &LinearDescriptorHead,
    features: &FeatureGrid,
) -> Result<DescriptorMap, DescriptorError> {
    apply_head_raw(head, features).map(|(_, map)| map)
}

/// Loss value, per-pair descriptor gradients, and hinge activity counts.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// Per pair: gradient w.r.t. the descriptor sampled in image 1 and the
    /// one sampled in image 2, in batch order.
    pub gradients: Vec<(Vec<f64>, Vec<f64>)>,
    pub active_positives: usize,
    pub active_negatives: usize,
}

/// Core of the contrastive loss over explicit descriptor pairs.
///
/// Positives contribute D^2, negatives max(0, margin - D^2), averaged with
/// the 1/(2N) factor. An active negative is one with margin - D^2 > 0;
/// inactive negatives contribute neither loss nor gradient.
pub fn contrastive_loss_on_descriptors(
    pairs: &[(Vec<f64>, Vec<f64>, bool)],
    margin: f64,
) -> Result<LossReport, DescriptorError> {
    if pairs.is_empty() {
        return Err(DescriptorError::EmptyBatch);
    }
    if margin <= 0.0 || !margin.is_finite() {
        return Err(DescriptorError::InvalidArgument(format!(
            "margin must be > 0, got {margin}"
        )));
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut gradients = Vec::with_capacity(pairs.len());
    let mut active_positives = 0;
    let mut active_negatives = 0;
    for (a, b, positive) in pairs {
        if a.len() != b.len() {
            return Err(DescriptorError::ShapeMismatch(format!(
                "pair descriptor dims differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let dist_sq: f64 = diff.iter().map(|x| x * x).sum();
        let scale = if *positive {
            active_positives += 1;
            loss += dist_sq;
            1.0 / n
        } else if margin - dist_sq > 0.0 {
            active_negatives += 1;
            loss += margin - dist_sq;
            -1.0 / n
        } else {
            0.0
        };
        let grad_a: Vec<f64> = diff.iter().map(|x| scale * x).collect();
        let grad_b: Vec<f64> = grad_a.iter().map(|x| -x).collect();
        gradients.push((grad_a, grad_b));
    }
    loss /= 2.0 * n;
    Ok(LossReport {
        loss,
        gradients,
        active_positives,
        active_negatives,
    })
}

/// Contrastive loss between two descriptor maps over a pair batch; each
/// pair samples map 1 at its first location and map 2 at its second.
pub fn contrastive_loss(
    map1: &DescriptorMap,
    map2: &DescriptorMap,
    batch: &CorrespondencePairBatch,
    margin: f64,
) -> Result<LossReport, DescriptorError> {
    if batch.is_empty() {
        return Err(DescriptorError::EmptyBatch);
    }
    let pairs = batch
        .pairs
        .iter()
        .map(|p| {
            Ok((
                map1.sample(p.a[0], p.a[1])?,
                map2.sample(p.b[0], p.b[1])?,
                p.positive,
            ))
        })
        .collect::<Result<Vec<_>, DescriptorError>>()?;
    contrastive_loss_on_descriptors(&pairs, margin)
}

/// One training example: a pair of feature grids and the correspondence
/// pairs between them.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features1: FeatureGrid,
    pub features2: FeatureGrid,
    pub batch: CorrespondencePairBatch,
}

/// Loss and exact head-parameter gradients for one item. The chain runs
/// head affine -> per-pixel unit normalization -> bilinear sampling ->
/// re-normalization -> contrastive loss, with every Jacobian applied
/// exactly.
pub fn head_loss_and_gradients(
    head: &LinearDescriptorHead,
    item: &TrainItem,
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), DescriptorError> {
    if item.batch.is_empty() {
        return Err(DescriptorError::EmptyBatch);
    }
    let (raw1, map1) = apply_head_raw(head, &item.features1)?;
    let (raw2, map2) = apply_head_raw(head, &item.features2)?;

    let contexts: Vec<(SampleContext, SampleContext)> = item
        .batch
        .pairs
        .iter()
        .map(|p| {
            Ok((
                map1.sample_with_context(p.a[0], p.a[1])?,
                map2.sample_with_context(p.b[0], p.b[1])?,
            ))
        })
        .collect::<Result<_, DescriptorError>>()?;

    let pairs: Vec<(Vec<f64>, Vec<f64>, bool)> = contexts
        .iter()
        .zip(&item.batch.pairs)
        .map(|((ca, cb), p)| (ca.output.clone(), cb.output.clone(), p.positive))
        .collect();
    let report = contrastive_loss_on_descriptors(&pairs, margin)?;

    let d = head.dim;
    // Gradient w.r.t. the normalized per-pixel descriptors of each map.
    let mut grad_map1 = vec![0.0; map1.data().len()];
    let mut grad_map2 = vec![0.0; map2.data().len()];
    for ((ca, cb), (ga, gb)) in contexts.iter().zip(&report.gradients) {
        scatter_sample_gradient(ca, ga, &mut grad_map1, d);
        scatter_sample_gradient(cb, gb, &mut grad_map2, d);
    }

    let mut grad_weight = vec![0.0; head.weight.len()];
    let mut grad_bias = vec![0.0; head.bias.len()];
    accumulate_head_gradient(
        head,
        &item.features1,
        &raw1,
        &map1,
        &grad_map1,
        &mut grad_weight,
        &mut grad_bias,
    );
    accumulate_head_gradient(
        head,
        &item.features2,
        &raw2,
        &map2,
        &grad_map2,
        &mut grad_weight,
        &mut grad_bias,
    );
    Ok((report.loss, grad_weight, grad_bias))
}

/// Backpropagates one sampled descriptor's gradient through the blend
/// re-normalization and bilinear weights into the per-pixel map gradient.
fn scatter_sample_gradient(
    context: &SampleContext,
    grad_output: &[f64],
    grad_map: &mut [f64],
    dim: usize,
) {
    let grad_blend = normalize_backward(grad_output, &context.output, context.blend_norm);
    for &(pixel, weight) in &context.neighbors {
        if weight == 0.0 {
            continue;
        }
        let start = pixel * dim;
        for (slot, g) in grad_map[start..start + dim].iter_mut().zip(&grad_blend) {
            *slot += weight * g;
        }
    }
}

/// Backpropagates per-pixel map gradients through the unit normalization
/// and the affine head into parameter gradients.
fn accumulate_head_gradient(
    head: &LinearDescriptorHead,
    features: &FeatureGrid,
    raw: &RawHeadOutput,
    map: &DescriptorMap,
    grad_map: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) {
    let d = head.dim;
    let w = features.width();
    for (pixel, grad_v) in grad_map.chunks(d).enumerate() {
        if grad_v.iter().all(|g| *g == 0.0) {
            continue;
        }
        let y = pixel / w;
        let x = pixel % w;
        let unit = map.at(y, x);
        let grad_u = normalize_backward(grad_v, unit, raw.norms[pixel]);
        let feat = features.at(y, x);
        for (c, &f) in feat.iter().enumerate() {
            let row = &mut grad_weight[c * d..(c + 1) * d];
            for (slot, g) in row.iter_mut().zip(&grad_u) {
                *slot += f * g;
            }
        }
        for (slot, g) in grad_bias.iter_mut().zip(&grad_u) {
            *slot += g;
        }
    }
}

/// Training hyperparameters. The optimizer is Adam with the usual
/// (0.9, 0.999, 1e-8) moment constants.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub rng_seed: u64,
}

/// Trained head plus the loss trace: trace[0] is the initial loss and
/// trace[k] the loss after k updates (length steps + 1).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: LinearDescriptorHead,
    pub trace: Vec<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Trains the head with Adam, picking one dataset item per step with a
/// seeded RNG. Deterministic given the seed; errors with the step index if
/// the loss stops being finite.
pub fn train_head(
    head: &LinearDescriptorHead,
    dataset: &[TrainItem],
    options: &TrainOptions,
) -> Result<TrainOutcome, DescriptorError> {
    if dataset.is_empty() {
        return Err(DescriptorError::InvalidArgument(
            "training dataset is empty".into(),
        ));
    }
    if options.steps == 0 {
        return Err(DescriptorError::InvalidArgument(
            "step count must be >= 1".into(),
        ));
    }
    let mut head = head.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.rng_seed);
    let mut adam_w = AdamState::new(head.weight.len());
    let mut adam_b = AdamState::new(head.bias.len());
    let mut trace = Vec::with_capacity(options.steps + 1);
    for step in 0..options.steps {
        let item = &dataset[rng.gen_range(0..dataset.len())];
        let (loss, grad_w, grad_b) = head_loss_and_gradients(&head, item, options.margin)?;
        if !loss.is_finite() {
            return Err(DescriptorError::Divergence { step });
        }
        trace.push(loss);
        adam_w.step(&mut head.weight, &grad_w, options.learning_rate);
        adam_b.step(&mut head.bias, &grad_b, options.learning_rate);
    }
    // Final loss on the first item, so the trace ends with post-update state.
    let (final_loss, _, _) = head_loss_and_gradients(&head, &dataset[0], options.margin)?;
    if !final_loss.is_finite() {
        return Err(DescriptorError::Divergence {
            step: options.steps,
        });
    }
    trace.push(final_loss);
    Ok(TrainOutcome { head, trace })
}
