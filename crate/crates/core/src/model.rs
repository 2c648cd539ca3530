//! The linear predictor and its SGD trainer.
//!
//! The predictor maps a conditioned feature vector to `K + 1` class
//! probabilities (softmax over an affine map) and `K` offset tuples (a second
//! affine map). Training unrolls the refinement loop `T` times with one shared
//! parameter set: at every unrolled iteration the current boxes are labeled
//! afresh against the ground truth, and the per-iteration multi-task losses
//! are summed. Boxes produced by regression and pooling enter the next
//! iteration as constants; no gradient flows through them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode, BBox, RegressionTarget};
use crate::objective::{multitask_loss, smooth_l1_grad, softmax_log_loss_grad};
use crate::refine::{apply_predictions, DetectionState, FeatureSource, Prediction, Predictor, RefinementConfig};
use crate::synthdata::{keyed_rng, Scene, SceneFeatures, SynthConfig};

/// Norm of a conditioned feature vector.
pub const FEATURE_SCALE: f64 = 1000.0;

const STREAM_INIT: u64 = 11;
const STREAM_BATCHES: u64 = 12;
const STREAM_MIRROR: u64 = 13;

/// L2-normalizes `v` and rescales it to norm [`FEATURE_SCALE`]. The zero
/// vector is returned unchanged.
pub fn normalize_features(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm * FEATURE_SCALE).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Affine heads over a `F`-dimensional feature vector. Weight matrices are
/// row-major with a trailing bias column, `(K + 1) x (F + 1)` for classes and
/// `4K x (F + 1)` for offsets (rows `4(k-1)..4k` belong to class `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    num_classes: usize,
    feature_dim: usize,
    cls_weights: Vec<f64>,
    reg_weights: Vec<f64>,
}

impl PredictorModel {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        let cols = feature_dim + 1;
        Self {
            num_classes,
            feature_dim,
            cls_weights: vec![0.0; (num_classes + 1) * cols],
            reg_weights: vec![0.0; 4 * num_classes * cols],
        }
    }

    /// Zero-mean Gaussian initialization with separate deviations for the
    /// two heads.
    pub fn random<R: Rng + ?Sized>(
        num_classes: usize,
        feature_dim: usize,
        cls_std: f64,
        reg_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Self::zeros(num_classes, feature_dim);
        for w in m.cls_weights.iter_mut() {
            *w = cls_std * rng.sample::<f64, _>(StandardNormal);
        }
        for w in m.reg_weights.iter_mut() {
            *w = reg_std * rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    pub fn from_weights(
        num_classes: usize,
        feature_dim: usize,
        cls_weights: Vec<f64>,
        reg_weights: Vec<f64>,
    ) -> Result<Self> {
        let cols = feature_dim + 1;
        let check = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected, got })
            }
        };
        check((num_classes + 1) * cols, cls_weights.len())?;
        check(4 * num_classes * cols, reg_weights.len())?;
        if cls_weights.iter().chain(&reg_weights).any(|w| !w.is_finite()) {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Ok(Self {
            num_classes,
            feature_dim,
            cls_weights,
            reg_weights,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn cls_weights(&self) -> &[f64] {
        &self.cls_weights
    }

    pub fn reg_weights(&self) -> &[f64] {
        &self.reg_weights
    }

    pub fn cls_weights_mut(&mut self) -> &mut [f64] {
        &mut self.cls_weights
    }

    pub fn reg_weights_mut(&mut self) -> &mut [f64] {
        &mut self.reg_weights
    }

    fn cols(&self) -> usize {
        self.feature_dim + 1
    }

    fn affine(weights: &[f64], cols: usize, features: &[f64]) -> Vec<f64> {
        weights
            .chunks_exact(cols)
            .map(|row| {
                let (w, b) = row.split_at(cols - 1);
                w.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + b[0]
            })
            .collect()
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(Self::affine(&self.cls_weights, self.cols(), features))
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        Ok(())
    }
}

impl Predictor for PredictorModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, features: &[f64]) -> Result<Prediction> {
        let class_probs = softmax(&self.logits(features)?);
        let raw = Self::affine(&self.reg_weights, self.cols(), features);
        let offsets = raw
            .chunks_exact(4)
            .map(|c| RegressionTarget::new(c[0], c[1], c[2], c[3]))
            .collect();
        Ok(Prediction { class_probs, offsets })
    }
}

/// Gradient with the same layout as a [`PredictorModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
}

impl ModelGradient {
    pub fn zeros_like(model: &PredictorModel) -> Self {
        Self {
            cls: vec![0.0; model.cls_weights.len()],
            reg: vec![0.0; model.reg_weights.len()],
        }
    }

    fn scale(&mut self, s: f64) {
        self.cls.iter_mut().chain(self.reg.iter_mut()).for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub decay_step: usize,
    pub iterations: usize,
    /// Scenes per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Number of unrolled refinement iterations `T` per training pass.
    pub unroll_depth: usize,
    pub positive_iou: f64,
    /// Half-open `[lo, hi)` IoU range labeled background.
    pub background_iou_range: [f64; 2],
    /// Pool regressed boxes between unrolled iterations.
    pub pool_during_training: bool,
    /// Weight of the localization term relative to classification.
    pub loc_weight: f64,
    /// Initial weight deviations for the class and offset heads.
    pub init_std: [f64; 2],
    /// Mirror each training scene horizontally with probability 0.5.
    pub mirror_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            lr_decay_factor: 0.1,
            decay_step: 1200,
            iterations: 2000,
            batch_size: 32,
            seed: 2017,
            unroll_depth: 2,
            positive_iou: 0.5,
            background_iou_range: [0.1, 0.5],
            pool_during_training: true,
            loc_weight: 1.0,
            init_std: [0.01 / FEATURE_SCALE, 0.001 / FEATURE_SCALE],
            mirror_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: format!("train.{key}"),
            message: message.to_string(),
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be finite and non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(bad("lr_decay_factor", "must be positive"));
        }
        if self.decay_step < 1 {
            return Err(bad("decay_step", "must be at least 1"));
        }
        if self.iterations < 1 {
            return Err(bad("iterations", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.unroll_depth < 1 {
            return Err(bad("unroll_depth", "must be at least 1"));
        }
        if !(self.positive_iou > 0.0 && self.positive_iou <= 1.0) {
            return Err(bad("positive_iou", "must lie in (0, 1]"));
        }
        let [lo, hi] = self.background_iou_range;
        if !(0.0 <= lo && lo <= hi && hi <= self.positive_iou) {
            return Err(bad("background_iou_range", "need 0 <= lo <= hi <= positive_iou"));
        }
        if !(self.loc_weight >= 0.0 && self.loc_weight.is_finite()) {
            return Err(bad("loc_weight", "must be finite and non-negative"));
        }
        if self.init_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(bad("init_std", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((step / self.decay_step) as i32)
    }
}

/// Training label of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetAssignment {
    Positive {
        class: usize,
        target: RegressionTarget,
        object: usize,
    },
    Background,
    /// Overlap falls in neither the positive nor the background range.
    Ignored,
}

impl TargetAssignment {
    pub fn label(&self) -> Option<usize> {
        match self {
            TargetAssignment::Positive { class, .. } => Some(*class),
            TargetAssignment::Background => Some(0),
            TargetAssignment::Ignored => None,
        }
    }
}

/// Labels each proposal against its best-overlapping object. A scene with no
/// objects supplies only background samples.
pub fn assign_targets(proposals: &[BBox], scene: &Scene, cfg: &TrainConfig) -> Vec<TargetAssignment> {
    let [lo, hi] = cfg.background_iou_range;
    proposals
        .iter()
        .map(|p| {
            if scene.objects.is_empty() {
                return TargetAssignment::Background;
            }
            let (object, overlap) = scene.best_match(p).unwrap_or((0, 0.0));
            if overlap >= cfg.positive_iou {
                let o = &scene.objects[object];
                TargetAssignment::Positive {
                    class: o.class,
                    target: encode(p, &o.bbox),
                    object,
                }
            } else if overlap >= lo && overlap < hi {
                TargetAssignment::Background
            } else {
                TargetAssignment::Ignored
            }
        })
        .collect()
}

/// One labeled (features, target) pair from one unrolled iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    pub assignment: TargetAssignment,
}

/// Adds this sample's loss gradient into `grad` and returns its loss.
/// Ignored samples contribute nothing.
pub fn accumulate_sample(
    model: &PredictorModel,
    sample: &TrainingSample,
    loc_weight: f64,
    grad: &mut ModelGradient,
) -> Result<f64> {
    let Some(g) = sample.assignment.label() else {
        return Ok(0.0);
    };
    let x = &sample.features;
    let pred = model.predict(x)?;
    let cols = model.cols();

    let dlogits = softmax_log_loss_grad(&pred.class_probs, g)?;
    for (row, d) in grad.cls.chunks_exact_mut(cols).zip(&dlogits) {
        for (gw, xi) in row.iter_mut().zip(x) {
            *gw += d * xi;
        }
        row[cols - 1] += d;
    }

    let loss = match sample.assignment {
        TargetAssignment::Positive { class, target, .. } => {
            let predicted = pred.offsets[class - 1];
            let dpred = smooth_l1_grad(&predicted, &target);
            let rows = &mut grad.reg[4 * (class - 1) * cols..4 * class * cols];
            for (row, d) in rows.chunks_exact_mut(cols).zip(dpred) {
                let d = loc_weight * d;
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += d * xi;
                }
                row[cols - 1] += d;
            }
            multitask_loss(&pred.class_probs, g, Some((&predicted, &target)), loc_weight)?
        }
        _ => multitask_loss(&pred.class_probs, g, None, loc_weight)?,
    };
    Ok(loss.total)
}

/// Mean loss and gradient over a batch, dividing by `normalizer` (the number
/// of proposals whose unrolled losses the samples came from). Samples are
/// reduced in order.
pub fn batch_loss_and_gradient(
    model: &PredictorModel,
    samples: &[TrainingSample],
    normalizer: usize,
    loc_weight: f64,
) -> Result<(f64, ModelGradient)> {
    let mut grad = ModelGradient::zeros_like(model);
    let mut loss = 0.0;
    for s in samples {
        loss += accumulate_sample(model, s, loc_weight, &mut grad)?;
    }
    let n = normalizer.max(1) as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Samples from unrolling the refinement loop on one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledPass {
    pub samples: Vec<TrainingSample>,
    /// Boxes that targets were assigned against, one list per iteration.
    pub assigned_boxes: Vec<Vec<BBox>>,
}

/// Runs `cfg.unroll_depth` iterations with the current model, labeling the
/// current boxes at every iteration and refining them between iterations.
pub fn unroll_scene<S: FeatureSource + ?Sized>(
    model: &PredictorModel,
    scene: &Scene,
    proposals: &[BBox],
    features: &mut S,
    cfg: &TrainConfig,
    refine: &RefinementConfig,
) -> Result<UnrolledPass> {
    let refine = RefinementConfig {
        pool_during_refinement: cfg.pool_during_training,
        ..refine.clone()
    };
    let mut states: Vec<_> = proposals
        .iter()
        .map(|b| DetectionState::initial(*b, model.num_classes))
        .collect();
    let mut pass = UnrolledPass {
        samples: Vec::new(),
        assigned_boxes: Vec::new(),
    };
    for t in 0..cfg.unroll_depth {
        let boxes: Vec<_> = states.iter().map(|s| s.bbox).collect();
        let feats = features.features(&boxes);
        if feats.len() != boxes.len() {
            return Err(Error::Alignment {
                states: boxes.len(),
                features: feats.len(),
            });
        }
        let assignments = assign_targets(&boxes, scene, cfg);
        pass.assigned_boxes.push(boxes);
        if t + 1 < cfg.unroll_depth {
            let predictions = feats.iter().map(|f| model.predict(f)).collect::<Result<Vec<_>>>()?;
            states = apply_predictions(&states, &predictions, &refine, &scene.extent)?;
        }
        pass.samples.extend(
            feats
                .into_iter()
                .zip(assignments)
                .filter(|(_, a)| !matches!(a, TargetAssignment::Ignored))
                .map(|(features, assignment)| TrainingSample { features, assignment }),
        );
    }
    Ok(pass)
}

/// A training scene with its fixed proposal set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScene {
    pub scene: Scene,
    pub proposals: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: PredictorModel,
    /// Mean unrolled loss of each step's mini-batch.
    pub loss_curve: Vec<f64>,
}

/// Feature-noise key for training step `step`, disjoint from evaluation keys.
pub fn training_feature_key(seed: u64, step: usize) -> u64 {
    (1u64 << 63) ^ seed.rotate_left(17) ^ step as u64
}

/// Plain mini-batch SGD on the mean unrolled loss.
pub fn sgd_train(
    data: &[TrainingScene],
    synth: &SynthConfig,
    cfg: &TrainConfig,
    refine: &RefinementConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config {
            key: "train".into(),
            message: "empty training set".into(),
        });
    }
    let mut init_rng = keyed_rng(cfg.seed, 0, STREAM_INIT);
    let mut model = PredictorModel::random(
        synth.num_classes,
        synth.feature_dim,
        cfg.init_std[0],
        cfg.init_std[1],
        &mut init_rng,
    );
    let mut batch_rng = keyed_rng(cfg.seed, 0, STREAM_BATCHES);
    let mut mirror_rng = keyed_rng(cfg.seed, 0, STREAM_MIRROR);
    let mut order: Vec<usize> = Vec::new();
    let mut loss_curve = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let mut samples = Vec::new();
        let mut proposals_seen = 0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            let item = &data[order.pop().expect("refilled above")];
            let mirrored;
            let (scene, proposals) = if cfg.mirror_augment && mirror_rng.random_bool(0.5) {
                let w = item.scene.extent.width();
                mirrored = (
                    item.scene.mirrored(),
                    item.proposals.iter().map(|b| b.mirrored(w)).collect::<Vec<_>>(),
                );
                (&mirrored.0, mirrored.1.as_slice())
            } else {
                (&item.scene, item.proposals.as_slice())
            };
            let mut src = SceneFeatures::new(scene, synth, training_feature_key(cfg.seed, step));
            let pass = unroll_scene(&model, scene, proposals, &mut src, cfg, refine).map_err(|e| match e {
                Error::DecodeOverflow(_) => Error::Divergence { step },
                e => e,
            })?;
            samples.extend(pass.samples);
            proposals_seen += proposals.len();
        }
        let (loss, grad) = batch_loss_and_gradient(&model, &samples, proposals_seen, cfg.loc_weight)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        loss_curve.push(loss);
        let lr = cfg.learning_rate_at(step);
        if lr > 0.0 {
            for (w, g) in model.cls_weights.iter_mut().zip(&grad.cls) {
                *w -= lr * g;
            }
            for (w, g) in model.reg_weights.iter_mut().zip(&grad.reg) {
                *w -= lr * g;
            }
        }
        if model
            .cls_weights
            .iter()
            .chain(&model.reg_weights)
            .any(|w| !w.is_finite())
        {
            return Err(Error::Divergence { step });
        }
    }
    Ok(TrainOutcome { model, loss_curve })
}

/// Mean of the first and last `window` entries of a loss curve.
pub fn smoothed_endpoints(curve: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, curve.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&curve[..w.min(curve.len())]),
        mean(&curve[curve.len().saturating_sub(w)..]),
    )
}

const CHECKPOINT_MAGIC: &str = "grouprefine-model";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes the model as text: a header line, a shape line
/// `classes K features F unroll T`, then each matrix as a `name rows cols`
/// line followed by one whitespace-separated row per line. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_checkpoint(model: &PredictorModel, unroll_depth: usize) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let cols = model.cols();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    let _ = writeln!(
        out,
        "classes {} features {} unroll {}",
        model.num_classes, model.feature_dim, unroll_depth
    );
    for (name, w) in [("cls_weights", &model.cls_weights), ("reg_weights", &model.reg_weights)] {
        let _ = writeln!(out, "{name} {} {cols}", w.len() / cols);
        for row in w.chunks_exact(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    out
}

/// Parses [`write_checkpoint`] output; returns the model and its unroll depth.
pub fn read_checkpoint(text: &str) -> Result<(PredictorModel, usize)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
    };
    let (_, header) = next("header")?;
    if header.trim() != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(bad(format!("unrecognized header `{header}`")));
    }
    let (ln, shape) = next("shape line")?;
    let f: Vec<&str> = shape.split_whitespace().collect();
    if f.len() != 6 || f[0] != "classes" || f[2] != "features" || f[4] != "unroll" {
        return Err(bad(format!("line {}: malformed shape line", ln + 1)));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(format!("line {}: invalid count `{s}`", ln + 1)))
    };
    let (k, fdim, unroll) = (num(f[1])?, num(f[3])?, num(f[5])?);
    let mut read_matrix = |name: &str, rows: usize| -> Result<Vec<f64>> {
        let (ln, head) = next(name)?;
        let expected = format!("{name} {rows} {}", fdim + 1);
        if head.trim() != expected {
            return Err(bad(format!("line {}: expected `{expected}`", ln + 1)));
        }
        let mut w = Vec::with_capacity(rows * (fdim + 1));
        for _ in 0..rows {
            let (ln, row) = next(name)?;
            let vals = row
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("line {}: {e}", ln + 1)))?;
            if vals.len() != fdim + 1 {
                return Err(bad(format!("line {}: expected {} values", ln + 1, fdim + 1)));
            }
            w.extend(vals);
        }
        Ok(w)
    };
    let cls = read_matrix("cls_weights", k + 1)?;
    let reg = read_matrix("reg_weights", 4 * k)?;
    Ok((PredictorModel::from_weights(k, fdim, cls, reg)?, unroll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageExtent;
    use crate::synthdata::SceneObject;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_examples() {
        let unit = [0.6, 0.0, 0.8];
        let n = normalize_features(&unit);
        assert!((n.iter().map(|x| x * x).sum::<f64>().sqrt() - 1000.0).abs() < 1e-9);
        assert!((n[0] - 600.0).abs() < 1e-9 && (n[2] - 800.0).abs() < 1e-9);
        assert_eq!(normalize_features(&[0.0; 4]), vec![0.0; 4]);
        let v = [1.5, -2.0, 0.25];
        let v5: Vec<f64> = v.iter().map(|x| 5.0 * x).collect();
        let (a, b) = (normalize_features(&v), normalize_features(&v5));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = PredictorModel::zeros(3, 5);
        let p = m.predict(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(p.class_probs.iter().all(|q| (q - 0.25).abs() < 1e-15));
        assert!(p.offsets.iter().all(|o| *o == RegressionTarget::ZERO));
        assert_eq!(p.offsets.len(), 3);
        assert!(matches!(
            m.predict(&[1.0]),
            Err(Error::DimensionMismatch { expected: 5, got: 1 })
        ));
    }

    #[test]
    fn probabilities_normalized_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = PredictorModel::random(4, 6, 0.5, 0.1, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = m.predict(&x).unwrap().class_probs;
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

            let class = rng.random_range(0..5);
            let mut bumped = m.clone();
            let cols = 7;
            // raising the bias raises the logit by exactly c
            bumped.cls_weights[class * cols + cols - 1] += 0.3;
            let q = bumped.predict(&x).unwrap().class_probs;
            assert!(q[class] > p[class]);
        }
    }

    fn scene_with(objects: Vec<(usize, [f64; 4])>) -> Scene {
        Scene {
            id: 0,
            extent: ImageExtent::new(200.0, 200.0).unwrap(),
            objects: objects
                .into_iter()
                .map(|(class, b)| SceneObject {
                    class,
                    bbox: BBox::from_array(b).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn assignment_examples() {
        let cfg = TrainConfig::default();
        let scene = scene_with(vec![(2, [50.0, 50.0, 40.0, 40.0])]);
        let exact = BBox::new(50.0, 50.0, 40.0, 40.0).unwrap();
        assert_eq!(
            assign_targets(&[exact], &scene, &cfg)[0],
            TargetAssignment::Positive {
                class: 2,
                target: RegressionTarget::ZERO,
                object: 0
            }
        );
        // equal squares shifted sideways: IoU = a / (80 - a) for overlap width a
        let a = 80.0 * 0.2 / 1.2;
        let shifted = BBox::new(50.0 + (40.0 - a), 50.0, 40.0, 40.0).unwrap();
        let v = crate::geometry::iou(&shifted, &scene.objects[0].bbox);
        assert!((v - 0.2).abs() < 1e-12, "{v}");
        assert_eq!(
            assign_targets(&[shifted], &scene, &cfg)[0],
            TargetAssignment::Background
        );

        let far = BBox::new(150.0, 150.0, 20.0, 20.0).unwrap();
        assert_eq!(assign_targets(&[far], &scene, &cfg)[0], TargetAssignment::Ignored);

        let empty = scene_with(vec![]);
        assert!(assign_targets(&[exact, far], &empty, &cfg)
            .iter()
            .all(|a| *a == TargetAssignment::Background));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = PredictorModel::random(4, 16, 0.3, 0.01, &mut rng);
        let text = write_checkpoint(&m, 2);
        let (back, t) = read_checkpoint(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(t, 2);
        assert!(read_checkpoint("garbage").is_err());
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_checkpoint(&truncated), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert_eq!(cfg.learning_rate_at(1199), 1.0);
        assert!((cfg.learning_rate_at(1200) - 0.1).abs() < 1e-15);
    }
}
