//! The refinement engine: repeated predict, decode, group-pool passes over a
//! set of proposals.
//!
//! Each step reads an immutable snapshot of the previous states. Regression
//! is applied to every detection first, then every non-background detection
//! is pooled against the regressed snapshot, so the outcome does not depend
//! on the order detections are visited in. Detections predicted as
//! background keep their location for that step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip, decode, iou, BBox, ImageExtent, RegressionTarget};
use crate::grouping::{form_group, group_confidence_pool, DEFAULT_GROUP_IOU};

/// Output of a predictor for one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Distribution over `K + 1` classes, index 0 is background.
    pub class_probs: Vec<f64>,
    /// One offset tuple per object class; `offsets[k - 1]` belongs to class `k`.
    pub offsets: Vec<RegressionTarget>,
}

impl Prediction {
    pub fn offsets_for(&self, class: usize) -> Option<&RegressionTarget> {
        class.checked_sub(1).and_then(|k| self.offsets.get(k))
    }
}

pub trait Predictor {
    /// Number of object classes `K`, background excluded.
    fn num_classes(&self) -> usize;

    fn predict(&self, features: &[f64]) -> Result<Prediction>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn predict(&self, features: &[f64]) -> Result<Prediction> {
        (**self).predict(features)
    }
}

/// Supplies one feature vector per box, evaluated on the boxes' current
/// locations. Called once per iteration.
pub trait FeatureSource {
    fn features(&mut self, boxes: &[BBox]) -> Vec<Vec<f64>>;
}

impl<F> FeatureSource for F
where
    F: FnMut(&[BBox]) -> Vec<Vec<f64>>,
{
    fn features(&mut self, boxes: &[BBox]) -> Vec<Vec<f64>> {
        self(boxes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep {
    pub bbox: BBox,
    pub predicted_class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionState {
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
    pub score: f64,
    /// One entry per completed iteration.
    pub trajectory: Vec<TrajectoryStep>,
}

impl DetectionState {
    /// A proposal that has not been scored yet: uniform over `K + 1` classes,
    /// which resolves to background.
    pub fn initial(bbox: BBox, num_classes: usize) -> Self {
        let n = num_classes + 1;
        let class_probs = vec![1.0 / n as f64; n];
        Self {
            bbox,
            class_probs,
            predicted_class: 0,
            score: 1.0 / n as f64,
            trajectory: Vec::new(),
        }
    }

    pub fn set_probs(&mut self, probs: Vec<f64>) {
        let (class, score) = argmax(&probs);
        self.class_probs = probs;
        self.predicted_class = class;
        self.score = score;
    }

    pub fn is_background(&self) -> bool {
        self.predicted_class == 0
    }
}

/// First index of the maximum entry.
fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, p)| {
            if p > best.1 {
                (i, p)
            } else {
                best
            }
        },
    )
}

/// Which boxes of the neighbors enter a target's group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// Neighbors after this iteration's regression.
    #[default]
    PostRegression,
    /// Neighbors as they were before this iteration's regression; the target
    /// itself still contributes its regressed box.
    PreRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub iterations: usize,
    pub group_iou_threshold: f64,
    /// Pool regressed boxes with their group after each regression.
    pub pool_during_refinement: bool,
    pub pool_source: PoolSource,
    pub clip_to_image: bool,
    /// Per-class suppression applied to the final output only.
    pub nms_iou_threshold: f64,
    /// Final detections scoring below this are dropped.
    pub min_score: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            group_iou_threshold: DEFAULT_GROUP_IOU,
            pool_during_refinement: true,
            pool_source: PoolSource::PostRegression,
            clip_to_image: true,
            nms_iou_threshold: 0.45,
            min_score: 0.0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: format!("refine.{key}"),
            message: message.to_string(),
        };
        if self.iterations < 1 {
            return Err(bad("iterations", "must be at least 1"));
        }
        if !(self.group_iou_threshold > 0.0 && self.group_iou_threshold < 1.0) {
            return Err(bad("group_iou_threshold", "must lie in (0, 1)"));
        }
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold < 1.0) {
            return Err(bad("nms_iou_threshold", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(bad("min_score", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Advances every state by one iteration given its prediction.
pub fn apply_predictions(
    states: &[DetectionState],
    predictions: &[Prediction],
    config: &RefinementConfig,
    extent: &ImageExtent,
) -> Result<Vec<DetectionState>> {
    if states.len() != predictions.len() {
        return Err(Error::Alignment {
            states: states.len(),
            features: predictions.len(),
        });
    }

    let mut regressed = Vec::with_capacity(states.len());
    for (state, pred) in states.iter().zip(predictions) {
        let mut next = state.clone();
        next.set_probs(pred.class_probs.clone());
        if !next.is_background() {
            let offsets = pred.offsets_for(next.predicted_class).ok_or(Error::DimensionMismatch {
                expected: next.predicted_class,
                got: pred.offsets.len(),
            })?;
            next.bbox = decode(&state.bbox, offsets)?;
        }
        regressed.push(next);
    }

    // neighbors seen by the grouping step, read from this snapshot only
    let mut neighbors = regressed.clone();
    if config.pool_source == PoolSource::PreRegression {
        for (n, prev) in neighbors.iter_mut().zip(states) {
            n.bbox = prev.bbox;
        }
    }
    let mut out = regressed.clone();
    for (i, (state, prev)) in out.iter_mut().zip(states).enumerate() {
        if state.is_background() {
            state.bbox = prev.bbox;
        } else {
            if config.pool_during_refinement {
                let held = std::mem::replace(&mut neighbors[i].bbox, regressed[i].bbox);
                let group = form_group(i, &neighbors, config.group_iou_threshold)?;
                neighbors[i].bbox = held;
                state.bbox = group_confidence_pool(&group)?;
            }
            if config.clip_to_image {
                state.bbox = match clip(&state.bbox, extent) {
                    Ok(b) => b,
                    // regressed entirely off the image: hold the previous location
                    Err(Error::EmptyAfterClip) => prev.bbox,
                    Err(e) => return Err(e),
                };
            }
        }
        state.trajectory.push(TrajectoryStep {
            bbox: state.bbox,
            predicted_class: state.predicted_class,
            score: state.score,
        });
    }
    Ok(out)
}

/// One refinement iteration: predict from `features`, regress, pool.
pub fn refine_step<P: Predictor + ?Sized>(
    states: &[DetectionState],
    predictor: &P,
    features: &[Vec<f64>],
    config: &RefinementConfig,
    extent: &ImageExtent,
) -> Result<Vec<DetectionState>> {
    if states.len() != features.len() {
        return Err(Error::Alignment {
            states: states.len(),
            features: features.len(),
        });
    }
    let predictions = features
        .iter()
        .map(|f| predictor.predict(f))
        .collect::<Result<Vec<_>>>()?;
    apply_predictions(states, &predictions, config, extent)
}

/// Runs `config.iterations` refinement steps starting from `proposals`,
/// re-extracting features from the current boxes before every step.
pub fn run_refinement<P: Predictor + ?Sized, S: FeatureSource + ?Sized>(
    proposals: &[BBox],
    predictor: &P,
    features: &mut S,
    config: &RefinementConfig,
    extent: &ImageExtent,
) -> Result<Vec<DetectionState>> {
    if config.iterations < 1 {
        return Err(Error::NoIterations);
    }
    let k = predictor.num_classes();
    let mut states: Vec<_> = proposals.iter().map(|b| DetectionState::initial(*b, k)).collect();
    for _ in 0..config.iterations {
        let boxes: Vec<_> = states.iter().map(|s| s.bbox).collect();
        let feats = features.features(&boxes);
        states = refine_step(&states, predictor, &feats, config, extent)?;
    }
    Ok(states)
}

/// Greedy per-class suppression. Returns the kept detections by descending
/// score; equal scores keep input order.
pub fn nms(states: &[DetectionState], iou_threshold: f64) -> Vec<DetectionState> {
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.sort_by(|&a, &b| states[b].score.total_cmp(&states[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let s = &states[i];
        let suppressed = kept
            .iter()
            .any(|&j| states[j].predicted_class == s.predicted_class && iou(&states[j].bbox, &s.bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| states[i].clone()).collect()
}

/// Drops background and low-scoring states, then suppresses duplicates.
pub fn final_detections(states: &[DetectionState], config: &RefinementConfig) -> Vec<DetectionState> {
    let foreground: Vec<_> = states
        .iter()
        .filter(|s| !s.is_background() && s.score >= config.min_score)
        .cloned()
        .collect();
    nms(&foreground, config.nms_iou_threshold)
}
