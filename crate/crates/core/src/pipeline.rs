//! End-to-end glue shared by the command-line tool and the test suites:
//! converting between scenes and file records, refining and scoring a split,
//! and the iteration-count ablation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Detection, EvalReport, GroundTruth};
use crate::geometry::BBox;
use crate::io::{AnnotatedObject, AnnotationRecord, DetectionRecord, EvalConfig};
use crate::model::{sgd_train, PredictorModel, TrainConfig, TrainOutcome, TrainingScene};
use crate::refine::{final_detections, run_refinement, DetectionState, RefinementConfig};
use crate::synthdata::{generate_scenes, sample_proposals, Scene, SceneFeatures, SceneObject, SynthConfig};

/// Noise key for features extracted at evaluation time.
pub const EVAL_FEATURE_KEY: u64 = 0;

pub fn class_names(num_classes: usize) -> Vec<String> {
    (1..=num_classes).map(|k| format!("class{k}")).collect()
}

fn class_index(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .map(|i| i + 1)
        .ok_or_else(|| Error::Schema(format!("unknown class `{name}`")))
}

/// A scene with its proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub scene: Scene,
    pub proposals: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Vec<LabeledScene>,
    pub test: Vec<LabeledScene>,
}

impl Benchmark {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let scenes = generate_scenes(cfg)?;
        let mut labeled: Vec<LabeledScene> = scenes
            .into_iter()
            .map(|scene| {
                let proposals = sample_proposals(&scene, cfg);
                LabeledScene { scene, proposals }
            })
            .collect();
        let test = labeled.split_off(cfg.train_scenes);
        Ok(Self { train: labeled, test })
    }

    pub fn training_set(&self) -> Vec<TrainingScene> {
        self.train
            .iter()
            .map(|l| TrainingScene {
                scene: l.scene.clone(),
                proposals: l.proposals.clone(),
            })
            .collect()
    }
}

pub fn scene_to_annotation(scene: &Scene, names: &[String]) -> AnnotationRecord {
    AnnotationRecord {
        image_id: scene.image_id(),
        extent: scene.extent,
        objects: scene
            .objects
            .iter()
            .map(|o| AnnotatedObject {
                name: names[o.class - 1].clone(),
                corners: o.bbox.corners(),
                difficult: false,
            })
            .collect(),
    }
}

/// Rebuilds a scene from its annotation. The scene id is the numeric image id.
pub fn annotation_to_scene(record: &AnnotationRecord, names: &[String]) -> Result<Scene> {
    let id = record
        .image_id
        .parse::<u64>()
        .map_err(|_| Error::Schema(format!("image id `{}` is not numeric", record.image_id)))?;
    let objects = record
        .objects
        .iter()
        .map(|o| {
            Ok(SceneObject {
                class: class_index(names, &o.name)?,
                bbox: o.corners.to_bbox()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        id,
        extent: record.extent,
        objects,
    })
}

pub fn ground_truths(records: &[AnnotationRecord], names: &[String]) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for r in records {
        for o in &r.objects {
            out.push(GroundTruth {
                image_id: r.image_id.clone(),
                class: class_index(names, &o.name)?,
                bbox: o.corners.to_bbox()?,
                difficult: o.difficult,
            });
        }
    }
    Ok(out)
}

pub fn scene_ground_truths(scenes: &[&Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GroundTruth {
                image_id: s.image_id(),
                class: o.class,
                bbox: o.bbox,
                difficult: false,
            })
        })
        .collect()
}

pub fn detection_records(image_id: &str, states: &[DetectionState], names: &[String]) -> Vec<DetectionRecord> {
    states
        .iter()
        .filter(|s| s.predicted_class >= 1)
        .map(|s| DetectionRecord {
            image_id: image_id.to_string(),
            class_name: names[s.predicted_class - 1].clone(),
            score: s.score,
            corners: s.bbox.corners(),
        })
        .collect()
}

pub fn records_to_detections(records: &[DetectionRecord], names: &[String]) -> Result<Vec<Detection>> {
    records
        .iter()
        .map(|r| {
            Ok(Detection {
                image_id: r.image_id.clone(),
                class: class_index(names, &r.class_name)?,
                score: r.score,
                bbox: r.corners.to_bbox()?,
            })
        })
        .collect()
}

/// Refinement output for one scene: the full per-proposal states and the
/// suppressed final detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub image_id: String,
    pub states: Vec<DetectionState>,
    pub detections: Vec<DetectionState>,
}

pub fn refine_scene(
    model: &PredictorModel,
    item: &LabeledScene,
    synth: &SynthConfig,
    refine: &RefinementConfig,
) -> Result<SceneResult> {
    let mut src = SceneFeatures::new(&item.scene, synth, EVAL_FEATURE_KEY);
    let states = run_refinement(&item.proposals, model, &mut src, refine, &item.scene.extent)?;
    let detections = final_detections(&states, refine);
    Ok(SceneResult {
        image_id: item.scene.image_id(),
        states,
        detections,
    })
}

pub fn refine_split(
    model: &PredictorModel,
    items: &[LabeledScene],
    synth: &SynthConfig,
    refine: &RefinementConfig,
) -> Result<Vec<SceneResult>> {
    items.iter().map(|i| refine_scene(model, i, synth, refine)).collect()
}

pub fn evaluate_results(
    results: &[SceneResult],
    items: &[LabeledScene],
    num_classes: usize,
    eval: &EvalConfig,
) -> EvalReport {
    let dets: Vec<Detection> = results
        .iter()
        .flat_map(|r| {
            r.detections.iter().map(|s| Detection {
                image_id: r.image_id.clone(),
                class: s.predicted_class,
                score: s.score,
                bbox: s.bbox,
            })
        })
        .collect();
    let scenes: Vec<&Scene> = items.iter().map(|i| &i.scene).collect();
    evaluate(
        &dets,
        &scene_ground_truths(&scenes),
        num_classes,
        eval.iou_threshold,
        eval.mode,
    )
}

/// Scenes and proposals grouped by image id, in annotation order.
pub fn assemble_split(
    annotations: &[AnnotationRecord],
    proposals: &[(String, crate::geometry::CornerBox)],
    names: &[String],
) -> Result<Vec<LabeledScene>> {
    let mut by_image: HashMap<&str, Vec<BBox>> = HashMap::new();
    for (id, c) in proposals {
        by_image.entry(id.as_str()).or_default().push(c.to_bbox()?);
    }
    annotations
        .iter()
        .map(|a| {
            Ok(LabeledScene {
                scene: annotation_to_scene(a, names)?,
                proposals: by_image.remove(a.image_id.as_str()).unwrap_or_default(),
            })
        })
        .collect()
}

/// mAP of the three iteration-count variants on one benchmark seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub iou_threshold: f64,
    /// Trained and tested with one iteration.
    pub iter1: f64,
    /// Trained and tested with `T` iterations.
    pub iter2: f64,
    /// Trained with one iteration, tested with `T`.
    pub iter2_testing: f64,
}

/// Trains the one-iteration and `T`-iteration models on a benchmark drawn
/// with `seed` and scores the three variants on its test split, once per
/// entry of `evals`.
pub fn run_ablation(
    synth: &SynthConfig,
    train: &TrainConfig,
    refine: &RefinementConfig,
    evals: &[EvalConfig],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let synth = SynthConfig { seed, ..synth.clone() };
    let bench = Benchmark::generate(&synth)?;
    let data = bench.training_set();
    let depth = refine.iterations.max(2);

    let single = TrainConfig {
        seed,
        unroll_depth: 1,
        ..train.clone()
    };
    let unrolled = TrainConfig {
        seed,
        unroll_depth: depth,
        ..train.clone()
    };
    let TrainOutcome { model: m1, .. } = sgd_train(&data, &synth, &single, refine)?;
    let TrainOutcome { model: m2, .. } = sgd_train(&data, &synth, &unrolled, refine)?;

    let run = |model: &PredictorModel, iterations: usize| {
        let cfg = RefinementConfig {
            iterations,
            ..refine.clone()
        };
        refine_split(model, &bench.test, &synth, &cfg)
    };
    let (r1, r2, r2t) = (run(&m1, 1)?, run(&m2, depth)?, run(&m1, depth)?);
    Ok(evals
        .iter()
        .map(|eval| {
            let score = |results: &[SceneResult]| evaluate_results(results, &bench.test, synth.num_classes, eval).map;
            AblationRow {
                seed,
                iou_threshold: eval.iou_threshold,
                iter1: score(&r1),
                iter2: score(&r2),
                iter2_testing: score(&r2t),
            }
        })
        .collect())
}
