//! PASCAL-style average precision and a simplified false-positive taxonomy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Overlap below which a detection is considered unrelated to an object.
pub const CONFUSION_IOU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class: usize,
    pub bbox: BBox,
    /// Matched difficult objects count neither as hits nor as misses.
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    /// VOC2007 11-point interpolation.
    #[serde(rename = "11point")]
    ElevenPoint,
    /// Area under the interpolated precision envelope.
    #[serde(rename = "area")]
    Area,
}

impl ApMode {
    pub fn name(&self) -> &'static str {
        match self {
            ApMode::ElevenPoint => "11point",
            ApMode::Area => "area",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "11point" => Some(ApMode::ElevenPoint),
            "area" => Some(ApMode::Area),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Indices of `dets` by descending score, input order on ties.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy score-order matching. Returns per-detection outcomes in score order.
fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<(usize, Outcome)> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    score_order(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_image.get(det.image_id.as_str()).map_or(&[][..], |v| v.as_slice()) {
                if matched[g] {
                    continue;
                }
                let v = iou(&det.bbox, &gts[g].bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            let outcome = match best {
                Some((g, v)) if v >= iou_threshold => {
                    if gts[g].difficult {
                        Outcome::Ignored
                    } else {
                        matched[g] = true;
                        Outcome::Tp
                    }
                }
                _ => Outcome::Fp,
            };
            (d, outcome)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Precision and recall after each counted detection in score order.
/// Both inputs must already be restricted to one class.
pub fn precision_recall(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> PrCurve {
    let positives = gts.iter().filter(|g| !g.difficult).count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve {
        recall: Vec::new(),
        precision: Vec::new(),
    };
    for (_, outcome) in match_detections(dets, gts, iou_threshold) {
        match outcome {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        curve.recall.push(tp as f64 / positives.max(1) as f64);
        curve.precision.push(tp as f64 / (tp + fp) as f64);
    }
    curve
}

fn ap_from_curve(curve: &PrCurve, mode: ApMode) -> f64 {
    match mode {
        ApMode::ElevenPoint => {
            let mut total = 0.0;
            for i in 0..=10 {
                let t = i as f64 / 10.0;
                let p = curve
                    .recall
                    .iter()
                    .zip(&curve.precision)
                    .filter(|(r, _)| **r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
        ApMode::Area => {
            let mut mrec = vec![0.0];
            mrec.extend(&curve.recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&curve.precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    }
}

/// AP of one class. `class` is only used for error reporting.
pub fn average_precision(
    class: usize,
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
    mode: ApMode,
) -> Result<f64> {
    if !gts.iter().any(|g| !g.difficult) {
        return Err(Error::UndefinedAp(class));
    }
    Ok(ap_from_curve(&precision_recall(dets, gts, iou_threshold), mode))
}

/// Arithmetic mean over the classes with a defined AP.
pub fn mean_ap(per_class: &BTreeMap<usize, Option<f64>>) -> Result<f64> {
    let defined: Vec<f64> = per_class.values().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(Error::NoEvaluableClasses);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FpTaxonomy {
    /// Correct detections.
    pub cor: usize,
    /// Right class, poorly localized or duplicate.
    pub loc: usize,
    /// Overlaps an object of a different class.
    pub oth: usize,
    /// Overlaps nothing.
    pub bg: usize,
}

impl FpTaxonomy {
    pub fn total(&self) -> usize {
        self.cor + self.loc + self.oth + self.bg
    }
}

/// Bins the `top_n` highest-scoring detections of `class`. `dets` and `gts`
/// span all classes.
pub fn diagnose_false_positives(
    class: usize,
    dets: &[Detection],
    gts: &[GroundTruth],
    top_n: usize,
    iou_threshold: f64,
) -> FpTaxonomy {
    let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
    let class_gts: Vec<GroundTruth> = gts.iter().filter(|g| g.class == class).cloned().collect();
    let max_overlap = |d: &Detection, same: bool| {
        gts.iter()
            .filter(|g| g.image_id == d.image_id && (g.class == class) == same)
            .map(|g| iou(&d.bbox, &g.bbox))
            .fold(0.0, f64::max)
    };
    let mut tax = FpTaxonomy::default();
    for (d, outcome) in match_detections(&class_dets, &class_gts, iou_threshold)
        .into_iter()
        .filter(|(_, o)| *o != Outcome::Ignored)
        .take(top_n)
    {
        let det = &class_dets[d];
        if outcome == Outcome::Tp {
            tax.cor += 1;
        } else if max_overlap(det, true) >= CONFUSION_IOU {
            tax.loc += 1;
        } else if max_overlap(det, false) >= CONFUSION_IOU {
            tax.oth += 1;
        } else {
            tax.bg += 1;
        }
    }
    tax
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// AP per class; `None` for classes without ground truth.
    pub per_class_ap: BTreeMap<usize, Option<f64>>,
    pub map: f64,
    pub mode: ApMode,
    pub iou_threshold: f64,
    pub fp_taxonomy: BTreeMap<usize, FpTaxonomy>,
}

/// Scores detections of classes `1..=num_classes`. With no evaluable class
/// the mAP is reported as 0.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> EvalReport {
    let mut per_class_ap = BTreeMap::new();
    let mut fp_taxonomy = BTreeMap::new();
    for class in 1..=num_classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
        let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class == class).cloned().collect();
        per_class_ap.insert(class, average_precision(class, &cd, &cg, iou_threshold, mode).ok());
        let n = cg.iter().filter(|g| !g.difficult).count();
        fp_taxonomy.insert(class, diagnose_false_positives(class, dets, gts, n, iou_threshold));
    }
    let map = mean_ap(&per_class_ap).unwrap_or(0.0);
    EvalReport {
        per_class_ap,
        map,
        mode,
        iou_threshold,
        fp_taxonomy,
    }
}

fn class_name(names: &[String], class: usize) -> String {
    names
        .get(class.wrapping_sub(1))
        .cloned()
        .unwrap_or_else(|| format!("class{class}"))
}

impl EvalReport {
    /// Per-class AP table with an mAP footer.
    pub fn render_table(&self, names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8}", "class", "AP");
        for (class, ap) in &self.per_class_ap {
            let v = ap.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{:<16} {:>8}", class_name(names, *class), v);
        }
        let _ = writeln!(out, "{:-<25}", "");
        let _ = writeln!(
            out,
            "{:<16} {:>8.4}  ({}, IoU {})",
            "mAP",
            self.map,
            self.mode.name(),
            self.iou_threshold
        );
        out
    }

    /// Per-class counts of correct, localization, other-class and
    /// background detections among the top-ranked ones.
    pub fn render_taxonomy(&self, names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>6}",
            "class", "Cor", "Loc", "Oth", "BG"
        );
        for (class, t) in &self.fp_taxonomy {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>6}",
                class_name(names, *class),
                t.cor,
                t.loc,
                t.oth,
                t.bg
            );
        }
        out
    }

    /// `key=value` lines for scripts.
    pub fn render_key_values(&self, names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode={}", self.mode.name());
        let _ = writeln!(out, "iou_threshold={}", self.iou_threshold);
        for (class, ap) in &self.per_class_ap {
            let name = class_name(names, *class);
            match ap {
                Some(v) => {
                    let _ = writeln!(out, "ap.{name}={v:.6}");
                }
                None => {
                    let _ = writeln!(out, "ap.{name}=undefined");
                }
            }
        }
        for (class, t) in &self.fp_taxonomy {
            let name = class_name(names, *class);
            let _ = writeln!(out, "fp.{name}.cor={}", t.cor);
            let _ = writeln!(out, "fp.{name}.loc={}", t.loc);
            let _ = writeln!(out, "fp.{name}.oth={}", t.oth);
            let _ = writeln!(out, "fp.{name}.bg={}", t.bg);
        }
        let _ = writeln!(out, "map={:.6}", self.map);
        out
    }
}
