//! Group formation and confidence-weighted location pooling.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::refine::DetectionState;

/// Overlap a neighbor must strictly exceed to join a group.
pub const DEFAULT_GROUP_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMember {
    pub bbox: BBox,
    /// Probability of the member's predicted class.
    pub score: f64,
    /// Position of the member in the detection list it came from.
    pub index: usize,
}

/// Collects every detection sharing the target's predicted class whose IoU
/// with the target exceeds `iou_threshold`. The target is always a member.
/// Input order is preserved.
pub fn form_group(target_index: usize, detections: &[DetectionState], iou_threshold: f64) -> Result<Vec<GroupMember>> {
    let target = &detections[target_index];
    if target.predicted_class == 0 {
        return Err(Error::BackgroundHasNoGroup);
    }
    Ok(detections
        .iter()
        .enumerate()
        .filter(|(j, d)| {
            *j == target_index
                || (d.predicted_class == target.predicted_class && iou(&d.bbox, &target.bbox) > iou_threshold)
        })
        .map(|(index, d)| GroupMember {
            bbox: d.bbox,
            score: d.score,
            index,
        })
        .collect())
}

/// Score-weighted mean of the members' boxes, taken independently on each of
/// the four center-form coordinates.
pub fn group_confidence_pool(group: &[GroupMember]) -> Result<BBox> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut acc = [0.0f64; 4];
    let mut total = 0.0;
    for m in group {
        for (a, v) in acc.iter_mut().zip(m.bbox.to_array()) {
            *a += m.score * v;
        }
        total += m.score;
    }
    // also rejects a NaN total
    if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::EmptyGroup);
    }
    let mut pooled = acc.map(|a| a / total);
    // a convex combination cannot leave the members' range, rounding aside
    for (k, p) in pooled.iter_mut().enumerate() {
        let (lo, hi) = group.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            let v = m.bbox.to_array()[k];
            (lo.min(v), hi.max(v))
        });
        *p = p.clamp(lo, hi);
    }
    BBox::from_array(pooled)
}
