//! Seeded synthetic scenes, jittered proposals and proposal features.
//!
//! Every random draw comes from a generator keyed by `(seed, scene id,
//! stream)`, so scenes can be produced independently of each other and in
//! any order with identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip, encode, iou, BBox, ImageExtent};
use crate::model::normalize_features;
use crate::refine::FeatureSource;

/// Same-class objects in one scene never overlap more than this.
pub const MAX_SAME_CLASS_IOU: f64 = 0.3;

const STREAM_SCENE: u64 = 1;
const STREAM_PROPOSALS: u64 = 2;
const STREAM_FEATURES: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    /// Class in `1..=K`.
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub extent: ImageExtent,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn image_id(&self) -> String {
        format!("{:06}", self.id)
    }

    /// Horizontal mirror image of the scene.
    pub fn mirrored(&self) -> Scene {
        let w = self.extent.width();
        Scene {
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    class: o.class,
                    bbox: o.bbox.mirrored(w),
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Index and IoU of the best-overlapping object, if any overlaps at all.
    /// Ties go to the earlier object.
    pub fn best_match(&self, b: &BBox) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            let v = iou(b, &o.bbox);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: [usize; 2],
    /// Inclusive range of object side lengths in pixels.
    pub object_size: [f64; 2],
    pub proposals_per_object: usize,
    /// Center jitter as a fraction of the object's width/height.
    pub center_jitter: f64,
    /// Standard deviation of the log-size jitter.
    pub log_size_sigma: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub max_placement_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_scenes: 200,
            test_scenes: 50,
            image_width: 320.0,
            image_height: 240.0,
            objects_per_scene: [1, 3],
            object_size: [32.0, 128.0],
            proposals_per_object: 8,
            center_jitter: 0.15,
            log_size_sigma: 0.15,
            feature_dim: 16,
            feature_noise: 0.05,
            max_placement_attempts: 200,
            seed: 2017,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: format!("synth.{key}"),
            message,
        };
        if self.num_classes < 1 {
            return Err(bad("num_classes", "must be at least 1".into()));
        }
        if self.train_scenes + self.test_scenes < 1 {
            return Err(bad("train_scenes", "at least one scene is required".into()));
        }
        if self.objects_per_scene[0] < 1 || self.objects_per_scene[0] > self.objects_per_scene[1] {
            return Err(bad("objects_per_scene", "need 1 <= min <= max".into()));
        }
        let [lo, hi] = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi <= self.image_width.min(self.image_height)) {
            return Err(bad("object_size", "need 0 < min <= max <= image side".into()));
        }
        if self.proposals_per_object < 1 {
            return Err(bad("proposals_per_object", "must be at least 1".into()));
        }
        for (key, v) in [
            ("center_jitter", self.center_jitter),
            ("log_size_sigma", self.log_size_sigma),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, "must be finite and non-negative".into()));
            }
        }
        let min_dim = FeatureLayout::new(self.num_classes).min_dim();
        if self.feature_dim < min_dim {
            return Err(bad(
                "feature_dim",
                format!("must be at least {min_dim} for {} classes", self.num_classes),
            ));
        }
        if self.max_placement_attempts < 1 {
            return Err(bad("max_placement_attempts", "must be at least 1".into()));
        }
        self.extent()?;
        Ok(())
    }

    pub fn extent(&self) -> Result<ImageExtent> {
        ImageExtent::new(self.image_width, self.image_height)
    }

    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.test_scenes
    }
}

/// Positions of the feature sub-vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub num_classes: usize,
}

impl FeatureLayout {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes }
    }

    pub fn geometry(&self) -> std::ops::Range<usize> {
        0..4
    }

    pub fn class_indicator(&self) -> std::ops::Range<usize> {
        4..4 + self.num_classes
    }

    pub fn offsets(&self) -> std::ops::Range<usize> {
        let s = 4 + self.num_classes;
        s..s + 4
    }

    /// A constant channel keeping the feature norm away from zero.
    pub fn bias(&self) -> usize {
        8 + self.num_classes
    }

    pub fn min_dim(&self) -> usize {
        self.bias() + 1
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one `(seed, key, stream)` triple.
pub fn keyed_rng(seed: u64, key: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ key) ^ stream))
}

/// Generates one scene with the given id.
pub fn generate_scene(cfg: &SynthConfig, id: u64) -> Result<Scene> {
    let extent = cfg.extent()?;
    let mut rng = keyed_rng(cfg.seed, id, STREAM_SCENE);
    let [min_n, max_n] = cfg.objects_per_scene;
    let count = rng.random_range(min_n..=max_n);
    let [lo, hi] = cfg.object_size;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for object in 0..count {
        let class = rng.random_range(1..=cfg.num_classes);
        let mut placed = None;
        for _ in 0..cfg.max_placement_attempts {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let cx = rng.random_range(0.5 * w..=extent.width() - 0.5 * w);
            let cy = rng.random_range(0.5 * h..=extent.height() - 0.5 * h);
            let b = BBox::new(cx, cy, w, h)?;
            let clash = objects
                .iter()
                .any(|o| o.class == class && iou(&o.bbox, &b) > MAX_SAME_CLASS_IOU);
            if !clash {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or(Error::SceneTooCrowded { scene: id, object })?;
        objects.push(SceneObject { class, bbox });
    }
    Ok(Scene { id, extent, objects })
}

/// All scenes, ids `0..train_scenes + test_scenes`; the first `train_scenes`
/// form the training split.
pub fn generate_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.total_scenes() as u64)
        .map(|id| generate_scene(cfg, id))
        .collect()
}

/// Jittered proposals around each object followed by as many uniformly
/// placed background boxes, all clipped to the image.
pub fn sample_proposals(scene: &Scene, cfg: &SynthConfig) -> Vec<BBox> {
    let mut rng = keyed_rng(cfg.seed, scene.id, STREAM_PROPOSALS);
    let mut out = Vec::new();
    for o in &scene.objects {
        for _ in 0..cfg.proposals_per_object {
            let ux: f64 = rng.random_range(-1.0..=1.0);
            let uy: f64 = rng.random_range(-1.0..=1.0);
            let nw: f64 = rng.sample(StandardNormal);
            let nh: f64 = rng.sample(StandardNormal);
            let b = BBox::new(
                o.bbox.cx() + ux * cfg.center_jitter * o.bbox.w(),
                o.bbox.cy() + uy * cfg.center_jitter * o.bbox.h(),
                o.bbox.w() * (nw * cfg.log_size_sigma).exp(),
                o.bbox.h() * (nh * cfg.log_size_sigma).exp(),
            );
            if let Some(b) = b.ok().and_then(|b| clip(&b, &scene.extent).ok()) {
                out.push(b);
            }
        }
    }
    let background = scene.objects.len() * cfg.proposals_per_object;
    let [lo, hi] = cfg.object_size;
    let (ew, eh) = (scene.extent.width(), scene.extent.height());
    for _ in 0..background {
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let cx = rng.random_range(0.5 * w..=ew - 0.5 * w);
        let cy = rng.random_range(0.5 * h..=eh - 0.5 * h);
        if let Ok(b) = BBox::new(cx, cy, w, h) {
            out.push(b);
        }
    }
    out
}

/// The raw (unnormalized) feature vector of one proposal.
///
/// Layout per [`FeatureLayout`]: normalized geometry, the best-matching
/// object's class indicator scaled by its IoU, the exact offsets onto that
/// object, a constant channel, then noise-only padding. Gaussian noise of
/// `cfg.feature_noise` is added to every entry.
pub fn synthesize_features<R: Rng + ?Sized>(
    proposal: &BBox,
    scene: &Scene,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Vec<f64> {
    let layout = FeatureLayout::new(cfg.num_classes);
    let mut v = vec![0.0; cfg.feature_dim];
    let (ew, eh) = (scene.extent.width(), scene.extent.height());
    v[0] = proposal.cx() / ew;
    v[1] = proposal.cy() / eh;
    v[2] = proposal.w() / ew;
    v[3] = proposal.h() / eh;
    if let Some((i, overlap)) = scene.best_match(proposal) {
        let o = &scene.objects[i];
        v[layout.class_indicator().start + o.class - 1] = overlap;
        let r = encode(proposal, &o.bbox).to_array();
        v[layout.offsets()].copy_from_slice(&r);
    }
    v[layout.bias()] = 1.0;
    if cfg.feature_noise > 0.0 {
        for x in v.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *x += cfg.feature_noise * n;
        }
    }
    v
}

/// Conditioned features for the boxes of one scene, drawing noise from a
/// generator keyed by the scene and a caller-chosen key.
pub struct SceneFeatures<'a> {
    scene: &'a Scene,
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl<'a> SceneFeatures<'a> {
    /// `key` separates independent noise streams for the same scene
    /// (e.g. evaluation vs. each training step).
    pub fn new(scene: &'a Scene, cfg: &'a SynthConfig, key: u64) -> Self {
        let rng = keyed_rng(cfg.seed ^ splitmix(key), scene.id, STREAM_FEATURES);
        Self { scene, cfg, rng }
    }
}

impl FeatureSource for SceneFeatures<'_> {
    fn features(&mut self, boxes: &[BBox]) -> Vec<Vec<f64>> {
        boxes
            .iter()
            .map(|b| normalize_features(&synthesize_features(b, self.scene, self.cfg, &mut self.rng)))
            .collect()
    }
}
