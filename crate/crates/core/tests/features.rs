use grouprefine::geometry::{encode, BBox};
use grouprefine::model::{sgd_train, TrainConfig};
use grouprefine::pipeline::Benchmark;
use grouprefine::refine::{FeatureSource, Predictor, RefinementConfig};
use grouprefine::synthdata::{keyed_rng, synthesize_features, FeatureLayout, SceneFeatures, SynthConfig};
use nalgebra::{DMatrix, DVector};

/// Positive proposals of the training split with their exact offsets.
fn positives(cfg: &SynthConfig) -> Vec<(Vec<f64>, [f64; 4])> {
    let bench = Benchmark::generate(cfg).unwrap();
    let mut rng = keyed_rng(0, 0, 0);
    let mut out = Vec::new();
    for item in &bench.train {
        for p in &item.proposals {
            if let Some((i, v)) = item.scene.best_match(p) {
                if v >= 0.5 {
                    let target = encode(p, &item.scene.objects[i].bbox).to_array();
                    out.push((synthesize_features(p, &item.scene, cfg, &mut rng), target));
                }
            }
        }
    }
    out
}

#[test]
fn noiseless_offsets_are_linearly_recoverable() {
    let cfg = SynthConfig {
        feature_noise: 0.0,
        ..SynthConfig::default()
    };
    let data = positives(&cfg);
    assert!(data.len() > 1000);
    let f = cfg.feature_dim;
    let x = DMatrix::from_fn(data.len(), f + 1, |r, c| if c == f { 1.0 } else { data[r].0[c] });
    let svd = x.clone().svd(true, true);
    let mut worst = 0.0f64;
    for coord in 0..4 {
        let y = DVector::from_fn(data.len(), |r, _| data[r].1[coord]);
        let w = svd.solve(&y, 1e-12).unwrap();
        let residual = (&x * w - &y).amax();
        worst = worst.max(residual);
    }
    assert!(worst < 1e-8, "least-squares residual {worst:e}");
}

#[test]
fn offset_slots_hold_the_encoding_exactly() {
    let cfg = SynthConfig {
        feature_noise: 0.0,
        ..SynthConfig::default()
    };
    let layout = FeatureLayout::new(cfg.num_classes);
    for (features, target) in positives(&cfg).iter().take(200) {
        assert_eq!(&features[layout.offsets()], target);
    }
}

#[test]
fn trained_model_classifies_held_out_positives() {
    let synth = SynthConfig::default();
    let bench = Benchmark::generate(&synth).unwrap();
    let model = sgd_train(
        &bench.training_set(),
        &synth,
        &TrainConfig::default(),
        &RefinementConfig::default(),
    )
    .unwrap()
    .model;
    let (mut correct, mut total) = (0usize, 0usize);
    for item in &bench.test {
        let boxes: Vec<BBox> = item.proposals.clone();
        let feats = SceneFeatures::new(&item.scene, &synth, 0).features(&boxes);
        for (b, f) in boxes.iter().zip(&feats) {
            let Some((i, v)) = item.scene.best_match(b) else {
                continue;
            };
            if v < 0.5 {
                continue;
            }
            let probs = model.predict(f).unwrap().class_probs;
            let argmax = (0..probs.len()).fold(0, |a, k| if probs[k] > probs[a] { k } else { a });
            total += 1;
            correct += usize::from(argmax == item.scene.objects[i].class);
        }
    }
    let accuracy = correct as f64 / total as f64;
    assert!(total > 200);
    assert!(accuracy >= 0.9, "accuracy {accuracy:.3} on {total} positives");
}
