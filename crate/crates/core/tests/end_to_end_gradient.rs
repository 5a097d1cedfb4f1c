use srt_core::detector::batch::{Batch, Quadruplet, Triplet};
use srt_core::detector::train::{labeled_from_scene, step_objective, FlowSource, TrainConfig, TrainingData, VideoData};
use srt_core::detector::{ArchConfig, Detector, DetectorConfig, DetectorMode};
use srt_core::flow::TrackerKind;
use srt_core::rng::StreamKey;
use srt_core::supervision::{LossWeights, Thresholds};
use srt_core::synth::{generate_scene, SceneConfig};

use rand::Rng;

fn micro_data(size: usize) -> TrainingData {
    let scene = generate_scene(&SceneConfig {
        landmarks: 3,
        views: 4,
        frames: 2,
        seed: 5,
        ..SceneConfig::default()
    })
    .unwrap();
    let mut video = VideoData::from_scene(&scene, size).unwrap();
    video.prepare_flows(FlowSource::Gt, &Default::default()).unwrap();
    TrainingData {
        labeled: labeled_from_scene(&scene, 1.0, 1.0, StreamKey::root(2)).unwrap(),
        video: Some(video),
        crop_size: size,
    }
}

fn batch() -> Batch {
    Batch {
        labeled: vec![0, 5],
        triplets: (0..4).map(|view| Triplet { view, start: 0 }).collect(),
        quadruplets: vec![
            Quadruplet {
                frame: 0,
                views: vec![0, 1, 2, 3],
            },
            Quadruplet {
                frame: 1,
                views: vec![2, 0, 3, 1],
            },
        ],
    }
}

fn check(mode: DetectorMode, tracker: TrackerKind) {
    let size = 16;
    let data = micro_data(size);
    let det_cfg = DetectorConfig {
        mode,
        landmarks: 3,
        arch: ArchConfig {
            input_size: size,
            conv1: 3,
            conv2: 4,
            hidden: 8,
        },
        temperature: 1.0,
        ..DetectorConfig::default()
    };
    let mut det = Detector::init(det_cfg, StreamKey::root(7)).unwrap();
    // Loose thresholds keep every mask on so all terms carry gradient.
    let cfg = TrainConfig {
        tracker,
        thresholds: Thresholds {
            t_fb_frac: 10.0,
            t_d_frac: 10.0,
            t_tri_frac: 10.0,
        },
        ..TrainConfig::default()
    };
    let w = LossWeights::new(0.7, 0.4).unwrap();
    let key = StreamKey::root(9);
    let b = batch();
    let base = step_objective(&det, &data, &b, key, &cfg, &w, None).unwrap();
    assert!(base.l_sbr > 0.0 && base.l_sbt > 0.0, "{} {}", base.l_sbr, base.l_sbt);
    let on = base.masks.sbr.iter().flatten().flatten().filter(|f| **f).count();
    assert!(on >= 8, "only {on} registration flags on");
    assert!(base.masks.sbt.iter().flatten().flatten().all(|f| *f));

    let n = det.param_count();
    let mut rng = StreamKey::root(3).rng();
    let mut idx: Vec<usize> = (0..n).filter(|i| i % 7 == 0).collect();
    idx.extend((0..40).map(|_| rng.gen_range(0..n)));
    let h = 1e-5;
    let mut checked = 0;
    let mut bad = Vec::new();
    for &i in &idx {
        let orig = det.params()[i];
        det.params_mut()[i] = orig + h;
        let up = step_objective(&det, &data, &b, key, &cfg, &w, Some(&base.masks))
            .unwrap()
            .total;
        det.params_mut()[i] = orig - h;
        let down = step_objective(&det, &data, &b, key, &cfg, &w, Some(&base.masks))
            .unwrap()
            .total;
        det.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = base.grads[i];
        let scale = fd.abs().max(an.abs());
        checked += 1;
        if scale > 1e-6 && (fd - an).abs() > 1e-2 * scale {
            bad.push((i, fd, an));
        }
    }
    // A stray L1 or ReLU kink inside the step can spoil an isolated entry.
    assert!(
        bad.len() * 50 <= checked,
        "{mode:?}/{tracker:?}: {} of {checked} mismatched: {bad:?}",
        bad.len()
    );
}

#[test]
fn regression_lk_matches_finite_differences() {
    check(DetectorMode::Regression, TrackerKind::Lk);
}

#[test]
fn regression_interp_matches_finite_differences() {
    check(DetectorMode::Regression, TrackerKind::Interp);
}

#[test]
fn heatmap_matches_finite_differences() {
    check(DetectorMode::Heatmap, TrackerKind::Lk);
}
