//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p srt-cli --test acceptance -- 1 4 9` runs a subset.
//! A failing criterion is reported but only fails the process when
//! `SRT_ACCEPTANCE_STRICT=1` is set.

#![allow(clippy::needless_range_loop)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use srt_core::camera::{
    project, triangulate_dlt, triangulation_jacobian, CameraMatrix, Landmark3D, Mat3, Vec3, ViewObservationSet,
};
use srt_core::detector::batch::{Batch, Quadruplet, Triplet};
use srt_core::detector::train::{
    labeled_from_scene, step_objective, train, FlowSource, TrainConfig, TrainState, TrainingData, VideoData,
};
use srt_core::detector::{soft_argmax, ArchConfig, Detector, DetectorConfig, DetectorMode};
use srt_core::experiment::{flowcheck, generate_benchmark, run_pipeline, ExperimentConfig, Mode};
use srt_core::flow::{
    forward_backward_check, lk_track_gradient, track_landmark_lk, warp_field_adjoint, warp_field_by_flow, FlowField,
    PatchSpec, TrackerKind,
};
use srt_core::rng::{StreamKey, StreamRng};
use srt_core::supervision::{
    detection_loss_heatmap, detection_loss_regression, sbr_loss_coords, sbr_loss_heatmap, sbt_loss_coords,
    sbt_loss_heatmap, sbt_multiview, sbt_multiview_masked, HeatmapSet, LandmarkSet, LossWeights, Thresholds,
};
use srt_core::synth::{generate_scene, SceneConfig};
use srt_core::tensor::{Point2D, ScalarField};

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;
type PairGrads = (f64, Vec<[f64; 2]>, Vec<[f64; 2]>);

fn rng(label: &str) -> StreamRng {
    StreamKey::root(20240611).named(label).rng()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------- geometry

fn look_at(focal: f64, center: Vec3) -> CameraMatrix {
    let n = |v: Vec3| {
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    };
    let cross = |a: Vec3, b: Vec3| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let z = n([-center[0], -center[1], -center[2]]);
    let x = n(cross([0.0, 1.0, 0.0], z));
    let y = cross(z, x);
    let r: Mat3 = [x, y, z];
    let t = [
        -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
        -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
        -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
    ];
    CameraMatrix::from_pose(focal, 320.0, 240.0, &r, &t).unwrap()
}

fn random_rig(rng: &mut StreamRng, views: usize) -> Vec<CameraMatrix> {
    (0..views)
        .map(|_| {
            let az = rng.gen_range(-1.2..1.2);
            let el = rng.gen_range(-0.5..0.5);
            let d = rng.gen_range(4.0..8.0);
            let c = [
                d * f64::cos(el) * f64::sin(az),
                d * f64::sin(el),
                -d * f64::cos(el) * f64::cos(az),
            ];
            look_at(500.0, c)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut rng = rng("geometry");
    let mut worst_round = 0.0f64;
    let mut worst_jac = 0.0f64;
    let sizes = [2, 3, 4, 7];
    for s in 0..1000 {
        let views = sizes[s % sizes.len()];
        let cams = random_rig(&mut rng, views);
        let x = Landmark3D {
            position: [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
        };
        let pts: Vec<Point2D> = cams.iter().map(|c| project(c, &x).unwrap()).collect();
        let obs = ViewObservationSet::new(cams.clone(), pts.clone()).map_err(|e| e.to_string())?;
        let back = triangulate_dlt(&obs).map_err(|e| format!("scene {s}: {e}"))?;
        let err = (0..3)
            .map(|i| (back.position[i] - x.position[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        worst_round = worst_round.max(err);
        if s < 200 {
            let jac = triangulation_jacobian(&obs).map_err(|e| e.to_string())?;
            let h = 1e-5;
            let (mut diff, mut norm) = (0.0, 0.0);
            for m in 0..views {
                for c in 0..2 {
                    let at = |delta: f64| {
                        let mut p = pts.clone();
                        if c == 0 {
                            p[m].x += delta;
                        } else {
                            p[m].y += delta;
                        }
                        triangulate_dlt(&ViewObservationSet::new(cams.clone(), p).unwrap())
                            .unwrap()
                            .position
                    };
                    let (up, down) = (at(h), at(-h));
                    for i in 0..3 {
                        let fd = (up[i] - down[i]) / (2.0 * h);
                        diff += (fd - jac[m][i][c]).powi(2);
                        norm += fd * fd;
                    }
                }
            }
            worst_jac = worst_jac.max(diff.sqrt() / norm.sqrt().max(1e-12));
        }
    }
    let detail = format!("max round trip {worst_round:.2e}, max Jacobian rel err {worst_jac:.2e}");
    if worst_round < 1e-8 && worst_jac < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- LK

struct Blobs(Vec<(f64, f64, f64, f64)>);

impl Blobs {
    fn random(rng: &mut StreamRng, n: usize, size: f64) -> Self {
        Blobs(
            (0..n)
                .map(|_| {
                    (
                        rng.gen_range(-4.0..size + 4.0),
                        rng.gen_range(-4.0..size + 4.0),
                        rng.gen_range(2.5..4.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
    }

    fn render(&self, size: usize, dx: f64, dy: f64) -> ScalarField {
        ScalarField::from_fn(size, size, |x, y| {
            let (x, y) = (x as f64 - dx, y as f64 - dy);
            self.0
                .iter()
                .map(|(cx, cy, s, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                .sum()
        })
    }
}

fn criterion_2() -> Outcome {
    let spec = PatchSpec::default();
    if spec.side != 13 || spec.max_iterations != 20 || spec.convergence_eps != 1e-6 {
        return Err(format!("unexpected tracker settings {spec:?}"));
    }
    let mut rng = rng("lk");
    let size = 48;
    let mut worst_identity = 0.0f64;
    for _ in 0..10 {
        let img = Blobs::random(&mut rng, 60, size as f64).render(size, 0.0, 0.0);
        for _ in 0..10 {
            let x = Point2D::new(rng.gen_range(14.0..34.0), rng.gen_range(14.0..34.0));
            let t = track_landmark_lk(&img, &img, x, &spec);
            worst_identity = worst_identity.max(if t.valid { t.point.distance(&x) } else { f64::INFINITY });
        }
    }
    let trials = 500;
    let mut good = 0;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let blobs = Blobs::random(&mut rng, 60, size as f64);
        let (dx, dy) = loop {
            let d = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            if f64::hypot(d.0, d.1) <= 3.0 {
                break d;
            }
        };
        let prev = blobs.render(size, 0.0, 0.0);
        let curr = blobs.render(size, dx, dy);
        let x = Point2D::new(rng.gen_range(18.0..30.0), rng.gen_range(18.0..30.0));
        let t = track_landmark_lk(&prev, &curr, x, &spec);
        let err = t.point.distance(&Point2D::new(x.x + dx, x.y + dy));
        worst = worst.max(err);
        if t.valid && t.converged && t.iterations <= 20 && err < 0.05 {
            good += 1;
        }
    }
    let rate = good as f64 / trials as f64;
    let detail = format!("identity max {worst_identity:.2e} px, {good}/{trials} translations within 0.05 px");
    if worst_identity < 1e-6 && rate >= 0.99 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- flowcheck

fn criterion_3() -> Outcome {
    let cfg = ExperimentConfig::default();
    let bench = generate_benchmark(&cfg).map_err(|e| e.to_string())?;
    let rows = flowcheck(&bench.video, &cfg).map_err(|e| e.to_string())?;
    let all = rows.last().unwrap();

    let mut still = cfg.clone();
    still.scene.frames = 4;
    still.scene.motion.max_yaw_deg = 0.0;
    still.scene.motion.max_pitch_deg = 0.0;
    still.scene.motion.max_translation = 0.0;
    let scene = generate_benchmark(&still).map_err(|e| e.to_string())?.video;
    let static_rows = flowcheck(&scene, &still).map_err(|e| e.to_string())?;
    let static_max = static_rows.last().unwrap().max;

    let detail = format!(
        "{} points, mean {:.4} px, max {:.4} px; static scene max {static_max:.1e}",
        all.points, all.mean, all.max
    );
    if all.points == 500 && all.mean < 0.1 && static_max == 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- filters

fn criterion_4() -> Outcome {
    let th = Thresholds::default();
    let spec = PatchSpec::default();
    let scene = generate_scene(&SceneConfig {
        frames: 100,
        seed: 11,
        corruption: srt_core::synth::CorruptionConfig { fraction: 0.3, size: 7 },
        ..SceneConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let occluded: HashSet<(usize, usize)> = scene.corruptions.iter().map(|c| (c.frame, c.view)).collect();
    let (mut bad, mut bad_rejected, mut bad_rt_rejected) = (0, 0, 0);
    let (mut clean, mut clean_rejected) = (0, 0);
    for t in 1..scene.frames.len() {
        for m in 0..scene.cameras.len() {
            let prev = &scene.frames[t - 1].images[m];
            let curr = &scene.frames[t].images[m];
            let bbox = &scene.frames[t].bboxes[m];
            let t_fb = th.t_fb_frac * bbox.scale();
            for k in 0..scene.config.landmarks {
                let l_prev = scene.frames[t - 1].landmarks_2d[m][k];
                let truth = scene.frames[t].landmarks_2d[m][k];
                let tr = track_landmark_lk(prev, curr, l_prev, &spec);
                // A perfect detector at t.
                let full =
                    tr.valid && forward_backward_check(prev, curr, l_prev, tr.point, truth, bbox, &th, &spec).reliable;
                // Detection placed on the track, so only the round trip can reject.
                let rt = tr.valid
                    && forward_backward_check(prev, curr, l_prev, tr.point, tr.point, bbox, &th, &spec).reliable;
                let forward_err = if tr.valid {
                    tr.point.distance(&truth)
                } else {
                    f64::INFINITY
                };
                if occluded.contains(&(t, m)) && forward_err >= 3.0 * t_fb {
                    bad += 1;
                    bad_rejected += usize::from(!full);
                    bad_rt_rejected += usize::from(!rt);
                } else if !occluded.contains(&(t, m)) && !occluded.contains(&(t - 1, m)) {
                    clean += 1;
                    clean_rejected += usize::from(!full);
                }
            }
        }
    }
    if bad == 0 || clean == 0 {
        return Err(format!("degenerate scene: {bad} corrupted, {clean} clean tracks"));
    }
    let bad_rate = bad_rejected as f64 / bad as f64;
    let clean_rate = clean_rejected as f64 / clean as f64;

    // Triangulation mask against an independently computed residual.
    let mut rng = rng("filters");
    let (mut over, mut over_flagged, mut agree, mut total) = (0, 0, 0, 0);
    for t in 0..scene.frames.len() {
        let f = &scene.frames[t];
        let scales: Vec<f64> = f.bboxes.iter().map(|b| b.scale()).collect();
        let dets: Vec<Vec<Point2D>> = f
            .landmarks_2d
            .iter()
            .zip(&scales)
            .map(|(pts, s)| {
                pts.iter()
                    .map(|p| {
                        let r = if rng.gen_bool(0.3) {
                            rng.gen_range(2.0..8.0)
                        } else {
                            rng.gen_range(0.0..0.3)
                        };
                        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        Point2D::new(
                            p.x + r * th.t_tri_frac * s * a.cos(),
                            p.y + r * th.t_tri_frac * s * a.sin(),
                        )
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[Point2D]> = dets.iter().map(|d| d.as_slice()).collect();
        let out = sbt_multiview(&refs, &scene.cameras, &scales, &th).map_err(|e| e.to_string())?;
        for k in 0..scene.config.landmarks {
            let pts: Vec<Point2D> = dets.iter().map(|d| d[k]).collect();
            let x = triangulate_dlt(&ViewObservationSet::new(scene.cameras.clone(), pts.clone()).unwrap())
                .map_err(|e| e.to_string())?;
            for (m, cam) in scene.cameras.iter().enumerate() {
                let residual = project(cam, &x).unwrap().distance(&pts[m]);
                let limit = th.t_tri_frac * scales[m];
                total += 1;
                agree += usize::from(out.flags[m][k] == (residual <= limit));
                if residual > limit {
                    over += 1;
                    over_flagged += usize::from(out.flags[m][k]);
                }
            }
        }
    }
    let detail = format!(
        "track filter rejects {bad_rejected}/{bad} corrupted ({bad_rt_rejected} by round trip alone), \
         {clean_rejected}/{clean} clean; triangulation mask drops {}/{over} over threshold, agrees on {agree}/{total}",
        over - over_flagged
    );
    if bad_rate >= 0.99 && clean_rate <= 0.02 && over > 0 && over_flagged == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

#[derive(Default)]
struct Fd {
    checked: usize,
    failed: Vec<String>,
}

impl Fd {
    fn check(&mut self, what: &str, analytic: f64, numeric: f64, rel: f64) {
        self.checked += 1;
        if rel_err(analytic, numeric, 1e-6) > rel {
            self.failed
                .push(format!("{what}: analytic {analytic:.6e} vs fd {numeric:.6e}"));
        }
    }
}

fn random_field(rng: &mut StreamRng, w: usize, h: usize) -> ScalarField {
    ScalarField::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_points(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> Vec<Point2D> {
    (0..n)
        .map(|_| Point2D::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi)))
        .collect()
}

fn set(points: Vec<Point2D>) -> LandmarkSet {
    LandmarkSet::new(points, 0, 0).unwrap()
}

fn nudge(points: &[Point2D], k: usize, c: usize, h: f64) -> Vec<Point2D> {
    let mut p = points.to_vec();
    if c == 0 {
        p[k].x += h;
    } else {
        p[k].y += h;
    }
    p
}

/// Keeps coordinate pairs off the L1 kinks.
fn apart(a: &[Point2D], b: &[Point2D]) -> bool {
    a.iter()
        .zip(b)
        .all(|(p, q)| (p.x - q.x).abs() > 1e-3 && (p.y - q.y).abs() > 1e-3)
}

fn poke(f: &ScalarField, i: usize, h: f64) -> ScalarField {
    let mut g = f.clone();
    g.samples_mut()[i] += h;
    g
}

fn gradient_primitives(fd: &mut Fd) {
    let mut rng = rng("gradients");
    let h = 1e-5;

    let field = random_field(&mut rng, 12, 12);
    for _ in 0..200 {
        let p = Point2D::new(
            rng.gen_range(1.0..10.0_f64).floor() + rng.gen_range(0.05..0.95),
            rng.gen_range(1.0..10.0_f64).floor() + rng.gen_range(0.05..0.95),
        );
        let (gx, gy) = field.sample_jacobian(p).unwrap();
        let sx = (field.sample(Point2D::new(p.x + h, p.y)).unwrap()
            - field.sample(Point2D::new(p.x - h, p.y)).unwrap())
            / (2.0 * h);
        let sy = (field.sample(Point2D::new(p.x, p.y + h)).unwrap()
            - field.sample(Point2D::new(p.x, p.y - h)).unwrap())
            / (2.0 * h);
        fd.check("bilinear x", gx, sx, 1e-4);
        fd.check("bilinear y", gy, sy, 1e-4);
    }

    for temperature in [0.1, 1.0] {
        let map = random_field(&mut rng, 8, 8);
        let (_, jac) = soft_argmax(&map, temperature).unwrap();
        for i in 0..64 {
            let up = soft_argmax(&poke(&map, i, h), temperature).unwrap().0;
            let down = soft_argmax(&poke(&map, i, -h), temperature).unwrap().0;
            fd.check("soft-argmax x", jac[i][0], (up.x - down.x) / (2.0 * h), 1e-4);
            fd.check("soft-argmax y", jac[i][1], (up.y - down.y) / (2.0 * h), 1e-4);
        }
    }

    let k = 4;
    let (a, b) = loop {
        let a = random_points(&mut rng, k, 2.0, 14.0);
        let b = random_points(&mut rng, k, 2.0, 14.0);
        if apart(&a, &b) {
            break (a, b);
        }
    };
    let flags = [true, false, true, true];

    let (_, g) = detection_loss_regression(&set(a.clone()), &set(b.clone())).unwrap();
    for kk in 0..k {
        for c in 0..2 {
            let f = |p: Vec<Point2D>| detection_loss_regression(&set(p), &set(b.clone())).unwrap().0;
            let n = (f(nudge(&a, kk, c, h)) - f(nudge(&a, kk, c, -h))) / (2.0 * h);
            fd.check("detection regression", g[kk][c], n, 1e-3);
        }
    }

    let coord_pair = |name: &str, fd: &mut Fd, loss: &dyn Fn(&[Point2D], &[Point2D]) -> PairGrads| {
        let (_, ga, gb) = loss(&a, &b);
        for kk in 0..k {
            for c in 0..2 {
                let na = (loss(&nudge(&a, kk, c, h), &b).0 - loss(&nudge(&a, kk, c, -h), &b).0) / (2.0 * h);
                let nb = (loss(&a, &nudge(&b, kk, c, h)).0 - loss(&a, &nudge(&b, kk, c, -h)).0) / (2.0 * h);
                fd.check(name, ga[kk][c], na, 1e-3);
                fd.check(name, gb[kk][c], nb, 1e-3);
            }
        }
    };
    coord_pair("sbr coords", fd, &|x, y| {
        let r = sbr_loss_coords(&set(x.to_vec()), &set(y.to_vec()), &flags).unwrap();
        (r.loss, r.grad_a, r.grad_b)
    });
    coord_pair("sbt coords", fd, &|x, y| {
        let r = sbt_loss_coords(&set(x.to_vec()), &set(y.to_vec()), &flags).unwrap();
        (r.loss, r.grad_a, r.grad_b)
    });

    let maps = |rng: &mut StreamRng| HeatmapSet::new((0..k).map(|_| random_field(rng, 8, 8)).collect()).unwrap();
    let (ma, mb) = (maps(&mut rng), maps(&mut rng));
    let with = |s: &HeatmapSet, j: usize, i: usize, d: f64| {
        let mut v = s.maps().to_vec();
        v[j] = poke(&v[j], i, d);
        HeatmapSet::new(v).unwrap()
    };
    let (_, g) = detection_loss_heatmap(&ma, &mb).unwrap();
    let r = sbr_loss_heatmap(&ma, &mb, &flags).unwrap();
    for j in 0..k {
        for i in (0..64).step_by(5) {
            let f = |s: &HeatmapSet| detection_loss_heatmap(s, &mb).unwrap().0;
            fd.check(
                "detection heatmap",
                g[j].samples()[i],
                (f(&with(&ma, j, i, h)) - f(&with(&ma, j, i, -h))) / (2.0 * h),
                1e-3,
            );
            let fa = |s: &HeatmapSet| sbr_loss_heatmap(s, &mb, &flags).unwrap().loss;
            let fb = |s: &HeatmapSet| sbr_loss_heatmap(&ma, s, &flags).unwrap().loss;
            fd.check(
                "sbr heatmap",
                r.grad_a[j].samples()[i],
                (fa(&with(&ma, j, i, h)) - fa(&with(&ma, j, i, -h))) / (2.0 * h),
                1e-3,
            );
            fd.check(
                "sbr heatmap",
                r.grad_b[j].samples()[i],
                (fb(&with(&mb, j, i, h)) - fb(&with(&mb, j, i, -h))) / (2.0 * h),
                1e-3,
            );
        }
    }

    // Detections and reprojections on the heatmap grid, off the integer lattice.
    let det: Vec<Point2D> = (0..k)
        .map(|_| Point2D::new(rng.gen_range(2.1..2.9), rng.gen_range(3.1..3.9)))
        .collect();
    let rep: Vec<Point2D> = (0..k)
        .map(|_| Point2D::new(rng.gen_range(4.1..4.9), rng.gen_range(2.1..2.9)))
        .collect();
    let r = sbt_loss_heatmap(&ma, &set(det.clone()), &set(rep.clone()), &flags).unwrap();
    let loss = |m: &HeatmapSet, d: &[Point2D], p: &[Point2D]| {
        sbt_loss_heatmap(m, &set(d.to_vec()), &set(p.to_vec()), &flags)
            .unwrap()
            .loss
    };
    for j in 0..k {
        for i in (0..64).step_by(5) {
            let n = (loss(&with(&ma, j, i, h), &det, &rep) - loss(&with(&ma, j, i, -h), &det, &rep)) / (2.0 * h);
            fd.check("sbt heatmap maps", r.grad_maps[j].samples()[i], n, 1e-3);
        }
        for c in 0..2 {
            let nd = (loss(&ma, &nudge(&det, j, c, h), &rep) - loss(&ma, &nudge(&det, j, c, -h), &rep)) / (2.0 * h);
            let nr = (loss(&ma, &det, &nudge(&rep, j, c, h)) - loss(&ma, &det, &nudge(&rep, j, c, -h))) / (2.0 * h);
            fd.check("sbt heatmap detection", r.grad_det[j][c], nd, 1e-3);
            fd.check("sbt heatmap reprojection", r.grad_reproj[j][c], nr, 1e-3);
        }
    }

    // Multi-view triangulation term through the DLT.
    let scene = generate_scene(&SceneConfig {
        frames: 1,
        seed: 3,
        ..SceneConfig::default()
    })
    .unwrap();
    let f = &scene.frames[0];
    let scales: Vec<f64> = f.bboxes.iter().map(|b| b.scale()).collect();
    let loose = Thresholds {
        t_tri_frac: 10.0,
        ..Thresholds::default()
    };
    let dets: Vec<Vec<Point2D>> = f
        .landmarks_2d
        .iter()
        .map(|pts| {
            pts.iter()
                .map(|p| Point2D::new(p.x + rng.gen_range(-1.0..1.0), p.y + rng.gen_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let refs: Vec<&[Point2D]> = dets.iter().map(|d| d.as_slice()).collect();
    let base = sbt_multiview(&refs, &scene.cameras, &scales, &loose).unwrap();
    for m in 0..dets.len() {
        for kk in 0..dets[m].len() {
            for c in 0..2 {
                let at = |d: f64| {
                    let mut moved = dets.clone();
                    moved[m] = nudge(&moved[m], kk, c, d);
                    let refs: Vec<&[Point2D]> = moved.iter().map(|d| d.as_slice()).collect();
                    sbt_multiview_masked(&refs, &scene.cameras, &scales, &loose, Some(&base.flags))
                        .unwrap()
                        .loss
                };
                fd.check(
                    "sbt multiview",
                    base.grads[m][kk][c],
                    (at(h) - at(-h)) / (2.0 * h),
                    1e-3,
                );
            }
        }
    }

    // Warp adjoint: <W f, g> = <f, W* g>.
    for _ in 0..5 {
        let src = random_field(&mut rng, 10, 9);
        let g = random_field(&mut rng, 10, 9);
        let flow = FlowField::new(
            ScalarField::from_fn(10, 9, |_, _| rng.gen_range(-2.0..2.0)),
            ScalarField::from_fn(10, 9, |_, _| rng.gen_range(-2.0..2.0)),
        )
        .unwrap();
        let wf = warp_field_by_flow(&src, &flow).unwrap();
        let adj = warp_field_adjoint(&g, &flow).unwrap();
        let lhs: f64 = wf.samples().iter().zip(g.samples()).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.samples().iter().zip(adj.samples()).map(|(a, b)| a * b).sum();
        fd.check("warp adjoint", lhs, rhs, 1e-10);
    }

    // Differentiable LK track.
    let blobs = Blobs::random(&mut rng, 60, 48.0);
    let prev = blobs.render(48, 0.0, 0.0);
    let curr = blobs.render(48, 1.3, -0.7);
    let spec = PatchSpec {
        convergence_eps: 1e-12,
        max_iterations: 200,
        ..PatchSpec::default()
    };
    for _ in 0..10 {
        let x = Point2D::new(rng.gen_range(18.0..30.0), rng.gen_range(18.0..30.0));
        let Ok(jac) = lk_track_gradient(&prev, &curr, x, &spec) else {
            continue;
        };
        let hh = 1e-4;
        for c in 0..2 {
            let shift = |d: f64| {
                if c == 0 {
                    Point2D::new(x.x + d, x.y)
                } else {
                    Point2D::new(x.x, x.y + d)
                }
            };
            let up = track_landmark_lk(&prev, &curr, shift(hh), &spec).point;
            let down = track_landmark_lk(&prev, &curr, shift(-hh), &spec).point;
            fd.check("lk track", jac[0][c], (up.x - down.x) / (2.0 * hh), 1e-3);
            fd.check("lk track", jac[1][c], (up.y - down.y) / (2.0 * hh), 1e-3);
        }
    }
}

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

/// Whole training objective against central differences over a parameter
/// subset. Returns (checked, mismatched).
fn end_to_end(mode: DetectorMode, tracker: TrackerKind) -> (usize, Vec<String>) {
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
    let batch = Batch {
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
    };
    let base = step_objective(&det, &data, &batch, key, &cfg, &w, None).unwrap();
    let n = det.param_count();
    let mut rng = rng("e2e");
    let mut idx: Vec<usize> = (0..n).filter(|i| i % 7 == 0).collect();
    idx.extend((0..40).map(|_| rng.gen_range(0..n)));
    let h = 1e-5;
    let mut bad = Vec::new();
    for &i in &idx {
        let orig = det.params()[i];
        det.params_mut()[i] = orig + h;
        let up = step_objective(&det, &data, &batch, key, &cfg, &w, Some(&base.masks))
            .unwrap()
            .total;
        det.params_mut()[i] = orig - h;
        let down = step_objective(&det, &data, &batch, key, &cfg, &w, Some(&base.masks))
            .unwrap()
            .total;
        det.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = base.grads[i];
        let scale = fd.abs().max(an.abs());
        if scale > 1e-6 && (fd - an).abs() > 1e-2 * scale {
            bad.push(format!("{mode:?}/{tracker:?} param {i}: {an:.4e} vs {fd:.4e}"));
        }
    }
    (idx.len(), bad)
}

fn criterion_5() -> Outcome {
    let mut fd = Fd::default();
    gradient_primitives(&mut fd);
    let mut e2e = Vec::new();
    for (mode, tracker) in [
        (DetectorMode::Regression, TrackerKind::Lk),
        (DetectorMode::Regression, TrackerKind::Interp),
        (DetectorMode::Heatmap, TrackerKind::Lk),
    ] {
        let (checked, bad) = end_to_end(mode, tracker);
        e2e.push((mode, tracker, checked, bad));
    }
    // An isolated ReLU or L1 kink inside a step may spoil a single entry.
    let e2e_ok = e2e.iter().all(|(_, _, n, bad)| bad.len() * 50 <= *n);
    let e2e_desc: Vec<String> = e2e
        .iter()
        .map(|(m, t, n, bad)| format!("{m:?}/{t:?} {}/{n}", n - bad.len()))
        .collect();
    let detail = format!(
        "{}/{} primitive checks; end to end {}",
        fd.checked - fd.failed.len(),
        fd.checked,
        e2e_desc.join(", ")
    );
    if fd.failed.is_empty() && e2e_ok {
        Ok(detail)
    } else {
        let mut extra: Vec<String> = fd.failed.iter().take(5).cloned().collect();
        extra.extend(e2e.into_iter().flat_map(|e| e.3.into_iter().take(3)));
        Err(format!("{detail}; {}", extra.join("; ")))
    }
}

// ---------------------------------------------------------------- trends

fn mean_over_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(f64, f64), String> {
    let mut nme = 0.0;
    let mut pe = 0.0;
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        let r = run_pipeline(&c).map_err(|e| format!("seed {s}: {e}"))?;
        nme += r.nme;
        pe += r.p_error;
    }
    Ok((nme / seeds.len() as f64, pe / seeds.len() as f64))
}

/// Default benchmark: 200 labeled crops and 4-view, 50-frame video.
fn trend_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn criterion_6() -> Outcome {
    let seeds = [0, 1, 2];
    let mut res = Vec::new();
    for mode in [Mode::Baseline, Mode::Sbr, Mode::Sbt, Mode::Srt] {
        let mut cfg = trend_config();
        cfg.mode = mode;
        res.push(mean_over_seeds(&cfg, &seeds)?);
    }
    let [base, sbr, sbt, srt] = [res[0], res[1], res[2], res[3]];
    let checks = [
        ("NME srt<baseline", srt.0 < base.0),
        ("P-error srt<baseline", srt.1 < base.1),
        ("P-error sbt<baseline", sbt.1 < base.1),
        ("NME sbr<baseline", sbr.0 < base.0),
    ];
    let detail = format!(
        "NME/P-error baseline {:.5}/{:.5}, sbr {:.5}/{:.5}, sbt {:.5}/{:.5}, srt {:.5}/{:.5}; {}",
        base.0,
        base.1,
        sbr.0,
        sbr.1,
        sbt.0,
        sbt.1,
        srt.0,
        srt.1,
        checks
            .iter()
            .map(|(n, ok)| format!("{n} {}", if *ok { "holds" } else { "violated" }))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if checks.iter().all(|c| c.1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Outcome {
    let seeds = [0, 1, 2];
    let noises = [0.0, 5.0, 10.0];
    let fractions = [0.5, 1.0];
    let mut grid = [[(0.0, 0.0); 2]; 3];
    for (i, &noise) in noises.iter().enumerate() {
        for (j, &fraction) in fractions.iter().enumerate() {
            let mut cfg = trend_config();
            cfg.mode = Mode::Baseline;
            cfg.scene.label_noise_std = noise;
            cfg.benchmark.data_fraction = fraction;
            grid[i][j] = mean_over_seeds(&cfg, &seeds)?;
        }
    }
    let mut violations = Vec::new();
    for j in 0..2 {
        for i in 0..2 {
            if grid[i + 1][j].0 <= grid[i][j].0 {
                violations.push(format!(
                    "NME noise {}->{} at data {}",
                    noises[i],
                    noises[i + 1],
                    fractions[j]
                ));
            }
            if grid[i + 1][j].1 <= grid[i][j].1 {
                violations.push(format!(
                    "P-error noise {}->{} at data {}",
                    noises[i],
                    noises[i + 1],
                    fractions[j]
                ));
            }
        }
    }
    for i in 0..3 {
        if grid[i][1].0 >= grid[i][0].0 {
            violations.push(format!("NME data 0.5->1.0 at noise {}", noises[i]));
        }
        if grid[i][1].1 >= grid[i][0].1 {
            violations.push(format!("P-error data 0.5->1.0 at noise {}", noises[i]));
        }
    }
    let cells: Vec<String> = (0..3)
        .flat_map(|i| {
            let g = &grid;
            (0..2).map(move |j| format!("({}, {}) {:.5}/{:.5}", noises[i], fractions[j], g[i][j].0, g[i][j].1))
        })
        .collect();
    let detail = format!("NME/P-error {}", cells.join(", "));
    if violations.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; violated: {}", violations.join(", ")))
    }
}

// ---------------------------------------------------------------- equivalence

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        ..ExperimentConfig::default()
    };
    cfg.scene.frames = 6;
    cfg.benchmark.test_frames = 2;
    cfg.detector.arch = ArchConfig {
        input_size: 16,
        conv1: 3,
        conv2: 4,
        hidden: 8,
    };
    cfg.train.stage1_epochs = 2;
    cfg.train.stage2_epochs = 3;
    cfg.train.log_samples = 4;
    cfg.train.batch.n_labeled = 8;
    cfg.train.batch.n_triplets = 2;
    cfg.train.batch.n_quadruplets = 2;
    cfg.metrics.p_error_pairs = 1;
    cfg
}

fn trajectory(cfg: &ExperimentConfig, with_video: bool) -> Result<Vec<Vec<u64>>, String> {
    let bench = generate_benchmark(cfg).map_err(|e| e.to_string())?;
    let size = cfg.detector.arch.input_size;
    let tc = cfg.train_config();
    let mut data = TrainingData {
        labeled: labeled_from_scene(
            &bench.labeled,
            cfg.scene.label_noise_std,
            cfg.benchmark.data_fraction,
            StreamKey::root(cfg.seed),
        )
        .map_err(|e| e.to_string())?,
        video: if with_video {
            Some(VideoData::from_scene(&bench.video, size).map_err(|e| e.to_string())?)
        } else {
            None
        },
        crop_size: size,
    };
    data.prepare(&tc, cfg.detector.mode).map_err(|e| e.to_string())?;
    let key = StreamKey::root(cfg.seed);
    let state = TrainState::fresh(cfg.detector_config(), key).map_err(|e| e.to_string())?;
    let mut params = Vec::new();
    train(&data, &tc, state, key, |s| {
        params.push(s.detector.params().iter().map(|v| v.to_bits()).collect());
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(params)
}

fn criterion_8() -> Outcome {
    let mut detail = Vec::new();
    for mode in [DetectorMode::Regression, DetectorMode::Heatmap] {
        let mut base = small_config();
        base.detector.mode = mode;
        base.mode = Mode::Baseline;
        let mut zero = base.clone();
        zero.mode = Mode::Srt;
        zero.weights = Some([0.0, 0.0]);
        zero.validate().map_err(|e| e.to_string())?;
        let a = trajectory(&base, false)?;
        let b = trajectory(&zero, true)?;
        if a.len() != base.train.total_epochs() || a != b {
            let first = a.iter().zip(&b).position(|(x, y)| x != y);
            return Err(format!("{mode:?}: trajectories differ from epoch {first:?}"));
        }
        detail.push(format!("{mode:?} {} epochs identical", a.len()));
    }
    Ok(detail.join(", "))
}

// ---------------------------------------------------------------- determinism

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = r#"
seed = 7
[scene]
frames = 4
[benchmark]
test_frames = 2
[detector.arch]
input_size = 16
conv1 = 3
conv2 = 4
hidden = 8
[train]
stage1_epochs = 1
stage2_epochs = 2
log_samples = 4
checkpoint_every = 1
[train.batch]
n_labeled = 8
n_triplets = 2
n_quadruplets = 2
[metrics]
p_error_pairs = 1
[ablate]
modes = ["baseline", "srt"]
seeds = [7]
[flowcheck]
samples = 40
"#;

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, TINY).map_err(|e| e.to_string())?;
    let c = cfg.to_str().unwrap();
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_srt"))
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("srt {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let mut compared = Vec::new();
    for round in ["a", "b"] {
        let root = dir.path().join(round);
        let p = |s: &str| root.join(s).to_str().unwrap().to_string();
        run(&["synth", "--config", c, "--out", &p("bench")])?;
        run(&["train", "--config", c, "--scene", &p("bench"), "--out", &p("train")])?;
        run(&[
            "eval",
            "--config",
            c,
            "--checkpoint",
            &p("train/checkpoint"),
            "--scene",
            &p("bench"),
            "--out",
            &p("eval"),
        ])?;
        run(&["ablate", "--config", c, "--out", &p("ablate")])?;
        run(&[
            "flowcheck",
            "--config",
            c,
            "--scene",
            &p("bench"),
            "--out",
            &p("flowcheck"),
        ])?;
    }
    for cmd in ["bench", "train", "eval", "ablate", "flowcheck"] {
        let a = tree(&dir.path().join("a").join(cmd));
        let b = tree(&dir.path().join("b").join(cmd));
        if a.is_empty() || a != b {
            return Err(format!("{cmd} outputs differ between runs"));
        }
        compared.push(format!("{cmd} {} files", a.len()));
    }
    Ok(format!("identical: {}", compared.join(", ")))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion); 9] = [
        (1, "geometry", criterion_1),
        (2, "lk", criterion_2),
        (3, "flowcheck", criterion_3),
        (4, "filter recall", criterion_4),
        (5, "gradients", criterion_5),
        (6, "srt trend", criterion_6),
        (7, "noise and data trend", criterion_7),
        (8, "zero-weight equivalence", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}; {secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}; {secs:.1}s)");
            }
        }
    }
    println!("{failed} criteria failed");
    let strict = std::env::var("SRT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
