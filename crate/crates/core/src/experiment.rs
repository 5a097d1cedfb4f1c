//! Experiment configuration and the commands behind the `srt` binary.
//!
//! A configuration is a TOML file. Every section is optional:
//!
//! ```toml
//! seed = 0
//! mode = "srt"                 # baseline | sbr | sbt | srt
//! weights = [0.5, 0.5]         # optional; defaults follow the mode
//!
//! [scene]                      # template for the labeled, video and test scenes
//! [benchmark]                  # test_frames, data_fraction
//! [detector]
//! [train]
//! [metrics]
//! [ablate]                     # modes, weights, noise_std, data_fraction, seeds
//! [flowcheck]                  # samples
//! ```
//!
//! A benchmark directory holds three scenes that share the object but not
//! the motion: `labeled/`, `video/` and `test/`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::detector::train::{labeled_from_scene, train, TrainConfig, TrainState, TrainingData, VideoData};
use crate::detector::DetectorConfig;
use crate::flow::{dense_flow_lk, track_landmark_interp, track_landmark_lk};
use crate::metrics::{csv_err, evaluate, write_report, EvalSample, EvalSummary, MetricConfig, ReportRow, NORMALIZER};
use crate::rng::StreamKey;
use crate::supervision::LossWeights;
use crate::synth::io::{read_scene, write_scene};
use crate::synth::{generate_scene, Scene, SceneConfig};
use crate::tensor::ScalarField;
use crate::{Error, Result};

/// Grid step of the dense flow that `flowcheck` interpolates.
const FLOWCHECK_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Sbr,
    Sbt,
    Srt,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Sbr => "sbr",
            Mode::Sbt => "sbt",
            Mode::Srt => "srt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "sbr" => Ok(Mode::Sbr),
            "sbt" => Ok(Mode::Sbt),
            "srt" => Ok(Mode::Srt),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn default_weights(&self) -> LossWeights {
        match self {
            Mode::Baseline => LossWeights::baseline(),
            Mode::Sbr => LossWeights::sbr(),
            Mode::Sbt => LossWeights::sbt(),
            Mode::Srt => LossWeights::srt(),
        }
    }

    fn check(&self, w: &LossWeights) -> Result<()> {
        w.validate()?;
        let ok = match self {
            Mode::Baseline => w.w_sbr == 0.0 && w.w_sbt == 0.0,
            Mode::Sbr => w.w_sbt == 0.0,
            Mode::Sbt => w.w_sbr == 0.0,
            Mode::Srt => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "weights ({}, {}) are not allowed in mode {}",
                w.w_sbr,
                w.w_sbt,
                self.as_str()
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub test_frames: usize,
    /// Share of the labeled crops used for training.
    pub data_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            test_frames: 25,
            data_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Empty means the top-level mode.
    pub modes: Vec<Mode>,
    /// `[w_sbr, w_sbt]` pairs; empty means the weights of each mode.
    pub weights: Vec<[f64; 2]>,
    /// Empty means `scene.label_noise_std`.
    pub noise_std: Vec<f64>,
    /// Empty means `benchmark.data_fraction`.
    pub data_fraction: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            modes: Vec::new(),
            weights: Vec::new(),
            noise_std: Vec::new(),
            data_fraction: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowcheckConfig {
    pub samples: usize,
}

impl Default for FlowcheckConfig {
    fn default() -> Self {
        FlowcheckConfig { samples: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub weights: Option<[f64; 2]>,
    pub out: Option<PathBuf>,
    pub scene: SceneConfig,
    pub benchmark: BenchmarkConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub ablate: AblateConfig,
    pub flowcheck: FlowcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::Srt,
            weights: None,
            out: None,
            scene: SceneConfig::default(),
            benchmark: BenchmarkConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
            ablate: AblateConfig::default(),
            flowcheck: FlowcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.message()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Weights used in stage 2.
    pub fn loss_weights(&self) -> LossWeights {
        match self.weights {
            Some([a, b]) => LossWeights { w_sbr: a, w_sbt: b },
            None => self.mode.default_weights(),
        }
    }

    /// Training configuration with the mode's weights filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.loss_weights(),
            ..self.train
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            landmarks: self.scene.landmarks,
            ..self.detector
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scene.seed != 0 {
            return Err(Error::Config(
                "scene seeds derive from the top-level seed; leave scene.seed unset".into(),
            ));
        }
        if self.train.weights != LossWeights::baseline() {
            return Err(Error::Config(
                "set loss weights with the top-level `weights` key".into(),
            ));
        }
        if self.detector.landmarks != DetectorConfig::default().landmarks
            && self.detector.landmarks != self.scene.landmarks
        {
            return Err(Error::Config(
                "detector.landmarks disagrees with scene.landmarks".into(),
            ));
        }
        self.mode.check(&self.loss_weights())?;
        self.detector_config().validate()?;
        self.train_config().validate()?;
        self.metrics.validate()?;
        if self.benchmark.test_frames == 0 {
            return Err(Error::Config("benchmark.test_frames must be >= 1".into()));
        }
        if !(self.benchmark.data_fraction > 0.0 && self.benchmark.data_fraction <= 1.0) {
            return Err(Error::Config("benchmark.data_fraction must lie in (0, 1]".into()));
        }
        if self.flowcheck.samples == 0 {
            return Err(Error::Config("flowcheck.samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Short digest of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn key(&self) -> StreamKey {
        StreamKey::root(self.seed)
    }

    fn scene_config(&self, part: &str, frames: usize) -> SceneConfig {
        SceneConfig {
            frames,
            label_noise_std: 0.0,
            seed: self.key().named("scene").named(part).value(),
            ..self.scene
        }
    }
}

/// The three scenes of one benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub labeled: Scene,
    pub video: Scene,
    pub test: Scene,
}

pub fn generate_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    Ok(Benchmark {
        labeled: generate_scene(&cfg.scene_config("labeled", cfg.scene.frames))?,
        video: generate_scene(&cfg.scene_config("video", cfg.scene.frames))?,
        test: generate_scene(&cfg.scene_config("test", cfg.benchmark.test_frames))?,
    })
}

fn benchmark_part(dir: &Path, part: &str) -> Result<Scene> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    read_scene(&dir.join(part))
}

/// Benchmark from `dir` when given, otherwise generated from the config.
fn load_or_generate(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Benchmark> {
    match dir {
        Some(d) => Ok(Benchmark {
            labeled: benchmark_part(d, "labeled")?,
            video: benchmark_part(d, "video")?,
            test: benchmark_part(d, "test")?,
        }),
        None => generate_benchmark(cfg),
    }
}

fn check_landmarks(cfg: &ExperimentConfig, scene: &Scene) -> Result<()> {
    if scene.config.landmarks != cfg.scene.landmarks {
        return Err(Error::Config(format!(
            "scene has {} landmarks, configuration expects {}",
            scene.config.landmarks, cfg.scene.landmarks
        )));
    }
    Ok(())
}

fn training_data(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<TrainingData> {
    check_landmarks(cfg, &bench.labeled)?;
    check_landmarks(cfg, &bench.video)?;
    let size = cfg.detector.arch.input_size;
    let tc = cfg.train_config();
    let mut data = TrainingData {
        labeled: labeled_from_scene(
            &bench.labeled,
            cfg.scene.label_noise_std,
            cfg.benchmark.data_fraction,
            cfg.key(),
        )?,
        video: if tc.weights.w_sbr > 0.0 || tc.weights.w_sbt > 0.0 {
            Some(VideoData::from_scene(&bench.video, size)?)
        } else {
            None
        },
        crop_size: size,
    };
    data.prepare(&tc, cfg.detector.mode)?;
    Ok(data)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory; pass --out or set `out`".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes a benchmark directory.
pub fn cmd_synth(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    let bench = generate_benchmark(cfg)?;
    write_scene(&dir.join("labeled"), &bench.labeled)?;
    write_scene(&dir.join("video"), &bench.video)?;
    write_scene(&dir.join("test"), &bench.test)?;
    let mut w = create(&dir.join("benchmark"))?;
    writeln!(w, "seed {}", cfg.seed)?;
    writeln!(w, "config-hash {}", cfg.hash())?;
    w.flush()?;
    Ok(dir)
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    epoch: &'a crate::detector::train::EpochLog,
    seed: u64,
    #[serde(rename = "config-hash")]
    config_hash: &'a str,
}

fn write_log(path: &Path, state: &TrainState, seed: u64, hash: &str) -> Result<()> {
    let mut w = create(path)?;
    for e in &state.log {
        let line = LogLine {
            epoch: e,
            seed,
            config_hash: hash,
        };
        let s = serde_json::to_string(&line).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on a benchmark, from scratch or from a checkpoint.
pub fn run_training(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let data = training_data(cfg, bench)?;
    let det_cfg = cfg.detector_config();
    let state = match resume {
        Some(s) => {
            if s.detector.config() != &det_cfg {
                return Err(Error::Config(
                    "checkpoint detector differs from the configuration".into(),
                ));
            }
            s
        }
        None => TrainState::fresh(det_cfg, cfg.key())?,
    };
    train(&data, &cfg.train_config(), state, cfg.key(), |s| on_epoch(s))
}

/// Trains and writes `checkpoint` and `log.jsonl` into the output directory.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    scene: Option<&Path>,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    let bench = load_or_generate(cfg, scene)?;
    let start = match resume {
        Some(p) => match load_checkpoint(p)? {
            Checkpoint::Trained { seed, state } => {
                if seed != cfg.seed {
                    return Err(Error::Config(format!(
                        "checkpoint seed {seed} differs from --seed {}",
                        cfg.seed
                    )));
                }
                Some(*state)
            }
            Checkpoint::Oracle { .. } => return Err(Error::Config("cannot resume from an oracle checkpoint".into())),
        },
        None => None,
    };
    let hash = cfg.hash();
    let every = cfg.train.checkpoint_every;
    let state = run_training(cfg, &bench, start, |s| {
        if every > 0 && s.epoch % every == 0 {
            let ck = Checkpoint::Trained {
                seed: cfg.seed,
                state: Box::new(s.clone()),
            };
            save_checkpoint(&dir.join(format!("checkpoint-epoch{}", s.epoch)), &ck)?;
        }
        Ok(())
    })?;
    let ck = Checkpoint::Trained {
        seed: cfg.seed,
        state: Box::new(state.clone()),
    };
    save_checkpoint(&dir.join("checkpoint"), &ck)?;
    write_log(&dir.join("log.jsonl"), &state, cfg.seed, &hash)?;
    Ok(state)
}

/// Scores a checkpoint on every crop of a test scene.
pub fn evaluate_checkpoint(ck: &Checkpoint, test: &Scene, cfg: &ExperimentConfig) -> Result<EvalSummary> {
    if ck.landmarks() != test.config.landmarks {
        return Err(Error::Config(format!(
            "checkpoint predicts {} landmarks, the test scene has {}",
            ck.landmarks(),
            test.config.landmarks
        )));
    }
    let mut samples = Vec::new();
    for f in &test.frames {
        for (m, image) in f.images.iter().enumerate() {
            samples.push(EvalSample {
                image,
                bbox: f.bboxes[m],
                gt: &f.landmarks_2d[m],
            });
        }
    }
    let key = cfg.key().named("elt").named("test");
    match ck {
        Checkpoint::Trained { state, .. } => {
            let det = &state.detector;
            let size = det.config().arch.input_size;
            evaluate(
                |_, crop: &ScalarField, _| det.predict_coords(crop),
                &samples,
                size,
                &cfg.metrics,
                key,
            )
        }
        Checkpoint::Oracle { .. } => {
            let size = cfg.detector.arch.input_size;
            evaluate(
                |i, _: &ScalarField, t: &crate::synth::AffineTransform| {
                    Ok(samples[i].gt.iter().map(|p| t.apply(*p)).collect())
                },
                &samples,
                size,
                &cfg.metrics,
                key,
            )
        }
    }
}

fn summary_rows(s: &EvalSummary, cfg: &ExperimentConfig, seed: u64, hash: &str) -> Vec<ReportRow> {
    let row = |metric: String, value: f64| ReportRow {
        metric,
        value,
        normalizer: NORMALIZER.to_string(),
        seed,
        config_hash: hash.to_string(),
    };
    vec![
        row("nme".into(), s.nme),
        row(format!("auc@{}", cfg.metrics.auc_threshold), s.auc),
        row(format!("failure@{}", cfg.metrics.failure_threshold), s.failure_rate),
        row("p_error".into(), s.p_error),
    ]
}

/// Writes `report.csv` and `per_sample.csv` into the output directory.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    scene: Option<&Path>,
    out: Option<&Path>,
) -> Result<EvalSummary> {
    cfg.metrics.validate()?;
    let dir = output_dir(cfg, out)?;
    let ck = load_checkpoint(checkpoint)?;
    let test = match scene {
        Some(d) => benchmark_part(d, "test")?,
        None => {
            cfg.validate()?;
            generate_scene(&cfg.scene_config("test", cfg.benchmark.test_frames))?
        }
    };
    let summary = evaluate_checkpoint(&ck, &test, cfg)?;
    let hash = cfg.hash();
    write_report(
        create(&dir.join("report.csv"))?,
        &summary_rows(&summary, cfg, ck.seed(), &hash),
    )?;
    let mut w = csv::Writer::from_writer(create(&dir.join("per_sample.csv"))?);
    w.write_record(["sample", "frame", "view", "nme"]).map_err(csv_err)?;
    let views = test.config.views;
    for (i, v) in summary.record.per_sample_nme().iter().enumerate() {
        let rec = [
            i.to_string(),
            (i / views).to_string(),
            (i % views).to_string(),
            v.to_string(),
        ];
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(summary)
}

/// Trains and evaluates one configuration on its own generated benchmark.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let bench = generate_benchmark(cfg)?;
    let state = run_training(cfg, &bench, None, |_| Ok(()))?;
    let ck = Checkpoint::Trained {
        seed: cfg.seed,
        state: Box::new(state),
    };
    evaluate_checkpoint(&ck, &bench.test, cfg)
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub mode: Mode,
    pub weights: LossWeights,
    pub noise_std: f64,
    pub data_fraction: f64,
}

impl Cell {
    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.mode = self.mode;
        c.weights = Some([self.weights.w_sbr, self.weights.w_sbt]);
        c.scene.label_noise_std = self.noise_std;
        c.benchmark.data_fraction = self.data_fraction;
        c.ablate = AblateConfig::default();
        c.out = None;
        c
    }
}

/// Cells in sweep order: mode, then weights, then noise, then data size.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let a = &cfg.ablate;
    let modes = if a.modes.is_empty() {
        vec![cfg.mode]
    } else {
        a.modes.clone()
    };
    let noise = if a.noise_std.is_empty() {
        vec![cfg.scene.label_noise_std]
    } else {
        a.noise_std.clone()
    };
    let fracs = if a.data_fraction.is_empty() {
        vec![cfg.benchmark.data_fraction]
    } else {
        a.data_fraction.clone()
    };
    let mut cells = Vec::new();
    for mode in modes {
        let weights: Vec<LossWeights> = if a.weights.is_empty() {
            vec![match (cfg.weights, mode == cfg.mode) {
                (Some(_), true) => cfg.loss_weights(),
                _ => mode.default_weights(),
            }]
        } else {
            a.weights
                .iter()
                .map(|w| LossWeights {
                    w_sbr: w[0],
                    w_sbt: w[1],
                })
                .collect()
        };
        for w in weights {
            for &n in &noise {
                for &f in &fracs {
                    cells.push(Cell {
                        index: cells.len(),
                        mode,
                        weights: w,
                        noise_std: n,
                        data_fraction: f,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub mode: Mode,
    pub w_sbr: f64,
    pub w_sbt: f64,
    pub noise_std: f64,
    pub data_fraction: f64,
    /// A seed, or `mean` for the average over the cell's seeds.
    pub seed: String,
    pub status: String,
    pub nme: Option<f64>,
    pub auc: Option<f64>,
    pub failure_rate: Option<f64>,
    pub p_error: Option<f64>,
    pub normalizer: String,
    #[serde(rename = "config-hash")]
    pub config_hash: String,
}

fn ablation_rows(
    cells: &[Cell],
    seeds: &[u64],
    results: &[(String, Result<EvalSummary>)],
    base_hash: &str,
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let row = |seed: String, status: String, s: Option<[f64; 4]>, hash: &str| AblationRow {
            cell: cell.index,
            mode: cell.mode,
            w_sbr: cell.weights.w_sbr,
            w_sbt: cell.weights.w_sbt,
            noise_std: cell.noise_std,
            data_fraction: cell.data_fraction,
            seed,
            status,
            nme: s.map(|v| v[0]),
            auc: s.map(|v| v[1]),
            failure_rate: s.map(|v| v[2]),
            p_error: s.map(|v| v[3]),
            normalizer: NORMALIZER.to_string(),
            config_hash: hash.to_string(),
        };
        let mut sum = [0.0; 4];
        let mut ok = 0usize;
        for (si, seed) in seeds.iter().enumerate() {
            let (hash, res) = &results[ci * seeds.len() + si];
            match res {
                Ok(s) => {
                    let v = [s.nme, s.auc, s.failure_rate, s.p_error];
                    for (a, b) in sum.iter_mut().zip(v) {
                        *a += b;
                    }
                    ok += 1;
                    rows.push(row(seed.to_string(), "ok".into(), Some(v), hash));
                }
                Err(e) => rows.push(row(seed.to_string(), format!("error: {e}"), None, hash)),
            }
        }
        let status = if ok == seeds.len() {
            "ok".to_string()
        } else {
            format!("{} of {} seeds failed", seeds.len() - ok, seeds.len())
        };
        let mean = (ok > 0).then(|| sum.map(|v| v / ok as f64));
        rows.push(row("mean".into(), status, mean, base_hash));
    }
    rows
}

/// Runs every cell for every seed and writes `ablation.csv`. Failed runs
/// are recorded in their row and the sweep continues.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: Option<&Path>, jobs: usize) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablate.seeds must not be empty".into()));
    }
    let dir = output_dir(cfg, out)?;
    let cells = ablation_cells(cfg);
    let seeds = cfg.ablate.seeds.clone();
    let runs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<(String, Result<EvalSummary>)> = pool.install(|| {
        runs.par_iter()
            .map(|&(c, seed)| {
                let run_cfg = cells[c].apply(cfg, seed);
                let hash = run_cfg.hash();
                let res = run_cfg.validate().and_then(|_| run_pipeline(&run_cfg));
                if let Err(e) = &res {
                    log::warn!("cell {c} seed {seed} failed: {e}");
                }
                (hash, res)
            })
            .collect()
    });
    let rows = ablation_rows(&cells, &seeds, &results, &cfg.hash());
    let mut w = csv::Writer::from_writer(create(&dir.join("ablation.csv"))?);
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Interpolated-versus-tracked discrepancy for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowcheckRow {
    /// A frame index, or `all`.
    pub frame: String,
    pub points: usize,
    pub mean: f64,
    pub max: f64,
    #[serde(rename = "config-hash")]
    pub config_hash: String,
}

/// Compares landmark displacements read off a dense LK field with LK tracks
/// started at the landmarks themselves.
pub fn flowcheck(scene: &Scene, cfg: &ExperimentConfig) -> Result<Vec<FlowcheckRow>> {
    let spec = &cfg.train.patch;
    let (t_n, m_n, k_n) = (scene.frames.len(), scene.cameras.len(), scene.config.landmarks);
    let mut candidates = Vec::new();
    for t in 1..t_n {
        for m in 0..m_n {
            for k in 0..k_n {
                candidates.push((t, m, k));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Config("flowcheck needs at least two frames".into()));
    }
    let n = cfg.flowcheck.samples.min(candidates.len());
    let mut picked: Vec<usize> = sample(&mut cfg.key().named("flowcheck").rng(), candidates.len(), n).into_vec();
    picked.sort_unstable();
    let mut pairs: Vec<(usize, usize)> = picked.iter().map(|&i| (candidates[i].0, candidates[i].1)).collect();
    pairs.dedup();
    let errors: Vec<Vec<(usize, f64)>> = pairs
        .par_iter()
        .map(|&(t, m)| {
            let prev = &scene.frames[t - 1].images[m];
            let curr = &scene.frames[t].images[m];
            let dense = dense_flow_lk(prev, curr, spec, FLOWCHECK_STRIDE)?;
            picked
                .iter()
                .map(|&i| candidates[i])
                .filter(|c| c.0 == t && c.1 == m)
                .map(|(_, _, k)| {
                    let x = scene.frames[t - 1].landmarks_2d[m][k];
                    let lk = track_landmark_lk(prev, curr, x, spec).point;
                    let interp = track_landmark_interp(&dense, x)?;
                    Ok((t, interp.distance(&lk)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let hash = cfg.hash();
    let row = |frame: String, e: &[f64]| FlowcheckRow {
        frame,
        points: e.len(),
        mean: e.iter().sum::<f64>() / e.len() as f64,
        max: e.iter().copied().fold(0.0, f64::max),
        config_hash: hash.clone(),
    };
    let flat: Vec<(usize, f64)> = errors.into_iter().flatten().collect();
    let mut rows = Vec::new();
    for t in 1..t_n {
        let e: Vec<f64> = flat.iter().filter(|(ft, _)| *ft == t).map(|(_, d)| *d).collect();
        if !e.is_empty() {
            rows.push(row(t.to_string(), &e));
        }
    }
    let all: Vec<f64> = flat.iter().map(|(_, d)| *d).collect();
    rows.push(row("all".into(), &all));
    Ok(rows)
}

/// Runs [`flowcheck`] and writes `flowcheck.csv`. `scene` may be a scene
/// directory or a benchmark, whose video scene is used.
pub fn cmd_flowcheck(cfg: &ExperimentConfig, scene: Option<&Path>, out: Option<&Path>) -> Result<Vec<FlowcheckRow>> {
    cfg.validate()?;
    let dir = output_dir(cfg, out)?;
    let s = match scene {
        Some(d) if d.join("manifest").exists() => read_scene(d)?,
        Some(d) => benchmark_part(d, "video")?,
        None => generate_scene(&cfg.scene_config("video", cfg.scene.frames))?,
    };
    let rows = flowcheck(&s, cfg)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("flowcheck.csv"))?);
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        assert_eq!(c.loss_weights(), LossWeights::srt());
    }

    #[test]
    fn mode_restricts_weights() {
        let mut c = ExperimentConfig::from_toml("mode = \"sbr\"\nweights = [2.0, 0.0]").unwrap();
        c.validate().unwrap();
        assert_eq!(c.train_config().weights, LossWeights { w_sbr: 2.0, w_sbt: 0.0 });
        c.weights = Some([1.0, 1.0]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.mode = Mode::Srt;
        c.validate().unwrap();
        c.mode = Mode::Baseline;
        c.weights = None;
        assert_eq!(c.train_config().weights, LossWeights::baseline());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("sed = 1"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("mode = \"fast\""),
            Err(Error::Parse { .. })
        ));
        let c = ExperimentConfig::from_toml("[scene]\nseed = 4").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content_but_not_output() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn benchmark_scenes_share_the_object_only() {
        let mut c = ExperimentConfig::default();
        c.scene.frames = 3;
        c.benchmark.test_frames = 2;
        let b = generate_benchmark(&c).unwrap();
        assert_eq!(b.labeled.frames.len(), 3);
        assert_eq!(b.test.frames.len(), 2);
        assert_eq!(b.labeled.cameras, b.test.cameras);
        assert_ne!(b.labeled.frames[0].landmarks_2d, b.video.frames[0].landmarks_2d);
        assert_ne!(b.labeled.config.seed, b.test.config.seed);
    }

    #[test]
    fn noise_by_data_grid_has_six_cells_in_fixed_order() {
        let mut c = ExperimentConfig {
            mode: Mode::Baseline,
            ..ExperimentConfig::default()
        };
        c.ablate.noise_std = vec![0.0, 5.0, 10.0];
        c.ablate.data_fraction = vec![0.5, 1.0];
        let cells = ablation_cells(&c);
        assert_eq!(cells.len(), 6);
        let axes: Vec<(f64, f64)> = cells.iter().map(|c| (c.noise_std, c.data_fraction)).collect();
        assert_eq!(
            axes,
            vec![(0.0, 0.5), (0.0, 1.0), (5.0, 0.5), (5.0, 1.0), (10.0, 0.5), (10.0, 1.0)]
        );
        assert!(cells.iter().all(|c| c.weights == LossWeights::baseline()));
    }

    #[test]
    fn oracle_checkpoint_scores_zero() {
        let mut c = ExperimentConfig::default();
        c.benchmark.test_frames = 3;
        let test = generate_scene(&c.scene_config("test", 3)).unwrap();
        let ck = Checkpoint::Oracle { seed: 0, landmarks: 5 };
        let s = evaluate_checkpoint(&ck, &test, &c).unwrap();
        assert!(s.nme < 1e-12, "{}", s.nme);
        assert!(s.p_error < 1e-8, "{}", s.p_error);
        assert!(s.auc > 0.999);
        let bad = Checkpoint::Oracle { seed: 0, landmarks: 4 };
        assert!(matches!(evaluate_checkpoint(&bad, &test, &c), Err(Error::Config(_))));
    }

    #[test]
    fn static_scene_has_no_flow_discrepancy() {
        let mut c = ExperimentConfig::default();
        c.scene.frames = 3;
        c.scene.motion.max_yaw_deg = 0.0;
        c.scene.motion.max_pitch_deg = 0.0;
        c.scene.motion.max_translation = 0.0;
        let s = generate_scene(&c.scene_config("video", 3)).unwrap();
        let rows = flowcheck(&s, &c).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.max == 0.0));
        assert_eq!(rows.last().unwrap().points, 40);
    }
}
