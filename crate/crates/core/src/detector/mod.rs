//! A small convolutional landmark detector with hand-written backprop.
//!
//! Shared trunk: per-image standardization, a 3x3 convolution to `conv1`
//! channels, then a stride-2 3x3 convolution to `conv2` channels, both with
//! ReLU. Two heads sit on the trunk:
//!
//! * regression: 2x2 average pooling, a hidden fully connected layer with
//!   ReLU and a linear layer giving `2K` crop-pixel coordinates;
//! * heatmap: a 3x3 convolution to `K` maps at half the input resolution,
//!   made positive with `exp`. Heatmap pixel `q` sits over crop pixel `2q`.
//!
//! All weights live in one flat vector; [`Layout`] gives the offsets.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod train;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::StreamKey;
use crate::tensor::{Point2D, ScalarField};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Regression,
    Heatmap,
}

impl DetectorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorMode::Regression => "regression",
            DetectorMode::Heatmap => "heatmap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(DetectorMode::Regression),
            "heatmap" => Ok(DetectorMode::Heatmap),
            other => Err(Error::Config(format!("unknown detector mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Side of the square input crop.
    pub input_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 32,
            conv1: 8,
            conv2: 16,
            hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    pub landmarks: usize,
    pub arch: ArchConfig,
    /// Soft-argmax temperature used to read coordinates off heatmaps.
    pub temperature: f64,
    /// Ground-truth heatmap blob scale, in heatmap pixels.
    pub sigma_gt: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            mode: DetectorMode::Regression,
            landmarks: 5,
            arch: ArchConfig::default(),
            temperature: 0.1,
            sigma_gt: 1.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.landmarks == 0 {
            return Err(Error::Config("landmarks must be >= 1".into()));
        }
        if a.input_size < 8 || !a.input_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 4 and >= 8, got {}",
                a.input_size
            )));
        }
        if a.conv1 == 0 || a.conv2 == 0 || a.hidden == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.sigma_gt > 0.0) {
            return Err(Error::Config("temperature and sigma_gt must be positive".into()));
        }
        Ok(())
    }

    /// Side of the trunk output and of the heatmaps.
    pub fn feature_size(&self) -> usize {
        self.arch.input_size / 2
    }

    /// Crop-pixel position of the centre of the input.
    pub fn crop_center(&self) -> f64 {
        (self.arch.input_size as f64 - 1.0) / 2.0
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each weight block in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: usize,
    pub conv1_b: usize,
    pub conv2_w: usize,
    pub conv2_b: usize,
    /// Regression: hidden layer weights. Heatmap: head convolution weights.
    pub head1_w: usize,
    pub head1_b: usize,
    /// Regression only: output layer.
    pub head2_w: usize,
    pub head2_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &DetectorConfig) -> Self {
        let a = &cfg.arch;
        let k = cfg.landmarks;
        let conv1_w = 0;
        let conv1_b = conv1_w + a.conv1 * 9;
        let conv2_w = conv1_b + a.conv1;
        let conv2_b = conv2_w + a.conv2 * a.conv1 * 9;
        let head1_w = conv2_b + a.conv2;
        match cfg.mode {
            DetectorMode::Regression => {
                let pooled = a.conv2 * (a.input_size / 4) * (a.input_size / 4);
                let head1_b = head1_w + a.hidden * pooled;
                let head2_w = head1_b + a.hidden;
                let head2_b = head2_w + 2 * k * a.hidden;
                Layout {
                    conv1_w,
                    conv1_b,
                    conv2_w,
                    conv2_b,
                    head1_w,
                    head1_b,
                    head2_w,
                    head2_b,
                    total: head2_b + 2 * k,
                }
            }
            DetectorMode::Heatmap => {
                let head1_b = head1_w + k * a.conv2 * 9;
                let end = head1_b + k;
                Layout {
                    conv1_w,
                    conv1_b,
                    conv2_w,
                    conv2_b,
                    head1_w,
                    head1_b,
                    head2_w: end,
                    head2_b: end,
                    total: end,
                }
            }
        }
    }
}

/// Heatmap logits are clamped here before `exp`.
const LOGIT_CLAMP: f64 = 30.0;
const HEATMAP_BIAS_INIT: f64 = -3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: Vec<f64>,
}

/// What a forward pass produces.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Crop-pixel coordinates.
    Coords(Vec<Point2D>),
    Heatmaps(Vec<ScalarField>),
}

/// Gradient of a loss with respect to a [`Prediction`].
#[derive(Clone, Debug, PartialEq)]
pub enum OutputGrad {
    Coords(Vec<[f64; 2]>),
    Heatmaps(Vec<ScalarField>),
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    /// Heatmap logits before clamping.
    logits: Vec<f64>,
    pub prediction: Prediction,
}

impl Detector {
    /// Random initialization: He-normal weights, zero trunk biases, output
    /// biases at the crop centre (regression) or at a small constant
    /// (heatmap).
    pub fn init(config: DetectorConfig, key: StreamKey) -> Result<Self> {
        config.validate()?;
        let l = config.layout();
        let a = &config.arch;
        let mut rng = key.rng();
        let mut params = vec![0.0; l.total];
        let fill = |params: &mut [f64], fan_in: usize, scale: f64, rng: &mut crate::rng::StreamRng| {
            let std = scale * (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in params.iter_mut() {
                *p = normal.sample(rng);
            }
        };
        fill(&mut params[l.conv1_w..l.conv1_b], 9, 1.0, &mut rng);
        fill(&mut params[l.conv2_w..l.conv2_b], 9 * a.conv1, 1.0, &mut rng);
        match config.mode {
            DetectorMode::Regression => {
                let pooled = (l.head1_b - l.head1_w) / a.hidden;
                fill(&mut params[l.head1_w..l.head1_b], pooled, 1.0, &mut rng);
                fill(&mut params[l.head2_w..l.head2_b], a.hidden, 0.1, &mut rng);
                let c = config.crop_center();
                params[l.head2_b..l.total].fill(c);
            }
            DetectorMode::Heatmap => {
                fill(&mut params[l.head1_w..l.head1_b], 9 * a.conv2, 0.1, &mut rng);
                params[l.head1_b..l.total].fill(HEATMAP_BIAS_INIT);
            }
        }
        Ok(Detector { config, params })
    }

    pub fn from_params(config: DetectorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.layout().total;
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, architecture needs {expected}",
                params.len()
            )));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("detector parameters"));
        }
        Ok(Detector { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, image: &ScalarField) -> Result<()> {
        let s = self.config.arch.input_size;
        if image.width() != s || image.height() != s {
            return Err(Error::Shape(format!(
                "detector expects {s}x{s} crops, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &ScalarField) -> Result<Forward> {
        self.check_input(image)?;
        let cfg = &self.config;
        let a = &cfg.arch;
        let l = cfg.layout();
        let p = &self.params;
        let s = a.input_size;
        let f = cfg.feature_size();
        let input = standardize(image.samples());
        let mut a1 = conv3x3(
            &input,
            1,
            s,
            s,
            &p[l.conv1_w..l.conv1_b],
            &p[l.conv1_b..l.conv2_w],
            a.conv1,
            1,
        );
        relu(&mut a1);
        let mut a2 = conv3x3(
            &a1,
            a.conv1,
            s,
            s,
            &p[l.conv2_w..l.conv2_b],
            &p[l.conv2_b..l.head1_w],
            a.conv2,
            2,
        );
        relu(&mut a2);
        match cfg.mode {
            DetectorMode::Regression => {
                let pooled = avg_pool2(&a2, a.conv2, f, f);
                let mut hidden = dense(&pooled, &p[l.head1_w..l.head1_b], &p[l.head1_b..l.head2_w], a.hidden);
                relu(&mut hidden);
                let out = dense(
                    &hidden,
                    &p[l.head2_w..l.head2_b],
                    &p[l.head2_b..l.total],
                    2 * cfg.landmarks,
                );
                let coords = out.chunks(2).map(|c| Point2D::new(c[0], c[1])).collect();
                Ok(Forward {
                    input,
                    a1,
                    a2,
                    pooled,
                    hidden,
                    logits: Vec::new(),
                    prediction: Prediction::Coords(coords),
                })
            }
            DetectorMode::Heatmap => {
                let logits = conv3x3(
                    &a2,
                    a.conv2,
                    f,
                    f,
                    &p[l.head1_w..l.head1_b],
                    &p[l.head1_b..l.total],
                    cfg.landmarks,
                    1,
                );
                let maps = logits
                    .chunks(f * f)
                    .map(|z| ScalarField::new(f, f, z.iter().map(|v| v.min(LOGIT_CLAMP).exp()).collect()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Forward {
                    input,
                    a1,
                    a2,
                    pooled: Vec::new(),
                    hidden: Vec::new(),
                    logits,
                    prediction: Prediction::Heatmaps(maps),
                })
            }
        }
    }

    /// Accumulates `d loss / d params` into `grads`.
    pub fn backward(&self, fwd: &Forward, grad_out: &OutputGrad, grads: &mut [f64]) -> Result<()> {
        let cfg = &self.config;
        let a = &cfg.arch;
        let l = cfg.layout();
        if grads.len() != l.total {
            return Err(Error::Shape("gradient buffer size differs from parameter count".into()));
        }
        let p = &self.params;
        let s = a.input_size;
        let f = cfg.feature_size();
        let mut g_a2 = match (cfg.mode, grad_out) {
            (DetectorMode::Regression, OutputGrad::Coords(g)) => {
                if g.len() != cfg.landmarks {
                    return Err(Error::Shape("coordinate gradient has the wrong landmark count".into()));
                }
                let g_out: Vec<f64> = g.iter().flat_map(|v| [v[0], v[1]]).collect();
                let (gw2, rest) = grads[l.head2_w..l.total].split_at_mut(l.head2_b - l.head2_w);
                let mut g_hidden = dense_backward(&fwd.hidden, &p[l.head2_w..l.head2_b], &g_out, gw2, rest);
                relu_backward(&fwd.hidden, &mut g_hidden);
                let (gw1, gb1) = grads[l.head1_w..l.head2_w].split_at_mut(l.head1_b - l.head1_w);
                let g_pooled = dense_backward(&fwd.pooled, &p[l.head1_w..l.head1_b], &g_hidden, gw1, gb1);
                avg_pool2_backward(&g_pooled, a.conv2, f, f)
            }
            (DetectorMode::Heatmap, OutputGrad::Heatmaps(g)) => {
                if g.len() != cfg.landmarks || g.iter().any(|m| m.width() != f || m.height() != f) {
                    return Err(Error::Shape("heatmap gradient has the wrong shape".into()));
                }
                let g_logits: Vec<f64> = g
                    .iter()
                    .flat_map(|m| m.samples().iter().copied())
                    .zip(&fwd.logits)
                    .map(|(gm, &z)| if z < LOGIT_CLAMP { gm * z.exp() } else { 0.0 })
                    .collect();
                let (gw, gb) = grads[l.head1_w..l.total].split_at_mut(l.head1_b - l.head1_w);
                conv3x3_backward(
                    &fwd.a2,
                    a.conv2,
                    f,
                    f,
                    &p[l.head1_w..l.head1_b],
                    cfg.landmarks,
                    1,
                    &g_logits,
                    gw,
                    gb,
                    true,
                )
                .expect("input gradient requested")
            }
            _ => return Err(Error::Shape("output gradient does not match detector mode".into())),
        };
        relu_backward(&fwd.a2, &mut g_a2);
        let (gw, gb) = grads[l.conv2_w..l.head1_w].split_at_mut(l.conv2_b - l.conv2_w);
        let mut g_a1 = conv3x3_backward(
            &fwd.a1,
            a.conv1,
            s,
            s,
            &p[l.conv2_w..l.conv2_b],
            a.conv2,
            2,
            &g_a2,
            gw,
            gb,
            true,
        )
        .expect("input gradient requested");
        relu_backward(&fwd.a1, &mut g_a1);
        let (gw, gb) = grads[l.conv1_w..l.conv2_w].split_at_mut(l.conv1_b - l.conv1_w);
        conv3x3_backward(
            &fwd.input,
            1,
            s,
            s,
            &p[l.conv1_w..l.conv1_b],
            a.conv1,
            1,
            &g_a1,
            gw,
            gb,
            false,
        );
        Ok(())
    }

    /// Crop-pixel landmark coordinates.
    pub fn predict_coords(&self, image: &ScalarField) -> Result<Vec<Point2D>> {
        let fwd = self.forward(image)?;
        Ok(self.coords_of(&fwd.prediction))
    }

    /// Crop-pixel coordinates of a prediction; heatmaps go through soft-argmax.
    pub fn coords_of(&self, prediction: &Prediction) -> Vec<Point2D> {
        match prediction {
            Prediction::Coords(c) => c.clone(),
            Prediction::Heatmaps(maps) => maps
                .iter()
                .map(|m| {
                    let (p, _) = soft_argmax(m, self.config.temperature).expect("heatmaps are finite");
                    Point2D::new(2.0 * p.x, 2.0 * p.y)
                })
                .collect(),
        }
    }

    /// Turns a gradient with respect to crop coordinates into a gradient
    /// with respect to the prediction.
    pub fn coord_grad_to_output(&self, prediction: &Prediction, grad: &[[f64; 2]]) -> Result<OutputGrad> {
        match prediction {
            Prediction::Coords(_) => Ok(OutputGrad::Coords(grad.to_vec())),
            Prediction::Heatmaps(maps) => {
                let mut out = Vec::with_capacity(maps.len());
                for (m, g) in maps.iter().zip(grad) {
                    let (_, jac) = soft_argmax(m, self.config.temperature)?;
                    let vals = jac.iter().map(|j| 2.0 * (g[0] * j[0] + g[1] * j[1])).collect();
                    out.push(ScalarField::new(m.width(), m.height(), vals)?);
                }
                Ok(OutputGrad::Heatmaps(out))
            }
        }
    }
}

/// Zero-mean, unit-variance copy of the samples (all zeros for a flat image).
fn standardize(samples: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    samples.iter().map(|v| (v - mean) * scale).collect()
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 3x3 convolution with zero padding 1. Input and output are channel-major.
#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        let o = &mut out[co * ho * wo..(co + 1) * ho * wo];
        o.fill(bias[co]);
        for ci in 0..cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut o[oy * wo..(oy + 1) * wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *ov += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut grad_in = if want_input { vec![0.0; cin * h * w] } else { Vec::new() };
    for co in 0..cout {
        let go = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        grad_b[co] += go.iter().sum::<f64>();
        for ci in 0..cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = go[oy * wo + ox];
                            acc += g * plane[base + ix as usize];
                            if want_input {
                                grad_in[ci * h * w + base + ix as usize] += g * wv;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    want_input.then_some(grad_in)
}

fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let i = |yy: usize, xx: usize| input[(ch * h + yy) * w + xx];
                out[(ch * ho + y) * wo + x] =
                    0.25 * (i(2 * y, 2 * x) + i(2 * y, 2 * x + 1) + i(2 * y + 1, 2 * x) + i(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}

fn avg_pool2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                out[(ch * h + yy) * w + xx] = 0.25 * grad[(ch * ho + yy / 2) * wo + xx / 2];
            }
        }
    }
    out
}

fn dense(input: &[f64], weight: &[f64], bias: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = input.len();
    (0..n_out)
        .map(|o| {
            bias[o]
                + weight[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect()
}

fn dense_backward(input: &[f64], weight: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
    let n_in = input.len();
    let mut grad_in = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * input[i];
            grad_in[i] += g * row[i];
        }
    }
    grad_in
}

/// Softmax-weighted expected grid position of `map / temperature`, with the
/// derivative of the position with respect to every sample.
pub fn soft_argmax(map: &ScalarField, temperature: f64) -> Result<(Point2D, Vec<[f64; 2]>)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let s = map.samples();
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("heatmap"));
    }
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = s.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let w = map.width();
    let (mut ex, mut ey) = (0.0, 0.0);
    for (i, wt) in weights.iter().enumerate() {
        ex += wt * (i % w) as f64;
        ey += wt * (i / w) as f64;
    }
    let p = Point2D::new(ex / total, ey / total);
    let jac = weights
        .iter()
        .enumerate()
        .map(|(i, wt)| {
            let a = wt / total / temperature;
            [a * ((i % w) as f64 - p.x), a * ((i / w) as f64 - p.y)]
        })
        .collect();
    Ok((p, jac))
}

/// Unnormalized Gaussian blob with peak 1 at `coord`.
pub fn gt_heatmap(coord: Point2D, sigma: f64, width: usize, height: usize) -> Result<ScalarField> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma_gt must be positive, got {sigma}")));
    }
    let probe = ScalarField::zeros(width, height);
    if !probe.contains(&coord) {
        return Err(Error::OutOfBounds {
            x: coord.x,
            y: coord.y,
            width,
            height,
        });
    }
    let two_s2 = 2.0 * sigma * sigma;
    Ok(ScalarField::from_fn(width, height, |x, y| {
        (-((x as f64 - coord.x).powi(2) + (y as f64 - coord.y).powi(2)) / two_s2).exp()
    }))
}
