//! Accuracy and precision metrics.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::StreamKey;
use crate::synth::affine::{elt_transform_pair, eval_transform, warp_crop, AffineTransform};
use crate::tensor::{BoundingBox, Point2D, ScalarField};
use crate::{Error, Result};

/// Size normalizer of the synthetic benchmark: the square root of the
/// landmark bounding-box area.
pub const NORMALIZER: &str = "sqrt_bbox_area";

pub fn bbox_normalizer(bbox: &BoundingBox) -> f64 {
    (bbox.width() * bbox.height()).sqrt()
}

pub fn nme(pred: &[Point2D], gt: &[Point2D], normalizer: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} landmarks",
            pred.len(),
            gt.len()
        )));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Config(format!("normalizer must be positive, got {normalizer}")));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| p.distance(g)).sum();
    Ok(sum / pred.len() as f64 / normalizer)
}

/// Normalized per-landmark errors of an evaluation set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub errors: Vec<Vec<f64>>,
    pub normalizer: String,
}

impl EvalRecord {
    pub fn new() -> Self {
        EvalRecord {
            errors: Vec::new(),
            normalizer: NORMALIZER.to_string(),
        }
    }

    pub fn push(&mut self, pred: &[Point2D], gt: &[Point2D], normalizer: f64) -> Result<()> {
        // Validates shapes and the normalizer.
        nme(pred, gt, normalizer)?;
        self.errors
            .push(pred.iter().zip(gt).map(|(p, g)| p.distance(g) / normalizer).collect());
        Ok(())
    }

    pub fn per_sample_nme(&self) -> Vec<f64> {
        self.errors
            .iter()
            .map(|e| e.iter().sum::<f64>() / e.len() as f64)
            .collect()
    }

    pub fn mean_nme(&self) -> Result<f64> {
        let s = self.per_sample_nme();
        if s.is_empty() {
            return Err(Error::Empty("no evaluation samples"));
        }
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Area under the cumulative error distribution on `[0, threshold]`,
/// normalized to `[0, 1]` and integrated with the trapezoid rule over
/// `bins` evenly spaced thresholds.
pub fn auc_at(per_sample_nme: &[f64], threshold: f64, bins: usize) -> Result<f64> {
    if per_sample_nme.is_empty() {
        return Err(Error::Empty("AUC of an empty error list"));
    }
    if !(threshold > 0.0) || bins < 2 {
        return Err(Error::Config(format!(
            "AUC needs threshold > 0 and bins >= 2, got {threshold} and {bins}"
        )));
    }
    let mut sorted = per_sample_nme.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let ced = |x: f64| sorted.partition_point(|&e| e <= x) as f64 / n;
    let mut area = 0.0;
    let mut prev = ced(0.0);
    for i in 1..bins {
        let cur = ced(threshold * i as f64 / (bins - 1) as f64);
        area += 0.5 * (prev + cur);
        prev = cur;
    }
    Ok(area / (bins - 1) as f64)
}

/// Fraction of samples whose error is strictly above `threshold`.
pub fn failure_rate(per_sample_nme: &[f64], threshold: f64) -> Result<f64> {
    if per_sample_nme.is_empty() {
        return Err(Error::Empty("failure rate of an empty error list"));
    }
    let fails = per_sample_nme.iter().filter(|&&e| e > threshold).count();
    Ok(fails as f64 / per_sample_nme.len() as f64)
}

/// Mean discrepancy of detections under two random transforms of the same
/// image, mapped back to image coordinates and normalized by the square root
/// of the box area.
///
/// `detector` receives the crop and the image-to-crop transform that produced
/// it and returns crop coordinates.
pub fn p_error<D, R>(
    mut detector: D,
    image: &ScalarField,
    bbox: &BoundingBox,
    size: usize,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64>
where
    D: FnMut(&ScalarField, &AffineTransform) -> Result<Vec<Point2D>>,
    R: Rng + ?Sized,
{
    if n_pairs == 0 {
        return Err(Error::Config("p_error needs at least one pair".into()));
    }
    let eta = bbox_normalizer(bbox);
    if !(eta > 0.0) {
        return Err(Error::Config("p_error needs a bounding box with positive area".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let pair = elt_transform_pair(image, bbox, size, rng)?;
        let da = detector(&pair.crop_a, &pair.theta_a)?;
        let db = detector(&pair.crop_b, &pair.theta_b)?;
        if da.len() != db.len() || da.is_empty() {
            return Err(Error::Shape(format!(
                "detector returned {} and {} landmarks",
                da.len(),
                db.len()
            )));
        }
        let (ia, ib) = (pair.theta_a.inverse(), pair.theta_b.inverse());
        let d: f64 = da
            .iter()
            .zip(&db)
            .map(|(a, b)| ia.apply(*a).distance(&ib.apply(*b)))
            .sum();
        total += d / da.len() as f64 / eta;
    }
    Ok(total / n_pairs as f64)
}

/// An image with its box and reference landmarks.
#[derive(Clone, Copy, Debug)]
pub struct EvalSample<'a> {
    pub image: &'a ScalarField,
    pub bbox: BoundingBox,
    pub gt: &'a [Point2D],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub nme: f64,
    pub auc: f64,
    pub failure_rate: f64,
    pub p_error: f64,
    pub record: EvalRecord,
}

/// Runs `predict` on the evaluation crop of every sample and on
/// `p_error_pairs` random transform pairs per sample. The first argument of
/// `predict` is the sample index.
pub fn evaluate<P>(
    predict: P,
    samples: &[EvalSample<'_>],
    size: usize,
    cfg: &MetricConfig,
    key: StreamKey,
) -> Result<EvalSummary>
where
    P: Fn(usize, &ScalarField, &AffineTransform) -> Result<Vec<Point2D>> + Sync,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let per: Vec<(Vec<Point2D>, f64)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let t = eval_transform(&s.bbox, size)?;
            let crop = warp_crop(s.image, &t, size);
            let inv = t.inverse();
            let pred: Vec<Point2D> = predict(i, &crop, &t)?.into_iter().map(|q| inv.apply(q)).collect();
            let pe = p_error(
                |c: &ScalarField, t: &AffineTransform| predict(i, c, t),
                s.image,
                &s.bbox,
                size,
                cfg.p_error_pairs,
                &mut key.indexed(i as u64).rng(),
            )?;
            Ok((pred, pe))
        })
        .collect::<Result<_>>()?;
    let mut record = EvalRecord::new();
    let mut pe_sum = 0.0;
    for (s, (pred, pe)) in samples.iter().zip(&per) {
        record.push(pred, s.gt, bbox_normalizer(&s.bbox))?;
        pe_sum += pe;
    }
    let per_sample = record.per_sample_nme();
    Ok(EvalSummary {
        nme: record.mean_nme()?,
        auc: auc_at(&per_sample, cfg.auc_threshold, cfg.auc_bins)?,
        failure_rate: failure_rate(&per_sample, cfg.failure_threshold)?,
        p_error: pe_sum / samples.len() as f64,
        record,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub auc_threshold: f64,
    pub auc_bins: usize,
    pub failure_threshold: f64,
    pub p_error_pairs: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            auc_threshold: 0.08,
            auc_bins: 1000,
            failure_threshold: 0.1,
            p_error_pairs: 2,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.auc_threshold > 0.0)
            || self.auc_bins < 2
            || !(self.failure_threshold > 0.0)
            || self.p_error_pairs == 0
        {
            return Err(Error::Config(
                "metrics need auc_threshold > 0, auc_bins >= 2, failure_threshold > 0 and p_error_pairs >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One row of a report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub normalizer: String,
    pub seed: u64,
    #[serde(rename = "config-hash")]
    pub config_hash: String,
}

pub const REPORT_COLUMNS: [&str; 5] = ["metric", "value", "normalizer", "seed", "config-hash"];

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::parse("report", format!("unexpected columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::parse("csv", e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn pts(v: &[(f64, f64)]) -> Vec<Point2D> {
        v.iter().map(|&(x, y)| Point2D::new(x, y)).collect()
    }

    #[test]
    fn nme_examples() {
        let a = pts(&[(1.0, 2.0), (3.0, 4.0)]);
        assert_eq!(nme(&a, &a, 10.0).unwrap(), 0.0);
        assert_relative_eq!(nme(&pts(&[(5.0, 0.0)]), &pts(&[(0.0, 0.0)]), 100.0).unwrap(), 0.05);
        assert!(nme(&a, &a[..1], 1.0).is_err());
        assert!(nme(&a, &a, 0.0).is_err());
        let mut rng = StreamKey::root(1).rng();
        for _ in 0..50 {
            let p: Vec<Point2D> = (0..4).map(|_| Point2D::new(rng.gen(), rng.gen())).collect();
            let g: Vec<Point2D> = (0..4).map(|_| Point2D::new(rng.gen(), rng.gen())).collect();
            let mut want = 0.0;
            for i in 0..4 {
                want += ((p[i].x - g[i].x).powi(2) + (p[i].y - g[i].y).powi(2)).sqrt();
            }
            assert_relative_eq!(nme(&p, &g, 3.0).unwrap(), want / 12.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn auc_examples() {
        assert_relative_eq!(auc_at(&[0.0; 10], 0.08, 1000).unwrap(), 1.0);
        assert_eq!(auc_at(&[0.5; 10], 0.08, 1000).unwrap(), 0.0);
        let uniform: Vec<f64> = (0..10_000).map(|i| 0.08 * (i as f64 + 0.5) / 10_000.0).collect();
        assert!((auc_at(&uniform, 0.08, 1000).unwrap() - 0.5).abs() <= 1e-3);
        assert!(auc_at(&[], 0.08, 1000).is_err());
        assert!(auc_at(&[0.1], 0.0, 1000).is_err());
        assert!(auc_at(&[0.1], 0.1, 1).is_err());
    }

    #[test]
    fn failure_rate_examples() {
        assert_eq!(failure_rate(&[0.0; 5], 0.1).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.2; 5], 0.1).unwrap(), 1.0);
        assert_eq!(failure_rate(&[0.1], 0.1).unwrap(), 0.0);
        assert!(failure_rate(&[], 0.1).is_err());
        let mut rng = StreamKey::root(2).rng();
        let e: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..0.2)).collect();
        let mut count = 0;
        for v in &e {
            if *v > 0.1 {
                count += 1;
            }
        }
        assert_eq!(failure_rate(&e, 0.1).unwrap(), count as f64 / 500.0);
    }

    fn scene() -> (ScalarField, BoundingBox, Vec<Point2D>) {
        let image = ScalarField::from_fn(64, 64, |x, y| ((x as f64) * 0.3).sin() + ((y as f64) * 0.2).cos());
        let gt = pts(&[(25.0, 28.0), (38.0, 30.0), (31.0, 40.0)]);
        (image, BoundingBox::around(&gt).unwrap(), gt)
    }

    #[test]
    fn equivariant_detector_has_zero_p_error() {
        let (image, bbox, gt) = scene();
        for seed in 0..10 {
            let oracle = |_: &ScalarField, t: &AffineTransform| Ok(gt.iter().map(|p| t.apply(*p)).collect());
            let e = p_error(oracle, &image, &bbox, 32, 5, &mut StreamKey::root(seed).rng()).unwrap();
            assert!(e < 1e-8, "{e}");
        }
    }

    #[test]
    fn constant_detector_translation_closed_form() {
        // With pure translations of a fixed window size, a constant crop
        // answer maps back to points that differ by the window offset.
        let (image, bbox, _) = scene();
        let constant = |_: &ScalarField, _: &AffineTransform| Ok(pts(&[(10.0, 12.0), (20.0, 5.0)]));
        let mut rng = StreamKey::root(3).rng();
        let e = p_error(constant, &image, &bbox, 32, 1, &mut rng).unwrap();
        assert!(e > 0.0);

        use crate::synth::affine::EltParams;
        let a = EltParams {
            scale: 1.0,
            shift: (0.05, 0.0),
            rotation: 0.0,
        };
        let b = EltParams {
            scale: 1.0,
            shift: (-0.05, 0.03),
            rotation: 0.0,
        };
        let ta = a.transform(&bbox, 32).unwrap();
        let tb = b.transform(&bbox, 32).unwrap();
        let side = bbox.expanded(crate::synth::affine::CROP_EXPAND).squared().width();
        let q = Point2D::new(10.0, 12.0);
        let d = ta.inverse().apply(q).distance(&tb.inverse().apply(q));
        assert_relative_eq!(d, side * (0.1f64.powi(2) + 0.03f64.powi(2)).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn jittered_oracle_matches_monte_carlo() {
        let (image, bbox, gt) = scene();
        let s = 0.5;
        let normal = Normal::new(0.0, s).unwrap();
        let mut jit = StreamKey::root(4).rng();
        let noisy = |_: &ScalarField, t: &AffineTransform| {
            // Jitter in image space keeps the expected value transform free.
            Ok(gt
                .iter()
                .map(|p| {
                    t.apply(Point2D::new(
                        p.x + normal.sample(&mut jit),
                        p.y + normal.sample(&mut jit),
                    ))
                })
                .collect())
        };
        let e = p_error(noisy, &image, &bbox, 32, 2000, &mut StreamKey::root(5).rng()).unwrap();
        // ‖g1 − g2‖ with g ~ N(0, I) is Rayleigh with scale √2.
        let expect = s * (2.0f64).sqrt() * (std::f64::consts::PI / 2.0).sqrt() / bbox_normalizer(&bbox);
        assert!((e - expect).abs() < 0.03 * expect, "{e} vs {expect}");
    }

    #[test]
    fn p_error_rejects_zero_pairs() {
        let (image, bbox, gt) = scene();
        let oracle = |_: &ScalarField, t: &AffineTransform| Ok(gt.iter().map(|p| t.apply(*p)).collect());
        assert!(p_error(oracle, &image, &bbox, 32, 0, &mut StreamKey::root(1).rng()).is_err());
    }

    #[test]
    fn report_round_trip_and_schema() {
        let rows = vec![ReportRow {
            metric: "nme".into(),
            value: 0.125,
            normalizer: NORMALIZER.into(),
            seed: 7,
            config_hash: "abc".into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(std::fs::File::create(&path).unwrap(), &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "metric,value,normalizer,seed,config-hash");
        assert_eq!(read_report(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn nme_is_homogeneous(c in 0.0f64..10.0, xs in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let gt = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, -1.0)]);
            let pred: Vec<Point2D> = (0..3).map(|i| Point2D::new(gt[i].x + xs[2 * i], gt[i].y + xs[2 * i + 1])).collect();
            let scaled: Vec<Point2D> = (0..3).map(|i| Point2D::new(gt[i].x + c * xs[2 * i], gt[i].y + c * xs[2 * i + 1])).collect();
            let a = nme(&pred, &gt, 2.0).unwrap();
            let b = nme(&scaled, &gt, 2.0).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-12 * (1.0 + b));
        }

        #[test]
        fn auc_is_monotone(errs in proptest::collection::vec(0.0f64..0.12, 1..40), i in 0usize..40, bump in 0.0f64..0.05) {
            let i = i % errs.len();
            let mut worse = errs.clone();
            worse[i] += bump;
            prop_assert!(auc_at(&worse, 0.08, 200).unwrap() <= auc_at(&errs, 0.08, 200).unwrap() + 1e-15);
        }

        #[test]
        fn p_error_ignores_landmark_order(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let (image, bbox, gt) = scene();
            let det = |perm: bool| {
                let gt = gt.clone();
                move |_: &ScalarField, t: &AffineTransform| {
                    let mut out: Vec<Point2D> = gt.iter().map(|p| t.apply(*p) + crate::tensor::Displacement2D::new(shift, 0.0)).collect();
                    if perm {
                        out.reverse();
                    }
                    Ok(out)
                }
            };
            let a = p_error(det(false), &image, &bbox, 32, 2, &mut StreamKey::root(seed).rng()).unwrap();
            let b = p_error(det(true), &image, &bbox, 32, 2, &mut StreamKey::root(seed).rng()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
