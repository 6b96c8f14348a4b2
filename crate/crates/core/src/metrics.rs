//! Evaluation-only image quality measures and report assembly.
//!
//! PSNR and NRMSE are direct formulas; the SSIM metric delegates to the
//! loss-side implementation so metric and loss agree by construction.
//! Reports are per-image rows plus per-configuration aggregates, both
//! serialized as CSV.

use ndarray::{Array2, ArrayView2};

use crate::data::{DenoisingDataset, FewShotSize};
use crate::error::MetricError;
use crate::losses::{ssim_value, SsimParams};

/// Peak signal-to-noise ratio in dB: 10 log10(range^2 / MSE). Returns
/// +inf when the images are identical.
pub fn psnr(
    reference: &ArrayView2<f64>,
    candidate: &ArrayView2<f64>,
    data_range: f64,
) -> Result<f64, MetricError> {
    if reference.dim() != candidate.dim() {
        return Err(MetricError::ShapeMismatch(
            vec![reference.nrows(), reference.ncols()],
            vec![candidate.nrows(), candidate.ncols()],
        ));
    }
    assert!(data_range > 0.0, "data_range must be positive");
    let n = reference.len() as f64;
    let mse = reference
        .iter()
        .zip(candidate.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Structural similarity, identical to the loss-side computation.
pub fn ssim_metric(
    reference: &ArrayView2<f64>,
    candidate: &ArrayView2<f64>,
    params: &SsimParams,
) -> Result<f64, MetricError> {
    ssim_value(reference, candidate, params).map_err(|e| match e {
        crate::error::LossError::ShapeMismatch(a, b) => MetricError::ShapeMismatch(a, b),
        other => MetricError::ShapeMismatch(vec![0], vec![other.to_string().len()]),
    })
}

/// Denominator convention for NRMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NrmseNormalization {
    /// max(reference) - min(reference). The reporting default.
    Range,
    /// mean(reference).
    Mean,
    /// sqrt(mean(reference^2)).
    Euclidean,
}

/// Root-mean-square error divided by the chosen reference statistic.
pub fn nrmse(
    reference: &ArrayView2<f64>,
    candidate: &ArrayView2<f64>,
    normalization: NrmseNormalization,
) -> Result<f64, MetricError> {
    if reference.dim() != candidate.dim() {
        return Err(MetricError::ShapeMismatch(
            vec![reference.nrows(), reference.ncols()],
            vec![candidate.nrows(), candidate.ncols()],
        ));
    }
    let n = reference.len() as f64;
    let rmse = (reference
        .iter()
        .zip(candidate.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt();
    let denom = match normalization {
        NrmseNormalization::Range => {
            let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        }
        NrmseNormalization::Mean => reference.sum() / n,
        NrmseNormalization::Euclidean => {
            (reference.iter().map(|&v| v * v).sum::<f64>() / n).sqrt()
        }
    };
    if denom == 0.0 {
        return Err(MetricError::DegenerateReference(match normalization {
            NrmseNormalization::Range => "range",
            NrmseNormalization::Mean => "mean",
            NrmseNormalization::Euclidean => "euclidean",
        }));
    }
    Ok(rmse / denom)
}

/// One evaluated test image.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub experiment: String,
    pub n_samples: FewShotSize,
    pub image_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

/// Mean metrics of one (dataset, experiment, n_samples) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub experiment: String,
    pub n_samples: FewShotSize,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub images: usize,
}

/// Per-image rows keyed by experiment configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

/// Exact column header of the per-image metric CSV.
pub const METRIC_CSV_HEADER: [&str; 7] = [
    "dataset", "experiment", "n_samples", "image_id", "psnr", "ssim", "nrmse",
];

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        Self { rows }
    }

    /// Merge rows from several reports.
    pub fn merge(reports: impl IntoIterator<Item = MetricReport>) -> Self {
        let mut rows = Vec::new();
        for r in reports {
            rows.extend(r.rows);
        }
        Self { rows }
    }

    /// Group rows by (dataset, experiment, n_samples) and average each
    /// metric. Groups come out in first-appearance order.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, String, FewShotSize)> = Vec::new();
        let mut acc: std::collections::HashMap<(String, String, String), (f64, f64, f64, usize)> =
            std::collections::HashMap::new();
        for row in &self.rows {
            let key = (
                row.dataset.clone(),
                row.experiment.clone(),
                row.n_samples.to_string(),
            );
            let entry = acc.entry(key.clone()).or_insert_with(|| {
                order.push((row.dataset.clone(), row.experiment.clone(), row.n_samples));
                (0.0, 0.0, 0.0, 0)
            });
            entry.0 += row.psnr;
            entry.1 += row.ssim;
            entry.2 += row.nrmse;
            entry.3 += 1;
        }
        order
            .into_iter()
            .map(|(dataset, experiment, n_samples)| {
                let key = (dataset.clone(), experiment.clone(), n_samples.to_string());
                let (p, s, r, c) = acc[&key];
                AggregateRow {
                    dataset,
                    experiment,
                    n_samples,
                    psnr: p / c as f64,
                    ssim: s / c as f64,
                    nrmse: r / c as f64,
                    images: c,
                }
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(METRIC_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.experiment.clone(),
                r.n_samples.to_string(),
                r.image_id.to_string(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                r.nrmse.to_string(),
            ])?;
        }
        w.flush()
    }

    pub fn read_csv<R: std::io::Read>(source: R) -> Result<Self, MetricError> {
        let mut reader = csv::Reader::from_reader(source);
        let bad = |m: String| MetricError::ShapeMismatch(vec![], vec![m.len()]);
        {
            let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
            if headers.iter().collect::<Vec<_>>() != METRIC_CSV_HEADER {
                return Err(MetricError::DegenerateReference("metric csv header"));
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| record.get(i).unwrap_or_default().to_string();
            rows.push(MetricRow {
                dataset: field(0),
                experiment: field(1),
                n_samples: field(2)
                    .parse()
                    .map_err(|_| MetricError::DegenerateReference("n_samples"))?,
                image_id: field(3)
                    .parse()
                    .map_err(|_| MetricError::DegenerateReference("image_id"))?,
                psnr: field(4)
                    .parse()
                    .map_err(|_| MetricError::DegenerateReference("psnr"))?,
                ssim: field(5)
                    .parse()
                    .map_err(|_| MetricError::DegenerateReference("ssim"))?,
                nrmse: field(6)
                    .parse()
                    .map_err(|_| MetricError::DegenerateReference("nrmse"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Write the aggregate table as CSV (one row per configuration).
pub fn write_aggregate_csv<W: std::io::Write>(
    aggregates: &[AggregateRow],
    sink: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["dataset", "experiment", "n_samples", "psnr", "ssim", "nrmse", "images"])?;
    for a in aggregates {
        w.write_record([
            a.dataset.clone(),
            a.experiment.clone(),
            a.n_samples.to_string(),
            a.psnr.to_string(),
            a.ssim.to_string(),
            a.nrmse.to_string(),
            a.images.to_string(),
        ])?;
    }
    w.flush()
}

/// Labels and measurement parameters of one evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub dataset: String,
    pub experiment: String,
    pub n_samples: FewShotSize,
    pub ssim: SsimParams,
    pub nrmse_normalization: NrmseNormalization,
    /// PSNR data range; 1.0 in normalized space.
    pub data_range: f64,
}

impl EvalContext {
    pub fn new(dataset: &str, experiment: &str, n_samples: FewShotSize) -> Self {
        Self {
            dataset: dataset.to_string(),
            experiment: experiment.to_string(),
            n_samples,
            ssim: SsimParams::default(),
            nrmse_normalization: NrmseNormalization::Range,
            data_range: 1.0,
        }
    }
}

/// Denoise every test frame with `denoise` and measure all three
/// metrics against the clean reference in normalized space. Rows are
/// sorted by image id.
pub fn evaluate<F>(
    denoise: F,
    dataset: &DenoisingDataset,
    ctx: &EvalContext,
) -> Result<MetricReport, MetricError>
where
    F: Fn(&ArrayView2<f64>) -> Array2<f64>,
{
    if dataset.test_len() == 0 {
        return Err(MetricError::EmptyTestSet);
    }
    let mut rows = Vec::with_capacity(dataset.test_len());
    for i in 0..dataset.test_len() {
        let (noisy, clean) = dataset.test_pair(i);
        let output = denoise(&noisy.view());
        let p = psnr(&clean.view(), &output.view(), ctx.data_range)?;
        let s = ssim_metric(&clean.view(), &output.view(), &ctx.ssim)?;
        let r = nrmse(&clean.view(), &output.view(), ctx.nrmse_normalization)?;
        rows.push(MetricRow {
            dataset: ctx.dataset.clone(),
            experiment: ctx.experiment.clone(),
            n_samples: ctx.n_samples,
            image_id: dataset.test_indices()[i],
            psnr: p,
            ssim: s,
            nrmse: r,
        });
    }
    rows.sort_by_key(|r| r.image_id);
    Ok(MetricReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, synthesize_ground_truth, DatasetParams, ImageStack};
    use crate::rng::SeededRng;
    use ndarray::Array2;

    #[test]
    fn psnr_identical_images_is_infinite() {
        let a = Array2::<f64>::from_elem((8, 8), 0.3);
        assert_eq!(psnr(&a.view(), &a.view(), 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_closed_form_mse_one_range_255() {
        // candidate offset by exactly 1 everywhere: MSE = 1
        let a = Array2::<f64>::from_elem((16, 16), 100.0);
        let b = Array2::<f64>::from_elem((16, 16), 101.0);
        let v = psnr(&a.view(), &b.view(), 255.0).unwrap();
        assert!((v - 20.0 * 255.0f64.log10()).abs() < 1e-12);
        assert!((v - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn psnr_closed_form_uniform_tenth_error() {
        let a = Array2::<f64>::from_elem((8, 8), 0.5);
        let b = Array2::<f64>::from_elem((8, 8), 0.6);
        let v = psnr(&a.view(), &b.view(), 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = SeededRng::new(5);
        let reference = Array2::from_shape_fn((32, 32), |_| rng.uniform());
        let mut noise_dir = Array2::from_shape_fn((32, 32), |_| rng.normal());
        let scale = (noise_dir.iter().map(|v| v * v).sum::<f64>() / 1024.0).sqrt();
        noise_dir.mapv_inplace(|v| v / scale);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.25] {
            let candidate = &reference + &noise_dir.mapv(|v| v * amp);
            let v = psnr(&reference.view(), &candidate.view(), 1.0).unwrap();
            assert!(v < last, "psnr must fall as noise grows");
            last = v;
        }
    }

    #[test]
    fn ssim_metric_matches_loss_relation() {
        let mut rng = SeededRng::new(6);
        let p = SsimParams::default();
        for _ in 0..5 {
            let x = Array2::from_shape_fn((24, 24), |_| rng.uniform());
            let y = Array2::from_shape_fn((24, 24), |_| rng.uniform());
            let m = ssim_metric(&x.view(), &y.view(), &p).unwrap();
            // metric equals 1 - 2*dssim by definition
            let mut g = crate::autodiff::Graph::new();
            let a = g.constant(x.clone().into_shape_with_order((1, 1, 24, 24)).unwrap());
            let b = g.constant(y.clone().into_shape_with_order((1, 1, 24, 24)).unwrap());
            let d = crate::losses::dssim_loss(&mut g, a, b, &p).unwrap();
            assert!((m - (1.0 - 2.0 * g.scalar_value(d))).abs() < 1e-12);
        }
        let x = Array2::<f64>::from_elem((16, 16), 0.4);
        assert_eq!(ssim_metric(&x.view(), &x.view(), &p).unwrap(), 1.0);
    }

    #[test]
    fn nrmse_checkerboard_closed_form() {
        let reference = Array2::from_shape_fn((8, 8), |(i, j)| ((i + j) % 2) as f64);
        let candidate = reference.mapv(|v| v + 0.1);
        let v = nrmse(&reference.view(), &candidate.view(), NrmseNormalization::Range).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn nrmse_identical_and_degenerate() {
        let reference = Array2::from_shape_fn((6, 6), |(i, j)| (i * 6 + j) as f64);
        assert_eq!(
            nrmse(&reference.view(), &reference.view(), NrmseNormalization::Range).unwrap(),
            0.0
        );
        let flat = Array2::<f64>::from_elem((6, 6), 2.0);
        assert!(matches!(
            nrmse(&flat.view(), &reference.view(), NrmseNormalization::Range),
            Err(MetricError::DegenerateReference("range"))
        ));
    }

    #[test]
    fn nrmse_range_invariant_to_affine_rescale() {
        let mut rng = SeededRng::new(7);
        let reference = Array2::from_shape_fn((16, 16), |_| rng.uniform());
        let candidate = Array2::from_shape_fn((16, 16), |_| rng.uniform());
        let base = nrmse(&reference.view(), &candidate.view(), NrmseNormalization::Range).unwrap();
        let (a, b) = (37.5, -4.25);
        let r2 = reference.mapv(|v| a * v + b);
        let c2 = candidate.mapv(|v| a * v + b);
        let scaled = nrmse(&r2.view(), &c2.view(), NrmseNormalization::Range).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    fn tiny_dataset(seed: u64) -> crate::data::DenoisingDataset {
        let mut rng = SeededRng::new(seed);
        let frames: Vec<Array2<f64>> = (0..10)
            .map(|_| Array2::from_shape_fn((16, 16), |_| rng.uniform_in(10.0, 200.0)))
            .collect();
        let stack = ImageStack::from_frames("tiny", frames).unwrap();
        let gt = synthesize_ground_truth(&stack);
        let params = DatasetParams {
            patch_size: 8,
            test_fraction: 0.3,
            low_pct: 0.0,
            high_pct: 100.0,
        };
        build_dataset(&stack, &gt, &params, 0).unwrap()
    }

    #[test]
    fn evaluate_identity_model_reports_noisy_baseline() {
        let d = tiny_dataset(8);
        let ctx = EvalContext::new("tiny", "identity", FewShotSize::All);
        let report = evaluate(|f| f.to_owned(), &d, &ctx).unwrap();
        assert_eq!(report.rows.len(), d.test_len());
        for (i, row) in report.rows.iter().enumerate() {
            assert!(row.psnr.is_finite());
            assert!(row.nrmse > 0.0);
            if i > 0 {
                assert!(row.image_id > report.rows[i - 1].image_id, "rows sorted");
            }
        }
        // independent check of one row against direct psnr of the pair
        let pos = d
            .test_indices()
            .iter()
            .position(|&id| id == report.rows[0].image_id)
            .unwrap();
        let (noisy, clean) = d.test_pair(pos);
        let direct = psnr(&clean.view(), &noisy.view(), 1.0).unwrap();
        assert_eq!(report.rows[0].psnr, direct);
    }

    #[test]
    fn evaluate_perfect_model_saturates_metrics() {
        let d = tiny_dataset(9);
        // clean reference is the same for every pair of the stack
        let (_, clean) = d.test_pair(0);
        let clean = clean.clone();
        let ctx = EvalContext::new("tiny", "perfect", FewShotSize::All);
        let report = evaluate(move |_| clean.clone(), &d, &ctx).unwrap();
        for row in &report.rows {
            assert_eq!(row.psnr, f64::INFINITY);
            assert_eq!(row.ssim, 1.0);
            assert_eq!(row.nrmse, 0.0);
        }
    }

    #[test]
    fn evaluate_empty_test_set_rejected() {
        let mut rng = SeededRng::new(10);
        let pairs: Vec<crate::data::Pair> = (0..3)
            .map(|_| {
                let noisy = Array2::from_shape_fn((8, 8), |_| rng.uniform());
                crate::data::Pair {
                    clean: std::sync::Arc::new(noisy.clone()),
                    noisy,
                }
            })
            .collect();
        let rec = crate::data::NormalizationRecord {
            low_pct: 0.0,
            high_pct: 100.0,
            p_low: 0.0,
            p_high: 1.0,
        };
        let d = crate::data::DenoisingDataset::from_parts(
            "nt".into(),
            pairs,
            vec![0, 1, 2],
            vec![],
            rec,
            8,
        )
        .unwrap();
        let ctx = EvalContext::new("nt", "x", FewShotSize::All);
        assert!(matches!(
            evaluate(|f| f.to_owned(), &d, &ctx),
            Err(MetricError::EmptyTestSet)
        ));
    }

    #[test]
    fn aggregates_match_brute_force_reaverage() {
        let d = tiny_dataset(11);
        let ctx = EvalContext::new("tiny", "identity", FewShotSize::N(16));
        let report = evaluate(|f| f.to_owned(), &d, &ctx).unwrap();
        let aggs = report.aggregates();
        assert_eq!(aggs.len(), 1);
        let agg = &aggs[0];
        let n = report.rows.len() as f64;
        let psnr_mean = report.rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ssim_mean = report.rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let nrmse_mean = report.rows.iter().map(|r| r.nrmse).sum::<f64>() / n;
        assert_eq!(agg.psnr, psnr_mean);
        assert_eq!(agg.ssim, ssim_mean);
        assert_eq!(agg.nrmse, nrmse_mean);
        assert_eq!(agg.images, report.rows.len());
        assert_eq!(agg.n_samples, FewShotSize::N(16));
    }

    #[test]
    fn metric_csv_roundtrip() {
        let d = tiny_dataset(12);
        let ctx = EvalContext::new("tiny", "identity", FewShotSize::All);
        let report = evaluate(|f| f.to_owned(), &d, &ctx).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("dataset,experiment,n_samples,image_id,psnr,ssim,nrmse"));
        let back = MetricReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, report);
    }
}
