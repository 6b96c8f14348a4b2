//! The experimental protocol: ablation matrix x few-shot sizes x
//! datasets, run as independent resumable cells, aggregated into a
//! report table with best-value marking.

mod plan;
mod synthetic;

pub use plan::parse_plan;
pub use synthetic::{synthetic_shapes_dataset, SyntheticSpec};

use std::path::{Path, PathBuf};

use crate::data::{self, DenoisingDataset, FewShotSize, FewShotSpec};
use crate::error::HarnessError;
use crate::inference::{denoise_frame, TilingSpec};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, AggregateRow, EvalContext, MetricReport};
use crate::training::{fit, AblationFlags, FitOptions, ModelConfigs, TrainConfig, TrainState};
use crate::Error;

/// One configured ablation arm.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub sizes: Vec<FewShotSize>,
}

/// Where a plan dataset comes from.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone)]
pub struct PlanDataset {
    pub name: String,
    pub source: DatasetSource,
}

/// A resolved, validated experiment plan.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub datasets: Vec<PlanDataset>,
    pub experiments: Vec<ExperimentSpec>,
    pub models: ModelConfigs,
    pub train: TrainConfig,
    pub tiling: TilingSpec,
    pub checkpoint_every_epochs: usize,
}

/// Coordinates of one plan cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellKey {
    pub dataset: String,
    pub experiment: String,
    pub size: FewShotSize,
    pub seed: u64,
}

impl CellKey {
    /// Directory of this cell under the plan output dir.
    pub fn dir(&self, output_dir: &Path) -> PathBuf {
        output_dir
            .join(&self.dataset)
            .join(&self.experiment)
            .join(format!("ns-{}", self.size))
            .join(format!("seed-{}", self.seed))
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/ns-{}/seed-{}",
            self.dataset, self.experiment, self.size, self.seed
        )
    }
}

/// What happened to each cell of a plan run.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub completed: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    pub failed: Vec<(CellKey, String)>,
}

/// The resolved configuration of one cell, hashed for resumability and
/// written as the run manifest.
#[derive(serde::Serialize)]
struct CellRecord<'a> {
    dataset: &'a str,
    experiment: &'a str,
    n_samples: String,
    seed: u64,
    models: &'a ModelConfigs,
    train: &'a TrainConfig,
    tiling: &'a TilingSpec,
    dataset_fingerprint: &'a str,
    code_version: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_fingerprint(source: &DatasetSource) -> Result<String, Error> {
    match source {
        DatasetSource::Manifest(path) => Ok(data::manifest_hash(path)?),
        DatasetSource::Synthetic(spec) => Ok(sha256_hex(
            serde_json::to_string(spec)
                .expect("synthetic spec serializes")
                .as_bytes(),
        )),
    }
}

fn load_plan_dataset(d: &PlanDataset) -> Result<DenoisingDataset, Error> {
    match &d.source {
        DatasetSource::Manifest(path) => {
            let manifest = data::read_manifest(path)?;
            Ok(data::load_dataset(&manifest)?)
        }
        DatasetSource::Synthetic(spec) => Ok(synthetic_shapes_dataset(&d.name, spec)?),
    }
}

impl ExperimentPlan {
    /// Per-cell train config: the plan template with the cell's seed,
    /// flags, and weights substituted.
    pub fn cell_config(&self, exp: &ExperimentSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ablation: exp.flags,
            weights: exp.weights,
            ..self.train.clone()
        }
    }
}

/// Run one cell end to end: subset, fit, evaluate, persist.
fn run_cell(
    plan: &ExperimentPlan,
    dataset: &DenoisingDataset,
    exp: &ExperimentSpec,
    key: &CellKey,
    cell_dir: &Path,
    record_json: &str,
    hash: &str,
) -> Result<(), Error> {
    std::fs::create_dir_all(cell_dir)?;
    let cfg = plan.cell_config(exp, key.seed);

    let subset = dataset.few_shot_subset(&FewShotSpec {
        n_samples: key.size,
        seed: key.seed,
    })?;

    let mut state = TrainState::init(&plan.models, key.seed, cfg.beta1, cfg.beta2)?;
    let opts = FitOptions {
        loss_csv_path: Some(cell_dir.join("loss.csv")),
        append_loss_csv: false,
        checkpoint_dir: Some(cell_dir.to_path_buf()),
        checkpoint_every_epochs: plan.checkpoint_every_epochs,
        stop_after_epoch: None,
    };
    fit(&subset, &mut state, &cfg, &opts)?;

    let ctx = EvalContext {
        dataset: key.dataset.clone(),
        experiment: key.experiment.clone(),
        n_samples: key.size,
        ssim: cfg.ssim,
        nrmse_normalization: crate::metrics::NrmseNormalization::Range,
        data_range: 1.0,
    };
    let tiling = plan.tiling;
    let generator = &state.generator;
    let report = evaluate(
        |frame| denoise_frame(generator, frame, &tiling).expect("tiling validated"),
        &subset,
        &ctx,
    )?;
    report.write_csv(std::fs::File::create(cell_dir.join("report.csv"))?)?;

    std::fs::write(cell_dir.join("cell.json"), record_json)?;
    std::fs::write(cell_dir.join("COMPLETE"), hash)?;
    Ok(())
}

/// Execute every cell of the plan. Completed cells (matching config
/// hash) are skipped; per-cell failures are recorded in
/// `failures.log` and the remaining cells proceed.
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunOutcome, Error> {
    plan.validate()?;
    std::fs::create_dir_all(&plan.output_dir)?;
    let mut outcome = RunOutcome::default();
    let mut failures_log = String::new();

    for d in &plan.datasets {
        let fingerprint = dataset_fingerprint(&d.source)?;
        // dataset loading failures poison every cell of that dataset
        let dataset = match load_plan_dataset(d) {
            Ok(ds) => Some(ds),
            Err(e) => {
                for exp in &plan.experiments {
                    for &size in &exp.sizes {
                        for &seed in &plan.seeds {
                            let key = CellKey {
                                dataset: d.name.clone(),
                                experiment: exp.name.clone(),
                                size,
                                seed,
                            };
                            failures_log.push_str(&format!("{key}: {e}\n"));
                            outcome.failed.push((key, e.to_string()));
                        }
                    }
                }
                None
            }
        };
        let Some(dataset) = dataset else { continue };

        for exp in &plan.experiments {
            for &size in &exp.sizes {
                for &seed in &plan.seeds {
                    let key = CellKey {
                        dataset: d.name.clone(),
                        experiment: exp.name.clone(),
                        size,
                        seed,
                    };
                    let cell_dir = key.dir(&plan.output_dir);
                    let cfg = plan.cell_config(exp, seed);
                    let record = CellRecord {
                        dataset: &key.dataset,
                        experiment: &key.experiment,
                        n_samples: key.size.to_string(),
                        seed,
                        models: &plan.models,
                        train: &cfg,
                        tiling: &plan.tiling,
                        dataset_fingerprint: &fingerprint,
                        code_version: env!("CARGO_PKG_VERSION"),
                    };
                    let record_json =
                        serde_json::to_string_pretty(&record).expect("cell record serializes");
                    let hash = sha256_hex(record_json.as_bytes());

                    let complete = cell_dir.join("COMPLETE");
                    if complete.exists() {
                        if std::fs::read_to_string(&complete).unwrap_or_default() == hash {
                            outcome.skipped.push(key);
                            continue;
                        }
                        // stale cell from a different config: redo
                        let _ = std::fs::remove_file(&complete);
                    }

                    match run_cell(plan, &dataset, exp, &key, &cell_dir, &record_json, &hash) {
                        Ok(()) => outcome.completed.push(key),
                        Err(e) => {
                            failures_log.push_str(&format!("{key}: {e}\n"));
                            outcome.failed.push((key, e.to_string()));
                        }
                    }
                }
            }
        }
    }

    if !failures_log.is_empty() {
        std::fs::write(plan.output_dir.join("failures.log"), &failures_log)?;
    }
    Ok(outcome)
}

/// Collect every cell report under a plan output directory.
pub fn collect_reports(output_dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut found = Vec::new();
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, found)?;
            } else if path.file_name().and_then(|n| n.to_str()) == Some("report.csv") {
                found.push(path);
            }
        }
        Ok(())
    }
    walk(output_dir, &mut found)?;
    found.sort();
    Ok(found)
}

/// Number of enabled objective terms implied by an experiment name;
/// used only to break exact ties toward the simpler experiment.
pub fn experiment_complexity(name: &str) -> usize {
    name.to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| matches!(*t, "tv" | "ssim" | "cl"))
        .count()
}

/// One aggregate row with best-in-column marks.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedRow {
    pub row: AggregateRow,
    pub best_psnr: bool,
    pub best_ssim: bool,
    pub best_nrmse: bool,
}

/// Build the aggregate table from cell reports: mean metrics per cell,
/// best value per (dataset, n_samples) group marked (higher is better
/// for PSNR/SSIM, lower for NRMSE; exact ties break toward the
/// experiment with fewer enabled terms).
pub fn make_table(report_paths: &[PathBuf]) -> Result<(Vec<MarkedRow>, String), Error> {
    let mut reports = Vec::new();
    for path in report_paths {
        let file = std::fs::File::open(path)?;
        let report = MetricReport::read_csv(file).map_err(|_| {
            Error::Harness(HarnessError::SchemaMismatch(format!(
                "{} is not a metric report",
                path.display()
            )))
        })?;
        reports.push(report);
    }
    let merged = MetricReport::merge(reports);
    let aggregates = merged.aggregates();

    let mut marked: Vec<MarkedRow> = aggregates
        .iter()
        .map(|row| MarkedRow {
            row: row.clone(),
            best_psnr: false,
            best_ssim: false,
            best_nrmse: false,
        })
        .collect();

    // group indices by (dataset, n_samples)
    let mut groups: std::collections::BTreeMap<(String, String), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, m) in marked.iter().enumerate() {
        groups
            .entry((m.row.dataset.clone(), m.row.n_samples.to_string()))
            .or_default()
            .push(i);
    }
    for indices in groups.values() {
        let pick = |better: &dyn Fn(f64, f64) -> bool, value: &dyn Fn(&AggregateRow) -> f64| {
            let mut best = indices[0];
            for &i in &indices[1..] {
                let (vi, vb) = (value(&marked[i].row), value(&marked[best].row));
                if better(vi, vb)
                    || (vi == vb
                        && experiment_complexity(&marked[i].row.experiment)
                            < experiment_complexity(&marked[best].row.experiment))
                {
                    best = i;
                }
            }
            best
        };
        let bp = pick(&|a, b| a > b, &|r| r.psnr);
        let bs = pick(&|a, b| a > b, &|r| r.ssim);
        let bn = pick(&|a, b| a < b, &|r| r.nrmse);
        marked[bp].best_psnr = true;
        marked[bs].best_ssim = true;
        marked[bn].best_nrmse = true;
    }

    Ok((marked.clone(), render_table(&marked)))
}

fn render_table(rows: &[MarkedRow]) -> String {
    let fmt = |v: f64, best: bool| {
        let s = if v.is_infinite() {
            "inf".to_string()
        } else {
            format!("{v:.4}")
        };
        if best {
            format!("*{s}")
        } else {
            format!(" {s}")
        }
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:<8} {:<16} {:>10} {:>10} {:>10} {:>7}\n",
        "dataset", "ns", "experiment", "psnr", "ssim", "nrmse", "images"
    ));
    // ordered by dataset, then few-shot size (all first), then experiment
    let mut sorted: Vec<&MarkedRow> = rows.iter().collect();
    sorted.sort_by_key(|m| {
        let size_rank = match m.row.n_samples {
            FewShotSize::All => (0usize, 0usize),
            FewShotSize::N(n) => (1, usize::MAX - n),
        };
        (
            m.row.dataset.clone(),
            size_rank,
            experiment_complexity(&m.row.experiment),
            m.row.experiment.clone(),
        )
    });
    for m in sorted {
        out.push_str(&format!(
            "{:<20} {:<8} {:<16} {:>10} {:>10} {:>10} {:>7}\n",
            m.row.dataset,
            m.row.n_samples.to_string(),
            m.row.experiment,
            fmt(m.row.psnr, m.best_psnr),
            fmt(m.row.ssim, m.best_ssim),
            fmt(m.row.nrmse, m.best_nrmse),
            m.row.images
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FewShotSize;
    use crate::metrics::MetricRow;

    fn micro_plan(dir: &Path) -> ExperimentPlan {
        let models = ModelConfigs {
            generator: crate::models::GeneratorConfig {
                n_down: 3,
                base_channels: 4,
                max_channels: 8,
                dropout_rate: 0.0,
                dropout_blocks: vec![],
                input_size: 16,
                skip_connections: true,
            },
            discriminator: crate::models::DiscriminatorConfig {
                n_layers: 1,
                base_channels: 4,
            },
            projection: crate::models::ProjectionHeadConfig {
                input_dim: 8,
                hidden_dim: 8,
                output_dim: 8,
            },
        };
        ExperimentPlan {
            output_dir: dir.to_path_buf(),
            seeds: vec![0],
            datasets: vec![PlanDataset {
                name: "synthetic-shapes".into(),
                source: DatasetSource::Synthetic(SyntheticSpec {
                    n_train: 4,
                    n_test: 2,
                    size: 16,
                    noise_sigma: 0.1,
                    seed: 0,
                }),
            }],
            experiments: vec![ExperimentSpec {
                name: "baseline".into(),
                flags: AblationFlags::baseline(),
                weights: LossWeights::default(),
                sizes: vec![FewShotSize::All],
            }],
            models,
            train: TrainConfig {
                batch_size: 2,
                epochs: 1,
                decay_start_epoch: 1,
                lr: 1e-4,
                ablation: AblationFlags::baseline(),
                ..Default::default()
            },
            tiling: TilingSpec::for_tile(16),
            checkpoint_every_epochs: 0,
        }
    }

    #[test]
    fn run_plan_executes_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let plan = micro_plan(dir.path());
        let first = run_plan(&plan).unwrap();
        assert_eq!(first.completed.len(), 1);
        assert!(first.skipped.is_empty());
        assert!(first.failed.is_empty());

        let cell_dir = first.completed[0].dir(&plan.output_dir);
        assert!(cell_dir.join("report.csv").exists());
        assert!(cell_dir.join("loss.csv").exists());
        assert!(cell_dir.join("final.ckpt").exists());
        assert!(cell_dir.join("cell.json").exists());

        // rerun: zero training work
        let loss_before = std::fs::read_to_string(cell_dir.join("loss.csv")).unwrap();
        let second = run_plan(&plan).unwrap();
        assert!(second.completed.is_empty());
        assert_eq!(second.skipped.len(), 1);
        let loss_after = std::fs::read_to_string(cell_dir.join("loss.csv")).unwrap();
        assert_eq!(loss_before, loss_after);
    }

    #[test]
    fn deleted_cell_is_regenerated_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let plan = micro_plan(dir.path());
        run_plan(&plan).unwrap();
        let cell_dir = plan.cells()[0].dir(&plan.output_dir);
        let loss_before = std::fs::read_to_string(cell_dir.join("loss.csv")).unwrap();
        let report_before = std::fs::read_to_string(cell_dir.join("report.csv")).unwrap();

        std::fs::remove_dir_all(&cell_dir).unwrap();
        let second = run_plan(&plan).unwrap();
        assert_eq!(second.completed.len(), 1);
        assert_eq!(
            std::fs::read_to_string(cell_dir.join("loss.csv")).unwrap(),
            loss_before
        );
        assert_eq!(
            std::fs::read_to_string(cell_dir.join("report.csv")).unwrap(),
            report_before
        );
    }

    #[test]
    fn failing_cells_are_recorded_and_others_proceed() {
        // one dataset sized for the generator, one too small for it:
        // the mismatched cells fail at fit time, the good ones complete
        let dir = tempfile::tempdir().unwrap();
        let mut plan = micro_plan(dir.path());
        plan.datasets.push(PlanDataset {
            name: "wrong-size".into(),
            source: DatasetSource::Synthetic(SyntheticSpec {
                n_train: 4,
                n_test: 2,
                size: 8, // generator expects 16
                noise_sigma: 0.1,
                seed: 0,
            }),
        });
        let outcome = run_plan(&plan).unwrap();
        assert_eq!(outcome.completed.len(), 1);
        assert_eq!(outcome.failed.len(), 1);
        assert_eq!(outcome.failed[0].0.dataset, "wrong-size");
        let log = std::fs::read_to_string(plan.output_dir.join("failures.log")).unwrap();
        assert!(log.contains("wrong-size"), "{log}");
    }

    #[test]
    fn empty_plan_succeeds_with_empty_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = micro_plan(dir.path());
        plan.datasets.clear();
        plan.experiments.clear();
        let outcome = run_plan(&plan).unwrap();
        assert!(outcome.completed.is_empty());
        assert!(outcome.skipped.is_empty());
        assert!(outcome.failed.is_empty());
        let reports = collect_reports(&plan.output_dir).unwrap();
        assert!(reports.is_empty());
    }

    fn fake_report(dir: &Path, name: &str, rows: &[(&str, &str, f64, f64, f64)]) -> PathBuf {
        let report = MetricReport::new(
            rows.iter()
                .enumerate()
                .map(|(i, (exp, ns, p, s, r))| MetricRow {
                    dataset: "convallaria".into(),
                    experiment: exp.to_string(),
                    n_samples: ns.parse().unwrap(),
                    image_id: i,
                    psnr: *p,
                    ssim: *s,
                    nrmse: *r,
                })
                .collect(),
        );
        let path = dir.join(name);
        report.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        path
    }

    #[test]
    fn table_marks_highest_psnr() {
        let dir = tempfile::tempdir().unwrap();
        let a = fake_report(dir.path(), "a.csv", &[("cl+tv+ssim", "all", 37.04, 0.9567, 0.0010)]);
        let b = fake_report(dir.path(), "b.csv", &[("baseline", "all", 35.59, 0.9409, 0.0023)]);
        let (marked, text) = make_table(&[a, b]).unwrap();
        let best: Vec<&MarkedRow> = marked.iter().filter(|m| m.best_psnr).collect();
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].row.experiment, "cl+tv+ssim");
        assert!((best[0].row.psnr - 37.04).abs() < 1e-12);
        assert!(text.contains("*37.0400"));
        // nrmse best is the lower value
        let best_n: Vec<&MarkedRow> = marked.iter().filter(|m| m.best_nrmse).collect();
        assert_eq!(best_n[0].row.experiment, "cl+tv+ssim");
    }

    #[test]
    fn table_marking_agrees_with_brute_force_rescan() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::SeededRng::new(3);
        let mut paths = Vec::new();
        for (i, exp) in ["baseline", "tv", "ssim", "cl", "cl+tv+ssim"].iter().enumerate() {
            let rows: Vec<(&str, &str, f64, f64, f64)> = vec![(
                exp,
                "all",
                30.0 + rng.uniform() * 8.0,
                0.9 + rng.uniform() * 0.09,
                0.001 + rng.uniform() * 0.01,
            )];
            paths.push(fake_report(dir.path(), &format!("r{i}.csv"), &rows));
        }
        let (marked, _) = make_table(&paths).unwrap();
        let best_psnr = marked
            .iter()
            .max_by(|a, b| a.row.psnr.partial_cmp(&b.row.psnr).unwrap())
            .unwrap();
        assert!(best_psnr.best_psnr);
        let best_nrmse = marked
            .iter()
            .min_by(|a, b| a.row.nrmse.partial_cmp(&b.row.nrmse).unwrap())
            .unwrap();
        assert!(best_nrmse.best_nrmse);
    }

    #[test]
    fn exact_ties_break_toward_fewer_terms() {
        let dir = tempfile::tempdir().unwrap();
        let a = fake_report(dir.path(), "a.csv", &[("cl+tv+ssim", "all", 36.0, 0.95, 0.002)]);
        let b = fake_report(dir.path(), "b.csv", &[("baseline", "all", 36.0, 0.95, 0.002)]);
        let (marked, _) = make_table(&[a, b]).unwrap();
        let best: Vec<&MarkedRow> = marked.iter().filter(|m| m.best_psnr).collect();
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].row.experiment, "baseline");
    }

    #[test]
    fn single_report_table_equals_its_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let path = fake_report(
            dir.path(),
            "one.csv",
            &[("cl", "16", 36.77, 0.9554, 0.0018), ("cl", "16", 36.81, 0.9560, 0.0017)],
        );
        let (marked, _) = make_table(std::slice::from_ref(&path)).unwrap();
        assert_eq!(marked.len(), 1);
        let file = std::fs::File::open(&path).unwrap();
        let direct = MetricReport::read_csv(file).unwrap().aggregates();
        assert_eq!(marked[0].row, direct[0]);
        assert!(marked[0].best_psnr && marked[0].best_ssim && marked[0].best_nrmse);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "foo,bar\n1,2\n").unwrap();
        assert!(matches!(
            make_table(&[path]),
            Err(Error::Harness(HarnessError::SchemaMismatch(_)))
        ));
    }

    #[test]
    fn complexity_heuristic() {
        assert_eq!(experiment_complexity("baseline"), 0);
        assert_eq!(experiment_complexity("tv"), 1);
        assert_eq!(experiment_complexity("SSIM"), 1);
        assert_eq!(experiment_complexity("cl"), 1);
        assert_eq!(experiment_complexity("cl+tv+ssim"), 3);
    }
}
