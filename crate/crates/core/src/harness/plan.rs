//! Declarative experiment plans: the TOML schema and its resolution
//! into a validated [`ExperimentPlan`](super::ExperimentPlan).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::synthetic::SyntheticSpec;
use super::{CellKey, DatasetSource, ExperimentPlan, ExperimentSpec, PlanDataset};
use crate::data::FewShotSize;
use crate::error::HarnessError;
use crate::inference::TilingSpec;
use crate::losses::LossWeights;
use crate::models::{DiscriminatorConfig, GeneratorConfig, ProjectionHeadConfig};
use crate::training::{AblationFlags, ModelConfigs, TrainConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    plan: PlanSection,
    #[serde(default)]
    models: ModelsSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    tiling: Option<TilingSection>,
    #[serde(default, rename = "dataset")]
    datasets: Vec<DatasetSection>,
    #[serde(default, rename = "experiment")]
    experiments: Vec<ExperimentSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanSection {
    output_dir: PathBuf,
    #[serde(default)]
    seeds: Vec<u64>,
    /// Default few-shot sizes for experiments without their own list.
    #[serde(default)]
    few_shot: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelsSection {
    /// "paper-faithful" (default) or "desk-scale".
    preset: Option<String>,
    /// Full config tables overriding the preset wholesale.
    generator: Option<GeneratorConfig>,
    discriminator: Option<DiscriminatorConfig>,
    projection: Option<ProjectionHeadConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    batch_size: Option<usize>,
    epochs: Option<usize>,
    decay_start_epoch: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    weights: Option<LossWeights>,
    checkpoint_every_epochs: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TilingSection {
    overlap: Option<usize>,
    blend: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    name: String,
    manifest: Option<PathBuf>,
    synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    name: String,
    #[serde(default)]
    use_tv: bool,
    #[serde(default)]
    use_ssim: bool,
    #[serde(default)]
    use_cl: bool,
    sizes: Option<Vec<String>>,
    weights: Option<LossWeights>,
}

fn parse_sizes(raw: &[String]) -> Result<Vec<FewShotSize>, HarnessError> {
    raw.iter()
        .map(|s| s.parse::<FewShotSize>().map_err(HarnessError::InvalidPlan))
        .collect()
}

/// Parse and resolve a plan file. Relative dataset manifest paths are
/// resolved against the plan file's directory.
pub fn parse_plan(path: &Path) -> Result<ExperimentPlan, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::InvalidPlan(format!("{}: {e}", path.display())))?;
    let file: PlanFile = toml::from_str(&text)
        .map_err(|e| HarnessError::InvalidPlan(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve_plan(file, base)
}

fn resolve_plan(file: PlanFile, base: &Path) -> Result<ExperimentPlan, HarnessError> {
    let mut models = match file.models.preset.as_deref() {
        None | Some("paper-faithful") => ModelConfigs::paper_faithful(),
        Some("desk-scale") => ModelConfigs::desk_scale(),
        Some(other) => {
            return Err(HarnessError::InvalidPlan(format!(
                "unknown models preset {other:?}"
            )));
        }
    };
    if let Some(g) = file.models.generator {
        models.projection = ProjectionHeadConfig::for_generator(&g);
        models.generator = g;
    }
    if let Some(d) = file.models.discriminator {
        models.discriminator = d;
    }
    if let Some(p) = file.models.projection {
        models.projection = p;
    }

    let mut train = TrainConfig::default();
    let t = &file.train;
    if let Some(v) = t.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = t.epochs {
        train.epochs = v;
    }
    if let Some(v) = t.decay_start_epoch {
        train.decay_start_epoch = v;
    }
    if let Some(v) = t.lr {
        train.lr = v;
    }
    if let Some(v) = t.beta1 {
        train.beta1 = v;
    }
    if let Some(v) = t.beta2 {
        train.beta2 = v;
    }
    if let Some(w) = t.weights {
        train.weights = w;
    }

    let mut tiling = TilingSpec::for_tile(models.generator.input_size);
    if let Some(ts) = &file.tiling {
        if let Some(o) = ts.overlap {
            tiling.overlap = o;
        }
        if let Some(b) = &ts.blend {
            tiling.blend = match b.as_str() {
                "linear-ramp" => crate::inference::BlendMode::LinearRamp,
                "uniform-average" => crate::inference::BlendMode::UniformAverage,
                other => {
                    return Err(HarnessError::InvalidPlan(format!(
                        "unknown blend mode {other:?}"
                    )));
                }
            };
        }
    }

    let default_sizes = if file.plan.few_shot.is_empty() {
        vec![FewShotSize::All]
    } else {
        parse_sizes(&file.plan.few_shot)?
    };

    let mut datasets = Vec::new();
    for d in file.datasets {
        let source = match (d.manifest, d.synthetic) {
            (Some(m), None) => {
                let resolved = if m.is_absolute() { m } else { base.join(m) };
                DatasetSource::Manifest(resolved)
            }
            (None, Some(s)) => DatasetSource::Synthetic(s),
            _ => {
                return Err(HarnessError::InvalidPlan(format!(
                    "dataset {:?} needs exactly one of manifest or synthetic",
                    d.name
                )));
            }
        };
        datasets.push(PlanDataset {
            name: d.name,
            source,
        });
    }

    let mut experiments = Vec::new();
    for e in file.experiments {
        let sizes = match &e.sizes {
            Some(raw) => parse_sizes(raw)?,
            None => default_sizes.clone(),
        };
        experiments.push(ExperimentSpec {
            name: e.name,
            flags: AblationFlags {
                use_tv: e.use_tv,
                use_ssim: e.use_ssim,
                use_cl: e.use_cl,
            },
            weights: e.weights.unwrap_or(train.weights),
            sizes,
        });
    }

    let plan = ExperimentPlan {
        output_dir: if file.plan.output_dir.is_absolute() {
            file.plan.output_dir
        } else {
            base.join(file.plan.output_dir)
        },
        seeds: if file.plan.seeds.is_empty() {
            vec![0]
        } else {
            file.plan.seeds
        },
        datasets,
        experiments,
        models,
        train,
        tiling,
        checkpoint_every_epochs: file.train.checkpoint_every_epochs.unwrap_or(0),
    };
    plan.validate_structure()?;
    Ok(plan)
}

impl ExperimentPlan {
    /// Structural checks that need no filesystem access: unique
    /// experiment names and a coherent training config.
    pub fn validate_structure(&self) -> Result<(), HarnessError> {
        let mut names = std::collections::HashSet::new();
        for e in &self.experiments {
            if !names.insert(e.name.clone()) {
                return Err(HarnessError::InvalidPlan(format!(
                    "duplicate experiment name {:?}",
                    e.name
                )));
            }
            // the template's flags are placeholders; what must cohere is
            // each experiment's resolved cell config
            let seed = self.seeds.first().copied().unwrap_or(0);
            self.cell_config(e, seed)
                .validate()
                .map_err(|err| {
                    HarnessError::InvalidPlan(format!("experiment {:?}: {err}", e.name))
                })?;
        }
        Ok(())
    }

    /// Full validation before execution: structure plus the existence
    /// of every referenced dataset manifest.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.validate_structure()?;
        for d in &self.datasets {
            if let DatasetSource::Manifest(path) = &d.source {
                if !path.exists() {
                    return Err(HarnessError::InvalidPlan(format!(
                        "dataset {:?}: manifest {} does not exist",
                        d.name,
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The full cell grid: dataset x experiment x per-experiment sizes
    /// x seeds.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for d in &self.datasets {
            for e in &self.experiments {
                for &size in &e.sizes {
                    for &seed in &self.seeds {
                        cells.push(CellKey {
                            dataset: d.name.clone(),
                            experiment: e.name.clone(),
                            size,
                            seed,
                        });
                    }
                }
            }
        }
        cells
    }
}
