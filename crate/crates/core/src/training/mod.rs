//! Alternating adversarial training.
//!
//! One step runs a single shared generator forward, updates the
//! discriminator on (condition, clean) vs (condition, detached fake),
//! then updates the generator (and projection head) on the weighted
//! objective evaluated against the freshly updated discriminator. All
//! randomness flows through the state's seeded stream, so a step is
//! bit-reproducible and a resumed run continues the exact trajectory.

mod adam;
mod state;

pub use state::{ModelConfigs, TrainState};

use std::path::PathBuf;

use ndarray::{Array2, Array4};

use crate::autodiff::{Graph, NodeId};
use crate::data::{AugmentChain, DenoisingDataset};
use crate::error::{LossError, TrainError};
use crate::losses::{
    adversarial_loss, composite_loss, dssim_loss, l1_loss, ntxent_loss, tv_loss, AdversarialSide,
    LossCsvWriter, LossRow, LossTerms, LossWeights, PairIndex, SsimParams,
};
use crate::rng::SeededRng;
use crate::Error;

/// Which optional objective terms a run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationFlags {
    pub use_tv: bool,
    pub use_ssim: bool,
    pub use_cl: bool,
}

impl AblationFlags {
    pub fn baseline() -> Self {
        Self {
            use_tv: false,
            use_ssim: false,
            use_cl: false,
        }
    }

    pub fn all() -> Self {
        Self {
            use_tv: true,
            use_ssim: true,
            use_cl: true,
        }
    }

    /// Number of enabled terms (used for tie-breaking in reports).
    pub fn enabled_count(&self) -> usize {
        self.use_tv as usize + self.use_ssim as usize + self.use_cl as usize
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all()
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub ssim: SsimParams,
    pub augment: AugmentChain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 1000,
            decay_start_epoch: 500,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            ablation: AblationFlags::all(),
            ssim: SsimParams::default(),
            augment: AugmentChain::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.decay_start_epoch > self.epochs {
            return Err(TrainError::InvalidConfig(format!(
                "decay_start_epoch {} exceeds epochs {}",
                self.decay_start_epoch, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be at least 2".into(),
            ));
        }
        if self.ablation.use_cl {
            if self.batch_size % 2 != 0 {
                return Err(TrainError::InvalidConfig(
                    "contrastive batches pair base patches with views; batch_size must be even"
                        .into(),
                ));
            }
            if self.batch_size < 4 {
                return Err(TrainError::InvalidConfig(
                    "contrastive loss needs at least 4 embeddings per batch".into(),
                ));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::InvalidConfig("lr must be finite and >= 0".into()));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Base patches consumed per optimizer step. With contrastive
    /// learning on, half the batch is augmented views.
    pub fn base_per_step(&self) -> usize {
        if self.ablation.use_cl {
            self.batch_size / 2
        } else {
            self.batch_size
        }
    }
}

/// Learning rate at a given epoch: constant until `decay_start_epoch`,
/// then linear descent reaching zero at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.epochs {
        return 0.0;
    }
    if epoch < cfg.decay_start_epoch || cfg.decay_start_epoch == cfg.epochs {
        return cfg.lr;
    }
    let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
    let done = (epoch - cfg.decay_start_epoch) as f64;
    cfg.lr * (1.0 - done / span)
}

/// One optimizer batch: base patches and, under contrastive training,
/// their augmented partners.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub noisy: Array4<f64>,
    pub clean: Array4<f64>,
    pub views: Option<Array4<f64>>,
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub row: LossRow,
    pub lr: f64,
    /// L2 norm of all projection-head gradients (0 when CL is off).
    pub proj_grad_norm: f64,
}

/// Injectable implementations of the optional loss terms. The defaults
/// are the real losses; tests substitute poisoned stubs to prove that
/// disabled terms are never evaluated.
pub struct LossHooks {
    #[allow(clippy::type_complexity)]
    pub ssim: Box<dyn Fn(&mut Graph, NodeId, NodeId, &SsimParams) -> Result<NodeId, LossError>>,
    #[allow(clippy::type_complexity)]
    pub tv: Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, LossError>>,
    #[allow(clippy::type_complexity)]
    pub cl: Box<dyn Fn(&mut Graph, NodeId, &PairIndex, f64) -> Result<NodeId, LossError>>,
}

impl Default for LossHooks {
    fn default() -> Self {
        Self {
            ssim: Box::new(dssim_loss),
            tv: Box::new(tv_loss),
            cl: Box::new(ntxent_loss),
        }
    }
}

fn finite_or(term: &'static str, value: f64, step: u64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { term, step })
    }
}

/// One discriminator update followed by one generator update on a
/// prepared batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<StepStats, Error> {
    train_step_hooked(state, batch, cfg, &LossHooks::default())
}

pub fn train_step_hooked(
    state: &mut TrainState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    hooks: &LossHooks,
) -> Result<StepStats, Error> {
    let step = state.global_step;
    let use_cl = cfg.ablation.use_cl;
    if use_cl && batch.views.is_none() {
        return Err(TrainError::InvalidConfig(
            "contrastive training needs augmented views in the batch".into(),
        )
        .into());
    }
    let lr = lr_schedule(state.epoch as usize, cfg);

    let mut g = Graph::new();
    let bind_gen = state.generator.bind(&mut g, true);
    let bind_disc = state.discriminator.bind(&mut g, true);

    let x = g.constant(batch.noisy.clone());
    let y = g.constant(batch.clean.clone());

    // shared generator forward (dropout from the run's stream)
    let fake = state.generator.forward(&mut g, &bind_gen, x, Some(&mut state.rng));

    // ---- discriminator phase: real pair vs detached fake pair ----
    let fake_detached = g.detach(fake.output);
    let d_real = state.discriminator.forward(&mut g, &bind_disc, x, y);
    let d_fake = state
        .discriminator
        .forward(&mut g, &bind_disc, x, fake_detached);
    let d_loss = adversarial_loss(&mut g, d_real, d_fake, AdversarialSide::Discriminator)
        .map_err(Error::Loss)?;
    let d_loss_value = finite_or("gan_d", g.scalar_value(d_loss), step)?;

    let d_grads = g.backward(d_loss);
    state.opt_d.start_step();
    for (name, value) in state.discriminator.store_mut().iter_mut() {
        if let Some(grad) = d_grads.get(bind_disc.id(name)) {
            state.opt_d.update(&format!("disc.{name}"), value, grad, lr);
        }
    }

    // ---- generator phase: adversarial term against the updated D ----
    let bind_disc_updated = state.discriminator.bind(&mut g, false);
    let d_fake_updated = state
        .discriminator
        .forward(&mut g, &bind_disc_updated, x, fake.output);
    let gan_g = adversarial_loss(
        &mut g,
        d_fake_updated,
        d_fake_updated,
        AdversarialSide::Generator,
    )
    .map_err(Error::Loss)?;
    let l1 = l1_loss(&mut g, fake.output, y).map_err(Error::Loss)?;

    let ssim_term = if cfg.ablation.use_ssim {
        Some((hooks.ssim)(&mut g, fake.output, y, &cfg.ssim).map_err(Error::Loss)?)
    } else {
        None
    };
    let tv_term = if cfg.ablation.use_tv {
        Some((hooks.tv)(&mut g, fake.output).map_err(Error::Loss)?)
    } else {
        None
    };

    let (cl_term, bind_proj) = if use_cl {
        let views = batch.views.as_ref().expect("validated above");
        let bind_proj = state.projection.bind(&mut g, true);
        let v = g.constant(views.clone());
        let view_bottleneck = state.generator.forward_bottleneck(&mut g, &bind_gen, v);
        let base_emb = state.projection.forward(&mut g, &bind_proj, fake.bottleneck);
        let view_emb = state.projection.forward(&mut g, &bind_proj, view_bottleneck);
        let emb = g.concat_rows(base_emb, view_emb);
        let pairs = PairIndex::two_view(batch.noisy.dim().0);
        let cl = (hooks.cl)(&mut g, emb, &pairs, cfg.weights.tau).map_err(Error::Loss)?;
        (Some(cl), Some(bind_proj))
    } else {
        (None, None)
    };

    // weighted total on the graph, mirrored by the scalar breakdown
    let terms = LossTerms {
        gan_g: finite_or("gan_g", g.scalar_value(gan_g), step)?,
        l1: finite_or("l1", g.scalar_value(l1), step)?,
        ssim: match ssim_term {
            Some(t) => finite_or("ssim", g.scalar_value(t), step)?,
            None => 0.0,
        },
        tv: match tv_term {
            Some(t) => finite_or("tv", g.scalar_value(t), step)?,
            None => 0.0,
        },
        cl: match cl_term {
            Some(t) => finite_or("cl", g.scalar_value(t), step)?,
            None => 0.0,
        },
    };
    let composite = composite_loss(&terms, &cfg.weights).map_err(Error::Loss)?;

    let mut total = g.mul_scalar(gan_g, cfg.weights.lambda_gan);
    let weighted_l1 = g.mul_scalar(l1, cfg.weights.lambda_l1);
    total = g.add(total, weighted_l1);
    if let Some(t) = ssim_term {
        let wt = g.mul_scalar(t, cfg.weights.lambda_ssim);
        total = g.add(total, wt);
    }
    if let Some(t) = tv_term {
        let wt = g.mul_scalar(t, cfg.weights.lambda_tv);
        total = g.add(total, wt);
    }
    if let Some(t) = cl_term {
        let wt = g.mul_scalar(t, cfg.weights.lambda_cl);
        total = g.add(total, wt);
    }
    finite_or("total", g.scalar_value(total), step)?;

    let g_grads = g.backward(total);
    state.opt_g.start_step();
    for (name, value) in state.generator.store_mut().iter_mut() {
        if let Some(grad) = g_grads.get(bind_gen.id(name)) {
            state.opt_g.update(&format!("gen.{name}"), value, grad, lr);
        }
    }
    let mut proj_grad_sq = 0.0;
    if let Some(bind_proj) = bind_proj {
        for (name, value) in state.projection.store_mut().iter_mut() {
            if let Some(grad) = g_grads.get(bind_proj.id(name)) {
                proj_grad_sq += grad.iter().map(|v| v * v).sum::<f64>();
                state.opt_g.update(&format!("proj.{name}"), value, grad, lr);
            }
        }
    }

    state.global_step += 1;
    Ok(StepStats {
        row: LossRow {
            iteration: step,
            gan_g: terms.gan_g,
            gan_d: d_loss_value,
            l1: terms.l1,
            ssim: terms.ssim,
            tv: terms.tv,
            cl: terms.cl,
            total: composite.total,
        },
        lr,
        proj_grad_norm: proj_grad_sq.sqrt(),
    })
}

/// Output sinks and interruption control for [`fit`].
#[derive(Debug, Default)]
pub struct FitOptions {
    pub loss_csv_path: Option<PathBuf>,
    /// Append to an existing loss CSV (resumed runs) instead of writing
    /// a fresh header.
    pub append_loss_csv: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every K epochs in addition to the final one; 0 = final
    /// checkpoint only.
    pub checkpoint_every_epochs: usize,
    /// Stop (successfully) once `state.epoch` reaches this bound. Stands
    /// in for an external interrupt in resume tests and tooling.
    pub stop_after_epoch: Option<u64>,
}

fn stack_patches(patches: &[Array2<f64>]) -> Array4<f64> {
    let n = patches.len();
    let (h, w) = patches[0].dim();
    let mut out = Array4::<f64>::zeros((n, 1, h, w));
    for (i, p) in patches.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(p);
    }
    out
}

/// Assemble the batch for one step: seeded crops for the selected
/// training pairs, then augmented views of the noisy crops when
/// contrastive learning is on.
fn build_batch(
    dataset: &DenoisingDataset,
    picks: &[usize],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> TrainBatch {
    let mut noisy = Vec::with_capacity(picks.len());
    let mut clean = Vec::with_capacity(picks.len());
    for &i in picks {
        let (n, c) = dataset.sample_train_patch(i, rng);
        noisy.push(n);
        clean.push(c);
    }
    let views = if cfg.ablation.use_cl {
        let v: Vec<Array2<f64>> = noisy
            .iter()
            .map(|p| cfg.augment.apply(&p.view(), rng))
            .collect();
        Some(stack_patches(&v))
    } else {
        None
    };
    TrainBatch {
        noisy: stack_patches(&noisy),
        clean: stack_patches(&clean),
        views,
    }
}

/// Run the training loop from the state's current epoch to completion
/// (or `stop_after_epoch`), with per-epoch seeded shuffling, sample
/// recycling for few-shot splits, loss CSV streaming, and periodic
/// checkpoints. On divergence the current state is saved next to the
/// checkpoints as `diverged.ckpt` before the error propagates.
pub fn fit(
    dataset: &DenoisingDataset,
    state: &mut TrainState,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<(), Error> {
    cfg.validate().map_err(Error::Train)?;
    if dataset.patch_size() != state.generator.config().input_size {
        return Err(TrainError::InvalidConfig(format!(
            "dataset patch size {} does not match generator input size {}",
            dataset.patch_size(),
            state.generator.config().input_size
        ))
        .into());
    }
    if dataset.train_len() == 0 {
        return Err(crate::error::DataError::EmptySplit("train").into());
    }

    let mut writer = match &opts.loss_csv_path {
        Some(path) => {
            if opts.append_loss_csv && path.exists() {
                let file = std::fs::OpenOptions::new().append(true).open(path)?;
                Some(LossCsvWriter::append(file))
            } else {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(LossCsvWriter::new(std::fs::File::create(path)?)?)
            }
        }
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let bps = cfg.base_per_step();
    let end_epoch = opts
        .stop_after_epoch
        .unwrap_or(cfg.epochs as u64)
        .min(cfg.epochs as u64);

    while state.epoch < end_epoch {
        let mut order: Vec<usize> = (0..dataset.train_len()).collect();
        state.rng.shuffle(&mut order);
        let steps = dataset.train_len().div_ceil(bps).max(1);
        for s in 0..steps {
            // wrap-around recycling keeps every step at full batch size
            let picks: Vec<usize> = (0..bps).map(|k| order[(s * bps + k) % order.len()]).collect();
            let batch = {
                // split the borrow: crops and views draw from state.rng
                let mut rng = state.rng.clone();
                let b = build_batch(dataset, &picks, cfg, &mut rng);
                state.rng = rng;
                b
            };
            let stats = match train_step(state, &batch, cfg) {
                Ok(stats) => stats,
                Err(err) => {
                    if let Some(dir) = &opts.checkpoint_dir {
                        let _ = state.save(&dir.join("diverged.ckpt"));
                    }
                    if let Some(w) = writer.as_mut() {
                        let _ = w.flush();
                    }
                    return Err(err);
                }
            };
            if let Some(w) = writer.as_mut() {
                w.write(&stats.row)?;
            }
        }
        state.epoch += 1;
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every_epochs > 0
                && (state.epoch as usize) % opts.checkpoint_every_epochs == 0
            {
                state
                    .save(&dir.join(format!("epoch_{:05}.ckpt", state.epoch)))
                    .map_err(Error::Model)?;
            }
        }
    }

    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        state.save(&dir.join("final.ckpt")).map_err(Error::Model)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DenoisingDataset, NormalizationRecord, Pair};
    use crate::models::{DiscriminatorConfig, GeneratorConfig, ProjectionHeadConfig};
    use std::sync::Arc;

    fn tiny_configs() -> ModelConfigs {
        let generator = GeneratorConfig {
            n_down: 3,
            base_channels: 4,
            max_channels: 8,
            dropout_rate: 0.0,
            dropout_blocks: vec![],
            input_size: 16,
            skip_connections: true,
        };
        let projection = ProjectionHeadConfig::for_generator(&generator);
        ModelConfigs {
            generator,
            discriminator: DiscriminatorConfig {
                n_layers: 1,
                base_channels: 4,
            },
            projection,
        }
    }

    fn tiny_cfg(flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 4,
            decay_start_epoch: 2,
            lr: 1e-3,
            seed: 0,
            ablation: flags,
            ssim: SsimParams {
                window: 7,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> DenoisingDataset {
        let mut rng = SeededRng::new(seed);
        let clean_base = Array2::from_shape_fn((16, 16), |(i, j)| {
            0.25 + 0.5 * (((i / 4) + (j / 4)) % 2) as f64
        });
        let clean = Arc::new(clean_base);
        let pairs: Vec<Pair> = (0..n)
            .map(|_| Pair {
                noisy: clean
                    .mapv(|v| (v + 0.1 * rng.normal()).clamp(0.0, 1.0)),
                clean: Arc::clone(&clean),
            })
            .collect();
        let rec = NormalizationRecord {
            low_pct: 0.0,
            high_pct: 100.0,
            p_low: 0.0,
            p_high: 1.0,
        };
        let train: Vec<usize> = (0..n - 1).collect();
        DenoisingDataset::from_parts("tiny".into(), pairs, train, vec![n - 1], rec, 16).unwrap()
    }

    fn tiny_batch(state: &mut TrainState, cfg: &TrainConfig, dataset: &DenoisingDataset) -> TrainBatch {
        let picks: Vec<usize> = (0..cfg.base_per_step())
            .map(|k| k % dataset.train_len())
            .collect();
        let mut rng = state.rng.clone();
        let b = build_batch(dataset, &picks, cfg, &mut rng);
        state.rng = rng;
        b
    }

    #[test]
    fn lr_schedule_closed_forms() {
        let cfg = TrainConfig::default(); // lr 2e-4, epochs 1000, decay 500
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert_eq!(lr_schedule(499, &cfg), 2e-4);
        assert_eq!(lr_schedule(500, &cfg), 2e-4); // continuity at the knee
        assert!((lr_schedule(750, &cfg) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(1000, &cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            decay_start_epoch: 2000,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 5,
            ablation: AblationFlags::all(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig {
            batch_size: 2,
            ablation: AblationFlags::all(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.ablation.use_cl = false;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn baseline_step_zeroes_disabled_terms() {
        let cfg = tiny_cfg(AblationFlags::baseline());
        let mut state = TrainState::init(&tiny_configs(), 1, cfg.beta1, cfg.beta2).unwrap();
        let dataset = tiny_dataset(6, 2);
        let batch = tiny_batch(&mut state, &cfg, &dataset);
        let stats = train_step(&mut state, &batch, &cfg).unwrap();
        assert_eq!(stats.row.ssim, 0.0);
        assert_eq!(stats.row.tv, 0.0);
        assert_eq!(stats.row.cl, 0.0);
        assert_eq!(stats.proj_grad_norm, 0.0);
        assert!(stats.row.gan_g > 0.0);
        assert!(stats.row.l1 > 0.0);
        // total matches the scalar composite of the logged terms
        let recomposed = composite_loss(
            &LossTerms {
                gan_g: stats.row.gan_g,
                l1: stats.row.l1,
                ssim: 0.0,
                tv: 0.0,
                cl: 0.0,
            },
            &cfg.weights,
        )
        .unwrap();
        assert_eq!(stats.row.total, recomposed.total);
    }

    #[test]
    fn disabled_terms_never_invoke_their_hooks() {
        // poisoned stubs: a disabled run must not evaluate the term
        let cfg = tiny_cfg(AblationFlags::baseline());
        let mut state = TrainState::init(&tiny_configs(), 3, cfg.beta1, cfg.beta2).unwrap();
        let dataset = tiny_dataset(6, 4);
        let batch = tiny_batch(&mut state, &cfg, &dataset);
        let hooks = LossHooks {
            ssim: Box::new(|_, _, _, _| panic!("ssim stub called in disabled run")),
            tv: Box::new(|_, _| panic!("tv stub called in disabled run")),
            cl: Box::new(|_, _, _, _| panic!("cl stub called in disabled run")),
        };
        train_step_hooked(&mut state, &batch, &cfg, &hooks).unwrap();
    }

    #[test]
    fn identical_state_and_batch_give_bit_identical_updates() {
        let cfg = tiny_cfg(AblationFlags::all());
        let dataset = tiny_dataset(6, 5);
        let run = || {
            let mut state = TrainState::init(&tiny_configs(), 7, cfg.beta1, cfg.beta2).unwrap();
            let batch = tiny_batch(&mut state, &cfg, &dataset);
            train_step(&mut state, &batch, &cfg).unwrap();
            let params: Vec<f64> = state
                .generator
                .store()
                .iter()
                .flat_map(|(_, v)| v.iter().copied().collect::<Vec<f64>>())
                .collect();
            params
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn every_generator_parameter_gets_gradient_under_full_loss() {
        // no dead branches: every scalar must receive gradient on at
        // least one random batch. A single tiny batch can leave relu-dead
        // slices, so the scan unions over several steps.
        let cfg = tiny_cfg(AblationFlags::all());
        let mut state = TrainState::init(&tiny_configs(), 11, cfg.beta1, cfg.beta2).unwrap();
        // keep relus fed by un-normalized encoder features active: at
        // this scale whole channels can otherwise sit relu-dead on every
        // batch, which is sparsity, not a disconnected branch (the
        // instance-normed inputs are zero-mean and cannot go all-dead)
        for (name, value) in state.generator.store_mut().iter_mut() {
            if name.starts_with("enc") && name.ends_with(".bias") {
                value.fill(0.5);
            }
        }
        let dataset = tiny_dataset(6, 12);
        let mut prev: Vec<(String, Vec<f64>)> = state
            .generator
            .store()
            .iter()
            .map(|(n, v)| (n.to_string(), v.iter().copied().collect()))
            .collect();
        let mut touched: Vec<Vec<bool>> = prev.iter().map(|(_, v)| vec![false; v.len()]).collect();
        let mut saw_proj_grad = false;
        for _ in 0..8 {
            let batch = tiny_batch(&mut state, &cfg, &dataset);
            let stats = train_step(&mut state, &batch, &cfg).unwrap();
            saw_proj_grad |= stats.proj_grad_norm > 0.0;
            for (k, (_, new)) in state.generator.store().iter().enumerate() {
                for (t, (a, b)) in prev[k].1.iter().zip(new.iter()).enumerate() {
                    if a.to_bits() != b.to_bits() {
                        touched[k][t] = true;
                    }
                }
                prev[k].1 = new.iter().copied().collect();
            }
        }
        assert!(saw_proj_grad, "projection head gets gradient");
        for ((name, _), mask) in prev.iter().zip(touched.iter()) {
            let covered = mask.iter().filter(|&&t| t).count();
            assert_eq!(
                covered,
                mask.len(),
                "{name}: {covered}/{} scalars ever updated",
                mask.len()
            );
        }
    }

    #[test]
    fn discriminator_and_generator_updates_are_decoupled() {
        // phase wiring: the D objective reaches no generator parameter
        // (detached fake) and the G objective reaches no discriminator
        // parameter (frozen rebind)
        let cfg = tiny_cfg(AblationFlags::baseline());
        let mut state = TrainState::init(&tiny_configs(), 13, cfg.beta1, cfg.beta2).unwrap();
        let dataset = tiny_dataset(6, 14);
        let batch = tiny_batch(&mut state, &cfg, &dataset);

        let mut g = Graph::new();
        let bind_gen = state.generator.bind(&mut g, true);
        let bind_disc = state.discriminator.bind(&mut g, true);
        let x = g.constant(batch.noisy.clone());
        let y = g.constant(batch.clean.clone());
        let fake = state.generator.forward(&mut g, &bind_gen, x, None);

        let fake_detached = g.detach(fake.output);
        let d_real = state.discriminator.forward(&mut g, &bind_disc, x, y);
        let d_fake = state.discriminator.forward(&mut g, &bind_disc, x, fake_detached);
        let d_loss = adversarial_loss(&mut g, d_real, d_fake, AdversarialSide::Discriminator).unwrap();
        let d_grads = g.backward(d_loss);
        for (name, _) in state.generator.store().iter() {
            assert!(
                d_grads.get(bind_gen.id(name)).is_none(),
                "D loss leaked into generator param {name}"
            );
        }

        let bind_disc_frozen = state.discriminator.bind(&mut g, false);
        let d_fake_g = state
            .discriminator
            .forward(&mut g, &bind_disc_frozen, x, fake.output);
        let gan_g = adversarial_loss(&mut g, d_fake_g, d_fake_g, AdversarialSide::Generator).unwrap();
        let g_grads = g.backward(gan_g);
        for (name, _) in state.discriminator.store().iter() {
            assert!(
                g_grads.get(bind_disc_frozen.id(name)).is_none(),
                "G loss leaked into discriminator param {name}"
            );
        }
        // and the generator does receive adversarial gradient through D
        let got_any = state
            .generator
            .store()
            .iter()
            .any(|(name, _)| g_grads.get(bind_gen.id(name)).is_some());
        assert!(got_any);
    }

    #[test]
    fn small_lr_step_descends_composite_loss() {
        // descent probe: after one G step at lr 1e-5, the composite loss
        // on the same batch (same dropout-free forward) should not
        // increase; up to 2 of 20 stochastic exceptions tolerated
        let mut exceptions = 0;
        for trial in 0..20 {
            let mut cfg = tiny_cfg(AblationFlags::all());
            cfg.lr = 1e-5;
            let mut state =
                TrainState::init(&tiny_configs(), 100 + trial, cfg.beta1, cfg.beta2).unwrap();
            let dataset = tiny_dataset(6, 200 + trial);
            let batch = tiny_batch(&mut state, &cfg, &dataset);

            let eval_composite = |state: &TrainState| -> f64 {
                let mut g = Graph::new();
                let bind_gen = state.generator.bind(&mut g, false);
                let bind_disc = state.discriminator.bind(&mut g, false);
                let bind_proj = state.projection.bind(&mut g, false);
                let x = g.constant(batch.noisy.clone());
                let y = g.constant(batch.clean.clone());
                let fake = state.generator.forward(&mut g, &bind_gen, x, None);
                let d_fake = state.discriminator.forward(&mut g, &bind_disc, x, fake.output);
                let gan_g =
                    adversarial_loss(&mut g, d_fake, d_fake, AdversarialSide::Generator).unwrap();
                let l1 = l1_loss(&mut g, fake.output, y).unwrap();
                let ssim = dssim_loss(&mut g, fake.output, y, &cfg.ssim).unwrap();
                let tv = tv_loss(&mut g, fake.output).unwrap();
                let views = batch.views.as_ref().unwrap();
                let v = g.constant(views.clone());
                let vb = state.generator.forward_bottleneck(&mut g, &bind_gen, v);
                let be = state.projection.forward(&mut g, &bind_proj, fake.bottleneck);
                let ve = state.projection.forward(&mut g, &bind_proj, vb);
                let emb = g.concat_rows(be, ve);
                let pairs = PairIndex::two_view(batch.noisy.dim().0);
                let cl = ntxent_loss(&mut g, emb, &pairs, cfg.weights.tau).unwrap();
                let terms = LossTerms {
                    gan_g: g.scalar_value(gan_g),
                    l1: g.scalar_value(l1),
                    ssim: g.scalar_value(ssim),
                    tv: g.scalar_value(tv),
                    cl: g.scalar_value(cl),
                };
                composite_loss(&terms, &cfg.weights).unwrap().total
            };

            let before = eval_composite(&state);
            // G update shifts the loss; the D update in between perturbs
            // the adversarial term, which the tolerance absorbs
            train_step(&mut state, &batch, &cfg).unwrap();
            let after = eval_composite(&state);
            if after > before {
                exceptions += 1;
            }
        }
        assert!(exceptions <= 2, "{exceptions} of 20 probes increased");
    }

    #[test]
    fn fit_zero_epochs_returns_state_unchanged() {
        let mut cfg = tiny_cfg(AblationFlags::baseline());
        cfg.epochs = 0;
        cfg.decay_start_epoch = 0;
        let mut state = TrainState::init(&tiny_configs(), 15, cfg.beta1, cfg.beta2).unwrap();
        let before: Vec<f64> = state
            .generator
            .store()
            .iter()
            .flat_map(|(_, v)| v.iter().copied().collect::<Vec<f64>>())
            .collect();
        let dataset = tiny_dataset(6, 16);
        fit(&dataset, &mut state, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(state.epoch, 0);
        assert_eq!(state.global_step, 0);
        let after: Vec<f64> = state
            .generator
            .store()
            .iter()
            .flat_map(|(_, v)| v.iter().copied().collect::<Vec<f64>>())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn few_shot_split_recycles_to_full_batches() {
        // 3 train pairs, batch 4 with CL: 2 base + 2 views per step
        let mut cfg = tiny_cfg(AblationFlags::all());
        cfg.batch_size = 4;
        cfg.epochs = 1;
        cfg.decay_start_epoch = 1;
        let mut state = TrainState::init(&tiny_configs(), 17, cfg.beta1, cfg.beta2).unwrap();
        let dataset = tiny_dataset(4, 18); // 3 train + 1 test
        fit(&dataset, &mut state, &cfg, &FitOptions::default()).unwrap();
        // ceil(3/2) = 2 steps in the epoch
        assert_eq!(state.global_step, 2);
        assert_eq!(state.epoch, 1);
    }

    #[test]
    fn non_finite_loss_aborts_with_named_term_and_checkpoint() {
        let cfg = tiny_cfg(AblationFlags::baseline());
        let mut state = TrainState::init(&tiny_configs(), 19, cfg.beta1, cfg.beta2).unwrap();
        // poison one generator weight so the forward pass goes NaN
        state
            .generator
            .store_mut()
            .get_mut("enc0.weight")
            .unwrap()
            .fill(f64::NAN);
        let dataset = tiny_dataset(6, 20);
        let batch = tiny_batch(&mut state, &cfg, &dataset);
        let err = train_step(&mut state, &batch, &cfg).unwrap_err();
        match err {
            Error::Train(TrainError::NonFiniteLoss { term, .. }) => {
                assert_eq!(term, "gan_d", "discriminator sees the NaN fake first");
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }

        // fit saves a post-mortem checkpoint before propagating
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::init(&tiny_configs(), 19, cfg.beta1, cfg.beta2).unwrap();
        state
            .generator
            .store_mut()
            .get_mut("enc0.weight")
            .unwrap()
            .fill(f64::NAN);
        let opts = FitOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = fit(&dataset, &mut state, &cfg, &opts).unwrap_err();
        assert!(matches!(err, Error::Train(TrainError::NonFiniteLoss { .. })));
        assert!(dir.path().join("diverged.ckpt").exists());
        assert!(!dir.path().join("final.ckpt").exists());
    }
}
