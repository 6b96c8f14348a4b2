//! Restorable training state: models, optimizer moments, counters, and
//! the RNG stream, with bit-exact checkpoint round-trips.

use std::path::Path;

use super::adam::Adam;
use crate::error::ModelError;
use crate::models::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, DiscriminatorConfig, Generator,
    GeneratorConfig, ParamStore, PatchDiscriminator, ProjectionHead, ProjectionHeadConfig,
};
use crate::rng::SeededRng;

/// Model configurations of one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfigs {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub projection: ProjectionHeadConfig,
}

impl ModelConfigs {
    pub fn desk_scale() -> Self {
        let generator = GeneratorConfig::desk_scale();
        let projection = ProjectionHeadConfig::for_generator(&generator);
        Self {
            generator,
            discriminator: DiscriminatorConfig::desk_scale(),
            projection,
        }
    }

    pub fn paper_faithful() -> Self {
        let generator = GeneratorConfig::default();
        let projection = ProjectionHeadConfig::for_generator(&generator);
        Self {
            generator,
            discriminator: DiscriminatorConfig::default(),
            projection,
        }
    }
}

/// Mutable state of a training run.
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
    pub projection: ProjectionHead,
    pub(super) opt_g: Adam,
    pub(super) opt_d: Adam,
    pub epoch: u64,
    pub global_step: u64,
    pub(super) rng: SeededRng,
    seed: u64,
}

impl TrainState {
    /// Initialize models from a single seeded stream: generator, then
    /// discriminator, then projection head, in that order.
    pub fn init(configs: &ModelConfigs, seed: u64, beta1: f64, beta2: f64) -> Result<Self, ModelError> {
        let mut rng = SeededRng::new(seed);
        let generator = Generator::new(configs.generator.clone(), &mut rng)?;
        let discriminator = PatchDiscriminator::new(configs.discriminator.clone(), &mut rng)?;
        let projection = ProjectionHead::new(configs.projection.clone(), &mut rng)?;
        Ok(Self {
            generator,
            discriminator,
            projection,
            opt_g: Adam::new(beta1, beta2),
            opt_d: Adam::new(beta1, beta2),
            epoch: 0,
            global_step: 0,
            rng,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn configs(&self) -> ModelConfigs {
        ModelConfigs {
            generator: self.generator.config().clone(),
            discriminator: self.discriminator.config().clone(),
            projection: self.projection.config().clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new(
            self.generator.config().clone(),
            self.discriminator.config().clone(),
            self.projection.config().clone(),
            self.seed,
        );
        meta.epoch = self.epoch;
        meta.global_step = self.global_step;
        meta.opt_g_step = self.opt_g.t();
        meta.opt_d_step = self.opt_d.t();
        meta.set_rng_state(self.rng.state());

        let mut arrays = Vec::new();
        let mut push_store = |prefix: &str, store: &ParamStore, opt: &Adam| {
            for (name, value) in store.iter() {
                let full = format!("{prefix}.{name}");
                arrays.push((full.clone(), value.clone()));
                if let Some((m, v)) = opt.moments(&full) {
                    arrays.push((format!("adam.m.{full}"), m.clone()));
                    arrays.push((format!("adam.v.{full}"), v.clone()));
                }
            }
        };
        push_store("gen", self.generator.store(), &self.opt_g);
        push_store("proj", self.projection.store(), &self.opt_g);
        push_store("disc", self.discriminator.store(), &self.opt_d);
        Checkpoint { meta, arrays }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, beta1: f64, beta2: f64) -> Result<Self, ModelError> {
        let configs = ModelConfigs {
            generator: ckpt.meta.generator.clone(),
            discriminator: ckpt.meta.discriminator.clone(),
            projection: ckpt.meta.projection.clone(),
        };
        // rebuild with the original init path, then overwrite every
        // parameter from the stored arrays
        let mut state = Self::init(&configs, ckpt.meta.seed, beta1, beta2)?;

        let restore = |prefix: &str, store: &mut ParamStore, opt: &mut Adam| -> Result<(), ModelError> {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let full = format!("{prefix}.{name}");
                let stored = ckpt
                    .array(&full)
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing array {full}")))?;
                let slot = store.get_mut(&name).expect("known name");
                if slot.shape() != stored.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "shape mismatch for {full}: {:?} vs {:?}",
                        slot.shape(),
                        stored.shape()
                    )));
                }
                *slot = stored.clone();
                if let (Some(m), Some(v)) = (
                    ckpt.array(&format!("adam.m.{full}")),
                    ckpt.array(&format!("adam.v.{full}")),
                ) {
                    opt.set_moments(&full, m.clone(), v.clone());
                }
            }
            Ok(())
        };
        restore("gen", state.generator.store_mut(), &mut state.opt_g)?;
        restore("proj", state.projection.store_mut(), &mut state.opt_g)?;
        restore("disc", state.discriminator.store_mut(), &mut state.opt_d)?;

        state.opt_g.set_t(ckpt.meta.opt_g_step);
        state.opt_d.set_t(ckpt.meta.opt_d_step);
        state.epoch = ckpt.meta.epoch;
        state.global_step = ckpt.meta.global_step;
        state.rng = SeededRng::restore(ckpt.meta.rng_state());
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path, beta1: f64, beta2: f64) -> Result<Self, ModelError> {
        let ckpt = load_checkpoint(path)?;
        Self::from_checkpoint(&ckpt, beta1, beta2)
    }
}
