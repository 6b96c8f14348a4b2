//! Patch discriminator: judges realism of receptive-field-sized patches
//! of a (condition, candidate) pair and emits a grid of raw logits.

use super::{
    init_bias, init_weight, Binding, DiscriminatorConfig, ParamStore, KERNEL, LEAKY_SLOPE,
    NORM_EPS,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::ModelError;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
}

impl PatchDiscriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut SeededRng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut in_ch = 2usize; // condition + candidate
        for i in 0..=cfg.n_layers {
            let out_ch = cfg.channels(i.min(cfg.n_layers));
            let out_ch = if i == cfg.n_layers {
                cfg.channels(cfg.n_layers)
            } else {
                out_ch
            };
            store.insert(
                format!("layer{i}.weight"),
                init_weight(&[out_ch, in_ch, KERNEL, KERNEL], rng),
            );
            store.insert(format!("layer{i}.bias"), init_bias(out_ch));
            in_ch = out_ch;
        }
        store.insert("head.weight", init_weight(&[1, in_ch, KERNEL, KERNEL], rng));
        store.insert("head.bias", init_bias(1));
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        self.store.bind(g, trainable)
    }

    /// Raw patch logits for a (condition, candidate) pair, both
    /// (n, 1, s, s). Output is (n, 1, s_out, s_out).
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        condition: NodeId,
        candidate: NodeId,
    ) -> NodeId {
        let mut cur = g.concat_channels(condition, candidate);
        for i in 0..=self.cfg.n_layers {
            let w = b.id(&format!("layer{i}.weight"));
            let bias = b.id(&format!("layer{i}.bias"));
            let stride = if i < self.cfg.n_layers { 2 } else { 1 };
            cur = g.conv2d(cur, w, Some(bias), stride, 1);
            if i > 0 {
                cur = g.instance_norm(cur, NORM_EPS);
            }
            cur = g.leaky_relu(cur, LEAKY_SLOPE);
        }
        let w = b.id("head.weight");
        let bias = b.id("head.bias");
        g.conv2d(cur, w, Some(bias), 1, 1)
    }
}
