//! Contrastive projection head: pooled bottleneck features through a
//! two-layer nonlinear map onto the unit sphere. Training-only; the
//! head is dropped at inference.

use super::{init_bias, init_weight, Binding, ParamStore, ProjectionHeadConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::ModelError;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    cfg: ProjectionHeadConfig,
    store: ParamStore,
}

impl ProjectionHead {
    pub fn new(cfg: ProjectionHeadConfig, rng: &mut SeededRng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        store.insert("fc1.weight", init_weight(&[cfg.input_dim, cfg.hidden_dim], rng));
        store.insert("fc1.bias", init_bias(cfg.hidden_dim));
        store.insert("fc2.weight", init_weight(&[cfg.hidden_dim, cfg.output_dim], rng));
        store.insert("fc2.bias", init_bias(cfg.output_dim));
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &ProjectionHeadConfig {
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

    /// Map a bottleneck feature map (n, c, s, s) to unit-norm embeddings
    /// (n, output_dim). Each row depends only on its own sample, so the
    /// embedding of one image is independent of batch composition.
    pub fn forward(&self, g: &mut Graph, b: &Binding, bottleneck: NodeId) -> NodeId {
        let pooled = g.global_avg_pool(bottleneck);
        let w1 = b.id("fc1.weight");
        let b1 = b.id("fc1.bias");
        let h = g.matmul(pooled, w1);
        let h = g.add_bias_rows(h, b1);
        let h = g.relu(h);
        let w2 = b.id("fc2.weight");
        let b2 = b.id("fc2.bias");
        let e = g.matmul(h, w2);
        let e = g.add_bias_rows(e, b2);
        g.l2_normalize_rows(e)
    }
}
