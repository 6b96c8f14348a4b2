//! U-Net generator: strided conv encoder, transposed-conv decoder with
//! mirrored skip concatenations, bounded output in [0, 1].

use ndarray::{Array2, ArrayD};

use super::{
    init_bias, init_weight, Binding, GeneratorConfig, ParamStore, KERNEL, LEAKY_SLOPE, NORM_EPS,
};
use crate::autodiff::{as4, Graph, NodeId};
use crate::error::ModelError;
use crate::rng::SeededRng;

/// The denoising network. Maps (n, 1, s, s) noisy patches to denoised
/// patches of the same shape and exposes the pre-pooling bottleneck
/// feature map for the contrastive projection head.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
}

/// Outputs of one generator forward pass.
pub struct GeneratorOutput {
    pub output: NodeId,
    /// Innermost encoder feature map (n, c_bottleneck, s, s).
    pub bottleneck: NodeId,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut SeededRng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut in_ch = 1usize;
        for i in 0..cfg.n_down {
            let out_ch = cfg.enc_channels(i);
            store.insert(
                format!("enc{i}.weight"),
                init_weight(&[out_ch, in_ch, KERNEL, KERNEL], rng),
            );
            store.insert(format!("enc{i}.bias"), init_bias(out_ch));
            in_ch = out_ch;
        }
        for j in 0..cfg.n_down {
            let in_ch = cfg.dec_in_channels(j);
            let out_ch = cfg.dec_channels(j);
            // transposed conv weights are (c_in, c_out, k, k)
            store.insert(
                format!("dec{j}.weight"),
                init_weight(&[in_ch, out_ch, KERNEL, KERNEL], rng),
            );
            store.insert(format!("dec{j}.bias"), init_bias(out_ch));
        }
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    /// Encoder only: returns per-level outputs, the last being the
    /// bottleneck.
    fn encode(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Vec<NodeId> {
        let n = self.cfg.n_down;
        let mut features = Vec::with_capacity(n);
        let mut cur = x;
        for i in 0..n {
            if i > 0 {
                cur = g.leaky_relu(cur, LEAKY_SLOPE);
            }
            let w = b.id(&format!("enc{i}.weight"));
            let bias = b.id(&format!("enc{i}.bias"));
            cur = g.conv2d(cur, w, Some(bias), 2, 1);
            // no norm on the first block or the bottleneck
            if i > 0 && i + 1 < n {
                cur = g.instance_norm(cur, NORM_EPS);
            }
            features.push(cur);
        }
        features
    }

    /// Full forward pass. `dropout_rng` enables the dropout blocks; pass
    /// `None` for deterministic evaluation.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: NodeId,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> GeneratorOutput {
        let n = self.cfg.n_down;
        let features = self.encode(g, b, x);
        let bottleneck = features[n - 1];

        let mut cur = bottleneck;
        for j in 0..n {
            cur = g.relu(cur);
            let w = b.id(&format!("dec{j}.weight"));
            let bias = b.id(&format!("dec{j}.bias"));
            cur = g.conv_transpose2d(cur, w, Some(bias), 2, 1);
            if j + 1 < n {
                cur = g.instance_norm(cur, NORM_EPS);
                if self.cfg.dropout_rate > 0.0 && self.cfg.dropout_blocks.contains(&j) {
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        cur = apply_dropout(g, cur, self.cfg.dropout_rate, rng);
                    }
                }
                if self.cfg.skip_connections {
                    let skip = features[n - 2 - j];
                    cur = g.concat_channels(cur, skip);
                }
            }
        }
        // bounded output: tanh rescaled into [0, 1]
        let t = g.tanh(cur);
        let t = g.add_scalar(t, 1.0);
        let output = g.mul_scalar(t, 0.5);
        GeneratorOutput { output, bottleneck }
    }

    /// Encoder-only pass for contrastive embeddings of augmented views.
    pub fn forward_bottleneck(&self, g: &mut Graph, b: &Binding, x: NodeId) -> NodeId {
        let features = self.encode(g, b, x);
        features[self.cfg.n_down - 1]
    }

    /// Deterministic single-tile inference on a plain array.
    pub fn denoise_tile(&self, tile: &Array2<f64>) -> Array2<f64> {
        let (h, w) = tile.dim();
        assert_eq!(h, self.cfg.input_size, "tile height");
        assert_eq!(w, self.cfg.input_size, "tile width");
        let mut g = Graph::new();
        let binding = self.bind(&mut g, false);
        let x = g.constant(
            tile.to_owned()
                .into_shape_with_order((1, 1, h, w))
                .expect("tile reshape"),
        );
        let out = self.forward(&mut g, &binding, x, None);
        as4(g.value(out.output))
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
    }
}

/// Inverted dropout as a multiplication with a freshly sampled constant
/// mask; the mask is data, not a parameter.
fn apply_dropout(g: &mut Graph, x: NodeId, rate: f64, rng: &mut SeededRng) -> NodeId {
    let keep = 1.0 - rate;
    let shape = g.value(x).raw_dim();
    let mask = ArrayD::from_shape_fn(shape, |_| {
        if rng.uniform() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_down: 3,
            base_channels: 4,
            max_channels: 16,
            dropout_rate: 0.5,
            dropout_blocks: vec![0],
            input_size: 16,
            skip_connections: true,
        }
    }

    fn batch_input(n: usize, s: usize, seed: u64) -> Array4<f64> {
        let mut rng = SeededRng::new(seed);
        Array4::from_shape_fn((n, 1, s, s), |_| rng.uniform())
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(0);
        let gen = Generator::new(cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = gen.bind(&mut g, false);
        let x = g.constant(batch_input(2, 16, 1));
        let out = gen.forward(&mut g, &b, x, None);
        assert_eq!(g.value(out.output).shape(), &[2, 1, 16, 16]);
        assert_eq!(g.value(out.bottleneck).shape(), &[2, 16, 2, 2]);
    }

    #[test]
    fn output_bounded_in_unit_interval() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(3);
        let gen = Generator::new(cfg, &mut rng).unwrap();
        let tile = Array2::from_shape_fn((16, 16), |_| rng.uniform());
        let out = gen.denoise_tile(&tile);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(4);
        let gen = Generator::new(cfg, &mut rng).unwrap();
        let tile = Array2::from_shape_fn((16, 16), |_| rng.uniform());
        let a = gen.denoise_tile(&tile);
        let b = gen.denoise_tile(&tile);
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_changes_training_forward() {
        let cfg = GeneratorConfig {
            dropout_rate: 0.5,
            dropout_blocks: vec![0, 1],
            ..small_cfg()
        };
        let mut rng = SeededRng::new(5);
        let gen = Generator::new(cfg, &mut rng).unwrap();
        let x4 = batch_input(1, 16, 6);

        let run = |seed: u64| {
            let mut g = Graph::new();
            let b = gen.bind(&mut g, false);
            let x = g.constant(x4.clone());
            let mut drng = SeededRng::new(seed);
            let out = gen.forward(&mut g, &b, x, Some(&mut drng));
            g.value(out.output).clone()
        };
        let a = run(1);
        let b = run(2);
        assert_ne!(a, b, "different dropout masks give different outputs");
        let c = run(1);
        assert_eq!(a, c, "same dropout seed reproduces the output");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(7);
        let gen = Generator::new(cfg.clone(), &mut rng).unwrap();
        // analytic per-block count: conv = cout*cin*k^2 + cout
        let k2 = KERNEL * KERNEL;
        let mut expected = 0usize;
        let mut in_ch = 1usize;
        for i in 0..cfg.n_down {
            let out = cfg.enc_channels(i);
            expected += out * in_ch * k2 + out;
            in_ch = out;
        }
        for j in 0..cfg.n_down {
            expected += cfg.dec_in_channels(j) * cfg.dec_channels(j) * k2 + cfg.dec_channels(j);
        }
        assert_eq!(gen.parameter_count(), expected);
    }

    #[test]
    fn removing_skips_shrinks_params_by_concat_widths() {
        let cfg = small_cfg();
        let mut rng = SeededRng::new(8);
        let with_skips = Generator::new(cfg.clone(), &mut rng).unwrap();
        let no_skip_cfg = GeneratorConfig {
            skip_connections: false,
            ..cfg.clone()
        };
        let mut rng2 = SeededRng::new(8);
        let without = Generator::new(no_skip_cfg, &mut rng2).unwrap();
        // the difference is exactly the concatenated skip widths feeding
        // each non-innermost decoder block
        let k2 = KERNEL * KERNEL;
        let mut expected_diff = 0usize;
        for j in 1..cfg.n_down {
            let skip_ch = cfg.enc_channels(cfg.n_down - 1 - j);
            expected_diff += skip_ch * cfg.dec_channels(j) * k2;
        }
        assert_eq!(
            with_skips.parameter_count() - without.parameter_count(),
            expected_diff
        );
    }

    #[test]
    fn bottleneck_trace_matches_config() {
        // documents the exact halving sequence of the default config
        // without running the full-size network
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.shape_trace(), vec![256, 128, 64, 32, 16, 8, 4, 2]);
        // and verifies a reduced config against the actual tensors
        let small = small_cfg();
        let mut rng = SeededRng::new(9);
        let gen = Generator::new(small.clone(), &mut rng).unwrap();
        let mut g = Graph::new();
        let b = gen.bind(&mut g, false);
        let x = g.constant(batch_input(1, 16, 10));
        let features = gen.encode(&mut g, &b, x);
        for (i, &f) in features.iter().enumerate() {
            let s = g.value(f).shape()[2];
            assert_eq!(s, small.shape_trace()[i + 1]);
        }
    }
}
