//! Network definitions: U-Net generator, patch discriminator, and the
//! contrastive projection head.
//!
//! Parameters live in a flat, name-keyed [`ParamStore`] owned by each
//! model. A forward pass binds the store into a [`Graph`](crate::autodiff::Graph)
//! as leaves (trainable or frozen) and builds the function graph on top,
//! so the same definition serves training, gradient checks, and
//! inference.

mod checkpoint;
mod discriminator;
mod generator;
mod projection;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use discriminator::PatchDiscriminator;
pub use generator::Generator;
pub use projection::ProjectionHead;

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::autodiff::{Graph, NodeId};
use crate::error::ModelError;
use crate::rng::SeededRng;

/// Convolution kernel size used throughout both networks.
pub(crate) const KERNEL: usize = 4;

/// Instance-norm stabilizer.
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Negative slope of encoder/discriminator activations.
pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// Std-dev of the zero-mean Gaussian weight init.
pub(crate) const INIT_STD: f64 = 0.02;

/// U-Net generator shape. The decoder mirrors the encoder, so a single
/// depth field covers both directions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Number of downsampling blocks; the upsampling count mirrors it.
    pub n_down: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub dropout_rate: f64,
    /// Decoder block indices that apply dropout, counted from the
    /// bottleneck outward. Default: the three innermost.
    pub dropout_blocks: Vec<usize>,
    /// Side length of one forward-pass input tile.
    pub input_size: usize,
    pub skip_connections: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_down: 7,
            base_channels: 64,
            max_channels: 512,
            dropout_rate: 0.5,
            dropout_blocks: vec![0, 1, 2],
            input_size: 256,
            skip_connections: true,
        }
    }
}

impl GeneratorConfig {
    /// A reduced configuration for CPU-scale experiments.
    pub fn desk_scale() -> Self {
        Self {
            n_down: 3,
            base_channels: 16,
            max_channels: 64,
            dropout_rate: 0.0,
            dropout_blocks: vec![],
            input_size: 64,
            skip_connections: true,
        }
    }

    /// Upsampling block count (mirrors the encoder by construction).
    pub fn n_up(&self) -> usize {
        self.n_down
    }

    /// Encoder block output channels.
    pub fn enc_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }

    /// Channels of the innermost encoder output.
    pub fn bottleneck_channels(&self) -> usize {
        self.enc_channels(self.n_down - 1)
    }

    /// Spatial side of the innermost encoder output.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.n_down
    }

    /// Decoder block output channels (block 0 is innermost).
    pub fn dec_channels(&self, j: usize) -> usize {
        if j + 1 == self.n_down {
            1
        } else {
            self.enc_channels(self.n_down - 2 - j)
        }
    }

    /// Decoder block input channels, accounting for skip concatenation.
    pub fn dec_in_channels(&self, j: usize) -> usize {
        if j == 0 {
            self.bottleneck_channels()
        } else {
            let skip = if self.skip_connections {
                self.enc_channels(self.n_down - 1 - j)
            } else {
                0
            };
            self.dec_channels(j - 1) + skip
        }
    }

    /// Spatial sizes after each encoder block, starting from the input:
    /// [input, input/2, ..., input/2^n_down].
    pub fn shape_trace(&self) -> Vec<usize> {
        (0..=self.n_down).map(|i| self.input_size >> i).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_down < 2 {
            return Err(ModelError::InvalidConfig(
                "generator needs at least 2 downsampling blocks".into(),
            ));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(ModelError::InvalidConfig(
                "channel schedule must satisfy 1 <= base <= max".into(),
            ));
        }
        if self.input_size % (1 << self.n_down) != 0 || self.input_size >> self.n_down == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input size {} not divisible down to >= 1 by {} halvings",
                self.input_size, self.n_down
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(
                "dropout rate must lie in [0, 1)".into(),
            ));
        }
        if self.dropout_blocks.iter().any(|&b| b >= self.n_down) {
            return Err(ModelError::InvalidConfig(
                "dropout block index out of decoder range".into(),
            ));
        }
        Ok(())
    }
}

/// Patch discriminator shape: `n_layers` stride-2 blocks, one stride-1
/// block, and a 1-channel score head. Consumes the 2-channel
/// concatenation of condition and candidate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub n_layers: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            base_channels: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk_scale() -> Self {
        Self {
            n_layers: 2,
            base_channels: 12,
        }
    }

    /// (kernel, stride, padding) of every conv in forward order.
    pub fn layer_geometry(&self) -> Vec<(usize, usize, usize)> {
        let mut layers = vec![(KERNEL, 2, 1); self.n_layers];
        layers.push((KERNEL, 1, 1)); // pre-head stride-1 block
        layers.push((KERNEL, 1, 1)); // score head
        layers
    }

    /// Receptive field of one output score in input pixels, by the
    /// standard backward composition rf <- (rf - 1) * stride + kernel.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        for &(k, s, _) in self.layer_geometry().iter().rev() {
            rf = (rf - 1) * s + k;
        }
        rf
    }

    /// Product of all layer strides.
    pub fn total_stride(&self) -> usize {
        self.layer_geometry().iter().map(|&(_, s, _)| s).product()
    }

    /// Total padding mapped back to input coordinates: each layer
    /// contributes 2 * p * jump, where jump is the stride product of the
    /// layers before it.
    pub fn total_padding(&self) -> usize {
        let mut jump = 1usize;
        let mut total = 0usize;
        for &(_, s, p) in self.layer_geometry().iter() {
            total += 2 * p * jump;
            jump *= s;
        }
        total
    }

    /// Score-map side for a square input, layer by layer.
    pub fn output_size(&self, input: usize) -> usize {
        let mut size = input;
        for &(k, s, p) in self.layer_geometry().iter() {
            size = (size + 2 * p - k) / s + 1;
        }
        size
    }

    /// Closed-form score-map side from receptive-field arithmetic:
    /// floor((input + pad_total - rf) / stride_total) + 1.
    pub fn stride_arithmetic_output(&self, input: usize) -> usize {
        (input + self.total_padding() - self.receptive_field()) / self.total_stride() + 1
    }

    pub fn channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.base_channels * 8)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.base_channels == 0 {
            return Err(ModelError::InvalidConfig(
                "discriminator needs n_layers >= 1 and base_channels >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Projection head shape: pooled bottleneck -> hidden -> embedding,
/// L2-normalized. Discarded at inference.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProjectionHeadConfig {
    /// Channels of the generator bottleneck feeding the head.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ProjectionHeadConfig {
    fn default() -> Self {
        Self {
            input_dim: 512,
            hidden_dim: 256,
            output_dim: 128,
        }
    }
}

impl ProjectionHeadConfig {
    /// Head sized for a given generator.
    pub fn for_generator(gen: &GeneratorConfig) -> Self {
        Self {
            input_dim: gen.bottleneck_channels(),
            hidden_dim: 256.min(gen.bottleneck_channels().max(8) * 2),
            output_dim: 128.min(gen.bottleneck_channels().max(8)),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "projection head dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered, name-keyed parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.index.get(name).copied().map(|i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Insert every entry into a graph as leaves, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let mut ids = HashMap::with_capacity(self.entries.len());
        for (name, value) in &self.entries {
            let id = if trainable {
                g.param(value.clone())
            } else {
                g.constant(value.clone())
            };
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }
}

/// Node ids of one store bound into one graph.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

/// Gaussian(0, INIT_STD) conv/linear weight tensor.
pub(crate) fn init_weight(shape: &[usize], rng: &mut SeededRng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| INIT_STD * rng.normal())
}

/// Zero bias vector.
pub(crate) fn init_bias(len: usize) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(&[len]))
}
