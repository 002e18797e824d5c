//! Residual encoder-decoder CNN (RED-CNN).
//!
//! `n` valid convolutions shrink the patch, `n` transposed convolutions grow
//! it back, and shortcut connections add encoder feature maps (or the input
//! itself) onto decoder outputs of the same size before the activation.

mod io;

pub use io::{from_bytes, load, read_header, save, to_bytes, ModelHeader, FORMAT_VERSION, MAGIC};

use crate::tensor::{conv_output_dim, deconv_output_dim, ParamSet, Scalar, Tape, Tensor4, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid RED-CNN configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input validation failed: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, not a model file")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("shape table does not match configuration: {0}")]
    ShapeTable(String),
    #[error("malformed model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Reference patch edge used to validate shape arithmetic.
pub const REFERENCE_PATCH: usize = 55;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedCnnConfig {
    pub num_enc_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(encoder layer, decoder layer)`: the encoder output (0 = network
    /// input) is added to the output of the given decoder layer (1-based).
    pub shortcut_pairs: Vec<(usize, usize)>,
}

impl Default for RedCnnConfig {
    /// Five conv + five deconv layers, 96 channels, 5x5 kernels, three shortcuts.
    fn default() -> Self {
        Self::with_layers(5, 96)
    }
}

impl RedCnnConfig {
    /// Three conv + three deconv layers at 32 channels; small enough for CPU runs.
    pub fn desk() -> Self {
        Self::with_layers(3, 32)
    }

    /// Standard layout for `layers` encoder layers: the input feeds the last
    /// decoder layer and every even encoder layer `e < layers` feeds decoder
    /// layer `layers - e`, whose output has the same spatial size.
    pub fn with_layers(layers: usize, channels: usize) -> Self {
        let mut shortcut_pairs = vec![(0, layers)];
        shortcut_pairs.extend((2..layers).step_by(2).map(|e| (e, layers - e)));
        shortcut_pairs.sort_by_key(|&(e, _)| e);
        Self {
            num_enc_layers: layers,
            channels,
            kernel: 5,
            stride: 1,
            padding: 0,
            shortcut_pairs,
        }
    }

    /// Spatial size after each encoder layer (index 0 is the input).
    fn encoder_sizes(&self, input: usize) -> Option<Vec<usize>> {
        let mut sizes = vec![input];
        for _ in 0..self.num_enc_layers {
            let next = conv_output_dim(*sizes.last()?, self.kernel, self.stride, self.padding)?;
            sizes.push(next);
        }
        Some(sizes)
    }

    /// Spatial size after each decoder layer (index 0 is the bottleneck).
    fn decoder_sizes(&self, input: usize) -> Option<Vec<usize>> {
        let enc = self.encoder_sizes(input)?;
        let mut sizes = vec![*enc.last()?];
        for _ in 0..self.num_enc_layers {
            let next = deconv_output_dim(*sizes.last()?, self.kernel, self.stride, self.padding)?;
            sizes.push(next);
        }
        Some(sizes)
    }

    /// Checks invariants and that an `input x input` patch passes through.
    pub fn validate_for(&self, input: usize) -> Result<()> {
        let n = self.num_enc_layers;
        if n == 0 {
            return Err(ModelError::Config("num_enc_layers must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.channels == 0 || self.stride == 0 {
            return Err(ModelError::Config("channels and stride must be positive".into()));
        }
        let enc = self
            .encoder_sizes(input)
            .ok_or_else(|| ModelError::Config(format!("encoder shrinks a {input}x{input} input to nothing")))?;
        let dec = self
            .decoder_sizes(input)
            .ok_or_else(|| ModelError::Config(format!("decoder produces non-positive size for {input}x{input}")))?;
        if dec[n] != input {
            return Err(ModelError::Config(format!(
                "output size {} differs from input size {input}",
                dec[n]
            )));
        }
        for &(e, d) in &self.shortcut_pairs {
            if e > n || d == 0 || d > n {
                return Err(ModelError::Config(format!("shortcut ({e}, {d}) out of range")));
            }
            let enc_ch = if e == 0 { 1 } else { self.channels };
            let dec_ch = if d == n { 1 } else { self.channels };
            if enc[e] != dec[d] || enc_ch != dec_ch {
                return Err(ModelError::Config(format!(
                    "shortcut ({e}, {d}) joins {enc_ch}x{0}x{0} onto {dec_ch}x{1}x{1}",
                    enc[e], dec[d]
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_for(REFERENCE_PATCH)
    }

    /// Smallest square input whose encoder output is non-empty.
    pub fn min_input(&self) -> usize {
        (1..4096)
            .find(|&s| self.encoder_sizes(s).is_some())
            .unwrap_or(usize::MAX)
    }

    /// `(name, shape)` of every parameter in file/training order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let (n, c, k) = (self.num_enc_layers, self.channels, self.kernel);
        let mut out = Vec::with_capacity(4 * n);
        for i in 1..=n {
            let in_ch = if i == 1 { 1 } else { c };
            out.push((format!("enc{i}.weight"), [c, in_ch, k, k]));
            out.push((format!("enc{i}.bias"), [1, c, 1, 1]));
        }
        for i in 1..=n {
            let out_ch = if i == n { 1 } else { c };
            out.push((format!("dec{i}.weight"), [c, out_ch, k, k]));
            out.push((format!("dec{i}.bias"), [1, out_ch, 1, 1]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Which registry slot a model fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterSlot {
    Baseline,
    #[serde(untagged)]
    Cluster(u8),
}

impl ClusterSlot {
    pub fn cluster(id: usize) -> Result<Self> {
        if id < 3 {
            Ok(Self::Cluster(id as u8))
        } else {
            Err(ModelError::Config(format!("cluster id {id} outside 0..3")))
        }
    }
}

impl fmt::Display for ClusterSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baseline => write!(f, "baseline"),
            Self::Cluster(c) => write!(f, "expert{c}"),
        }
    }
}

/// Seed and data-manifest digest a model was trained from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainFingerprint {
    pub seed: u64,
    pub manifest_hash: String,
}

/// Trained (or freshly initialized) denoiser with its routing description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub config: RedCnnConfig,
    pub params: ParamSet<f32>,
    pub cluster_id: ClusterSlot,
    pub description: String,
    pub fingerprint: TrainFingerprint,
}

/// Initializes a model with Kaiming-uniform weights, zero biases and a zero
/// output layer, so a fresh network is the identity on non-negative input.
pub fn build(config: RedCnnConfig, seed: u64) -> Result<ExpertModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let last = format!("dec{}.weight", config.num_enc_layers);
    for (name, shape) in config.param_shapes() {
        let t = if name.ends_with(".bias") || name == last {
            Tensor4::zeros(shape)
        } else {
            // fan-in = input channels * k * k for both conv and deconv kernels
            let in_ch = if name.starts_with("enc") { shape[1] } else { shape[0] };
            let bound = (6.0 / (in_ch * shape[2] * shape[3]) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
            Tensor4::from_vec(shape, data)?
        };
        params.insert(name, t)?;
    }
    Ok(ExpertModel {
        config,
        params,
        cluster_id: ClusterSlot::Baseline,
        description: "Global baseline denoiser trained on every anatomy.".into(),
        fingerprint: TrainFingerprint {
            seed,
            manifest_hash: String::new(),
        },
    })
}

/// Records the network on `tape` and returns the (unclamped) output node.
pub fn forward<T: Scalar>(
    config: &RedCnnConfig,
    params: &ParamSet<T>,
    tape: &mut Tape<T>,
    input: Var,
) -> std::result::Result<Var, TensorError> {
    let n = config.num_enc_layers;
    let (s, p) = (config.stride, config.padding);
    let mut feats = Vec::with_capacity(n + 1);
    feats.push(input);
    let mut h = input;
    for i in 1..=n {
        let w = tape.param(params, &format!("enc{i}.weight"))?;
        let b = tape.param(params, &format!("enc{i}.bias"))?;
        let y = tape.conv2d(h, w, Some(b), s, p)?;
        h = tape.relu(y);
        feats.push(h);
    }
    for d in 1..=n {
        let w = tape.param(params, &format!("dec{d}.weight"))?;
        let b = tape.param(params, &format!("dec{d}.bias"))?;
        let mut y = tape.deconv2d(h, w, Some(b), s, p)?;
        for &(e, _) in config.shortcut_pairs.iter().filter(|&&(_, dd)| dd == d) {
            y = tape.add(y, feats[e])?;
        }
        h = tape.relu(y);
    }
    Ok(h)
}

/// Forward pass without recording gradients.
pub fn infer<T: Scalar>(
    config: &RedCnnConfig,
    params: &ParamSet<T>,
    input: &Tensor4<T>,
) -> std::result::Result<Tensor4<T>, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = forward(config, params, &mut tape, x)?;
    Ok(tape.value(out).clone())
}

const DENOISE_CHUNK: usize = 16;

impl ExpertModel {
    pub fn with_slot(mut self, slot: ClusterSlot, description: impl Into<String>) -> Self {
        self.cluster_id = slot;
        self.description = description.into();
        self
    }

    /// Denoises normalized patches `(n, 1, h, w)`; output is clamped to [0, 1].
    pub fn denoise(&self, patches: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let [n, c, h, w] = patches.shape();
        if c != 1 {
            return Err(ModelError::Validation(format!("expected 1 channel, got {c}")));
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(ModelError::Validation(format!(
                "patch {h}x{w} smaller than receptive minimum {min}"
            )));
        }
        if let Some(v) = patches.data().iter().find(|v| !(-0.01..=1.01).contains(*v)) {
            return Err(ModelError::Validation(format!(
                "value {v} outside normalized range [-0.01, 1.01]"
            )));
        }
        if n == 0 {
            return Ok(patches.clone());
        }
        let items = patches.unstack();
        let outs: Vec<_> = items
            .par_chunks(DENOISE_CHUNK)
            .map(|chunk| {
                let batch = Tensor4::stack(chunk)?;
                infer(&self.config, &self.params, &batch)
            })
            .collect::<std::result::Result<_, _>>()?;
        let mut out = Tensor4::stack(&outs)?;
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(cfg: RedCnnConfig) -> ExpertModel {
        let mut m = build(cfg, 1).unwrap();
        for e in m.params.entries_mut() {
            e.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn default_config_shortcuts_match_reference_layout() {
        let cfg = RedCnnConfig::default();
        assert_eq!(cfg.shortcut_pairs, vec![(0, 5), (2, 3), (4, 1)]);
        assert_eq!(RedCnnConfig::desk().shortcut_pairs, vec![(0, 3), (2, 1)]);
        cfg.validate().unwrap();
        RedCnnConfig::desk().validate().unwrap();
    }

    #[test]
    fn parameter_count_closed_form() {
        // conv1: 96*1*25 + 96; conv2-5 and deconv1-4: 96*96*25 + 96; deconv5: 96*25 + 1
        let cfg = RedCnnConfig::default();
        let layer1 = 96 * 25 + 96;
        assert_eq!(layer1, 2496);
        let inner = 96 * 96 * 25 + 96;
        let last = 96 * 25 + 1;
        assert_eq!(cfg.param_count(), layer1 + 8 * inner + last);
        let m = build(cfg, 0).unwrap();
        assert_eq!(m.params.num_weights(), 1_848_865);
        assert_eq!(m.params.get("enc1.weight").unwrap().weights.len() + 96, 2496);
    }

    #[test]
    fn desk_preset_preserves_patch_shape() {
        let m = build(RedCnnConfig::desk(), 3).unwrap();
        let x = Tensor4::filled([2, 1, 55, 55], 0.3f32);
        assert_eq!(m.denoise(&x).unwrap().shape(), [2, 1, 55, 55]);
    }

    #[test]
    fn fresh_network_is_identity_on_unit_range() {
        let m = build(RedCnnConfig::desk(), 8).unwrap();
        assert!(m
            .params
            .entries()
            .iter()
            .any(|e| e.weights.data().iter().any(|&v| v != 0.0)));
        let x = Tensor4::from_vec([1, 1, 55, 55], (0..55 * 55).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap();
        assert_eq!(m.denoise(&x).unwrap(), x);
    }

    #[test]
    fn zero_network_is_relu_of_input() {
        let m = zeroed(RedCnnConfig::desk());
        let x = Tensor4::from_vec(
            [1, 1, 55, 55],
            (0..55 * 55).map(|i| ((i * 37) % 101) as f32 / 100.0 - 0.3).collect(),
        )
        .unwrap();
        let y = infer(&m.config, &m.params, &x).unwrap();
        assert_eq!(y, crate::tensor::relu_forward(&x));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut even = RedCnnConfig::desk();
        even.kernel = 4;
        assert!(matches!(build(even, 0), Err(ModelError::Config(_))));
        let deep = RedCnnConfig::with_layers(14, 8);
        assert!(matches!(build(deep, 0), Err(ModelError::Config(_))));
        let mut cross = RedCnnConfig::desk();
        cross.shortcut_pairs.push((1, 1));
        assert!(matches!(build(cross, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn denoise_rejects_unnormalized_input() {
        let m = build(RedCnnConfig::desk(), 0).unwrap();
        let x = Tensor4::filled([1, 1, 55, 55], 1.5f32);
        assert!(matches!(m.denoise(&x), Err(ModelError::Validation(_))));
        let small = Tensor4::filled([1, 1, 11, 11], 0.5f32);
        assert!(matches!(m.denoise(&small), Err(ModelError::Validation(_))));
    }

    #[test]
    fn cluster_slot_serde() {
        assert_eq!(serde_json::to_string(&ClusterSlot::Baseline).unwrap(), "\"baseline\"");
        assert_eq!(serde_json::to_string(&ClusterSlot::Cluster(2)).unwrap(), "2");
        let s: ClusterSlot = serde_json::from_str("1").unwrap();
        assert_eq!(s, ClusterSlot::Cluster(1));
        assert!(ClusterSlot::cluster(3).is_err());
    }
}
