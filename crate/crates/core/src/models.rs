//! Desk-scale classifiers and the classification loss.
//!
//! Two architectures are available: an MLP over flattened pixels and a small
//! CNN (`conv3x3 -> relu -> pool -> conv3x3 -> relu -> pool -> dense -> relu -> dense`,
//! valid convolutions). Inputs arrive with pixels in `[0, 255]` and are
//! divided by 255 inside `logits`.
//!
//! # Checkpoint layout
//!
//! ```text
//! bytes 0..8     magic "MDRCKPT1"
//! bytes 8..12    u32 little-endian length L of the header
//! bytes 12..12+L UTF-8 JSON header {"version":1,"config":{..},"params":[{"name":..,"shape":[..]},..]}
//! rest           f32 little-endian values of each parameter, in header order, row-major
//! ```

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{Array, GradError, ParamSet, Scalar, Tensor};
use crate::rng::stream_seed;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    #[serde(rename = "smallcnn")]
    SmallCnn,
}

fn default_channels() -> Vec<usize> {
    vec![16, 32]
}

fn default_dense() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub classes: usize,
    /// Hidden layer widths for the MLP.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Output channels of the two conv blocks of the small CNN.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Width of the small CNN's hidden dense layer.
    #[serde(default = "default_dense")]
    pub dense: usize,
    /// Initialization seed; the command-line runner sets it to the run seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(input: [usize; 3], hidden: Vec<usize>, classes: usize, seed: u64) -> Self {
        Self { arch: ArchKind::Mlp, input, classes, hidden, channels: default_channels(), dense: default_dense(), seed }
    }

    pub fn small_cnn(input: [usize; 3], classes: usize, seed: u64) -> Self {
        Self {
            arch: ArchKind::SmallCnn,
            input,
            classes,
            hidden: Vec::new(),
            channels: default_channels(),
            dense: default_dense(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes < 2 {
            return Err(ModelError::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.input.contains(&0) {
            return Err(ModelError::Config(format!("input dims must be positive, got {:?}", self.input)));
        }
        match self.arch {
            ArchKind::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(ModelError::Config("hidden sizes must be positive".into()));
                }
            }
            ArchKind::SmallCnn => {
                if self.channels.len() != 2 || self.channels.contains(&0) || self.dense == 0 {
                    return Err(ModelError::Config("smallcnn needs two positive channel counts and a positive dense width".into()));
                }
                if self.cnn_side(self.input[1]) == 0 || self.cnn_side(self.input[2]) == 0 {
                    return Err(ModelError::Config(format!("input {:?} too small for smallcnn", self.input)));
                }
            }
        }
        Ok(())
    }

    /// Spatial size after both conv/pool blocks.
    fn cnn_side(&self, s: usize) -> usize {
        let a = s.saturating_sub(2) / 2;
        a.saturating_sub(2) / 2
    }

    /// `(name, shape, fan_in)` of every parameter in order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let [c, h, w] = self.input;
        let mut out = Vec::new();
        let dense = |out: &mut Vec<_>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o], i));
            out.push((format!("{name}.b"), vec![o], i));
        };
        match self.arch {
            ArchKind::Mlp => {
                let mut width = c * h * w;
                for (i, &hid) in self.hidden.iter().enumerate() {
                    dense(&mut out, &format!("fc{}", i + 1), width, hid);
                    width = hid;
                }
                dense(&mut out, &format!("fc{}", self.hidden.len() + 1), width, self.classes);
            }
            ArchKind::SmallCnn => {
                let (c1, c2) = (self.channels[0], self.channels[1]);
                out.push(("conv1.w".into(), vec![c1, c, 3, 3], c * 9));
                out.push(("conv1.b".into(), vec![c1], c * 9));
                out.push(("conv2.w".into(), vec![c2, c1, 3, 3], c1 * 9));
                out.push(("conv2.b".into(), vec![c2], c1 * 9));
                let flat = c2 * self.cnn_side(h) * self.cnn_side(w);
                dense(&mut out, "fc1", flat, self.dense);
                dense(&mut out, "fc2", self.dense, self.classes);
            }
        }
        out
    }

    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero
    /// biases. Values are drawn in f64 so every dtype gets the same numbers.
    pub fn init_params<T: Scalar>(&self) -> Result<ParamSet<T>, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, "init"));
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in self.layout() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![T::zero(); n]
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
            };
            params.push(name, Array::new(shape, data)?)?;
        }
        Ok(params)
    }
}

/// Anything that maps a `[B, C, H, W]` image batch to `[B, classes]` logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> [usize; 3];

    fn logits<T: Scalar>(&self, params: &[Tensor<T>], images: &Tensor<T>) -> Result<Tensor<T>, GradError>;
}

impl Classifier for ModelConfig {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    fn logits<T: Scalar>(&self, p: &[Tensor<T>], images: &Tensor<T>) -> Result<Tensor<T>, GradError> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(GradError::Shape(format!("batch {s:?} for model input {:?}", self.input)));
        }
        let x = images.scale(T::lit(1.0 / 255.0))?;
        match self.arch {
            ArchKind::Mlp => {
                let mut h = x.flatten()?;
                let layers = p.len() / 2;
                for i in 0..layers {
                    h = h.matmul(&p[2 * i])?.bias_add(&p[2 * i + 1])?;
                    if i + 1 < layers {
                        h = h.relu()?;
                    }
                }
                Ok(h)
            }
            ArchKind::SmallCnn => {
                // pooling commutes exactly with a per-channel bias and with
                // relu, so both run on the pooled (4x smaller) maps
                let h = x.conv2d(&p[0], 0)?.maxpool2x2()?.bias_add(&p[1])?.relu()?;
                let h = h.conv2d(&p[2], 0)?.maxpool2x2()?.bias_add(&p[3])?.relu()?;
                let h = h.flatten()?.matmul(&p[4])?.bias_add(&p[5])?.relu()?;
                h.matmul(&p[6])?.bias_add(&p[7])
            }
        }
    }
}

/// Mean cross-entropy of `logits` against class indices.
pub fn task_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>, GradError> {
    logits.softmax_cross_entropy(labels)
}

/// A configured classifier with its f32 training parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

pub fn build_model(config: ModelConfig) -> Result<Model, ModelError> {
    let params = config.init_params()?;
    Ok(Model { config, params })
}

impl Model {
    /// Forward pass without a tape.
    pub fn forward(&self, images: &Array<f32>) -> Result<Array<f32>, GradError> {
        let x = Tensor::constant(images.clone());
        Ok(self.config.logits(&self.params.constants(), &x)?.value().clone())
    }
}

const MAGIC: &[u8; 8] = b"MDRCKPT1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: ModelConfig,
    params: Vec<CkptEntry>,
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Model, mut w: impl Write) -> Result<(), ModelError> {
    let header = CkptHeader {
        version: 1,
        config: model.config.clone(),
        params: model
            .params
            .names()
            .iter()
            .zip(model.params.values())
            .map(|(n, v)| CkptEntry { name: n.clone(), shape: v.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in model.params.values() {
        for x in v.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(mut r: impl Read) -> Result<Model, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CkptHeader = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.version != 1 {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut params = ParamSet::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.push(e.name, Array::new(e.shape, data)?)?;
    }
    let expected = header.config.init_params::<f32>()?;
    if expected.names() != params.names() {
        return Err(ModelError::Checkpoint("parameter list does not match config".into()));
    }
    Ok(Model { config: header.config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{grad, Tape};

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::mlp([1, 28, 28], vec![128], 10, 7);
        let a = build_model(cfg.clone()).unwrap();
        let b = build_model(cfg).unwrap();
        assert_eq!(a.params, b.params);
        let bytes = |m: &Model| m.params.flatten().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.params.names(), &["fc1.w", "fc1.b", "fc2.w", "fc2.b"]);
    }

    #[test]
    fn smallcnn_logit_shape() {
        let m = build_model(ModelConfig::small_cnn([3, 32, 32], 10, 1)).unwrap();
        let out = m.forward(&Array::full([4, 3, 32, 32], 100.0)).unwrap();
        assert_eq!(out.shape(), &[4, 10]);
        assert!(out.all_finite());
    }

    #[test]
    fn zero_input_gives_uniform_loss() {
        let m = build_model(ModelConfig::small_cnn([3, 28, 28], 10, 3)).unwrap();
        let logits = m.forward(&Array::zeros([2, 3, 28, 28])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let l = task_loss(&Tensor::constant(logits), &[3, 9]).unwrap().item();
        assert!((l - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(build_model(ModelConfig::mlp([1, 4, 4], vec![8], 1, 0)).is_err());
        assert!(build_model(ModelConfig::mlp([0, 4, 4], vec![8], 3, 0)).is_err());
        assert!(build_model(ModelConfig::small_cnn([3, 5, 5], 3, 0)).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = build_model(ModelConfig::small_cnn([3, 28, 28], 10, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 64 * 3 * 28 * 28;
        let big = Array::new([64, 3, 28, 28], (0..n).map(|_| rng.random_range(0.0f32..255.0)).collect()).unwrap();
        let out = m.forward(&big).unwrap();
        let row = 17;
        let one = Array::new([1, 3, 28, 28], big.data()[row * 2352..(row + 1) * 2352].to_vec()).unwrap();
        let single = m.forward(&one).unwrap();
        assert_eq!(single.data(), &out.data()[row * 10..(row + 1) * 10]);

        // permuting rows permutes logits
        let mut swapped = big.data().to_vec();
        let (a, b) = swapped.split_at_mut(2352);
        a.swap_with_slice(&mut b[..2352]);
        let out2 = m.forward(&Array::new([64, 3, 28, 28], swapped).unwrap()).unwrap();
        assert_eq!(&out2.data()[..10], &out.data()[10..20]);
        assert_eq!(&out2.data()[10..20], &out.data()[..10]);
    }

    #[test]
    fn loss_values() {
        let z = Tensor::constant(Array::<f64>::zeros([3, 10]));
        assert!((task_loss(&z, &[0, 4, 9]).unwrap().item() - std::f64::consts::LN_10).abs() < 1e-12);
        let z = Tensor::constant(Array::<f64>::from_f64([1, 2], &[1000.0, 0.0]).unwrap());
        assert!(task_loss(&z, &[0]).unwrap().item().abs() < 1e-12);
        assert!(task_loss(&z, &[2]).is_err());
    }

    #[test]
    fn loss_matches_high_precision_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, c) = (8, 5);
        let z: Vec<f64> = (0..b * c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        // reference: direct log of softmax probabilities, summed with Kahan compensation
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (row, &y) in z.chunks(c).zip(&labels) {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let term = -(row[y].exp() / denom).ln() - comp;
            let t = sum + term;
            comp = (t - sum) - term;
            sum = t;
        }
        let want = sum / b as f64;
        let zt = Tensor::constant(Array::new([b, c], z.iter().map(|&v| v as f32).collect()).unwrap());
        let got = task_loss(&zt, &labels).unwrap().item() as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn loss_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let vals = [0.5, -1.0, 2.0, 0.0, 0.0, 1.0];
        let z = tape.leaf(Array::<f64>::from_f64([2, 3], &vals).unwrap());
        let l = task_loss(&z, &[2, 0]).unwrap();
        let g = grad(&l, &[z], false).unwrap();
        for (r, y) in [(0usize, 2usize), (1, 0)] {
            let row = &vals[r * 3..r * 3 + 3];
            let den: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            for j in 0..3 {
                let want = (row[j].exp() / den - if j == y { 1.0 } else { 0.0 }) / 2.0;
                assert!((g[0].value().data()[r * 3 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_model(ModelConfig::small_cnn([3, 28, 28], 10, 2)).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(load_checkpoint(&bad[..]).is_err());
        assert!(load_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
