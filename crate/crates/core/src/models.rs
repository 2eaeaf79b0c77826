//! Generator, discriminator and classifier networks, and the versioned
//! snapshot container that persists them.
//!
//! All three are conditional-capable MLPs. The generator receives labels as
//! one-hot columns appended to its latent; the discriminator conditions
//! through a projection head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{argument, shape, Error, Result};
use crate::nn::{append_one_hot, Activation, Layer, Mlp, Trace};
use crate::rng::stage_rng;

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"GUNL1";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Everything needed to rebuild the three networks from a parameter payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub conditional: bool,
    /// `[C, H, W]` of one sample; vector data uses `[1, 1, d]`.
    pub data_shape: [usize; 3],
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl ArchConfig {
    /// 28x28 digits, about 0.55M generator and 0.54M discriminator parameters.
    pub fn desk_digits() -> Self {
        Self {
            latent_dim: 32,
            num_classes: 10,
            conditional: true,
            data_shape: [1, 28, 28],
            generator_hidden: vec![256, 512],
            discriminator_hidden: vec![512, 256],
            classifier_hidden: vec![256, 64],
            leaky_slope: 0.2,
        }
    }

    /// Two-layer perceptrons for 2-D ring data.
    pub fn ring(num_classes: usize) -> Self {
        Self {
            latent_dim: 4,
            num_classes,
            conditional: true,
            data_shape: [1, 1, 2],
            generator_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            classifier_hidden: vec![32, 16],
            leaky_slope: 0.2,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.data_shape.iter().product()
    }

    fn label_width(&self) -> usize {
        if self.conditional {
            self.num_classes
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.data_shape.contains(&0) {
            return bad("data_shape entries must be positive");
        }
        if self.generator_hidden.contains(&0)
            || self.discriminator_hidden.contains(&0)
            || self.classifier_hidden.contains(&0)
        {
            return bad("hidden widths must be positive");
        }
        if self.classifier_hidden.is_empty() {
            return bad("the classifier needs a hidden feature layer");
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in [0, 1)");
        }
        Ok(())
    }

    fn chain(&self, input: usize, hidden: &[usize], output: usize, hidden_act: Activation, out_act: Activation) -> Vec<Layer> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            layers.push(Layer::new(width, h, hidden_act));
            width = h;
        }
        layers.push(Layer::new(width, output, out_act));
        layers
    }

    pub fn generator_layers(&self) -> Vec<Layer> {
        self.chain(
            self.latent_dim + self.label_width(),
            &self.generator_hidden,
            self.data_dim(),
            Activation::LeakyRelu(self.leaky_slope),
            Activation::Tanh,
        )
    }

    pub fn discriminator_layers(&self) -> Vec<Layer> {
        self.chain(
            self.data_dim(),
            &self.discriminator_hidden,
            1 + self.label_width(),
            Activation::LeakyRelu(self.leaky_slope),
            Activation::Identity,
        )
    }

    pub fn classifier_layers(&self) -> Vec<Layer> {
        self.chain(
            self.data_dim(),
            &self.classifier_hidden,
            self.num_classes,
            Activation::Relu,
            Activation::Identity,
        )
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape(format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(argument(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Maps latent codes (and labels) to samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    arch: ArchConfig,
    net: Mlp,
}

impl GeneratorNet {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            net: Mlp::new(arch.generator_layers())?,
        })
    }

    pub fn from_params(arch: &ArchConfig, params: Vec<f64>) -> Result<Self> {
        let mut g = Self::new(arch)?;
        g.net.set_params(params)?;
        Ok(g)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.data_dim()
    }

    pub fn is_conditional(&self) -> bool {
        self.arch.conditional
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Network input for latents `z` (`n x latent_dim`) and labels.
    pub fn input(&self, z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(shape(format!(
                "latent codes have {} entries, generator expects {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        if self.arch.conditional {
            check_labels(labels, z.nrows(), self.arch.num_classes)?;
            Ok(append_one_hot(z, labels, self.arch.num_classes))
        } else {
            Ok(z.to_owned())
        }
    }

    pub fn forward(&self, z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
        self.net.forward(self.input(z, labels)?.view())
    }

    pub fn trace(&self, z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Trace> {
        self.net.forward_trace(self.input(z, labels)?.view())
    }

    /// Splits an input gradient from [`Mlp::backward`] back to the latent part.
    pub fn latent_grad(&self, input_grad: Array2<f64>) -> Array2<f64> {
        input_grad
            .slice_move(ndarray::s![.., ..self.latent_dim()])
    }
}

/// Scores samples with an unbounded real value; `sigmoid(score)` is the
/// probability the sample is real.
///
/// Conditional discriminators use a projection head: the network emits
/// `1 + K` outputs and the score for label `y` is `o[0] + o[1 + y]`, a shared
/// linear head plus a per-class one on the last hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    arch: ArchConfig,
    net: Mlp,
}

/// Forward record of a discriminator pass, for back-propagation.
#[derive(Clone, Debug)]
pub struct DiscTrace {
    trace: Trace,
    labels: Vec<usize>,
}

impl DiscTrace {
    pub fn scores(&self) -> Array1<f64> {
        let out = self.trace.output();
        if out.ncols() == 1 {
            return out.column(0).to_owned();
        }
        Array1::from_iter(out.rows().into_iter().zip(&self.labels).map(|(row, &y)| row[0] + row[1 + y]))
    }
}

impl DiscriminatorNet {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            net: Mlp::new(arch.discriminator_layers())?,
        })
    }

    pub fn from_params(arch: &ArchConfig, params: Vec<f64>) -> Result<Self> {
        let mut d = Self::new(arch)?;
        d.net.set_params(params)?;
        Ok(d)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.data_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn check(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(shape(format!(
                "samples have {} values, discriminator expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if self.arch.conditional {
            check_labels(labels, x.nrows(), self.arch.num_classes)?;
        }
        Ok(())
    }

    /// Raw scores, one per row of `x`.
    pub fn scores(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array1<f64>> {
        Ok(self.trace(x, labels)?.scores())
    }

    pub fn trace(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<DiscTrace> {
        self.check(x, labels)?;
        Ok(DiscTrace {
            trace: self.net.forward_trace(x)?,
            labels: if self.arch.conditional { labels.to_vec() } else { Vec::new() },
        })
    }

    /// Back-propagates `score_grad` (d loss / d score, one per row). Adds the
    /// parameter gradient into `param_grad` when given and returns the
    /// gradient with respect to the samples.
    pub fn backward(&self, trace: &DiscTrace, score_grad: ArrayView1<'_, f64>, param_grad: Option<&mut [f64]>) -> Result<Array2<f64>> {
        let out = trace.trace.output();
        if score_grad.len() != out.nrows() {
            return Err(shape(format!("{} score gradients for {} rows", score_grad.len(), out.nrows())));
        }
        let mut grad = Array2::zeros(out.raw_dim());
        for (i, &g) in score_grad.iter().enumerate() {
            grad[[i, 0]] = g;
            if out.ncols() > 1 {
                grad[[i, 1 + trace.labels[i]]] = g;
            }
        }
        self.net.backward(&trace.trace, grad.view(), param_grad)
    }
}

/// Maps a batch of samples to feature vectors, and pulls feature-space
/// gradients back to sample space.
pub trait FeatureMap {
    fn feature_dim(&self) -> usize;
    fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    fn pullback(&self, x: ArrayView2<'_, f64>, grad_features: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Raw coordinates as features.
#[derive(Clone, Copy, Debug)]
pub struct IdentityFeatures {
    pub dim: usize,
}

impl FeatureMap for IdentityFeatures {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(x.to_owned())
    }

    fn pullback(&self, _x: ArrayView2<'_, f64>, grad_features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(grad_features.to_owned())
    }
}

pub trait LabelPredictor {
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>>;
}

/// Downstream classifier. Its last hidden layer doubles as the feature
/// extractor for Fréchet distances and the perceptual loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    arch: ArchConfig,
    net: Mlp,
    feature_net: Mlp,
}

impl ClassifierNet {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let net = Mlp::new(arch.classifier_layers())?;
        let feature_net = net.prefix(arch.classifier_hidden.len())?;
        Ok(Self {
            arch: arch.clone(),
            net,
            feature_net,
        })
    }

    pub fn from_params(arch: &ArchConfig, params: Vec<f64>) -> Result<Self> {
        let mut c = Self::new(arch)?;
        c.set_params(params)?;
        Ok(c)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Index of the layer whose activations are the features.
    pub fn feature_layer(&self) -> usize {
        self.arch.classifier_hidden.len() - 1
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        self.net.set_params(params)?;
        self.feature_net = self.net.prefix(self.arch.classifier_hidden.len())?;
        Ok(())
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.net.forward(x)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut logits = self.logits(x)?;
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Ok(logits)
    }
}

impl LabelPredictor for ClassifierNet {
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

impl FeatureMap for ClassifierNet {
    fn feature_dim(&self) -> usize {
        self.arch.classifier_hidden[self.feature_layer()]
    }

    fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.feature_net.forward(x)
    }

    fn pullback(&self, x: ArrayView2<'_, f64>, grad_features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let trace = self.feature_net.forward_trace(x)?;
        self.feature_net.backward(&trace, grad_features, None)
    }
}

/// Fresh generator and discriminator, deterministic under `seed`.
pub fn init_models(arch: &ArchConfig, seed: u64) -> Result<(GeneratorNet, DiscriminatorNet)> {
    let mut g = GeneratorNet::new(arch)?;
    let mut d = DiscriminatorNet::new(arch)?;
    g.net.init(&mut stage_rng(seed, "init/generator"));
    d.net.init(&mut stage_rng(seed, "init/discriminator"));
    Ok((g, d))
}

pub fn init_classifier(arch: &ArchConfig, seed: u64) -> Result<ClassifierNet> {
    let mut c = ClassifierNet::new(arch)?;
    let mut net = c.net.clone();
    net.init(&mut stage_rng(seed, "init/classifier"));
    c.set_params(net.params().to_vec())?;
    Ok(c)
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    format_version: u32,
    arch: ArchConfig,
    step: u64,
    seed: u64,
    blocks: Vec<BlockHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    len: usize,
}

/// Frozen parameters of any subset of {generator, discriminator, classifier}.
///
/// On disk: the magic `GUNL1`, a little-endian `u32` header length, a JSON
/// header (version, architecture, step, seed, block table), a little-endian
/// `u64` payload length, then the `f64` parameters of each block in order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub arch: ArchConfig,
    pub step: u64,
    pub seed: u64,
    pub generator: Option<Vec<f64>>,
    pub discriminator: Option<Vec<f64>>,
    pub classifier: Option<Vec<f64>>,
}

impl ModelSnapshot {
    pub fn from_gan(g: &GeneratorNet, d: &DiscriminatorNet, step: u64, seed: u64) -> Self {
        Self {
            arch: g.arch.clone(),
            step,
            seed,
            generator: Some(g.net.params().to_vec()),
            discriminator: Some(d.net.params().to_vec()),
            classifier: None,
        }
    }

    pub fn from_classifier(c: &ClassifierNet, step: u64, seed: u64) -> Self {
        Self {
            arch: c.arch.clone(),
            step,
            seed,
            generator: None,
            discriminator: None,
            classifier: Some(c.params().to_vec()),
        }
    }

    pub fn generator(&self) -> Result<GeneratorNet> {
        let params = self
            .generator
            .clone()
            .ok_or_else(|| argument("snapshot holds no generator"))?;
        GeneratorNet::from_params(&self.arch, params)
    }

    pub fn discriminator(&self) -> Result<DiscriminatorNet> {
        let params = self
            .discriminator
            .clone()
            .ok_or_else(|| argument("snapshot holds no discriminator"))?;
        DiscriminatorNet::from_params(&self.arch, params)
    }

    pub fn classifier(&self) -> Result<ClassifierNet> {
        let params = self
            .classifier
            .clone()
            .ok_or_else(|| argument("snapshot holds no classifier"))?;
        ClassifierNet::from_params(&self.arch, params)
    }

    fn blocks(&self) -> Vec<(&'static str, &Vec<f64>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.generator {
            out.push(("generator", p));
        }
        if let Some(p) = &self.discriminator {
            out.push(("discriminator", p));
        }
        if let Some(p) = &self.classifier {
            out.push(("classifier", p));
        }
        out
    }

    /// Hex SHA-256 over block names and parameter bytes.
    pub fn parameter_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, params) in self.blocks() {
            hasher.update(name.as_bytes());
            for p in params {
                hasher.update(p.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = self.blocks();
        let header = SnapshotHeader {
            format_version: SNAPSHOT_VERSION,
            arch: self.arch.clone(),
            step: self.step,
            seed: self.seed,
            blocks: blocks
                .iter()
                .map(|(name, p)| BlockHeader {
                    name: name.to_string(),
                    len: p.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload_len: usize = blocks.iter().map(|(_, p)| p.len() * 8).sum();
        let mut out = Vec::with_capacity(5 + 4 + header.len() + 8 + payload_len);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload_len as u64).to_le_bytes());
        for (_, params) in blocks {
            for p in params {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a snapshot file (bad magic)".into()));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let header_end = 9 + header_len;
        let header_bytes = bytes
            .get(9..header_end)
            .ok_or_else(|| Error::Format("snapshot header is truncated".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Format(format!("snapshot header is not valid JSON: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("snapshot header lacks format_version".into()))?;
        if version != SNAPSHOT_VERSION as u64 {
            return Err(Error::Migration {
                found: version as u32,
                expected: SNAPSHOT_VERSION,
            });
        }
        let header: SnapshotHeader = serde_json::from_value(raw)
            .map_err(|e| Error::Format(format!("malformed snapshot header: {e}")))?;
        let len_bytes = bytes
            .get(header_end..header_end + 8)
            .ok_or_else(|| Error::Corruption("snapshot payload length missing".into()))?;
        let payload_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        let payload = &bytes[header_end + 8..];
        let declared: usize = header.blocks.iter().map(|b| b.len * 8).sum();
        if payload.len() != payload_len || payload_len != declared {
            return Err(Error::Corruption(format!(
                "snapshot payload holds {} bytes, header declares {payload_len} (blocks {declared})",
                payload.len()
            )));
        }
        let mut snap = ModelSnapshot {
            arch: header.arch,
            step: header.step,
            seed: header.seed,
            generator: None,
            discriminator: None,
            classifier: None,
        };
        let mut at = 0;
        for block in header.blocks {
            let params: Vec<f64> = payload[at..at + block.len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += block.len * 8;
            let expected = match block.name.as_str() {
                "generator" => Mlp::param_count_of(&snap.arch.generator_layers()),
                "discriminator" => Mlp::param_count_of(&snap.arch.discriminator_layers()),
                "classifier" => Mlp::param_count_of(&snap.arch.classifier_layers()),
                other => return Err(Error::Format(format!("unknown snapshot block `{other}`"))),
            };
            if params.len() != expected {
                return Err(shape(format!(
                    "block `{}` holds {} parameters, architecture needs {expected}",
                    block.name,
                    params.len()
                )));
            }
            match block.name.as_str() {
                "generator" => snap.generator = Some(params),
                "discriminator" => snap.discriminator = Some(params),
                _ => snap.classifier = Some(params),
            }
        }
        Ok(snap)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
