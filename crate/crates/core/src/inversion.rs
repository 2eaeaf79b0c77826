//! Optimization-based GAN inversion: find latent codes that make a frozen
//! generator reproduce given images.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{argument, shape, Error, Result};
use crate::models::{FeatureMap, GeneratorNet};
use crate::nn::{Adam, AdamConfig};
use crate::rng::{derive_seed, normal_matrix, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Start at `mean_latent` (the prior mean when unset).
    MeanLatent,
    /// Per-image draw from the prior, seeded by the image id.
    Random,
    /// Caller supplies the starting codes.
    Provided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub init: InitPolicy,
    pub pixel_weight: f64,
    pub perceptual_weight: f64,
    pub seed: u64,
    pub mean_latent: Option<Vec<f64>>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            init: InitPolicy::MeanLatent,
            pixel_weight: 1.0,
            perceptual_weight: 0.0,
            seed: 0,
            mean_latent: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_weight >= 0.0 && self.perceptual_weight >= 0.0) {
            return Err(Error::Config("inversion loss weights must be non-negative".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("inversion learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    /// Dataset indices of the inverted images, one per row of `latent_codes`.
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub latent_codes: Array2<f64>,
    /// Per-image pixel MSE of the returned codes.
    pub final_errors: Vec<f64>,
    pub iterations_used: usize,
}

/// Images to invert. `ids` seed per-image randomness and label the results.
pub struct InversionRequest<'a> {
    pub images: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub ids: &'a [usize],
    pub initial: Option<ArrayView2<'a, f64>>,
}

fn row_mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Vec<f64> {
    let d = a.ncols() as f64;
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / d)
        .collect()
}

fn initial_codes(g: &GeneratorNet, req: &InversionRequest<'_>, cfg: &InversionConfig) -> Result<Array2<f64>> {
    let (m, d) = (req.ids.len(), g.latent_dim());
    match cfg.init {
        InitPolicy::MeanLatent => {
            let mean = cfg.mean_latent.clone().unwrap_or_else(|| vec![0.0; d]);
            if mean.len() != d {
                return Err(shape(format!("mean latent has {} entries, generator expects {d}", mean.len())));
            }
            Ok(Array2::from_shape_fn((m, d), |(_, j)| mean[j]))
        }
        InitPolicy::Random => {
            let mut z = Array2::zeros((m, d));
            for (mut row, &id) in z.rows_mut().into_iter().zip(req.ids) {
                let mut rng = seeded(derive_seed(cfg.seed, &format!("inversion/{id}")));
                row.assign(&normal_matrix(&mut rng, 1, d).row(0));
            }
            Ok(z)
        }
        InitPolicy::Provided => {
            let init = req.initial.ok_or_else(|| argument("init policy 'provided' needs initial codes"))?;
            if init.dim() != (m, d) {
                return Err(shape(format!("initial codes are {:?}, expected ({m}, {d})", init.dim())));
            }
            Ok(init.to_owned())
        }
    }
}

/// Per-image objective values and the gradient with respect to `z`.
fn objective(
    g: &GeneratorNet,
    z: ArrayView2<'_, f64>,
    req: &InversionRequest<'_>,
    target_features: Option<&Array2<f64>>,
    extractor: Option<&dyn FeatureMap>,
    cfg: &InversionConfig,
) -> Result<(Vec<f64>, Vec<f64>, Array2<f64>)> {
    let trace = g.trace(z, req.labels)?;
    let out = trace.output();
    let pixel = row_mse(out.view(), req.images);
    let dim = out.ncols() as f64;
    let mut grad_out = (out - &req.images) * (2.0 * cfg.pixel_weight / dim);
    let mut loss: Vec<f64> = pixel.iter().map(|e| cfg.pixel_weight * e).collect();
    if let (Some(fx), Some(ext)) = (target_features, extractor) {
        let f = ext.features(out.view())?;
        let per = row_mse(f.view(), fx.view());
        for (l, p) in loss.iter_mut().zip(&per) {
            *l += cfg.perceptual_weight * p;
        }
        let grad_f = (&f - fx) * (2.0 * cfg.perceptual_weight / f.ncols() as f64);
        grad_out += &ext.pullback(out.view(), grad_f.view())?;
    }
    let input_grad = g.mlp().backward(&trace, grad_out.view(), None)?;
    Ok((loss, pixel, g.latent_grad(input_grad)))
}

/// Gradient descent (Adam) on each latent code so that `G(z)` matches its
/// image. The per-image losses are summed, so codes evolve independently.
/// Returns the best code seen for each image.
pub fn invert(
    g: &GeneratorNet,
    req: &InversionRequest<'_>,
    cfg: &InversionConfig,
    extractor: Option<&dyn FeatureMap>,
) -> Result<InversionResult> {
    cfg.validate()?;
    let m = req.ids.len();
    if req.images.nrows() != m || req.labels.len() != m {
        return Err(shape("images, labels and ids must have one entry per image"));
    }
    if req.images.ncols() != g.output_dim() {
        return Err(shape(format!(
            "images have {} values, generator produces {}",
            req.images.ncols(),
            g.output_dim()
        )));
    }
    if cfg.perceptual_weight > 0.0 && extractor.is_none() {
        return Err(Error::Config("perceptual inversion term needs a feature extractor".into()));
    }
    let target_features = match extractor {
        Some(ext) if cfg.perceptual_weight > 0.0 => Some(ext.features(req.images)?),
        _ => None,
    };

    let mut z = initial_codes(g, req, cfg)?;
    let mut best = z.clone();
    let mut best_loss = vec![f64::INFINITY; m];
    let mut best_pixel = vec![f64::INFINITY; m];
    let mut opt = Adam::new(z.len(), cfg.learning_rate, AdamConfig { beta1: 0.9, ..AdamConfig::default() });

    for step in 0..=cfg.steps {
        let (loss, pixel, grad) = objective(g, z.view(), req, target_features.as_ref(), extractor, cfg)?;
        for i in 0..m {
            if !loss[i].is_finite() {
                return Err(Error::Divergence(format!("inversion loss of image {} became {} at step {step}", req.ids[i], loss[i])));
            }
            if loss[i] < best_loss[i] {
                best_loss[i] = loss[i];
                best_pixel[i] = pixel[i];
                best.row_mut(i).assign(&z.row(i));
            }
        }
        if step == cfg.steps {
            break;
        }
        let grad = grad.as_standard_layout().into_owned();
        let slice = z.as_slice_mut().expect("latent codes are contiguous");
        opt.step(slice, grad.as_slice().expect("contiguous gradient"));
    }

    Ok(InversionResult {
        ids: req.ids.to_vec(),
        labels: req.labels.to_vec(),
        latent_codes: best,
        final_errors: best_pixel,
        iterations_used: cfg.steps,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    ids: Vec<usize>,
    labels: Vec<usize>,
    final_errors: Vec<f64>,
    iterations_used: usize,
    rows: usize,
    cols: usize,
    config_hash: String,
}

/// Writes `<stem>.bin` (little-endian f64 codes) and `<stem>.json`.
pub fn save_inversion(result: &InversionResult, stem: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let stem = stem.as_ref();
    write_matrix(&stem.with_extension("bin"), result.latent_codes.view())?;
    let (rows, cols) = result.latent_codes.dim();
    let sidecar = Sidecar {
        ids: result.ids.clone(),
        labels: result.labels.clone(),
        final_errors: result.final_errors.clone(),
        iterations_used: result.iterations_used,
        rows,
        cols,
        config_hash: config_hash.to_string(),
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads a result written by [`save_inversion`], returning it with its config hash.
pub fn load_inversion(stem: impl AsRef<Path>) -> Result<(InversionResult, String)> {
    let stem = stem.as_ref();
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    let codes = read_matrix(&stem.with_extension("bin"), sidecar.rows, sidecar.cols)?;
    if sidecar.ids.len() != sidecar.rows || sidecar.labels.len() != sidecar.rows || sidecar.final_errors.len() != sidecar.rows {
        return Err(Error::Corruption("inversion sidecar does not match the code matrix".into()));
    }
    Ok((
        InversionResult {
            ids: sidecar.ids,
            labels: sidecar.labels,
            latent_codes: codes,
            final_errors: sidecar.final_errors,
            iterations_used: sidecar.iterations_used,
        },
        sidecar.config_hash,
    ))
}

pub(crate) fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Corruption(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            rows * cols * 8
        )));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}
