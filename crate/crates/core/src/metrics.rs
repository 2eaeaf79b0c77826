//! Evaluation: discriminator score AUCs, Fréchet distances in a feature
//! space, downstream accuracy and the LOGAN membership audit.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{argument, shape, Error, Result};
use crate::models::{ClassifierNet, DiscriminatorNet, FeatureMap, GeneratorNet, LabelPredictor};
use crate::rng::{normal_matrix, Rng};

/// Rows scored per forward pass.
const SCORE_CHUNK: usize = 512;

/// Raw discriminator scores of `x`, aligned with its rows.
pub fn discriminator_scores(d: &DiscriminatorNet, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array1<f64>> {
    if x.nrows() == 0 {
        return Err(argument("cannot score an empty slice"));
    }
    if labels.len() != x.nrows() {
        return Err(shape(format!("{} samples but {} labels", x.nrows(), labels.len())));
    }
    let mut out = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(SCORE_CHUNK) {
        let end = (start + SCORE_CHUNK).min(x.nrows());
        out.extend(d.scores(x.slice(ndarray::s![start..end, ..]), &labels[start..end])?);
    }
    Ok(Array1::from(out))
}

/// Scores of the given dataset rows.
pub fn dataset_scores(d: &DiscriminatorNet, data: &LabeledDataset, indices: &[usize]) -> Result<Array1<f64>> {
    let (x, y) = data.gather(indices)?;
    discriminator_scores(d, x.view(), &y)
}

/// `P(a > b)` over all pairs, ties counting one half.
pub fn auc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(argument("auc needs two non-empty score sets"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(argument("auc scores must not be NaN"));
    }
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    // Each `a` gets credit for every smaller `b` plus half of every tied `b`.
    let mut wins = 0.0;
    let mut below_b = 0usize;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        let (mut group_a, mut group_b) = (0usize, 0usize);
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                group_a += 1;
            } else {
                group_b += 1;
            }
            j += 1;
        }
        wins += group_a as f64 * (below_b as f64 + 0.5 * group_b as f64);
        below_b += group_b;
        i = j;
    }
    Ok(wins / (a.len() as f64 * b.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Empirical mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(argument(format!("need at least 2 samples for a covariance, got {n}")));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let centered = &features - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let mut covariance = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                // Exact symmetry regardless of summation order.
                covariance.push(if j < i { cov[[j, i]] } else { cov[[i, j]] });
            }
        }
        Ok(Self { mean: mean.to_vec(), covariance, count: n })
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Feature statistics of `x` under `extractor`.
pub fn gaussian_feature_stats(extractor: &dyn FeatureMap, x: ArrayView2<'_, f64>) -> Result<GaussianStats> {
    if x.nrows() < 2 {
        return Err(argument(format!("need at least 2 samples for feature statistics, got {}", x.nrows())));
    }
    let mut parts = Vec::new();
    for start in (0..x.nrows()).step_by(SCORE_CHUNK) {
        let end = (start + SCORE_CHUNK).min(x.nrows());
        parts.push(extractor.features(x.slice(ndarray::s![start..end, ..]))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    GaussianStats::from_features(features.view())
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is computed as the trace of the square root
/// of the symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`, which has the same
/// eigenvalues. Negative eigenvalues from round-off are clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(argument(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let root_a = psd_sqrt(&sa);
    let mut inner = &root_a * &sb * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    // Identical statistics can land a hair below zero.
    Ok(if value.abs() < 1e-9 * (1.0 + sa.trace() + sb.trace()) { 0.0 } else { value.max(0.0) })
}

/// `G(z, labels)` evaluated in chunks.
pub fn generate_batched(g: &GeneratorNet, z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Array2<f64>> {
    if z.nrows() == 0 {
        return Ok(Array2::zeros((0, g.output_dim())));
    }
    let mut parts = Vec::new();
    for start in (0..z.nrows()).step_by(SCORE_CHUNK) {
        let end = (start + SCORE_CHUNK).min(z.nrows());
        parts.push(g.forward(z.slice(ndarray::s![start..end, ..]), &labels[start..end])?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Generates `per_class` samples for each class in `classes`.
pub fn generate_per_class(g: &GeneratorNet, classes: &[usize], per_class: usize, rng: &mut Rng) -> Result<(Array2<f64>, Vec<usize>)> {
    let labels: Vec<usize> = classes.iter().flat_map(|&c| std::iter::repeat_n(c, per_class)).collect();
    let z = normal_matrix(rng, labels.len(), g.latent_dim());
    Ok((generate_batched(g, z.view(), &labels)?, labels))
}

/// Fraction of conditional generations the predictor assigns to their
/// conditioning label.
pub fn downstream_accuracy(
    predictor: &dyn LabelPredictor,
    g: &GeneratorNet,
    classes: &[usize],
    per_class: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if !g.is_conditional() {
        return Err(Error::Config("downstream accuracy needs a conditional generator".into()));
    }
    if classes.is_empty() || per_class == 0 {
        return Err(argument("downstream accuracy needs at least one class and one sample"));
    }
    let (x, labels) = generate_per_class(g, classes, per_class, rng)?;
    let predicted = predictor.predict(x.view())?;
    let hits = predicted.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean classifier probability of the conditioning label `class` on
/// generations for that label.
pub fn label_confidence(clf: &ClassifierNet, g: &GeneratorNet, class: usize, samples: usize, rng: &mut Rng) -> Result<f64> {
    let (x, _) = generate_per_class(g, &[class], samples, rng)?;
    let p = clf.probabilities(x.view())?;
    Ok(p.column(class).mean().unwrap_or(0.0))
}

/// LOGAN audit: `auc(scores on D_u, scores on D_t)`.
pub fn logan_audit(d: &DiscriminatorNet, unlearn: (ArrayView2<'_, f64>, &[usize]), test: (ArrayView2<'_, f64>, &[usize])) -> Result<f64> {
    let su = discriminator_scores(d, unlearn.0, unlearn.1)?;
    let st = discriminator_scores(d, test.0, test.1)?;
    auc(su.as_slice().unwrap(), st.as_slice().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    During,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phase: Phase,
    pub iteration: usize,
    pub auc_lu: f64,
    pub fid_l: f64,
    pub fid_u: Option<f64>,
    pub acc: Option<f64>,
    pub auc_ut: f64,
    /// Mean classifier confidence in the unlearned label on its generations
    /// (class mode).
    pub confidence_u: Option<f64>,
    pub mean_score_l: f64,
    pub mean_score_u: f64,
    pub mean_score_t: f64,
    pub wall_time_s: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn brute_auc(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
            }
        }
        s / (a.len() * b.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.1, 0.3], &[0.1, 0.3, 0.3]).unwrap(), 0.5);
        assert_eq!(auc(&[0.6, 0.4], &[0.5, 0.3]).unwrap(), 0.75);
        assert_eq!(auc(&[0.6, 0.4], &[0.5, 0.3]).unwrap(), brute_auc(&[0.6, 0.4], &[0.5, 0.3]));
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let s = GaussianStats::from_features(ndarray::array![[0.0, 0.0], [2.0, 0.0]].view()).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.covariance, vec![2.0, 0.0, 0.0, 0.0]);
        let same = GaussianStats::from_features(ndarray::array![[1.0, 3.0], [1.0, 3.0]].view()).unwrap();
        assert!(same.covariance.iter().all(|&v| v == 0.0));
        assert!(GaussianStats::from_features(ndarray::array![[1.0]].view()).is_err());
    }

    #[test]
    fn normal_features_concentrate() {
        let mut rng = seeded(11);
        let x = normal_matrix(&mut rng, 10_000, 3);
        let s = GaussianStats::from_features(x.view()).unwrap();
        for i in 0..3 {
            assert!(s.mean[i].abs() < 0.05);
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s.covariance[i * 3 + j] - expect).abs() < 0.05);
            }
        }
    }

    #[test]
    fn frechet_examples() {
        let a = GaussianStats { mean: vec![0.0], covariance: vec![1.0], count: 10 };
        let b = GaussianStats { mean: vec![1.0], covariance: vec![1.0], count: 10 };
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let c = GaussianStats { mean: vec![0.0, 0.0], covariance: vec![1.0, 0.0, 0.0, 1.0], count: 10 };
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn frechet_is_symmetric_for_full_covariances() {
        let mut rng = seeded(3);
        let xa = normal_matrix(&mut rng, 50, 3);
        let xb = normal_matrix(&mut rng, 40, 3) * 1.7 + 0.4;
        let a = GaussianStats::from_features(xa.view()).unwrap();
        let b = GaussianStats::from_features(xb.view()).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
    }

    struct Fixed(usize);

    impl LabelPredictor for Fixed {
        fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
            Ok(vec![self.0; x.nrows()])
        }
    }

    #[test]
    fn constant_predictor_accuracy() {
        let arch = crate::models::ArchConfig::ring(10);
        let (g, _) = crate::models::init_models(&arch, 0).unwrap();
        let classes: Vec<usize> = (0..10).collect();
        let acc = downstream_accuracy(&Fixed(3), &g, &classes, 20, &mut seeded(1)).unwrap();
        assert!((acc - 0.1).abs() < 1e-12);
        let mut arch = arch;
        arch.conditional = false;
        let (g, _) = crate::models::init_models(&arch, 0).unwrap();
        assert!(matches!(downstream_accuracy(&Fixed(3), &g, &classes, 20, &mut seeded(1)), Err(Error::Config(_))));
    }

    #[test]
    fn batched_scores_match_single_rows() {
        let arch = crate::models::ArchConfig::ring(4);
        let (_, d) = crate::models::init_models(&arch, 2).unwrap();
        let x = normal_matrix(&mut seeded(4), 700, 2);
        let labels: Vec<usize> = (0..700).map(|i| i % 4).collect();
        let all = discriminator_scores(&d, x.view(), &labels).unwrap();
        for i in (0..700).step_by(37) {
            let one = discriminator_scores(&d, x.slice(ndarray::s![i..i + 1, ..]), &labels[i..i + 1]).unwrap();
            assert!((one[0] - all[i]).abs() < 1e-6);
        }
    }
}
