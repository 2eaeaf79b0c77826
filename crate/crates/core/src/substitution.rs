//! Latent statistics and substitute mechanisms. Each mechanism maps the
//! inverted code `z0` of an unlearning image to a substitute code, which the
//! frozen raw generator renders into the substitute image `S(x0)`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{argument, shape, Error, Result};
use crate::inversion::{read_matrix, write_matrix};
use crate::models::GeneratorNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Average,
    Truncation,
    Projection,
    ClassAverage,
    OtherClass,
}

impl Mechanism {
    pub fn for_class_mode(self) -> bool {
        matches!(self, Mechanism::ClassAverage | Mechanism::OtherClass)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub global_mean: Vec<f64>,
    pub class_means: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
}

impl LatentStats {
    pub fn dim(&self) -> usize {
        self.global_mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    /// Classes that received no codes; their means are zero placeholders.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&y| self.class_counts[y] == 0).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Per-class and global means of `codes`.
pub fn compute_latent_stats(codes: ArrayView2<'_, f64>, labels: &[usize], num_classes: usize) -> Result<LatentStats> {
    let (m, d) = codes.dim();
    if m == 0 {
        return Err(argument("latent statistics need at least one code"));
    }
    if labels.len() != m {
        return Err(shape(format!("{m} codes but {} labels", labels.len())));
    }
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut total = vec![0.0; d];
    for (row, &y) in codes.rows().into_iter().zip(labels) {
        if y >= num_classes {
            return Err(argument(format!("label {y} outside [0, {num_classes})")));
        }
        counts[y] += 1;
        for j in 0..d {
            sums[y][j] += row[j];
            total[j] += row[j];
        }
    }
    let class_means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { s } else { s.into_iter().map(|v| v / c as f64).collect() })
        .collect();
    Ok(LatentStats {
        global_mean: total.into_iter().map(|v| v / m as f64).collect(),
        class_means,
        class_counts: counts,
    })
}

fn check_dim(z0: ArrayView1<'_, f64>, stats: &LatentStats) -> Result<()> {
    if z0.len() != stats.dim() {
        return Err(shape(format!("code has {} entries, statistics have {}", z0.len(), stats.dim())));
    }
    Ok(())
}

pub fn substitute_average(stats: &LatentStats) -> Array1<f64> {
    Array1::from(stats.global_mean.clone())
}

/// `lambda * z0 + (1 - lambda) * mean`.
pub fn substitute_truncation(z0: ArrayView1<'_, f64>, stats: &LatentStats, lambda: f64) -> Result<Array1<f64>> {
    check_dim(z0, stats)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(argument(format!("truncation lambda {lambda} outside [0, 1]")));
    }
    Ok(Array1::from_iter(
        z0.iter().zip(&stats.global_mean).map(|(z, m)| lambda * z + (1.0 - lambda) * m),
    ))
}

/// Result of [`substitute_projection`]. `degenerate` marks the zero-mean
/// fallback to plain interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub code: Array1<f64>,
    pub degenerate: bool,
}

/// `alpha * (z0 - c * mean) + (1 - alpha) * mean` with `c = <z0, mean> / <mean, mean>`.
pub fn substitute_projection(z0: ArrayView1<'_, f64>, stats: &LatentStats, alpha: f64) -> Result<Projected> {
    check_dim(z0, stats)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(argument(format!("projection alpha {alpha} outside [0, 1]")));
    }
    let mean = &stats.global_mean;
    let norm2: f64 = mean.iter().map(|m| m * m).sum();
    if norm2 == 0.0 {
        let code = z0.iter().zip(mean).map(|(z, m)| alpha * z + (1.0 - alpha) * m).collect();
        return Ok(Projected { code, degenerate: true });
    }
    let c = z0.iter().zip(mean).map(|(z, m)| z * m).sum::<f64>() / norm2;
    let code = z0
        .iter()
        .zip(mean)
        .map(|(z, m)| alpha * (z - c * m) + (1.0 - alpha) * m)
        .collect();
    Ok(Projected { code, degenerate: false })
}

pub fn substitute_class_average(y0: usize, stats: &LatentStats) -> Result<Array1<f64>> {
    match stats.class_counts.get(y0) {
        Some(&c) if c > 0 => Ok(Array1::from(stats.class_means[y0].clone())),
        Some(_) => Err(argument(format!("class {y0} has no latent codes"))),
        None => Err(argument(format!("class {y0} outside [0, {})", stats.num_classes()))),
    }
}

/// Nearest other-class mean to `z0` (Euclidean, lowest index on ties).
pub fn substitute_other_class(z0: ArrayView1<'_, f64>, y0: usize, stats: &LatentStats) -> Result<(Array1<f64>, usize)> {
    check_dim(z0, stats)?;
    let mut best: Option<(f64, usize)> = None;
    for y in 0..stats.num_classes() {
        if y == y0 || stats.class_counts[y] == 0 {
            continue;
        }
        let dist: f64 = z0.iter().zip(&stats.class_means[y]).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, y));
        }
    }
    let (_, y) = best.ok_or_else(|| argument(format!("no non-empty class other than {y0}")))?;
    Ok((Array1::from(stats.class_means[y].clone()), y))
}

/// Substitute codes and the labels to render them with, one per row of `z0`.
/// `alpha` drives the projection mechanism and `lambda` truncation.
pub fn substitute_codes(
    mechanism: Mechanism,
    z0: ArrayView2<'_, f64>,
    labels: &[usize],
    stats: &LatentStats,
    lambda: f64,
    alpha: f64,
) -> Result<(Array2<f64>, Vec<usize>, bool)> {
    let (m, d) = z0.dim();
    if labels.len() != m {
        return Err(shape(format!("{m} codes but {} labels", labels.len())));
    }
    let mut codes = Array2::zeros((m, d));
    let mut render = Vec::with_capacity(m);
    let mut degenerate = false;
    for (i, (row, &y)) in z0.rows().into_iter().zip(labels).enumerate() {
        let (code, label) = match mechanism {
            Mechanism::Average => {
                check_dim(row, stats)?;
                (substitute_average(stats), y)
            }
            Mechanism::Truncation => (substitute_truncation(row, stats, lambda)?, y),
            Mechanism::Projection => {
                let p = substitute_projection(row, stats, alpha)?;
                degenerate |= p.degenerate;
                (p.code, y)
            }
            Mechanism::ClassAverage => (substitute_class_average(y, stats)?, y),
            Mechanism::OtherClass => substitute_other_class(row, y, stats)?,
        };
        codes.row_mut(i).assign(&code);
        render.push(label);
    }
    Ok((codes, render, degenerate))
}

/// Substitute images `S(x0)` bound to the unlearning images they replace.
#[derive(Clone, Debug, PartialEq)]
pub struct SubstituteTargetSet {
    pub mechanism: Mechanism,
    pub ids: Vec<usize>,
    /// Labels of the unlearning images.
    pub labels: Vec<usize>,
    pub z0: Array2<f64>,
    pub codes: Array2<f64>,
    /// Labels the substitutes were rendered with.
    pub render_labels: Vec<usize>,
    pub images: Array2<f64>,
    /// Current schedule value (alpha for projection, lambda for truncation).
    pub schedule: Option<f64>,
    pub degenerate_mean: bool,
}

impl SubstituteTargetSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Renders substitutes with the frozen raw generator.
#[allow(clippy::too_many_arguments)]
pub fn render_substitutes(
    raw_generator: &GeneratorNet,
    mechanism: Mechanism,
    ids: &[usize],
    z0: ArrayView2<'_, f64>,
    labels: &[usize],
    stats: &LatentStats,
    lambda: f64,
    alpha: f64,
) -> Result<SubstituteTargetSet> {
    if ids.len() != z0.nrows() {
        return Err(shape(format!("{} ids for {} codes", ids.len(), z0.nrows())));
    }
    let (codes, render_labels, degenerate_mean) = substitute_codes(mechanism, z0, labels, stats, lambda, alpha)?;
    let images = raw_generator.forward(codes.view(), &render_labels)?;
    let schedule = match mechanism {
        Mechanism::Projection => Some(alpha),
        Mechanism::Truncation => Some(lambda),
        _ => None,
    };
    Ok(SubstituteTargetSet {
        mechanism,
        ids: ids.to_vec(),
        labels: labels.to_vec(),
        z0: z0.to_owned(),
        codes,
        render_labels,
        images,
        schedule,
        degenerate_mean,
    })
}

#[derive(Serialize, Deserialize)]
struct TargetSidecar {
    mechanism: Mechanism,
    ids: Vec<usize>,
    labels: Vec<usize>,
    render_labels: Vec<usize>,
    schedule: Option<f64>,
    degenerate_mean: bool,
    latent_dim: usize,
    image_dim: usize,
    config_hash: String,
}

/// Writes `<stem>.json` plus `<stem>.z0.bin`, `<stem>.codes.bin`, `<stem>.images.bin`.
pub fn save_targets(set: &SubstituteTargetSet, stem: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let stem = stem.as_ref();
    write_matrix(&stem.with_extension("z0.bin"), set.z0.view())?;
    write_matrix(&stem.with_extension("codes.bin"), set.codes.view())?;
    write_matrix(&stem.with_extension("images.bin"), set.images.view())?;
    let sidecar = TargetSidecar {
        mechanism: set.mechanism,
        ids: set.ids.clone(),
        labels: set.labels.clone(),
        render_labels: set.render_labels.clone(),
        schedule: set.schedule,
        degenerate_mean: set.degenerate_mean,
        latent_dim: set.z0.ncols(),
        image_dim: set.images.ncols(),
        config_hash: config_hash.to_string(),
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_targets(stem: impl AsRef<Path>) -> Result<(SubstituteTargetSet, String)> {
    let stem = stem.as_ref();
    let s: TargetSidecar = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    let m = s.ids.len();
    if s.labels.len() != m || s.render_labels.len() != m {
        return Err(Error::Corruption("target sidecar lists are inconsistent".into()));
    }
    Ok((
        SubstituteTargetSet {
            mechanism: s.mechanism,
            ids: s.ids,
            labels: s.labels,
            z0: read_matrix(&stem.with_extension("z0.bin"), m, s.latent_dim)?,
            codes: read_matrix(&stem.with_extension("codes.bin"), m, s.latent_dim)?,
            render_labels: s.render_labels,
            images: read_matrix(&stem.with_extension("images.bin"), m, s.image_dim)?,
            schedule: s.schedule,
            degenerate_mean: s.degenerate_mean,
        },
        s.config_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn stats(means: &[[f64; 2]]) -> LatentStats {
        let codes = Array2::from_shape_fn((means.len(), 2), |(i, j)| means[i][j]);
        let labels: Vec<usize> = (0..means.len()).collect();
        compute_latent_stats(codes.view(), &labels, means.len()).unwrap()
    }

    #[test]
    fn stats_examples() {
        let s = compute_latent_stats(array![[1.0, 0.0], [3.0, 0.0]].view(), &[0, 0], 1).unwrap();
        assert_eq!(s.global_mean, vec![2.0, 0.0]);
        assert_eq!(s.class_means[0], vec![2.0, 0.0]);
        let s = compute_latent_stats(array![[0.0, 0.0], [2.0, 2.0]].view(), &[0, 1], 2).unwrap();
        assert_eq!(s.global_mean, vec![1.0, 1.0]);
        assert_eq!(s.class_means, vec![vec![0.0, 0.0], vec![2.0, 2.0]]);
        assert!(compute_latent_stats(Array2::zeros((0, 2)).view(), &[], 2).is_err());
        let s = compute_latent_stats(array![[1.0, 1.0]].view(), &[1], 3).unwrap();
        assert_eq!(s.empty_classes(), vec![0, 2]);
    }

    #[test]
    fn truncation_examples() {
        let s = LatentStats { global_mean: vec![0.0, 2.0], class_means: vec![vec![0.0, 2.0]], class_counts: vec![1] };
        let z0 = array![2.0, 0.0];
        assert_eq!(substitute_truncation(z0.view(), &s, 0.5).unwrap(), array![1.0, 1.0]);
        assert_eq!(substitute_truncation(z0.view(), &s, 1.0).unwrap(), z0);
        assert_eq!(substitute_truncation(z0.view(), &s, 0.0).unwrap(), array![0.0, 2.0]);
        assert!(substitute_truncation(z0.view(), &s, 1.5).is_err());
    }

    #[test]
    fn projection_examples() {
        let s = LatentStats { global_mean: vec![1.0, 0.0], class_means: vec![vec![1.0, 0.0]], class_counts: vec![1] };
        let p = substitute_projection(array![3.0, 4.0].view(), &s, 1.0).unwrap();
        assert_eq!(p.code, array![0.0, 4.0]);
        assert!(!p.degenerate);
        assert_eq!(substitute_projection(array![3.0, 4.0].view(), &s, 0.0).unwrap().code, array![1.0, 0.0]);
        assert_eq!(substitute_projection(array![0.0, 5.0].view(), &s, 1.0).unwrap().code, array![0.0, 5.0]);
        let zero = LatentStats { global_mean: vec![0.0, 0.0], class_means: vec![vec![0.0, 0.0]], class_counts: vec![1] };
        let p = substitute_projection(array![3.0, 4.0].view(), &zero, 0.5).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.code, array![1.5, 2.0]);
    }

    #[test]
    fn other_class_examples() {
        let s = stats(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]);
        let (z, y) = substitute_other_class(array![9.0, 1.0].view(), 1, &s).unwrap();
        assert_eq!((z, y), (array![0.0, 0.0], 0));
        let (_, y) = substitute_other_class(array![5.0, 5.0].view(), 1, &s).unwrap();
        assert_eq!(y, 0);
        let two = stats(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(substitute_other_class(array![0.0, 0.0].view(), 0, &two).unwrap().1, 1);
        let one = stats(&[[0.0, 0.0]]);
        assert!(substitute_other_class(array![0.0, 0.0].view(), 0, &one).is_err());
    }

    #[test]
    fn class_average_needs_members() {
        let s = compute_latent_stats(array![[1.0, 1.0]].view(), &[1], 2).unwrap();
        assert_eq!(substitute_class_average(1, &s).unwrap(), array![1.0, 1.0]);
        assert!(substitute_class_average(0, &s).is_err());
    }

    #[test]
    fn render_average_gives_identical_images() {
        let arch = crate::models::ArchConfig::ring(3);
        let (g, _) = crate::models::init_models(&arch, 1).unwrap();
        let s = LatentStats { global_mean: vec![0.1, 0.2, -0.3, 0.0], class_means: vec![vec![0.0; 4]; 3], class_counts: vec![1, 1, 1] };
        let z0 = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 / 10.0);
        let set = render_substitutes(&g, Mechanism::Average, &[0, 1, 2, 3], z0.view(), &[0, 0, 0, 0], &s, 0.5, 1.0).unwrap();
        for row in set.images.rows() {
            assert_eq!(row, set.images.row(0));
            assert!(row.iter().all(|v| v.abs() <= 1.0));
        }
        let proj = render_substitutes(&g, Mechanism::Projection, &[0, 1, 2, 3], z0.view(), &[0, 0, 0, 0], &s, 0.5, 0.0).unwrap();
        assert_eq!(proj.images, set.images);
        assert_eq!(proj.codes, set.codes);

        let dir = tempfile::tempdir().unwrap();
        save_targets(&proj, dir.path().join("targets"), "h").unwrap();
        assert_eq!(load_targets(dir.path().join("targets")).unwrap().0, proj);
    }
}
