//! Labeled datasets, IDX ingestion, the synthetic ring fixture and
//! unlearn / learn / test splits.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::rng::{seeded, stage_rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images (or vectors) with integer class labels.
///
/// Samples are stored flattened, one row per sample, with `shape = [C, H, W]`
/// describing each row. Vector data uses `C = H = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    samples: Array2<f64>,
    shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        samples: Array2<f64>,
        shape: [usize; 3],
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = samples.nrows();
        if n == 0 {
            return Err(argument("a dataset needs at least one sample"));
        }
        if labels.len() != n {
            return Err(crate::error::shape(format!("{} samples but {} labels", n, labels.len())));
        }
        if shape.iter().product::<usize>() != samples.ncols() {
            return Err(crate::error::shape(format!(
                "sample shape {:?} does not match row width {}",
                shape,
                samples.ncols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(argument(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            name: name.into(),
            samples,
            shape,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the rows at `indices` (in order) together with their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Array2<f64>, Vec<usize>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(argument(format!("index {bad} out of range for {} samples", self.len())));
        }
        let rows = self.samples.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((rows, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let (samples, labels) = self.gather(indices)?;
        LabeledDataset::new(self.name.clone(), samples, self.shape, labels, self.num_classes)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Corruption(format!("{}: truncated header", path.display())))
}

/// Reads an IDX image file and its label file. Gzip-compressed files are
/// detected by their leading bytes. Pixels are mapped from `[0, 255]` to
/// `[-1, 1]`; the class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = open_maybe_gz(images_path)?;
    let lab = open_maybe_gz(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Corruption(format!("{n} images but {n_labels} labels")));
    }
    let pixels = rows * cols;
    if img.len() - 16 != n * pixels {
        return Err(Error::Corruption(format!(
            "{}: header declares {} pixel bytes, payload holds {}",
            images_path.display(),
            n * pixels,
            img.len() - 16
        )));
    }
    if lab.len() - 8 != n {
        return Err(Error::Corruption(format!(
            "{}: header declares {n} labels, payload holds {}",
            labels_path.display(),
            lab.len() - 8
        )));
    }
    if n == 0 {
        return Err(Error::Corruption("IDX files contain no samples".into()));
    }
    let samples = Array2::from_shape_fn((n, pixels), |(i, j)| {
        img[16 + i * pixels + j] as f64 / 127.5 - 1.0
    });
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(name, samples, [1, rows, cols], labels, num_classes)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
        file.flush()?;
    }
    Ok(())
}

/// Inverse of [`load_idx`]: pixel values are mapped back to bytes with
/// `round((v + 1) * 127.5)`. Paths ending in `.gz` are compressed.
pub fn write_idx(
    data: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let [c, h, w] = data.shape();
    if c != 1 {
        return Err(argument("IDX writer supports single-channel images only"));
    }
    if data.num_classes() > 256 {
        return Err(argument("IDX labels are single bytes"));
    }
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(
        data.samples()
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(data.labels().iter().map(|&l| l as u8));
    write_maybe_gz(images_path.as_ref(), &img)?;
    write_maybe_gz(labels_path.as_ref(), &lab)?;
    Ok(())
}

/// Gaussian blobs on a circle: mode `m` is centred at
/// `radius * (cos 2πm/n, sin 2πm/n)` and labeled `m`.
pub fn make_synthetic_ring(
    n_modes: usize,
    per_mode: usize,
    radius: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_modes < 2 {
        return Err(argument("a ring needs at least two modes"));
    }
    if per_mode == 0 {
        return Err(argument("per_mode must be positive"));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(argument("noise_sigma must be finite and non-negative"));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| argument(e.to_string()))?;
    let mut rng = seeded(seed);
    let n = n_modes * per_mode;
    let mut samples = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for m in 0..n_modes {
        let (cx, cy) = ring_center(m, n_modes, radius);
        for k in 0..per_mode {
            let row = m * per_mode + k;
            samples[[row, 0]] = cx + noise.sample(&mut rng);
            samples[[row, 1]] = cy + noise.sample(&mut rng);
            labels.push(m);
        }
    }
    LabeledDataset::new(format!("ring-{n_modes}"), samples, [1, 1, 2], labels, n_modes)
}

pub fn ring_center(mode: usize, n_modes: usize, radius: f64) -> (f64, f64) {
    let angle = 2.0 * PI * mode as f64 / n_modes as f64;
    (radius * angle.cos(), radius * angle.sin())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UnlearnTarget {
    Item { item_count: usize },
    Class { class_label: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnSpec {
    #[serde(flatten)]
    pub target: UnlearnTarget,
    #[serde(default)]
    pub selection_seed: u64,
}

impl UnlearnSpec {
    pub fn item(item_count: usize, selection_seed: u64) -> Self {
        Self {
            target: UnlearnTarget::Item { item_count },
            selection_seed,
        }
    }

    pub fn class(class_label: usize) -> Self {
        Self {
            target: UnlearnTarget::Class { class_label },
            selection_seed: 0,
        }
    }

    pub fn is_class(&self) -> bool {
        matches!(self.target, UnlearnTarget::Class { .. })
    }

    pub fn class_label(&self) -> Option<usize> {
        match self.target {
            UnlearnTarget::Class { class_label } => Some(class_label),
            UnlearnTarget::Item { .. } => None,
        }
    }

    pub fn validate(&self, train: &LabeledDataset) -> Result<()> {
        match self.target {
            UnlearnTarget::Item { item_count } => {
                if item_count == 0 {
                    return Err(argument("item_count must be positive"));
                }
                if item_count > train.len() {
                    return Err(argument(format!(
                        "item_count {item_count} exceeds the {} training samples",
                        train.len()
                    )));
                }
            }
            UnlearnTarget::Class { class_label } => {
                if class_label >= train.num_classes() {
                    return Err(argument(format!(
                        "class {class_label} outside [0, {})",
                        train.num_classes()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Partition of the training indices into unlearning (`D_u`) and learning
/// (`D_l`) sets, plus the test indices (`D_t`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub spec: UnlearnSpec,
    pub unlearn_indices: Vec<usize>,
    pub learn_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SplitPlan {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Test indices used by the membership audit: in class mode only the
    /// test samples of the unlearned class.
    pub fn audit_test_indices(&self, test: &LabeledDataset) -> Vec<usize> {
        match self.spec.class_label() {
            Some(c) => self
                .test_indices
                .iter()
                .copied()
                .filter(|&i| test.labels()[i] == c)
                .collect(),
            None => self.test_indices.clone(),
        }
    }
}

pub fn plan_split(train: &LabeledDataset, test: &LabeledDataset, spec: UnlearnSpec) -> Result<SplitPlan> {
    spec.validate(train)?;
    let unlearn_indices = match spec.target {
        UnlearnTarget::Item { item_count } => {
            let mut rng = stage_rng(spec.selection_seed, "plan_split");
            let mut picked = rand::seq::index::sample(&mut rng, train.len(), item_count).into_vec();
            picked.sort_unstable();
            picked
        }
        UnlearnTarget::Class { class_label } => train.indices_of_class(class_label),
    };
    if unlearn_indices.is_empty() {
        return Err(argument("the unlearning set is empty"));
    }
    let chosen: BTreeSet<usize> = unlearn_indices.iter().copied().collect();
    let learn_indices = (0..train.len()).filter(|i| !chosen.contains(i)).collect();
    Ok(SplitPlan {
        spec,
        unlearn_indices,
        learn_indices,
        test_indices: (0..test.len()).collect(),
    })
}

/// Read access to a fixed subset of a dataset that refuses forbidden indices
/// and logs every index it hands out.
#[derive(Debug)]
pub struct GuardedView<'a> {
    data: &'a LabeledDataset,
    allowed: Vec<usize>,
    forbidden: BTreeSet<usize>,
    accessed: RefCell<BTreeSet<usize>>,
}

impl<'a> GuardedView<'a> {
    pub fn new(data: &'a LabeledDataset, allowed: Vec<usize>, forbidden: &[usize]) -> Result<Self> {
        let forbidden: BTreeSet<usize> = forbidden.iter().copied().collect();
        if let Some(&bad) = allowed.iter().find(|i| forbidden.contains(i)) {
            return Err(Error::Integrity(format!(
                "index {bad} is both allowed and forbidden"
            )));
        }
        if let Some(&bad) = allowed.iter().find(|&&i| i >= data.len()) {
            return Err(argument(format!("index {bad} out of range")));
        }
        Ok(Self {
            data,
            allowed,
            forbidden,
            accessed: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn whole(data: &'a LabeledDataset) -> Self {
        Self {
            data,
            allowed: (0..data.len()).collect(),
            forbidden: BTreeSet::new(),
            accessed: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn dataset(&self) -> &LabeledDataset {
        self.data
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    /// Rows at view positions `positions` (not dataset indices).
    pub fn fetch(&self, positions: &[usize]) -> Result<(Array2<f64>, Vec<usize>)> {
        let mut indices = Vec::with_capacity(positions.len());
        for &p in positions {
            let i = *self
                .allowed
                .get(p)
                .ok_or_else(|| argument(format!("position {p} outside a view of {}", self.len())))?;
            if self.forbidden.contains(&i) {
                return Err(Error::Integrity(format!("attempted to read forbidden sample {i}")));
            }
            indices.push(i);
        }
        self.accessed.borrow_mut().extend(indices.iter().copied());
        self.data.gather(&indices)
    }

    pub fn accessed(&self) -> BTreeSet<usize> {
        self.accessed.borrow().clone()
    }
}
