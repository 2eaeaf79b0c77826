//! PNG figures for a finished run: score distributions, metric trajectories
//! and sample grids. Drawing is plain rasterization, so output bytes depend
//! only on the inputs and the plot seed.

use std::path::{Path, PathBuf};

use ndarray::{ArrayView2, Axis};

use super::config::ExperimentConfig;
use super::pipeline::{Pipeline, RunManifest};
use crate::datasets::SplitPlan;
use crate::error::{Error, Result};
use crate::metrics::{dataset_scores, discriminator_scores, generate_batched, MetricsReport};
use crate::models::{GeneratorNet, ModelSnapshot};
use crate::rng::{normal_matrix, stage_rng};
use crate::substitution::load_targets;
use crate::unlearning::UnlearnOutcome;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRID: Rgb = [225, 225, 225];
pub const BLUE: Rgb = [31, 119, 180];
pub const RED: Rgb = [214, 39, 40];
pub const GREEN: Rgb = [44, 160, 44];
pub const GREY: Rgb = [127, 127, 127];
pub const ORANGE: Rgb = [255, 127, 14];

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        let pixels = background.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
            writer.write_image_data(&self.pixels).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb,
}

const MARGIN: i64 = 24;

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Polylines on a framed plot area with a light 4x4 reference grid.
/// `hlines` are dashed horizontal markers (thresholds).
pub fn line_chart(series: &[Series], hlines: &[(f64, Rgb)], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, WHITE);
    let (x0, x1) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = padded_range(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(hlines.iter().map(|h| h.0)),
    );
    let (w, h) = (width as i64 - 2 * MARGIN, height as i64 - 2 * MARGIN);
    let px = |x: f64| MARGIN + ((x - x0) / (x1 - x0) * w as f64).round() as i64;
    let py = |y: f64| MARGIN + h - ((y - y0) / (y1 - y0) * h as f64).round() as i64;
    for k in 1..4 {
        let gx = MARGIN + w * k / 4;
        let gy = MARGIN + h * k / 4;
        c.line((gx, MARGIN), (gx, MARGIN + h), GRID);
        c.line((MARGIN, gy), (MARGIN + w, gy), GRID);
    }
    for &(v, color) in hlines {
        let y = py(v);
        let mut x = MARGIN;
        while x < MARGIN + w {
            c.line((x, y), ((x + 5).min(MARGIN + w), y), color);
            x += 10;
        }
    }
    for s in series {
        for pair in s.points.windows(2) {
            c.line((px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), s.color);
        }
        if s.points.len() == 1 {
            let (x, y) = (px(s.points[0].0), py(s.points[0].1));
            c.fill_rect(x - 1, y - 1, 3, 3, s.color);
        }
    }
    c.line((MARGIN, MARGIN), (MARGIN, MARGIN + h), BLACK);
    c.line((MARGIN, MARGIN + h), (MARGIN + w, MARGIN + h), BLACK);
    c.line((MARGIN + w, MARGIN), (MARGIN + w, MARGIN + h), BLACK);
    c.line((MARGIN, MARGIN), (MARGIN + w, MARGIN), BLACK);
    c
}

/// Normalized histograms of several score sets over a shared range.
pub fn histogram_series(sets: &[(&[f64], Rgb)], bins: usize) -> Vec<Series> {
    let (lo, hi) = padded_range(sets.iter().flat_map(|s| s.0.iter().copied()));
    let width = (hi - lo) / bins as f64;
    sets.iter()
        .map(|&(values, color)| {
            let mut counts = vec![0.0; bins];
            for &v in values.iter().filter(|v| v.is_finite()) {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1.0;
            }
            let total = (values.len().max(1) as f64) * width;
            let points = counts
                .iter()
                .enumerate()
                .map(|(b, n)| (lo + (b as f64 + 0.5) * width, n / total))
                .collect();
            Series { points, color }
        })
        .collect()
}

/// Tiles images (rows of `[-1, 1]` pixels) into a grid, `scale` screen
/// pixels per image pixel, with a one-cell white gutter.
pub fn image_grid(images: ArrayView2<'_, f64>, shape: [usize; 3], columns: usize, scale: usize) -> Result<Canvas> {
    let [ch, h, w] = shape;
    if images.ncols() != ch * h * w || columns == 0 {
        return Err(Error::Shape(format!("{} values per image do not match shape {shape:?}", images.ncols())));
    }
    let n = images.nrows();
    let rows = n.div_ceil(columns).max(1);
    let cell_w = w * scale + scale;
    let cell_h = h * scale + scale;
    let mut c = Canvas::new(columns * cell_w + scale, rows * cell_h + scale, WHITE);
    for (i, img) in images.axis_iter(Axis(0)).enumerate() {
        let (gx, gy) = ((i % columns) * cell_w + scale, (i / columns) * cell_h + scale);
        for y in 0..h {
            for x in 0..w {
                let value = |k: usize| {
                    let v = img[k * h * w + y * w + x];
                    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
                };
                let color = if ch >= 3 { [value(0), value(1), value(2)] } else { [value(0); 3] };
                c.fill_rect((gx + x * scale) as i64, (gy + y * scale) as i64, scale as i64, scale as i64, color);
            }
        }
    }
    Ok(c)
}

/// 2-D points; each set drawn as 3x3 squares in order.
pub fn scatter(sets: &[(ArrayView2<'_, f64>, Rgb)], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, WHITE);
    let (x0, x1) = padded_range(sets.iter().flat_map(|s| s.0.column(0).to_vec()));
    let (y0, y1) = padded_range(sets.iter().flat_map(|s| s.0.column(1).to_vec()));
    let (w, h) = (width as i64 - 2 * MARGIN, height as i64 - 2 * MARGIN);
    for (points, color) in sets {
        for p in points.axis_iter(Axis(0)) {
            let x = MARGIN + ((p[0] - x0) / (x1 - x0) * w as f64).round() as i64;
            let y = MARGIN + h - ((p[1] - y0) / (y1 - y0) * h as f64).round() as i64;
            c.fill_rect(x - 1, y - 1, 3, 3, *color);
        }
    }
    c.line((MARGIN, MARGIN + h), (MARGIN + w, MARGIN + h), BLACK);
    c.line((MARGIN, MARGIN), (MARGIN, MARGIN + h), BLACK);
    c
}

const REQUIRED: [&str; 6] = ["config", "split", "raw_snapshot", "unlearned_snapshot", "outcome", "targets"];

fn check_artifacts(manifest: &RunManifest) -> Result<()> {
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter_map(|&name| match manifest.artifacts.get(name) {
            Some(p) if p.exists() => None,
            Some(p) => Some(format!("{name} ({})", p.display())),
            None => Some(name.to_string()),
        })
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

/// Regenerates every figure of a finished run from its manifest.
pub fn emit_plots(run_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let manifest_path = run_dir.as_ref().join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifacts(vec![manifest_path.display().to_string()]));
    }
    let manifest = RunManifest::load(&manifest_path)?;
    check_artifacts(&manifest)?;
    let cfg = ExperimentConfig::from_value(serde_json::from_slice(&std::fs::read(manifest.artifact("config")?)?)?)?;
    let pipeline = Pipeline::new(&cfg)?;
    emit_plots_for(&pipeline, &manifest)
}

struct Phases {
    raw: ModelSnapshot,
    unlearned: ModelSnapshot,
}

pub(crate) fn emit_plots_for(p: &Pipeline, manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    check_artifacts(manifest)?;
    let dir = p.run_dir().join("plots");
    std::fs::create_dir_all(&dir)?;
    let split = SplitPlan::load(manifest.artifact("split")?)?;
    let outcome: UnlearnOutcome = serde_json::from_slice(&std::fs::read(manifest.artifact("outcome")?)?)?;
    let phases = Phases {
        raw: ModelSnapshot::load(manifest.artifact("raw_snapshot")?)?,
        unlearned: ModelSnapshot::load(manifest.artifact("unlearned_snapshot")?)?,
    };
    let mut written = Vec::new();
    let mut save = |name: String, canvas: Canvas| -> Result<()> {
        let path = dir.join(name);
        canvas.save_png(&path)?;
        written.push(path);
        Ok(())
    };

    for (phase, snap) in [("pre", &phases.raw), ("post", &phases.unlearned)] {
        save(format!("scores_{phase}.png"), score_curves(p, &split, snap)?)?;
    }
    for (name, canvas) in trajectory_charts(&outcome, p.config.unlearn.auc_min) {
        save(format!("{name}.png"), canvas)?;
    }

    let class_mode = split.spec.class_label();
    for (phase, snap) in [("pre", &phases.raw), ("post", &phases.unlearned)] {
        let g = snap.generator()?;
        if p.config.dataset.is_vector() {
            save(format!("scatter_{phase}.png"), scatter_phase(p, &split, &g)?)?;
        } else if let Some(y0) = class_mode {
            let (left, right) = class_grids(p, &g, y0)?;
            save(format!("grid_{phase}_unlearned.png"), left)?;
            save(format!("grid_{phase}_others.png"), right)?;
        } else {
            let stem = manifest.artifact("targets")?.with_extension("");
            let (targets, _) = load_targets(stem)?;
            save(format!("grid_{phase}_items.png"), item_grid(p, &split, &g, &targets)?)?;
        }
    }
    Ok(written)
}

fn score_curves(p: &Pipeline, split: &SplitPlan, snap: &ModelSnapshot) -> Result<Canvas> {
    let d = snap.discriminator()?;
    let g = snap.generator()?;
    let sl = dataset_scores(&d, &p.train, &split.learn_indices)?.to_vec();
    let su = dataset_scores(&d, &p.train, &split.unlearn_indices)?.to_vec();
    let st = dataset_scores(&d, &p.test, &split.audit_test_indices(&p.test))?.to_vec();
    let mut rng = stage_rng(p.config.plot_seed(), "scores/generated");
    let n = 512;
    let labels: Vec<usize> = (0..n).map(|i| p.train.labels()[split.learn_indices[i * split.learn_indices.len() / n]]).collect();
    let z = normal_matrix(&mut rng, n, g.latent_dim());
    let x = generate_batched(&g, z.view(), &labels)?;
    let sg = discriminator_scores(&d, x.view(), &labels)?.to_vec();
    let series = histogram_series(&[(&sl, BLUE), (&su, RED), (&st, GREEN), (&sg, GREY)], 40);
    Ok(line_chart(&series, &[], 480, 320))
}

fn trajectory_charts(outcome: &UnlearnOutcome, auc_min: f64) -> Vec<(String, Canvas)> {
    let t = &outcome.trajectory;
    let pts = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<(f64, f64)> {
        t.iter().filter_map(|r| f(r).map(|v| (r.iteration as f64, v))).collect()
    };
    let chart = |points: Vec<(f64, f64)>, color: Rgb, hlines: &[(f64, Rgb)]| line_chart(&[Series { points, color }], hlines, 480, 320);
    let class_mode = outcome.fid_u_min.is_some() || t.iter().any(|r| r.fid_u.is_some());
    let mut out = Vec::new();
    let auc_line = if class_mode { vec![] } else { vec![(auc_min, ORANGE)] };
    out.push(("trajectory_auc_lu".to_string(), chart(pts(&|r| Some(r.auc_lu)), BLUE, &auc_line)));
    out.push(("trajectory_fid_l".to_string(), chart(pts(&|r| Some(r.fid_l)), BLUE, &[])));
    out.push(("trajectory_auc_ut".to_string(), chart(pts(&|r| Some(r.auc_ut)), RED, &[(0.5, GREY)])));
    if t.iter().any(|r| r.acc.is_some()) {
        out.push(("trajectory_acc".to_string(), chart(pts(&|r| r.acc), GREEN, &[])));
    }
    if class_mode {
        let lines: Vec<(f64, Rgb)> = outcome.fid_u_min.map(|v| (v, ORANGE)).into_iter().collect();
        out.push(("trajectory_fid_u".to_string(), chart(pts(&|r| r.fid_u), RED, &lines)));
        if t.iter().any(|r| r.confidence_u.is_some()) {
            out.push(("trajectory_confidence_u".to_string(), chart(pts(&|r| r.confidence_u), RED, &[(0.5, GREY)])));
        }
    }
    out
}

fn class_grids(p: &Pipeline, g: &GeneratorNet, y0: usize) -> Result<(Canvas, Canvas)> {
    let cols = p.config.plots.grid_columns;
    let shape = p.arch().data_shape;
    let mut rng = stage_rng(p.config.plot_seed(), "grid/unlearned");
    let n = 4 * cols;
    let z = normal_matrix(&mut rng, n, g.latent_dim());
    let left = image_grid(generate_batched(g, z.view(), &vec![y0; n])?.view(), shape, cols, 2)?;

    let others: Vec<usize> = (0..p.arch().num_classes).filter(|&c| c != y0).collect();
    let labels: Vec<usize> = others.iter().flat_map(|&c| std::iter::repeat_n(c, cols)).collect();
    let mut rng = stage_rng(p.config.plot_seed(), "grid/others");
    let z = normal_matrix(&mut rng, labels.len(), g.latent_dim());
    let right = image_grid(generate_batched(g, z.view(), &labels)?.view(), shape, cols, 2)?;
    Ok((left, right))
}

/// Rows: unlearning images, their reconstructions by `g`, their substitutes.
fn item_grid(p: &Pipeline, split: &SplitPlan, g: &GeneratorNet, targets: &crate::substitution::SubstituteTargetSet) -> Result<Canvas> {
    let cols = p.config.plots.grid_columns.min(split.unlearn_indices.len());
    let picked: Vec<usize> = (0..cols).collect();
    let ids: Vec<usize> = picked.iter().map(|&i| targets.ids[i]).collect();
    let (real, labels) = p.train.gather(&ids)?;
    let z0 = targets.z0.select(Axis(0), &picked);
    let recon = generate_batched(g, z0.view(), &labels)?;
    let subs = targets.images.select(Axis(0), &picked);
    let stacked = ndarray::concatenate(Axis(0), &[real.view(), recon.view(), subs.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    image_grid(stacked.view(), p.arch().data_shape, cols, 2)
}

fn scatter_phase(p: &Pipeline, split: &SplitPlan, g: &GeneratorNet) -> Result<Canvas> {
    let (real, _) = p.train.gather(&split.learn_indices)?;
    let mut rng = stage_rng(p.config.plot_seed(), "scatter");
    let k = p.arch().num_classes;
    let n = 64 * k;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let z = normal_matrix(&mut rng, n, g.latent_dim());
    let x = generate_batched(g, z.view(), &labels)?;
    let flagged: Vec<usize> = match split.spec.class_label() {
        Some(y0) => (0..n).filter(|&i| labels[i] == y0).collect(),
        None => Vec::new(),
    };
    let rest: Vec<usize> = (0..n).filter(|i| !flagged.contains(i)).collect();
    let (xu, _) = p.train.gather(&split.unlearn_indices)?;
    let gen_rest = x.select(Axis(0), &rest);
    let gen_flag = x.select(Axis(0), &flagged);
    Ok(scatter(
        &[(real.view(), GRID), (xu.view(), ORANGE), (gen_rest.view(), BLUE), (gen_flag.view(), RED)],
        400,
        400,
    ))
}
