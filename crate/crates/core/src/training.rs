//! Standard conditional GAN pre-training and downstream classifier training.
//!
//! Losses are provided in two forms: over probabilities (the textbook
//! definition) and over raw discriminator scores with gradients, which is
//! what the optimizers use. The score form evaluates `-ln sigmoid(r)` as
//! `softplus(-r)` so saturated discriminators stay finite.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{GuardedView, LabeledDataset};
use crate::error::{argument, Error, Result};
use crate::models::{DiscTrace, init_classifier, init_models, ArchConfig, ClassifierNet, DiscriminatorNet, GeneratorNet, ModelSnapshot};
use crate::nn::{sigmoid, softplus, Adam, AdamConfig};
use crate::rng::{normal_matrix, stage_rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_classifier: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// History is recorded every `eval_every` steps (and on the last step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 64,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_classifier: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0 && self.lr_classifier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

fn non_empty(name: &str, len: usize) -> Result<()> {
    if len == 0 {
        Err(argument(format!("{name} batch is empty")))
    } else {
        Ok(())
    }
}

fn mean_ln(probs: &[f64]) -> f64 {
    probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64
}

/// `-(mean ln p_real + mean ln(1 - p_fake))`.
pub fn d_loss(real_probs: &[f64], fake_probs: &[f64]) -> Result<f64> {
    non_empty("real", real_probs.len())?;
    non_empty("fake", fake_probs.len())?;
    let one_minus: Vec<f64> = fake_probs.iter().map(|p| 1.0 - p).collect();
    Ok(-(mean_ln(real_probs) + mean_ln(&one_minus)))
}

/// Non-saturating generator loss `-mean ln p_fake`.
pub fn g_loss(fake_probs: &[f64]) -> Result<f64> {
    non_empty("fake", fake_probs.len())?;
    Ok(-mean_ln(fake_probs))
}

/// [`d_loss`] on raw scores, with gradients with respect to each score.
pub fn d_loss_scores(real: ArrayView1<'_, f64>, fake: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    non_empty("real", real.len())?;
    non_empty("fake", fake.len())?;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let value = real.iter().map(|&r| softplus(-r)).sum::<f64>() / nr + fake.iter().map(|&f| softplus(f)).sum::<f64>() / nf;
    let grad_real = real.mapv(|r| -sigmoid(-r) / nr);
    let grad_fake = fake.mapv(|f| sigmoid(f) / nf);
    Ok((value, grad_real, grad_fake))
}

/// [`g_loss`] on raw scores, with gradient.
pub fn g_loss_scores(fake: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    non_empty("fake", fake.len())?;
    let n = fake.len() as f64;
    let value = fake.iter().map(|&f| softplus(-f)).sum::<f64>() / n;
    Ok((value, fake.mapv(|f| -sigmoid(-f) / n)))
}

/// Loss value with the gradient of the loss with respect to a network's
/// flat parameter vector.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorObjective {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_real_score: f64,
    pub mean_fake_score: f64,
}

pub(crate) fn scores_of(trace: &DiscTrace) -> Array1<f64> {
    trace.scores()
}

/// Accumulates d(loss)/d(params) of `d` for the given score gradient.
pub(crate) fn accumulate_disc(d: &DiscriminatorNet, trace: &DiscTrace, score_grad: Array1<f64>, grad: &mut [f64]) -> Result<()> {
    d.backward(trace, score_grad.view(), Some(grad))?;
    Ok(())
}

/// Standard discriminator objective and its parameter gradient.
pub fn discriminator_objective(
    d: &DiscriminatorNet,
    real: ArrayView2<'_, f64>,
    real_labels: &[usize],
    fake: ArrayView2<'_, f64>,
    fake_labels: &[usize],
) -> Result<DiscriminatorObjective> {
    let real_trace = d.trace(real, real_labels)?;
    let fake_trace = d.trace(fake, fake_labels)?;
    let real_scores = scores_of(&real_trace);
    let fake_scores = scores_of(&fake_trace);
    let (loss, g_real, g_fake) = d_loss_scores(real_scores.view(), fake_scores.view())?;
    let mut grad = vec![0.0; d.mlp().params().len()];
    accumulate_disc(d, &real_trace, g_real, &mut grad)?;
    accumulate_disc(d, &fake_trace, g_fake, &mut grad)?;
    Ok(DiscriminatorObjective {
        loss,
        grad,
        mean_real_score: real_scores.mean().unwrap_or(0.0),
        mean_fake_score: fake_scores.mean().unwrap_or(0.0),
    })
}

/// Back-propagates a gradient on generated samples into generator
/// parameters. Returns the parameter gradient.
pub(crate) fn generator_param_grad(
    g: &GeneratorNet,
    g_trace: &crate::nn::Trace,
    sample_grad: Array2<f64>,
    grad: &mut [f64],
) -> Result<()> {
    g.mlp().backward(g_trace, sample_grad.view(), Some(grad))?;
    Ok(())
}

/// d(loss)/d(samples) for a loss defined on discriminator scores of `x`.
pub(crate) fn score_pullback(d: &DiscriminatorNet, trace: &DiscTrace, score_grad: Array1<f64>) -> Result<Array2<f64>> {
    d.backward(trace, score_grad.view(), None)
}

/// Non-saturating generator objective for latents `z` and its gradient with
/// respect to generator parameters (the discriminator is held fixed).
pub fn generator_objective(
    g: &GeneratorNet,
    d: &DiscriminatorNet,
    z: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<Objective> {
    let g_trace = g.trace(z, labels)?;
    let d_trace = d.trace(g_trace.output().view(), labels)?;
    let (loss, score_grad) = g_loss_scores(scores_of(&d_trace).view())?;
    let sample_grad = score_pullback(d, &d_trace, score_grad)?;
    let mut grad = vec![0.0; g.mlp().params().len()];
    generator_param_grad(g, &g_trace, sample_grad, &mut grad)?;
    Ok(Objective { loss, grad })
}

/// Epoch-wise shuffled minibatches over `0..len`.
#[derive(Clone, Debug)]
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub(crate) fn new(len: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub(crate) fn next(&mut self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (batch - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mean_real_score: f64,
    pub mean_fake_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("step,d_loss,g_loss,mean_real_score,mean_fake_score\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.d_loss, r.g_loss, r.mean_real_score, r.mean_fake_score
            ));
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }
}

pub(crate) fn ensure_finite(what: &str, step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} became {value} at step {step}")))
    }
}

/// Trains a fresh GAN on the whole dataset.
pub fn train_gan(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<(ModelSnapshot, TrainHistory)> {
    train_gan_on(&GuardedView::whole(data), arch, cfg)
}

/// Trains a fresh GAN on the samples a guarded view exposes. The view
/// records every index read.
pub fn train_gan_on(view: &GuardedView<'_>, arch: &ArchConfig, cfg: &TrainConfig) -> Result<(ModelSnapshot, TrainHistory)> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(argument("cannot train on an empty dataset"));
    }
    let data = view.dataset();
    if data.dim() != arch.data_dim() || data.num_classes() > arch.num_classes {
        return Err(Error::Config(format!(
            "dataset ({} values, {} classes) does not fit the architecture ({} values, {} classes)",
            data.dim(),
            data.num_classes(),
            arch.data_dim(),
            arch.num_classes
        )));
    }
    let (mut g, mut d) = init_models(arch, cfg.seed)?;
    let mut opt_g = Adam::new(g.mlp().params().len(), cfg.lr_generator, cfg.adam);
    let mut opt_d = Adam::new(d.mlp().params().len(), cfg.lr_discriminator, cfg.adam);
    let mut rng = stage_rng(cfg.seed, "train_gan");
    let mut sampler = BatchSampler::new(view.len(), &mut rng);
    let mut history = TrainHistory::default();

    for step in 1..=cfg.steps {
        let positions = sampler.next(cfg.batch_size.min(view.len()), &mut rng);
        let (real, labels) = view.fetch(&positions)?;
        let z = normal_matrix(&mut rng, real.nrows(), arch.latent_dim);
        let fake = g.forward(z.view(), &labels)?;

        let d_obj = discriminator_objective(&d, real.view(), &labels, fake.view(), &labels)?;
        ensure_finite("discriminator loss", step, d_obj.loss)?;
        opt_d.step(d.mlp_mut().params_mut(), &d_obj.grad);

        let g_obj = generator_objective(&g, &d, z.view(), &labels)?;
        ensure_finite("generator loss", step, g_obj.loss)?;
        opt_g.step(g.mlp_mut().params_mut(), &g_obj.grad);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            history.records.push(TrainRecord {
                step,
                d_loss: d_obj.loss,
                g_loss: g_obj.loss,
                mean_real_score: d_obj.mean_real_score,
                mean_fake_score: d_obj.mean_fake_score,
            });
        }
    }
    Ok((ModelSnapshot::from_gan(&g, &d, cfg.steps as u64, cfg.seed), history))
}

/// Mean cross-entropy of softmax(logits) against `labels`, with the logit gradient.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    non_empty("classifier", labels.len())?;
    let n = labels.len() as f64;
    let mut grad = logits.to_owned();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row /= n;
    }
    Ok((loss / n, grad))
}

/// Supervised softmax classifier trained with Adam on shuffled minibatches.
pub fn train_classifier(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<ClassifierNet> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(argument("cannot train a classifier on an empty dataset"));
    }
    if data.dim() != arch.data_dim() || data.num_classes() > arch.num_classes {
        return Err(Error::Config("dataset does not fit the classifier architecture".into()));
    }
    let mut clf = init_classifier(arch, cfg.seed)?;
    let mut net = clf.mlp().clone();
    let mut opt = Adam::new(net.params().len(), cfg.lr_classifier, cfg.adam);
    let mut rng = stage_rng(cfg.seed, "train_classifier");
    let mut sampler = BatchSampler::new(data.len(), &mut rng);
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size.min(data.len()), &mut rng);
        let (x, y) = data.gather(&idx)?;
        let trace = net.forward_trace(x.view())?;
        let (loss, grad_logits) = cross_entropy(trace.output().view(), &y)?;
        ensure_finite("classifier loss", step, loss)?;
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&trace, grad_logits.view(), Some(&mut grad))?;
        opt.step(net.params_mut(), &grad);
    }
    clf.set_params(net.params().to_vec())?;
    Ok(clf)
}

/// Fraction of `data` the predictor labels correctly.
pub fn accuracy(clf: &impl crate::models::LabelPredictor, data: &LabeledDataset) -> Result<f64> {
    let predicted = clf.predict(data.samples())?;
    let hits = predicted.iter().zip(data.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic_ring;

    #[test]
    fn d_loss_examples() {
        assert!(d_loss(&[0.999_999], &[0.000_001]).unwrap() < 1e-5);
        let v = d_loss(&[0.5], &[0.5]).unwrap();
        assert!((v - 1.3863).abs() < 1e-4);
        assert!(d_loss(&[], &[0.5]).is_err());
    }

    #[test]
    fn g_loss_examples() {
        assert!(g_loss(&[1.0 - 1e-9]).unwrap() < 1e-8);
        assert!((g_loss(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g_loss(&[]).is_err());
    }

    #[test]
    fn score_form_matches_probability_form() {
        let real = Array1::from(vec![1.3, -0.4, 0.2]);
        let fake = Array1::from(vec![-2.0, 0.7]);
        let (v, _, _) = d_loss_scores(real.view(), fake.view()).unwrap();
        let rp: Vec<f64> = real.iter().map(|&r| sigmoid(r)).collect();
        let fp: Vec<f64> = fake.iter().map(|&f| sigmoid(f)).collect();
        assert!((v - d_loss(&rp, &fp).unwrap()).abs() < 1e-12);
        let (v, _) = g_loss_scores(fake.view()).unwrap();
        assert!((v - g_loss(&fp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let (loss, grad) = cross_entropy(logits.view(), &[1, 2]).unwrap();
        assert!(loss > 0.0);
        for row in grad.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn batch_sampler_covers_each_epoch() {
        let mut rng = crate::rng::seeded(1);
        let mut s = BatchSampler::new(10, &mut rng);
        let mut seen = s.next(4, &mut rng);
        seen.extend(s.next(6, &mut rng));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_step_budget_returns_initialization() {
        let ring = make_synthetic_ring(4, 10, 0.8, 0.05, 1).unwrap();
        let arch = ArchConfig::ring(4);
        let cfg = TrainConfig {
            steps: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let (snap, history) = train_gan(&ring, &arch, &cfg).unwrap();
        let (g, d) = init_models(&arch, 3).unwrap();
        assert_eq!(snap, ModelSnapshot::from_gan(&g, &d, 0, 3));
        assert!(history.records.is_empty());
    }

    #[test]
    fn single_class_classifier_is_perfect() {
        let ring = make_synthetic_ring(2, 40, 0.8, 0.05, 1).unwrap();
        let only = ring.subset(&ring.indices_of_class(1)).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 16,
            seed: 2,
            ..TrainConfig::default()
        };
        let clf = train_classifier(&only, &ArchConfig::ring(2), &cfg).unwrap();
        assert_eq!(accuracy(&clf, &only).unwrap(), 1.0);
        let again = train_classifier(&only, &ArchConfig::ring(2), &cfg).unwrap();
        assert_eq!(clf.params(), again.params());
    }
}
