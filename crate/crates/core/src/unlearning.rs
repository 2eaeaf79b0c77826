//! Cascaded unlearning: every iteration runs an unlearning phase that drives
//! the discriminator's scores on the unlearning images toward a fake label
//! and pulls the generator's reconstructions toward substitutes, then a
//! learning phase that keeps the rest of the distribution intact, either from
//! a sample of the learning set (few-shot) or from the raw generator
//! (zero-shot).

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{GuardedView, LabeledDataset, SplitPlan};
use crate::error::{argument, shape, Error, Result};
use crate::metrics::{
    auc, dataset_scores, frechet_distance, gaussian_feature_stats, generate_per_class, label_confidence, logan_audit,
    downstream_accuracy, GaussianStats, MetricsReport, Phase,
};
use crate::models::{init_models, ArchConfig, ClassifierNet, DiscriminatorNet, FeatureMap, GeneratorNet, ModelSnapshot};
use crate::nn::{sigmoid, softplus, Adam, AdamConfig};
use crate::rng::{normal_matrix, stage_rng, Rng};
use crate::substitution::{render_substitutes, LatentStats, Mechanism, SubstituteTargetSet};
use crate::training::{
    accumulate_disc, g_loss_scores, generator_param_grad, score_pullback, scores_of, train_gan_on,
    BatchSampler, Objective, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    Few,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Destination,
    Budget,
    Divergence,
}

/// Latents behind the generated samples in the unlearning phase's
/// discriminator fake term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeSource {
    /// The inverted codes `z0` of the unlearning batch.
    UnlearnCodes,
    /// Fresh draws from the prior.
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub shot: Shot,
    pub mechanism: Mechanism,
    pub f_label: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub truncation_lambda: f64,
    pub fake_source: FakeSource,
    /// Projection targets are re-rendered every this many iterations while
    /// alpha decays linearly from 1 to 0 over `max_iterations`.
    pub rerender_every: usize,
    /// Size of the seeded learning-set sample used by few-shot runs.
    /// `None` takes `min(1024, |D_l|)`.
    pub learn_pool_size: Option<usize>,
    /// Unlearning images per phase; `None` uses all of `D_u`.
    pub unlearn_batch: Option<usize>,
    /// Learning samples per phase; `None` matches the unlearning batch.
    pub learn_batch: Option<usize>,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub auc_min: f64,
    /// `None` resolves to half the FID_u of an untrained generator.
    pub fid_u_min: Option<f64>,
    pub stop_at_destination: bool,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub divergence_threshold: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            shot: Shot::Few,
            mechanism: Mechanism::Average,
            f_label: 0.1,
            lambda1: 1.0,
            lambda2: 0.0,
            truncation_lambda: 0.5,
            fake_source: FakeSource::UnlearnCodes,
            rerender_every: 50,
            learn_pool_size: None,
            unlearn_batch: None,
            learn_batch: None,
            max_iterations: 1000,
            eval_every: 25,
            auc_min: 0.8,
            fid_u_min: None,
            stop_at_destination: true,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            adam: AdamConfig::default(),
            seed: 0,
            divergence_threshold: 1e6,
        }
    }
}

pub const DEFAULT_LEARN_POOL: usize = 1024;

impl UnlearnConfig {
    pub fn validate(&self, class_mode: bool) -> Result<()> {
        if self.mechanism.for_class_mode() != class_mode {
            return Err(Error::Config(format!(
                "mechanism {:?} does not apply to {} unlearning",
                self.mechanism,
                if class_mode { "class" } else { "item" }
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.truncation_lambda) {
            return Err(Error::Config("truncation_lambda must lie in [0, 1]".into()));
        }
        if self.eval_every == 0 || self.rerender_every == 0 {
            return Err(Error::Config("eval_every and rerender_every must be positive".into()));
        }
        if !self.f_label.is_finite() {
            return Err(Error::Config("f_label must be finite".into()));
        }
        if !(self.lr_generator >= 0.0 && self.lr_discriminator >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if matches!(self.unlearn_batch, Some(0)) || matches!(self.learn_batch, Some(0)) || matches!(self.learn_pool_size, Some(0)) {
            return Err(Error::Config("batch and pool sizes must be positive".into()));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn require(name: &str, len: usize) -> Result<()> {
    if len == 0 {
        Err(argument(format!("{name} batch is empty")))
    } else {
        Ok(())
    }
}

/// `mean (r - f_label)^2 + mean -ln(1 - p_fake)`.
pub fn discriminator_unlearn_loss(unlearn_scores: &[f64], fake_probs: &[f64], f_label: f64) -> Result<f64> {
    require("unlearning", unlearn_scores.len())?;
    require("fake", fake_probs.len())?;
    let fake: Vec<f64> = fake_probs.iter().map(|p| -(1.0 - p).ln()).collect();
    Ok(unlearn_scores.iter().map(|r| (r - f_label) * (r - f_label)).sum::<f64>() / unlearn_scores.len() as f64 + mean(&fake))
}

fn mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `lambda1 * MSE(G(z0), S) + lambda2 * MSE(f(G(z0)), f(S)) + mean -ln p`.
pub fn generator_unlearn_loss(
    gen_outputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    extractor: Option<&dyn FeatureMap>,
    d_probs: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    require("generator", gen_outputs.nrows())?;
    require("discriminator", d_probs.len())?;
    if gen_outputs.dim() != targets.dim() {
        return Err(shape(format!("outputs {:?} vs targets {:?}", gen_outputs.dim(), targets.dim())));
    }
    let mut loss = lambda1 * mse(gen_outputs, targets);
    if lambda2 > 0.0 {
        let ext = extractor.ok_or_else(|| Error::Config("lambda2 > 0 needs a feature extractor".into()))?;
        loss += lambda2 * mse(ext.features(gen_outputs)?.view(), ext.features(targets)?.view());
    }
    let adversarial: Vec<f64> = d_probs.iter().map(|p| -p.ln()).collect();
    Ok(loss + mean(&adversarial))
}

/// `mean -ln p_raw + mean (s_raw - s0)^2 + mean -ln(1 - p_current)` where
/// `s_raw` are the current discriminator's scores on raw-generator samples
/// and `s0` the raw discriminator's scores on the same samples.
pub fn zero_shot_discriminator_learning_loss(
    probs_on_raw_gen: &[f64],
    scores_on_raw_gen: &[f64],
    raw_disc_scores: &[f64],
    probs_on_current_gen: &[f64],
) -> Result<f64> {
    let n = probs_on_raw_gen.len();
    require("raw generator", n)?;
    if scores_on_raw_gen.len() != n || raw_disc_scores.len() != n || probs_on_current_gen.len() != n {
        return Err(shape("zero-shot loss batches must have equal length"));
    }
    let real: Vec<f64> = probs_on_raw_gen.iter().map(|p| -p.ln()).collect();
    let distill: Vec<f64> = scores_on_raw_gen.iter().zip(raw_disc_scores).map(|(s, s0)| (s - s0) * (s - s0)).collect();
    let fake: Vec<f64> = probs_on_current_gen.iter().map(|p| -(1.0 - p).ln()).collect();
    Ok(mean(&real) + mean(&distill) + mean(&fake))
}

/// Unlearning-phase discriminator objective and its parameter gradient.
pub fn discriminator_unlearn_objective(
    d: &DiscriminatorNet,
    unlearn: ArrayView2<'_, f64>,
    unlearn_labels: &[usize],
    fake: ArrayView2<'_, f64>,
    fake_labels: &[usize],
    f_label: f64,
) -> Result<Objective> {
    require("unlearning", unlearn.nrows())?;
    require("fake", fake.nrows())?;
    let u_trace = d.trace(unlearn, unlearn_labels)?;
    let f_trace = d.trace(fake, fake_labels)?;
    let (su, sf) = (scores_of(&u_trace), scores_of(&f_trace));
    let (nu, nf) = (su.len() as f64, sf.len() as f64);
    let loss = su.iter().map(|r| (r - f_label).powi(2)).sum::<f64>() / nu + sf.iter().map(|&f| softplus(f)).sum::<f64>() / nf;
    let mut grad = vec![0.0; d.mlp().params().len()];
    accumulate_disc(d, &u_trace, su.mapv(|r| 2.0 * (r - f_label) / nu), &mut grad)?;
    accumulate_disc(d, &f_trace, sf.mapv(|f| sigmoid(f) / nf), &mut grad)?;
    Ok(Objective { loss, grad })
}

/// Unlearning-phase generator objective for codes `z0` (conditioned on
/// `labels`) against substitute images, with its parameter gradient.
#[allow(clippy::too_many_arguments)]
pub fn generator_unlearn_objective(
    g: &GeneratorNet,
    d: &DiscriminatorNet,
    z0: ArrayView2<'_, f64>,
    labels: &[usize],
    targets: ArrayView2<'_, f64>,
    extractor: Option<&dyn FeatureMap>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Objective> {
    require("generator", z0.nrows())?;
    let g_trace = g.trace(z0, labels)?;
    let out = g_trace.output();
    if out.dim() != targets.dim() {
        return Err(shape(format!("outputs {:?} vs targets {:?}", out.dim(), targets.dim())));
    }
    let total = out.len() as f64;
    let mut loss = lambda1 * mse(out.view(), targets);
    let mut grad_out = (out - &targets) * (2.0 * lambda1 / total);
    if lambda2 > 0.0 {
        let ext = extractor.ok_or_else(|| Error::Config("lambda2 > 0 needs a feature extractor".into()))?;
        let f = ext.features(out.view())?;
        let ft = ext.features(targets)?;
        loss += lambda2 * mse(f.view(), ft.view());
        let grad_f = (&f - &ft) * (2.0 * lambda2 / f.len() as f64);
        grad_out += &ext.pullback(out.view(), grad_f.view())?;
    }
    let d_trace = d.trace(out.view(), labels)?;
    let (adv, score_grad) = g_loss_scores(scores_of(&d_trace).view())?;
    loss += adv;
    grad_out += &score_pullback(d, &d_trace, score_grad)?;
    let mut grad = vec![0.0; g.mlp().params().len()];
    generator_param_grad(g, &g_trace, grad_out, &mut grad)?;
    Ok(Objective { loss, grad })
}

/// Zero-shot discriminator learning objective. `raw_samples` come from the
/// raw generator, `current_samples` from the generator being unlearned.
pub fn zero_shot_discriminator_objective(
    d: &DiscriminatorNet,
    d0: &DiscriminatorNet,
    raw_samples: ArrayView2<'_, f64>,
    current_samples: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<Objective> {
    require("raw generator", raw_samples.nrows())?;
    if current_samples.nrows() != raw_samples.nrows() {
        return Err(shape("zero-shot loss batches must have equal length"));
    }
    let raw_trace = d.trace(raw_samples, labels)?;
    let cur_trace = d.trace(current_samples, labels)?;
    let s = scores_of(&raw_trace);
    let s0 = d0.scores(raw_samples, labels)?;
    let c = scores_of(&cur_trace);
    let n = s.len() as f64;
    let loss = s.iter().map(|&v| softplus(-v)).sum::<f64>() / n
        + s.iter().zip(&s0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
        + c.iter().map(|&v| softplus(v)).sum::<f64>() / n;
    let raw_grad = Array1::from_iter(s.iter().zip(&s0).map(|(&v, &v0)| (-sigmoid(-v) + 2.0 * (v - v0)) / n));
    let mut grad = vec![0.0; d.mlp().params().len()];
    accumulate_disc(d, &raw_trace, raw_grad, &mut grad)?;
    accumulate_disc(d, &cur_trace, c.mapv(|v| sigmoid(v) / n), &mut grad)?;
    Ok(Objective { loss, grad })
}

/// Mean squared gap between `d` and `d0` scores on the given samples.
pub fn distillation_gap(d: &DiscriminatorNet, d0: &DiscriminatorNet, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let s = d.scores(x, labels)?;
    let s0 = d0.scores(x, labels)?;
    Ok(s.iter().zip(&s0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64)
}

/// Generator and discriminator under optimization with their optimizers.
#[derive(Clone, Debug)]
pub struct GanState {
    pub g: GeneratorNet,
    pub d: DiscriminatorNet,
    opt_g: Adam,
    opt_d: Adam,
}

impl GanState {
    pub fn new(g: GeneratorNet, d: DiscriminatorNet, lr_generator: f64, lr_discriminator: f64, adam: AdamConfig) -> Self {
        let opt_g = Adam::new(g.mlp().params().len(), lr_generator, adam);
        let opt_d = Adam::new(d.mlp().params().len(), lr_discriminator, adam);
        Self { g, d, opt_g, opt_d }
    }

    fn step_d(&mut self, grad: &[f64]) {
        self.opt_d.step(self.d.mlp_mut().params_mut(), grad);
    }

    fn step_g(&mut self, grad: &[f64]) {
        self.opt_g.step(self.g.mlp_mut().params_mut(), grad);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Standard GAN step on a learning batch fetched through `view`, whose
/// guard rejects unlearning indices.
pub fn few_shot_learning_step(state: &mut GanState, view: &GuardedView<'_>, positions: &[usize], rng: &mut Rng) -> Result<StepLosses> {
    require("learning", positions.len())?;
    let (real, labels) = view.fetch(positions)?;
    let z = normal_matrix(rng, real.nrows(), state.g.latent_dim());
    let fake = state.g.forward(z.view(), &labels)?;
    let d_obj = crate::training::discriminator_objective(&state.d, real.view(), &labels, fake.view(), &labels)?;
    state.step_d(&d_obj.grad);
    let g_obj = crate::training::generator_objective(&state.g, &state.d, z.view(), &labels)?;
    state.step_g(&g_obj.grad);
    Ok(StepLosses { d_loss: d_obj.loss, g_loss: g_obj.loss })
}

/// Zero-shot learning step: the raw generator stands in for training data
/// and the raw discriminator anchors the scores through distillation.
pub fn zero_shot_learning_step(
    state: &mut GanState,
    g0: &GeneratorNet,
    d0: &DiscriminatorNet,
    z: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<StepLosses> {
    require("latent", z.nrows())?;
    let raw = g0.forward(z, labels)?;
    let current = state.g.forward(z, labels)?;
    let d_obj = zero_shot_discriminator_objective(&state.d, d0, raw.view(), current.view(), labels)?;
    state.step_d(&d_obj.grad);
    let g_obj = crate::training::generator_objective(&state.g, &state.d, z, labels)?;
    state.step_g(&g_obj.grad);
    Ok(StepLosses { d_loss: d_obj.loss, g_loss: g_obj.loss })
}

/// Unlearning phase on one batch of target entries.
#[allow(clippy::too_many_arguments)]
fn unlearning_step(
    state: &mut GanState,
    x_u: ArrayView2<'_, f64>,
    labels: &[usize],
    z0: ArrayView2<'_, f64>,
    substitutes: ArrayView2<'_, f64>,
    extractor: Option<&dyn FeatureMap>,
    cfg: &UnlearnConfig,
    rng: &mut Rng,
) -> Result<StepLosses> {
    let fake = match cfg.fake_source {
        FakeSource::UnlearnCodes => state.g.forward(z0, labels)?,
        FakeSource::Prior => {
            let z = normal_matrix(rng, labels.len(), state.g.latent_dim());
            state.g.forward(z.view(), labels)?
        }
    };
    let d_obj = discriminator_unlearn_objective(&state.d, x_u, labels, fake.view(), labels, cfg.f_label)?;
    state.step_d(&d_obj.grad);
    let g_obj = generator_unlearn_objective(&state.g, &state.d, z0, labels, substitutes, extractor, cfg.lambda1, cfg.lambda2)?;
    state.step_g(&g_obj.grad);
    Ok(StepLosses { d_loss: d_obj.loss, g_loss: g_obj.loss })
}

/// Everything the evaluator needs that stays fixed during a run.
pub struct MetricsContext<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub split: &'a SplitPlan,
    pub extractor: &'a dyn FeatureMap,
    pub classifier: Option<&'a ClassifierNet>,
    /// Generated samples for FID_l.
    pub fid_samples: usize,
    /// Generated samples per class for ACC.
    pub acc_per_class: usize,
    pub seed: u64,
    real_l: GaussianStats,
    real_u: Option<GaussianStats>,
    audit_test: Vec<usize>,
    learn_classes: Vec<usize>,
}

impl<'a> MetricsContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        split: &'a SplitPlan,
        extractor: &'a dyn FeatureMap,
        classifier: Option<&'a ClassifierNet>,
        fid_samples: usize,
        acc_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let (xl, _) = train.gather(&split.learn_indices)?;
        let real_l = gaussian_feature_stats(extractor, xl.view())?;
        let real_u = if split.spec.is_class() {
            let (xu, _) = train.gather(&split.unlearn_indices)?;
            Some(gaussian_feature_stats(extractor, xu.view())?)
        } else {
            None
        };
        let audit_test = split.audit_test_indices(test);
        if audit_test.is_empty() {
            return Err(argument("the test set has no images for the membership audit"));
        }
        let learn_classes = (0..train.num_classes())
            .filter(|&c| Some(c) != split.spec.class_label())
            .collect();
        Ok(Self {
            train,
            test,
            split,
            extractor,
            classifier,
            fid_samples,
            acc_per_class,
            seed,
            real_l,
            real_u,
            audit_test,
            learn_classes,
        })
    }

    pub fn is_class_mode(&self) -> bool {
        self.split.spec.is_class()
    }

    /// FID_u of an arbitrary generator (class mode).
    pub fn fid_u(&self, g: &GeneratorNet) -> Result<Option<f64>> {
        let (Some(real_u), Some(y0)) = (&self.real_u, self.split.spec.class_label()) else {
            return Ok(None);
        };
        let mut rng = stage_rng(self.seed, "eval/fid_u");
        let n = self.split.unlearn_indices.len().max(2);
        let (x, _) = generate_per_class(g, &[y0], n, &mut rng)?;
        Ok(Some(frechet_distance(&gaussian_feature_stats(self.extractor, x.view())?, real_u)?))
    }

    pub fn evaluate(&self, g: &GeneratorNet, d: &DiscriminatorNet, phase: Phase, iteration: usize, wall_time_s: f64) -> Result<MetricsReport> {
        let sl = dataset_scores(d, self.train, &self.split.learn_indices)?;
        let su = dataset_scores(d, self.train, &self.split.unlearn_indices)?;
        let st = dataset_scores(d, self.test, &self.audit_test)?;
        let (xu, yu) = self.train.gather(&self.split.unlearn_indices)?;
        let (xt, yt) = self.test.gather(&self.audit_test)?;
        let auc_ut = logan_audit(d, (xu.view(), &yu), (xt.view(), &yt))?;

        // Generated labels follow the learning set's label frequencies.
        let mut rng = stage_rng(self.seed, "eval/fid_l");
        let labels: Vec<usize> = (0..self.fid_samples.max(2))
            .map(|_| self.train.labels()[self.split.learn_indices[rng.random_range(0..self.split.learn_indices.len())]])
            .collect();
        let z = normal_matrix(&mut rng, labels.len(), g.latent_dim());
        let x = crate::metrics::generate_batched(g, z.view(), &labels)?;
        let fid_l = frechet_distance(&gaussian_feature_stats(self.extractor, x.view())?, &self.real_l)?;

        let (acc, confidence_u) = match self.classifier {
            Some(clf) if g.is_conditional() => {
                let acc = downstream_accuracy(clf, g, &self.learn_classes, self.acc_per_class, &mut stage_rng(self.seed, "eval/acc"))?;
                let conf = match self.split.spec.class_label() {
                    Some(y0) => Some(label_confidence(clf, g, y0, self.acc_per_class, &mut stage_rng(self.seed, "eval/confidence"))?),
                    None => None,
                };
                (Some(acc), conf)
            }
            _ => (None, None),
        };
        Ok(MetricsReport {
            phase,
            iteration,
            auc_lu: auc(sl.as_slice().unwrap(), su.as_slice().unwrap())?,
            fid_l,
            fid_u: self.fid_u(g)?,
            acc,
            auc_ut,
            confidence_u,
            mean_score_l: sl.mean().unwrap_or(0.0),
            mean_score_u: su.mean().unwrap_or(0.0),
            mean_score_t: st.mean().unwrap_or(0.0),
            wall_time_s,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnOutcome {
    #[serde(skip)]
    pub snapshot: Option<ModelSnapshot>,
    pub trajectory: Vec<MetricsReport>,
    pub wall_time_s: f64,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub fid_u_min: Option<f64>,
    pub divergence: Option<String>,
    /// Training-set indices read through the unlearning and learning guards.
    pub accessed_unlearn: BTreeSet<usize>,
    pub accessed_learn: BTreeSet<usize>,
    pub raw_hash_before: String,
    pub raw_hash_after: String,
}

impl UnlearnOutcome {
    pub fn pre(&self) -> &MetricsReport {
        &self.trajectory[0]
    }

    pub fn post(&self) -> &MetricsReport {
        self.trajectory.last().expect("trajectory holds the initial report")
    }
}

/// Default class-mode destination: half the FID_u of an untrained generator.
pub fn default_fid_u_min(arch: &ArchConfig, ctx: &MetricsContext<'_>, seed: u64) -> Result<Option<f64>> {
    let (g, _) = init_models(arch, crate::rng::derive_seed(seed, "untrained-reference"))?;
    Ok(ctx.fid_u(&g)?.map(|v| 0.5 * v))
}

fn check_loss(cfg: &UnlearnConfig, what: &str, iteration: usize, value: f64) -> Option<String> {
    if !value.is_finite() || value.abs() > cfg.divergence_threshold {
        Some(format!("{what} reached {value} at iteration {iteration}"))
    } else {
        None
    }
}

/// Runs cascaded unlearning from the raw snapshot. `targets` must list every
/// unlearning image exactly once; `stats` is used to re-render projection
/// targets as alpha decays.
#[allow(clippy::too_many_arguments)]
pub fn cascaded_unlearn(
    raw: &ModelSnapshot,
    data: &LabeledDataset,
    split: &SplitPlan,
    targets: &SubstituteTargetSet,
    stats: &LatentStats,
    cfg: &UnlearnConfig,
    ctx: &MetricsContext<'_>,
    extractor: Option<&dyn FeatureMap>,
) -> Result<UnlearnOutcome> {
    let class_mode = split.spec.is_class();
    cfg.validate(class_mode)?;
    if split.unlearn_indices.is_empty() {
        return Err(argument("the unlearning set is empty"));
    }
    let target_ids: BTreeSet<usize> = targets.ids.iter().copied().collect();
    let unlearn_ids: BTreeSet<usize> = split.unlearn_indices.iter().copied().collect();
    if target_ids != unlearn_ids || targets.len() != split.unlearn_indices.len() {
        return Err(argument("substitute targets must cover exactly the unlearning set"));
    }
    if cfg.lambda2 > 0.0 && extractor.is_none() {
        return Err(Error::Config("lambda2 > 0 needs a feature extractor".into()));
    }

    let raw_hash_before = raw.parameter_hash();
    let g0 = raw.generator()?;
    let d0 = raw.discriminator()?;
    let fid_u_min = match (class_mode, cfg.fid_u_min) {
        (false, _) => None,
        (true, Some(v)) => Some(v),
        (true, None) => default_fid_u_min(&raw.arch, ctx, cfg.seed)?,
    };

    let mut trajectory = vec![ctx.evaluate(&g0, &d0, Phase::Pre, 0, 0.0)?];
    let start = Instant::now();

    let mut state = GanState::new(g0.clone(), d0.clone(), cfg.lr_generator, cfg.lr_discriminator, cfg.adam);
    // Positions into `targets`; the guard forbids every learning index.
    let unlearn_view = GuardedView::new(data, targets.ids.clone(), &split.learn_indices)?;
    let mut rng = stage_rng(cfg.seed, "unlearn");
    let unlearn_batch = cfg.unlearn_batch.unwrap_or(targets.len()).min(targets.len());
    let learn_batch = cfg.learn_batch.unwrap_or(unlearn_batch);

    let learn_view = match cfg.shot {
        Shot::Few => {
            if split.learn_indices.is_empty() {
                return Err(argument("few-shot unlearning needs a non-empty learning set"));
            }
            let pool_size = cfg.learn_pool_size.unwrap_or(DEFAULT_LEARN_POOL).min(split.learn_indices.len());
            let mut pool_rng = stage_rng(cfg.seed, "learn-pool");
            let mut pool: Vec<usize> = rand::seq::index::sample(&mut pool_rng, split.learn_indices.len(), pool_size)
                .into_iter()
                .map(|i| split.learn_indices[i])
                .collect();
            pool.sort_unstable();
            Some(GuardedView::new(data, pool, &split.unlearn_indices)?)
        }
        Shot::Zero => None,
    };
    let zero_classes: Vec<usize> = (0..raw.arch.num_classes).filter(|&c| Some(c) != split.spec.class_label()).collect();

    let mut current_targets = targets.clone();
    let mut unlearn_sampler = BatchSampler::new(targets.len(), &mut rng);
    let mut learn_sampler = learn_view.as_ref().map(|v| BatchSampler::new(v.len(), &mut rng));

    let mut stop_reason = StopReason::Budget;
    let mut divergence = None;
    let mut iterations = 0;
    let mut last_eval = 0;

    for it in 1..=cfg.max_iterations {
        if cfg.mechanism == Mechanism::Projection && (it - 1) % cfg.rerender_every == 0 && it > 1 {
            let alpha = 1.0 - (it - 1) as f64 / cfg.max_iterations as f64;
            current_targets = render_substitutes(
                &g0,
                cfg.mechanism,
                &targets.ids,
                targets.z0.view(),
                &targets.labels,
                stats,
                cfg.truncation_lambda,
                alpha.clamp(0.0, 1.0),
            )?;
        }

        let positions = unlearn_sampler.next(unlearn_batch, &mut rng);
        let (x_u, labels_u) = unlearn_view.fetch(&positions)?;
        let z0 = current_targets.z0.select(ndarray::Axis(0), &positions);
        let subs = current_targets.images.select(ndarray::Axis(0), &positions);
        let u = unlearning_step(&mut state, x_u.view(), &labels_u, z0.view(), subs.view(), extractor, cfg, &mut rng)?;

        let l = match (&learn_view, learn_sampler.as_mut()) {
            (Some(view), Some(sampler)) => {
                let pos = sampler.next(learn_batch.min(view.len()), &mut rng);
                few_shot_learning_step(&mut state, view, &pos, &mut rng)?
            }
            _ => {
                let labels: Vec<usize> = (0..learn_batch).map(|_| zero_classes[rng.random_range(0..zero_classes.len())]).collect();
                let z = normal_matrix(&mut rng, learn_batch, raw.arch.latent_dim);
                zero_shot_learning_step(&mut state, &g0, &d0, z.view(), &labels)?
            }
        };
        iterations = it;

        divergence = [
            ("unlearning discriminator loss", u.d_loss),
            ("unlearning generator loss", u.g_loss),
            ("learning discriminator loss", l.d_loss),
            ("learning generator loss", l.g_loss),
        ]
        .iter()
        .find_map(|(what, v)| check_loss(cfg, what, it, *v));
        if divergence.is_some() {
            stop_reason = StopReason::Divergence;
            break;
        }

        if it % cfg.eval_every == 0 {
            let report = ctx.evaluate(&state.g, &state.d, Phase::During, it, start.elapsed().as_secs_f64())?;
            last_eval = it;
            let reached = match fid_u_min {
                Some(min) => report.fid_u.is_some_and(|f| f >= min),
                None => report.auc_lu >= cfg.auc_min,
            };
            trajectory.push(report);
            if reached && cfg.stop_at_destination {
                stop_reason = StopReason::Destination;
                break;
            }
        }
    }

    if cfg.max_iterations > 0 {
        if last_eval != iterations || stop_reason == StopReason::Divergence {
            let report = ctx.evaluate(&state.g, &state.d, Phase::Post, iterations, start.elapsed().as_secs_f64())?;
            trajectory.push(report);
        } else if let Some(last) = trajectory.last_mut() {
            last.phase = Phase::Post;
        }
    }
    let wall_time_s = if cfg.max_iterations > 0 { start.elapsed().as_secs_f64() } else { 0.0 };
    if let Some(last) = trajectory.last_mut() {
        if last.phase == Phase::Post {
            last.wall_time_s = wall_time_s;
        }
    }

    let snapshot = if cfg.max_iterations == 0 {
        raw.clone()
    } else {
        ModelSnapshot::from_gan(&state.g, &state.d, raw.step + iterations as u64, cfg.seed)
    };
    Ok(UnlearnOutcome {
        snapshot: Some(snapshot),
        trajectory,
        wall_time_s,
        stop_reason,
        iterations,
        fid_u_min,
        divergence,
        accessed_unlearn: unlearn_view.accessed(),
        accessed_learn: learn_view.map(|v| v.accessed()).unwrap_or_default(),
        raw_hash_before,
        raw_hash_after: raw.parameter_hash(),
    })
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub snapshot: ModelSnapshot,
    pub wall_time_s: f64,
    pub accessed: BTreeSet<usize>,
}

/// Retrains from scratch on the learning set only.
pub fn retrain_baseline(data: &LabeledDataset, split: &SplitPlan, arch: &ArchConfig, cfg: &TrainConfig) -> Result<BaselineOutcome> {
    let view = GuardedView::new(data, split.learn_indices.clone(), &split.unlearn_indices)?;
    let start = Instant::now();
    let (snapshot, _) = train_gan_on(&view, arch, cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(BaselineOutcome { snapshot, wall_time_s, accessed: view.accessed() })
}

/// Scores of `x` and their mean; convenience for reports and tests.
pub fn mean_score(d: &DiscriminatorNet, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    Ok(crate::metrics::discriminator_scores(d, x, labels)?.mean().unwrap_or(0.0))
}
