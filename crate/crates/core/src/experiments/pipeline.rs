use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{content_hash, ExperimentConfig};
use crate::datasets::{plan_split, LabeledDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::inversion::{invert, load_inversion, save_inversion, InversionRequest, InversionResult};
use crate::metrics::{logan_audit, MetricsReport, Phase};
use crate::models::{ArchConfig, ClassifierNet, FeatureMap, IdentityFeatures, ModelSnapshot};
use crate::rng::stage_rng;
use crate::substitution::{compute_latent_stats, load_targets, render_substitutes, save_targets, LatentStats, SubstituteTargetSet};
use crate::training::{accuracy, train_classifier, train_gan};
use crate::unlearning::{cascaded_unlearn, retrain_baseline, MetricsContext, UnlearnOutcome};

/// Bumped whenever a stage's on-disk output changes meaning.
const STAGE_FORMAT: u32 = 1;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub dir: PathBuf,
    /// True when the cached output was used instead of recomputing.
    pub reused: bool,
}

#[derive(Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub tool_version: String,
    pub created_unix_s: u64,
    /// Stage name to content key.
    pub stages: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let missing: Vec<String> = self
            .artifacts
            .iter()
            .filter(|(_, p)| !p.exists())
            .map(|(k, p)| format!("{k} ({})", p.display()))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> Result<&Path> {
        self.artifacts
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::MissingArtifacts(vec![name.to_string()]))
    }
}

/// Result of the retraining baseline, as stored next to its snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub wall_time_s: f64,
    pub steps: usize,
    pub unlearn_samples_read: usize,
    pub report: MetricsReport,
}

/// Everything `run` produced, in memory.
#[derive(Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub outcome: UnlearnOutcome,
    pub baseline: Option<BaselineReport>,
    pub stages: Vec<StageRecord>,
}

impl RunSummary {
    /// `T_retrain / T_cascade` when a baseline ran.
    pub fn saving_factor(&self) -> Option<f64> {
        self.baseline.as_ref().map(|b| b.wall_time_s / self.outcome.wall_time_s)
    }
}

/// Executes pipeline stages in dependency order. Each stage's output lives in
/// `<output_dir>/cache/<stage>-<key>` where the key hashes the stage's inputs
/// and upstream keys; a stage whose directory carries a matching marker is
/// loaded instead of recomputed.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Recompute every stage even when a cached output matches.
    pub force: bool,
    arch: ArchConfig,
    cache_dir: PathBuf,
    run_dir: PathBuf,
    records: Vec<StageRecord>,
    done: HashMap<String, (String, PathBuf)>,
}

fn rel_key(key: &str) -> &str {
    &key[..16]
}

impl Pipeline {
    /// Loads data and validates the config; writes nothing.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let (train, test) = config.dataset.load(config.seed)?;
        config.validate(&train, &test)?;
        let resolved = config.resolve(train.num_classes());
        let arch = resolved.arch.clone().expect("resolve fills the architecture");
        Ok(Self {
            cache_dir: resolved.output_dir.join("cache"),
            run_dir: resolved.output_dir.join(&resolved.name),
            config: resolved,
            train,
            test,
            force: false,
            arch,
            records: Vec::new(),
            done: HashMap::new(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn config_hash(&self) -> String {
        content_hash(&self.config.to_value())
    }

    pub fn dataset_hash(&self) -> String {
        content_hash(&json!({"dataset": self.config.dataset, "seed": self.data_seed()}))
    }

    fn data_seed(&self) -> Option<u64> {
        self.config.dataset.is_vector().then_some(self.config.seed)
    }

    fn stage(&mut self, name: &str, inputs: Value, produce: impl FnOnce(&mut Self, &Path) -> Result<()>) -> Result<(String, PathBuf)> {
        if let Some(hit) = self.done.get(name) {
            return Ok(hit.clone());
        }
        let key = content_hash(&json!({"stage": name, "format": STAGE_FORMAT, "inputs": inputs}));
        let dir = self.cache_dir.join(format!("{name}-{}", rel_key(&key)));
        let marker = dir.join("stage.json");
        let cached = !self.force
            && std::fs::read(&marker)
                .ok()
                .and_then(|b| serde_json::from_slice::<StageMarker>(&b).ok())
                .is_some_and(|m| m.key == key && m.stage == name);
        if !cached {
            let tmp = self.cache_dir.join(format!("{name}-{}.partial", rel_key(&key)));
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp)?;
            }
            std::fs::create_dir_all(&tmp)?;
            produce(self, &tmp)?;
            let m = StageMarker { stage: name.to_string(), key: key.clone() };
            std::fs::write(tmp.join("stage.json"), serde_json::to_vec_pretty(&m)?)?;
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            std::fs::rename(&tmp, &dir)?;
        }
        self.records.push(StageRecord { stage: name.to_string(), key: key.clone(), dir: dir.clone(), reused: cached });
        self.done.insert(name.to_string(), (key.clone(), dir.clone()));
        Ok((key, dir))
    }

    fn data_inputs(&self) -> Value {
        json!({"dataset": self.config.dataset, "seed": self.data_seed()})
    }

    pub fn split(&mut self) -> Result<(String, SplitPlan)> {
        let inputs = json!({"data": self.data_inputs(), "target": self.config.unlearn_target});
        let (key, dir) = self.stage("split", inputs, |p, out| {
            plan_split(&p.train, &p.test, p.config.unlearn_target)?.save(out.join("split.json"))
        })?;
        Ok((key, SplitPlan::load(dir.join("split.json"))?))
    }

    pub fn raw_gan(&mut self) -> Result<(String, ModelSnapshot)> {
        let inputs = json!({"data": self.data_inputs(), "arch": self.arch, "train": self.config.train});
        let (key, dir) = self.stage("train", inputs, |p, out| {
            let (snap, history) = train_gan(&p.train, &p.arch, &p.config.train)?;
            snap.save(out.join("raw.gunl"))?;
            history.write_csv(out.join("history.csv"))
        })?;
        Ok((key, ModelSnapshot::load(dir.join("raw.gunl"))?))
    }

    pub fn classifier(&mut self) -> Result<(String, ClassifierNet)> {
        let inputs = json!({"data": self.data_inputs(), "arch": self.arch, "classifier": self.config.classifier});
        let (key, dir) = self.stage("classifier", inputs, |p, out| {
            let clf = train_classifier(&p.train, &p.arch, &p.config.classifier)?;
            ModelSnapshot::from_classifier(&clf, p.config.classifier.steps as u64, p.config.classifier.seed).save(out.join("classifier.gunl"))?;
            let acc = json!({"train_accuracy": accuracy(&clf, &p.train)?, "test_accuracy": accuracy(&clf, &p.test)?});
            std::fs::write(out.join("accuracy.json"), serde_json::to_vec_pretty(&acc)?)?;
            Ok(())
        })?;
        Ok((key, ModelSnapshot::load(dir.join("classifier.gunl"))?.classifier()?))
    }

    fn identity(&self) -> Option<IdentityFeatures> {
        self.config.uses_identity_features().then_some(IdentityFeatures { dim: self.arch.data_dim() })
    }

    /// Key of the feature extractor, when one feeds into `what`.
    fn extractor_key(&mut self, needed: bool) -> Result<Option<String>> {
        if !needed || self.config.uses_identity_features() {
            return Ok(None);
        }
        Ok(Some(self.classifier()?.0))
    }

    fn invert_rows(&self, g_snap: &ModelSnapshot, clf: Option<&ClassifierNet>, ids: &[usize]) -> Result<InversionResult> {
        let g = g_snap.generator()?;
        let (images, labels) = self.train.gather(ids)?;
        let identity = self.identity();
        let extractor: Option<&dyn FeatureMap> = match (&identity, clf) {
            (Some(i), _) => Some(i),
            (None, Some(c)) => Some(c),
            _ => None,
        };
        let req = InversionRequest { images: images.view(), labels: &labels, ids, initial: None };
        invert(&g, &req, &self.config.inversion, extractor)
    }

    fn needs_perceptual(&self) -> bool {
        self.config.inversion.perceptual_weight > 0.0
    }

    pub fn latent_stats(&mut self) -> Result<(String, LatentStats)> {
        let (gan_key, raw) = self.raw_gan()?;
        let ext_key = self.extractor_key(self.needs_perceptual())?;
        let clf = match ext_key {
            Some(_) => Some(self.classifier()?.1),
            None => None,
        };
        let inputs = json!({"train": gan_key, "extractor": ext_key, "inversion": self.config.inversion, "stats": self.config.stats, "seed": self.config.seed});
        let (key, dir) = self.stage("stats", inputs, |p, out| {
            let mut rng = stage_rng(p.config.seed, "stats/reference");
            let mut ids = Vec::new();
            for c in 0..p.train.num_classes() {
                let members = p.train.indices_of_class(c);
                let n = p.config.stats.per_class.min(members.len());
                ids.extend(rand::seq::index::sample(&mut rng, members.len(), n).into_iter().map(|i| members[i]));
            }
            ids.sort_unstable();
            let inv = p.invert_rows(&raw, clf.as_ref(), &ids)?;
            let stats = compute_latent_stats(inv.latent_codes.view(), &inv.labels, p.train.num_classes())?;
            save_inversion(&inv, out.join("reference"), "")?;
            stats.save(out.join("stats.json"))
        })?;
        Ok((key, LatentStats::load(dir.join("stats.json"))?))
    }

    pub fn inversion(&mut self) -> Result<(String, InversionResult)> {
        let (gan_key, raw) = self.raw_gan()?;
        let (split_key, split) = self.split()?;
        let ext_key = self.extractor_key(self.needs_perceptual())?;
        let clf = match ext_key {
            Some(_) => Some(self.classifier()?.1),
            None => None,
        };
        let inputs = json!({"train": gan_key, "split": split_key, "extractor": ext_key, "inversion": self.config.inversion});
        let (key, dir) = self.stage("invert", inputs.clone(), |p, out| {
            let inv = p.invert_rows(&raw, clf.as_ref(), &split.unlearn_indices)?;
            save_inversion(&inv, out.join("inversion"), &content_hash(&inputs))
        })?;
        Ok((key, load_inversion(dir.join("inversion"))?.0))
    }

    pub fn targets(&mut self) -> Result<(String, SubstituteTargetSet)> {
        let (gan_key, raw) = self.raw_gan()?;
        let (inv_key, inv) = self.inversion()?;
        let (stats_key, stats) = self.latent_stats()?;
        let u = &self.config.unlearn;
        let inputs = json!({"train": gan_key, "invert": inv_key, "stats": stats_key, "mechanism": u.mechanism, "truncation_lambda": u.truncation_lambda});
        let (key, dir) = self.stage("targets", inputs.clone(), |p, out| {
            let g0 = raw.generator()?;
            let u = &p.config.unlearn;
            let set = render_substitutes(&g0, u.mechanism, &inv.ids, inv.latent_codes.view(), &inv.labels, &stats, u.truncation_lambda, 1.0)?;
            save_targets(&set, out.join("targets"), &content_hash(&inputs))
        })?;
        Ok((key, load_targets(dir.join("targets"))?.0))
    }

    fn with_context<T>(&self, split: &SplitPlan, clf: &ClassifierNet, f: impl FnOnce(&MetricsContext<'_>) -> Result<T>) -> Result<T> {
        let identity = self.identity();
        let extractor: &dyn FeatureMap = match &identity {
            Some(i) => i,
            None => clf,
        };
        let e = &self.config.evaluation;
        let ctx = MetricsContext::new(&self.train, &self.test, split, extractor, Some(clf), e.fid_samples, e.acc_per_class, self.config.evaluation_seed())?;
        f(&ctx)
    }

    fn evaluation_inputs(&mut self) -> Result<Value> {
        let (clf_key, _) = self.classifier()?;
        Ok(json!({"classifier": clf_key, "evaluation": self.config.evaluation, "seed": self.config.evaluation_seed(), "identity": self.config.uses_identity_features()}))
    }

    /// Runs cascaded unlearning; the outcome carries the unlearned snapshot.
    pub fn unlearn(&mut self) -> Result<(String, UnlearnOutcome)> {
        let (gan_key, raw) = self.raw_gan()?;
        let (split_key, split) = self.split()?;
        let (targets_key, targets) = self.targets()?;
        let (stats_key, stats) = self.latent_stats()?;
        let (_, clf) = self.classifier()?;
        let eval = self.evaluation_inputs()?;
        let ext_key = self.extractor_key(self.config.unlearn.lambda2 > 0.0)?;
        let inputs = json!({
            "train": gan_key, "split": split_key, "targets": targets_key, "stats": stats_key,
            "extractor": ext_key, "evaluation": eval, "unlearn": self.config.unlearn,
        });
        let (key, dir) = self.stage("unlearn", inputs, |p, out| {
            let identity = p.identity();
            let extractor: Option<&dyn FeatureMap> = if p.config.unlearn.lambda2 > 0.0 {
                Some(match &identity {
                    Some(i) => i,
                    None => &clf,
                })
            } else {
                None
            };
            let outcome = p.with_context(&split, &clf, |ctx| {
                cascaded_unlearn(&raw, &p.train, &split, &targets, &stats, &p.config.unlearn, ctx, extractor)
            })?;
            check_unlearn_access(&outcome, &split, p.config.unlearn.shot)?;
            outcome.snapshot.as_ref().expect("cascade returns a snapshot").save(out.join("unlearned.gunl"))?;
            std::fs::write(out.join("outcome.json"), serde_json::to_vec_pretty(&outcome)?)?;
            Ok(())
        })?;
        let mut outcome: UnlearnOutcome = serde_json::from_slice(&std::fs::read(dir.join("outcome.json"))?)?;
        outcome.snapshot = Some(ModelSnapshot::load(dir.join("unlearned.gunl"))?);
        Ok((key, outcome))
    }

    pub fn baseline(&mut self) -> Result<(String, BaselineReport, ModelSnapshot)> {
        let (split_key, split) = self.split()?;
        let (_, clf) = self.classifier()?;
        let eval = self.evaluation_inputs()?;
        let cfg = self.config.baseline_train_config();
        let inputs = json!({"split": split_key, "arch": self.arch, "train": cfg, "evaluation": eval});
        let (key, dir) = self.stage("baseline", inputs, |p, out| {
            let outcome = retrain_baseline(&p.train, &split, &p.arch, &cfg)?;
            let leaked = split.unlearn_indices.iter().filter(|i| outcome.accessed.contains(i)).count();
            if leaked > 0 {
                return Err(Error::Integrity(format!("baseline retraining read {leaked} unlearning samples")));
            }
            let (g, d) = (outcome.snapshot.generator()?, outcome.snapshot.discriminator()?);
            let report = p.with_context(&split, &clf, |ctx| ctx.evaluate(&g, &d, Phase::Post, cfg.steps, outcome.wall_time_s))?;
            outcome.snapshot.save(out.join("baseline.gunl"))?;
            let b = BaselineReport { wall_time_s: outcome.wall_time_s, steps: cfg.steps, unlearn_samples_read: leaked, report };
            std::fs::write(out.join("baseline.json"), serde_json::to_vec_pretty(&b)?)?;
            Ok(())
        })?;
        let report: BaselineReport = serde_json::from_slice(&std::fs::read(dir.join("baseline.json"))?)?;
        Ok((key, report, ModelSnapshot::load(dir.join("baseline.gunl"))?))
    }

    /// Metrics of an arbitrary GAN snapshot against this config's split.
    pub fn evaluate_snapshot(&mut self, snapshot: &ModelSnapshot) -> Result<MetricsReport> {
        let (_, split) = self.split()?;
        let (_, clf) = self.classifier()?;
        let (g, d) = (snapshot.generator()?, snapshot.discriminator()?);
        self.with_context(&split, &clf, |ctx| ctx.evaluate(&g, &d, Phase::Post, 0, 0.0))
    }

    /// LOGAN audit AUC_{u,t} of a snapshot's discriminator.
    pub fn audit_snapshot(&mut self, snapshot: &ModelSnapshot) -> Result<f64> {
        let (_, split) = self.split()?;
        let d = snapshot.discriminator()?;
        let (xu, yu) = self.train.gather(&split.unlearn_indices)?;
        let (xt, yt) = self.test.gather(&split.audit_test_indices(&self.test))?;
        logan_audit(&d, (xu.view(), &yu), (xt.view(), &yt))
    }

    fn artifact(&self, stage: &str, file: &str) -> PathBuf {
        self.done[stage].1.join(file)
    }

    /// Full pipeline: every stage, run-level reports, optional baseline and
    /// plots, then the manifest.
    pub fn run(&mut self) -> Result<RunSummary> {
        let (_, outcome) = self.unlearn()?;
        let baseline = if self.config.baseline { Some(self.baseline()?.1) } else { None };

        std::fs::create_dir_all(&self.run_dir)?;
        let run_dir = self.run_dir.clone();
        let write_json = |name: &str, v: Value| -> Result<PathBuf> {
            let path = run_dir.join(name);
            std::fs::write(&path, serde_json::to_vec_pretty(&v)?)?;
            Ok(path)
        };
        let mut artifacts = BTreeMap::new();
        artifacts.insert("config".to_string(), write_json("config.json", self.config.to_value())?);
        artifacts.insert("report_pre".to_string(), write_json("report_pre.json", serde_json::to_value(outcome.pre())?)?);
        artifacts.insert("report_post".to_string(), write_json("report_post.json", serde_json::to_value(outcome.post())?)?);
        artifacts.insert("outcome".to_string(), self.artifact("unlearn", "outcome.json"));
        artifacts.insert("trajectory".to_string(), write_trajectory_csv(&outcome.trajectory, &self.run_dir.join("trajectory.csv"))?);
        artifacts.insert("split".to_string(), self.artifact("split", "split.json"));
        artifacts.insert("raw_snapshot".to_string(), self.artifact("train", "raw.gunl"));
        artifacts.insert("train_history".to_string(), self.artifact("train", "history.csv"));
        artifacts.insert("classifier".to_string(), self.artifact("classifier", "classifier.gunl"));
        artifacts.insert("inversion".to_string(), self.artifact("invert", "inversion.json"));
        artifacts.insert("latent_stats".to_string(), self.artifact("stats", "stats.json"));
        artifacts.insert("targets".to_string(), self.artifact("targets", "targets.json"));
        artifacts.insert("unlearned_snapshot".to_string(), self.artifact("unlearn", "unlearned.gunl"));
        if let Some(b) = &baseline {
            artifacts.insert("baseline_snapshot".to_string(), self.artifact("baseline", "baseline.gunl"));
            artifacts.insert("baseline_report".to_string(), write_json("baseline_report.json", serde_json::to_value(b)?)?);
        }

        let mut manifest = RunManifest {
            name: self.config.name.clone(),
            config_hash: self.config_hash(),
            dataset_hash: self.dataset_hash(),
            tool_version: TOOL_VERSION.to_string(),
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            stages: self.done.iter().map(|(k, (key, _))| (k.clone(), key.clone())).collect(),
            artifacts,
        };
        if self.config.plots.enabled {
            let plots = super::plots::emit_plots_for(self, &manifest)?;
            for p in plots {
                let name = format!("plot_{}", p.file_stem().and_then(|s| s.to_str()).unwrap_or("plot"));
                manifest.artifacts.insert(name, p);
            }
        }
        manifest.save(self.run_dir.join("manifest.json"))?;
        Ok(RunSummary { manifest, outcome, baseline, stages: self.records.clone() })
    }
}

fn check_unlearn_access(outcome: &UnlearnOutcome, split: &SplitPlan, shot: crate::unlearning::Shot) -> Result<()> {
    if shot == crate::unlearning::Shot::Zero && !outcome.accessed_learn.is_empty() {
        return Err(Error::Integrity("zero-shot unlearning read learning samples".into()));
    }
    if split.learn_indices.iter().any(|i| outcome.accessed_unlearn.contains(i)) {
        return Err(Error::Integrity("the unlearning phase read learning samples".into()));
    }
    if split.unlearn_indices.iter().any(|i| outcome.accessed_learn.contains(i)) {
        return Err(Error::Integrity("the learning phase read unlearning samples".into()));
    }
    Ok(())
}

pub fn write_trajectory_csv(trajectory: &[MetricsReport], path: &Path) -> Result<PathBuf> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("phase,iteration,auc_lu,fid_l,fid_u,acc,auc_ut,confidence_u,mean_score_l,mean_score_u,mean_score_t,wall_time_s\n");
    for r in trajectory {
        let phase = serde_json::to_value(r.phase)?;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            phase.as_str().unwrap_or(""),
            r.iteration,
            r.auc_lu,
            r.fid_l,
            opt(r.fid_u),
            opt(r.acc),
            r.auc_ut,
            opt(r.confidence_u),
            r.mean_score_l,
            r.mean_score_u,
            r.mean_score_t,
            r.wall_time_s
        ));
    }
    std::fs::write(path, s)?;
    Ok(path.to_path_buf())
}

/// Loads and validates a config (with dotted overrides) and runs the whole
/// pipeline.
pub fn run_experiment(config_path: impl AsRef<Path>, overrides: &[String]) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load_with_overrides(config_path, overrides)?;
    Pipeline::new(&cfg)?.run()
}
