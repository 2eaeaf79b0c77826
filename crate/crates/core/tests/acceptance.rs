//! Acceptance run: one pass/fail line per criterion, nonzero exit if any
//! fails. The desk criteria train on the digit subset under `data/`, so a
//! full run takes a while on one core.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gan_unlearning::experiments::{ExperimentConfig, Pipeline};
use gan_unlearning::inversion::{invert, InversionRequest};
use gan_unlearning::metrics::generate_batched;
use gan_unlearning::rng::{normal_matrix, seeded};
use gan_unlearning::unlearning::{distillation_gap, StopReason, UnlearnOutcome};
use serde_json::Value;

use common::Check;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Desk {
    out: PathBuf,
}

impl Desk {
    fn pipeline(&self, config: &str, overrides: &[String]) -> gan_unlearning::Result<Pipeline> {
        let mut all = vec![format!("output_dir={}", self.out.display())];
        all.extend_from_slice(overrides);
        let cfg = ExperimentConfig::load_with_overrides(configs_dir().join(config), &all)?;
        Pipeline::new(&cfg)
    }

    fn item(&self, overrides: &[&str]) -> gan_unlearning::Result<Pipeline> {
        self.pipeline("desk-item64.json", &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn metric_oracles() -> Check {
    let auc = common::auc_oracle(200, 1)?;
    let fre = common::frechet_oracle(100, 2)?;
    Ok(format!("{auc}; {fre}"))
}

fn gradients() -> Check {
    let mut worst = 0.0f64;
    for case in common::gradient_cases(3) {
        if case.params > 1000 {
            return Err(format!("{} uses {} parameters", case.name, case.params));
        }
        if case.rel_error > 1e-4 {
            return Err(format!("{}: relative error {:.2e}", case.name, case.rel_error));
        }
        worst = worst.max(case.rel_error);
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn inversion_fidelity(desk: &Desk) -> Check {
    let mut p = desk.item(&[]).map_err(fail)?;
    let (_, raw) = p.raw_gan().map_err(fail)?;
    let g = raw.generator().map_err(fail)?;
    let mut rng = seeded(404);
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let z = normal_matrix(&mut rng, 32, g.latent_dim());
    let images = generate_batched(&g, z.view(), &labels).map_err(fail)?;
    let ids: Vec<usize> = (0..32).collect();
    let cfg = p.config.inversion.clone();
    if cfg.steps > 500 {
        return Err(format!("inversion budget {} exceeds 500 steps", cfg.steps));
    }
    let req = InversionRequest { images: images.view(), labels: &labels, ids: &ids, initial: None };
    let inv = invert(&g, &req, &cfg, None).map_err(fail)?;
    let worst = inv.final_errors.iter().copied().fold(0.0, f64::max);
    let over = inv.final_errors.iter().filter(|&&e| e > 0.01).count();
    if over > 0 {
        return Err(format!("{over} of 32 images above MSE 0.01 (worst {worst:.4})"));
    }
    Ok(format!("worst MSE {worst:.5} after {} steps", inv.iterations_used))
}

struct ItemRuns {
    outcomes: Vec<UnlearnOutcome>,
    saving_factor: Option<f64>,
}

fn item_runs(desk: &Desk) -> gan_unlearning::Result<ItemRuns> {
    let summary = desk.item(&[])?.run()?;
    let saving_factor = summary.saving_factor();
    let mut outcomes = vec![summary.outcome];
    for rep in 1..3 {
        let r = format!("replicate={rep}");
        let (_, o) = desk.item(&[&r, "baseline=false"])?.unlearn()?;
        outcomes.push(o);
    }
    Ok(ItemRuns { outcomes, saving_factor })
}

fn item_phenomenon(runs: &ItemRuns) -> Check {
    let mut lines = Vec::new();
    let mut passed = 0;
    for (rep, o) in runs.outcomes.iter().enumerate() {
        let (pre, post) = (o.pre(), o.post());
        let start_ok = (0.40..=0.65).contains(&pre.auc_lu);
        let reached = o.stop_reason == StopReason::Destination && post.auc_lu >= 0.8;
        let fid_ok = post.fid_l <= 3.0 * pre.fid_l;
        if start_ok && reached && fid_ok {
            passed += 1;
        }
        lines.push(format!(
            "rep {rep}: AUC_lu {:.3}->{:.3} {:?} at {} it, FID_l {:.2}->{:.2}",
            pre.auc_lu, post.auc_lu, o.stop_reason, o.iterations, pre.fid_l, post.fid_l
        ));
    }
    let msg = format!("{passed}/3 seeds; {}", lines.join("; "));
    if passed >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn logan_audit(runs: &ItemRuns) -> Check {
    let o = &runs.outcomes[0];
    let (pre, post) = (o.pre().auc_ut, o.post().auc_ut);
    let msg = format!("AUC_ut {pre:.3} -> {post:.3}");
    if post < pre && post <= 0.6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn efficiency(runs: &ItemRuns) -> Check {
    let o = &runs.outcomes[0];
    match runs.saving_factor {
        Some(f) if f >= 5.0 => Ok(format!("T {:.1}s, retraining {:.1}s, factor {f:.1}", o.wall_time_s, f * o.wall_time_s)),
        Some(f) => Err(format!("factor {f:.2} below 5")),
        None => Err("no baseline timing".into()),
    }
}

fn class_phenomenon(desk: &Desk) -> Check {
    let mut p = desk.pipeline("desk-class7.json", &[]).map_err(fail)?;
    let (_, o) = p.unlearn().map_err(fail)?;
    let (pre, post) = (o.pre(), o.post());
    let (fu0, fu1) = (pre.fid_u.unwrap_or(f64::NAN), post.fid_u.unwrap_or(f64::NAN));
    let (c0, c1) = (pre.confidence_u.unwrap_or(f64::NAN), post.confidence_u.unwrap_or(f64::NAN));
    let (a0, a1) = (pre.acc.unwrap_or(f64::NAN), post.acc.unwrap_or(f64::NAN));
    let msg = format!(
        "FID_u {fu0:.1}->{fu1:.1} ({:.1}x), confidence {c0:.3}->{c1:.3}, ACC {a0:.3}->{a1:.3}, {} it",
        fu1 / fu0,
        o.iterations
    );
    if fu1 >= 10.0 * fu0 && c0 >= 0.8 && c1 < 0.5 && a0 - a1 <= 0.1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn f_label_ordering(desk: &Desk) -> Check {
    let mut medians = Vec::new();
    for f in ["-1", "0.1", "0.5"] {
        let mut scores = Vec::new();
        for rep in 0..3 {
            let overrides = [
                format!("unlearn.f_label={f}"),
                format!("replicate={rep}"),
                "unlearn.max_iterations=200".to_string(),
                "unlearn.stop_at_destination=false".to_string(),
            ];
            let (_, o) = desk.pipeline("desk-item64.json", &overrides).map_err(fail)?.unlearn().map_err(fail)?;
            scores.push(o.post().mean_score_u);
        }
        medians.push((f, median(scores)));
    }
    let msg = medians.iter().map(|(f, m)| format!("F={f}: {m:.3}")).collect::<Vec<_>>().join(", ");
    if medians.windows(2).all(|w| w[0].1 < w[1].1) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn zero_shot_integrity(desk: &Desk) -> Check {
    let mut p = desk.item(&["unlearn.shot=zero", "unlearn.max_iterations=50", "baseline=false"]).map_err(fail)?;
    let (_, raw) = p.raw_gan().map_err(fail)?;
    let stored = raw.parameter_hash();
    let d0 = raw.discriminator().map_err(fail)?;
    let g0 = raw.generator().map_err(fail)?;
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let z = normal_matrix(&mut seeded(10), 64, g0.latent_dim());
    let x = generate_batched(&g0, z.view(), &labels).map_err(fail)?;
    let gap = distillation_gap(&d0.clone(), &d0, x.view(), &labels).map_err(fail)?;
    if gap != 0.0 {
        return Err(format!("distillation term {gap} with D = D0"));
    }
    let (_, o) = p.unlearn().map_err(fail)?;
    if !o.accessed_learn.is_empty() {
        return Err(format!("{} learning samples read", o.accessed_learn.len()));
    }
    if o.raw_hash_before != stored || o.raw_hash_after != stored || raw.parameter_hash() != stored {
        return Err("raw snapshot hash changed".into());
    }
    let reloaded = gan_unlearning::models::ModelSnapshot::load(p.records().iter().find(|r| r.stage == "train").unwrap().dir.join("raw.gunl"))
        .map_err(fail)?;
    if reloaded.parameter_hash() != stored {
        return Err("stored raw snapshot changed".into());
    }
    Ok(format!("gap 0, raw hash {}.., {} it, 0 learning reads", &stored[..12], o.iterations))
}

fn strip_wall_times(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_time_s");
            map.values_mut().for_each(strip_wall_times);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall_times),
        _ => {}
    }
}

/// Stage outputs with wall-clock fields dropped from the JSON files.
fn stage_contents(p: &Pipeline) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for r in p.records() {
        for entry in std::fs::read_dir(&r.dir).unwrap() {
            let path = entry.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            let bytes = if path.extension().is_some_and(|e| e == "json") {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                strip_wall_times(&mut v);
                serde_json::to_vec(&v).unwrap()
            } else {
                bytes
            };
            out.insert(format!("{}/{}", r.stage, path.file_name().unwrap().to_string_lossy()), bytes);
        }
    }
    out
}

fn determinism(desk: &Desk) -> Check {
    let scratch = tempfile::tempdir().map_err(fail)?;
    let ring = |force: bool| -> gan_unlearning::Result<BTreeMap<String, Vec<u8>>> {
        let cfg = ExperimentConfig::load_with_overrides(
            configs_dir().join("ring-item.json"),
            &[format!("output_dir={}", scratch.path().display())],
        )?;
        let mut p = Pipeline::new(&cfg)?;
        p.force = force;
        p.run()?;
        Ok(stage_contents(&p))
    };
    let first = ring(false).map_err(fail)?;
    let second = ring(true).map_err(fail)?;
    compare_contents("ring", &first, &second)?;

    let mut p = desk.item(&[]).map_err(fail)?;
    p.unlearn().map_err(fail)?;
    let before = stage_contents(&p);
    let mut q = desk.item(&[]).map_err(fail)?;
    q.force = true;
    q.unlearn().map_err(fail)?;
    compare_contents("desk", &before, &stage_contents(&q))?;
    Ok(format!("{} ring and {} desk stage files identical after forced recomputation", first.len(), before.len()))
}

fn compare_contents(what: &str, a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Result<(), String> {
    if a.keys().ne(b.keys()) {
        return Err(format!("{what}: different stage files"));
    }
    for (k, v) in a {
        if &b[k] != v {
            return Err(format!("{what}: {k} differs"));
        }
    }
    Ok(())
}

fn report(results: &mut Vec<bool>, id: usize, title: &str, check: impl FnOnce() -> Check) {
    let start = Instant::now();
    let outcome = check();
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("[{tag}] {id:>2} {title} ({secs:.1}s): {detail}");
    results.push(outcome.is_ok());
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let desk = Desk { out: dir.path().to_path_buf() };
    let mut results = Vec::new();

    report(&mut results, 1, "metric oracles", metric_oracles);
    report(&mut results, 2, "substitute mechanisms", || common::substitute_oracle(1000, 3));
    report(&mut results, 3, "gradient correctness", gradients);
    report(&mut results, 4, "inversion fidelity", || inversion_fidelity(&desk));

    let start = Instant::now();
    let runs = item_runs(&desk);
    println!("       desk item runs finished in {:.1}s", start.elapsed().as_secs_f64());
    match &runs {
        Ok(runs) => {
            report(&mut results, 5, "item unlearning", || item_phenomenon(runs));
            report(&mut results, 7, "LOGAN audit", || logan_audit(runs));
            report(&mut results, 8, "efficiency vs retraining", || efficiency(runs));
        }
        Err(e) => {
            for (id, title) in [(5, "item unlearning"), (7, "LOGAN audit"), (8, "efficiency vs retraining")] {
                report(&mut results, id, title, || Err(format!("desk item runs failed: {e}")));
            }
        }
    }
    report(&mut results, 6, "class unlearning", || class_phenomenon(&desk));
    report(&mut results, 9, "F_label ordering", || f_label_ordering(&desk));
    report(&mut results, 10, "zero-shot integrity", || zero_shot_integrity(&desk));
    report(&mut results, 11, "determinism", || determinism(&desk));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
