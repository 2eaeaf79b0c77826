use gan_unlearning::datasets::{make_synthetic_ring, plan_split, LabeledDataset, UnlearnSpec};
use gan_unlearning::inversion::{invert, InversionConfig, InversionRequest};
use gan_unlearning::models::{ArchConfig, IdentityFeatures, ModelSnapshot};
use gan_unlearning::rng::{normal_matrix, seeded};
use gan_unlearning::substitution::{compute_latent_stats, render_substitutes, Mechanism};
use gan_unlearning::training::{train_gan, TrainConfig};
use gan_unlearning::unlearning::{
    cascaded_unlearn, distillation_gap, zero_shot_learning_step, GanState, MetricsContext, Shot, StopReason, UnlearnConfig,
};
use rand::Rng;

fn ring_gan(seed: u64) -> (LabeledDataset, LabeledDataset, ModelSnapshot) {
    let train = make_synthetic_ring(8, 60, 0.8, 0.04, seed).unwrap();
    let test = make_synthetic_ring(8, 15, 0.8, 0.04, seed + 100).unwrap();
    let cfg = TrainConfig { steps: 400, lr_generator: 1e-3, lr_discriminator: 1e-3, seed, ..Default::default() };
    let (snap, _) = train_gan(&train, &ArchConfig::ring(8), &cfg).unwrap();
    (train, test, snap)
}

#[test]
fn zero_shot_run_never_reads_learning_data_and_keeps_raw_models() {
    let (train, test, raw) = ring_gan(1);
    let split = plan_split(&train, &test, UnlearnSpec::item(8, 5)).unwrap();
    let g0 = raw.generator().unwrap();
    let (xu, yu) = train.gather(&split.unlearn_indices).unwrap();
    let inv_cfg = InversionConfig { steps: 50, ..Default::default() };
    let req = InversionRequest { images: xu.view(), labels: &yu, ids: &split.unlearn_indices, initial: None };
    let inv = invert(&g0, &req, &inv_cfg, None).unwrap();
    let stats = compute_latent_stats(inv.latent_codes.view(), &yu, 8).unwrap();
    let targets =
        render_substitutes(&g0, Mechanism::Average, &split.unlearn_indices, inv.latent_codes.view(), &yu, &stats, 0.5, 1.0).unwrap();
    let features = IdentityFeatures { dim: 2 };
    let ctx = MetricsContext::new(&train, &test, &split, &features, None, 100, 10, 3).unwrap();
    let hash = raw.parameter_hash();
    let cfg = UnlearnConfig { shot: Shot::Zero, max_iterations: 30, eval_every: 10, seed: 2, ..Default::default() };
    let out = cascaded_unlearn(&raw, &train, &split, &targets, &stats, &cfg, &ctx, None).unwrap();
    assert!(out.accessed_learn.is_empty(), "zero-shot read {:?}", out.accessed_learn);
    assert_eq!(out.raw_hash_before, hash);
    assert_eq!(out.raw_hash_after, hash);
    assert_eq!(raw.parameter_hash(), hash);
    assert_ne!(out.snapshot.as_ref().unwrap().parameter_hash(), hash);
    assert_eq!(out.stop_reason, StopReason::Budget);
    assert_eq!(out.iterations, 30);
    assert_eq!(out.trajectory.len(), 4);
    let accessed: Vec<usize> = out.accessed_unlearn.iter().copied().collect();
    let mut expected = split.unlearn_indices.clone();
    expected.sort_unstable();
    assert_eq!(accessed, expected);
}

#[test]
fn distillation_gap_shrinks_from_a_perturbed_discriminator() {
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        let (_, _, raw) = ring_gan(10 + seed);
        let g0 = raw.generator().unwrap();
        let d0 = raw.discriminator().unwrap();
        let mut d = d0.clone();
        let mut rng = seeded(seed);
        for p in d.mlp_mut().params_mut() {
            *p += 0.05 * rng.random_range(-1.0..1.0);
        }
        let labels: Vec<usize> = (0..128).map(|i| i % 8).collect();
        let z_eval = normal_matrix(&mut rng, labels.len(), 4);
        let x_eval = g0.forward(z_eval.view(), &labels).unwrap();
        let before = distillation_gap(&d, &d0, x_eval.view(), &labels).unwrap();
        assert!(before > 0.0);
        let mut state = GanState::new(g0.clone(), d, 1e-4, 1e-3, Default::default());
        for _ in 0..200 {
            let z = normal_matrix(&mut rng, labels.len(), 4);
            zero_shot_learning_step(&mut state, &g0, &d0, z.view(), &labels).unwrap();
        }
        let after = distillation_gap(&state.d, &d0, x_eval.view(), &labels).unwrap();
        ratios.push(after / before);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 1.0, "median gap ratio {:?}", ratios);
}
