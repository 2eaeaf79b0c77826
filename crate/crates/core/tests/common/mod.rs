//! Independent oracles shared by the integration tests and the acceptance
//! run. Each check returns a one-line detail on success.
#![allow(dead_code)]

use gan_unlearning::metrics::{auc, frechet_distance, GaussianStats};
use gan_unlearning::models::{init_classifier, init_models, ArchConfig, DiscriminatorNet, GeneratorNet};
use gan_unlearning::nn::sigmoid;
use gan_unlearning::rng::{normal_matrix, seeded, Rng};
use gan_unlearning::substitution::{
    substitute_average, substitute_other_class, substitute_projection, substitute_truncation, LatentStats,
};
use gan_unlearning::training::{d_loss, discriminator_objective, g_loss, generator_objective};
use gan_unlearning::unlearning::{
    discriminator_unlearn_loss, discriminator_unlearn_objective, generator_unlearn_loss, generator_unlearn_objective,
    zero_shot_discriminator_learning_loss, zero_shot_discriminator_objective,
};
use ndarray::{Array1, Array2};
use rand::Rng as _;

pub type Check = Result<String, String>;

pub fn brute_auc(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0.0;
    for x in a {
        for y in b {
            wins += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (a.len() * b.len()) as f64
}

/// Scores drawn from a small grid so ties are frequent.
fn tied_scores(rng: &mut Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..40);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..levels) as f64 / levels as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect()
}

/// Sorting-based AUC must equal the pairwise count exactly.
pub fn auc_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut ties = 0usize;
    for case in 0..cases {
        let (na, nb) = (rng.random_range(1..=500), rng.random_range(1..=500));
        let a = tied_scores(&mut rng, na);
        let mut b = tied_scores(&mut rng, nb);
        // Inject exact cross-set ties.
        for k in 0..rng.random_range(0..10).min(nb) {
            b[k] = a[rng.random_range(0..na)];
        }
        ties += a.iter().filter(|x| b.contains(x)).count();
        let fast = auc(&a, &b).map_err(|e| e.to_string())?;
        let slow = brute_auc(&a, &b);
        if fast != slow {
            return Err(format!("case {case}: sorted {fast} vs pairwise {slow}"));
        }
    }
    Ok(format!("{cases} sets exact, {ties} tied elements"))
}

fn diag_stats(mean: &[f64], var: &[f64]) -> GaussianStats {
    let d = mean.len();
    let mut covariance = vec![0.0; d * d];
    for i in 0..d {
        covariance[i * d + i] = var[i];
    }
    GaussianStats { mean: mean.to_vec(), covariance, count: 100 }
}

/// Closed form for diagonal covariances.
pub fn diag_frechet(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    (0..m1.len())
        .map(|i| (m1[i] - m2[i]).powi(2) + v1[i] + v2[i] - 2.0 * (v1[i] * v2[i]).sqrt())
        .sum()
}

pub fn frechet_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let draw = |rng: &mut Rng, lo: f64, hi: f64| (0..4).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (m1, v1, m2, v2) = (draw(&mut rng, -3.0, 3.0), draw(&mut rng, 0.01, 4.0), draw(&mut rng, -3.0, 3.0), draw(&mut rng, 0.01, 4.0));
        let got = frechet_distance(&diag_stats(&m1, &v1), &diag_stats(&m2, &v2)).map_err(|e| e.to_string())?;
        let want = diag_frechet(&m1, &v1, &m2, &v2);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-6 {
            return Err(format!("case {case}: {got} vs closed form {want}"));
        }
        let same = frechet_distance(&diag_stats(&m1, &v1), &diag_stats(&m1, &v1)).map_err(|e| e.to_string())?;
        if same != 0.0 {
            return Err(format!("case {case}: identical stats gave {same}"));
        }
    }
    Ok(format!("{cases} diagonal 4-D cases, max error {worst:.2e}, identical stats give 0"))
}

fn stats_from_means(means: Vec<Vec<f64>>, counts: Vec<usize>) -> LatentStats {
    let d = means[0].len();
    let total: usize = counts.iter().sum();
    let mut global = vec![0.0; d];
    for (m, &c) in means.iter().zip(&counts) {
        for j in 0..d {
            global[j] += m[j] * c as f64 / total.max(1) as f64;
        }
    }
    LatentStats { global_mean: global, class_means: means, class_counts: counts }
}

fn brute_other_class(z0: &[f64], y0: usize, stats: &LatentStats) -> Option<usize> {
    let dists: Vec<(usize, f64)> = (0..stats.num_classes())
        .filter(|&y| y != y0 && stats.class_counts[y] > 0)
        .map(|y| (y, z0.iter().zip(&stats.class_means[y]).map(|(a, b)| (a - b).powi(2)).sum()))
        .collect();
    let min = dists.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    dists.iter().find(|p| p.1 == min).map(|p| p.0)
}

/// Endpoint identities, the orthogonal projection case and the other-class
/// argmin, all compared with exact equality.
pub fn substitute_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let mut ties = 0;
    for case in 0..cases {
        let d = rng.random_range(2..12);
        let k = rng.random_range(2..8);
        let mut means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut counts: Vec<usize> = (0..k).map(|_| rng.random_range(0..5)).collect();
        counts[0] = counts[0].max(1);
        counts[1] = counts[1].max(1);
        if k > 2 && rng.random_bool(0.3) {
            // Duplicate a class mean to force a distance tie.
            let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
            means[b] = means[a].clone();
        }
        for y in 0..k {
            if counts[y] == 0 {
                means[y] = vec![0.0; d];
            }
        }
        let stats = stats_from_means(means, counts);
        let z0: Array1<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zbar = substitute_average(&stats);
        let e = |e: gan_unlearning::Error| format!("case {case}: {e}");

        if substitute_truncation(z0.view(), &stats, 1.0).map_err(e)? != z0 {
            return Err(format!("case {case}: truncation at lambda 1 is not z0"));
        }
        if substitute_truncation(z0.view(), &stats, 0.0).map_err(e)? != zbar {
            return Err(format!("case {case}: truncation at lambda 0 is not the mean"));
        }
        if substitute_projection(z0.view(), &stats, 0.0).map_err(e)?.code != zbar {
            return Err(format!("case {case}: projection at alpha 0 is not the mean"));
        }

        // Orthogonal pair with disjoint supports, so the inner product is exactly 0.
        let split = rng.random_range(1..d);
        let mut zo = Array1::zeros(d);
        let mut mo = vec![0.0; d];
        for j in 0..d {
            if j < split {
                zo[j] = rng.random_range(-3.0..3.0);
            } else {
                mo[j] = rng.random_range(0.5..3.0);
            }
        }
        let ortho = LatentStats { global_mean: mo, class_means: vec![vec![0.0; d]; 2], class_counts: vec![1, 1] };
        if substitute_projection(zo.view(), &ortho, 1.0).map_err(e)?.code != zo {
            return Err(format!("case {case}: projection of an orthogonal code changed it"));
        }

        let y0 = rng.random_range(0..k);
        let want = brute_other_class(z0.as_slice().unwrap(), y0, &stats);
        match (substitute_other_class(z0.view(), y0, &stats), want) {
            (Ok((code, y)), Some(w)) => {
                if y != w || y == y0 || code.as_slice().unwrap() != stats.class_means[w].as_slice() {
                    return Err(format!("case {case}: other class {y}, brute force {w}"));
                }
                let dw: f64 = z0.iter().zip(&stats.class_means[w]).map(|(a, b)| (a - b).powi(2)).sum();
                ties += (0..k)
                    .filter(|&c| c != y0 && c != w && stats.class_counts[c] > 0)
                    .filter(|&c| z0.iter().zip(&stats.class_means[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() == dw)
                    .count();
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("case {case}: got {got:?}, brute force {want:?}")),
        }
    }
    Ok(format!("{cases} configurations exact, {ties} distance ties resolved to the lowest index"))
}

/// Nets small enough for exhaustive finite differences.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        latent_dim: 3,
        num_classes: 3,
        conditional: true,
        data_shape: [1, 1, 4],
        generator_hidden: vec![10],
        discriminator_hidden: vec![10],
        classifier_hidden: vec![6, 5],
        leaky_slope: 0.2,
    }
}

/// `|analytic - numeric| / max(|analytic|, |numeric|)` over the whole
/// gradient vector, with central differences of step `h`.
pub fn relative_gradient_error(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64, h: f64) -> f64 {
    let mut p = params.to_vec();
    let mut numeric = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct GradientCase {
    pub name: &'static str,
    pub params: usize,
    pub rel_error: f64,
    /// Objective value minus the probability-form loss function.
    pub form_gap: f64,
}

fn probs(s: &Array1<f64>) -> Vec<f64> {
    s.iter().map(|&v| sigmoid(v)).collect()
}

/// Finite-difference checks of the five training and unlearning losses.
pub fn gradient_cases(seed: u64) -> Vec<GradientCase> {
    let arch = toy_arch();
    let (g, d) = init_models(&arch, seed).unwrap();
    let (_, d_other) = init_models(&arch, seed + 1).unwrap();
    let clf = init_classifier(&arch, seed + 2).unwrap();
    let mut rng = seeded(seed + 3);
    let n = 5;
    let real = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-0.9..0.9));
    let fake = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-0.9..0.9));
    let targets = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-0.9..0.9));
    let z = normal_matrix(&mut rng, n, arch.latent_dim);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let f_label = 0.1;
    let (l1, l2) = (1.3, 0.7);
    let h = 1e-6;

    let disc = |p: &[f64]| DiscriminatorNet::from_params(&arch, p.to_vec()).unwrap();
    let gen = |p: &[f64]| GeneratorNet::from_params(&arch, p.to_vec()).unwrap();
    let dp = d.mlp().params().to_vec();
    let gp = g.mlp().params().to_vec();
    let mut out = Vec::new();

    let obj = discriminator_objective(&d, real.view(), &labels, fake.view(), &labels).unwrap();
    let loss = |p: &[f64]| discriminator_objective(&disc(p), real.view(), &labels, fake.view(), &labels).unwrap().loss;
    let form = d_loss(&probs(&d.scores(real.view(), &labels).unwrap()), &probs(&d.scores(fake.view(), &labels).unwrap())).unwrap();
    out.push(GradientCase { name: "d_loss", params: dp.len(), rel_error: relative_gradient_error(&dp, &obj.grad, loss, h), form_gap: obj.loss - form });

    let obj = generator_objective(&g, &d, z.view(), &labels).unwrap();
    let loss = |p: &[f64]| generator_objective(&gen(p), &d, z.view(), &labels).unwrap().loss;
    let gz = g.forward(z.view(), &labels).unwrap();
    let form = g_loss(&probs(&d.scores(gz.view(), &labels).unwrap())).unwrap();
    out.push(GradientCase { name: "g_loss", params: gp.len(), rel_error: relative_gradient_error(&gp, &obj.grad, loss, h), form_gap: obj.loss - form });

    let obj = discriminator_unlearn_objective(&d, real.view(), &labels, fake.view(), &labels, f_label).unwrap();
    let loss = |p: &[f64]| discriminator_unlearn_objective(&disc(p), real.view(), &labels, fake.view(), &labels, f_label).unwrap().loss;
    let su = d.scores(real.view(), &labels).unwrap().to_vec();
    let form = discriminator_unlearn_loss(&su, &probs(&d.scores(fake.view(), &labels).unwrap()), f_label).unwrap();
    out.push(GradientCase {
        name: "discriminator_unlearn_loss",
        params: dp.len(),
        rel_error: relative_gradient_error(&dp, &obj.grad, loss, h),
        form_gap: obj.loss - form,
    });

    let obj = generator_unlearn_objective(&g, &d, z.view(), &labels, targets.view(), Some(&clf), l1, l2).unwrap();
    let loss = |p: &[f64]| generator_unlearn_objective(&gen(p), &d, z.view(), &labels, targets.view(), Some(&clf), l1, l2).unwrap().loss;
    let form = generator_unlearn_loss(gz.view(), targets.view(), Some(&clf), &probs(&d.scores(gz.view(), &labels).unwrap()), l1, l2).unwrap();
    out.push(GradientCase {
        name: "generator_unlearn_loss",
        params: gp.len(),
        rel_error: relative_gradient_error(&gp, &obj.grad, loss, h),
        form_gap: obj.loss - form,
    });

    let obj = zero_shot_discriminator_objective(&d, &d_other, real.view(), fake.view(), &labels).unwrap();
    let loss = |p: &[f64]| zero_shot_discriminator_objective(&disc(p), &d_other, real.view(), fake.view(), &labels).unwrap().loss;
    let s_raw = d.scores(real.view(), &labels).unwrap();
    let s0 = d_other.scores(real.view(), &labels).unwrap().to_vec();
    let form = zero_shot_discriminator_learning_loss(&probs(&s_raw), s_raw.as_slice().unwrap(), &s0, &probs(&d.scores(fake.view(), &labels).unwrap())).unwrap();
    out.push(GradientCase {
        name: "zero_shot_discriminator_learning_loss",
        params: dp.len(),
        rel_error: relative_gradient_error(&dp, &obj.grad, loss, h),
        form_gap: obj.loss - form,
    });
    out
}
