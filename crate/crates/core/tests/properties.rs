mod common;

use fedcomloc::data::{self, SynthSpec};
use fedcomloc::models::{self, sample_batch, Batch, ModelSpec};
use fedcomloc::rng::derive_stream;
use fedcomloc::vector::ParamVector;
use rand::Rng;

fn random_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = derive_stream(seed, "test/params");
    ParamVector::from(
        (0..spec.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>(),
    )
}

fn small_data(n: usize, seed: u64) -> data::Dataset {
    data::synth_classification(
        &SynthSpec {
            n,
            n_features: 4,
            n_classes: 3,
            margin: 2.0,
        },
        &mut derive_stream(seed, "test/data"),
    )
    .unwrap()
    .train
}

#[test]
fn logreg_gradient_matches_loop_oracle() {
    let data = small_data(40, 1);
    let spec = ModelSpec::logreg(4, 3, 0.05);
    let x = random_params(&spec, 2);
    let g = models::gradient(&spec, &x, &data, &Batch::full(data.len())).unwrap();
    let oracle = common::logreg_grad(x.as_slice(), &data, 0.05);
    assert!(common::max_abs_diff(g.as_slice(), &oracle) < 1e-14);
}

#[test]
fn full_batch_gradient_is_mean_of_per_sample_gradients() {
    let data = small_data(25, 3);
    for spec in [ModelSpec::mlp(4, &[6, 5], 3, 0.1), ModelSpec::logreg(4, 3, 0.1)] {
        let x = random_params(&spec, 4);
        let n = data.len();
        let full = models::gradient(&spec, &x, &data, &Batch::full(n)).unwrap();
        let mut mean = vec![0.0; spec.n_params()];
        let mut loss_mean = 0.0;
        for i in 0..n {
            let one = Batch::new(vec![i]);
            let g = models::gradient(&spec, &x, &data, &one).unwrap();
            for (m, v) in mean.iter_mut().zip(g.iter()) {
                *m += v / n as f64;
            }
            loss_mean += models::loss(&spec, &x, &data, &one).unwrap() / n as f64;
        }
        assert!(common::max_abs_diff(full.as_slice(), &mean) < 1e-12);
        let loss = models::loss(&spec, &x, &data, &Batch::full(n)).unwrap();
        assert!((loss - loss_mean).abs() < 1e-12);
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let data = small_data(10, 5);
    let spec = ModelSpec::mlp(4, &[8, 6], 3, 0.0);
    let x = random_params(&spec, 6);
    let batch = Batch::full(8);
    let g = models::gradient(&spec, &x, &data, &batch).unwrap();
    let mut rng = derive_stream(7, "test/coords");
    let h = 1e-5;
    for _ in 0..30 {
        let j = rng.below(spec.n_params());
        let mut plus = x.clone();
        plus[j] += h;
        let mut minus = x.clone();
        minus[j] -= h;
        let fd = (models::loss(&spec, &plus, &data, &batch).unwrap()
            - models::loss(&spec, &minus, &data, &batch).unwrap())
            / (2.0 * h);
        let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(f64::MIN_POSITIVE);
        assert!(rel < 1e-5, "coordinate {j}: fd {fd}, analytic {}", g[j]);
    }
}

#[test]
fn regularized_logreg_is_strongly_convex() {
    let data = small_data(30, 8);
    let lambda = 0.2;
    let spec = ModelSpec::logreg(4, 3, lambda);
    let batch = Batch::full(data.len());
    for s in 0..20 {
        let x = random_params(&spec, 100 + s);
        let mut y = random_params(&spec, 200 + s);
        y.scale(3.0);
        let mid = ParamVector::from(
            x.iter().zip(y.iter()).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>(),
        );
        let f = |p: &ParamVector| models::loss(&spec, p, &data, &batch).unwrap();
        let gap = x.sub(&y).unwrap().norm_sq();
        assert!(f(&mid) <= 0.5 * f(&x) + 0.5 * f(&y) - lambda / 8.0 * gap + 1e-12);
    }
}

#[test]
fn mlp_init_respects_fan_in_bound() {
    let spec = ModelSpec::mlp(784, &[128, 64], 10, 0.0);
    let x = models::init_params(&spec, &mut derive_stream(0, "init")).unwrap();
    let bound = (6.0f64 / 784.0).sqrt();
    let first = &x.as_slice()[..784 * 128];
    assert!(first.iter().all(|w| w.abs() <= bound));
    assert!(first.iter().any(|w| w.abs() > 0.9 * bound));
    let biases = &x.as_slice()[784 * 128..784 * 128 + 128];
    assert!(biases.iter().all(|&b| b == 0.0));
}

#[test]
fn random_params_score_near_chance() {
    let split = data::synth_classification(
        &SynthSpec {
            n: 20_000,
            n_features: 10,
            n_classes: 5,
            margin: 4.0,
        },
        &mut derive_stream(3, "test/chance"),
    )
    .unwrap();
    let spec = ModelSpec::logreg(10, 5, 0.0);
    let mut x = random_params(&spec, 9);
    x.scale(1e-3);
    let acc = models::evaluate(&spec, &x, &split.test).unwrap().accuracy;
    assert!((acc - 0.2).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn logreg_fits_separable_synth_data() {
    let split = data::synth_classification(
        &SynthSpec {
            n: 1000,
            n_features: 10,
            n_classes: 2,
            margin: 4.0,
        },
        &mut derive_stream(0, "data/synth"),
    )
    .unwrap();
    let spec = ModelSpec::logreg(10, 2, 0.0);
    let batch = Batch::full(split.train.len());
    let mut x = ParamVector::zeros(spec.n_params());
    for _ in 0..2000 {
        let g = models::gradient(&spec, &x, &split.train, &batch).unwrap();
        x.axpy_in_place(-1.0, &g).unwrap();
    }
    let acc = models::evaluate(&spec, &x, &split.test).unwrap().accuracy;
    assert!(acc >= 0.95, "test accuracy {acc}");
}

#[test]
fn single_draw_batches_are_uniform() {
    let mut rng = derive_stream(12, "test/batches");
    let mut counts = [0usize; 16];
    let draws = 100_000;
    for _ in 0..draws {
        let b = sample_batch(16, 1, &mut rng).unwrap();
        counts[b.indices()[0]] += 1;
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.99 quantile of chi-square with 15 degrees of freedom
    assert!(chi2 < 30.578, "chi2 = {chi2}");
}

#[test]
fn oversized_batch_is_a_shuffled_full_shard() {
    let mut rng = derive_stream(13, "test/batches");
    let b = sample_batch(7, 100, &mut rng).unwrap();
    let mut sorted = b.indices().to_vec();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..7).collect::<Vec<_>>());
}
