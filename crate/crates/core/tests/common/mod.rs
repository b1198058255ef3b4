#![allow(dead_code)]

use std::sync::Arc;

use fedcomloc::data::{self, Dataset, FederatedDataset, PartitionSpec, SynthSpec};
use fedcomloc::fed::generate_coins;
use fedcomloc::models::ModelSpec;
use fedcomloc::rng::derive_stream;

/// Softmax cross-entropy gradient for a linear model, written with plain
/// loops. Layout: `W` (classes x features, row-major) then `b`.
pub fn logreg_grad(x: &[f64], data: &Dataset, lambda: f64) -> Vec<f64> {
    let f = data.n_features();
    let c = data.n_classes();
    let n = data.len() as f64;
    let mut g = vec![0.0; c * f + c];
    for i in 0..data.len() {
        let a = data.row(i);
        let z: Vec<f64> = (0..c)
            .map(|k| x[c * f + k] + (0..f).map(|j| x[k * f + j] * a[j]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..c {
            let d = e[k] / s - if k == data.label(i) { 1.0 } else { 0.0 };
            for j in 0..f {
                g[k * f + j] += d * a[j] / n;
            }
            g[c * f + k] += d / n;
        }
    }
    for (gi, xi) in g.iter_mut().zip(x) {
        *gi += lambda * xi;
    }
    g
}

/// Gradient of `f = (1/n) sum_i f_i`, each `f_i` the full-shard objective.
pub fn federated_grad(x: &[f64], fed: &FederatedDataset, lambda: f64) -> Vec<f64> {
    let n = fed.n_clients() as f64;
    let mut g = vec![0.0; x.len()];
    for shard in fed.shards() {
        for (gi, v) in g.iter_mut().zip(logreg_grad(x, shard, lambda)) {
            *gi += v / n;
        }
    }
    g
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Centralized gradient descent from zero until `||grad f|| < tol`.
pub fn gd_minimizer(fed: &FederatedDataset, lambda: f64, gamma: f64, tol: f64) -> Vec<f64> {
    let d = fed.train.n_classes() * (fed.train.n_features() + 1);
    let mut x = vec![0.0; d];
    for _ in 0..5_000_000 {
        let g = federated_grad(&x, fed, lambda);
        if norm(&g) < tol {
            return x;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= gamma * gi;
        }
    }
    panic!("gradient descent oracle did not reach {tol}");
}

/// Heterogeneous convex federation: synthetic data split by Dirichlet(alpha).
pub fn convex_federation(
    n_clients: usize,
    alpha: f64,
    lambda: f64,
    seed: u64,
) -> (FederatedDataset, ModelSpec) {
    let split = data::synth_classification(
        &SynthSpec {
            n: 500,
            n_features: 5,
            n_classes: 3,
            margin: 2.0,
        },
        &mut derive_stream(seed, "data/synth"),
    )
    .unwrap();
    let spec = ModelSpec::logreg(5, 3, lambda);
    let partition = data::dirichlet_partition(
        split.train.labels(),
        &PartitionSpec { n_clients, alpha },
        &mut derive_stream(seed, "partition"),
    )
    .unwrap();
    (FederatedDataset::from_split(split, partition).unwrap(), spec)
}

/// Federation over an explicit synthetic dataset.
pub fn federation(
    synth: SynthSpec,
    n_clients: usize,
    alpha: f64,
    data_seed: u64,
    partition_seed: u64,
) -> FederatedDataset {
    let split = data::synth_classification(&synth, &mut derive_stream(data_seed, "data/synth")).unwrap();
    let train = Arc::new(split.train);
    let partition = data::dirichlet_partition(
        train.labels(),
        &PartitionSpec { n_clients, alpha },
        &mut derive_stream(partition_seed, "partition"),
    )
    .unwrap();
    FederatedDataset::new(train, Arc::new(split.test), partition).unwrap()
}

/// Smallest `T` whose coin prefix holds exactly `rounds` communication rounds.
pub fn iterations_for_rounds(seed: u64, p: f64, rounds: usize) -> usize {
    let horizon = ((rounds as f64 / p) * 4.0) as usize + 1000;
    let coins = generate_coins(p, horizon, &mut derive_stream(seed, "coins")).unwrap();
    let mut seen = 0;
    for (t, &c) in coins.as_slice().iter().enumerate() {
        if c {
            seen += 1;
            if seen == rounds {
                return t + 1;
            }
        }
    }
    panic!("{rounds} rounds do not fit in {horizon} iterations");
}
