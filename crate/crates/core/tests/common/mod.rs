#![allow(dead_code)]

use ehmfm::inference::{estep, EStep};
use ehmfm::{Mode, ModelParams, PanelDataset, SubjectRecord, TransitionCoefs};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_params(rng: &mut ChaCha20Rng, states: usize, factors: usize, features: usize, covariates: usize) -> ModelParams {
    let raw: Vec<f64> = (0..states).map(|_| rng.random::<f64>() + 0.2).collect();
    let total: f64 = raw.iter().sum();
    ModelParams {
        pi: DVector::from_iterator(states, raw.iter().map(|v| v / total)),
        mu: (0..states).map(|_| DVector::from_fn(features, |_, _| 2.0 * normal(rng))).collect(),
        lambda: (0..states)
            .map(|_| DMatrix::from_fn(features, factors, |_, _| 0.7 * normal(rng)))
            .collect(),
        psi: DVector::from_fn(features, |_, _| 0.5 + rng.random::<f64>()),
        b: TransitionCoefs::from_fn(states, covariates, |_, _| (0..covariates).map(|_| 0.6 * normal(rng)).collect()),
    }
}

/// Random panel; covariates beyond the intercept are static per subject when
/// `static_x`, otherwise redrawn per occasion.
pub fn random_panel(
    rng: &mut ChaCha20Rng,
    subjects: usize,
    len: usize,
    features: usize,
    covariates: usize,
    irregular: bool,
    static_x: bool,
) -> PanelDataset {
    let recs = (0..subjects)
        .map(|i| {
            let mut times = Vec::with_capacity(len);
            let mut t = 1i64;
            for _ in 0..len {
                times.push(t);
                t += if irregular { rng.random_range(1..4) } else { 1 };
            }
            let y = DMatrix::from_fn(features, len, |_, _| 2.0 * normal(rng));
            let base: Vec<f64> = (0..covariates).map(|_| rng.random::<f64>()).collect();
            let x = DMatrix::from_fn(covariates, len, |r, _| {
                if r == 0 {
                    1.0
                } else if static_x {
                    base[r]
                } else {
                    rng.random::<f64>()
                }
            });
            SubjectRecord::new(format!("r{i}"), times, y, x).unwrap()
        })
        .collect();
    PanelDataset::new(recs).unwrap()
}

pub fn run_estep(data: &PanelDataset, params: &ModelParams, mode: Mode) -> EStep {
    estep(data, params, mode, None).unwrap()
}

/// Exhaustive enumeration of all `J^T` paths.
pub struct BruteForce {
    pub loglik: f64,
    /// `J x T`
    pub gamma: DMatrix<f64>,
    /// `eps[t-1][(k, j)]`
    pub epsilon: Vec<DMatrix<f64>>,
}

pub fn brute_force(pi: &DVector<f64>, transitions: &[DMatrix<f64>], dens: &DMatrix<f64>) -> BruteForce {
    let (nj, nt) = dens.shape();
    let mut gamma = DMatrix::zeros(nj, nt);
    let mut epsilon = vec![DMatrix::zeros(nj, nj); nt - 1];
    let mut total = 0.0;
    let mut path = vec![0usize; nt];
    let count = nj.pow(nt as u32);
    for code in 0..count {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % nj;
            c /= nj;
        }
        let mut w = pi[path[0]] * dens[(path[0], 0)];
        for t in 1..nt {
            w *= transitions[t - 1][(path[t - 1], path[t])] * dens[(path[t], t)];
        }
        total += w;
        for t in 0..nt {
            gamma[(path[t], t)] += w;
        }
        for t in 1..nt {
            epsilon[t - 1][(path[t - 1], path[t])] += w;
        }
    }
    BruteForce {
        loglik: total.ln(),
        gamma: gamma / total,
        epsilon: epsilon.into_iter().map(|e| e / total).collect(),
    }
}

pub fn random_stochastic(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() + 0.05);
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

pub fn random_generator(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 1.5 + 0.05);
    for k in 0..n {
        q[(k, k)] = 0.0;
        let s = q.row(k).sum();
        q[(k, k)] = -s;
    }
    q
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
