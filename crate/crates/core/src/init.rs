//! Starting values: a diagonal Gaussian mixture on the pooled observations,
//! then a factor analysis per mixture component.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelParams, PanelDataset, TransitionCoefs, LN_2PI, PSI_FLOOR};

/// Self-transition probability implied by the discrete-time starting coefficients.
pub const INIT_STAY_PROB: f64 = 0.8;
/// Off-diagonal rate used for the continuous-time starting coefficients.
pub const INIT_RATE: f64 = 0.1;

const MAX_REPAIRS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub restarts: usize,
    pub gmm_max_iters: usize,
    pub fa_max_iters: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            restarts: 5,
            gmm_max_iters: 200,
            fa_max_iters: 500,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("at least one mixture restart is required".into()));
        }
        if self.gmm_max_iters == 0 || self.fa_max_iters == 0 {
            return Err(Error::InvalidConfig("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub weights: DVector<f64>,
    pub means: Vec<DVector<f64>>,
    pub vars: Vec<DVector<f64>>,
    /// n × J posterior membership probabilities.
    pub resp: DMatrix<f64>,
    pub loglik: f64,
    pub trace: Vec<f64>,
}

impl GmmFit {
    /// Hard assignment by maximum responsibility (lowest index on ties).
    pub fn labels(&self) -> Vec<usize> {
        self.resp
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn column_moments(y: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = y.ncols() as f64;
    let mean = y.column_mean();
    let mut var = DVector::zeros(y.nrows());
    for col in y.column_iter() {
        var += (col - &mean).map(|v| v * v);
    }
    (mean, var / n)
}

fn kmeans_pp(y: &DMatrix<f64>, states: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let n = y.ncols();
    let mut centers = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| (y.column(i) - y.column(centers[0])).norm_squared()).collect();
    while centers.len() < states {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((y.column(i) - y.column(next)).norm_squared());
        }
    }
    centers
}

/// Per-observation log densities under each component, n × J.
fn component_log_dens(y: &DMatrix<f64>, weights: &DVector<f64>, means: &[DVector<f64>], vars: &[DVector<f64>]) -> DMatrix<f64> {
    let n = y.ncols();
    let p = y.nrows();
    let states = means.len();
    let mut out = DMatrix::zeros(n, states);
    for j in 0..states {
        let log_norm = weights[j].ln() - 0.5 * (p as f64 * LN_2PI + vars[j].iter().map(|v| v.ln()).sum::<f64>());
        for i in 0..n {
            let mut q = 0.0;
            for l in 0..p {
                let r = y[(l, i)] - means[j][l];
                q += r * r / vars[j][l];
            }
            out[(i, j)] = log_norm - 0.5 * q;
        }
    }
    out
}

fn normalize_rows(logd: &DMatrix<f64>) -> (DMatrix<f64>, f64, Vec<f64>) {
    let mut resp = logd.clone();
    let mut total = 0.0;
    let mut row_ll = Vec::with_capacity(logd.nrows());
    for mut row in resp.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
        let ll = m + s.ln();
        total += ll;
        row_ll.push(ll);
    }
    (resp, total, row_ll)
}

fn gmm_single(y: &DMatrix<f64>, states: usize, max_iters: usize, seed: u64, restart: usize) -> Result<GmmFit> {
    let n = y.ncols();
    let p = y.nrows();
    let (_, global_var) = column_moments(y);
    let var_floor = global_var.map(|v| (v * 1e-6).max(PSI_FLOOR));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let centers = kmeans_pp(y, states, &mut rng);
    let mut weights = DVector::from_element(states, 1.0 / states as f64);
    let mut means: Vec<DVector<f64>> = centers.iter().map(|&c| y.column(c).into_owned()).collect();
    let mut vars: Vec<DVector<f64>> = vec![global_var.map(|v| v.max(PSI_FLOOR)); states];
    let mut trace = Vec::new();
    let mut repairs = 0;
    for _ in 0..max_iters {
        let logd = component_log_dens(y, &weights, &means, &vars);
        let (resp, ll, row_ll) = normalize_rows(&logd);
        let mass: DVector<f64> = resp.row_sum().transpose();
        if let Some(empty) = (0..states).find(|&j| mass[j] / (n as f64) < 1e-3 / states as f64) {
            repairs += 1;
            if repairs > MAX_REPAIRS {
                return Err(Error::EmptyComponent(format!("component {empty} stayed empty after {MAX_REPAIRS} re-seeds")));
            }
            // re-seed at the worst-explained point
            let worst = (0..n).fold(0, |b, i| if row_ll[i] < row_ll[b] { i } else { b });
            debug!("mixture component {empty} empty, re-seeding at observation {worst}");
            means[empty] = y.column(worst).into_owned();
            vars[empty] = global_var.map(|v| v.max(PSI_FLOOR));
            weights.fill(1.0 / states as f64);
            trace.clear();
            continue;
        }
        trace.push(ll);
        for j in 0..states {
            let w = resp.column(j);
            let mut mean = DVector::zeros(p);
            for i in 0..n {
                mean.axpy(w[i], &y.column(i), 1.0);
            }
            mean /= mass[j];
            let mut var = DVector::zeros(p);
            for i in 0..n {
                for l in 0..p {
                    let r = y[(l, i)] - mean[l];
                    var[l] += w[i] * r * r;
                }
            }
            var /= mass[j];
            vars[j] = var.zip_map(&var_floor, f64::max);
            means[j] = mean;
            weights[j] = mass[j] / n as f64;
        }
        let k = trace.len();
        if k >= 2 && (trace[k - 1] - trace[k - 2]).abs() <= 1e-10 * trace[k - 1].abs().max(1.0) {
            break;
        }
    }
    let logd = component_log_dens(y, &weights, &means, &vars);
    let (resp_final, ll, _) = normalize_rows(&logd);
    trace.push(ll);
    Ok(GmmFit {
        weights,
        means,
        vars,
        resp: resp_final,
        loglik: ll,
        trace,
    })
}

/// Diagonal-covariance Gaussian mixture by EM, best of `config.restarts`
/// k-means++ starts. Components are ordered by descending mean of the first
/// coordinate.
pub fn gmm_fit(y: &DMatrix<f64>, states: usize, config: &InitConfig) -> Result<GmmFit> {
    config.validate()?;
    if states == 0 {
        return Err(Error::InvalidConfig("mixture needs at least one component".into()));
    }
    if y.ncols() < states {
        return Err(Error::InvalidData(format!("{} observations cannot seed {states} components", y.ncols())));
    }
    let fits: Vec<Result<GmmFit>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| gmm_single(y, states, config.gmm_max_iters, config.seed, r))
        .collect();
    let mut best: Option<GmmFit> = None;
    let mut last_err = None;
    for fit in fits {
        match fit {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.loglik > b.loglik) {
                    best = Some(f);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| last_err.expect("at least one restart"))?;
    let mut order: Vec<usize> = (0..states).collect();
    order.sort_by(|&a, &b| best.means[b][0].total_cmp(&best.means[a][0]).then(a.cmp(&b)));
    let mut resp = DMatrix::zeros(best.resp.nrows(), states);
    for (new, &old) in order.iter().enumerate() {
        resp.set_column(new, &best.resp.column(old));
    }
    Ok(GmmFit {
        weights: DVector::from_iterator(states, order.iter().map(|&o| best.weights[o])),
        means: order.iter().map(|&o| best.means[o].clone()).collect(),
        vars: order.iter().map(|&o| best.vars[o].clone()).collect(),
        resp,
        loglik: best.loglik,
        trace: best.trace,
    })
}

#[derive(Debug, Clone)]
pub struct FaFit {
    pub mean: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub trace: Vec<f64>,
}

fn weighted_moments(y: &DMatrix<f64>, weights: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidData("factor analysis weights sum to zero".into()));
    }
    let p = y.nrows();
    let mut mean = DVector::zeros(p);
    for (i, w) in weights.iter().enumerate() {
        mean.axpy(*w, &y.column(i), 1.0);
    }
    mean /= total;
    let mut cov = DMatrix::zeros(p, p);
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            let r = y.column(i) - &mean;
            cov.ger(*w, &r, &r, 1.0);
        }
    }
    Ok((mean, cov / total, total))
}

fn fa_loglik(cov: &DMatrix<f64>, lambda: &DMatrix<f64>, psi: &DVector<f64>, n: f64) -> f64 {
    let sigma = lambda * lambda.transpose() + DMatrix::from_diagonal(psi);
    match sigma.cholesky() {
        Some(ch) => {
            let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let tr = ch.solve(cov).trace();
            -0.5 * n * (log_det + tr + cov.nrows() as f64 * LN_2PI)
        }
        None => f64::NEG_INFINITY,
    }
}

/// Factor analysis of weighted data by EM on the weighted covariance,
/// starting from the top-`factors` eigenpairs.
pub fn fa_fit(y: &DMatrix<f64>, weights: &[f64], factors: usize, config: &InitConfig) -> Result<FaFit> {
    let p = y.nrows();
    if weights.len() != y.ncols() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} observations", weights.len(), y.ncols())));
    }
    let (mean, cov, n) = weighted_moments(y, weights)?;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    if factors == 0 || factors >= rank {
        return Err(Error::RankDeficient(format!(
            "weighted covariance has rank {rank}; use fewer than {rank} factors (got {factors})"
        )));
    }
    let tail: f64 = order[factors..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / (p - factors) as f64;
    let mut lambda = DMatrix::zeros(p, factors);
    for (c, &i) in order[..factors].iter().enumerate() {
        let scale = (eig.eigenvalues[i] - tail).max(0.0).sqrt();
        lambda.set_column(c, &(eig.eigenvectors.column(i) * scale));
    }
    let floor = |v: f64, l: usize| v.max(1e-3 * cov[(l, l)]).max(PSI_FLOOR);
    let mut psi = DVector::from_fn(p, |l, _| floor(cov[(l, l)] - lambda.row(l).norm_squared(), l));
    let mut trace = vec![fa_loglik(&cov, &lambda, &psi, n)];
    let eye = DMatrix::<f64>::identity(factors, factors);
    for _ in 0..config.fa_max_iters {
        // beta = (I + L' Psi^-1 L)^-1 L' Psi^-1
        let lt_pinv = DMatrix::from_fn(factors, p, |c, l| lambda[(l, c)] / psi[l]);
        let m = (&eye + &lt_pinv * &lambda)
            .try_inverse()
            .ok_or_else(|| Error::Singular("factor posterior precision".into()))?;
        let beta = &m * &lt_pinv;
        let cov_bt = &cov * beta.transpose();
        let ezz = &m + &beta * &cov_bt;
        let ezz_inv = ezz
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("factor second moment".into()))?
            .inverse();
        lambda = &cov_bt * ezz_inv;
        psi = DVector::from_fn(p, |l, _| floor(cov[(l, l)] - lambda.row(l).dot(&cov_bt.row(l)), l));
        let ll = fa_loglik(&cov, &lambda, &psi, n);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if (ll - prev).abs() <= 1e-10 * ll.abs().max(1.0) {
            break;
        }
    }
    Ok(FaFit { mean, lambda, psi, trace })
}

/// Starting transition coefficients: intercept-only, favouring self-transitions.
pub fn initial_transitions(states: usize, covariates: usize, mode: Mode) -> TransitionCoefs {
    let intercept = match mode {
        Mode::Discrete if states > 1 => ((1.0 - INIT_STAY_PROB) / (states - 1) as f64 / INIT_STAY_PROB).ln(),
        Mode::Discrete => 0.0,
        Mode::Continuous => INIT_RATE.ln(),
    };
    TransitionCoefs::from_fn(states, covariates, |_, _| {
        let mut v = vec![0.0; covariates];
        v[0] = intercept;
        v
    })
}

/// Starting parameters from a pooled mixture and per-component factor analyses.
pub fn initialize_params(dataset: &PanelDataset, states: usize, factors: usize, mode: Mode, config: &InitConfig) -> Result<ModelParams> {
    config.validate()?;
    let pooled = dataset.pooled_y();
    let gmm = gmm_fit(&pooled, states, config)?;
    initialize_from_mixture(dataset, &pooled, &gmm, factors, mode, config)
}

/// Builds starting parameters from an existing mixture fit.
pub fn initialize_from_mixture(
    dataset: &PanelDataset,
    pooled: &DMatrix<f64>,
    gmm: &GmmFit,
    factors: usize,
    mode: Mode,
    config: &InitConfig,
) -> Result<ModelParams> {
    let states = gmm.means.len();
    let p = dataset.p;
    let fas = (0..states)
        .into_par_iter()
        .map(|j| {
            let w: Vec<f64> = gmm.resp.column(j).iter().copied().collect();
            fa_fit(pooled, &w, factors, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut psi = DVector::zeros(p);
    for (j, fa) in fas.iter().enumerate() {
        psi += &fa.psi * gmm.weights[j];
    }
    let psi = psi / gmm.weights.sum();
    // first occasions are the first column of each subject in the pooled matrix
    let mut pi = DVector::zeros(states);
    let mut offset = 0;
    for s in &dataset.subjects {
        pi += gmm.resp.row(offset).transpose();
        offset += s.len();
    }
    let pi = pi.map(|v| v.max(1e-6));
    let pi = &pi / pi.sum();
    let params = ModelParams {
        pi,
        mu: gmm.means.clone(),
        lambda: fas.into_iter().map(|f| f.lambda).collect(),
        psi: psi.map(|v| v.max(PSI_FLOOR)),
        b: initial_transitions(states, dataset.d, mode),
    };
    params.validate()?;
    Ok(params)
}
