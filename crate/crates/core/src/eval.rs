//! Recovery metrics against a known truth, model selection over a `(J, K)`
//! grid, and promax post-processing of loadings.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelParams, PanelDataset, TransitionCoefs};
use crate::semis::{fit, FitConfig, FitResult};

/// Loadings with standardized magnitude above this are flagged.
pub const SALIENT_LOADING: f64 = 0.4;

/// Mean absolute elementwise difference.
pub fn aad(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} estimates vs {} true values", estimate.len(), truth.len())));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(estimate.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

fn aad_mats<'a>(est: impl Iterator<Item = &'a DMatrix<f64>>, truth: impl Iterator<Item = &'a DMatrix<f64>>) -> Result<f64> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (e, t) in est.zip(truth) {
        if e.shape() != t.shape() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", e.shape(), t.shape())));
        }
        a.extend(e.iter());
        b.extend(t.iter());
    }
    aad(&a, &b)
}

fn aad_vecs(est: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    let a: Vec<f64> = est.iter().flat_map(|v| v.iter().copied()).collect();
    let b: Vec<f64> = truth.iter().flat_map(|v| v.iter().copied()).collect();
    aad(&a, &b)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (s, &e) in perm.iter().enumerate() {
        inv[e] = s;
    }
    inv
}

/// Relabels decoded states so that estimated label `perm[s]` becomes `s`.
pub fn relabel(decoded: &[Vec<usize>], perm: &[usize]) -> Vec<Vec<usize>> {
    let inv = inverse(perm);
    decoded.iter().map(|path| path.iter().map(|&e| inv[e]).collect()).collect()
}

/// Permutation matching estimated to true labels: `perm[s]` is the estimated
/// state playing true state `s`. Minimizes misclassification over all `J!`
/// candidates, then AAD of the means.
pub fn align_states(estimate: &ModelParams, decoded: &[Vec<usize>], truth: &ModelParams, truth_states: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = truth.pi.len();
    if estimate.pi.len() != n {
        return Err(Error::DimensionMismatch(format!("aligning {} estimated states to {n} true states", estimate.pi.len())));
    }
    if n > 8 {
        return Err(Error::InvalidConfig("state alignment enumerates permutations; J must be at most 8".into()));
    }
    let mut confusion = vec![vec![0usize; n]; n];
    for (d, t) in decoded.iter().zip(truth_states) {
        if d.len() != t.len() {
            return Err(Error::DimensionMismatch("decoded and true paths differ in length".into()));
        }
        for (&e, &s) in d.iter().zip(t) {
            confusion[e][s] += 1;
        }
    }
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let correct: usize = (0..n).map(|s| confusion[perm[s]][s]).sum();
        let mu: Vec<DVector<f64>> = perm.iter().map(|&e| estimate.mu[e].clone()).collect();
        let dist = aad_vecs(&mu, &truth.mu)?;
        let better = match &best {
            None => true,
            Some((c, d, _)) => correct > *c || (correct == *c && dist < *d),
        };
        if better {
            best = Some((correct, dist, perm));
        }
    }
    Ok(best.expect("at least one permutation").2)
}

/// Fraction of occasions whose relabeled decoded state differs from the truth.
pub fn misclassification(decoded: &[Vec<usize>], truth_states: &[Vec<usize>], perm: &[usize]) -> f64 {
    let inv = inverse(perm);
    let (mut wrong, mut total) = (0usize, 0usize);
    for (d, t) in decoded.iter().zip(truth_states) {
        for (&e, &s) in d.iter().zip(t) {
            total += 1;
            wrong += usize::from(inv[e] != s);
        }
    }
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

/// Orthogonal `R` minimizing `||estimate R - target||_F`.
pub fn procrustes_rotation(estimate: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = (estimate.transpose() * target).svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v_t requested")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub seed: u64,
    pub aad_pi: f64,
    pub aad_mu: f64,
    pub aad_lambda: f64,
    pub aad_psi: f64,
    pub aad_b: f64,
    pub misclassification: f64,
    pub permutation: Vec<usize>,
    /// Aligned estimate minus truth, per transition coefficient.
    pub b_error: TransitionCoefs,
}

/// Aligns an estimate to the truth and computes every recovery metric. With
/// `procrustes` set, each state's loadings are orthogonally rotated onto the
/// true loadings before the loading AAD.
pub fn recovery_report(
    estimate: &ModelParams,
    decoded: &[Vec<usize>],
    truth: &ModelParams,
    truth_states: &[Vec<usize>],
    procrustes: bool,
    seed: u64,
) -> Result<RecoveryReport> {
    let perm = align_states(estimate, decoded, truth, truth_states)?;
    let aligned = estimate.permuted(&perm);
    let lambda: Vec<DMatrix<f64>> = if procrustes {
        aligned
            .lambda
            .iter()
            .zip(&truth.lambda)
            .map(|(e, t)| e * procrustes_rotation(e, t))
            .collect()
    } else {
        aligned.lambda.clone()
    };
    let theta_est = aligned.b.theta();
    let theta_true = truth.b.theta();
    let mut b_error = aligned.b.clone();
    let diff = &theta_est - &theta_true;
    b_error = TransitionCoefs::from_theta(b_error.states(), b_error.covariates(), &diff);
    Ok(RecoveryReport {
        seed,
        aad_pi: aad(aligned.pi.as_slice(), truth.pi.as_slice())?,
        aad_mu: aad_vecs(&aligned.mu, &truth.mu)?,
        aad_lambda: aad_mats(lambda.iter(), truth.lambda.iter())?,
        aad_psi: aad(aligned.psi.as_slice(), truth.psi.as_slice())?,
        aad_b: aad(theta_est.as_slice(), theta_true.as_slice())?,
        misclassification: misclassification(decoded, truth_states, &perm),
        permutation: perm,
        b_error,
    })
}

/// Mean and standard deviation (n - 1 denominator) of a sample.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        MetricSummary { mean, sd }
    }
}

/// Across-seed summary of recovery reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoverySummary {
    pub seeds: usize,
    pub pi: MetricSummary,
    pub mu: MetricSummary,
    pub lambda: MetricSummary,
    pub psi: MetricSummary,
    pub b: MetricSummary,
    pub misclassification: MetricSummary,
}

pub fn summarize(reports: &[RecoveryReport]) -> RecoverySummary {
    let col = |f: fn(&RecoveryReport) -> f64| MetricSummary::of(&reports.iter().map(f).collect::<Vec<_>>());
    RecoverySummary {
        seeds: reports.len(),
        pi: col(|r| r.aad_pi),
        mu: col(|r| r.aad_mu),
        lambda: col(|r| r.aad_lambda),
        psi: col(|r| r.aad_psi),
        b: col(|r| r.aad_b),
        misclassification: col(|r| r.misclassification),
    }
}

/// One row of the transition-bias table.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasEntry {
    pub from: usize,
    pub to: usize,
    pub covariate: usize,
    pub bias: MetricSummary,
}

/// Mean and SD across seeds of each aligned coefficient's error.
pub fn transition_bias(reports: &[RecoveryReport]) -> Vec<BiasEntry> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    let (n, d) = (first.b_error.states(), first.b_error.covariates());
    let mut out = Vec::new();
    for k in 0..n {
        for j in (0..n).filter(|&j| j != k) {
            for u in 0..d {
                let vals: Vec<f64> = reports.iter().map(|r| r.b_error.get(k, j)[u]).collect();
                out.push(BiasEntry {
                    from: k,
                    to: j,
                    covariate: u,
                    bias: MetricSummary::of(&vals),
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// model selection

#[derive(Debug, Clone)]
pub struct Candidate {
    pub states: usize,
    pub factors: usize,
    pub n_params: usize,
    /// Best fit over seeds, or the last error if every seed failed.
    pub outcome: std::result::Result<CandidateFit, String>,
}

#[derive(Debug, Clone)]
pub struct CandidateFit {
    pub seed: u64,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub candidates: Vec<Candidate>,
    /// `(J, K)` minimizing AIC among successful candidates.
    pub best_aic: Option<(usize, usize)>,
    pub best_bic: Option<(usize, usize)>,
}

impl SelectionReport {
    pub fn failures(&self) -> usize {
        self.candidates.iter().filter(|c| c.outcome.is_err()).count()
    }

    /// `(J, K, q, BIC)` rows in order of increasing complexity.
    pub fn complexity_table(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut rows: Vec<_> = self
            .candidates
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok().map(|f| (c.states, c.factors, c.n_params, f.bic)))
            .collect();
        rows.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        rows
    }
}

fn winner(candidates: &[Candidate], score: impl Fn(&CandidateFit) -> f64) -> Option<(usize, usize)> {
    candidates
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|f| (score(f), c.states, c.factors)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .map(|(_, j, k)| (j, k))
}

/// Fits every `(J, K)` pair, keeping the best log-likelihood over `seeds`.
/// Failed candidates are recorded and excluded from the winners.
pub fn select_model(dataset: &PanelDataset, states: &[usize], factors: &[usize], base: &FitConfig, seeds: &[u64]) -> Result<SelectionReport> {
    if states.is_empty() || factors.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("selection grid and seed list must be nonempty".into()));
    }
    let grid: Vec<(usize, usize)> = states.iter().flat_map(|&j| factors.iter().map(move |&k| (j, k))).collect();
    let jobs: Vec<(usize, usize, u64)> = grid.iter().flat_map(|&(j, k)| seeds.iter().map(move |&s| (j, k, s))).collect();
    let fits: Vec<std::result::Result<FitResult, Error>> = jobs
        .par_iter()
        .map(|&(j, k, s)| {
            let mut cfg = base.clone();
            cfg.states = j;
            cfg.factors = k;
            cfg.init.seed = s;
            fit(dataset, &cfg)
        })
        .collect();
    let mut candidates = Vec::with_capacity(grid.len());
    for (g, &(j, k)) in grid.iter().enumerate() {
        let mut best: Option<CandidateFit> = None;
        let mut last_err = None;
        for (si, &seed) in seeds.iter().enumerate() {
            match &fits[g * seeds.len() + si] {
                Ok(f) => {
                    if best.as_ref().is_none_or(|b| f.loglik > b.loglik) {
                        best = Some(CandidateFit {
                            seed,
                            loglik: f.loglik,
                            aic: f.aic,
                            bic: f.bic,
                            iterations: f.iterations,
                            converged: f.stop.converged(),
                        });
                    }
                }
                Err(e) => last_err = Some(e.to_string()),
            }
        }
        let dims = crate::model::ModelDims {
            states: j,
            factors: k,
            features: dataset.p,
            covariates: dataset.d,
        };
        candidates.push(Candidate {
            states: j,
            factors: k,
            n_params: crate::semis::free_parameter_count(&dims),
            outcome: best.ok_or_else(|| last_err.unwrap_or_default()),
        });
    }
    Ok(SelectionReport {
        best_aic: winner(&candidates, |f| f.aic),
        best_bic: winner(&candidates, |f| f.bic),
        candidates,
    })
}

// ---------------------------------------------------------------------------
// rotation

fn check_rank(lambda: &DMatrix<f64>) -> Result<()> {
    let sv = lambda.clone().svd(false, false).singular_values;
    let max = sv.max();
    if !(max > 0.0) || sv.iter().any(|&s| s <= 1e-10 * max) {
        return Err(Error::RankDeficient("loading matrix does not have full column rank".into()));
    }
    Ok(())
}

/// Raw varimax criterion: sum over columns of the variance of squared loadings.
pub fn varimax_criterion(lambda: &DMatrix<f64>) -> f64 {
    let p = lambda.nrows() as f64;
    lambda
        .column_iter()
        .map(|c| {
            let sq = c.map(|v| v * v);
            sq.map(|v| v * v).sum() / p - (sq.sum() / p).powi(2)
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct Rotation {
    pub loadings: DMatrix<f64>,
    pub rotation: DMatrix<f64>,
    /// Criterion after each sweep (varimax only).
    pub trace: Vec<f64>,
}

/// Kaiser-normalized varimax.
pub fn varimax(lambda: &DMatrix<f64>, eps: f64, max_sweeps: usize) -> Result<Rotation> {
    let (p, k) = lambda.shape();
    if k < 2 {
        return Ok(Rotation {
            loadings: lambda.clone(),
            rotation: DMatrix::identity(k, k),
            trace: vec![varimax_criterion(lambda)],
        });
    }
    check_rank(lambda)?;
    let scale: Vec<f64> = lambda.row_iter().map(|r| r.norm().max(f64::MIN_POSITIVE)).collect();
    let x = DMatrix::from_fn(p, k, |r, c| lambda[(r, c)] / scale[r]);
    let mut rot = DMatrix::identity(k, k);
    let mut d = 0.0;
    let mut trace = vec![varimax_criterion(&x)];
    for _ in 0..max_sweeps {
        let z = &x * &rot;
        let col_ss: Vec<f64> = z.column_iter().map(|c| c.norm_squared() / p as f64).collect();
        let target = DMatrix::from_fn(p, k, |r, c| z[(r, c)].powi(3) - z[(r, c)] * col_ss[c]);
        let svd = (x.transpose() * target).svd(true, true);
        rot = svd.u.as_ref().unwrap() * svd.v_t.as_ref().unwrap();
        let past = d;
        d = svd.singular_values.sum();
        trace.push(varimax_criterion(&(&x * &rot)));
        if d < past * (1.0 + eps) {
            break;
        }
    }
    let z = &x * &rot;
    Ok(Rotation {
        loadings: DMatrix::from_fn(p, k, |r, c| z[(r, c)] * scale[r]),
        rotation: rot,
        trace,
    })
}

/// Promax: varimax, then an oblique least-squares fit to the powered target.
pub fn promax(lambda: &DMatrix<f64>, power: f64) -> Result<Rotation> {
    let k = lambda.ncols();
    let vm = varimax(lambda, 1e-5, 1000)?;
    if k < 2 {
        return Ok(vm);
    }
    let x = &vm.loadings;
    let target = x.map(|v| v * v.abs().powf(power - 1.0));
    let xtx = x.transpose() * x;
    let chol = xtx.cholesky().ok_or_else(|| Error::RankDeficient("varimax loadings are rank deficient".into()))?;
    let mut u = chol.solve(&(x.transpose() * target));
    let utu_inv = (u.transpose() * &u)
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("promax target fit is singular".into()))?;
    for c in 0..k {
        let s = utu_inv[(c, c)].sqrt();
        u.column_mut(c).scale_mut(s);
    }
    Ok(Rotation {
        loadings: x * &u,
        rotation: &vm.rotation * u,
        trace: vm.trace,
    })
}

#[derive(Debug, Clone)]
pub struct StandardizedLoadings {
    pub loadings: DMatrix<f64>,
    /// `|loading| > .4`.
    pub salient: DMatrix<bool>,
}

/// Promax-rotated loadings divided by the model standard deviation of each
/// feature, `sqrt(diag(Lambda Lambda' + Psi))`, with each column signed to a
/// nonnegative sum.
pub fn promax_standardize(lambda: &DMatrix<f64>, psi: &DVector<f64>, power: f64) -> Result<StandardizedLoadings> {
    if psi.len() != lambda.nrows() {
        return Err(Error::DimensionMismatch(format!("{} uniquenesses for {} features", psi.len(), lambda.nrows())));
    }
    check_rank(lambda)?;
    let rotated = promax(lambda, power)?.loadings;
    let sd: Vec<f64> = (0..lambda.nrows())
        .map(|r| (lambda.row(r).norm_squared() + psi[r]).sqrt())
        .collect();
    let mut out = DMatrix::from_fn(rotated.nrows(), rotated.ncols(), |r, c| rotated[(r, c)] / sd[r]);
    for mut col in out.column_iter_mut() {
        if col.sum() < 0.0 {
            col.neg_mut();
        }
    }
    let salient = out.map(|v| v.abs() > SALIENT_LOADING);
    Ok(StandardizedLoadings { loadings: out, salient })
}
