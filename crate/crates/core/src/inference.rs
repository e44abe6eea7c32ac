//! Scaled forward-backward recursions and the E-step.
//!
//! Emission densities enter in log space. At each occasion they are shifted by
//! their maximum before exponentiation; the shift is added back into the
//! log scaling factor, so `alpha`, `beta`, `gamma` and `epsilon` are the same
//! as with raw densities while `log c(t)` stays exact.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matexp::{ExpmCache, ExpmCacheKey};
use crate::model::{ct_intensity_matrix, dt_transition_matrix, EmissionWorkspace, Mode, ModelParams, PanelDataset, SubjectRecord};

/// Log emission densities rescaled per occasion.
#[derive(Debug, Clone)]
pub struct ScaledEmissions {
    /// `exp(log P_j(y_t) - shift_t)`, `J x T`.
    pub scaled: DMatrix<f64>,
    /// Per-occasion shift, the column maximum of the log densities.
    pub shift: Vec<f64>,
}

impl ScaledEmissions {
    pub fn from_log(log_dens: &DMatrix<f64>) -> Self {
        let (j, t) = log_dens.shape();
        let mut scaled = DMatrix::zeros(j, t);
        let mut shift = Vec::with_capacity(t);
        for c in 0..t {
            let col = log_dens.column(c);
            let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let m = if m.is_finite() { m } else { 0.0 };
            for r in 0..j {
                scaled[(r, c)] = (col[r] - m).exp();
            }
            shift.push(m);
        }
        ScaledEmissions { scaled, shift }
    }

    pub fn states(&self) -> usize {
        self.scaled.nrows()
    }

    pub fn len(&self) -> usize {
        self.scaled.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.scaled.ncols() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Filtered probabilities `alpha_j(t) = P(w_t = j | y_1..y_t)`, `J x T`.
    pub alpha: DMatrix<f64>,
    /// Scaling factors in shifted units: `c(t) = scaled_c[t] * exp(shift_t)`.
    pub scaled_c: Vec<f64>,
    /// `log c(t)`; their sum is the subject's observed log-likelihood.
    pub log_c: Vec<f64>,
}

impl ForwardResult {
    pub fn loglik(&self) -> f64 {
        self.log_c.iter().sum()
    }
}

/// Forward recursion. `transitions[t-1]` moves the chain from occasion `t-1`
/// to `t` (0-based), so it has `T - 1` entries.
pub fn forward_pass(
    emis: &ScaledEmissions,
    pi: &DVector<f64>,
    transitions: &[DMatrix<f64>],
    subject: &str,
) -> Result<ForwardResult> {
    let (nj, nt) = emis.scaled.shape();
    assert_eq!(transitions.len() + 1, nt, "one transition matrix per interval");
    let mut alpha = DMatrix::zeros(nj, nt);
    let mut scaled_c = Vec::with_capacity(nt);
    let mut log_c = Vec::with_capacity(nt);
    let mut pred = pi.clone();
    for t in 0..nt {
        if t > 0 {
            let prev = alpha.column(t - 1);
            pred = transitions[t - 1].tr_mul(&prev);
        }
        let mut total = 0.0;
        for j in 0..nj {
            let v = pred[j] * emis.scaled[(j, t)];
            alpha[(j, t)] = v;
            total += v;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Underflow {
                subject: subject.to_string(),
                t,
            });
        }
        for j in 0..nj {
            alpha[(j, t)] /= total;
        }
        scaled_c.push(total);
        log_c.push(total.ln() + emis.shift[t]);
    }
    Ok(ForwardResult { alpha, scaled_c, log_c })
}

/// Backward recursion with `beta_j(T) = 1` and division by `c(t+1)`.
pub fn backward_pass(emis: &ScaledEmissions, transitions: &[DMatrix<f64>], scaled_c: &[f64], subject: &str) -> Result<DMatrix<f64>> {
    let (nj, nt) = emis.scaled.shape();
    let mut beta = DMatrix::zeros(nj, nt);
    beta.column_mut(nt - 1).fill(1.0);
    let mut weighted = DVector::zeros(nj);
    for t in (0..nt - 1).rev() {
        for k in 0..nj {
            weighted[k] = emis.scaled[(k, t + 1)] * beta[(k, t + 1)];
        }
        let next = &transitions[t] * &weighted / scaled_c[t + 1];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Underflow {
                subject: subject.to_string(),
                t,
            });
        }
        beta.set_column(t, &next);
    }
    Ok(beta)
}

/// Smoothed marginals `gamma` (`J x T`) and pairwise posteriors `epsilon`,
/// where `epsilon[t-1][(k, j)] = P(w_{t-1} = k, w_t = j | Y)`.
pub fn smooth(
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    scaled_c: &[f64],
    emis: &ScaledEmissions,
    transitions: &[DMatrix<f64>],
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let (nj, nt) = alpha.shape();
    let gamma = alpha.component_mul(beta);
    let mut epsilon = Vec::with_capacity(nt.saturating_sub(1));
    for t in 1..nt {
        let mut e = DMatrix::zeros(nj, nj);
        for k in 0..nj {
            let a = alpha[(k, t - 1)];
            if a == 0.0 {
                continue;
            }
            for j in 0..nj {
                e[(k, j)] = a * transitions[t - 1][(k, j)] * emis.scaled[(j, t)] * beta[(j, t)] / scaled_c[t];
            }
        }
        epsilon.push(e);
    }
    (gamma, epsilon)
}

/// Posterior quantities for one subject.
#[derive(Debug, Clone)]
pub struct SubjectPosterior {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub log_c: Vec<f64>,
    pub gamma: DMatrix<f64>,
    pub epsilon: Vec<DMatrix<f64>>,
}

impl SubjectPosterior {
    pub fn loglik(&self) -> f64 {
        self.log_c.iter().sum()
    }

    /// Run forward, backward and smoothing on precomputed inputs.
    pub fn compute(emis: &ScaledEmissions, pi: &DVector<f64>, transitions: &[DMatrix<f64>], subject: &str) -> Result<Self> {
        let fwd = forward_pass(emis, pi, transitions, subject)?;
        let beta = backward_pass(emis, transitions, &fwd.scaled_c, subject)?;
        let (gamma, epsilon) = smooth(&fwd.alpha, &beta, &fwd.scaled_c, emis, transitions);
        let post = SubjectPosterior {
            alpha: fwd.alpha,
            beta,
            log_c: fwd.log_c,
            gamma,
            epsilon,
        };
        #[cfg(debug_assertions)]
        post.check_invariants(1e-8);
        Ok(post)
    }

    /// Panics if a probability identity is violated beyond `tol`.
    pub fn check_invariants(&self, tol: f64) {
        for t in 0..self.gamma.ncols() {
            let sa: f64 = self.alpha.column(t).sum();
            let sg: f64 = self.gamma.column(t).sum();
            assert!((sa - 1.0).abs() < tol, "alpha sums to {sa} at t={t}");
            assert!((sg - 1.0).abs() < tol, "gamma sums to {sg} at t={t}");
        }
        for (i, e) in self.epsilon.iter().enumerate() {
            assert!((e.sum() - 1.0).abs() < tol, "epsilon sums to {} at t={}", e.sum(), i + 1);
            for j in 0..e.ncols() {
                let marg: f64 = e.column(j).sum();
                assert!((marg - self.gamma[(j, i + 1)]).abs() < tol);
            }
        }
    }

    /// Posterior-mode state per occasion; ties go to the lowest index.
    pub fn decode(&self) -> Vec<usize> {
        self.gamma
            .column_iter()
            .map(|col| {
                let mut best = 0;
                for j in 1..col.len() {
                    if col[j] > col[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSet {
    pub subjects: Vec<SubjectPosterior>,
}

impl PosteriorSet {
    pub fn loglik(&self) -> f64 {
        self.subjects.iter().map(|s| s.loglik()).sum()
    }
}

/// Transition matrices for each interval of a subject under the current
/// coefficients. Continuous mode goes through the shared expm cache.
pub fn subject_transitions(
    subject: &SubjectRecord,
    params: &ModelParams,
    mode: Mode,
    cache: Option<&ExpmCache>,
) -> Result<Vec<DMatrix<f64>>> {
    let nt = subject.len();
    let mut out = Vec::with_capacity(nt - 1);
    match mode {
        Mode::Discrete => {
            let mut last: Option<(DVector<f64>, DMatrix<f64>)> = None;
            for t in 1..nt {
                let x: DVector<f64> = subject.x.column(t).into_owned();
                let p = match &last {
                    Some((lx, lp)) if *lx == x => lp.clone(),
                    _ => dt_transition_matrix(&x, &params.b)?,
                };
                out.push(p.clone());
                last = Some((x, p));
            }
        }
        Mode::Continuous => {
            let local;
            let cache = match cache {
                Some(c) => c,
                None => {
                    local = ExpmCache::new(Default::default());
                    &local
                }
            };
            for (t, delta) in (1..nt).zip(subject.deltas()) {
                let x: DVector<f64> = subject.x.column(t).into_owned();
                let q = ct_intensity_matrix(&x, &params.b)?;
                let entry = cache.get_or_compute(&ExpmCacheKey::new(&x, delta), &q, false)?;
                out.push(entry.p.clone());
            }
        }
    }
    Ok(out)
}

/// Accumulated E-step moments for the closed-form M-step updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    /// `sum_i gamma_ij(1)`
    pub initial: DVector<f64>,
    /// `sum gamma_ij(t)` per state.
    pub weight: Vec<f64>,
    /// `sum gamma y E[z~]'`, `p x (K+1)` per state.
    pub yz: Vec<DMatrix<f64>>,
    /// `sum gamma E[z~ z~']`, `(K+1) x (K+1)` per state.
    pub zz: Vec<DMatrix<f64>>,
    /// `sum gamma y o y` per state.
    pub yy: Vec<DVector<f64>>,
    pub n_obs: usize,
}

impl SuffStats {
    pub fn zeros(states: usize, factors: usize, features: usize) -> Self {
        SuffStats {
            initial: DVector::zeros(states),
            weight: vec![0.0; states],
            yz: vec![DMatrix::zeros(features, factors + 1); states],
            zz: vec![DMatrix::zeros(factors + 1, factors + 1); states],
            yy: vec![DVector::zeros(features); states],
            n_obs: 0,
        }
    }

    pub fn merge(&mut self, other: &SuffStats) {
        self.initial += &other.initial;
        for j in 0..self.weight.len() {
            self.weight[j] += other.weight[j];
            self.yz[j] += &other.yz[j];
            self.zz[j] += &other.zz[j];
            self.yy[j] += &other.yy[j];
        }
        self.n_obs += other.n_obs;
    }

    /// Add one observation with posterior weight `w` and factor mean `m`.
    fn push(&mut self, j: usize, w: f64, y: &DVector<f64>, m: &DVector<f64>) {
        if w == 0.0 {
            return;
        }
        let k = m.len();
        let mut zt = DVector::zeros(k + 1);
        zt.rows_mut(0, k).copy_from(m);
        zt[k] = 1.0;
        self.weight[j] += w;
        self.yz[j].ger(w, y, &zt, 1.0);
        self.zz[j].ger(w, &zt, &zt, 1.0);
        for (acc, v) in self.yy[j].iter_mut().zip(y.iter()) {
            *acc += w * v * v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub stats: SuffStats,
    pub posterior: PosteriorSet,
    pub loglik: f64,
}

/// Log densities (`J x T`) and factor means (`[t][j]`) for one subject.
pub fn subject_emissions(
    subject: &SubjectRecord,
    params: &ModelParams,
    ws: &EmissionWorkspace,
) -> Result<(DMatrix<f64>, Vec<Vec<DVector<f64>>>)> {
    let nj = params.pi.len();
    let nt = subject.len();
    let mut log_dens = DMatrix::zeros(nj, nt);
    let mut means = Vec::with_capacity(nt);
    for t in 0..nt {
        let y: DVector<f64> = subject.y.column(t).into_owned();
        let mut row = Vec::with_capacity(nj);
        for j in 0..nj {
            let ev = ws.evaluate(&y, j, params);
            if !ev.log_density.is_finite() {
                return Err(Error::DegenerateEmission {
                    state: j,
                    detail: format!("subject `{}` occasion {t}: log-density {}", subject.id, ev.log_density),
                });
            }
            log_dens[(j, t)] = ev.log_density;
            row.push(ev.factor_mean);
        }
        means.push(row);
    }
    Ok((log_dens, means))
}

fn subject_estep(
    subject: &SubjectRecord,
    params: &ModelParams,
    ws: &EmissionWorkspace,
    mode: Mode,
    cache: Option<&ExpmCache>,
) -> Result<(SubjectPosterior, SuffStats)> {
    let dims = params.dims();
    let (log_dens, means) = subject_emissions(subject, params, ws)?;
    let emis = ScaledEmissions::from_log(&log_dens);
    let transitions = subject_transitions(subject, params, mode, cache)?;
    let post = SubjectPosterior::compute(&emis, &params.pi, &transitions, &subject.id)?;
    let mut stats = SuffStats::zeros(dims.states, dims.factors, dims.features);
    stats.initial = post.gamma.column(0).into_owned();
    stats.n_obs = subject.len();
    for t in 0..subject.len() {
        let y: DVector<f64> = subject.y.column(t).into_owned();
        for j in 0..dims.states {
            stats.push(j, post.gamma[(j, t)], &y, &means[t][j]);
        }
    }
    let k = dims.factors;
    for j in 0..dims.states {
        let w = stats.weight[j];
        let mut block = stats.zz[j].view_mut((0, 0), (k, k));
        block += ws.m(j) * w;
    }
    Ok((post, stats))
}

/// E-step over all subjects. Per-subject work runs in parallel; the
/// reduction is sequential in subject order so results do not depend on the
/// worker count.
pub fn estep(dataset: &PanelDataset, params: &ModelParams, mode: Mode, cache: Option<&ExpmCache>) -> Result<EStep> {
    let ws = EmissionWorkspace::new(params)?;
    let parts: Vec<Result<(SubjectPosterior, SuffStats)>> = dataset
        .subjects
        .par_iter()
        .map(|s| subject_estep(s, params, &ws, mode, cache))
        .collect();
    let dims = params.dims();
    let mut stats = SuffStats::zeros(dims.states, dims.factors, dims.features);
    let mut subjects = Vec::with_capacity(parts.len());
    let mut loglik = 0.0;
    for part in parts {
        let (post, s) = part?;
        stats.merge(&s);
        loglik += post.loglik();
        subjects.push(post);
    }
    Ok(EStep {
        stats,
        posterior: PosteriorSet { subjects },
        loglik,
    })
}

/// Observed-data log-likelihood only.
pub fn loglik(dataset: &PanelDataset, params: &ModelParams, mode: Mode, cache: Option<&ExpmCache>) -> Result<f64> {
    let ws = EmissionWorkspace::new(params)?;
    let parts: Vec<Result<f64>> = dataset
        .subjects
        .par_iter()
        .map(|s| {
            let (log_dens, _) = subject_emissions(s, params, &ws)?;
            let emis = ScaledEmissions::from_log(&log_dens);
            let transitions = subject_transitions(s, params, mode, cache)?;
            Ok(forward_pass(&emis, &params.pi, &transitions, &s.id)?.loglik())
        })
        .collect();
    parts.into_iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn log_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
        // rows are occasions, columns states
        let t = rows.len();
        let j = rows[0].len();
        DMatrix::from_fn(j, t, |r, c| rows[c][r].ln())
    }

    #[test]
    fn single_state_chain() {
        let log_dens = DMatrix::from_row_slice(1, 3, &[-1.0, -2.5, 0.3]);
        let emis = ScaledEmissions::from_log(&log_dens);
        let trans = vec![DMatrix::from_element(1, 1, 1.0); 2];
        let post = SubjectPosterior::compute(&emis, &dvector![1.0], &trans, "s").unwrap();
        assert!(post.alpha.iter().all(|&v| v == 1.0));
        assert!(post.beta.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        for t in 0..3 {
            assert!((post.log_c[t] - log_dens[(0, t)]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_state_toy_forward() {
        let emis = ScaledEmissions::from_log(&log_matrix(&[&[2.0, 1.0], &[1.0, 3.0]]));
        let trans = vec![DMatrix::from_element(2, 2, 0.5)];
        let fwd = forward_pass(&emis, &dvector![0.5, 0.5], &trans, "s").unwrap();
        assert!((fwd.alpha[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((fwd.log_c[0] - 1.5f64.ln()).abs() < 1e-15);
        // prediction is uniform, so alpha(2) = (1, 3)/4 and c(2) = 2
        assert!((fwd.alpha[(0, 1)] - 0.25).abs() < 1e-15);
        assert!((fwd.log_c[1] - 2f64.ln()).abs() < 1e-15);
        // exhaustive 4-path total: sum_paths .5 * .5 * P(y1|w1) P(y2|w2) = .25 * 3 * 4
        assert!((fwd.loglik() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn terminal_beta_is_one() {
        let emis = ScaledEmissions::from_log(&log_matrix(&[&[0.2, 0.9], &[0.5, 0.1], &[0.3, 0.3]]));
        let trans = vec![DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]); 2];
        let fwd = forward_pass(&emis, &dvector![0.4, 0.6], &trans, "s").unwrap();
        let beta = backward_pass(&emis, &trans, &fwd.scaled_c, "s").unwrap();
        assert_eq!(beta.column(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn dominant_state_one_hot() {
        let log_dens = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, -900.0, -900.0, -900.0]);
        let emis = ScaledEmissions::from_log(&log_dens);
        let trans = vec![DMatrix::from_element(2, 2, 0.5); 2];
        let post = SubjectPosterior::compute(&emis, &dvector![0.5, 0.5], &trans, "s").unwrap();
        for t in 0..3 {
            assert_eq!(post.gamma[(0, t)], 1.0);
            assert_eq!(post.gamma[(1, t)], 0.0);
        }
        assert_eq!(post.decode(), vec![0, 0, 0]);
    }

    #[test]
    fn uniform_gamma_decodes_to_first_state() {
        let emis = ScaledEmissions::from_log(&DMatrix::zeros(2, 2));
        let trans = vec![DMatrix::from_element(2, 2, 0.5)];
        let post = SubjectPosterior::compute(&emis, &dvector![0.5, 0.5], &trans, "s").unwrap();
        assert_eq!(post.decode(), vec![0, 0]);
    }

    #[test]
    fn underflow_names_subject_and_time() {
        let emis = ScaledEmissions::from_log(&log_matrix(&[&[1.0, 1.0], &[1.0, 0.0]]));
        // state 1 is absorbing at t = 0 but has zero density at t = 1
        let trans = vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0])];
        let r = forward_pass(&emis, &dvector![1.0, 0.0], &trans, "subj-7");
        match r {
            Err(Error::Underflow { subject, t }) => {
                assert_eq!(subject, "subj-7");
                assert_eq!(t, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
