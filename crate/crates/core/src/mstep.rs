//! M-step: closed-form updates for `pi`, the augmented loadings and `Psi`,
//! and one Newton-Raphson (discrete) or Fisher-scoring (continuous) step on
//! the transition coefficients.

use std::collections::HashMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{EStep, PosteriorSet, SuffStats};
use crate::matexp::{generator_directions, CachedTransition, ExpmCache, ExpmCacheKey, ExpmMethod};
use crate::model::{ct_intensity_matrix, dt_transition_matrix, Mode, ModelParams, PanelDataset, TransitionCoefs, PSI_FLOOR};

/// Maximum number of step halvings before a transition step is rejected.
pub const MAX_HALVINGS: usize = 5;

/// Score and curvature of the transition objective at the current coefficients.
#[derive(Debug, Clone)]
pub struct OptStepReport {
    pub score: DVector<f64>,
    /// Negative Hessian (discrete) or Fisher information (continuous).
    pub info: DMatrix<f64>,
    pub step_norm: f64,
    pub stabilized: bool,
}

/// `pi_j = sum_i gamma_ij(1) / sum_i sum_k gamma_ik(1)`.
pub fn update_pi(stats: &SuffStats) -> DVector<f64> {
    let total = stats.initial.sum();
    &stats.initial / total
}

/// Augmented loadings `(Lambda_j, mu_j)` from the weighted normal equations.
pub fn update_loadings(stats: &SuffStats, j: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let gram = &stats.zz[j];
    let k = gram.nrows() - 1;
    let solved = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&stats.yz[j].transpose()))
        .ok_or_else(|| Error::Singular(format!("moment matrix of state {j} is not positive definite (weight {:.3e})", stats.weight[j])))?;
    // solved = zz^-1 yz' ; loadings = yz zz^-1 = solved'
    let aug = solved.transpose();
    if aug.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("loading update for state {j} is not finite")));
    }
    Ok((aug.columns(0, k).into_owned(), aug.column(k).into_owned()))
}

/// Diagonal of `Psi` from the new augmented loadings, floored at [`PSI_FLOOR`].
pub fn update_psi(stats: &SuffStats, loadings: &[(DMatrix<f64>, DVector<f64>)]) -> DVector<f64> {
    let p = stats.yy[0].len();
    let mut psi = DVector::<f64>::zeros(p);
    for (j, (lambda, mu)) in loadings.iter().enumerate() {
        let k = lambda.ncols();
        for l in 0..p {
            let mut fitted = mu[l] * stats.yz[j][(l, k)];
            for c in 0..k {
                fitted += lambda[(l, c)] * stats.yz[j][(l, c)];
            }
            psi[l] += stats.yy[j][l] - fitted;
        }
    }
    psi.map(|v| (v / stats.n_obs as f64).max(PSI_FLOOR))
}

/// `h(pi) = sum_j gamma_j(1) log pi_j`.
pub fn initial_objective(stats: &SuffStats, pi: &DVector<f64>) -> f64 {
    stats
        .initial
        .iter()
        .zip(pi.iter())
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, p)| g * p.ln())
        .sum()
}

/// The measurement part `h(Psi, Lambda, mu)`; the M-step minimizes it.
pub fn measurement_objective(stats: &SuffStats, loadings: &[(DMatrix<f64>, DVector<f64>)], psi: &DVector<f64>) -> f64 {
    let log_det: f64 = psi.iter().map(|v| v.ln()).sum();
    let mut h = 0.0;
    for (j, (lambda, mu)) in loadings.iter().enumerate() {
        let k = lambda.ncols();
        let mut aug = DMatrix::zeros(lambda.nrows(), k + 1);
        aug.columns_mut(0, k).copy_from(lambda);
        aug.set_column(k, mu);
        h += stats.weight[j] * log_det;
        let mut scaled = aug.clone();
        for (l, mut row) in scaled.row_iter_mut().enumerate() {
            row /= psi[l];
        }
        for l in 0..psi.len() {
            h += stats.yy[j][l] / psi[l];
        }
        h -= 2.0 * scaled.component_mul(&stats.yz[j]).sum();
        h += (aug.transpose() * &scaled).component_mul(&stats.zz[j]).sum();
    }
    h
}

// ---------------------------------------------------------------------------
// discrete-time transition coefficients

/// `sum_{i,t>=2} sum_j epsilon_kj(t) log P_kj(x_t)` for row `k`.
pub fn dt_row_objective(dataset: &PanelDataset, posterior: &PosteriorSet, b: &TransitionCoefs, k: usize) -> Result<f64> {
    let mut h = 0.0;
    for (s, post) in dataset.subjects.iter().zip(&posterior.subjects) {
        for t in 1..s.len() {
            let x: DVector<f64> = s.x.column(t).into_owned();
            let p = dt_transition_matrix(&x, b)?;
            for j in 0..b.states() {
                let e = post.epsilon[t - 1][(k, j)];
                if e > 0.0 {
                    h += e * p[(k, j)].ln();
                }
            }
        }
    }
    Ok(h)
}

/// Score and negative Hessian of the row-`k` objective, stacked over `j != k`.
pub fn dt_score_info(dataset: &PanelDataset, posterior: &PosteriorSet, b: &TransitionCoefs, k: usize) -> Result<OptStepReport> {
    let n = b.states();
    let d = b.covariates();
    let others: Vec<usize> = (0..n).filter(|&j| j != k).collect();
    let dim = others.len() * d;
    let mut score = DVector::zeros(dim);
    let mut info = DMatrix::zeros(dim, dim);
    for (s, post) in dataset.subjects.iter().zip(&posterior.subjects) {
        let mut cached: Option<(DVector<f64>, DMatrix<f64>)> = None;
        for t in 1..s.len() {
            let x: DVector<f64> = s.x.column(t).into_owned();
            let p = match &cached {
                Some((cx, cp)) if *cx == x => cp.clone(),
                _ => dt_transition_matrix(&x, b)?,
            };
            let g = post.gamma[(k, t - 1)];
            let eps = &post.epsilon[t - 1];
            let xx = &x * x.transpose();
            for (a, &j) in others.iter().enumerate() {
                let resid = eps[(k, j)] - g * p[(k, j)];
                score.rows_mut(a * d, d).axpy(resid, &x, 1.0);
                for (c, &jj) in others.iter().enumerate() {
                    let kron = if j == jj { 1.0 } else { 0.0 };
                    let w = g * p[(k, j)] * (kron - p[(k, jj)]);
                    if w != 0.0 {
                        let mut block = info.view_mut((a * d, c * d), (d, d));
                        block += &xx * w;
                    }
                }
            }
            cached = Some((x, p));
        }
    }
    let info = (&info + info.transpose()) * 0.5;
    Ok(OptStepReport {
        score,
        info,
        step_norm: 0.0,
        stabilized: false,
    })
}

fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let sol = m.clone().cholesky().map(|c| c.solve(rhs)).or_else(|| m.clone().lu().solve(rhs))?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Newton direction `M^-1 S`, or `(M + S S')^-1 S` when stabilized. A plain
/// step that cannot be solved falls back to the stabilized form.
pub fn newton_direction(report: &mut OptStepReport, stabilize: bool) -> Result<DVector<f64>> {
    let s = &report.score;
    if s.iter().all(|&v| v == 0.0) {
        report.step_norm = 0.0;
        report.stabilized = stabilize;
        return Ok(DVector::zeros(s.len()));
    }
    let damped = || &report.info + s * s.transpose();
    let (step, stabilized) = if stabilize {
        (spd_solve(&damped(), s), true)
    } else {
        match spd_solve(&report.info, s) {
            Some(v) => (Some(v), false),
            None => (spd_solve(&damped(), s), true),
        }
    };
    let step = step.ok_or_else(|| Error::Singular("transition information matrix is singular even with damping".into()))?;
    report.step_norm = step.norm();
    report.stabilized = stabilized;
    Ok(step)
}

/// One unguarded Newton step per row of `B`.
pub fn dt_update_b(b: &TransitionCoefs, reports: &mut [OptStepReport], stabilize: bool) -> Result<TransitionCoefs> {
    let mut out = b.clone();
    for (k, report) in reports.iter_mut().enumerate() {
        let step = newton_direction(report, stabilize)?;
        out.set_row_vector(k, &(b.row_vector(k) + step));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// continuous-time transition coefficients

/// Posterior transition counts grouped by `(x, delta)`.
#[derive(Debug, Clone)]
struct IntervalGroup {
    key: ExpmCacheKey,
    x: DVector<f64>,
    /// `sum epsilon(t)` over intervals in the group.
    eps: DMatrix<f64>,
    /// `sum gamma(t-1)` over intervals in the group.
    gam: DVector<f64>,
    subject: usize,
    t: usize,
}

fn group_intervals(dataset: &PanelDataset, posterior: &PosteriorSet, states: usize) -> Vec<IntervalGroup> {
    let mut index: HashMap<ExpmCacheKey, usize> = HashMap::new();
    let mut groups: Vec<IntervalGroup> = Vec::new();
    for (i, (s, post)) in dataset.subjects.iter().zip(&posterior.subjects).enumerate() {
        for (t, delta) in (1..s.len()).zip(s.deltas()) {
            let x: DVector<f64> = s.x.column(t).into_owned();
            let key = ExpmCacheKey::new(&x, delta);
            let g = *index.entry(key.clone()).or_insert_with(|| {
                groups.push(IntervalGroup {
                    key,
                    x,
                    eps: DMatrix::zeros(states, states),
                    gam: DVector::zeros(states),
                    subject: i,
                    t,
                });
                groups.len() - 1
            });
            groups[g].eps += &post.epsilon[t - 1];
            groups[g].gam += post.gamma.column(t - 1);
        }
    }
    groups
}

fn group_transition(group: &IntervalGroup, b: &TransitionCoefs, cache: &ExpmCache, with_derivatives: bool) -> Result<std::sync::Arc<CachedTransition>> {
    let q = ct_intensity_matrix(&group.x, b)?;
    cache.get_or_compute(&group.key, &q, with_derivatives)
}

fn ct_objective_groups(groups: &[IntervalGroup], b: &TransitionCoefs, cache: &ExpmCache) -> Result<f64> {
    let parts: Vec<Result<f64>> = groups
        .par_iter()
        .map(|g| {
            let tr = group_transition(g, b, cache, false)?;
            let mut h = 0.0;
            for (e, p) in g.eps.iter().zip(tr.p.iter()) {
                if *e > 0.0 {
                    h += e * p.ln();
                }
            }
            Ok(h)
        })
        .collect();
    parts.into_iter().sum()
}

/// `sum_{i,t>=2} sum_{k,j} epsilon_kj(t) log P_kj(delta_t)`.
pub fn ct_objective(dataset: &PanelDataset, posterior: &PosteriorSet, b: &TransitionCoefs, method: ExpmMethod) -> Result<f64> {
    let groups = group_intervals(dataset, posterior, b.states());
    ct_objective_groups(&groups, b, &ExpmCache::new(method))
}

fn ct_score_info_groups(
    dataset: &PanelDataset,
    groups: &[IntervalGroup],
    b: &TransitionCoefs,
    cache: &ExpmCache,
) -> Result<OptStepReport> {
    let n = b.states();
    let d = b.covariates();
    let dirs = generator_directions(n);
    let dim = b.n_free();
    let parts: Vec<Result<(DVector<f64>, DMatrix<f64>)>> = groups
        .par_iter()
        .map(|g| {
            let tr = group_transition(g, b, cache, true)?;
            let derivs = tr.directional.as_ref().expect("derivatives requested");
            for a in 0..n {
                for c in 0..n {
                    let v = tr.p[(a, c)];
                    if v < 1e-300 && (g.eps[(a, c)] > 0.0 || g.gam[a] > 0.0) {
                        return Err(Error::VanishingProbability {
                            subject: dataset.subjects[g.subject].id.clone(),
                            t: g.t,
                            from: a,
                            to: c,
                            value: v,
                        });
                    }
                }
            }
            // weights per entry: eps / P and gamma / P
            let w_eps = g.eps.component_div(&tr.p);
            let mut w_fisher = DMatrix::zeros(n, n);
            for a in 0..n {
                for c in 0..n {
                    w_fisher[(a, c)] = g.gam[a] / tr.p[(a, c)];
                }
            }
            let nd = dirs.len();
            let mut pair_score = DVector::zeros(nd);
            let mut pair_info = DMatrix::zeros(nd, nd);
            for e in 0..nd {
                pair_score[e] = w_eps.component_mul(&derivs[e]).sum();
                let weighted = w_fisher.component_mul(&derivs[e]);
                for f in 0..=e {
                    let v = weighted.component_mul(&derivs[f]).sum();
                    pair_info[(e, f)] = v;
                    pair_info[(f, e)] = v;
                }
            }
            let mut score = DVector::zeros(dim);
            let mut info = DMatrix::zeros(dim, dim);
            for (e, &(k, j)) in dirs.iter().enumerate() {
                let se = tr.q[(k, j)];
                for u in 0..d {
                    let iu = b.theta_index(k, j, u);
                    score[iu] = g.x[u] * se * pair_score[e];
                    for (f, &(kk, jj)) in dirs.iter().enumerate() {
                        let sf = tr.q[(kk, jj)];
                        for v in 0..d {
                            let iv = b.theta_index(kk, jj, v);
                            info[(iu, iv)] = g.x[u] * g.x[v] * se * sf * pair_info[(e, f)];
                        }
                    }
                }
            }
            Ok((score, info))
        })
        .collect();
    let mut score = DVector::zeros(dim);
    let mut info = DMatrix::zeros(dim, dim);
    for part in parts {
        let (s, m) = part?;
        score += s;
        info += m;
    }
    let info = (&info + info.transpose()) * 0.5;
    Ok(OptStepReport {
        score,
        info,
        step_norm: 0.0,
        stabilized: false,
    })
}

/// Score and Fisher information of the continuous-time transition objective
/// with respect to `theta`.
pub fn ct_score_info(dataset: &PanelDataset, posterior: &PosteriorSet, b: &TransitionCoefs, cache: &ExpmCache) -> Result<OptStepReport> {
    let groups = group_intervals(dataset, posterior, b.states());
    ct_score_info_groups(dataset, &groups, b, cache)
}

/// One unguarded Fisher-scoring step.
pub fn ct_update_theta(theta: &DVector<f64>, report: &mut OptStepReport, stabilize: bool) -> Result<DVector<f64>> {
    Ok(theta + newton_direction(report, stabilize)?)
}

// ---------------------------------------------------------------------------
// guarded transition step and the full M-step

#[derive(Debug, Clone)]
pub struct TransitionUpdate {
    pub b: TransitionCoefs,
    pub reports: Vec<OptStepReport>,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Halvings applied (summed over rows in discrete mode).
    pub halvings: usize,
    /// Steps abandoned after [`MAX_HALVINGS`] halvings.
    pub rejected: usize,
}

fn accept(new: f64, old: f64) -> bool {
    new >= old - 1e-12 * old.abs().max(1.0)
}

fn row_has_information(report: &OptStepReport) -> bool {
    report.info.iter().any(|v| v.abs() > 1e-12)
}

/// One Newton/Fisher step on the transition coefficients, halved until the
/// transition objective does not decrease (at most [`MAX_HALVINGS`] times,
/// then the step is dropped).
pub fn transition_step(
    dataset: &PanelDataset,
    posterior: &PosteriorSet,
    b: &TransitionCoefs,
    mode: Mode,
    stabilize: bool,
    cache: &ExpmCache,
) -> Result<TransitionUpdate> {
    let n = b.states();
    if n < 2 {
        return Ok(TransitionUpdate {
            b: b.clone(),
            reports: Vec::new(),
            objective_before: 0.0,
            objective_after: 0.0,
            halvings: 0,
            rejected: 0,
        });
    }
    match mode {
        Mode::Discrete => {
            let mut out = b.clone();
            let mut reports = Vec::with_capacity(n);
            let (mut before, mut after, mut halvings, mut rejected) = (0.0, 0.0, 0, 0);
            for k in 0..n {
                let mut report = dt_score_info(dataset, posterior, b, k)?;
                let h0 = dt_row_objective(dataset, posterior, b, k)?;
                before += h0;
                if !row_has_information(&report) {
                    debug!("transition row {k} carries no posterior mass; left unchanged");
                    after += h0;
                    reports.push(report);
                    continue;
                }
                let step = newton_direction(&mut report, stabilize)?;
                let base = b.row_vector(k);
                let mut scale = 1.0;
                let mut accepted = None;
                for attempt in 0..=MAX_HALVINGS {
                    let mut trial = out.clone();
                    trial.set_row_vector(k, &(&base + &step * scale));
                    // the row objective only depends on row k
                    let h1 = dt_row_objective(dataset, posterior, &trial, k)?;
                    if h1.is_finite() && accept(h1, h0) {
                        halvings += attempt;
                        accepted = Some((trial, h1));
                        break;
                    }
                    scale *= 0.5;
                }
                match accepted {
                    Some((trial, h1)) => {
                        out = trial;
                        after += h1;
                    }
                    None => {
                        halvings += MAX_HALVINGS;
                        rejected += 1;
                        after += h0;
                    }
                }
                reports.push(report);
            }
            Ok(TransitionUpdate {
                b: out,
                reports,
                objective_before: before,
                objective_after: after,
                halvings,
                rejected,
            })
        }
        Mode::Continuous => {
            let groups = group_intervals(dataset, posterior, n);
            let mut report = ct_score_info_groups(dataset, &groups, b, cache)?;
            let h0 = ct_objective_groups(&groups, b, cache)?;
            let theta = b.theta();
            let step = newton_direction(&mut report, stabilize)?;
            let trial_cache = ExpmCache::new(cache.method());
            let mut scale = 1.0;
            for attempt in 0..=MAX_HALVINGS {
                let trial = TransitionCoefs::from_theta(n, b.covariates(), &(&theta + &step * scale));
                trial_cache.clear();
                let h1 = match ct_objective_groups(&groups, &trial, &trial_cache) {
                    Ok(h) => h,
                    Err(e) if e.is_numerical() => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                };
                if h1.is_finite() && accept(h1, h0) {
                    return Ok(TransitionUpdate {
                        b: trial,
                        reports: vec![report],
                        objective_before: h0,
                        objective_after: h1,
                        halvings: attempt,
                        rejected: 0,
                    });
                }
                scale *= 0.5;
            }
            Ok(TransitionUpdate {
                b: b.clone(),
                reports: vec![report],
                objective_before: h0,
                objective_after: h0,
                halvings: MAX_HALVINGS,
                rejected: 1,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub params: ModelParams,
    pub transition: TransitionUpdate,
}

/// Full M-step from one E-step's output.
pub fn mstep(
    dataset: &PanelDataset,
    estep: &EStep,
    params: &ModelParams,
    mode: Mode,
    stabilize: bool,
    cache: &ExpmCache,
) -> Result<MStepOutcome> {
    let stats = &estep.stats;
    let pi = update_pi(stats);
    let loadings = (0..params.pi.len())
        .map(|j| update_loadings(stats, j))
        .collect::<Result<Vec<_>>>()?;
    let psi = update_psi(stats, &loadings);
    let transition = transition_step(dataset, &estep.posterior, &params.b, mode, stabilize, cache)?;
    let (lambda, mu) = loadings.into_iter().unzip();
    Ok(MStepOutcome {
        params: ModelParams {
            pi,
            mu,
            lambda,
            psi,
            b: transition.b.clone(),
        },
        transition,
    })
}
