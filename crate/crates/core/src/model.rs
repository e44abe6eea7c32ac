//! Data and parameter types shared by the discrete- and continuous-time
//! models, plus the emission and transition evaluations both variants use.
//!
//! Conditional on state `j`, an observation is `y = mu_j + Lambda_j z + e`
//! with `z ~ N(0, I_K)` and `e ~ N(0, Psi)`, `Psi` diagonal and shared by all
//! states. Emission densities are evaluated through the Woodbury identities
//! so the `p x p` covariance is never inverted.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower bound applied to the unique variances during the M-step.
pub const PSI_FLOOR: f64 = 1e-6;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which transition model is used between consecutive occasions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Multinomial-logit transition probabilities; interval lengths ignored.
    Discrete,
    /// Log-linear transition intensities; `P(delta) = exp(delta * Q)`.
    Continuous,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Discrete => "dt",
            Mode::Continuous => "ct",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dt" | "discrete" => Ok(Mode::Discrete),
            "ct" | "continuous" => Ok(Mode::Continuous),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

/// One subject's panel: integer occasion times, a `p x T` response matrix and
/// a `d x T` covariate matrix whose first row is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<i64>,
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, times: Vec<i64>, y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let rec = SubjectRecord {
            id: id.into(),
            times,
            y,
            x,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.times.len();
        let fail = |msg: String| Err(Error::InvalidData(format!("subject `{}`: {msg}", self.id)));
        if t < 2 {
            return fail(format!("needs at least 2 occasions, found {t}"));
        }
        if self.y.ncols() != t || self.x.ncols() != t {
            return fail(format!(
                "{} times but Y has {} and X has {} columns",
                t,
                self.y.ncols(),
                self.x.ncols()
            ));
        }
        if let Some(w) = self.times.windows(2).find(|w| w[1] <= w[0]) {
            return fail(format!("times not strictly increasing ({} then {})", w[0], w[1]));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return fail("non-finite response value".into());
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return fail("non-finite covariate value".into());
        }
        if self.x.nrows() == 0 || self.x.row(0).iter().any(|&v| v != 1.0) {
            return fail("first covariate row must be the intercept (all ones)".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Interval lengths `times[t] - times[t-1]` for `t = 1..T` (0-based).
    pub fn deltas(&self) -> Vec<i64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// True when every covariate column equals the first one.
    pub fn has_static_covariates(&self) -> bool {
        let first = self.x.column(0);
        self.x.column_iter().all(|c| c == first)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub subjects: Vec<SubjectRecord>,
    pub p: usize,
    pub d: usize,
}

impl PanelDataset {
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::InvalidData("dataset has no subjects".into()))?;
        let (p, d) = (first.y.nrows(), first.x.nrows());
        if p == 0 {
            return Err(Error::InvalidData("no response features".into()));
        }
        for s in &subjects {
            s.validate()?;
            if s.y.nrows() != p || s.x.nrows() != d {
                return Err(Error::InvalidData(format!(
                    "subject `{}` has p={}, d={} but dataset has p={p}, d={d}",
                    s.id,
                    s.y.nrows(),
                    s.x.nrows()
                )));
            }
        }
        Ok(PanelDataset { subjects, p, d })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of observations, the sum of panel lengths.
    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    /// All observations as columns of one `p x n` matrix, in subject order.
    pub fn pooled_y(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p, self.n_obs());
        let mut c = 0;
        for s in &self.subjects {
            for col in s.y.column_iter() {
                out.set_column(c, &col);
                c += 1;
            }
        }
        out
    }

    /// True when some subject has an interval longer than one time unit.
    pub fn has_irregular_times(&self) -> bool {
        self.subjects.iter().any(|s| s.deltas().iter().any(|&d| d != 1))
    }
}

/// Model dimensions for one `(J, K)` configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    /// Number of hidden states `J`.
    pub states: usize,
    /// Number of factors `K`, shared by all states.
    pub factors: usize,
    /// Number of response features `p`.
    pub features: usize,
    /// Number of transition covariates `d`, intercept included.
    pub covariates: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.states == 0 {
            return Err(Error::InvalidConfig("J must be at least 1".into()));
        }
        if self.factors == 0 || self.factors >= self.features {
            return Err(Error::InvalidConfig(format!(
                "K must satisfy 1 <= K < p (K={}, p={})",
                self.factors, self.features
            )));
        }
        if self.covariates == 0 {
            return Err(Error::InvalidConfig("d must be at least 1 (intercept)".into()));
        }
        Ok(())
    }
}

/// Transition coefficients `B_kj`, one length-`d` vector per ordered state pair.
///
/// Diagonal blocks are kept at zero: they are the reference category for the
/// multinomial logit and are undefined for intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCoefs {
    states: usize,
    covariates: usize,
    blocks: Vec<DVector<f64>>,
}

impl TransitionCoefs {
    pub fn zeros(states: usize, covariates: usize) -> Self {
        TransitionCoefs {
            states,
            covariates,
            blocks: vec![DVector::zeros(covariates); states * states],
        }
    }

    /// Build from a closure giving `B_kj` for `k != j`.
    pub fn from_fn(states: usize, covariates: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Self {
        let mut b = TransitionCoefs::zeros(states, covariates);
        for k in 0..states {
            for j in 0..states {
                if k != j {
                    let v = f(k, j);
                    assert_eq!(v.len(), covariates, "coefficient length");
                    b.blocks[k * states + j] = DVector::from_vec(v);
                }
            }
        }
        b
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    pub fn get(&self, k: usize, j: usize) -> &DVector<f64> {
        &self.blocks[k * self.states + j]
    }

    pub fn set(&mut self, k: usize, j: usize, v: DVector<f64>) {
        assert!(k != j, "diagonal transition block is fixed at zero");
        assert_eq!(v.len(), self.covariates);
        self.blocks[k * self.states + j] = v;
    }

    /// Number of free coefficients, `J (J-1) d`.
    pub fn n_free(&self) -> usize {
        self.states * self.states.saturating_sub(1) * self.covariates
    }

    /// Row `k` stacked as `(B_k1', .., B_kJ')'` skipping `j = k`.
    pub fn row_vector(&self, k: usize) -> DVector<f64> {
        let d = self.covariates;
        let mut out = DVector::zeros((self.states - 1) * d);
        for (slot, j) in (0..self.states).filter(|&j| j != k).enumerate() {
            out.rows_mut(slot * d, d).copy_from(self.get(k, j));
        }
        out
    }

    pub fn set_row_vector(&mut self, k: usize, v: &DVector<f64>) {
        let d = self.covariates;
        assert_eq!(v.len(), (self.states - 1) * d);
        for (slot, j) in (0..self.states).filter(|&j| j != k).enumerate() {
            self.blocks[k * self.states + j] = v.rows(slot * d, d).into_owned();
        }
    }

    /// `theta = vec({B_kj'}, k != j)` with `k` outermost, then `j`, then the
    /// covariate index.
    pub fn theta(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_free());
        for k in 0..self.states {
            for j in (0..self.states).filter(|&j| j != k) {
                out.extend(self.get(k, j).iter().copied());
            }
        }
        DVector::from_vec(out)
    }

    pub fn from_theta(states: usize, covariates: usize, theta: &DVector<f64>) -> Self {
        let mut b = TransitionCoefs::zeros(states, covariates);
        let mut it = theta.iter().copied();
        for k in 0..states {
            for j in (0..states).filter(|&j| j != k) {
                let v: Vec<f64> = it.by_ref().take(covariates).collect();
                b.blocks[k * states + j] = DVector::from_vec(v);
            }
        }
        b
    }

    /// Position of `(k, j, u)` in [`TransitionCoefs::theta`].
    pub fn theta_index(&self, k: usize, j: usize, u: usize) -> usize {
        let slot = if j < k { j } else { j - 1 };
        (k * (self.states - 1) + slot) * self.covariates + u
    }

    /// Relabel states: new state `s` takes old state `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut b = TransitionCoefs::zeros(self.states, self.covariates);
        for k in 0..self.states {
            for j in 0..self.states {
                b.blocks[k * self.states + j] = self.get(perm[k], perm[j]).clone();
            }
        }
        b
    }
}

/// Full parameter set for one `(J, K)` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub pi: DVector<f64>,
    pub mu: Vec<DVector<f64>>,
    pub lambda: Vec<DMatrix<f64>>,
    /// Diagonal of `Psi`.
    pub psi: DVector<f64>,
    pub b: TransitionCoefs,
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            states: self.pi.len(),
            factors: self.lambda.first().map_or(0, |l| l.ncols()),
            features: self.psi.len(),
            covariates: self.b.covariates(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.pi.len();
        let p = self.psi.len();
        let bad = |m: String| Err(Error::InvalidParams(m));
        if j == 0 {
            return bad("no states".into());
        }
        if self.mu.len() != j || self.lambda.len() != j || self.b.states() != j {
            return bad("state count differs between parameter blocks".into());
        }
        if self.pi.iter().any(|&v| !(v >= 0.0)) || (self.pi.sum() - 1.0).abs() > 1e-9 {
            return bad(format!("pi is not a probability vector: {:?}", self.pi.as_slice()));
        }
        let k = self.lambda[0].ncols();
        for s in 0..j {
            if self.mu[s].len() != p || self.lambda[s].nrows() != p || self.lambda[s].ncols() != k {
                return bad(format!("state {s} mean/loading shape mismatch"));
            }
            if self.mu[s].iter().chain(self.lambda[s].iter()).any(|v| !v.is_finite()) {
                return bad(format!("state {s} has non-finite mean or loading"));
            }
            if self.b.get(s, s).iter().any(|&v| v != 0.0) {
                return bad(format!("diagonal transition block B_{s}{s} must be zero"));
            }
        }
        if self.psi.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return bad("psi entries must be positive and finite".into());
        }
        Ok(())
    }

    /// Flatten every free parameter: `pi_1..pi_{J-1}`, means, loadings, `psi`
    /// and the off-diagonal transition coefficients.
    pub fn free_vector(&self) -> Vec<f64> {
        let j = self.pi.len();
        let mut out: Vec<f64> = self.pi.iter().take(j.saturating_sub(1)).copied().collect();
        for m in &self.mu {
            out.extend(m.iter().copied());
        }
        for l in &self.lambda {
            out.extend(l.iter().copied());
        }
        out.extend(self.psi.iter().copied());
        out.extend(self.b.theta().iter().copied());
        out
    }

    /// Relabel states: new state `s` takes old state `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        ModelParams {
            pi: DVector::from_iterator(perm.len(), perm.iter().map(|&s| self.pi[s])),
            mu: perm.iter().map(|&s| self.mu[s].clone()).collect(),
            lambda: perm.iter().map(|&s| self.lambda[s].clone()).collect(),
            psi: self.psi.clone(),
            b: self.b.permuted(perm),
        }
    }
}

#[derive(Debug, Clone)]
struct StateCache {
    /// `(I + Lambda' Psi^-1 Lambda)^-1`
    m: DMatrix<f64>,
    /// `Lambda' Psi^-1`, `K x p`.
    lt_psi_inv: DMatrix<f64>,
    /// `log |Lambda Lambda' + Psi|`
    log_det_cov: f64,
}

/// Per-iterate cache of the Woodbury quantities for every state.
#[derive(Debug, Clone)]
pub struct EmissionWorkspace {
    states: Vec<StateCache>,
    psi_inv: DVector<f64>,
}

/// Log-density and posterior factor mean of one observation under one state.
#[derive(Debug, Clone)]
pub struct EmissionEval {
    pub log_density: f64,
    /// `E[z | y, w = j]`
    pub factor_mean: DVector<f64>,
}

impl EmissionWorkspace {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let p = params.psi.len();
        if let Some((l, &v)) = params.psi.iter().enumerate().find(|(_, &v)| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateEmission {
                state: 0,
                detail: format!("psi[{l}] = {v}"),
            });
        }
        let psi_inv = params.psi.map(|v| 1.0 / v);
        let log_det_psi: f64 = params.psi.iter().map(|v| v.ln()).sum();
        let mut states = Vec::with_capacity(params.lambda.len());
        for (j, lambda) in params.lambda.iter().enumerate() {
            let k = lambda.ncols();
            let mut lt_psi_inv = lambda.transpose();
            for (c, mut col) in lt_psi_inv.column_iter_mut().enumerate() {
                col *= psi_inv[c];
            }
            let inner = DMatrix::identity(k, k) + &lt_psi_inv * lambda;
            let chol = inner.clone().cholesky().ok_or_else(|| Error::DegenerateEmission {
                state: j,
                detail: "I + Lambda' Psi^-1 Lambda not positive definite".into(),
            })?;
            let log_det_inner: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let m = chol.inverse();
            let m = (&m + m.transpose()) * 0.5;
            states.push(StateCache {
                m,
                lt_psi_inv,
                log_det_cov: log_det_psi + log_det_inner,
            });
            debug_assert_eq!(states[j].lt_psi_inv.ncols(), p);
        }
        Ok(EmissionWorkspace { states, psi_inv })
    }

    /// `M_j = (I + Lambda_j' Psi^-1 Lambda_j)^-1`.
    pub fn m(&self, j: usize) -> &DMatrix<f64> {
        &self.states[j].m
    }

    pub fn log_det_cov(&self, j: usize) -> f64 {
        self.states[j].log_det_cov
    }

    /// Log-density and factor posterior mean in one pass.
    pub fn evaluate(&self, y: &DVector<f64>, j: usize, params: &ModelParams) -> EmissionEval {
        let cache = &self.states[j];
        let r = y - &params.mu[j];
        let u = &cache.lt_psi_inv * &r;
        let m = &cache.m * &u;
        let mahal_diag: f64 = r.iter().zip(self.psi_inv.iter()).map(|(a, w)| a * a * w).sum();
        let qf = mahal_diag - u.dot(&m);
        let p = r.len() as f64;
        EmissionEval {
            log_density: -0.5 * (p * LN_2PI + cache.log_det_cov + qf),
            factor_mean: m,
        }
    }
}

/// `log N(y; mu_j, Lambda_j Lambda_j' + Psi)` via the Woodbury identities.
pub fn emission_log_density(y: &DVector<f64>, j: usize, params: &ModelParams, ws: &EmissionWorkspace) -> Result<f64> {
    let v = ws.evaluate(y, j, params).log_density;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DegenerateEmission {
            state: j,
            detail: format!("log-density evaluated to {v}"),
        })
    }
}

/// `(E[z | y, w=j], E[z z' | y, w=j])`.
pub fn factor_posterior_moments(
    y: &DVector<f64>,
    j: usize,
    params: &ModelParams,
    ws: &EmissionWorkspace,
) -> (DVector<f64>, DMatrix<f64>) {
    let m = ws.evaluate(y, j, params).factor_mean;
    let v = ws.m(j) + &m * m.transpose();
    (m, v)
}

fn check_covariates(x: &DVector<f64>, b: &TransitionCoefs) -> Result<()> {
    if x.len() != b.covariates() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vector has length {}, coefficients expect {}",
            x.len(),
            b.covariates()
        )));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidData("NaN in covariate vector".into()));
    }
    Ok(())
}

/// Row-stochastic multinomial-logit transition matrix, `B_kk = 0` reference.
pub fn dt_transition_matrix(x: &DVector<f64>, b: &TransitionCoefs) -> Result<DMatrix<f64>> {
    check_covariates(x, b)?;
    let n = b.states();
    let mut p = DMatrix::zeros(n, n);
    let mut logits = vec![0.0; n];
    for k in 0..n {
        if b.get(k, k).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidParams(format!("B_{k}{k} must be zero")));
        }
        for (j, l) in logits.iter_mut().enumerate() {
            *l = x.dot(b.get(k, j));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, &l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            p[(k, j)] = e;
            total += e;
        }
        for j in 0..n {
            p[(k, j)] /= total;
        }
    }
    Ok(p)
}

/// Generator matrix with `q_kj = exp(x' B_kj)` off the diagonal.
pub fn ct_intensity_matrix(x: &DVector<f64>, b: &TransitionCoefs) -> Result<DMatrix<f64>> {
    check_covariates(x, b)?;
    let n = b.states();
    let mut q = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut row = 0.0;
        for j in (0..n).filter(|&j| j != k) {
            let logit = x.dot(b.get(k, j));
            let rate = logit.exp();
            if !rate.is_finite() {
                return Err(Error::IntensityOverflow { from: k, to: j, logit });
            }
            q[(k, j)] = rate;
            row += rate;
        }
        q[(k, k)] = -row;
    }
    Ok(q)
}
