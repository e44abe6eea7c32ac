//! The fitting loop: initialize, alternate E- and M-steps, stop on the
//! log-likelihood and parameter-change criteria, decode.

use log::{debug, info};

use crate::error::{Error, Result};
use crate::inference::{estep, EStep};
use crate::init::{initialize_params, InitConfig};
use crate::matexp::{ExpmCache, ExpmMethod};
use crate::model::{Mode, ModelDims, ModelParams, PanelDataset};
use crate::mstep::mstep;

/// Log-likelihood drop that aborts a fit.
pub const INSTABILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub mode: Mode,
    pub states: usize,
    pub factors: usize,
    pub tol_loglik: f64,
    pub tol_params: f64,
    pub max_iters: usize,
    pub stabilize: bool,
    /// Stop as soon as either criterion is met instead of requiring both.
    pub stop_on_either: bool,
    pub expm: ExpmMethod,
    pub init: InitConfig,
}

impl FitConfig {
    pub fn new(mode: Mode, states: usize, factors: usize) -> Self {
        FitConfig {
            mode,
            states,
            factors,
            tol_loglik: 1e-4,
            tol_params: 1e-4,
            max_iters: 100,
            stabilize: true,
            stop_on_either: false,
            expm: ExpmMethod::default(),
            init: InitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_loglik > 0.0) || !(self.tol_params > 0.0) {
            return Err(Error::InvalidConfig("convergence tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.states == 0 {
            return Err(Error::InvalidConfig("at least one hidden state is required".into()));
        }
        self.init.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Both criteria met.
    Converged,
    LoglikOnly,
    ParamsOnly,
    MaxIters,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Converged => "both",
            StopReason::LoglikOnly => "loglik",
            StopReason::ParamsOnly => "params",
            StopReason::MaxIters => "max-iters",
        }
    }

    pub fn converged(self) -> bool {
        self != StopReason::MaxIters
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub mode: Mode,
    pub loglik: f64,
    /// Observed log-likelihood at the start and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub delta_loglik: Vec<f64>,
    pub delta_params: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    /// Posterior-mode state per subject and occasion.
    pub states: Vec<Vec<usize>>,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    /// Transition steps abandoned after repeated halving.
    pub rejected_steps: usize,
}

/// `(J-1) + Jp + J(pK - K(K-1)/2) + p + J(J-1)d`.
pub fn free_parameter_count(dims: &ModelDims) -> usize {
    let (j, k, p, d) = (dims.states, dims.factors, dims.features, dims.covariates);
    (j - 1) + j * p + j * (p * k - k * (k - 1) / 2) + p + j * (j - 1) * d
}

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

pub fn bic(loglik: f64, n_params: usize, n_obs: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (n_obs as f64).ln()
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

fn check_mode(dataset: &PanelDataset, mode: Mode) -> Result<()> {
    if mode == Mode::Discrete && dataset.has_irregular_times() {
        debug!("discrete-time fit on irregular grid; gaps are ignored");
    }
    Ok(())
}

/// Initializes from the data and runs the loop.
pub fn fit(dataset: &PanelDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let dims = ModelDims {
        states: config.states,
        factors: config.factors,
        features: dataset.p,
        covariates: dataset.d,
    };
    dims.validate()?;
    let start = initialize_params(dataset, config.states, config.factors, config.mode, &config.init)?;
    fit_from(dataset, start, config)
}

/// Runs the loop from given starting parameters.
pub fn fit_from(dataset: &PanelDataset, start: ModelParams, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    check_mode(dataset, config.mode)?;
    start.validate()?;
    let dims = start.dims();
    if dims.features != dataset.p || dims.covariates != dataset.d {
        return Err(Error::DimensionMismatch(format!(
            "parameters are for p={}, d={} but data has p={}, d={}",
            dims.features, dims.covariates, dataset.p, dataset.d
        )));
    }
    let mode = config.mode;
    let cache = ExpmCache::new(config.expm);
    let mut params = start;
    let mut current: EStep = estep(dataset, &params, mode, Some(&cache)).map_err(|e| e.at_iteration(0))?;
    let mut trace = vec![current.loglik];
    let mut d1s = Vec::new();
    let mut d2s = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut rejected = 0;
    let mut iterations = 0;
    for it in 1..=config.max_iters {
        iterations = it;
        let out = mstep(dataset, &current, &params, mode, config.stabilize, &cache).map_err(|e| e.at_iteration(it))?;
        rejected += out.transition.rejected;
        cache.clear();
        let next = estep(dataset, &out.params, mode, Some(&cache)).map_err(|e| e.at_iteration(it))?;
        let change = next.loglik - current.loglik;
        if change < -INSTABILITY_TOL {
            return Err(Error::Instability {
                iteration: it,
                drop: -change,
            });
        }
        let d1 = change.abs();
        let d2 = mean_abs_diff(&out.params.free_vector(), &params.free_vector());
        debug!("iteration {it}: loglik {:.6} d1 {d1:.3e} d2 {d2:.3e}", next.loglik);
        trace.push(next.loglik);
        d1s.push(d1);
        d2s.push(d2);
        params = out.params;
        current = next;
        let (ok1, ok2) = (d1 <= config.tol_loglik, d2 <= config.tol_params);
        let reason = match (ok1, ok2) {
            (true, true) => Some(StopReason::Converged),
            (true, false) if config.stop_on_either => Some(StopReason::LoglikOnly),
            (false, true) if config.stop_on_either => Some(StopReason::ParamsOnly),
            _ => None,
        };
        if let Some(r) = reason {
            stop = r;
            break;
        }
    }
    let states = current.posterior.subjects.iter().map(|s| s.decode()).collect();
    let n_params = free_parameter_count(&dims);
    let loglik = current.loglik;
    info!(
        "fit J={} K={} {}: loglik {loglik:.4} after {iterations} iterations ({})",
        dims.states,
        dims.factors,
        mode.as_str(),
        stop.as_str()
    );
    Ok(FitResult {
        params,
        mode,
        loglik,
        loglik_trace: trace,
        delta_loglik: d1s,
        delta_params: d2s,
        iterations,
        stop,
        states,
        n_params,
        aic: aic(loglik, n_params),
        bic: bic(loglik, n_params, dataset.n_obs()),
        rejected_steps: rejected,
    })
}

/// Posterior-mode states under `params`, lowest index on ties.
pub fn decode(dataset: &PanelDataset, params: &ModelParams, mode: Mode, method: ExpmMethod) -> Result<Vec<Vec<usize>>> {
    let cache = ExpmCache::new(method);
    let e = estep(dataset, params, mode, Some(&cache))?;
    Ok(e.posterior.subjects.iter().map(|s| s.decode()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(states: usize, factors: usize, features: usize, covariates: usize) -> ModelDims {
        ModelDims {
            states,
            factors,
            features,
            covariates,
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(free_parameter_count(&dims(1, 1, 1, 5)), 3);
        assert_eq!(free_parameter_count(&dims(3, 3, 23, 3)), 310);
    }

    #[test]
    fn count_grows_with_states_and_factors() {
        for j in 1..6 {
            for k in 1..5 {
                let q = free_parameter_count(&dims(j, k, 12, 3));
                assert!(free_parameter_count(&dims(j + 1, k, 12, 3)) > q);
                assert!(free_parameter_count(&dims(j, k + 1, 12, 3)) > q);
            }
        }
    }

    #[test]
    fn criteria() {
        assert_eq!(aic(-10.0, 3), 26.0);
        assert!((bic(-10.0, 3, 100) - (20.0 + 3.0 * 100f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn invalid_config() {
        let mut c = FitConfig::new(Mode::Discrete, 2, 1);
        c.tol_loglik = 0.0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = FitConfig::new(Mode::Discrete, 2, 1);
        c.max_iters = 0;
        assert!(c.validate().is_err());
    }
}
