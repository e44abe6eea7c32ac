//! Parameter and ground-truth JSON. States and transition indices are
//! 1-based in files.

use crate::CliError;
use ehmfm::{FitResult, Mode, ModelDims, ModelParams, TransitionCoefs};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub states: usize,
    pub factors: usize,
    pub features: usize,
    pub covariates: usize,
}

impl From<ModelDims> for Dims {
    fn from(d: ModelDims) -> Self {
        Dims {
            states: d.states,
            factors: d.factors,
            features: d.features,
            covariates: d.covariates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBlock {
    pub from: usize,
    pub to: usize,
    pub coefs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub delta_loglik: Vec<f64>,
    pub delta_params: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop: String,
    pub n_params: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
    pub rejected_steps: usize,
}

/// Model parameters plus optional fit record and state paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mode: String,
    pub dims: Dims,
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    /// Per state, row-major `p x K`.
    pub lambda: Vec<Vec<Vec<f64>>>,
    pub psi: Vec<f64>,
    pub transitions: Vec<TransitionBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjects: Option<Vec<String>>,
    /// Decoded (fits) or true (simulations) states per subject, 1-based.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<usize>>>,
}

impl ParamsFile {
    pub fn from_params(params: &ModelParams, mode: Mode) -> Self {
        let dims = params.dims();
        let b = &params.b;
        let mut transitions = Vec::new();
        for k in 0..dims.states {
            for j in (0..dims.states).filter(|&j| j != k) {
                transitions.push(TransitionBlock {
                    from: k + 1,
                    to: j + 1,
                    coefs: b.get(k, j).iter().copied().collect(),
                });
            }
        }
        ParamsFile {
            schema_version: SCHEMA_VERSION,
            scenario: None,
            seed: None,
            mode: mode.as_str().to_string(),
            dims: dims.into(),
            pi: params.pi.iter().copied().collect(),
            mu: params.mu.iter().map(|m| m.iter().copied().collect()).collect(),
            lambda: params
                .lambda
                .iter()
                .map(|l| l.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            psi: params.psi.iter().copied().collect(),
            transitions,
            fit: None,
            subjects: None,
            states: None,
        }
    }

    pub fn from_fit(fit: &FitResult, subjects: Vec<String>, n_obs: usize) -> Self {
        let mut out = ParamsFile::from_params(&fit.params, fit.mode);
        out.fit = Some(FitRecord {
            loglik: fit.loglik,
            loglik_trace: fit.loglik_trace.clone(),
            delta_loglik: fit.delta_loglik.clone(),
            delta_params: fit.delta_params.clone(),
            iterations: fit.iterations,
            converged: fit.stop.converged(),
            stop: fit.stop.as_str().to_string(),
            n_params: fit.n_params,
            n_obs,
            aic: fit.aic,
            bic: fit.bic,
            rejected_steps: fit.rejected_steps,
        });
        out.subjects = Some(subjects);
        out.states = Some(one_based(&fit.states));
        out
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        self.mode.parse().map_err(CliError::from)
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Validation(format!("unsupported schema_version {}", self.schema_version)));
        }
        let Dims {
            states,
            factors,
            features,
            covariates,
        } = self.dims;
        let bad = |what: &str| CliError::Validation(format!("parameter file: {what} does not match dims"));
        if self.pi.len() != states || self.mu.len() != states || self.lambda.len() != states || self.psi.len() != features {
            return Err(bad("state or feature count"));
        }
        if self.mu.iter().any(|m| m.len() != features) {
            return Err(bad("mu"));
        }
        let mut lambda = Vec::with_capacity(states);
        for l in &self.lambda {
            if l.len() != features || l.iter().any(|r| r.len() != factors) {
                return Err(bad("lambda"));
            }
            lambda.push(DMatrix::from_fn(features, factors, |r, c| l[r][c]));
        }
        let mut b = TransitionCoefs::zeros(states, covariates);
        let mut seen = vec![vec![false; states]; states];
        for t in &self.transitions {
            let ok = (1..=states).contains(&t.from) && (1..=states).contains(&t.to) && t.from != t.to && t.coefs.len() == covariates;
            if !ok {
                return Err(bad(&format!("transition {}->{}", t.from, t.to)));
            }
            seen[t.from - 1][t.to - 1] = true;
            b.set(t.from - 1, t.to - 1, DVector::from_column_slice(&t.coefs));
        }
        let missing = (0..states).any(|k| (0..states).any(|j| j != k && !seen[k][j]));
        if missing {
            return Err(bad("transition list"));
        }
        let params = ModelParams {
            pi: DVector::from_column_slice(&self.pi),
            mu: self.mu.iter().map(|m| DVector::from_column_slice(m)).collect(),
            lambda,
            psi: DVector::from_column_slice(&self.psi),
            b,
        };
        params.validate().map_err(CliError::from)?;
        Ok(params)
    }

    /// States as 0-based paths.
    pub fn zero_based_states(&self) -> Result<Vec<Vec<usize>>, CliError> {
        let states = self.states.as_ref().ok_or_else(|| CliError::Validation("file has no state paths".into()))?;
        states
            .iter()
            .map(|p| {
                p.iter()
                    .map(|&s| {
                        if (1..=self.dims.states).contains(&s) {
                            Ok(s - 1)
                        } else {
                            Err(CliError::Validation(format!("state {s} outside 1..{}", self.dims.states)))
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn one_based(states: &[Vec<usize>]) -> Vec<Vec<usize>> {
    states.iter().map(|p| p.iter().map(|s| s + 1).collect()).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(format!("encoding JSON: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehmfm::simgen::{true_params, ScenarioVariant};

    #[test]
    fn params_round_trip() {
        for mode in [Mode::Discrete, Mode::Continuous] {
            let p = true_params(ScenarioVariant::Baseline, mode).unwrap();
            let file = ParamsFile::from_params(&p, mode);
            let text = serde_json::to_string(&file).unwrap();
            let back: ParamsFile = serde_json::from_str(&text).unwrap();
            assert_eq!(back.params().unwrap(), p);
            assert_eq!(back.mode().unwrap(), mode);
            assert!(text.contains("\"schema_version\":1"));
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let p = true_params(ScenarioVariant::Baseline, Mode::Discrete).unwrap();
        let mut file = ParamsFile::from_params(&p, Mode::Discrete);
        file.psi.pop();
        assert!(file.params().is_err());
        let mut file = ParamsFile::from_params(&p, Mode::Discrete);
        file.transitions.pop();
        assert!(file.params().is_err());
    }
}
