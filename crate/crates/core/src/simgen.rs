//! Synthetic panels with known truth: the baseline three-state, three-factor
//! design and its sensitivity variants.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matexp::{expm, ExpmMethod};
use crate::model::{ct_intensity_matrix, dt_transition_matrix, Mode, ModelParams, PanelDataset, SubjectRecord, TransitionCoefs};

pub const FEATURES: usize = 23;
pub const COVARIATES: usize = 3;
pub const BASELINE_SUBJECTS: usize = 200;
pub const BASELINE_DT_LENGTH: usize = 10;
/// Continuous-time occasions are drawn from days `1..=horizon`.
pub const CT_HORIZON: i64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difference {
    Medium,
    Minor,
}

impl Difference {
    fn as_str(self) -> &'static str {
        match self {
            Difference::Medium => "medium",
            Difference::Minor => "minor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScenarioVariant {
    Baseline,
    /// `Psi = level * I`.
    Psi(f64),
    MeanDifference(Difference),
    LoadingDifference(Difference),
    FrequentTransitions,
    States(usize),
    Factors(usize),
}

impl ScenarioVariant {
    pub fn states(self) -> usize {
        match self {
            ScenarioVariant::States(j) => j,
            _ => 3,
        }
    }

    pub fn factors(self) -> usize {
        match self {
            ScenarioVariant::Factors(k) => k,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelRule {
    /// Every subject observed at times `1..=len`.
    Fixed(usize),
    /// `T_i` uniform on `min..=max`, times drawn without replacement from `1..=horizon`.
    Irregular { min: usize, max: usize, horizon: i64 },
}

impl fmt::Display for PanelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PanelRule::Fixed(t) => write!(f, "T={t}"),
            PanelRule::Irregular { min, max, horizon } => write!(f, "T~U[{min},{max}] on 1..{horizon}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub name: String,
    pub mode: Mode,
    pub subjects: usize,
    pub panel: PanelRule,
    pub variant: ScenarioVariant,
}

impl SimScenario {
    pub fn baseline(mode: Mode) -> Self {
        SimScenario {
            name: format!("{}-baseline", mode.as_str()),
            mode,
            subjects: BASELINE_SUBJECTS,
            panel: baseline_panel(mode),
            variant: ScenarioVariant::Baseline,
        }
    }

    pub fn with_subjects(mut self, n: usize) -> Self {
        self.subjects = n;
        self
    }

    pub fn describe(&self) -> String {
        format!(
            "{}: mode={} N={} {} J={} K={} p={FEATURES} d={COVARIATES}",
            self.name,
            self.mode.as_str(),
            self.subjects,
            self.panel,
            self.variant.states(),
            self.variant.factors()
        )
    }
}

fn baseline_panel(mode: Mode) -> PanelRule {
    match mode {
        Mode::Discrete => PanelRule::Fixed(BASELINE_DT_LENGTH),
        Mode::Continuous => PanelRule::Irregular {
            min: 50,
            max: 100,
            horizon: CT_HORIZON,
        },
    }
}

/// The baseline of each mode plus, when `sensitivity` is set, every variant and
/// the sample-size and panel-length ladders.
pub fn scenario_grid(sensitivity: bool) -> Vec<SimScenario> {
    let mut out = Vec::new();
    for mode in [Mode::Discrete, Mode::Continuous] {
        let base = SimScenario::baseline(mode);
        out.push(base.clone());
        if !sensitivity {
            continue;
        }
        let m = mode.as_str();
        let variant = |name: String, v: ScenarioVariant| SimScenario {
            name,
            variant: v,
            ..base.clone()
        };
        for level in [0.5, 0.1] {
            out.push(variant(format!("{m}-psi-{level}"), ScenarioVariant::Psi(level)));
        }
        for d in [Difference::Medium, Difference::Minor] {
            out.push(variant(format!("{m}-mu-{}", d.as_str()), ScenarioVariant::MeanDifference(d)));
        }
        for d in [Difference::Medium, Difference::Minor] {
            out.push(variant(format!("{m}-lambda-{}", d.as_str()), ScenarioVariant::LoadingDifference(d)));
        }
        out.push(variant(format!("{m}-freq-transit"), ScenarioVariant::FrequentTransitions));
        for j in [2, 4] {
            out.push(variant(format!("{m}-J{j}"), ScenarioVariant::States(j)));
        }
        for k in [2, 5] {
            out.push(variant(format!("{m}-K{k}"), ScenarioVariant::Factors(k)));
        }
        let ladder_n: &[usize] = match mode {
            Mode::Discrete => &[50, 100, 300, 700],
            Mode::Continuous => &[50, 100, 500],
        };
        for &n in ladder_n {
            out.push(SimScenario {
                name: format!("{m}-N{n}"),
                subjects: n,
                ..base.clone()
            });
        }
        match mode {
            Mode::Discrete => {
                for t in [3, 5, 20, 200] {
                    out.push(SimScenario {
                        name: format!("{m}-T{t}"),
                        panel: PanelRule::Fixed(t),
                        ..base.clone()
                    });
                }
            }
            Mode::Continuous => {
                for (lo, hi) in [(10, 30), (30, 50), (100, 150)] {
                    out.push(SimScenario {
                        name: format!("{m}-T{lo}-{hi}"),
                        panel: PanelRule::Irregular {
                            min: lo,
                            max: hi,
                            horizon: CT_HORIZON.max(hi as i64),
                        },
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

pub fn find_scenario(name: &str) -> Result<SimScenario> {
    scenario_grid(true)
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownVariant(name.to_string()))
}

// ---------------------------------------------------------------------------
// true parameters

fn blocks(parts: &[(usize, f64)]) -> DVector<f64> {
    DVector::from_iterator(FEATURES, parts.iter().flat_map(|&(n, v)| std::iter::repeat_n(v, n)))
}

fn rows(parts: &[(usize, [f64; 3])]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(FEATURES, 3);
    let mut r = 0;
    for &(n, row) in parts {
        for _ in 0..n {
            for c in 0..3 {
                m[(r, c)] = row[c];
            }
            r += 1;
        }
    }
    assert_eq!(r, FEATURES);
    m
}

const ONES: [f64; 3] = [1.0, 1.0, 1.0];
const F1: [f64; 3] = [0.7, 0.0, 0.0];
const F2: [f64; 3] = [0.0, 0.7, 0.0];
const F3: [f64; 3] = [0.0, 0.0, 0.7];

fn baseline_means() -> Vec<DVector<f64>> {
    [0.0, 2.0, 4.0, 6.0]
        .iter()
        .map(|s| blocks(&[(2, 15.0 + s), (3, 10.0 + s), (6, 5.0 + s), (12, s + 0.0)]))
        .collect()
}

fn baseline_loadings() -> Vec<DMatrix<f64>> {
    vec![
        rows(&[(2, ONES), (5, F1), (8, F2), (8, F3)]),
        rows(&[(2, F2), (2, ONES), (3, F2), (8, F1), (8, F3)]),
        rows(&[(4, F3), (2, ONES), (1, F3), (8, F2), (8, F1)]),
        rows(&[(2, ONES), (7, F3), (7, F1), (7, F2)]),
    ]
}

/// Loadings for a non-default factor count: state `j` has unit rows at
/// `2j, 2j+1`, the other rows split into contiguous groups loading `.7` on a
/// state-shifted factor.
fn generic_loadings(states: usize, factors: usize) -> Vec<DMatrix<f64>> {
    (0..states)
        .map(|j| {
            let mut m = DMatrix::zeros(FEATURES, factors);
            let ones = [2 * j, 2 * j + 1];
            for &r in &ones {
                m.row_mut(r).fill(1.0);
            }
            let rest: Vec<usize> = (0..FEATURES).filter(|r| !ones.contains(r)).collect();
            let base = rest.len() / factors;
            let extra = rest.len() % factors;
            let mut at = 0;
            for g in 0..factors {
                let size = base + usize::from(g < extra);
                for &r in &rest[at..at + size] {
                    m[(r, (g + j) % factors)] = 0.7;
                }
                at += size;
            }
            m
        })
        .collect()
}

fn difference_loadings(v: f64) -> Vec<DMatrix<f64>> {
    let w = [v, v, v];
    vec![
        rows(&[(1, w), (6, F1), (8, F2), (8, F3)]),
        rows(&[(3, F1), (1, w), (3, F1), (8, F2), (8, F3)]),
        rows(&[(5, F1), (1, w), (1, F1), (8, F2), (8, F3)]),
    ]
}

fn coefs(table: &[[[f64; 3]; 4]; 4], states: usize) -> TransitionCoefs {
    TransitionCoefs::from_fn(states, COVARIATES, |k, j| table[k][j].to_vec())
}

const Z: [f64; 3] = [0.0; 3];

fn dt_baseline_table() -> [[[f64; 3]; 4]; 4] {
    let d4 = [-2.95, -0.5, 0.5];
    [
        [Z, [-2.95, -1.0, 0.5], [-2.95, -0.5, 0.5], d4],
        [[-2.95, -0.5, 0.5], Z, [-2.95, -0.5, 0.5], d4],
        [[-2.95, -0.5, 0.5], [-2.95, 1.0, 0.5], Z, d4],
        [d4, d4, d4, Z],
    ]
}

fn ct_baseline_table() -> [[[f64; 3]; 4]; 4] {
    let c4 = [-3.0, 1.0, -1.0];
    [
        [Z, [-2.5, 1.0, -1.0], [-2.5, 1.0, -1.0], c4],
        [[-3.0, 1.0, -1.0], Z, [-2.5, 1.0, -1.0], c4],
        [[-3.0, 1.0, -1.0], [-3.0, 1.0, -1.0], Z, c4],
        [c4, c4, c4, Z],
    ]
}

fn dt_frequent_table() -> [[[f64; 3]; 4]; 4] {
    [
        [Z, [-1.5, -2.0, 0.75], [-1.5, 0.75, 0.5], Z],
        [[-1.5, 0.75, 1.25], Z, [-1.5, -1.5, 0.75], Z],
        [[-1.5, 0.75, 0.75], [-1.5, -2.0, 0.75], Z, Z],
        [Z; 4],
    ]
}

fn ct_frequent_table() -> [[[f64; 3]; 4]; 4] {
    [
        [Z, [0.5, 1.0, -0.5], [0.5, 1.0, -0.5], Z],
        [[-1.0, 0.5, 1.0], Z, [-0.25, 1.0, -0.5], Z],
        [[0.5, 0.5, 1.0], [-0.5, 0.5, 1.0], Z, Z],
        [Z; 4],
    ]
}

/// True parameters of a scenario variant in the given mode.
pub fn true_params(variant: ScenarioVariant, mode: Mode) -> Result<ModelParams> {
    let states = variant.states();
    let factors = variant.factors();
    if !(2..=4).contains(&states) {
        return Err(Error::UnknownVariant(format!("J={states}")));
    }
    if ![2, 3, 5].contains(&factors) {
        return Err(Error::UnknownVariant(format!("K={factors}")));
    }
    let mut mu: Vec<DVector<f64>> = baseline_means().into_iter().take(states).collect();
    let mut lambda: Vec<DMatrix<f64>> = if factors == 3 {
        baseline_loadings().into_iter().take(states).collect()
    } else {
        generic_loadings(states, factors)
    };
    let mut psi = DVector::from_element(FEATURES, 1.0);
    let mut table = match mode {
        Mode::Discrete => dt_baseline_table(),
        Mode::Continuous => ct_baseline_table(),
    };
    match variant {
        ScenarioVariant::Psi(level) => {
            if !(level > 0.0) {
                return Err(Error::UnknownVariant(format!("psi level {level}")));
            }
            psi.fill(level);
        }
        ScenarioVariant::MeanDifference(Difference::Medium) => {
            for m in mu.iter_mut() {
                m.rows_mut(11, 12).fill(0.0);
            }
        }
        ScenarioVariant::MeanDifference(Difference::Minor) => {
            mu = [0.0, 0.75, 1.5]
                .iter()
                .map(|s| blocks(&[(2, 15.0 + s), (3, 10.0 + s), (6, 5.0), (12, 0.0)]))
                .collect();
        }
        ScenarioVariant::LoadingDifference(d) => {
            lambda = difference_loadings(match d {
                Difference::Medium => 0.3,
                Difference::Minor => 0.05,
            });
        }
        ScenarioVariant::FrequentTransitions => {
            table = match mode {
                Mode::Discrete => dt_frequent_table(),
                Mode::Continuous => ct_frequent_table(),
            };
        }
        _ => {}
    }
    let params = ModelParams {
        pi: DVector::from_element(states, 1.0 / states as f64),
        mu,
        lambda,
        psi,
        b: coefs(&table, states),
    };
    params.validate()?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// sampling

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: ModelParams,
    /// Latent state path per subject.
    pub states: Vec<Vec<usize>>,
    /// Latent factor scores per subject, `K × T_i`.
    pub factors: Vec<DMatrix<f64>>,
}

/// Draws an index from a probability vector.
pub fn sample_categorical<R: Rng>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64);
    rng
}

struct Draw {
    record: SubjectRecord,
    states: Vec<usize>,
    factors: DMatrix<f64>,
}

fn draw_subject(scenario: &SimScenario, params: &ModelParams, sd: &DVector<f64>, seed: u64, i: usize) -> Result<Draw> {
    let mut rng = subject_rng(seed, i);
    let x = DVector::from_vec(vec![1.0, if rng.random::<bool>() { 1.0 } else { 0.0 }, rng.random::<f64>()]);
    let times: Vec<i64> = match scenario.panel {
        PanelRule::Fixed(t) => (1..=t as i64).collect(),
        PanelRule::Irregular { min, max, horizon } => {
            let t = rng.random_range(min..=max);
            let mut v: Vec<i64> = sample(&mut rng, horizon as usize, t).into_iter().map(|v| v as i64 + 1).collect();
            v.sort_unstable();
            v
        }
    };
    let len = times.len();
    let mut path = Vec::with_capacity(len);
    path.push(sample_categorical(params.pi.iter().copied(), &mut rng));
    let mut by_delta: HashMap<i64, DMatrix<f64>> = HashMap::new();
    let dt = match scenario.mode {
        Mode::Discrete => Some(dt_transition_matrix(&x, &params.b)?),
        Mode::Continuous => None,
    };
    let q = match scenario.mode {
        Mode::Continuous => Some(ct_intensity_matrix(&x, &params.b)?),
        Mode::Discrete => None,
    };
    for t in 1..len {
        let prev = path[t - 1];
        let p = match (&dt, &q) {
            (Some(p), _) => p,
            (None, Some(q)) => {
                let delta = times[t] - times[t - 1];
                if !by_delta.contains_key(&delta) {
                    by_delta.insert(delta, expm(&(q * delta as f64), ExpmMethod::default())?);
                }
                &by_delta[&delta]
            }
            _ => unreachable!(),
        };
        path.push(sample_categorical(p.row(prev).iter().copied(), &mut rng));
    }
    let p = params.psi.len();
    let k = params.lambda[0].ncols();
    let mut factors = DMatrix::zeros(k, len);
    let mut y = DMatrix::zeros(p, len);
    for t in 0..len {
        let j = path[t];
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let col = &params.mu[j] + &params.lambda[j] * &z + sd.component_mul(&e);
        y.set_column(t, &col);
        factors.set_column(t, &z);
    }
    let xs = DMatrix::from_fn(COVARIATES, len, |r, _| x[r]);
    Ok(Draw {
        record: SubjectRecord::new(format!("s{:04}", i + 1), times, y, xs)?,
        states: path,
        factors,
    })
}

/// Simulates a panel from the scenario's true parameters. Subject `i` uses
/// its own ChaCha20 stream, so the output does not depend on thread count.
pub fn generate(scenario: &SimScenario, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
    let params = true_params(scenario.variant, scenario.mode)?;
    generate_from(scenario, params, seed)
}

/// Simulates a panel from explicit parameters using the scenario's design.
pub fn generate_from(scenario: &SimScenario, params: ModelParams, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
    params.validate()?;
    if scenario.subjects == 0 {
        return Err(Error::InvalidConfig("scenario needs at least one subject".into()));
    }
    if let PanelRule::Irregular { min, max, horizon } = scenario.panel {
        if min < 2 || min > max || max as i64 > horizon {
            return Err(Error::InvalidConfig(format!("panel lengths [{min},{max}] do not fit horizon {horizon}")));
        }
    }
    let sd = params.psi.map(f64::sqrt);
    let draws = (0..scenario.subjects)
        .into_par_iter()
        .map(|i| draw_subject(scenario, &params, &sd, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut subjects = Vec::with_capacity(draws.len());
    let mut states = Vec::with_capacity(draws.len());
    let mut factors = Vec::with_capacity(draws.len());
    for d in draws {
        subjects.push(d.record);
        states.push(d.states);
        factors.push(d.factors);
    }
    Ok((PanelDataset::new(subjects)?, GroundTruth { params, states, factors }))
}
