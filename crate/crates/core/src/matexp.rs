//! Matrix exponential of (scaled) generator matrices and its directional
//! derivative through the Van Loan block construction.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default `a` for the uniform-power approximation `(I + A/a)^a`.
pub const DEFAULT_UNIFORM_POWER: u32 = 1 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpmMethod {
    /// Scaling and squaring with a degree 3..13 Pade approximant.
    PadeScalingSquaring,
    /// `(I + A/a)^a` by repeated squaring; `power` is `a` and a power of two.
    UniformPower { power: u32 },
}

impl Default for ExpmMethod {
    fn default() -> Self {
        ExpmMethod::PadeScalingSquaring
    }
}

impl ExpmMethod {
    pub fn uniform_power(power: u32) -> Result<Self> {
        if power == 0 || !power.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("uniform-power a must be a power of two >= 1, got {power}")));
        }
        Ok(ExpmMethod::UniformPower { power })
    }
}

const PADE_THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_230e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068e0),
];
const THETA_13: f64 = 5.371_920_351_148_152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn pade_solve(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::Expm("singular Pade denominator".into()))
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    // powers of A^2 up to the needed degree
    let mut even_pow = ident.clone();
    let mut u_inner = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for k in (0..b.len()).step_by(2) {
        v += &even_pow * b[k];
        if k + 1 < b.len() {
            u_inner += &even_pow * b[k + 1];
        }
        even_pow = &even_pow * &a2;
    }
    pade_solve(a * u_inner, v)
}

fn pade13(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let b = &B13;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_high = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (u_high + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let v_high = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_high + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    pade_solve(u, v)
}

fn expm_pade(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm = one_norm(a);
    if !norm.is_finite() {
        return Err(Error::Expm("non-finite input".into()));
    }
    for (m, theta) in PADE_THETA {
        if norm <= theta {
            return match m {
                3 => pade_low(a, &B3),
                5 => pade_low(a, &B5),
                7 => pade_low(a, &B7),
                _ => pade_low(a, &B9),
            };
        }
    }
    let s = ((norm / THETA_13).log2().ceil()).max(0.0) as i32;
    let scaled = a * 2f64.powi(-s);
    let mut r = pade13(&scaled)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn expm_uniform(a: &DMatrix<f64>, power: u32) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut r = DMatrix::<f64>::identity(n, n) + a / power as f64;
    if let Some(i) = (0..n).find(|&i| r[(i, i)] < 0.0) {
        return Err(Error::Expm(format!(
            "a = {power} too small: diagonal entry {i} of I + A/a is {}",
            r[(i, i)]
        )));
    }
    let mut a_left = power;
    while a_left > 1 {
        r = &r * &r;
        a_left >>= 1;
    }
    Ok(r)
}

/// `exp(A)` by the chosen method.
pub fn expm(a: &DMatrix<f64>, method: ExpmMethod) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!("expm of {}x{} matrix", a.nrows(), a.ncols())));
    }
    match method {
        ExpmMethod::PadeScalingSquaring => expm_pade(a),
        ExpmMethod::UniformPower { power } => expm_uniform(a, power),
    }
}

/// Directional derivative of `exp(A)` along `adot`: the top-right block of
/// `exp([[A, adot], [0, A]])`.
pub fn expm_frechet(a: &DMatrix<f64>, adot: &DMatrix<f64>, method: ExpmMethod) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || adot.shape() != a.shape() {
        return Err(Error::DimensionMismatch(format!(
            "frechet derivative needs equal square shapes, got {:?} and {:?}",
            a.shape(),
            adot.shape()
        )));
    }
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(adot);
    h.view_mut((n, n), (n, n)).copy_from(a);
    let e = expm(&h, method)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}

/// Off-diagonal `(k, j)` pairs in the same order as the transition parameter vector.
pub fn generator_directions(states: usize) -> Vec<(usize, usize)> {
    (0..states)
        .flat_map(|k| (0..states).filter(move |&j| j != k).map(move |j| (k, j)))
        .collect()
}

/// Cache key: exact bit patterns of the covariate vector and the interval.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExpmCacheKey {
    x_bits: Vec<u64>,
    delta: i64,
}

impl ExpmCacheKey {
    pub fn new(x: &DVector<f64>, delta: i64) -> Self {
        ExpmCacheKey {
            x_bits: x.iter().map(|v| v.to_bits()).collect(),
            delta,
        }
    }

    pub fn delta(&self) -> i64 {
        self.delta
    }
}

/// `P(delta) = exp(delta Q)` and, when requested, the derivatives of `P` along
/// each unit generator direction `delta (E_kj - E_kk)`.
///
/// `dP/dtheta` for coefficient `u` of `B_kj` is `x_u q_kj * directional[d]`
/// where `d` indexes `(k, j)` in [`generator_directions`] order.
#[derive(Debug, Clone)]
pub struct CachedTransition {
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub directional: Option<Vec<DMatrix<f64>>>,
}

impl CachedTransition {
    pub fn compute(q: &DMatrix<f64>, delta: i64, with_derivatives: bool, method: ExpmMethod) -> Result<Self> {
        let a = q * delta as f64;
        let p = expm(&a, method)?;
        let directional = if with_derivatives {
            let n = q.nrows();
            let mut out = Vec::with_capacity(n * n.saturating_sub(1));
            for (k, j) in generator_directions(n) {
                let mut adot = DMatrix::zeros(n, n);
                adot[(k, j)] = delta as f64;
                adot[(k, k)] = -(delta as f64);
                out.push(expm_frechet(&a, &adot, method)?);
            }
            Some(out)
        } else {
            None
        };
        Ok(CachedTransition {
            q: q.clone(),
            p,
            directional,
        })
    }

    /// `dP/dB_kj,u` at covariate vector `x`.
    pub fn dp_dtheta(&self, x: &DVector<f64>, k: usize, j: usize, u: usize) -> Option<DMatrix<f64>> {
        let n = self.q.nrows();
        let d = generator_directions(n).iter().position(|&pair| pair == (k, j))?;
        let g = &self.directional.as_ref()?[d];
        Some(g * (x[u] * self.q[(k, j)]))
    }
}

/// Read-mostly map from `(x, delta)` to transition matrices for one value of
/// the transition parameters. Call [`ExpmCache::clear`] whenever they change.
#[derive(Debug)]
pub struct ExpmCache {
    method: ExpmMethod,
    map: RwLock<HashMap<ExpmCacheKey, Arc<CachedTransition>>>,
    evaluations: AtomicUsize,
}

impl ExpmCache {
    pub fn new(method: ExpmMethod) -> Self {
        ExpmCache {
            method,
            map: RwLock::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn method(&self) -> ExpmMethod {
        self.method
    }

    /// Number of fresh evaluations performed since construction.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("expm cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.map.write().expect("expm cache poisoned").clear();
    }

    pub fn get_or_compute(&self, key: &ExpmCacheKey, q: &DMatrix<f64>, with_derivatives: bool) -> Result<Arc<CachedTransition>> {
        if let Some(hit) = self.map.read().expect("expm cache poisoned").get(key) {
            if !with_derivatives || hit.directional.is_some() {
                return Ok(Arc::clone(hit));
            }
        }
        let fresh = Arc::new(CachedTransition::compute(q, key.delta, with_derivatives, self.method)?);
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.map
            .write()
            .expect("expm cache poisoned")
            .insert(key.clone(), Arc::clone(&fresh));
        Ok(fresh)
    }
}
