//! Residual Stein moments and their leading directions.
//!
//! With residuals `r_i = z_i - A x_i` and centered probe values `t_i`, the
//! first-order whitened moment is `nu = Omega (1/n) sum_i t_i r_i` and the
//! second-order one is
//! `K = Omega^{1/2} [(1/n) sum_i t_i (r_i r_i' - Sigma)] Omega^{1/2}`.
//! Under a single-index model both align with the index direction: `nu` is
//! proportional to it, and `K` is proportional to its outer product once
//! mapped back through `Omega^{1/2}`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, check_square, norm2, symmetrize};
use crate::probes::Probe;
use crate::{Error, Result};

pub const EIGEN_MAX_ITER: usize = 10_000;
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Order {
    First,
    Second,
}

impl From<Order> for u8 {
    fn from(o: Order) -> u8 {
        match o {
            Order::First => 1,
            Order::Second => 2,
        }
    }
}

impl TryFrom<u8> for Order {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            other => Err(format!("Stein order must be 1 or 2, got {other}")),
        }
    }
}

impl std::fmt::Display for Order {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// A probe/order pair evaluated on data.
#[derive(Debug, Clone)]
pub struct SteinCandidate {
    pub order: Order,
    pub probe: Probe,
    /// Raw direction: `nu` for order 1, `Omega^{1/2} v` for order 2.
    pub u: Array1<f64>,
    pub strength: f64,
    /// Signed leading eigenvalue (order 2 only).
    pub eigenvalue: Option<f64>,
    pub eigen_iterations: usize,
    /// Whether the eigenpair came from the dense fallback solver.
    pub dense_eigen_fallback: bool,
    /// The whitened Stein matrix `K` (order 2 only).
    pub k_matrix: Option<Array2<f64>>,
}

impl SteinCandidate {
    pub fn first(probe: Probe, nu: Array1<f64>) -> Self {
        let strength = norm2(nu.view());
        SteinCandidate {
            order: Order::First,
            probe,
            u: nu,
            strength,
            eigenvalue: None,
            eigen_iterations: 0,
            dense_eigen_fallback: false,
            k_matrix: None,
        }
    }

    /// Builds the order-2 candidate from `K`, solving for its leading pair.
    pub fn second(probe: Probe, k: Array2<f64>, omega_sqrt: ArrayView2<f64>) -> Result<Self> {
        let (pair, dense) = match leading_eigenpair(k.view()) {
            Ok(pair) => (pair, false),
            Err(Error::EigenNotConverged { .. }) => (dense_leading_eigenpair(k.view())?, true),
            Err(e) => return Err(e),
        };
        let u = omega_sqrt.dot(&pair.vector);
        Ok(SteinCandidate {
            order: Order::Second,
            probe,
            u,
            strength: pair.value.abs(),
            eigenvalue: Some(pair.value),
            eigen_iterations: pair.iterations,
            dense_eigen_fallback: dense,
            k_matrix: Some(k),
        })
    }
}

/// `norm(nu)` for order 1, `|lambda|` for order 2.
pub fn candidate_strength(c: &SteinCandidate) -> f64 {
    match c.order {
        Order::First => norm2(c.u.view()),
        Order::Second => c.eigenvalue.map_or(0.0, f64::abs),
    }
}

fn check_inputs(tvals: ArrayView1<f64>, zres: ArrayView2<f64>, mats: &[ArrayView2<f64>]) -> Result<()> {
    if tvals.len() != zres.nrows() {
        return Err(Error::Shape(format!(
            "{} probe values for {} residual rows",
            tvals.len(),
            zres.nrows()
        )));
    }
    if zres.nrows() == 0 {
        return Err(Error::InvalidArgument("no rows".into()));
    }
    let q = zres.ncols();
    for m in mats {
        if m.dim() != (q, q) {
            return Err(Error::Shape(format!(
                "expected {q}x{q} matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(())
}

/// `Omega (1/n) sum_i t_i r_i`.
pub fn first_order_vector(
    tvals: ArrayView1<f64>,
    zres: ArrayView2<f64>,
    omega: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    check_inputs(tvals, zres, &[omega])?;
    let m = zres.t().dot(&tvals) / zres.nrows() as f64;
    Ok(omega.dot(&m))
}

/// `Omega^{1/2} [(1/n) sum_i t_i (r_i r_i' - Sigma)] Omega^{1/2}`, symmetrized.
pub fn second_order_matrix(
    tvals: ArrayView1<f64>,
    zres: ArrayView2<f64>,
    sigma: ArrayView2<f64>,
    omega_sqrt: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_inputs(tvals, zres, &[sigma, omega_sqrt])?;
    let n = zres.nrows() as f64;
    let weighted = &zres * &tvals.insert_axis(Axis(1));
    let mut m = zres.t().dot(&weighted) / n;
    let tbar = tvals.sum() / n;
    if tbar != 0.0 {
        m.scaled_add(-tbar, &sigma);
    }
    let k = omega_sqrt.dot(&m).dot(&omega_sqrt);
    Ok(symmetrize(&k))
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    /// Eigenvalue of largest magnitude (signed).
    pub value: f64,
    /// Unit eigenvector, largest-magnitude entry positive.
    pub vector: Array1<f64>,
    pub iterations: usize,
}

/// Leading (largest `|lambda|`) eigenpair of a symmetric matrix.
///
/// Power iteration runs on `K^2`, whose top eigenvalue is `lambda^2` whether
/// `lambda` is positive or negative; the sign is then read off the Rayleigh
/// quotient `v'Kv`. The start vector is the coordinate axis with the largest
/// diagonal entry of `K^2`. Converged when `|Kv - lambda v| <= 1e-9 max(1, |lambda|)`.
pub fn leading_eigenpair(k: ArrayView2<f64>) -> Result<EigenPair> {
    let q = check_square(k, "Stein matrix")?;
    if q == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if linalg::max_asymmetry(k) > 1e-8 * linalg::max_abs(k).max(1.0) {
        return Err(Error::InvalidArgument("eigen input is not symmetric".into()));
    }
    let k2 = k.dot(&k);
    let start = (0..q)
        .max_by(|&a, &b| k2[[a, a]].total_cmp(&k2[[b, b]]).then(b.cmp(&a)))
        .unwrap();
    let mut v = Array1::zeros(q);
    v[start] = 1.0;
    if k2[[start, start]] == 0.0 {
        // zero matrix
        return Ok(EigenPair { value: 0.0, vector: v, iterations: 0 });
    }

    let mut prev_resid = f64::INFINITY;
    let mut ratio = 1.0;
    for it in 1..=EIGEN_MAX_ITER {
        let w = k2.dot(&v);
        let nw = norm2(w.view());
        if nw == 0.0 {
            return Ok(EigenPair { value: 0.0, vector: sign_fix(v), iterations: it });
        }
        v = w / nw;
        let kv = k.dot(&v);
        let lambda = v.dot(&kv);
        let resid = norm2((&kv - &(&v * lambda)).view());
        if resid <= EIGEN_RESIDUAL_TOL * lambda.abs().max(1.0) {
            return Ok(EigenPair { value: lambda, vector: sign_fix(v), iterations: it });
        }
        if prev_resid.is_finite() && prev_resid > 0.0 {
            ratio = resid / prev_resid;
        }
        prev_resid = resid;
    }
    Err(Error::EigenNotConverged {
        iterations: EIGEN_MAX_ITER,
        gap: 1.0 - ratio.clamp(0.0, 1.0).sqrt(),
    })
}

/// Largest `|lambda|` of a symmetric matrix, without the eigenvector.
///
/// Power iteration on `K^2` stopped once the Rayleigh quotient changes by
/// less than `1e-8` relative; used where only the strength is needed.
pub fn spectral_radius(k: ArrayView2<f64>) -> f64 {
    let q = k.nrows();
    if q == 0 {
        return 0.0;
    }
    let k2 = k.dot(&k);
    let start = (0..q).max_by(|&a, &b| k2[[a, a]].total_cmp(&k2[[b, b]])).unwrap();
    if k2[[start, start]] == 0.0 {
        return 0.0;
    }
    let mut v = Array1::zeros(q);
    v[start] = 1.0;
    let mut rq = k2[[start, start]];
    for _ in 0..1000 {
        let w = k2.dot(&v);
        let nw = norm2(w.view());
        if nw == 0.0 {
            return 0.0;
        }
        v = w / nw;
        let next = v.dot(&k2.dot(&v));
        if (next - rq).abs() <= 1e-8 * next {
            return next.sqrt();
        }
        rq = next;
    }
    rq.sqrt()
}

/// Same contract as [`leading_eigenpair`], via a full dense decomposition.
pub fn dense_leading_eigenpair(k: ArrayView2<f64>) -> Result<EigenPair> {
    let (vals, vecs) = linalg::sym_eigh(k)?;
    let q = vals.len();
    if q == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let idx = if vals[q - 1].abs() >= vals[0].abs() { q - 1 } else { 0 };
    Ok(EigenPair {
        value: vals[idx],
        vector: sign_fix(vecs.column(idx).to_owned()),
        iterations: 0,
    })
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
pub fn sign_fix(mut v: Array1<f64>) -> Array1<f64> {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{identity, max_abs};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_probe_values_give_zero_moments() {
        let z = randn(5, 3, 1);
        let t = Array1::zeros(5);
        let i3 = identity(3);
        assert!(first_order_vector(t.view(), z.view(), i3.view()).unwrap().iter().all(|v| *v == 0.0));
        let k = second_order_matrix(t.view(), z.view(), i3.view(), i3.view()).unwrap();
        assert!(k.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_order_hand_computed() {
        let t = array![1.0, -2.0, 1.0];
        let z = array![[1.0, 0.0], [0.5, 2.0], [0.0, -1.0]];
        let nu = first_order_vector(t.view(), z.view(), identity(2).view()).unwrap();
        // (1*1 - 2*0.5 + 0) / 3 = 0, (0 - 4 - 1) / 3 = -5/3
        assert!((nu[0] - 0.0).abs() < 1e-15);
        assert!((nu[1] + 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn second_order_matches_double_loop() {
        let t = array![0.7, -1.2, 0.5];
        let z = array![[1.0, 0.3], [-0.4, 2.0], [0.9, -1.1]];
        let sigma = array![[1.2, 0.1], [0.1, 0.8]];
        let osq = array![[0.9, 0.05], [0.05, 1.1]];
        let k = second_order_matrix(t.view(), z.view(), sigma.view(), osq.view()).unwrap();
        let mut m = Array2::<f64>::zeros((2, 2));
        for i in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    m[[a, b]] += t[i] * (z[[i, a]] * z[[i, b]] - sigma[[a, b]]) / 3.0;
                }
            }
        }
        let mut oracle = Array2::<f64>::zeros((2, 2));
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        oracle[[a, d]] += osq[[a, b]] * m[[b, c]] * osq[[c, d]];
                    }
                }
            }
        }
        assert!(max_abs((&k - &oracle).view()) < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let z = randn(4, 3, 2);
        let t = Array1::zeros(5);
        assert!(first_order_vector(t.view(), z.view(), identity(3).view()).is_err());
        let t = Array1::zeros(4);
        assert!(first_order_vector(t.view(), z.view(), identity(2).view()).is_err());
    }

    #[test]
    fn eigen_diagonal_examples() {
        let p = leading_eigenpair(array![[2.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert!((p.value - 2.0).abs() < 1e-12);
        assert!((p.vector[0] - 1.0).abs() < 1e-12);
        let p = leading_eigenpair(array![[-3.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert!((p.value + 3.0).abs() < 1e-12);
        assert!((p.vector[0] - 1.0).abs() < 1e-12);
        let p = leading_eigenpair(Array2::zeros((3, 3)).view()).unwrap();
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn eigen_degenerate_pair_does_not_converge() {
        // eigenvalues +1 and -1: K^2 = I, power iteration cannot separate them
        let k = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(matches!(leading_eigenpair(k.view()), Err(Error::EigenNotConverged { .. })));
        let dense = dense_leading_eigenpair(k.view()).unwrap();
        assert!((dense.value.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn candidate_strengths() {
        let c = SteinCandidate::first(Probe::identity(), array![3.0, 4.0]);
        assert_eq!(candidate_strength(&c), 5.0);
        let k = array![[-2.0, 0.0], [0.0, 0.5]];
        let c = SteinCandidate::second(Probe::identity(), k, identity(2).view()).unwrap();
        assert!((candidate_strength(&c) - 2.0).abs() < 1e-12);
        let c = SteinCandidate::first(Probe::identity(), Array1::zeros(2));
        assert_eq!(candidate_strength(&c), 0.0);
    }

    #[test]
    fn scale_equivariance() {
        let z = randn(40, 4, 3);
        let t = randn(40, 1, 4).column(0).to_owned();
        let om = identity(4) * 1.3;
        let nu = first_order_vector(t.view(), z.view(), om.view()).unwrap();
        let nu3 = first_order_vector((&t * 3.0).view(), z.view(), om.view()).unwrap();
        assert!(max_abs((&(nu * 3.0) - &nu3).insert_axis(Axis(0)).view()) < 1e-12);
        let k = second_order_matrix(t.view(), z.view(), om.view(), om.view()).unwrap();
        let k3 = second_order_matrix((&t * 3.0).view(), z.view(), om.view(), om.view()).unwrap();
        assert!(max_abs((&(k * 3.0) - &k3).view()) < 1e-12);
    }
}
