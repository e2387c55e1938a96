//! Conditional linear-Gaussian working model `z | x ~ N(A x, Sigma)`.
//!
//! Two regimes are supported. The low-dimensional fit uses least squares for
//! `A`, the residual sample covariance for `Sigma`, and a (lightly jittered)
//! direct inverse for `Omega`. The high-dimensional fit uses a row-wise lasso
//! for `A` and the graphical lasso for `Omega`.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, check_square, max_abs, symmetrize};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    High,
}

impl Regime {
    /// High-dimensional whenever `p + q >= n / 4`.
    pub fn auto(n: usize, p: usize, q: usize) -> Regime {
        if 4 * (p + q) >= n {
            Regime::High
        } else {
            Regime::Low
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Low => "low",
            Regime::High => "high",
        })
    }
}

pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_SWEEPS: usize = 10_000;
pub const GLASSO_TOL: f64 = 1e-5;
pub const GLASSO_MAX_SWEEPS: usize = 200;
pub const EIGEN_FLOOR: f64 = 1e-8;
pub const RIDGE_JITTER: f64 = 1e-8;
/// Relative ridge added to an ill-conditioned `X'X` before giving up.
pub const OLS_JITTER: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct NuisanceFit {
    /// `q x p` conditional mean coefficients.
    pub a_hat: Array2<f64>,
    pub sigma_hat: Array2<f64>,
    pub omega_hat: Array2<f64>,
    pub omega_sqrt: Array2<f64>,
    pub regime: Regime,
    pub lambda_a: Option<f64>,
    pub rho: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub regime: Regime,
    pub lambda_a: Option<f64>,
    pub rho: Option<f64>,
    pub converged: bool,
    /// Nonzero entries of the estimated mean coefficient matrix.
    pub a_nonzeros: usize,
    /// Nonzero off-diagonal entries of the estimated precision matrix.
    pub omega_offdiag_nonzeros: usize,
}

impl NuisanceFit {
    pub fn summary(&self) -> NuisanceSummary {
        let q = self.omega_hat.nrows();
        let mut off = 0;
        for i in 0..q {
            for j in 0..q {
                if i != j && self.omega_hat[[i, j]] != 0.0 {
                    off += 1;
                }
            }
        }
        NuisanceSummary {
            regime: self.regime,
            lambda_a: self.lambda_a,
            rho: self.rho,
            converged: self.converged,
            a_nonzeros: self.a_hat.iter().filter(|v| **v != 0.0).count(),
            omega_offdiag_nonzeros: off,
        }
    }
}

/// Penalty constants for the high-dimensional regime:
/// `lambda_A = c_a sqrt(log max(p, q) / n)` and `rho = c_omega sqrt(log q / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub c_a: f64,
    pub c_omega: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Penalties {
            c_a: 0.5,
            c_omega: 0.5,
        }
    }
}

impl Penalties {
    pub fn lambda_a(&self, n: usize, p: usize, q: usize) -> f64 {
        let d = p.max(q).max(2) as f64;
        self.c_a * (d.ln() / n as f64).sqrt()
    }

    pub fn rho(&self, n: usize, q: usize) -> f64 {
        let d = q.max(2) as f64;
        self.c_omega * (d.ln() / n as f64).sqrt()
    }
}

fn check_rows(x: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<()> {
    if x.nrows() != z.nrows() {
        return Err(Error::Shape(format!(
            "x has {} rows, z has {}",
            x.nrows(),
            z.nrows()
        )));
    }
    Ok(())
}

/// Least-squares coefficients: row `j` regresses column `j` of `z` on `x`.
pub fn fit_mean_ols(x: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_rows(x, z)?;
    let (n, p) = x.dim();
    let q = z.ncols();
    if p == 0 {
        return Ok(Array2::zeros((q, 0)));
    }
    if n <= p {
        return Err(Error::Singular(format!("least squares needs n > p (n={n}, p={p})")));
    }
    let mut gram = x.t().dot(&x);
    let condition = |g: &Array2<f64>| -> Result<f64> {
        let (vals, _) = linalg::sym_eigh(g.view())?;
        Ok(if vals[0] > 0.0 { vals[p - 1] / vals[0] } else { f64::INFINITY })
    };
    let mut cond = condition(&gram)?;
    if cond > 1e12 {
        let jitter = OLS_JITTER * linalg::trace(gram.view()) / p as f64;
        gram.diag_mut().mapv_inplace(|v| v + jitter);
        cond = condition(&gram)?;
    }
    if cond > 1e12 {
        return Err(Error::Singular(format!(
            "design condition number {cond:.3e} exceeds 1e12 after jitter"
        )));
    }
    let rhs = x.t().dot(&z);
    let coef = linalg::spd_solve(gram.view(), rhs.view())?;
    Ok(coef.reversed_axes())
}

/// Result of [`fit_mean_lasso`].
#[derive(Debug, Clone)]
pub struct LassoFit {
    /// `q x p` coefficients; exact zeros off the active set.
    pub coef: Array2<f64>,
    pub converged: bool,
    pub max_sweeps: usize,
}

/// Row-wise lasso `min_a 0.5 |z_j - X a|^2 / n + lambda |a|_1` by cyclic
/// coordinate descent on the Gram matrix.
pub fn fit_mean_lasso(x: ArrayView2<f64>, z: ArrayView2<f64>, lambda: f64) -> Result<LassoFit> {
    check_rows(x, z)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lasso penalty {lambda} < 0")));
    }
    let (n, p) = x.dim();
    let q = z.ncols();
    if p == 0 {
        return Ok(LassoFit {
            coef: Array2::zeros((q, 0)),
            converged: true,
            max_sweeps: 0,
        });
    }
    let nf = n as f64;
    let gram = x.t().dot(&x) / nf;
    let xtz = x.t().dot(&z) / nf;
    let mut coef = Array2::zeros((q, p));
    let mut converged = true;
    let mut max_sweeps = 0;
    for j in 0..q {
        let (row, ok, sweeps) = lasso_gram(gram.view(), xtz.column(j), lambda, None);
        if !ok {
            warn!("lasso row {j} stopped after {sweeps} sweeps without converging");
        }
        converged &= ok;
        max_sweeps = max_sweeps.max(sweeps);
        coef.row_mut(j).assign(&row);
    }
    Ok(LassoFit {
        coef,
        converged,
        max_sweeps,
    })
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimizes `0.5 b'Gb - c'b + lambda |b|_1`.
///
/// Returns `(b, converged, sweeps)`. Convergence: the largest coordinate
/// change of a full sweep falls below [`LASSO_TOL`].
fn lasso_gram(
    gram: ArrayView2<f64>,
    c: ArrayView1<f64>,
    lambda: f64,
    warm: Option<ArrayView1<f64>>,
) -> (Array1<f64>, bool, usize) {
    let p = c.len();
    let mut b = warm.map(|w| w.to_owned()).unwrap_or_else(|| Array1::zeros(p));
    // grad = c - G b
    let mut grad = &c - &gram.dot(&b);
    for sweep in 1..=LASSO_MAX_SWEEPS {
        let mut max_delta = 0.0_f64;
        for k in 0..p {
            let gkk = gram[[k, k]];
            if gkk <= 0.0 {
                continue;
            }
            let old = b[k];
            let new = soft_threshold(grad[k] + gkk * old, lambda) / gkk;
            let delta = new - old;
            if delta != 0.0 {
                b[k] = new;
                grad.scaled_add(-delta, &gram.column(k));
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < LASSO_TOL {
            return (b, true, sweep);
        }
    }
    (b, false, LASSO_MAX_SWEEPS)
}

/// `(1/n) R'R` after centering the columns of `R`.
pub fn sample_covariance(resid: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = resid.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs n >= 2, got {n}")));
    }
    let mean = resid.mean_axis(Axis(0)).unwrap();
    let centered = &resid - &mean;
    Ok(symmetrize(&(centered.t().dot(&centered) / n as f64)))
}

/// Result of [`graphical_lasso`].
#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub precision: Array2<f64>,
    /// The matching covariance estimate `W = precision^-1`.
    pub covariance: Array2<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Graphical lasso with an off-diagonal `l1` penalty.
///
/// Maximizes `log det Omega - tr(S Omega) - rho sum_{i != j} |Omega_ij|` by
/// block coordinate descent over columns of `W = Omega^-1`, solving one lasso
/// per column. Stops when a full sweep changes `W` by less than
/// [`GLASSO_TOL`] in every entry.
pub fn graphical_lasso(s: ArrayView2<f64>, rho: f64) -> Result<GlassoFit> {
    let q = check_square(s, "covariance")?;
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("glasso penalty {rho} < 0")));
    }
    if linalg::max_asymmetry(s) > 1e-8 * max_abs(s).max(1.0) {
        return Err(Error::InvalidArgument("covariance is not symmetric".into()));
    }
    if s.diag().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::NotPositiveDefinite("covariance has a non-positive diagonal".into()));
    }
    let (vals, _) = linalg::sym_eigh(s)?;
    let scale = vals[q - 1].abs().max(1.0);
    if vals[0] < -1e-10 * scale || (rho == 0.0 && vals[0] <= 1e-12 * scale) {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {:.3e}",
            vals[0]
        )));
    }
    if q == 1 {
        let w = s.to_owned();
        return Ok(GlassoFit {
            precision: w.mapv(|v| 1.0 / v),
            covariance: w,
            converged: true,
            sweeps: 0,
        });
    }

    let mut w = s.to_owned();
    // betas[j] holds the lasso coefficients for column j, length q with a zero at j
    let mut betas = Array2::<f64>::zeros((q, q));
    let mut converged = false;
    let mut sweeps = 0;
    for sweep in 1..=GLASSO_MAX_SWEEPS {
        sweeps = sweep;
        let mut max_change = 0.0_f64;
        for j in 0..q {
            let beta = glasso_column(w.view(), s.column(j), j, rho, betas.row(j));
            // w12 = W11 beta
            let wb = w.dot(&beta);
            for i in 0..q {
                if i == j {
                    continue;
                }
                max_change = max_change.max((wb[i] - w[[i, j]]).abs());
                w[[i, j]] = wb[i];
                w[[j, i]] = wb[i];
            }
            betas.row_mut(j).assign(&beta);
        }
        if max_change < GLASSO_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("graphical lasso stopped after {sweeps} sweeps without converging");
    }

    let mut omega = Array2::<f64>::zeros((q, q));
    for j in 0..q {
        let beta = betas.row(j);
        let w12b = (0..q).filter(|&i| i != j).map(|i| w[[i, j]] * beta[i]).sum::<f64>();
        let omega_jj = 1.0 / (w[[j, j]] - w12b);
        for i in 0..q {
            omega[[i, j]] = if i == j { omega_jj } else { -beta[i] * omega_jj };
        }
    }
    let omega = symmetrize(&omega);
    linalg::cholesky_lower(omega.view()).map_err(|_| {
        Error::NotPositiveDefinite("graphical lasso precision estimate is not positive definite".into())
    })?;
    Ok(GlassoFit {
        precision: omega,
        covariance: w,
        converged,
        sweeps,
    })
}

/// Lasso subproblem for column `j`:
/// `min_b 0.5 b' W11 b - s12' b + rho |b|_1` over coordinates `i != j`.
fn glasso_column(
    w: ArrayView2<f64>,
    s_col: ArrayView1<f64>,
    j: usize,
    rho: f64,
    warm: ArrayView1<f64>,
) -> Array1<f64> {
    let q = w.nrows();
    let mut b = warm.to_owned();
    b[j] = 0.0;
    // wb = W11 b restricted to i != j
    let mut wb = w.dot(&b);
    let tol = 1e-10 * w.diag().iter().fold(0.0_f64, |m, v| m.max(*v));
    let mut active_only = false;
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_delta = 0.0_f64;
        for k in 0..q {
            if k == j || (active_only && b[k] == 0.0) {
                continue;
            }
            let wkk = w[[k, k]];
            let old = b[k];
            let partial = s_col[k] - (wb[k] - wkk * old);
            let new = soft_threshold(partial, rho) / wkk;
            let delta = new - old;
            if delta != 0.0 {
                b[k] = new;
                wb.scaled_add(delta, &w.column(k));
                max_delta = max_delta.max(delta.abs() * wkk);
            }
        }
        if max_delta < tol {
            if active_only {
                // confirm with a full sweep
                active_only = false;
                continue;
            }
            break;
        }
        active_only = true;
    }
    b
}

/// `Z - X A'`.
pub fn residualize(
    z: ArrayView2<f64>,
    x: ArrayView2<f64>,
    a_hat: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_rows(x, z)?;
    if a_hat.dim() != (z.ncols(), x.ncols()) {
        return Err(Error::Shape(format!(
            "coefficients are {}x{}, expected {}x{}",
            a_hat.nrows(),
            a_hat.ncols(),
            z.ncols(),
            x.ncols()
        )));
    }
    if x.ncols() == 0 {
        return Ok(z.to_owned());
    }
    Ok(&z - &x.dot(&a_hat.t()))
}

/// Symmetric square root with eigenvalues clipped to [`EIGEN_FLOOR`].
pub fn psd_sqrt(omega: ArrayView2<f64>) -> Result<Array2<f64>> {
    let q = check_square(omega, "psd_sqrt input")?;
    if q == 0 {
        return Ok(Array2::zeros((0, 0)));
    }
    if linalg::max_asymmetry(omega) > 1e-8 * max_abs(omega).max(1.0) {
        return Err(Error::InvalidArgument("psd_sqrt input is not symmetric".into()));
    }
    let (vals, vecs) = linalg::sym_eigh(omega)?;
    let scale = vals[q - 1].abs().max(vals[0].abs()).max(1.0);
    if vals[0] < -1e-10 * scale {
        return Err(Error::NotPositiveDefinite(format!(
            "psd_sqrt input has eigenvalue {:.3e}",
            vals[0]
        )));
    }
    let roots = vals.mapv(|v| v.max(EIGEN_FLOOR).sqrt());
    let scaled = &vecs * &roots;
    Ok(symmetrize(&scaled.dot(&vecs.t())))
}

/// Fit settings for [`fit_nuisance`].
#[derive(Debug, Clone, Copy)]
pub struct NuisanceConfig {
    pub regime: Regime,
    pub penalties: Penalties,
}

/// Estimates `A`, `Sigma`, `Omega`, `Omega^{1/2}` from column-centered `x`, `z`.
pub fn fit_nuisance(x: ArrayView2<f64>, z: ArrayView2<f64>, cfg: &NuisanceConfig) -> Result<NuisanceFit> {
    check_rows(x, z)?;
    let (n, p) = x.dim();
    let q = z.ncols();
    match cfg.regime {
        Regime::Low => {
            let a_hat = fit_mean_ols(x, z)?;
            let resid = residualize(z, x, a_hat.view())?;
            let sigma = sample_covariance(resid.view())?;
            let mut jittered = sigma.clone();
            let jitter = RIDGE_JITTER * linalg::trace(sigma.view()) / q as f64;
            jittered.diag_mut().mapv_inplace(|v| v + jitter);
            let omega = linalg::spd_inverse(jittered.view()).map_err(|_| {
                Error::Singular("residual covariance is singular after jitter".into())
            })?;
            let omega_sqrt = psd_sqrt(omega.view())?;
            Ok(NuisanceFit {
                a_hat,
                sigma_hat: sigma,
                omega_hat: omega,
                omega_sqrt,
                regime: Regime::Low,
                lambda_a: None,
                rho: None,
                converged: true,
            })
        }
        Regime::High => {
            let lambda_a = cfg.penalties.lambda_a(n, p, q);
            let rho = cfg.penalties.rho(n, q);
            // lasso on unit-variance columns, mapped back afterwards
            let (_, sd) = crate::data::column_moments(x);
            let sd: Vec<f64> = sd.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
            let mut xs = x.to_owned();
            for (j, mut col) in xs.axis_iter_mut(Axis(1)).enumerate() {
                col /= sd[j];
            }
            let lasso = fit_mean_lasso(xs.view(), z, lambda_a)?;
            let mut a_hat = lasso.coef;
            for (j, mut col) in a_hat.axis_iter_mut(Axis(1)).enumerate() {
                col /= sd[j];
            }
            let resid = residualize(z, x, a_hat.view())?;
            let s_mat = sample_covariance(resid.view())?;
            let glasso = graphical_lasso(s_mat.view(), rho)?;
            let omega_sqrt = psd_sqrt(glasso.precision.view())?;
            Ok(NuisanceFit {
                a_hat,
                sigma_hat: glasso.covariance,
                omega_hat: glasso.precision,
                omega_sqrt,
                regime: Regime::High,
                lambda_a: Some(lambda_a),
                rho: Some(rho),
                converged: lasso.converged && glasso.converged,
            })
        }
    }
}
