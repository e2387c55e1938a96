//! From a raw Stein direction to the final unit-norm encoder direction.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::linalg::{check_square, norm2};
use crate::nuisance::Regime;
use crate::probes::Probe;
use crate::stein::{sign_fix, Order, SteinCandidate};
use crate::{Error, Result};

pub const TPM_MAX_ITER: usize = 500;
pub const TPM_TOL: f64 = 1e-7;
const TPM_MAX_BACKTRACKS: usize = 20;

/// Default truncation level `min(q, max(20, ceil(sqrt(q))))`.
pub fn default_sparsity(q: usize) -> usize {
    let root = (q as f64).sqrt().ceil() as usize;
    q.min(root.max(20))
}

/// Indices of the `s` largest-magnitude entries; ties go to the lower index.
pub fn top_indices(u: ArrayView1<f64>, s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].abs().total_cmp(&u[a].abs()).then(a.cmp(&b)));
    idx.truncate(s);
    idx.sort_unstable();
    idx
}

/// Keeps the `s` largest-magnitude entries of `u` and zeros the rest.
pub fn hard_threshold(u: ArrayView1<f64>, s: usize) -> Result<Array1<f64>> {
    let q = u.len();
    if s == 0 || s > q {
        return Err(Error::InvalidArgument(format!("sparsity {s} not in 1..={q}")));
    }
    let mut out = Array1::zeros(q);
    for i in top_indices(u, s) {
        out[i] = u[i];
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TpmResult {
    pub vector: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `v'Kv` at the returned iterate.
    pub rayleigh: f64,
}

fn normalized(v: Array1<f64>) -> Option<Array1<f64>> {
    let nv = norm2(v.view());
    (nv > 0.0 && nv.is_finite()).then(|| v / nv)
}

/// Sparse leading eigenvector by truncated power iteration.
///
/// Iterates `v <- normalize(trunc_s(K v))`. A step that lowers `|v'Kv|`
/// is pulled halfway back toward the previous iterate (re-truncated), up to
/// 20 times; if it still lowers the quotient the previous iterate is kept and
/// the iteration stops.
pub fn truncated_power_method(
    k: ArrayView2<f64>,
    s: usize,
    max_iter: usize,
    tol: f64,
) -> Result<TpmResult> {
    let q = check_square(k, "truncated power method input")?;
    if s == 0 || s > q {
        return Err(Error::InvalidArgument(format!("sparsity {s} not in 1..={q}")));
    }
    let rq = |v: &Array1<f64>| v.dot(&k.dot(v));

    // start from the column with the largest |diagonal| entry
    let lead = (0..q)
        .max_by(|&a, &b| k[[a, a]].abs().total_cmp(&k[[b, b]].abs()).then(b.cmp(&a)))
        .unwrap();
    let mut v = normalized(hard_threshold(k.column(lead), s)?).unwrap_or_else(|| {
        let mut e = Array1::zeros(q);
        e[lead] = 1.0;
        e
    });
    let mut best = rq(&v).abs();

    for it in 1..=max_iter {
        let Some(mut next) = normalized(hard_threshold(k.dot(&v).view(), s)?) else {
            return Ok(TpmResult { rayleigh: rq(&v), vector: v, iterations: it, converged: true });
        };
        // compare up to sign: a negative leading eigenvalue flips v every step
        let flip = if next.dot(&v) < 0.0 { -1.0 } else { 1.0 };
        let mut value = rq(&next).abs();
        let mut backtracks = 0;
        while value < best * (1.0 - 1e-12) && backtracks < TPM_MAX_BACKTRACKS {
            let mid = (&next + &(&v * flip)) * 0.5;
            match normalized(hard_threshold(mid.view(), s)?) {
                Some(m) => next = m,
                None => break,
            }
            value = rq(&next).abs();
            backtracks += 1;
        }
        if value < best * (1.0 - 1e-12) {
            return Ok(TpmResult { rayleigh: rq(&v), vector: v, iterations: it, converged: true });
        }
        let step = norm2((&next - &(&v * flip)).view());
        v = next;
        best = value;
        if step < tol {
            return Ok(TpmResult { rayleigh: rq(&v), vector: v, iterations: it, converged: true });
        }
    }
    Ok(TpmResult { rayleigh: rq(&v), vector: v, iterations: max_iter, converged: false })
}

/// Settings for [`finalize`].
#[derive(Debug, Clone, Copy)]
pub struct RecoveryConfig {
    pub regime: Regime,
    pub sparsity: usize,
    pub tpm_max_iter: usize,
    pub tpm_tol: f64,
}

/// Per-candidate row of the strength table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRecord {
    pub probe: Probe,
    pub order: Order,
    pub strength: f64,
    pub threshold: f64,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eigenvalue: Option<f64>,
}

/// The fitted encoder direction with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFit {
    pub gamma: Array1<f64>,
    pub order: Order,
    pub probe: Probe,
    /// Nonzero coordinates of `gamma` (high-dimensional regime only).
    pub support: Option<Vec<usize>>,
    pub strength: f64,
    pub regime: Regime,
    pub fallback_used: bool,
    pub tpm_converged: Option<bool>,
    pub diagnostics: Vec<StrengthRecord>,
}

impl EncoderFit {
    pub fn q(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalizes (and in the high-dimensional regime truncates) a candidate's
/// raw direction.
///
/// For an order-2 candidate in the high-dimensional regime the truncated power
/// method runs on the whitened matrix `K`; its output is mapped back through
/// `Omega^{1/2}` and truncated again to `s` entries in the original basis.
pub fn finalize(
    cand: &SteinCandidate,
    omega_sqrt: Option<ArrayView2<f64>>,
    cfg: &RecoveryConfig,
) -> Result<EncoderFit> {
    let q = cand.u.len();
    if norm2(cand.u.view()) == 0.0 {
        return Err(Error::Degenerate("raw direction has zero norm".into()));
    }
    let mut tpm_converged = None;
    let gamma0 = match (cfg.regime, cand.order) {
        (Regime::Low, _) => cand.u.clone(),
        (Regime::High, Order::First) => hard_threshold(cand.u.view(), cfg.sparsity.min(q))?,
        (Regime::High, Order::Second) => {
            let (k, osq) = match (&cand.k_matrix, omega_sqrt) {
                (Some(k), Some(o)) => (k, o),
                _ => {
                    return Err(Error::InvalidArgument(
                        "order-2 sparse recovery needs K and Omega^{1/2}".into(),
                    ))
                }
            };
            let s = cfg.sparsity.min(q);
            let tpm = truncated_power_method(k.view(), s, cfg.tpm_max_iter, cfg.tpm_tol)?;
            tpm_converged = Some(tpm.converged);
            hard_threshold(osq.dot(&tpm.vector).view(), s)?
        }
    };
    let nrm = norm2(gamma0.view());
    if nrm == 0.0 || !nrm.is_finite() {
        return Err(Error::Degenerate("recovered direction has zero norm".into()));
    }
    let gamma = sign_fix(gamma0 / nrm);
    let support = (cfg.regime == Regime::High)
        .then(|| (0..q).filter(|&i| gamma[i] != 0.0).collect());
    Ok(EncoderFit {
        gamma,
        order: cand.order,
        probe: cand.probe,
        support,
        strength: cand.strength,
        regime: cfg.regime,
        fallback_used: false,
        tpm_converged,
        diagnostics: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::identity;
    use ndarray::{array, Array2};

    fn low() -> RecoveryConfig {
        RecoveryConfig { regime: Regime::Low, sparsity: 2, tpm_max_iter: TPM_MAX_ITER, tpm_tol: TPM_TOL }
    }

    #[test]
    fn hard_threshold_examples() {
        let u = array![3.0, -1.0, 0.5, 2.0];
        assert_eq!(hard_threshold(u.view(), 2).unwrap(), array![3.0, 0.0, 0.0, 2.0]);
        assert_eq!(hard_threshold(u.view(), 4).unwrap(), u);
        let eq = array![1.0, -1.0, 1.0];
        assert_eq!(hard_threshold(eq.view(), 1).unwrap(), array![1.0, 0.0, 0.0]);
        assert!(hard_threshold(u.view(), 0).is_err());
        assert!(hard_threshold(u.view(), 5).is_err());
    }

    #[test]
    fn default_sparsity_rule() {
        assert_eq!(default_sparsity(10), 10);
        assert_eq!(default_sparsity(100), 20);
        assert_eq!(default_sparsity(400), 20);
        assert_eq!(default_sparsity(1000), 32);
    }

    #[test]
    fn tpm_rank_one_cases() {
        let mut k = Array2::zeros((4, 4));
        k[[0, 0]] = 1.0;
        let r = truncated_power_method(k.view(), 1, TPM_MAX_ITER, TPM_TOL).unwrap();
        assert_eq!(r.vector, array![1.0, 0.0, 0.0, 0.0]);

        let q = 30;
        let mut beta = Array1::zeros(q);
        for (i, v) in [(2, 1.0), (5, -2.0), (9, 0.5), (14, 1.5), (20, -1.0)] {
            beta[i] = v;
        }
        beta /= norm2(beta.view());
        let k = beta.view().insert_axis(ndarray::Axis(1)).dot(&beta.view().insert_axis(ndarray::Axis(0)));
        let r = truncated_power_method(k.view(), 5, TPM_MAX_ITER, TPM_TOL).unwrap();
        let align = r.vector.dot(&beta).abs();
        assert!((1.0 - align) < 1e-8 && r.converged);
    }

    #[test]
    fn tpm_negative_leading_eigenvalue() {
        let k = array![[-3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]];
        let r = truncated_power_method(k.view(), 1, TPM_MAX_ITER, TPM_TOL).unwrap();
        assert!((r.vector[0].abs() - 1.0).abs() < 1e-12);
        assert!((r.rayleigh + 3.0).abs() < 1e-12);
    }

    #[test]
    fn finalize_examples() {
        let c = SteinCandidate::first(Probe::identity(), array![3.0, 4.0]);
        let fit = finalize(&c, None, &low()).unwrap();
        assert!((fit.gamma[0] - 0.6).abs() < 1e-15 && (fit.gamma[1] - 0.8).abs() < 1e-15);
        assert!(fit.support.is_none());

        let high = RecoveryConfig { regime: Regime::High, sparsity: 1, ..low() };
        let fit = finalize(&c, None, &high).unwrap();
        assert_eq!(fit.gamma, array![0.0, 1.0]);
        assert_eq!(fit.support, Some(vec![1]));

        let neg = SteinCandidate::first(Probe::identity(), array![-3.0, -4.0]);
        let fit = finalize(&neg, None, &low()).unwrap();
        assert!(fit.gamma[1] > 0.0);

        let zero = SteinCandidate::first(Probe::identity(), array![0.0, 0.0]);
        assert!(matches!(finalize(&zero, None, &low()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn finalize_order_two_high() {
        let k = array![[0.1, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, -0.2]];
        let c = SteinCandidate::second(Probe::square(), k, identity(3).view()).unwrap();
        let cfg = RecoveryConfig { regime: Regime::High, sparsity: 1, ..low() };
        let osq = identity(3);
        let fit = finalize(&c, Some(osq.view()), &cfg).unwrap();
        assert_eq!(fit.gamma, array![0.0, 1.0, 0.0]);
        assert_eq!(fit.tpm_converged, Some(true));
    }

    proptest::proptest! {
        #[test]
        fn finalize_is_unit_and_idempotent(
            u in proptest::collection::vec(-10.0f64..10.0, 2..12),
            s in 1usize..12,
            high in proptest::bool::ANY,
        ) {
            proptest::prop_assume!(u.iter().any(|v| v.abs() > 1e-6));
            let q = u.len();
            let cfg = RecoveryConfig {
                regime: if high { Regime::High } else { Regime::Low },
                sparsity: s.min(q),
                ..low()
            };
            let c = SteinCandidate::first(Probe::identity(), Array1::from(u));
            let fit = finalize(&c, None, &cfg).unwrap();
            proptest::prop_assert!((norm2(fit.gamma.view()) - 1.0).abs() < 1e-10);
            let again = finalize(&SteinCandidate::first(Probe::identity(), fit.gamma.clone()), None, &cfg).unwrap();
            let diff = (&again.gamma - &fit.gamma).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            proptest::prop_assert!(diff < 1e-12);
            if high {
                proptest::prop_assert!(fit.gamma.iter().filter(|v| **v != 0.0).count() <= s.min(q));
            }
        }

        #[test]
        fn hard_threshold_maximizes_kept_energy(
            u in proptest::collection::vec(-5.0f64..5.0, 1..10),
            s in 1usize..10,
        ) {
            let q = u.len();
            let s = s.min(q);
            let u = Array1::from(u);
            let kept = hard_threshold(u.view(), s).unwrap();
            let energy = kept.dot(&kept);
            // brute force over all s-subsets
            let mut best = 0.0f64;
            for mask in 0u32..(1 << q) {
                if mask.count_ones() as usize != s { continue; }
                let e: f64 = (0..q).filter(|i| mask >> i & 1 == 1).map(|i| u[i] * u[i]).sum();
                best = best.max(e);
            }
            proptest::prop_assert!((energy - best).abs() < 1e-12);
        }

        #[test]
        fn tpm_output_is_sparse_unit(
            seed in 0u64..500,
            q in 3usize..15,
            s in 1usize..15,
        ) {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = Array2::from_shape_simple_fn((q, q), || StandardNormal.sample(&mut rng));
            let k = (&b + &b.t()) * 0.5;
            let s = s.min(q);
            let r = truncated_power_method(k.view(), s, TPM_MAX_ITER, TPM_TOL).unwrap();
            proptest::prop_assert!((norm2(r.vector.view()) - 1.0).abs() < 1e-10);
            proptest::prop_assert!(r.vector.iter().filter(|v| **v != 0.0).count() <= s);
        }
    }
}
