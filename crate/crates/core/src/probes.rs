//! Response probes `T(y)` and their scan order.

use std::fmt;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_SCALES: [f64; 3] = [0.1, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// `T1(y) = y`
    Identity,
    /// `T2(y) = y^2`
    Square,
    /// `T3(y; a) = atan(a y)`
    Arctan,
    /// `T4(y; a) = a y^2 / (1 + a y^2)`
    RationalEven,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub kind: ProbeKind,
    /// Scale parameter; `1.0` and ignored for identity and square.
    pub a: f64,
}

impl Probe {
    pub fn identity() -> Self {
        Probe { kind: ProbeKind::Identity, a: 1.0 }
    }

    pub fn square() -> Self {
        Probe { kind: ProbeKind::Square, a: 1.0 }
    }

    pub fn arctan(a: f64) -> Result<Self> {
        check_scale(a)?;
        Ok(Probe { kind: ProbeKind::Arctan, a })
    }

    pub fn rational_even(a: f64) -> Result<Self> {
        check_scale(a)?;
        Ok(Probe { kind: ProbeKind::RationalEven, a })
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        match self.kind {
            ProbeKind::Identity => y,
            ProbeKind::Square => y * y,
            ProbeKind::Arctan => (self.a * y).atan(),
            ProbeKind::RationalEven => {
                let ay2 = self.a * y * y;
                ay2 / (1.0 + ay2)
            }
        }
    }

    pub fn apply(&self, y: ArrayView1<f64>) -> Array1<f64> {
        y.mapv(|v| self.eval(v))
    }

    /// Odd probes satisfy `T(-y) = -T(y)`, even ones `T(-y) = T(y)`.
    pub fn is_odd(&self) -> bool {
        matches!(self.kind, ProbeKind::Identity | ProbeKind::Arctan)
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ProbeKind::Identity => write!(f, "T1"),
            ProbeKind::Square => write!(f, "T2"),
            ProbeKind::Arctan => write!(f, "T3(a={})", self.a),
            ProbeKind::RationalEven => write!(f, "T4(a={})", self.a),
        }
    }
}

fn check_scale(a: f64) -> Result<()> {
    if a.is_finite() && a > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("probe scale must be positive, got {a}")))
    }
}

/// `T1, T2`, then `T3` at each scale ascending, then `T4` likewise.
pub fn scan_order(scales: &[f64]) -> Result<Vec<Probe>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("probe scale grid is empty".into()));
    }
    for &a in scales {
        check_scale(a)?;
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = vec![Probe::identity(), Probe::square()];
    for &a in &sorted {
        out.push(Probe::arctan(a)?);
    }
    for &a in &sorted {
        out.push(Probe::rational_even(a)?);
    }
    Ok(out)
}

/// Probe values prepared for moment computation: centered to mean zero and
/// scaled to unit (population) variance. A constant probe yields zeros.
#[derive(Debug, Clone)]
pub struct ProbeValues {
    pub values: Array1<f64>,
    pub mean: f64,
    pub scale: f64,
}

pub fn prepared_values(probe: &Probe, y: ArrayView1<f64>) -> ProbeValues {
    let raw = probe.apply(y);
    let n = raw.len().max(1) as f64;
    let mean = raw.sum() / n;
    let centered = raw.mapv(|v| v - mean);
    let sd = (centered.dot(&centered) / n).sqrt();
    if sd > 1e-12 * mean.abs().max(1.0) {
        ProbeValues { values: centered / sd, mean, scale: sd }
    } else {
        ProbeValues { values: Array1::zeros(raw.len()), mean, scale: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn apply_examples() {
        let y = array![-1.0, 0.0, 2.0];
        assert_eq!(Probe::identity().apply(y.view()), y);
        assert_eq!(Probe::square().apply(array![2.0].view()), array![4.0]);
        let t3 = Probe::arctan(1.0).unwrap();
        assert_eq!(t3.eval(0.0), 0.0);
        assert!((t3.eval(1e6) - FRAC_PI_2).abs() < 1e-5);
        let t4 = Probe::rational_even(0.5).unwrap();
        assert!((t4.eval(2.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_scales() {
        assert!(Probe::arctan(0.0).is_err());
        assert!(Probe::rational_even(-1.0).is_err());
        assert!(scan_order(&[]).is_err());
        assert!(scan_order(&[0.5, f64::NAN]).is_err());
    }

    #[test]
    fn scan_order_examples() {
        let order = scan_order(&[0.5]).unwrap();
        assert_eq!(
            order,
            vec![
                Probe::identity(),
                Probe::square(),
                Probe::arctan(0.5).unwrap(),
                Probe::rational_even(0.5).unwrap()
            ]
        );
        let order = scan_order(&[1.0, 0.1]).unwrap();
        assert_eq!(order[2], Probe::arctan(0.1).unwrap());
        assert_eq!(order[3], Probe::arctan(1.0).unwrap());
        assert_eq!(scan_order(&DEFAULT_SCALES).unwrap().len(), 8);
    }

    #[test]
    fn prepared_values_are_standardized() {
        let y = array![1.0, 2.0, 4.0, 7.0];
        let pv = prepared_values(&Probe::square(), y.view());
        assert!(pv.values.sum().abs() < 1e-12);
        assert!((pv.values.dot(&pv.values) / 4.0 - 1.0).abs() < 1e-12);
        let flat = prepared_values(&Probe::identity(), array![3.0, 3.0, 3.0].view());
        assert!(flat.values.iter().all(|v| *v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn parity_and_bounds(y in -1e3f64..1e3, a in 1e-3f64..10.0) {
            for p in scan_order(&[a]).unwrap() {
                let (pos, neg) = (p.eval(y), p.eval(-y));
                if p.is_odd() {
                    proptest::prop_assert_eq!(neg, -pos);
                } else {
                    proptest::prop_assert_eq!(neg, pos);
                }
                match p.kind {
                    ProbeKind::Arctan => proptest::prop_assert!(pos.abs() <= FRAC_PI_2),
                    ProbeKind::RationalEven => proptest::prop_assert!(pos.abs() < 1.0),
                    _ => {}
                }
            }
        }
    }
}
