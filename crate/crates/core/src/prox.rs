//! Proximity operators of the l1 norm and its conjugate, and the
//! subgradient selections used by backpropagation.
//!
//! On the nondifferentiable sets (`|v| = 1/sigma` for the soft threshold,
//! `|v| = 1` for the clip) the derivative is an interval; every selection
//! here picks `0`.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_positive, Result};

/// Penalty family `h` of the analysis prior `h(Lx)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxFamily {
    #[default]
    L1,
}

impl ProxFamily {
    /// `h(v)`.
    pub fn value(self, v: ArrayView1<'_, f64>) -> f64 {
        match self {
            ProxFamily::L1 => v.iter().map(|x| x.abs()).sum(),
        }
    }

    /// `prox_{t h}(v)`.
    pub fn prox(self, v: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        match self {
            ProxFamily::L1 => prox_l1(v, t),
        }
    }

    /// `prox_{sigma h*}(v)`.
    pub fn prox_conjugate(self, v: ArrayView1<'_, f64>, sigma: f64) -> Result<Array1<f64>> {
        match self {
            ProxFamily::L1 => prox_l1_conjugate(v, sigma),
        }
    }
}

#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Soft thresholding, `sign(v) max(|v| - t, 0)` componentwise.
pub fn prox_l1(v: ArrayView1<'_, f64>, threshold: f64) -> Result<Array1<f64>> {
    check_positive("threshold", threshold)?;
    Ok(v.mapv(|x| soft_threshold(x, threshold)))
}

/// `prox_{sigma h*}` for `h = |.|_1`: the projection onto `[-1, 1]^P`,
/// independent of `sigma`.
pub fn prox_l1_conjugate(v: ArrayView1<'_, f64>, sigma: f64) -> Result<Array1<f64>> {
    check_positive("sigma", sigma)?;
    Ok(v.mapv(|x| x.clamp(-1.0, 1.0)))
}

/// Diagonal derivatives `(r2, r3)` of the soft threshold at `1/sigma` and of
/// the clip to `[-1, 1]`. Ties select `0`.
pub fn subgrad_r(v2: ArrayView1<'_, f64>, v3: ArrayView1<'_, f64>, sigma: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    check_positive("sigma", sigma)?;
    let t = 1.0 / sigma;
    let r2 = v2.mapv(|x| if x.abs() > t { 1.0 } else { 0.0 });
    let r3 = v3.mapv(|x| if x.abs() < 1.0 { 1.0 } else { 0.0 });
    Ok((r2, r3))
}

/// `d/dsigma prox_{h/sigma}(v2)`: `sign(v2)/sigma^2` outside the dead zone,
/// `0` inside it and on its boundary. The identity and clip branches do not
/// depend on `sigma`.
pub fn dprox_dsigma(v2: ArrayView1<'_, f64>, sigma: f64) -> Result<Array1<f64>> {
    check_positive("sigma", sigma)?;
    let t = 1.0 / sigma;
    let g = t * t;
    let mut out = Array1::zeros(v2.len());
    Zip::from(&mut out).and(&v2).for_each(|o, &x| {
        *o = if x > t {
            g
        } else if x < -t {
            -g
        } else {
            0.0
        };
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn soft_threshold_closed_form() {
        let out = prox_l1(array![2.0, -0.5, 0.0].view(), 1.0).unwrap();
        assert_eq!(out, array![1.0, 0.0, 0.0]);
        let out = prox_l1(Array1::zeros(5).view(), 0.7).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conjugate_is_clip() {
        for sigma in [0.1, 1.0, 7.5] {
            let out = prox_l1_conjugate(array![0.5, -2.0, 1.0].view(), sigma).unwrap();
            assert_eq!(out, array![0.5, -1.0, 1.0]);
        }
        let inside = array![0.3, -0.99, 1.0, -1.0, 0.0];
        assert_eq!(prox_l1_conjugate(inside.view(), 2.0).unwrap(), inside);
    }

    #[test]
    fn nonpositive_parameters_are_rejected() {
        let v = array![1.0];
        assert!(prox_l1(v.view(), 0.0).is_err());
        assert!(prox_l1(v.view(), -1.0).is_err());
        assert!(prox_l1_conjugate(v.view(), 0.0).is_err());
        assert!(subgrad_r(v.view(), v.view(), -2.0).is_err());
        assert!(dprox_dsigma(v.view(), f64::NAN).is_err());
    }

    #[test]
    fn subgradient_cases() {
        let v = array![2.0, 0.5];
        let (r2, r3) = subgrad_r(v.view(), v.view(), 1.0).unwrap();
        assert_eq!(r2, array![1.0, 0.0]);
        assert_eq!(r3, array![0.0, 1.0]);

        let z = Array1::zeros(3);
        let (r2, r3) = subgrad_r(z.view(), z.view(), 3.0).unwrap();
        assert!(r2.iter().all(|&v| v == 0.0));
        assert!(r3.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ties_select_zero() {
        let (r2, r3) = subgrad_r(array![0.5, -0.5].view(), array![1.0, -1.0].view(), 2.0).unwrap();
        assert_eq!(r2, array![0.0, 0.0]);
        assert_eq!(r3, array![0.0, 0.0]);
        let d = dprox_dsigma(array![0.5, -0.5].view(), 2.0).unwrap();
        assert_eq!(d, array![0.0, 0.0]);
    }

    #[test]
    fn sigma_derivative_piecewise() {
        let d = dprox_dsigma(array![1.0, -1.0, 0.1].view(), 2.0).unwrap();
        assert_eq!(d, array![0.25, -0.25, 0.0]);
    }

    #[test]
    fn family_dispatch() {
        let v = array![1.5, -3.0];
        assert_eq!(ProxFamily::L1.value(v.view()), 4.5);
        assert_eq!(ProxFamily::L1.prox(v.view(), 1.0).unwrap(), array![0.5, -2.0]);
        assert_eq!(ProxFamily::L1.prox_conjugate(v.view(), 1.0).unwrap(), array![1.0, -1.0]);
    }
}
