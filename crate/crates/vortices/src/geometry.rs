//! Discrete geometry of the flat torus.
//!
//! Sites live at `(i*hs, j*ht)` for `i in 0..ns`, `j in 0..nt`, with both
//! directions periodic.  The metric is `lambda^2 (ds^2 + dt^2)` for a
//! site-indexed conformal factor `lambda > 0`; plaquette `(i,j)` has the
//! coordinate area `hs*ht` and volume weight `lambda^2 hs*ht`.

use crate::error::{Result, VortexError};
use crate::sum::csum;
use serde::{Deserialize, Serialize};

/// How the conformal factor is specified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LambdaSpec {
    Constant(f64),
    PerSite(Vec<f64>),
}

/// Discretized flat torus with conformal factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusGeometry {
    pub ns: usize,
    pub nt: usize,
    pub ls: f64,
    pub lt: f64,
    /// Conformal factor per site, row-major `j*ns + i`.
    pub lambda: Vec<f64>,
    pub hs: f64,
    pub ht: f64,
    /// Vol = sum of lambda^2 hs ht over sites.
    pub vol: f64,
}

impl TorusGeometry {
    #[inline]
    pub fn sites(&self) -> usize {
        self.ns * self.nt
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.ns && j < self.nt);
        j * self.ns + i
    }

    /// Site index of the right neighbor, plus whether the s-seam was crossed.
    #[inline]
    pub fn shift_s(&self, i: usize, j: usize) -> (usize, usize, bool) {
        if i + 1 == self.ns {
            (0, j, true)
        } else {
            (i + 1, j, false)
        }
    }

    #[inline]
    pub fn shift_t(&self, i: usize, j: usize) -> (usize, usize) {
        if j + 1 == self.nt {
            (i, 0)
        } else {
            (i, j + 1)
        }
    }

    #[inline]
    pub fn lambda_at(&self, i: usize, j: usize) -> f64 {
        self.lambda[self.idx(i, j)]
    }

    /// lambda^2 at a site index.
    #[inline]
    pub fn weight(&self, idx: usize) -> f64 {
        let l = self.lambda[idx];
        l * l
    }

    pub fn same_grid(&self, other: &TorusGeometry) -> bool {
        self.ns == other.ns && self.nt == other.nt
    }
}

/// Build a torus geometry.
///
/// `lambda` constant 1 gives `vol = ls*lt` up to summation roundoff.
pub fn make_torus(
    ns: usize,
    nt: usize,
    ls: f64,
    lt: f64,
    lambda_spec: &LambdaSpec,
) -> Result<TorusGeometry> {
    if ns < 4 || nt < 4 {
        return Err(VortexError::NonPositiveDimension(ns, nt));
    }
    if !(ls > 0.0) || !(lt > 0.0) {
        return Err(VortexError::ShapeMismatch(format!(
            "side lengths must be positive, got {ls} x {lt}"
        )));
    }
    let lambda = match lambda_spec {
        LambdaSpec::Constant(c) => vec![*c; ns * nt],
        LambdaSpec::PerSite(v) => {
            if v.len() != ns * nt {
                return Err(VortexError::ShapeMismatch(format!(
                    "lambda table has {} entries for {} sites",
                    v.len(),
                    ns * nt
                )));
            }
            v.clone()
        }
    };
    let min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(VortexError::NonPositiveConformalFactor(min));
    }
    let hs = ls / ns as f64;
    let ht = lt / nt as f64;
    let vol = csum(lambda.iter().map(|l| l * l * hs * ht));
    Ok(TorusGeometry {
        ns,
        nt,
        ls,
        lt,
        lambda,
        hs,
        ht,
        vol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_torus_volume() {
        let g = make_torus(16, 16, 1.0, 1.0, &LambdaSpec::Constant(1.0)).unwrap();
        assert_relative_eq!(g.vol, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn rectangle_area() {
        let g = make_torus(16, 16, 2.0, 3.0, &LambdaSpec::Constant(1.0)).unwrap();
        assert_relative_eq!(g.vol, 6.0, max_relative = 1e-14);
    }

    #[test]
    fn conformal_weight() {
        let g = make_torus(8, 8, 1.0, 1.0, &LambdaSpec::Constant(2.0)).unwrap();
        assert_relative_eq!(g.vol, 4.0, max_relative = 1e-14);
    }

    #[test]
    fn rejects_small_grids() {
        assert!(matches!(
            make_torus(3, 16, 1.0, 1.0, &LambdaSpec::Constant(1.0)),
            Err(VortexError::NonPositiveDimension(3, 16))
        ));
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let mut v = vec![1.0; 16];
        v[7] = 0.0;
        assert!(matches!(
            make_torus(4, 4, 1.0, 1.0, &LambdaSpec::PerSite(v)),
            Err(VortexError::NonPositiveConformalFactor(_))
        ));
    }
}
