//! Balancing atomic measures on the 2-sphere by fractional linear
//! transformations parametrized over the open unit ball.
//!
//! The map for eta in B^3 is
//!
//!   phi_eta(x) = [ s x + ((p - 1 - s)/(1 + s)) eta ] / (1 - p),
//!   s = sqrt(1 - |eta|^2),  p = <x, eta>,
//!
//! which is the rational form of the textbook expression with the unit
//! vector eta/|eta| eliminated, so eta -> 0 is manifestly removable.  The
//! inverse is phi_{-eta}: both are time maps of the autonomous field
//! V(y) = eta - <eta,y> y, flowing for opposite parameters (verified
//! numerically by the inverse-identity test).

use crate::error::{Result, VortexError};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Atomic measure on S^2 with positive weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedSphereMeasure {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl WeightedSphereMeasure {
    pub fn new(points: Vec<[f64; 3]>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(VortexError::ShapeMismatch(format!(
                "{} points vs {} weights",
                points.len(),
                weights.len()
            )));
        }
        for p in &points {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if (n - 1.0).abs() > 1e-12 {
                return Err(VortexError::ShapeMismatch(format!(
                    "point off the unit sphere by {:.3e}",
                    (n - 1.0).abs()
                )));
            }
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(VortexError::ShapeMismatch(
                "weights must be strictly positive".into(),
            ));
        }
        Ok(Self { points, weights })
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Octahedron vertices with equal weights (balanced by symmetry).
    pub fn octahedron() -> Self {
        let points = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        Self::new(points, vec![1.0; 6]).expect("valid")
    }
}

/// Balance result: the ball parameter and the residual center of mass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancePoint {
    pub eta: [f64; 3],
    pub residual: f64,
    pub iterations: usize,
}

fn check_eta(eta: &[f64; 3]) -> Result<f64> {
    let m = (eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2]).sqrt();
    if m >= 1.0 {
        return Err(VortexError::EtaOutOfBall(m));
    }
    Ok(m)
}

/// phi_eta(x) on the unit sphere.
pub fn mobius_map(eta: &[f64; 3], x: &[f64; 3]) -> Result<[f64; 3]> {
    let m = check_eta(eta)?;
    let s = (1.0 - m * m).sqrt();
    let p = eta[0] * x[0] + eta[1] * x[1] + eta[2] * x[2];
    let d = 1.0 - p;
    if d < 1e-14 {
        return Err(VortexError::DenominatorBlowup(d));
    }
    let c = (p - 1.0 - s) / (1.0 + s);
    Ok([
        (s * x[0] + c * eta[0]) / d,
        (s * x[1] + c * eta[1]) / d,
        (s * x[2] + c * eta[2]) / d,
    ])
}

/// Jacobian of eta -> phi_eta(x) as a 3x3 matrix (columns d/d eta_k).
pub fn mobius_map_jacobian(eta: &[f64; 3], x: &[f64; 3]) -> Result<Matrix3<f64>> {
    let m = check_eta(eta)?;
    let s = (1.0 - m * m).sqrt();
    let p = eta[0] * x[0] + eta[1] * x[1] + eta[2] * x[2];
    let d = 1.0 - p;
    if d < 1e-14 {
        return Err(VortexError::DenominatorBlowup(d));
    }
    let c = (p - 1.0 - s) / (1.0 + s);
    let xe = Vector3::from_column_slice(x);
    let ee = Vector3::from_column_slice(eta);
    let phi = (s * xe + c * ee) / d;
    let mut jac = Matrix3::zeros();
    for k in 0..3 {
        let ds = -eta[k] / s;
        let dp = x[k];
        let dc = ((dp - ds) * (1.0 + s) - (p - 1.0 - s) * ds) / ((1.0 + s) * (1.0 + s));
        let mut col = (ds * xe + dc * ee) / d;
        col[k] += c / d;
        col += phi * (dp / d);
        jac.set_column(k, &col);
    }
    Ok(jac)
}

/// Stereographic projection from the north pole; the pole itself maps to
/// the tagged point at infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtComplex {
    Finite(num_complex::Complex64),
    Infinity,
}

pub fn stereographic(x: &[f64; 3]) -> ExtComplex {
    let d = 1.0 - x[2];
    if d.abs() < 1e-14 {
        ExtComplex::Infinity
    } else {
        ExtComplex::Finite(num_complex::Complex64::new(x[0] / d, x[1] / d))
    }
}

/// Weighted center of mass of the pulled-back measure,
/// m(eta) = sum w_i phi_eta^{-1}(x_i) / sum w_i with phi_eta^{-1} = phi_{-eta}.
pub fn center_of_mass(eta: &[f64; 3], measure: &WeightedSphereMeasure) -> Result<[f64; 3]> {
    check_eta(eta)?;
    let minus = [-eta[0], -eta[1], -eta[2]];
    let mut acc = [0.0; 3];
    for (p, w) in measure.points.iter().zip(&measure.weights) {
        let y = mobius_map(&minus, p)?;
        acc[0] += w * y[0];
        acc[1] += w * y[1];
        acc[2] += w * y[2];
    }
    let total = measure.total_weight();
    Ok([acc[0] / total, acc[1] / total, acc[2] / total])
}

/// Conformal area factor of phi_eta at x: (s / (1 - <x,eta>))^2.
///
/// Integrates to the full sphere area, so pullback mass is conserved.
pub fn area_factor(eta: &[f64; 3], x: &[f64; 3]) -> Result<f64> {
    let m = check_eta(eta)?;
    let s2 = 1.0 - m * m;
    let p = eta[0] * x[0] + eta[1] * x[1] + eta[2] * x[2];
    let d = 1.0 - p;
    if d < 1e-14 {
        return Err(VortexError::DenominatorBlowup(d));
    }
    Ok(s2 / (d * d))
}

/// Volume-form surrogate center of mass: sample points stay fixed and the
/// weights transform by the conformal area factor of phi_eta, the
/// discretization used when atoms stand in for a smooth density.
///
/// Measures supported on the fixed points +-eta/|eta| never move under the
/// moved-atom pullback ([`center_of_mass`]), so axis-supported cases (the
/// antipodal two-atom balance) are meaningful only in this semantics.
pub fn density_center_of_mass(
    eta: &[f64; 3],
    measure: &WeightedSphereMeasure,
) -> Result<[f64; 3]> {
    check_eta(eta)?;
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (p, w) in measure.points.iter().zip(&measure.weights) {
        let jw = w * area_factor(eta, p)?;
        total += jw;
        acc[0] += jw * p[0];
        acc[1] += jw * p[1];
        acc[2] += jw * p[2];
    }
    Ok([acc[0] / total, acc[1] / total, acc[2] / total])
}

/// Balance in the volume-form surrogate semantics (finite-difference
/// Jacobian; the map is cheap and smooth inside the ball).
pub fn balance_density(
    measure: &WeightedSphereMeasure,
    tol: f64,
    opts: &BalanceOptions,
) -> Result<BalancePoint> {
    if !(tol > 0.0) {
        return Err(VortexError::ShapeMismatch("tol must be positive".into()));
    }
    let clamp = |eta: [f64; 3]| -> [f64; 3] {
        let m = (eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2]).sqrt();
        let cap = 1.0 - opts.ball_margin;
        if m > cap {
            [eta[0] * cap / m, eta[1] * cap / m, eta[2] * cap / m]
        } else {
            eta
        }
    };
    let mut eta = clamp(opts.initial_eta);
    let mut nu = 1e-3;
    let mut mval = Vector3::from_column_slice(&density_center_of_mass(&eta, measure)?);
    for iterations in 1..=opts.max_iters {
        let rn = mval.norm();
        if rn <= tol {
            return Ok(BalancePoint {
                eta,
                residual: rn,
                iterations,
            });
        }
        let h = 1e-7;
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let mut ep = eta;
            ep[k] += h;
            let mut em = eta;
            em[k] -= h;
            let fp = density_center_of_mass(&clamp(ep), measure)?;
            let fm = density_center_of_mass(&clamp(em), measure)?;
            for row in 0..3 {
                jac[(row, k)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        let jtj = jac.transpose() * jac;
        let jtm = jac.transpose() * mval;
        let mut improved = false;
        for _ in 0..40 {
            let lhs = jtj + Matrix3::identity() * nu;
            let Some(inv) = lhs.try_inverse() else {
                nu *= 4.0;
                continue;
            };
            let delta = -(inv * jtm);
            let trial = clamp([eta[0] + delta[0], eta[1] + delta[1], eta[2] + delta[2]]);
            let trial_m = Vector3::from_column_slice(&density_center_of_mass(&trial, measure)?);
            if trial_m.norm() < rn {
                eta = trial;
                mval = trial_m;
                nu = (nu / 3.0).max(1e-14);
                improved = true;
                break;
            }
            nu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    Err(VortexError::NoConvergence(format!(
        "density balance stalled at residual {:.3e}",
        mval.norm()
    )))
}

fn com_jacobian(eta: &[f64; 3], measure: &WeightedSphereMeasure) -> Result<Matrix3<f64>> {
    let minus = [-eta[0], -eta[1], -eta[2]];
    let mut jac = Matrix3::zeros();
    for (p, w) in measure.points.iter().zip(&measure.weights) {
        // d/d eta phi_{-eta}(p) = -(d/du phi_u(p))|_{u=-eta}
        jac -= mobius_map_jacobian(&minus, p)? * *w;
    }
    Ok(jac / measure.total_weight())
}

/// Options for `balance`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub max_iters: usize,
    /// Keep |eta| <= 1 - ball_margin.
    pub ball_margin: f64,
    pub initial_eta: [f64; 3],
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            ball_margin: 1e-6,
            initial_eta: [0.0; 3],
        }
    }
}

/// Find eta with |m(eta)| <= tol by damped Newton (Levenberg-Marquardt on
/// |m|^2) with a shrink-inward fallback; deterministic for fixed options.
pub fn balance(
    measure: &WeightedSphereMeasure,
    tol: f64,
    opts: &BalanceOptions,
) -> Result<BalancePoint> {
    if !(tol > 0.0) {
        return Err(VortexError::ShapeMismatch("tol must be positive".into()));
    }
    let starts: Vec<[f64; 3]> = vec![
        opts.initial_eta,
        [0.0; 3],
        [0.5, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.0, 0.5],
        [-0.3, -0.3, -0.3],
    ];
    let mut best: Option<BalancePoint> = None;
    for start in starts {
        match lm_balance(measure, tol, opts, &start) {
            Ok(bp) if bp.residual <= tol => return Ok(bp),
            Ok(bp) => {
                if best.as_ref().map_or(true, |b| bp.residual < b.residual) {
                    best = Some(bp);
                }
            }
            Err(_) => {}
        }
    }
    let bp = best.ok_or_else(|| VortexError::NoConvergence("balance produced no iterate".into()))?;
    Err(VortexError::NoConvergence(format!(
        "balance residual {:.3e} above tol {:.1e} at eta {:?}",
        bp.residual, tol, bp.eta
    )))
}

fn lm_balance(
    measure: &WeightedSphereMeasure,
    tol: f64,
    opts: &BalanceOptions,
    start: &[f64; 3],
) -> Result<BalancePoint> {
    let clamp = |eta: [f64; 3]| -> [f64; 3] {
        let m = (eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2]).sqrt();
        let cap = 1.0 - opts.ball_margin;
        if m > cap {
            [eta[0] * cap / m, eta[1] * cap / m, eta[2] * cap / m]
        } else {
            eta
        }
    };
    let mut eta = clamp(*start);
    let mut mval = Vector3::from_column_slice(&center_of_mass(&eta, measure)?);
    let mut nu = 1e-3;
    let mut iterations = 0usize;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let rn = mval.norm();
        if rn <= tol {
            return Ok(BalancePoint {
                eta,
                residual: rn,
                iterations,
            });
        }
        let jac = com_jacobian(&eta, measure)?;
        let jtj = jac.transpose() * jac;
        let jtm = jac.transpose() * mval;
        let mut improved = false;
        for _ in 0..40 {
            let lhs = jtj + Matrix3::identity() * nu;
            let Some(inv) = lhs.try_inverse() else {
                nu *= 4.0;
                continue;
            };
            let delta = -(inv * jtm);
            let trial = clamp([eta[0] + delta[0], eta[1] + delta[1], eta[2] + delta[2]]);
            let trial_m = Vector3::from_column_slice(&center_of_mass(&trial, measure)?);
            if trial_m.norm() < rn {
                eta = trial;
                mval = trial_m;
                nu = (nu / 3.0).max(1e-14);
                improved = true;
                break;
            }
            nu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    Ok(BalancePoint {
        eta,
        residual: mval.norm(),
        iterations,
    })
}

/// Report from the monotone-flow verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReport {
    pub values: Vec<f64>,
    pub min_increment: f64,
    pub monotone: bool,
}

/// Verify that t -> <eta, int iota phi_t^* sigma> is nondecreasing for the
/// interpolating flow phi_t = phi_{lambda(t) eta}, lambda(t) = tanh(|eta| t)/|eta|,
/// integrated from t = 0 to lambda = 1.
pub fn flow_monotonicity_check(
    measure: &WeightedSphereMeasure,
    eta: &[f64; 3],
    steps: usize,
) -> Result<FlowReport> {
    let m = check_eta(eta)?;
    let total = measure.total_weight();
    if m < 1e-15 || steps == 0 {
        return Ok(FlowReport {
            values: vec![0.0; steps + 1],
            min_increment: 0.0,
            monotone: true,
        });
    }
    // lambda(T) = 1  <=>  T = artanh(|eta|)/|eta|.
    let t_final = (0.5 * ((1.0 + m) / (1.0 - m)).ln()) / m;
    let mut values = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = t_final * k as f64 / steps as f64;
        let lam = (m * t).tanh() / m;
        let scaled = [lam * eta[0], lam * eta[1], lam * eta[2]];
        let com = center_of_mass(&scaled, measure)?;
        values.push(total * (eta[0] * com[0] + eta[1] * com[1] + eta[2] * com[2]));
    }
    let min_increment = values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Ok(FlowReport {
        values,
        min_increment,
        monotone: min_increment >= -1e-10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 && n <= 1.0 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    fn rand_eta(rng: &mut ChaCha8Rng, max_norm: f64) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n < max_norm {
                return v;
            }
        }
    }

    #[test]
    fn identity_at_origin() {
        let x = [0.3, -0.4, (1.0f64 - 0.25).sqrt()];
        let y = mobius_map(&[0.0; 3], &x).unwrap();
        for k in 0..3 {
            assert!((x[k] - y[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_points_on_axis() {
        let eta = [0.3f64, 0.2, -0.5];
        let m = (eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2]).sqrt();
        let plus = [eta[0] / m, eta[1] / m, eta[2] / m];
        let minus = [-plus[0], -plus[1], -plus[2]];
        let yp = mobius_map(&eta, &plus).unwrap();
        let ym = mobius_map(&eta, &minus).unwrap();
        for k in 0..3 {
            assert!((yp[k] - plus[k]).abs() < 1e-12);
            assert!((ym[k] - minus[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn preserves_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let eta = rand_eta(&mut rng, 0.97);
            let x = rand_unit(&mut rng);
            if let Ok(y) = mobius_map(&eta, &x) {
                let n = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-12, "norm {n}");
            }
        }
    }

    #[test]
    fn inverse_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let eta = rand_eta(&mut rng, 0.95);
            let x = rand_unit(&mut rng);
            let y = mobius_map(&eta, &x).unwrap();
            let minus = [-eta[0], -eta[1], -eta[2]];
            let back = mobius_map(&minus, &y).unwrap();
            let err = ((back[0] - x[0]).powi(2)
                + (back[1] - x[1]).powi(2)
                + (back[2] - x[2]).powi(2))
            .sqrt();
            assert!(err <= 1e-10, "inverse error {err}");
        }
    }

    #[test]
    fn rotation_equivariance() {
        use nalgebra::Rotation3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let axis = rand_unit(&mut rng);
            let angle = rng.gen_range(-3.0..3.0);
            let rot = Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(Vector3::from_column_slice(&axis)),
                angle,
            );
            let eta = rand_eta(&mut rng, 0.9);
            let x = rand_unit(&mut rng);
            let reta = rot * Vector3::from_column_slice(&eta);
            let rx = rot * Vector3::from_column_slice(&x);
            let lhs = mobius_map(&[reta[0], reta[1], reta[2]], &[rx[0], rx[1], rx[2]]).unwrap();
            let phi = mobius_map(&eta, &x).unwrap();
            let rhs = rot * Vector3::from_column_slice(&phi);
            for k in 0..3 {
                assert!((lhs[k] - rhs[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let eta = rand_eta(&mut rng, 0.9);
            let x = rand_unit(&mut rng);
            let jac = mobius_map_jacobian(&eta, &x).unwrap();
            let h = 1e-7;
            for k in 0..3 {
                let mut ep = eta;
                ep[k] += h;
                let mut em = eta;
                em[k] -= h;
                let yp = mobius_map(&ep, &x).unwrap();
                let ym = mobius_map(&em, &x).unwrap();
                for row in 0..3 {
                    let fd = (yp[row] - ym[row]) / (2.0 * h);
                    assert!(
                        (jac[(row, k)] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                        "jac ({row},{k}) {} vs {}",
                        jac[(row, k)],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn stereographic_values() {
        use num_complex::Complex64;
        assert_eq!(
            stereographic(&[0.0, 0.0, -1.0]),
            ExtComplex::Finite(Complex64::new(0.0, 0.0))
        );
        assert_eq!(stereographic(&[0.0, 0.0, 1.0]), ExtComplex::Infinity);
        assert_eq!(
            stereographic(&[1.0, 0.0, 0.0]),
            ExtComplex::Finite(Complex64::new(1.0, 0.0))
        );
    }

    #[test]
    fn octahedron_balanced_at_origin() {
        let m = WeightedSphereMeasure::octahedron();
        let com = center_of_mass(&[0.0; 3], &m).unwrap();
        assert!(com.iter().all(|c| c.abs() < 1e-15));
        let bp = balance(&m, 1e-10, &BalanceOptions::default()).unwrap();
        let n = (bp.eta[0].powi(2) + bp.eta[1].powi(2) + bp.eta[2].powi(2)).sqrt();
        assert!(n <= 1e-10, "eta norm {n}");
    }

    #[test]
    fn single_atom_pulls_to_point() {
        let p = [0.6, 0.0, 0.8];
        let m = WeightedSphereMeasure::new(vec![p], vec![2.0]).unwrap();
        let eta = [0.1, -0.2, 0.3];
        let com = center_of_mass(&eta, &m).unwrap();
        let n = (com[0] * com[0] + com[1] * com[1] + com[2] * com[2]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let minus = [-eta[0], -eta[1], -eta[2]];
        let expect = mobius_map(&minus, &p).unwrap();
        for k in 0..3 {
            assert!((com[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_limit_of_center_of_mass() {
        // |eta| -> 1 along zeta pulls the measure toward zeta.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<[f64; 3]> = (0..50).map(|_| rand_unit(&mut rng)).collect();
        let weights = vec![1.0; 50];
        let m = WeightedSphereMeasure::new(points, weights).unwrap();
        let zeta = [0.0, 0.6, 0.8];
        let eta = [0.999 * zeta[0], 0.999 * zeta[1], 0.999 * zeta[2]];
        let com = center_of_mass(&eta, &m).unwrap();
        let err = ((com[0] - zeta[0]).powi(2)
            + (com[1] - zeta[1]).powi(2)
            + (com[2] - zeta[2]).powi(2))
        .sqrt();
        assert!(err < 0.05, "boundary limit error {err}");
    }

    #[test]
    fn antipodal_atoms_sit_at_fixed_points() {
        // Atoms at the poles are fixed points of every axis map, so the
        // moved-atom center of mass is constant in q and the measure is
        // unbalanceable in that semantics (|2u1 + u2| >= 1 for unit u's).
        let measure = WeightedSphereMeasure::new(
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            vec![2.0, 1.0],
        )
        .unwrap();
        for q in [-0.7, -0.2, 0.0, 0.3, 0.9] {
            let com = center_of_mass(&[0.0, 0.0, q], &measure).unwrap();
            assert!((com[2] - 1.0 / 3.0).abs() < 1e-14, "com_z {}", com[2]);
        }
    }

    #[test]
    fn antipodal_two_atom_matches_bisection_oracle() {
        // Volume-form surrogate: weights transform by the conformal area
        // factor, so eta = (0,0,q) balances when 2 (1+q)^2 = (1-q)^2.
        // Closed form q* = -(3 - 2 sqrt(2)); cross-checked by bisection.
        let measure = WeightedSphereMeasure::new(
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            vec![2.0, 1.0],
        )
        .unwrap();
        let f = |q: f64| -> f64 {
            let com = density_center_of_mass(&[0.0, 0.0, q], &measure).unwrap();
            com[2]
        };
        let (mut lo, mut hi) = (-0.999999, 0.0);
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let q_oracle = 0.5 * (lo + hi);
        let closed_form = -(3.0 - 2.0 * 2.0f64.sqrt());
        assert!((q_oracle - closed_form).abs() < 1e-12);
        let bp = balance_density(&measure, 1e-12, &BalanceOptions::default()).unwrap();
        assert!(bp.eta[0].abs() < 1e-10 && bp.eta[1].abs() < 1e-10);
        assert!(
            (bp.eta[2] - q_oracle).abs() <= 1e-10,
            "eta_z {} vs oracle {}",
            bp.eta[2],
            q_oracle
        );
    }

    #[test]
    fn random_positive_atoms_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<[f64; 3]> = (0..100).map(|_| rand_unit(&mut rng)).collect();
        let weights: Vec<f64> = (0..100).map(|_| rng.gen_range(0.1..3.0)).collect();
        let m = WeightedSphereMeasure::new(points, weights).unwrap();
        let bp = balance(&m, 1e-10, &BalanceOptions::default()).unwrap();
        assert!(bp.residual <= 1e-10);
        let n = (bp.eta[0].powi(2) + bp.eta[1].powi(2) + bp.eta[2].powi(2)).sqrt();
        assert!(n < 1.0);
    }

    #[test]
    fn flow_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<[f64; 3]> = (0..40).map(|_| rand_unit(&mut rng)).collect();
        let weights: Vec<f64> = (0..40).map(|_| rng.gen_range(0.2..2.0)).collect();
        let m = WeightedSphereMeasure::new(points, weights).unwrap();
        let eta = [0.25, -0.3, 0.25];
        let rep = flow_monotonicity_check(&m, &eta, 100).unwrap();
        assert!(rep.monotone, "min increment {}", rep.min_increment);
        assert!(rep.min_increment >= -1e-10);
        // Strict increase for measures off the +-eta axis.
        assert!(rep.min_increment > 0.0);

        let zero = flow_monotonicity_check(&m, &[0.0; 3], 10).unwrap();
        assert!(zero.monotone && zero.min_increment == 0.0);
    }

    #[test]
    fn dense_cloud_uniqueness_up_to_rotation() {
        // Quasi-uniform positive cloud, smoothly perturbed; two balance runs
        // from different starts must induce maps differing by a rotation.
        let n = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for k in 0..n {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let th = golden * k as f64;
            let p = [rho * th.cos(), rho * th.sin(), z];
            points.push(p);
            weights.push(1.0 + 0.4 * p[0] + 0.25 * p[1] * p[2]);
        }
        let m = WeightedSphereMeasure::new(points, weights).unwrap();
        let mut o1 = BalanceOptions::default();
        o1.initial_eta = [0.4, 0.1, -0.2];
        let mut o2 = BalanceOptions::default();
        o2.initial_eta = [-0.5, 0.3, 0.4];
        let b1 = balance(&m, 1e-12, &o1).unwrap();
        let b2 = balance(&m, 1e-12, &o2).unwrap();

        // Sample maps on a coarse grid and align by the optimal rotation.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let samples: Vec<[f64; 3]> = (0..200).map(|_| rand_unit(&mut rng)).collect();
        let mut cross = Matrix3::zeros();
        let mut pairs = Vec::new();
        for y in &samples {
            let u = mobius_map(&b1.eta, y).unwrap();
            let v = mobius_map(&b2.eta, y).unwrap();
            let uv = Vector3::from_column_slice(&u);
            let vv = Vector3::from_column_slice(&v);
            cross += vv * uv.transpose();
            pairs.push((uv, vv));
        }
        let svd = cross.svd(true, true);
        let (u_m, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = Matrix3::identity();
        if (u_m * v_t).determinant() < 0.0 {
            s[(2, 2)] = -1.0;
        }
        let rot = u_m * s * v_t;
        let mut worst = 0.0f64;
        for (uv, vv) in pairs {
            worst = worst.max((vv - rot * uv).norm());
        }
        assert!(worst <= 1e-6, "rotation alignment discrepancy {worst}");
    }

    #[test]
    fn rejects_bad_measures_and_eta() {
        assert!(WeightedSphereMeasure::new(vec![[2.0, 0.0, 0.0]], vec![1.0]).is_err());
        assert!(WeightedSphereMeasure::new(vec![[1.0, 0.0, 0.0]], vec![0.0]).is_err());
        assert!(matches!(
            mobius_map(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]),
            Err(VortexError::EtaOutOfBall(_))
        ));
    }
}
