//! Linear torus actions on C^N.
//!
//! The Lie algebra of the r-torus is identified with R^r once and for all
//! (Euclidean inner product, hatted real quantities); see
//! `docs/conventions.md`.  Generator j acts on coordinate nu with integer
//! weight `w[nu][j]`, infinitesimally `z_nu -> i (W xi)_nu z_nu`, and the
//! shifted moment map is
//!
//!   muhat_j(z) = 1/2 sum_nu W[nu][j] |z_nu|^2 - tau_j.

use crate::error::{Result, VortexError};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Integer weight matrix and central shift defining the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    /// Number of complex coordinates.
    pub n: usize,
    /// Number of torus generators.
    pub r: usize,
    /// Row-major N x r integer weights, `w[nu*r + j]`.
    pub w: Vec<i64>,
    /// Central shift, one entry per generator.
    pub tau: Vec<f64>,
    /// Half-space properness certificate found at construction, if any.
    pub certificate: Option<Vec<f64>>,
}

impl WeightModel {
    pub fn new(n: usize, r: usize, w: Vec<i64>, tau: Vec<f64>) -> Result<Self> {
        if w.len() != n * r || tau.len() != r || n == 0 || r == 0 {
            return Err(VortexError::ShapeMismatch(format!(
                "weight model needs {}x{} weights and {} shifts, got {} and {}",
                n,
                r,
                r,
                w.len(),
                tau.len()
            )));
        }
        for j in 0..r {
            if (0..n).all(|nu| w[nu * r + j] == 0) {
                return Err(VortexError::ShapeMismatch(format!(
                    "generator {j} acts trivially (all-zero weight column)"
                )));
            }
        }
        let certificate = half_space_certificate(n, r, &w);
        Ok(Self {
            n,
            r,
            w,
            tau,
            certificate,
        })
    }

    /// Single-weight vortex model W=[w], one generator.
    pub fn vortex(weight: i64, tau: f64) -> Self {
        Self::new(1, 1, vec![weight], vec![tau]).expect("valid by construction")
    }

    #[inline]
    pub fn weight(&self, nu: usize, j: usize) -> i64 {
        self.w[nu * self.r + j]
    }

    /// (W xi)_nu for a real generator vector xi.
    #[inline]
    pub fn w_dot(&self, nu: usize, xi: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.r {
            acc += self.weight(nu, j) as f64 * xi[j];
        }
        acc
    }
}

/// muhat(z) for a single target point z in C^N.
pub fn moment_map(model: &WeightModel, z: &[Complex64]) -> Result<Vec<f64>> {
    if z.len() != model.n {
        return Err(VortexError::ShapeMismatch(format!(
            "moment_map expects {} coordinates, got {}",
            model.n,
            z.len()
        )));
    }
    let mut mu = vec![0.0; model.r];
    for (j, m) in mu.iter_mut().enumerate() {
        let mut acc = 0.0;
        for nu in 0..model.n {
            acc += model.weight(nu, j) as f64 * z[nu].norm_sqr();
        }
        *m = 0.5 * acc - model.tau[j];
    }
    Ok(mu)
}

/// X_xi(z)_nu = i (W xi)_nu z_nu.
pub fn infinitesimal_action(
    model: &WeightModel,
    xi: &[f64],
    z: &[Complex64],
) -> Result<Vec<Complex64>> {
    if z.len() != model.n || xi.len() != model.r {
        return Err(VortexError::ShapeMismatch(
            "infinitesimal_action dimensions".into(),
        ));
    }
    Ok((0..model.n)
        .map(|nu| Complex64::new(0.0, model.w_dot(nu, xi)) * z[nu])
        .collect())
}

/// Both sides of the central-element identity
/// `sum_nu (W muhat)_nu |z_nu|^2 = 2 <muhat, muhat + tau>` and their gap.
///
/// The left side is `<z, rho'(mu(z)) J z>` written in hatted coordinates;
/// see `docs/conventions.md` for the translation.
pub fn sw_identity_check(model: &WeightModel, z: &[Complex64]) -> (f64, f64, f64) {
    let mu = moment_map(model, z).expect("caller passes matching shapes");
    let mut lhs = 0.0;
    for nu in 0..model.n {
        lhs += model.w_dot(nu, &mu) * z[nu].norm_sqr();
    }
    let mut rhs = 0.0;
    for j in 0..model.r {
        rhs += 2.0 * mu[j] * (mu[j] + model.tau[j]);
    }
    (lhs, rhs, (lhs - rhs).abs())
}

/// True iff some xi in R^r has (W xi)_nu > 0 for every nu, which makes
/// |muhat(z)| -> infinity as |z| -> infinity.
pub fn properness_check(model: &WeightModel) -> bool {
    model.certificate.is_some()
}

/// Search for xi with (W xi)_nu > 0 for all nu.
///
/// For r = 1 this is a sign check.  For r = 2 the feasible cone is an
/// intersection of half-planes; it is nonempty iff some direction strictly
/// inside all of them exists, decided exactly by scanning the row normals.
/// For r > 2 a projected cyclic ascent on the worst row is used (documented
/// LP-style feasibility routine; desk-scale weight matrices only).
fn half_space_certificate(n: usize, r: usize, w: &[i64]) -> Option<Vec<f64>> {
    let row = |nu: usize| -> Vec<f64> { (0..r).map(|j| w[nu * r + j] as f64).collect() };
    let eval = |xi: &[f64], nu: usize| -> f64 {
        (0..r).map(|j| w[nu * r + j] as f64 * xi[j]).sum::<f64>()
    };
    match r {
        1 => {
            let all_pos = (0..n).all(|nu| w[nu] > 0);
            let all_neg = (0..n).all(|nu| w[nu] < 0);
            if all_pos {
                Some(vec![1.0])
            } else if all_neg {
                Some(vec![-1.0])
            } else {
                None
            }
        }
        2 => {
            // Feasibility of an open cone in the plane: test the bisectors
            // of every pair of row normals plus the normals themselves.
            let mut candidates: Vec<[f64; 2]> = Vec::new();
            for nu in 0..n {
                let a = row(nu);
                let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
                if norm > 0.0 {
                    candidates.push([a[0] / norm, a[1] / norm]);
                }
            }
            for p in 0..candidates.len() {
                for q in (p + 1)..candidates.len() {
                    let m = [
                        candidates[p][0] + candidates[q][0],
                        candidates[p][1] + candidates[q][1],
                    ];
                    let norm = (m[0] * m[0] + m[1] * m[1]).sqrt();
                    if norm > 1e-12 {
                        candidates.push([m[0] / norm, m[1] / norm]);
                    }
                }
            }
            for c in &candidates {
                let xi = vec![c[0], c[1]];
                if (0..n).all(|nu| eval(&xi, nu) > 1e-9) {
                    return Some(xi);
                }
            }
            None
        }
        _ => {
            // Cyclic subgradient ascent on min_nu (W xi)_nu over the unit ball.
            let mut xi = vec![0.0; r];
            for nu in 0..n {
                let a = row(nu);
                for j in 0..r {
                    xi[j] += a[j];
                }
            }
            normalize(&mut xi);
            for _ in 0..200 * n.max(r) {
                let (worst, val) = (0..n)
                    .map(|nu| (nu, eval(&xi, nu)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("n > 0");
                if val > 1e-9 {
                    return Some(xi);
                }
                let a = row(worst);
                let step = 0.5 / (1.0 + norm2(&a));
                for j in 0..r {
                    xi[j] += step * a[j];
                }
                normalize(&mut xi);
            }
            None
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn moment_map_values() {
        let m = WeightModel::vortex(1, 2.0 * std::f64::consts::PI);
        let mu = moment_map(&m, &[c(0.0, 0.0)]).unwrap();
        assert!((mu[0] + 2.0 * std::f64::consts::PI).abs() < 1e-15);

        let tau = 0.7;
        let m = WeightModel::vortex(1, tau);
        let mu = moment_map(&m, &[c((2.0 * tau).sqrt(), 0.0)]).unwrap();
        assert!(mu[0].abs() < 1e-14);

        let cp1 = WeightModel::new(2, 1, vec![1, 1], vec![1.0]).unwrap();
        let mu = moment_map(&cp1, &[c(1.0, 0.0), c(1.0, 0.0)]).unwrap();
        assert!(mu[0].abs() < 1e-15);
    }

    #[test]
    fn action_is_linear_and_matches() {
        let m = WeightModel::vortex(1, 0.0);
        let x = infinitesimal_action(&m, &[1.0], &[c(1.0, 0.0)]).unwrap();
        assert!((x[0] - c(0.0, 1.0)).norm() < 1e-15);
        let zero = infinitesimal_action(&m, &[0.0], &[c(3.0, -2.0)]).unwrap();
        assert_eq!(zero[0], c(0.0, 0.0));
    }

    /// Defining property of the moment map, finite differences:
    /// d<muhat,xi>(v) = omega(v, X_xi(z)) with omega(a,b) = Im(conj(a) b).
    #[test]
    fn moment_map_defining_property_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = WeightModel::new(3, 2, vec![1, 0, 2, -1, 1, 3], vec![0.3, -0.2]).unwrap();
        for _ in 0..50 {
            let z: Vec<Complex64> = (0..3)
                .map(|_| c(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let v: Vec<Complex64> = (0..3)
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let xi = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let h = 1e-6;
            let zp: Vec<Complex64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let zm: Vec<Complex64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let pair = |mu: Vec<f64>| mu[0] * xi[0] + mu[1] * xi[1];
            let fd = (pair(moment_map(&model, &zp).unwrap())
                - pair(moment_map(&model, &zm).unwrap()))
                / (2.0 * h);
            let xz = infinitesimal_action(&model, &xi, &z).unwrap();
            let omega: f64 = v.iter().zip(&xz).map(|(a, b)| (a.conj() * b).im).sum();
            assert!(
                (fd - omega).abs() < 1e-7 * (1.0 + fd.abs()),
                "fd {fd} vs omega {omega}"
            );
        }
    }

    /// omega(X_xi, X_eta) = 0 for the abelian action.
    #[test]
    fn abelian_pairing_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = WeightModel::new(3, 2, vec![1, 2, -1, 1, 0, 1], vec![0.0, 0.0]).unwrap();
        for _ in 0..20 {
            let z: Vec<Complex64> = (0..3)
                .map(|_| c(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let xi = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let eta = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let a = infinitesimal_action(&model, &xi, &z).unwrap();
            let b = infinitesimal_action(&model, &eta, &z).unwrap();
            let omega: f64 = a.iter().zip(&b).map(|(p, q)| (p.conj() * q).im).sum();
            assert!(omega.abs() < 1e-13);
        }
    }

    #[test]
    fn sw_identity_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Simple vortex model.
        let m = WeightModel::vortex(1, 1.0);
        for _ in 0..200 {
            let z = [c(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))];
            let (_, _, gap) = sw_identity_check(&m, &z);
            assert!(gap <= 1e-12 * 1e4);
        }
        // N=3, r=2, random integer weights.
        for _ in 0..200 {
            let w: Vec<i64> = (0..6).map(|_| rng.gen_range(-3..4)).collect();
            if (0..2).any(|j| (0..3).all(|nu| w[nu * 2 + j] == 0)) {
                continue;
            }
            let model =
                WeightModel::new(3, 2, w, vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                    .unwrap();
            let z: Vec<Complex64> = (0..3)
                .map(|_| c(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
                .collect();
            let (lhs, rhs, gap) = sw_identity_check(&model, &z);
            assert!(
                gap <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())),
                "gap {gap} lhs {lhs}"
            );
        }
    }

    #[test]
    fn sw_identity_at_origin() {
        let m = WeightModel::vortex(1, 3.0);
        let (lhs, rhs, gap) = sw_identity_check(&m, &[c(0.0, 0.0)]);
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn properness_cases() {
        assert!(properness_check(&WeightModel::vortex(1, 0.0)));
        let opposed = WeightModel::new(2, 1, vec![1, -1], vec![0.0]).unwrap();
        assert!(!properness_check(&opposed));
        let cp1 = WeightModel::new(2, 1, vec![1, 1], vec![0.0]).unwrap();
        assert!(properness_check(&cp1));
        // r=2 feasible cone.
        let m2 = WeightModel::new(2, 2, vec![1, 0, 0, 1], vec![0.0; 2]).unwrap();
        assert!(properness_check(&m2));
        // r=2 infeasible: rows (1,0) and (-1,0).
        let m3 = WeightModel::new(2, 2, vec![1, 0, -1, 1], vec![0.0; 2]).unwrap();
        // (W xi) = (xi_0, -xi_0 + xi_1): feasible with xi = (1, 2).
        assert!(properness_check(&m3));
        let m4 = WeightModel::new(2, 2, vec![1, 1, -1, -1], vec![0.0; 2]).unwrap();
        assert!(!properness_check(&m4));
    }
}
