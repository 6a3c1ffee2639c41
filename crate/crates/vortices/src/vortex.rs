//! Residuals, energy, the exact Bogomolny decomposition, the topological
//! pairing, the compactness bound, and zero counting.
//!
//! Every term is co-located at sites: the same forward differences
//! (D_s z, D_t z), site-averaged curvature, and muhat enter the energy, the
//! residuals, and the pairing, so the per-site algebraic identity
//!
//!   e_total = e_dbar + e_resid + e_pair
//!
//! holds to roundoff at every state, not just at solutions.

use crate::error::{Result, VortexError};
use crate::field::{cov_diff, curvature, gauge_transform, plaq_to_site, LinkField, SiteField};
use crate::geometry::TorusGeometry;
use crate::sum::NeumaierSum;
use crate::target::{moment_map, properness_check, WeightModel};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// The unknown of all solves: a section, a connection, and the scale eps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VortexState {
    pub z: SiteField,
    pub a: LinkField,
    pub epsilon: f64,
}

impl VortexState {
    pub fn new(z: SiteField, a: LinkField, epsilon: f64) -> Result<Self> {
        if z.ns != a.ns || z.nt != a.nt {
            return Err(VortexError::GeometryMismatch(format!(
                "section is {}x{}, connection is {}x{}",
                z.ns, z.nt, a.ns, a.nt
            )));
        }
        if !(epsilon > 0.0) {
            return Err(VortexError::ShapeMismatch(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { z, a, epsilon })
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.a.is_finite() && self.epsilon.is_finite()
    }
}

/// The four terms of the energy identity and the identity gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e: f64,
    pub dbar2: f64,
    pub resid2: f64,
    pub pairing: f64,
    pub identity_gap: f64,
}

/// Per-site co-located samples shared by all energy-family routines.
struct Samples {
    ds: Vec<Complex64>,
    dt: Vec<Complex64>,
    /// Site-averaged curvature, r per site.
    f_site: Vec<f64>,
    /// muhat(z) at sites, r per site.
    mu: Vec<f64>,
}

fn samples(geom: &TorusGeometry, state: &VortexState, model: &WeightModel) -> Result<Samples> {
    let (ds, dt) = cov_diff(geom, &state.a, model, &state.z)?;
    let f_plaq = curvature(geom, &state.a)?;
    let f_site = plaq_to_site(geom, &f_plaq, model.r);
    let sites = geom.sites();
    let mut mu = vec![0.0; sites * model.r];
    for site in 0..sites {
        let zs = &state.z.z[site * model.n..(site + 1) * model.n];
        let m = moment_map(model, zs)?;
        mu[site * model.r..(site + 1) * model.r].copy_from_slice(&m);
    }
    Ok(Samples { ds, dt, f_site, mu })
}

/// First-order residuals: (dbar_A z, lambda^-2 fhat + eps^-2 muhat) at sites.
pub fn residual(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
) -> Result<(SiteField, Vec<f64>)> {
    let s = samples(geom, state, model)?;
    let i = Complex64::new(0.0, 1.0);
    let res1 = SiteField {
        ns: geom.ns,
        nt: geom.nt,
        n: model.n,
        z: s.ds
            .iter()
            .zip(&s.dt)
            .map(|(a, b)| 0.5 * (a + i * b))
            .collect(),
    };
    let inv_e2 = 1.0 / (state.epsilon * state.epsilon);
    let mut res2 = vec![0.0; geom.sites() * model.r];
    for site in 0..geom.sites() {
        let w = geom.weight(site);
        for k in 0..model.r {
            res2[site * model.r + k] =
                s.f_site[site * model.r + k] / w + inv_e2 * s.mu[site * model.r + k];
        }
    }
    Ok((res1, res2))
}

/// L2 norm squared of both residual components, with volume weights.
///
/// Equals dbar2 + resid2 of [`energy_identity`] (same samples, same weights).
pub fn residual_energy(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
) -> Result<f64> {
    let b = energy_identity(geom, state, model)?;
    Ok(b.dbar2 + b.resid2)
}

/// E_eps = 1/2 sum (|D_s z|^2 + |D_t z|^2 + eps^2 lambda^-2 fhat^2
///                  + eps^-2 lambda^2 muhat^2) hs ht.
pub fn energy(geom: &TorusGeometry, state: &VortexState, model: &WeightModel) -> Result<f64> {
    Ok(energy_identity(geom, state, model)?.e)
}

/// All four terms of the decomposition, computed from shared samples.
pub fn energy_identity(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
) -> Result<EnergyBreakdown> {
    let s = samples(geom, state, model)?;
    let area = geom.hs * geom.ht;
    let e2 = state.epsilon * state.epsilon;
    let i = Complex64::new(0.0, 1.0);
    let (mut se, mut sd, mut sr, mut sp) = (
        NeumaierSum::new(),
        NeumaierSum::new(),
        NeumaierSum::new(),
        NeumaierSum::new(),
    );
    for site in 0..geom.sites() {
        let w = geom.weight(site);
        let mut grad2 = 0.0;
        let mut dbar = 0.0;
        let mut omega = 0.0;
        for nu in 0..model.n {
            let a = s.ds[site * model.n + nu];
            let b = s.dt[site * model.n + nu];
            grad2 += a.norm_sqr() + b.norm_sqr();
            dbar += 0.5 * (a + i * b).norm_sqr();
            omega += (a.conj() * b).im;
        }
        let mut f2 = 0.0;
        let mut mu2 = 0.0;
        let mut fmu = 0.0;
        let mut r2 = 0.0;
        for k in 0..model.r {
            let f = s.f_site[site * model.r + k];
            let m = s.mu[site * model.r + k];
            f2 += f * f;
            mu2 += m * m;
            fmu += f * m;
            let res = f / w + m / e2;
            r2 += res * res;
        }
        se.add(area * (0.5 * grad2 + 0.5 * e2 * f2 / w + 0.5 * mu2 * w / e2));
        sd.add(area * dbar);
        sr.add(area * 0.5 * e2 * w * r2);
        sp.add(area * (omega - fmu));
    }
    let e = se.value();
    let dbar2 = sd.value();
    let resid2 = sr.value();
    let pairing = sp.value();
    let identity_gap = (e - dbar2 - resid2 - pairing).abs();
    Ok(EnergyBreakdown {
        e,
        dbar2,
        resid2,
        pairing,
        identity_gap,
    })
}

/// Discrete pairing sum (omega(D_s z, D_t z) - fhat . muhat) hs ht.
pub fn topological_pairing(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
) -> Result<f64> {
    Ok(energy_identity(geom, state, model)?.pairing)
}

/// Class value of the pairing in a fixed degree sector: 2*pi*(d . tau).
///
/// Evaluating the pairing sum on the zero section gives
/// -sum fhat . muhat(0) = tau . (total flux) = 2*pi*(d . tau), and the
/// continuum pairing is deformation-invariant within the sector; the
/// discrete sum drifts from this value by O(h^2).
pub fn pairing_class_value(degree: &[i64], model: &WeightModel) -> f64 {
    degree
        .iter()
        .zip(&model.tau)
        .map(|(d, t)| 2.0 * PI * *d as f64 * t)
        .sum()
}

/// Existence-threshold margin tau.Vol - 2*pi*d per generator.
///
/// Integrating lambda^-2 fhat + eps^-2 muhat = 0 over the torus forces
/// (1/2) int (W^T |z|^2) dvol = tau_j Vol - 2 pi eps^2 d_j, so a negative
/// margin rules out solutions with z != 0 at eps = 1.
pub fn threshold_margin(geom: &TorusGeometry, degree: &[i64], model: &WeightModel) -> Vec<f64> {
    degree
        .iter()
        .zip(&model.tau)
        .map(|(d, t)| t * geom.vol - 2.0 * PI * *d as f64)
        .collect()
}

/// Report from the compactness bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupBoundReport {
    pub max_norm2: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Maximum-principle sup bound at (approximate) solutions.
///
/// For the single-weight model W=[w], w > 0, the sharp discrete-limit bound
/// is max |z|^2 <= (2 tau / w)(1 + delta).  For general proper models the
/// half-space certificate xi gives sum_nu (W xi)_nu |z_nu|^2 <= 4 |tau|, so
/// max |z|^2 <= 4|tau| / min_nu (W xi)_nu times (1 + delta).
pub fn sup_bound_check(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    residual_tol: f64,
    delta: f64,
) -> Result<SupBoundReport> {
    if !properness_check(model) {
        return Err(VortexError::NotProper);
    }
    let res = residual_energy(geom, state, model)?.sqrt();
    if !(res <= residual_tol) {
        return Err(VortexError::NotASolution {
            residual: res,
            tol: residual_tol,
        });
    }
    let mut max_norm2: f64 = 0.0;
    for site in 0..geom.sites() {
        let mut n2 = 0.0;
        for nu in 0..model.n {
            n2 += state.z.at(site, nu).norm_sqr();
        }
        max_norm2 = max_norm2.max(n2);
    }
    let bound = if model.n == 1 && model.r == 1 && model.w[0] > 0 {
        (2.0 * model.tau[0] / model.w[0] as f64) * (1.0 + delta)
    } else {
        let cert = model.certificate.as_ref().expect("proper model");
        let cmin = (0..model.n)
            .map(|nu| model.w_dot(nu, cert))
            .fold(f64::INFINITY, f64::min);
        let tau_norm = model.tau.iter().map(|t| t * t).sum::<f64>().sqrt();
        (4.0 * tau_norm / cmin) * (1.0 + delta)
    };
    Ok(SupBoundReport {
        max_norm2,
        bound,
        satisfied: max_norm2 <= bound,
    })
}

/// Default zero-detection threshold 0.1 sqrt(2 |tau|).
pub fn default_zero_threshold(model: &WeightModel) -> f64 {
    let tau_norm = model.tau.iter().map(|t| t * t).sum::<f64>().sqrt();
    0.1 * (2.0 * tau_norm).sqrt()
}

/// Signed count of section zeros by phase winding around near-zero cells.
///
/// Within a cell the winding is taken in the local trivialization (s-seam
/// twist applied on wrap); cells are examined when the smallest corner
/// modulus of the tracked component drops below `theta_zero`.
pub fn zero_count(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    theta_zero: f64,
) -> Result<i64> {
    let z = &state.z;
    let n = model.n;
    let mut total_winding = 0i64;
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let (is, js, seam_r) = geom.shift_s(i, j);
            let right = geom.idx(is, js);
            let (it, jt) = geom.shift_t(i, j);
            let top = geom.idx(it, jt);
            let (isd, jsd, seam_d) = geom.shift_s(i, jt);
            debug_assert_eq!(seam_r, seam_d);
            let diag = geom.idx(isd, jsd);

            // Track the first component that is nonvanishing on the cell.
            let mut tracked = None;
            for nu in 0..n {
                let vals = [z.at(site, nu), z.at(right, nu), z.at(top, nu), z.at(diag, nu)];
                if vals.iter().all(|c| c.norm() > 0.0) {
                    tracked = Some(nu);
                    break;
                }
            }
            let nu = match tracked {
                Some(nu) => nu,
                None => return Err(VortexError::AmbiguousZero(i, j)),
            };

            let twist = |row: usize| -> Complex64 {
                let mut phase = 0.0;
                for k in 0..model.r {
                    phase += model.weight(nu, k) as f64
                        * (2.0 * PI * state.a.degree[k] as f64 * (row as f64 * geom.ht)
                            / geom.lt);
                }
                Complex64::from_polar(1.0, phase)
            };
            let c0 = z.at(site, nu);
            let c1 = if seam_r { twist(j) * z.at(right, nu) } else { z.at(right, nu) };
            let c2 = if seam_r { twist(jt) * z.at(diag, nu) } else { z.at(diag, nu) };
            // top corner never crosses the s-seam from (i,j)
            let c3 = z.at(top, nu);

            let min_mod = [c0, c1, c2, c3].iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
            if min_mod >= theta_zero {
                continue;
            }

            let corners = [c0, c1, c2, c3, c0];
            let mut acc = 0.0;
            for w in corners.windows(2) {
                let d = (w[1] / w[0]).arg();
                if (d.abs() - PI).abs() < 1e-9 {
                    return Err(VortexError::AmbiguousZero(i, j));
                }
                acc += d;
            }
            let wind = acc / (2.0 * PI);
            let rounded = wind.round();
            if (wind - rounded).abs() > 1e-6 {
                return Err(VortexError::AmbiguousZero(i, j));
            }
            total_winding += rounded as i64;
        }
    }
    Ok(total_winding)
}

/// Random state helper shared by tests and scans: seeded section and
/// random-plus-flux connection.
pub fn random_state(
    geom: &TorusGeometry,
    model: &WeightModel,
    degree: &[i64],
    epsilon: f64,
    amplitude: f64,
    seed: u64,
) -> VortexState {
    use crate::field::{make_connection_with_flux, ConnectionProfile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = make_connection_with_flux(geom, degree, ConnectionProfile::RandomPlusFlux {
        seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    });
    let mut z = SiteField::zeros(geom, model.n);
    for v in z.z.iter_mut() {
        *v = Complex64::new(
            rng.gen_range(-amplitude..amplitude),
            rng.gen_range(-amplitude..amplitude),
        );
    }
    VortexState { z, a, epsilon }
}

/// Gauge-invariance round trip: transform by a random gauge map and return
/// the new state (used by checks and tests).
pub fn random_gauge_of(
    geom: &TorusGeometry,
    model: &WeightModel,
    state: &VortexState,
    seed: u64,
) -> Result<VortexState> {
    let gm = crate::field::GaugeMap::random(geom, model.r, seed);
    let (z2, a2) = gauge_transform(geom, model, &gm, &state.z, &state.a)?;
    Ok(VortexState {
        z: z2,
        a: a2,
        epsilon: state.epsilon,
    })
}
