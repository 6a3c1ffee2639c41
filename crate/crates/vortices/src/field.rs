//! Abelian lattice gauge fields with prescribed flux and C^N site fields.
//!
//! Links store non-compact real values (one per generator), so curvature is
//! linear in the connection and the total flux is pinned by an explicit seam
//! convention rather than by modular arithmetic.  All of the flux of degree
//! `d` is carried across the seam between columns `ns-1` and `0`: pulling a
//! site value across that seam at row `j` multiplies component `nu` by
//! `exp(-i (W d)_nu * 2*pi * j*ht/lt)`, and the matching curvature
//! correction `2*pi*d_j/lt / hs` is added to seam plaquettes.  Rows wrap in
//! `t` with no twist.  See `docs/conventions.md` for the sign ledger.

use crate::error::{Result, VortexError};
use crate::geometry::TorusGeometry;
use crate::sum::NeumaierSum;
use crate::target::WeightModel;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// C^N-valued section sampled at sites, row-major sites, component-minor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteField {
    pub ns: usize,
    pub nt: usize,
    pub n: usize,
    pub z: Vec<Complex64>,
}

impl SiteField {
    pub fn zeros(geom: &TorusGeometry, n: usize) -> Self {
        Self {
            ns: geom.ns,
            nt: geom.nt,
            n,
            z: vec![Complex64::new(0.0, 0.0); geom.sites() * n],
        }
    }

    #[inline]
    pub fn at(&self, site: usize, nu: usize) -> Complex64 {
        self.z[site * self.n + nu]
    }

    #[inline]
    pub fn at_mut(&mut self, site: usize, nu: usize) -> &mut Complex64 {
        &mut self.z[site * self.n + nu]
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.z.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Real r-vector per directed link with an integer degree vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkField {
    pub ns: usize,
    pub nt: usize,
    pub r: usize,
    /// Degree per generator; the seam convention realizes flux 2*pi*d_j.
    pub degree: Vec<i64>,
    /// a_s[site*r + j]: link from (i,j) to (i+1,j).
    pub a_s: Vec<f64>,
    /// a_t[site*r + j]: link from (i,j) to (i,j+1).
    pub a_t: Vec<f64>,
}

impl LinkField {
    pub fn zeros(geom: &TorusGeometry, r: usize, degree: Vec<i64>) -> Self {
        assert_eq!(degree.len(), r);
        Self {
            ns: geom.ns,
            nt: geom.nt,
            r,
            degree,
            a_s: vec![0.0; geom.sites() * r],
            a_t: vec![0.0; geom.sites() * r],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a_s.iter().chain(self.a_t.iter()).all(|x| x.is_finite())
    }
}

/// Real r-vector per site; exp(i g) is the abelian group element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeMap {
    pub ns: usize,
    pub nt: usize,
    pub r: usize,
    pub g: Vec<f64>,
}

impl GaugeMap {
    pub fn random(geom: &TorusGeometry, r: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = (0..geom.sites() * r).map(|_| rng.gen_range(-PI..PI)).collect();
        Self {
            ns: geom.ns,
            nt: geom.nt,
            r,
            g,
        }
    }

    pub fn constant(geom: &TorusGeometry, r: usize, value: &[f64]) -> Self {
        assert_eq!(value.len(), r);
        let mut g = Vec::with_capacity(geom.sites() * r);
        for _ in 0..geom.sites() {
            g.extend_from_slice(value);
        }
        Self {
            ns: geom.ns,
            nt: geom.nt,
            r,
            g,
        }
    }
}

/// Initial connection shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionProfile {
    /// Constant coordinate curvature density 2*pi*d/(ls*lt).
    Uniform,
    /// Zero links; curvature concentrated on the seam plaquettes.
    Seam,
    /// Uniform plus seeded per-link noise (telescopes to zero net flux).
    RandomPlusFlux { seed: u64 },
}

fn check_geom(geom: &TorusGeometry, ns: usize, nt: usize) -> Result<()> {
    if geom.ns != ns || geom.nt != nt {
        return Err(VortexError::GeometryMismatch(format!(
            "field is {}x{}, geometry is {}x{}",
            ns, nt, geom.ns, geom.nt
        )));
    }
    Ok(())
}

/// Build a connection whose oriented plaquette flux is 2*pi*d_j per generator.
pub fn make_connection_with_flux(
    geom: &TorusGeometry,
    degree: &[i64],
    profile: ConnectionProfile,
) -> LinkField {
    let r = degree.len();
    let mut a = LinkField::zeros(geom, r, degree.to_vec());
    match profile {
        ConnectionProfile::Seam => {}
        ConnectionProfile::Uniform => {
            for j in 0..geom.nt {
                for i in 0..geom.ns {
                    let site = geom.idx(i, j);
                    for k in 0..r {
                        let b = 2.0 * PI * degree[k] as f64 / (geom.ls * geom.lt);
                        a.a_t[site * r + k] = b * (i as f64 * geom.hs);
                    }
                }
            }
        }
        ConnectionProfile::RandomPlusFlux { seed } => {
            let mut base = make_connection_with_flux(geom, degree, ConnectionProfile::Uniform);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for x in base.a_s.iter_mut().chain(base.a_t.iter_mut()) {
                *x += rng.gen_range(-0.3..0.3);
            }
            a = base;
        }
    }
    a
}

/// Twist angle per generator for pulling a value across the s-seam at row j.
#[inline]
fn seam_angle(geom: &TorusGeometry, degree: &[i64], k: usize, j_row: usize) -> f64 {
    2.0 * PI * degree[k] as f64 * (j_row as f64 * geom.ht) / geom.lt
}

/// Per-plaquette curvature density (coordinate 2-form coefficient).
///
/// Plaquette (i,j) has corners (i,j),(i+1,j),(i,j+1),(i+1,j+1); the s-seam
/// correction makes the total oriented flux exactly 2*pi*degree.
pub fn curvature(geom: &TorusGeometry, a: &LinkField) -> Result<Vec<f64>> {
    check_geom(geom, a.ns, a.nt)?;
    let r = a.r;
    let mut f = vec![0.0; geom.sites() * r];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let (is, js, seam) = geom.shift_s(i, j);
            let sp = geom.idx(is, js);
            let (it, jt) = geom.shift_t(i, j);
            let tp = geom.idx(it, jt);
            for k in 0..r {
                let mut dt_a = (a.a_t[sp * r + k] - a.a_t[site * r + k]) / geom.hs;
                if seam {
                    dt_a += (2.0 * PI * a.degree[k] as f64 / geom.lt) / geom.hs;
                }
                let ds_a = (a.a_s[tp * r + k] - a.a_s[site * r + k]) / geom.ht;
                f[site * r + k] = dt_a - ds_a;
            }
        }
    }
    Ok(f)
}

/// Total oriented flux per generator: sum of curvature times plaquette area.
pub fn flux(geom: &TorusGeometry, a: &LinkField) -> Result<Vec<f64>> {
    let f = curvature(geom, a)?;
    let area = geom.hs * geom.ht;
    let mut out = Vec::with_capacity(a.r);
    for k in 0..a.r {
        let mut acc = NeumaierSum::new();
        for site in 0..geom.sites() {
            acc.add(f[site * a.r + k] * area);
        }
        out.push(acc.value());
    }
    Ok(out)
}

/// Average the four plaquettes having each site as a corner.
///
/// Second-order accurate and sum-preserving, used to co-locate the curvature
/// with site-sampled quantities.
pub fn plaq_to_site(geom: &TorusGeometry, f: &[f64], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; geom.sites() * r];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let im = if i == 0 { geom.ns - 1 } else { i - 1 };
            let jm = if j == 0 { geom.nt - 1 } else { j - 1 };
            let p00 = geom.idx(i, j);
            let p10 = geom.idx(im, j);
            let p01 = geom.idx(i, jm);
            let p11 = geom.idx(im, jm);
            for k in 0..r {
                out[site * r + k] = 0.25
                    * (f[p00 * r + k] + f[p10 * r + k] + f[p01 * r + k] + f[p11 * r + k]);
            }
        }
    }
    out
}

/// Forward covariant differences (D_s z, D_t z) with link transport.
///
/// D_mu z(x) = (U_mu(x) z(x+mu) - z(x)) / h_mu, where U multiplies component
/// nu by exp(-i (W a_mu)_nu h_mu) and the s-seam twist is applied on wrap
/// (ledger orientation: this is the sign for which the uniform-flux
/// connection carries a d-dimensional dbar kernel with positive zeros).
pub fn cov_diff(
    geom: &TorusGeometry,
    a: &LinkField,
    model: &WeightModel,
    z: &SiteField,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    check_geom(geom, a.ns, a.nt)?;
    check_geom(geom, z.ns, z.nt)?;
    if z.n != model.n || a.r != model.r {
        return Err(VortexError::ShapeMismatch(format!(
            "cov_diff: field has n={}, links have r={}, model is {}x{}",
            z.n, a.r, model.n, model.r
        )));
    }
    let n = model.n;
    let r = model.r;
    let mut ds = vec![Complex64::new(0.0, 0.0); geom.sites() * n];
    let mut dt = vec![Complex64::new(0.0, 0.0); geom.sites() * n];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let (is, js, seam) = geom.shift_s(i, j);
            let sp = geom.idx(is, js);
            let (it, jt) = geom.shift_t(i, j);
            let tp = geom.idx(it, jt);
            for nu in 0..n {
                let mut phase_s = 0.0;
                let mut phase_t = 0.0;
                for k in 0..r {
                    let w = model.weight(nu, k) as f64;
                    phase_s -= w * a.a_s[site * r + k] * geom.hs;
                    phase_t -= w * a.a_t[site * r + k] * geom.ht;
                    if seam {
                        phase_s += w * seam_angle(geom, &a.degree, k, j);
                    }
                }
                let us = Complex64::from_polar(1.0, phase_s);
                let ut = Complex64::from_polar(1.0, phase_t);
                ds[site * n + nu] = (us * z.at(sp, nu) - z.at(site, nu)) / geom.hs;
                dt[site * n + nu] = (ut * z.at(tp, nu) - z.at(site, nu)) / geom.ht;
            }
        }
    }
    Ok((ds, dt))
}

/// Adjoint of the forward covariant differences under the plain site inner
/// product: returns D_s^* p_s + D_t^* p_t.
pub fn cov_diff_adjoint(
    geom: &TorusGeometry,
    a: &LinkField,
    model: &WeightModel,
    ps: &[Complex64],
    pt: &[Complex64],
) -> Vec<Complex64> {
    let n = model.n;
    let r = model.r;
    let mut out = vec![Complex64::new(0.0, 0.0); geom.sites() * n];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let (is, js, seam) = geom.shift_s(i, j);
            let sp = geom.idx(is, js);
            let (it, jt) = geom.shift_t(i, j);
            let tp = geom.idx(it, jt);
            for nu in 0..n {
                let mut phase_s = 0.0;
                let mut phase_t = 0.0;
                for k in 0..r {
                    let w = model.weight(nu, k) as f64;
                    phase_s -= w * a.a_s[site * r + k] * geom.hs;
                    phase_t -= w * a.a_t[site * r + k] * geom.ht;
                    if seam {
                        phase_s += w * seam_angle(geom, &a.degree, k, j);
                    }
                }
                // <D_s z, p> pairs conj(U z_{x+s}) p_x; the adjoint scatters
                // conj(U) p_x onto site x+s and -p_x onto x.
                let us = Complex64::from_polar(1.0, -phase_s);
                let ut = Complex64::from_polar(1.0, -phase_t);
                out[sp * n + nu] += us * ps[site * n + nu] / geom.hs;
                out[site * n + nu] -= ps[site * n + nu] / geom.hs;
                out[tp * n + nu] += ut * pt[site * n + nu] / geom.ht;
                out[site * n + nu] -= pt[site * n + nu] / geom.ht;
            }
        }
    }
    out
}

/// Discrete dbar_A z = (D_s z + i D_t z)/2.
pub fn covariant_dbar(
    geom: &TorusGeometry,
    a: &LinkField,
    model: &WeightModel,
    z: &SiteField,
) -> Result<SiteField> {
    let (ds, dt) = cov_diff(geom, a, model, z)?;
    let i = Complex64::new(0.0, 1.0);
    let out = ds
        .iter()
        .zip(&dt)
        .map(|(s, t)| 0.5 * (s + i * t))
        .collect();
    Ok(SiteField {
        ns: geom.ns,
        nt: geom.nt,
        n: model.n,
        z: out,
    })
}

/// Apply a gauge map: z -> exp(+i W g) z per site, a -> a + dg per link
/// (ledger orientation, covariant for the e^{-iWa h} transporter).
///
/// Curvature, energy, and all gauge-invariant scalars are unchanged; the
/// degree vector is untouched.
pub fn gauge_transform(
    geom: &TorusGeometry,
    model: &WeightModel,
    g: &GaugeMap,
    z: &SiteField,
    a: &LinkField,
) -> Result<(SiteField, LinkField)> {
    check_geom(geom, g.ns, g.nt)?;
    check_geom(geom, z.ns, z.nt)?;
    check_geom(geom, a.ns, a.nt)?;
    if g.r != a.r || g.r != model.r || z.n != model.n {
        return Err(VortexError::ShapeMismatch(format!(
            "gauge map r={}, links r={}, model {}x{}, field n={}",
            g.r, a.r, model.n, model.r, z.n
        )));
    }
    let r = a.r;
    let n = z.n;
    let mut z2 = z.clone();
    for site in 0..geom.sites() {
        for nu in 0..n {
            let mut phase = 0.0;
            for k in 0..r {
                phase += model.weight(nu, k) as f64 * g.g[site * r + k];
            }
            *z2.at_mut(site, nu) = Complex64::from_polar(1.0, phase) * z.at(site, nu);
        }
    }
    let mut a2 = a.clone();
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let (is, js, _) = geom.shift_s(i, j);
            let sp = geom.idx(is, js);
            let (it, jt) = geom.shift_t(i, j);
            let tp = geom.idx(it, jt);
            for k in 0..r {
                a2.a_s[site * r + k] += (g.g[sp * r + k] - g.g[site * r + k]) / geom.hs;
                a2.a_t[site * r + k] += (g.g[tp * r + k] - g.g[site * r + k]) / geom.ht;
            }
        }
    }
    Ok((z2, a2))
}
