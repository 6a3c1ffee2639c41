//! Energy descent, Newton refinement on the slice-augmented system,
//! zero-prescribing initialization, eps-continuation, and tau scans.

use crate::error::{Result, VortexError};
use crate::field::{
    cov_diff, cov_diff_adjoint, curvature, make_connection_with_flux, plaq_to_site,
    ConnectionProfile, LinkField, SiteField,
};
use crate::geometry::TorusGeometry;
use crate::linop::{assemble_d, pack_residual, LinearizedOp};
use crate::sum::NeumaierSum;
use crate::target::{moment_map, properness_check, WeightModel};
use crate::vortex::{
    energy_identity, pairing_class_value, residual, threshold_margin, VortexState,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Solver knobs; all tolerances strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_descent_iters: usize,
    pub max_newton_iters: usize,
    /// Descent stops when the energy gradient norm falls below this.
    pub grad_tol: f64,
    /// Converged means sqrt(dbar2 + resid2) <= newton_tol.
    pub newton_tol: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
    /// Damping floor for both line searches.
    pub step_floor: f64,
    pub seed: u64,
    /// Inner linear solves stop at this fraction of the Newton residual.
    pub lin_tol: f64,
    pub max_lin_iters: usize,
    pub max_restarts: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_descent_iters: 800,
            max_newton_iters: 40,
            grad_tol: 1.0,
            newton_tol: 1e-6,
            armijo_c: 1e-4,
            backtrack: 0.5,
            step_floor: 1e-14,
            seed: 1,
            lin_tol: 0.1,
            max_lin_iters: 4000,
            max_restarts: 3,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.grad_tol,
            self.newton_tol,
            self.armijo_c,
            self.backtrack,
            self.step_floor,
            self.lin_tol,
        ];
        if pos.iter().any(|t| !(*t > 0.0)) || self.max_newton_iters == 0 {
            return Err(VortexError::ShapeMismatch(
                "solver tolerances must be positive and iteration counts nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// One scan entry; serialization order is fixed by the struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRecord {
    pub control: f64,
    pub dbar2: f64,
    pub resid2: f64,
    pub energy: f64,
    pub pairing: f64,
    pub sup_mu: f64,
    pub iterations: usize,
    pub converged: bool,
    pub note: Option<String>,
}

/// How the section is initialized in `solve_vortex`.
#[derive(Debug, Clone)]
pub enum InitSpec {
    /// Seeded random section (amplitude relative to the vacuum modulus).
    Random { amplitude: f64 },
    /// Product of single-vortex profiles centered at the given points.
    Zeros { points: Vec<(f64, f64)> },
    /// Start from an existing state (e.g. loaded from a snapshot).
    State(Box<VortexState>),
}

/// Energy gradient with respect to (z, a_s, a_t).
///
/// The z part is returned as complex G with dE = sum Re(conj(G) dz); the
/// link parts are plain real arrays.
pub fn energy_gradient(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
) -> Result<(Vec<Complex64>, Vec<f64>, Vec<f64>)> {
    let (n, r) = (model.n, model.r);
    let sites = geom.sites();
    let area = geom.hs * geom.ht;
    let e2 = state.epsilon * state.epsilon;
    let (ds, dt) = cov_diff(geom, &state.a, model, &state.z)?;

    // z-gradient: area * (D^* D z + (w/eps^2) (W mu) z).
    let mut gz = cov_diff_adjoint(geom, &state.a, model, &ds, &dt);
    for site in 0..sites {
        let w = geom.weight(site);
        let zs = &state.z.z[site * n..(site + 1) * n];
        let mu = moment_map(model, zs)?;
        for nu in 0..n {
            let coeff = w / e2 * model.w_dot(nu, &mu);
            gz[site * n + nu] = area * (gz[site * n + nu] + coeff * zs[nu]);
        }
    }

    // Curvature term: per-plaquette weight
    // G_p = area * (eps^2/4) sum_{corners x} F_site(x)/w(x).
    let f_plaq = curvature(geom, &state.a)?;
    let f_site = plaq_to_site(geom, &f_plaq, r);
    let mut gp = vec![0.0; sites * r];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let p = geom.idx(i, j);
            let (i1, j1, _) = geom.shift_s(i, j);
            let (i2, j2) = geom.shift_t(i, j);
            let corners = [
                geom.idx(i, j),
                geom.idx(i1, j1),
                geom.idx(i2, j2),
                geom.idx(i1, j2),
            ];
            for k in 0..r {
                let mut acc = 0.0;
                for c in corners {
                    acc += f_site[c * r + k] / geom.weight(c);
                }
                gp[p * r + k] = area * e2 * 0.25 * acc;
            }
        }
    }
    let mut gas = vec![0.0; sites * r];
    let mut gat = vec![0.0; sites * r];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            let im_ = if i == 0 { geom.ns - 1 } else { i - 1 };
            let jm_ = if j == 0 { geom.nt - 1 } else { j - 1 };
            let p_left = geom.idx(im_, j);
            let p_down = geom.idx(i, jm_);
            for k in 0..r {
                gat[site * r + k] = (gp[p_left * r + k] - gp[site * r + k]) / geom.hs;
                gas[site * r + k] = (gp[site * r + k] - gp[p_down * r + k]) / geom.ht;
            }
        }
    }
    // Current density from the Dirichlet term (e^{-iWa h} transporter).
    for site in 0..sites {
        for k in 0..r {
            let mut js = 0.0;
            let mut jt = 0.0;
            for nu in 0..n {
                let w = model.weight(nu, k) as f64;
                let z = state.z.at(site, nu);
                js -= w * (z.conj() * ds[site * n + nu]).im;
                jt -= w * (z.conj() * dt[site * n + nu]).im;
            }
            gas[site * r + k] += area * js;
            gat[site * r + k] += area * jt;
        }
    }
    Ok((gz, gas, gat))
}

fn grad_norm(gz: &[Complex64], gas: &[f64], gat: &[f64]) -> f64 {
    let a: f64 = gz.iter().map(|c| c.norm_sqr()).sum();
    let b: f64 = gas.iter().map(|x| x * x).sum();
    let c: f64 = gat.iter().map(|x| x * x).sum();
    (a + b + c).sqrt()
}

fn step_state(
    state: &VortexState,
    t: f64,
    gz: &[Complex64],
    gas: &[f64],
    gat: &[f64],
) -> VortexState {
    let mut s = state.clone();
    for (z, g) in s.z.z.iter_mut().zip(gz) {
        *z -= t * g;
    }
    for (a, g) in s.a.a_s.iter_mut().zip(gas) {
        *a -= t * g;
    }
    for (a, g) in s.a.a_t.iter_mut().zip(gat) {
        *a -= t * g;
    }
    s
}

/// Descent log returned alongside the final state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentLog {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub final_grad_norm: f64,
    pub stalled: bool,
}

/// Gradient descent with Barzilai-Borwein step sizes and an Armijo
/// backtracking safeguard; energy is strictly nonincreasing across accepted
/// steps.
///
/// Errors with `LineSearchStall` only if not a single step can be accepted
/// above the damping floor; if progress was made first, the best state is
/// returned with `stalled` set.
pub fn descend_energy(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    opts: &SolveOptions,
) -> Result<(VortexState, DescentLog)> {
    opts.validate()?;
    if !state.is_finite() {
        return Err(VortexError::ShapeMismatch(
            "descend_energy: nonfinite state".into(),
        ));
    }
    let mut cur = state.clone();
    let mut e_cur = energy_identity(geom, &cur, model)?.e;
    let e_init = e_cur;
    // grad_tol is checked on the grid-independent L2 density norm
    // ||grad|| / sqrt(hs ht).
    let l2_scale = (geom.hs * geom.ht).sqrt();
    let (mut gz, mut gas, mut gat) = energy_gradient(geom, &cur, model)?;
    let mut gn = grad_norm(&gz, &gas, &gat);
    let mut accepted = 0usize;
    let mut iterations = 0usize;
    let mut t_prev = 1e-2;
    let mut stalled = false;

    while iterations < opts.max_descent_iters && gn / l2_scale > opts.grad_tol {
        iterations += 1;
        let mut t = t_prev;
        let g2 = gn * gn;
        let mut took = false;
        while t >= opts.step_floor {
            let trial = step_state(&cur, t, &gz, &gas, &gat);
            let e_trial = energy_identity(geom, &trial, model)?.e;
            if e_trial <= e_cur - opts.armijo_c * t * g2 {
                let (gz2, gas2, gat2) = energy_gradient(geom, &trial, model)?;
                // BB1 step length from s = -t g, y = g' - g.
                let mut sy = NeumaierSum::new();
                let mut ss = NeumaierSum::new();
                for (a, b) in gz.iter().zip(&gz2) {
                    let d = b - a;
                    sy.add(t * (a.conj() * d).re);
                    ss.add(t * t * a.norm_sqr());
                }
                for (a, b) in gas.iter().zip(&gas2).chain(gat.iter().zip(&gat2)) {
                    let d = b - a;
                    sy.add(t * a * d);
                    ss.add(t * t * a * a);
                }
                let sy = sy.value();
                t_prev = if sy > 0.0 {
                    (ss.value() / sy).clamp(1e-6, 1e2)
                } else {
                    (t * 2.0).min(1e2)
                };
                cur = trial;
                e_cur = e_trial;
                gz = gz2;
                gas = gas2;
                gat = gat2;
                gn = grad_norm(&gz, &gas, &gat);
                accepted += 1;
                took = true;
                break;
            }
            t *= opts.backtrack;
        }
        if !took {
            if accepted == 0 {
                return Err(VortexError::LineSearchStall(opts.step_floor));
            }
            stalled = true;
            break;
        }
    }
    Ok((
        cur,
        DescentLog {
            iterations,
            accepted_steps: accepted,
            initial_energy: e_init,
            final_energy: e_cur,
            final_grad_norm: gn / l2_scale,
            stalled,
        },
    ))
}

/// Gradient descent over the connection only, section frozen.
///
/// Aligns the links with the section's phase and concentrates the flux
/// where the ansatz wants it; run before the full descent so that the
/// energy starts below the reducible saddle (monotone descent can then
/// never drain the section to z = 0).
pub fn descend_connection_only(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    opts: &SolveOptions,
    max_iters: usize,
) -> Result<(VortexState, DescentLog)> {
    opts.validate()?;
    let mut cur = state.clone();
    let mut e_cur = energy_identity(geom, &cur, model)?.e;
    let e_init = e_cur;
    let l2_scale = (geom.hs * geom.ht).sqrt();
    let zero_gz = |gz: &mut Vec<Complex64>| gz.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
    let (mut gz, mut gas, mut gat) = energy_gradient(geom, &cur, model)?;
    zero_gz(&mut gz);
    let mut gn = grad_norm(&gz, &gas, &gat);
    let mut accepted = 0usize;
    let mut iterations = 0usize;
    let mut t_prev = 1e-2;
    let mut stalled = false;
    while iterations < max_iters && gn / l2_scale > opts.grad_tol {
        iterations += 1;
        let mut t = t_prev;
        let g2 = gn * gn;
        let mut took = false;
        while t >= opts.step_floor {
            let trial = step_state(&cur, t, &gz, &gas, &gat);
            let e_trial = energy_identity(geom, &trial, model)?.e;
            if e_trial <= e_cur - opts.armijo_c * t * g2 {
                let (mut gz2, gas2, gat2) = energy_gradient(geom, &trial, model)?;
                zero_gz(&mut gz2);
                let mut sy = NeumaierSum::new();
                let mut ss = NeumaierSum::new();
                for (a, b) in gas.iter().zip(&gas2).chain(gat.iter().zip(&gat2)) {
                    let d = b - a;
                    sy.add(t * a * d);
                    ss.add(t * t * a * a);
                }
                let sy = sy.value();
                t_prev = if sy > 0.0 {
                    (ss.value() / sy).clamp(1e-6, 1e2)
                } else {
                    (t * 2.0).min(1e2)
                };
                cur = trial;
                e_cur = e_trial;
                gz = gz2;
                gas = gas2;
                gat = gat2;
                gn = grad_norm(&gz, &gas, &gat);
                accepted += 1;
                took = true;
                break;
            }
            t *= opts.backtrack;
        }
        if !took {
            stalled = accepted > 0;
            break;
        }
    }
    Ok((
        cur,
        DescentLog {
            iterations,
            accepted_steps: accepted,
            initial_energy: e_init,
            final_energy: e_cur,
            final_grad_norm: gn / l2_scale,
            stalled,
        },
    ))
}

/// Packed l2 norm of the nonlinear residual (res1, res2).
fn packed_residual(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
) -> Result<(Vec<f64>, f64)> {
    let (r1, r2) = residual(geom, state, model)?;
    let v = pack_residual(geom, model.n, model.r, &r1.z, &r2);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((v, norm))
}

/// Jacobi-preconditioned CG on the Tikhonov-damped normal equations
/// (A^T A + s I) x = A^T b; returns the solution and the achieved relative
/// plain residual ||b - A x|| / ||b||.
///
/// The damping keeps Gauss-Newton steps from wandering along the moduli
/// near-kernel of the linearization (those flat directions otherwise blow
/// up the step and force tiny line-search factors).
fn cgnr(
    op: &LinearizedOp,
    b: &[f64],
    rel_tol: f64,
    max_iters: usize,
    tikhonov: f64,
) -> (Vec<f64>, f64) {
    let ncols = op.ncols;
    let mut diag = vec![tikhonov; ncols];
    for row in 0..op.nrows {
        for k in op.row_ptr[row]..op.row_ptr[row + 1] {
            diag[op.cols[k] as usize] += op.vals[k] * op.vals[k];
        }
    }
    for d in diag.iter_mut() {
        if *d <= 0.0 {
            *d = 1.0;
        }
    }
    let b_norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return (vec![0.0; ncols], 0.0);
    }
    // rhs of the normal system and CG state.
    let mut atb = vec![0.0; ncols];
    op.apply_transpose(b, &mut atb);
    let atb_norm = atb.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let mut x = vec![0.0; ncols];
    let mut rn = atb.clone(); // normal residual A^T b - (A^T A + sI) x
    let mut z: Vec<f64> = rn.iter().zip(&diag).map(|(v, d)| v / d).collect();
    let mut p = z.clone();
    let mut gamma: f64 = rn.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; op.nrows];
    let mut mp = vec![0.0; ncols];
    let mut iters_used = 0usize;
    for _ in 0..max_iters {
        iters_used += 1;
        op.apply(&p, &mut ap);
        op.apply_transpose(&ap, &mut mp);
        if tikhonov > 0.0 {
            for (m, pi) in mp.iter_mut().zip(&p) {
                *m += tikhonov * pi;
            }
        }
        let pmp: f64 = p.iter().zip(&mp).map(|(a, b)| a * b).sum();
        if pmp <= 0.0 || !pmp.is_finite() {
            break;
        }
        let alpha = gamma / pmp;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, mi) in rn.iter_mut().zip(&mp) {
            *ri -= alpha * mi;
        }
        // The normal residual is a poor progress measure (kappa^2); stop
        // on the plain residual, checked periodically.
        let rel_n = rn.iter().map(|v| v * v).sum::<f64>().sqrt() / atb_norm;
        if rel_n <= 0.3 * rel_tol || iters_used % 16 == 0 {
            op.apply(&x, &mut ap);
            let mut num = 0.0;
            for (bi, ai) in b.iter().zip(&ap) {
                num += (bi - ai) * (bi - ai);
            }
            if num.sqrt() / b_norm <= rel_tol {
                break;
            }
        }
        for ((zi, ri), di) in z.iter_mut().zip(&rn).zip(&diag) {
            *zi = ri / di;
        }
        let gamma_new: f64 = rn.iter().zip(&z).map(|(a, b)| a * b).sum();
        if gamma_new <= 0.0 || !gamma_new.is_finite() {
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    op.apply(&x, &mut ap);
    let mut num = 0.0;
    for (bi, ai) in b.iter().zip(&ap) {
        num += (bi - ai) * (bi - ai);
    }
    if std::env::var("VORTICES_CG_TRACE").is_ok() {
        let rel_n = rn.iter().map(|v| v * v).sum::<f64>().sqrt() / atb_norm;
        eprintln!("    cg iters={iters_used} rel_n={rel_n:.2e} plain={:.2e}", num.sqrt() / b_norm);
    }
    (x, num.sqrt() / b_norm)
}

fn apply_update(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    delta: &[f64],
    t: f64,
) -> VortexState {
    let (n, r) = (model.n, model.r);
    let nv = 2 * n + 2 * r;
    let mut s = state.clone();
    for site in 0..geom.sites() {
        for nu in 0..n {
            let d = Complex64::new(delta[site * nv + 2 * nu], delta[site * nv + 2 * nu + 1]);
            *s.z.at_mut(site, nu) = state.z.at(site, nu) + t * d;
        }
        for k in 0..r {
            s.a.a_s[site * r + k] += t * delta[site * nv + 2 * n + k];
            s.a.a_t[site * r + k] += t * delta[site * nv + 2 * n + r + k];
        }
    }
    s
}

/// Newton log returned alongside the refined state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewtonLog {
    pub iterations: usize,
    pub residual_norms: Vec<f64>,
    pub converged: bool,
}

fn is_reducible(state: &VortexState) -> bool {
    state.z.z.iter().all(|c| c.norm() < 1e-12)
}

/// Damped inexact Newton on the augmented system (res1, slice, res2).
///
/// The slice row kills the gauge kernel, so updates are gauge-fixed; near a
/// solution the residual contracts quadratically.
pub fn newton_refine(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    opts: &SolveOptions,
) -> Result<(VortexState, NewtonLog)> {
    opts.validate()?;
    let mut cur = state.clone();
    let mut log = NewtonLog {
        iterations: 0,
        residual_norms: Vec::new(),
        converged: false,
    };
    for _ in 0..opts.max_newton_iters {
        let b = energy_identity(geom, &cur, model)?;
        let rnorm_energy = (b.dbar2 + b.resid2).max(0.0).sqrt();
        let (rv, rnorm) = packed_residual(geom, &cur, model)?;
        log.residual_norms.push(rnorm);
        if rnorm_energy <= opts.newton_tol {
            log.converged = true;
            return Ok((cur, log));
        }
        if is_reducible(&cur) && cur.a.degree.iter().any(|d| *d != 0) {
            return Err(VortexError::SingularSystem(
                "reducible configuration z = 0 with nonzero degree".into(),
            ));
        }
        log.iterations += 1;
        let mut op = assemble_d(geom, &cur, model)?;
        let mut rhs: Vec<f64> = rv.iter().map(|x| -x).collect();
        // Row equilibration: unit-norm rows keep the normal equations
        // well scaled across eps (the res2 rows grow like eps^-2).
        for row in 0..op.nrows {
            let lo = op.row_ptr[row];
            let hi = op.row_ptr[row + 1];
            let norm = op.vals[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                let inv = 1.0 / norm;
                for v in op.vals[lo..hi].iter_mut() {
                    *v *= inv;
                }
                rhs[row] *= inv;
            }
        }
        let forcing = (opts.lin_tol * rnorm.min(1.0)).clamp(1e-13, 0.1);
        // Damping scaled with the residual keeps quadratic contraction.
        let diag_scale = {
            let mut acc = 0.0;
            for v in &op.vals {
                acc += v * v;
            }
            acc / op.ncols as f64
        };
        let rhs_norm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tikhonov = 1e-2 * (rhs_norm / (rhs.len() as f64).sqrt()).min(1.0) * diag_scale;
        let (delta, achieved) = cgnr(&op, &rhs, forcing, opts.max_lin_iters, tikhonov);
        if std::env::var("VORTICES_NEWTON_TRACE").is_ok() {
            let mut atb = vec![0.0; op.ncols];
            op.apply_transpose(&rhs, &mut atb);
            let atb_n = atb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d_n = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            eprintln!(
                "  newton it={} rnorm={rnorm:.3e} forcing={forcing:.1e} achieved={achieved:.3e} |Atb|/|b|={:.3e} |delta|={:.3e} tikh={tikhonov:.2e}",
                log.iterations, atb_n / rnorm.max(1e-300), d_n
            );
        }
        if !delta.iter().all(|x| x.is_finite()) {
            return Err(VortexError::SingularSystem("nonfinite Newton step".into()));
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t >= opts.step_floor {
            let trial = apply_update(geom, &cur, model, &delta, t);
            let (_, trial_norm) = packed_residual(geom, &trial, model)?;
            if trial_norm < rnorm * (1.0 - 0.25 * t).max(0.1) {
                cur = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Second tier: near the floor the right-hand side is dominated
            // by the quadratic (cokernel) part and per-step contraction is
            // modest; accept any meaningful decrease at moderate damping.
            let mut t = 1.0;
            while t >= 1.0 / 64.0 {
                let trial = apply_update(geom, &cur, model, &delta, t);
                let (_, trial_norm) = packed_residual(geom, &trial, model)?;
                if trial_norm < rnorm * (1.0 - 1e-3) {
                    cur = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            return Err(VortexError::NoConvergence(format!(
                "newton stalled at residual {rnorm:.3e} (linear solve reached {achieved:.1e})"
            )));
        }
    }
    let b = energy_identity(geom, &cur, model)?;
    let rnorm_energy = (b.dbar2 + b.resid2).max(0.0).sqrt();
    let (_, rnorm) = packed_residual(geom, &cur, model)?;
    log.residual_norms.push(rnorm);
    if rnorm_energy <= opts.newton_tol {
        log.converged = true;
        Ok((cur, log))
    } else {
        Err(VortexError::NoConvergence(format!(
            "newton exhausted {} iterations at residual {rnorm:.3e}",
            opts.max_newton_iters
        )))
    }
}

/// Degree-1 magnetic comb section (Gaussian-weighted Fourier comb, the
/// discrete-torus analogue of a theta function) for the connection
/// a_t = beff (s - sigma), a_s = 0, with its single zero at `p`.
///
/// The comb solves dbar_A z = 0 in the continuum for the uniform-flux
/// connection centered at sigma = p_s - Ls/2, and its zero sits exactly at
/// (sigma + Ls/2, t0 + Lt/2); the site values are sampled directly.
fn comb1(geom: &TorusGeometry, p: (f64, f64), orient: i64) -> (Vec<Complex64>, f64) {
    let (ls, lt) = (geom.ls, geom.lt);
    let sigma = p.0 - ls / 2.0;
    let t0 = p.1 - lt / 2.0;
    let alpha = -std::f64::consts::PI * ls / lt;
    let b1 = 2.0 * std::f64::consts::PI / (ls * lt);
    let mut out = vec![Complex64::new(0.0, 0.0); geom.sites()];
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let s = i as f64 * geom.hs;
            let t = j as f64 * geom.ht;
            let x = s - sigma;
            let n_star = (x / ls - 1.0).round() as i64;
            // Stabilize the Gaussian comb by its largest term.
            let mut max_re = f64::NEG_INFINITY;
            let mut terms: Vec<(f64, f64)> = Vec::with_capacity(11);
            for n in (n_star - 5)..=(n_star + 5) {
                let nf = n as f64;
                let kappa = 2.0 * std::f64::consts::PI * nf / lt;
                let re = alpha * nf * nf + kappa * x - 0.5 * b1 * x * x;
                let im = kappa * (t - t0);
                max_re = max_re.max(re);
                terms.push((re, im));
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (re, im) in terms {
                acc += Complex64::from_polar((re - max_re).exp(), im);
            }
            // Carry the stabilizer as a common modulus scale per site.
            let val = acc * max_re.exp().max(1e-300);
            out[geom.idx(i, j)] = if orient >= 0 { val } else { val.conj() };
        }
    }
    (out, sigma)
}

/// Product of single-vortex comb profiles (unit winding each) centered at
/// the given points, normalized to the vacuum modulus of component 0.
///
/// Component 0 carries the zeros; remaining components start at zero.
/// Points closer than two lattice spacings are rejected.
pub fn prescribe_zeros(
    geom: &TorusGeometry,
    model: &WeightModel,
    points: &[(f64, f64)],
) -> Result<SiteField> {
    Ok(prescribed_state_parts(geom, model, points)?.0)
}

/// Section plus the matching centered uniform connection for the comb
/// product; the Landau center offset makes dbar_A z = O(h^2) at the init.
fn prescribed_state_parts(
    geom: &TorusGeometry,
    model: &WeightModel,
    points: &[(f64, f64)],
) -> Result<(SiteField, f64)> {
    let min_sep = 2.0 * geom.hs.max(geom.ht);
    for (p, &(ps, pt)) in points.iter().enumerate() {
        for &(qs, qt) in points.iter().skip(p + 1) {
            let ds = torus_delta(ps - qs, geom.ls);
            let dt = torus_delta(pt - qt, geom.lt);
            if (ds * ds + dt * dt).sqrt() < min_sep {
                return Err(VortexError::PointsTooClose);
            }
        }
    }
    let w00 = model.weight(0, 0);
    let amp = (2.0 * model.tau[0].abs() / w00.unsigned_abs().max(1) as f64)
        .sqrt()
        .max(1e-3);
    let mut field = vec![Complex64::new(1.0, 0.0); geom.sites()];
    let mut sigma_sum = 0.0;
    let orient = if w00 >= 0 { 1 } else { -1 };
    for &p in points {
        let (factor, sigma) = comb1(geom, p, orient);
        sigma_sum += sigma;
        for (f, v) in field.iter_mut().zip(&factor) {
            *f *= v;
        }
    }
    let max_mod = field.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    let scale = if max_mod > 0.0 { amp / max_mod } else { 1.0 };
    let mut z = SiteField::zeros(geom, model.n);
    for site in 0..geom.sites() {
        *z.at_mut(site, 0) = scale * field[site];
    }
    // a_t = B_total (s - mean sigma) belongs to the product of the factors'
    // connections; expressed as an offset against the uniform profile.
    let offset = if points.is_empty() {
        0.0
    } else {
        let b1 = 2.0 * std::f64::consts::PI / (geom.ls * geom.lt);
        -b1 * sigma_sum
    };
    Ok((z, offset))
}

/// Uniform-flux connection with a constant a_t offset (a Landau-center
/// shift; the flux is unchanged).
fn offset_uniform_connection(
    geom: &TorusGeometry,
    model: &WeightModel,
    degree: &[i64],
    offset: f64,
) -> LinkField {
    let mut a = make_connection_with_flux(geom, degree, ConnectionProfile::Uniform);
    if model.r == 1 {
        let w0 = model.weight(0, 0);
        let per_gen = if w0 != 0 { offset / w0 as f64 } else { offset };
        for v in a.a_t.iter_mut() {
            *v += per_gen;
        }
    }
    a
}

/// Signed difference folded to the nearest periodic image.
fn torus_delta(d: f64, period: f64) -> f64 {
    let mut x = d % period;
    if x > period / 2.0 {
        x -= period;
    } else if x < -period / 2.0 {
        x += period;
    }
    x
}

/// Pointwise sup of |muhat(z)| over sites.
pub fn sup_mu(geom: &TorusGeometry, state: &VortexState, model: &WeightModel) -> f64 {
    let mut sup: f64 = 0.0;
    for site in 0..geom.sites() {
        let zs = &state.z.z[site * model.n..(site + 1) * model.n];
        let mu = moment_map(model, zs).expect("shapes match");
        let norm = mu.iter().map(|m| m * m).sum::<f64>().sqrt();
        sup = sup.max(norm);
    }
    sup
}

#[allow(clippy::too_many_arguments)]
fn record_from_state(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    control: f64,
    iterations: usize,
    converged: bool,
    opts: &SolveOptions,
    note: Option<String>,
) -> Result<ScanRecord> {
    let b = energy_identity(geom, state, model)?;
    Ok(ScanRecord {
        control,
        dbar2: b.dbar2,
        resid2: b.resid2,
        energy: b.e,
        pairing: b.pairing,
        sup_mu: sup_mu(geom, state, model),
        iterations,
        converged: converged && (b.dbar2 + b.resid2).max(0.0).sqrt() <= opts.newton_tol,
        note,
    })
}

/// Full pipeline: connection with flux, section init, descent, Newton, with
/// cold random restarts on failure.
///
/// The converged flag is honest; failures return the best state found with
/// `converged = false` and a note.  A `below_threshold` note is attached
/// whenever the ledger margin tau*Vol - 2*pi*d is nonpositive.
pub fn solve_vortex(
    geom: &TorusGeometry,
    model: &WeightModel,
    degree: &[i64],
    init: &InitSpec,
    opts: &SolveOptions,
) -> Result<(VortexState, ScanRecord)> {
    opts.validate()?;
    if !properness_check(model) {
        return Err(VortexError::NotProper);
    }
    if degree.len() != model.r {
        return Err(VortexError::ShapeMismatch(format!(
            "degree has {} entries for r={}",
            degree.len(),
            model.r
        )));
    }
    let margins = threshold_margin(geom, degree, model);
    let below = margins.iter().any(|m| *m <= 0.0) && degree.iter().any(|d| *d != 0);
    let mut note = if below {
        Some(format!(
            "below_threshold: margin {:.6} (pairing class value {:.6})",
            margins[0],
            pairing_class_value(degree, model)
        ))
    } else {
        None
    };

    let mut best: Option<(VortexState, usize)> = None;
    for restart in 0..=opts.max_restarts {
        let state0 = init_state(geom, model, degree, init, opts, restart)?;
        // Stage A: relax the connection against the frozen section so the
        // full descent starts below the reducible saddle.
        let state0 = match descend_connection_only(geom, &state0, model, opts, 300) {
            Ok((s, _)) => s,
            Err(_) => state0,
        };
        let descent = descend_energy(geom, &state0, model, opts);
        let (after_descent, d_iters) = match descent {
            Ok((s, log)) => (s, log.iterations),
            Err(VortexError::LineSearchStall(_)) => (state0.clone(), 0),
            Err(e) => return Err(e),
        };
        match newton_refine(geom, &after_descent, model, opts) {
            Ok((refined, nlog)) => {
                let iters = d_iters + nlog.iterations;
                let rec = record_from_state(
                    geom, &refined, model, model.tau[0], iters, true, opts, note,
                )?;
                return Ok((refined, rec));
            }
            Err(VortexError::SingularSystem(msg)) => {
                note = Some(append_note(note, &format!("singular_system: {msg}")));
                best = Some((after_descent, d_iters));
                // Reducible wall configurations are reported, never refined.
                if msg.contains("reducible") {
                    break;
                }
            }
            Err(VortexError::NoConvergence(msg)) => {
                let keep = match &best {
                    None => true,
                    Some((prev, _)) => {
                        let eb = energy_identity(geom, prev, model)?;
                        let ea = energy_identity(geom, &after_descent, model)?;
                        ea.dbar2 + ea.resid2 < eb.dbar2 + eb.resid2
                    }
                };
                if keep {
                    best = Some((after_descent, d_iters));
                }
                note = Some(append_note(note, &format!("no_convergence: {msg}")));
                // Below the threshold the residual floor is structural;
                // restarts cannot cross it.
                if below {
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    let (state, iters) = best.ok_or_else(|| {
        VortexError::NoConvergence("no state produced by any restart".into())
    })?;
    let rec = record_from_state(geom, &state, model, model.tau[0], iters, false, opts, note)?;
    Ok((state, rec))
}

fn append_note(note: Option<String>, msg: &str) -> String {
    match note {
        Some(s) => format!("{s}; {msg}"),
        None => msg.to_string(),
    }
}

fn init_state(
    geom: &TorusGeometry,
    model: &WeightModel,
    degree: &[i64],
    init: &InitSpec,
    opts: &SolveOptions,
    restart: usize,
) -> Result<VortexState> {
    let seed = opts
        .seed
        .wrapping_add(restart as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15);
    match init {
        InitSpec::State(s) => {
            if restart == 0 {
                Ok((**s).clone())
            } else {
                random_init(geom, model, degree, 0.5, seed)
            }
        }
        InitSpec::Random { amplitude } => random_init(geom, model, degree, *amplitude, seed),
        InitSpec::Zeros { points } => {
            if restart == 0 {
                let (z, offset) = prescribed_state_parts(geom, model, points)?;
                let a = offset_uniform_connection(geom, model, degree, offset);
                VortexState::new(z, a, 1.0)
            } else {
                random_init(geom, model, degree, 0.5, seed)
            }
        }
    }
}

/// Random init: seeded zero locations carried by the comb-product ansatz
/// (any section of the twisted bundle winds d times), modulated by smooth
/// low-frequency modulus noise.  White-noise sections are useless starts:
/// their Dirichlet energy dwarfs the physical scale and descent parks them
/// on the reducible configuration z = 0.
fn random_init(
    geom: &TorusGeometry,
    model: &WeightModel,
    degree: &[i64],
    amplitude: f64,
    seed: u64,
) -> Result<VortexState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: i64 = degree.iter().map(|d| d.abs()).sum();
    let mut points: Vec<(f64, f64)> = Vec::new();
    let min_sep = 2.5 * geom.hs.max(geom.ht);
    let mut guard = 0;
    while (points.len() as i64) < total && guard < 10_000 {
        guard += 1;
        let cand = (rng.gen_range(0.0..geom.ls), rng.gen_range(0.0..geom.lt));
        let ok = points.iter().all(|&(ps, pt)| {
            let ds = torus_delta(cand.0 - ps, geom.ls);
            let dt = torus_delta(cand.1 - pt, geom.lt);
            (ds * ds + dt * dt).sqrt() >= min_sep
        });
        if ok {
            points.push(cand);
        }
    }
    let (mut z, offset) = if points.is_empty() {
        let w00 = model.weight(0, 0).unsigned_abs().max(1) as f64;
        let vac = (2.0 * model.tau[0].abs() / w00).sqrt().max(0.1);
        let mut z = SiteField::zeros(geom, model.n);
        for site in 0..geom.sites() {
            *z.at_mut(site, 0) = Complex64::new(vac, 0.0);
        }
        (z, 0.0)
    } else {
        prescribed_state_parts(geom, model, &points)?
    };
    // Populate the remaining components with their own comb sections at
    // independent random zeros; otherwise each z_nu = 0 subspace is
    // invariant under descent and Newton, and the solver would be confined
    // to the nongeneric common-zero branch.
    if model.n > 1 && !points.is_empty() {
        let orient = if model.weight(0, 0) >= 0 { 1 } else { -1 };
        let amp0 = z.z.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        for nu in 1..model.n {
            if model.weight(nu, 0) != model.weight(0, 0) {
                continue;
            }
            let mut field = vec![Complex64::new(1.0, 0.0); geom.sites()];
            for _ in 0..points.len() {
                let q = (rng.gen_range(0.0..geom.ls), rng.gen_range(0.0..geom.lt));
                let (factor, _) = comb1(geom, q, orient);
                for (f, v) in field.iter_mut().zip(&factor) {
                    *f *= v;
                }
            }
            let maxmod = field.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
            if maxmod > 0.0 {
                let scale = 0.7 * amp0 / maxmod;
                for site in 0..geom.sites() {
                    *z.at_mut(site, nu) = scale * field[site];
                }
            }
        }
    }
    // Smooth periodic modulus noise plus a global random phase.
    let modes: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    let phase = Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * std::f64::consts::PI));
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let sfrac = i as f64 * geom.hs / geom.ls;
            let tfrac = j as f64 * geom.ht / geom.lt;
            let mut f = 0.0;
            for (k, (as_, ps_, at_, pt_)) in modes.iter().enumerate() {
                let kk = (k + 1) as f64 * 2.0 * std::f64::consts::PI;
                f += as_ * (kk * sfrac + ps_).cos() + at_ * (kk * tfrac + pt_).cos();
            }
            let factor = (1.0 + amplitude * f / 3.0).max(0.05);
            let site = geom.idx(i, j);
            for nu in 0..model.n {
                *z.at_mut(site, nu) = phase * factor * z.at(site, nu);
            }
        }
    }
    let a = offset_uniform_connection(geom, model, degree, offset);
    VortexState::new(z, a, 1.0)
}

/// Re-solve along a strictly decreasing eps schedule, warm-starting each
/// stage from the previous solution.
///
/// At solutions the second equation gives muhat = -eps^2 lambda^-2 fhat
/// pointwise, so sup |muhat| is bounded by eps^2 times the curvature sup.
pub fn epsilon_continuation(
    geom: &TorusGeometry,
    state: &VortexState,
    model: &WeightModel,
    eps_schedule: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<ScanRecord>> {
    if eps_schedule.is_empty()
        || eps_schedule.windows(2).any(|w| w[1] >= w[0])
        || eps_schedule.iter().any(|e| !(*e > 0.0))
    {
        return Err(VortexError::ShapeMismatch(
            "eps schedule must be strictly decreasing and positive".into(),
        ));
    }
    if (state.epsilon - eps_schedule[0]).abs() > 1e-12 {
        return Err(VortexError::ShapeMismatch(format!(
            "state eps {} does not match schedule head {}",
            state.epsilon, eps_schedule[0]
        )));
    }
    let mut cur = state.clone();
    let mut out = Vec::with_capacity(eps_schedule.len());
    for &eps in eps_schedule {
        // Substep geometrically: a large eps jump rescales the muhat
        // coupling by (eps'/eps)^2 and lands outside the Newton basin,
        // where Gauss-Newton can be captured by a nonzero local minimum
        // of the least-squares residual.
        let mut iters = 0usize;
        let mut converged = false;
        while cur.epsilon > eps * (1.0 + 1e-12) {
            let next = (cur.epsilon * 0.9).max(eps);
            cur.epsilon = next;
            let (refined, its, conv) = match newton_refine(geom, &cur, model, opts) {
                Ok((st, log)) => (st, log.iterations, log.converged),
                Err(VortexError::NoConvergence(_)) | Err(VortexError::SingularSystem(_)) => {
                    let (st, dlog) = descend_energy(geom, &cur, model, opts)?;
                    let (st, nlog) = newton_refine(geom, &st, model, opts)?;
                    (st, dlog.iterations + nlog.iterations, nlog.converged)
                }
                Err(e) => return Err(e),
            };
            cur = refined;
            iters += its;
            converged = conv;
        }
        if (cur.epsilon - eps).abs() > 1e-12 {
            // Schedule head equals the state's eps; no refinement ran yet.
            let (refined, log) = newton_refine(geom, &cur, model, opts)?;
            cur = refined;
            iters += log.iterations;
            converged = log.converged;
        }
        out.push(record_from_state(
            geom,
            &cur,
            model,
            eps,
            iters,
            converged,
            opts,
            None,
        )?);
    }
    Ok(out)
}

/// Solve across a grid of tau values (applied to generator 0), classifying
/// each against the ledger threshold margin tau*Vol - 2*pi*d.
pub fn tau_scan(
    geom: &TorusGeometry,
    model_template: &WeightModel,
    degree: &[i64],
    tau_grid: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<ScanRecord>> {
    let mut out = Vec::with_capacity(tau_grid.len());
    for (idx, &tau) in tau_grid.iter().enumerate() {
        let mut tau_vec = model_template.tau.clone();
        tau_vec[0] = tau;
        let model = WeightModel::new(
            model_template.n,
            model_template.r,
            model_template.w.clone(),
            tau_vec,
        )?;
        // Independent stream per grid point.
        let mut o = opts.clone();
        o.seed = opts.seed.wrapping_add(idx as u64);
        let init = InitSpec::Random { amplitude: 0.5 };
        match solve_vortex(geom, &model, degree, &init, &o) {
            Ok((_, mut rec)) => {
                rec.control = tau;
                let margin = threshold_margin(geom, degree, &model)[0];
                let tag = if margin > 0.0 {
                    "above_threshold"
                } else {
                    "below_threshold"
                };
                rec.note = Some(match rec.note.take() {
                    Some(s) if s.contains("threshold") => s,
                    Some(s) => format!("{tag}; {s}"),
                    None => tag.to_string(),
                });
                out.push(rec);
            }
            Err(e) => out.push(ScanRecord {
                control: tau,
                dbar2: f64::NAN,
                resid2: f64::NAN,
                energy: f64::NAN,
                pairing: f64::NAN,
                sup_mu: f64::NAN,
                iterations: 0,
                converged: false,
                note: Some(format!("error: {e}")),
            }),
        }
    }
    Ok(out)
}
