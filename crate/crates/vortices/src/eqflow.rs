//! Finite-dimensional equivariant gradient flow to relative fixed points.
//!
//! The flow integrated here is
//!
//!   xdot   = grad H(x) - J X_eta(x) - damping * (dmu)^* mu(x),
//!   etadot = -mu(x),
//!
//! whose stationary points are exactly the critical pairs
//! grad H = J X_eta, mu = 0.  With `moment_damping = 0` this is the plain
//! equivariant gradient-flow system, which conserves a Lotka-Volterra-type
//! quantity in the radial sector and orbits instead of converging; the
//! damping term (the gradient of |mu|^2 / 2) leaves the stationary set
//! untouched and makes the critical set attracting.  The reported monotone
//! functional is L(x, eta) = <mu(x), eta> - H(x); see `docs/conventions.md`.

use crate::error::{Result, VortexError};
use crate::target::{infinitesimal_action, moment_map, WeightModel};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Point on a flow trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowState {
    pub x: Vec<Complex64>,
    pub eta: Vec<f64>,
    pub t: f64,
}

impl FlowState {
    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|c| c.re.is_finite() && c.im.is_finite())
            && self.eta.iter().all(|v| v.is_finite())
    }
}

/// Polynomial in the invariants m_nu = |z_nu|^2, stored as monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantHamiltonian {
    pub n: usize,
    /// (coefficient, exponent per variable) pairs.
    pub monomials: Vec<(f64, Vec<u32>)>,
}

impl InvariantHamiltonian {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            monomials: Vec::new(),
        }
    }

    /// H(z) = (a/2) |z|^2.
    pub fn quadratic(n: usize, a: f64) -> Self {
        let monomials = (0..n)
            .map(|nu| {
                let mut e = vec![0u32; n];
                e[nu] = 1;
                (0.5 * a, e)
            })
            .collect();
        Self { n, monomials }
    }

    pub fn eval_m(&self, m: &[f64]) -> f64 {
        self.monomials
            .iter()
            .map(|(c, e)| c * e.iter().zip(m).map(|(k, v)| v.powi(*k as i32)).product::<f64>())
            .sum()
    }

    pub fn eval(&self, x: &[Complex64]) -> f64 {
        let m: Vec<f64> = x.iter().map(|z| z.norm_sqr()).collect();
        self.eval_m(&m)
    }

    /// dH/dm_nu at the invariants of x.
    fn grad_m(&self, m: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for (c, e) in &self.monomials {
            for nu in 0..self.n {
                if e[nu] == 0 {
                    continue;
                }
                let mut term = c * e[nu] as f64;
                for (k, (exp, v)) in e.iter().zip(m).enumerate() {
                    let p = if k == nu { *exp - 1 } else { *exp };
                    term *= v.powi(p as i32);
                }
                g[nu] += term;
            }
        }
        g
    }

    /// Riemannian gradient: grad H(x)_nu = 2 (dH/dm_nu) x_nu.
    pub fn gradient(&self, x: &[Complex64]) -> Vec<Complex64> {
        let m: Vec<f64> = x.iter().map(|z| z.norm_sqr()).collect();
        let gm = self.grad_m(&m);
        x.iter().zip(&gm).map(|(z, g)| 2.0 * g * z).collect()
    }

    /// Spot-check of G-invariance at random points; the invariants m_nu are
    /// rotation-invariant by construction, so this guards the evaluator.
    pub fn check_invariance(&self, model: &WeightModel, seed: u64) -> Result<()> {
        use rand::{Rng, SeedableRng};
        if self.n != model.n {
            return Err(VortexError::ShapeMismatch(format!(
                "hamiltonian has {} variables, model has {}",
                self.n, model.n
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x: Vec<Complex64> = (0..self.n)
                .map(|_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let theta: Vec<f64> = (0..model.r).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let rotated: Vec<Complex64> = (0..self.n)
                .map(|nu| Complex64::from_polar(1.0, model.w_dot(nu, &theta)) * x[nu])
                .collect();
            if (self.eval(&rotated) - self.eval(&x)).abs() > 1e-10 * (1.0 + self.eval(&x).abs()) {
                return Err(VortexError::ShapeMismatch(
                    "hamiltonian is not G-invariant".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Parse a polynomial in m0..m{n-1} (the invariants |z_nu|^2):
/// numbers, `m<k>`, `+ - * ^`, parentheses.
pub fn parse_hamiltonian(src: &str, n: usize) -> Result<InvariantHamiltonian> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
        n,
    };
    let poly = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(VortexError::ShapeMismatch(format!(
            "unexpected trailing input at byte {} of hamiltonian",
            p.pos
        )));
    }
    Ok(InvariantHamiltonian {
        n,
        monomials: poly.0,
    })
}

#[derive(Clone)]
struct Poly(Vec<(f64, Vec<u32>)>);

impl Poly {
    fn constant(c: f64, n: usize) -> Self {
        Poly(vec![(c, vec![0; n])])
    }
    fn var(k: usize, n: usize) -> Self {
        let mut e = vec![0; n];
        e[k] = 1;
        Poly(vec![(1.0, e)])
    }
    fn add(mut self, other: Poly) -> Poly {
        self.0.extend(other.0);
        self.compact()
    }
    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Vec::new();
        for (c1, e1) in &self.0 {
            for (c2, e2) in &other.0 {
                let e: Vec<u32> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                out.push((c1 * c2, e));
            }
        }
        Poly(out).compact()
    }
    fn scale(mut self, c: f64) -> Poly {
        for (coef, _) in self.0.iter_mut() {
            *coef *= c;
        }
        self
    }
    fn compact(mut self) -> Poly {
        self.0.sort_by(|a, b| a.1.cmp(&b.1));
        let mut out: Vec<(f64, Vec<u32>)> = Vec::new();
        for (c, e) in self.0 {
            if let Some(last) = out.last_mut() {
                if last.1 == e {
                    last.0 += c;
                    continue;
                }
            }
            out.push((c, e));
        }
        out.retain(|(c, _)| *c != 0.0);
        Poly(out)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }
    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }
    fn expr(&mut self) -> Result<Poly> {
        let mut acc = match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                self.term()?.scale(-1.0)
            }
            Some(b'+') => {
                self.pos += 1;
                self.term()?
            }
            _ => self.term()?,
        };
        while let Some(op) = self.peek() {
            match op {
                b'+' => {
                    self.pos += 1;
                    acc = acc.add(self.term()?);
                }
                b'-' => {
                    self.pos += 1;
                    acc = acc.add(self.term()?.scale(-1.0));
                }
                _ => break,
            }
        }
        Ok(acc)
    }
    fn term(&mut self) -> Result<Poly> {
        let mut acc = self.factor()?;
        while let Some(b'*') = self.peek() {
            self.pos += 1;
            let f = self.factor()?;
            acc = acc.mul(&f);
        }
        Ok(acc)
    }
    fn factor(&mut self) -> Result<Poly> {
        let base = self.base()?;
        if let Some(b'^') = self.peek() {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(VortexError::ShapeMismatch(
                    "expected integer exponent after ^".into(),
                ));
            }
            let exp: u32 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|_| VortexError::ShapeMismatch("bad exponent".into()))?;
            let mut acc = Poly::constant(1.0, self.n);
            for _ in 0..exp {
                acc = acc.mul(&base);
            }
            return Ok(acc);
        }
        Ok(base)
    }
    fn base(&mut self) -> Result<Poly> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(VortexError::ShapeMismatch("missing )".into()));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(b'm') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                if start == self.pos {
                    return Err(VortexError::ShapeMismatch("expected index after m".into()));
                }
                let k: usize = std::str::from_utf8(&self.src[start..self.pos])
                    .unwrap()
                    .parse()
                    .map_err(|_| VortexError::ShapeMismatch("bad variable index".into()))?;
                if k >= self.n {
                    return Err(VortexError::ShapeMismatch(format!(
                        "variable m{k} out of range for n={}",
                        self.n
                    )));
                }
                Ok(Poly::var(k, self.n))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_digit()
                        || self.src[self.pos] == b'.'
                        || self.src[self.pos] == b'e'
                        || self.src[self.pos] == b'E'
                        || ((self.src[self.pos] == b'-' || self.src[self.pos] == b'+')
                            && self.pos > start
                            && (self.src[self.pos - 1] == b'e' || self.src[self.pos - 1] == b'E')))
                {
                    self.pos += 1;
                }
                let v: f64 = std::str::from_utf8(&self.src[start..self.pos])
                    .unwrap()
                    .parse()
                    .map_err(|_| VortexError::ShapeMismatch("bad number".into()))?;
                Ok(Poly::constant(v, self.n))
            }
            other => Err(VortexError::ShapeMismatch(format!(
                "unexpected token {:?} in hamiltonian",
                other.map(|c| c as char)
            ))),
        }
    }
}

/// Integration knobs for `flow_integrate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowOptions {
    /// Coefficient of the constraint-damping term grad |mu|^2 / 2 in the
    /// x-equation; 0 recovers the undamped flow.
    pub moment_damping: f64,
    /// Halve dt and restart this many times if the state blows up.
    pub max_halvings: usize,
    /// Norm threshold treated as blowup.
    pub blowup_norm: f64,
    /// Keep every k-th state in the trajectory (1 keeps all).
    pub keep_every: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            moment_damping: 1.0,
            max_halvings: 3,
            blowup_norm: 1e8,
            keep_every: 1,
        }
    }
}

/// Trajectory with kept states and the functional L = <mu, eta> - H
/// recorded at every step (index k is time k * dt_used).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub states: Vec<FlowState>,
    pub l_values: Vec<f64>,
    pub dt_used: f64,
}

/// L(x, eta) = <mu(x), eta> - H(x).
pub fn flow_functional(
    model: &WeightModel,
    ham: &InvariantHamiltonian,
    x: &[Complex64],
    eta: &[f64],
) -> f64 {
    let mu = moment_map(model, x).expect("shape checked by caller");
    mu.iter().zip(eta).map(|(m, e)| m * e).sum::<f64>() - ham.eval(x)
}

fn velocity(
    model: &WeightModel,
    ham: &InvariantHamiltonian,
    damping: f64,
    x: &[Complex64],
    eta: &[f64],
) -> (Vec<Complex64>, Vec<f64>) {
    let mu = moment_map(model, x).expect("shapes checked");
    let grad_h = ham.gradient(x);
    let xeta = infinitesimal_action(model, eta, x).expect("shapes checked");
    let i = Complex64::new(0.0, 1.0);
    let mut xdot = Vec::with_capacity(x.len());
    for nu in 0..x.len() {
        // (dmu)^* mu = sum_j mu_j (W e_j)_nu x_nu
        let wmu = model.w_dot(nu, &mu);
        xdot.push(grad_h[nu] - i * xeta[nu] - damping * wmu * x[nu]);
    }
    let etadot = mu.iter().map(|m| -m).collect();
    (xdot, etadot)
}

/// Classical fixed-step RK4 on the flow; dt is halved and the run restarted
/// on blowup, up to `max_halvings` times.
pub fn flow_integrate(
    initial: &FlowState,
    model: &WeightModel,
    ham: &InvariantHamiltonian,
    dt: f64,
    steps: usize,
    opts: &FlowOptions,
) -> Result<FlowTrajectory> {
    if !(dt > 0.0) {
        return Err(VortexError::ShapeMismatch("dt must be positive".into()));
    }
    if initial.x.len() != model.n || initial.eta.len() != model.r {
        return Err(VortexError::ShapeMismatch(format!(
            "flow state has n={}, r={}, model is {}x{}",
            initial.x.len(),
            initial.eta.len(),
            model.n,
            model.r
        )));
    }
    ham.check_invariance(model, 17)?;
    let keep = opts.keep_every.max(1);

    let mut dt_try = dt;
    'attempt: for _halving in 0..=opts.max_halvings {
        let mut x = initial.x.clone();
        let mut eta = initial.eta.clone();
        let mut t = initial.t;
        let mut states = Vec::with_capacity(steps / keep + 2);
        let mut l_values = Vec::with_capacity(steps + 1);
        states.push(FlowState {
            x: x.clone(),
            eta: eta.clone(),
            t,
        });
        l_values.push(flow_functional(model, ham, &x, &eta));
        for step in 1..=steps {
            let (k1x, k1e) = velocity(model, ham, opts.moment_damping, &x, &eta);
            let xa: Vec<Complex64> =
                x.iter().zip(&k1x).map(|(a, b)| a + 0.5 * dt_try * b).collect();
            let ea: Vec<f64> = eta.iter().zip(&k1e).map(|(a, b)| a + 0.5 * dt_try * b).collect();
            let (k2x, k2e) = velocity(model, ham, opts.moment_damping, &xa, &ea);
            let xb: Vec<Complex64> =
                x.iter().zip(&k2x).map(|(a, b)| a + 0.5 * dt_try * b).collect();
            let eb: Vec<f64> = eta.iter().zip(&k2e).map(|(a, b)| a + 0.5 * dt_try * b).collect();
            let (k3x, k3e) = velocity(model, ham, opts.moment_damping, &xb, &eb);
            let xc: Vec<Complex64> = x.iter().zip(&k3x).map(|(a, b)| a + dt_try * b).collect();
            let ec: Vec<f64> = eta.iter().zip(&k3e).map(|(a, b)| a + dt_try * b).collect();
            let (k4x, k4e) = velocity(model, ham, opts.moment_damping, &xc, &ec);
            for nu in 0..x.len() {
                x[nu] += dt_try / 6.0 * (k1x[nu] + 2.0 * k2x[nu] + 2.0 * k3x[nu] + k4x[nu]);
            }
            for k in 0..eta.len() {
                eta[k] += dt_try / 6.0 * (k1e[k] + 2.0 * k2e[k] + 2.0 * k3e[k] + k4e[k]);
            }
            t += dt_try;
            let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
                + eta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > opts.blowup_norm {
                dt_try *= 0.5;
                continue 'attempt;
            }
            l_values.push(flow_functional(model, ham, &x, &eta));
            if step % keep == 0 || step == steps {
                states.push(FlowState {
                    x: x.clone(),
                    eta: eta.clone(),
                    t,
                });
            }
        }
        return Ok(FlowTrajectory {
            states,
            l_values,
            dt_used: dt_try,
        });
    }
    Err(VortexError::StepBlowup(opts.blowup_norm))
}

/// True iff |grad H(x) - J X_eta(x)| <= tol and |mu(x)| <= tol.
pub fn critical_check(
    x: &[Complex64],
    eta: &[f64],
    model: &WeightModel,
    ham: &InvariantHamiltonian,
    tol: f64,
) -> bool {
    let Ok(mu) = moment_map(model, x) else {
        return false;
    };
    let Ok(xeta) = infinitesimal_action(model, eta, x) else {
        return false;
    };
    let grad_h = ham.gradient(x);
    let i = Complex64::new(0.0, 1.0);
    let stat: f64 = grad_h
        .iter()
        .zip(&xeta)
        .map(|(g, v)| (g - i * v).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let mu_norm = mu.iter().map(|m| m * m).sum::<f64>().sqrt();
    stat <= tol && mu_norm <= tol
}

/// Real 2n-vector view of C^n used by the nondegeneracy check.
fn realify(x: &[Complex64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * x.len());
    for z in x {
        v.push(z.re);
        v.push(z.im);
    }
    v
}

/// Orthonormal basis of ker(dmu(x)) intersected with (im L_x)^perp, the
/// finite-dimensional model of the reduced tangent space.
fn quotient_basis(model: &WeightModel, x: &[Complex64]) -> DMatrix<f64> {
    let n2 = 2 * model.n;
    // dmu rows.
    let mut dmu = DMatrix::<f64>::zeros(model.r, n2);
    for j in 0..model.r {
        for nu in 0..model.n {
            let w = model.weight(nu, j) as f64;
            dmu[(j, 2 * nu)] = w * x[nu].re;
            dmu[(j, 2 * nu + 1)] = w * x[nu].im;
        }
    }
    // L_x columns.
    let mut lx = DMatrix::<f64>::zeros(n2, model.r);
    for j in 0..model.r {
        let e: Vec<f64> = (0..model.r).map(|k| if k == j { 1.0 } else { 0.0 }).collect();
        let col = infinitesimal_action(model, &e, x).expect("shapes");
        let rc = realify(&col);
        for row in 0..n2 {
            lx[(row, j)] = rc[row];
        }
    }
    // ker dmu = small-eigenvalue eigenvectors of dmu^T dmu.
    let kbasis = null_space(&(dmu.transpose() * &dmu), 1e-12);
    // Remove im L_x: kernel coordinates of L, then the orthogonal
    // complement of their span inside the kernel.
    let c = kbasis.transpose() * lx; // kdim x r
    let null_coords = null_space(&(&c * c.transpose()), 1e-12);
    kbasis * null_coords
}

/// Orthonormal basis of the near-null space of a symmetric PSD matrix,
/// eigenvalues below `rel_tol` times the largest.
fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = rel_tol * (1.0 + lmax);
    let cols: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|k| eig.eigenvalues[*k] < tol)
        .collect();
    let mut out = DMatrix::<f64>::zeros(m.nrows(), cols.len());
    for (kk, col) in cols.iter().enumerate() {
        for row in 0..m.nrows() {
            out[(row, kk)] = eig.eigenvectors[(row, *col)];
        }
    }
    out
}

/// Nondegeneracy of a relative fixed point as a finite rank condition:
/// df(x0) - g0 must map ker dmu(x0)/im L_{x0} isomorphically onto
/// ker dmu(g0 x0)/im L_{g0 x0} (abelian stabilizer: all of R^r).
pub fn nondeg_check(
    dfx: &DMatrix<f64>,
    x: &[Complex64],
    g0_action: &DMatrix<f64>,
    model: &WeightModel,
    tol: f64,
) -> Result<bool> {
    let n2 = 2 * model.n;
    if x.len() != model.n
        || dfx.nrows() != n2
        || dfx.ncols() != n2
        || g0_action.nrows() != n2
        || g0_action.ncols() != n2
    {
        return Err(VortexError::ShapeMismatch(format!(
            "nondeg_check expects {}x{} matrices",
            n2, n2
        )));
    }
    let mu = moment_map(model, x)?;
    let mu_norm = mu.iter().map(|m| m * m).sum::<f64>().sqrt();
    if mu_norm > tol {
        return Err(VortexError::ShapeMismatch(format!(
            "x is not on the level set: |mu| = {mu_norm:.3e} > tol"
        )));
    }

    let q0 = quotient_basis(model, x);
    // g0 x as a complex vector.
    let xr = realify(x);
    let xr_v = nalgebra::DVector::from_column_slice(&xr);
    let yr = g0_action * xr_v;
    let y: Vec<Complex64> = (0..model.n)
        .map(|nu| Complex64::new(yr[2 * nu], yr[2 * nu + 1]))
        .collect();
    let q1 = quotient_basis(model, &y);

    if q0.ncols() != q1.ncols() {
        // Dimension jump (e.g. x and g0 x have different stabilizers): the
        // induced map cannot be an isomorphism.
        return Ok(false);
    }
    if q0.ncols() == 0 {
        return Ok(true);
    }
    let diff = dfx - g0_action;
    let induced = q1.transpose() * (&diff * q0);
    let svd = induced.svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(smin > tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parser_and_gradient() {
        let h = parse_hamiltonian("0.5*m0 + 0.25*m0*m1 - m1^2", 2).unwrap();
        let x = [Complex64::new(1.0, 1.0), Complex64::new(0.5, -0.5)];
        // m0 = 2, m1 = 0.5
        let want = 0.5 * 2.0 + 0.25 * 2.0 * 0.5 - 0.25;
        assert!((h.eval(&x) - want).abs() < 1e-14);
        let g = h.gradient(&x);
        // dH/dm0 = 0.5 + 0.25 m1 = 0.625; grad_z0 = 2*0.625*z0
        assert!((g[0] - 2.0 * 0.625 * x[0]).norm() < 1e-14);
        // dH/dm1 = 0.25 m0 - 2 m1 = 0.5 - 1.0 = -0.5
        assert!((g[1] - 2.0 * (-0.5) * x[1]).norm() < 1e-14);

        assert!(parse_hamiltonian("m2", 2).is_err());
        assert!(parse_hamiltonian("m0 +", 1).is_err());
        assert!(parse_hamiltonian("(m0", 1).is_err());
    }

    #[test]
    fn stationary_initial_condition_stays() {
        let tau = 0.8;
        let model = WeightModel::vortex(1, tau);
        let ham = InvariantHamiltonian::zero(1);
        let x0 = vec![Complex64::new((2.0 * tau).sqrt(), 0.0)];
        let init = FlowState {
            x: x0.clone(),
            eta: vec![0.0],
            t: 0.0,
        };
        let traj =
            flow_integrate(&init, &model, &ham, 1e-2, 200, &FlowOptions::default()).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last.x[0] - x0[0]).norm() < 1e-12);
        assert!(last.eta[0].abs() < 1e-12);
    }

    #[test]
    fn quadratic_hamiltonian_converges_to_critical_point() {
        let tau = 1.5;
        let a = 0.7;
        let model = WeightModel::vortex(1, tau);
        let ham = InvariantHamiltonian::quadratic(1, a);
        let init = FlowState {
            x: vec![Complex64::new(0.9, 0.4)],
            eta: vec![-a + 0.3],
            t: 0.0,
        };
        let traj =
            flow_integrate(&init, &model, &ham, 5e-3, 40_000, &FlowOptions::default()).unwrap();
        let last = traj.states.last().unwrap();
        let m = last.x[0].norm_sqr();
        assert!((m - 2.0 * tau).abs() < 1e-6, "|x|^2 = {m}, want {}", 2.0 * tau);
        // Stationarity: grad H = J X_eta forces eta* = -a.
        assert!((last.eta[0] + a).abs() < 1e-6, "eta {}", last.eta[0]);
        assert!(critical_check(&last.x, &last.eta, &model, &ham, 1e-6));
    }

    #[test]
    fn flow_equivariance() {
        let tau = 1.0;
        let model = WeightModel::vortex(1, tau);
        let ham = InvariantHamiltonian::quadratic(1, 0.4);
        let x0 = Complex64::new(0.8, -0.3);
        let theta = 1.1;
        let rot = Complex64::from_polar(1.0, theta);
        let run = |x: Complex64| {
            let init = FlowState {
                x: vec![x],
                eta: vec![0.2],
                t: 0.0,
            };
            flow_integrate(&init, &model, &ham, 1e-2, 1000, &FlowOptions::default()).unwrap()
        };
        let t1 = run(x0);
        let t2 = run(rot * x0);
        for (s1, s2) in t1.states.iter().zip(&t2.states) {
            assert!((rot * s1.x[0] - s2.x[0]).norm() < 1e-8);
            assert!((s1.eta[0] - s2.eta[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn functional_nonincreasing_along_converging_run() {
        // Strong constraint damping keeps the slow-manifold drift of L
        // below the per-step slack while the trajectory still starts well
        // off the vacuum and genuinely converges.
        let tau = 1.5;
        let a = 0.7;
        let model = WeightModel::vortex(1, tau);
        let ham = InvariantHamiltonian::quadratic(1, a);
        let x0 = (0.7 * 2.0 * tau).sqrt();
        let init = FlowState {
            x: vec![Complex64::new(0.8 * x0, 0.6 * x0)],
            eta: vec![-a],
            t: 0.0,
        };
        let opts = FlowOptions {
            moment_damping: 150.0,
            keep_every: 10_000,
            ..Default::default()
        };
        let traj = flow_integrate(&init, &model, &ham, 5e-3, 1_500_000, &opts).unwrap();
        let worst = traj
            .l_values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(worst <= 1e-9, "worst L increment {worst}");
        let last = traj.states.last().unwrap();
        assert!((last.x[0].norm_sqr() - 2.0 * tau).abs() < 1e-6);
        assert!(critical_check(&last.x, &last.eta, &model, &ham, 1e-6));
    }

    #[test]
    fn critical_check_cases() {
        let tau = 0.9;
        let model = WeightModel::vortex(1, tau);
        let ham = InvariantHamiltonian::quadratic(1, 0.3);
        // Origin fails: mu(0) = -tau.
        assert!(!critical_check(
            &[Complex64::new(0.0, 0.0)],
            &[0.0],
            &model,
            &ham,
            1e-6
        ));
        // Random non-critical point fails.
        assert!(!critical_check(
            &[Complex64::new(1.0, 2.0)],
            &[0.5],
            &model,
            &ham,
            1e-6
        ));
        // Constructed critical point passes: |x|^2 = 2 tau, eta = -a.
        assert!(critical_check(
            &[Complex64::new((2.0 * tau).sqrt(), 0.0)],
            &[-0.3],
            &model,
            &ham,
            1e-9
        ));
    }

    #[test]
    fn nondeg_quotient_dimensions() {
        // W=[1], n=1: quotient is 0-dimensional, so df = g0 passes.
        let tau = 0.5;
        let model = WeightModel::vortex(1, tau);
        let x = vec![Complex64::new((2.0 * tau).sqrt(), 0.0)];
        let theta = 0.7f64;
        let g0 = DMatrix::from_row_slice(
            2,
            2,
            &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        );
        let df = g0.clone();
        assert!(nondeg_check(&df, &x, &g0, &model, 1e-8).unwrap());
    }

    #[test]
    fn nondeg_detects_shear_and_rank_drop() {
        // n=2, r=1, weights (1,1): level set S^3, quotient dim 2.
        let model = WeightModel::new(2, 1, vec![1, 1], vec![1.0]).unwrap();
        let x = vec![Complex64::new((2.0f64).sqrt(), 0.0), Complex64::new(0.0, 0.0)];
        // mu = (1/2)(2) - 1 = 0 on the level set.
        let g0 = DMatrix::<f64>::identity(4, 4);
        // df = g0 + shear along a quotient direction: invertible "identity
        // plus nilpotent" on the quotient fails (df - g0 is the shear alone,
        // which is rank 1 on a 2-dim quotient).
        let q = quotient_basis(&model, &x);
        assert_eq!(q.ncols(), 2);
        let dir0 = q.column(0).into_owned();
        let dir1 = q.column(1).into_owned();
        // Map dir0 -> dir1, everything else -> 0 relative to g0.
        let shear = &dir1 * dir0.transpose();
        let df_degenerate = &g0 + &shear;
        assert!(!nondeg_check(&df_degenerate, &x, &g0, &model, 1e-8).unwrap());
        // Full-rank perturbation: df - g0 = identity on the quotient.
        let full = &g0 + (&dir0 * dir0.transpose() + &dir1 * dir1.transpose());
        assert!(nondeg_check(&full, &x, &g0, &model, 1e-8).unwrap());
    }

    #[test]
    fn invariance_check_accepts_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = WeightModel::new(2, 1, vec![1, 2], vec![1.0]).unwrap();
        for _ in 0..5 {
            let c = rng.gen_range(-2.0..2.0);
            let h = parse_hamiltonian(&format!("{c}*m0*m1 + m1^3"), 2).unwrap();
            h.check_invariance(&model, 5).unwrap();
        }
    }
}
