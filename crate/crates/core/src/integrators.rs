//! One-step maps for Langevin models.
//!
//! The conformal symplectic scheme advances `(p, q)` by
//!
//! ```text
//! (I + h²/2 ∇²F(q) M) P₁ = e^{-vh} p - h(1 + vh/2) e^{-vh} f(q) + (1 + vh/2) e^{-vh} Σ ΔW
//! Q₁ = q + h(1 - vh/2) e^{vh} M P₁ + h²/2 M f(q) - h/2 M Σ ΔW
//! ```
//!
//! The only implicit coupling is linear in `P₁` and is solved by a dense LU
//! factorization of the `d × d` step matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mc::IncrementSource;
use crate::models::{LangevinModel, PhaseState};

/// Which one-step map to iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// The weak-order-2 conformal symplectic scheme.
    Gf2,
    /// Explicit Euler–Maruyama, kept as a baseline.
    Em,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Gf2 => "gf2",
            Scheme::Em => "em",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gf2" => Ok(Scheme::Gf2),
            "em" => Ok(Scheme::Em),
            other => Err(Error::Argument(format!("unknown scheme `{other}` (expected gf2 or em)"))),
        }
    }
}

/// Scalar coefficients of the conformal symplectic step for a fixed `h`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Gf2Coefficients {
    pub decay: f64,
    pub force: f64,
    pub noise_p: f64,
    pub kick: f64,
    pub half_h2: f64,
    pub noise_q: f64,
}

impl Gf2Coefficients {
    pub fn new(v: f64, h: f64) -> Self {
        let decay = (-v * h).exp();
        Gf2Coefficients {
            decay,
            force: h * (1.0 + 0.5 * v * h) * decay,
            noise_p: (1.0 + 0.5 * v * h) * decay,
            kick: h * (1.0 - 0.5 * v * h) * (v * h).exp(),
            half_h2: 0.5 * h * h,
            noise_q: -0.5 * h,
        }
    }
}

fn check_step_size(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("step size must be positive and finite, got {h}")))
    }
}

/// Reusable, allocation-free stepper for either scheme.
pub struct Stepper<'a> {
    model: &'a LangevinModel,
    scheme: Scheme,
    h: f64,
    coef: Gf2Coefficients,
    force: Vec<f64>,
    hess: Vec<f64>,
    mat: Vec<f64>,
    mat_copy: Vec<f64>,
    piv: Vec<usize>,
    rhs: Vec<f64>,
    tmp: Vec<f64>,
    col: Vec<f64>,
    sdw: Vec<f64>,
    work: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a LangevinModel, scheme: Scheme, h: f64) -> Result<Self> {
        check_step_size(h)?;
        let d = model.dim();
        Ok(Stepper {
            model,
            scheme,
            h,
            coef: Gf2Coefficients::new(model.friction(), h),
            force: vec![0.0; d],
            hess: vec![0.0; d * d],
            mat: vec![0.0; d * d],
            mat_copy: vec![0.0; d * d],
            piv: vec![0; d],
            rhs: vec![0.0; d],
            tmp: vec![0.0; d],
            col: vec![0.0; d],
            sdw: vec![0.0; d],
            work: vec![0.0; d],
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Advances `z` in place by one step with Brownian increment `dw` (length `m`).
    pub fn step(&mut self, z: &mut PhaseState, dw: &[f64]) -> Result<()> {
        match self.scheme {
            Scheme::Gf2 => self.gf2(z, dw)?,
            Scheme::Em => self.em(z, dw),
        }
        if z.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("{} step produced a non-finite state", self.scheme.name())))
        }
    }

    fn gf2(&mut self, z: &mut PhaseState, dw: &[f64]) -> Result<()> {
        let model = self.model;
        let d = model.dim();
        let m = model.noise_dim();
        let c = self.coef;
        let pot = model.potential();
        let mass = model.mass_row_major();
        let noise = model.noise_row_major();
        pot.force(&z.q, &mut self.force);
        pot.hessian(&z.q, &mut self.hess);

        if d == 1 {
            let mss = mass[0];
            let sdw: f64 = (0..m).map(|r| noise[r] * dw[r]).sum();
            let a = 1.0 + c.half_h2 * self.hess[0] * mss;
            check_condition(a.abs().max(1.0) / a.abs(), self.h)?;
            let p1 = (c.decay * z.p[0] - c.force * self.force[0] + c.noise_p * sdw) / a;
            z.q[0] += mss * (c.kick * p1 + c.half_h2 * self.force[0] + c.noise_q * sdw);
            z.p[0] = p1;
            return Ok(());
        }

        // mat = I + h²/2 ∇²F M
        for i in 0..d {
            for j in 0..d {
                let hm: f64 = (0..d).map(|k| self.hess[i * d + k] * mass[k * d + j]).sum();
                self.mat[i * d + j] = if i == j { 1.0 } else { 0.0 } + c.half_h2 * hm;
            }
        }
        self.mat_copy.copy_from_slice(&self.mat);
        if !linalg::lu_factor(&mut self.mat, &mut self.piv, d) {
            return Err(Error::StepSize { h: self.h, condition: f64::INFINITY, limit: linalg::CONDITION_LIMIT });
        }
        let inv = linalg::inverse_norm1(&self.mat, &self.piv, d, &mut self.col, &mut self.tmp);
        check_condition(linalg::norm1(&self.mat_copy, d).max(1.0) * inv, self.h)?;

        linalg::matvec(noise, d, m, dw, &mut self.sdw);
        for i in 0..d {
            self.rhs[i] = c.decay * z.p[i] - c.force * self.force[i] + c.noise_p * self.sdw[i];
        }
        linalg::lu_solve(&self.mat, &self.piv, d, &mut self.rhs, &mut self.tmp);
        // work = kick P₁ + h²/2 f + noise_q Σ dW, then Q₁ = q + M work
        for i in 0..d {
            self.work[i] = c.kick * self.rhs[i] + c.half_h2 * self.force[i] + c.noise_q * self.sdw[i];
        }
        linalg::matvec(mass, d, d, &self.work, &mut self.tmp);
        for i in 0..d {
            z.q[i] += self.tmp[i];
            z.p[i] = self.rhs[i];
        }
        Ok(())
    }

    fn em(&mut self, z: &mut PhaseState, dw: &[f64]) {
        let model = self.model;
        let d = model.dim();
        let m = model.noise_dim();
        let h = self.h;
        let v = model.friction();
        model.potential().force(&z.q, &mut self.force);
        linalg::matvec(model.noise_row_major(), d, m, dw, &mut self.sdw);
        linalg::matvec(model.mass_row_major(), d, d, &z.p, &mut self.work);
        for i in 0..d {
            z.p[i] += -(self.force[i] + v * z.p[i]) * h + self.sdw[i];
            z.q[i] += h * self.work[i];
        }
    }
}

fn check_condition(condition: f64, h: f64) -> Result<()> {
    if condition.is_finite() && condition <= linalg::CONDITION_LIMIT {
        Ok(())
    } else {
        Err(Error::StepSize { h, condition, limit: linalg::CONDITION_LIMIT })
    }
}

fn check_inputs(model: &LangevinModel, z: &PhaseState, dw: &[f64]) -> Result<()> {
    if z.dim() != model.dim() || z.q.len() != model.dim() {
        return Err(Error::Argument(format!("state dimension {} does not match model dimension {}", z.dim(), model.dim())));
    }
    if dw.len() != model.noise_dim() {
        return Err(Error::Argument(format!("increment has length {}, expected {}", dw.len(), model.noise_dim())));
    }
    if !z.is_finite() || dw.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite state or increment".into()));
    }
    Ok(())
}

/// One step of the conformal symplectic scheme.
pub fn gf2_step(model: &LangevinModel, z: &PhaseState, h: f64, dw: &[f64]) -> Result<PhaseState> {
    check_inputs(model, z, dw)?;
    let mut out = z.clone();
    Stepper::new(model, Scheme::Gf2, h)?.step(&mut out, dw)?;
    Ok(out)
}

/// One Euler–Maruyama step: `P₁ = p - (f(q) + vp)h + ΣΔW`, `Q₁ = q + hMp`.
pub fn em_step(model: &LangevinModel, z: &PhaseState, h: f64, dw: &[f64]) -> Result<PhaseState> {
    check_inputs(model, z, dw)?;
    let mut out = z.clone();
    Stepper::new(model, Scheme::Em, h)?
        .step(&mut out, dw)
        .map_err(|_| Error::Range("Euler–Maruyama step overflowed".into()))?;
    Ok(out)
}

/// Jacobian of the conformal symplectic step with respect to `(p, q)`.
///
/// For nonlinear forces the position blocks depend on `∂(∇²F)/∂q` and so on
/// the increment `dw`. When the potential does not supply third derivatives
/// this falls back to [`gf2_jacobian_fd`] with step `1e-6`.
pub fn gf2_jacobian(model: &LangevinModel, z: &PhaseState, h: f64, dw: &[f64]) -> Result<DMatrix<f64>> {
    let p1 = gf2_step(model, z, h, dw)?;
    let d = model.dim();
    let pot = model.potential();
    let c = Gf2Coefficients::new(model.friction(), h);
    let mut dh = vec![Vec::new(); d];
    for (k, slot) in dh.iter_mut().enumerate() {
        let mut buf = vec![0.0; d * d];
        if !pot.hessian_derivative(&z.q, k, &mut buf) {
            return gf2_jacobian_fd(model, z, h, dw, 1e-6);
        }
        *slot = buf;
    }
    let mut hbuf = vec![0.0; d * d];
    pot.hessian(&z.q, &mut hbuf);
    let hess = DMatrix::from_row_slice(d, d, &hbuf);
    let mass = model.mass();
    let a = DMatrix::identity(d, d) + &hess * mass * c.half_h2;
    let dmat = a
        .try_inverse()
        .ok_or(Error::StepSize { h, condition: f64::INFINITY, limit: linalg::CONDITION_LIMIT })?;
    let mp1 = mass * DVector::from_column_slice(&p1.p);

    let jpp = &dmat * c.decay;
    let mut jpq = DMatrix::zeros(d, d);
    for k in 0..d {
        let dhk = DMatrix::from_row_slice(d, d, &dh[k]);
        let rhs = -hess.column(k) * c.force - (&dhk * &mp1) * c.half_h2;
        jpq.set_column(k, &(&dmat * rhs));
    }
    let jqp = mass * &jpp * c.kick;
    let jqq = DMatrix::identity(d, d) + mass * &jpq * c.kick + mass * &hess * c.half_h2;

    let mut j = DMatrix::zeros(2 * d, 2 * d);
    j.view_mut((0, 0), (d, d)).copy_from(&jpp);
    j.view_mut((0, d), (d, d)).copy_from(&jpq);
    j.view_mut((d, 0), (d, d)).copy_from(&jqp);
    j.view_mut((d, d), (d, d)).copy_from(&jqq);
    Ok(j)
}

/// Central finite-difference Jacobian of [`gf2_step`].
pub fn gf2_jacobian_fd(
    model: &LangevinModel,
    z: &PhaseState,
    h: f64,
    dw: &[f64],
    eps: f64,
) -> Result<DMatrix<f64>> {
    finite_difference_jacobian(z, eps, |s| gf2_step(model, s, h, dw))
}

pub(crate) fn finite_difference_jacobian<F>(z: &PhaseState, eps: f64, map: F) -> Result<DMatrix<f64>>
where
    F: Fn(&PhaseState) -> Result<PhaseState>,
{
    let base = z.to_vec();
    let n = base.len();
    let mut j = DMatrix::zeros(n, n);
    let mut x = base.clone();
    for col in 0..n {
        x[col] = base[col] + eps;
        let fp = map(&PhaseState::from_slice(&x)?)?.to_vec();
        x[col] = base[col] - eps;
        let fm = map(&PhaseState::from_slice(&x)?)?.to_vec();
        x[col] = base[col];
        for row in 0..n {
            j[(row, col)] = (fp[row] - fm[row]) / (2.0 * eps);
        }
    }
    Ok(j)
}

/// A discrete path `t_n = nh` with the corresponding states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
}

/// Iterates a one-step map `n_steps` times, drawing one increment per step.
pub fn simulate(
    model: &LangevinModel,
    scheme: Scheme,
    z0: &PhaseState,
    h: f64,
    n_steps: usize,
    noise: &mut dyn IncrementSource,
) -> Result<Trajectory> {
    check_inputs(model, z0, &vec![0.0; model.noise_dim()])?;
    if noise.dim() != model.noise_dim() {
        return Err(Error::Argument(format!(
            "increment source has dimension {}, model expects {}",
            noise.dim(),
            model.noise_dim()
        )));
    }
    let mut stepper = Stepper::new(model, scheme, h)?;
    let mut dw = vec![0.0; model.noise_dim()];
    let mut z = z0.clone();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(z.clone());
    for n in 0..n_steps {
        noise
            .next_increment(&mut dw)
            .map_err(|e| Error::Step { step: n + 1, source: Box::new(e) })?;
        stepper
            .step(&mut z, &dw)
            .map_err(|e| Error::Step { step: n + 1, source: Box::new(e) })?;
        times.push((n + 1) as f64 * h);
        states.push(z.clone());
    }
    Ok(Trajectory { times, states })
}

/// A Gaussian law on `R^{2d}` in `(p, q)` ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    /// Checks symmetry (to `1e-12`) and positive semidefiniteness; eigenvalues
    /// in `[-1e-12, 0)` are clipped to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Argument("covariance shape does not match the mean".into()));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Argument("covariance is not symmetric".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min < -1e-12 * scale {
            return Err(Error::Argument(format!("covariance has negative eigenvalue {min:e}")));
        }
        let cov = if min < 0.0 {
            let clipped = eig.eigenvalues.map(|l| l.max(0.0));
            &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
        } else {
            sym
        };
        Ok(GaussianLaw { mean, cov })
    }

    pub fn point_mass(z: &PhaseState) -> Self {
        let v = z.to_vec();
        let n = v.len();
        GaussianLaw { mean: DVector::from_vec(v), cov: DMatrix::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `Z_{n+1} = B Z_n + c + G ΔW` with `ΔW ~ N(0, h I_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStepMap {
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
}

impl AffineStepMap {
    pub fn apply(&self, z: &PhaseState, dw: &[f64]) -> PhaseState {
        let zv = DVector::from_vec(z.to_vec());
        let out = &self.b * zv + &self.c + &self.g * DVector::from_column_slice(dw);
        PhaseState::from_slice(out.as_slice()).expect("even dimension")
    }
}

fn linear_stiffness(model: &LangevinModel) -> Result<DMatrix<f64>> {
    model
        .potential()
        .stiffness()
        .ok_or_else(|| Error::Capability("operation requires a linear force f(q) = Kq".into()))
}

/// The conformal symplectic scheme for a linear force `f(q) = Kq`, written as
/// an affine map. Built from closed-form block matrices, independently of
/// [`Stepper`].
pub fn gf2_affine_map(model: &LangevinModel, h: f64) -> Result<AffineStepMap> {
    check_step_size(h)?;
    let k = linear_stiffness(model)?;
    let d = model.dim();
    let m = model.noise_dim();
    let mass = model.mass();
    let sigma = model.noise();
    let c = Gf2Coefficients::new(model.friction(), h);
    let a = DMatrix::identity(d, d) + &k * mass * c.half_h2;
    let dmat = a
        .try_inverse()
        .ok_or(Error::StepSize { h, condition: f64::INFINITY, limit: linalg::CONDITION_LIMIT })?;
    // P₁ = D(e^{-vh} p - c_f K q + c_n Σ ΔW)
    let bpp = &dmat * c.decay;
    let bpq = -(&dmat * &k) * c.force;
    let gp = &dmat * sigma * c.noise_p;
    // Q₁ = q + kick M P₁ + h²/2 M K q + noise_q M Σ ΔW
    let bqp = mass * &bpp * c.kick;
    let bqq = DMatrix::identity(d, d) + mass * &bpq * c.kick + mass * &k * c.half_h2;
    let gq = mass * &gp * c.kick + mass * sigma * c.noise_q;

    let mut b = DMatrix::zeros(2 * d, 2 * d);
    b.view_mut((0, 0), (d, d)).copy_from(&bpp);
    b.view_mut((0, d), (d, d)).copy_from(&bpq);
    b.view_mut((d, 0), (d, d)).copy_from(&bqp);
    b.view_mut((d, d), (d, d)).copy_from(&bqq);
    let mut g = DMatrix::zeros(2 * d, m);
    g.view_mut((0, 0), (d, m)).copy_from(&gp);
    g.view_mut((d, 0), (d, m)).copy_from(&gq);
    Ok(AffineStepMap { b, c: DVector::zeros(2 * d), g })
}

/// Law after `n` steps of an affine map: `μ ← Bμ + c`, `C ← BCBᵀ + h GGᵀ`.
pub fn propagate_gaussian_chain(
    map: &AffineStepMap,
    init: &GaussianLaw,
    n: usize,
    h: f64,
) -> Result<GaussianLaw> {
    let mut law = init.clone();
    gaussian_chain_for_each(map, init, n, h, |_, l| {
        law = l.clone();
        Ok(())
    })?;
    Ok(law)
}

/// Calls `visit(k, law_k)` for `k = 1..=n`.
pub fn gaussian_chain_for_each<F>(
    map: &AffineStepMap,
    init: &GaussianLaw,
    n: usize,
    h: f64,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &GaussianLaw) -> Result<()>,
{
    let dim = init.dim();
    if map.b.nrows() != dim || map.b.ncols() != dim || map.c.len() != dim || map.g.nrows() != dim {
        return Err(Error::Argument("affine map and law dimensions disagree".into()));
    }
    let noise = &map.g * map.g.transpose() * h;
    let bt = map.b.transpose();
    let mut law = init.clone();
    for k in 1..=n {
        law.mean = &map.b * &law.mean + &map.c;
        let cov = &map.b * &law.cov * &bt + &noise;
        law.cov = (&cov + cov.transpose()) * 0.5;
        visit(k, &law)?;
    }
    Ok(())
}

/// Exact Gaussian law at time `t` of a model with linear force `f(q) = Kq`.
///
/// With drift matrix `A = [[-vI, -K], [M, 0]]` the mean is `e^{At} z₀` and
/// the covariance is `∫₀ᵗ e^{As} SSᵀ e^{Aᵀs} ds`, `S = [Σ; 0]`. Both are
/// obtained from the Van Loan block exponential on a short interval
/// `τ = t / 2^k` and then doubled `k` times,
/// `C(2τ) = e^{Aτ} C(τ) e^{Aᵀτ} + C(τ)`.
pub fn linear_exact_moments(model: &LangevinModel, z0: &PhaseState, t: f64) -> Result<GaussianLaw> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Argument(format!("time must be non-negative and finite, got {t}")));
    }
    let k = linear_stiffness(model)?;
    let d = model.dim();
    let n = 2 * d;
    let z = DVector::from_vec(z0.to_vec());
    if t == 0.0 {
        return Ok(GaussianLaw { mean: z, cov: DMatrix::zeros(n, n) });
    }
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (d, d)).copy_from(&(DMatrix::identity(d, d) * -model.friction()));
    a.view_mut((0, d), (d, d)).copy_from(&(-&k));
    a.view_mut((d, 0), (d, d)).copy_from(model.mass());
    let mut s = DMatrix::zeros(n, model.noise_dim());
    s.view_mut((0, 0), (d, model.noise_dim())).copy_from(model.noise());
    let qq = &s * s.transpose();

    const MAX_TAU: f64 = 0.25;
    let mut doublings = 0u32;
    let mut tau = t;
    while tau > MAX_TAU {
        tau *= 0.5;
        doublings += 1;
    }
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-&a * tau));
    block.view_mut((0, n), (n, n)).copy_from(&(&qq * tau));
    block.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * tau));
    let e = block.exp();
    let f12 = e.view((0, n), (n, n)).into_owned();
    let f22 = e.view((n, n), (n, n)).into_owned();
    let mut phi = f22.transpose();
    let mut cov = &phi * f12;
    cov = (&cov + cov.transpose()) * 0.5;
    for _ in 0..doublings {
        let next = &phi * &cov * phi.transpose() + &cov;
        cov = (&next + next.transpose()) * 0.5;
        phi = &phi * &phi;
    }
    Ok(GaussianLaw { mean: &phi * z, cov })
}
