//! Langevin problem definitions.
//!
//! A [`LangevinModel`] describes `dP = -f(Q) dt - vP dt + Σ dW`, `dQ = MP dt`.
//! The noise matrix is stored with the plus sign shown here; formulas written
//! with the opposite convention use `σ = -Σ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A smooth potential `F: R^d → R` with its gradient `f = ∇F` and Hessian.
///
/// Matrices are written row-major into caller-provided buffers so that the
/// integrators can evaluate them without allocating.
pub trait Potential: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, q: &[f64]) -> f64;

    /// Writes `f(q) = ∇F(q)` into `out`.
    fn force(&self, q: &[f64], out: &mut [f64]);

    /// Writes `∇²F(q)` (row-major, `d × d`) into `out`.
    fn hessian(&self, q: &[f64], out: &mut [f64]);

    /// Writes `∂(∇²F)/∂q_k` into `out` and returns `true`, or returns `false`
    /// when third derivatives are not available.
    fn hessian_derivative(&self, _q: &[f64], _k: usize, _out: &mut [f64]) -> bool {
        false
    }

    /// The constant matrix `K` when the force is linear, `f(q) = Kq`.
    fn stiffness(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// `F(q) = ½ qᵀKq` with symmetric `K`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    stiffness: DMatrix<f64>,
}

impl Quadratic {
    pub fn new(stiffness: DMatrix<f64>) -> Result<Self> {
        if !stiffness.is_square() || stiffness.nrows() == 0 {
            return Err(Error::Argument("stiffness must be a non-empty square matrix".into()));
        }
        if (&stiffness - stiffness.transpose()).amax() > 1e-12 * stiffness.amax().max(1.0) {
            return Err(Error::Argument("stiffness must be symmetric".into()));
        }
        Ok(Quadratic { stiffness })
    }
}

impl Potential for Quadratic {
    fn dim(&self) -> usize {
        self.stiffness.nrows()
    }

    fn value(&self, q: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += q[i] * self.stiffness[(i, j)] * q[j];
            }
        }
        0.5 * s
    }

    fn force(&self, q: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            out[i] = (0..d).map(|j| self.stiffness[(i, j)] * q[j]).sum();
        }
    }

    fn hessian(&self, _q: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.stiffness[(i, j)];
            }
        }
    }

    fn hessian_derivative(&self, _q: &[f64], _k: usize, out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|x| *x = 0.0);
        true
    }

    fn stiffness(&self) -> Option<DMatrix<f64>> {
        Some(self.stiffness.clone())
    }
}

/// Tilted quartic well `F(q) = (1 - q²)² - q/2`, so `f(q) = 4q³ - 4q - ½`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TiltedDoubleWell;

impl Potential for TiltedDoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, q: &[f64]) -> f64 {
        let s = 1.0 - q[0] * q[0];
        s * s - 0.5 * q[0]
    }

    fn force(&self, q: &[f64], out: &mut [f64]) {
        let x = q[0];
        out[0] = 4.0 * x * x * x - 4.0 * x - 0.5;
    }

    fn hessian(&self, q: &[f64], out: &mut [f64]) {
        out[0] = 12.0 * q[0] * q[0] - 4.0;
    }

    fn hessian_derivative(&self, q: &[f64], _k: usize, out: &mut [f64]) -> bool {
        out[0] = 24.0 * q[0];
        true
    }
}

/// Damped linear oscillator `dP = -aQ dt - vP dt - sigma dW`, `dQ = aP dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearOscillator {
    pub a: f64,
    pub v: f64,
    pub sigma: f64,
}

impl LinearOscillator {
    pub fn model(self) -> Result<LangevinModel> {
        let LinearOscillator { a, v, sigma } = self;
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Argument(format!("linear oscillator needs a > 0, got {a}")));
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Argument(format!("linear oscillator needs v > 0, got {v}")));
        }
        if sigma == 0.0 || !sigma.is_finite() {
            return Err(Error::Argument("linear oscillator needs sigma != 0".into()));
        }
        let potential = Quadratic::new(DMatrix::from_element(1, 1, a))?;
        let mut model = LangevinModel::new(
            Arc::new(potential),
            DMatrix::from_element(1, 1, a),
            v,
            DMatrix::from_element(1, 1, -sigma),
        )?;
        model.kind = ModelKind::Linear(self);
        Ok(model)
    }
}

/// Tilted double well with `M = 1` and noise `+sqrt(2v/beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub v: f64,
    pub beta: f64,
}

impl DoubleWell {
    pub fn model(self) -> Result<LangevinModel> {
        let DoubleWell { v, beta } = self;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Argument(format!("double well needs v > 0, got {v}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Argument(format!("double well needs beta > 0, got {beta}")));
        }
        let mut model = LangevinModel::new(
            Arc::new(TiltedDoubleWell),
            DMatrix::identity(1, 1),
            v,
            DMatrix::from_element(1, 1, (2.0 * v / beta).sqrt()),
        )?;
        model.kind = ModelKind::DoubleWell(self);
        Ok(model)
    }
}

/// Which construction produced a model; selects the closed-form Gibbs density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Linear(LinearOscillator),
    DoubleWell(DoubleWell),
    Custom,
}

#[derive(Clone)]
pub struct LangevinModel {
    potential: Arc<dyn Potential>,
    mass: DMatrix<f64>,
    friction: f64,
    noise: DMatrix<f64>,
    kind: ModelKind,
    // Row-major copies for the stepping kernels.
    mass_rm: Vec<f64>,
    noise_rm: Vec<f64>,
}

impl fmt::Debug for LangevinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LangevinModel")
            .field("kind", &self.kind)
            .field("potential", &self.potential)
            .field("mass", &self.mass)
            .field("friction", &self.friction)
            .field("noise", &self.noise)
            .finish()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

impl LangevinModel {
    /// Builds a model and checks every structural invariant: symmetric
    /// positive definite mass, positive friction, full-rank noise with
    /// `m ≥ d`, and a force consistent with the potential.
    pub fn new(
        potential: Arc<dyn Potential>,
        mass: DMatrix<f64>,
        friction: f64,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        let model = Self::new_unchecked(potential, mass, friction, noise)?;
        model.validate()?;
        Ok(model)
    }

    /// Builds a model checking only dimensions. Degenerate settings such as
    /// `v = 0` or `Σ = 0` are accepted.
    pub fn new_unchecked(
        potential: Arc<dyn Potential>,
        mass: DMatrix<f64>,
        friction: f64,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        let d = potential.dim();
        if d == 0 {
            return Err(Error::Argument("dimension must be positive".into()));
        }
        if mass.nrows() != d || mass.ncols() != d {
            return Err(Error::Argument(format!(
                "mass is {}x{}, expected {d}x{d}",
                mass.nrows(),
                mass.ncols()
            )));
        }
        if noise.nrows() != d || noise.ncols() == 0 {
            return Err(Error::Argument(format!(
                "noise is {}x{}, expected {d}xm with m >= 1",
                noise.nrows(),
                noise.ncols()
            )));
        }
        if !friction.is_finite() || mass.iter().chain(noise.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Domain("model parameters must be finite".into()));
        }
        Ok(LangevinModel {
            mass_rm: row_major(&mass),
            noise_rm: row_major(&noise),
            potential,
            mass,
            friction,
            noise,
            kind: ModelKind::Custom,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let m = &self.mass;
        let scale = m.amax().max(1.0);
        if (m - m.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Argument("mass matrix is not symmetric".into()));
        }
        let eig = m.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::Argument("mass matrix is not positive definite".into()));
        }
        if !(self.friction > 0.0) {
            return Err(Error::Argument(format!("friction must be positive, got {}", self.friction)));
        }
        if self.noise_dim() < d {
            return Err(Error::Argument(format!(
                "noise dimension {} is smaller than d = {d}",
                self.noise_dim()
            )));
        }
        let nmax = self.noise.amax();
        let rank_ok = nmax > 0.0 && {
            let sv = (&self.noise / nmax).singular_values();
            sv.iter().fold(f64::INFINITY, |a, &b| a.min(b)) > 1e-12
        };
        if !rank_ok {
            return Err(Error::Argument("noise matrix must have rank d".into()));
        }
        for q in sample_points(d) {
            let e = eval_model(self, &q)?;
            if (&e.hessian - e.hessian.transpose()).amax() > 1e-10 * e.hessian.amax().max(1.0) {
                return Err(Error::Argument(format!("force Jacobian is not symmetric at q = {q:?}")));
            }
            let eps = 1e-5;
            let mut qp = q.clone();
            for i in 0..d {
                qp[i] = q[i] + eps;
                let fp = self.potential.value(&qp);
                qp[i] = q[i] - eps;
                let fm = self.potential.value(&qp);
                qp[i] = q[i];
                let fd = (fp - fm) / (2.0 * eps);
                if (fd - e.force[i]).abs() > 1e-5 * (1.0 + e.force[i].abs()) {
                    return Err(Error::Argument(format!(
                        "force component {i} disagrees with the potential gradient at q = {q:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise.ncols()
    }

    pub fn potential(&self) -> &dyn Potential {
        self.potential.as_ref()
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn friction(&self) -> f64 {
        self.friction
    }

    /// The noise matrix `Σ` (`d × m`) in the plus-sign convention.
    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub(crate) fn mass_row_major(&self) -> &[f64] {
        &self.mass_rm
    }

    pub(crate) fn noise_row_major(&self) -> &[f64] {
        &self.noise_rm
    }
}

fn sample_points(d: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]];
    for k in 0..d {
        let mut q = vec![0.0; d];
        q[k] = 0.5;
        pts.push(q);
    }
    pts.push((0..d).map(|i| -0.7 + 0.3 * i as f64).collect());
    pts.push((0..d).map(|i| 1.3 - 0.45 * i as f64).collect());
    pts
}

/// A point `(p, q)` of phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PhaseState {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != q.len() || p.is_empty() {
            return Err(Error::Argument(format!(
                "momentum and position lengths differ or are empty ({} vs {})",
                p.len(),
                q.len()
            )));
        }
        Ok(PhaseState { p, q })
    }

    pub fn scalar(p: f64, q: f64) -> Self {
        PhaseState { p: vec![p], q: vec![q] }
    }

    pub fn zeros(d: usize) -> Self {
        PhaseState { p: vec![0.0; d], q: vec![0.0; d] }
    }

    /// Splits `[p_1..p_d, q_1..q_d]`.
    pub fn from_slice(z: &[f64]) -> Result<Self> {
        if z.is_empty() || z.len() % 2 != 0 {
            return Err(Error::Argument(format!("state vector length {} is not even", z.len())));
        }
        let d = z.len() / 2;
        Ok(PhaseState { p: z[..d].to_vec(), q: z[d..].to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(&self.q).all(|x| x.is_finite())
    }

    /// `[p_1..p_d, q_1..q_d]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.p.clone();
        v.extend_from_slice(&self.q);
        v
    }

    pub fn norm_squared(&self) -> f64 {
        self.p.iter().chain(&self.q).map(|x| x * x).sum()
    }
}

/// Potential, force and force Jacobian at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    pub potential: f64,
    pub force: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

pub fn eval_model(model: &LangevinModel, q: &[f64]) -> Result<ModelEval> {
    let d = model.dim();
    if q.len() != d {
        return Err(Error::Argument(format!("position has length {}, expected {d}", q.len())));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite position {q:?}")));
    }
    let pot = model.potential();
    let value = pot.value(q);
    let mut force = vec![0.0; d];
    pot.force(q, &mut force);
    let mut h = vec![0.0; d * d];
    pot.hessian(q, &mut h);
    if !value.is_finite() || force.iter().chain(&h).any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("model evaluation is not finite at q = {q:?}")));
    }
    Ok(ModelEval { potential: value, force, hessian: DMatrix::from_row_slice(d, d, &h) })
}

/// `V(z) = ½‖p‖² + F(q) + (v/2) pᵀq + (v²/4)‖q‖² + 1`.
pub fn lyapunov_v(model: &LangevinModel, z: &PhaseState) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Domain("non-finite state".into()));
    }
    Ok(lyapunov_unchecked(model, z))
}

pub(crate) fn lyapunov_unchecked(model: &LangevinModel, z: &PhaseState) -> f64 {
    let v = model.friction();
    let pp: f64 = z.p.iter().map(|x| x * x).sum();
    let qq: f64 = z.q.iter().map(|x| x * x).sum();
    let pq: f64 = z.p.iter().zip(&z.q).map(|(a, b)| a * b).sum();
    0.5 * pp + model.potential().value(&z.q) + 0.5 * v * pq + 0.25 * v * v * qq + 1.0
}

/// Result of scanning the dissipativity inequalities over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Smallest slack over both inequalities and all grid points.
    pub worst_margin: f64,
    pub worst_point: Vec<f64>,
    /// First grid point with negative slack, if any.
    pub violation: Option<Vec<f64>>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Checks `F(q) ≥ 0` and
/// `½ qᵀf(q) ≥ βF(q) + v²β(2-β)/(8(1-β)) ‖q‖² - α` at every grid point.
///
/// This is a diagnostic on a finite grid, not a proof.
pub fn check_assumption1(
    model: &LangevinModel,
    grid: &[Vec<f64>],
    alpha: f64,
    beta: f64,
) -> Result<AssumptionReport> {
    if grid.is_empty() {
        return Err(Error::Argument("grid is empty".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Argument(format!("beta must lie in (0, 1), got {beta}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
    }
    let v = model.friction();
    let coeff = v * v * beta * (2.0 - beta) / (8.0 * (1.0 - beta));
    let mut worst = f64::INFINITY;
    let mut worst_point = grid[0].clone();
    let mut violation = None;
    for q in grid {
        let e = eval_model(model, q)?;
        let qq: f64 = q.iter().map(|x| x * x).sum();
        let qf: f64 = q.iter().zip(&e.force).map(|(a, b)| a * b).sum();
        let slack = e
            .potential
            .min(0.5 * qf - beta * e.potential - coeff * qq + alpha);
        if slack < worst {
            worst = slack;
            worst_point = q.clone();
        }
        if slack < 0.0 && violation.is_none() {
            violation = Some(q.clone());
        }
    }
    Ok(AssumptionReport { worst_margin: worst, worst_point, violation })
}

/// Unnormalized Boltzmann–Gibbs density of the built-in models:
/// `exp(-a v (p² + q²)/σ²)` for the linear oscillator and
/// `exp(-β(½p² + (1 - q²)² - q/2))` for the double well.
pub fn gibbs_density(model: &LangevinModel, z: &PhaseState) -> Result<f64> {
    match model.kind() {
        ModelKind::Linear(LinearOscillator { a, v, sigma }) => {
            let r2 = z.p[0] * z.p[0] + z.q[0] * z.q[0];
            Ok((-a * v * r2 / (sigma * sigma)).exp())
        }
        ModelKind::DoubleWell(DoubleWell { beta, .. }) => {
            let energy = 0.5 * z.p[0] * z.p[0] + TiltedDoubleWell.value(&z.q);
            Ok((-beta * energy).exp())
        }
        ModelKind::Custom => {
            Err(Error::Capability("Gibbs density is only known for the built-in models".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lin(a: f64, v: f64) -> LangevinModel {
        LinearOscillator { a, v, sigma: 0.5 }.model().unwrap()
    }

    fn dw(v: f64) -> LangevinModel {
        DoubleWell { v, beta: 2.0 }.model().unwrap()
    }

    #[test]
    fn eval_double_well_at_origin() {
        let e = eval_model(&dw(4.0), &[0.0]).unwrap();
        assert_eq!(e.potential, 1.0);
        assert_eq!(e.force, vec![-0.5]);
        assert_eq!(e.hessian[(0, 0)], -4.0);
    }

    #[test]
    fn eval_linear() {
        let e = eval_model(&lin(1.0, 2.0), &[0.0]).unwrap();
        assert_eq!((e.potential, e.force[0], e.hessian[(0, 0)]), (0.0, 0.0, 1.0));
        let e = eval_model(&lin(2.0, 2.0), &[3.0]).unwrap();
        assert_eq!((e.potential, e.force[0], e.hessian[(0, 0)]), (9.0, 6.0, 2.0));
    }

    #[test]
    fn eval_rejects_non_finite() {
        assert!(matches!(eval_model(&lin(1.0, 2.0), &[f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(eval_model(&dw(4.0), &[1e200]), Err(Error::Domain(_))));
    }

    #[test]
    fn lyapunov_values() {
        assert_eq!(lyapunov_v(&dw(4.0), &PhaseState::scalar(0.0, 0.0)).unwrap(), 2.0);
        assert_eq!(lyapunov_v(&lin(1.0, 2.0), &PhaseState::scalar(0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(lyapunov_v(&lin(1.0, 2.0), &PhaseState::scalar(1.0, 1.0)).unwrap(), 4.0);
    }

    #[test]
    fn assumption_trivial_point() {
        let r = check_assumption1(&lin(1.0, 2.0), &[vec![0.0]], 1.0, 0.5).unwrap();
        assert!(r.passed());
        assert!(r.worst_margin >= 0.0);
    }

    #[test]
    fn assumption_double_well_scan() {
        let model = dw(4.0);
        let grid: Vec<Vec<f64>> = (0..601).map(|i| vec![-3.0 + 0.01 * i as f64]).collect();
        let r = check_assumption1(&model, &grid, 20.0, 0.5).unwrap();
        // Independent scan of the same inequalities.
        let coeff = 16.0 * 0.5 * 1.5 / (8.0 * 0.5);
        let mut worst = f64::INFINITY;
        for q in &grid {
            let x = q[0];
            let f_pot = (1.0 - x * x).powi(2) - 0.5 * x;
            let force = 4.0 * x * x * x - 4.0 * x - 0.5;
            let s2 = 0.5 * x * force - 0.5 * f_pot - coeff * x * x + 20.0;
            worst = worst.min(f_pot.min(s2));
        }
        assert!((r.worst_margin - worst).abs() < 1e-12);
        assert_eq!(r.passed(), worst >= 0.0);
    }

    #[test]
    fn assumption_argument_errors() {
        let m = lin(1.0, 2.0);
        assert!(matches!(check_assumption1(&m, &[vec![0.0]], 1.0, 1.0), Err(Error::Argument(_))));
        assert!(matches!(check_assumption1(&m, &[], 1.0, 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn gibbs_values() {
        let d = gibbs_density(&dw(4.0), &PhaseState::scalar(0.0, 0.0)).unwrap();
        assert!((d - (-2.0f64).exp()).abs() < 1e-16);
        let l = lin(1.0, 2.0);
        assert_eq!(gibbs_density(&l, &PhaseState::scalar(0.0, 0.0)).unwrap(), 1.0);
        let v = gibbs_density(&l, &PhaseState::scalar(1.0, 0.0)).unwrap();
        assert!((v - (-8.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn gibbs_custom_is_unsupported() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = LangevinModel::new(
            Arc::new(Quadratic::new(k).unwrap()),
            DMatrix::identity(2, 2),
            1.0,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(matches!(
            gibbs_density(&m, &PhaseState::zeros(2)),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        let pot: Arc<dyn Potential> = Arc::new(Quadratic::new(DMatrix::identity(2, 2)).unwrap());
        let bad_mass = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(LangevinModel::new(pot.clone(), bad_mass, 1.0, DMatrix::identity(2, 2)).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LangevinModel::new(pot.clone(), indefinite, 1.0, DMatrix::identity(2, 2)).is_err());
        let rank1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(LangevinModel::new(pot.clone(), DMatrix::identity(2, 2), 1.0, rank1).is_err());
        assert!(LangevinModel::new(pot.clone(), DMatrix::identity(2, 2), 0.0, DMatrix::identity(2, 2)).is_err());
        assert!(LinearOscillator { a: 1.0, v: 2.0, sigma: 0.0 }.model().is_err());
        assert!(DoubleWell { v: 4.0, beta: -1.0 }.model().is_err());
    }

    #[test]
    fn inconsistent_force_is_rejected() {
        #[derive(Debug)]
        struct Broken;
        impl Potential for Broken {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, q: &[f64]) -> f64 {
                q[0] * q[0]
            }
            fn force(&self, q: &[f64], out: &mut [f64]) {
                out[0] = q[0];
            }
            fn hessian(&self, _q: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let r = LangevinModel::new(
            Arc::new(Broken),
            DMatrix::identity(1, 1),
            1.0,
            DMatrix::identity(1, 1),
        );
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn gradient_and_hessian_match_central_differences(x in -2.0f64..2.0) {
            let eps = 1e-4;
            for model in [dw(4.0), lin(1.7, 2.0)] {
                let e = eval_model(&model, &[x]).unwrap();
                let pot = model.potential();
                let fd = (pot.value(&[x + eps]) - pot.value(&[x - eps])) / (2.0 * eps);
                prop_assert!((fd - e.force[0]).abs() <= 50.0 * eps * eps);
                let (mut fp, mut fm) = ([0.0], [0.0]);
                pot.force(&[x + eps], &mut fp);
                pot.force(&[x - eps], &mut fm);
                let hd = (fp[0] - fm[0]) / (2.0 * eps);
                prop_assert!((hd - e.hessian[(0, 0)]).abs() <= 50.0 * eps * eps);
            }
        }

        #[test]
        fn lyapunov_bounded_below(p in -5.0f64..5.0, q in -3.0f64..3.0) {
            // The quadratic part ½p² + (v/2)pq + (v²/4)q² is positive definite.
            let model = dw(4.0);
            let min_f = (0..=600)
                .map(|i| TiltedDoubleWell.value(&[-3.0 + 0.01 * i as f64]))
                .fold(f64::INFINITY, f64::min);
            let v = lyapunov_v(&model, &PhaseState::scalar(p, q)).unwrap();
            prop_assert!(v >= 1.0 + min_f - 1e-3);
        }
    }
}
