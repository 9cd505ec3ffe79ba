//! Generating-function layer.
//!
//! With `X = e^{vt} P`, `Y = Q` and two extra coordinates (`Y_{d+1} = t`), the
//! damped system becomes an autonomous stochastic Hamiltonian system with
//!
//! ```text
//! H₀  = e^{v y_{d+1}} F(y) + ½ e^{-v y_{d+1}} XᵀMX + X_{d+1}
//! H_r = e^{v y_{d+1}} σ_r · y,        σ = -Σ
//! ```
//!
//! The conformal symplectic scheme is the truncated type-one generating
//! function of the modified Hamiltonians `H_r + h H_r^{[1]}`, whose gradients
//! are fixed by weak-order matching. [`gf2_step_augmented`] evaluates that
//! scheme from the gradients alone so it can be compared with the direct
//! one-step map.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::CONDITION_LIMIT;
use crate::models::{eval_model, LangevinModel, PhaseState};

/// Augmented coordinates; both vectors have length `d + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl AugmentedState {
    pub fn time(&self) -> f64 {
        self.y[self.y.len() - 1]
    }
}

fn growth(v: f64, t: f64) -> Result<(f64, f64)> {
    let c1 = (v * t).exp();
    let c2 = (-v * t).exp();
    if !c1.is_finite() || c2 == 0.0 {
        return Err(Error::Range(format!("e^(v t) overflows at v t = {}", v * t)));
    }
    Ok((c1, c2))
}

/// Column `r` (zero-based) of the noise matrix in the minus convention, `σ = -Σ`.
fn sigma(model: &LangevinModel, r: usize) -> Vec<f64> {
    model.noise().column(r).iter().map(|s| -s).collect()
}

fn quad_form(m: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[i] * m[(i, j)] * b[j];
        }
    }
    s
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
}

/// `X_i = e^{vt} p_i`, `Y_i = q_i`, `Y_{d+1} = t`, and
/// `X_{d+1} = e^{vt}F(q) + ½ e^{-vt} XᵀMX + e^{vt} σ·q` summed over all noise
/// columns, which reduces to `F(q) + ½pᵀMp + Σ_r σ_r·q` at `t = 0`.
pub fn to_augmented(z: &PhaseState, t: f64, model: &LangevinModel) -> Result<AugmentedState> {
    if !(t >= 0.0) {
        return Err(Error::Argument(format!("time must be non-negative, got {t}")));
    }
    let d = model.dim();
    if z.dim() != d {
        return Err(Error::Argument("state dimension does not match the model".into()));
    }
    let v = model.friction();
    let (c1, c2) = growth(v, t)?;
    let mut x: Vec<f64> = z.p.iter().map(|p| c1 * p).collect();
    let mut y = z.q.clone();
    let f = model.potential().value(&z.q);
    let lin: f64 = (0..model.noise_dim()).map(|r| sigma(model, r).iter().zip(&z.q).map(|(s, q)| s * q).sum::<f64>()).sum();
    let extra = c1 * f + 0.5 * c2 * quad_form(model.mass(), &x, &x) + c1 * lin;
    if !extra.is_finite() {
        return Err(Error::Range("augmented energy coordinate overflowed".into()));
    }
    x.push(extra);
    y.push(t);
    Ok(AugmentedState { x, y })
}

/// `p = e^{-vt} X`, `q = Y`, `t = Y_{d+1}`. `X_{d+1}` is not read.
pub fn from_augmented(s: &AugmentedState, model: &LangevinModel) -> (PhaseState, f64) {
    let d = s.x.len() - 1;
    let t = s.y[d];
    let decay = (-model.friction() * t).exp();
    let p = s.x[..d].iter().map(|x| decay * x).collect();
    (PhaseState { p, q: s.y[..d].to_vec() }, t)
}

/// `(H₀, [H_1, …, H_m])` at an augmented state.
pub fn hamiltonians(model: &LangevinModel, s: &AugmentedState) -> Result<(f64, Vec<f64>)> {
    let d = model.dim();
    let (c1, c2) = growth(model.friction(), s.y[d])?;
    let y = &s.y[..d];
    let x = &s.x[..d];
    let h0 = c1 * model.potential().value(y) + 0.5 * c2 * quad_form(model.mass(), x, x) + s.x[d];
    let hr: Vec<f64> = (0..model.noise_dim())
        .map(|r| c1 * sigma(model, r).iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    if !h0.is_finite() || hr.iter().any(|h| !h.is_finite()) {
        return Err(Error::Range("Hamiltonian overflowed".into()));
    }
    Ok((h0, hr))
}

/// Gradients of the augmented Hamiltonians, each of length `d + 1`.
/// Row `r` of `dhr_*` belongs to `H_{r+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianGradients {
    pub dh0_dx: Vec<f64>,
    pub dh0_dy: Vec<f64>,
    pub dhr_dx: Vec<Vec<f64>>,
    pub dhr_dy: Vec<Vec<f64>>,
}

pub fn hamiltonian_gradients(model: &LangevinModel, x: &[f64], y: &[f64]) -> Result<HamiltonianGradients> {
    let d = model.dim();
    let v = model.friction();
    let (c1, c2) = growth(v, y[d])?;
    let ev = eval_model(model, &y[..d])?;
    let mx = mat_vec(model.mass(), &x[..d]);

    let mut dh0_dx: Vec<f64> = mx.iter().map(|a| c2 * a).collect();
    dh0_dx.push(1.0);
    let mut dh0_dy: Vec<f64> = ev.force.iter().map(|f| c1 * f).collect();
    dh0_dy.push(v * c1 * ev.potential - 0.5 * v * c2 * quad_form(model.mass(), &x[..d], &x[..d]));

    let mut dhr_dx = Vec::new();
    let mut dhr_dy = Vec::new();
    for r in 0..model.noise_dim() {
        let s = sigma(model, r);
        dhr_dx.push(vec![0.0; d + 1]);
        let mut g: Vec<f64> = s.iter().map(|a| c1 * a).collect();
        g.push(v * c1 * s.iter().zip(&y[..d]).map(|(a, b)| a * b).sum::<f64>());
        dhr_dy.push(g);
    }
    Ok(HamiltonianGradients { dh0_dx, dh0_dy, dhr_dx, dhr_dy })
}

/// A multi-index `(j_1, …, j_l)` with `j = 0` the drift and `j = r ≥ 1` the
/// `r`-th Brownian component.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(indices: Vec<usize>, noise_dim: usize) -> Result<Self> {
        if !(2..=3).contains(&indices.len()) {
            return Err(Error::Argument(format!("multi-index length must be 2 or 3, got {}", indices.len())));
        }
        if let Some(j) = indices.iter().find(|&&j| j > noise_dim) {
            return Err(Error::Argument(format!("index {j} exceeds noise dimension {noise_dim}")));
        }
        Ok(MultiIndex(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Closed-form coefficient `G_α(X, y)` of the generating-function expansion.
///
/// Supported: `(r₁,r₂)`, `(r,0)`, `(0,r)`, `(0,0)`, `(r₁,r₂,r₃)`, `(r₁,r₂,0)`,
/// `(r₁,0,r₂)` and `(0,r₁,r₂)` with `r ≥ 1`.
pub fn g_alpha(model: &LangevinModel, alpha: &MultiIndex, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = model.dim();
    let v = model.friction();
    let (c1, c2) = growth(v, y[d])?;
    let xs = &x[..d];
    let q = &y[..d];
    let mass = model.mass();
    match *alpha.indices() {
        [a, b] if a > 0 && b > 0 => Ok(0.0),
        [a, 0] if a > 0 => Ok(0.0),
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok(0.0),
        [a, b, 0] if a > 0 && b > 0 => Ok(0.0),
        [a, 0, c] if a > 0 && c > 0 => Ok(0.0),
        [0, r] if r > 0 => {
            let s = sigma(model, r - 1);
            Ok(quad_form(mass, &s, xs) + v * c1 * s.iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
        }
        [0, r1, r2] if r1 > 0 && r2 > 0 => Ok(c1 * quad_form(mass, &sigma(model, r1 - 1), &sigma(model, r2 - 1))),
        [0, 0] => {
            let ev = eval_model(model, q)?;
            Ok(quad_form(mass, &ev.force, xs) + v * c1 * ev.potential - 0.5 * v * c2 * quad_form(mass, xs, xs))
        }
        _ => Err(Error::Capability(format!("no closed form for G_{:?}", alpha.indices()))),
    }
}

/// Gradients of the first-order corrections `H_r^{[1]}` and `H_0^{[1]}`.
///
/// The `d+1` slots of the `x` gradients are zero. `∂H_0^{[1]}/∂y_{d+1}` is not
/// determined by the order conditions and does not reach the phase-space
/// components of the scheme; it is stored as zero, as is
/// `∂H_r^{[1]}/∂y_{d+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct H1Derivatives {
    pub dhr_dx: Vec<Vec<f64>>,
    pub dhr_dy: Vec<Vec<f64>>,
    pub dh0_dx: Vec<f64>,
    pub dh0_dy: Vec<f64>,
}

pub fn h1_derivatives(model: &LangevinModel, x: &[f64], y: &[f64]) -> Result<H1Derivatives> {
    let d = model.dim();
    let v = model.friction();
    let (c1, c2) = growth(v, y[d])?;
    let mass = model.mass();
    let ev = eval_model(model, &y[..d])?;

    let mut dhr_dx = Vec::new();
    let mut dhr_dy = Vec::new();
    for r in 0..model.noise_dim() {
        let s = sigma(model, r);
        let mut gx: Vec<f64> = mat_vec(mass, &s).iter().map(|a| 0.5 * a).collect();
        gx.push(0.0);
        let mut gy: Vec<f64> = s.iter().map(|a| 0.5 * v * c1 * a).collect();
        gy.push(0.0);
        dhr_dx.push(gx);
        dhr_dy.push(gy);
    }

    let hmx = mat_vec(&ev.hessian, &mat_vec(mass, &x[..d]));
    let mut dh0_dy: Vec<f64> = (0..d).map(|i| 0.5 * hmx[i] + 0.5 * v * c1 * ev.force[i]).collect();
    dh0_dy.push(0.0);
    let shifted: Vec<f64> = (0..d).map(|j| ev.force[j] - v * c2 * x[j]).collect();
    let mut dh0_dx: Vec<f64> = mat_vec(mass, &shifted).iter().map(|a| 0.5 * a).collect();
    dh0_dx.push(0.0);
    Ok(H1Derivatives { dhr_dx, dhr_dy, dh0_dx, dh0_dy })
}

/// One step of the scheme in augmented coordinates, started at `t_n = y_{d+1}`:
///
/// ```text
/// X^G = x - h∇_y H₀ - Σ_r ΔW_r (∇_y H_r + h ∇_y H_r^{[1]}) - h² ∇_y H₀^{[1]}(X^G, y)
/// Y^G = y + h∇_X H₀(X^G, y) + Σ_r ΔW_r (∇_X H_r + h ∇_x H_r^{[1]}) + h² ∇_x H₀^{[1]}(X^G, y)
/// ```
///
/// `∇_y H₀^{[1]}` is affine in `x`; its linear part is read off the
/// derivative tables and the resulting `d × d` system is solved directly.
pub fn gf2_step_augmented(
    model: &LangevinModel,
    x: &[f64],
    y: &[f64],
    h: f64,
    dw: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    let m = model.noise_dim();
    if x.len() != d + 1 || y.len() != d + 1 || dw.len() != m {
        return Err(Error::Argument("augmented step dimension mismatch".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step size must be positive and finite, got {h}")));
    }
    if x.iter().chain(y).chain(dw).any(|a| !a.is_finite()) || y[d] < 0.0 {
        return Err(Error::Domain("non-finite augmented input or negative time".into()));
    }
    let g = hamiltonian_gradients(model, x, y)?;

    // Affine map x ↦ ∇_y H₀^{[1]}(x, y) restricted to the first d slots.
    let zero = vec![0.0; d + 1];
    let base = h1_derivatives(model, &zero, y)?;
    // The constant part grows like e^{vt}; probing at that scale keeps the
    // difference from cancelling.
    let scale = base.dh0_dy.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let mut lin = DMatrix::zeros(d, d);
    let mut probe = vec![0.0; d + 1];
    for k in 0..d {
        probe[k] = scale;
        let col = h1_derivatives(model, &probe, y)?;
        for i in 0..d {
            lin[(i, k)] = (col.dh0_dy[i] - base.dh0_dy[i]) / scale;
        }
        probe[k] = 0.0;
    }

    let mut rhs = DVector::zeros(d);
    for i in 0..d {
        let mut noise = 0.0;
        for r in 0..m {
            noise += dw[r] * (g.dhr_dy[r][i] + h * base.dhr_dy[r][i]);
        }
        rhs[i] = x[i] - h * g.dh0_dy[i] - noise - h * h * base.dh0_dy[i];
    }
    let a = DMatrix::identity(d, d) + lin * (h * h);
    let cond = a.norm().max(1.0) * a.clone().try_inverse().map(|inv| inv.norm()).unwrap_or(f64::INFINITY);
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::StepSize { h, condition: cond, limit: CONDITION_LIMIT });
    }
    let xg_head = a
        .lu()
        .solve(&rhs)
        .ok_or(Error::StepSize { h, condition: f64::INFINITY, limit: CONDITION_LIMIT })?;

    let mut xg: Vec<f64> = xg_head.iter().copied().collect();
    xg.push(x[d]);
    let gg = hamiltonian_gradients(model, &xg, y)?;
    let h1 = h1_derivatives(model, &xg, y)?;
    let mut noise_t = 0.0;
    for r in 0..m {
        noise_t += dw[r] * (gg.dhr_dy[r][d] + h * h1.dhr_dy[r][d]);
    }
    xg[d] = x[d] - h * gg.dh0_dy[d] - noise_t - h * h * h1.dh0_dy[d];

    let mut yg = vec![0.0; d + 1];
    for i in 0..=d {
        let mut noise = 0.0;
        for r in 0..m {
            noise += dw[r] * (gg.dhr_dx[r][i] + h * h1.dhr_dx[r][i]);
        }
        yg[i] = y[i] + h * gg.dh0_dx[i] + noise + h * h * h1.dh0_dx[i];
    }
    if xg.iter().chain(&yg).any(|a| !a.is_finite()) {
        return Err(Error::Range("augmented step overflowed".into()));
    }
    Ok((xg, yg))
}

/// `gf2_step_augmented` conjugated back to phase space.
pub fn gf2_step_via_augmented(model: &LangevinModel, z: &PhaseState, t: f64, h: f64, dw: &[f64]) -> Result<(PhaseState, f64)> {
    let s = to_augmented(z, t, model)?;
    let (x, y) = gf2_step_augmented(model, &s.x, &s.y, h, dw)?;
    Ok(from_augmented(&AugmentedState { x, y }, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::gf2_step;
    use crate::models::{DoubleWell, LinearOscillator, Quadratic};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn lin() -> LangevinModel {
        LinearOscillator { a: 1.0, v: 2.0, sigma: 0.5 }.model().unwrap()
    }

    fn quad2() -> LangevinModel {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mass = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let noise = DMatrix::from_row_slice(2, 3, &[0.3, -0.1, 0.2, 0.0, 0.4, -0.25]);
        LangevinModel::new(Arc::new(Quadratic::new(k).unwrap()), mass, 0.7, noise).unwrap()
    }

    #[test]
    fn transform_basics() {
        let m = lin();
        let z = PhaseState::scalar(1.0, 1.0);
        let s = to_augmented(&z, 0.0, &m).unwrap();
        assert_eq!((s.x[0], s.y[0], s.y[1]), (1.0, 1.0, 0.0));
        // F = 1/2, ½pMp = 1/2, σ = -Σ = 0.5.
        assert!((s.x[1] - 1.5).abs() < 1e-15);
        assert!(to_augmented(&z, -1.0, &m).is_err());

        let (back, t) = from_augmented(&to_augmented(&PhaseState::scalar(-0.3, 2.0), 1.7, &m).unwrap(), &m);
        assert!((back.p[0] + 0.3).abs() < 1e-14 && back.q[0] == 2.0 && t == 1.7);

        let s = AugmentedState { x: vec![2.0, 0.0], y: vec![0.0, 2f64.ln() / 2.0] };
        assert!((from_augmented(&s, &m).0.p[0] - 1.0).abs() < 1e-15);
        let s = AugmentedState { x: vec![0.0, 9.0], y: vec![0.3, 5.0] };
        assert_eq!(from_augmented(&s, &m).0.p[0], 0.0);
    }

    #[test]
    fn hamiltonian_values() {
        let m = lin();
        let s = AugmentedState { x: vec![1.0, 0.0], y: vec![1.0, 0.0] };
        let (h0, hr) = hamiltonians(&m, &s).unwrap();
        assert!((h0 - 1.0).abs() < 1e-15);
        assert!((hr[0] - 0.5).abs() < 1e-15);

        let dw = DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap();
        let s = AugmentedState { x: vec![0.0, 0.0], y: vec![0.7, 0.0] };
        assert_eq!(hamiltonians(&dw, &s).unwrap().0, dw.potential().value(&[0.7]));

        let s = AugmentedState { x: vec![0.0, 0.0], y: vec![0.0, 400.0] };
        assert!(matches!(hamiltonians(&dw, &s), Err(Error::Range(_))));
    }

    #[test]
    fn hamiltonian_gradients_match_finite_differences() {
        let m = quad2();
        let x = vec![0.4, -0.7, 0.2];
        let y = vec![0.3, 0.9, 0.6];
        let g = hamiltonian_gradients(&m, &x, &y).unwrap();
        let eps = 1e-6;
        let eval = |x: &[f64], y: &[f64]| hamiltonians(&m, &AugmentedState { x: x.to_vec(), y: y.to_vec() }).unwrap();
        for i in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp[i] += eps;
            ym[i] -= eps;
            let (a, ar) = eval(&xp, &y);
            let (b, br) = eval(&xm, &y);
            assert!(((a - b) / (2.0 * eps) - g.dh0_dx[i]).abs() < 1e-7);
            let (c, cr) = eval(&x, &yp);
            let (e, er) = eval(&x, &ym);
            assert!(((c - e) / (2.0 * eps) - g.dh0_dy[i]).abs() < 1e-7);
            for r in 0..3 {
                assert!(((ar[r] - br[r]) / (2.0 * eps) - g.dhr_dx[r][i]).abs() < 1e-7);
                assert!(((cr[r] - er[r]) / (2.0 * eps) - g.dhr_dy[r][i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn catalog_examples() {
        let m = LinearOscillator { a: 2.0, v: 2.0, sigma: 0.5 }.model().unwrap();
        let x = [0.3, 1.0];
        let y = [0.8, 0.0];
        let g = g_alpha(&m, &MultiIndex::new(vec![0, 1, 1], 1).unwrap(), &x, &y).unwrap();
        assert!((g - 2.0 * 0.25).abs() < 1e-15);
        let g = g_alpha(&m, &MultiIndex::new(vec![0, 0], 1).unwrap(), &[0.0, 5.0], &y).unwrap();
        assert!((g - 2.0 * m.potential().value(&[0.8])).abs() < 1e-15);
        assert!(matches!(g_alpha(&m, &MultiIndex::new(vec![0, 0, 1], 1).unwrap(), &x, &y), Err(Error::Capability(_))));
        assert!(MultiIndex::new(vec![0, 2], 1).is_err());
        assert!(MultiIndex::new(vec![0], 1).is_err());
    }

    #[test]
    fn catalog_zeros_are_exact() {
        let models = [lin(), quad2(), DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let m = &models[trial % 3];
            let d = m.dim();
            let nm = m.noise_dim();
            let x: Vec<f64> = (0..=d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut y: Vec<f64> = (0..=d).map(|_| rng.random_range(-2.0..2.0)).collect();
            y[d] = rng.random_range(0.0..3.0);
            let r = || 1 + (trial % nm);
            for idx in [vec![r(), 1], vec![r(), 0], vec![r(), 1, nm], vec![1, r(), 0], vec![r(), 0, 1]] {
                let v = g_alpha(m, &MultiIndex::new(idx, nm).unwrap(), &x, &y).unwrap();
                assert!(v == 0.0 && v.is_sign_positive());
            }
        }
    }

    /// Length-2 and length-3 coefficients from the general expansion, with all
    /// Hamiltonian derivatives taken by central differences.
    fn g_general(m: &LangevinModel, alpha: &[usize], x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let eps = 1e-4;
        let ham = |j: usize, x: &[f64], y: &[f64]| {
            let (h0, hr) = hamiltonians(m, &AugmentedState { x: x.to_vec(), y: y.to_vec() }).unwrap();
            if j == 0 { h0 } else { hr[j - 1] }
        };
        let shift = |v: &[f64], i: usize, e: f64| {
            let mut w = v.to_vec();
            w[i] += e;
            w
        };
        let dx = |g: &dyn Fn(&[f64], &[f64]) -> f64, i: usize, x: &[f64], y: &[f64]| (g(&shift(x, i, eps), y) - g(&shift(x, i, -eps), y)) / (2.0 * eps);
        let dy = |g: &dyn Fn(&[f64], &[f64]) -> f64, i: usize, x: &[f64], y: &[f64]| (g(x, &shift(y, i, eps)) - g(x, &shift(y, i, -eps))) / (2.0 * eps);
        let g2 = |j1: usize, j2: usize, x: &[f64], y: &[f64]| -> f64 {
            (0..n).map(|i| dy(&|a, b| ham(j2, a, b), i, x, y) * dx(&|a, b| ham(j1, a, b), i, x, y)).sum()
        };
        match *alpha {
            [j1, j2] => g2(j1, j2, x, y),
            [j1, j2, j3] => {
                let first: f64 = (0..n).map(|i| dy(&|a, b| ham(j3, a, b), i, x, y) * dx(&|a, b| g2(j1, j2, a, b), i, x, y)).sum();
                let mut second = 0.0;
                for i in 0..n {
                    for k in 0..n {
                        let hij = (ham(j3, x, &shift(&shift(y, i, eps), k, eps)) - ham(j3, x, &shift(&shift(y, i, eps), k, -eps))
                            - ham(j3, x, &shift(&shift(y, i, -eps), k, eps))
                            + ham(j3, x, &shift(&shift(y, i, -eps), k, -eps)))
                            / (4.0 * eps * eps);
                        let a = dx(&|a, b| ham(j1, a, b), i, x, y) * dx(&|a, b| ham(j2, a, b), k, x, y)
                            + dx(&|a, b| ham(j2, a, b), i, x, y) * dx(&|a, b| ham(j1, a, b), k, x, y);
                        second += 0.5 * hij * a;
                    }
                }
                first + second
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn closed_forms_match_general_expansion() {
        let models = [lin(), quad2(), DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for m in &models {
            let d = m.dim();
            let nm = m.noise_dim();
            for _ in 0..5 {
                let x: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let mut y: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.5..1.5)).collect();
                y[d] = rng.random_range(0.0..0.5);
                let mut cases = vec![vec![0, 0]];
                for r in 1..=nm {
                    cases.push(vec![0, r]);
                    cases.push(vec![r, 0]);
                    for r2 in 1..=nm {
                        cases.push(vec![0, r, r2]);
                        cases.push(vec![r, r2]);
                        cases.push(vec![r, 0, r2]);
                        cases.push(vec![r, r2, 0]);
                    }
                }
                for alpha in cases {
                    let closed = g_alpha(m, &MultiIndex::new(alpha.clone(), nm).unwrap(), &x, &y).unwrap();
                    let general = g_general(m, &alpha, &x, &y);
                    let tol = 1e-5 * (1.0 + closed.abs());
                    assert!((closed - general).abs() < tol, "{alpha:?}: {closed} vs {general}");
                }
            }
        }
    }

    #[test]
    fn g0r_is_affine_in_x() {
        let m = quad2();
        let y = [0.2, -0.4, 0.3];
        let x0 = [0.1, 0.5, 7.0];
        let alpha = MultiIndex::new(vec![0, 2], 3).unwrap();
        let base = g_alpha(&m, &alpha, &x0, &y).unwrap();
        let s = sigma(&m, 1);
        let grad = mat_vec(m.mass(), &s);
        for k in 0..2 {
            let mut x1 = x0;
            x1[k] += 0.37;
            let diff = g_alpha(&m, &alpha, &x1, &y).unwrap() - base;
            assert!((diff / 0.37 - grad[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn h1_examples() {
        let (a, v, s) = (2.0, 3.0, 0.4);
        let m = LinearOscillator { a, v, sigma: s }.model().unwrap();
        let d = h1_derivatives(&m, &[0.5, 0.0], &[0.2, 0.0]).unwrap();
        assert!((d.dhr_dx[0][0] - a * s / 2.0).abs() < 1e-15);
        assert!((d.dhr_dy[0][0] - v * s / 2.0).abs() < 1e-15);
        assert_eq!((d.dhr_dx[0][1], d.dh0_dx[1]), (0.0, 0.0));

        let quiet = LangevinModel::new_unchecked(
            Arc::new(Quadratic::new(DMatrix::from_element(1, 1, 1.0)).unwrap()),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let d = h1_derivatives(&quiet, &[0.5, 0.0], &[0.2, 0.7]).unwrap();
        assert!(d.dhr_dx[0].iter().chain(&d.dhr_dy[0]).all(|&v| v == 0.0));
    }

    #[test]
    fn free_flight_in_augmented_coordinates() {
        let m = LangevinModel::new_unchecked(
            Arc::new(Quadratic::new(DMatrix::zeros(2, 2)).unwrap()),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            0.0,
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let x = [0.3, -1.0, 4.0];
        let y = [1.0, 2.0, 0.5];
        let (xg, yg) = gf2_step_augmented(&m, &x, &y, 0.1, &[0.7, -0.2]).unwrap();
        assert_eq!(&xg[..2], &x[..2]);
        assert!((yg[0] - (1.0 + 0.1 * (2.0 * 0.3 - 0.5))).abs() < 1e-15);
        assert!((yg[1] - (2.0 + 0.1 * (0.5 * 0.3 - 1.0))).abs() < 1e-15);
        assert!((yg[2] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn small_step_limit() {
        let m = DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap();
        let s = to_augmented(&PhaseState::scalar(0.4, -0.8), 0.25, &m).unwrap();
        for h in [1e-4f64, 1e-6, 1e-8] {
            let dw = h.sqrt();
            let (xg, yg) = gf2_step_augmented(&m, &s.x, &s.y, h, &[dw]).unwrap();
            let defect = (xg[0] - s.x[0]).abs().max((yg[0] - s.y[0]).abs());
            assert!(defect <= 20.0 * (h.sqrt() * dw + h + dw), "h = {h}: {defect}");
        }
    }

    #[test]
    fn equivalence_with_direct_step() {
        let models = [lin(), quad2(), DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        for trial in 0..300 {
            let m = &models[trial % 3];
            let d = m.dim();
            let z = PhaseState::new((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
            let h = rng.random_range(1e-3..0.25);
            let t = h * rng.random_range(0..8) as f64;
            let dw: Vec<f64> = (0..m.noise_dim()).map(|_| rng.random_range(-1.0..1.0) * h.sqrt()).collect();
            let direct = gf2_step(m, &z, h, &dw).unwrap();
            let (via, t1) = gf2_step_via_augmented(m, &z, t, h, &dw).unwrap();
            assert!((t1 - (t + h)).abs() < 1e-15);
            for i in 0..d {
                worst = worst.max((via.p[i] - direct.p[i]).abs()).max((via.q[i] - direct.q[i]).abs());
            }
        }
        assert!(worst <= 1e-12, "max difference {worst}");
    }

    proptest! {
        #[test]
        fn round_trip(p in -5.0f64..5.0, q in -5.0f64..5.0, t in 0.0f64..5.0) {
            let m = lin();
            let z = PhaseState::scalar(p, q);
            let (back, t1) = from_augmented(&to_augmented(&z, t, &m).unwrap(), &m);
            prop_assert!((back.p[0] - p).abs() <= 1e-14 * p.abs().max(1.0));
            prop_assert_eq!(back.q[0], q);
            prop_assert_eq!(t1, t);
        }
    }
}
