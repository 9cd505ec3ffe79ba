//! Deterministic expectations, weak-error curves, order fits and structure
//! metrics.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::integrators::{gaussian_chain_for_each, gf2_affine_map, linear_exact_moments, propagate_gaussian_chain, GaussianLaw};
use crate::mc::{coupled_weak_difference, ensemble_means, run_realizations, standard_normal, step_count, EstimatorResult, Observable, SeedPlan};
use crate::models::{gibbs_density, LangevinModel, PhaseState};
use crate::integrators::{Scheme, Stepper};

/// The closed catalog of test functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestFunction {
    /// `cos(Σ p_i + Σ q_i)`
    CosSum,
    /// `exp(-‖p‖²/2 - ‖q‖²/2)`
    ExpNegSq,
    /// `sin(‖p‖² + ‖q‖²)`
    SinSumSq,
}

impl TestFunction {
    pub const ALL: [TestFunction; 3] = [TestFunction::CosSum, TestFunction::ExpNegSq, TestFunction::SinSumSq];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::CosSum => "cos_sum",
            TestFunction::ExpNegSq => "exp_negsq",
            TestFunction::SinSumSq => "sin_sumsq",
        }
    }

    pub fn eval(self, z: &PhaseState) -> f64 {
        match self {
            TestFunction::CosSum => (z.p.iter().sum::<f64>() + z.q.iter().sum::<f64>()).cos(),
            TestFunction::ExpNegSq => (-0.5 * z.norm_squared()).exp(),
            TestFunction::SinSumSq => z.norm_squared().sin(),
        }
    }
}

impl std::str::FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestFunction::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown test function `{s}` (expected cos_sum, exp_negsq or sin_sumsq)")))
    }
}

/// A one-dimensional quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Result<QuadratureRule> {
    if n < 1 {
        return Err(Error::Argument("quadrature needs at least one node".into()));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule { nodes, weights })
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Gauss–Hermite rule for the standard normal law: `E g(ξ) ≈ Σ w_i g(x_i)`,
/// weights summing to one.
///
/// Starting values come from the eigenvalues of the Jacobi matrix; nodes are
/// then polished by Newton's method on the orthonormal Hermite polynomial and
/// weights taken from the Christoffel function, which keeps tail weights
/// accurate to relative precision.
pub fn gauss_hermite(n: usize) -> Result<QuadratureRule> {
    if n < 1 {
        return Err(Error::Argument("quadrature needs at least one node".into()));
    }
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let mut guess: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    guess.sort_by(f64::total_cmp);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = guess[n - 1 - i].abs();
        if n % 2 == 1 && i == n / 2 {
            x = 0.0;
        } else {
            for _ in 0..50 {
                let (phi_n, phi_nm1, _) = hermite_orthonormal(n, x);
                let dx = phi_n / ((n as f64).sqrt() * phi_nm1);
                x -= dx;
                if dx.abs() <= 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
        }
        let (_, _, christoffel) = hermite_orthonormal(n, x);
        let w = 1.0 / christoffel;
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// `(φ_n(x), φ_{n-1}(x), Σ_{k<n} φ_k(x)²)` for the orthonormal probabilists'
/// Hermite polynomials.
fn hermite_orthonormal(n: usize, x: f64) -> (f64, f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    let mut sum = 0.0;
    for k in 0..n {
        sum += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum)
}

/// A double integral together with the change observed when the node count
/// is doubled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadEstimate {
    pub value: f64,
    pub delta: f64,
}

fn tensor_legendre(f: &dyn Fn(f64, f64) -> f64, lo: f64, hi: f64, rule: &QuadratureRule) -> Result<f64> {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut rows = Vec::with_capacity(rule.nodes.len());
    for (xp, wp) in rule.nodes.iter().zip(&rule.weights) {
        let p = mid + half * xp;
        let mut row = 0.0;
        for (xq, wq) in rule.nodes.iter().zip(&rule.weights) {
            let q = mid + half * xq;
            let val = f(p, q);
            if !val.is_finite() {
                return Err(Error::Integrand { p, q });
            }
            row += wq * val;
        }
        rows.push(wp * row);
    }
    Ok(half * half * crate::linalg::pairwise_sum(&rows))
}

/// Tensor-product Gauss–Legendre integral of `f(p, q)` over `[lo, hi]²`.
pub fn quad2d(f: &dyn Fn(f64, f64) -> f64, lo: f64, hi: f64, n_nodes: usize) -> Result<QuadEstimate> {
    if n_nodes < 2 || !(lo < hi) {
        return Err(Error::Argument(format!("need n_nodes >= 2 and lo < hi, got {n_nodes}, [{lo}, {hi}]")));
    }
    let value = tensor_legendre(f, lo, hi, &gauss_legendre(n_nodes)?)?;
    let fine = tensor_legendre(f, lo, hi, &gauss_legendre(2 * n_nodes)?)?;
    Ok(QuadEstimate { value, delta: (fine - value).abs() })
}

/// `∫ψρ / ∫ρ` over `[lo, hi]²` for the Gibbs density of a built-in model.
pub fn ergodic_reference(model: &LangevinModel, psi: &Observable<'_>, lo: f64, hi: f64, n_nodes: usize) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::Capability("ergodic references are two-dimensional integrals (d = 1)".into()));
    }
    if n_nodes < 2 || !(lo < hi) {
        return Err(Error::Argument(format!("need n_nodes >= 2 and lo < hi, got {n_nodes}, [{lo}, {hi}]")));
    }
    gibbs_density(model, &PhaseState::scalar(0.0, 0.0))?;
    let rule = gauss_legendre(n_nodes)?;
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut z = PhaseState::scalar(0.0, 0.0);
    let mut num_rows = Vec::with_capacity(n_nodes);
    let mut den_rows = Vec::with_capacity(n_nodes);
    for (xp, wp) in rule.nodes.iter().zip(&rule.weights) {
        z.p[0] = mid + half * xp;
        let (mut num, mut den) = (0.0, 0.0);
        for (xq, wq) in rule.nodes.iter().zip(&rule.weights) {
            z.q[0] = mid + half * xq;
            let term = wp * wq * gibbs_density(model, &z)?;
            let val = psi(&z);
            if !val.is_finite() || !term.is_finite() {
                return Err(Error::Integrand { p: z.p[0], q: z.q[0] });
            }
            num += term * val;
            den += term;
        }
        num_rows.push(num);
        den_rows.push(den);
    }
    let den = crate::linalg::pairwise_sum(&den_rows);
    if !(den >= 1e-300) {
        return Err(Error::DegenerateDensity(den));
    }
    Ok(crate::linalg::pairwise_sum(&num_rows) / den)
}

/// Tensor Gauss–Hermite expectations under Gaussian laws.
///
/// The covariance is factored as `V Λ Vᵀ`; directions with eigenvalue at most
/// `1e-14 · max(λ)` are treated as point masses, so degenerate laws cost only
/// their rank.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    rule: QuadratureRule,
}

impl GaussHermite {
    pub fn new(n_nodes: usize) -> Result<Self> {
        Ok(GaussHermite { rule: gauss_hermite(n_nodes)? })
    }

    pub fn n_nodes(&self) -> usize {
        self.rule.nodes.len()
    }

    pub fn expectation(&self, psi: &Observable<'_>, law: &GaussianLaw) -> Result<f64> {
        Ok(self.expectations(&[psi], law)?[0])
    }

    /// Expectations of several observables sharing one set of nodes.
    pub fn expectations(&self, psis: &[&Observable<'_>], law: &GaussianLaw) -> Result<Vec<f64>> {
        let n = law.dim();
        if n % 2 != 0 {
            return Err(Error::Argument("Gaussian law must live on an even-dimensional phase space".into()));
        }
        let d = n / 2;
        let eig = SymmetricEigen::new(law.cov.clone());
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let dirs: Vec<Vec<f64>> = (0..n)
            .filter(|&k| eig.eigenvalues[k] > 1e-14 * top && eig.eigenvalues[k] > 0.0)
            .map(|k| eig.eigenvectors.column(k).iter().map(|v| v * eig.eigenvalues[k].sqrt()).collect())
            .collect();
        let rank = dirs.len();
        let nodes = self.n_nodes();
        let total = nodes.checked_pow(rank as u32).ok_or_else(|| Error::Argument("quadrature grid too large".into()))?;

        let mut z = PhaseState::zeros(d);
        let mut idx = vec![0usize; rank];
        let mut partial: Vec<Vec<f64>> = vec![Vec::with_capacity(total / nodes.max(1) + 1); psis.len()];
        let mut acc = vec![0.0; psis.len()];
        for count in 0..total {
            let mut w = 1.0;
            for i in 0..n {
                let mut val = law.mean[i];
                for (k, dir) in dirs.iter().enumerate() {
                    val += dir[i] * self.rule.nodes[idx[k]];
                }
                if i < d {
                    z.p[i] = val;
                } else {
                    z.q[i - d] = val;
                }
            }
            for k in 0..rank {
                w *= self.rule.weights[idx[k]];
            }
            for (a, psi) in acc.iter_mut().zip(psis) {
                let val = psi(&z);
                if !val.is_finite() {
                    return Err(Error::Integrand { p: z.p[0], q: z.q[0] });
                }
                *a += w * val;
            }
            // Odometer over the tensor grid; flush a row at each wrap of the
            // fastest index to keep sums short.
            let mut k = 0;
            while k < rank {
                idx[k] += 1;
                if idx[k] < nodes {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if rank == 0 || idx[0] == 0 || count + 1 == total {
                for (p, a) in partial.iter_mut().zip(acc.iter_mut()) {
                    p.push(*a);
                    *a = 0.0;
                }
            }
        }
        Ok(partial.iter().map(|p| crate::linalg::pairwise_sum(p)).collect())
    }
}

/// `E ψ(Z)` for `Z ~ law` by tensor Gauss–Hermite quadrature.
pub fn gauss_expectation(psi: &Observable<'_>, law: &GaussianLaw, n_nodes: usize) -> Result<f64> {
    GaussHermite::new(n_nodes)?.expectation(psi, law)
}

/// `|E ψ(Z(T)) - E ψ(Z_N)|` for a linear model, both sides exact Gaussian
/// laws evaluated by quadrature.
pub fn weak_error_linear(model: &LangevinModel, psi: &Observable<'_>, z0: &PhaseState, h: f64, t_end: f64, n_nodes: usize) -> Result<f64> {
    let n = step_count(t_end, h)?;
    let gh = GaussHermite::new(n_nodes)?;
    let exact = linear_exact_moments(model, z0, t_end)?;
    let map = gf2_affine_map(model, h)?;
    let chain = propagate_gaussian_chain(&map, &GaussianLaw::point_mass(z0), n, h)?;
    Ok((gh.expectation(psi, &exact)? - gh.expectation(psi, &chain)?).abs())
}

/// Ordinary least squares of `log error` on `log h`: `(slope, intercept)`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Argument("order fit needs at least two points".into()));
    }
    if let Some(&(h, e)) = points.iter().find(|(h, e)| !(*h > 0.0) || !(*e > 0.0) || !h.is_finite() || !e.is_finite()) {
        return Err(Error::Argument(format!("order fit needs positive finite h and error, got ({h}, {e})")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-300 {
        return Err(Error::Argument("order fit needs at least two distinct step sizes".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// `‖JᵀΩJ - e^{-vh}Ω‖_∞` (max-row-sum norm) with `Ω = [[0, I], [-I, 0]]`.
pub fn conformal_defect(j: &DMatrix<f64>, v: f64, h: f64) -> Result<f64> {
    let n = j.nrows();
    if n != j.ncols() || n % 2 != 0 || n == 0 {
        return Err(Error::Argument(format!("Jacobian must be square of even size, got {}×{}", n, j.ncols())));
    }
    let omega = symplectic_form(n / 2);
    let diff = j.transpose() * &omega * j - omega * (-v * h).exp();
    Ok((0..n).map(|i| diff.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max))
}

pub fn symplectic_form(d: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        omega[(i, d + i)] = 1.0;
        omega[(d + i, i)] = -1.0;
    }
    omega
}

/// Running means: output `k` is the mean of the first `k + 1` entries.
pub fn temporal_average(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Argument("temporal average of an empty series".into()));
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    Ok(series
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            // Neumaier summation; long series would otherwise drift.
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
            (sum + comp) / (k + 1) as f64
        })
        .collect())
}

/// `E g_j(Z_n)` for `n = 1..=n_steps` under the numerical Gaussian chain of a
/// linear model. Returned as `[observable][n - 1]`.
pub fn linear_expectation_series(
    model: &LangevinModel,
    observables: &[&Observable<'_>],
    z0: &PhaseState,
    h: f64,
    n_steps: usize,
    n_nodes: usize,
) -> Result<Vec<Vec<f64>>> {
    let gh = GaussHermite::new(n_nodes)?;
    let map = gf2_affine_map(model, h)?;
    let mut out = vec![Vec::with_capacity(n_steps); observables.len()];
    gaussian_chain_for_each(&map, &GaussianLaw::point_mass(z0), n_steps, h, |k, law| {
        if k > 0 {
            for (o, e) in out.iter_mut().zip(gh.expectations(observables, law)?) {
                o.push(e);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// How an error estimate was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pipeline {
    Deterministic,
    MonteCarlo { std_error: f64 },
}

impl Pipeline {
    pub fn label(self) -> &'static str {
        match self {
            Pipeline::Deterministic => "deterministic",
            Pipeline::MonteCarlo { .. } => "mc",
        }
    }

    pub fn std_error(self) -> f64 {
        match self {
            Pipeline::Deterministic => 0.0,
            Pipeline::MonteCarlo { std_error } => std_error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPoint {
    pub h: f64,
    pub error: f64,
    pub pipeline: Pipeline,
    /// Excluded from the fit because it is indistinguishable from noise.
    pub censored: bool,
}

/// Error-vs-step points with a log-log fit over the uncensored ones. The fit
/// is NaN when censoring leaves fewer than two points.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakOrderReport {
    pub points: Vec<ErrorPoint>,
    pub slope: f64,
    pub intercept: f64,
}

impl WeakOrderReport {
    pub fn from_points(points: Vec<ErrorPoint>) -> Result<Self> {
        let mut hs: Vec<f64> = points.iter().map(|p| p.h).collect();
        hs.sort_by(f64::total_cmp);
        if hs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("step sizes must be distinct".into()));
        }
        let used: Vec<(f64, f64)> = points.iter().filter(|p| !p.censored).map(|p| (p.h, p.error)).collect();
        // Censoring can leave nothing to fit; the curve itself is still reported.
        let (slope, intercept) = if used.len() < 2 && points.iter().any(|p| p.censored) { (f64::NAN, f64::NAN) } else { fit_order(&used)? };
        Ok(WeakOrderReport { points, slope, intercept })
    }

    fn from_mc(estimates: Vec<(f64, EstimatorResult)>, censor: bool) -> Result<Self> {
        Self::from_points(
            estimates
                .into_iter()
                .map(|(h, e)| ErrorPoint {
                    h,
                    error: e.mean.abs(),
                    pipeline: Pipeline::MonteCarlo { std_error: e.std_error },
                    censored: censor && e.mean.abs() < 2.0 * e.std_error,
                })
                .collect(),
        )
    }
}

/// Deterministic weak-error curve for a linear model.
pub fn weak_order_linear(model: &LangevinModel, psi: &Observable<'_>, z0: &PhaseState, hs: &[f64], t_end: f64, n_nodes: usize) -> Result<WeakOrderReport> {
    let points = hs
        .iter()
        .map(|&h| {
            Ok(ErrorPoint { h, error: weak_error_linear(model, psi, z0, h, t_end, n_nodes)?, pipeline: Pipeline::Deterministic, censored: false })
        })
        .collect::<Result<Vec<_>>>()?;
    WeakOrderReport::from_points(points)
}

/// Monte Carlo weak-error curve against coupled references at `h / refine`.
/// Points whose `|error| < 2·std_error` are censored from the fit.
#[allow(clippy::too_many_arguments)]
pub fn weak_order_mc(
    model: &LangevinModel,
    psi: &Observable<'_>,
    z0: &PhaseState,
    hs: &[f64],
    t_end: f64,
    n_realizations: u64,
    refine: usize,
    plan: &SeedPlan,
) -> Result<WeakOrderReport> {
    if refine < 2 {
        return Err(Error::Argument(format!("refinement factor must be at least 2, got {refine}")));
    }
    let est = hs
        .iter()
        .map(|&h| Ok((h, coupled_weak_difference(model, Scheme::Gf2, psi, z0, h, t_end, n_realizations, refine, plan)?)))
        .collect::<Result<Vec<_>>>()?;
    WeakOrderReport::from_mc(est, true)
}

/// `E‖Z(h) - Z₁‖²` for one step from `z0`, with `Z(h)` approximated by
/// `refine` steps of size `h / refine` on the same Brownian path.
pub fn local_ms_gap(model: &LangevinModel, z0: &PhaseState, h: f64, refine: usize, n_realizations: u64, plan: &SeedPlan) -> Result<EstimatorResult> {
    if refine == 0 || n_realizations < 2 {
        return Err(Error::Argument("need refine >= 1 and at least 2 realizations".into()));
    }
    let fine_h = h / refine as f64;
    Stepper::new(model, Scheme::Gf2, fine_h)?;
    let m = model.noise_dim();
    let sqrt_fine = fine_h.sqrt();
    let values = run_realizations(n_realizations, plan, |i, rng| {
        let mut coarse = Stepper::new(model, Scheme::Gf2, h)?;
        let mut fine = Stepper::new(model, Scheme::Gf2, fine_h)?;
        let mut zf = z0.clone();
        let mut zc = z0.clone();
        let mut dw = vec![0.0; m];
        let mut acc = vec![0.0; m];
        for j in 0..refine {
            for x in dw.iter_mut() {
                *x = sqrt_fine * standard_normal(rng);
            }
            fine.step(&mut zf, &dw).map_err(|e| Error::Realization { realization: i, step: j + 1, source: Box::new(e) })?;
            acc.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
        }
        coarse.step(&mut zc, &acc).map_err(|e| Error::Realization { realization: i, step: 1, source: Box::new(e) })?;
        let gap: f64 = zc.p.iter().zip(&zf.p).chain(zc.q.iter().zip(&zf.q)).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(gap)
    })?;
    EstimatorResult::from_samples(&values)
}

/// Local mean-square gap over several step sizes, fitted for its slope.
pub fn local_ms_error(model: &LangevinModel, z0: &PhaseState, hs: &[f64], refine: usize, n_realizations: u64, plan: &SeedPlan) -> Result<WeakOrderReport> {
    let est = hs
        .iter()
        .map(|&h| Ok((h, local_ms_gap(model, z0, h, refine, n_realizations, plan)?)))
        .collect::<Result<Vec<_>>>()?;
    WeakOrderReport::from_mc(est, false)
}

/// Running temporal averages of `E ψ(Z_n)` for one initial value and one test
/// function.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicSeries {
    pub initial_label: String,
    pub psi: TestFunction,
    pub running_average: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicReport {
    pub h: f64,
    pub references: Vec<(TestFunction, f64)>,
    pub series: Vec<ErgodicSeries>,
}

impl ErgodicReport {
    pub fn reference(&self, psi: TestFunction) -> f64 {
        self.references.iter().find(|(f, _)| *f == psi).map(|r| r.1).unwrap_or(f64::NAN)
    }

    /// `|final average - reference|` for every series.
    pub fn final_deviations(&self) -> Vec<f64> {
        self.series.iter().map(|s| (s.running_average[s.running_average.len() - 1] - self.reference(s.psi)).abs()).collect()
    }

    /// Largest gap between final averages of different initials for `psi`.
    pub fn max_pairwise_gap(&self, psi: TestFunction) -> f64 {
        let finals: Vec<f64> = self.series.iter().filter(|s| s.psi == psi).map(|s| s.running_average[s.running_average.len() - 1]).collect();
        let mut gap: f64 = 0.0;
        for a in &finals {
            for b in &finals {
                gap = gap.max((a - b).abs());
            }
        }
        gap
    }
}

/// Box and node count for Gibbs reference integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceQuadrature {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Default for ReferenceQuadrature {
    fn default() -> Self {
        ReferenceQuadrature { lo: -10.0, hi: 10.0, nodes: 200 }
    }
}

fn references(model: &LangevinModel, psis: &[TestFunction], quad: ReferenceQuadrature) -> Result<Vec<(TestFunction, f64)>> {
    psis.iter().map(|&f| Ok((f, ergodic_reference(model, &|z: &PhaseState| f.eval(z), quad.lo, quad.hi, quad.nodes)?))).collect()
}

/// Temporal averages for a linear model from per-step Gaussian expectations.
pub fn ergodic_linear(
    model: &LangevinModel,
    psis: &[TestFunction],
    initials: &[(String, PhaseState)],
    h: f64,
    t_end: f64,
    hermite_nodes: usize,
    quad: ReferenceQuadrature,
) -> Result<ErgodicReport> {
    let n = step_count(t_end, h)?;
    let obs: Vec<Box<Observable<'_>>> = psis.iter().map(|&f| Box::new(move |z: &PhaseState| f.eval(z)) as Box<Observable<'_>>).collect();
    let refs: Vec<&Observable<'_>> = obs.iter().map(|b| b.as_ref()).collect();
    let mut series = Vec::new();
    for (label, z0) in initials {
        let s = linear_expectation_series(model, &refs, z0, h, n, hermite_nodes)?;
        for (&f, e) in psis.iter().zip(s) {
            series.push(ErgodicSeries { initial_label: label.clone(), psi: f, running_average: temporal_average(&e)? });
        }
    }
    Ok(ErgodicReport { h, references: references(model, psis, quad)?, series })
}

/// Temporal averages from Monte Carlo ensemble means at every step.
/// Each initial value gets its own seed plan derived from `plan`.
#[allow(clippy::too_many_arguments)]
pub fn ergodic_mc(
    model: &LangevinModel,
    psis: &[TestFunction],
    initials: &[(String, PhaseState)],
    h: f64,
    t_end: f64,
    n_realizations: u64,
    plan: &SeedPlan,
    quad: ReferenceQuadrature,
) -> Result<ErgodicReport> {
    let n = step_count(t_end, h)?;
    let obs: Vec<Box<Observable<'_>>> = psis.iter().map(|&f| Box::new(move |z: &PhaseState| f.eval(z)) as Box<Observable<'_>>).collect();
    let refs: Vec<&Observable<'_>> = obs.iter().map(|b| b.as_ref()).collect();
    let mut series = Vec::new();
    for (k, (label, z0)) in initials.iter().enumerate() {
        let sub = SeedPlan::new(plan.derive_seed(u64::MAX - k as u64));
        let means = ensemble_means(model, Scheme::Gf2, &refs, z0, h, n, n_realizations, &sub)?;
        for (&f, e) in psis.iter().zip(means) {
            series.push(ErgodicSeries { initial_label: label.clone(), psi: f, running_average: temporal_average(&e[1..])? });
        }
    }
    Ok(ErgodicReport { h, references: references(model, psis, quad)?, series })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DoubleWell, LinearOscillator};
    use nalgebra::DVector;

    fn lin() -> LangevinModel {
        LinearOscillator { a: 1.0, v: 2.0, sigma: 0.5 }.model().unwrap()
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        for n in [1, 2, 5, 16, 200] {
            let r = gauss_legendre(n).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            for k in 0..(2 * n).min(30) {
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                let got: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert!((got - exact).abs() < 1e-13, "n={n}, k={k}: {got}");
            }
        }
    }

    #[test]
    fn hermite_rule_reproduces_normal_moments() {
        for n in [1, 2, 3, 8, 20, 64] {
            let r = gauss_hermite(n).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
            // E ξ^k = (k-1)!! for even k.
            let mut moment = 1.0;
            for k in 0..(2 * n).min(24) {
                let exact = if k % 2 == 1 { 0.0 } else { moment };
                let got: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                let scale: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| (w * x.powi(k as i32)).abs()).sum();
                assert!((got - exact).abs() <= 1e-13 * scale.max(1.0), "n={n}, k={k}: {got} vs {exact}");
                if k % 2 == 1 {
                    moment *= k as f64;
                }
            }
        }
    }

    #[test]
    fn quad2d_examples() {
        let one = quad2d(&|_, _| 1.0, 0.0, 1.0, 8).unwrap();
        assert!((one.value - 1.0).abs() < 1e-14);
        let odd = quad2d(&|p, q| p * q, -3.0, 3.0, 9).unwrap();
        assert!(odd.value.abs() < 1e-14);
        let g = quad2d(&|p, q| (-8.0 * (p * p + q * q)).exp(), -10.0, 10.0, 200).unwrap();
        assert!((g.value - std::f64::consts::PI / 8.0).abs() < 1e-10, "{}", g.value);
        assert!(matches!(quad2d(&|p, _| 1.0 / p, -1.0, 1.0, 3), Err(Error::Integrand { .. })));
        assert!(quad2d(&|_, _| 1.0, 1.0, 0.0, 4).is_err());
    }

    #[test]
    fn quad2d_deltas_decrease() {
        let f = |p: f64, q: f64| (p * q).cos() * (-(p * p + q * q) / 4.0).exp();
        let deltas: Vec<f64> = [4, 8, 16].iter().map(|&n| quad2d(&f, -4.0, 4.0, n).unwrap().delta).collect();
        assert!(deltas[0] > deltas[1] && deltas[1] > deltas[2], "{deltas:?}");
    }

    #[test]
    fn gibbs_references() {
        let m = lin();
        let q = ReferenceQuadrature::default();
        assert_eq!(ergodic_reference(&m, &|_| 1.0, q.lo, q.hi, q.nodes).unwrap(), 1.0);
        let e = ergodic_reference(&m, &|z| TestFunction::ExpNegSq.eval(z), q.lo, q.hi, q.nodes).unwrap();
        // Stationary variance per coordinate is σ²/(2v) = 0.0625.
        assert!((e - 1.0 / 1.0625).abs() < 1e-10, "{e}");
        let c = ergodic_reference(&m, &|z| TestFunction::CosSum.eval(z), q.lo, q.hi, q.nodes).unwrap();
        assert!((c - (-0.0625f64).exp()).abs() < 1e-10, "{c}");

        let dw = DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap();
        let mean_q = ergodic_reference(&dw, &|z| z.q[0], q.lo, q.hi, q.nodes).unwrap();
        // The tilt favours the right well.
        assert!(mean_q > 0.0 && mean_q < 1.0);
    }

    #[test]
    fn gaussian_expectation_examples() {
        let law = GaussianLaw::new(DVector::from_vec(vec![0.3, -1.2]), DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2])).unwrap();
        assert!((gauss_expectation(&|_| 1.0, &law, 16).unwrap() - 1.0).abs() < 1e-14);
        assert!((gauss_expectation(&|z| z.p[0], &law, 16).unwrap() - 0.3).abs() < 1e-14);
        let c = 0.015625;
        let iso = GaussianLaw::new(DVector::zeros(2), DMatrix::identity(2, 2) * c).unwrap();
        let e = gauss_expectation(&|z| TestFunction::CosSum.eval(z), &iso, 64).unwrap();
        // Var(p + q) = 2c, so E cos(p + q) = e^{-c}.
        assert!((e - (-c).exp()).abs() < 1e-14);
        let point = GaussianLaw::point_mass(&PhaseState::scalar(0.5, 0.25));
        assert_eq!(gauss_expectation(&|z| z.p[0] * z.q[0], &point, 64).unwrap(), 0.125);
    }

    #[test]
    fn gaussian_expectation_is_exact_for_polynomials() {
        // (p, q) ~ N(m, C): E[(p - m_p)^2 (q - m_q)^2] = C_pp C_qq + 2 C_pq².
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3]);
        let law = GaussianLaw::new(DVector::from_vec(vec![1.0, -2.0]), cov).unwrap();
        let e = gauss_expectation(&|z| (z.p[0] - 1.0).powi(2) * (z.q[0] + 2.0).powi(2), &law, 3).unwrap();
        assert!((e - (0.5 * 0.3 + 2.0 * 0.04)).abs() < 1e-13);
        let e = gauss_expectation(&|z| (z.p[0] - 1.0).powi(6), &law, 4).unwrap();
        assert!((e - 15.0 * 0.125).abs() < 1e-12);
        let e = gauss_expectation(&|z| z.p[0] * z.p[0] * z.q[0], &law, 2).unwrap();
        // E[p²q] = m_p² m_q + C_pp m_q + 2 m_p C_pq.
        assert!((e - (-2.0 - 1.0 + 0.4)).abs() < 1e-13);
    }

    #[test]
    fn fit_order_examples() {
        for k in [1.0, 2.0, 3.0] {
            let pts: Vec<(f64, f64)> = [3, 4, 5].iter().map(|&e| (2f64.powi(-e), 0.7 * 2f64.powi(-e).powf(k))).collect();
            let (s, b) = fit_order(&pts).unwrap();
            assert!((s - k).abs() < 1e-12 && (b - 0.7f64.ln()).abs() < 1e-10);
        }
        assert!(fit_order(&[(0.1, 1.0), (0.1, 1.0)]).is_err());
        assert!(fit_order(&[(0.1, 0.0), (0.2, 1.0)]).is_err());
        assert!(fit_order(&[(0.1, 1.0)]).is_err());
    }

    #[test]
    fn conformal_defect_examples() {
        let (v, h) = (2.0f64, 0.125f64);
        let e = (-v * h).exp();
        let j = DMatrix::from_row_slice(2, 2, &[e, 0.0, 0.0, 1.0]);
        assert!(conformal_defect(&j, v, h).unwrap() < 1e-16);
        assert!((conformal_defect(&DMatrix::identity(2, 2), v, h).unwrap() - (1.0 - e)).abs() < 1e-16);
        assert!(conformal_defect(&DMatrix::identity(3, 3), v, h).is_err());
        let j = crate::integrators::gf2_jacobian(&lin(), &PhaseState::scalar(0.4, -1.0), h, &[0.1]).unwrap();
        assert!(conformal_defect(&j, v, h).unwrap() < 1e-14);
    }

    #[test]
    fn composed_defect_regularity() {
        let m = lin();
        let h = 0.1;
        let j = crate::integrators::gf2_jacobian(&m, &PhaseState::scalar(0.0, 0.0), h, &[0.0]).unwrap();
        let one = conformal_defect(&j, 2.0, h).unwrap();
        let mut jn = DMatrix::identity(2, 2);
        for n in 1..=16 {
            jn = &j * jn;
            let dn = conformal_defect(&jn, 2.0, n as f64 * h).unwrap();
            assert!(dn <= (n as f64) * one.max(1e-16) * j.norm().max(1.0).powi(2));
        }
    }

    #[test]
    fn temporal_average_examples() {
        assert_eq!(temporal_average(&[0.0, 2.0]).unwrap(), vec![0.0, 1.0]);
        assert!(temporal_average(&[0.3; 1000]).unwrap().iter().all(|&a| (a - 0.3).abs() < 1e-15));
        assert!(temporal_average(&[]).is_err());
    }

    #[test]
    fn weak_error_linear_examples() {
        let m = lin();
        let psi = |z: &PhaseState| TestFunction::CosSum.eval(z);
        let z0 = PhaseState::scalar(3.0, 1.0);
        assert_eq!(weak_error_linear(&m, &psi, &z0, 0.125, 0.0, 16).unwrap(), 0.0);
        let e3 = weak_error_linear(&m, &psi, &z0, 0.125, 1.0, 64).unwrap();
        let e5 = weak_error_linear(&m, &psi, &z0, 0.03125, 1.0, 64).unwrap();
        let ratio = e3 / e5;
        assert!(ratio > 16.0 / 1.5 && ratio < 16.0 * 1.5, "ratio {ratio}");
    }

    #[test]
    fn deterministic_linear_error_is_second_order() {
        let m = LinearOscillator { a: 1.0, v: 2.0, sigma: 0.5 }.model().unwrap();
        let quiet = LangevinModel::new_unchecked(
            std::sync::Arc::new(crate::models::Quadratic::new(DMatrix::from_element(1, 1, 1.0)).unwrap()),
            m.mass().clone(),
            2.0,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let psi = |z: &PhaseState| z.q[0];
        let hs = [0.125, 0.0625, 0.03125, 0.015625];
        let r = weak_order_linear(&quiet, &psi, &PhaseState::scalar(3.0, 1.0), &hs, 1.0, 4).unwrap();
        assert!((r.slope - 2.0).abs() < 0.2, "slope {}", r.slope);
    }

    #[test]
    fn local_gap_zero_for_identical_chains() {
        let m = DoubleWell { v: 4.0, beta: 2.0 }.model().unwrap();
        let r = local_ms_gap(&m, &PhaseState::scalar(-2.0, -2.0), 0.01, 1, 10, &SeedPlan::new(0)).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn local_gap_deterministic_is_third_order() {
        let quiet = LangevinModel::new_unchecked(
            std::sync::Arc::new(crate::models::TiltedDoubleWell),
            DMatrix::from_element(1, 1, 1.0),
            4.0,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let hs: Vec<f64> = (6..=10).map(|k| 2f64.powi(-k)).collect();
        let r = local_ms_error(&quiet, &PhaseState::scalar(-2.0, -2.0), &hs, 16, 2, &SeedPlan::new(0)).unwrap();
        assert!(r.slope >= 2.8, "slope {}", r.slope);
    }

    #[test]
    fn censoring_excludes_noise_points() {
        let pts = vec![
            ErrorPoint { h: 0.1, error: 1e-2, pipeline: Pipeline::MonteCarlo { std_error: 1e-4 }, censored: false },
            ErrorPoint { h: 0.05, error: 2.5e-3, pipeline: Pipeline::MonteCarlo { std_error: 1e-4 }, censored: false },
            ErrorPoint { h: 0.025, error: 1e-5, pipeline: Pipeline::MonteCarlo { std_error: 1e-4 }, censored: true },
        ];
        let r = WeakOrderReport::from_points(pts).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fully_censored_curve_has_nan_fit() {
        let pts = vec![
            ErrorPoint { h: 0.1, error: 1e-2, pipeline: Pipeline::MonteCarlo { std_error: 1e-4 }, censored: false },
            ErrorPoint { h: 0.05, error: 1e-5, pipeline: Pipeline::MonteCarlo { std_error: 1e-4 }, censored: true },
        ];
        let r = WeakOrderReport::from_points(pts).unwrap();
        assert!(r.slope.is_nan() && r.intercept.is_nan());
        assert_eq!(r.points.len(), 2);
    }

    #[test]
    fn test_function_catalog() {
        let z = PhaseState::scalar(0.5, 0.25);
        assert_eq!(TestFunction::CosSum.eval(&z), 0.75f64.cos());
        assert_eq!(TestFunction::ExpNegSq.eval(&z), (-0.5f64 * 0.3125).exp());
        assert_eq!(TestFunction::SinSumSq.eval(&z), 0.3125f64.sin());
        assert_eq!("exp_negsq".parse::<TestFunction>().unwrap(), TestFunction::ExpNegSq);
        assert!("cos".parse::<TestFunction>().is_err());
    }
}
