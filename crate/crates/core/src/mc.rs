//! Reproducible Monte Carlo machinery.
//!
//! Every realization `i` draws from its own generator seeded with
//! [`SeedPlan::derive_seed`]`(i)`, and all reductions use summation trees
//! whose shape depends only on the realization count. Results are therefore
//! bit-identical for any number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrators::{Scheme, Stepper};
use crate::linalg::pairwise_sum;
use crate::models::{LangevinModel, PhaseState};

/// Scalar observable of a phase-space state.
pub type Observable<'a> = dyn Fn(&PhaseState) -> f64 + Sync + 'a;

/// Per-trajectory generator.
pub type TrajectoryRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; a bijection on `u64`.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a master seed and a realization index to a per-trajectory seed.
///
/// `seed(i) = mix(mix(master) + γ·(i + 1))` with the SplitMix64 constants.
/// Because `mix` is a bijection and `γ` is odd, distinct indices under one
/// master, and distinct masters at one index, never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub master_seed: u64,
}

impl SeedPlan {
    pub fn new(master_seed: u64) -> Self {
        SeedPlan { master_seed }
    }

    pub fn derive_seed(&self, index: u64) -> u64 {
        mix64(mix64(self.master_seed).wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
    }

    pub fn rng(&self, index: u64) -> TrajectoryRng {
        rng_from_seed(self.derive_seed(index))
    }
}

pub fn rng_from_seed(seed: u64) -> TrajectoryRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The single place that turns generator output into `N(0, 1)` draws
/// (ziggurat sampler of `rand_distr`).
#[inline]
pub fn standard_normal(rng: &mut TrajectoryRng) -> f64 {
    StandardNormal.sample(rng)
}

/// A supply of Brownian increments of fixed dimension.
pub trait IncrementSource {
    fn dim(&self) -> usize;
    fn next_increment(&mut self, out: &mut [f64]) -> Result<()>;
}

/// Increments `√h ξ` drawn on the fly from a seeded generator.
pub struct GaussianIncrements {
    rng: TrajectoryRng,
    m: usize,
    sqrt_h: f64,
}

impl GaussianIncrements {
    pub fn new(seed: u64, m: usize, h: f64) -> Self {
        GaussianIncrements { rng: rng_from_seed(seed), m, sqrt_h: h.sqrt() }
    }
}

impl IncrementSource for GaussianIncrements {
    fn dim(&self) -> usize {
        self.m
    }

    fn next_increment(&mut self, out: &mut [f64]) -> Result<()> {
        for x in out.iter_mut().take(self.m) {
            *x = self.sqrt_h * standard_normal(&mut self.rng);
        }
        Ok(())
    }
}

/// `n × m` Brownian increments with step `h`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBlock {
    pub h: f64,
    pub m: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

impl IncrementBlock {
    /// I.i.d. `N(0, h)` entries; same seed, same block.
    pub fn sample(seed: u64, n: usize, m: usize, h: f64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Argument("increment block needs n, m >= 1".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Argument(format!("step must be positive, got {h}")));
        }
        let mut src = GaussianIncrements::new(seed, m, h);
        let mut values = vec![0.0; n * m];
        for row in values.chunks_mut(m) {
            src.next_increment(row)?;
        }
        Ok(IncrementBlock { h, m, n, values })
    }

    pub fn zeros(n: usize, m: usize, h: f64) -> Self {
        IncrementBlock { h, m, n, values: vec![0.0; n * m] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// Sums `k` consecutive increments, giving a block with step `k·h`.
    pub fn coarsen(&self, k: usize) -> Result<Self> {
        if k == 0 || self.n % k != 0 {
            return Err(Error::Argument(format!("coarsening factor {k} does not divide {}", self.n)));
        }
        let n = self.n / k;
        let mut values = vec![0.0; n * self.m];
        for i in 0..n {
            for r in 0..self.m {
                values[i * self.m + r] = (0..k).map(|j| self.values[(i * k + j) * self.m + r]).sum();
            }
        }
        Ok(IncrementBlock { h: self.h * k as f64, m: self.m, n, values })
    }

    pub fn source(&self) -> BlockSource<'_> {
        BlockSource { block: self, next: 0 }
    }
}

pub fn sample_increments(seed: u64, n: usize, m: usize, h: f64) -> Result<IncrementBlock> {
    IncrementBlock::sample(seed, n, m, h)
}

pub fn coarsen(block: &IncrementBlock, k: usize) -> Result<IncrementBlock> {
    block.coarsen(k)
}

/// Replays an [`IncrementBlock`] row by row.
pub struct BlockSource<'a> {
    block: &'a IncrementBlock,
    next: usize,
}

impl IncrementSource for BlockSource<'_> {
    fn dim(&self) -> usize {
        self.block.m
    }

    fn next_increment(&mut self, out: &mut [f64]) -> Result<()> {
        if self.next >= self.block.n {
            return Err(Error::Argument(format!("increment block exhausted after {} rows", self.block.n)));
        }
        out[..self.block.m].copy_from_slice(self.block.row(self.next));
        self.next += 1;
        Ok(())
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorResult {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: u64,
}

impl EstimatorResult {
    /// Two-pass estimate over values ordered by realization index.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("no samples".into()));
        }
        let n = values.len() as f64;
        // Shifting by the first sample keeps constant samples exact.
        let shift = values[0];
        let centred: Vec<f64> = values.iter().map(|x| x - shift).collect();
        let offset = pairwise_sum(&centred) / n;
        let mean = shift + offset;
        let std_error = if values.len() > 1 {
            let dev: Vec<f64> = centred.iter().map(|x| (x - offset) * (x - offset)).collect();
            (pairwise_sum(&dev) / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Ok(EstimatorResult { mean, std_error, n_samples: values.len() as u64 })
    }
}

/// Number of steps of size `h` in `[0, t_end]`; `t_end / h` must be an integer.
pub fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) || !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Argument(format!("need h > 0 and T >= 0, got h = {h}, T = {t_end}")));
    }
    let n = (t_end / h).round();
    if (n * h - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::Argument(format!("T = {t_end} is not an integer multiple of h = {h}")));
    }
    Ok(n as usize)
}

/// Evaluates `f(i, rng_i)` for every realization and returns the values in
/// index order.
pub(crate) fn run_realizations<F>(n: u64, plan: &SeedPlan, f: F) -> Result<Vec<f64>>
where
    F: Fn(u64, &mut TrajectoryRng) -> Result<f64> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = plan.rng(i);
            f(i, &mut rng)
        })
        .collect()
}

fn blowup(realization: u64, step: usize, e: Error) -> Error {
    Error::Realization { realization, step, source: Box::new(e) }
}

#[inline]
fn draw(rng: &mut TrajectoryRng, scale: f64, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = scale * standard_normal(rng);
    }
}

fn check_model_state(model: &LangevinModel, z0: &PhaseState) -> Result<()> {
    if z0.dim() != model.dim() || z0.q.len() != model.dim() {
        return Err(Error::Argument("initial state dimension does not match the model".into()));
    }
    if !z0.is_finite() {
        return Err(Error::Domain("non-finite initial state".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of `E ψ(Z_N)`, `N = T/h`, over independent trajectories.
#[allow(clippy::too_many_arguments)]
pub fn mc_expectation(
    model: &LangevinModel,
    scheme: Scheme,
    psi: &Observable<'_>,
    z0: &PhaseState,
    h: f64,
    t_end: f64,
    n_realizations: u64,
    plan: &SeedPlan,
) -> Result<EstimatorResult> {
    if n_realizations < 2 {
        return Err(Error::Argument("need at least 2 realizations".into()));
    }
    check_model_state(model, z0)?;
    let n_steps = step_count(t_end, h)?;
    Stepper::new(model, scheme, h)?;
    let m = model.noise_dim();
    let sqrt_h = h.sqrt();
    let values = run_realizations(n_realizations, plan, |i, rng| {
        let mut stepper = Stepper::new(model, scheme, h)?;
        let mut z = z0.clone();
        let mut dw = vec![0.0; m];
        for n in 0..n_steps {
            draw(rng, sqrt_h, &mut dw);
            stepper.step(&mut z, &dw).map_err(|e| blowup(i, n + 1, e))?;
        }
        Ok(psi(&z))
    })?;
    EstimatorResult::from_samples(&values)
}

/// Coupled estimate of `E ψ(Z_N^{h}) - E ψ(Z_{kN}^{h/k})`.
///
/// Both chains share one Brownian path: the fine chain consumes increments of
/// step `h/k` and the coarse chain their sums over `k` consecutive draws.
/// With `k = 1` the two chains coincide and the estimate is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn coupled_weak_difference(
    model: &LangevinModel,
    scheme: Scheme,
    psi: &Observable<'_>,
    z0: &PhaseState,
    h: f64,
    t_end: f64,
    n_realizations: u64,
    refine: usize,
    plan: &SeedPlan,
) -> Result<EstimatorResult> {
    if refine == 0 {
        return Err(Error::Argument("refinement factor must be positive".into()));
    }
    if n_realizations < 2 {
        return Err(Error::Argument("need at least 2 realizations".into()));
    }
    check_model_state(model, z0)?;
    let n_steps = step_count(t_end, h)?;
    let fine_h = h / refine as f64;
    step_count(t_end, fine_h)?;
    Stepper::new(model, scheme, fine_h)?;
    let m = model.noise_dim();
    let sqrt_fine = fine_h.sqrt();
    let values = run_realizations(n_realizations, plan, |i, rng| {
        let mut coarse = Stepper::new(model, scheme, h)?;
        let mut fine = Stepper::new(model, scheme, fine_h)?;
        let mut zc = z0.clone();
        let mut zf = z0.clone();
        let mut dw = vec![0.0; m];
        let mut acc = vec![0.0; m];
        for n in 0..n_steps {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..refine {
                draw(rng, sqrt_fine, &mut dw);
                fine.step(&mut zf, &dw).map_err(|e| blowup(i, n * refine + j + 1, e))?;
                acc.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
            }
            coarse.step(&mut zc, &acc).map_err(|e| blowup(i, n + 1, e))?;
        }
        Ok(psi(&zc) - psi(&zf))
    })?;
    EstimatorResult::from_samples(&values)
}

/// Weak error of the conformal symplectic scheme at step `h` against a
/// reference chain at `h/refine` on the same Brownian path.
#[allow(clippy::too_many_arguments)]
pub fn weak_error_mc(
    model: &LangevinModel,
    psi: &Observable<'_>,
    z0: &PhaseState,
    h: f64,
    t_end: f64,
    n_realizations: u64,
    refine: usize,
    plan: &SeedPlan,
) -> Result<EstimatorResult> {
    if refine < 2 {
        return Err(Error::Argument(format!("refinement factor must be at least 2, got {refine}")));
    }
    coupled_weak_difference(model, Scheme::Gf2, psi, z0, h, t_end, n_realizations, refine, plan)
}

const ENSEMBLE_BLOCK: u64 = 32;

/// Ensemble means `E g_j(Z_n)` for every observable `g_j` and every step
/// `n = 0..=n_steps`. Returned as `[observable][step]`.
///
/// Realizations are grouped into fixed blocks of 32 consecutive indices;
/// block sums are combined by a binary tree over block indices.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_means(
    model: &LangevinModel,
    scheme: Scheme,
    observables: &[&Observable<'_>],
    z0: &PhaseState,
    h: f64,
    n_steps: usize,
    n_realizations: u64,
    plan: &SeedPlan,
) -> Result<Vec<Vec<f64>>> {
    if n_realizations == 0 {
        return Err(Error::Argument("need at least 1 realization".into()));
    }
    check_model_state(model, z0)?;
    Stepper::new(model, scheme, h)?;
    let n_blocks = n_realizations.div_ceil(ENSEMBLE_BLOCK);
    let width = n_steps + 1;
    let n_obs = observables.len();

    let run_block = |b: u64| -> Result<Vec<f64>> {
        let mut sums = vec![0.0; n_obs * width];
        let m = model.noise_dim();
        let sqrt_h = h.sqrt();
        let end = ((b + 1) * ENSEMBLE_BLOCK).min(n_realizations);
        for i in b * ENSEMBLE_BLOCK..end {
            let mut rng = plan.rng(i);
            let mut stepper = Stepper::new(model, scheme, h)?;
            let mut z = z0.clone();
            let mut dw = vec![0.0; m];
            for (j, g) in observables.iter().enumerate() {
                sums[j * width] += g(&z);
            }
            for n in 1..=n_steps {
                draw(&mut rng, sqrt_h, &mut dw);
                stepper.step(&mut z, &dw).map_err(|e| blowup(i, n, e))?;
                for (j, g) in observables.iter().enumerate() {
                    sums[j * width + n] += g(&z);
                }
            }
        }
        Ok(sums)
    };

    fn tree<F>(lo: u64, hi: u64, leaf: &F) -> Result<Vec<f64>>
    where
        F: Fn(u64) -> Result<Vec<f64>> + Sync,
    {
        if hi - lo == 1 {
            return leaf(lo);
        }
        let mid = lo + (hi - lo) / 2;
        let (a, b) = rayon::join(|| tree(lo, mid, leaf), || tree(mid, hi, leaf));
        let mut a = a?;
        let b = b?;
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        Ok(a)
    }

    let sums = tree(0, n_blocks, &run_block)?;
    let inv = 1.0 / n_realizations as f64;
    Ok(sums.chunks(width).map(|row| row.iter().map(|s| s * inv).collect()).collect())
}
