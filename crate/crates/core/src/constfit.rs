//! Coefficient fitting: multi-start BFGS on the mean trajectory NMSE.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_compiled, TimeGrid, Trajectory, NMSE_SENTINEL};
use crate::error::{Error, Result};
use crate::symbolic::{CompiledSystem, OdeSystem, MAX_CONSTANTS};

/// One observed trajectory, restricted to an integration lattice, with its
/// truth variance precomputed.
#[derive(Debug, Clone)]
struct Target {
    x0: Vec<f64>,
    grid: TimeGrid,
    truth: Array2<f64>,
    variance: f64,
}

/// Trajectories a candidate is scored against, all on multiples of `dt`.
#[derive(Debug, Clone)]
pub struct EvalSet {
    targets: Vec<Target>,
    dt: f64,
}

impl EvalSet {
    /// Every usable trajectory of `data`, keeping only times on the `dt`
    /// lattice. Empty or non-finite trajectories are skipped.
    pub fn new(data: &[Trajectory], dt: f64) -> Result<Self> {
        let all: Vec<usize> = (0..data.len()).collect();
        EvalSet::from_indices(data, &all, dt, usize::MAX)
    }

    /// At most `max_trajectories` trajectories drawn without replacement
    /// (deterministic in `seed`) and at most `max_points` time points
    /// overall, thinned evenly within each trajectory.
    pub fn subsample(
        data: &[Trajectory],
        dt: f64,
        max_trajectories: usize,
        max_points: usize,
        seed: u64,
    ) -> Result<Self> {
        let usable: Vec<usize> =
            (0..data.len()).filter(|&i| data[i].finite && !data[i].is_empty()).collect();
        let chosen: Vec<usize> = if usable.len() <= max_trajectories {
            usable
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = index::sample(&mut rng, usable.len(), max_trajectories)
                .into_iter()
                .map(|k| usable[k])
                .collect();
            picked.sort_unstable();
            picked
        };
        EvalSet::from_indices(data, &chosen, dt, max_points)
    }

    fn from_indices(data: &[Trajectory], indices: &[usize], dt: f64, max_points: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::usage(format!("evaluation step must be positive, got {dt}")));
        }
        let mut lattices: Vec<(usize, Vec<usize>)> = indices
            .iter()
            .filter(|&&i| data[i].finite)
            .map(|&i| (i, data[i].grid.lattice_indices(dt)))
            .filter(|(_, rows)| !rows.is_empty())
            .collect();
        let total: usize = lattices.iter().map(|(_, r)| r.len()).sum();
        if total > max_points && !lattices.is_empty() {
            let per = (max_points / lattices.len()).max(1);
            for (_, rows) in &mut lattices {
                if rows.len() > per {
                    let stride = rows.len() as f64 / per as f64;
                    *rows = (0..per).map(|j| rows[((j as f64 + 1.0) * stride) as usize - 1]).collect();
                }
            }
        }
        let targets = lattices
            .into_iter()
            .map(|(i, rows)| {
                let sub = data[i].select(&rows);
                let variance = crate::dynamics::truth_variance(&sub.states);
                Target { x0: sub.initial, grid: sub.grid, truth: sub.states, variance }
            })
            .collect();
        Ok(EvalSet { targets, dt })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_points(&self) -> usize {
        self.targets.iter().map(|t| t.grid.len()).sum()
    }

    pub fn initial_conditions(&self) -> impl Iterator<Item = &[f64]> {
        self.targets.iter().map(|t| t.x0.as_slice())
    }

    fn target_nmse(&self, t: &Target, system: &CompiledSystem, coeffs: &[f64]) -> f64 {
        let pred = match integrate_compiled(system, coeffs, &t.x0, &t.grid, self.dt) {
            Ok(p) if p.finite => p,
            _ => return NMSE_SENTINEL,
        };
        let k = t.truth.nrows() as f64;
        let mse = t
            .truth
            .iter()
            .zip(pred.states.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / k;
        if !mse.is_finite() {
            NMSE_SENTINEL
        } else if t.variance > 0.0 {
            mse / t.variance
        } else {
            mse
        }
    }

    /// NMSE of each trajectory.
    pub fn per_trajectory(&self, system: &CompiledSystem, coeffs: &[f64]) -> Vec<f64> {
        self.targets.iter().map(|t| self.target_nmse(t, system, coeffs)).collect()
    }

    /// Mean NMSE over the set; stops at the first diverged trajectory.
    pub fn mean_nmse(&self, system: &CompiledSystem, coeffs: &[f64]) -> f64 {
        if self.targets.is_empty() {
            return NMSE_SENTINEL;
        }
        let mut total = 0.0;
        for t in &self.targets {
            let v = self.target_nmse(t, system, coeffs);
            if !v.is_finite() {
                return NMSE_SENTINEL;
            }
            total += v;
        }
        total / self.targets.len() as f64
    }

    /// Mean NMSE of a complete system with its coefficients set.
    pub fn evaluate(&self, system: &OdeSystem) -> Result<f64> {
        if !system.is_fitted() {
            return Err(Error::usage("system coefficients are not set"));
        }
        Ok(self.mean_nmse(&CompiledSystem::new(system)?, &system.coefficients))
    }
}

/// Fitting knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Random starts in addition to the all-ones start.
    pub restarts: usize,
    /// Objective evaluations per problem, shared by all starts.
    pub max_evals: usize,
    /// Integration step used while fitting and scoring candidates.
    pub eval_dt: f64,
    pub max_points: usize,
    pub max_trajectories: usize,
    /// Worker threads; 0 means the number of logical CPUs, capped at 20.
    pub parallelism: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 4,
            max_evals: 500,
            eval_dt: 0.01,
            max_points: 1024,
            max_trajectories: 8,
            parallelism: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals == 0 || self.max_points == 0 || self.max_trajectories == 0 {
            return Err(Error::config("fit budgets must be >= 1"));
        }
        if !(self.eval_dt > 0.0) {
            return Err(Error::config("eval_dt must be positive"));
        }
        Ok(())
    }

    pub fn threads(&self) -> usize {
        if self.parallelism > 0 {
            self.parallelism
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get()).min(20)
        }
    }
}

/// One skeleton to fit against an evaluation set.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    pub skeleton: OdeSystem,
    pub data: &'a EvalSet,
    pub restarts: usize,
    pub max_evals: usize,
    pub seed: u64,
    /// Tried before the default starts.
    pub warm_start: Option<Vec<f64>>,
}

impl<'a> FitProblem<'a> {
    pub fn new(skeleton: OdeSystem, data: &'a EvalSet, cfg: &FitConfig, seed: u64) -> Self {
        FitProblem {
            skeleton,
            data,
            restarts: cfg.restarts,
            max_evals: cfg.max_evals,
            seed,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub nmse: f64,
    pub evals: usize,
    pub error: Option<String>,
}

impl FitResult {
    fn failed(error: String) -> Self {
        FitResult { coefficients: Vec::new(), nmse: NMSE_SENTINEL, evals: 0, error: Some(error) }
    }

    pub fn is_finite(&self) -> bool {
        self.nmse.is_finite()
    }
}

/// Objective value at which a start stops early.
const GOOD_ENOUGH: f64 = 1e-14;
const FD_STEP: f64 = 1e-6;
const COEFF_BOX: f64 = 5.0;

/// Fits the skeleton's constants. Returns the sentinel NMSE if every start
/// diverges.
pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    let skel = &problem.skeleton;
    if !skel.is_complete() {
        return Err(Error::usage("cannot fit an incomplete skeleton"));
    }
    let k = skel.n_constants;
    if k > MAX_CONSTANTS {
        return Err(Error::usage(format!("{k} constants exceed the limit of {MAX_CONSTANTS}")));
    }
    if problem.data.is_empty() {
        return Err(Error::usage("no data to fit against"));
    }
    let compiled = CompiledSystem::new(skel)?;
    let mut budget = Budget { left: problem.max_evals.max(1), used: 0 };
    let mut objective = |c: &[f64], b: &mut Budget| {
        b.left = b.left.saturating_sub(1);
        b.used += 1;
        problem.data.mean_nmse(&compiled, c)
    };
    if k == 0 {
        let v = objective(&[], &mut budget);
        return Ok(FitResult { coefficients: Vec::new(), nmse: v, evals: budget.used, error: None });
    }

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(problem.restarts + 2);
    if let Some(w) = &problem.warm_start {
        if w.len() == k && w.iter().all(|v| v.is_finite()) {
            starts.push(w.clone());
        }
    }
    starts.push(vec![1.0; k]);
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    for _ in 0..problem.restarts {
        starts.push((0..k).map(|_| rng.random_range(-COEFF_BOX..COEFF_BOX)).collect());
    }

    let mut best = (vec![1.0; k], NMSE_SENTINEL);
    for start in starts {
        if budget.left == 0 {
            break;
        }
        let (c, v) = bfgs(&mut objective, start, &mut budget);
        if v < best.1 || (!best.1.is_finite() && best.1.is_nan()) {
            best = (c, v);
        }
        if best.1 <= GOOD_ENOUGH {
            break;
        }
    }
    Ok(FitResult { coefficients: best.0, nmse: best.1, evals: budget.used, error: None })
}

struct Budget {
    left: usize,
    used: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences; one-sided where the other side is non-finite.
fn gradient<F>(f: &mut F, x: &[f64], fx: f64, b: &mut Budget) -> Option<Vec<f64>>
where
    F: FnMut(&[f64], &mut Budget) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = FD_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe, b);
        probe[i] = x[i] - h;
        let down = f(&probe, b);
        probe[i] = x[i];
        g[i] = match (up.is_finite(), down.is_finite()) {
            (true, true) => (up - down) / (2.0 * h),
            (true, false) => (up - fx) / h,
            (false, true) => (fx - down) / h,
            (false, false) => return None,
        };
    }
    Some(g)
}

/// BFGS on the inverse Hessian with Armijo backtracking. Returns the best
/// point visited.
fn bfgs<F>(f: &mut F, x0: Vec<f64>, b: &mut Budget) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64], &mut Budget) -> f64,
{
    let k = x0.len();
    let mut x = x0;
    let mut fx = f(&x, b);
    if !fx.is_finite() {
        return (x, NMSE_SENTINEL);
    }
    let identity = |scale: f64| {
        let mut h = vec![0.0; k * k];
        (0..k).for_each(|i| h[i * k + i] = scale);
        h
    };
    let mut hinv = identity(1.0);
    let mut fresh = true;
    let Some(mut g) = gradient(f, &x, fx, b) else { return (x, fx) };

    while b.left > 2 * k && fx > GOOD_ENOUGH {
        let mut p: Vec<f64> = (0..k).map(|i| -dot(&hinv[i * k..(i + 1) * k], &g)).collect();
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            hinv = identity(1.0);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            if !(slope < 0.0) {
                break;
            }
        }
        // Unit-norm first step while no curvature is known.
        let pnorm = dot(&p, &p).sqrt();
        let mut alpha = if fresh && pnorm > 1.0 { 1.0 / pnorm } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            if b.left == 0 {
                break;
            }
            let trial: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
            let ft = f(&trial, b);
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if fresh {
                break;
            }
            hinv = identity(1.0);
            fresh = true;
            continue;
        };
        let Some(g_new) = gradient(f, &x_new, f_new, b) else {
            return (x_new, f_new);
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, c)| a - c).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, c)| a - c).collect();
        let sy = dot(&s, &y);
        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                // Rescale the initial inverse Hessian to the observed curvature.
                hinv = identity(sy / dot(&y, &y));
            }
            fresh = false;
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..k).map(|i| dot(&hinv[i * k..(i + 1) * k], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..k {
                for j in 0..k {
                    hinv[i * k + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < 1e-12 || improvement <= 1e-15 * fx.abs().max(1e-300) {
            break;
        }
    }
    (x, fx)
}

/// Results of a batch of fits, in input order.
#[derive(Debug, Clone)]
pub struct FitBatch {
    pub results: Vec<FitResult>,
    pub elapsed: Duration,
}

/// Runs independent fits on up to `parallelism` threads. Failures become
/// sentinel results carrying the error message.
pub fn fit_batch(problems: &[FitProblem], parallelism: usize) -> FitBatch {
    let start = Instant::now();
    let run = |p: &FitProblem| fit(p).unwrap_or_else(|e| FitResult::failed(e.to_string()));
    let results = if parallelism <= 1 {
        problems.iter().map(run).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
            Ok(pool) => pool.install(|| problems.par_iter().map(run).collect()),
            Err(e) => {
                log::warn!("event=thread_pool_failed error={e}");
                problems.iter().map(run).collect()
            }
        }
    };
    FitBatch { results, elapsed: start.elapsed() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(c: &[f64], b: &mut Budget) -> f64 {
        b.left = b.left.saturating_sub(1);
        b.used += 1;
        (c[0] - 3.0).powi(2) + 10.0 * (c[1] + 1.0).powi(2) + (c[0] - 3.0) * (c[1] + 1.0)
    }

    #[test]
    fn bfgs_finds_quadratic_minimum() {
        let mut b = Budget { left: 500, used: 0 };
        let (x, fx) = bfgs(&mut quadratic, vec![0.0, 0.0], &mut b);
        assert!(fx < 1e-12, "{fx}");
        assert!((x[0] - 3.0).abs() < 1e-5 && (x[1] + 1.0).abs() < 1e-5, "{x:?}");
        assert!(b.used < 100);
    }

    #[test]
    fn bfgs_rosenbrock() {
        let mut f = |c: &[f64], b: &mut Budget| {
            b.left -= 1;
            b.used += 1;
            (1.0 - c[0]).powi(2) + 100.0 * (c[1] - c[0] * c[0]).powi(2)
        };
        let mut b = Budget { left: 5000, used: 0 };
        let (x, _) = bfgs(&mut f, vec![-1.2, 1.0], &mut b);
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4, "{x:?}");
    }

    #[test]
    fn non_finite_start_returns_sentinel() {
        let mut f = |_: &[f64], b: &mut Budget| {
            b.used += 1;
            f64::INFINITY
        };
        let mut b = Budget { left: 10, used: 0 };
        assert_eq!(bfgs(&mut f, vec![0.0], &mut b).1, NMSE_SENTINEL);
        assert_eq!(b.used, 1);
    }
}
