//! Fixed-step RK4 integration and trajectory metrics.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbolic::{CompiledSystem, OdeSystem};

/// States with magnitude above this are treated as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e10;

/// Relative tolerance for "grid time is a multiple of dt".
const STEP_TOLERANCE: f64 = 1e-9;

/// Observation times `t_1 < ... < t_k`, all strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    step_hint: f64,
}

impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.times == other.times
    }
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, step_hint: f64) -> Result<Self> {
        if times.first().is_some_and(|&t| t <= 0.0 || !t.is_finite()) {
            return Err(Error::usage("grid times must be positive"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::usage("grid times must be strictly increasing"));
        }
        Ok(TimeGrid { times, step_hint })
    }

    /// `[dt, 2 dt, ..., horizon]`.
    pub fn uniform(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon >= dt) {
            return Err(Error::usage(format!("invalid uniform grid dt={dt} horizon={horizon}")));
        }
        let n = (horizon / dt).round() as usize;
        TimeGrid::new((1..=n).map(|i| i as f64 * dt).collect(), dt)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn step_hint(&self) -> f64 {
        self.step_hint
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// Number of `dt` steps needed to reach each grid time.
    pub fn step_counts(&self, dt: f64) -> Result<Vec<usize>> {
        if !(dt > 0.0) {
            return Err(Error::usage("integration step must be positive"));
        }
        let mut out = Vec::with_capacity(self.times.len());
        let mut prev = 0usize;
        for &t in &self.times {
            let exact = t / dt;
            let steps = exact.round();
            if (exact - steps).abs() > STEP_TOLERANCE * exact.max(1.0) {
                return Err(Error::usage(format!("grid time {t} is not a multiple of dt={dt}")));
            }
            let steps = steps as usize;
            if steps <= prev {
                return Err(Error::usage(format!("dt={dt} exceeds the grid spacing near t={t}")));
            }
            out.push(steps);
            prev = steps;
        }
        Ok(out)
    }

    /// Indices of grid times that are (within tolerance) multiples of `dt`.
    pub fn lattice_indices(&self, dt: f64) -> Vec<usize> {
        self.times
            .iter()
            .enumerate()
            .filter(|(_, &t)| {
                let exact = t / dt;
                (exact - exact.round()).abs() <= STEP_TOLERANCE * exact.max(1.0)
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> TimeGrid {
        TimeGrid { times: indices.iter().map(|&i| self.times[i]).collect(), step_hint: self.step_hint }
    }
}

/// `τ = (x_0, x(t_1), ..., x(t_k))`. `states` has one row per grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: Vec<f64>,
    pub grid: TimeGrid,
    pub states: Array2<f64>,
    pub finite: bool,
}

impl Trajectory {
    pub fn new(initial: Vec<f64>, grid: TimeGrid, states: Array2<f64>) -> Result<Self> {
        if states.nrows() != grid.len() || states.ncols() != initial.len() {
            return Err(Error::usage(format!(
                "states are {}x{}, expected {}x{}",
                states.nrows(),
                states.ncols(),
                grid.len(),
                initial.len()
            )));
        }
        let finite = states.iter().all(|v| v.is_finite());
        Ok(Trajectory { initial, grid, states, finite })
    }

    pub fn n_vars(&self) -> usize {
        self.initial.len()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Keeps the rows at `indices` (which must be increasing).
    pub fn select(&self, indices: &[usize]) -> Trajectory {
        let states = self.states.select(Axis(0), indices);
        let finite = states.iter().all(|v| v.is_finite());
        Trajectory { initial: self.initial.clone(), grid: self.grid.select(indices), states, finite }
    }

    pub fn scaled(&self, gamma: f64) -> Trajectory {
        let states = &self.states * gamma;
        let finite = states.iter().all(|v| v.is_finite());
        Trajectory {
            initial: self.initial.iter().map(|v| v * gamma).collect(),
            grid: self.grid.clone(),
            states,
            finite,
        }
    }

    /// Writes `t,x0,...` with the initial condition as the `t=0` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> =
            std::iter::once("t".to_string()).chain((0..self.n_vars()).map(|j| format!("x{j}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        write_row(&mut w, 0.0, self.initial.iter().copied())?;
        for (t, row) in self.grid.times().iter().zip(self.states.rows()) {
            write_row(&mut w, *t, row.iter().copied())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Trajectory> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::usage("empty trajectory file"))??;
        let n = header.split(',').count().saturating_sub(1);
        if n == 0 || !header.starts_with("t,") {
            return Err(Error::usage(format!("bad trajectory header `{header}`")));
        }
        let mut initial = None;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::usage(format!("line {}: {e}", lineno + 2)))?;
            if fields.len() != n + 1 {
                return Err(Error::usage(format!("line {}: expected {} fields", lineno + 2, n + 1)));
            }
            if initial.is_none() {
                initial = Some(fields[1..].to_vec());
            } else {
                times.push(fields[0]);
                values.extend_from_slice(&fields[1..]);
            }
        }
        let initial = initial.ok_or_else(|| Error::usage("trajectory file has no rows"))?;
        let hint = times.first().copied().unwrap_or(0.0);
        let grid = TimeGrid::new(times, hint)?;
        let states = Array2::from_shape_vec((grid.len(), n), values)
            .map_err(|e| Error::usage(e.to_string()))?;
        Trajectory::new(initial, grid, states)
    }
}

fn write_row<W: Write>(w: &mut W, t: f64, values: impl Iterator<Item = f64>) -> Result<()> {
    write!(w, "{t}")?;
    for v in values {
        write!(w, ",{v}")?;
    }
    writeln!(w)?;
    Ok(())
}

/// Integrates a compiled system; see [`integrate`].
pub fn integrate_compiled(
    system: &CompiledSystem,
    coeffs: &[f64],
    x0: &[f64],
    grid: &TimeGrid,
    dt: f64,
) -> Result<Trajectory> {
    let steps = grid.step_counts(dt)?;
    let n = x0.len();
    if n != system.n_vars() {
        return Err(Error::usage(format!("x0 has {} entries, system has {}", n, system.n_vars())));
    }
    let mut states = Array2::from_elem((grid.len(), n), f64::NAN);
    let mut stepper = Rk4::new(n);
    let mut x = x0.to_vec();
    let mut done = 0usize;
    let mut finite = x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND);
    if finite {
        for (row, &target) in steps.iter().enumerate() {
            while done < target {
                stepper.step(system, coeffs, &mut x, dt);
                done += 1;
                if !x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND) {
                    finite = false;
                    break;
                }
            }
            if !finite {
                break;
            }
            states.row_mut(row).iter_mut().zip(&x).for_each(|(s, v)| *s = *v);
        }
    }
    Ok(Trajectory { initial: x0.to_vec(), grid: grid.clone(), states, finite })
}

/// Classical fixed-step RK4 from `t = 0`, recording the state at each grid
/// time. Grid times must be integer multiples of `dt`. Once a state leaves
/// the finite range or exceeds [`DIVERGENCE_BOUND`] in magnitude, the
/// remaining rows are NaN and `finite` is false.
pub fn integrate(system: &OdeSystem, x0: &[f64], grid: &TimeGrid, dt: f64) -> Result<Trajectory> {
    let compiled = CompiledSystem::new(system)?;
    if system.coefficients.len() != system.n_constants {
        return Err(Error::usage("system coefficients are not set"));
    }
    integrate_compiled(&compiled, &system.coefficients, x0, grid, dt)
}

/// Scratch buffers for RK4 stages.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    #[inline]
    pub(crate) fn step(&mut self, f: &CompiledSystem, c: &[f64], x: &mut [f64], h: f64) {
        let n = x.len();
        f.eval_into(x, c, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f.eval_into(&self.tmp, c, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f.eval_into(&self.tmp, c, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f.eval_into(&self.tmp, c, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Sentinel used for "prediction diverged".
pub const NMSE_SENTINEL: f64 = f64::INFINITY;

/// Normalized mean squared error between a truth and a predicted trajectory.
///
/// `σ²` is the empirical variance of the truth rows, `(1/k) Σ ‖x_i − x̄‖²`,
/// with `x̄` the per-dimension mean. A constant truth (`σ² = 0`) yields the
/// plain MSE; a non-finite prediction yields [`NMSE_SENTINEL`].
pub fn nmse(truth: &Trajectory, pred: &Trajectory) -> Result<f64> {
    if truth.grid != pred.grid || truth.n_vars() != pred.n_vars() {
        return Err(Error::usage("nmse needs trajectories on identical grids"));
    }
    if !truth.finite {
        return Err(Error::usage("truth trajectory is not finite"));
    }
    if !pred.finite {
        return Ok(NMSE_SENTINEL);
    }
    Ok(nmse_rows(&truth.states, &pred.states))
}

pub(crate) fn nmse_rows(truth: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let k = truth.nrows();
    if k == 0 {
        return 0.0;
    }
    let variance = truth_variance(truth);
    let mse = truth
        .iter()
        .zip(pred.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / k as f64;
    if !mse.is_finite() {
        return NMSE_SENTINEL;
    }
    if variance > 0.0 {
        mse / variance
    } else {
        mse
    }
}

pub(crate) fn truth_variance(truth: &Array2<f64>) -> f64 {
    let k = truth.nrows() as f64;
    let mean = truth.mean_axis(Axis(0)).expect("non-empty");
    truth
        .rows()
        .into_iter()
        .map(|row: ArrayView1<f64>| row.iter().zip(mean.iter()).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / k
}

/// Dataset-level NMSE: the mean of per-trajectory values.
pub fn mean_nmse(values: &[f64]) -> f64 {
    if values.is_empty() {
        return NMSE_SENTINEL;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median that treats the sentinel as the largest value.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else if v[m - 1].is_infinite() || v[m].is_infinite() {
        v[m].max(v[m - 1])
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn r2(nmse_value: f64) -> f64 {
    1.0 - nmse_value
}

/// `1 / (1 + NMSE)`; the sentinel (and NaN) map to 0.
pub fn reward(nmse_value: f64) -> f64 {
    if nmse_value.is_finite() && nmse_value >= 0.0 {
        1.0 / (1.0 + nmse_value)
    } else {
        0.0
    }
}

/// Normalized Kendall tau distance between two orderings of the same items.
pub fn kendall_distance(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    let m = rank_a.len();
    if m != rank_b.len() {
        return Err(Error::usage(format!("ranking sizes differ: {} vs {}", m, rank_b.len())));
    }
    if m < 2 {
        return Err(Error::usage("kendall distance needs at least two items"));
    }
    let max_item = rank_a.iter().chain(rank_b).copied().max().unwrap_or(0);
    let mut pos_b = vec![usize::MAX; max_item + 1];
    for (i, &item) in rank_b.iter().enumerate() {
        if pos_b[item] != usize::MAX {
            return Err(Error::usage(format!("item {item} repeated in ranking")));
        }
        pos_b[item] = i;
    }
    let mut seen = vec![false; max_item + 1];
    for &item in rank_a {
        if pos_b[item] == usize::MAX || seen[item] {
            return Err(Error::usage("rankings are not permutations of the same items"));
        }
        seen[item] = true;
    }
    let mut discordant = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            if pos_b[rank_a[i]] > pos_b[rank_a[j]] {
                discordant += 1;
            }
        }
    }
    Ok(discordant as f64 / (m * (m - 1) / 2) as f64)
}

/// Indices of `scores` sorted ascending (stable, sentinel last).
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}
