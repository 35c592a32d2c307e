//! Phase-portrait sketching and the query strategies built on it.
//!
//! A sketch is a bundle of short trajectories of one candidate, all started
//! from the same random initial conditions inside a region. Regions where
//! the candidates' sketches disagree most are the ones worth querying.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_compiled, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::oracle::{Domain, Oracle};
use crate::symbolic::{CompiledSystem, OdeSystem};

/// Score contributed by a trajectory pair in which either side diverged.
pub const DIVERGENCE_PENALTY: f64 = 1e6;

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// Axis-aligned box `[lower_j, lower_j + width_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Vec<f64>,
    pub width: Vec<f64>,
}

impl Region {
    pub fn new(lower: Vec<f64>, width: Vec<f64>) -> Result<Self> {
        if lower.len() != width.len() || lower.is_empty() {
            return Err(Error::usage("region needs matching, nonempty lower and width vectors"));
        }
        if width.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::usage("region widths must be positive"));
        }
        Ok(Region { lower, width })
    }

    /// The whole domain as one region.
    pub fn from_domain(domain: &Domain) -> Self {
        Region {
            lower: domain.bounds().iter().map(|b| b.0).collect(),
            width: domain.bounds().iter().map(|b| b.1 - b.0).collect(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn upper(&self, j: usize) -> f64 {
        self.lower[j] + self.width[j]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.n_vars()
            && x.iter().enumerate().all(|(j, &v)| v >= self.lower[j] && v <= self.upper(j))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.width)
            .map(|(&a, &w)| a + w * rng.random::<f64>())
            .collect()
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.n_vars() {
            if j > 0 {
                f.write_str("x")?;
            }
            write!(f, "[{},{}]", self.lower[j], self.upper(j))?;
        }
        Ok(())
    }
}

/// Draws `count` boxes whose edges are `relative_width` of the domain's and
/// whose lower corners are uniform over the positions that keep them inside.
pub fn sample_regions<R: Rng + ?Sized>(
    domain: &Domain,
    count: usize,
    relative_width: f64,
    rng: &mut R,
) -> Result<Vec<Region>> {
    if count == 0 {
        return Err(Error::usage("need at least one region"));
    }
    if !(relative_width > 0.0 && relative_width <= 1.0) {
        return Err(Error::usage(format!("relative width {relative_width} not in (0, 1]")));
    }
    let regions = (0..count)
        .map(|_| {
            let mut lower = Vec::with_capacity(domain.n_vars());
            let mut width = Vec::with_capacity(domain.n_vars());
            for &(a, b) in domain.bounds() {
                let w = relative_width * (b - a);
                let slack = (b - a) - w;
                lower.push(if slack > 0.0 { a + slack * rng.random::<f64>() } else { a });
                width.push(w);
            }
            Region { lower, width }
        })
        .collect();
    Ok(regions)
}

/// Short trajectories of one candidate inside one region.
#[derive(Debug, Clone)]
pub struct Sketch {
    pub candidate: usize,
    pub region: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Sketch {
    pub fn initial_conditions(&self) -> impl Iterator<Item = &[f64]> {
        self.trajectories.iter().map(|t| t.initial.as_slice())
    }
}

/// Sketch geometry and strategy knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchConfig {
    pub regions: usize,
    pub relative_width: f64,
    pub points: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Pool size of the query-by-committee and core-set searches.
    pub pool_size: usize,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig {
            regions: 10,
            relative_width: 0.25,
            points: 16,
            horizon: 0.2,
            dt: 0.01,
            pool_size: 4096,
        }
    }
}

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.points == 0 || self.pool_size == 0 {
            return Err(Error::config("regions, sketch points and pool size must be >= 1"));
        }
        if !(self.relative_width > 0.0 && self.relative_width <= 1.0) {
            return Err(Error::config(format!(
                "region width {} not in (0, 1]",
                self.relative_width
            )));
        }
        self.grid().map(|_| ()).map_err(|e| Error::config(e.to_string()))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.dt, self.horizon)
    }
}

struct Compiled {
    program: CompiledSystem,
    coeffs: Vec<f64>,
}

fn compile_all(candidates: &[OdeSystem]) -> Result<Vec<Compiled>> {
    candidates
        .iter()
        .map(|c| {
            if !c.is_fitted() {
                return Err(Error::usage("sketched candidates need fitted coefficients"));
            }
            Ok(Compiled { program: CompiledSystem::new(c)?, coeffs: c.coefficients.clone() })
        })
        .collect()
}

fn sketch_compiled(
    compiled: &[Compiled],
    initials: &[Vec<f64>],
    region_index: usize,
    grid: &TimeGrid,
    dt: f64,
) -> Result<Vec<Sketch>> {
    compiled
        .par_iter()
        .enumerate()
        .map(|(m, c)| {
            let trajectories = initials
                .iter()
                .map(|x0| integrate_compiled(&c.program, &c.coeffs, x0, grid, dt))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sketch { candidate: m, region: region_index, trajectories })
        })
        .collect()
}

/// Sketches every candidate from one shared draw of `points` initial
/// conditions inside `region`.
pub fn sketch_candidates<R: Rng + ?Sized>(
    candidates: &[OdeSystem],
    region: &Region,
    points: usize,
    grid: &TimeGrid,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<Sketch>> {
    if points == 0 {
        return Err(Error::usage("a sketch needs at least one point"));
    }
    let compiled = compile_all(candidates)?;
    let initials: Vec<Vec<f64>> = (0..points).map(|_| region.sample(rng)).collect();
    sketch_compiled(&compiled, &initials, 0, grid, dt)
}

/// Mean over shared starts of the squared distance between the two
/// candidates' trajectories, summed over time points and dimensions.
pub fn pairwise_if(a: &Sketch, b: &Sketch) -> Result<f64> {
    if a.trajectories.len() != b.trajectories.len() || a.trajectories.is_empty() {
        return Err(Error::usage("sketches have different or zero point counts"));
    }
    let mut total = 0.0;
    for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
        if ta.grid != tb.grid || ta.initial != tb.initial {
            return Err(Error::usage("sketches do not share initial conditions and grid"));
        }
        if !(ta.finite && tb.finite) {
            total += DIVERGENCE_PENALTY;
            continue;
        }
        total += ta
            .states
            .iter()
            .zip(tb.states.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(total / a.trajectories.len() as f64)
}

/// `(1/M) Σ_{m<m'} pairwise_if(m, m')`.
pub fn region_score(sketches: &[Sketch]) -> Result<f64> {
    let m = sketches.len();
    if m < 2 {
        return Err(Error::usage("a region score needs at least two candidates"));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += pairwise_if(&sketches[i], &sketches[j])?;
        }
    }
    Ok(total / m as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if !(s > scores[b]) => {}
            _ if s.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Outcome of scoring a set of regions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionChoice {
    pub index: usize,
    pub region: Region,
    pub scores: Vec<f64>,
}

/// Scores every region and returns the most informative one.
pub fn select_region<R: Rng + ?Sized>(
    candidates: &[OdeSystem],
    regions: &[Region],
    points: usize,
    grid: &TimeGrid,
    dt: f64,
    rng: &mut R,
) -> Result<RegionChoice> {
    if regions.is_empty() {
        return Err(Error::usage("no regions to select from"));
    }
    if points == 0 {
        return Err(Error::usage("a sketch needs at least one point"));
    }
    let compiled = compile_all(candidates)?;
    let mut scores = Vec::with_capacity(regions.len());
    for (k, region) in regions.iter().enumerate() {
        let initials: Vec<Vec<f64>> = (0..points).map(|_| region.sample(rng)).collect();
        let sketches = sketch_compiled(&compiled, &initials, k, grid, dt)?;
        scores.push(region_score(&sketches)?);
    }
    let index = argmax(&scores).unwrap_or(0);
    Ok(RegionChoice { index, region: regions[index].clone(), scores })
}

/// Top-`m` pool points by the committee's endpoint variance.
pub fn qbc_select<R: Rng + ?Sized>(
    candidates: &[OdeSystem],
    domain: &Domain,
    m: usize,
    pool_size: usize,
    grid: &TimeGrid,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if candidates.len() < 2 {
        return Err(Error::usage("query-by-committee needs at least two candidates"));
    }
    let compiled = compile_all(candidates)?;
    let pool: Vec<Vec<f64>> = (0..pool_size.max(m)).map(|_| domain.sample(rng)).collect();
    let variances: Vec<f64> = pool
        .par_iter()
        .map(|x0| endpoint_variance(&compiled, x0, grid, dt))
        .collect::<Result<_>>()?;
    Ok(top_by_score(&variances, m).into_iter().map(|i| pool[i].clone()).collect())
}

fn endpoint_variance(compiled: &[Compiled], x0: &[f64], grid: &TimeGrid, dt: f64) -> Result<f64> {
    let n = x0.len();
    let mut ends = Vec::with_capacity(compiled.len());
    for c in compiled {
        let t = integrate_compiled(&c.program, &c.coeffs, x0, grid, dt)?;
        if !t.finite {
            return Ok(DIVERGENCE_PENALTY);
        }
        ends.push(t.states.row(t.len() - 1).to_vec());
    }
    let k = ends.len() as f64;
    let mut var = 0.0;
    for j in 0..n {
        let mean = ends.iter().map(|e| e[j]).sum::<f64>() / k;
        var += ends.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / k;
    }
    Ok(var)
}

/// Indices of the `m` highest scores. Scores equal at single precision
/// count as ties and keep pool order.
fn top_by_score(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| {
        let s = scores[i] as f32;
        if s.is_nan() { f32::NEG_INFINITY } else { s }
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    order.truncate(m);
    order
}

/// Greedy k-center selection from a uniform pool, seeded with the starts
/// already in the data set.
pub fn coreset_select<R: Rng + ?Sized>(
    existing: &[Vec<f64>],
    domain: &Domain,
    m: usize,
    pool_size: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let pool: Vec<Vec<f64>> = (0..pool_size.max(m)).map(|_| domain.sample(rng)).collect();
    let mut min_dist: Vec<f64> = pool
        .iter()
        .map(|p| existing.iter().map(|e| sq_dist(p, e)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let Some(i) = argmax(&min_dist) else { break };
        chosen.push(pool[i].clone());
        min_dist[i] = f64::NEG_INFINITY;
        for (d, p) in min_dist.iter_mut().zip(&pool) {
            if *d > f64::NEG_INFINITY {
                *d = d.min(sq_dist(p, &pool[i]));
            }
        }
    }
    chosen
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// How the next batch of initial conditions is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStrategy {
    Apps,
    Qbc,
    Coreset,
    Random,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 4] =
        [QueryStrategy::Apps, QueryStrategy::Qbc, QueryStrategy::Coreset, QueryStrategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            QueryStrategy::Apps => "apps",
            QueryStrategy::Qbc => "qbc",
            QueryStrategy::Coreset => "coreset",
            QueryStrategy::Random => "random",
        }
    }

    /// Whether the strategy needs a committee of at least two candidates.
    pub fn needs_candidates(self) -> bool {
        matches!(self, QueryStrategy::Apps | QueryStrategy::Qbc)
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "apps" | "apps-sketch" => Ok(QueryStrategy::Apps),
            "qbc" => Ok(QueryStrategy::Qbc),
            "coreset" | "core-set" => Ok(QueryStrategy::Coreset),
            "random" | "uniform-random" => Ok(QueryStrategy::Random),
            other => Err(Error::config(format!(
                "unknown strategy `{other}`; expected apps, qbc, coreset or random"
            ))),
        }
    }
}

/// Initial conditions picked by a strategy, before the oracle is called.
#[derive(Debug, Clone)]
pub struct QueryPlan {
    pub initials: Vec<Vec<f64>>,
    pub region: Option<RegionChoice>,
    /// Bytes of strategy-owned scratch structures at their peak.
    pub aux_bytes: usize,
}

/// Chooses `m` initial conditions with `strategy`.
pub fn plan_queries<R: Rng + ?Sized>(
    strategy: QueryStrategy,
    candidates: &[OdeSystem],
    domain: &Domain,
    existing: &[Vec<f64>],
    m: usize,
    cfg: &SketchConfig,
    rng: &mut R,
) -> Result<QueryPlan> {
    if m == 0 {
        return Err(Error::usage("query batch size must be >= 1"));
    }
    let n = domain.n_vars();
    let grid = cfg.grid()?;
    let plan = match strategy {
        QueryStrategy::Apps => {
            let regions = sample_regions(domain, cfg.regions, cfg.relative_width, rng)?;
            let choice = select_region(candidates, &regions, cfg.points, &grid, cfg.dt, rng)?;
            let initials = (0..m).map(|_| choice.region.sample(rng)).collect();
            // Regions and scores, plus one region's sketches at a time.
            let sketch = candidates.len() * cfg.points * (n + (grid.len() + 1) * n);
            let aux_bytes = F64_BYTES * (regions.len() * (2 * n + 1) + sketch);
            QueryPlan { initials, region: Some(choice), aux_bytes }
        }
        QueryStrategy::Qbc => {
            let initials =
                qbc_select(candidates, domain, m, cfg.pool_size, &grid, cfg.dt, rng)?;
            let pool = cfg.pool_size.max(m);
            let aux_bytes = F64_BYTES * pool * (n + candidates.len() * n + 1);
            QueryPlan { initials, region: None, aux_bytes }
        }
        QueryStrategy::Coreset => {
            let initials = coreset_select(existing, domain, m, cfg.pool_size, rng);
            let pool = cfg.pool_size.max(m);
            QueryPlan { initials, region: None, aux_bytes: F64_BYTES * pool * (n + 1) }
        }
        QueryStrategy::Random => {
            let initials = (0..m).map(|_| domain.sample(rng)).collect();
            QueryPlan { initials, region: None, aux_bytes: F64_BYTES * m * n }
        }
    };
    Ok(plan)
}

/// Result of one query round.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub trajectories: Vec<Trajectory>,
    pub region: Option<RegionChoice>,
    pub aux_bytes: usize,
}

/// Plans a batch with `strategy` and sends every start to the oracle on
/// `query_grid`.
#[allow(clippy::too_many_arguments)]
pub fn query_batch<R: Rng + ?Sized>(
    strategy: QueryStrategy,
    candidates: &[OdeSystem],
    oracle: &mut Oracle,
    existing: &[Vec<f64>],
    m: usize,
    query_grid: &TimeGrid,
    cfg: &SketchConfig,
    rng: &mut R,
) -> Result<QueryOutcome> {
    let domain = oracle.domain().clone();
    let plan = plan_queries(strategy, candidates, &domain, existing, m, cfg, rng)?;
    let trajectories = plan
        .initials
        .iter()
        .map(|x0| oracle.query(x0, query_grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryOutcome { trajectories, region: plan.region, aux_bytes: plan.aux_bytes })
}
