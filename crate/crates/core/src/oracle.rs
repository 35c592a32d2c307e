//! Simulated ground-truth oracle and the benchmark registry.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_compiled, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::symbolic::{parse_expression, CompiledSystem, OdeSystem};

/// Axis-aligned box of initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    bounds: Vec<(f64, f64)>,
}

impl Domain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::config("domain needs at least one interval"));
        }
        for (j, &(a, b)) in bounds.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::config(format!("domain interval {j} is [{a}, {b}]")));
            }
        }
        Ok(Domain { bounds })
    }

    /// `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Domain::new(vec![(lo, hi); n])
    }

    pub fn n_vars(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn lower(&self, j: usize) -> f64 {
        self.bounds[j].0
    }

    pub fn upper(&self, j: usize) -> f64 {
        self.bounds[j].1
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len()
            && x.iter().zip(&self.bounds).all(|(&v, &(a, b))| v >= a && v <= b)
    }

    /// Draws one point uniformly from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds.iter().map(|&(a, b)| rng.random_range(a..b)).collect()
    }
}

/// Settings of one oracle instance.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub system: OdeSystem,
    pub domain: Domain,
    /// Variance of the multiplicative noise.
    pub sigma2: f64,
    /// Probability of dropping each time point.
    pub alpha: f64,
    /// Integration step.
    pub dt: f64,
    pub seed: u64,
}

impl OracleConfig {
    /// Noiseless oracle on `[-5, 5]^n` with the 1 ms training step.
    pub fn new(system: OdeSystem, seed: u64) -> Result<Self> {
        let domain = Domain::cube(system.n_vars(), -5.0, 5.0)?;
        Ok(OracleConfig { system, domain, sigma2: 0.0, alpha: 0.0, dt: 1e-3, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::config(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.domain.n_vars() != self.system.n_vars() {
            return Err(Error::config(format!(
                "domain has {} intervals, system has {} variables",
                self.domain.n_vars(),
                self.system.n_vars()
            )));
        }
        if !self.system.is_fitted() {
            return Err(Error::config("ground-truth system has unset constants"));
        }
        Ok(())
    }
}

/// Stateful oracle. Every query uses a noise stream keyed by the seed and the
/// number of queries served so far, so identical call sequences reproduce
/// identical data.
#[derive(Debug, Clone)]
pub struct Oracle {
    config: OracleConfig,
    compiled: CompiledSystem,
    query_count: u64,
    initial_rng: ChaCha8Rng,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        let compiled = CompiledSystem::new(&config.system)?;
        let initial_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1c0d_u64);
        Ok(Oracle { config, compiled, query_count: 0, initial_rng })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn domain(&self) -> &Domain {
        &self.config.domain
    }

    pub fn n_vars(&self) -> usize {
        self.config.system.n_vars()
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    /// Integrates the ground truth from `x0`, then corrupts and thins the
    /// result.
    pub fn query(&mut self, x0: &[f64], grid: &TimeGrid) -> Result<Trajectory> {
        if x0.len() != self.n_vars() {
            return Err(Error::usage(format!(
                "initial condition has {} entries, system has {} variables",
                x0.len(),
                self.n_vars()
            )));
        }
        if !self.config.domain.contains(x0) {
            log::warn!("event=oracle_outside_domain x0={x0:?}");
        }
        let coeffs = self.config.system.coefficients.clone();
        let exact = integrate_compiled(&self.compiled, &coeffs, x0, grid, self.config.dt)?;
        if !exact.finite {
            return Err(Error::Oracle(format!(
                "ground truth diverged from x0={x0:?}; narrow the domain"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.query_count + 1);
        self.query_count += 1;

        let mut states = exact.states;
        if self.config.sigma2 > 0.0 {
            let normal = Normal::new(0.0, self.config.sigma2.sqrt())
                .map_err(|e| Error::config(e.to_string()))?;
            states.mapv_inplace(|v| v * (1.0 + normal.sample(&mut rng)));
        }
        // Noise is drawn before the drop mask so thinning never changes the
        // surviving values.
        let keep: Vec<usize> = (0..grid.len())
            .filter(|_| rng.random::<f64>() >= self.config.alpha)
            .collect();
        if keep.len() == grid.len() {
            return Trajectory::new(x0.to_vec(), grid.clone(), states);
        }
        let n = self.n_vars();
        let mut kept = Array2::zeros((keep.len(), n));
        for (r, &i) in keep.iter().enumerate() {
            kept.row_mut(r).assign(&states.row(i));
        }
        Trajectory::new(x0.to_vec(), grid.select(&keep), kept)
    }

    /// Uniform initial condition from the oracle's domain.
    pub fn sample_initial_condition(&mut self) -> Vec<f64> {
        self.config.domain.sample(&mut self.initial_rng)
    }

    /// Queries `count` uniform initial conditions on the grid
    /// `grid_dt, 2 grid_dt, ..., horizon`.
    pub fn sample_training_batch(
        &mut self,
        count: usize,
        horizon: f64,
        grid_dt: f64,
    ) -> Result<Vec<Trajectory>> {
        if count == 0 {
            return Err(Error::usage("training batch needs count >= 1"));
        }
        let grid = TimeGrid::uniform(grid_dt, horizon)?;
        (0..count)
            .map(|_| {
                let x0 = self.sample_initial_condition();
                self.query(&x0, &grid)
            })
            .collect()
    }
}

/// One benchmark system.
#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub id: String,
    pub name: String,
    pub system: OdeSystem,
    /// Initial-condition box; `None` means `[-5, 5]^n`.
    pub domain: Option<Domain>,
}

impl RegistryEntry {
    pub fn n_vars(&self) -> usize {
        self.system.n_vars()
    }

    pub fn domain_or_default(&self) -> Domain {
        self.domain
            .clone()
            .unwrap_or_else(|| Domain::cube(self.n_vars(), -5.0, 5.0).expect("n >= 1"))
    }

    /// Oracle configuration with this entry's system and domain.
    pub fn oracle_config(&self, seed: u64) -> OracleConfig {
        OracleConfig {
            system: self.system.clone(),
            domain: self.domain_or_default(),
            sigma2: 0.0,
            alpha: 0.0,
            dt: 1e-3,
            seed,
        }
    }
}

/// Datasets compiled into the library.
pub const BUILTIN_DATASETS: [(&str, &str); 5] = [
    ("strogatz1", include_str!("../data/strogatz_n1.txt")),
    ("strogatz2", include_str!("../data/strogatz_n2.txt")),
    ("strogatz3", include_str!("../data/strogatz_n3.txt")),
    ("odebase2", include_str!("../data/odebase_n2.txt")),
    ("odebase3", include_str!("../data/odebase_n3.txt")),
];

/// Parses registry text: `id | name | expr ; expr ... [| domain]`, with
/// `#` comments. The optional domain is `lo:hi` for every variable or
/// `lo:hi ; lo:hi ...` per variable.
pub fn parse_registry(text: &str) -> Result<Vec<RegistryEntry>> {
    let mut out: Vec<RegistryEntry> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = line.split('|').next().unwrap_or("").trim().to_string();
        let entry = parse_record(line).map_err(|e| Error::Registry {
            record: record.clone(),
            source: Box::new(e),
        })?;
        if out.iter().any(|e| e.id == entry.id) {
            return Err(Error::Registry {
                record,
                source: Box::new(Error::config("duplicate id")),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

fn parse_record(line: &str) -> Result<RegistryEntry> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(Error::config(format!("expected 3 or 4 `|`-separated fields, got {}", fields.len())));
    }
    if fields[0].is_empty() {
        return Err(Error::config("empty id"));
    }
    let parts: Vec<&str> = fields[2].split(';').collect();
    let n = parts.len();
    let exprs = parts
        .iter()
        .map(|p| parse_expression(p.trim(), n))
        .collect::<Result<Vec<_>>>()?;
    let system = OdeSystem::new(exprs);
    if system.n_constants > 0 {
        return Err(Error::config("ground-truth expressions may not contain constant slots"));
    }
    let system = system.with_coefficients(Vec::new());
    let domain = match fields.get(3) {
        Some(text) => Some(parse_domain(text, n)?),
        None => None,
    };
    Ok(RegistryEntry { id: fields[0].to_string(), name: fields[1].to_string(), system, domain })
}

fn parse_domain(text: &str, n: usize) -> Result<Domain> {
    let intervals = text
        .split(';')
        .map(|part| {
            let (a, b) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::config(format!("domain interval `{part}` is not lo:hi")))?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::config(format!("bad bound `{s}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    match intervals.len() {
        1 => Domain::new(vec![intervals[0]; n]),
        k if k == n => Domain::new(intervals),
        k => Err(Error::config(format!("domain has {k} intervals for {n} variables"))),
    }
}

/// Reads a registry file.
pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<RegistryEntry>> {
    parse_registry(&std::fs::read_to_string(path)?)
}

/// Built-in dataset by name.
pub fn builtin_registry(name: &str) -> Result<Vec<RegistryEntry>> {
    BUILTIN_DATASETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_registry(text))
        .unwrap_or_else(|| {
            let names: Vec<&str> = BUILTIN_DATASETS.iter().map(|(n, _)| *n).collect();
            Err(Error::config(format!("unknown dataset `{name}`; built-ins are {}", names.join(", "))))
        })
}

/// A built-in dataset name or a path to a registry file.
pub fn resolve_dataset(name_or_path: &str) -> Result<Vec<RegistryEntry>> {
    if BUILTIN_DATASETS.iter().any(|(n, _)| *n == name_or_path) {
        builtin_registry(name_or_path)
    } else {
        load_registry(name_or_path)
    }
}

/// Looks up one record by id.
pub fn find_entry<'a>(entries: &'a [RegistryEntry], id: &str) -> Result<&'a RegistryEntry> {
    entries
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::config(format!("no registry record with id `{id}`")))
}
