//! End-to-end discovery loop, held-out evaluation, strategy comparison and
//! plot-data output.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constfit::{fit_batch, EvalSet, FitConfig, FitProblem, FitResult};
use crate::decoder::{
    init_policy, reinforce_update, sample_sequences, DecoderConfig, Optimizer, SampleMode,
};
use crate::dynamics::{
    integrate_compiled, median, r2, rank_ascending, reward, kendall_distance, TimeGrid, Trajectory,
    NMSE_SENTINEL,
};
use crate::error::{Error, Result};
use crate::oracle::{resolve_dataset, find_entry, Domain, Oracle, OracleConfig};
use crate::sketcher::{plan_queries, QueryStrategy, RegionChoice, SketchConfig};
use crate::symbolic::{parse_system, CompiledSystem, Grammar, OdeSystem, Operator};

const ORACLE_STREAM: u64 = 0x0dac_1e00;
const TEST_STREAM: u64 = 0x7e57_5e70;
const REFERENCE_STREAM: u64 = 0x4ef0_4e7c;

fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Ground truth: a registry record, or an explicit expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    /// Built-in dataset name or registry file path.
    pub dataset: String,
    pub id: String,
    /// Overrides `dataset`/`id` when set, e.g. `"0.23*x0"`.
    pub expression: Option<String>,
    /// Per-variable `[lo, hi]`; defaults to the record's domain.
    pub domain: Option<Vec<(f64, f64)>>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig { dataset: "strogatz1".into(), id: "2".into(), expression: None, domain: None }
    }
}

impl TruthConfig {
    /// Resolves to a fitted system, its initial-condition box and a label.
    pub fn resolve(&self) -> Result<(OdeSystem, Domain, String)> {
        let (system, default_domain, label) = match &self.expression {
            Some(text) => {
                let system = parse_system(text)?;
                if system.n_constants > 0 {
                    return Err(Error::config("truth expression may not contain constant slots"));
                }
                let system = system.with_coefficients(Vec::new());
                let domain = Domain::cube(system.n_vars(), -5.0, 5.0)?;
                let label = system.render();
                (system, domain, label)
            }
            None => {
                let registry = resolve_dataset(&self.dataset)?;
                let entry = find_entry(&registry, &self.id)?;
                (entry.system.clone(), entry.domain_or_default(), format!("{}:{}", self.dataset, entry.id))
            }
        };
        let domain = match &self.domain {
            Some(bounds) => Domain::new(bounds.clone())?,
            None => default_domain,
        };
        if domain.n_vars() != system.n_vars() {
            return Err(Error::config(format!(
                "domain has {} intervals, truth has {} variables",
                domain.n_vars(),
                system.n_vars()
            )));
        }
        Ok((system, domain, label))
    }
}

/// Oracle corruption and data-collection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sigma2: f64,
    pub alpha: f64,
    /// Oracle integration step and observation spacing.
    pub dt: f64,
    pub horizon: f64,
    /// Trajectories drawn before the first epoch.
    pub initial_draw: usize,
    /// Trajectories queried per epoch.
    pub query_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { sigma2: 0.0, alpha: 0.0, dt: 1e-3, horizon: 1.0, initial_draw: 100, query_batch: 20 }
    }
}

/// Held-out evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub count: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Apply the training noise model to test data too.
    pub noisy: bool,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig { count: 100, horizon: 10.0, dt: 1e-3, noisy: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    /// Comma separated, e.g. `"+,*,sin"`.
    pub operators: String,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig { operators: "+,-,*,/,sin,cos,exp,log".into() }
    }
}

impl GrammarConfig {
    pub fn operators(&self) -> Result<Vec<Operator>> {
        let ops = Operator::parse_list(&self.operators)?;
        if ops.is_empty() {
            return Err(Error::config("operator list is empty"));
        }
        Ok(ops)
    }
}

/// Everything one discovery run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub truth: TruthConfig,
    pub data: DataConfig,
    pub test: TestConfig,
    pub grammar: GrammarConfig,
    pub decoder: DecoderConfig,
    pub sketch: SketchConfig,
    pub fit: FitConfig,
    pub strategy: QueryStrategy,
    /// Best fitted candidates of an epoch that take part in sketching.
    pub sketch_top_m: usize,
    pub hall_of_fame: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            truth: TruthConfig::default(),
            data: DataConfig::default(),
            test: TestConfig::default(),
            grammar: GrammarConfig::default(),
            decoder: DecoderConfig::default(),
            sketch: SketchConfig::default(),
            fit: FitConfig::default(),
            strategy: QueryStrategy::Apps,
            sketch_top_m: 10,
            hall_of_fame: 10,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.resolve()?;
        self.grammar.operators()?;
        self.decoder.validate()?;
        self.sketch.validate()?;
        self.fit.validate()?;
        let d = &self.data;
        if !(d.sigma2 >= 0.0) || !(0.0..1.0).contains(&d.alpha) {
            return Err(Error::config("sigma2 must be >= 0 and alpha in [0, 1)"));
        }
        if d.initial_draw == 0 || d.query_batch == 0 {
            return Err(Error::config("initial_draw and query_batch must be >= 1"));
        }
        TimeGrid::uniform(d.dt, d.horizon).map_err(|e| Error::config(format!("training grid: {e}")))?;
        if self.test.count == 0 {
            return Err(Error::config("test.count must be >= 1"));
        }
        TimeGrid::uniform(self.test.dt, self.test.horizon)
            .map_err(|e| Error::config(format!("test grid: {e}")))?;
        if self.sketch_top_m < 2 || self.hall_of_fame == 0 {
            return Err(Error::config("sketch_top_m must be >= 2 and hall_of_fame >= 1"));
        }
        Ok(())
    }

    fn oracle_config(&self, system: &OdeSystem, domain: &Domain, seed: u64, noisy: bool) -> OracleConfig {
        OracleConfig {
            system: system.clone(),
            domain: domain.clone(),
            sigma2: if noisy { self.data.sigma2 } else { 0.0 },
            alpha: if noisy { self.data.alpha } else { 0.0 },
            dt: self.data.dt,
            seed,
        }
    }
}

/// One remembered candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallEntry {
    pub skeleton: String,
    pub system: String,
    pub coefficients: Vec<f64>,
    pub train_nmse: f64,
    pub epoch: usize,
}

/// The best candidates seen so far, ascending by train NMSE, one entry per
/// skeleton.
#[derive(Debug, Clone, Default, Serialize)]
pub struct HallOfFame {
    capacity: usize,
    entries: Vec<HallEntry>,
}

impl HallOfFame {
    pub fn new(capacity: usize) -> Self {
        HallOfFame { capacity, entries: Vec::with_capacity(capacity + 1) }
    }

    pub fn entries(&self) -> &[HallEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> Option<&HallEntry> {
        self.entries.first()
    }

    /// Inserts or improves an entry. Non-finite errors are ignored.
    pub fn offer(&mut self, entry: HallEntry) {
        if !entry.train_nmse.is_finite() {
            return;
        }
        if let Some(pos) = self.entries.iter().position(|e| e.skeleton == entry.skeleton) {
            if self.entries[pos].train_nmse <= entry.train_nmse {
                return;
            }
            self.entries.remove(pos);
        }
        let at = self.entries.partition_point(|e| e.train_nmse <= entry.train_nmse);
        self.entries.insert(at, entry);
        self.entries.truncate(self.capacity);
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub best_reward: f64,
    /// Best train NMSE in the hall of fame after this epoch.
    pub best_train_nmse: f64,
    pub strategy: QueryStrategy,
    pub region: Option<String>,
    pub region_scores: Vec<f64>,
    /// Cumulative oracle queries.
    pub oracle_queries: u64,
    pub data_trajectories: usize,
    pub distinct_skeletons: usize,
    pub fitted_skeletons: usize,
    pub aux_bytes: usize,
}

/// Held-out accuracy of one system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestScore {
    pub nmse: f64,
    pub median_nmse: f64,
    /// `1 - nmse`, unclipped.
    pub r2: f64,
    /// `r2` clipped at zero, for display.
    pub r2_display: f64,
    pub per_trajectory: Vec<f64>,
}

/// Truth and prediction from one test start, thinned for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotTrajectory {
    pub start: usize,
    pub truth: Trajectory,
    pub predicted: Trajectory,
}

/// Wall-clock measurements, kept apart from the deterministic content.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub fit_seconds: f64,
    pub query_seconds: f64,
    pub update_seconds: f64,
    pub test_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub truth: String,
    pub n_vars: usize,
    pub best_system: Option<String>,
    pub best_skeleton: Option<String>,
    pub best_coefficients: Vec<f64>,
    pub train_nmse: f64,
    pub train_r2: f64,
    pub test: Option<TestScore>,
    pub hall_of_fame: Vec<HallEntry>,
    pub epochs: Vec<EpochRecord>,
    pub total_queries: u64,
    pub plot_trajectories: Vec<PlotTrajectory>,
    pub timing: Timing,
}

impl RunReport {
    pub fn discovered(&self) -> bool {
        self.best_system.is_some()
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> RunReport {
        RunReport { timing: Timing::default(), ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Noiseless (unless configured) held-out trajectories of the truth.
pub fn build_test_set(config: &RunConfig) -> Result<Vec<Trajectory>> {
    let (system, domain, _) = config.truth.resolve()?;
    let seed = derive_seed(config.seed, TEST_STREAM, 0);
    let mut cfg = config.oracle_config(&system, &domain, seed, config.test.noisy);
    cfg.dt = config.test.dt;
    let mut oracle = Oracle::new(cfg)?;
    oracle.sample_training_batch(config.test.count, config.test.horizon, config.test.dt)
}

/// Integrates `system` from every test start and scores it against the
/// truth. Diverging starts contribute the sentinel.
pub fn evaluate_on_test(system: &OdeSystem, test_set: &[Trajectory], dt: f64) -> Result<TestScore> {
    if !system.is_complete() || !system.is_fitted() {
        return Err(Error::usage("test evaluation needs a complete system with coefficients"));
    }
    if test_set.is_empty() {
        return Err(Error::usage("empty test set"));
    }
    let compiled = CompiledSystem::new(system)?;
    let per_trajectory = test_set
        .iter()
        .map(|truth| {
            let pred = integrate_compiled(&compiled, &system.coefficients, &truth.initial, &truth.grid, dt)?;
            crate::dynamics::nmse(truth, &pred)
        })
        .collect::<Result<Vec<f64>>>()?;
    let nmse = crate::dynamics::mean_nmse(&per_trajectory);
    let r2_value = r2(nmse);
    Ok(TestScore {
        nmse,
        median_nmse: median(&per_trajectory),
        r2: r2_value,
        r2_display: if r2_value.is_finite() { r2_value.max(0.0) } else { 0.0 },
        per_trajectory,
    })
}

struct Fitted {
    skeleton: String,
    system: OdeSystem,
    nmse: f64,
}

/// Runs the full active discovery loop.
pub fn run_discovery(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let mut timing = Timing::default();
    let (truth, domain, label) = config.truth.resolve()?;
    let n = truth.n_vars();
    let grammar = Grammar::build(&config.grammar.operators()?, n)?;
    let dc = &config.decoder;
    let mut params = init_policy(&grammar, dc.d_emb, dc.d_hidden, config.seed);
    let mut optimizer = Optimizer::new(dc.optimizer, &params);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(1);
    let mut query_rng = ChaCha8Rng::seed_from_u64(config.seed);
    query_rng.set_stream(2);

    let oracle_seed = derive_seed(config.seed, ORACLE_STREAM, 0);
    let mut oracle = Oracle::new(config.oracle_config(&truth, &domain, oracle_seed, true))?;
    let train_grid = TimeGrid::uniform(config.data.dt, config.data.horizon)?;
    let t0 = Instant::now();
    let mut data = oracle.sample_training_batch(config.data.initial_draw, config.data.horizon, config.data.dt)?;
    timing.query_seconds += t0.elapsed().as_secs_f64();
    log::info!("event=run_start truth={label} strategy={} seed={} initial={}", config.strategy, config.seed, data.len());

    let threads = config.fit.threads();
    let mut hof = HallOfFame::new(config.hall_of_fame);
    let mut warm: HashMap<String, Vec<f64>> = HashMap::new();
    let mut epochs = Vec::with_capacity(dc.epochs);

    for epoch in 0..dc.epochs {
        let mut batch = sample_sequences(&params, &grammar, dc.batch, dc.max_len, SampleMode::Categorical, &mut sample_rng);
        let systems: Vec<OdeSystem> = batch.sequences.iter().map(|s| grammar.to_system(s)).collect();

        // Fit each distinct complete skeleton once.
        let mut keys: Vec<Option<usize>> = Vec::with_capacity(systems.len());
        let mut distinct: Vec<(String, OdeSystem)> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for sys in &systems {
            if !sys.is_complete() {
                keys.push(None);
                continue;
            }
            let key = sys.render_skeleton();
            let k = *index.entry(key.clone()).or_insert_with(|| {
                distinct.push((key, sys.clone()));
                distinct.len() - 1
            });
            keys.push(Some(k));
        }
        let fit_set = EvalSet::subsample(
            &data,
            config.fit.eval_dt,
            config.fit.max_trajectories,
            config.fit.max_points,
            derive_seed(config.seed, epoch as u64, 1),
        )?;
        let problems: Vec<FitProblem> = distinct
            .iter()
            .enumerate()
            .map(|(i, (key, sys))| {
                let seed = derive_seed(config.seed, epoch as u64, 2 + i as u64);
                let mut p = FitProblem::new(sys.clone(), &fit_set, &config.fit, seed);
                if let Some(c) = warm.get(key) {
                    p.warm_start = Some(c.clone());
                    p.restarts = p.restarts.min(1);
                }
                p
            })
            .collect();
        let fits = fit_batch(&problems, threads);
        timing.fit_seconds += fits.elapsed.as_secs_f64();
        let fitted: Vec<Option<Fitted>> = distinct
            .iter()
            .zip(&fits.results)
            .map(|((key, sys), r): (&(String, OdeSystem), &FitResult)| {
                if let Some(e) = &r.error {
                    log::debug!("event=fit_rejected skeleton={key} error={e}");
                }
                if !r.nmse.is_finite() || r.coefficients.len() != sys.n_constants {
                    return None;
                }
                warm.insert(key.clone(), r.coefficients.clone());
                Some(Fitted {
                    skeleton: key.clone(),
                    system: sys.clone().with_coefficients(r.coefficients.clone()),
                    nmse: r.nmse,
                })
            })
            .collect();

        // Top candidates enter the sketch; ties keep first appearance.
        let mut order: Vec<usize> = (0..fitted.len()).filter(|&i| fitted[i].is_some()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (fitted[a].as_ref().unwrap(), fitted[b].as_ref().unwrap());
            fa.nmse.total_cmp(&fb.nmse)
        });
        let committee: Vec<OdeSystem> = order
            .iter()
            .take(config.sketch_top_m)
            .map(|&i| fitted[i].as_ref().unwrap().system.clone())
            .collect();

        let tq = Instant::now();
        let mut strategy = config.strategy;
        if strategy.needs_candidates() && committee.len() < 2 {
            log::info!("event=strategy_fallback epoch={epoch} from={strategy} to=random candidates={}", committee.len());
            strategy = QueryStrategy::Random;
        }
        let existing: Vec<Vec<f64>> = data.iter().map(|t| t.initial.clone()).collect();
        let plan = match plan_queries(strategy, &committee, &domain, &existing, config.data.query_batch, &config.sketch, &mut query_rng) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("event=plan_failed epoch={epoch} strategy={strategy} error={e}");
                strategy = QueryStrategy::Random;
                plan_queries(strategy, &committee, &domain, &existing, config.data.query_batch, &config.sketch, &mut query_rng)?
            }
        };
        let mut fresh = Vec::with_capacity(plan.initials.len());
        for x0 in &plan.initials {
            match oracle.query(x0, &train_grid) {
                Ok(t) => fresh.push(t),
                Err(e) => log::warn!("event=query_failed epoch={epoch} error={e}"),
            }
        }
        timing.query_seconds += tq.elapsed().as_secs_f64();

        // Rewards on the new data only.
        let reward_set = EvalSet::new(&fresh, config.fit.eval_dt)?;
        let distinct_rewards: Vec<f64> = fitted
            .iter()
            .map(|f| match f {
                None => 0.0,
                Some(f) if reward_set.is_empty() => reward(f.nmse),
                Some(f) => {
                    let compiled = CompiledSystem::new(&f.system).expect("complete system");
                    reward(reward_set.mean_nmse(&compiled, &f.system.coefficients))
                }
            })
            .collect();
        batch.rewards = keys.iter().map(|k| k.map_or(0.0, |k| distinct_rewards[k])).collect();

        for f in fitted.iter().flatten() {
            hof.offer(HallEntry {
                skeleton: f.skeleton.clone(),
                system: f.system.render(),
                coefficients: f.system.coefficients.clone(),
                train_nmse: f.nmse,
                epoch,
            });
        }
        data.extend(fresh);

        let tu = Instant::now();
        let stats = reinforce_update(&mut params, &mut optimizer, &batch, dc.lr, dc.clip_norm)?;
        timing.update_seconds += tu.elapsed().as_secs_f64();

        let record = EpochRecord {
            epoch,
            mean_reward: stats.mean_reward,
            best_reward: stats.max_reward,
            best_train_nmse: hof.best().map_or(NMSE_SENTINEL, |e| e.train_nmse),
            strategy,
            region: plan.region.as_ref().map(|c: &RegionChoice| c.region.to_string()),
            region_scores: plan.region.as_ref().map_or_else(Vec::new, |c| c.scores.clone()),
            oracle_queries: oracle.query_count(),
            data_trajectories: data.len(),
            distinct_skeletons: distinct.len(),
            fitted_skeletons: fitted.iter().flatten().count(),
            aux_bytes: plan.aux_bytes,
        };
        log::info!(
            "event=epoch epoch={epoch} mean_reward={:.6} best_reward={:.6} best_train_nmse={:.3e} region={} queries={} data={}",
            record.mean_reward,
            record.best_reward,
            record.best_train_nmse,
            record.region.as_deref().unwrap_or("-"),
            record.oracle_queries,
            record.data_trajectories
        );
        epochs.push(record);
    }

    // Final choice: best hall-of-fame entry on all collected data.
    let full = EvalSet::new(&data, config.fit.eval_dt)?;
    let mut best: Option<(OdeSystem, &HallEntry, f64)> = None;
    for entry in hof.entries() {
        let sys = parse_system(&entry.skeleton)?.with_coefficients(entry.coefficients.clone());
        let v = full.evaluate(&sys)?;
        if best.as_ref().is_none_or(|(_, _, b)| v < *b) {
            best = Some((sys, entry, v));
        }
    }

    let tt = Instant::now();
    let (test, plot_trajectories) = match &best {
        Some((sys, _, _)) => {
            let test_set = build_test_set(config)?;
            let score = evaluate_on_test(sys, &test_set, config.test.dt)?;
            (Some(score), plot_samples(sys, &test_set, config.test.dt, 3, 50)?)
        }
        None => {
            log::warn!("event=no_discovery epochs={}", dc.epochs);
            (None, Vec::new())
        }
    };
    timing.test_seconds = tt.elapsed().as_secs_f64();
    timing.total_seconds = started.elapsed().as_secs_f64();

    let train_nmse = best.as_ref().map_or(NMSE_SENTINEL, |b| b.2);
    let report = RunReport {
        config: config.clone(),
        truth: truth.render(),
        n_vars: n,
        best_system: best.as_ref().map(|b| b.0.render()),
        best_skeleton: best.as_ref().map(|b| b.1.skeleton.clone()),
        best_coefficients: best.as_ref().map_or_else(Vec::new, |b| b.0.coefficients.clone()),
        train_nmse,
        train_r2: r2(train_nmse),
        test,
        hall_of_fame: hof.entries().to_vec(),
        epochs,
        total_queries: oracle.query_count(),
        plot_trajectories,
        timing,
    };
    log::info!(
        "event=run_end best={} train_nmse={:.3e} test_nmse={:.3e} queries={} seconds={:.2}",
        report.best_system.as_deref().unwrap_or("-"),
        report.train_nmse,
        report.test.as_ref().map_or(NMSE_SENTINEL, |t| t.nmse),
        report.total_queries,
        report.timing.total_seconds
    );
    Ok(report)
}

fn plot_samples(
    system: &OdeSystem,
    test_set: &[Trajectory],
    dt: f64,
    count: usize,
    stride: usize,
) -> Result<Vec<PlotTrajectory>> {
    let compiled = CompiledSystem::new(system)?;
    test_set
        .iter()
        .take(count)
        .enumerate()
        .map(|(start, truth)| {
            let rows: Vec<usize> = (stride - 1..truth.len()).step_by(stride).collect();
            let pred = integrate_compiled(&compiled, &system.coefficients, &truth.initial, &truth.grid, dt)?;
            Ok(PlotTrajectory { start, truth: truth.select(&rows), predicted: pred.select(&rows) })
        })
        .collect()
}

/// File names written by [`emit_plot_data`].
pub const PLOT_FILES: [&str; 3] = ["rewards.csv", "trajectories.csv", "sketch_scores.csv"];

/// Writes three CSV series into `dir`:
///
/// * `rewards.csv`: `epoch,mean_reward,best_reward,best_train_nmse,oracle_queries,data_trajectories`
/// * `trajectories.csv`: `start,source,t,x0,...`, with `source` either
///   `truth` or `predicted` and the initial condition as the `t=0` row
/// * `sketch_scores.csv`: `epoch,region,score,selected`
pub fn emit_plot_data(report: &RunReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = PLOT_FILES.iter().map(|f| dir.join(f)).collect();

    let mut w = BufWriter::new(File::create(&paths[0])?);
    writeln!(w, "epoch,mean_reward,best_reward,best_train_nmse,oracle_queries,data_trajectories")?;
    for e in &report.epochs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            e.epoch, e.mean_reward, e.best_reward, e.best_train_nmse, e.oracle_queries, e.data_trajectories
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&paths[1])?);
    let vars: Vec<String> = (0..report.n_vars).map(|j| format!("x{j}")).collect();
    let mut header = vec!["start".to_string(), "source".into(), "t".into()];
    header.extend(vars);
    writeln!(w, "{}", header.join(","))?;
    for p in &report.plot_trajectories {
        for (source, t) in [("truth", &p.truth), ("predicted", &p.predicted)] {
            write_plot_row(&mut w, p.start, source, 0.0, &t.initial)?;
            for (time, row) in t.grid.times().iter().zip(t.states.rows()) {
                write_plot_row(&mut w, p.start, source, *time, &row.to_vec())?;
            }
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&paths[2])?);
    writeln!(w, "epoch,region,score,selected")?;
    for e in &report.epochs {
        let chosen = crate::sketcher::argmax(&e.region_scores);
        for (k, s) in e.region_scores.iter().enumerate() {
            writeln!(w, "{},{},{},{}", e.epoch, k, s, u8::from(chosen == Some(k)))?;
        }
    }
    w.flush()?;
    Ok(paths)
}

fn write_plot_row<W: Write>(w: &mut W, start: usize, source: &str, t: f64, x: &[f64]) -> Result<()> {
    write!(w, "{start},{source},{t}")?;
    for v in x {
        write!(w, ",{v}")?;
    }
    writeln!(w)?;
    Ok(())
}

/// Reads `trajectories.csv` back as `(start, source, trajectory)` triples.
pub fn read_plot_trajectories(path: impl AsRef<Path>) -> Result<Vec<(usize, String, Trajectory)>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::usage("empty plot file"))??;
    let n = header.split(',').count().saturating_sub(3);
    // (start, source, initial, times, flattened states)
    type Pending = (usize, String, Vec<f64>, Vec<f64>, Vec<f64>);
    let mut out: Vec<Pending> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 3 {
            return Err(Error::usage(format!("line {}: expected {} fields", lineno + 2, n + 3)));
        }
        let bad = |e: &dyn std::fmt::Display| Error::usage(format!("line {}: {e}", lineno + 2));
        let start: usize = fields[0].parse().map_err(|e| bad(&e))?;
        let source = fields[1].to_string();
        let t: f64 = fields[2].parse().map_err(|e| bad(&e))?;
        let x = fields[3..].iter().map(|f| f.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(&e))?;
        match out.last_mut() {
            Some(cur) if cur.0 == start && cur.1 == source && t > 0.0 => {
                cur.3.push(t);
                cur.4.extend(x);
            }
            _ => out.push((start, source, x, Vec::new(), Vec::new())),
        }
    }
    out.into_iter()
        .map(|(start, source, initial, times, values)| {
            let hint = times.first().copied().unwrap_or(1.0);
            let k = times.len();
            let grid = TimeGrid::new(times, hint)?;
            let states = ndarray::Array2::from_shape_vec((k, n), values)
                .map_err(|e| Error::usage(e.to_string()))?;
            Ok((start, source, Trajectory::new(initial, grid, states)?))
        })
        .collect()
}

/// Settings of a strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub truth: TruthConfig,
    pub data: DataConfig,
    pub sketch: SketchConfig,
    /// Step used when scoring candidates.
    pub eval_dt: f64,
    /// Queries each strategy may spend.
    pub budget: usize,
    /// Noiseless trajectories behind the reference ranking.
    pub reference_count: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            truth: TruthConfig::default(),
            data: DataConfig::default(),
            sketch: SketchConfig::default(),
            eval_dt: 0.01,
            budget: 20,
            reference_count: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: QueryStrategy,
    pub kendall_distance: f64,
    pub ranking: Vec<usize>,
    pub aux_bytes: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub reference_ranking: Vec<usize>,
    pub rows: Vec<StrategyRow>,
}

impl Comparison {
    pub fn row(&self, strategy: QueryStrategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Three-column text table: distance, seconds, auxiliary memory.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10} {:>14}\n", "strategy", "kendall", "seconds", "aux_bytes");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>10.4} {:>10.3} {:>14}\n",
                r.strategy.name(),
                r.kendall_distance,
                r.seconds,
                r.aux_bytes
            ));
        }
        s
    }
}

/// Ranks fitted candidates by mean NMSE on `data`, best first.
pub fn rank_candidates(candidates: &[OdeSystem], data: &[Trajectory], eval_dt: f64) -> Result<Vec<usize>> {
    let set = EvalSet::new(data, eval_dt)?;
    let scores = candidates.iter().map(|c| set.evaluate(c)).collect::<Result<Vec<_>>>()?;
    Ok(rank_ascending(&scores))
}

/// Reads fitted candidate systems, one per line (`#` comments allowed).
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<OdeSystem>> {
    parse_candidates(&std::fs::read_to_string(path)?)
}

pub fn parse_candidates(text: &str) -> Result<Vec<OdeSystem>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let sys = parse_system(l)?;
            if sys.n_constants > 0 {
                return Err(Error::config(format!("candidate `{l}` has unfitted constant slots")));
            }
            Ok(sys.with_coefficients(Vec::new()))
        })
        .collect()
}

/// Gives each strategy the same oracle seed and query budget, ranks the
/// candidates on what it collected, and measures the distance to the
/// ranking on a large noiseless reference set.
pub fn compare_strategies(
    config: &CompareConfig,
    candidates: &[OdeSystem],
    strategies: &[QueryStrategy],
) -> Result<Comparison> {
    if candidates.len() < 2 {
        return Err(Error::usage("comparison needs at least two candidates"));
    }
    if config.budget == 0 || config.reference_count == 0 {
        return Err(Error::config("budget and reference_count must be >= 1"));
    }
    config.sketch.validate()?;
    let (truth, domain, _) = config.truth.resolve()?;
    let grid = TimeGrid::uniform(config.data.dt, config.data.horizon)?;

    let reference_seed = derive_seed(config.seed, REFERENCE_STREAM, 0);
    let mut reference_oracle = Oracle::new(OracleConfig {
        system: truth.clone(),
        domain: domain.clone(),
        sigma2: 0.0,
        alpha: 0.0,
        dt: config.data.dt,
        seed: reference_seed,
    })?;
    let reference = reference_oracle.sample_training_batch(config.reference_count, config.data.horizon, config.data.dt)?;
    let reference_ranking = rank_candidates(candidates, &reference, config.eval_dt)?;

    let oracle_cfg = OracleConfig {
        system: truth,
        domain: domain.clone(),
        sigma2: config.data.sigma2,
        alpha: config.data.alpha,
        dt: config.data.dt,
        seed: derive_seed(config.seed, ORACLE_STREAM, 0),
    };
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let started = Instant::now();
        let mut oracle = Oracle::new(oracle_cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let plan = plan_queries(strategy, candidates, &domain, &[], config.budget, &config.sketch, &mut rng)?;
        let data = plan
            .initials
            .iter()
            .map(|x0| oracle.query(x0, &grid))
            .collect::<Result<Vec<_>>>()?;
        let seconds = started.elapsed().as_secs_f64();
        let ranking = rank_candidates(candidates, &data, config.eval_dt)?;
        let distance = kendall_distance(&ranking, &reference_ranking)?;
        log::info!(
            "event=strategy strategy={strategy} kendall={distance:.4} aux_bytes={} seconds={seconds:.3}",
            plan.aux_bytes
        );
        rows.push(StrategyRow { strategy, kendall_distance: distance, ranking, aux_bytes: plan.aux_bytes, seconds });
    }
    Ok(Comparison { reference_ranking, rows })
}
