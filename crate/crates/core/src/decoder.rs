//! Recurrent policy over grammar rules, trained with REINFORCE.
//!
//! A single gated recurrent unit reads the embedding of the previously
//! emitted rule (a dedicated start token first) and a linear head turns its
//! hidden state into a softmax over the rule vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::{concatenate, s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbolic::{ExpansionState, Grammar, RuleSequence};

const INIT_SCALE: f64 = 0.05;
const CHECKPOINT_MAGIC: &str = "odequery-policy 1";

/// Network weights. Gate blocks in the recurrent matrices are ordered
/// reset, update, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// `(|R| + 1) x d_emb`; the last row is the start token.
    pub embedding: Array2<f64>,
    /// `d_emb x 3 d_hidden`.
    pub w_input: Array2<f64>,
    /// `d_hidden x 3 d_hidden`.
    pub w_hidden: Array2<f64>,
    pub b_input: Array1<f64>,
    pub b_hidden: Array1<f64>,
    /// `d_hidden x |R|`.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

const TENSOR_NAMES: [&str; 7] =
    ["embedding", "w_input", "w_hidden", "b_input", "b_hidden", "w_out", "b_out"];

impl PolicyParams {
    /// All-zero weights; the policy is exactly uniform at every step.
    pub fn zeros(vocab: usize, d_emb: usize, d_hidden: usize) -> Self {
        PolicyParams {
            embedding: Array2::zeros((vocab + 1, d_emb)),
            w_input: Array2::zeros((d_emb, 3 * d_hidden)),
            w_hidden: Array2::zeros((d_hidden, 3 * d_hidden)),
            b_input: Array1::zeros(3 * d_hidden),
            b_hidden: Array1::zeros(3 * d_hidden),
            w_out: Array2::zeros((d_hidden, vocab)),
            b_out: Array1::zeros(vocab),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams::zeros(self.vocab(), self.d_emb(), self.d_hidden())
    }

    pub fn vocab(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn d_emb(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w_out.nrows()
    }

    fn start_token(&self) -> usize {
        self.vocab()
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.embedding.as_slice().expect("standard layout"),
            self.w_input.as_slice().expect("standard layout"),
            self.w_hidden.as_slice().expect("standard layout"),
            self.b_input.as_slice().expect("standard layout"),
            self.b_hidden.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.embedding.as_slice_mut().expect("standard layout"),
            self.w_input.as_slice_mut().expect("standard layout"),
            self.w_hidden.as_slice_mut().expect("standard layout"),
            self.b_input.as_slice_mut().expect("standard layout"),
            self.b_hidden.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (k, t) in self.tensors().iter().enumerate() {
            if i < t.len() {
                return (k, i);
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat-index read across all tensors in declaration order.
    pub fn get(&self, i: usize) -> f64 {
        let (k, j) = self.locate(i);
        self.tensors()[k][j]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let (k, j) = self.locate(i);
        self.tensors_mut()[k][j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, k: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        }
    }

    fn dot(&self, other: &PolicyParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| x * y)
            .sum()
    }
}

/// Weights uniform in `[-0.05, 0.05]`, deterministic in `seed`.
pub fn init_policy(grammar: &Grammar, d_emb: usize, d_hidden: usize, seed: u64) -> PolicyParams {
    let mut params = PolicyParams::zeros(grammar.len(), d_emb, d_hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-INIT_SCALE..=INIT_SCALE));
    }
    params
}

/// One recurrent step for a batch.
struct Step {
    tokens: Vec<usize>,
    h_prev: Array2<f64>,
    reset: Array2<f64>,
    update: Array2<f64>,
    cand: Array2<f64>,
    /// Hidden-side candidate pre-activation before the reset gate.
    hidden_cand: Array2<f64>,
    h: Array2<f64>,
    log_probs: Array2<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl PolicyParams {
    /// `h_prev = None` stands for the all-zero initial state.
    /// Input-gate pre-activations for every token, `(|R| + 1) x 3 d_hidden`.
    fn token_projection(&self) -> Array2<f64> {
        self.embedding.dot(&self.w_input) + &self.b_input
    }

    fn step(&self, proj: &Array2<f64>, tokens: Vec<usize>, h_prev: Option<Array2<f64>>) -> Step {
        let hd = self.d_hidden();
        let gx = proj.select(Axis(0), &tokens);
        let (gh, h_prev) = match h_prev {
            Some(h) => (h.dot(&self.w_hidden) + &self.b_hidden, h),
            None => (
                self.b_hidden.broadcast((tokens.len(), 3 * hd)).expect("row broadcast").to_owned(),
                Array2::zeros((tokens.len(), hd)),
            ),
        };
        let reset = (&gx.slice(s![.., ..hd]) + &gh.slice(s![.., ..hd])).mapv(sigmoid);
        let update = (&gx.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
        let hidden_cand = gh.slice(s![.., 2 * hd..]).to_owned();
        let mut cand = &reset * &hidden_cand + gx.slice(s![.., 2 * hd..]);
        cand.mapv_inplace(f64::tanh);
        let mut h = Array2::zeros(h_prev.raw_dim());
        Zip::from(&mut h)
            .and(&update)
            .and(&cand)
            .and(&h_prev)
            .for_each(|h, &z, &n, &hp| *h = (1.0 - z) * n + z * hp);
        let mut log_probs = h.dot(&self.w_out) + &self.b_out;
        for mut row in log_probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        Step { tokens, h_prev, reset, update, cand, hidden_cand, h, log_probs }
    }
}

/// Sequences drawn from the policy together with their log-probabilities.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampledBatch {
    pub sequences: Vec<RuleSequence>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// How each step's rule is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Categorical,
    /// Most probable rule, lowest index on ties.
    Greedy,
}

/// Draws `n` sequences. Each stops at `max_len` rules or as soon as its
/// system has no open nonterminals.
pub fn sample_sequences<R: Rng + ?Sized>(
    params: &PolicyParams,
    grammar: &Grammar,
    n: usize,
    max_len: usize,
    mode: SampleMode,
    rng: &mut R,
) -> SampledBatch {
    let mut sequences = vec![Vec::with_capacity(max_len); n];
    let mut logprobs = vec![0.0; n];
    let mut states = vec![ExpansionState::new(grammar.n_vars()); n];
    let mut done = vec![false; n];
    let mut tokens = vec![params.start_token(); n];
    let proj = params.token_projection();
    let mut h = None;
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let step = params.step(&proj, tokens.clone(), h);
        for i in 0..n {
            if done[i] {
                continue;
            }
            let row = step.log_probs.row(i);
            let choice = match mode {
                SampleMode::Categorical => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = row.len() - 1;
                    for (k, lp) in row.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    pick
                }
                SampleMode::Greedy => {
                    let mut best = 0;
                    for (k, &lp) in row.iter().enumerate() {
                        if lp > row[best] {
                            best = k;
                        }
                    }
                    best
                }
            };
            sequences[i].push(choice);
            logprobs[i] += row[choice];
            states[i].apply(&grammar.rules()[choice]);
            tokens[i] = choice;
            done[i] = states[i].is_complete();
        }
        h = Some(step.h);
    }
    SampledBatch {
        sequences: sequences.into_iter().map(RuleSequence).collect(),
        logprobs,
        rewards: vec![0.0; n],
    }
}

/// Teacher-forced forward pass over a padded batch.
fn forward(params: &PolicyParams, seqs: &[RuleSequence]) -> (Vec<Step>, Vec<f64>) {
    let b = seqs.len();
    let steps_needed = seqs.iter().map(RuleSequence::len).max().unwrap_or(0);
    let proj = params.token_projection();
    let mut h = None;
    let mut steps: Vec<Step> = Vec::with_capacity(steps_needed);
    let mut logprobs = vec![0.0; b];
    for t in 0..steps_needed {
        let tokens: Vec<usize> = seqs
            .iter()
            .map(|s| if t == 0 || t > s.len() { params.start_token() } else { s.0[t - 1] })
            .collect();
        let step = params.step(&proj, tokens, h);
        for (i, s) in seqs.iter().enumerate() {
            if t < s.len() {
                logprobs[i] += step.log_probs[[i, s.0[t]]];
            }
        }
        h = Some(step.h.clone());
        steps.push(step);
    }
    (steps, logprobs)
}

/// Log-probability of each sequence under teacher forcing.
pub fn sequence_logprobs(params: &PolicyParams, seqs: &[RuleSequence]) -> Vec<f64> {
    forward(params, seqs).1
}

/// Gradient of `Σ_i weights_i log p(seqs_i)` by backpropagation through
/// time, together with the per-sequence log-probabilities.
pub fn weighted_logprob_grad(
    params: &PolicyParams,
    seqs: &[RuleSequence],
    weights: &[f64],
) -> Result<(Vec<f64>, PolicyParams)> {
    if seqs.len() != weights.len() {
        return Err(Error::usage("one weight per sequence required"));
    }
    let vocab = params.vocab();
    if let Some(bad) = seqs.iter().flat_map(|s| s.0.iter()).find(|&&r| r >= vocab) {
        return Err(Error::usage(format!("rule id {bad} outside vocabulary of {vocab}")));
    }
    // Repeated sequences share one forward/backward pass with summed weights.
    let mut index: HashMap<&RuleSequence, usize> = HashMap::new();
    let mut unique: Vec<RuleSequence> = Vec::new();
    let mut merged: Vec<f64> = Vec::new();
    let mut slot = Vec::with_capacity(seqs.len());
    for (s, &w) in seqs.iter().zip(weights) {
        let k = *index.entry(s).or_insert_with(|| {
            unique.push(s.clone());
            merged.push(0.0);
            unique.len() - 1
        });
        merged[k] += w;
        slot.push(k);
    }
    let (unique_lp, grad) = backprop(params, &unique, &merged);
    Ok((slot.iter().map(|&k| unique_lp[k]).collect(), grad))
}

fn backprop(params: &PolicyParams, seqs: &[RuleSequence], weights: &[f64]) -> (Vec<f64>, PolicyParams) {
    let vocab = params.vocab();
    let (steps, logprobs) = forward(params, seqs);
    let mut grad = params.zeros_like();
    let hd = params.d_hidden();
    let b = seqs.len();
    let mut dh_next = Array2::<f64>::zeros((b, hd));
    let mut d_token = Array2::<f64>::zeros((vocab + 1, 3 * hd));
    for (t, st) in steps.iter().enumerate().rev() {
        let mut dlogits = Array2::<f64>::zeros((b, vocab));
        for (i, s) in seqs.iter().enumerate() {
            if t < s.len() && weights[i] != 0.0 {
                let mut row = dlogits.row_mut(i);
                for (k, lp) in st.log_probs.row(i).iter().enumerate() {
                    row[k] = -weights[i] * lp.exp();
                }
                row[s.0[t]] += weights[i];
            }
        }
        grad.w_out += &st.h.t().dot(&dlogits);
        grad.b_out += &dlogits.sum_axis(Axis(0));
        let dh = dlogits.dot(&params.w_out.t()) + &dh_next;

        let mut da_reset = Array2::zeros((b, hd));
        let mut da_update = Array2::zeros((b, hd));
        let mut da_cand = Array2::zeros((b, hd));
        let mut d_hidden_cand = Array2::zeros((b, hd));
        let mut dh_prev = Array2::zeros((b, hd));
        Zip::indexed(&dh).for_each(|(i, j), &g| {
            let (r, z, n) = (st.reset[[i, j]], st.update[[i, j]], st.cand[[i, j]]);
            let hn = st.hidden_cand[[i, j]];
            let dn = g * (1.0 - z);
            let dz = g * (st.h_prev[[i, j]] - n);
            let dan = dn * (1.0 - n * n);
            let dr = dan * hn;
            da_cand[[i, j]] = dan;
            d_hidden_cand[[i, j]] = dan * r;
            da_update[[i, j]] = dz * z * (1.0 - z);
            da_reset[[i, j]] = dr * r * (1.0 - r);
            dh_prev[[i, j]] = g * z;
        });
        let dgx = concatenate(Axis(1), &[da_reset.view(), da_update.view(), da_cand.view()])
            .expect("equal row counts");
        let dgh = concatenate(Axis(1), &[da_reset.view(), da_update.view(), d_hidden_cand.view()])
            .expect("equal row counts");
        for (i, &tok) in st.tokens.iter().enumerate() {
            let mut row = d_token.row_mut(tok);
            row += &dgx.row(i);
        }
        grad.b_hidden += &dgh.sum_axis(Axis(0));
        if t > 0 {
            // The initial hidden state is zero and not a parameter.
            grad.w_hidden += &st.h_prev.t().dot(&dgh);
            dh_prev += &dgh.dot(&params.w_hidden.t());
        }
        dh_next = dh_prev;
    }
    // Input-side gradients only depend on the per-token sums of dgx.
    grad.b_input = d_token.sum_axis(Axis(0));
    grad.w_input = params.embedding.t().dot(&d_token);
    grad.embedding = d_token.dot(&params.w_input.t());
    (logprobs, grad)
}

/// `log p(seq)` and its gradient.
pub fn logprob_and_grad(params: &PolicyParams, seq: &RuleSequence) -> Result<(f64, PolicyParams)> {
    let (lp, grad) = weighted_logprob_grad(params, std::slice::from_ref(seq), &[1.0])?;
    Ok((lp[0], grad))
}

/// REINFORCE estimate `(1/N) Σ_i (r_i - b) ∇ log p(s_i)` with `b` the batch
/// mean reward. Returns the estimate and `b`.
pub fn policy_gradient(params: &PolicyParams, batch: &SampledBatch) -> Result<(PolicyParams, f64)> {
    let n = batch.len();
    if n == 0 || batch.rewards.len() != n {
        return Err(Error::usage("batch needs one reward per sequence"));
    }
    let first = batch.rewards[0];
    // Identical rewards give the exact baseline, so every weight is zero.
    let baseline = if batch.rewards.iter().all(|&r| r == first) {
        first
    } else {
        batch.rewards.iter().sum::<f64>() / n as f64
    };
    let weights: Vec<f64> = batch.rewards.iter().map(|r| (r - baseline) / n as f64).collect();
    let (_, grad) = weighted_logprob_grad(params, &batch.sequences, &weights)?;
    Ok((grad, baseline))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient ascent.
    Sgd,
}

/// Decoder and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_len: usize,
    pub d_hidden: usize,
    pub d_emb: usize,
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            epochs: 50,
            batch: 100,
            lr: 0.009,
            max_len: 20,
            d_hidden: 256,
            d_emb: 256,
            clip_norm: 5.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.max_len == 0 || self.d_hidden == 0 || self.d_emb == 0 {
            return Err(Error::config("batch, max_len and layer sizes must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::config("lr and clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Optimizer state; one per policy.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: PolicyParams,
    second: PolicyParams,
    steps: u32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, params: &PolicyParams) -> Self {
        Optimizer { kind, first: params.zeros_like(), second: params.zeros_like(), steps: 0 }
    }

    /// Moves `params` along the ascent direction `grad`.
    pub fn ascend(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, lr),
            OptimizerKind::Adam => {
                self.steps += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.steps as i32);
                let c2 = 1.0 - Self::BETA2.powi(self.steps as i32);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(self.first.tensors_mut().into_iter().zip(self.second.tensors_mut()));
                for ((p, g), (m, v)) in tensors {
                    for i in 0..p.len() {
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                        p[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Summary of one policy update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub max_reward: f64,
    pub baseline: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

/// One REINFORCE step on `batch` (rewards already filled in).
pub fn reinforce_update(
    params: &mut PolicyParams,
    optimizer: &mut Optimizer,
    batch: &SampledBatch,
    lr: f64,
    clip_norm: f64,
) -> Result<UpdateStats> {
    let (mut grad, baseline) = policy_gradient(params, batch)?;
    let grad_norm = grad.dot(&grad).sqrt();
    let max_reward = batch.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut stats = UpdateStats {
        mean_reward: baseline,
        max_reward,
        baseline,
        grad_norm,
        clipped: false,
        skipped: false,
    };
    if !grad_norm.is_finite() {
        log::warn!("event=update_skipped reason=non_finite_gradient");
        stats.skipped = true;
        return Ok(stats);
    }
    if grad_norm > clip_norm {
        grad.scale(clip_norm / grad_norm);
        stats.clipped = true;
    }
    let before = params.clone();
    optimizer.ascend(params, &grad, lr);
    if !params.all_finite() {
        log::warn!("event=update_skipped reason=non_finite_parameters");
        *params = before;
        stats.skipped = true;
    }
    Ok(stats)
}

/// Probabilities of the first rule, before any input beyond the start token.
pub fn first_step_probs(params: &PolicyParams) -> Vec<f64> {
    let step = params.step(&params.token_projection(), vec![params.start_token()], None);
    step.log_probs.row(0).iter().map(|v| v.exp()).collect()
}

/// Writes a text checkpoint tagged with the grammar fingerprint.
pub fn write_checkpoint<W: Write>(params: &PolicyParams, grammar: &Grammar, mut w: W) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "grammar {}", grammar.fingerprint())?;
    writeln!(w, "shape {} {} {}", params.vocab(), params.d_emb(), params.d_hidden())?;
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors()) {
        write!(w, "{name}")?;
        for v in t {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a checkpoint written for the same grammar.
pub fn read_checkpoint<R: BufRead>(r: R, grammar: &Grammar) -> Result<PolicyParams> {
    let bad = |msg: &str| Error::config(format!("checkpoint: {msg}"));
    let mut lines = r.lines();
    let mut next = || -> Result<String> { lines.next().ok_or_else(|| bad("truncated"))?.map_err(Error::from) };
    if next()? != CHECKPOINT_MAGIC {
        return Err(bad("unrecognised header"));
    }
    let fp = next()?;
    if fp.strip_prefix("grammar ") != Some(grammar.fingerprint().as_str()) {
        return Err(bad("grammar fingerprint mismatch"));
    }
    let shape: Vec<usize> = next()?
        .strip_prefix("shape ")
        .ok_or_else(|| bad("missing shape"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    if shape.len() != 3 || shape[0] != grammar.len() {
        return Err(bad("shape does not match grammar"));
    }
    let mut params = PolicyParams::zeros(shape[0], shape[1], shape[2]);
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
        let line = next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(*name) {
            return Err(bad(&format!("expected tensor {name}")));
        }
        let values: Vec<f64> =
            parts.map(|v| v.parse().map_err(|_| bad("bad value"))).collect::<Result<_>>()?;
        if values.len() != t.len() {
            return Err(bad(&format!("tensor {name} has {} values, expected {}", values.len(), t.len())));
        }
        t.copy_from_slice(&values);
    }
    Ok(params)
}
