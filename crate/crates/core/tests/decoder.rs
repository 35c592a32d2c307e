use odequery::decoder::*;
use odequery::symbolic::{Grammar, Operator, RuleSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grammar2() -> Grammar {
    Grammar::build(&[Operator::Add, Operator::Sub, Operator::Mul, Operator::Div], 2).unwrap()
}

fn bandit() -> Grammar {
    Grammar::build(&[Operator::Add], 1).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn same_seed_same_weights() {
    let g = grammar2();
    assert_eq!(init_policy(&g, 256, 256, 7), init_policy(&g, 256, 256, 7));
    assert_ne!(init_policy(&g, 16, 16, 7), init_policy(&g, 16, 16, 8));
}

#[test]
fn fresh_policy_is_near_uniform() {
    let g = grammar2();
    let v = g.len() as f64;
    for seed in 0..5 {
        let probs = first_step_probs(&init_policy(&g, 256, 256, seed));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&p| p >= 0.5 / v && p <= 2.0 / v), "{probs:?}");
    }
}

#[test]
fn uniform_policy_sequence_probability() {
    let g = grammar2();
    assert_eq!(g.len(), 14);
    let p = PolicyParams::zeros(g.len(), 8, 8);
    let seq = RuleSequence(vec![0, 2, 5, 1, 3, 4]);
    let lp = sequence_logprobs(&p, &[seq])[0];
    assert!((lp - 6.0 * (1.0f64 / 14.0).ln()).abs() < 1e-12);
}

#[test]
fn sampled_logprobs_match_teacher_forcing() {
    let g = grammar2();
    let p = init_policy(&g, 32, 32, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = sample_sequences(&p, &g, 100, 20, SampleMode::Categorical, &mut rng);
    let again = sequence_logprobs(&p, &batch.sequences);
    for (i, (a, b)) in batch.logprobs.iter().zip(&again).enumerate() {
        assert!(*a <= 0.0 && a.exp() > 0.0 && a.exp() <= 1.0);
        assert!((a - b).abs() < 1e-12, "{a} {b}");
        let s = &batch.sequences[i];
        assert!(s.len() == 20 || g.to_system(s).is_complete());
    }
}

#[test]
fn greedy_sampling_is_deterministic() {
    let g = grammar2();
    let p = init_policy(&g, 16, 16, 4);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    let a = sample_sequences(&p, &g, 3, 20, SampleMode::Greedy, &mut r1);
    let b = sample_sequences(&p, &g, 3, 20, SampleMode::Greedy, &mut r2);
    assert_eq!(a.sequences, b.sequences);
    assert!(a.sequences.iter().all(|s| s == &a.sequences[0]));
}

#[test]
fn gradient_matches_finite_differences() {
    let g = grammar2();
    let p = init_policy(&g, 256, 256, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seq = sample_sequences(&p, &g, 1, 20, SampleMode::Categorical, &mut rng).sequences[0].clone();
    let (_, grad) = logprob_and_grad(&p, &seq).unwrap();
    let lp = |q: &PolicyParams| sequence_logprobs(q, std::slice::from_ref(&seq))[0];
    // Fourth-order stencil: a large step keeps roundoff in the ~50-nat
    // log-probability well below the smallest gradients sampled.
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.random_range(0..p.len());
        let at = |d: f64| {
            let mut q = p.clone();
            q.set(i, p.get(i) + d);
            lp(&q)
        };
        let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        worst = worst.max(rel_err(grad.get(i), fd));
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn output_bias_gradient_of_single_step() {
    let g = bandit();
    let p = PolicyParams::zeros(g.len(), 4, 4);
    let (_, grad) = logprob_and_grad(&p, &RuleSequence(vec![1])).unwrap();
    let u = 1.0 / g.len() as f64;
    for k in 0..g.len() {
        let want = if k == 1 { 1.0 - u } else { -u };
        assert!((grad.b_out[k] - want).abs() < 1e-15);
    }
}

#[test]
fn gradients_add_over_sequences() {
    let g = grammar2();
    let p = init_policy(&g, 16, 16, 3);
    let seq = RuleSequence(vec![0, 9, 12, 10]);
    let (_, one) = logprob_and_grad(&p, &seq).unwrap();
    let (_, two) = weighted_logprob_grad(&p, &[seq.clone(), seq], &[1.0, 1.0]).unwrap();
    for i in 0..p.len() {
        assert!((two.get(i) - 2.0 * one.get(i)).abs() <= 1e-12 * one.get(i).abs().max(1.0));
    }
}

#[test]
fn equal_rewards_leave_params_untouched() {
    let g = grammar2();
    let mut p = init_policy(&g, 16, 16, 3);
    let before = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = sample_sequences(&p, &g, 10, 20, SampleMode::Categorical, &mut rng);
    batch.rewards = vec![0.37; 10];
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let mut opt = Optimizer::new(kind, &p);
        reinforce_update(&mut p, &mut opt, &batch, 0.009, 5.0).unwrap();
        assert_eq!(p, before);
    }
}

#[test]
fn two_sequence_update_direction() {
    let g = grammar2();
    let p = init_policy(&g, 16, 16, 5);
    let (s1, s2) = (RuleSequence(vec![0, 8, 12, 9]), RuleSequence(vec![13, 10]));
    let batch = SampledBatch {
        sequences: vec![s1.clone(), s2.clone()],
        logprobs: vec![0.0; 2],
        rewards: vec![1.0, 0.0],
    };
    let (est, b) = policy_gradient(&p, &batch).unwrap();
    assert_eq!(b, 0.5);
    let (_, g1) = logprob_and_grad(&p, &s1).unwrap();
    let (_, g2) = logprob_and_grad(&p, &s2).unwrap();
    for i in 0..p.len() {
        let want = 0.25 * (g1.get(i) - g2.get(i));
        assert!((est.get(i) - want).abs() <= 1e-12 * want.abs().max(1e-3));
    }
    // Plain ascent moves the parameters by exactly lr times the estimate.
    let mut q = p.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &q);
    let stats = reinforce_update(&mut q, &mut opt, &batch, 0.01, 1e9).unwrap();
    assert!(!stats.clipped);
    for i in (0..p.len()).step_by(97) {
        assert!(((q.get(i) - p.get(i)) - 0.01 * est.get(i)).abs() < 1e-15);
    }
}

#[test]
fn reward_offsets_do_not_change_the_estimate() {
    let g = grammar2();
    let p = init_policy(&g, 16, 16, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch = sample_sequences(&p, &g, 8, 20, SampleMode::Categorical, &mut rng);
    batch.rewards = (0..8).map(|i| i as f64 / 8.0).collect();
    let (a, _) = policy_gradient(&p, &batch).unwrap();
    batch.rewards.iter_mut().for_each(|r| *r += 0.25);
    let (b, _) = policy_gradient(&p, &batch).unwrap();
    for i in 0..p.len() {
        assert!((a.get(i) - b.get(i)).abs() < 1e-12);
    }
}

#[test]
fn large_gradients_are_clipped() {
    let g = grammar2();
    let mut p = init_policy(&g, 16, 16, 6);
    let batch = SampledBatch {
        sequences: vec![RuleSequence(vec![0; 20]), RuleSequence(vec![13])],
        logprobs: vec![0.0; 2],
        rewards: vec![1e6, 0.0],
    };
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &p);
    let before = p.clone();
    let stats = reinforce_update(&mut p, &mut opt, &batch, 1.0, 5.0).unwrap();
    assert!(stats.clipped);
    let mut delta = p.clone();
    delta.add_scaled(&before, -1.0);
    assert!((delta.norm() - 5.0).abs() < 1e-9);
}

/// Trains the three-rule bandit and returns the rewarded rule's probability
/// after each update, plus the mean batch reward of each update.
fn train_bandit(seed: u64, updates: usize) -> (Vec<f64>, Vec<f64>) {
    let g = bandit();
    let target = 1;
    let cfg = DecoderConfig::default();
    let mut p = init_policy(&g, cfg.d_emb, cfg.d_hidden, seed);
    let mut opt = Optimizer::new(cfg.optimizer, &p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let (mut probs, mut rewards) = (Vec::new(), Vec::new());
    for _ in 0..updates {
        let mut batch = sample_sequences(&p, &g, cfg.batch, 1, SampleMode::Categorical, &mut rng);
        batch.rewards = batch.sequences.iter().map(|s| (s.0[0] == target) as u8 as f64).collect();
        let stats = reinforce_update(&mut p, &mut opt, &batch, cfg.lr, cfg.clip_norm).unwrap();
        rewards.push(stats.mean_reward);
        probs.push(first_step_probs(&p)[target]);
        assert!(p.all_finite());
    }
    (probs, rewards)
}

#[test]
fn bandit_learns_the_rewarded_rule() {
    let mut wins = 0;
    let mut improved = 0;
    for seed in 0..10 {
        // Far fewer than the 200 allowed updates are needed.
        let (probs, rewards) = train_bandit(seed, 40);
        if probs.iter().any(|&p| p > 0.9) {
            wins += 1;
        }
        let first: f64 = rewards[..10].iter().sum();
        let last: f64 = rewards[rewards.len() - 10..].iter().sum();
        if last > first {
            improved += 1;
        }
    }
    assert!(wins >= 9, "{wins}/10");
    assert!(improved >= 8, "{improved}/10");
}
