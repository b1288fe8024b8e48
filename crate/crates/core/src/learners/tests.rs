use proptest::prelude::*;
use rand::Rng;

use super::decomposition::{agent_weights, decomposed_policy_loss, joint_policy_loss, LossCase};
use super::*;
use crate::dataset::collect_mmdp_dataset;
use crate::mdp::{build_mmdp, MmdpSpec, PolicyTable, TAU1, TAU2};
use crate::qtable::QTable;
use crate::rng::seeded;

fn mmdp_case(n: usize, expert: usize, seed: u64) -> (OfflineDataset, TabularMdp) {
    let spec = MmdpSpec::new(n);
    (
        collect_mmdp_dataset(&spec, 32, expert, seed).unwrap(),
        build_mmdp(&spec).unwrap(),
    )
}

fn quick(algorithm: Algorithm, steps: usize) -> LearnerConfig {
    let mut c = LearnerConfig::new(algorithm);
    c.total_steps = steps;
    c.log_every = steps.max(1);
    c
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn singleton_minibatch_ratio_is_one() {
    let q = QTable::from_values(1, 3, vec![4.0, -2.0, 7.5]);
    let z = compute_z(&[(0, 2)], &q, None, 0.3, ZMode::MinibatchSoftmax).unwrap();
    assert_eq!(z.rho(0, 7.5, 0.3), 1.0);
}

#[test]
fn behavior_normalizer_matches_direct_sum() {
    let q = QTable::from_values(2, 3, vec![1.0, 2.0, 0.5, -1.0, 3.0, 2.0]);
    let mu = PolicyTable::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap();
    let alpha = 0.7;
    let z = compute_z(
        &[(0, 1), (1, 0)],
        &q,
        Some(&mu),
        alpha,
        ZMode::BehaviorModel,
    )
    .unwrap();
    for (i, s) in [0usize, 1].into_iter().enumerate() {
        let direct: f64 = (0..3)
            .map(|a| mu.prob(s, a).unwrap() * (q.get(s, a) / alpha).exp())
            .sum();
        assert!((z.z(i) - direct).abs() < 1e-12 * direct);
    }
}

#[test]
fn both_normalizers_agree_on_one_state_batches() {
    let q = QTable::from_values(1, 4, vec![0.5, 2.0, -1.0, 1.5]);
    let probs = vec![0.1, 0.4, 0.3, 0.2];
    let mu = PolicyTable::new(1, 4, probs.clone()).unwrap();
    let mut rng = seeded(11);
    let batch: Vec<(usize, usize)> = (0..20_000)
        .map(|_| (0, crate::rng::sample_index(&mut rng, &probs)))
        .collect();
    let a = compute_z(&batch, &q, Some(&mu), 1.0, ZMode::BehaviorModel).unwrap();
    let b = compute_z(&batch, &q, None, 1.0, ZMode::MinibatchSoftmax).unwrap();
    assert!((a.z(0) - b.z(0)).abs() / a.z(0) < 0.05);
}

#[test]
fn normalizer_errors() {
    let q = QTable::zeros(2, 2);
    assert!(matches!(
        compute_z(&[], &q, None, 1.0, ZMode::MinibatchSoftmax),
        Err(LearnerError::EmptyBatch)
    ));
    assert!(matches!(
        compute_z(&[(0, 0)], &q, None, 1.0, ZMode::BehaviorModel),
        Err(LearnerError::MissingBehavior)
    ));
    let mu = PolicyTable::with_defined(2, 2, vec![0.5, 0.5, 0.0, 0.0], vec![true, false]).unwrap();
    assert!(matches!(
        compute_z(&[(1, 0)], &q, Some(&mu), 1.0, ZMode::BehaviorModel),
        Err(LearnerError::UndefinedBehavior { state: 1 })
    ));
}

#[test]
fn penalty_gradient_vanishes_at_constant_q_with_uniform_behavior() {
    let q = vec![vec![3.0; 4], vec![3.0; 4]];
    let mu = vec![vec![0.25; 4], vec![0.25; 4]];
    let pen = cql_penalty(&q, &[0.7, 1.3], 0.4, &mu);
    for row in &pen.grad_q {
        assert!(row.iter().all(|g| g.abs() < 1e-12));
    }
    assert!(pen.grad_w.iter().all(|g| g.abs() < 1e-12));
    // each agent's log-sum-exp exceeds its share of E_mu Q by log |A|
    let expected = 2.0 * 4f64.ln() + 0.4;
    assert!((pen.value - expected).abs() < 1e-12);
}

#[test]
fn penalty_gradients_match_finite_differences() {
    let mut rng = seeded(5);
    let q: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
    let b = 0.3;
    let mu = vec![
        vec![0.2, 0.5, 0.3],
        vec![1.0, 0.0, 0.0],
        vec![0.3, 0.3, 0.4],
    ];
    let pen = cql_penalty(&q, &w, b, &mu);
    let h = 1e-6;
    for i in 0..3 {
        for a in 0..3 {
            let (mut up, mut down) = (q.clone(), q.clone());
            up[i][a] += h;
            down[i][a] -= h;
            let num = (cql_penalty(&up, &w, b, &mu).value - cql_penalty(&down, &w, b, &mu).value)
                / (2.0 * h);
            assert!((num - pen.grad_q[i][a]).abs() < 1e-6);
        }
        let (mut up, mut down) = (w.clone(), w.clone());
        up[i] += h;
        down[i] -= h;
        let num =
            (cql_penalty(&q, &up, b, &mu).value - cql_penalty(&q, &down, b, &mu).value) / (2.0 * h);
        assert!((num - pen.grad_w[i]).abs() < 1e-6);
    }
    let num =
        (cql_penalty(&q, &w, b + h, &mu).value - cql_penalty(&q, &w, b - h, &mu).value) / (2.0 * h);
    assert!((num - pen.grad_b).abs() < 1e-6);
}

fn random_case(rng: &mut crate::rng::LabRng, n: usize, k: usize) -> LossCase {
    let dist = |rng: &mut crate::rng::LabRng| {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect::<Vec<f64>>()
    };
    LossCase {
        q: (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect(),
        weights: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
        bias: rng.random_range(-3.0..3.0),
        mu: (0..n).map(|_| dist(rng)).collect(),
        pi: (0..n).map(|_| dist(rng)).collect(),
        alpha: rng.random_range(0.2..5.0),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_loss_splits_into_agent_losses(seed in any::<u64>(), n in 2usize..=3) {
        let case = random_case(&mut seeded(seed), n, 2);
        let joint = joint_policy_loss(&case);
        let split = decomposed_policy_loss(&case);
        prop_assert!((joint - split).abs() < 1e-10, "{joint} vs {split}");
    }

    #[test]
    fn agent_weights_are_a_density_under_behavior(seed in any::<u64>()) {
        let case = random_case(&mut seeded(seed), 1, 4);
        let w = agent_weights(&case.q[0], case.weights[0], &case.mu[0], case.alpha);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        let mass: f64 = w.iter().zip(&case.mu[0]).map(|(w, m)| w * m).sum();
        prop_assert!((mass - 1.0).abs() < 1e-10);
    }
}

#[test]
fn large_alpha_policy_gradient_aligns_with_cloning() {
    let (ds, _) = mmdp_case(1, 4, 3);
    let mut config = quick(Algorithm::Icq, 0);
    config.alpha = 1e12;
    let mut learner = IcqLearner::new(&ds, config).unwrap();
    let mut rng = seeded(1);
    let mut audit = TargetAudit::new(ds.num_states(), ds.num_joint_actions());
    for _ in 0..300 {
        learner.train_step(&mut rng, &mut audit).unwrap();
    }
    assert!(learner.critic_table().unwrap().max_abs() > 0.0);
    let probe: Vec<(usize, usize)> = ds
        .transitions()
        .take(64)
        .map(|s| (s.state, s.action))
        .collect();
    let g = learner.policy_gradient(&probe).unwrap();
    let bc = learner.bc_gradient(&probe).unwrap();
    assert!(cosine(&g, &bc) > 0.999);
}

#[test]
fn expert_only_single_agent_reaches_horizon() {
    let (ds, env) = mmdp_case(1, 32, 4);
    let out = train_icq(&ds, &env, &quick(Algorithm::Icq, 1500)).unwrap();
    assert!(out.metrics.last().unwrap().eval_return >= 0.95 * env.horizon() as f64);
}

#[test]
fn zero_reward_critic_stays_at_zero() {
    let (ds, env) = mmdp_case(2, 4, 5);
    let trajectories = ds
        .trajectories()
        .iter()
        .cloned()
        .map(|mut t| {
            for s in &mut t.steps {
                s.reward = 0.0;
            }
            t
        })
        .collect();
    let zero = OfflineDataset::new(*ds.header(), trajectories).unwrap();
    for algorithm in [Algorithm::Icq, Algorithm::IcqMa] {
        let out = train(&zero, &env, &quick(algorithm, 300), &mut |_| {}).unwrap();
        for r in &out.metrics.records {
            assert!(
                r.q_estimate.unwrap().abs() < 1e-3,
                "{algorithm}: {:?}",
                r.q_estimate
            );
        }
    }
}

#[test]
fn zero_mixing_weights_reduce_policy_loss_to_cloning() {
    let (ds, _) = mmdp_case(2, 4, 6);
    let mut learner = IcqMaLearner::new(&ds, quick(Algorithm::IcqMa, 0)).unwrap();
    learner.freeze_zero_mixer_weights().unwrap();
    let mut rng = seeded(2);
    let mut audit = TargetAudit::new(ds.num_states(), ds.num_joint_actions());
    for _ in 0..50 {
        learner.train_step(&mut rng, &mut audit).unwrap();
    }
    let probe: Vec<(usize, usize)> = ds
        .transitions()
        .take(100)
        .map(|s| (s.state, s.action))
        .collect();
    let weights = learner.policy_weights(&probe).unwrap();
    assert!(weights.iter().flatten().all(|w| *w == 1.0));
    assert_eq!(
        learner.policy_gradient(&probe).unwrap(),
        learner.bc_gradient(&probe).unwrap()
    );
}

#[test]
fn decentralized_policies_ignore_other_agents() {
    let (ds, _) = mmdp_case(2, 4, 7);
    let learner = IcqMaLearner::new(&ds, quick(Algorithm::IcqMa, 0)).unwrap();
    let before = learner.policy_probs(0, TAU2).unwrap();
    let mut ckpt = learner.checkpoint();
    // perturbing agent 1's network cannot change agent 0's outputs
    for p in ckpt.policies[1].params_mut() {
        *p += 1.0;
    }
    let out = ckpt.policies[0]
        .forward(&crate::approx::one_hot(TAU2, 2))
        .unwrap();
    let logp = super::common::log_softmax_rows(&out, 2);
    let after: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    assert_eq!(before, after);
}

#[test]
fn icq_ma_two_agents_keeps_estimates_below_horizon() {
    let (ds, env) = mmdp_case(2, 4, 1);
    let out = train_icq_ma(&ds, &env, &LearnerConfig::new(Algorithm::IcqMa)).unwrap();
    let max_q = out.metrics.max_q_estimate();
    assert!(
        (0.0..=env.horizon() as f64).contains(&max_q),
        "max q {max_q}"
    );
    assert!(out.metrics.min_q_estimate() >= 0.0);
    assert!(out.audit.total_reads() > 0);
    assert!(out.audit.unseen_reads(&ds).is_empty());
}

#[test]
fn icq_ma_two_agents_recovers_expert_return() {
    let env = build_mmdp(&MmdpSpec::new(2)).unwrap();
    let expert = monte_carlo_return(&env);
    let returns: Vec<f64> = (1..=5)
        .map(|seed| {
            let (ds, _) = mmdp_case(2, 4, seed);
            let mut config = LearnerConfig::new(Algorithm::IcqMa);
            config.seed = seed;
            train_icq_ma(&ds, &env, &config)
                .unwrap()
                .metrics
                .last()
                .unwrap()
                .eval_return
        })
        .collect();
    assert!(
        returns.iter().all(|r| *r >= 0.85 * expert),
        "expert {expert}, returns {returns:?}"
    );
}

fn monte_carlo_return(env: &TabularMdp) -> f64 {
    let episodes = crate::mdp::rollout(env, &env.optimal_policy(), 7, 10).unwrap();
    episodes.iter().map(|t| t.total_reward()).sum::<f64>() / episodes.len() as f64
}

#[test]
fn single_agent_targets_never_read_unseen_pairs() {
    // five agents and few trajectories leave most joint actions unseen
    let spec = MmdpSpec::new(5);
    let ds = collect_mmdp_dataset(&spec, 4, 1, 8).unwrap();
    let env = build_mmdp(&spec).unwrap();
    assert!(ds.num_seen_pairs() < ds.num_states() * ds.num_joint_actions());
    for z_mode in [ZMode::BehaviorModel, ZMode::MinibatchSoftmax] {
        let mut config = quick(Algorithm::Icq, 400);
        config.z_mode = Some(z_mode);
        let out = train(&ds, &env, &config, &mut |_| {}).unwrap();
        assert!(out.audit.total_reads() > 0);
        assert!(out.audit.unseen_reads(&ds).is_empty());
    }
}

#[test]
fn familiarity_threshold_extremes() {
    let (ds, _) = mmdp_case(2, 4, 9);
    let mut config = quick(Algorithm::BcqMa, 0);
    config.zeta = 0.0;
    let open = BcqMaLearner::new(&ds, config.clone()).unwrap();
    config.zeta = 1.0;
    let strict = BcqMaLearner::new(&ds, config).unwrap();
    let behavior = ds.estimate_behavior().unwrap();
    for agent in 0..2 {
        for state in [TAU1, TAU2] {
            assert!(open.familiar(agent, state).iter().all(|f| *f));
            let counts = behavior.agent_counts(agent, state);
            let max = *counts.iter().max().unwrap();
            let expected: Vec<bool> = counts.iter().map(|&c| c == max).collect();
            assert_eq!(strict.familiar(agent, state), expected.as_slice());
        }
    }
}

#[test]
fn cloning_expert_data_reaches_horizon_and_degrades_with_quality() {
    let returns: Vec<f64> = [32, 8, 0]
        .into_iter()
        .map(|expert| {
            let (ds, env) = mmdp_case(2, expert, 10);
            train_bc_ma(&ds, &env, &quick(Algorithm::BcMa, 1500))
                .unwrap()
                .metrics
                .last()
                .unwrap()
                .eval_return
        })
        .collect();
    assert!(returns[0] >= 95.0, "{returns:?}");
    assert!(
        returns[0] >= returns[1] && returns[1] >= returns[2],
        "{returns:?}"
    );
    assert!(returns[2] < returns[0], "{returns:?}");
}

#[test]
fn every_algorithm_trains_and_checkpoints() {
    let (ds, env) = mmdp_case(2, 4, 12);
    for algorithm in Algorithm::ALL {
        let mut config = quick(algorithm, 60);
        config.log_every = 20;
        let mut seen = Vec::new();
        let out = train(&ds, &env, &config, &mut |r| seen.push(r.step)).unwrap();
        assert_eq!(seen, vec![0, 20, 40, 60]);
        let steps: Vec<usize> = out.metrics.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, seen);
        for r in &out.metrics.records {
            assert!((0.0..=100.0).contains(&r.eval_return));
            assert_eq!(r.q_estimate.is_some(), algorithm.has_critic());
        }
        let text = out.checkpoint.to_json();
        assert_eq!(Checkpoint::from_json(&text).unwrap(), out.checkpoint);
    }
}

#[test]
fn training_is_deterministic() {
    let (ds, env) = mmdp_case(2, 4, 13);
    for algorithm in [Algorithm::IcqMa, Algorithm::CqlMa] {
        let config = quick(algorithm, 80);
        let a = train(&ds, &env, &config, &mut |_| {}).unwrap();
        let b = train(&ds, &env, &config, &mut |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
    }
}

#[test]
fn rejects_mismatched_inputs_and_bad_configs() {
    let (ds, _) = mmdp_case(2, 4, 14);
    let other = build_mmdp(&MmdpSpec::new(3)).unwrap();
    assert!(matches!(
        train(&ds, &other, &quick(Algorithm::IcqMa, 1), &mut |_| {}),
        Err(LearnerError::Mismatch(_))
    ));
    let env = build_mmdp(&MmdpSpec::new(2)).unwrap();
    for edit in [
        (|c: &mut LearnerConfig| c.alpha = 0.0) as fn(&mut LearnerConfig),
        |c| c.zeta = 1.5,
        |c| c.batch_size = 0,
        |c| c.lambda = -0.1,
        |c| c.gamma = 1.0,
    ] {
        let mut config = quick(Algorithm::IcqMa, 1);
        edit(&mut config);
        assert!(matches!(
            train(&ds, &env, &config, &mut |_| {}),
            Err(LearnerError::Config(_))
        ));
    }
    assert!("sarsa".parse::<Algorithm>().is_err());
    assert_eq!("bcq-ma".parse::<Algorithm>().unwrap(), Algorithm::BcqMa);
}

#[test]
fn checkpoint_shape_validation() {
    let (ds, _) = mmdp_case(2, 4, 15);
    let ckpt = BcqMaLearner::new(&ds, quick(Algorithm::BcqMa, 0))
        .unwrap()
        .checkpoint();
    let mut broken = ckpt.clone();
    broken.mixer = None;
    assert!(Checkpoint::from_json(&broken.to_json()).is_err());
    let mut broken = ckpt.clone();
    broken.num_states = 3;
    assert!(Checkpoint::from_json(&broken.to_json()).is_err());
    assert!(Checkpoint::from_json("{\"algorithm\":\"icq\"}").is_err());
    let config: LearnerConfig =
        serde_json::from_str(r#"{"algorithm":"icq-ma","alpha":1000}"#).unwrap();
    assert_eq!(config.alpha, 1000.0);
    assert_eq!(config.resolved_z_mode(), ZMode::MinibatchSoftmax);
    assert!(serde_json::from_str::<LearnerConfig>(r#"{"algorithm":"icq","alhpa":1}"#).is_err());
}
