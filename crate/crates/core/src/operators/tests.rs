use super::*;
use crate::mdp::{build_mmdp, ActionSpace, MmdpSpec, Step, Trajectory, TAU1, TAU2};
use proptest::prelude::*;

fn single_agent_mdp(
    num_states: usize,
    num_actions: usize,
    next: &[usize],
    reward: &[f64],
    gamma: f64,
) -> TabularMdp {
    let mut transition = vec![0.0; num_states * num_actions * num_states];
    for (pair, &n) in next.iter().enumerate() {
        transition[pair * num_states + n] = 1.0;
    }
    TabularMdp::new(
        num_states,
        ActionSpace::single(num_actions),
        transition,
        reward.to_vec(),
        gamma,
        0,
        100,
    )
    .unwrap()
}

/// 3 states x 2 actions, deterministic, rewards in [0, 1].
fn three_state_mdp(gamma: f64) -> TabularMdp {
    single_agent_mdp(
        3,
        2,
        &[1, 2, 0, 2, 1, 0],
        &[0.1, 0.5, 0.0, 1.0, 0.3, 0.2],
        gamma,
    )
}

fn full_support(num_states: usize, rows: &[[f64; 2]]) -> BatchStats {
    let probs = rows.iter().take(num_states).flatten().copied().collect();
    BatchStats::from_behavior(PolicyTable::new(num_states, 2, probs).unwrap())
}

/// Brute-force value iteration restricted to a seen mask.
fn value_iteration_oracle(mdp: &TabularMdp, seen: &[bool]) -> Vec<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_joint_actions());
    let mut q = vec![0.0; ns * na];
    for _ in 0..20_000 {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .filter(|&a| seen[s * na + a])
                    .map(|a| q[s * na + a])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut next = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut total = mdp.reward(s, a);
                for n in 0..ns {
                    let p = mdp.transition(s, a, n);
                    if p > 0.0 {
                        total += mdp.gamma() * p * v[n];
                    }
                }
                next[s * na + a] = total;
            }
        }
        q = next;
    }
    q
}

#[test]
fn constant_q_gives_constant_target() {
    let q = QTable::from_values(1, 2, vec![3.5, 3.5]);
    let stats = full_support(1, &[[0.5, 0.5]]);
    for alpha in [1e-6, 0.3, 1.0, 50.0] {
        assert!((icq_target(&q, &stats, 0, alpha).unwrap() - 3.5).abs() < 1e-12);
    }
}

#[test]
fn two_action_closed_form() {
    let q = QTable::from_values(1, 2, vec![1.0, 0.0]);
    let stats = full_support(1, &[[0.5, 0.5]]);
    let e = std::f64::consts::E;
    let expected = (0.5 * e * 1.0 + 0.5 * 1.0 * 0.0) / (0.5 * e + 0.5);
    let got = icq_target(&q, &stats, 0, 1.0).unwrap();
    assert!((got - expected).abs() < 1e-14);
    assert!((got - 0.7311).abs() < 1e-4);
}

#[test]
fn temperature_limits() {
    let q = QTable::from_values(1, 2, vec![2.0, 5.0]);
    let stats = full_support(1, &[[0.7, 0.3]]);
    assert!((icq_target(&q, &stats, 0, 1e-9).unwrap() - 5.0).abs() < 1e-12);
    let sarsa = 0.7 * 2.0 + 0.3 * 5.0;
    assert!((icq_target(&q, &stats, 0, 1e9).unwrap() - sarsa).abs() < 1e-6);
}

#[test]
fn bcq_target_cases() {
    let q = QTable::from_values(1, 2, vec![2.0, 5.0]);
    assert_eq!(bcq_target(&q, &[true, true], 0).unwrap(), 5.0);
    assert_eq!(bcq_target(&q, &[true, false], 0).unwrap(), 2.0);
    let tie = QTable::from_values(1, 2, vec![3.0, 3.0]);
    assert_eq!(bcq_action(&tie, &[true, true], 0).unwrap(), 0);
    assert_eq!(
        bcq_target(&q, &[false, false], 0),
        Err(OperatorError::NoSeenActions { state: 0 })
    );
}

#[test]
fn icq_without_seen_actions_errors() {
    let mu = PolicyTable::with_defined(2, 2, vec![0.5, 0.5, 0.0, 0.0], vec![true, false]).unwrap();
    let stats = BatchStats::from_behavior(mu);
    let q = QTable::zeros(2, 2);
    assert_eq!(
        icq_target(&q, &stats, 1, 1.0),
        Err(OperatorError::UndefinedBehavior { state: 1 })
    );
}

#[test]
fn zero_reward_zero_table_is_fixed_for_every_kind() {
    let mdp = single_agent_mdp(3, 2, &[1, 2, 0, 2, 1, 0], &[0.0; 6], 0.9);
    let stats = full_support(3, &[[0.5, 0.5], [0.2, 0.8], [0.6, 0.4]]);
    let policy = PolicyTable::uniform(3, 2);
    let backup = Backup::new(&mdp).with_stats(&stats).with_policy(&policy);
    let q = QTable::zeros(3, 2);
    for spec in [
        OperatorSpec::standard(),
        OperatorSpec::importance_sampled(),
        OperatorSpec::icq(0.5),
        OperatorSpec::bcq(),
        OperatorSpec::tree_backup(0.8),
        OperatorSpec::q_lambda(0.8),
        OperatorSpec::icq_lambda(0.5, 0.8),
    ] {
        let next = apply_operator(&spec, &q, &backup).unwrap();
        assert_eq!(next.max_abs(), 0.0, "{spec:?}");
    }
}

#[test]
fn missing_inputs_are_reported() {
    let mdp = three_state_mdp(0.9);
    let q = QTable::zeros(3, 2);
    let backup = Backup::new(&mdp);
    assert_eq!(
        apply_operator(&OperatorSpec::icq(1.0), &q, &backup),
        Err(OperatorError::MissingBehavior)
    );
    assert_eq!(
        apply_operator(&OperatorSpec::standard(), &q, &backup),
        Err(OperatorError::MissingPolicy)
    );
    assert!(matches!(
        apply_operator(&OperatorSpec::standard(), &QTable::zeros(2, 2), &backup),
        Err(OperatorError::DimensionMismatch(_))
    ));
    assert!(OperatorSpec::icq(0.0).validate().is_err());
    assert!(OperatorSpec::tree_backup(1.5).validate().is_err());
}

#[test]
fn small_alpha_sweep_matches_bcq_sweep() {
    let mdp = three_state_mdp(0.9);
    let stats = full_support(3, &[[0.5, 0.5], [0.2, 0.8], [0.6, 0.4]]);
    let backup = Backup::new(&mdp).with_stats(&stats);
    let q = QTable::from_values(3, 2, vec![1.0, 2.0, 0.5, -1.0, 3.0, 3.2]);
    let icq = apply_operator(&OperatorSpec::icq(1e-9), &q, &backup).unwrap();
    let bcq = apply_operator(&OperatorSpec::bcq(), &q, &backup).unwrap();
    assert!(icq.max_norm_diff(&bcq) < 1e-6);
}

#[test]
fn bcq_fixed_point_matches_value_iteration() {
    let mdp = three_state_mdp(0.9);
    let stats = full_support(3, &[[0.5, 0.5], [0.2, 0.8], [0.6, 0.4]]);
    let backup = Backup::new(&mdp).with_stats(&stats);
    let fp = iterate_to_fixpoint(
        &OperatorSpec::bcq(),
        &QTable::zeros(3, 2),
        &backup,
        FixpointOptions {
            tol: 1e-13,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(fp.converged);
    let oracle = value_iteration_oracle(&mdp, &[true; 6]);
    for (a, b) in fp.q.values().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    // residuals contract by gamma after the first sweep
    for pair in fp.residuals.windows(2).skip(1) {
        assert!(pair[1] <= pair[0] + 1e-15);
    }
}

#[test]
fn bcq_fixed_point_respects_partial_mask() {
    let mdp = three_state_mdp(0.9);
    let mu = PolicyTable::new(3, 2, vec![1.0, 0.0, 0.3, 0.7, 0.0, 1.0]).unwrap();
    let stats = BatchStats::from_behavior(mu);
    let backup = Backup::new(&mdp).with_stats(&stats);
    let fp = iterate_to_fixpoint(
        &OperatorSpec::bcq(),
        &QTable::zeros(3, 2),
        &backup,
        FixpointOptions {
            tol: 1e-13,
            ..Default::default()
        },
    )
    .unwrap();
    let oracle = value_iteration_oracle(&mdp, stats.seen_mask());
    for (a, b) in fp.q.values().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn icq_limit_is_bounded() {
    let mdp = three_state_mdp(0.9);
    let stats = full_support(3, &[[0.5, 0.5], [0.2, 0.8], [0.6, 0.4]]);
    let backup = Backup::new(&mdp).with_stats(&stats);
    let bound = q_max(&mdp);
    for alpha in [0.05, 1.0, 100.0] {
        let fp = iterate_to_fixpoint(
            &OperatorSpec::icq(alpha),
            &QTable::zeros(3, 2),
            &backup,
            FixpointOptions::default(),
        )
        .unwrap();
        assert!(fp.q.values().iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn extrapolated_unseen_values_diverge_only_for_unconstrained_backup() {
    let spec = MmdpSpec::new(2);
    let mdp = build_mmdp(&spec).unwrap();
    // joint action 3 = (1,1) keeps the team in tau2; leave it out of the data
    let mut probs = vec![0.25; 8];
    probs[TAU2 * 4 + 3] = 0.0;
    for a in 0..3 {
        probs[TAU2 * 4 + a] = 1.0 / 3.0;
    }
    let stats = BatchStats::from_behavior(PolicyTable::new(2, 4, probs).unwrap());
    let mut pi = vec![0.25; 8];
    pi[TAU2 * 4..TAU2 * 4 + 4].copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
    let policy = PolicyTable::new(2, 4, pi).unwrap();
    let injected = UnseenError {
        additive: 0.0,
        relative: 0.5,
    };
    let backup = Backup::new(&mdp)
        .with_stats(&stats)
        .with_policy(&policy)
        .with_unseen_error(injected);
    let q0 = QTable::filled(2, 4, 1.0);
    let result = iterate_to_fixpoint(
        &OperatorSpec::standard(),
        &q0,
        &backup,
        FixpointOptions::default(),
    );
    match result {
        Err(OperatorError::Diverged { residuals, .. }) => {
            assert!(residuals.last().unwrap() > &residuals[0]);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let icq = iterate_to_fixpoint(
        &OperatorSpec::icq(1.0),
        &q0,
        &backup,
        FixpointOptions::default(),
    );
    assert!(icq.is_ok());
}

#[test]
fn gap_is_zero_with_single_seen_action() {
    let mdp = three_state_mdp(0.9);
    let mu = PolicyTable::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let stats = BatchStats::from_behavior(mu);
    let report = theorem2_gap(&mdp, &stats, 1.0, 50).unwrap();
    assert_eq!(report.gap, 0.0);
    assert_eq!(report.bound, 0.0);
}

#[test]
fn gap_bounded_and_shrinking_with_alpha() {
    let mdp = three_state_mdp(0.9);
    let stats = full_support(3, &[[0.5, 0.5], [0.2, 0.8], [0.6, 0.4]]);
    let mut previous = f64::INFINITY;
    for alpha in [20.0, 5.0, 1.0, 0.5, 0.1] {
        let report = theorem2_gap(&mdp, &stats, alpha, 200).unwrap();
        assert!(report.gap <= report.bound, "alpha={alpha}: {report:?}");
        assert!(report.gap < previous);
        previous = report.gap;
    }
}

fn traj(steps: &[(usize, usize, f64, usize, bool)]) -> Trajectory {
    Trajectory {
        steps: steps
            .iter()
            .map(|&(state, action, reward, next_state, done)| Step {
                state,
                action,
                reward,
                next_state,
                done,
            })
            .collect(),
        behavior_probs: None,
    }
}

#[test]
fn lambda_zero_is_one_step() {
    let q = QTable::from_values(2, 2, vec![0.3, 1.2, -0.4, 2.0]);
    let stats = full_support(2, &[[0.5, 0.5], [0.3, 0.7]]);
    let t = traj(&[
        (0, 1, 1.0, 1, false),
        (1, 0, 0.0, 1, false),
        (1, 1, 0.5, 0, false),
    ]);
    let lam = lambda_icq_targets(&t, &q, &stats, 0.7, 0.0, 0.9).unwrap();
    let one = one_step_icq_targets(&t, &q, &stats, 0.7, 0.9).unwrap();
    assert_eq!(lam, one);
    // hand evaluation of the first target
    let z: f64 = 0.3 * (-0.4f64 / 0.7).exp() + 0.7 * (2.0f64 / 0.7).exp();
    let rho = (-0.4f64 / 0.7).exp() / z;
    assert!((one[0] - (1.0 + 0.9 * rho * -0.4)).abs() < 1e-12);
}

#[test]
fn full_trace_with_unit_ratios_telescopes_to_the_return() {
    // rho -> 1 as alpha -> infinity; a terminal 3-step trajectory
    let q = QTable::from_values(2, 2, vec![0.3, 1.2, -0.4, 2.0]);
    let stats = full_support(2, &[[0.5, 0.5], [0.3, 0.7]]);
    let t = traj(&[
        (0, 1, 1.0, 1, false),
        (1, 0, 0.5, 1, false),
        (1, 1, 2.0, 0, true),
    ]);
    let gamma = 0.9;
    let g = lambda_icq_targets(&t, &q, &stats, 1e12, 1.0, gamma).unwrap();
    let mc = [
        1.0 + gamma * 0.5 + gamma * gamma * 2.0,
        0.5 + gamma * 2.0,
        2.0,
    ];
    for (a, b) in g.iter().zip(&mc) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn zero_td_errors_return_q() {
    // rewards chosen so every TD error vanishes under uniform behavior at large alpha
    let q = QTable::from_values(1, 2, vec![1.0, 1.0]);
    let stats = full_support(1, &[[0.5, 0.5]]);
    let gamma = 0.5;
    let t = traj(&[
        (0, 0, 0.5, 0, false),
        (0, 1, 0.5, 0, false),
        (0, 0, 0.5, 0, false),
    ]);
    for lambda in [0.0, 0.3, 1.0] {
        let g = lambda_icq_targets(&t, &q, &stats, 2.0, lambda, gamma).unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-12), "{g:?}");
    }
}

#[test]
fn policy_trace_estimators() {
    let q = QTable::from_values(2, 2, vec![0.3, 1.2, -0.4, 2.0]);
    let t = traj(&[
        (0, 1, 1.0, 1, false),
        (1, 1, 0.0, 0, false),
        (0, 1, 0.5, 1, false),
    ]);
    let gamma = 0.9;
    let greedy = PolicyTable::greedy(&q);
    // lambda = 0: expected-SARSA and max targets
    let uniform = PolicyTable::uniform(2, 2);
    let tb = tree_backup_targets(&t, &q, &uniform, 0.0, gamma).unwrap();
    assert!((tb[0] - (1.0 + gamma * 0.8)).abs() < 1e-12);
    let ql = q_lambda_targets(&t, &q, &greedy, 0.0, gamma).unwrap();
    assert!((ql[0] - (1.0 + gamma * 2.0)).abs() < 1e-12);
    // greedy actions match the trajectory -> identical estimators
    let tb = tree_backup_targets(&t, &q, &greedy, 0.8, gamma).unwrap();
    let ql = q_lambda_targets(&t, &q, &greedy, 0.8, gamma).unwrap();
    for (a, b) in tb.iter().zip(&ql) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn tree_backup_weights_halve_per_depth_under_uniform_policy() {
    let q = QTable::zeros(1, 2);
    let uniform = PolicyTable::uniform(1, 2);
    let t = traj(&[
        (0, 0, 0.0, 0, false),
        (0, 0, 0.0, 0, false),
        (0, 0, 0.0, 0, false),
        (0, 0, 1.0, 0, true),
    ]);
    // only the final reward is nonzero, so G_t is its correction weight
    let gamma = 0.9;
    let g = tree_backup_targets(&t, &q, &uniform, 1.0, gamma).unwrap();
    for (k, value) in g.iter().rev().enumerate() {
        let expected = (gamma * 0.5f64).powi(k as i32);
        assert!((value - expected).abs() < 1e-9, "depth {k}: {value}");
    }
}

#[test]
fn trace_operators_share_the_policy_fixed_point() {
    let mdp = three_state_mdp(0.9);
    let stats = full_support(3, &[[0.5, 0.5], [0.2, 0.8], [0.6, 0.4]]);
    let pi = PolicyTable::new(3, 2, vec![0.9, 0.1, 0.5, 0.5, 0.3, 0.7]).unwrap();
    let backup = Backup::new(&mdp).with_stats(&stats).with_policy(&pi);
    let options = FixpointOptions {
        tol: 1e-12,
        ..Default::default()
    };
    let q0 = QTable::zeros(3, 2);
    let reference = iterate_to_fixpoint(&OperatorSpec::standard(), &q0, &backup, options).unwrap();
    for spec in [OperatorSpec::tree_backup(0.8), OperatorSpec::q_lambda(0.8)] {
        let fp = iterate_to_fixpoint(&spec, &q0, &backup, options).unwrap();
        assert!(fp.q.max_norm_diff(&reference.q) < 1e-9, "{spec:?}");
        assert!(fp.iterations < reference.iterations);
    }
    let is =
        iterate_to_fixpoint(&OperatorSpec::importance_sampled(), &q0, &backup, options).unwrap();
    assert!(is.q.max_norm_diff(&reference.q) < 1e-9);
    let icq_one = iterate_to_fixpoint(&OperatorSpec::icq(0.7), &q0, &backup, options).unwrap();
    let icq_lambda =
        iterate_to_fixpoint(&OperatorSpec::icq_lambda(0.7, 0.8), &q0, &backup, options).unwrap();
    assert!(icq_one.converged && icq_lambda.converged);
    assert!(icq_lambda.q.max_norm_diff(&icq_one.q) < 1e-8);
}

#[test]
fn mmdp_dataset_targets_stay_on_seen_pairs() {
    let ds = crate::dataset::collect_mmdp_dataset(&MmdpSpec::new(4), 32, 4, 1).unwrap();
    let stats = BatchStats::from_dataset(&ds).unwrap();
    let mut q = QTable::zeros(2, 16);
    // poison every unseen pair; icq targets must not move
    for s in [TAU1, TAU2] {
        for a in 0..16 {
            if !stats.is_seen(s, a) {
                q.set(s, a, 1e12);
            }
        }
    }
    let clean = QTable::zeros(2, 16);
    for s in [TAU1, TAU2] {
        let poisoned = icq_target(&q, &stats, s, 1.0).unwrap();
        assert_eq!(poisoned, icq_target(&clean, &stats, s, 1.0).unwrap());
    }
}

fn row_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (2usize..8)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], n),
                0.01f64..50.0,
            )
        })
        .prop_filter("some behavior mass", |(_, m, _)| m.iter().any(|&x| x > 0.0))
        .prop_map(|(q, m, alpha)| {
            let total: f64 = m.iter().sum();
            (q, m.into_iter().map(|x| x / total).collect(), alpha)
        })
}

proptest! {
    #[test]
    fn softmax_weights_are_distributions_on_seen_actions((q, mu, alpha) in row_strategy()) {
        let f = SoftmaxTarget::new(&q, &mu, alpha).unwrap();
        let sum: f64 = f.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-10);
        for (w, m) in f.weights.iter().zip(&mu) {
            prop_assert!(*w >= 0.0);
            if *m == 0.0 {
                prop_assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn softmax_weights_ignore_constant_shifts((q, mu, alpha) in row_strategy(), c in -100.0f64..100.0) {
        let base = SoftmaxTarget::new(&q, &mu, alpha).unwrap();
        let shifted_q: Vec<f64> = q.iter().map(|v| v + c).collect();
        let shifted = SoftmaxTarget::new(&shifted_q, &mu, alpha).unwrap();
        for (a, b) in base.weights.iter().zip(&shifted.weights) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_grows_with_inverse_temperature((q, mu, alpha) in row_strategy(), factor in 1.0f64..10.0) {
        let warm = icq_row_target(&q, &mu, alpha).unwrap();
        let cold = icq_row_target(&q, &mu, alpha / factor).unwrap();
        prop_assert!(cold >= warm - 1e-9);
    }

    #[test]
    fn softmax_gap_respects_bound((q, mu, alpha) in row_strategy()) {
        let seen: Vec<usize> = (0..q.len()).filter(|&a| mu[a] > 0.0).collect();
        let max = seen.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
        let gap = max - icq_row_target(&q, &mu, alpha).unwrap();
        let table = QTable::from_values(1, q.len(), q.clone());
        let stats = BatchStats::from_behavior(PolicyTable::new(1, q.len(), mu.clone()).unwrap());
        let bound = match ratio_constant(&table, &stats) {
            Some(c) => softmax_gap_bound(seen.len(), c, alpha, table.max_abs()),
            None => 0.0,
        };
        prop_assert!(gap <= bound + 1e-12, "gap {} bound {}", gap, bound);
    }
}
