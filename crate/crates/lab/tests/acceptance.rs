//! Acceptance suite: every primary criterion at its stated tolerance.
//!
//! Prints one `criterion N PASS|FAIL` line per criterion, then fails if any
//! criterion failed. Run with `--nocapture` to see the lines.

use std::time::{Duration, Instant};

use icq_core::approx::{Activation, DenseNet, LayerShape, MixerGrads, MixerParams};
use icq_core::operators::{
    bcq_target, expected_value, icq_target, lambda_icq_targets, one_step_icq_targets, BatchStats,
};
use icq_core::rng::{seeded, LabRng};
use icq_core::{PolicyTable, QTable, Step, Trajectory};
use icq_lab::{run_experiment, run_suite, ExperimentConfig, ExperimentReport, Suite};
use rand::Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn experiment(name: &str, learners: &str, out: &std::path::Path) -> ExperimentReport {
    let json = format!(
        r#"{{
  "name": "{name}",
  "environments": [
    {{"mmdp": {{"num_agents": 1}}}}, {{"mmdp": {{"num_agents": 2}}}}, {{"mmdp": {{"num_agents": 4}}}}
  ],
  "dataset": {{"collect": {{"num_trajectories": 32, "expert_count": 4}}}},
  "learners": [{learners}],
  "seeds": [1, 2, 3, 4, 5]
}}"#
    );
    let config =
        ExperimentConfig::from_json(&json, std::path::Path::new("acceptance.json")).unwrap();
    run_experiment(&config, Some(out)).unwrap()
}

fn criterion1(report: &ExperimentReport, elapsed: Duration) -> Verdict {
    let mut icq_bad = Vec::new();
    for r in report.runs.iter().filter(|r| r.learner == "icq-ma") {
        let truth = r.metrics.true_value;
        let (lo, hi) = (r.metrics.min_q_estimate(), r.metrics.max_q_estimate());
        if lo < 0.0 || hi > 1.5 * truth {
            icq_bad.push(format!(
                "{} seed {} q in [{lo:.2}, {hi:.2}] vs true {truth:.2}",
                r.environment, r.seed
            ));
        }
    }
    let bcq: Vec<_> = report
        .runs
        .iter()
        .filter(|r| r.learner == "bcq-ma" && r.environment == "mmdp-n4")
        .collect();
    let diverged = bcq.iter().filter(|r| r.metrics.diverged()).count();
    let bcq_peak = bcq
        .iter()
        .map(|r| format!("{:.1}", r.metrics.max_q_estimate()))
        .collect::<Vec<_>>()
        .join(", ");
    let in_budget = elapsed < Duration::from_secs(600);
    verdict(
        icq_bad.is_empty() && diverged >= 4 && in_budget,
        format!(
            "icq-ma out of range on {} runs{}; bcq-ma n=4 diverged on {diverged}/5 (peak q {bcq_peak}, true {:.2}); {:.1}s",
            icq_bad.len(),
            if icq_bad.is_empty() { String::new() } else { format!(" ({})", icq_bad.join("; ")) },
            bcq.first().map_or(f64::NAN, |r| r.metrics.true_value),
            elapsed.as_secs_f64()
        ),
    )
}

fn suite_verdict(suite: Suite, budget: Option<Duration>) -> Verdict {
    let start = Instant::now();
    let report = run_suite(suite, None, 0).unwrap();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed < b);
    let failures: Vec<String> = report
        .instances
        .iter()
        .filter(|i| !i.passed)
        .take(3)
        .map(|i| format!("#{} {}", i.instance, i.detail))
        .collect();
    verdict(
        report.all_passed() && in_budget,
        format!(
            "{}/{} instances in {:.2}s{}",
            report.passed(),
            report.instances.len(),
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; {}", failures.join("; "))
            }
        ),
    )
}

fn random_mu_row(rng: &mut LabRng, na: usize, allow_zero: bool) -> Vec<f64> {
    let mut row: Vec<f64> = (0..na)
        .map(|_| {
            if allow_zero && rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.05..1.0)
            }
        })
        .collect();
    if row.iter().all(|&p| p == 0.0) {
        row[rng.random_range(0..na)] = 1.0;
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

fn criterion6() -> Verdict {
    let mut rng = seeded(606);
    let (mut worst_greedy, mut worst_sarsa) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let na = rng.random_range(2..=8);
        let q = QTable::from_values(
            1,
            na,
            (0..na).map(|_| rng.random_range(-10.0..10.0)).collect(),
        );
        let mu = random_mu_row(&mut rng, na, true);
        let stats = BatchStats::from_behavior(PolicyTable::new(1, na, mu.clone()).unwrap());
        let greedy = bcq_target(&q, stats.seen_mask(), 0).unwrap();
        let sharp = icq_target(&q, &stats, 0, 1e-9).unwrap();
        let flat = icq_target(&q, &stats, 0, 1e9).unwrap();
        worst_greedy = worst_greedy.max((sharp - greedy).abs());
        worst_sarsa = worst_sarsa.max((flat - expected_value(q.row(0), &mu)).abs());
    }
    verdict(
        worst_greedy < 1e-6 && worst_sarsa < 1e-6,
        format!("max |icq(1e-9) - bcq| = {worst_greedy:.2e}, max |icq(1e9) - sarsa| = {worst_sarsa:.2e}"),
    )
}

fn criterion7() -> Verdict {
    let mut rng = seeded(707);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ns = rng.random_range(2..=6);
        let na = rng.random_range(2..=8);
        let q = QTable::from_values(
            ns,
            na,
            (0..ns * na).map(|_| rng.random_range(-5.0..5.0)).collect(),
        );
        let probs: Vec<f64> = (0..ns)
            .flat_map(|_| random_mu_row(&mut rng, na, false))
            .collect();
        let stats = BatchStats::from_behavior(PolicyTable::new(ns, na, probs).unwrap());
        let len = rng.random_range(1..=20);
        let truncated = rng.random_bool(0.5);
        let mut state = rng.random_range(0..ns);
        let steps = (0..len)
            .map(|t| {
                let next_state = rng.random_range(0..ns);
                let step = Step {
                    state,
                    action: rng.random_range(0..na),
                    reward: rng.random_range(-1.0..1.0),
                    next_state,
                    done: t + 1 == len && !truncated,
                };
                state = next_state;
                step
            })
            .collect();
        let traj = Trajectory {
            steps,
            behavior_probs: None,
        };
        let alpha = rng.random_range(0.1..10.0);
        let gamma = rng.random_range(0.5..0.99);
        let lam = lambda_icq_targets(&traj, &q, &stats, alpha, 0.0, gamma).unwrap();
        let one = one_step_icq_targets(&traj, &q, &stats, alpha, gamma).unwrap();
        assert_eq!(lam.len(), one.len());
        for (a, b) in lam.iter().zip(&one) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst <= 1e-12,
        format!("max step difference {worst:.2e} over 100 trajectories"),
    )
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

const FD_STEP: f64 = 1e-6;

fn dense_gradient_error(rng: &mut LabRng) -> f64 {
    let depth = rng.random_range(1..=3);
    let hidden = [Activation::Relu, Activation::Identity, Activation::Abs];
    let output = [
        Activation::Identity,
        Activation::SoftmaxRow,
        Activation::Abs,
        Activation::Relu,
    ];
    let mut width = rng.random_range(1..=5);
    let mut shapes = Vec::new();
    for l in 0..depth {
        let outputs = rng.random_range(1..=6);
        let activation = if l + 1 == depth {
            output[rng.random_range(0..output.len())]
        } else {
            hidden[rng.random_range(0..hidden.len())]
        };
        shapes.push(LayerShape {
            inputs: width,
            outputs,
            activation,
        });
        width = outputs;
    }
    let mut net = DenseNet::random(&shapes, rng).unwrap();
    let input: Vec<f64> = (0..net.input_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let coef: Vec<f64> = (0..net.output_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = |net: &DenseNet| -> f64 {
        net.forward(&input)
            .unwrap()
            .iter()
            .zip(&coef)
            .map(|(o, c)| o * c)
            .sum()
    };
    let cache = net.forward_cached(&input).unwrap();
    let mut grads = vec![0.0; net.param_count()];
    net.backward(&cache, &coef, &mut grads).unwrap();
    let mut worst = 0.0f64;
    for (k, &analytic) in grads.iter().enumerate() {
        let base = net.params()[k];
        net.params_mut()[k] = base + FD_STEP;
        let up = loss(&net);
        net.params_mut()[k] = base - FD_STEP;
        let down = loss(&net);
        net.params_mut()[k] = base;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn mixer_param(m: &mut MixerParams, which: usize, k: usize) -> &mut f64 {
    let net = if which == 0 {
        &mut m.hyper_w
    } else {
        &mut m.hyper_b
    };
    &mut net.params_mut()[k]
}

fn mixer_gradient_error(rng: &mut LabRng) -> f64 {
    let state_dim = rng.random_range(1..=5);
    let agents = rng.random_range(1..=4);
    let hidden = rng.random_range(1..=8);
    let mut mixer = MixerParams::new(state_dim, agents, hidden, rng).unwrap();
    let state: Vec<f64> = (0..state_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let per_agent: Vec<f64> = (0..agents).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target = rng.random_range(-3.0..3.0);
    let loss =
        |m: &MixerParams| -> f64 { (m.combine(&state, &per_agent).unwrap() - target).powi(2) };

    let cache = mixer.forward_cached(&state).unwrap();
    let g = 2.0 * (mixer.combine(&state, &per_agent).unwrap() - target);
    let grad_w: Vec<f64> = per_agent.iter().map(|q| g * q).collect();
    let mut grads = MixerGrads::zeros(&mixer);
    mixer.backward(&cache, &grad_w, g, &mut grads).unwrap();

    let mut worst = 0.0f64;
    for which in 0..2 {
        let analytic = if which == 0 {
            grads.hyper_w.clone()
        } else {
            grads.hyper_b.clone()
        };
        for (k, a) in analytic.into_iter().enumerate() {
            let base = *mixer_param(&mut mixer, which, k);
            *mixer_param(&mut mixer, which, k) = base + FD_STEP;
            let up = loss(&mixer);
            *mixer_param(&mut mixer, which, k) = base - FD_STEP;
            let down = loss(&mixer);
            *mixer_param(&mut mixer, which, k) = base;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn criterion8() -> Verdict {
    let mut rng = seeded(808);
    let dense = (0..10)
        .map(|_| dense_gradient_error(&mut rng))
        .fold(0.0, f64::max);
    let mixer = (0..10)
        .map(|_| mixer_gradient_error(&mut rng))
        .fold(0.0, f64::max);
    verdict(
        dense < 1e-4 && mixer < 1e-4,
        format!("max relative error: dense nets {dense:.2e}, mixers {mixer:.2e} (10 architectures each)"),
    )
}

fn criterion10(icq_ma: &ExperimentReport, icq: &ExperimentReport) -> Verdict {
    let runs: Vec<_> = icq_ma
        .runs
        .iter()
        .filter(|r| r.learner == "icq-ma")
        .chain(icq.runs.iter())
        .collect();
    let dirty: Vec<String> = runs
        .iter()
        .filter(|r| r.unseen_reads > 0)
        .map(|r| {
            format!(
                "{} {} seed {}: {}",
                r.environment, r.learner, r.seed, r.unseen_reads
            )
        })
        .collect();
    verdict(
        dirty.is_empty(),
        format!(
            "{} full runs, {} with unseen target reads{}",
            runs.len(),
            dirty.len(),
            if dirty.is_empty() {
                String::new()
            } else {
                format!(" ({})", dirty.join("; "))
            }
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();

    let start = Instant::now();
    let main = experiment(
        "divergence",
        r#"{"algorithm": "icq-ma"}, {"algorithm": "bcq-ma", "zeta": 0.3}"#,
        dir.path(),
    );
    let main_elapsed = start.elapsed();
    let single = experiment("single-agent-icq", r#"{"algorithm": "icq"}"#, dir.path());

    let verdicts = [
        criterion1(&main, main_elapsed),
        suite_verdict(Suite::Theorem1, Some(Duration::from_secs(30))),
        suite_verdict(Suite::Theorem2, Some(Duration::from_secs(30))),
        suite_verdict(Suite::Lemma1, None),
        suite_verdict(Suite::Theorem3, None),
        criterion6(),
        criterion7(),
        criterion8(),
        suite_verdict(Suite::Remark1, None),
        criterion10(&main, &single),
    ];
    let mut failed = Vec::new();
    for (i, v) in verdicts.iter().enumerate() {
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {} {status}: {}", i + 1, v.detail);
        if !v.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
