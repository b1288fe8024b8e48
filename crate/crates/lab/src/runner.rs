//! Runs every (environment, learner, seed) cell of an experiment.

use std::path::{Path, PathBuf};

use icq_core::dataset::{collect_dataset, DatasetHeader};
use icq_core::learners::{reference_value, train, LearnerConfig, TrainMetrics};
use icq_core::{OfflineDataset, TabularMdp};
use rayon::prelude::*;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::csvio::{aggregate, read_metrics, write_aggregate, MetricRow, MetricsWriter};
use crate::error::{LabError, Result};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub environment: String,
    pub learner: String,
    pub seed: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics: TrainMetrics,
    /// Target reads that touched pairs absent from the dataset.
    pub unseen_reads: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub root: PathBuf,
    pub aggregate_path: PathBuf,
    pub runs: Vec<RunOutcome>,
}

struct Cell<'a> {
    env_label: &'a str,
    env: &'a TabularMdp,
    data: &'a OfflineDataset,
    label: &'a str,
    config: LearnerConfig,
    seed: u64,
}

/// Directory an experiment writes into: `<root>/<name>`, with `root`
/// defaulting to the config's output directory.
pub fn experiment_root(config: &ExperimentConfig, output_root: Option<&Path>) -> PathBuf {
    output_root.unwrap_or(&config.output_dir).join(&config.name)
}

/// Loads every environment and dataset, then trains all cells in parallel.
///
/// Inputs are fully materialized before the first cell starts, so a bad
/// dataset or environment fails without partial output.
pub fn run_experiment(
    config: &ExperimentConfig,
    output_root: Option<&Path>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let envs: Vec<(String, TabularMdp)> = config
        .environments
        .iter()
        .map(|e| Ok((e.label(), e.build()?)))
        .collect::<Result<_>>()?;
    // datasets[env][seed]
    let datasets: Vec<Vec<OfflineDataset>> = match &config.dataset {
        DatasetSource::Collect {
            num_trajectories,
            expert_count,
        } => envs
            .iter()
            .map(|(_, env)| {
                config
                    .seeds
                    .iter()
                    .map(|&seed| {
                        Ok(collect_dataset(
                            env,
                            *num_trajectories,
                            *expert_count,
                            seed,
                        )?)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?,
        DatasetSource::Path(path) => {
            let ds = OfflineDataset::load_for(path, &DatasetHeader::for_mdp(&envs[0].1))?;
            vec![vec![ds; config.seeds.len()]]
        }
    };

    let root = experiment_root(config, output_root);
    std::fs::create_dir_all(&root).map_err(|e| LabError::io(&root, e))?;
    let snapshot = root.join("config.json");
    std::fs::write(&snapshot, config.to_json()).map_err(|e| LabError::io(&snapshot, e))?;

    let labels = config.learner_labels();
    let mut cells = Vec::new();
    for (ei, (env_label, env)) in envs.iter().enumerate() {
        for (li, learner) in config.learners.iter().enumerate() {
            for (si, &seed) in config.seeds.iter().enumerate() {
                let mut lc = learner.clone();
                lc.seed = seed;
                cells.push(Cell {
                    env_label,
                    env,
                    data: &datasets[ei][si],
                    label: &labels[li],
                    config: lc,
                    seed,
                });
            }
        }
    }
    let runs: Vec<RunOutcome> = cells
        .par_iter()
        .map(|c| run_cell(c, &root))
        .collect::<Result<_>>()?;

    // the aggregate is computed from the files on disk, not the in-memory metrics
    let mut rows = Vec::new();
    for (env_label, _) in &envs {
        for label in &labels {
            let per_seed = runs
                .iter()
                .filter(|r| &r.environment == env_label && &r.learner == label)
                .map(|r| read_metrics(&r.metrics_path))
                .collect::<Result<Vec<_>>>()?;
            rows.extend(aggregate(env_label, label, &per_seed));
        }
    }
    let aggregate_path = root.join("aggregate.csv");
    write_aggregate(&aggregate_path, &rows)?;
    Ok(ExperimentReport {
        root,
        aggregate_path,
        runs,
    })
}

fn run_cell(cell: &Cell, root: &Path) -> Result<RunOutcome> {
    let dir = root.join(cell.env_label);
    let stem = format!("{}_seed{}", cell.label, cell.seed);
    let metrics_path = dir.join(format!("{stem}.csv"));
    let checkpoint_path = dir.join(format!("{stem}.checkpoint.json"));
    let true_value = reference_value(cell.env, &cell.config)?;
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut write_error = None;
    let outcome = train(cell.data, cell.env, &cell.config, &mut |rec| {
        if write_error.is_none() {
            if let Err(e) =
                writer.write(&MetricRow::from_record(rec, true_value, cell.config.alpha))
            {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    outcome.checkpoint.save(&checkpoint_path)?;
    Ok(RunOutcome {
        environment: cell.env_label.to_string(),
        learner: cell.label.to_string(),
        seed: cell.seed,
        metrics_path,
        checkpoint_path,
        unseen_reads: outcome.audit.unseen_reads(cell.data).len(),
        metrics: outcome.metrics,
    })
}
