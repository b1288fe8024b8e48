//! Experiment configuration documents.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use icq_core::learners::LearnerConfig;
use icq_core::mdp::build_mmdp;
use icq_core::{MmdpSpec, TabularMdp};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Where an experiment's environment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSpec {
    Mmdp(MmdpSpec),
    /// Path to a tabular MDP JSON document.
    File(PathBuf),
}

impl EnvSpec {
    /// Short name used for output directories.
    pub fn label(&self) -> String {
        match self {
            EnvSpec::Mmdp(spec) => format!("mmdp-n{}", spec.num_agents),
            EnvSpec::File(path) => path
                .file_stem()
                .map_or_else(|| "env".to_string(), |s| s.to_string_lossy().into_owned()),
        }
    }

    pub fn build(&self) -> Result<TabularMdp> {
        match self {
            EnvSpec::Mmdp(spec) => Ok(build_mmdp(spec)?),
            EnvSpec::File(path) => load_mdp(path),
        }
    }
}

pub fn load_mdp(path: &Path) -> Result<TabularMdp> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_json(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Fresh expert/uniform mixture per seed, collected with the run seed.
    Collect {
        num_trajectories: usize,
        expert_count: usize,
    },
    /// A JSONL dataset shared by every seed.
    Path(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Collect {
            num_trajectories: 32,
            expert_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub environments: Vec<EnvSpec>,
    #[serde(default)]
    pub dataset: DatasetSource,
    pub learners: Vec<LearnerConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Deserializes JSON, reporting the failing field path and line on error.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path == "." {
            "document".to_string()
        } else {
            format!("field `{path}`")
        };
        LabError::ConfigParse {
            path: origin.to_path_buf(),
            location: format!("{field} at line {} column {}", inner.line(), inner.column()),
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| LabError::ConfigParse {
        path: origin.to_path_buf(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(value)
}

impl ExperimentConfig {
    /// Parses without touching the filesystem or validating.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        parse_json(text, origin)
    }

    /// Reads, resolves relative paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut config = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for env in &mut self.environments {
            if let EnvSpec::File(p) = env {
                resolve(p);
            }
        }
        if let DatasetSource::Path(p) = &mut self.dataset {
            resolve(p);
        }
        resolve(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LabError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return fail(format!(
                "name `{}` is not a valid directory name",
                self.name
            ));
        }
        if self.environments.is_empty() {
            return fail("at least one environment is required".into());
        }
        if self.learners.is_empty() {
            return fail("at least one learner is required".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return fail("seeds must be distinct".into());
        }
        let mut labels = HashSet::new();
        for env in &self.environments {
            match env {
                EnvSpec::Mmdp(spec) if spec.num_agents == 0 => {
                    return fail("mmdp needs at least one agent".into());
                }
                EnvSpec::File(path) if !path.is_file() => {
                    return fail(format!(
                        "environment file {} does not exist",
                        path.display()
                    ));
                }
                _ => {}
            }
            if !labels.insert(env.label()) {
                return fail(format!("duplicate environment `{}`", env.label()));
            }
        }
        match &self.dataset {
            DatasetSource::Collect {
                num_trajectories,
                expert_count,
            } => {
                if *num_trajectories == 0 || expert_count > num_trajectories {
                    return fail(format!(
                        "need 1 <= num_trajectories and expert_count <= num_trajectories, got {num_trajectories} and {expert_count}"
                    ));
                }
            }
            DatasetSource::Path(path) => {
                if !path.is_file() {
                    return fail(format!("dataset file {} does not exist", path.display()));
                }
                if self.environments.len() != 1 {
                    return fail("a dataset path requires exactly one environment".into());
                }
            }
        }
        for learner in &self.learners {
            learner.validate()?;
        }
        Ok(())
    }

    /// Output names of the learners, suffixed with an index when an algorithm repeats.
    pub fn learner_labels(&self) -> Vec<String> {
        let algs: Vec<_> = self.learners.iter().map(|l| l.algorithm).collect();
        algs.iter()
            .enumerate()
            .map(|(i, a)| {
                if algs.iter().filter(|b| *b == a).count() == 1 {
                    a.name().to_string()
                } else {
                    let nth = algs[..i].iter().filter(|b| *b == a).count();
                    format!("{}-{nth}", a.name())
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use icq_core::learners::Algorithm;

    fn minimal() -> &'static str {
        r#"{"name": "t", "environments": [{"mmdp": {"num_agents": 2}}], "learners": [{"algorithm": "icq-ma"}]}"#
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(minimal(), Path::new("c.json")).unwrap();
        assert_eq!(c.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(c.dataset, DatasetSource::default());
        assert_eq!(c.learners[0].alpha, 100.0);
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json(), Path::new("c.json")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors_name_the_field_and_line() {
        let text = "{\"name\": \"t\",\n \"environments\": [{\"mmdp\": {\"num_agents\": 2}}],\n \"learners\": [{\"algorithm\": \"icq-ma\", \"alpha\": \"big\"}]}";
        let err = ExperimentConfig::from_json(text, Path::new("c.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learners[0].alpha"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn validation_rejects_bad_documents() {
        let base = ExperimentConfig::from_json(minimal(), Path::new("c.json")).unwrap();
        let cases: Vec<fn(&mut ExperimentConfig)> = vec![
            |c| c.seeds = vec![],
            |c| c.seeds = vec![1, 1],
            |c| c.name = "../x".into(),
            |c| c.learners.clear(),
            |c| c.environments.push(c.environments[0].clone()),
            |c| c.dataset = DatasetSource::Path("/no/such/file.jsonl".into()),
            |c| c.environments = vec![EnvSpec::File("/no/such/mdp.json".into())],
            |c| {
                c.dataset = DatasetSource::Collect {
                    num_trajectories: 2,
                    expert_count: 3,
                }
            },
            |c| c.learners[0].batch_size = 0,
        ];
        for (i, edit) in cases.into_iter().enumerate() {
            let mut c = base.clone();
            edit(&mut c);
            assert!(c.validate().is_err(), "case {i} accepted");
        }
    }

    #[test]
    fn repeated_algorithms_get_indexed_labels() {
        let mut c = ExperimentConfig::from_json(minimal(), Path::new("c.json")).unwrap();
        c.learners.push(LearnerConfig::new(Algorithm::BcqMa));
        c.learners.push(LearnerConfig::new(Algorithm::IcqMa));
        assert_eq!(c.learner_labels(), vec!["icq-ma-0", "bcq-ma", "icq-ma-1"]);
    }
}
