//! ERM vs. DRO comparison on one shared dataset realisation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{dataset_digest, generate_dataset};
use crate::phi_divergence::RobustnessParam;
use crate::tinynet::Dataset;
use crate::trainer::{
    evaluate_robust, write_metrics_csv, MetricsRecord, Objective, TrainConfig, Trainer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub objective: Objective,
    pub beta: Option<f64>,
}

impl ArmSpec {
    pub fn erm() -> Self {
        Self {
            name: "erm".into(),
            objective: Objective::Erm,
            beta: None,
        }
    }

    pub fn dro(beta: f64) -> Self {
        Self {
            name: format!("dro_beta_{beta}"),
            objective: Objective::Dro,
            beta: Some(beta),
        }
    }
}

/// Arms in declaration order: ERM first (if enabled), then one per β.
pub fn arms(cfg: &ExperimentConfig) -> Vec<ArmSpec> {
    let mut out = Vec::new();
    if cfg.include_erm {
        out.push(ArmSpec::erm());
    }
    out.extend(cfg.betas.iter().map(|&b| ArmSpec::dro(b)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed {
        train: MetricsRecord,
        test: MetricsRecord,
        curve_path: String,
        steps: u64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub objective: Objective,
    pub beta: Option<f64>,
    pub runs: Vec<RunResult>,
    /// Median over completed runs; `None` if every run failed.
    pub median_worst_class_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub tool: String,
    pub version: String,
    pub name: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub arms: BTreeMap<String, ArmResult>,
}

impl ExperimentResult {
    pub fn median_worst_class(&self, arm: &str) -> Option<f64> {
        self.arms
            .get(arm)
            .and_then(|a| a.median_worst_class_test_accuracy)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

fn arm_train_config(cfg: &ExperimentConfig, arm: &ArmSpec, seed: u64) -> Result<TrainConfig> {
    let mut t = cfg.train.clone();
    t.objective = arm.objective;
    if let Some(b) = arm.beta {
        t.beta = RobustnessParam::new(b)?;
    }
    t.seed = seed;
    Ok(t)
}

fn curve_file(out_dir: &Path, arm: &str, seed: u64) -> PathBuf {
    out_dir.join("curves").join(format!("{arm}_seed{seed}.csv"))
}

fn run_one(
    cfg: &ExperimentConfig,
    arm: &ArmSpec,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<RunOutcome> {
    let tc = arm_train_config(cfg, arm, seed)?;
    let mut trainer = Trainer::with_monitor(tc.clone(), train_set, test_set)?;
    let curve = trainer.run()?;
    let state = trainer.into_state();
    let beta = (arm.objective == Objective::Dro).then_some(tc.beta);
    let mut train = evaluate_robust(&state.model, train_set, tc.loss_kind, beta)?;
    let mut test = evaluate_robust(&state.model, test_set, tc.loss_kind, beta)?;
    train.step = state.step;
    test.step = state.step;

    let path = curve_file(&cfg.out_dir, &arm.name, seed);
    let file = BufWriter::new(File::create(&path)?);
    write_metrics_csv(file, &curve, test_set.num_classes)?;
    Ok(RunOutcome::Completed {
        train,
        test,
        curve_path: path.display().to_string(),
        steps: state.step,
    })
}

/// Trains every arm on every seed, writing one learning curve per run under
/// `out_dir/curves/`. A failing run is recorded and the others continue;
/// only I/O errors while preparing the output directory abort.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (train_set, test_set) = generate_dataset(&cfg.dataset)?;
    fs::create_dir_all(cfg.out_dir.join("curves"))?;

    let arm_specs = arms(cfg);
    let jobs: Vec<(usize, u64)> = (0..arm_specs.len())
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            run_one(cfg, &arm_specs[a], seed, &train_set, &test_set).unwrap_or_else(|e| {
                RunOutcome::Failed {
                    error: e.to_string(),
                }
            })
        })
        .collect();

    let mut arms = BTreeMap::new();
    for (a, spec) in arm_specs.iter().enumerate() {
        let runs: Vec<RunResult> = jobs
            .iter()
            .zip(&outcomes)
            .filter(|((ja, _), _)| *ja == a)
            .map(|((_, seed), outcome)| RunResult {
                seed: *seed,
                outcome: outcome.clone(),
            })
            .collect();
        let worst: Vec<f64> = runs
            .iter()
            .filter_map(|r| match &r.outcome {
                RunOutcome::Completed { test, .. } => Some(test.worst_class_accuracy),
                RunOutcome::Failed { .. } => None,
            })
            .collect();
        arms.insert(
            spec.name.clone(),
            ArmResult {
                objective: spec.objective,
                beta: spec.beta,
                runs,
                median_worst_class_test_accuracy: median(&worst),
            },
        );
    }

    Ok(ExperimentResult {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        name: cfg.name.clone(),
        config_digest: cfg.digest(),
        dataset_digest: dataset_digest(&train_set),
        train_class_counts: train_set.class_counts(),
        test_class_counts: test_set.class_counts(),
        seeds: cfg.seeds.clone(),
        arms,
    })
}

/// Writes the result as pretty-printed JSON.
pub fn emit_summary(result: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(result)
        .map_err(|e| DroError::Numeric(format!("summary serialisation: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DroError::Config(format!("summary parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::DatasetSpec;

    fn small(out_dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            dataset: DatasetSpec {
                train_per_class: 40,
                test_per_class: 20,
                imbalance_ratio: 0.25,
                ..DatasetSpec::default()
            },
            seeds: vec![0, 1],
            betas: vec![1.0, 10.0],
            out_dir: out_dir.to_path_buf(),
            ..ExperimentConfig::default()
        };
        cfg.train.hidden_layers = vec![8];
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn zero_steps_echo_initial_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.train.epochs = 0;
        cfg.include_erm = false;
        cfg.betas = vec![10.0];
        cfg.seeds = vec![5];
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.arms.len(), 1);
        let run = &result.arms["dro_beta_10"].runs[0];
        let (train_set, test_set) = generate_dataset(&cfg.dataset).unwrap();
        let tc = arm_train_config(&cfg, &ArmSpec::dro(10.0), 5).unwrap();
        let init = crate::tinynet::MlpModel::init(&tc.layer_dims(&train_set), 5).unwrap();
        let expected = evaluate_robust(&init, &test_set, tc.loss_kind, Some(tc.beta)).unwrap();
        match &run.outcome {
            RunOutcome::Completed { test, steps, .. } => {
                assert_eq!(*steps, 0);
                assert_eq!(test, &expected);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_arm_is_reported_and_summary_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let result = run_experiment(&cfg).unwrap();
        let names: Vec<&str> = result.arms.keys().map(String::as_str).collect();
        assert_eq!(names, vec!["dro_beta_1", "dro_beta_10", "erm"]);
        for arm in result.arms.values() {
            assert_eq!(arm.runs.len(), 2);
            assert!(arm.median_worst_class_test_accuracy.is_some());
        }
        let path = dir.path().join("summary.json");
        emit_summary(&result, &path).unwrap();
        assert_eq!(read_summary(&path).unwrap(), result);
        assert_eq!(result.train_class_counts, vec![40, 40, 10]);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.betas.clear();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_runs_are_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        // 90 training examples cannot fill a batch of 100 without replacement
        cfg.train.with_replacement = false;
        cfg.train.batch_size = 100;
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.arms.len(), 3);
        for arm in result.arms.values() {
            assert_eq!(arm.runs.len(), 2);
            for run in &arm.runs {
                assert!(matches!(run.outcome, RunOutcome::Failed { .. }));
            }
            assert_eq!(arm.median_worst_class_test_accuracy, None);
        }
    }
}
