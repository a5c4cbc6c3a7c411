//! Run configuration: JSON with sections {task_family, model, train, eval},
//! every field defaulted so partial configs stay valid.

use ictxot::linalg::rotation2;
use ictxot::tasks::TaskFamilySpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Top-level configuration for every command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; the --seed flag overrides it.
    pub seed: u64,
    pub task_family: TaskFamilyConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            task_family: TaskFamilyConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Config {
    /// Defaults for the cross-attention commands: mean-shift family,
    /// desk-scale training budget.
    pub fn nonparametric_default() -> Self {
        let mut cfg = Config::default();
        cfg.task_family = TaskFamilyConfig {
            kind: "mean_shift".to_string(),
            dim: 2,
            lo: 4.0,
            hi: 6.0,
            angle: 0.0,
        };
        cfg.train.base_lr = 1e-3;
        cfg.train.epochs = 1000;
        cfg.train.num_tasks = 32;
        cfg
    }
}

/// Which Gaussian family tasks are drawn from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamilyConfig {
    /// One of "mean_shift", "diag_cov", "iso_cov", "common_frame".
    pub kind: String,
    pub dim: usize,
    /// Lower edge of the uniform parameter box.
    pub lo: f64,
    /// Upper edge of the uniform parameter box.
    pub hi: f64,
    /// Rotation angle of the shared 2-d eigenframe (common_frame only).
    pub angle: f64,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        TaskFamilyConfig { kind: "iso_cov".to_string(), dim: 2, lo: 1.0, hi: 3.0, angle: 0.0 }
    }
}

impl TaskFamilyConfig {
    pub fn to_spec(&self) -> Result<TaskFamilySpec, CliError> {
        let spec = match self.kind.as_str() {
            "mean_shift" => TaskFamilySpec::mean_shift(self.dim, self.lo, self.hi),
            "diag_cov" => TaskFamilySpec::diag_cov(self.dim, self.lo, self.hi),
            "iso_cov" => TaskFamilySpec::iso_cov(self.dim, self.lo, self.hi),
            "common_frame" => {
                if self.dim != 2 {
                    return Err(CliError::Config(
                        "common_frame family requires dim = 2".to_string(),
                    ));
                }
                TaskFamilySpec::common_frame(rotation2(self.angle), self.lo, self.hi)
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown task family kind {other:?} (expected mean_shift, diag_cov, iso_cov or common_frame)"
                )))
            }
        };
        spec.validate().map_err(|e| CliError::Config(format!("invalid task family: {e}")))?;
        Ok(spec)
    }
}

/// Architecture knobs for both model classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden units of the linear-attention feature network.
    pub units: usize,
    /// Frobenius cap on the query/key matrix; defaults to √dim when null.
    pub c_theta: Option<f64>,
    /// Path-norm cap on the feature network.
    pub capacity: f64,
    /// Initialization scale for the feature-unit output weights.
    pub init_scale: f64,
    /// Embedding width of the cross-attention model.
    pub hidden: usize,
    pub heads: usize,
    /// Samples per side of each few-shot prompt.
    pub prompt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            units: 16,
            c_theta: None,
            capacity: 30.0,
            init_scale: 0.3,
            hidden: 128,
            heads: 4,
            prompt_len: 16,
        }
    }
}

/// Optimization schedule shared by both training commands.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub epochs: usize,
    /// Distribution-matching penalty weight.
    pub lambda: f64,
    pub num_tasks: usize,
    /// Per-task sample sizes drawn uniformly for linear-attention training.
    pub n_grid: Vec<usize>,
    /// Source/target points per task for cross-attention training.
    pub train_points: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            base_lr: 3e-5,
            epochs: 300,
            lambda: 1000.0,
            num_tasks: 500,
            n_grid: vec![600, 800, 1000, 1200, 1400, 1600],
            train_points: 64,
            shuffle: false,
        }
    }
}

/// Evaluation protocol.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test prompt lengths for the scaling sweep.
    pub test_ns: Vec<usize>,
    /// Independent evaluation seeds per prompt length.
    pub eval_seeds: u64,
    /// Fresh tasks averaged per evaluation point.
    pub eval_tasks: u64,
    /// Offset added to evaluation seeds, keeping them disjoint from training.
    pub seed_base: u64,
    /// Held-out tasks for cross-attention prediction dumps.
    pub held_out_tasks: u64,
    /// Query points per held-out task.
    pub query_points: usize,
    /// Explicit checkpoint path for scaling-law; defaults to <out>/checkpoint.json.
    pub checkpoint: Option<String>,
    /// Replace measured errors with an exact a·n^{-1/2}+b·n^{-1}+c curve
    /// to verify the fitting pipeline end to end.
    pub synthetic_exact: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_ns: vec![500, 1000, 2000, 4000, 5000],
            eval_seeds: 10,
            eval_tasks: 200,
            seed_base: 9000,
            held_out_tasks: 8,
            query_points: 256,
            checkpoint: None,
            synthetic_exact: false,
        }
    }
}

/// Load a config file, or the given default when no path is supplied.
pub fn load_config(path: Option<&str>, default: Config) -> Result<Config, CliError> {
    match path {
        None => Ok(default),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {p}: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("cannot parse config {p}: {e}")))
        }
    }
}
