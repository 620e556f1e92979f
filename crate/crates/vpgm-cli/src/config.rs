//! Configuration resolution with precedence flags > environment > config
//! file > built-in defaults. Every file key has a mirror flag, and each flag
//! also reads a `VPGM_*` environment variable.
//!
//! Secrets never live in configuration: `api_key_env` names the environment
//! variable that holds the key, and only the gateway reads it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpgm::engine::DEFAULT_SAMPLES;
use vpgm::gateway::ProviderConfig;

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_LAMBDA_INIT: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_MISMATCH_VAR: &str = "Z2";

/// Flags shared by every subcommand; each falls back to its `VPGM_*`
/// environment variable when the flag is absent.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true, env = "VPGM_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory owning this run's artifacts (required by stage commands).
    #[arg(long, global = true, env = "VPGM_RUN_DIR", value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Model structure JSON to copy into the run (input, not output).
    #[arg(long, global = true, env = "VPGM_STRUCTURE", value_name = "FILE")]
    pub structure: Option<PathBuf>,
    /// Development split (JSONL questions) used to fit λ.
    #[arg(long, global = true, env = "VPGM_DEV_DATA", value_name = "FILE")]
    pub dev_data: Option<PathBuf>,
    /// Test split (JSONL questions) used for the report.
    #[arg(long, global = true, env = "VPGM_TEST_DATA", value_name = "FILE")]
    pub test_data: Option<PathBuf>,
    /// Samples per question (M).
    #[arg(long, global = true, env = "VPGM_SAMPLES")]
    pub samples: Option<usize>,
    /// Seed for the control derangement.
    #[arg(long, global = true, env = "VPGM_SEED")]
    pub seed: Option<u64>,
    /// Starting λ for the calibration fit.
    #[arg(long, global = true, env = "VPGM_LAMBDA_INIT")]
    pub lambda_init: Option<f64>,
    /// Calibration-loss weight β.
    #[arg(long, global = true, env = "VPGM_BETA")]
    pub beta: Option<f64>,
    /// Confidence bins for calibration metrics.
    #[arg(long, global = true, env = "VPGM_BINS")]
    pub bins: Option<usize>,
    /// Latent variable expected to react to the noisy control.
    #[arg(long, global = true, env = "VPGM_MISMATCH_VAR")]
    pub mismatch_var: Option<String>,
    /// Noise-identification threshold on the mismatch variable.
    #[arg(long, global = true, env = "VPGM_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Directory holding discovery.txt and inference.txt template overrides.
    #[arg(long, global = true, env = "VPGM_TEMPLATES", value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// Task description for structure discovery.
    #[arg(long, global = true, env = "VPGM_TASK_DESCRIPTION")]
    pub task_description: Option<String>,
    /// Background context for structure discovery.
    #[arg(long, global = true, env = "VPGM_TASK_CONTEXT")]
    pub task_context: Option<String>,
    /// Latent-count cap for discovered structures.
    #[arg(long, global = true, env = "VPGM_TASK_MAX_LATENTS")]
    pub task_max_latents: Option<usize>,
    /// Edge the discovered structure must contain ("X->Z1"); repeatable.
    #[arg(long = "task-fixed-edge", global = true, value_name = "FROM->TO")]
    pub task_fixed_edges: Vec<String>,
    /// Worked example for discovery as "INPUT::OUTPUT"; repeatable.
    #[arg(long = "task-example", global = true, value_name = "IN::OUT")]
    pub task_examples: Vec<String>,
    /// Chat-completions endpoint base URL.
    #[arg(long, global = true, env = "VPGM_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Model name sent to the provider.
    #[arg(long, global = true, env = "VPGM_MODEL")]
    pub model: Option<String>,
    /// Sampling temperature.
    #[arg(long, global = true, env = "VPGM_TEMPERATURE")]
    pub temperature: Option<f64>,
    /// Completion token limit.
    #[arg(long, global = true, env = "VPGM_MAX_TOKENS")]
    pub max_tokens: Option<u32>,
    /// Per-request timeout in milliseconds.
    #[arg(long, global = true, env = "VPGM_TIMEOUT_MS")]
    pub timeout_ms: Option<u64>,
    /// Extra attempts after a transient provider failure.
    #[arg(long, global = true, env = "VPGM_MAX_RETRIES")]
    pub max_retries: Option<u32>,
    /// Upper bound on in-flight provider requests.
    #[arg(long, global = true, env = "VPGM_MAX_PARALLEL")]
    pub max_parallel: Option<usize>,
    /// Environment variable holding the provider API key.
    #[arg(long, global = true, env = "VPGM_API_KEY_ENV")]
    pub api_key_env: Option<String>,
    /// Canned-replies JSON file; presence selects the mock backend.
    #[arg(long, global = true, env = "VPGM_MOCK_SCRIPT", value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Re-run every stage even when recorded digests match.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    run_dir: Option<PathBuf>,
    structure: Option<PathBuf>,
    dev_data: Option<PathBuf>,
    test_data: Option<PathBuf>,
    samples: Option<usize>,
    seed: Option<u64>,
    lambda_init: Option<f64>,
    beta: Option<f64>,
    bins: Option<usize>,
    mismatch_var: Option<String>,
    threshold: Option<f64>,
    templates: Option<PathBuf>,
    mock_script: Option<PathBuf>,
    task: TaskFileConfig,
    provider: ProviderFileConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TaskFileConfig {
    description: Option<String>,
    context: Option<String>,
    max_latents: Option<usize>,
    fixed_edges: Option<Vec<String>>,
    examples: Option<Vec<[String; 2]>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ProviderFileConfig {
    endpoint: Option<String>,
    model: Option<String>,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    timeout_ms: Option<u64>,
    max_retries: Option<u32>,
    max_parallel: Option<usize>,
    api_key_env: Option<String>,
}

/// Discovery-task settings.
#[derive(Debug, Clone, Serialize)]
pub struct TaskSpec {
    pub description: String,
    pub context: String,
    pub max_latents: usize,
    pub fixed_edges: Vec<String>,
    pub examples: Vec<[String; 2]>,
}

/// The fully merged, path-resolved configuration. Serialized into the run
/// directory as `effective-config.toml`; that serialization is also hashed
/// into the run id.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_data: Option<PathBuf>,
    pub samples: usize,
    pub seed: u64,
    pub lambda_init: f64,
    pub beta: f64,
    pub bins: usize,
    pub mismatch_var: String,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    pub task: TaskSpec,
    pub provider: ProviderConfig,
    #[serde(skip)]
    pub force: bool,
}

impl RunConfig {
    /// Merges flags, environment (via clap), the config file, and defaults.
    pub fn resolve(overrides: &Overrides) -> Result<RunConfig, CliError> {
        let (file, file_dir): (FileConfig, Option<PathBuf>) = match &overrides.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                let parsed: FileConfig = toml::from_str(&text).map_err(|e| {
                    CliError::Config(format!("invalid config {}: {e}", path.display()))
                })?;
                (parsed, path.parent().map(Path::to_path_buf))
            }
            None => (FileConfig::default(), None),
        };

        // Paths from the file resolve relative to the file; paths from flags
        // or environment resolve relative to the working directory.
        let resolve_file_path = |p: PathBuf| -> PathBuf {
            match &file_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            }
        };
        let pick_path = |flag: &Option<PathBuf>, file_value: Option<PathBuf>| {
            flag.clone().or_else(|| file_value.map(resolve_file_path)).map(absolutize)
        };

        let mut provider = ProviderConfig::default();
        if let Some(v) = file.provider.endpoint {
            provider.endpoint = v;
        }
        if let Some(v) = file.provider.model {
            provider.model = v;
        }
        if let Some(v) = file.provider.temperature {
            provider.temperature = v;
        }
        if let Some(v) = file.provider.max_tokens {
            provider.max_tokens = v;
        }
        if let Some(v) = file.provider.timeout_ms {
            provider.timeout = std::time::Duration::from_millis(v);
        }
        if let Some(v) = file.provider.max_retries {
            provider.max_retries = v;
        }
        if let Some(v) = file.provider.max_parallel {
            provider.max_parallel = v;
        }
        if let Some(v) = file.provider.api_key_env {
            provider.api_key_env = v;
        }
        if let Some(v) = &overrides.endpoint {
            provider.endpoint = v.clone();
        }
        if let Some(v) = &overrides.model {
            provider.model = v.clone();
        }
        if let Some(v) = overrides.temperature {
            provider.temperature = v;
        }
        if let Some(v) = overrides.max_tokens {
            provider.max_tokens = v;
        }
        if let Some(v) = overrides.timeout_ms {
            provider.timeout = std::time::Duration::from_millis(v);
        }
        if let Some(v) = overrides.max_retries {
            provider.max_retries = v;
        }
        if let Some(v) = overrides.max_parallel {
            provider.max_parallel = v;
        }
        if let Some(v) = &overrides.api_key_env {
            provider.api_key_env = v.clone();
        }

        let task = TaskSpec {
            description: overrides
                .task_description
                .clone()
                .or(file.task.description)
                .unwrap_or_default(),
            context: overrides.task_context.clone().or(file.task.context).unwrap_or_default(),
            max_latents: overrides
                .task_max_latents
                .or(file.task.max_latents)
                .unwrap_or_else(|| vpgm::prompt::DiscoveryConstraints::default().max_latents),
            fixed_edges: if overrides.task_fixed_edges.is_empty() {
                file.task.fixed_edges.unwrap_or_default()
            } else {
                overrides.task_fixed_edges.clone()
            },
            examples: if overrides.task_examples.is_empty() {
                file.task.examples.unwrap_or_default()
            } else {
                overrides
                    .task_examples
                    .iter()
                    .map(|raw| {
                        raw.split_once("::")
                            .map(|(i, o)| [i.to_string(), o.to_string()])
                            .ok_or_else(|| {
                                CliError::Config(format!(
                                    "--task-example must be \"INPUT::OUTPUT\", got {raw:?}"
                                ))
                            })
                    })
                    .collect::<Result<_, _>>()?
            },
        };

        let config = RunConfig {
            run_dir: pick_path(&overrides.run_dir, file.run_dir),
            structure: pick_path(&overrides.structure, file.structure),
            dev_data: pick_path(&overrides.dev_data, file.dev_data),
            test_data: pick_path(&overrides.test_data, file.test_data),
            samples: overrides.samples.or(file.samples).unwrap_or(DEFAULT_SAMPLES),
            seed: overrides.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            lambda_init: overrides.lambda_init.or(file.lambda_init).unwrap_or(DEFAULT_LAMBDA_INIT),
            beta: overrides.beta.or(file.beta).unwrap_or(DEFAULT_BETA),
            bins: overrides.bins.or(file.bins).unwrap_or(vpgm::metrics::DEFAULT_BINS),
            mismatch_var: overrides
                .mismatch_var
                .clone()
                .or(file.mismatch_var)
                .unwrap_or_else(|| DEFAULT_MISMATCH_VAR.to_string()),
            threshold: overrides
                .threshold
                .or(file.threshold)
                .unwrap_or(vpgm::metrics::DEFAULT_THRESHOLD),
            templates: pick_path(&overrides.templates, file.templates),
            mock_script: pick_path(&overrides.mock_script, file.mock_script),
            task,
            provider,
            force: overrides.force,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.samples == 0 {
            return Err(CliError::Config("samples must be at least 1".into()));
        }
        if self.bins == 0 {
            return Err(CliError::Config("bins must be at least 1".into()));
        }
        if self.lambda_init.is_nan() || self.lambda_init <= 0.0 {
            return Err(CliError::Config(format!(
                "lambda_init must be positive, got {}",
                self.lambda_init
            )));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(CliError::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(CliError::Config(format!(
                "threshold must be in [0,1], got {}",
                self.threshold
            )));
        }
        self.provider.validate()?;
        Ok(())
    }

    /// The run directory, or a configuration error for stage commands.
    pub fn run_dir(&self) -> Result<&Path, CliError> {
        self.run_dir.as_deref().ok_or_else(|| {
            CliError::Config(
                "no run directory: pass --run-dir, set VPGM_RUN_DIR, or set run_dir in the config file"
                    .into(),
            )
        })
    }

    /// Deterministic TOML rendering, echoed into the run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the effective configuration; part of the run id.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn absolutize(path: PathBuf) -> PathBuf {
    std::path::absolute(&path).unwrap_or(path)
}
