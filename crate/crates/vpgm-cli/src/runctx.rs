//! Per-run state: the run directory, an exclusive lock, the manifest, and an
//! append-only event log. Stages go through a two-phase API — `plan_stage`
//! decides whether work is needed, the caller does the work, `commit_stage`
//! digests everything and persists the manifest entry — so the manifest only
//! ever records stages whose outputs are fully on disk.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{file_digest, params_digest, Manifest, StageEntry};

pub const LOCK_FILE: &str = "run.lock";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective-config.toml";

/// Everything a stage needs to be planned and committed: a stage name,
/// parameter JSON, inputs keyed by role, and outputs as (file name within the
/// run directory, full path) pairs.
pub struct StageIo {
    pub name: String,
    pub params: Value,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
}

/// What `plan_stage` decided. On `Run`, stale outputs were already removed,
/// while reusable partial outputs were left in place for the stage to resume
/// from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePlan {
    Skip,
    Run,
}

/// Holds `run.lock` for the life of the process; removing it on drop.
struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct RunContext {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: Manifest,
    _lock: LockGuard,
}

impl RunContext {
    /// Creates the run directory if needed, takes the lock, echoes the
    /// effective configuration, and loads (or starts) the manifest.
    pub fn open(config: RunConfig) -> Result<RunContext, CliError> {
        let dir = config.run_dir()?.to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CliError::io("creating run directory", &dir, e))?;

        let lock_path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Config(format!(
                    "run directory is locked by another process ({}); remove the \
                     file if that process is gone",
                    lock_path.display()
                )));
            }
            Err(e) => return Err(CliError::io("creating lock", &lock_path, e)),
        }
        let lock = LockGuard { path: lock_path };

        let config_path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&config_path, config.to_toml())
            .map_err(|e| CliError::io("writing effective config", &config_path, e))?;

        let manifest = Manifest::load_or_new(&dir, &config.hash())?;
        Ok(RunContext { dir, config, manifest, _lock: lock })
    }

    /// Appends one line to `events.jsonl` and mirrors it to the human log.
    pub fn event(&self, stage: &str, event: &str, detail: &str) {
        let ts_ms =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let line = json!({
            "ts_ms": ts_ms,
            "stage": stage,
            "event": event,
            "detail": detail,
        });
        let path = self.dir.join(EVENTS_FILE);
        if let Ok(mut file) = OpenOptions::new().create(true).append(true).open(&path) {
            let _ = writeln!(file, "{line}");
        }
        log::info!("[{stage}] {event}: {detail}");
    }

    /// Decides whether the stage must run. Rules, in order:
    /// - `--force`: run, after deleting old outputs.
    /// - no manifest entry: run (partial outputs are kept for resume).
    /// - recorded params or input digests differ: outputs are stale — delete
    ///   them and run fresh.
    /// - params and inputs match but an output file is missing: run, keeping
    ///   the outputs that are still present.
    /// - params and inputs match but an output's digest differs: someone
    ///   edited a managed artifact — refuse, naming the file.
    /// - everything matches: skip.
    pub fn plan_stage(&self, io: &StageIo) -> Result<StagePlan, CliError> {
        if self.config.force {
            self.remove_outputs(io)?;
            self.event(&io.name, "stage_started", "forced re-run");
            return Ok(StagePlan::Run);
        }
        let Some(entry) = self.manifest.stages.get(&io.name) else {
            self.event(&io.name, "stage_started", "no prior record");
            return Ok(StagePlan::Run);
        };

        let fresh_inputs = digest_inputs(io)?;
        if entry.params != params_digest(&io.params) || entry.inputs != fresh_inputs {
            self.remove_outputs(io)?;
            self.event(&io.name, "stage_started", "parameters or inputs changed");
            return Ok(StagePlan::Run);
        }

        let mut missing = false;
        for (name, path) in &io.outputs {
            let Some(recorded) = entry.outputs.get(name) else {
                missing = true;
                continue;
            };
            if !path.exists() {
                missing = true;
                continue;
            }
            let actual = file_digest(path)?;
            if &actual != recorded {
                return Err(CliError::Validation(format!(
                    "{} does not match the digest recorded in the manifest; it was \
                     modified outside this tool (use --force to rebuild)",
                    path.display()
                )));
            }
        }
        if missing {
            self.event(&io.name, "stage_started", "output missing; regenerating");
            return Ok(StagePlan::Run);
        }
        self.event(&io.name, "stage_skipped", "all digests match");
        Ok(StagePlan::Skip)
    }

    /// Records the completed stage in the manifest and saves it.
    pub fn commit_stage(&mut self, io: &StageIo) -> Result<(), CliError> {
        let mut outputs = std::collections::BTreeMap::new();
        for (name, path) in &io.outputs {
            outputs.insert(name.clone(), file_digest(path)?);
        }
        let entry =
            StageEntry { params: params_digest(&io.params), inputs: digest_inputs(io)?, outputs };
        self.manifest.stages.insert(io.name.clone(), entry);
        self.manifest.save(&self.dir)?;
        self.event(&io.name, "stage_completed", "outputs recorded");
        Ok(())
    }

    fn remove_outputs(&self, io: &StageIo) -> Result<(), CliError> {
        for (_, path) in &io.outputs {
            if path.exists() {
                fs::remove_file(path)
                    .map_err(|e| CliError::io("removing stale output", path, e))?;
            }
        }
        Ok(())
    }
}

fn digest_inputs(io: &StageIo) -> Result<std::collections::BTreeMap<String, String>, CliError> {
    let mut inputs = std::collections::BTreeMap::new();
    for (role, path) in &io.inputs {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "input for stage {} not found: {}",
                io.name,
                path.display()
            )));
        }
        inputs.insert(role.clone(), file_digest(path)?);
    }
    Ok(inputs)
}
