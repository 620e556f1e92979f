//! The pipeline stages behind each subcommand. Every stage follows the same
//! shape: describe its parameters, inputs, and outputs as a [`StageIo`], ask
//! the run context whether work is needed, do the work, then commit the
//! manifest entry once the outputs are fully on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vpgm::calibrate::{
    calibration_loss, fit_lambda, CalibrationBatch, CalibrationRow, DirichletPosteriorInput,
};
use vpgm::engine::{
    self, match_label, read_questions, read_records, QuestionInput, QuestionRecord,
};
use vpgm::gateway::{CompletionRequest, Gateway, MockScript};
use vpgm::graph::{DependencyEdge, PgmStructure, ValidationOptions, VarId};
use vpgm::metrics::{
    classwise_ece, ece, latent_analysis, make_noisy_control, reliability_csv, reliability_svg,
    reliability_table, QuestionLatents, ReliabilityRow, ScoredPrediction,
};
use vpgm::optim::LbfgsOptions;
use vpgm::prompt::{
    amend_discovery_prompt, build_discovery_prompt, parse_structure_reply, DiscoveryConstraints,
    DiscoverySpec, TemplateSet,
};

use crate::error::CliError;
use crate::runctx::{RunContext, StageIo, StagePlan};

pub const STRUCTURE_FILE: &str = "pgm.json";
pub const FIT_FILE: &str = "fit.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const RELIABILITY_SVG_FILE: &str = "reliability.svg";
pub const CONTROL_FILE: &str = "control-dataset.jsonl";
pub const LATENT_ANALYSIS_FILE: &str = "latent-analysis.json";

// ---------------------------------------------------------------------------
// Artifact schemas

/// One aggregated question: vote counts and the expected distribution (the
/// Dirichlet prior), plus everything evaluation needs downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorRow {
    pub question_id: String,
    pub options: Vec<String>,
    pub counts: Vec<u64>,
    pub prior: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
    pub baseline_conf: f64,
    pub baseline_label: String,
    pub chosen_label: String,
    pub dropped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<f64>>,
}

/// The fitted prior strength and the loss it achieved on the dev split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub lambda: f64,
    pub beta: f64,
    pub epsilon_smooth: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub final_ece_class: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub accuracy: f64,
    pub ece: f64,
    pub classwise_bin_free: f64,
    pub classwise_binned: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub accuracy: f64,
    pub ece: f64,
}

/// The evaluation report written as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub n_questions: usize,
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub bins: usize,
    pub bayes: MethodMetrics,
    pub vpgm: MethodMetrics,
    pub consistency_baseline: BaselineMetrics,
    pub reliability: Vec<ReliabilityRow>,
}

// ---------------------------------------------------------------------------
// Small file helpers

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io("writing", path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::io(&format!("reading {what}"), path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("invalid {what} {}: {e}", path.display())))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::io(&format!("reading {what}"), path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| {
            CliError::Validation(format!("invalid {what} {} line {}: {e}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}

fn file_stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn build_gateway(ctx: &RunContext) -> Result<Gateway, CliError> {
    match &ctx.config.mock_script {
        Some(path) => {
            let script = MockScript::from_file(path)?;
            Ok(Gateway::mock(ctx.config.provider.clone(), script)?)
        }
        None => Ok(Gateway::http(ctx.config.provider.clone())?),
    }
}

fn load_templates(ctx: &RunContext) -> Result<TemplateSet, CliError> {
    match &ctx.config.templates {
        Some(dir) => Ok(TemplateSet::load(dir)?),
        None => Ok(TemplateSet::builtin()),
    }
}

/// Inputs common to every gateway-backed stage: the mock script (when the
/// mock backend is selected) and any custom template files.
fn gateway_inputs(ctx: &RunContext, with_templates: bool) -> Vec<(String, PathBuf)> {
    let mut inputs = Vec::new();
    if let Some(script) = &ctx.config.mock_script {
        inputs.push(("mock_script".to_string(), script.clone()));
    }
    if with_templates {
        if let Some(dir) = &ctx.config.templates {
            inputs.push(("template_discovery".to_string(), dir.join("discovery.txt")));
            inputs.push(("template_inference".to_string(), dir.join("inference.txt")));
        }
    }
    inputs
}

fn parse_fixed_edge(raw: &str) -> Result<DependencyEdge, CliError> {
    let (from, to) = raw
        .split_once("->")
        .or_else(|| raw.split_once('→'))
        .ok_or_else(|| CliError::Config(format!("fixed edge must be \"FROM->TO\", got {raw:?}")))?;
    let (from, to) = (from.trim(), to.trim());
    if from.is_empty() || to.is_empty() {
        return Err(CliError::Config(format!("fixed edge must name both ends, got {raw:?}")));
    }
    Ok(DependencyEdge::new(from, to))
}

/// Loads the structure the run works with: a configured structure file is
/// validated and copied into the run as `pgm.json` (its own manifest stage);
/// otherwise an existing `pgm.json` — usually written by `discover` — is
/// used as-is.
pub fn ensure_structure(ctx: &mut RunContext) -> Result<PgmStructure, CliError> {
    let pgm_path = ctx.dir.join(STRUCTURE_FILE);
    let Some(source) = ctx.config.structure.clone() else {
        if pgm_path.exists() {
            return PgmStructure::from_json(
                &fs::read_to_string(&pgm_path)
                    .map_err(|e| CliError::io("reading structure", &pgm_path, e))?,
            )
            .map_err(|e| {
                CliError::Validation(format!("invalid structure {}: {e}", pgm_path.display()))
            });
        }
        return Err(CliError::Config(
            "no structure: pass --structure or run `vpgm discover` first".into(),
        ));
    };

    let io = StageIo {
        name: "structure".into(),
        params: json!({}),
        inputs: vec![("structure".to_string(), source.clone())],
        outputs: vec![(STRUCTURE_FILE.to_string(), pgm_path.clone())],
    };
    if let StagePlan::Run = ctx.plan_stage(&io)? {
        let text = fs::read_to_string(&source)
            .map_err(|e| CliError::io("reading structure", &source, e))?;
        let structure = PgmStructure::from_json(&text).map_err(|e| {
            CliError::Validation(format!("invalid structure {}: {e}", source.display()))
        })?;
        let result = structure.validate(&ValidationOptions::default());
        if !result.is_ok() {
            return Err(CliError::Validation(format!(
                "structure {} was rejected:\n{}",
                source.display(),
                result.describe_violations()
            )));
        }
        write_text(&pgm_path, &structure.to_json_pretty())?;
        ctx.commit_stage(&io)?;
        return Ok(structure);
    }
    PgmStructure::from_json(
        &fs::read_to_string(&pgm_path)
            .map_err(|e| CliError::io("reading structure", &pgm_path, e))?,
    )
    .map_err(|e| CliError::Validation(format!("invalid structure {}: {e}", pgm_path.display())))
}

// ---------------------------------------------------------------------------
// discover

pub async fn cmd_discover(ctx: &mut RunContext, out: Option<PathBuf>) -> Result<(), CliError> {
    let task = &ctx.config.task;
    if task.description.trim().is_empty() {
        return Err(CliError::Config(
            "discover needs a task description (--task-description or [task] description)".into(),
        ));
    }
    let fixed_edges =
        task.fixed_edges.iter().map(|raw| parse_fixed_edge(raw)).collect::<Result<Vec<_>, _>>()?;
    let spec = DiscoverySpec {
        task_description: task.description.clone(),
        example_pairs: task
            .examples
            .iter()
            .map(|[input, output]| (input.clone(), output.clone()))
            .collect(),
        context: task.context.clone(),
        constraints: DiscoveryConstraints { max_latents: task.max_latents, fixed_edges },
    };

    let pgm_path = ctx.dir.join(STRUCTURE_FILE);
    let io = StageIo {
        name: "discover".into(),
        params: json!({
            "task": ctx.config.task,
            "model": ctx.config.provider.model,
            "temperature": ctx.config.provider.temperature,
        }),
        inputs: gateway_inputs(ctx, true),
        outputs: vec![(STRUCTURE_FILE.to_string(), pgm_path.clone())],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        log::info!("structure already discovered at {}", pgm_path.display());
        return Ok(());
    }

    let templates = load_templates(ctx)?;
    let gateway = build_gateway(ctx)?;
    let base_prompt = build_discovery_prompt(&spec, &templates)?;
    let options = ValidationOptions { max_latents: task.max_latents };

    let first = gateway
        .complete(&CompletionRequest {
            prompt: base_prompt.clone(),
            seed: Some(ctx.config.seed),
            scenario_key: "discover/0".into(),
        })
        .await?;
    let rejection = match parse_structure_reply(&first.text) {
        Ok(structure) => {
            let result = structure.validate(&options);
            if result.is_ok() {
                write_text(&pgm_path, &structure.to_json_pretty())?;
                ctx.commit_stage(&io)?;
                if let Some(extra) = out {
                    write_text(&extra, &structure.to_json_pretty())?;
                }
                return Ok(());
            }
            result.describe_violations()
        }
        Err(e) => e.to_string(),
    };

    ctx.event("discover", "stage_retrying", &format!("first proposal rejected: {rejection}"));
    let amended = amend_discovery_prompt(&base_prompt, &first.text, &rejection);
    let second = gateway
        .complete(&CompletionRequest {
            prompt: amended,
            seed: Some(ctx.config.seed),
            scenario_key: "discover/1".into(),
        })
        .await?;
    let structure = parse_structure_reply(&second.text).map_err(|e| {
        CliError::Validation(format!("discovery failed twice; last reply unparseable: {e}"))
    })?;
    let result = structure.validate(&options);
    if !result.is_ok() {
        return Err(CliError::Validation(format!(
            "discovery failed twice; last proposal rejected:\n{}",
            result.describe_violations()
        )));
    }
    write_text(&pgm_path, &structure.to_json_pretty())?;
    ctx.commit_stage(&io)?;
    if let Some(extra) = out {
        write_text(&extra, &structure.to_json_pretty())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

fn infer_params(ctx: &RunContext) -> serde_json::Value {
    json!({
        "samples": ctx.config.samples,
        "backend": if ctx.config.mock_script.is_some() { "mock" } else { "http" },
        "endpoint": ctx.config.provider.endpoint,
        "model": ctx.config.provider.model,
        "temperature": ctx.config.provider.temperature,
        "max_tokens": ctx.config.provider.max_tokens,
        "templates": if ctx.config.templates.is_some() { "custom" } else { "builtin" },
    })
}

async fn run_infer(
    ctx: &mut RunContext,
    structure: &PgmStructure,
    stage: &str,
    dataset: &Path,
    out_name: &str,
) -> Result<(), CliError> {
    let out_path = ctx.dir.join(out_name);
    let mut inputs = vec![
        ("dataset".to_string(), dataset.to_path_buf()),
        ("structure".to_string(), ctx.dir.join(STRUCTURE_FILE)),
    ];
    inputs.extend(gateway_inputs(ctx, true));
    let io = StageIo {
        name: stage.into(),
        params: infer_params(ctx),
        inputs,
        outputs: vec![(out_name.to_string(), out_path.clone())],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        return Ok(());
    }

    let templates = load_templates(ctx)?;
    let gateway = build_gateway(ctx)?;
    let questions = read_questions(dataset)?;
    let summary = engine::run_dataset(
        &gateway,
        structure,
        &templates,
        &questions,
        ctx.config.samples,
        &out_path,
        ctx.config.provider.max_parallel,
    )
    .await?;
    ctx.event(
        stage,
        "inference_finished",
        &format!(
            "{} processed, {} resumed, {} samples dropped",
            summary.processed, summary.skipped, summary.dropped_samples
        ),
    );
    ctx.commit_stage(&io)
}

pub async fn cmd_infer(
    ctx: &mut RunContext,
    split: &str,
    dataset: Option<PathBuf>,
    records_out: Option<PathBuf>,
) -> Result<(), CliError> {
    // A custom dataset defines its own stage, named after the output file.
    if let Some(dataset) = dataset {
        let out = records_out.ok_or_else(|| {
            CliError::Config("--dataset needs --records-out to name the output".into())
        })?;
        let out_name = out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Config(format!("bad --records-out {}", out.display())))?;
        let stage = format!("infer-{}", file_stem(&out));
        let structure = ensure_structure(ctx)?;
        return run_infer(ctx, &structure, &stage, &dataset, &out_name).await;
    }
    if records_out.is_some() {
        return Err(CliError::Config("--records-out needs --dataset".into()));
    }

    let structure = ensure_structure(ctx)?;
    let dev = ctx.config.dev_data.clone();
    let test = ctx.config.test_data.clone();
    match split {
        "dev" => {
            let path = dev.ok_or_else(|| CliError::Config("no dev_data configured".into()))?;
            run_infer(ctx, &structure, "infer-dev", &path, "records-dev.jsonl").await
        }
        "test" => {
            let path = test.ok_or_else(|| CliError::Config("no test_data configured".into()))?;
            run_infer(ctx, &structure, "infer-test", &path, "records-test.jsonl").await
        }
        "both" => {
            let dev = dev.ok_or_else(|| CliError::Config("no dev_data configured".into()))?;
            let test = test.ok_or_else(|| CliError::Config("no test_data configured".into()))?;
            run_infer(ctx, &structure, "infer-dev", &dev, "records-dev.jsonl").await?;
            run_infer(ctx, &structure, "infer-test", &test, "records-test.jsonl").await
        }
        other => {
            Err(CliError::Config(format!("--split must be dev, test, or both, got {other:?}")))
        }
    }
}

// ---------------------------------------------------------------------------
// aggregate

fn build_posterior_rows(
    records: &[QuestionRecord],
    questions: &[QuestionInput],
    fit: Option<&FitArtifact>,
) -> Result<Vec<PosteriorRow>, CliError> {
    let by_id: BTreeMap<&str, &QuestionInput> =
        questions.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        let question = by_id.get(record.question_id.as_str()).ok_or_else(|| {
            CliError::Validation(format!(
                "record {} has no matching question in the dataset",
                record.question_id
            ))
        })?;
        let options = question.options.clone().ok_or_else(|| {
            CliError::Validation(format!(
                "question {} is open-ended; aggregation needs a closed option set",
                record.question_id
            ))
        })?;
        if record.vpgm_dist.len() != options.len() {
            return Err(CliError::Validation(format!(
                "record {} carries {} probabilities for {} options",
                record.question_id,
                record.vpgm_dist.len(),
                options.len()
            )));
        }
        let mut counts = vec![0u64; options.len()];
        for sample in &record.samples {
            if let Some(i) = sample.matched_option {
                if i < counts.len() {
                    counts[i] += 1;
                }
            }
        }
        let gold = match &question.gold_label {
            Some(label) => Some(match_label(label, &options).ok_or_else(|| {
                CliError::Validation(format!(
                    "question {}: gold label {label:?} matches no option",
                    record.question_id
                ))
            })?),
            None => None,
        };
        let (lambda, posterior) = match fit {
            Some(artifact) => {
                let input = DirichletPosteriorInput::new(
                    counts.clone(),
                    record.vpgm_dist.clone(),
                    artifact.lambda,
                );
                (Some(artifact.lambda), Some(vpgm::calibrate::posterior_mean(&input)?.probs))
            }
            None => (None, None),
        };
        rows.push(PosteriorRow {
            question_id: record.question_id.clone(),
            options,
            counts,
            prior: record.vpgm_dist.clone(),
            gold,
            gold_label: question.gold_label.clone(),
            baseline_conf: record.baseline_conf,
            baseline_label: record.baseline_label.clone(),
            chosen_label: record.chosen_label.clone(),
            dropped: record.dropped,
            lambda,
            posterior,
        });
    }
    Ok(rows)
}

pub fn cmd_aggregate(
    ctx: &mut RunContext,
    split: Option<&str>,
    records: Option<PathBuf>,
    dataset: Option<PathBuf>,
    fit: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (stage, records_path, dataset_path, out_path) = match split {
        Some(split @ ("dev" | "test")) => {
            let default_dataset = if split == "dev" {
                ctx.config.dev_data.clone()
            } else {
                ctx.config.test_data.clone()
            };
            let dataset = dataset
                .or(default_dataset)
                .ok_or_else(|| CliError::Config(format!("no {split}_data configured")))?;
            (
                format!("aggregate-{split}"),
                records.unwrap_or_else(|| ctx.dir.join(format!("records-{split}.jsonl"))),
                dataset,
                out.unwrap_or_else(|| ctx.dir.join(format!("posteriors-{split}.jsonl"))),
            )
        }
        Some(other) => {
            return Err(CliError::Config(format!("--split must be dev or test, got {other:?}")));
        }
        None => {
            let records = records.ok_or_else(|| {
                CliError::Config("aggregate needs --split or an explicit --records file".into())
            })?;
            let dataset = dataset.ok_or_else(|| {
                CliError::Config("--records needs --dataset for options and gold labels".into())
            })?;
            let out = out.unwrap_or_else(|| {
                ctx.dir.join(format!("posteriors-{}.jsonl", file_stem(&records)))
            });
            (format!("aggregate-{}", file_stem(&out)), records, dataset, out)
        }
    };
    let out_name = out_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Config(format!("bad output path {}", out_path.display())))?;

    let mut inputs = vec![
        ("records".to_string(), records_path.clone()),
        ("dataset".to_string(), dataset_path.clone()),
    ];
    if let Some(fit) = &fit {
        inputs.push(("fit".to_string(), fit.clone()));
    }
    let io = StageIo {
        name: stage,
        params: json!({ "with_fit": fit.is_some() }),
        inputs,
        outputs: vec![(out_name, out_path.clone())],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        return Ok(());
    }

    let records = read_records(&records_path)?;
    let questions = read_questions(&dataset_path)?;
    let artifact: Option<FitArtifact> = match &fit {
        Some(path) => Some(read_json(path, "fit artifact")?),
        None => None,
    };
    let rows = build_posterior_rows(&records, &questions, artifact.as_ref())?;
    write_jsonl(&out_path, &rows)?;
    ctx.commit_stage(&io)
}

// ---------------------------------------------------------------------------
// fit-lambda

fn calibration_rows(rows: &[PosteriorRow], path: &Path) -> Result<Vec<CalibrationRow>, CliError> {
    rows.iter()
        .map(|row| {
            let gold = row.gold.ok_or_else(|| {
                CliError::Validation(format!(
                    "{}: question {} has no gold label; calibration needs one",
                    path.display(),
                    row.question_id
                ))
            })?;
            Ok(CalibrationRow { counts: row.counts.clone(), prior: row.prior.clone(), gold })
        })
        .collect()
}

pub fn cmd_fit(
    ctx: &mut RunContext,
    records: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let posteriors = records.unwrap_or_else(|| ctx.dir.join("posteriors-dev.jsonl"));
    let out_path = out.unwrap_or_else(|| ctx.dir.join(FIT_FILE));
    let out_name = out_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Config(format!("bad output path {}", out_path.display())))?;
    let io = StageIo {
        name: "fit-lambda".into(),
        params: json!({
            "lambda_init": ctx.config.lambda_init,
            "beta": ctx.config.beta,
        }),
        inputs: vec![("posteriors".to_string(), posteriors.clone())],
        outputs: vec![(out_name, out_path.clone())],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        return Ok(());
    }

    let rows: Vec<PosteriorRow> = read_jsonl(&posteriors, "posteriors")?;
    let mut batch = CalibrationBatch::new(calibration_rows(&rows, &posteriors)?);
    batch.beta = ctx.config.beta;
    let fit = fit_lambda(&batch, ctx.config.lambda_init, &LbfgsOptions::default())?;
    let loss = calibration_loss(&batch, fit.lambda)?;
    let artifact = FitArtifact {
        lambda: fit.lambda,
        beta: batch.beta,
        epsilon_smooth: batch.epsilon_smooth,
        iterations: fit.iterations,
        converged: fit.converged,
        final_loss: fit.final_loss,
        final_ece_class: loss.alignment,
    };
    write_text(&out_path, &pretty_json(&artifact))?;
    ctx.event(
        "fit-lambda",
        "fit_finished",
        &format!(
            "lambda {:.6} after {} iterations (converged: {})",
            fit.lambda, fit.iterations, fit.converged
        ),
    );
    ctx.commit_stage(&io)
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluationInputs {
    bayes: Vec<ScoredPrediction>,
    vpgm_prior: Vec<ScoredPrediction>,
    baseline: Vec<ScoredPrediction>,
    k: usize,
}

fn scored_predictions(
    rows: &[PosteriorRow],
    lambda: f64,
    path: &Path,
) -> Result<EvaluationInputs, CliError> {
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{} holds no rows", path.display())));
    }
    let k = rows[0].options.len();
    let mut bayes = Vec::with_capacity(rows.len());
    let mut vpgm_prior = Vec::with_capacity(rows.len());
    let mut baseline = Vec::with_capacity(rows.len());
    for row in rows {
        if row.options.len() != k {
            return Err(CliError::Validation(format!(
                "{}: question {} has {} options where the batch has {}",
                path.display(),
                row.question_id,
                row.options.len(),
                k
            )));
        }
        let gold = row.gold.ok_or_else(|| {
            CliError::Validation(format!(
                "{}: question {} has no gold label; evaluation needs one",
                path.display(),
                row.question_id
            ))
        })?;
        let input = DirichletPosteriorInput::new(row.counts.clone(), row.prior.clone(), lambda);
        let posterior = vpgm::calibrate::posterior_mean(&input)?.probs;
        bayes.push(ScoredPrediction::new(&row.question_id, posterior, gold)?);
        vpgm_prior.push(ScoredPrediction::new(&row.question_id, row.prior.clone(), gold)?);
        let correct = match_label(&row.baseline_label, &row.options) == Some(gold);
        baseline.push(ScoredPrediction::from_confidence(
            &row.question_id,
            row.baseline_conf,
            correct,
        )?);
    }
    Ok(EvaluationInputs { bayes, vpgm_prior, baseline, k })
}

fn accuracy(preds: &[ScoredPrediction]) -> f64 {
    preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64
}

fn method_metrics(preds: &[ScoredPrediction], bins: usize) -> Result<MethodMetrics, CliError> {
    let classwise = classwise_ece(preds, bins)?;
    Ok(MethodMetrics {
        accuracy: accuracy(preds),
        ece: ece(preds, bins)?,
        classwise_bin_free: classwise.bin_free,
        classwise_binned: classwise.binned,
    })
}

pub fn cmd_evaluate(
    ctx: &mut RunContext,
    records: Option<PathBuf>,
    fit: Option<PathBuf>,
    out: Option<PathBuf>,
    reliability_out: Option<PathBuf>,
    svg_out: Option<PathBuf>,
) -> Result<(), CliError> {
    let posteriors = records.unwrap_or_else(|| ctx.dir.join("posteriors-test.jsonl"));
    let fit_path = fit.unwrap_or_else(|| ctx.dir.join(FIT_FILE));
    let report_path = out.unwrap_or_else(|| ctx.dir.join(REPORT_FILE));
    let csv_path = reliability_out.unwrap_or_else(|| ctx.dir.join(REPORT_CSV_FILE));
    let svg_path = svg_out.unwrap_or_else(|| ctx.dir.join(RELIABILITY_SVG_FILE));
    let out_name = |path: &Path| -> Result<String, CliError> {
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Config(format!("bad output path {}", path.display())))
    };
    let io = StageIo {
        name: "evaluate".into(),
        params: json!({ "bins": ctx.config.bins }),
        inputs: vec![
            ("posteriors".to_string(), posteriors.clone()),
            ("fit".to_string(), fit_path.clone()),
        ],
        outputs: vec![
            (out_name(&report_path)?, report_path.clone()),
            (out_name(&csv_path)?, csv_path.clone()),
            (out_name(&svg_path)?, svg_path.clone()),
        ],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        return Ok(());
    }

    let rows: Vec<PosteriorRow> = read_jsonl(&posteriors, "posteriors")?;
    let artifact: FitArtifact = read_json(&fit_path, "fit artifact")?;
    let inputs = scored_predictions(&rows, artifact.lambda, &posteriors)?;
    let bins = ctx.config.bins;
    let reliability = reliability_table(&inputs.bayes, bins)?;
    let report = Report {
        n_questions: rows.len(),
        k: inputs.k,
        lambda: artifact.lambda,
        beta: artifact.beta,
        bins,
        bayes: method_metrics(&inputs.bayes, bins)?,
        vpgm: method_metrics(&inputs.vpgm_prior, bins)?,
        consistency_baseline: BaselineMetrics {
            accuracy: accuracy(&inputs.baseline),
            ece: ece(&inputs.baseline, bins)?,
        },
        reliability: reliability.clone(),
    };
    write_text(&report_path, &pretty_json(&report))?;
    write_text(&csv_path, &reliability_csv(&reliability))?;
    write_text(&svg_path, &reliability_svg(&reliability))?;
    ctx.commit_stage(&io)
}

// ---------------------------------------------------------------------------
// control + analyze-latents

pub fn cmd_control(
    ctx: &mut RunContext,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let dataset = data
        .or_else(|| ctx.config.test_data.clone())
        .ok_or_else(|| CliError::Config("no test_data configured".into()))?;
    let out_path = out.unwrap_or_else(|| ctx.dir.join(CONTROL_FILE));
    let out_name = out_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Config(format!("bad output path {}", out_path.display())))?;
    let io = StageIo {
        name: "control".into(),
        params: json!({ "seed": ctx.config.seed }),
        inputs: vec![("dataset".to_string(), dataset.clone())],
        outputs: vec![(out_name, out_path.clone())],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        return Ok(());
    }

    let questions = read_questions(&dataset)?;
    let noisy = make_noisy_control(&questions, ctx.config.seed)?;
    write_jsonl(&out_path, &noisy)?;
    ctx.commit_stage(&io)
}

/// Resolves whether a record's chosen label hits the dataset's gold label.
fn correctness(
    record: &QuestionRecord,
    questions: &BTreeMap<&str, &QuestionInput>,
    path: &Path,
) -> Result<bool, CliError> {
    let question = questions.get(record.question_id.as_str()).ok_or_else(|| {
        CliError::Validation(format!(
            "{}: record {} has no matching question in the dataset",
            path.display(),
            record.question_id
        ))
    })?;
    let options = question.options.as_deref().ok_or_else(|| {
        CliError::Validation(format!(
            "question {} is open-ended; latent analysis needs a closed option set",
            record.question_id
        ))
    })?;
    let gold_label = question.gold_label.as_deref().ok_or_else(|| {
        CliError::Validation(format!(
            "question {} has no gold label; latent analysis needs one",
            record.question_id
        ))
    })?;
    let gold = match_label(gold_label, options).ok_or_else(|| {
        CliError::Validation(format!(
            "question {}: gold label {gold_label:?} matches no option",
            record.question_id
        ))
    })?;
    Ok(match_label(&record.chosen_label, options) == Some(gold))
}

pub fn cmd_analyze(
    ctx: &mut RunContext,
    clean: Option<PathBuf>,
    noisy: Option<PathBuf>,
    var: Option<String>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let clean_path = clean.unwrap_or_else(|| ctx.dir.join("records-test.jsonl"));
    let noisy_path = noisy.unwrap_or_else(|| ctx.dir.join("records-noisy.jsonl"));
    let mismatch_var = var.unwrap_or_else(|| ctx.config.mismatch_var.clone());
    let dataset = dataset
        .or_else(|| ctx.config.test_data.clone())
        .ok_or_else(|| CliError::Config("no test_data configured".into()))?;
    let out_path = out.unwrap_or_else(|| ctx.dir.join(LATENT_ANALYSIS_FILE));
    let out_name = out_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Config(format!("bad output path {}", out_path.display())))?;
    let io = StageIo {
        name: "analyze-latents".into(),
        params: json!({
            "mismatch_var": mismatch_var,
            "threshold": ctx.config.threshold,
        }),
        inputs: vec![
            ("clean_records".to_string(), clean_path.clone()),
            ("noisy_records".to_string(), noisy_path.clone()),
            ("dataset".to_string(), dataset.clone()),
        ],
        outputs: vec![(out_name, out_path.clone())],
    };
    if let StagePlan::Skip = ctx.plan_stage(&io)? {
        return Ok(());
    }

    let questions = read_questions(&dataset)?;
    let by_id: BTreeMap<&str, &QuestionInput> =
        questions.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let to_latents = |path: &Path| -> Result<Vec<QuestionLatents>, CliError> {
        read_records(path)?
            .iter()
            .map(|record| {
                let correct = correctness(record, &by_id, path)?;
                Ok(QuestionLatents::from_record(record, correct))
            })
            .collect()
    };
    let clean = to_latents(&clean_path)?;
    let noisy = to_latents(&noisy_path)?;
    let analysis =
        latent_analysis(&clean, &noisy, &VarId::new(mismatch_var), ctx.config.threshold)?;
    write_text(&out_path, &pretty_json(&analysis))?;
    ctx.event(
        "analyze-latents",
        "analysis_finished",
        &format!(
            "clean identification {:.3}, noisy identification {:.3}",
            analysis.clean_identification, analysis.noisy_identification
        ),
    );
    ctx.commit_stage(&io)
}

// ---------------------------------------------------------------------------
// pipeline + report

pub async fn cmd_pipeline(ctx: &mut RunContext) -> Result<(), CliError> {
    if ctx.config.dev_data.is_none() || ctx.config.test_data.is_none() {
        return Err(CliError::Config(
            "the pipeline needs both dev_data and test_data configured".into(),
        ));
    }
    cmd_infer(ctx, "both", None, None).await?;
    cmd_aggregate(ctx, Some("dev"), None, None, None, None)?;
    cmd_aggregate(ctx, Some("test"), None, None, None, None)?;
    cmd_fit(ctx, None, None)?;
    cmd_evaluate(ctx, None, None, None, None, None)?;
    ctx.event("pipeline", "pipeline_completed", "report written");
    Ok(())
}

/// Prints the report human-readably. Read-only: takes no lock and touches no
/// manifest.
pub fn cmd_report(run_dir: &Path, report: Option<PathBuf>) -> Result<String, CliError> {
    let path = report.unwrap_or_else(|| run_dir.join(REPORT_FILE));
    let report: Report = read_json(&path, "report")?;
    let mut out = String::new();
    out.push_str(&format!(
        "Evaluation over {} questions ({} options each)\n",
        report.n_questions, report.k
    ));
    out.push_str(&format!(
        "lambda = {:.4}   beta = {:.4}   bins = {}\n\n",
        report.lambda, report.beta, report.bins
    ));
    out.push_str(&format!(
        "{:<22} {:>9} {:>9} {:>16} {:>16}\n",
        "method", "accuracy", "ece", "classwise(free)", "classwise(binned)"
    ));
    for (name, m) in [("bayes posterior", &report.bayes), ("vpgm expectation", &report.vpgm)] {
        out.push_str(&format!(
            "{:<22} {:>9.4} {:>9.4} {:>16.4} {:>16.4}\n",
            name, m.accuracy, m.ece, m.classwise_bin_free, m.classwise_binned
        ));
    }
    out.push_str(&format!(
        "{:<22} {:>9.4} {:>9.4} {:>16} {:>16}\n\n",
        "consistency baseline",
        report.consistency_baseline.accuracy,
        report.consistency_baseline.ece,
        "-",
        "-"
    ));
    out.push_str("reliability of the bayes posterior:\n");
    out.push_str(&format!(
        "{:>4} {:>12} {:>6} {:>12} {:>9} {:>8}\n",
        "bin", "range", "count", "confidence", "accuracy", "gap"
    ));
    for row in &report.reliability {
        out.push_str(&format!(
            "{:>4} {:>5.2}-{:<6.2} {:>6} {:>12.4} {:>9.4} {:>8.4}\n",
            row.bin, row.lo, row.hi, row.count, row.mean_confidence, row.accuracy, row.gap
        ));
    }
    Ok(out)
}
