//! Per-question pipeline orchestration.
//!
//! For each question the engine renders the inference prompt, draws M samples
//! through the gateway, parses them, and aggregates: the expected answer
//! distribution is the unweighted mean over samples of each sample's implied
//! distribution (its stated probability on its chosen label, with the
//! remaining mass spread uniformly over the other labels), and the
//! self-consistency baseline combines the majority vote's agreement fraction
//! with the mean confidence of the agreeing samples. Dataset runs stream
//! questions concurrently, persist records as JSON Lines, and resume by
//! skipping question ids already present in the output file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::graph::PgmStructure;
use crate::numeric;
use crate::prompt::{build_inference_prompt, parse_reply, ParsedReply, PromptError, TemplateSet};

/// Default number of samples drawn per question.
pub const DEFAULT_SAMPLES: usize = 3;

/// One dataset row: the observed input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInput {
    pub question_id: String,
    pub body: String,
    /// Answer labels for closed-ended questions (at least two), or absent for
    /// open-ended ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

impl QuestionInput {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.question_id.trim().is_empty() {
            return Err(EngineError::InvalidQuestion {
                id: self.question_id.clone(),
                message: "question_id must be non-empty".into(),
            });
        }
        if let Some(options) = &self.options {
            if options.len() < 2 {
                return Err(EngineError::InvalidQuestion {
                    id: self.question_id.clone(),
                    message: format!(
                        "closed-ended questions need at least 2 options, got {}",
                        options.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Provider-side bookkeeping for one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleMeta {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
}

/// One kept sample: the parsed reply plus its index and provider metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub reply: ParsedReply,
    /// The option index the answer label resolved to (closed-ended only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_option: Option<usize>,
    #[serde(default)]
    pub meta: SampleMeta,
}

/// Aggregated result for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub samples: Vec<SampleRecord>,
    /// Expected distribution over the K options; empty for open-ended
    /// questions, otherwise entries lie in [0,1] and sum to 1 within 1e-9.
    #[serde(default)]
    pub vpgm_dist: Vec<f64>,
    /// Self-consistency confidence: agreement fraction times the mean
    /// confidence of the agreeing samples.
    pub baseline_conf: f64,
    /// The majority-vote label the baseline confidence refers to.
    #[serde(default)]
    pub baseline_label: String,
    /// The argmax of `vpgm_dist` (for open-ended questions, the baseline
    /// label).
    pub chosen_label: String,
    /// Samples lost to failed completions, unparseable replies, or answer
    /// labels matching no option.
    #[serde(default)]
    pub dropped: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("sample count must be at least 1")]
    InvalidSampleCount,
    #[error("no usable samples")]
    EmptySamples,
    #[error("need at least 2 labels, got {k}")]
    InvalidLabelCount { k: usize },
    #[error("invalid question {id:?}: {message}")]
    InvalidQuestion { id: String, message: String },
    #[error("question {question_id:?}: all {attempted} samples were unusable")]
    AllSamplesUnparseable { question_id: String, attempted: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {message}")]
    MalformedLine { path: PathBuf, line: usize, message: String },
    #[error("duplicate question id {id:?} at line {line}")]
    DuplicateQuestionId { id: String, line: usize },
}

/// Display label for option `index` as shown in prompts: letters A–Z, then
/// 1-based numbers.
pub fn option_letter(index: usize) -> String {
    if index < 26 {
        ((b'A' + index as u8) as char).to_string()
    } else {
        (index + 1).to_string()
    }
}

fn strip_decorations(s: &str) -> &str {
    s.trim().trim_start_matches(['(', '[']).trim_end_matches([')', ']', '.', ':', ',', ';']).trim()
}

/// Resolves a reply's answer label against the option list: exact text, then
/// trimmed case-insensitive text, then a letter label ("B", "(b)", "option
/// B"), then a 1-based numeric label. `None` means the sample cannot be
/// attributed to an option and is dropped from aggregation.
pub fn match_label(answer: &str, options: &[String]) -> Option<usize> {
    if let Some(i) = options.iter().position(|o| o == answer) {
        return Some(i);
    }
    let trimmed = answer.trim();
    if let Some(i) = options.iter().position(|o| o.trim().eq_ignore_ascii_case(trimmed)) {
        return Some(i);
    }
    let mut label = strip_decorations(trimmed).to_string();
    let lower = label.to_ascii_lowercase();
    for prefix in ["option ", "choice "] {
        if lower.starts_with(prefix) {
            label = strip_decorations(&label[prefix.len()..]).to_string();
            break;
        }
    }
    if let Some(i) = options.iter().position(|o| o.trim().eq_ignore_ascii_case(&label)) {
        return Some(i);
    }
    let bytes = label.as_bytes();
    if bytes.len() == 1 && bytes[0].is_ascii_alphabetic() {
        let index = (bytes[0].to_ascii_uppercase() - b'A') as usize;
        return (index < options.len()).then_some(index);
    }
    if let Ok(n) = label.parse::<usize>() {
        if (1..=options.len()).contains(&n) {
            return Some(n - 1);
        }
    }
    None
}

/// The expected answer distribution over `k` labels: each sample contributes
/// a full distribution — its stated probability on its own label and the
/// residual `(1 − p)/(k − 1)` on every other label — and the result is the
/// unweighted per-label mean over samples. Samples without a resolved option
/// index are ignored.
pub fn vpgm_expectation(samples: &[SampleRecord], k: usize) -> Result<Vec<f64>, EngineError> {
    if k < 2 {
        return Err(EngineError::InvalidLabelCount { k });
    }
    let usable: Vec<(usize, f64)> = samples
        .iter()
        .filter_map(|s| s.matched_option.map(|i| (i, s.reply.final_prob)))
        .filter(|(i, _)| *i < k)
        .collect();
    if usable.is_empty() {
        return Err(EngineError::EmptySamples);
    }
    let residual = |p: f64| (1.0 - p) / (k as f64 - 1.0);
    Ok((0..k)
        .map(|label| {
            let contributions: Vec<f64> =
                usable.iter().map(|&(i, p)| if i == label { p } else { residual(p) }).collect();
            numeric::mean(&contributions)
        })
        .collect())
}

/// Majority-vote baseline. The chosen label is the most frequent answer
/// (ties: higher mean confidence, then lexicographically smallest label); the
/// confidence is the agreement fraction times the mean confidence of the
/// agreeing samples, where each sample's confidence is its verbalized
/// confidence or, failing that, its final probability.
///
/// With `options` present, samples are grouped by resolved option index and
/// the returned label is the option text; otherwise raw answer labels are
/// compared after trimming.
pub fn consistency_baseline(
    samples: &[SampleRecord],
    options: Option<&[String]>,
) -> Result<(String, f64), EngineError> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut total = 0usize;
    for sample in samples {
        let label = match (options, sample.matched_option) {
            (Some(opts), Some(i)) if i < opts.len() => opts[i].clone(),
            (Some(_), _) => continue,
            (None, _) => sample.reply.answer_label.trim().to_string(),
        };
        let confidence = sample.reply.verbalized_confidence.unwrap_or(sample.reply.final_prob);
        groups.entry(label).or_default().push(confidence);
        total += 1;
    }
    if total == 0 {
        return Err(EngineError::EmptySamples);
    }
    let mut best: Option<(usize, f64, String)> = None;
    for (label, confidences) in &groups {
        let count = confidences.len();
        let mean = numeric::mean(confidences);
        let better = match &best {
            None => true,
            Some((best_count, best_mean, _)) => {
                count > *best_count || (count == *best_count && mean > *best_mean)
            }
        };
        if better {
            best = Some((count, mean, label.clone()));
        }
    }
    let (count, mean, label) = best.expect("at least one group");
    Ok((label, (count as f64 / total as f64) * mean))
}

/// Runs one question end to end: renders the prompt, issues exactly `samples`
/// completion requests, drops (and counts) failed completions, unparseable
/// replies, and unmatched answer labels, then aggregates the kept samples.
/// Fails only when nothing usable remains.
pub async fn run_question(
    gateway: &Gateway,
    structure: &PgmStructure,
    templates: &TemplateSet,
    question: &QuestionInput,
    samples: usize,
) -> Result<QuestionRecord, EngineError> {
    if samples < 1 {
        return Err(EngineError::InvalidSampleCount);
    }
    question.validate()?;
    let prompt = build_inference_prompt(structure, question, templates)?;

    let requests: Vec<CompletionRequest> = (0..samples)
        .map(|i| CompletionRequest {
            prompt: prompt.text.clone(),
            seed: Some(i as u64),
            scenario_key: format!("{}/{}", question.question_id, i),
        })
        .collect();
    let responses = gateway.complete_batch(&requests).await;

    let mut kept: Vec<SampleRecord> = Vec::new();
    let mut dropped = 0usize;
    for (i, result) in responses.into_iter().enumerate() {
        let response = match result {
            Ok(response) => response,
            Err(err) => {
                log::warn!("question {}: sample {i} failed: {err}", question.question_id);
                dropped += 1;
                continue;
            }
        };
        let reply = match parse_reply(&response.text, structure) {
            Ok(reply) => reply,
            Err(err) => {
                log::warn!("question {}: sample {i}: {err}", question.question_id);
                dropped += 1;
                continue;
            }
        };
        let matched_option = match &question.options {
            Some(options) => match match_label(&reply.answer_label, options) {
                Some(index) => Some(index),
                None => {
                    log::warn!(
                        "question {}: sample {i}: answer {:?} matches no option",
                        question.question_id,
                        reply.answer_label
                    );
                    dropped += 1;
                    continue;
                }
            },
            None => None,
        };
        kept.push(SampleRecord {
            index: i,
            reply,
            matched_option,
            meta: SampleMeta {
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
                latency_ms: response.latency.as_millis() as u64,
            },
        });
    }
    if kept.is_empty() {
        return Err(EngineError::AllSamplesUnparseable {
            question_id: question.question_id.clone(),
            attempted: samples,
        });
    }

    match &question.options {
        Some(options) => {
            let vpgm_dist = vpgm_expectation(&kept, options.len())?;
            let chosen_label = options[numeric::argmax(&vpgm_dist).expect("k >= 2")].clone();
            let (baseline_label, baseline_conf) = consistency_baseline(&kept, Some(options))?;
            Ok(QuestionRecord {
                question_id: question.question_id.clone(),
                samples: kept,
                vpgm_dist,
                baseline_conf,
                baseline_label,
                chosen_label,
                dropped,
            })
        }
        None => {
            let (baseline_label, baseline_conf) = consistency_baseline(&kept, None)?;
            Ok(QuestionRecord {
                question_id: question.question_id.clone(),
                samples: kept,
                vpgm_dist: Vec::new(),
                baseline_conf,
                baseline_label: baseline_label.clone(),
                chosen_label: baseline_label,
                dropped,
            })
        }
    }
}

/// Outcome of a dataset run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Questions newly processed in this run.
    pub processed: usize,
    /// Questions skipped because their ids were already in the output file.
    pub skipped: usize,
    /// Total samples dropped across newly processed questions.
    pub dropped_samples: usize,
    /// Every record now in the output file, in file order.
    pub records: Vec<QuestionRecord>,
}

/// Reads a JSONL dataset of [`QuestionInput`]s, validating each row and
/// rejecting duplicate question ids. Blank lines are ignored.
pub fn read_questions(path: &Path) -> Result<Vec<QuestionInput>, EngineError> {
    let file =
        File::open(path).map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut questions = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let question: QuestionInput =
            serde_json::from_str(&line).map_err(|e| EngineError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        question.validate()?;
        if !seen.insert(question.question_id.clone()) {
            return Err(EngineError::DuplicateQuestionId {
                id: question.question_id.clone(),
                line: i + 1,
            });
        }
        questions.push(question);
    }
    Ok(questions)
}

/// Reads a JSONL file of [`QuestionRecord`]s (for resuming and evaluation).
pub fn read_records(path: &Path) -> Result<Vec<QuestionRecord>, EngineError> {
    let file =
        File::open(path).map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QuestionRecord =
            serde_json::from_str(&line).map_err(|e| EngineError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.question_id.clone()) {
            return Err(EngineError::DuplicateQuestionId {
                id: record.question_id.clone(),
                line: i + 1,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Runs every question not yet present in `out_path`, appending one JSON line
/// per record in dataset order. Questions run concurrently up to
/// `parallelism`, but records are written in order, so reruns are
/// byte-reproducible. A failing question aborts the run after the records
/// before it were persisted; a rerun resumes from there.
pub async fn run_dataset(
    gateway: &Gateway,
    structure: &PgmStructure,
    templates: &TemplateSet,
    questions: &[QuestionInput],
    samples: usize,
    out_path: &Path,
    parallelism: usize,
) -> Result<RunSummary, EngineError> {
    let parallelism = parallelism.max(1);
    let existing: Vec<QuestionRecord> =
        if out_path.exists() { read_records(out_path)? } else { Vec::new() };
    let done: BTreeSet<&str> = existing.iter().map(|r| r.question_id.as_str()).collect();
    let pending: Vec<&QuestionInput> =
        questions.iter().filter(|q| !done.contains(q.question_id.as_str())).collect();
    let skipped = questions.len() - pending.len();

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_path)
        .map_err(|source| EngineError::Io { path: out_path.to_path_buf(), source })?;

    let mut stream = futures::stream::iter(
        pending.iter().map(|q| run_question(gateway, structure, templates, q, samples)),
    )
    .buffered(parallelism);

    let mut summary = RunSummary { processed: 0, skipped, dropped_samples: 0, records: existing };
    while let Some(result) = stream.next().await {
        let record = result?;
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(file, "{line}")
            .map_err(|source| EngineError::Io { path: out_path.to_path_buf(), source })?;
        summary.processed += 1;
        summary.dropped_samples += record.dropped;
        summary.records.push(record);
    }
    Ok(summary)
}
