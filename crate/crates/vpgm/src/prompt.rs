//! Prompt construction and reply parsing.
//!
//! Two prompts are rendered from UTF-8 templates with `{{placeholder}}`
//! substitution: a structure-discovery prompt assembled from a
//! [`DiscoverySpec`], and a per-question inference prompt that walks the
//! latent variables of a [`PgmStructure`] in topological order. Replies come
//! back as free text and are parsed into [`ParsedReply`] records: the last
//! parseable fenced JSON block wins, with a line-oriented regex fallback for
//! replies that ignore the format instructions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::engine::{option_letter, QuestionInput};
use crate::graph::{DependencyEdge, GraphError, PgmStructure, VarId};

/// Default templates compiled into the library.
const DISCOVERY_TEMPLATE: &str = include_str!("../templates/discovery.txt");
const INFERENCE_TEMPLATE: &str = include_str!("../templates/inference.txt");

/// Everything needed to ask a model to propose a PGM structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySpec {
    pub task_description: String,
    /// Worked examples shown to the model as (input, output) pairs. May be
    /// empty.
    #[serde(default)]
    pub example_pairs: Vec<(String, String)>,
    /// Free-form background information; an empty string omits the section.
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub constraints: DiscoveryConstraints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConstraints {
    /// Upper bound on the number of latent variables the model may introduce.
    pub max_latents: usize,
    /// Edges the proposed structure must contain.
    #[serde(default)]
    pub fixed_edges: Vec<DependencyEdge>,
}

impl Default for DiscoveryConstraints {
    fn default() -> Self {
        DiscoveryConstraints { max_latents: 4, fixed_edges: Vec::new() }
    }
}

/// A fully rendered inference prompt, tied to the structure that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct InferencePrompt {
    pub text: String,
    /// Content hash of the source structure.
    pub structure_id: String,
    pub question_id: String,
}

/// One model reply reduced to machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedReply {
    /// The label the model committed to: an option text, a letter, or a
    /// 1-based index — resolution against the option list happens downstream.
    pub answer_label: String,
    /// Per-latent probabilities, keyed by variable id.
    #[serde(default)]
    pub latent_probs: BTreeMap<VarId, f64>,
    /// The sample's probability for its final answer. When the reply carries
    /// no usable number this is resolved from the verbalized confidence, and
    /// failing that defaults to 1.0 (a bare answer is treated as a hard vote).
    pub final_prob: f64,
    /// Self-reported confidence, when the reply stated one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalized_confidence: Option<f64>,
    /// True when at least one latent variable of the structure received no
    /// probability. Partial replies still count for answer aggregation but
    /// are excluded from latent-level analysis.
    #[serde(default)]
    pub partial: bool,
    /// Human-readable notes about clamped values, ignored keys, and fallbacks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// The reply exactly as the model produced it.
    pub raw_text: String,
}

impl ParsedReply {
    /// Renders the reply as the canonical fenced JSON block — the exact shape
    /// the inference prompt requests. `parse_reply` recovers the original
    /// fields from this rendering.
    ///
    /// # Panics
    /// Panics if any probability is non-finite; parsed replies never are.
    pub fn to_canonical_block(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("answer".into(), serde_json::Value::String(self.answer_label.clone()));
        let probs: serde_json::Map<String, serde_json::Value> = self
            .latent_probs
            .iter()
            .map(|(id, p)| (id.as_str().to_string(), json_number(*p)))
            .collect();
        obj.insert("latent_probs".into(), serde_json::Value::Object(probs));
        obj.insert("final_prob".into(), json_number(self.final_prob));
        if let Some(c) = self.verbalized_confidence {
            obj.insert("confidence".into(), json_number(c));
        }
        format!("```json\n{}\n```", serde_json::Value::Object(obj))
    }
}

fn json_number(x: f64) -> serde_json::Value {
    serde_json::Value::Number(serde_json::Number::from_f64(x).expect("probabilities are finite"))
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("invalid discovery spec: {0}")]
    InvalidSpec(String),
    #[error("invalid question: {0}")]
    InvalidQuestion(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cannot read template {path}: {source}")]
    TemplateRead {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("template uses unknown placeholder {{{{{name}}}}}")]
    UnresolvedPlaceholder { name: String },
    #[error("reply yields no answer label: {snippet:?}")]
    UnparseableReply { snippet: String },
}

/// The pair of prompt templates in use, either the built-in ones or a set
/// loaded from a directory (`discovery.txt` and `inference.txt`).
#[derive(Debug, Clone)]
pub struct TemplateSet {
    discovery: String,
    inference: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet { discovery: DISCOVERY_TEMPLATE.into(), inference: INFERENCE_TEMPLATE.into() }
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet::default()
    }

    /// Loads `discovery.txt` and `inference.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map_err(|source| PromptError::TemplateRead { path, source })
        };
        Ok(TemplateSet { discovery: read("discovery.txt")?, inference: read("inference.txt")? })
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").unwrap())
}

/// Replaces every `{{name}}` in `template` using `values`. A placeholder in
/// the template with no matching value is an error (it would silently leak
/// into the prompt otherwise); substituted values are never re-scanned.
fn substitute(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    for caps in placeholder_re().captures_iter(template) {
        let name = &caps[1];
        if !values.iter().any(|(k, _)| *k == name) {
            return Err(PromptError::UnresolvedPlaceholder { name: name.to_string() });
        }
    }
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    Ok(out)
}

/// Renders the structure-discovery prompt: four labeled sections in fixed
/// order (task description, input-output pairs, contextual information, prior
/// knowledge and constraints), ending with the PGM JSON reply contract. An
/// empty context omits the Contextual Information section entirely.
pub fn build_discovery_prompt(
    spec: &DiscoverySpec,
    templates: &TemplateSet,
) -> Result<String, PromptError> {
    if spec.constraints.max_latents == 0 {
        return Err(PromptError::InvalidSpec("max_latents must be at least 1".into()));
    }

    let example_pairs = if spec.example_pairs.is_empty() {
        "(none provided)".to_string()
    } else {
        let mut block = String::new();
        for (i, (input, output)) in spec.example_pairs.iter().enumerate() {
            if i > 0 {
                block.push('\n');
            }
            write!(block, "{}. Input: {input}\n   Output: {output}", i + 1).unwrap();
        }
        block
    };

    let context_section = if spec.context.trim().is_empty() {
        String::new()
    } else {
        format!("## Contextual Information\n{}\n\n", spec.context.trim())
    };

    let fixed_edges_block: String = spec
        .constraints
        .fixed_edges
        .iter()
        .map(|e| format!("- The structure must contain the edge {e}.\n"))
        .collect();

    substitute(
        &templates.discovery,
        &[
            ("task_description", spec.task_description.as_str()),
            ("example_pairs", &example_pairs),
            ("context_section", &context_section),
            ("max_latents", &spec.constraints.max_latents.to_string()),
            ("fixed_edges_block", &fixed_edges_block),
        ],
    )
}

/// Renders the per-question inference prompt. The reasoning-steps section
/// names each latent variable exactly once, in topological order; parents are
/// referred to by step number rather than by id. A structure with no latent
/// variables degenerates to a single direct-answer step.
pub fn build_inference_prompt(
    structure: &PgmStructure,
    question: &QuestionInput,
    templates: &TemplateSet,
) -> Result<InferencePrompt, PromptError> {
    if question.body.trim().is_empty() {
        return Err(PromptError::InvalidQuestion(format!(
            "question {} has an empty body",
            question.question_id
        )));
    }
    let topo = structure.topological_order()?;
    let latents: Vec<&VarId> = topo.iter().filter(|id| id.is_latent()).collect();
    let step_of: BTreeMap<&VarId, usize> =
        latents.iter().enumerate().map(|(i, id)| (*id, i + 1)).collect();

    let mut steps = String::new();
    for (i, id) in latents.iter().enumerate() {
        let info = structure.variable(id);
        let name_part = match info.map(|v| v.name.trim()) {
            Some(name) if !name.is_empty() => format!(" ({name})"),
            _ => String::new(),
        };
        let instruction = structure
            .cpds
            .iter()
            .find(|c| &&c.child == id)
            .map(|c| c.description.trim())
            .filter(|d| !d.is_empty())
            .or_else(|| info.map(|v| v.description.trim()).filter(|d| !d.is_empty()))
            .unwrap_or("Assess whether this condition holds.")
            .to_string();
        let given = given_phrase(structure, id, &step_of);
        writeln!(
            steps,
            "{}. {id}{name_part}: {} {given}, state the probability (0 to 1) that this condition holds.",
            i + 1,
            ensure_period(&instruction),
        )
        .unwrap();
    }
    if latents.is_empty() {
        steps.push_str(
            "1. Final answer: answer the question directly and state the probability (0 to 1) that your answer is correct.",
        );
    } else {
        write!(
            steps,
            "{}. Final answer: weighing the assessments above, choose your answer and state the probability (0 to 1) that it is correct.",
            latents.len() + 1
        )
        .unwrap();
    }

    let mut aux_sections = String::new();
    for (header, value) in [
        ("Image Caption", &question.caption),
        ("Rationale", &question.rationale),
        ("Retrieved Context", &question.retrieved_context),
    ] {
        if let Some(text) = value.as_deref().map(str::trim).filter(|t| !t.is_empty()) {
            write!(aux_sections, "## {header}\n{text}\n\n").unwrap();
        }
    }

    let (options_section, answer_instruction) = match &question.options {
        Some(options) => {
            let mut section = String::from("## Options\n");
            for (i, option) in options.iter().enumerate() {
                writeln!(section, "{}. {option}", option_letter(i)).unwrap();
            }
            section.push('\n');
            (section, "\"answer\" must be exactly one of the option labels above.")
        }
        None => (String::new(), "\"answer\" must be a short phrase answering the question."),
    };

    let reply_schema = {
        let probs = latents
            .iter()
            .map(|id| format!("\"{id}\": <probability>"))
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            "{{\"answer\": \"<label>\", \"latent_probs\": {{{probs}}}, \"final_prob\": <probability>, \"confidence\": <probability>}}"
        )
    };

    let structure_id = structure.structure_hash();
    let text = substitute(
        &templates.inference,
        &[
            ("task_description", structure.task_description.trim()),
            ("question", question.body.trim()),
            ("aux_sections", &aux_sections),
            ("options_section", &options_section),
            ("steps", &steps),
            ("answer_instruction", answer_instruction),
            ("reply_schema", &reply_schema),
            ("structure_id", &structure_id),
        ],
    )?;

    Ok(InferencePrompt { text, structure_id, question_id: question.question_id.clone() })
}

fn ensure_period(text: &str) -> String {
    let t = text.trim_end();
    if t.ends_with(['.', '!', '?', ':']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

/// "Given the question and context above and your assessments in steps 1 and
/// 2" — parents referenced by step number so each latent id appears exactly
/// once in the reasoning-steps section.
fn given_phrase(structure: &PgmStructure, id: &VarId, step_of: &BTreeMap<&VarId, usize>) -> String {
    let parents = structure.parents_of(id).unwrap_or_default();
    let has_observed = parents.iter().any(VarId::is_observed);
    let mut parent_steps: Vec<usize> =
        parents.iter().filter_map(|p| step_of.get(p).copied()).collect();
    parent_steps.sort_unstable();

    let mut refs: Vec<String> = Vec::new();
    if has_observed {
        refs.push("the question and context above".into());
    }
    match parent_steps.len() {
        0 => {}
        1 => refs.push(format!("your assessment in step {}", parent_steps[0])),
        _ => {
            let (last, init) = parent_steps.split_last().unwrap();
            let list = init.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
            refs.push(format!("your assessments in steps {list} and {last}"));
        }
    }
    match refs.len() {
        0 => "Given the question".into(),
        1 => format!("Given {}", refs[0]),
        _ => format!("Given {} and {}", refs[0], refs[1]),
    }
}

fn fenced_block_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```(?:[A-Za-z0-9_+-]+[ \t]*\r?\n)?(.*?)```").unwrap())
}

fn prob_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?m)^[ \t]*(?:[-*][ \t]+)?"?([A-Za-z_][A-Za-z0-9_]*)"?[ \t]*[:=][ \t]*([-+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][-+]?[0-9]+)?)[ \t]*[,.;]?[ \t]*$"#,
        )
        .unwrap()
    })
}

fn answer_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?im)^[ \t]*(?:[-*][ \t]+)?"?answer"?[ \t]*[:=][ \t]*(.+?)[ \t]*$"#).unwrap()
    })
}

/// Clamps a probability into [0,1], recording a warning when it had to move;
/// non-finite values are rejected entirely.
fn clamp_prob(value: f64, what: &str, warnings: &mut Vec<String>) -> Option<f64> {
    if !value.is_finite() {
        warnings.push(format!("{what} is not a finite number; ignored"));
        return None;
    }
    if value < 0.0 {
        warnings.push(format!("{what} {value} clamped to 0.0"));
        Some(0.0)
    } else if value > 1.0 {
        warnings.push(format!("{what} {value} clamped to 1.0"));
        Some(1.0)
    } else {
        Some(value)
    }
}

fn value_as_f64(value: &serde_json::Value) -> Option<f64> {
    match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn answer_from_json(value: &serde_json::Value) -> Option<String> {
    match value.get("answer")? {
        serde_json::Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Strips surrounding quotes and trailing sentence punctuation from a
/// regex-extracted answer.
fn clean_answer(raw: &str) -> String {
    let mut t = raw.trim();
    t = t.trim_end_matches(['.', ',', ';']).trim_end();
    if t.len() >= 2 {
        for quote in ['"', '\''] {
            if t.starts_with(quote) && t.ends_with(quote) {
                t = t[1..t.len() - 1].trim();
                break;
            }
        }
    }
    t.to_string()
}

/// Parses a raw model reply against `structure`.
///
/// Strategy one extracts the **last** fenced JSON block that is an object
/// with a usable `answer`; strategy two falls back to line-oriented regex
/// extraction of `<id>: <float>` lines and the last `answer: <label>` line.
/// All probabilities are clamped into [0,1] (with warnings); probabilities
/// for ids the structure does not declare as latents are dropped with a
/// warning. The reply is marked `partial` when any declared latent id is
/// missing.
pub fn parse_reply(raw: &str, structure: &PgmStructure) -> Result<ParsedReply, PromptError> {
    let mut warnings: Vec<String> = Vec::new();
    let latent_ids = structure.latent_ids();

    let mut answer: Option<String> = None;
    let mut latent_probs: BTreeMap<VarId, f64> = BTreeMap::new();
    let mut final_prob: Option<f64> = None;
    let mut confidence: Option<f64> = None;

    // Strategy one: the last fenced JSON object carrying an answer wins.
    let blocks: Vec<&str> =
        fenced_block_re().captures_iter(raw).filter_map(|c| c.get(1)).map(|m| m.as_str()).collect();
    for block in blocks.iter().rev() {
        let mut text = block.trim();
        // ```json{...}``` puts the language tag on the payload line.
        if let Some(rest) = text.strip_prefix("json") {
            let rest = rest.trim_start();
            if rest.starts_with('{') {
                text = rest;
            }
        }
        let Ok(value) = serde_json::from_str::<serde_json::Value>(text) else {
            continue;
        };
        if !value.is_object() {
            continue;
        }
        let Some(found) = answer_from_json(&value) else {
            continue;
        };
        answer = Some(found);
        if let Some(probs) = value.get("latent_probs").and_then(|v| v.as_object()) {
            for (key, val) in probs {
                let Some(x) = value_as_f64(val) else {
                    warnings.push(format!("latent probability {key} is not a number; ignored"));
                    continue;
                };
                let id = VarId::new(key.as_str());
                if latent_ids.contains(&id) {
                    if let Some(p) =
                        clamp_prob(x, &format!("latent probability {key}"), &mut warnings)
                    {
                        latent_probs.insert(id, p);
                    }
                } else {
                    warnings.push(format!("reply mentions unknown latent {key}; ignored"));
                }
            }
        }
        final_prob = value
            .get("final_prob")
            .and_then(value_as_f64)
            .and_then(|x| clamp_prob(x, "final_prob", &mut warnings));
        confidence = value
            .get("confidence")
            .and_then(value_as_f64)
            .and_then(|x| clamp_prob(x, "confidence", &mut warnings));
        break;
    }

    // Strategy two: line-oriented extraction over the whole reply.
    if answer.is_none() {
        for caps in prob_line_re().captures_iter(raw) {
            let key = &caps[1];
            let Ok(x) = caps[2].parse::<f64>() else { continue };
            match key {
                "final_prob" => {
                    final_prob = clamp_prob(x, "final_prob", &mut warnings);
                }
                "confidence" => {
                    confidence = clamp_prob(x, "confidence", &mut warnings);
                }
                _ => {
                    let id = VarId::new(key);
                    if latent_ids.contains(&id) {
                        if let Some(p) =
                            clamp_prob(x, &format!("latent probability {key}"), &mut warnings)
                        {
                            latent_probs.insert(id, p);
                        }
                    }
                }
            }
        }
        for caps in answer_line_re().captures_iter(raw).collect::<Vec<_>>().into_iter().rev() {
            let cleaned = clean_answer(&caps[1]);
            if !cleaned.is_empty() {
                answer = Some(cleaned);
                break;
            }
        }
    }

    let Some(answer_label) = answer else {
        return Err(PromptError::UnparseableReply { snippet: snippet_of(raw) });
    };

    let final_prob = match (final_prob, confidence) {
        (Some(p), _) => p,
        (None, Some(c)) => {
            warnings.push("final_prob missing; using the verbalized confidence".into());
            c
        }
        (None, None) => {
            warnings.push(
                "reply carries no probability for the final answer; treating the bare answer as certain".into(),
            );
            1.0
        }
    };

    let partial = latent_ids.iter().any(|id| !latent_probs.contains_key(id));
    for warning in &warnings {
        log::warn!("parse_reply: {warning}");
    }

    Ok(ParsedReply {
        answer_label,
        latent_probs,
        final_prob,
        verbalized_confidence: confidence,
        partial,
        warnings,
        raw_text: raw.to_string(),
    })
}

/// Extracts a proposed structure from a discovery reply. The last fenced
/// block that parses as a structure wins; a bare-JSON reply (no fence) is
/// accepted whole.
pub fn parse_structure_reply(raw: &str) -> Result<PgmStructure, PromptError> {
    let blocks: Vec<&str> =
        fenced_block_re().captures_iter(raw).filter_map(|c| c.get(1)).map(|m| m.as_str()).collect();
    for block in blocks.iter().rev() {
        let mut text = block.trim();
        if let Some(rest) = text.strip_prefix("json") {
            let rest = rest.trim_start();
            if rest.starts_with('{') {
                text = rest;
            }
        }
        if let Ok(structure) = PgmStructure::from_json(text) {
            return Ok(structure);
        }
    }
    PgmStructure::from_json(raw.trim())
        .map_err(|_| PromptError::UnparseableReply { snippet: snippet_of(raw) })
}

/// Appends a rejected attempt and its violation list to the discovery
/// prompt, producing the single corrective re-prompt.
pub fn amend_discovery_prompt(base: &str, previous_reply: &str, violations: &str) -> String {
    format!(
        "{base}\n\n## Previous Attempt (Rejected)\n{previous_reply}\n\n\
         The structure above was rejected for these reasons:\n{violations}\n\n\
         Reply again with a corrected structure in the same JSON format, \
         fixing every issue listed."
    )
}

fn snippet_of(raw: &str) -> String {
    let mut snippet: String = raw.chars().take(80).collect();
    if snippet.len() < raw.len() {
        snippet.push('…');
    }
    snippet
}
