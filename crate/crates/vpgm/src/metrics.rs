//! Calibration and correlation metrics, plus the negative-control harness.
//!
//! Covers top-label expected calibration error over 10 equal-width bins,
//! class-wise calibration error (bin-free and binned), reliability-diagram
//! rows with CSV/SVG emission, Pearson correlation, the seeded
//! rationale-derangement control, and the per-latent clean-vs-noisy analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{QuestionInput, QuestionRecord};
use crate::graph::VarId;
use crate::numeric;

/// Confidence bins used throughout unless a caller overrides.
pub const DEFAULT_BINS: usize = 10;
/// Decision threshold for noise identification.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no predictions to score")]
    EmptyInput,
    #[error("bin count must be at least 1")]
    InvalidBins,
    #[error("input lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("correlation is undefined: an input is constant or has fewer than 2 points")]
    DegenerateInput,
    #[error("need at least 2 rationale-bearing records, found {found}")]
    TooFewRecords { found: usize },
    #[error("variable {var} is missing from the sampled latent probabilities")]
    MissingLatent { var: VarId },
    #[error("prediction {question_id:?}: {message}")]
    InvalidDistribution { question_id: String, message: String },
}

/// One scored prediction: a distribution over K labels plus the gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub question_id: String,
    /// Predicted distribution; empty for scalar-confidence baselines built
    /// with [`ScoredPrediction::from_confidence`].
    pub probs: Vec<f64>,
    /// Argmax of `probs` (ties resolve to the smallest index).
    pub chosen: usize,
    /// Max probability — the top-label confidence scored by `ece`.
    pub confidence: f64,
    pub gold: usize,
    pub correct: bool,
}

impl ScoredPrediction {
    /// Scores a full distribution against a gold label index.
    pub fn new(
        question_id: impl Into<String>,
        probs: Vec<f64>,
        gold: usize,
    ) -> Result<Self, MetricsError> {
        let question_id = question_id.into();
        let invalid = |message: String| MetricsError::InvalidDistribution {
            question_id: question_id.clone(),
            message,
        };
        if probs.len() < 2 {
            return Err(invalid(format!("need at least 2 labels, got {}", probs.len())));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("probability {bad} outside [0,1]")));
        }
        let total = numeric::pairwise_sum(&probs);
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("distribution sums to {total}, not 1")));
        }
        if gold >= probs.len() {
            return Err(invalid(format!(
                "gold index {gold} out of range for {} labels",
                probs.len()
            )));
        }
        let chosen = numeric::argmax(&probs).expect("probs non-empty");
        let confidence = probs[chosen];
        Ok(ScoredPrediction {
            question_id,
            probs,
            chosen,
            confidence,
            gold,
            correct: chosen == gold,
        })
    }

    /// Scores a scalar-confidence prediction (the verbalized-confidence
    /// baselines), where no full distribution exists. Such predictions work
    /// with `ece` and `reliability_table` but not with `classwise_ece`.
    pub fn from_confidence(
        question_id: impl Into<String>,
        confidence: f64,
        correct: bool,
    ) -> Result<Self, MetricsError> {
        let question_id = question_id.into();
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MetricsError::InvalidDistribution {
                question_id,
                message: format!("confidence {confidence} outside [0,1]"),
            });
        }
        Ok(ScoredPrediction {
            question_id,
            probs: Vec::new(),
            chosen: 0,
            confidence,
            gold: 0,
            correct,
        })
    }
}

/// One row of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin: usize,
    /// Bin covers [lo, hi) — the last bin also includes `hi`.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// 0.0 for an empty bin (never NaN).
    pub mean_confidence: f64,
    /// 0.0 for an empty bin (never NaN).
    pub accuracy: f64,
    pub gap: f64,
}

/// Maps a confidence in [0,1] to its bin; exactly 1.0 lands in the last bin.
fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor() as usize).min(bins - 1)
}

/// Builds all `bins` rows (empties included): per-bin mean confidence,
/// empirical accuracy, and |accuracy − confidence|.
pub fn reliability_table(
    preds: &[ScoredPrediction],
    bins: usize,
) -> Result<Vec<ReliabilityRow>, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    let mut members: Vec<Vec<&ScoredPrediction>> = vec![Vec::new(); bins];
    for pred in preds {
        members[bin_index(pred.confidence, bins)].push(pred);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(bin, group)| {
            let count = group.len();
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                let confidences: Vec<f64> = group.iter().map(|p| p.confidence).collect();
                let hits = group.iter().filter(|p| p.correct).count();
                (numeric::mean(&confidences), hits as f64 / count as f64)
            };
            ReliabilityRow {
                bin,
                lo: bin as f64 / bins as f64,
                hi: (bin + 1) as f64 / bins as f64,
                count,
                mean_confidence,
                accuracy,
                gap: (accuracy - mean_confidence).abs(),
            }
        })
        .collect())
}

/// Top-label expected calibration error over equal-width confidence bins:
/// `Σ_m (|B_m|/n) · |acc(B_m) − conf(B_m)|`, with empty bins contributing 0.
pub fn ece(preds: &[ScoredPrediction], bins: usize) -> Result<f64, MetricsError> {
    let rows = reliability_table(preds, bins)?;
    let n = preds.len() as f64;
    let terms: Vec<f64> = rows.iter().map(|r| (r.count as f64 / n) * r.gap).collect();
    Ok(numeric::pairwise_sum(&terms))
}

/// Class-wise calibration error in both forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseEce {
    /// `(1/K) Σ_k |p̄_k − ȳ_k|`: the gap between mean predicted mass and
    /// empirical frequency per class, averaged over classes.
    pub bin_free: f64,
    /// The binned per-class variant: for each class, predictions are binned
    /// by that class's probability and the per-bin |mean prob − frequency|
    /// gaps are count-weighted; the per-class errors are then averaged.
    pub binned: f64,
}

/// Computes both class-wise calibration errors. Every prediction must carry a
/// full distribution of the same length.
pub fn classwise_ece(
    preds: &[ScoredPrediction],
    bins: usize,
) -> Result<ClasswiseEce, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    let k = preds[0].probs.len();
    for pred in preds {
        if pred.probs.len() != k || k < 2 {
            return Err(MetricsError::InvalidDistribution {
                question_id: pred.question_id.clone(),
                message: format!(
                    "class-wise calibration needs equal-length distributions ({} vs {k})",
                    pred.probs.len()
                ),
            });
        }
    }
    let n = preds.len() as f64;

    let mut class_gaps: Vec<f64> = Vec::with_capacity(k);
    let mut class_binned: Vec<f64> = Vec::with_capacity(k);
    for class in 0..k {
        let probs: Vec<f64> = preds.iter().map(|p| p.probs[class]).collect();
        let mean_prob = numeric::mean(&probs);
        let freq = preds.iter().filter(|p| p.gold == class).count() as f64 / n;
        class_gaps.push((mean_prob - freq).abs());

        let mut groups: Vec<Vec<&ScoredPrediction>> = vec![Vec::new(); bins];
        for pred in preds {
            groups[bin_index(pred.probs[class], bins)].push(pred);
        }
        let terms: Vec<f64> = groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| {
                let in_bin: Vec<f64> = g.iter().map(|p| p.probs[class]).collect();
                let mean_in_bin = numeric::mean(&in_bin);
                let freq_in_bin =
                    g.iter().filter(|p| p.gold == class).count() as f64 / g.len() as f64;
                (g.len() as f64 / n) * (mean_in_bin - freq_in_bin).abs()
            })
            .collect();
        class_binned.push(numeric::pairwise_sum(&terms));
    }
    Ok(ClasswiseEce { bin_free: numeric::mean(&class_gaps), binned: numeric::mean(&class_binned) })
}

/// Renders reliability rows as CSV (header plus one line per bin).
pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("bin,lo,hi,count,mean_confidence,accuracy,gap\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.bin, r.lo, r.hi, r.count, r.mean_confidence, r.accuracy, r.gap
        )
        .unwrap();
    }
    out
}

/// Renders a reliability diagram as a standalone SVG: one accuracy bar per
/// bin, a tick at each bin's mean confidence, and the dashed diagonal of
/// perfect calibration.
pub fn reliability_svg(rows: &[ReliabilityRow]) -> String {
    const SIZE: f64 = 360.0;
    const MARGIN: f64 = 40.0;
    let span = SIZE - 2.0 * MARGIN;
    let x = |v: f64| MARGIN + v * span;
    let y = |v: f64| SIZE - MARGIN - v * span;

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for r in rows {
        let lo_x = x(r.lo);
        let width = x(r.hi) - lo_x;
        let top = y(r.accuracy);
        let height = y(0.0) - top;
        writeln!(
            svg,
            "<rect x=\"{lo_x:.2}\" y=\"{top:.2}\" width=\"{width:.2}\" height=\"{height:.2}\" fill=\"#4878b0\" stroke=\"white\" stroke-width=\"1\"/>"
        )
        .unwrap();
        if r.count > 0 {
            let cx = x(r.mean_confidence);
            writeln!(
                svg,
                "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"#c0504d\" stroke-width=\"2\"/>",
                y(0.0),
                y(r.accuracy).min(y(0.02)),
            )
            .unwrap();
        }
    }
    writeln!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#666\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>",
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    )
    .unwrap();
    writeln!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        x(0.0), y(0.0), x(1.0), y(0.0),
        x(0.0), y(0.0), x(0.0), y(1.0),
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">confidence</text>",
        x(0.5),
        SIZE - 8.0
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"12\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 12 {:.2})\">accuracy</text>",
        y(0.5),
        y(0.5)
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

/// Sample Pearson correlation, `Σ dx·dy / √(Σ dx² · Σ dy²)`, clamped into
/// [−1, 1] against rounding spill. A constant input (or fewer than two
/// points) has no defined correlation and errors rather than returning 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch { x: x.len(), y: y.len() });
    }
    if x.len() < 2 {
        return Err(MetricsError::DegenerateInput);
    }
    let mx = numeric::mean(x);
    let my = numeric::mean(y);
    let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let dy: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx = numeric::dot(&dx, &dx);
    let syy = numeric::dot(&dy, &dy);
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateInput);
    }
    let sxy = numeric::dot(&dx, &dy);
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// A uniformly sampled derangement (permutation with no fixed points) of
/// `0..n`, deterministic for a given seed on every platform: seeded
/// Fisher–Yates shuffles are rejection-sampled until one has no fixed point
/// (expected ≈ e attempts).
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>, MetricsError> {
    if n < 2 {
        return Err(MetricsError::TooFewRecords { found: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| p != i) {
            return Ok(perm);
        }
    }
}

/// The negative control: deranges the rationales across the rationale-bearing
/// records (no record keeps its own) and leaves every other field untouched.
/// Records without a rationale pass through unchanged and do not count toward
/// the minimum of 2.
pub fn make_noisy_control(
    dataset: &[QuestionInput],
    seed: u64,
) -> Result<Vec<QuestionInput>, MetricsError> {
    let bearing: Vec<usize> =
        dataset.iter().enumerate().filter(|(_, q)| q.rationale.is_some()).map(|(i, _)| i).collect();
    let perm = derangement(bearing.len(), seed)
        .map_err(|_| MetricsError::TooFewRecords { found: bearing.len() })?;
    let mut out = dataset.to_vec();
    for (slot, &source_slot) in perm.iter().enumerate() {
        out[bearing[slot]].rationale = dataset[bearing[source_slot]].rationale.clone();
    }
    Ok(out)
}

/// The latent-probability view of one question: per-sample probability maps
/// (non-partial samples only) plus whether the final answer was correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionLatents {
    pub question_id: String,
    pub samples: Vec<BTreeMap<VarId, f64>>,
    pub correct: bool,
}

impl QuestionLatents {
    /// Extracts the analysis view from a pipeline record; `correct` is
    /// whether the record's chosen label matches the gold label (resolved by
    /// the caller, which owns the dataset).
    pub fn from_record(record: &QuestionRecord, correct: bool) -> Self {
        QuestionLatents {
            question_id: record.question_id.clone(),
            samples: record
                .samples
                .iter()
                .filter(|s| !s.reply.partial)
                .map(|s| s.reply.latent_probs.clone())
                .collect(),
            correct,
        }
    }

    /// Mean probability of `var` over this question's samples that carry it.
    fn mean_for(&self, var: &VarId) -> Option<f64> {
        let values: Vec<f64> =
            self.samples.iter().filter_map(|probs| probs.get(var).copied()).collect();
        if values.is_empty() {
            None
        } else {
            Some(numeric::mean(&values))
        }
    }
}

/// Per-variable clean-vs-noisy statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub variable: VarId,
    /// Questions (per subset) contributing a mean for this variable.
    pub clean_questions: usize,
    pub noisy_questions: usize,
    /// Mean conditional probability: averaged within each question, then
    /// across the subset's questions.
    pub clean_mean: f64,
    pub noisy_mean: f64,
    /// Pearson correlation between per-question mean probability and the
    /// correctness indicator; `None` when undefined (constant input).
    pub clean_pcc: Option<f64>,
    pub noisy_pcc: Option<f64>,
    /// Correlation over the two subsets pooled.
    pub combined_pcc: Option<f64>,
}

/// Output of [`latent_analysis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAnalysis {
    pub mismatch_var: VarId,
    pub threshold: f64,
    /// Fraction of clean questions whose mean mismatch-variable probability
    /// is at or above the threshold.
    pub clean_identification: f64,
    /// Fraction of noisy questions whose mean falls below the threshold.
    pub noisy_identification: f64,
    pub variables: Vec<VariableStats>,
}

/// Compares latent behavior between a clean and a noisy (control) run.
///
/// Every question in both subsets must carry at least one sample probability
/// for `mismatch_var`; other variables are analyzed over whichever questions
/// carry them.
pub fn latent_analysis(
    clean: &[QuestionLatents],
    noisy: &[QuestionLatents],
    mismatch_var: &VarId,
    threshold: f64,
) -> Result<LatentAnalysis, MetricsError> {
    if clean.is_empty() || noisy.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for question in clean.iter().chain(noisy) {
        if question.mean_for(mismatch_var).is_none() {
            return Err(MetricsError::MissingLatent { var: mismatch_var.clone() });
        }
    }

    let variables: BTreeSet<VarId> = clean
        .iter()
        .chain(noisy)
        .flat_map(|q| q.samples.iter())
        .flat_map(|probs| probs.keys().cloned())
        .collect();

    let subset_stats = |subset: &[QuestionLatents], var: &VarId| {
        let pairs: Vec<(f64, f64)> = subset
            .iter()
            .filter_map(|q| q.mean_for(var).map(|m| (m, if q.correct { 1.0 } else { 0.0 })))
            .collect();
        let means: Vec<f64> = pairs.iter().map(|(m, _)| *m).collect();
        let mean = if means.is_empty() { f64::NAN } else { numeric::mean(&means) };
        (pairs, means.len(), mean)
    };

    let mut stats = Vec::new();
    for var in &variables {
        let (clean_pairs, clean_questions, clean_mean) = subset_stats(clean, var);
        let (noisy_pairs, noisy_questions, noisy_mean) = subset_stats(noisy, var);
        let pcc_of = |pairs: &[(f64, f64)]| {
            let xs: Vec<f64> = pairs.iter().map(|(m, _)| *m).collect();
            let ys: Vec<f64> = pairs.iter().map(|(_, c)| *c).collect();
            pearson(&xs, &ys).ok()
        };
        let combined: Vec<(f64, f64)> = clean_pairs.iter().chain(&noisy_pairs).copied().collect();
        stats.push(VariableStats {
            variable: var.clone(),
            clean_questions,
            noisy_questions,
            clean_mean,
            noisy_mean,
            clean_pcc: pcc_of(&clean_pairs),
            noisy_pcc: pcc_of(&noisy_pairs),
            combined_pcc: pcc_of(&combined),
        });
    }

    let identification = |subset: &[QuestionLatents], flagged_below: bool| {
        let hits = subset
            .iter()
            .filter(|q| {
                let mean = q.mean_for(mismatch_var).expect("checked above");
                if flagged_below {
                    mean < threshold
                } else {
                    mean >= threshold
                }
            })
            .count();
        hits as f64 / subset.len() as f64
    };

    Ok(LatentAnalysis {
        mismatch_var: mismatch_var.clone(),
        threshold,
        clean_identification: identification(clean, false),
        noisy_identification: identification(noisy, true),
        variables: stats,
    })
}
