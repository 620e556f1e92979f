//! Bayesian calibration of the categorical prediction.
//!
//! The M per-question samples give label counts n_k; the model's own
//! expectation vector acts as a Dirichlet prior with concentration λ. The
//! posterior mean (n_k + λ·p_k)/(Σn + λ) blends empirical frequencies with
//! the prior belief, and λ is fitted on a dev split by minimizing a
//! cross-entropy plus class-wise alignment loss.
//!
//! All functions here are pure. Batch reductions use fixed-order pairwise
//! summation, so results are bit-stable regardless of how callers chunk the
//! rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numeric::{mean, pairwise_sum};
use crate::optim::{self, LbfgsOptions};

/// Floor applied only inside log() so a zero posterior coordinate cannot
/// produce an infinite loss.
pub const LOG_FLOOR: f64 = 1e-12;
/// Default ε for the sqrt(x² + ε) surrogate of |x| used during fitting.
pub const DEFAULT_EPSILON_SMOOTH: f64 = 1e-8;
/// Default weight of the alignment term.
pub const DEFAULT_BETA: f64 = 1.0;
/// Default starting point for the λ fit.
pub const DEFAULT_LAMBDA_INIT: f64 = 1.0;

const PRIOR_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrateError {
    #[error("prior sums to {sum}, expected 1")]
    InvalidPrior { sum: f64 },
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("counts have {counts} entries but prior has {prior}")]
    ShapeMismatch { counts: usize, prior: usize },
    #[error("all label counts are zero")]
    EmptyCounts,
    #[error("empty batch")]
    EmptyBatch,
    #[error("rows disagree on the number of labels")]
    MixedLabelCount,
    #[error("gold label {label} out of range for {k} labels")]
    GoldOutOfRange { label: usize, k: usize },
    #[error(transparent)]
    NonFiniteLoss(#[from] optim::OptimError),
}

/// Inputs of one posterior evaluation: label counts among the kept samples,
/// the model's prior belief per label, and the concentration λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPosteriorInput {
    pub counts: Vec<u64>,
    pub prior: Vec<f64>,
    pub lambda: f64,
}

impl DirichletPosteriorInput {
    pub fn new(counts: Vec<u64>, prior: Vec<f64>, lambda: f64) -> Self {
        DirichletPosteriorInput { counts, prior, lambda }
    }

    fn validate(&self) -> Result<(), CalibrateError> {
        if self.counts.len() != self.prior.len() {
            return Err(CalibrateError::ShapeMismatch {
                counts: self.counts.len(),
                prior: self.prior.len(),
            });
        }
        let sum = pairwise_sum(&self.prior);
        if (sum - 1.0).abs() > PRIOR_SUM_TOL || self.prior.iter().any(|p| *p < 0.0) {
            return Err(CalibrateError::InvalidPrior { sum });
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return Err(CalibrateError::NonPositiveLambda(self.lambda));
        }
        if self.counts.iter().sum::<u64>() == 0 {
            return Err(CalibrateError::EmptyCounts);
        }
        Ok(())
    }
}

/// π_k vector: non-negative, sums to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMean {
    pub probs: Vec<f64>,
}

/// π_k = (n_k + λ·p_k)/(Σn + λ). Exact closed form of the Dirichlet
/// posterior mean with concentration α_k = λ·p_k.
pub fn posterior_mean(input: &DirichletPosteriorInput) -> Result<PosteriorMean, CalibrateError> {
    input.validate()?;
    let total = input.counts.iter().sum::<u64>() as f64;
    let denom = total + input.lambda;
    let probs = input
        .counts
        .iter()
        .zip(&input.prior)
        .map(|(&n, &p)| (n as f64 + input.lambda * p) / denom)
        .collect();
    Ok(PosteriorMean { probs })
}

/// dπ_k/dλ = (p_k·Σn − n_k)/(Σn + λ)², the derivative of the closed form.
pub fn posterior_mean_dlambda(input: &DirichletPosteriorInput) -> Result<Vec<f64>, CalibrateError> {
    input.validate()?;
    let total = input.counts.iter().sum::<u64>() as f64;
    let denom_sq = (total + input.lambda).powi(2);
    Ok(input
        .counts
        .iter()
        .zip(&input.prior)
        .map(|(&n, &p)| (p * total - n as f64) / denom_sq)
        .collect())
}

/// One dev-split question: its label counts, its prior, and the gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub counts: Vec<u64>,
    pub prior: Vec<f64>,
    /// Index of the gold label (the one-hot position).
    pub gold: usize,
}

/// A batch of rows sharing the same label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBatch {
    pub rows: Vec<CalibrationRow>,
    pub beta: f64,
    pub epsilon_smooth: f64,
}

impl CalibrationBatch {
    pub fn new(rows: Vec<CalibrationRow>) -> Self {
        CalibrationBatch { rows, beta: DEFAULT_BETA, epsilon_smooth: DEFAULT_EPSILON_SMOOTH }
    }

    pub fn label_count(&self) -> usize {
        self.rows.first().map_or(0, |r| r.prior.len())
    }

    fn validate(&self) -> Result<(), CalibrateError> {
        if self.rows.is_empty() {
            return Err(CalibrateError::EmptyBatch);
        }
        let k = self.label_count();
        for row in &self.rows {
            if row.prior.len() != k || row.counts.len() != k {
                return Err(CalibrateError::MixedLabelCount);
            }
            if row.gold >= k {
                return Err(CalibrateError::GoldOutOfRange { label: row.gold, k });
            }
            DirichletPosteriorInput::new(row.counts.clone(), row.prior.clone(), 1.0).validate()?;
        }
        Ok(())
    }

    fn posterior_at(&self, row: &CalibrationRow, lambda: f64) -> Vec<f64> {
        let total = row.counts.iter().sum::<u64>() as f64;
        let denom = total + lambda;
        row.counts.iter().zip(&row.prior).map(|(&n, &p)| (n as f64 + lambda * p) / denom).collect()
    }
}

/// The reported loss decomposition, using the exact |·| in the alignment
/// term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLoss {
    pub total: f64,
    pub classification: f64,
    /// Bin-free class-wise calibration error of the batch.
    pub alignment: f64,
}

struct BatchEval {
    classification: f64,
    d_classification: f64,
    /// per-class (π̄_j − ȳ_j, d(π̄_j − ȳ_j)/dλ)
    class_gaps: Vec<(f64, f64)>,
}

fn evaluate_batch(batch: &CalibrationBatch, lambda: f64) -> Result<BatchEval, CalibrateError> {
    batch.validate()?;
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(CalibrateError::NonPositiveLambda(lambda));
    }
    let k = batch.label_count();
    let n_rows = batch.rows.len();

    let mut ce = Vec::with_capacity(n_rows);
    let mut dce = Vec::with_capacity(n_rows);
    let mut per_class: Vec<Vec<f64>> = vec![Vec::with_capacity(n_rows); k];
    let mut per_class_d: Vec<Vec<f64>> = vec![Vec::with_capacity(n_rows); k];
    let mut gold_freq = vec![0usize; k];

    for row in &batch.rows {
        let probs = batch.posterior_at(row, lambda);
        let total = row.counts.iter().sum::<u64>() as f64;
        let denom_sq = (total + lambda).powi(2);
        let gold_p = probs[row.gold];
        ce.push(-(gold_p.max(LOG_FLOOR)).ln());
        let d_gold = (row.prior[row.gold] * total - row.counts[row.gold] as f64) / denom_sq;
        // below the floor the loss is flat in λ, so the derivative is zero
        dce.push(if gold_p > LOG_FLOOR { -d_gold / gold_p } else { 0.0 });
        for j in 0..k {
            per_class[j].push(probs[j]);
            per_class_d[j].push((row.prior[j] * total - row.counts[j] as f64) / denom_sq);
        }
        gold_freq[row.gold] += 1;
    }

    let class_gaps = (0..k)
        .map(|j| {
            let gap = mean(&per_class[j]) - gold_freq[j] as f64 / n_rows as f64;
            (gap, mean(&per_class_d[j]))
        })
        .collect();

    Ok(BatchEval { classification: mean(&ce), d_classification: mean(&dce), class_gaps })
}

/// Reported loss (L, L_c, L_v) at the given λ, with the exact |·| alignment
/// term. The optimizer minimizes [`smoothed_loss`] instead.
pub fn calibration_loss(
    batch: &CalibrationBatch,
    lambda: f64,
) -> Result<CalibrationLoss, CalibrateError> {
    let eval = evaluate_batch(batch, lambda)?;
    let k = eval.class_gaps.len() as f64;
    let gaps: Vec<f64> = eval.class_gaps.iter().map(|(g, _)| g.abs()).collect();
    let alignment = pairwise_sum(&gaps) / k;
    Ok(CalibrationLoss {
        total: eval.classification + batch.beta * alignment,
        classification: eval.classification,
        alignment,
    })
}

/// The optimization objective: same as [`calibration_loss`] but with each
/// |x| replaced by sqrt(x² + ε_smooth) so the loss is differentiable at 0.
pub fn smoothed_loss(batch: &CalibrationBatch, lambda: f64) -> Result<f64, CalibrateError> {
    let eval = evaluate_batch(batch, lambda)?;
    let k = eval.class_gaps.len() as f64;
    let gaps: Vec<f64> =
        eval.class_gaps.iter().map(|(g, _)| (g * g + batch.epsilon_smooth).sqrt()).collect();
    Ok(eval.classification + batch.beta * pairwise_sum(&gaps) / k)
}

/// Analytic dL/dλ of the smoothed objective, via
/// dπ_k/dλ = (p_k·Σn − n_k)/(Σn + λ)² and the chain rule.
pub fn loss_gradient(batch: &CalibrationBatch, lambda: f64) -> Result<f64, CalibrateError> {
    let eval = evaluate_batch(batch, lambda)?;
    let k = eval.class_gaps.len() as f64;
    let terms: Vec<f64> = eval
        .class_gaps
        .iter()
        .map(|(g, dg)| g / (g * g + batch.epsilon_smooth).sqrt() * dg)
        .collect();
    Ok(eval.d_classification + batch.beta * pairwise_sum(&terms) / k)
}

/// Outcome of the λ fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda: f64,
    /// Smoothed loss after each accepted step, start included. Non-increasing.
    pub trajectory: Vec<f64>,
    /// λ after each accepted step, start included.
    pub lambda_path: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Fit λ by minimizing the smoothed loss over η = log λ, which keeps λ
/// positive without constraints. dL/dη = λ·dL/dλ.
pub fn fit_lambda(
    batch: &CalibrationBatch,
    lambda_init: f64,
    options: &LbfgsOptions,
) -> Result<FitResult, CalibrateError> {
    if lambda_init.is_nan() || lambda_init <= 0.0 {
        return Err(CalibrateError::NonPositiveLambda(lambda_init));
    }
    batch.validate()?;

    // beyond e^±700 the loss is numerically indistinguishable from its λ→0/∞
    // limit (and exp overflows), so clamp the search there
    let to_lambda = |eta: f64| eta.clamp(-700.0, 700.0).exp();

    let mut inner_error = None;
    let solution = optim::minimize(
        |eta: &[f64]| {
            let lambda = to_lambda(eta[0]);
            match (smoothed_loss(batch, lambda), loss_gradient(batch, lambda)) {
                (Ok(loss), Ok(grad)) => (loss, vec![grad * lambda]),
                (Err(e), _) | (_, Err(e)) => {
                    // surface the first domain error; NaN aborts the solver
                    inner_error.get_or_insert(e);
                    (f64::NAN, vec![f64::NAN])
                }
            }
        },
        vec![lambda_init.ln()],
        options,
    );
    let solution = match solution {
        Ok(s) => s,
        Err(optim_err) => {
            return Err(inner_error.unwrap_or(CalibrateError::NonFiniteLoss(optim_err)))
        }
    };

    Ok(FitResult {
        lambda: to_lambda(solution.x[0]),
        trajectory: solution.trajectory,
        lambda_path: solution.iterates.iter().map(|x| to_lambda(x[0])).collect(),
        converged: solution.converged,
        iterations: solution.iterations,
        final_loss: solution.loss,
    })
}

/// One row of the theorem check: a discrete feature key and a gold label.
pub type KeyedRow = (String, usize);

/// Result of fitting the fully flexible per-key probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// Fitted probability vector per distinct key.
    pub fitted: BTreeMap<String, Vec<f64>>,
    /// Within-key empirical label frequencies.
    pub empirical: BTreeMap<String, Vec<f64>>,
    /// max_k |fitted − empirical| over all keys.
    pub max_deviation: f64,
    /// Bin-free class-wise calibration error of the fitted table.
    pub classwise_ece: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Fit one free probability vector per distinct key (softmax-parameterized)
/// by minimizing mean cross-entropy plus β times the smoothed class-wise
/// alignment term, then report how far the optimum sits from the within-key
/// label frequencies. At a global optimum the two coincide and the class-wise
/// calibration error vanishes.
pub fn theorem1_check(
    rows: &[KeyedRow],
    k: usize,
    beta: f64,
) -> Result<Theorem1Report, CalibrateError> {
    if rows.is_empty() || k == 0 {
        return Err(CalibrateError::EmptyBatch);
    }
    for (_, label) in rows {
        if *label >= k {
            return Err(CalibrateError::GoldOutOfRange { label: *label, k });
        }
    }
    let n = rows.len() as f64;

    // group rows by key; BTreeMap fixes the key → logit-block mapping
    let mut label_counts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (key, label) in rows {
        label_counts.entry(key.clone()).or_insert_with(|| vec![0.0; k])[*label] += 1.0;
    }
    let keys: Vec<String> = label_counts.keys().cloned().collect();
    let counts: Vec<Vec<f64>> = keys.iter().map(|key| label_counts[key].clone()).collect();
    let multiplicity: Vec<f64> = counts.iter().map(|c| pairwise_sum(c)).collect();
    let groups = keys.len();

    let mut gold_totals = vec![0.0; k];
    for c in &counts {
        for (t, v) in gold_totals.iter_mut().zip(c) {
            *t += v;
        }
    }
    let gold_mean: Vec<f64> = gold_totals.iter().map(|t| t / n).collect();

    let objective = |z: &[f64]| -> (f64, Vec<f64>) {
        let probs: Vec<Vec<f64>> = (0..groups).map(|g| softmax(&z[g * k..(g + 1) * k])).collect();

        let ce_terms: Vec<f64> = (0..groups)
            .map(|g| {
                let row: Vec<f64> = (0..k)
                    .map(|j| {
                        if counts[g][j] > 0.0 {
                            -counts[g][j] * probs[g][j].max(LOG_FLOOR).ln()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                pairwise_sum(&row)
            })
            .collect();
        let ce = pairwise_sum(&ce_terms) / n;

        let gaps: Vec<f64> = (0..k)
            .map(|j| {
                let weighted: Vec<f64> =
                    (0..groups).map(|g| multiplicity[g] * probs[g][j]).collect();
                pairwise_sum(&weighted) / n - gold_mean[j]
            })
            .collect();
        let smoothed: Vec<f64> =
            gaps.iter().map(|x| (x * x + DEFAULT_EPSILON_SMOOTH).sqrt()).collect();
        let loss = ce + beta * pairwise_sum(&smoothed) / k as f64;

        let slopes: Vec<f64> =
            gaps.iter().map(|x| x / (x * x + DEFAULT_EPSILON_SMOOTH).sqrt()).collect();
        let mut grad = vec![0.0; groups * k];
        for g in 0..groups {
            for j in 0..k {
                let ce_part = (multiplicity[g] * probs[g][j] - counts[g][j]) / n;
                let align: Vec<f64> = (0..k)
                    .map(|l| {
                        let indicator = if l == j { 1.0 } else { 0.0 };
                        slopes[l] * probs[g][l] * (indicator - probs[g][j])
                    })
                    .collect();
                grad[g * k + j] =
                    ce_part + beta / k as f64 * multiplicity[g] / n * pairwise_sum(&align);
            }
        }
        (loss, grad)
    };

    let solution = optim::minimize(objective, vec![0.0; groups * k], &LbfgsOptions::default())?;

    let mut fitted = BTreeMap::new();
    let mut empirical = BTreeMap::new();
    let mut max_deviation: f64 = 0.0;
    for (g, key) in keys.iter().enumerate() {
        let probs = softmax(&solution.x[g * k..(g + 1) * k]);
        let freq: Vec<f64> = counts[g].iter().map(|c| c / multiplicity[g]).collect();
        for (p, f) in probs.iter().zip(&freq) {
            max_deviation = max_deviation.max((p - f).abs());
        }
        fitted.insert(key.clone(), probs);
        empirical.insert(key.clone(), freq);
    }

    let classwise_ece = {
        let gaps: Vec<f64> = (0..k)
            .map(|j| {
                let weighted: Vec<f64> =
                    (0..groups).map(|g| multiplicity[g] * fitted[&keys[g]][j]).collect();
                (pairwise_sum(&weighted) / n - gold_mean[j]).abs()
            })
            .collect();
        pairwise_sum(&gaps) / k as f64
    };

    Ok(Theorem1Report {
        fitted,
        empirical,
        max_deviation,
        classwise_ece,
        converged: solution.converged,
        iterations: solution.iterations,
        final_loss: solution.loss,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total = pairwise_sum(&exps);
    exps.iter().map(|e| e / total).collect()
}
