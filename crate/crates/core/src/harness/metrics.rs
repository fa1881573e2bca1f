use std::collections::BTreeMap;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scoring::{score_answer, ScoreMode};
use super::HarnessError;
use crate::explain::{explain_example, first_entity_rank, ExplainMethod};
use crate::injector::TokenKind;
use crate::model::{predict_logits, topk_indices, AnswerVocab, Model, TrainingExample};
use crate::spans::{QuestionRecord, SpanStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub count: usize,
    pub fraction_of_questions: f64,
    pub accuracy: f64,
    pub mean_top1_logit: f64,
}

/// Prominence of injected entities in explanations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationStats {
    /// Questions whose input contains at least one ENTITY token.
    pub questions_with_entities: usize,
    /// Fraction of all evaluated questions with an ENTITY among the k most
    /// relevant tokens.
    pub entity_in_top1: f64,
    pub entity_in_top5: f64,
    pub entity_in_top10: f64,
    /// Same quantity as `entity_in_top5`, kept under the name the
    /// conditional-accuracy table uses.
    pub fraction_questions_entity_in_top5: f64,
    /// Mean score over questions with an entity in the top 5; absent when
    /// there are none.
    pub accuracy_given_entity_in_top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub label: String,
    pub span_method: String,
    pub link_mode: String,
    pub injected: bool,
    pub seed: u64,
    pub split: String,
    pub score_mode: ScoreMode,
    pub num_questions: usize,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub mean_top1_logit: f64,
    pub per_type: IndexMap<String, TypeStats>,
    pub span_stats: SpanStats,
    pub explanation_stats: IndexMap<String, ExplanationStats>,
    pub metadata: RunMetadata,
}

/// One model answer with its raw top-1 logit and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub answer: String,
    pub top1_logit: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub score_mode: ScoreMode,
    pub normalize: bool,
    pub explainers: bool,
    pub seed: u64,
}

/// A record and its prepared model input.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub record: &'a QuestionRecord,
    pub example: &'a TrainingExample,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn explanation_stats(
    model: &Model,
    items: &[EvalItem],
    scores: &[f64],
    method: ExplainMethod,
    seed: u64,
) -> Result<ExplanationStats, HarnessError> {
    let ranks: Vec<(bool, Option<usize>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let e = &it.example;
            let has_entity = e.seq.tokens.iter().any(|t| t.kind == TokenKind::Entity);
            let rank = if has_entity {
                first_entity_rank(
                    &explain_example(model, &e.seq, &e.vis, method, seed, i as u64)?.ranking,
                )
            } else {
                None
            };
            Ok((has_entity, rank))
        })
        .collect::<Result<_, HarnessError>>()?;
    let with = ranks.iter().filter(|r| r.0).count();
    let rate = |k: usize| {
        ranks.iter().filter(|r| r.1.is_some_and(|p| p < k)).count() as f64 / items.len() as f64
    };
    let top5: Vec<usize> = (0..items.len())
        .filter(|&i| ranks[i].1.is_some_and(|p| p < 5))
        .collect();
    Ok(ExplanationStats {
        questions_with_entities: with,
        entity_in_top1: rate(1),
        entity_in_top5: rate(5),
        entity_in_top10: rate(10),
        fraction_questions_entity_in_top5: top5.len() as f64 / items.len() as f64,
        accuracy_given_entity_in_top5: (!top5.is_empty())
            .then(|| mean(top5.iter().map(|&i| scores[i]))),
    })
}

/// Accuracy overall and per question type, mean top-1 logits, and (when
/// enabled) entity prominence under both relevancy explainers.
pub fn evaluate(
    model: &Model,
    vocab: &AnswerVocab,
    items: &[EvalItem],
    span_stats: SpanStats,
    opts: &EvalOptions,
    mut metadata: RunMetadata,
) -> Result<(EvalReport, Vec<Prediction>), HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::EmptyEvalSplit);
    }
    let inputs: Vec<_> = items
        .iter()
        .map(|it| (&it.example.seq, &it.example.vis))
        .collect();
    let logits = predict_logits(model, &inputs)?;
    let mut predictions = Vec::with_capacity(items.len());
    for (it, l) in items.iter().zip(&logits) {
        let top = topk_indices(l.as_slice().expect("contiguous"), 1)?[0];
        let answer = vocab.answer(top).to_string();
        let score = score_answer(&answer, &it.record.answers, opts.score_mode, opts.normalize);
        predictions.push(Prediction {
            record_id: it.record.id.clone(),
            answer,
            top1_logit: l[top],
            score,
        });
    }
    let n = items.len() as f64;
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();

    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        let mut types: Vec<&str> = it
            .record
            .question_types
            .iter()
            .map(String::as_str)
            .collect();
        types.sort_unstable();
        types.dedup();
        for t in types {
            by_type.entry(t).or_default().push(i);
        }
    }
    let per_type = by_type
        .into_iter()
        .map(|(t, idx)| {
            (
                t.to_string(),
                TypeStats {
                    count: idx.len(),
                    fraction_of_questions: idx.len() as f64 / n,
                    accuracy: mean(idx.iter().map(|&i| scores[i])),
                    mean_top1_logit: mean(idx.iter().map(|&i| predictions[i].top1_logit)),
                },
            )
        })
        .collect();

    let mut explanation = IndexMap::new();
    if opts.explainers {
        for method in [ExplainMethod::Bmgae, ExplainMethod::Trf] {
            explanation.insert(
                method.as_str().to_string(),
                explanation_stats(model, items, &scores, method, opts.seed)?,
            );
        }
    }
    metadata.num_questions = items.len();
    metadata.score_mode = opts.score_mode;
    let report = EvalReport {
        overall_accuracy: mean(scores.iter().copied()),
        mean_top1_logit: mean(predictions.iter().map(|p| p.top1_logit)),
        per_type,
        span_stats,
        explanation_stats: explanation,
        metadata,
    };
    Ok((report, predictions))
}

/// Baseline and injected predictions for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedInput {
    pub baseline: Prediction,
    pub injected: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingResult {
    /// Use the injected answer iff its top-1 logit exceeds this.
    pub threshold: f64,
    pub holdout_accuracy: f64,
    pub holdout_baseline_accuracy: f64,
    pub holdout_injected_accuracy: f64,
    pub test_accuracy: f64,
    pub test_predictions: Vec<Prediction>,
}

fn gated_accuracy(items: &[GatedInput], t: f64) -> f64 {
    mean(items.iter().map(|g| {
        if g.injected.top1_logit > t {
            g.injected.score
        } else {
            g.baseline.score
        }
    }))
}

/// Chooses the threshold maximizing holdout accuracy of "injected if its
/// logit exceeds t, else baseline" over `t ∈ {−∞} ∪ holdout injected logits` (the first
/// best in ascending order wins) and applies it to `test`.
pub fn confidence_gated_injection(
    holdout: &[GatedInput],
    test: &[GatedInput],
) -> Result<GatingResult, HarnessError> {
    if holdout.is_empty() {
        return Err(HarnessError::EmptyHoldout);
    }
    let mut candidates: Vec<f64> = holdout.iter().map(|g| g.injected.top1_logit).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.insert(0, f64::NEG_INFINITY);
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in candidates {
        let acc = gated_accuracy(holdout, t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    let threshold = best.0;
    let test_predictions: Vec<Prediction> = test
        .iter()
        .map(|g| {
            if g.injected.top1_logit > threshold {
                g.injected.clone()
            } else {
                g.baseline.clone()
            }
        })
        .collect();
    Ok(GatingResult {
        threshold,
        holdout_accuracy: best.1,
        holdout_baseline_accuracy: mean(holdout.iter().map(|g| g.baseline.score)),
        holdout_injected_accuracy: mean(holdout.iter().map(|g| g.injected.score)),
        test_accuracy: mean(test_predictions.iter().map(|p| p.score)),
        test_predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single run.
    pub std: f64,
    pub max: f64,
    pub median: f64,
    /// False when `n == 1` and `std` is a placeholder.
    pub std_defined: bool,
}

pub fn aggregate(values: &[f64]) -> Result<AggregateStat, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::NoRuns);
    }
    let n = values.len();
    let constant = values.iter().all(|v| *v == values[0]);
    let m = if constant {
        values[0]
    } else {
        mean(values.iter().copied())
    };
    let std = if n > 1 && !constant {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(AggregateStat {
        n,
        mean: m,
        std,
        max: sorted[n - 1],
        median,
        std_defined: n > 1,
    })
}

fn report_metrics(r: &EvalReport) -> IndexMap<String, f64> {
    let mut m = IndexMap::new();
    m.insert("overall_accuracy".to_string(), r.overall_accuracy);
    m.insert("mean_top1_logit".to_string(), r.mean_top1_logit);
    for (t, s) in &r.per_type {
        m.insert(format!("type/{t}/accuracy"), s.accuracy);
        m.insert(format!("type/{t}/mean_top1_logit"), s.mean_top1_logit);
    }
    for (method, s) in &r.explanation_stats {
        m.insert(format!("explain/{method}/entity_in_top1"), s.entity_in_top1);
        m.insert(format!("explain/{method}/entity_in_top5"), s.entity_in_top5);
        m.insert(
            format!("explain/{method}/entity_in_top10"),
            s.entity_in_top10,
        );
        m.insert(
            format!("explain/{method}/fraction_questions_entity_in_top5"),
            s.fraction_questions_entity_in_top5,
        );
        if let Some(a) = s.accuracy_given_entity_in_top5 {
            m.insert(format!("explain/{method}/accuracy_given_entity_in_top5"), a);
        }
    }
    m
}

/// Sample statistics for every metric present in all reports.
pub fn aggregate_runs(
    reports: &[EvalReport],
) -> Result<IndexMap<String, AggregateStat>, HarnessError> {
    let first = reports.first().ok_or(HarnessError::NoRuns)?;
    let all: Vec<IndexMap<String, f64>> = reports.iter().map(report_metrics).collect();
    report_metrics(first)
        .keys()
        .filter(|k| all.iter().all(|m| m.contains_key(*k)))
        .map(|k| {
            let values: Vec<f64> = all.iter().map(|m| m[k]).collect();
            Ok((k.clone(), aggregate(&values)?))
        })
        .collect()
}
