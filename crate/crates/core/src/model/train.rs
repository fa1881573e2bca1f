use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{forward, init_model, loss_and_gradients, Model, ModelConfig, VisualInput};
use super::ModelError;
use crate::injector::InjectedSequence;

/// Answer strings in classifier-row order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    /// Distinct answers in sorted order.
    pub fn from_answers<S: AsRef<str>>(answers: impl IntoIterator<Item = S>) -> Self {
        let mut list: Vec<String> = answers
            .into_iter()
            .map(|a| a.as_ref().to_string())
            .collect();
        list.sort();
        list.dedup();
        Self::from_ordered(list)
    }

    /// Keeps the given order; later duplicates are dropped.
    pub fn from_ordered(answers: Vec<String>) -> Self {
        let mut vocab = Self::default();
        for a in answers {
            if !vocab.index.contains_key(&a) {
                vocab.index.insert(a.clone(), vocab.answers.len());
                vocab.answers.push(a);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answer(&self, idx: usize) -> &str {
        &self.answers[idx]
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

/// Indices of the `k` largest logits, descending, ties by lower index.
/// `k` is clamped to the number of logits.
pub fn topk_indices(logits: &[f64], k: usize) -> Result<Vec<usize>, ModelError> {
    if k == 0 {
        return Err(ModelError::InvalidK);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// `(answer, logit)` pairs for the top `k` logits.
pub fn predict_topk(
    logits: &[f64],
    vocab: &AnswerVocab,
    k: usize,
) -> Result<Vec<(String, f64)>, ModelError> {
    if logits.len() != vocab.len() {
        return Err(ModelError::Shape(format!(
            "{} logits for {} answers",
            logits.len(),
            vocab.len()
        )));
    }
    Ok(topk_indices(logits, k)?
        .into_iter()
        .map(|i| (vocab.answer(i).to_string(), logits[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub soft_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            soft_labels: false,
        }
    }
}

/// One model input with its gold answers as `(vocab index, weight)`.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub seq: InjectedSequence,
    pub vis: VisualInput,
    pub answers: Vec<(usize, f64)>,
}

impl TrainingExample {
    /// One-hot on the highest-weight answer (first on ties), or the
    /// normalized weight distribution when `soft`.
    pub fn target(&self, vocab_size: usize, soft: bool) -> Array1<f64> {
        let mut t = Array1::zeros(vocab_size);
        if soft {
            let total: f64 = self.answers.iter().map(|(_, w)| w).sum();
            if total > 0.0 {
                for &(i, w) in &self.answers {
                    t[i] += w / total;
                }
            }
        } else if let Some(&(best, _)) =
            self.answers
                .iter()
                .fold(None, |acc: Option<&(usize, f64)>, a| match acc {
                    Some(b) if b.1 >= a.1 => Some(b),
                    _ => Some(a),
                })
        {
            t[best] = 1.0;
        }
        t
    }

    pub fn is_correct(&self, predicted: usize) -> bool {
        self.answers.iter().any(|&(i, w)| i == predicted && w > 0.0)
    }

    pub fn is_trainable(&self) -> bool {
        self.answers.iter().any(|&(_, w)| w > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &[Array2<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        }
    }
}

/// Dropout stream for one example in one epoch.
fn dropout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rand::Rng::random(&mut rng)
}

/// Eval-mode logits for every example, in input order.
pub fn predict_logits(
    model: &Model,
    examples: &[(&InjectedSequence, &VisualInput)],
) -> Result<Vec<Array1<f64>>, ModelError> {
    examples
        .par_iter()
        .map(|(seq, vis)| forward(model, seq, vis, false).map(|(l, _)| l))
        .collect()
}

/// Fraction of examples whose top-1 prediction is a gold answer.
pub fn accuracy(model: &Model, examples: &[TrainingExample]) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<_> = examples.iter().map(|e| (&e.seq, &e.vis)).collect();
    let logits = predict_logits(model, &inputs)?;
    let correct = logits
        .iter()
        .zip(examples)
        .filter(|(l, e)| {
            e.is_correct(topk_indices(l.as_slice().expect("contiguous"), 1).expect("k=1")[0])
        })
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Adam fine-tuning on cross-entropy. Per-example gradients run in parallel
/// and are summed in example order, so results do not depend on the thread
/// count.
pub fn finetune(
    model: &mut Model,
    train: &[TrainingExample],
    eval: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<TrainingMetrics, ModelError> {
    let vocab_size = model.config().answer_vocab_size;
    let trainable: Vec<&TrainingExample> = train.iter().filter(|e| e.is_trainable()).collect();
    if trainable.is_empty() {
        return Err(ModelError::NoTrainableExamples);
    }
    if let Some(bad) = trainable
        .iter()
        .flat_map(|e| &e.answers)
        .find(|(i, _)| *i >= vocab_size)
    {
        return Err(ModelError::TargetOutOfRange {
            target: bad.0,
            size: vocab_size,
        });
    }
    let targets: Vec<Array1<f64>> = trainable
        .iter()
        .map(|e| e.target(vocab_size, cfg.soft_labels))
        .collect();
    let seed = model.config().seed;
    let batch = cfg.batch_size.max(1);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..trainable.len()).collect();
    let mut metrics = TrainingMetrics::default();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000 ^ epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let frozen: &Model = model;
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    let e = trainable[i];
                    loss_and_gradients(
                        frozen,
                        &e.seq,
                        &e.vis,
                        &targets[i],
                        Some(dropout_seed(seed, epoch, i)),
                    )
                })
                .collect::<Result<_, _>>()?;
            let mut total: Vec<Array2<f64>> = model
                .params()
                .iter()
                .map(|p| Array2::zeros(p.raw_dim()))
                .collect();
            for ((loss, logits, grads), &i) in results.iter().zip(chunk) {
                loss_sum += loss;
                if trainable[i]
                    .is_correct(topk_indices(logits.as_slice().expect("contiguous"), 1)?[0])
                {
                    correct += 1;
                }
                for (t, g) in total.iter_mut().zip(grads) {
                    *t += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            total.iter_mut().for_each(|t| *t *= scale);
            adam.update(model.params_mut(), &total, cfg.lr);
        }
        let eval_accuracy = if eval.is_empty() {
            None
        } else {
            Some(accuracy(model, eval)?)
        };
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / trainable.len() as f64,
            train_accuracy: correct as f64 / trainable.len() as f64,
            eval_accuracy,
        };
        log::info!(
            "epoch {} loss {:.4} train acc {:.4} eval acc {:?}",
            m.epoch,
            m.loss,
            m.train_accuracy,
            m.eval_accuracy
        );
        metrics.epochs.push(m);
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    answers: Vec<String>,
    params: IndexMap<String, Tensor>,
}

/// Writes config, answer vocabulary and named parameters to one JSON file.
pub fn save_checkpoint(
    model: &Model,
    vocab: &AnswerVocab,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    let params = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| {
            (
                n.clone(),
                Tensor {
                    shape: [p.nrows(), p.ncols()],
                    data: p.iter().copied().collect(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        config: model.config().clone(),
        answers: vocab.answers().to_vec(),
        params,
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, AnswerVocab), ModelError> {
    let file: CheckpointFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.answers.len() != file.config.answer_vocab_size {
        return Err(ModelError::Checkpoint(format!(
            "{} answers for answer_vocab_size {}",
            file.answers.len(),
            file.config.answer_vocab_size
        )));
    }
    let mut model = init_model(&file.config)?;
    let named = file
        .params
        .into_iter()
        .map(|(name, t)| {
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map(|a| (name.clone(), a))
                .map_err(|e| ModelError::Checkpoint(format!("parameter `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    model.load_named(named)?;
    Ok((model, AnswerVocab::from_ordered(file.answers)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let vocab = AnswerVocab::from_ordered(vec!["a".into(), "b".into(), "c".into()]);
        assert_eq!(
            predict_topk(&[0.1, 2.0, -1.0], &vocab, 1).unwrap(),
            [("b".to_string(), 2.0)]
        );
        assert_eq!(topk_indices(&[0.1, 2.0, -1.0], 10).unwrap(), [1, 0, 2]);
        assert_eq!(topk_indices(&[1.0, 1.0], 2).unwrap(), [0, 1]);
        assert!(matches!(topk_indices(&[1.0], 0), Err(ModelError::InvalidK)));
    }

    #[test]
    fn vocab_sorted_and_deduplicated() {
        let v = AnswerVocab::from_answers(["dog", "cat", "dog"]);
        assert_eq!(v.answers(), ["cat", "dog"]);
        assert_eq!(v.index_of("dog"), Some(1));
    }

    #[test]
    fn targets_hard_and_soft() {
        let e = TrainingExample {
            seq: InjectedSequence {
                tokens: vec![],
                truncated: false,
                max_len: 2,
                injected: 0,
                lookup_misses: 0,
            },
            vis: VisualInput {
                features: Array2::zeros((1, 1)),
                boxes: Array2::zeros((1, 4)),
            },
            answers: vec![(0, 0.3), (2, 0.6), (1, 0.6)],
        };
        assert_eq!(e.target(3, false).to_vec(), [0.0, 0.0, 1.0]);
        let soft = e.target(3, true);
        assert!((soft.sum() - 1.0).abs() < 1e-15);
        assert!((soft[2] - 0.4).abs() < 1e-15);
    }
}
