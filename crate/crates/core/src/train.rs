//! Training loop: homogeneous per-corpus batches, interleaved in proportion to
//! corpus sizes, updated with Adam under the warm-up schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TensorError};
use crate::data::Example;
use crate::model::{Adam, Model, Utterance};
use crate::vocab::LanguageTag;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("step {step}: {source}")]
    Tensor {
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("no training examples")]
    Empty,
    #[error("invalid training setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds batch order and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            seed: 1,
        }
    }
}

/// A named training corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub source: String,
    /// L2 norm of the LangB self-attention bank gradient; `None` without such a bank.
    pub bank_b_grad_norm: Option<f64>,
}

impl StepLog {
    pub const HEADER: &'static str = "step\tloss\tlr\tsource\tbank_b_grad_norm\n";

    pub fn format(&self) -> String {
        let norm = self.bank_b_grad_norm.map_or("-".to_string(), |n| format!("{n:.6e}"));
        format!("{}\t{:.6}\t{:.6e}\t{}\t{}\n", self.step, self.loss, self.lr, self.source, norm)
    }
}

/// One epoch of `(corpus index, example indices)` batches: each corpus is
/// shuffled and cut into batches, then all batches are shuffled together.
pub fn epoch_batches(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        out.extend(idx.chunks(batch_size).map(|b| (c, b.to_vec())));
    }
    out.shuffle(rng);
    out
}

/// Trains `model` for `cfg.steps` updates, reporting every step to `on_step`.
/// Returns the per-step losses.
pub fn train(
    model: &mut Model,
    corpora: &[Corpus],
    token_langs: &[LanguageTag],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Vec<f64>, TrainError> {
    train_until(model, corpora, token_langs, cfg, on_step, 0, &mut |_, _| false)
}

/// Like [`train`], but every `every` steps (0: never) `stop` sees the step and
/// the updated model; returning true ends training early.
pub fn train_until(
    model: &mut Model,
    corpora: &[Corpus],
    token_langs: &[LanguageTag],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
    every: usize,
    stop: &mut dyn FnMut(usize, &Model) -> bool,
) -> Result<Vec<f64>, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch_size must be at least 1".into()));
    }
    let sizes: Vec<usize> = corpora.iter().map(|c| c.examples.len()).collect();
    if sizes.iter().sum::<usize>() == 0 {
        return Err(TrainError::Empty);
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d60e);
    let c = &model.config;
    let mut adam = Adam::new(&model.store, c.beta1, c.beta2, c.adam_eps);
    let bank_b = model.bank_b_params();
    let mut queue = Vec::new().into_iter();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (ci, idx) = match queue.next() {
            Some(b) => b,
            None => {
                queue = epoch_batches(&sizes, cfg.batch_size, &mut order_rng).into_iter();
                queue.next().expect("non-empty epoch")
            }
        };
        let batch: Vec<Utterance> = idx
            .iter()
            .map(|&i| {
                let e = &corpora[ci].examples[i];
                Utterance {
                    features: &e.features,
                    tokens: &e.tokens,
                }
            })
            .collect();
        let tensor_err = |source: TensorError| match source {
            TensorError::NonFinite { .. } => TrainError::NonFinite { step },
            source => TrainError::Tensor { step, source },
        };
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, token_langs, Some(&mut dropout_rng)).map_err(tensor_err)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        g.backward(loss).map_err(tensor_err)?;
        model.store.accumulate_grads(&g);
        drop(g);
        let bank_b_grad_norm = (!bank_b.is_empty()).then(|| {
            bank_b
                .iter()
                .filter_map(|&id| model.store.get(id).value.grad())
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        });
        let lr = model.config.learning_rate(step);
        adam.step(&mut model.store, lr);
        losses.push(lv);
        on_step(&StepLog {
            step,
            loss: lv,
            lr,
            source: corpora[ci].name.clone(),
            bank_b_grad_norm,
        });
        if every > 0 && step % every == 0 && stop(step, model) {
            break;
        }
    }
    Ok(losses)
}
