use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Examples, NerExample, RelcExample, Task, TaskDataset, TypingExample};
use super::metrics::{accuracy, micro_f1_sets, span_f1, tacred_f1, Iob2};
use crate::attn::Visibility;
use crate::error::{Error, Result};
use crate::nn::params::uniform;
use crate::nn::{Mat, Model, ParamId, Tape, Var};
use crate::pretrain::{adam_step, lr_schedule, AdamState, TrainConfig};
use crate::text::{Vocab, CLS, E1_CLOSE, E1_OPEN, E2_CLOSE, E2_OPEN, SEP};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const TYPING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig::for_task(Task::Relc)
    }
}

impl FinetuneConfig {
    /// Desk-scale defaults: epoch counts as for the full-size runs, batch
    /// sizes shrunk, learning rate raised for a small encoder.
    pub fn for_task(task: Task) -> Self {
        let (epochs, batch_size) = match task {
            Task::Typing => (10, 8),
            Task::Ner => (3, 8),
            Task::Relc => (5, 8),
        };
        FinetuneConfig {
            epochs,
            batch_size,
            lr: 1e-3,
            warmup_fraction: 0.1,
        }
    }

    /// Low-resource runs train for more epochs: x50 at 1%, x10 at 10%.
    pub fn scaled_for_fraction(&self, fraction: f64) -> Self {
        let factor = if fraction <= 0.01 {
            50
        } else if fraction <= 0.1 {
            10
        } else {
            1
        };
        FinetuneConfig {
            epochs: self.epochs * factor,
            ..self.clone()
        }
    }
}

/// Encoder plus a linear head on `[CLS]` (typing, relation classification)
/// or on every word (NER).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub task: Task,
    pub model: Model,
    pub vocab: Vocab,
    pub labels: Vec<String>,
    pub no_relation: Option<String>,
    head: (ParamId, ParamId),
}

/// Word ids with inline enclosure tokens, `[CLS]` and `[SEP]`, plus the
/// sequence index of every original word.
fn inline_ids(tokens: &[String], vocab: &Vocab, opens: &[(usize, u32)], closes: &[(usize, u32)]) -> (Vec<u32>, Vec<usize>) {
    let mut ids = vec![CLS];
    let mut word_rows = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        ids.extend(opens.iter().filter(|(at, _)| *at == i).map(|&(_, id)| id));
        word_rows.push(ids.len());
        ids.push(vocab.id(tok));
        ids.extend(closes.iter().filter(|(at, _)| *at == i).map(|&(_, id)| id));
    }
    ids.push(SEP);
    (ids, word_rows)
}

pub fn typing_ids(ex: &TypingExample, vocab: &Vocab) -> Vec<u32> {
    inline_ids(&ex.tokens, vocab, &[(ex.span[0], E1_OPEN)], &[(ex.span[1], E1_CLOSE)]).0
}

/// Subject and object enclosures. On overlap the subject is the outer pair
/// and the object's enclosure is clipped to the subject span.
pub fn relc_ids(ex: &RelcExample, vocab: &Vocab) -> Vec<u32> {
    let (s, mut o) = (ex.subj, ex.obj);
    let overlap = s[0] <= o[1] && o[0] <= s[1];
    if overlap {
        o = [o[0].max(s[0]), o[1].min(s[1])];
    }
    let opens = [(s[0], E1_OPEN), (o[0], E2_OPEN)];
    let closes = [(o[1], E2_CLOSE), (s[1], E1_CLOSE)];
    inline_ids(&ex.tokens, vocab, &opens, &closes).0
}

pub fn ner_ids(ex: &NerExample, vocab: &Vocab) -> (Vec<u32>, Vec<usize>) {
    inline_ids(&ex.tokens, vocab, &[], &[])
}

/// Labels of the training and evaluation splits together, sorted. NER
/// inventories are validated as IOB2.
pub fn label_inventory(splits: &[&TaskDataset]) -> Result<Vec<String>> {
    let task = splits.first().map(|d| d.task()).ok_or_else(|| Error::Dataset("no splits".into()))?;
    let mut all = BTreeSet::new();
    for d in splits {
        if d.task() != task {
            return Err(Error::Dataset("splits of different tasks".into()));
        }
        all.extend(d.examples.label_set());
    }
    let labels: Vec<String> = all.into_iter().collect();
    if task == Task::Ner {
        return Ok(Iob2::new(&labels)?.tags().to_vec());
    }
    if labels.is_empty() {
        return Err(Error::Dataset("no labels".into()));
    }
    Ok(labels)
}

fn label_index(labels: &[String], label: &str) -> Result<usize> {
    labels
        .binary_search_by(|l| l.as_str().cmp(label))
        .map_err(|_| Error::Dataset(format!("label `{label}` not in inventory")))
}

impl Classifier {
    /// `encoder` may still carry decoder tensors; they are dropped.
    pub fn new(task: Task, encoder: &Model, vocab: Vocab, labels: Vec<String>, seed: u64) -> Result<Self> {
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("label inventory must be sorted and unique".into()));
        }
        if task == Task::Ner {
            Iob2::new(&labels)?;
        }
        let mut model = encoder.without_decoder();
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config("vocabulary does not match the encoder".into()));
        }
        let h = model.config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = model.params.insert(HEAD_WEIGHT, uniform(&mut rng, h, labels.len(), 1.0 / (h as f64).sqrt()))?;
        let b = model.params.insert(HEAD_BIAS, Mat::zeros(1, labels.len()))?;
        Ok(Classifier {
            task,
            model,
            vocab,
            labels,
            no_relation: None,
            head: (w, b),
        })
    }

    fn states(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mask = Rc::new(Visibility::full(ids.len()));
        self.model.encoder_states(tape, ids, &positions, &mask)
    }

    fn head(&self, tape: &mut Tape, h: Var) -> Var {
        let (w, b) = (tape.param(self.head.0), tape.param(self.head.1));
        tape.linear(h, w, b)
    }

    fn cls_logits(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        let states = self.states(tape, ids)?;
        let cls = tape.gather_rows(states, &[0]);
        Ok(self.head(tape, cls))
    }

    /// Summed loss of `examples[idx]` and the number of loss terms.
    fn record_loss(&self, tape: &mut Tape, examples: &Examples, idx: &[usize]) -> Result<(Var, usize)> {
        let mut parts = Vec::with_capacity(idx.len());
        let mut count = 0;
        for &i in idx {
            let part = match examples {
                Examples::Typing(v) => {
                    let ex = &v[i];
                    let logits = self.cls_logits(tape, &typing_ids(ex, &self.vocab))?;
                    let mut targets = vec![0.0; self.labels.len()];
                    for l in &ex.labels {
                        targets[label_index(&self.labels, l)?] = 1.0;
                    }
                    count += 1;
                    tape.bce_sum(logits, &targets)
                }
                Examples::Relc(v) => {
                    let ex = &v[i];
                    let logits = self.cls_logits(tape, &relc_ids(ex, &self.vocab))?;
                    count += 1;
                    tape.nll_sum(logits, &[(0, label_index(&self.labels, &ex.label)?)])
                }
                Examples::Ner(v) => {
                    let ex = &v[i];
                    let (ids, rows) = ner_ids(ex, &self.vocab);
                    let states = self.states(tape, &ids)?;
                    let words = tape.gather_rows(states, &rows);
                    let logits = self.head(tape, words);
                    let targets = ex
                        .tags
                        .iter()
                        .enumerate()
                        .map(|(r, t)| Ok((r, label_index(&self.labels, t)?)))
                        .collect::<Result<Vec<_>>>()?;
                    count += targets.len();
                    tape.nll_sum(logits, &targets)
                }
            };
            parts.push(part);
        }
        Ok((tape.sum(&parts), count))
    }

    /// Trains on `train` for `config.epochs` epochs of shuffled mini-batches.
    /// Returns the mean loss of each epoch.
    pub fn fit(&mut self, train: &TaskDataset, config: &FinetuneConfig, seed: u64) -> Result<Vec<f64>> {
        if train.task() != self.task {
            return Err(Error::Dataset(format!("{} data for a {} classifier", train.task(), self.task)));
        }
        if train.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(Error::Config("fine-tuning needs epochs >= 1 and batch_size >= 1".into()));
        }
        let n = train.len();
        let per_epoch = n.div_ceil(config.batch_size);
        let schedule = TrainConfig {
            total_steps: (per_epoch * config.epochs) as u64,
            warmup_fraction: config.warmup_fraction,
            peak_lr: config.lr,
            ..Default::default()
        };
        let mut adam = AdamState::new(&self.model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0u64;
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                step += 1;
                let mut tape = Tape::new(&self.model.params);
                let (sum, count) = self.record_loss(&mut tape, &train.examples, batch)?;
                let loss = tape.scale(sum, 1.0 / count.max(1) as f64);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
                }
                epoch_loss += value * batch.len() as f64;
                let grads = tape.backward(loss).dense(&self.model.params);
                drop(tape);
                adam_step(&mut self.model.params, &grads, &mut adam, lr_schedule(step, &schedule))?;
            }
            epoch_losses.push(epoch_loss / n as f64);
        }
        Ok(epoch_losses)
    }

    fn row_logits(&self, ids: &[u32], rows: Option<&[usize]>) -> Result<Mat> {
        let mut tape = Tape::new(&self.model.params);
        let states = self.states(&mut tape, ids)?;
        let h = tape.gather_rows(states, rows.unwrap_or(&[0]));
        let logits = self.head(&mut tape, h);
        Ok(tape.value(logits).clone())
    }

    fn argmax(row: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn predict_typing(&self, ex: &TypingExample) -> Result<BTreeSet<String>> {
        let logits = self.row_logits(&typing_ids(ex, &self.vocab), None)?;
        Ok(logits
            .row(0)
            .iter()
            .zip(&self.labels)
            .filter(|(&z, _)| 1.0 / (1.0 + (-z).exp()) > TYPING_THRESHOLD)
            .map(|(_, l)| l.clone())
            .collect())
    }

    pub fn predict_relc(&self, ex: &RelcExample) -> Result<String> {
        let logits = self.row_logits(&relc_ids(ex, &self.vocab), None)?;
        Ok(self.labels[Self::argmax(logits.row(0))].clone())
    }

    /// Per-token argmax tags, not yet repaired.
    pub fn predict_ner(&self, ex: &NerExample) -> Result<Vec<String>> {
        let (ids, rows) = ner_ids(ex, &self.vocab);
        let logits = self.row_logits(&ids, Some(&rows))?;
        Ok((0..logits.rows())
            .map(|r| self.labels[Self::argmax(logits.row(r))].clone())
            .collect())
    }

    /// The task's headline metric on `data`: micro-F1 for typing, span
    /// micro-F1 for NER, accuracy (or F1 without `no_relation`) for
    /// relation classification.
    pub fn evaluate(&self, data: &TaskDataset) -> Result<Score> {
        if data.is_empty() {
            return Err(Error::Dataset("empty evaluation split".into()));
        }
        match &data.examples {
            Examples::Typing(v) => {
                let gold: Vec<BTreeSet<String>> = v.iter().map(|e| e.labels.iter().cloned().collect()).collect();
                let pred = v.iter().map(|e| self.predict_typing(e)).collect::<Result<Vec<_>>>()?;
                Ok(Score::new("micro_f1", micro_f1_sets(&gold, &pred).f1))
            }
            Examples::Ner(v) => {
                let gold: Vec<Vec<String>> = v.iter().map(|e| e.tags.clone()).collect();
                let pred = v.iter().map(|e| self.predict_ner(e)).collect::<Result<Vec<_>>>()?;
                Ok(Score::new("span_f1", span_f1(&gold, &pred).f1))
            }
            Examples::Relc(v) => {
                let gold: Vec<String> = v.iter().map(|e| e.label.clone()).collect();
                let pred = v.iter().map(|e| self.predict_relc(e)).collect::<Result<Vec<_>>>()?;
                Ok(match data.no_relation.as_deref().or(self.no_relation.as_deref()) {
                    Some(na) => Score::new("micro_f1", tacred_f1(&gold, &pred, na).f1),
                    None => Score::new("accuracy", accuracy(&gold, &pred)),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub metric: String,
    pub value: f64,
}

impl Score {
    fn new(metric: &str, value: f64) -> Self {
        Score {
            metric: metric.to_string(),
            value,
        }
    }
}

/// Subsamples `train` with `seed`, fine-tunes a fresh head on `encoder` and
/// scores `eval`.
pub fn run_seed(
    encoder: &Model,
    vocab: &Vocab,
    train: &TaskDataset,
    eval: &TaskDataset,
    labels: &[String],
    fraction: f64,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<Score> {
    let sample = train.subsample(fraction, seed)?;
    let mut clf = Classifier::new(train.task(), encoder, vocab.clone(), labels.to_vec(), seed)?;
    clf.no_relation = train.no_relation.clone();
    clf.fit(&sample, config, seed)?;
    clf.evaluate(eval)
}
