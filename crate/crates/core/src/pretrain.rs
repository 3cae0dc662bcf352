//! Joint pre-training of encoder and decoder: sequence packing, batching,
//! Adam with warmup, checkpoints and a per-step metrics log.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::Window;
use crate::error::{Error, Result};
use crate::kb::{Document, ExampleKind, InjectionExample};
use crate::nn::checkpoint::{load_checkpoint, load_extra, save_checkpoint};
use crate::nn::{Mat, Model, ParamStore};
use crate::objectives::{loss_and_grads, InjectionTarget, LossReport, LossWeights, ObjectiveConfig, TargetKind, TrainingSequence};
use crate::text::{
    apply_mlm, assemble_from_ids, build_vocab_with_prompts, DecoderTarget, MarkerKind, MlmConfig, TargetWord, Vocab,
};
use crate::util::mix_seed;

/// Which knowledge targets are attached during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mlm-only")]
    MlmOnly,
    /// Entity pages only.
    #[serde(rename = "e")]
    Entity,
    /// Relational facts only.
    #[serde(rename = "r")]
    Relation,
    #[serde(rename = "e+r")]
    Both,
}

impl Variant {
    pub fn uses(self, kind: ExampleKind) -> bool {
        matches!(
            (self, kind),
            (Variant::Both, _) | (Variant::Entity, ExampleKind::EntityPage) | (Variant::Relation, ExampleKind::Relational)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::MlmOnly => "mlm-only",
            Variant::Entity => "e",
            Variant::Relation => "r",
            Variant::Both => "e+r",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm-only" | "mlm" => Ok(Variant::MlmOnly),
            "e" => Ok(Variant::Entity),
            "r" => Ok(Variant::Relation),
            "e+r" | "er" => Ok(Variant::Both),
            _ => Err(Error::Config(format!("unknown variant `{s}` (mlm-only, e, r, e+r)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub max_seq_len: usize,
    /// Marker pairs per packed sequence; extra pairs spill into copies.
    pub max_pairs: usize,
    pub decay: Decay,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub variant: Variant,
    pub page_window: Window,
    pub mlm_rate: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            peak_lr: 2e-3,
            warmup_fraction: 0.1,
            total_steps: 300,
            seed: 42,
            checkpoint_every: 0,
            max_seq_len: 64,
            max_pairs: 8,
            decay: Decay::Linear,
            clip_norm: None,
            variant: Variant::Both,
            page_window: Window::Last(2),
            mlm_rate: 0.15,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must leave room for one token".into()));
        }
        if self.max_pairs == 0 {
            return Err(Error::Config("max_pairs must be >= 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("peak_lr {}", self.peak_lr)));
        }
        MlmConfig::new(self.mlm_rate, true, true)?;
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            page_window: self.page_window,
            weights: self.weights,
        }
    }
}

/// Linear warmup to `peak_lr`, then linear decay to 0 at `total_steps` (or
/// constant, per `decay`).
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let total = config.total_steps;
    let warmup = config.warmup_steps();
    let step = step.min(total);
    if step < warmup {
        return config.peak_lr * (step as f64 / warmup as f64);
    }
    match config.decay {
        Decay::Constant => config.peak_lr,
        Decay::Linear => config.peak_lr * ((total - step) as f64 / (total - warmup) as f64),
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair per parameter tensor. Like the parameters they
/// are kept `f32`-representable so checkpoints resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| {
            let (r, c) = params.get(id).shape();
            Mat::zeros(r, c)
        });
        AdamState {
            m: zeros().collect(),
            v: zeros().collect(),
            t: 0,
        }
    }

    fn to_stores(&self, params: &ParamStore) -> Result<(ParamStore, ParamStore)> {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (i, name) in params.names().iter().enumerate() {
            m.insert(name.clone(), self.m[i].clone())?;
            v.insert(name.clone(), self.v[i].clone())?;
        }
        Ok((m, v))
    }

    fn from_stores(params: &ParamStore, m: &ParamStore, v: &ParamStore, t: u64) -> Result<Self> {
        let mut state = AdamState::new(params);
        for (i, name) in params.names().iter().enumerate() {
            let (Some(mi), Some(vi)) = (m.by_name(name), v.by_name(name)) else {
                return Err(Error::Checkpoint(format!("optimizer state lacks `{name}`")));
            };
            if mi.shape() != state.m[i].shape() || vi.shape() != state.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
            }
            state.m[i] = mi.clone();
            state.v[i] = vi.clone();
        }
        state.t = t;
        Ok(state)
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// One bias-corrected Adam update. Gradients are indexed like `params`.
pub fn adam_step(params: &mut ParamStore, grads: &[Mat], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} tensors", grads.len(), params.len())));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for `{}`", params.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, id) in params.ids().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = round_f32(ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j]);
            v[j] = round_f32(ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j]);
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = round_f32(p[j] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Mat::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// A packed sentence run with its marker spans and decoder targets, before
/// MLM corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedItem {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize, MarkerKind)>,
    /// `(pair index, kind, target)`.
    pub targets: Vec<(usize, TargetKind, DecoderTarget)>,
    /// Only the first copy of a split sequence carries MLM positions.
    pub mlm: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainData {
    pub items: Vec<PackedItem>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackStats {
    pub sequences: usize,
    pub split_copies: usize,
    pub truncated_sentences: usize,
    pub dropped_examples: usize,
    pub structured_targets: usize,
    pub unstructured_targets: usize,
}

impl PretrainData {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Every word a pre-training run will encode or decode.
pub fn pretrain_vocab(docs: &[Document], examples: &[InjectionExample], min_count: usize, num_prompts: usize) -> Vocab {
    let words = docs
        .iter()
        .flat_map(|d| d.sentences.iter().flatten())
        .chain(examples.iter().flat_map(|e| {
            e.target.iter().filter_map(|w| match w {
                TargetWord::Word(w) => Some(w),
                TargetWord::Prompt(_) => None,
            })
        }));
    build_vocab_with_prompts(words, min_count, num_prompts)
}

/// Packs each document's sentences greedily into sequences of at most
/// `max_seq_len` tokens (counting `[CLS]` and `[SEP]`), never crossing a
/// document boundary, and attaches the examples of the chosen variant.
pub fn pack_documents(
    docs: &[Document],
    examples: &[InjectionExample],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(PretrainData, PackStats)> {
    let capacity = config.max_seq_len - 2;
    let mut by_sentence: HashMap<(&str, usize), Vec<&InjectionExample>> = HashMap::new();
    for ex in examples {
        if config.variant.uses(ex.kind) {
            by_sentence.entry((ex.doc_id.as_str(), ex.sent)).or_default().push(ex);
        }
    }
    let mut order: Vec<&Document> = docs.iter().collect();
    order.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let mut stats = PackStats::default();
    let mut items = Vec::new();
    for doc in order {
        let mut ids: Vec<u32> = Vec::new();
        // (span, kind) -> pair index, so facts sharing a span share a pair
        let mut pairs: BTreeMap<(usize, usize, MarkerKind), Vec<(TargetKind, DecoderTarget)>> = BTreeMap::new();
        let mut flush = |ids: &mut Vec<u32>, pairs: &mut BTreeMap<_, Vec<_>>, stats: &mut PackStats| {
            if !ids.is_empty() {
                emit(std::mem::take(ids), std::mem::take(pairs), config.max_pairs, &mut items, stats);
            }
        };
        for (s, sentence) in doc.sentences.iter().enumerate() {
            let mut sent_ids = vocab.encode(sentence);
            if sent_ids.len() > capacity {
                sent_ids.truncate(capacity);
                stats.truncated_sentences += 1;
            }
            if ids.len() + sent_ids.len() > capacity {
                flush(&mut ids, &mut pairs, &mut stats);
            }
            let offset = ids.len();
            ids.extend_from_slice(&sent_ids);
            for ex in by_sentence.get(&(doc.doc_id.as_str(), s)).into_iter().flatten() {
                if ex.span.1 >= sent_ids.len() {
                    stats.dropped_examples += 1;
                    continue;
                }
                let span = (ex.span.0 + offset, ex.span.1 + offset);
                let (marker, kind, target) = match ex.kind {
                    ExampleKind::EntityPage => {
                        let words: Vec<&str> = ex
                            .target
                            .iter()
                            .filter_map(|w| match w {
                                TargetWord::Word(w) => Some(w.as_str()),
                                TargetWord::Prompt(_) => None,
                            })
                            .collect();
                        (MarkerKind::Entity, TargetKind::Unstructured, DecoderTarget::page(&words, vocab)?)
                    }
                    ExampleKind::Relational => (
                        MarkerKind::Relation,
                        TargetKind::Structured,
                        DecoderTarget::from_words(&ex.target, vocab)?,
                    ),
                };
                match kind {
                    TargetKind::Structured => stats.structured_targets += 1,
                    TargetKind::Unstructured => stats.unstructured_targets += 1,
                }
                pairs.entry((span.0, span.1, marker)).or_default().push((kind, target));
            }
        }
        flush(&mut ids, &mut pairs, &mut stats);
    }
    stats.sequences = items.len();
    Ok((PretrainData { items }, stats))
}

fn emit(
    ids: Vec<u32>,
    pairs: BTreeMap<(usize, usize, MarkerKind), Vec<(TargetKind, DecoderTarget)>>,
    max_pairs: usize,
    items: &mut Vec<PackedItem>,
    stats: &mut PackStats,
) {
    let pairs: Vec<_> = pairs.into_iter().collect();
    if pairs.is_empty() {
        items.push(PackedItem {
            ids,
            spans: Vec::new(),
            targets: Vec::new(),
            mlm: true,
        });
        return;
    }
    for (chunk_no, chunk) in pairs.chunks(max_pairs).enumerate() {
        let mut spans = Vec::with_capacity(chunk.len());
        let mut targets = Vec::new();
        for (p, ((s, e, marker), ts)) in chunk.iter().enumerate() {
            spans.push((*s, *e, *marker));
            targets.extend(ts.iter().map(|(k, t)| (p, *k, t.clone())));
        }
        if chunk_no > 0 {
            stats.split_copies += 1;
        }
        items.push(PackedItem {
            ids: ids.clone(),
            spans,
            targets,
            mlm: chunk_no == 0,
        });
    }
}

/// Position `p` of the endless shuffled stream: epoch `p / n`, shuffled by
/// `seed + epoch`.
#[derive(Debug, Clone)]
struct Sampler {
    n: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler { n, seed, epoch: None }
    }

    fn index(&mut self, p: u64) -> usize {
        let epoch = p / self.n as u64;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch));
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().expect("just set").1[(p % self.n as u64) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub l_mlm: f64,
    pub l_struct: f64,
    pub l_unstruct: f64,
    pub total: f64,
    pub mlm_tokens: usize,
    pub struct_targets: usize,
    pub unstruct_targets: usize,
    /// Share of the batch's sequences that carry at least one target.
    pub injection_ratio: f64,
}

impl MetricsRecord {
    fn new(step: u64, lr: f64, r: &LossReport, injection_ratio: f64) -> Self {
        MetricsRecord {
            step,
            lr,
            l_mlm: r.l_mlm,
            l_struct: r.l_struct,
            l_unstruct: r.l_unstruct,
            total: r.total,
            mlm_tokens: r.mlm_tokens,
            struct_targets: r.struct_targets,
            unstruct_targets: r.unstruct_targets,
            injection_ratio,
        }
    }
}

const MLM_STREAM: u64 = 0x6d6c6d;
pub const OPTIMIZER_M: &str = "adam_m";
pub const OPTIMIZER_V: &str = "adam_v";

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: Model,
    pub vocab: Vocab,
    data: &'d PretrainData,
    adam: AdamState,
    step: u64,
    sampler: Sampler,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, model: Model, vocab: Vocab, data: &'d PretrainData) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Dataset("no pre-training sequences".into()));
        }
        if !model.has_decoder() {
            return Err(Error::Config("pre-training needs a decoder".into()));
        }
        let adam = AdamState::new(&model.params);
        let sampler = Sampler::new(data.len(), config.seed);
        Ok(Trainer {
            config,
            model,
            vocab,
            data,
            adam,
            step: 0,
            sampler,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(config: TrainConfig, dir: &Path, data: &'d PretrainData) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        let m = load_extra(dir, OPTIMIZER_M)?;
        let v = load_extra(dir, OPTIMIZER_V)?;
        let step = ckpt.manifest.step;
        let mut trainer = Trainer::new(config, ckpt.model, ckpt.vocab, data)?;
        trainer.adam = AdamState::from_stores(&trainer.model.params, &m, &v, step)?;
        trainer.step = step;
        Ok(trainer)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn batch(&mut self, step: u64) -> Vec<TrainingSequence> {
        let mlm = MlmConfig::new(self.config.mlm_rate, true, true).expect("validated");
        let bs = self.config.batch_size as u64;
        (0..bs)
            .map(|i| {
                let p = (step - 1) * bs + i;
                let item = &self.data.items[self.sampler.index(p)];
                let input = assemble_from_ids(&item.ids, &item.spans).expect("spans checked when packing");
                let input = if item.mlm {
                    apply_mlm(&input, &mlm, &self.vocab, mix_seed(mix_seed(self.config.seed, MLM_STREAM), p))
                } else {
                    input
                };
                TrainingSequence {
                    input,
                    targets: item
                        .targets
                        .iter()
                        .map(|(pair, kind, target)| InjectionTarget {
                            pair: *pair,
                            kind: *kind,
                            target: target.clone(),
                        })
                        .collect(),
                }
            })
            .collect()
    }

    /// Runs one update and returns its metrics.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let batch = self.batch(step);
        let with_targets = batch.iter().filter(|s| !s.targets.is_empty()).count();
        let (report, grads) = loss_and_grads(&self.model, &batch, &self.config.objective())?;
        let mut grads = grads.dense(&self.model.params);
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = lr_schedule(step, &self.config);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
        self.step = step;
        Ok(MetricsRecord::new(step, lr, &report, with_targets as f64 / batch.len() as f64))
    }

    /// Writes model, vocabulary and optimizer state at the current step.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (m, v) = self.adam.to_stores(&self.model.params)?;
        save_checkpoint(dir, &self.model, &self.vocab, self.step, &[(OPTIMIZER_M, &m), (OPTIMIZER_V, &v)])
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<MetricsRecord>,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

pub const FINAL_CHECKPOINT: &str = "final";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains until `total_steps`, appending one metrics line per step to
/// `<out>/metrics.jsonl` and writing the final checkpoint to `<out>/final`.
pub fn run(trainer: &mut Trainer, out: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let file = File::options()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut metrics = Vec::new();
    while trainer.step_count() < trainer.config.total_steps {
        let record = trainer.train_step()?;
        let line = serde_json::to_string(&record).expect("metrics serialize");
        writeln!(writer, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if record.step % 50 == 0 || record.step == 1 {
            log::info!(
                "step {} lr {:.2e} total {:.4} (mlm {:.4} struct {:.4} unstruct {:.4})",
                record.step,
                record.lr,
                record.total,
                record.l_mlm,
                record.l_struct,
                record.l_unstruct
            );
        }
        metrics.push(record);
        let every = trainer.config.checkpoint_every;
        if every > 0 && record.step % every == 0 && record.step < trainer.config.total_steps {
            writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
            trainer.save(&checkpoint_dir(out, record.step))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_path,
        metrics,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    crate::util::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::Anchor;
    use crate::nn::ModelConfig;

    fn cfg(total: u64, warmup: f64, peak: f64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            warmup_fraction: warmup,
            peak_lr: peak,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg(1000, 0.1, 2e-4);
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(100, &c), 2e-4);
        assert_eq!(lr_schedule(550, &c), 2e-4 * (450.0 / 900.0));
        assert!((lr_schedule(550, &c) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(1000, &c), 0.0);
        let peaks = (0..=1000).filter(|&s| lr_schedule(s, &c) == 2e-4).count();
        assert_eq!(peaks, 1);
        let constant = TrainConfig { decay: Decay::Constant, ..c };
        assert_eq!(lr_schedule(900, &constant), 2e-4);
    }

    #[test]
    fn zero_steps_is_rejected() {
        assert!(matches!(cfg(0, 0.1, 1e-3).validate(), Err(Error::Config(_))));
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Mat::scalar(x)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.75);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Mat::scalar(0.0)], &mut s, 0.1).unwrap();
        assert_eq!(p.by_name("w").unwrap().scalar_value(), 0.75);
    }

    #[test]
    fn adam_matches_hand_trace() {
        // reference: textbook Adam evaluated directly in f64
        let reference = |x: f64, grads: &[f64], lr: f64| {
            let (mut m, mut v, mut x) = (0.0, 0.0, x);
            for (t, &g) in grads.iter().enumerate() {
                let t = t as i32 + 1;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                x -= lr * mh / (vh.sqrt() + 1e-8);
            }
            x
        };
        let mut p = scalar_store(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Mat::scalar(0.5)], &mut s, 0.1).unwrap();
        let one = p.by_name("w").unwrap().scalar_value();
        // first step moves by lr * g/|g|
        assert!((one - 0.9).abs() < 1e-6);
        assert!((one - reference(1.0, &[0.5], 0.1)).abs() < 1e-6);
        adam_step(&mut p, &[Mat::scalar(-0.25)], &mut s, 0.1).unwrap();
        let two = p.by_name("w").unwrap().scalar_value();
        assert!((two - reference(1.0, &[0.5, -0.25], 0.1)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar_store(1.0);
        let mut s = AdamState::new(&p);
        match adam_step(&mut p, &[Mat::scalar(f64::NAN)], &mut s, 0.1) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains('w')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Mat::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sum_squares().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variants_parse() {
        for v in [Variant::MlmOnly, Variant::Entity, Variant::Relation, Variant::Both] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("x".parse::<Variant>().is_err());
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus() -> (Vec<Document>, Vec<InjectionExample>) {
        let docs = vec![Document {
            doc_id: "d".into(),
            sentences: vec![toks("a b c d"), toks("e f g"), toks("h a b")],
            anchors: vec![Anchor { sent: 1, start: 0, end: 1, entity: "x".into() }],
        }];
        let page = InjectionExample {
            doc_id: "d".into(),
            sent: 1,
            sentence: toks("e f g"),
            span: (0, 1),
            kind: ExampleKind::EntityPage,
            entity: "x".into(),
            fact: None,
            target: toks("a c e").into_iter().map(TargetWord::Word).collect(),
        };
        let mut fact = page.clone();
        fact.kind = ExampleKind::Relational;
        fact.target = crate::text::flatten_fact_words(&["b"], &["h"], 3).unwrap();
        let mut fact2 = fact.clone();
        fact2.target = crate::text::flatten_fact_words(&["c"], &["d"], 3).unwrap();
        (docs, vec![page, fact, fact2])
    }

    #[test]
    fn packing_respects_length_and_offsets() {
        let (docs, examples) = corpus();
        let vocab = pretrain_vocab(&docs, &examples, 1, 3);
        let config = TrainConfig { max_seq_len: 9, ..Default::default() };
        let (data, stats) = pack_documents(&docs, &examples, &vocab, &config).unwrap();
        // 4 + 3 fit in 7; the third sentence starts a new sequence
        assert_eq!(data.len(), 2);
        assert_eq!(data.items[0].ids.len(), 7);
        assert_eq!(data.items[0].spans.len(), 2);
        assert!(data.items[0].spans.iter().all(|&(s, e, _)| (s, e) == (4, 5)));
        assert_eq!(data.items[0].targets.len(), 3);
        assert_eq!((stats.structured_targets, stats.unstructured_targets), (2, 1));

        let mlm_only = TrainConfig { max_seq_len: 9, variant: Variant::MlmOnly, ..Default::default() };
        let (data, _) = pack_documents(&docs, &examples, &vocab, &mlm_only).unwrap();
        assert!(data.items.iter().all(|i| i.targets.is_empty()));

        let split = TrainConfig { max_seq_len: 9, max_pairs: 1, ..Default::default() };
        let (data, stats) = pack_documents(&docs, &examples, &vocab, &split).unwrap();
        assert_eq!(stats.split_copies, 1);
        assert_eq!(data.items.iter().filter(|i| i.mlm).count(), 2);
    }

    fn tiny_trainer_setup() -> (Vocab, PretrainData, ModelConfig) {
        let (docs, examples) = corpus();
        let vocab = pretrain_vocab(&docs, &examples, 1, 3);
        let config = TrainConfig { max_seq_len: 9, ..Default::default() };
        let (data, _) = pack_documents(&docs, &examples, &vocab, &config).unwrap();
        let mut mc = ModelConfig::desk(vocab.len(), vocab.first_output_id());
        mc.hidden_size = 8;
        mc.num_heads = 2;
        mc.ffn_size = 16;
        mc.encoder_layers = 1;
        mc.max_position = 16;
        (vocab, data, mc)
    }

    #[test]
    fn resume_reproduces_uninterrupted_metrics() {
        let (vocab, data, mc) = tiny_trainer_setup();
        let config = TrainConfig {
            total_steps: 6,
            batch_size: 3,
            checkpoint_every: 3,
            max_seq_len: 9,
            peak_lr: 1e-2,
            mlm_rate: 0.5,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let full_out = dir.path().join("full");
        let mut t = Trainer::new(config.clone(), Model::new(mc).unwrap(), vocab, &data).unwrap();
        let full = run(&mut t, &full_out).unwrap();
        assert_eq!(full.metrics.len(), 6);

        let mut resumed = Trainer::resume(config, &checkpoint_dir(&full_out, 3), &data).unwrap();
        let rest = run(&mut resumed, &dir.path().join("resumed")).unwrap();
        assert_eq!(rest.metrics, full.metrics[3..]);
        let a = load_checkpoint(&full.final_checkpoint).unwrap();
        let b = load_checkpoint(&rest.final_checkpoint).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert!(a.model.has_decoder());
    }
}
