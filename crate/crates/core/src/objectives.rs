//! Training losses: masked-language modelling plus the two knowledge
//! generation terms, computed from one encoder pass per sequence.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attn::{decoder_plan, encoder_plan, Window};
use crate::error::{Error, Result};
use crate::nn::{Grads, Mat, Model, Tape, Var};
use crate::text::{DecoderTarget, EncoderInput};

/// Default decoder window for unstructured (page) targets.
pub const DEFAULT_PAGE_WINDOW: Window = Window::Last(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Flattened fact, decoded with full causal attention.
    Structured,
    /// Entity page prefix, decoded with a sliding window.
    Unstructured,
}

/// A decoder target attached to one marker pair of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionTarget {
    /// Index into `EncoderInput::pairs`.
    pub pair: usize,
    pub kind: TargetKind,
    pub target: DecoderTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub input: EncoderInput,
    pub targets: Vec<InjectionTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm: f64,
    pub structured: f64,
    pub unstructured: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mlm: 1.0,
            structured: 1.0,
            unstructured: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub page_window: Window,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            page_window: DEFAULT_PAGE_WINDOW,
            weights: LossWeights::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn window_for(&self, kind: TargetKind) -> Window {
        match kind {
            TargetKind::Structured => Window::All,
            TargetKind::Unstructured => self.page_window,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mlm: f64,
    pub l_struct: f64,
    pub l_unstruct: f64,
    pub total: f64,
    pub mlm_tokens: usize,
    pub struct_targets: usize,
    pub struct_tokens: usize,
    pub unstruct_targets: usize,
    pub unstruct_tokens: usize,
}

fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    row[class] - max - sum.ln()
}

/// Mean cross-entropy of `logits` rows against `labels`; 0 for no rows.
pub fn mlm_loss(logits: &Mat, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len(), "one label per logits row");
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &c)| -log_softmax_at(logits.row(r), c))
        .sum();
    total / labels.len() as f64
}

/// Summed negative log-likelihood of the loss-bearing slots of `target`
/// under full-width decoder `logits`.
pub fn target_nll(logits: &Mat, target: &DecoderTarget) -> f64 {
    assert_eq!(logits.rows(), target.len(), "one logits row per slot");
    target
        .slot_ids()
        .iter()
        .zip(target.loss_mask())
        .enumerate()
        .filter(|(_, (_, &scored))| scored)
        .map(|(t, (&id, _))| -log_softmax_at(logits.row(t), id as usize))
        .sum()
}

fn decoded_nll(model: &Model, g_s: &[f64], target: &DecoderTarget, window: Window) -> Result<f64> {
    let plan = decoder_plan(target.len(), 1, window)?;
    let logits = model.decode_logits(g_s, target, &plan)?;
    Ok(target_nll(&logits, target))
}

pub fn struct_loss(model: &Model, g_s: &[f64], target: &DecoderTarget) -> Result<f64> {
    decoded_nll(model, g_s, target, Window::All)
}

pub fn unstruct_loss(model: &Model, g_s: &[f64], page: &DecoderTarget, window: Window) -> Result<f64> {
    decoded_nll(model, g_s, page, window)
}

/// Sum of the losses of several targets for one span, each under its own
/// window.
pub fn span_multi_loss(model: &Model, g_s: &[f64], targets: &[(&DecoderTarget, Window)]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut total = 0.0;
    for (target, window) in targets {
        total += decoded_nll(model, g_s, target, *window)?;
    }
    Ok(total)
}

/// Records the whole batch on `tape`; returns the report and the weighted
/// total node.
pub fn record_batch(
    model: &Model,
    tape: &mut Tape,
    batch: &[TrainingSequence],
    config: &ObjectiveConfig,
) -> Result<(LossReport, Var)> {
    let first = model.config.first_output_id as usize;
    let mut report = LossReport::default();
    let mut mlm_parts = Vec::new();
    let mut struct_parts = Vec::new();
    let mut unstruct_parts = Vec::new();

    for seq in batch {
        let plan = encoder_plan(&seq.input);
        let mask = Rc::new(plan.visibility);
        let states = model.encoder_states(tape, &seq.input.ids, &plan.position_ids, &mask)?;

        let mlm = seq.input.mlm_targets();
        if !mlm.is_empty() {
            let rows: Vec<usize> = mlm.iter().map(|&(r, _)| r).collect();
            let mut classes = Vec::with_capacity(mlm.len());
            for (i, &(_, label)) in mlm.iter().enumerate() {
                let label = label as usize;
                if label < first {
                    return Err(Error::Shape(format!("MLM label {label} is a reserved id")));
                }
                classes.push((i, label - first));
            }
            let logits = model.mlm_logits(tape, states, &rows);
            mlm_parts.push(tape.nll_sum(logits, &classes));
            report.mlm_tokens += mlm.len();
        }

        for inj in &seq.targets {
            let pair = seq
                .input
                .pairs
                .get(inj.pair)
                .ok_or_else(|| Error::Shape(format!("target refers to missing marker pair {}", inj.pair)))?;
            let g = model.span_rep(tape, states, pair);
            let dplan = decoder_plan(inj.target.len(), 1, config.window_for(inj.kind))?;
            let dmask = Rc::new(dplan.visibility);
            let ids = inj.target.slot_ids();
            let logits = model.decoder_logits(tape, g, &ids, &dmask)?;
            let mut classes = Vec::with_capacity(inj.target.num_scored());
            for (t, (&id, &scored)) in ids.iter().zip(inj.target.loss_mask()).enumerate() {
                if scored {
                    let id = id as usize;
                    if id < first {
                        return Err(Error::Shape(format!("decoder label {id} is a reserved id")));
                    }
                    classes.push((t, id - first));
                }
            }
            let nll = tape.nll_sum(logits, &classes);
            match inj.kind {
                TargetKind::Structured => {
                    struct_parts.push(nll);
                    report.struct_targets += 1;
                    report.struct_tokens += classes.len();
                }
                TargetKind::Unstructured => {
                    unstruct_parts.push(nll);
                    report.unstruct_targets += 1;
                    report.unstruct_tokens += classes.len();
                }
            }
        }
    }

    let w = config.weights;
    let mut terms = Vec::new();
    let mut mean_term = |tape: &mut Tape, parts: &[Var], count: usize, weight: f64, name: &str| -> Result<f64> {
        if parts.is_empty() {
            return Ok(0.0);
        }
        let s = tape.sum(parts);
        let mean = tape.scale(s, 1.0 / count as f64);
        let value = tape.scalar(mean);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {value}")));
        }
        terms.push(tape.scale(mean, weight));
        Ok(value)
    };
    report.l_mlm = mean_term(tape, &mlm_parts, report.mlm_tokens, w.mlm, "l_mlm")?;
    report.l_struct = mean_term(tape, &struct_parts, report.struct_targets, w.structured, "l_struct")?;
    report.l_unstruct = mean_term(tape, &unstruct_parts, report.unstruct_targets, w.unstructured, "l_unstruct")?;
    let total = if terms.is_empty() {
        tape.constant(Mat::scalar(0.0))
    } else {
        tape.sum(&terms)
    };
    report.total = w.mlm * report.l_mlm + w.structured * report.l_struct + w.unstructured * report.l_unstruct;
    Ok((report, total))
}

pub fn combined_loss(model: &Model, batch: &[TrainingSequence], config: &ObjectiveConfig) -> Result<LossReport> {
    let mut tape = Tape::new(&model.params);
    Ok(record_batch(model, &mut tape, batch, config)?.0)
}

/// Loss report plus gradients of the weighted total.
pub fn loss_and_grads(
    model: &Model,
    batch: &[TrainingSequence],
    config: &ObjectiveConfig,
) -> Result<(LossReport, Grads)> {
    let mut tape = Tape::new(&model.params);
    let (report, total) = record_batch(model, &mut tape, batch, config)?;
    Ok((report, tape.backward(total)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{span_representation, ModelConfig};
    use crate::text::{
        apply_mlm, assemble_from_ids, build_vocab, flatten_fact, MarkerKind, MlmConfig, Slot, Vocab,
    };

    fn fixture() -> (Model, Vocab) {
        let vocab = build_vocab("a b c d e f g h".split(' '), 1);
        let mut cfg = ModelConfig::desk(vocab.len(), vocab.first_output_id());
        cfg.hidden_size = 8;
        cfg.num_heads = 2;
        cfg.ffn_size = 16;
        cfg.encoder_layers = 1;
        cfg.max_position = 32;
        cfg.init_seed = 3;
        (Model::new(cfg).unwrap(), vocab)
    }

    fn word_ids(vocab: &Vocab, words: &str) -> Vec<u32> {
        vocab.encode(&words.split(' ').collect::<Vec<_>>())
    }

    fn sequence(vocab: &Vocab, mlm_rate: f64) -> TrainingSequence {
        let ids = word_ids(vocab, "a b c d e f");
        let input = assemble_from_ids(&ids, &[(1, 2, MarkerKind::Entity), (1, 2, MarkerKind::Relation)]).unwrap();
        let input = apply_mlm(&input, &MlmConfig::new(mlm_rate, true, true).unwrap(), vocab, 11);
        let fact = flatten_fact(&["g"], &["h", "a"], vocab).unwrap();
        let page = DecoderTarget::page(&["c", "d", "e", "f"], vocab).unwrap();
        TrainingSequence {
            input,
            targets: vec![
                InjectionTarget { pair: 1, kind: TargetKind::Structured, target: fact },
                InjectionTarget { pair: 0, kind: TargetKind::Unstructured, target: page },
            ],
        }
    }

    #[test]
    fn no_corrupted_positions_gives_zero() {
        assert_eq!(mlm_loss(&Mat::zeros(0, 5), &[]), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let l = mlm_loss(&Mat::zeros(3, 40), &[0, 7, 39]);
        assert!((l - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_positions_by_hand() {
        let logits = Mat::from_vec(2, 2, vec![0.0, 1.0, 2.0, 0.0]);
        // row 0 picks class 1: ln(1 + e); row 1 picks class 1: 2 + ln(1 + e^-2)
        let expect = ((1.0 + 1f64.exp()).ln() - 1.0 + 2.0 + (1.0 + (-2f64).exp()).ln()) / 2.0;
        assert!((mlm_loss(&logits, &[1, 1]) - expect).abs() < 1e-12);
    }

    #[test]
    fn prompt_slot_logits_do_not_matter() {
        let (_, vocab) = fixture();
        let fact = flatten_fact(&["g"], &["h"], &vocab).unwrap();
        let mut logits = Mat::zeros(fact.len(), vocab.len());
        let base = target_nll(&logits, &fact);
        assert!((base - 2.0 * (vocab.len() as f64).ln()).abs() < 1e-12);
        for (t, &scored) in fact.loss_mask().iter().enumerate() {
            if !scored {
                for x in logits.row_mut(t) {
                    *x = 17.0 * (*x + 1.3);
                }
                logits.set(t, 2, -40.0);
            }
        }
        assert_eq!(target_nll(&logits, &fact), base);
    }

    #[test]
    fn wide_window_equals_full_causal() {
        let (model, vocab) = fixture();
        let g: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let page = DecoderTarget::page(&["a", "b", "c", "d", "e"], &vocab).unwrap();
        let full = struct_loss(&model, &g, &page).unwrap();
        let wide = unstruct_loss(&model, &g, &page, Window::Last(page.len())).unwrap();
        assert_eq!(full, wide);
        let narrow = unstruct_loss(&model, &g, &page, Window::Last(2)).unwrap();
        assert_ne!(full, narrow);
    }

    #[test]
    fn span_multi_loss_adds_up() {
        let (model, vocab) = fixture();
        let g: Vec<f64> = (0..16).map(|i| (i as f64 * 0.11).cos()).collect();
        let fact = flatten_fact(&["g"], &["h"], &vocab).unwrap();
        let page = DecoderTarget::page(&["a", "b", "c"], &vocab).unwrap();
        let single = struct_loss(&model, &g, &fact).unwrap();
        assert_eq!(span_multi_loss(&model, &g, &[(&fact, Window::All)]).unwrap(), single);
        let twice = span_multi_loss(&model, &g, &[(&fact, Window::All), (&fact, Window::All)]).unwrap();
        assert_eq!(twice, 2.0 * single);
        let mixed = span_multi_loss(&model, &g, &[(&fact, Window::All), (&page, Window::Last(2))]).unwrap();
        let sep = single + unstruct_loss(&model, &g, &page, Window::Last(2)).unwrap();
        assert!((mixed - sep).abs() < 1e-12);
        assert!(matches!(span_multi_loss(&model, &g, &[]), Err(Error::EmptyTarget)));
    }

    #[test]
    fn report_is_additive_and_matches_independent_terms() {
        let (model, vocab) = fixture();
        let seq = sequence(&vocab, 0.5);
        let cfg = ObjectiveConfig::default();
        let report = combined_loss(&model, std::slice::from_ref(&seq), &cfg).unwrap();
        assert_eq!(report.total, report.l_mlm + report.l_struct + report.l_unstruct);
        assert!(report.mlm_tokens > 0);

        let plan = encoder_plan(&seq.input);
        let out = model.encode(&seq.input, &plan).unwrap();
        let mlm = seq.input.mlm_targets();
        let mut logits = Mat::zeros(mlm.len(), vocab.len());
        let tok = model.params.by_name("emb.token").unwrap();
        let bias = model.params.by_name("mlm.bias").unwrap();
        let first = vocab.first_output_id() as usize;
        for (r, &(row, _)) in mlm.iter().enumerate() {
            for c in 0..vocab.len() {
                let v = if c < first {
                    f64::NEG_INFINITY
                } else {
                    crate::nn::dot(out.hidden.row(row), tok.row(c)) + bias.get(0, c - first)
                };
                logits.set(r, c, v);
            }
        }
        let labels: Vec<usize> = mlm.iter().map(|&(_, l)| l as usize).collect();
        assert!((report.l_mlm - mlm_loss(&logits, &labels)).abs() < 1e-10);

        let g_rel = span_representation(&out, &seq.input.pairs[1], model.config.span_rep);
        let g_ent = span_representation(&out, &seq.input.pairs[0], model.config.span_rep);
        let s = struct_loss(&model, &g_rel, &seq.targets[0].target).unwrap();
        let u = unstruct_loss(&model, &g_ent, &seq.targets[1].target, Window::Last(2)).unwrap();
        assert!((report.l_struct - s).abs() < 1e-10);
        assert!((report.l_unstruct - u).abs() < 1e-10);
    }

    #[test]
    fn absent_terms_contribute_nothing() {
        let (model, vocab) = fixture();
        let cfg = ObjectiveConfig::default();
        let mut seq = sequence(&vocab, 0.5);
        seq.targets.clear();
        let r = combined_loss(&model, std::slice::from_ref(&seq), &cfg).unwrap();
        assert_eq!(r.total, r.l_mlm);
        assert_eq!((r.struct_targets, r.unstruct_targets), (0, 0));

        let mut seq = sequence(&vocab, 0.0);
        seq.targets.truncate(1);
        let r = combined_loss(&model, std::slice::from_ref(&seq), &cfg).unwrap();
        assert_eq!(r.total, r.l_struct);
        assert_eq!(r.mlm_tokens, 0);
        assert_eq!(r.struct_tokens, 3);
    }

    #[test]
    fn duplicating_a_target_keeps_the_batch_mean() {
        let (model, vocab) = fixture();
        let cfg = ObjectiveConfig::default();
        let mut seq = sequence(&vocab, 0.0);
        seq.targets.truncate(1);
        let one = combined_loss(&model, std::slice::from_ref(&seq), &cfg).unwrap();
        let two = combined_loss(&model, &[seq.clone(), seq], &cfg).unwrap();
        assert!((one.l_struct - two.l_struct).abs() < 1e-12);
    }

    #[test]
    fn knowledge_targets_reach_the_encoder() {
        let (model, vocab) = fixture();
        let mut seq = sequence(&vocab, 0.0);
        seq.targets.truncate(1);
        let (_, grads) = loss_and_grads(&model, &[seq], &ObjectiveConfig::default()).unwrap();
        let id = model.params.id("enc.0.attn.q.weight").unwrap();
        let g = grads.get(id).expect("encoder reached");
        assert!(g.sum_squares() > 0.0);
    }

    #[test]
    fn soft_prompt_only_target_is_rejected() {
        assert!(matches!(
            DecoderTarget::from_slots(vec![Slot::SoftPrompt(1)]),
            Err(Error::EmptyTarget)
        ));
    }
}
