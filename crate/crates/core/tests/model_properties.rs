use proptest::prelude::*;
use unter_core::attn::{decoder_plan, encoder_plan, Window};
use unter_core::nn::{Model, ModelConfig, SpanRepMode};
use unter_core::objectives::{combined_loss, loss_and_grads, InjectionTarget, ObjectiveConfig, TargetKind, TrainingSequence};
use unter_core::text::{assemble_from_ids, build_vocab_with_prompts, flatten_fact, DecoderTarget, MarkerKind, Slot, Vocab};

fn vocab() -> Vocab {
    build_vocab_with_prompts((0..20).map(|i| format!("w{i}")), 1, 3)
}

fn model(vocab: &Vocab, seed: u64, span_rep: SpanRepMode) -> Model {
    let mut cfg = ModelConfig::desk(vocab.len(), vocab.first_output_id());
    cfg.hidden_size = 8;
    cfg.num_heads = 2;
    cfg.ffn_size = 16;
    cfg.encoder_layers = 2;
    cfg.max_position = 32;
    cfg.init_seed = seed;
    cfg.span_rep = span_rep;
    Model::new(cfg).unwrap()
}

fn word_ids(vocab: &Vocab) -> impl Strategy<Value = u32> {
    (vocab.first_output_id() + 1)..vocab.len() as u32
}

/// Sentence ids plus spans given as (start, length, is_entity) triples that
/// get clamped into the sentence.
fn sentence_and_spans() -> impl Strategy<Value = (Vec<u32>, Vec<(usize, usize, bool)>)> {
    let v = vocab();
    (
        prop::collection::vec(word_ids(&v), 1..14),
        prop::collection::vec((0usize..14, 0usize..4, any::<bool>()), 0..4),
    )
}

fn spans_for(n: usize, raw: &[(usize, usize, bool)]) -> Vec<(usize, usize, MarkerKind)> {
    let mut spans: Vec<(usize, usize, MarkerKind)> = Vec::new();
    for &(s, len, entity) in raw {
        let s = s % n;
        let e = (s + len).min(n - 1);
        let kind = if entity { MarkerKind::Entity } else { MarkerKind::Relation };
        if !spans.contains(&(s, e, kind)) {
            spans.push((s, e, kind));
        }
    }
    spans
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn appended_markers_leave_text_states_bit_identical((ids, raw) in sentence_and_spans(), seed in 0u64..1000) {
        let v = vocab();
        let m = model(&v, seed, SpanRepMode::Marker);
        let input = assemble_from_ids(&ids, &spans_for(ids.len(), &raw)).unwrap();
        let bare = input.without_markers();
        let full = m.encode(&input, &encoder_plan(&input)).unwrap();
        let text = m.encode(&bare, &encoder_plan(&bare)).unwrap();
        for r in 0..bare.len() {
            prop_assert_eq!(full.hidden.row(r), text.hidden.row(r));
        }
    }

    #[test]
    fn one_pair_does_not_see_another((ids, raw) in sentence_and_spans(), seed in 0u64..1000) {
        let v = vocab();
        let m = model(&v, seed, SpanRepMode::Marker);
        let spans = spans_for(ids.len(), &raw);
        prop_assume!(spans.len() >= 2);
        let both = assemble_from_ids(&ids, &spans).unwrap();
        let alone = assemble_from_ids(&ids, &spans[..1]).unwrap();
        let a = m.encode(&both, &encoder_plan(&both)).unwrap();
        let b = m.encode(&alone, &encoder_plan(&alone)).unwrap();
        let p = both.pairs[0];
        prop_assert_eq!(a.hidden.row(p.open), b.hidden.row(p.open));
        prop_assert_eq!(a.hidden.row(p.close), b.hidden.row(p.close));
    }

    #[test]
    fn decoder_row_depends_only_on_its_window(
        tokens in prop::collection::vec(word_ids(&vocab()), 2..9),
        k in 1usize..5,
        j in 0usize..9,
        layers in 1usize..=3,
        seed in 0u64..1000,
    ) {
        let v = vocab();
        let mut m = model(&v, seed, SpanRepMode::Marker);
        if layers > 1 {
            let mut cfg = m.config.clone();
            cfg.decoder_layers = layers;
            m = Model::new(cfg).unwrap();
        }
        let j = j % tokens.len();
        let target = DecoderTarget::from_slots(tokens.iter().map(|&t| Slot::Token(t)).collect()).unwrap();
        let mut changed = tokens.clone();
        changed[j] = if changed[j] == v.first_output_id() + 1 { changed[j] + 1 } else { v.first_output_id() + 1 };
        let other = DecoderTarget::from_slots(changed.into_iter().map(Slot::Token).collect()).unwrap();
        let g: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let plan = decoder_plan(tokens.len(), 1, Window::Last(k)).unwrap();
        let a = m.decode_logits(&g, &target, &plan).unwrap();
        let b = m.decode_logits(&g, &other, &plan).unwrap();
        for t in 0..tokens.len() {
            if t > j && t - j <= k {
                prop_assert_ne!(a.row(t), b.row(t), "row {} ignored token {} (k={}, {} layers)", t, j, k, layers);
            } else {
                prop_assert_eq!(a.row(t), b.row(t), "row {} moved when token {} changed (k={}, {} layers)", t, j, k, layers);
            }
        }
    }
}

#[test]
fn token_concat_reads_span_boundaries() {
    let v = vocab();
    let m = model(&v, 3, SpanRepMode::TokenConcat);
    let input = assemble_from_ids(&[20, 21, 22, 23], &[(1, 2, MarkerKind::Entity)]).unwrap();
    let out = m.encode(&input, &encoder_plan(&input)).unwrap();
    let g = unter_core::nn::span_representation(&out, &input.pairs[0], SpanRepMode::TokenConcat);
    assert_eq!(&g[..8], out.hidden.row(2));
    assert_eq!(&g[8..], out.hidden.row(3));
}

/// Central differences over every tensor of a model with two decoder layers
/// and untied output weights.
#[test]
fn whole_model_gradients_match_finite_differences() {
    let v = vocab();
    let mut cfg = ModelConfig::desk(v.len(), v.first_output_id());
    cfg.hidden_size = 8;
    cfg.num_heads = 2;
    cfg.ffn_size = 12;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 2;
    cfg.max_position = 24;
    cfg.tie_decoder_embeddings = false;
    let mut m = Model::new(cfg).unwrap();
    let mut input = assemble_from_ids(&[16, 17, 18, 19, 20], &[(0, 1, MarkerKind::Relation), (2, 4, MarkerKind::Entity)]).unwrap();
    let mut labels = vec![None; input.len()];
    labels[2] = Some(input.ids[2]);
    input.ids[2] = unter_core::text::MASK;
    input.mlm_labels = Some(labels);
    let batch = vec![TrainingSequence {
        input,
        targets: vec![
            InjectionTarget {
                pair: 0,
                kind: TargetKind::Structured,
                target: flatten_fact(&["w3"], &["w4", "w5"], &v).unwrap(),
            },
            InjectionTarget {
                pair: 1,
                kind: TargetKind::Unstructured,
                target: DecoderTarget::from_slots(vec![Slot::Token(21), Slot::Token(22), Slot::Token(23), Slot::Token(24)]).unwrap(),
            },
        ],
    }];
    let cfg = ObjectiveConfig::default();
    let (_, grads) = loss_and_grads(&m, &batch, &cfg).unwrap();
    let grads = grads.dense(&m.params);
    let h = 1e-5;
    let ids: Vec<_> = m.params.ids().collect();
    for (n, id) in ids.into_iter().enumerate() {
        let len = m.params.get(id).len();
        // three spread-out coordinates per tensor
        for c in [0, len / 2, len - 1] {
            let orig = m.params.get(id).data()[c];
            m.params.get_mut(id).data_mut()[c] = orig + h;
            let up = combined_loss(&m, &batch, &cfg).unwrap().total;
            m.params.get_mut(id).data_mut()[c] = orig - h;
            let down = combined_loss(&m, &batch, &cfg).unwrap().total;
            m.params.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[n].data()[c];
            // key biases have an exactly zero gradient (softmax shift
            // invariance), so the numeric side is pure rounding noise there
            let tol = 1e-7 + 1e-5 * numeric.abs().max(analytic.abs());
            assert!((numeric - analytic).abs() < tol,"{}[{c}]: analytic {analytic} numeric {numeric}", m.params.name(id));
        }
    }
}
