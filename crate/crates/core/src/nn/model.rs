use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::params::{uniform, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::attn::{AttentionPlan, DecoderPlan, Visibility};
use crate::error::{Error, Result};
use crate::text::{DecoderTarget, EncoderInput, MarkerPair};

/// Prefix shared by every decoder-side tensor name.
pub const DECODER_PREFIX: &str = "dec.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRepMode {
    /// Concatenated hidden states of the open and close markers.
    Marker,
    /// Concatenated hidden states of the span's first and last text tokens.
    TokenConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_size: usize,
    pub max_position: usize,
    pub vocab_size: usize,
    /// First vocabulary id that receives an output logit.
    pub first_output_id: u32,
    pub dropout: f64,
    pub span_rep: SpanRepMode,
    /// Decoder output projection shares the token embedding table.
    pub tie_decoder_embeddings: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize, first_output_id: u32) -> Self {
        ModelConfig {
            hidden_size: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            ffn_size: 256,
            max_position: 128,
            vocab_size,
            first_output_id,
            dropout: 0.0,
            span_rep: SpanRepMode::Marker,
            tie_decoder_embeddings: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(1..=3).contains(&self.decoder_layers) {
            return Err(Error::Config(format!("decoder_layers must be 1..=3, got {}", self.decoder_layers)));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be >= 1".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported; set it to 0".into()));
        }
        if self.first_output_id as usize >= self.vocab_size {
            return Err(Error::Config("vocabulary has no output classes".into()));
        }
        Ok(())
    }

    pub fn num_outputs(&self) -> usize {
        self.vocab_size - self.first_output_id as usize
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct DecoderIds {
    span_proj: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
    out_bias: ParamId,
    out_weight: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Layout {
    token: ParamId,
    position: ParamId,
    encoder: Vec<BlockIds>,
    enc_ln_f: (ParamId, ParamId),
    mlm_bias: ParamId,
    decoder: Option<DecoderIds>,
}

/// Per-index final hidden states, aligned with the encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Mat,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn block_names(prefix: &str) -> [(String, String); 8] {
    let pair = |a: &str| (format!("{prefix}.{a}.weight"), format!("{prefix}.{a}.bias"));
    [
        (format!("{prefix}.ln1.gamma"), format!("{prefix}.ln1.beta")),
        pair("attn.q"),
        pair("attn.k"),
        pair("attn.v"),
        pair("attn.out"),
        (format!("{prefix}.ln2.gamma"), format!("{prefix}.ln2.beta")),
        pair("ffn.in"),
        pair("ffn.out"),
    ]
}

fn init_block(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    let h = cfg.hidden_size;
    let f = cfg.ffn_size;
    let names = block_names(prefix);
    let shapes = [(h, h), (h, h), (h, h), (h, h), (h, f), (f, h)];
    params.insert(&names[0].0, Mat::filled(1, h, 1.0))?;
    params.insert(&names[0].1, Mat::zeros(1, h))?;
    for (i, idx) in [1usize, 2, 3, 4].into_iter().enumerate() {
        let (r, c) = shapes[i];
        params.insert(&names[idx].0, uniform(rng, r, c, 1.0 / (r as f64).sqrt()))?;
        params.insert(&names[idx].1, Mat::zeros(1, c))?;
    }
    params.insert(&names[5].0, Mat::filled(1, h, 1.0))?;
    params.insert(&names[5].1, Mat::zeros(1, h))?;
    for (i, idx) in [6usize, 7].into_iter().enumerate() {
        let (r, c) = shapes[4 + i];
        params.insert(&names[idx].0, uniform(rng, r, c, 1.0 / (r as f64).sqrt()))?;
        params.insert(&names[idx].1, Mat::zeros(1, c))?;
    }
    Ok(())
}

fn resolve_block(params: &ParamStore, prefix: &str) -> Result<BlockIds> {
    let n = block_names(prefix);
    let r = |i: usize| -> Result<(ParamId, ParamId)> { Ok((params.require(&n[i].0)?, params.require(&n[i].1)?)) };
    Ok(BlockIds {
        ln1: r(0)?,
        q: r(1)?,
        k: r(2)?,
        v: r(3)?,
        o: r(4)?,
        ln2: r(5)?,
        ffn_in: r(6)?,
        ffn_out: r(7)?,
    })
}

fn pair(params: &ParamStore, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((params.require(a)?, params.require(b)?))
}

fn check_shape(params: &ParamStore, name: &str, shape: (usize, usize)) -> Result<()> {
    let actual = params.by_name(name).map(Mat::shape);
    if actual != Some(shape) {
        return Err(Error::Checkpoint(format!("tensor `{name}` has shape {actual:?}, expected {shape:?}")));
    }
    Ok(())
}

impl Model {
    /// Freshly initialized encoder and decoder. Weights are uniform in
    /// `±1/sqrt(fan_in)`, embeddings in `±0.1`, layer norms at identity, all
    /// drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let h = config.hidden_size;
        p.insert("emb.token", uniform(&mut rng, config.vocab_size, h, 0.1))?;
        p.insert("emb.position", uniform(&mut rng, config.max_position, h, 0.1))?;
        for l in 0..config.encoder_layers {
            init_block(&mut p, &mut rng, &format!("enc.{l}"), &config)?;
        }
        p.insert("enc.ln_f.gamma", Mat::filled(1, h, 1.0))?;
        p.insert("enc.ln_f.beta", Mat::zeros(1, h))?;
        p.insert("mlm.bias", Mat::zeros(1, config.num_outputs()))?;
        p.insert("dec.span_proj.weight", uniform(&mut rng, 2 * h, h, 1.0 / ((2 * h) as f64).sqrt()))?;
        p.insert("dec.span_proj.bias", Mat::zeros(1, h))?;
        for l in 0..config.decoder_layers {
            init_block(&mut p, &mut rng, &format!("dec.{l}"), &config)?;
        }
        p.insert("dec.ln_f.gamma", Mat::filled(1, h, 1.0))?;
        p.insert("dec.ln_f.beta", Mat::zeros(1, h))?;
        p.insert("dec.out.bias", Mat::zeros(1, config.num_outputs()))?;
        if !config.tie_decoder_embeddings {
            p.insert("dec.out.weight", uniform(&mut rng, config.vocab_size, h, 0.1))?;
        }
        Self::from_params(config, p)
    }

    /// Wraps existing tensors. Decoder tensors are optional; without them
    /// the model is encoder-only.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        check_shape(&params, "emb.token", (config.vocab_size, h))?;
        check_shape(&params, "emb.position", (config.max_position, h))?;
        let encoder = (0..config.encoder_layers)
            .map(|l| resolve_block(&params, &format!("enc.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let has_decoder = params.names().iter().any(|n| n.starts_with(DECODER_PREFIX));
        let decoder = if has_decoder {
            Some(DecoderIds {
                span_proj: pair(&params, "dec.span_proj.weight", "dec.span_proj.bias")?,
                blocks: (0..config.decoder_layers)
                    .map(|l| resolve_block(&params, &format!("dec.{l}")))
                    .collect::<Result<Vec<_>>>()?,
                ln_f: pair(&params, "dec.ln_f.gamma", "dec.ln_f.beta")?,
                out_bias: params.require("dec.out.bias")?,
                out_weight: if config.tie_decoder_embeddings {
                    None
                } else {
                    Some(params.require("dec.out.weight")?)
                },
            })
        } else {
            None
        };
        let layout = Layout {
            token: params.require("emb.token")?,
            position: params.require("emb.position")?,
            encoder,
            enc_ln_f: pair(&params, "enc.ln_f.gamma", "enc.ln_f.beta")?,
            mlm_bias: params.require("mlm.bias")?,
            decoder,
        };
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.decoder.is_some()
    }

    /// Encoder-only copy with every decoder tensor removed.
    pub fn without_decoder(&self) -> Model {
        let params = self.params.without_prefix(DECODER_PREFIX);
        Model::from_params(self.config.clone(), params).expect("encoder tensors unchanged")
    }

    /// Names of the tensors that make up the decoder.
    pub fn decoder_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with(DECODER_PREFIX))
            .cloned()
            .collect()
    }

    fn block(&self, tape: &mut Tape, x: Var, ids: &BlockIds, mask: &Rc<Visibility>) -> Var {
        let p = |tape: &mut Tape, (a, b): (ParamId, ParamId)| (tape.param(a), tape.param(b));
        let (g1, b1) = p(tape, ids.ln1);
        let h = tape.layer_norm(x, g1, b1);
        let (wq, bq) = p(tape, ids.q);
        let (wk, bk) = p(tape, ids.k);
        let (wv, bv) = p(tape, ids.v);
        let q = tape.linear(h, wq, bq);
        let k = tape.linear(h, wk, bk);
        let v = tape.linear(h, wv, bv);
        let a = tape.attention(q, k, v, mask, self.config.num_heads);
        let (wo, bo) = p(tape, ids.o);
        let o = tape.linear(a, wo, bo);
        let x = tape.add(x, o);
        let (g2, b2) = p(tape, ids.ln2);
        let h = tape.layer_norm(x, g2, b2);
        let (wi, bi) = p(tape, ids.ffn_in);
        let (wf, bf) = p(tape, ids.ffn_out);
        let f = tape.linear(h, wi, bi);
        let f = tape.gelu(f);
        let f = tape.linear(f, wf, bf);
        tape.add(x, f)
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_position) {
            return Err(Error::Shape(format!(
                "position id {p} exceeds max_position {}",
                self.config.max_position
            )));
        }
        Ok(())
    }

    /// Final encoder states `[L x H]` recorded on `tape`.
    pub fn encoder_states(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        positions: &[usize],
        mask: &Rc<Visibility>,
    ) -> Result<Var> {
        if ids.len() != positions.len() || mask.len() != ids.len() {
            return Err(Error::Shape(format!(
                "input length {} / positions {} / plan {}",
                ids.len(),
                positions.len(),
                mask.len()
            )));
        }
        self.check_positions(positions)?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        let tok = tape.param(self.layout.token);
        let pos = tape.param(self.layout.position);
        let te = tape.embed(tok, ids);
        let pe = tape.embed(pos, &positions.iter().map(|&p| p as u32).collect::<Vec<_>>());
        let mut x = tape.add(te, pe);
        for ids in &self.layout.encoder {
            x = self.block(tape, x, ids, mask);
        }
        let (g, b) = (tape.param(self.layout.enc_ln_f.0), tape.param(self.layout.enc_ln_f.1));
        Ok(tape.layer_norm(x, g, b))
    }

    /// Logits over output classes (ids from `first_output_id`) at `rows`.
    pub fn mlm_logits(&self, tape: &mut Tape, states: Var, rows: &[usize]) -> Var {
        let h = tape.gather_rows(states, rows);
        let tok = tape.param(self.layout.token);
        let logits = tape.matmul_nt(h, tok, self.config.first_output_id as usize);
        let bias = tape.param(self.layout.mlm_bias);
        tape.add_bias(logits, bias)
    }

    /// Span representation `[1 x 2H]`.
    pub fn span_rep(&self, tape: &mut Tape, states: Var, pair: &MarkerPair) -> Var {
        let rows = match self.config.span_rep {
            SpanRepMode::Marker => [pair.open, pair.close],
            SpanRepMode::TokenConcat => [pair.span.0, pair.span.1],
        };
        let g = tape.gather_rows(states, &rows);
        tape.flatten(g)
    }

    /// Decoder logits `[m x outputs]` for a target of `m` slots with ids
    /// `slot_ids`, conditioned on span representation `g` through the
    /// prefix slot.
    pub fn decoder_logits(&self, tape: &mut Tape, g: Var, slot_ids: &[u32], mask: &Rc<Visibility>) -> Result<Var> {
        let dec = self
            .layout
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model has no decoder".into()))?;
        let m = slot_ids.len();
        if m == 0 || mask.len() != m + 1 {
            return Err(Error::Shape(format!("decoder plan of size {} for {m} target slots", mask.len())));
        }
        let positions: Vec<usize> = (0..=m).collect();
        self.check_positions(&positions)?;
        let (pw, pb) = (tape.param(dec.span_proj.0), tape.param(dec.span_proj.1));
        let prefix = tape.linear(g, pw, pb);
        let tok = tape.param(self.layout.token);
        let mut parts = vec![prefix, prefix];
        if m > 1 {
            parts.push(tape.embed(tok, &slot_ids[..m - 1]));
        }
        let inputs = tape.concat_rows(&parts);
        let pos = tape.param(self.layout.position);
        let pe = tape.embed(pos, &positions.iter().map(|&p| p as u32).collect::<Vec<_>>());
        let x = tape.add(inputs, pe);
        let h = if dec.blocks.len() > 1 && !is_closed(mask) {
            // Stacked windows would widen each row's reach by k-1 slots per
            // layer, so every row runs the stack over its own visible slots.
            let mut rows = Vec::with_capacity(m);
            for r in 1..=m {
                let cols: Vec<usize> = (0..=r).filter(|&c| mask.get(r, c)).collect();
                let sub = Rc::new(restrict(mask, &cols));
                let mut y = tape.gather_rows(x, &cols);
                for ids in &dec.blocks {
                    y = self.block(tape, y, ids, &sub);
                }
                rows.push(tape.gather_rows(y, &[cols.len() - 1]));
            }
            tape.concat_rows(&rows)
        } else {
            let mut y = x;
            for ids in &dec.blocks {
                y = self.block(tape, y, ids, mask);
            }
            let rows: Vec<usize> = (1..=m).collect();
            tape.gather_rows(y, &rows)
        };
        let (g, b) = (tape.param(dec.ln_f.0), tape.param(dec.ln_f.1));
        let h = tape.layer_norm(h, g, b);
        let out_w = match dec.out_weight {
            Some(id) => tape.param(id),
            None => tok,
        };
        let logits = tape.matmul_nt(h, out_w, self.config.first_output_id as usize);
        let bias = tape.param(dec.out_bias);
        Ok(tape.add_bias(logits, bias))
    }

    pub fn encode(&self, input: &EncoderInput, plan: &AttentionPlan) -> Result<EncoderOutput> {
        if plan.position_ids != input.positions {
            return Err(Error::Shape("plan position ids differ from input".into()));
        }
        let mut tape = Tape::new(&self.params);
        let mask = Rc::new(plan.visibility.clone());
        let states = self.encoder_states(&mut tape, &input.ids, &plan.position_ids, &mask)?;
        Ok(EncoderOutput {
            hidden: tape.value(states).clone(),
        })
    }

    /// Full-width logits `[m x vocab_size]`; reserved ids get `-inf`.
    pub fn decode_logits(&self, g_s: &[f64], target: &DecoderTarget, plan: &DecoderPlan) -> Result<Mat> {
        if g_s.len() != 2 * self.config.hidden_size {
            return Err(Error::Shape(format!("span representation of width {}", g_s.len())));
        }
        if plan.prefix_len != 1 || plan.target_len != target.len() {
            return Err(Error::Shape("decoder plan does not match target".into()));
        }
        let mut tape = Tape::new(&self.params);
        let g = tape.constant(Mat::row_vector(g_s.to_vec()));
        let mask = Rc::new(plan.visibility.clone());
        let logits = self.decoder_logits(&mut tape, g, &target.slot_ids(), &mask)?;
        Ok(widen_logits(tape.value(logits), self.config.first_output_id as usize, self.config.vocab_size))
    }
}

/// True when every slot a row sees sees nothing beyond that row's own set,
/// i.e. extra layers cannot extend any row's receptive field.
fn is_closed(mask: &Visibility) -> bool {
    let n = mask.len();
    (0..n).all(|r| (0..n).filter(|&u| mask.get(r, u)).all(|u| (0..n).all(|c| !mask.get(u, c) || mask.get(r, c))))
}

fn restrict(mask: &Visibility, cols: &[usize]) -> Visibility {
    let mut sub = Visibility::new(cols.len());
    for (i, &q) in cols.iter().enumerate() {
        for (j, &k) in cols.iter().enumerate() {
            sub.set(i, j, mask.get(q, k));
        }
    }
    sub
}

/// Pads output-class logits back to full vocabulary width with `-inf`.
pub fn widen_logits(logits: &Mat, first: usize, vocab_size: usize) -> Mat {
    let mut out = Mat::filled(logits.rows(), vocab_size, f64::NEG_INFINITY);
    for r in 0..logits.rows() {
        out.row_mut(r)[first..].copy_from_slice(logits.row(r));
    }
    out
}

/// `g_s` of width `2H` read off an encoder output.
pub fn span_representation(output: &EncoderOutput, pair: &MarkerPair, mode: SpanRepMode) -> Vec<f64> {
    let (a, b) = match mode {
        SpanRepMode::Marker => (pair.open, pair.close),
        SpanRepMode::TokenConcat => (pair.span.0, pair.span.1),
    };
    let mut g = output.hidden.row(a).to_vec();
    g.extend_from_slice(output.hidden.row(b));
    g
}
