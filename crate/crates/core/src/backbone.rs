//! Encoder-decoder transformer with residual bottleneck adapters.
//!
//! Adapters compute `h ← W_up · (W_down · h) + h` on every position of a
//! layer's output. They sit after every encoder and decoder layer, or only
//! after the last one of each stack, depending on [`AdapterPlacement`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_nll, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{xavier, DecoderBlock, EncoderBlock};
use crate::tensor::{Grads, Mat, ParamStore};
use crate::tokenizer::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    EveryLayer,
    FinalLayerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub d_bottleneck: usize,
    pub adapter_placement: AdapterPlacement,
    /// Apply GELU between the down and up projections.
    pub adapter_activation: bool,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 32,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 64,
            d_bottleneck: 8,
            adapter_placement: AdapterPlacement::EveryLayer,
            adapter_activation: false,
            max_positions: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ffn", self.d_ffn),
            ("d_bottleneck", self.d_bottleneck),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_bottleneck >= self.d_model {
            return Err(Error::InvalidConfig(format!(
                "d_bottleneck {} must be smaller than d_model {}",
                self.d_bottleneck, self.d_model
            )));
        }
        Ok(())
    }

    fn has_adapter(&self, layer: usize, n_layers: usize) -> bool {
        match self.adapter_placement {
            AdapterPlacement::EveryLayer => true,
            AdapterPlacement::FinalLayerOnly => layer + 1 == n_layers,
        }
    }

    pub fn adapter_count(&self) -> usize {
        match self.adapter_placement {
            AdapterPlacement::EveryLayer => self.n_encoder_layers + self.n_decoder_layers,
            AdapterPlacement::FinalLayerOnly => 2,
        }
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, p) = (self.vocab_size, self.d_model, self.max_positions);
        v * d
            + 2 * p * d
            + self.n_encoder_layers * EncoderBlock::param_count(d, self.d_ffn)
            + self.n_decoder_layers * DecoderBlock::param_count(d, self.d_ffn)
            + self.adapter_count() * 2 * d * self.d_bottleneck
            + d * v
            + v
    }
}

/// True for the down/up projection tensors of any adapter.
pub fn is_adapter_tensor(name: &str) -> bool {
    name.contains(".adapter.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    AllTrainable,
    /// Only adapter tensors are trainable.
    AdapterOnly,
    /// Everything except adapter tensors is trainable.
    AdapterFrozen,
}

impl FreezePolicy {
    pub fn is_trainable(self, tensor_name: &str) -> bool {
        match self {
            FreezePolicy::AllTrainable => true,
            FreezePolicy::AdapterOnly => is_adapter_tensor(tensor_name),
            FreezePolicy::AdapterFrozen => !is_adapter_tensor(tensor_name),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::AllTrainable => "ALL_TRAINABLE",
            FreezePolicy::AdapterOnly => "ADAPTER_ONLY",
            FreezePolicy::AdapterFrozen => "ADAPTER_FROZEN",
        }
    }
}

/// Sets every tensor's trainable flag from `policy`.
pub fn apply_freeze_policy(mut params: ParamStore, policy: FreezePolicy) -> Result<ParamStore> {
    let mut any = false;
    for t in params.tensors_mut() {
        t.trainable = policy.is_trainable(&t.name);
        any |= t.trainable;
    }
    if !any {
        return Err(Error::NothingToTrain(policy.name().to_string()));
    }
    Ok(params)
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, b) = (cfg.vocab_size, cfg.d_model, cfg.d_bottleneck);
    let mut store = ParamStore::new();
    store.insert("tok_emb", xavier(v, d, &mut rng));
    store.insert("enc.pos", xavier(cfg.max_positions, d, &mut rng));
    store.insert("dec.pos", xavier(cfg.max_positions, d, &mut rng));
    for l in 0..cfg.n_encoder_layers {
        EncoderBlock::init(&mut store, &format!("enc.{l}"), d, cfg.d_ffn, &mut rng);
        if cfg.has_adapter(l, cfg.n_encoder_layers) {
            store.insert(format!("enc.{l}.adapter.down"), xavier(d, b, &mut rng));
            store.insert(format!("enc.{l}.adapter.up"), Mat::zeros(b, d));
        }
    }
    for l in 0..cfg.n_decoder_layers {
        DecoderBlock::init(&mut store, &format!("dec.{l}"), d, cfg.d_ffn, &mut rng);
        if cfg.has_adapter(l, cfg.n_decoder_layers) {
            store.insert(format!("dec.{l}.adapter.down"), xavier(d, b, &mut rng));
            store.insert(format!("dec.{l}.adapter.up"), Mat::zeros(b, d));
        }
    }
    store.insert("out.w", xavier(d, v, &mut rng));
    store.insert("out.b", Mat::zeros(1, v));
    Ok(store)
}

/// The adapter on a single hidden vector, outside the autodiff graph.
/// `down` is `d_model × d_bottleneck`, `up` is `d_bottleneck × d_model`.
pub fn adapter_forward(h: &[f64], down: &Mat, up: &Mat, activation: bool) -> Vec<f64> {
    assert_eq!(h.len(), down.rows, "hidden size mismatch");
    assert_eq!(down.cols, up.rows, "bottleneck size mismatch");
    let mut z = Mat::row_vector(h.to_vec()).matmul(down);
    if activation {
        for v in &mut z.data {
            *v = crate::autograd::gelu(*v);
        }
    }
    let projected = z.matmul(up);
    projected.data.iter().zip(h).map(|(p, r)| p + r).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Enabled,
    /// Skip adapters entirely, as if the model had been built without them.
    Bypassed,
}

#[derive(Debug, Clone, Copy)]
struct AdapterIds {
    down: usize,
    up: usize,
}

struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<(EncoderBlock, Option<AdapterIds>)>,
    decoder: Vec<(DecoderBlock, Option<AdapterIds>)>,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn resolve(cfg: &ModelConfig, p: &ParamStore) -> Result<Self> {
        let adapter = |prefix: &str| -> Result<AdapterIds> {
            Ok(AdapterIds {
                down: p.id(&format!("{prefix}.adapter.down"))?,
                up: p.id(&format!("{prefix}.adapter.up"))?,
            })
        };
        let encoder = (0..cfg.n_encoder_layers)
            .map(|l| {
                let prefix = format!("enc.{l}");
                let a = if cfg.has_adapter(l, cfg.n_encoder_layers) {
                    Some(adapter(&prefix)?)
                } else {
                    None
                };
                Ok((EncoderBlock::resolve(p, &prefix)?, a))
            })
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.n_decoder_layers)
            .map(|l| {
                let prefix = format!("dec.{l}");
                let a = if cfg.has_adapter(l, cfg.n_decoder_layers) {
                    Some(adapter(&prefix)?)
                } else {
                    None
                };
                Ok((DecoderBlock::resolve(p, &prefix)?, a))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: p.id("tok_emb")?,
            enc_pos: p.id("enc.pos")?,
            dec_pos: p.id("dec.pos")?,
            encoder,
            decoder,
            out_w: p.id("out.w")?,
            out_b: p.id("out.b")?,
        })
    }
}

fn adapter_graph(g: &mut Graph, ids: AdapterIds, activation: bool, h: Var) -> Var {
    let down = g.param(ids.down);
    let up = g.param(ids.up);
    let mut z = g.matmul(h, down);
    if activation {
        z = g.gelu(z);
    }
    let z = g.matmul(z, up);
    g.add(z, h)
}

fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

struct Encoded {
    memory: Var,
    key_allowed: Vec<bool>,
}

fn embed_with_positions(g: &mut Graph, tok: usize, pos: usize, ids: &[usize]) -> Var {
    let x = g.embed(tok, ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = g.embed(pos, &positions);
    g.add(x, p)
}

fn encode(g: &mut Graph, cfg: &ModelConfig, layout: &Layout, src: &[usize], mode: AdapterMode) -> Encoded {
    let n = src.len();
    let key_allowed: Vec<bool> = src.iter().map(|&t| t != PAD_ID).collect();
    let mask: Vec<bool> = (0..n * n).map(|k| key_allowed[k % n]).collect();
    let mut x = embed_with_positions(g, layout.tok_emb, layout.enc_pos, src);
    for (block, adapter) in &layout.encoder {
        x = block.apply(g, cfg.n_heads, x, Some(&mask));
        if let (Some(a), AdapterMode::Enabled) = (adapter, mode) {
            x = adapter_graph(g, *a, cfg.adapter_activation, x);
        }
    }
    Encoded { memory: x, key_allowed }
}

fn decode(g: &mut Graph, cfg: &ModelConfig, layout: &Layout, enc: &Encoded, tgt: &[usize], mode: AdapterMode) -> Var {
    let n = tgt.len();
    let m = enc.key_allowed.len();
    let causal: Vec<bool> = (0..n * n).map(|k| k % n <= k / n).collect();
    let cross: Vec<bool> = (0..n * m).map(|k| enc.key_allowed[k % m]).collect();
    let mut x = embed_with_positions(g, layout.tok_emb, layout.dec_pos, tgt);
    for (block, adapter) in &layout.decoder {
        x = block.apply(g, cfg.n_heads, x, &causal, enc.memory, &cross);
        if let (Some(a), AdapterMode::Enabled) = (adapter, mode) {
            x = adapter_graph(g, *a, cfg.adapter_activation, x);
        }
    }
    g.linear(x, layout.out_w, layout.out_b)
}

fn build_logits<'p>(
    g: &mut Graph<'p>,
    cfg: &ModelConfig,
    src: &[usize],
    tgt: &[usize],
    mode: AdapterMode,
) -> Result<Var> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidInput("source and target must be non-empty".into()));
    }
    check_ids(cfg, src)?;
    check_ids(cfg, tgt)?;
    let layout = Layout::resolve(cfg, g.params())?;
    let enc = encode(g, cfg, &layout, src, mode);
    Ok(decode(g, cfg, &layout, &enc, tgt, mode))
}

/// Teacher-forced logits, `|tgt| × vocab_size`. `tgt` is the decoder input.
pub fn model_forward(cfg: &ModelConfig, params: &ParamStore, src: &[usize], tgt: &[usize]) -> Result<Mat> {
    model_forward_with(cfg, params, src, tgt, AdapterMode::Enabled)
}

pub fn model_forward_with(
    cfg: &ModelConfig,
    params: &ParamStore,
    src: &[usize],
    tgt: &[usize],
    mode: AdapterMode,
) -> Result<Mat> {
    let mut g = Graph::new(params);
    let logits = build_logits(&mut g, cfg, src, tgt, mode)?;
    Ok(g.value(logits).clone())
}

/// Mean negative log-likelihood per non-`<pad>` target token.
pub fn sequence_cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    assert_eq!(logits.rows, targets.len(), "logits/targets length mismatch");
    let (_, nll, count) = softmax_nll(logits, targets, PAD_ID);
    if count == 0 {
        0.0
    } else {
        nll / count as f64
    }
}

/// Decoder input (`<bos>` + target) and output (target + `<eos>`) for teacher forcing.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(target);
    let mut output = target.to_vec();
    output.push(EOS_ID);
    (input, output)
}

pub fn seq2seq_loss(
    cfg: &ModelConfig,
    params: &ParamStore,
    src: &[usize],
    dec_in: &[usize],
    dec_out: &[usize],
) -> Result<f64> {
    let logits = model_forward(cfg, params, src, dec_in)?;
    Ok(sequence_cross_entropy(&logits, dec_out))
}

pub fn seq2seq_loss_and_grads(
    cfg: &ModelConfig,
    params: &ParamStore,
    src: &[usize],
    dec_in: &[usize],
    dec_out: &[usize],
) -> Result<(f64, Grads)> {
    seq2seq_loss_and_grads_with(cfg, params, src, dec_in, dec_out, AdapterMode::Enabled)
}

/// As [`seq2seq_loss_and_grads`]; with [`AdapterMode::Bypassed`] adapter
/// tensors receive no gradient.
pub fn seq2seq_loss_and_grads_with(
    cfg: &ModelConfig,
    params: &ParamStore,
    src: &[usize],
    dec_in: &[usize],
    dec_out: &[usize],
    mode: AdapterMode,
) -> Result<(f64, Grads)> {
    let mut g = Graph::new(params);
    let logits = build_logits(&mut g, cfg, src, dec_in, mode)?;
    let loss = g.cross_entropy(logits, dec_out, PAD_ID);
    let value = g.value(loss).data[0];
    Ok((value, g.backward(loss)))
}

/// Greedy decoding from `<bos>`. Ties go to the lowest id. The returned sequence
/// ends with `<eos>` when one was produced and never exceeds `max_len` tokens.
pub fn greedy_decode(cfg: &ModelConfig, params: &ParamStore, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be at least 1".into()));
    }
    if src.is_empty() {
        return Err(Error::InvalidInput("source must be non-empty".into()));
    }
    check_ids(cfg, src)?;
    let max_len = max_len.min(cfg.max_positions);
    let layout = Layout::resolve(cfg, params)?;
    let mut g = Graph::new(params);
    let enc = encode(&mut g, cfg, &layout, src, AdapterMode::Enabled);
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = decode(&mut g, cfg, &layout, &enc, &prefix, AdapterMode::Enabled);
        let lv = g.value(logits);
        let last = lv.row(lv.rows - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        out.push(best);
        if best == EOS_ID {
            break;
        }
        prefix.push(best);
    }
    Ok(out)
}
