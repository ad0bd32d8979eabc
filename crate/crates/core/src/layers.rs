//! Transformer building blocks shared by the backbone and the prototype selector.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Mat, ParamStore};

/// Xavier-uniform initialised matrix.
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::uniform(rows, cols, bound, rng)
}

pub(crate) fn ones(cols: usize) -> Mat {
    Mat::from_vec(1, cols, vec![1.0; cols])
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

impl AttnIds {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
        for m in ["q", "k", "v", "o"] {
            store.insert(format!("{prefix}.w{m}"), xavier(d, d, rng));
            store.insert(format!("{prefix}.b{m}"), Mat::zeros(1, d));
        }
    }

    pub fn resolve(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |s: &str| store.id(&format!("{prefix}.{s}"));
        Ok(Self {
            wq: id("wq")?,
            bq: id("bq")?,
            wk: id("wk")?,
            bk: id("bk")?,
            wv: id("wv")?,
            bv: id("bv")?,
            wo: id("wo")?,
            bo: id("bo")?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * (d * d + d)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    gain: usize,
    bias: usize,
}

impl NormIds {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) {
        store.insert(format!("{prefix}.gain"), ones(d));
        store.insert(format!("{prefix}.bias"), Mat::zeros(1, d));
    }

    pub fn resolve(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: store.id(&format!("{prefix}.gain"))?,
            bias: store.id(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl FfnIds {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, d_ffn: usize, rng: &mut impl Rng) {
        store.insert(format!("{prefix}.w1"), xavier(d, d_ffn, rng));
        store.insert(format!("{prefix}.b1"), Mat::zeros(1, d_ffn));
        store.insert(format!("{prefix}.w2"), xavier(d_ffn, d, rng));
        store.insert(format!("{prefix}.b2"), Mat::zeros(1, d));
    }

    pub fn resolve(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |s: &str| store.id(&format!("{prefix}.{s}"));
        Ok(Self {
            w1: id("w1")?,
            b1: id("b1")?,
            w2: id("w2")?,
            b2: id("b2")?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.linear(x, self.w1, self.b1);
        let h = g.gelu(h);
        g.linear(h, self.w2, self.b2)
    }

    pub fn param_count(d: usize, d_ffn: usize) -> usize {
        2 * d * d_ffn + d_ffn + d
    }
}

/// Multi-head scaled dot-product attention of `query` rows over `memory` rows.
/// `allowed` is a row-major `|query| × |memory|` mask.
pub(crate) fn attention(
    g: &mut Graph,
    ids: &AttnIds,
    n_heads: usize,
    query: Var,
    memory: Var,
    allowed: Option<&[bool]>,
) -> Var {
    let d = g.value(query).cols;
    let dh = d / n_heads;
    let q = g.linear(query, ids.wq, ids.bq);
    let k = g.linear(memory, ids.wk, ids.bk);
    let v = g.linear(memory, ids.wv, ids.bv);
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Var> = (0..n_heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, allowed);
            g.matmul(probs, vh)
        })
        .collect();
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    g.linear(joined, ids.wo, ids.bo)
}

/// Post-norm self-attention encoder block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderBlock {
    attn: AttnIds,
    ln1: NormIds,
    ffn: FfnIds,
    ln2: NormIds,
}

impl EncoderBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, d_ffn: usize, rng: &mut impl Rng) {
        AttnIds::init(store, &format!("{prefix}.self_attn"), d, rng);
        NormIds::init(store, &format!("{prefix}.ln1"), d);
        FfnIds::init(store, &format!("{prefix}.ffn"), d, d_ffn, rng);
        NormIds::init(store, &format!("{prefix}.ln2"), d);
    }

    pub fn resolve(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            attn: AttnIds::resolve(store, &format!("{prefix}.self_attn"))?,
            ln1: NormIds::resolve(store, &format!("{prefix}.ln1"))?,
            ffn: FfnIds::resolve(store, &format!("{prefix}.ffn"))?,
            ln2: NormIds::resolve(store, &format!("{prefix}.ln2"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, n_heads: usize, x: Var, allowed: Option<&[bool]>) -> Var {
        let a = attention(g, &self.attn, n_heads, x, x, allowed);
        let x = g.add(x, a);
        let x = self.ln1.apply(g, x);
        let f = self.ffn.apply(g, x);
        let x = g.add(x, f);
        self.ln2.apply(g, x)
    }

    pub fn param_count(d: usize, d_ffn: usize) -> usize {
        AttnIds::param_count(d) + FfnIds::param_count(d, d_ffn) + 4 * d
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderBlock {
    self_attn: AttnIds,
    ln1: NormIds,
    cross_attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
    ln3: NormIds,
}

impl DecoderBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, d_ffn: usize, rng: &mut impl Rng) {
        AttnIds::init(store, &format!("{prefix}.self_attn"), d, rng);
        NormIds::init(store, &format!("{prefix}.ln1"), d);
        AttnIds::init(store, &format!("{prefix}.cross_attn"), d, rng);
        NormIds::init(store, &format!("{prefix}.ln2"), d);
        FfnIds::init(store, &format!("{prefix}.ffn"), d, d_ffn, rng);
        NormIds::init(store, &format!("{prefix}.ln3"), d);
    }

    pub fn resolve(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            self_attn: AttnIds::resolve(store, &format!("{prefix}.self_attn"))?,
            ln1: NormIds::resolve(store, &format!("{prefix}.ln1"))?,
            cross_attn: AttnIds::resolve(store, &format!("{prefix}.cross_attn"))?,
            ln2: NormIds::resolve(store, &format!("{prefix}.ln2"))?,
            ffn: FfnIds::resolve(store, &format!("{prefix}.ffn"))?,
            ln3: NormIds::resolve(store, &format!("{prefix}.ln3"))?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        g: &mut Graph,
        n_heads: usize,
        x: Var,
        causal: &[bool],
        memory: Var,
        memory_allowed: &[bool],
    ) -> Var {
        let a = attention(g, &self.self_attn, n_heads, x, x, Some(causal));
        let x = g.add(x, a);
        let x = self.ln1.apply(g, x);
        let c = attention(g, &self.cross_attn, n_heads, x, memory, Some(memory_allowed));
        let x = g.add(x, c);
        let x = self.ln2.apply(g, x);
        let f = self.ffn.apply(g, x);
        let x = g.add(x, f);
        self.ln3.apply(g, x)
    }

    pub fn param_count(d: usize, d_ffn: usize) -> usize {
        2 * AttnIds::param_count(d) + FfnIds::param_count(d, d_ffn) + 6 * d
    }
}
