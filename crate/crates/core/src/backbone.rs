//! Transformer encoder standing in for the large pre-trained backbone.
//!
//! `encode` runs the embedding and every encoder layer, recording each
//! intermediate hidden state in a [`HiddenStack`] so adapters can tap any
//! layer's output. The encoder block (post-norm attention + FFN) is shared
//! with the adapter's inner transformer layers, which run it at a narrower
//! width.
//!
//! Parameters live under the `backbone.` prefix; during adapter pre-training
//! that prefix is frozen, so no backbone parameter ever accumulates gradient.

use serde::{Deserialize, Serialize};

use crate::corpus::{self, EncodedBatch};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_SIGMA: f64 = 0.02;
const MASK_NEG: f64 = -1e9;

/// Architecture hyperparameters of the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_inner: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pad_id: usize,
    pub mask_id: usize,
    pub sep_id: usize,
    pub bos_id: usize,
}

impl BackboneConfig {
    /// Desk-scale default: trains in seconds on a CPU while keeping the
    /// first/middle/last injection pattern meaningful.
    pub fn desk(vocab_size: usize) -> Self {
        BackboneConfig {
            n_layers: 4,
            hidden: 64,
            n_heads: 4,
            ffn_inner: 256,
            vocab_size,
            max_len: 64,
            pad_id: corpus::PAD,
            mask_id: corpus::MASK,
            sep_id: corpus::SEP,
            bos_id: corpus::BOS,
        }
    }

    /// Paper-scale dimensions (L=24, H=1024, A=16); used only for parameter
    /// counting, never instantiated.
    pub fn paper() -> Self {
        BackboneConfig {
            n_layers: 24,
            hidden: 1024,
            n_heads: 16,
            ffn_inner: 4096,
            vocab_size: 50_265,
            max_len: 512,
            pad_id: corpus::PAD,
            mask_id: corpus::MASK,
            sep_id: corpus::SEP,
            bos_id: corpus::BOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Configuration(format!(
                "hidden {} must be divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Configuration("max_len must be >= 2".into()));
        }
        let ids = [self.pad_id, self.mask_id, self.sep_id, self.bos_id];
        for (i, &a) in ids.iter().enumerate() {
            if a >= self.vocab_size {
                return Err(Error::Configuration(format!(
                    "special id {a} is outside the vocabulary of size {}",
                    self.vocab_size
                )));
            }
            if ids[..i].contains(&a) {
                return Err(Error::Configuration("special ids must be distinct".into()));
            }
        }
        if self.n_layers == 0 {
            return Err(Error::Configuration("need at least one layer".into()));
        }
        Ok(())
    }
}

/// Per-layer hidden states of one encode pass. `states[0]` is the embedding
/// output; `states[i]` the output of transformer layer `i - 1`.
pub struct HiddenStack {
    pub states: Vec<Var>,
    pub b: usize,
    pub l: usize,
    pub pad_mask: Vec<f64>,
}

impl HiddenStack {
    /// Hidden state of the last transformer layer.
    pub fn last(&self) -> Var {
        *self.states.last().expect("non-empty stack")
    }
}

// ── parameter layout ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zero,
    One,
}

/// Shapes and init kinds for one post-norm encoder block at `width`.
pub fn encoder_block_shapes(prefix: &str, width: usize, ffn_inner: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    for name in ["wq", "wk", "wv", "wo"] {
        v.push((format!("{prefix}attn.{name}"), vec![width, width], Init::Normal));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        v.push((format!("{prefix}attn.{name}"), vec![width], Init::Zero));
    }
    v.push((format!("{prefix}ln1.gain"), vec![width], Init::One));
    v.push((format!("{prefix}ln1.bias"), vec![width], Init::Zero));
    v.push((format!("{prefix}ffn.w1"), vec![width, ffn_inner], Init::Normal));
    v.push((format!("{prefix}ffn.b1"), vec![ffn_inner], Init::Zero));
    v.push((format!("{prefix}ffn.w2"), vec![ffn_inner, width], Init::Normal));
    v.push((format!("{prefix}ffn.b2"), vec![width], Init::Zero));
    v.push((format!("{prefix}ln2.gain"), vec![width], Init::One));
    v.push((format!("{prefix}ln2.bias"), vec![width], Init::Zero));
    v
}

/// Full backbone parameter layout under the `backbone.` prefix.
pub fn backbone_param_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = vec![
        ("backbone.tok_embed".to_string(), vec![cfg.vocab_size, cfg.hidden], Init::Normal),
        ("backbone.pos_embed".to_string(), vec![cfg.max_len, cfg.hidden], Init::Normal),
        ("backbone.embed_ln.gain".to_string(), vec![cfg.hidden], Init::One),
        ("backbone.embed_ln.bias".to_string(), vec![cfg.hidden], Init::Zero),
    ];
    for i in 0..cfg.n_layers {
        v.extend(encoder_block_shapes(
            &format!("backbone.layer{i}."),
            cfg.hidden,
            cfg.ffn_inner,
        ));
    }
    v
}

pub fn init_params(store: &mut ParamStore, shapes: &[(String, Vec<usize>, Init)], rng: &mut Rng) {
    for (name, shape, init) in shapes {
        match init {
            Init::Normal => store.insert_normal(name, shape, INIT_SIGMA, rng),
            Init::Zero => store.insert_filled(name, shape, 0.0),
            Init::One => store.insert_filled(name, shape, 1.0),
        }
    }
}

/// Fresh randomly initialized backbone.
pub fn init_backbone(cfg: &BackboneConfig, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    init_params(&mut store, &backbone_param_shapes(cfg), rng);
    store
}

// ── forward ─────────────────────────────────────────────────────────

/// Additive attention mask `[b, n_heads, l, l]`: 0 at real key positions,
/// a large negative number at padded keys. Padded keys underflow to an
/// exactly zero attention weight after softmax.
pub fn attention_mask(graph: &mut Graph, pad_mask: &[f64], b: usize, l: usize, n_heads: usize) -> Var {
    let mut data = vec![0.0; b * n_heads * l * l];
    for bi in 0..b {
        for h in 0..n_heads {
            for q in 0..l {
                let row = (((bi * n_heads) + h) * l + q) * l;
                for k in 0..l {
                    if pad_mask[bi * l + k] == 0.0 {
                        data[row + k] = MASK_NEG;
                    }
                }
            }
        }
    }
    graph.constant(Tensor::new(vec![b, n_heads, l, l], data).expect("mask shape"))
}

/// Multi-head self-attention; returns (probabilities, projected output).
pub fn self_attention(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    mask_add: Var,
    n_heads: usize,
) -> Result<(Var, Var)> {
    let shape = graph.shape(x).to_vec();
    let (b, l, width) = (shape[0], shape[1], shape[2]);
    if graph.shape(mask_add) != [b, n_heads, l, l] {
        return Err(Error::Dimension(format!(
            "attention mask shape {:?} does not match [{b}, {n_heads}, {l}, {l}]",
            graph.shape(mask_add)
        )));
    }
    let head_dim = width / n_heads;

    let project = |g: &mut Graph, bd: &mut Binder, w: &str, bias: &str| -> Result<Var> {
        let wv = bd.var(g, &format!("{prefix}attn.{w}"))?;
        let bv = bd.var(g, &format!("{prefix}attn.{bias}"))?;
        let p = g.linear(x, wv, bv)?;
        let split = g.reshape(p, vec![b, l, n_heads, head_dim])?;
        g.permute(split, &[0, 2, 1, 3])
    };
    let q = project(graph, binder, "wq", "bq")?;
    let k = project(graph, binder, "wk", "bk")?;
    let v = project(graph, binder, "wv", "bv")?;

    let kt = graph.transpose_last2(k)?;
    let scores = graph.matmul(q, kt)?;
    let scaled = graph.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let masked = graph.add(scaled, mask_add)?;
    let probs = graph.softmax_lastdim(masked)?;

    let ctx = graph.matmul(probs, v)?;
    let merged_heads = graph.permute(ctx, &[0, 2, 1, 3])?;
    let merged = graph.reshape(merged_heads, vec![b, l, width])?;
    let wo = binder.var(graph, &format!("{prefix}attn.wo"))?;
    let bo = binder.var(graph, &format!("{prefix}attn.bo"))?;
    let out = graph.linear(merged, wo, bo)?;
    Ok((probs, out))
}

/// Post-norm transformer block: attention + residual + layer norm, then
/// GELU feed-forward + residual + layer norm.
pub fn encoder_block_forward(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    mask_add: Var,
    n_heads: usize,
) -> Result<Var> {
    let (_, attn_out) = self_attention(graph, binder, prefix, x, mask_add, n_heads)?;
    let res1 = graph.add(x, attn_out)?;
    let g1 = binder.var(graph, &format!("{prefix}ln1.gain"))?;
    let b1 = binder.var(graph, &format!("{prefix}ln1.bias"))?;
    let normed1 = graph.layer_norm(res1, g1, b1, LN_EPS)?;

    let w1 = binder.var(graph, &format!("{prefix}ffn.w1"))?;
    let fb1 = binder.var(graph, &format!("{prefix}ffn.b1"))?;
    let hidden = graph.linear(normed1, w1, fb1)?;
    let act = graph.gelu(hidden);
    let w2 = binder.var(graph, &format!("{prefix}ffn.w2"))?;
    let fb2 = binder.var(graph, &format!("{prefix}ffn.b2"))?;
    let ffn_out = graph.linear(act, w2, fb2)?;
    let res2 = graph.add(normed1, ffn_out)?;
    let g2 = binder.var(graph, &format!("{prefix}ln2.gain"))?;
    let b2 = binder.var(graph, &format!("{prefix}ln2.bias"))?;
    graph.layer_norm(res2, g2, b2, LN_EPS)
}

/// Token + learned positional embedding followed by layer norm.
pub fn embed(
    graph: &mut Graph,
    binder: &mut Binder,
    batch: &EncodedBatch,
    cfg: &BackboneConfig,
) -> Result<Var> {
    if batch.l > cfg.max_len {
        return Err(Error::Length(format!(
            "sequence length {} exceeds max_len {}",
            batch.l, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    let tok_table = binder.var(graph, "backbone.tok_embed")?;
    let tok = graph.embed_lookup(tok_table, &batch.ids, &[batch.b, batch.l])?;
    let pos_ids: Vec<usize> = (0..batch.b).flat_map(|_| 0..batch.l).collect();
    let pos_table = binder.var(graph, "backbone.pos_embed")?;
    let pos = graph.embed_lookup(pos_table, &pos_ids, &[batch.b, batch.l])?;
    let summed = graph.add(tok, pos)?;
    let gain = binder.var(graph, "backbone.embed_ln.gain")?;
    let bias = binder.var(graph, "backbone.embed_ln.bias")?;
    graph.layer_norm(summed, gain, bias, LN_EPS)
}

/// Run the embedding and all layers, recording every intermediate state.
pub fn encode(
    graph: &mut Graph,
    binder: &mut Binder,
    batch: &EncodedBatch,
    cfg: &BackboneConfig,
) -> Result<HiddenStack> {
    let mut states = Vec::with_capacity(cfg.n_layers + 1);
    let mut x = embed(graph, binder, batch, cfg)?;
    states.push(x);
    let mask_add = attention_mask(graph, &batch.pad_mask, batch.b, batch.l, cfg.n_heads);
    for i in 0..cfg.n_layers {
        x = encoder_block_forward(
            graph,
            binder,
            &format!("backbone.layer{i}."),
            x,
            mask_add,
            cfg.n_heads,
        )?;
        states.push(x);
    }
    Ok(HiddenStack {
        states,
        b: batch.b,
        l: batch.l,
        pad_mask: batch.pad_mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, Annotation, EncodedExample};

    fn desk_cfg() -> BackboneConfig {
        let mut cfg = BackboneConfig::desk(64);
        cfg.n_layers = 2;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.ffn_inner = 32;
        cfg.max_len = 16;
        cfg
    }

    fn batch_of(rows: Vec<Vec<usize>>) -> EncodedBatch {
        let examples: Vec<EncodedExample> = rows
            .into_iter()
            .map(|ids| EncodedExample {
                ids,
                ann: Annotation::DepPretrain { heads: vec![] },
            })
            .collect();
        make_batch(&examples).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = desk_cfg();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_cfg();
        cfg.pad_id = cfg.bos_id;
        assert!(cfg.validate().is_err());
        assert!(desk_cfg().validate().is_ok());
    }

    #[test]
    fn embed_shape_law() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![1; 7], vec![2; 7]]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let e = embed(&mut g, &mut binder, &batch, &cfg).unwrap();
        assert_eq!(g.shape(e), &[2, 7, 16]);
    }

    #[test]
    fn embed_of_all_pad_rows_is_constant_per_position() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![corpus::PAD; 5], vec![corpus::PAD; 5]]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let e = embed(&mut g, &mut binder, &batch, &cfg).unwrap();
        let d = g.data(e);
        let h = cfg.hidden;
        // same position in both rows embeds identically
        for p in 0..5 {
            assert_eq!(d[p * h..(p + 1) * h], d[(5 + p) * h..(5 + p + 1) * h]);
        }
    }

    #[test]
    fn embed_rejects_out_of_vocab_and_overlong() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let bad = batch_of(vec![vec![cfg.vocab_size]]);
        assert!(matches!(
            embed(&mut g, &mut binder, &bad, &cfg),
            Err(Error::Vocabulary(_))
        ));
        let long = batch_of(vec![vec![1; cfg.max_len + 1]]);
        let mut g2 = Graph::new();
        let mut binder2 = Binder::new(&store, &[]);
        assert!(matches!(
            embed(&mut g2, &mut binder2, &long, &cfg),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn zeroed_positional_table_makes_embeddings_permutation_equivariant() {
        let cfg = desk_cfg();
        let mut store = init_backbone(&cfg, &mut Rng::new(42));
        let pos = store.get_mut("backbone.pos_embed").unwrap();
        for v in pos.data_mut() {
            *v = 0.0;
        }
        let b1 = batch_of(vec![vec![3, 4, 5]]);
        let b2 = batch_of(vec![vec![5, 3, 4]]);
        let run = |batch: &EncodedBatch| {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &[]);
            let e = embed(&mut g, &mut binder, batch, &cfg).unwrap();
            g.data(e).to_vec()
        };
        let (e1, e2) = (run(&b1), run(&b2));
        let h = cfg.hidden;
        // rows are permuted exactly: positions (0,1,2) of b1 = (1,2,0) of b2
        assert_eq!(e1[0..h], e2[h..2 * h]);
        assert_eq!(e1[h..2 * h], e2[2 * h..3 * h]);
        assert_eq!(e1[2 * h..3 * h], e2[0..h]);
    }

    #[test]
    fn single_token_attends_to_itself_with_weight_one() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![7]]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let x = embed(&mut g, &mut binder, &batch, &cfg).unwrap();
        let mask = attention_mask(&mut g, &batch.pad_mask, 1, 1, cfg.n_heads);
        let (probs, _) =
            self_attention(&mut g, &mut binder, "backbone.layer0.", x, mask, cfg.n_heads).unwrap();
        for &p in g.data(probs) {
            assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9, 10]]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let x = embed(&mut g, &mut binder, &batch, &cfg).unwrap();
        let mask = attention_mask(&mut g, &batch.pad_mask, 2, 5, cfg.n_heads);
        let y = encoder_block_forward(&mut g, &mut binder, "backbone.layer0.", x, mask, cfg.n_heads)
            .unwrap();
        assert_eq!(g.shape(y), &[2, 5, 16]);
    }

    #[test]
    fn encode_produces_n_layers_plus_one_states() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![1, 2, 3]]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let stack = encode(&mut g, &mut binder, &batch, &cfg).unwrap();
        assert_eq!(stack.states.len(), cfg.n_layers + 1);
    }

    #[test]
    fn padding_positions_never_leak_into_real_positions() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        // same row, but the padded tail carries different token ids
        let mut batch1 = batch_of(vec![vec![1, 2, 3, 0, 0]]);
        let mut batch2 = batch_of(vec![vec![1, 2, 3, 9, 9]]);
        for b in [&mut batch1, &mut batch2] {
            b.pad_mask = vec![1.0, 1.0, 1.0, 0.0, 0.0];
        }
        let run = |batch: &EncodedBatch| {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &[]);
            let stack = encode(&mut g, &mut binder, batch, &cfg).unwrap();
            g.data(stack.last()).to_vec()
        };
        let (o1, o2) = (run(&batch1), run(&batch2));
        let h = cfg.hidden;
        for p in 0..3 {
            assert_eq!(o1[p * h..(p + 1) * h], o2[p * h..(p + 1) * h], "position {p}");
        }
    }

    #[test]
    fn fully_padded_row_is_independent_of_other_rows() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let mut batch1 = batch_of(vec![vec![1, 2, 3], vec![0, 0, 0]]);
        let mut batch2 = batch_of(vec![vec![7, 8, 9], vec![0, 0, 0]]);
        for b in [&mut batch1, &mut batch2] {
            b.pad_mask = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        }
        let run = |batch: &EncodedBatch| {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &[]);
            let stack = encode(&mut g, &mut binder, batch, &cfg).unwrap();
            g.data(stack.last()).to_vec()
        };
        let (o1, o2) = (run(&batch1), run(&batch2));
        let h = cfg.hidden;
        assert_eq!(o1[3 * h..6 * h], o2[3 * h..6 * h]);
    }

    #[test]
    fn frozen_backbone_accumulates_no_gradient() {
        let cfg = desk_cfg();
        let mut store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![1, 2, 3]]);
        let grads = {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &["backbone.".to_string()]);
            let stack = encode(&mut g, &mut binder, &batch, &cfg).unwrap();
            let last = stack.last();
            let loss = g.sum(last);
            g.backward(loss).unwrap();
            binder.collect_grads(&g)
        };
        assert!(grads.is_empty());
        crate::params::apply_grads(&mut store, grads);
        for (name, t) in store.iter() {
            assert!(t.grad().is_none(), "{name} received a gradient");
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = desk_cfg();
        let store = init_backbone(&cfg, &mut Rng::new(42));
        let batch = batch_of(vec![vec![1, 2, 3, 4]]);
        let run = || {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &[]);
            let stack = encode(&mut g, &mut binder, &batch, &cfg).unwrap();
            stack
                .states
                .iter()
                .flat_map(|&s| g.data(s).to_vec())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }
}
