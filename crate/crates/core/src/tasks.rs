//! Pre-training and fine-tuning heads with their losses and metrics.
//!
//! Every head is a thin linear map over fused features and is
//! shape-polymorphic in the feature width `D`: the same head code serves
//! backbone-only features, one adapter, or any fusion. Heads keep their
//! parameters under a caller-chosen prefix (`head.pretrain.`,
//! `head.typing.`, ...) in the shared [`ParamStore`].

use crate::backbone::{init_params, Init};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;

/// Linear layer shapes under `prefix` (`{prefix}w`, `{prefix}b`).
fn linear_shapes(prefix: &str, d_in: usize, d_out: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}w"), vec![d_in, d_out], Init::Normal),
        (format!("{prefix}b"), vec![d_out], Init::Zero),
    ]
}

fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    init_params(store, &linear_shapes(prefix, d_in, d_out), rng);
}

fn zero_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) {
    store.insert_filled(&format!("{prefix}w"), &[d_in, d_out], 0.0);
    store.insert_filled(&format!("{prefix}b"), &[d_out], 0.0);
}

fn apply_linear(graph: &mut Graph, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = binder.var(graph, &format!("{prefix}w"))?;
    let b = binder.var(graph, &format!("{prefix}b"))?;
    graph.linear(x, w, b)
}

// ── relation classification over entity-pair pooling (pre-training) ──

pub fn init_relation_head(store: &mut ParamStore, prefix: &str, d: usize, n_relations: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}out."), 2 * d, n_relations, rng);
}

pub fn init_relation_head_zero(store: &mut ParamStore, prefix: &str, d: usize, n_relations: usize) {
    zero_linear(store, &format!("{prefix}out."), 2 * d, n_relations);
}

/// Mean-pool the features of both entity spans, concatenate the two pooled
/// vectors, and map to relation logits `[b, R]`.
pub fn relation_head_logits(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
    spans: &[((usize, usize), (usize, usize))],
) -> Result<Var> {
    if spans.is_empty() {
        return Err(Error::Annotation("relation head: no entity spans".into()));
    }
    let subj: Vec<(usize, usize)> = spans.iter().map(|s| s.0).collect();
    let obj: Vec<(usize, usize)> = spans.iter().map(|s| s.1).collect();
    let subj_pooled = graph.span_mean(features, &subj)?;
    let obj_pooled = graph.span_mean(features, &obj)?;
    let pair = graph.concat_lastdim(&[subj_pooled, obj_pooled])?;
    apply_linear(graph, binder, &format!("{prefix}out."), pair)
}

// ── dependency-head prediction (pre-training) ─────────────────────────

pub fn init_dep_head(store: &mut ParamStore, prefix: &str, d: usize, n_classes: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}out."), d, n_classes, rng);
}

pub fn init_dep_head_zero(store: &mut ParamStore, prefix: &str, d: usize, n_classes: usize) {
    zero_linear(store, &format!("{prefix}out."), d, n_classes);
}

/// Per-token linear scores `[b, l, max_len + 1]`: class 0 means "root",
/// class j means "head is token j" (1-based).
pub fn dep_head_logits(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
) -> Result<Var> {
    apply_linear(graph, binder, &format!("{prefix}out."), features)
}

/// Mean cross-entropy over tokens with a gold head (label != -1).
pub fn dep_loss(graph: &mut Graph, logits: Var, flat_heads: &[i64]) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "dep loss expects [b, l, classes], got {shape:?}"
        )));
    }
    let (b, l, c) = (shape[0], shape[1], shape[2]);
    if flat_heads.len() != b * l {
        return Err(Error::Annotation(format!(
            "{} head labels for {b}x{l} tokens",
            flat_heads.len()
        )));
    }
    if let Some(&bad) = flat_heads.iter().find(|&&h| h >= c as i64) {
        return Err(Error::Annotation(format!(
            "head index {bad} exceeds class count {c}"
        )));
    }
    let flat = graph.reshape(logits, vec![b * l, c])?;
    graph.cross_entropy(flat, flat_heads, -1)
}

// ── entity typing (fine-tuning) ───────────────────────────────────────

pub fn init_typing_head(store: &mut ParamStore, prefix: &str, d: usize, n_types: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}out."), d, n_types, rng);
}

pub fn init_typing_head_zero(store: &mut ParamStore, prefix: &str, d: usize, n_types: usize) {
    zero_linear(store, &format!("{prefix}out."), d, n_types);
}

/// Logits `[b, T]` from the feature at each example's first '@' marker.
pub fn typing_head_logits(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
    at_indices: &[usize],
) -> Result<Var> {
    let picked = graph.select_positions(features, at_indices)?;
    apply_linear(graph, binder, &format!("{prefix}out."), picked)
}

/// Multi-label loss: per-class sigmoid binary cross-entropy.
pub fn typing_loss(graph: &mut Graph, logits: Var, multi_hot: &[f64]) -> Result<Var> {
    graph.bce_with_logits(logits, multi_hot)
}

/// Threshold-0 decoding: a class is predicted when its logit is positive.
pub fn typing_decode(logits: &[f64], n_types: usize) -> Vec<Vec<bool>> {
    logits
        .chunks(n_types)
        .map(|row| row.iter().map(|&v| v > 0.0).collect())
        .collect()
}

pub fn multi_hot(labels: &[Vec<usize>], n_types: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * n_types];
    for (i, ls) in labels.iter().enumerate() {
        for &l in ls {
            out[i * n_types + l] = 1.0;
        }
    }
    out
}

// ── relation classification with markers (fine-tuning) ────────────────

pub fn init_relation_ft_head(store: &mut ParamStore, prefix: &str, d: usize, n_relations: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}out."), 2 * d, n_relations, rng);
}

pub fn init_relation_ft_head_zero(store: &mut ParamStore, prefix: &str, d: usize, n_relations: usize) {
    zero_linear(store, &format!("{prefix}out."), 2 * d, n_relations);
}

/// Concatenate the '@' and '#' marker features and map to `[b, R]` logits.
pub fn relation_ft_logits(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
    at_indices: &[usize],
    hash_indices: &[usize],
) -> Result<Var> {
    let at = graph.select_positions(features, at_indices)?;
    let hash = graph.select_positions(features, hash_indices)?;
    let pair = graph.concat_lastdim(&[at, hash])?;
    apply_linear(graph, binder, &format!("{prefix}out."), pair)
}

// ── span QA (fine-tuning) ─────────────────────────────────────────────

pub fn init_span_qa_head(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}start."), d, 1, rng);
    init_linear(store, &format!("{prefix}end."), d, 1, rng);
}

pub fn init_span_qa_head_zero(store: &mut ParamStore, prefix: &str, d: usize) {
    zero_linear(store, &format!("{prefix}start."), d, 1);
    zero_linear(store, &format!("{prefix}end."), d, 1);
}

/// Two independent per-token scores `[b, l]` for answer start and end.
pub fn span_qa_logits(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
) -> Result<(Var, Var)> {
    let shape = graph.shape(features).to_vec();
    let (b, l) = (shape[0], shape[1]);
    let start3 = apply_linear(graph, binder, &format!("{prefix}start."), features)?;
    let end3 = apply_linear(graph, binder, &format!("{prefix}end."), features)?;
    let start = graph.reshape(start3, vec![b, l])?;
    let end = graph.reshape(end3, vec![b, l])?;
    Ok((start, end))
}

/// Mean of the start- and end-position cross-entropies. Answers are
/// half-open spans; the end class is the last answer token.
pub fn span_qa_loss(
    graph: &mut Graph,
    start_logits: Var,
    end_logits: Var,
    answers: &[(usize, usize)],
) -> Result<Var> {
    let starts: Vec<i64> = answers.iter().map(|a| a.0 as i64).collect();
    let ends: Vec<i64> = answers.iter().map(|a| a.1 as i64 - 1).collect();
    let s_loss = graph.cross_entropy(start_logits, &starts, -1)?;
    let e_loss = graph.cross_entropy(end_logits, &ends, -1)?;
    let total = graph.add(s_loss, e_loss)?;
    Ok(graph.scale(total, 0.5))
}

pub const MAX_ANSWER_LEN: usize = 16;

/// Argmax start inside the paragraph segment, then argmax end in
/// `[start, start + MAX_ANSWER_LEN)` clipped to the paragraph. Returns a
/// half-open token span.
pub fn decode_span(
    start_scores: &[f64],
    end_scores: &[f64],
    paragraph: (usize, usize),
) -> (usize, usize) {
    let (ps, pe) = paragraph;
    let argmax = |scores: &[f64], lo: usize, hi: usize| -> usize {
        let mut best = lo;
        for i in lo..hi {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        best
    };
    let start = argmax(start_scores, ps, pe);
    let end_hi = pe.min(start + MAX_ANSWER_LEN);
    let end = argmax(end_scores, start, end_hi);
    (start, end + 1)
}

// ── multiple choice (fine-tuning) ─────────────────────────────────────

pub fn init_multichoice_head(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}score."), d, 1, rng);
}

pub fn init_multichoice_head_zero(store: &mut ParamStore, prefix: &str, d: usize) {
    zero_linear(store, &format!("{prefix}score."), d, 1);
}

/// Score each choice from its first-token feature through a shared linear
/// layer. `features` holds the rows of all choices, grouped consecutively
/// (`[b * n_choices, l, d]`); the result is `[b, n_choices]`.
pub fn multichoice_logits(
    graph: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
    n_choices: usize,
) -> Result<Var> {
    if n_choices < 2 {
        return Err(Error::Argument(format!(
            "multiple choice needs >= 2 choices, got {n_choices}"
        )));
    }
    let shape = graph.shape(features).to_vec();
    let rows = shape[0];
    if rows % n_choices != 0 {
        return Err(Error::Argument(format!(
            "{rows} rows do not group into {n_choices} choices"
        )));
    }
    let first = graph.select_positions(features, &vec![0; rows])?;
    let scores = apply_linear(graph, binder, &format!("{prefix}score."), first)?;
    graph.reshape(scores, vec![rows / n_choices, n_choices])
}

/// Softmax cross-entropy over the choices.
pub fn multichoice_loss(graph: &mut Graph, logits: Var, golds: &[usize]) -> Result<Var> {
    let labels: Vec<i64> = golds.iter().map(|&g| g as i64).collect();
    graph.cross_entropy(logits, &labels, -1)
}

// ── metrics ──────────────────────────────────────────────────────────

/// Micro-averaged precision, recall, F1 over all (example, class) pairs.
/// F1 is 0 when both precision and recall are 0.
pub fn micro_f1(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> (f64, f64, f64) {
    debug_assert_eq!(pred.len(), gold.len());
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p_row, g_row) in pred.iter().zip(gold) {
        debug_assert_eq!(p_row.len(), g_row.len());
        for (&p, &g) in p_row.iter().zip(g_row) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Exact match and bag-of-tokens F1 between predicted and gold spans.
pub fn em_f1(pred_tokens: &[usize], gold_tokens: &[usize]) -> (f64, f64) {
    let em = if pred_tokens == gold_tokens { 1.0 } else { 0.0 };
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return (em, if pred_tokens == gold_tokens { 1.0 } else { 0.0 });
    }
    let mut gold_counts = std::collections::BTreeMap::new();
    for &t in gold_tokens {
        *gold_counts.entry(t).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for &t in pred_tokens {
        if let Some(c) = gold_counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return (em, 0.0);
    }
    let p = overlap as f64 / pred_tokens.len() as f64;
    let r = overlap as f64 / gold_tokens.len() as f64;
    (em, 2.0 * p * r / (p + r))
}

/// Per-example (loose) macro F1, averaged over examples.
pub fn macro_f1(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (p_row, g_row) in pred.iter().zip(gold) {
        let (_, _, f1) = micro_f1(&[p_row.clone()], &[g_row.clone()]);
        total += f1;
    }
    total / pred.len() as f64
}

/// Strict accuracy: exact label-set match.
pub fn strict_accuracy(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / pred.len() as f64
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / pred.len() as f64
}

/// Row argmax, ties to the lowest index.
pub fn argmax_rows(scores: &[f64], width: usize) -> Vec<usize> {
    scores
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tensor;

    fn const_features(g: &mut Graph, b: usize, l: usize, d: usize, value: f64) -> Var {
        g.constant(Tensor::new(vec![b, l, d], vec![value; b * l * d]).unwrap())
    }

    #[test]
    fn zero_relation_head_gives_uniform_loss_ln_r() {
        let d = 8;
        let r = 16;
        let mut store = ParamStore::new();
        init_relation_head_zero(&mut store, "head.pretrain.", d, r);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 3, 5, d, 0.7);
        let spans = vec![((0, 2), (3, 5)); 3];
        let logits =
            relation_head_logits(&mut g, &mut binder, "head.pretrain.", feats, &spans).unwrap();
        assert_eq!(g.shape(logits), &[3, r]);
        let loss = g.cross_entropy(logits, &[0, 5, 15], -1).unwrap();
        assert!((g.data(loss)[0] - (r as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn relation_head_shape_law() {
        let mut store = ParamStore::new();
        init_relation_head(&mut store, "h.", 128, 16, &mut Rng::new(1));
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 4, 6, 128, 0.1);
        let spans = vec![((0, 1), (2, 3)); 4];
        let logits = relation_head_logits(&mut g, &mut binder, "h.", feats, &spans).unwrap();
        assert_eq!(g.shape(logits), &[4, 16]);
    }

    #[test]
    fn one_gradient_step_decreases_separable_relation_loss() {
        // 3 examples, R=2, separable by one feature column
        let d = 4;
        let mut store = ParamStore::new();
        init_relation_head_zero(&mut store, "h.", d, 2);
        let run = |store: &ParamStore| -> (f64, std::collections::BTreeMap<String, Vec<f64>>) {
            let mut g = Graph::new();
            let mut binder = Binder::new(store, &[]);
            let mut data = vec![0.0; 3 * 2 * d];
            for (i, label) in [0.0, 1.0, 0.0].iter().enumerate() {
                for p in 0..2 {
                    data[(i * 2 + p) * d] = if *label > 0.5 { 1.0 } else { -1.0 };
                }
            }
            let feats = g.leaf(Tensor::new(vec![3, 2, d], data).unwrap());
            let spans = vec![((0, 1), (1, 2)); 3];
            let logits = relation_head_logits(&mut g, &mut binder, "h.", feats, &spans).unwrap();
            let loss = g.cross_entropy(logits, &[0, 1, 0], -1).unwrap();
            let value = g.data(loss)[0];
            g.backward(loss).unwrap();
            (value, binder.collect_grads(&g))
        };
        let (before, grads) = run(&store);
        for (name, grad) in &grads {
            let t = store.get_mut(name).unwrap();
            for (p, g) in t.data_mut().iter_mut().zip(grad) {
                *p -= 0.5 * g; // plain gradient step
            }
        }
        let (after, _) = run(&store);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn dep_head_shape_and_uniform_baseline() {
        let d = 16;
        let classes = 65;
        let mut store = ParamStore::new();
        init_dep_head_zero(&mut store, "h.", d, classes);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 2, 10, d, 0.3);
        let logits = dep_head_logits(&mut g, &mut binder, "h.", feats).unwrap();
        assert_eq!(g.shape(logits), &[2, 10, 65]);
        let mut heads = vec![-1i64; 20];
        heads[0] = 0;
        heads[1] = 3;
        let loss = dep_loss(&mut g, logits, &heads).unwrap();
        assert!((g.data(loss)[0] - (classes as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn dep_loss_rejects_head_past_class_count() {
        let mut store = ParamStore::new();
        init_dep_head_zero(&mut store, "h.", 4, 5);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 1, 2, 4, 0.0);
        let logits = dep_head_logits(&mut g, &mut binder, "h.", feats).unwrap();
        assert!(matches!(
            dep_loss(&mut g, logits, &[5, 0]),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn zero_typing_head_loss_is_ln_2() {
        let d = 8;
        let t = 6;
        let mut store = ParamStore::new();
        init_typing_head_zero(&mut store, "h.", d, t);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 2, 4, d, 0.2);
        let logits = typing_head_logits(&mut g, &mut binder, "h.", feats, &[1, 2]).unwrap();
        assert_eq!(g.shape(logits), &[2, 6]);
        let targets = multi_hot(&[vec![0], vec![3, 5]], t);
        let loss = typing_loss(&mut g, logits, &targets).unwrap();
        assert!((g.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn typing_head_out_of_range_marker_is_annotation_error() {
        let mut store = ParamStore::new();
        init_typing_head_zero(&mut store, "h.", 4, 2);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 1, 3, 4, 0.0);
        assert!(matches!(
            typing_head_logits(&mut g, &mut binder, "h.", feats, &[3]),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn relation_ft_antisymmetric_weights_cancel() {
        let d = 4;
        let r = 42;
        let mut store = ParamStore::new();
        init_relation_ft_head_zero(&mut store, "h.", d, r);
        {
            let w = store.get_mut("h.out.w").unwrap();
            let data = w.data_mut();
            // rows 0..d ('@' block) = +1, rows d..2d ('#' block) = -1
            for i in 0..d {
                for j in 0..r {
                    data[i * r + j] = 1.0;
                    data[(d + i) * r + j] = -1.0;
                }
            }
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        // identical features at '@' and '#' positions
        let feats = const_features(&mut g, 2, 5, d, 0.9);
        let logits = relation_ft_logits(&mut g, &mut binder, "h.", feats, &[0, 1], &[2, 3]).unwrap();
        assert_eq!(g.shape(logits), &[2, 42]);
        assert!(g.data(logits).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn span_qa_shapes_and_single_token_decode() {
        let d = 8;
        let mut store = ParamStore::new();
        init_span_qa_head_zero(&mut store, "h.", d);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 2, 7, d, 0.1);
        let (s, e) = span_qa_logits(&mut g, &mut binder, "h.", feats).unwrap();
        assert_eq!(g.shape(s), &[2, 7]);
        assert_eq!(g.shape(e), &[2, 7]);
        // one-token paragraph: decode is forced to that token
        let span = decode_span(&vec![0.0; 7], &vec![0.0; 7], (3, 4));
        assert_eq!(span, (3, 4));
    }

    #[test]
    fn decode_is_shift_invariant() {
        let start = [0.1, 0.9, 0.3, 0.2, 0.5];
        let end = [0.2, 0.1, 0.8, 0.3, 0.4];
        let shifted_start: Vec<f64> = start.iter().map(|v| v + 100.0).collect();
        let shifted_end: Vec<f64> = end.iter().map(|v| v + 100.0).collect();
        assert_eq!(
            decode_span(&start, &end, (0, 5)),
            decode_span(&shifted_start, &shifted_end, (0, 5))
        );
    }

    #[test]
    fn multichoice_uniform_loss_is_ln_4() {
        let d = 8;
        let mut store = ParamStore::new();
        init_multichoice_head(&mut store, "h.", d, &mut Rng::new(3));
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        // identical encodings for all 4 choices
        let feats = const_features(&mut g, 8, 5, d, 0.4);
        let logits = multichoice_logits(&mut g, &mut binder, "h.", feats, 4).unwrap();
        assert_eq!(g.shape(logits), &[2, 4]);
        let loss = multichoice_loss(&mut g, logits, &[1, 2]).unwrap();
        assert!((g.data(loss)[0] - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn multichoice_rejects_fewer_than_two_choices() {
        let mut store = ParamStore::new();
        init_multichoice_head_zero(&mut store, "h.", 4);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let feats = const_features(&mut g, 1, 2, 4, 0.0);
        assert!(matches!(
            multichoice_logits(&mut g, &mut binder, "h.", feats, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn micro_f1_hand_cases() {
        let perfect = vec![vec![true, false], vec![false, true]];
        assert_eq!(micro_f1(&perfect, &perfect), (1.0, 1.0, 1.0));

        let none = vec![vec![false, false]];
        let gold = vec![vec![true, false]];
        assert_eq!(micro_f1(&none, &gold), (0.0, 0.0, 0.0));

        // pred {a}, {a,b} vs gold {a,b}, {b}: P = 2/3, R = 2/3, F1 = 2/3
        let pred = vec![vec![true, false], vec![true, true]];
        let gold = vec![vec![true, true], vec![false, true]];
        let (p, r, f1) = micro_f1(&pred, &gold);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn em_f1_hand_cases() {
        assert_eq!(em_f1(&[1, 2, 3], &[1, 2, 3]), (1.0, 1.0));
        assert_eq!(em_f1(&[1, 2], &[3, 4]), (0.0, 0.0));
        // pred [a,b,c] vs gold [b,c,d]: P = R = 2/3 so F1 = 2/3
        let (em, f1) = em_f1(&[1, 2, 3], &[2, 3, 4]);
        assert_eq!(em, 0.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_decoding_is_shift_invariant() {
        let scores = vec![0.1, 0.7, 0.2, 0.9, 0.3, 0.4];
        let shifted: Vec<f64> = scores.iter().map(|v| v + 5.0).collect();
        assert_eq!(argmax_rows(&scores, 3), argmax_rows(&shifted, 3));
    }

    #[test]
    fn heads_are_shape_polymorphic_in_d() {
        // backbone-only, one adapter, two adapters
        for d in [64usize, 128, 256] {
            let mut store = ParamStore::new();
            let mut rng = Rng::new(9);
            init_relation_head(&mut store, "r.", d, 8, &mut rng);
            init_typing_head(&mut store, "t.", d, 6, &mut rng);
            init_dep_head(&mut store, "d.", d, 17, &mut rng);
            init_span_qa_head(&mut store, "q.", d, &mut rng);
            init_multichoice_head(&mut store, "m.", d, &mut rng);
            let mut g = Graph::new();
            let mut binder = Binder::new(&store, &[]);
            let feats = const_features(&mut g, 4, 6, d, 0.05);
            let spans = vec![((0, 1), (2, 4)); 4];
            let r = relation_head_logits(&mut g, &mut binder, "r.", feats, &spans).unwrap();
            let t = typing_head_logits(&mut g, &mut binder, "t.", feats, &[0, 1, 2, 3]).unwrap();
            let dp = dep_head_logits(&mut g, &mut binder, "d.", feats).unwrap();
            let (qs, qe) = span_qa_logits(&mut g, &mut binder, "q.", feats).unwrap();
            let m = multichoice_logits(&mut g, &mut binder, "m.", feats, 2).unwrap();
            let r_loss = g.cross_entropy(r, &[0, 1, 2, 3], -1).unwrap();
            let t_loss =
                typing_loss(&mut g, t, &multi_hot(&[vec![0], vec![1], vec![2], vec![3]], 6)).unwrap();
            let d_loss = dep_loss(&mut g, dp, &{
                let mut h = vec![-1i64; 24];
                h[0] = 3;
                h
            })
            .unwrap();
            let q_loss = span_qa_loss(&mut g, qs, qe, &[(1, 3); 4]).unwrap();
            let m_loss = multichoice_loss(&mut g, m, &[0, 1]).unwrap();
            for loss in [r_loss, t_loss, d_loss, q_loss, m_loss] {
                assert!(g.data(loss)[0].is_finite());
            }
        }
    }
}
