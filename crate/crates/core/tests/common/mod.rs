//! Shared fixtures and the finite-difference oracle used across the
//! integration and acceptance suites.
//!
//! The oracle is independent of the gradient implementation: it re-runs the
//! forward computation at perturbed parameter values and compares central
//! differences against whatever the backward sweep produced.

#![allow(dead_code)]

use kadapter::adapter::AdapterConfig;
use kadapter::backbone::BackboneConfig;
use kadapter::corpus::{self, encode_with_markers, EncodedExample, MarkedExample};
use kadapter::params::ParamStore;
use kadapter::rng::Rng;
use kadapter::trainer::TrainConfig;

/// Small encoder for gradient checks: big enough to exercise every code
/// path, small enough for thousands of forward replays.
pub fn tiny_backbone_cfg(vocab_size: usize) -> BackboneConfig {
    let mut cfg = BackboneConfig::desk(vocab_size);
    cfg.n_layers = 2;
    cfg.hidden = 16;
    cfg.n_heads = 2;
    cfg.ffn_inner = 32;
    cfg.max_len = 16;
    cfg
}

pub fn tiny_adapter_cfg() -> AdapterConfig {
    AdapterConfig {
        injection_layers: vec![0, 1],
        n_inner: 1,
        hidden: 8,
        n_heads: 2,
        down_dim: 8,
        up_dim: 16,
        ffn_inner: 16,
    }
}

/// Desk-scale encoder matching the CLI defaults.
pub fn desk_backbone_cfg(vocab_size: usize) -> BackboneConfig {
    BackboneConfig::desk(vocab_size)
}

pub fn desk_adapter_cfg() -> AdapterConfig {
    AdapterConfig::desk()
}

pub fn quick_train_cfg(steps: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(seed);
    cfg.total_steps = steps;
    cfg.warmup_steps = (steps / 5).min(20);
    cfg.batch_size = 8;
    cfg.max_seq_len = 16;
    cfg
}

/// Central finite difference of `f` along one coordinate of one parameter.
pub fn numeric_grad_at(
    f: &mut dyn FnMut(&ParamStore) -> f64,
    store: &ParamStore,
    name: &str,
    coord: usize,
    eps: f64,
) -> f64 {
    let base = store.get(name).expect("parameter exists").data()[coord];
    let mut plus = store.clone();
    plus.get_mut(name).unwrap().data_mut()[coord] = base + eps;
    let fp = f(&plus);
    let mut minus = store.clone();
    minus.get_mut(name).unwrap().data_mut()[coord] = base - eps;
    let fm = f(&minus);
    (fp - fm) / (2.0 * eps)
}

pub fn rel_close(analytic: f64, numeric: f64, tol: f64) -> bool {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / denom <= tol
}

/// Spread of coordinates to probe in a tensor of `numel` elements.
pub fn probe_coords(numel: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(numel)).collect()
}

/// Encoded fact-pretraining rows plus the relation count, from a generated
/// corpus and its own vocabulary.
pub fn encoded_fact_rows(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_examples: usize,
    max_len: usize,
) -> (Vec<EncodedExample>, usize, corpus::Vocab, corpus::FactCorpus) {
    let c = corpus::gen_fact_corpus(seed, n_entities, n_relations, n_examples).unwrap();
    let vocab = corpus::Vocab::from_corpus(
        c.examples
            .iter()
            .flat_map(|e| e.tokens.iter().map(|t| t.as_str())),
    );
    let mut rows = Vec::with_capacity(c.examples.len());
    for ex in &c.examples {
        rows.extend(encode_with_markers(&MarkedExample::FactPretrain(ex), &vocab, max_len).unwrap());
    }
    (rows, n_relations, vocab, c)
}

/// Encoded dependency rows from the toy grammar.
pub fn encoded_dep_rows(
    seed: u64,
    n_examples: usize,
    max_len: usize,
) -> (Vec<EncodedExample>, corpus::Vocab) {
    let examples = corpus::gen_dep_corpus(seed, n_examples);
    let vocab = corpus::Vocab::from_corpus(
        examples
            .iter()
            .flat_map(|e| e.tokens.iter().map(|t| t.as_str())),
    );
    let mut rows = Vec::with_capacity(examples.len());
    for ex in &examples {
        rows.extend(encode_with_markers(&MarkedExample::DepPretrain(ex), &vocab, max_len).unwrap());
    }
    (rows, vocab)
}
