//! Cloze-style factual probing.
//!
//! Probing trains nothing but a single linear MLM layer (`mlm.w` / `mlm.b`)
//! over the model's fused features: backbone, adapters, and every task head
//! are frozen, byte-for-byte. Queries mask exactly one token; the layer's
//! logits at the mask position, optionally restricted to a candidate
//! vocabulary, rank the predictions; quality is precision-at-one
//! macro-averaged over relations.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{self, make_batch, Annotation, ClozeRecord, EncodedBatch, EncodedExample};
use crate::error::{Error, Result};
use crate::ndgrad::Graph;
use crate::params::Binder;
use crate::rng::Rng;
use crate::trainer::{adamw_step, lr_at, AdamState, LossEntry, Model, TrainConfig};

/// One masked-token query.
#[derive(Clone, Debug)]
pub struct ClozeQuery {
    pub ids: Vec<usize>,
    pub mask_index: usize,
    pub gold: usize,
    pub relation: usize,
}

impl ClozeQuery {
    pub fn from_record(
        record: &ClozeRecord,
        relation_id: usize,
        vocab: &corpus::Vocab,
        max_len: usize,
    ) -> Result<ClozeQuery> {
        let row = corpus::encode_cloze(record, relation_id, vocab, max_len)?;
        match row.ann {
            Annotation::Cloze { mask_index, gold, relation } => Ok(ClozeQuery {
                ids: row.ids,
                mask_index,
                gold,
                relation,
            }),
            _ => unreachable!("encode_cloze returns a cloze annotation"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let masks = self
            .ids
            .iter()
            .filter(|&&id| id == corpus::MASK)
            .count();
        if masks != 1 {
            return Err(Error::Query(format!(
                "query must contain exactly one mask, found {masks}"
            )));
        }
        if self.ids.get(self.mask_index) != Some(&corpus::MASK) {
            return Err(Error::Query(format!(
                "mask index {} does not point at the mask token",
                self.mask_index
            )));
        }
        Ok(())
    }
}

pub const MLM_PREFIX: &str = "mlm.";

pub fn init_mlm_head(model: &mut Model, vocab_size: usize, rng: &mut Rng) {
    let d = model.feature_dim();
    model
        .store
        .insert_normal("mlm.w", &[d, vocab_size], crate::backbone::INIT_SIGMA, rng);
    model.store.insert_filled("mlm.b", &[vocab_size], 0.0);
}

/// Freeze set for probing: everything already in the model.
fn probe_freeze() -> Vec<String> {
    vec![
        "backbone.".to_string(),
        "adapter.".to_string(),
        "head.".to_string(),
    ]
}

/// Masked rows for one training batch: object tokens of fact rows are
/// masked with probability 1/2 (the factual channel), otherwise 15% of
/// positions at random, always at least one.
fn mask_rows(
    rows: &[EncodedExample],
    rng: &mut Rng,
) -> (Vec<EncodedExample>, Vec<Vec<(usize, usize)>>) {
    let mut masked = Vec::with_capacity(rows.len());
    let mut golds = Vec::with_capacity(rows.len());
    for row in rows {
        let mut ids = row.ids.clone();
        let mut row_golds = Vec::new();
        let obj_start = match &row.ann {
            Annotation::FactPretrain { obj, .. } => Some(obj.0),
            _ => None,
        };
        if let (Some(pos), true) = (obj_start, rng.next_f64() < 0.5) {
            row_golds.push((pos, ids[pos]));
            ids[pos] = corpus::MASK;
        } else {
            for pos in 0..ids.len() {
                if ids[pos] != corpus::BOS && rng.next_f64() < 0.15 {
                    row_golds.push((pos, ids[pos]));
                    ids[pos] = corpus::MASK;
                }
            }
            if row_golds.is_empty() {
                let pos = ids.len() - 1;
                row_golds.push((pos, ids[pos]));
                ids[pos] = corpus::MASK;
            }
        }
        masked.push(EncodedExample { ids, ann: row.ann.clone() });
        golds.push(row_golds);
    }
    (masked, golds)
}

fn mlm_loss(
    model: &Model,
    graph: &mut Graph,
    binder: &mut Binder,
    batch: &EncodedBatch,
    golds: &[Vec<(usize, usize)>],
) -> Result<crate::ndgrad::Var> {
    let features = model.features(graph, binder, batch)?;
    let w = binder.var(graph, "mlm.w")?;
    let b = binder.var(graph, "mlm.b")?;
    let logits = graph.linear(features, w, b)?;
    let vocab = *graph.shape(logits).last().unwrap();
    let flat = graph.reshape(logits, vec![batch.b * batch.l, vocab])?;
    let mut labels = vec![-1i64; batch.b * batch.l];
    for (r, row_golds) in golds.iter().enumerate() {
        for &(pos, gold) in row_golds {
            labels[r * batch.l + pos] = gold as i64;
        }
    }
    graph.cross_entropy(flat, &labels, -1)
}

/// Train only the MLM layer on masked fact sentences; every other
/// parameter is byte-identical afterwards.
pub fn train_mlm_head(
    model: &mut Model,
    rows: &[EncodedExample],
    train_idx: &[usize],
    tcfg: &TrainConfig,
) -> Result<Vec<LossEntry>> {
    tcfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Argument("train_mlm_head: empty training set".into()));
    }
    let freeze = probe_freeze();
    let mut rng = Rng::new(tcfg.seed ^ 0x3a5c);
    let mut order: Vec<usize> = train_idx.to_vec();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(tcfg.total_steps);
    for step in 1..=tcfg.total_steps {
        let mut batch_rows = Vec::with_capacity(tcfg.batch_size);
        while batch_rows.len() < tcfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch_rows.push(rows[order[cursor]].clone());
            cursor += 1;
        }
        let (masked, golds) = mask_rows(&batch_rows, &mut rng);
        let batch = make_batch(&masked)?;
        let lr_t = lr_at(step, tcfg);
        let (loss_value, grads) = {
            let mut graph = Graph::new();
            let mut binder = Binder::new(&model.store, &freeze);
            let loss = mlm_loss(model, &mut graph, &mut binder, &batch, &golds)?;
            let value = graph.data(loss)[0];
            graph.backward(loss)?;
            (value, binder.collect_grads(&graph))
        };
        crate::params::apply_grads(&mut model.store, grads);
        adamw_step(&mut model.store, &mut state, lr_t, tcfg, step);
        model.store.clear_grads();
        log.push(LossEntry { step, lr: lr_t, loss: loss_value });
    }
    Ok(log)
}

/// Rank token ids by the MLM logits at the query's mask position,
/// descending, restricted to `candidates` when given; ties break toward the
/// smaller token id.
pub fn cloze_predict(
    model: &Model,
    query: &ClozeQuery,
    candidates: Option<&BTreeSet<usize>>,
) -> Result<Vec<usize>> {
    query.validate()?;
    let row = EncodedExample {
        ids: query.ids.clone(),
        ann: Annotation::Cloze {
            mask_index: query.mask_index,
            gold: query.gold,
            relation: query.relation,
        },
    };
    let batch = make_batch(std::slice::from_ref(&row))?;
    let mut graph = Graph::new();
    let mut binder = Binder::new(&model.store, &[String::new()]);
    let features = model.features(&mut graph, &mut binder, &batch)?;
    let at_mask = graph.select_positions(features, &[query.mask_index])?;
    let w = binder.var(&mut graph, "mlm.w")?;
    let b = binder.var(&mut graph, "mlm.b")?;
    let logits = graph.linear(at_mask, w, b)?;
    let scores = graph.data(logits);
    let mut ranked: Vec<usize> = match candidates {
        Some(set) => set.iter().copied().collect(),
        None => (0..scores.len()).collect(),
    };
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(ranked)
}

/// Per-relation fraction of queries whose top-1 equals gold, macro-averaged
/// over relations with equal weight.
pub fn p_at_1(results: &BTreeMap<usize, Vec<bool>>) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("p_at_1: no relation groups".into()));
    }
    let mut total = 0.0;
    for (relation, hits) in results {
        if hits.is_empty() {
            return Err(Error::Metric(format!(
                "p_at_1: relation {relation} has no queries"
            )));
        }
        total += hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    }
    Ok(total / results.len() as f64)
}

/// Evaluate a query set: returns (per-relation hit lists, macro P@1).
pub fn probe_queries(
    model: &Model,
    queries: &[ClozeQuery],
    candidates: Option<&BTreeSet<usize>>,
) -> Result<(BTreeMap<usize, Vec<bool>>, f64)> {
    let mut results: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for q in queries {
        let ranked = cloze_predict(model, q, candidates)?;
        let hit = ranked.first() == Some(&q.gold);
        results.entry(q.relation).or_default().push(hit);
    }
    let score = p_at_1(&results)?;
    Ok((results, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterSlot;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::checkpoint::store_value_bytes;

    fn tiny_model(seed: u64, vocab: usize) -> Model {
        let mut cfg = BackboneConfig::desk(vocab);
        cfg.n_layers = 2;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.ffn_inner = 32;
        cfg.max_len = 16;
        let mut rng = Rng::new(seed);
        let store = init_backbone(&cfg, &mut rng);
        let mut model = Model {
            bcfg: cfg,
            adapters: Vec::<AdapterSlot>::new(),
            store,
        };
        init_mlm_head(&mut model, vocab, &mut rng);
        model
    }

    fn fact_rows(n: usize) -> Vec<EncodedExample> {
        (0..n)
            .map(|i| EncodedExample {
                ids: vec![corpus::BOS, 8 + (i % 4), 20, 21, 12 + (i % 4)],
                ann: Annotation::FactPretrain {
                    subj: (1, 2),
                    obj: (4, 5),
                    label: i % 4,
                },
            })
            .collect()
    }

    #[test]
    fn zero_steps_leaves_head_at_init() {
        let mut model = tiny_model(42, 32);
        let before = store_value_bytes(&model.store);
        let rows = fact_rows(8);
        let mut cfg = TrainConfig::desk(42);
        cfg.total_steps = 0;
        cfg.warmup_steps = 0;
        let log = train_mlm_head(&mut model, &rows, &[0, 1, 2, 3], &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(store_value_bytes(&model.store), before);
    }

    #[test]
    fn probing_mutates_only_the_mlm_layer() {
        let mut model = tiny_model(42, 32);
        let before = store_value_bytes(&model.store);
        let rows = fact_rows(16);
        let mut cfg = TrainConfig::desk(42);
        cfg.total_steps = 10;
        cfg.warmup_steps = 2;
        cfg.batch_size = 4;
        train_mlm_head(&mut model, &rows, &(0..16).collect::<Vec<_>>(), &cfg).unwrap();
        let after = store_value_bytes(&model.store);
        for (name, bytes) in &before {
            if name.starts_with(MLM_PREFIX) {
                continue;
            }
            assert_eq!(after.get(name).unwrap(), bytes, "{name} changed");
        }
        assert_ne!(after.get("mlm.w").unwrap(), before.get("mlm.w").unwrap());
    }

    #[test]
    fn loss_drops_below_uniform_baseline() {
        let vocab = 32;
        let mut model = tiny_model(42, vocab);
        let rows = fact_rows(32);
        let mut cfg = TrainConfig::desk(42);
        cfg.total_steps = 200;
        cfg.warmup_steps = 20;
        cfg.batch_size = 8;
        cfg.lr = 5e-3;
        let log = train_mlm_head(&mut model, &rows, &(0..32).collect::<Vec<_>>(), &cfg).unwrap();
        let last = log.last().unwrap().loss;
        assert!(
            last < (vocab as f64).ln(),
            "loss {last} vs uniform {}",
            (vocab as f64).ln()
        );
    }

    #[test]
    fn single_candidate_ranks_first() {
        let model = tiny_model(7, 32);
        let query = ClozeQuery {
            ids: vec![corpus::BOS, 9, corpus::MASK, 11],
            mask_index: 2,
            gold: 13,
            relation: 0,
        };
        let only: BTreeSet<usize> = [13].into_iter().collect();
        let ranked = cloze_predict(&model, &query, Some(&only)).unwrap();
        assert_eq!(ranked, vec![13]);
    }

    #[test]
    fn ranking_is_invariant_to_constant_logit_shift() {
        let mut model = tiny_model(7, 32);
        let query = ClozeQuery {
            ids: vec![corpus::BOS, 9, corpus::MASK, 11],
            mask_index: 2,
            gold: 13,
            relation: 0,
        };
        let before = cloze_predict(&model, &query, None).unwrap();
        for v in model.store.get_mut("mlm.b").unwrap().data_mut() {
            *v += 7.5;
        }
        let after = cloze_predict(&model, &query, None).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn saturated_head_ranks_gold_first() {
        let mut model = tiny_model(3, 32);
        // a single repeated fact, object always token 12
        let rows: Vec<EncodedExample> = (0..8)
            .map(|_| EncodedExample {
                ids: vec![corpus::BOS, 8, 20, 21, 12],
                ann: Annotation::FactPretrain { subj: (1, 2), obj: (4, 5), label: 0 },
            })
            .collect();
        let mut cfg = TrainConfig::desk(3);
        cfg.total_steps = 300;
        cfg.warmup_steps = 10;
        cfg.batch_size = 4;
        cfg.lr = 1e-2;
        train_mlm_head(&mut model, &rows, &(0..8).collect::<Vec<_>>(), &cfg).unwrap();
        let query = ClozeQuery {
            ids: vec![corpus::BOS, 8, 20, 21, corpus::MASK],
            mask_index: 4,
            gold: 12,
            relation: 0,
        };
        let ranked = cloze_predict(&model, &query, None).unwrap();
        assert_eq!(ranked[0], 12);
    }

    #[test]
    fn query_validation_rejects_bad_masks() {
        let q = ClozeQuery { ids: vec![1, 2, 3], mask_index: 1, gold: 2, relation: 0 };
        assert!(matches!(q.validate(), Err(Error::Query(_))));
        let q = ClozeQuery {
            ids: vec![corpus::MASK, corpus::MASK],
            mask_index: 0,
            gold: 2,
            relation: 0,
        };
        assert!(matches!(q.validate(), Err(Error::Query(_))));
    }

    #[test]
    fn p_at_1_is_macro_averaged() {
        let mut results = BTreeMap::new();
        results.insert(0usize, vec![true; 10]);
        results.insert(1usize, vec![false]);
        assert_eq!(p_at_1(&results).unwrap(), 0.5);
    }

    #[test]
    fn p_at_1_rejects_empty_groups() {
        assert!(matches!(p_at_1(&BTreeMap::new()), Err(Error::Metric(_))));
        let mut results = BTreeMap::new();
        results.insert(0usize, Vec::new());
        assert!(matches!(p_at_1(&results), Err(Error::Metric(_))));
    }

    #[test]
    fn p_at_1_invariant_to_query_order() {
        let mut a = BTreeMap::new();
        a.insert(0usize, vec![true, false, true]);
        let mut b = BTreeMap::new();
        b.insert(0usize, vec![true, true, false]);
        assert_eq!(p_at_1(&a).unwrap(), p_at_1(&b).unwrap());
    }
}
