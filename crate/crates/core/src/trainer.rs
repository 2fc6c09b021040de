//! Optimization loop with parameter freezing, scheduling, and the
//! forgetting/disentanglement experiment harness.
//!
//! Freezing is prefix-based: a parameter whose name starts with any entry of
//! `TrainConfig::freeze_prefixes` is bound into the graph without
//! `requires_grad`, so it receives no gradient and the optimizer never sees
//! it. Adapter pre-training always freezes `backbone.`; fine-tuning freezes
//! each `adapter.<name>.` while the backbone and the task head train.
//!
//! Every run is a pure function of (parameters, data, config): batches are
//! drawn by a seeded shuffle and all arithmetic is deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, AdapterOutput, AdapterSlot};
use crate::backbone::{self, BackboneConfig};
use crate::checkpoint::{store_value_bytes, Checkpoint, CheckpointMeta};
use crate::corpus::{make_batch, Annotation, EncodedBatch, EncodedExample};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Var};
use crate::params::{apply_grads, Binder, ParamStore};
use crate::rng::Rng;
use crate::tasks;

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub freeze_prefixes: Vec<String>,
}

impl TrainConfig {
    /// Desk-scale defaults; paper-scale values (batch 128, lr 2e-5) are a
    /// configuration choice, not a constant.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 2e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 16,
            max_seq_len: 64,
            seed,
            freeze_prefixes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Configuration(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Configuration("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Configuration("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.total_steps == 0 {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let decay_span = (cfg.total_steps - cfg.warmup_steps).max(1);
    cfg.lr * (cfg.total_steps - step) as f64 / decay_span as f64
}

// ── AdamW ───────────────────────────────────────────────────────────

/// First/second moment accumulators, keyed by parameter name and
/// initialized lazily to zeros.
#[derive(Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// Decoupled-weight-decay Adam with bias correction. Updates exactly the
/// parameters carrying a gradient; frozen parameters have none by
/// construction and stay untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr_t: f64,
    cfg: &TrainConfig,
    step: usize,
) {
    debug_assert!(step >= 1, "adam step index is 1-based");
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (name, tensor) in store.iter_mut() {
        let Some(grad) = tensor.grad().map(|g| g.to_vec()) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            // decoupled decay, then the Adam step
            data[i] -= lr_t * cfg.weight_decay * data[i];
            data[i] -= lr_t * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// One line per step: `step<TAB>lr<TAB>loss`.
pub fn loss_log_text(log: &[LossEntry]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&format!("{}\t{:.10e}\t{:.10e}\n", e.step, e.lr, e.loss));
    }
    out
}

// ── model assembly ──────────────────────────────────────────────────

/// A backbone plus zero or more adapters over one flat parameter store.
/// Task heads live in the same store under `head.*`.
#[derive(Debug)]
pub struct Model {
    pub bcfg: BackboneConfig,
    pub adapters: Vec<AdapterSlot>,
    pub store: ParamStore,
}

impl Model {
    pub fn backbone_only(bcfg: BackboneConfig, store: ParamStore) -> Self {
        Model {
            bcfg,
            adapters: Vec::new(),
            store,
        }
    }

    /// Width of the features the task heads see.
    pub fn feature_dim(&self) -> usize {
        if self.adapters.is_empty() {
            self.bcfg.hidden
        } else {
            let cfgs: Vec<&AdapterConfig> = self.adapters.iter().map(|s| &s.cfg).collect();
            adapter::fused_width(self.bcfg.hidden, &cfgs)
        }
    }

    /// Encode the batch and produce the features the heads consume: the
    /// fused adapter outputs, or the backbone's last hidden state when no
    /// adapter is attached.
    pub fn features(
        &self,
        graph: &mut Graph,
        binder: &mut Binder,
        batch: &EncodedBatch,
    ) -> Result<Var> {
        let stack = backbone::encode(graph, binder, batch, &self.bcfg)?;
        if self.adapters.is_empty() {
            return Ok(stack.last());
        }
        let mut outputs: Vec<AdapterOutput> = Vec::with_capacity(self.adapters.len());
        for slot in &self.adapters {
            outputs.push(adapter::adapter_forward(
                graph, binder, &slot.name, &stack, &slot.cfg,
            )?);
        }
        adapter::fuse(graph, &outputs)
    }
}

// ── task plumbing ───────────────────────────────────────────────────

/// A dataset paired with what the task needs to build its head.
pub enum TaskData {
    FactPretrain { rows: Vec<EncodedExample>, n_relations: usize },
    DepPretrain { rows: Vec<EncodedExample>, n_classes: usize },
    Typing { rows: Vec<EncodedExample>, n_types: usize },
    RelationFt { rows: Vec<EncodedExample>, n_relations: usize },
    SpanQa { rows: Vec<EncodedExample> },
    MultiChoice { groups: Vec<Vec<EncodedExample>> },
}

impl TaskData {
    pub fn head_prefix(&self) -> &'static str {
        match self {
            TaskData::FactPretrain { .. } | TaskData::DepPretrain { .. } => "head.pretrain.",
            TaskData::Typing { .. } => "head.typing.",
            TaskData::RelationFt { .. } => "head.relation.",
            TaskData::SpanQa { .. } => "head.qa.",
            TaskData::MultiChoice { .. } => "head.multichoice.",
        }
    }

    pub fn is_pretrain(&self) -> bool {
        matches!(
            self,
            TaskData::FactPretrain { .. } | TaskData::DepPretrain { .. }
        )
    }

    /// Number of trainable units (examples, or groups for multiple choice).
    pub fn len(&self) -> usize {
        match self {
            TaskData::FactPretrain { rows, .. }
            | TaskData::DepPretrain { rows, .. }
            | TaskData::Typing { rows, .. }
            | TaskData::RelationFt { rows, .. }
            | TaskData::SpanQa { rows } => rows.len(),
            TaskData::MultiChoice { groups } => groups.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn init_head(&self, store: &mut ParamStore, d: usize, rng: &mut Rng) {
        let prefix = self.head_prefix();
        match self {
            TaskData::FactPretrain { n_relations, .. } => {
                tasks::init_relation_head(store, prefix, d, *n_relations, rng)
            }
            TaskData::DepPretrain { n_classes, .. } => {
                tasks::init_dep_head(store, prefix, d, *n_classes, rng)
            }
            TaskData::Typing { n_types, .. } => {
                tasks::init_typing_head(store, prefix, d, *n_types, rng)
            }
            TaskData::RelationFt { n_relations, .. } => {
                tasks::init_relation_ft_head(store, prefix, d, *n_relations, rng)
            }
            TaskData::SpanQa { .. } => tasks::init_span_qa_head(store, prefix, d, rng),
            TaskData::MultiChoice { .. } => tasks::init_multichoice_head(store, prefix, d, rng),
        }
    }

    fn batch_for(&self, idx: &[usize]) -> Result<EncodedBatch> {
        let rows: Vec<EncodedExample> = match self {
            TaskData::FactPretrain { rows, .. }
            | TaskData::DepPretrain { rows, .. }
            | TaskData::Typing { rows, .. }
            | TaskData::RelationFt { rows, .. }
            | TaskData::SpanQa { rows } => idx.iter().map(|&i| rows[i].clone()).collect(),
            TaskData::MultiChoice { groups } => idx
                .iter()
                .flat_map(|&i| groups[i].iter().cloned())
                .collect(),
        };
        make_batch(&rows)
    }
}

/// Forward the model on the selected examples and return the task loss.
pub fn task_loss(
    model: &Model,
    graph: &mut Graph,
    binder: &mut Binder,
    data: &TaskData,
    idx: &[usize],
) -> Result<Var> {
    let batch = data.batch_for(idx)?;
    let features = model.features(graph, binder, &batch)?;
    let prefix = data.head_prefix();
    match data {
        TaskData::FactPretrain { .. } => {
            let mut spans = Vec::with_capacity(batch.b);
            let mut labels = Vec::with_capacity(batch.b);
            for ann in &batch.anns {
                if let Annotation::FactPretrain { subj, obj, label } = ann {
                    spans.push((*subj, *obj));
                    labels.push(*label as i64);
                } else {
                    return Err(Error::Configuration(
                        "fact pre-training requires fact-annotated rows".into(),
                    ));
                }
            }
            let logits = tasks::relation_head_logits(graph, binder, prefix, features, &spans)?;
            graph.cross_entropy(logits, &labels, -1)
        }
        TaskData::DepPretrain { .. } => {
            let mut flat = vec![-1i64; batch.b * batch.l];
            for (r, ann) in batch.anns.iter().enumerate() {
                if let Annotation::DepPretrain { heads } = ann {
                    for (c, &h) in heads.iter().enumerate() {
                        flat[r * batch.l + c] = h;
                    }
                } else {
                    return Err(Error::Configuration(
                        "dependency pre-training requires head-annotated rows".into(),
                    ));
                }
            }
            let logits = tasks::dep_head_logits(graph, binder, prefix, features)?;
            tasks::dep_loss(graph, logits, &flat)
        }
        TaskData::Typing { n_types, .. } => {
            let mut at = Vec::with_capacity(batch.b);
            let mut labels = Vec::with_capacity(batch.b);
            for ann in &batch.anns {
                if let Annotation::Typing { at_index, labels: ls } = ann {
                    at.push(*at_index);
                    labels.push(ls.clone());
                } else {
                    return Err(Error::Configuration("typing requires typing rows".into()));
                }
            }
            let logits = tasks::typing_head_logits(graph, binder, prefix, features, &at)?;
            tasks::typing_loss(graph, logits, &tasks::multi_hot(&labels, *n_types))
        }
        TaskData::RelationFt { .. } => {
            let mut at = Vec::with_capacity(batch.b);
            let mut hash = Vec::with_capacity(batch.b);
            let mut labels = Vec::with_capacity(batch.b);
            for ann in &batch.anns {
                if let Annotation::RelationFt { at_index, hash_index, label } = ann {
                    at.push(*at_index);
                    hash.push(*hash_index);
                    labels.push(*label as i64);
                } else {
                    return Err(Error::Configuration(
                        "relation fine-tuning requires marker rows".into(),
                    ));
                }
            }
            let logits =
                tasks::relation_ft_logits(graph, binder, prefix, features, &at, &hash)?;
            graph.cross_entropy(logits, &labels, -1)
        }
        TaskData::SpanQa { .. } => {
            let mut answers = Vec::with_capacity(batch.b);
            for ann in &batch.anns {
                if let Annotation::SpanQa { answer, .. } = ann {
                    answers.push(*answer);
                } else {
                    return Err(Error::Configuration("span QA requires QA rows".into()));
                }
            }
            let (s, e) = tasks::span_qa_logits(graph, binder, prefix, features)?;
            tasks::span_qa_loss(graph, s, e, &answers)
        }
        TaskData::MultiChoice { groups } => {
            let n_choices = groups[idx[0]].len();
            let mut golds = Vec::with_capacity(idx.len());
            for &i in idx {
                if groups[i].len() != n_choices {
                    return Err(Error::Argument(
                        "multiple-choice groups must share a choice count".into(),
                    ));
                }
                if let Annotation::MultiChoice { gold, .. } = groups[i][0].ann {
                    golds.push(gold);
                } else {
                    return Err(Error::Configuration(
                        "multiple choice requires choice rows".into(),
                    ));
                }
            }
            let logits =
                tasks::multichoice_logits(graph, binder, prefix, features, n_choices)?;
            tasks::multichoice_loss(graph, logits, &golds)
        }
    }
}

/// Evaluate the model on the selected examples; returns the task's metric
/// record as a flat key -> number map.
pub fn evaluate(
    model: &Model,
    data: &TaskData,
    idx: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    let freeze_all = vec![String::new()]; // empty prefix matches everything
    let prefix = data.head_prefix();
    let mut metrics = BTreeMap::new();
    match data {
        TaskData::FactPretrain { .. } => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch_for(chunk)?;
                let mut graph = Graph::new();
                let mut binder = Binder::new(&model.store, &freeze_all);
                let features = model.features(&mut graph, &mut binder, &batch)?;
                let mut spans = Vec::new();
                for ann in &batch.anns {
                    if let Annotation::FactPretrain { subj, obj, label } = ann {
                        spans.push((*subj, *obj));
                        gold.push(*label);
                    }
                }
                let logits = tasks::relation_head_logits(
                    &mut graph, &mut binder, prefix, features, &spans,
                )?;
                let width = *graph.shape(logits).last().unwrap();
                pred.extend(tasks::argmax_rows(graph.data(logits), width));
            }
            metrics.insert("accuracy".into(), tasks::accuracy(&pred, &gold));
        }
        TaskData::DepPretrain { .. } => {
            let mut correct = 0usize;
            let mut total = 0usize;
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch_for(chunk)?;
                let mut graph = Graph::new();
                let mut binder = Binder::new(&model.store, &freeze_all);
                let features = model.features(&mut graph, &mut binder, &batch)?;
                let logits = tasks::dep_head_logits(&mut graph, &mut binder, prefix, features)?;
                let classes = *graph.shape(logits).last().unwrap();
                let preds = tasks::argmax_rows(graph.data(logits), classes);
                for (r, ann) in batch.anns.iter().enumerate() {
                    if let Annotation::DepPretrain { heads } = ann {
                        for (c, &h) in heads.iter().enumerate() {
                            if h >= 0 {
                                total += 1;
                                if preds[r * batch.l + c] == h as usize {
                                    correct += 1;
                                }
                            }
                        }
                    }
                }
            }
            let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
            metrics.insert("head_accuracy".into(), acc);
        }
        TaskData::Typing { n_types, .. } => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch_for(chunk)?;
                let mut graph = Graph::new();
                let mut binder = Binder::new(&model.store, &freeze_all);
                let features = model.features(&mut graph, &mut binder, &batch)?;
                let mut at = Vec::new();
                for ann in &batch.anns {
                    if let Annotation::Typing { at_index, labels } = ann {
                        at.push(*at_index);
                        let mut row = vec![false; *n_types];
                        for &l in labels {
                            row[l] = true;
                        }
                        gold.push(row);
                    }
                }
                let logits =
                    tasks::typing_head_logits(&mut graph, &mut binder, prefix, features, &at)?;
                pred.extend(tasks::typing_decode(graph.data(logits), *n_types));
            }
            let (p, r, f1) = tasks::micro_f1(&pred, &gold);
            metrics.insert("precision".into(), p);
            metrics.insert("recall".into(), r);
            metrics.insert("micro_f1".into(), f1);
            metrics.insert("macro_f1".into(), tasks::macro_f1(&pred, &gold));
            metrics.insert("strict_accuracy".into(), tasks::strict_accuracy(&pred, &gold));
        }
        TaskData::RelationFt { .. } => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch_for(chunk)?;
                let mut graph = Graph::new();
                let mut binder = Binder::new(&model.store, &freeze_all);
                let features = model.features(&mut graph, &mut binder, &batch)?;
                let mut at = Vec::new();
                let mut hash = Vec::new();
                for ann in &batch.anns {
                    if let Annotation::RelationFt { at_index, hash_index, label } = ann {
                        at.push(*at_index);
                        hash.push(*hash_index);
                        gold.push(*label);
                    }
                }
                let logits = tasks::relation_ft_logits(
                    &mut graph, &mut binder, prefix, features, &at, &hash,
                )?;
                let width = *graph.shape(logits).last().unwrap();
                pred.extend(tasks::argmax_rows(graph.data(logits), width));
            }
            let acc = tasks::accuracy(&pred, &gold);
            metrics.insert("accuracy".into(), acc);
            metrics.insert("micro_f1".into(), acc); // single-label, one prediction each
        }
        TaskData::SpanQa { .. } => {
            let mut em_total = 0.0;
            let mut f1_total = 0.0;
            let mut n = 0usize;
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch_for(chunk)?;
                let mut graph = Graph::new();
                let mut binder = Binder::new(&model.store, &freeze_all);
                let features = model.features(&mut graph, &mut binder, &batch)?;
                let (s, e) = tasks::span_qa_logits(&mut graph, &mut binder, prefix, features)?;
                let sd = graph.data(s);
                let ed = graph.data(e);
                for (r, ann) in batch.anns.iter().enumerate() {
                    if let Annotation::SpanQa { answer, paragraph } = ann {
                        let row_s = &sd[r * batch.l..(r + 1) * batch.l];
                        let row_e = &ed[r * batch.l..(r + 1) * batch.l];
                        let decoded = tasks::decode_span(row_s, row_e, *paragraph);
                        let pred_tokens: Vec<usize> =
                            batch.ids[r * batch.l + decoded.0..r * batch.l + decoded.1].to_vec();
                        let gold_tokens: Vec<usize> =
                            batch.ids[r * batch.l + answer.0..r * batch.l + answer.1].to_vec();
                        let (em, f1) = tasks::em_f1(&pred_tokens, &gold_tokens);
                        em_total += em;
                        f1_total += f1;
                        n += 1;
                    }
                }
            }
            let n = n.max(1) as f64;
            metrics.insert("em".into(), em_total / n);
            metrics.insert("f1".into(), f1_total / n);
        }
        TaskData::MultiChoice { groups } => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for chunk in idx.chunks(batch_size.max(1)) {
                let batch = data.batch_for(chunk)?;
                let n_choices = groups[chunk[0]].len();
                let mut graph = Graph::new();
                let mut binder = Binder::new(&model.store, &freeze_all);
                let features = model.features(&mut graph, &mut binder, &batch)?;
                let logits = tasks::multichoice_logits(
                    &mut graph, &mut binder, prefix, features, n_choices,
                )?;
                pred.extend(tasks::argmax_rows(graph.data(logits), n_choices));
                for &i in chunk {
                    if let Annotation::MultiChoice { gold: g, .. } = groups[i][0].ann {
                        gold.push(g);
                    }
                }
            }
            metrics.insert("accuracy".into(), tasks::accuracy(&pred, &gold));
        }
    }
    Ok(metrics)
}

// ── training loop ───────────────────────────────────────────────────

/// Run the optimization loop over `train_idx`, mutating the model's store.
pub fn train_task(
    model: &mut Model,
    data: &TaskData,
    train_idx: &[usize],
    tcfg: &TrainConfig,
) -> Result<Vec<LossEntry>> {
    tcfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Argument("train_task: empty training set".into()));
    }
    let mut rng = Rng::new(tcfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = train_idx.to_vec();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(tcfg.total_steps);

    for step in 1..=tcfg.total_steps {
        let mut batch_idx = Vec::with_capacity(tcfg.batch_size);
        while batch_idx.len() < tcfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let lr_t = lr_at(step, tcfg);
        let (loss_value, grads) = {
            let mut graph = Graph::new();
            let mut binder = Binder::new(&model.store, &tcfg.freeze_prefixes);
            let loss = task_loss(model, &mut graph, &mut binder, data, &batch_idx)?;
            let value = graph.data(loss)[0];
            graph.backward(loss)?;
            (value, binder.collect_grads(&graph))
        };
        apply_grads(&mut model.store, grads);
        adamw_step(&mut model.store, &mut state, lr_t, tcfg, step);
        model.store.clear_grads();
        log.push(LossEntry { step, lr: lr_t, loss: loss_value });
    }
    Ok(log)
}

// ── pre-training and fine-tuning entry points ───────────────────────

#[derive(Debug)]
pub struct PretrainOutcome {
    pub adapter_ckpt: Checkpoint,
    pub log: Vec<LossEntry>,
    pub dev_metrics: BTreeMap<String, f64>,
    pub model: Model,
}

/// Pre-train one knowledge-specific adapter on a pre-training task with the
/// backbone frozen. Returns the adapter checkpoint (task head included
/// under `head.pretrain.`), the per-step loss log, and dev metrics.
pub fn pretrain_adapter(
    backbone_store: &ParamStore,
    bcfg: &BackboneConfig,
    acfg: &AdapterConfig,
    name: &str,
    knowledge_kind: &str,
    data: &TaskData,
    train_idx: &[usize],
    dev_idx: &[usize],
    tcfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    if !data.is_pretrain() {
        return Err(Error::Configuration(format!(
            "adapter pre-training expects a fact or dependency corpus, got a {} task",
            data.head_prefix()
        )));
    }
    acfg.validate(bcfg)?;
    let mut store = backbone_store.clone();
    let mut rng = Rng::new(tcfg.seed);
    adapter::init_adapter(&mut store, name, acfg, bcfg, &mut rng);
    let slot = AdapterSlot {
        name: name.to_string(),
        knowledge_kind: knowledge_kind.to_string(),
        cfg: acfg.clone(),
    };
    let mut model = Model {
        bcfg: bcfg.clone(),
        adapters: vec![slot],
        store,
    };
    let d = model.feature_dim();
    data.init_head(&mut model.store, d, &mut rng);

    let mut cfg = tcfg.clone();
    if !cfg.freeze_prefixes.iter().any(|p| p == "backbone.") {
        cfg.freeze_prefixes.push("backbone.".to_string());
    }
    let log = if cfg.total_steps > 0 {
        train_task(&mut model, data, train_idx, &cfg)?
    } else {
        Vec::new()
    };
    let dev_metrics = if dev_idx.is_empty() {
        BTreeMap::new()
    } else {
        evaluate(&model, data, dev_idx, cfg.batch_size)?
    };

    let subset = model
        .store
        .subset(&[&format!("adapter.{name}."), "head.pretrain."]);
    let mut meta = CheckpointMeta::new("adapter", cfg.total_steps as u64, cfg.seed);
    meta.name = Some(name.to_string());
    meta.knowledge_kind = Some(knowledge_kind.to_string());
    meta.adapter = Some(acfg.clone());
    meta.backbone = Some(bcfg.clone());
    Ok(PretrainOutcome {
        adapter_ckpt: Checkpoint::new(subset, &meta),
        log,
        dev_metrics,
        model,
    })
}

/// A pre-trained adapter ready for fusion.
pub struct AdapterInput {
    pub slot: AdapterSlot,
    /// Parameters under `adapter.<name>.`; the checkpoint's pre-training
    /// head is dropped since downstream tasks build their own.
    pub params: ParamStore,
}

impl AdapterInput {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt.meta()?;
        let name = meta
            .name
            .ok_or_else(|| Error::Configuration("adapter checkpoint without a name".into()))?;
        let cfg = meta
            .adapter
            .ok_or_else(|| Error::Configuration("adapter checkpoint without a config".into()))?;
        Ok(AdapterInput {
            slot: AdapterSlot {
                name,
                knowledge_kind: meta.knowledge_kind.unwrap_or_else(|| "unknown".into()),
                cfg,
            },
            params: ckpt.store.subset(&["adapter."]),
        })
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub metrics: BTreeMap<String, f64>,
    pub log: Vec<LossEntry>,
}

/// Fine-tune on a downstream task: adapters (possibly none) are frozen, the
/// backbone and a fresh task head train.
pub fn finetune(
    backbone_store: &ParamStore,
    bcfg: &BackboneConfig,
    adapters: Vec<AdapterInput>,
    data: &TaskData,
    train_idx: &[usize],
    dev_idx: &[usize],
    tcfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let mut store = backbone_store.clone();
    let mut slots = Vec::with_capacity(adapters.len());
    let mut cfg = tcfg.clone();
    for input in adapters {
        if input.slot.cfg.up_dim != bcfg.hidden {
            return Err(Error::Dimension(format!(
                "adapter {} was trained for hidden width {}, backbone has {}",
                input.slot.name, input.slot.cfg.up_dim, bcfg.hidden
            )));
        }
        input.slot.cfg.validate(bcfg)?;
        let prefix = format!("adapter.{}.", input.slot.name);
        if input.params.subset(&[&prefix]).is_empty() {
            return Err(Error::Configuration(format!(
                "adapter input {} carries no parameters under {prefix}",
                input.slot.name
            )));
        }
        store.merge(&input.params);
        if !cfg.freeze_prefixes.contains(&prefix) {
            cfg.freeze_prefixes.push(prefix);
        }
        slots.push(input.slot);
    }
    let mut model = Model {
        bcfg: bcfg.clone(),
        adapters: slots,
        store,
    };
    let mut rng = Rng::new(tcfg.seed ^ 0xf17e);
    let d = model.feature_dim();
    data.init_head(&mut model.store, d, &mut rng);

    let log = if cfg.total_steps > 0 {
        train_task(&mut model, data, train_idx, &cfg)?
    } else {
        Vec::new()
    };
    let metrics = if dev_idx.is_empty() {
        BTreeMap::new()
    } else {
        evaluate(&model, data, dev_idx, cfg.batch_size)?
    };
    Ok(FinetuneOutcome { model, metrics, log })
}

/// Checkpoint of a full model (backbone + adapters + heads).
pub fn model_checkpoint(model: &Model, step: u64, seed: u64) -> Checkpoint {
    let mut meta = CheckpointMeta::new("model", step, seed);
    meta.backbone = Some(model.bcfg.clone());
    if !model.adapters.is_empty() {
        meta.adapters = Some(model.adapters.clone());
    }
    Checkpoint::new(model.store.clone(), &meta)
}

// ── forgetting experiment ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmReport {
    pub dev_a_before: f64,
    pub dev_a_after: f64,
    pub forgetting: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgetReport {
    /// Sequential full-model training: A, then B with shared parameters.
    pub sequential: ArmReport,
    /// Adapter training: adapter-A and adapter-B never share parameters.
    pub adapter: ArmReport,
    /// Adapter-A checkpoint bytes identical before/after training B.
    pub adapter_bytes_identical: bool,
    /// Adapter-A outputs on the fixed probe batch identical before/after.
    pub adapter_outputs_identical: bool,
}

/// Accuracy metric of a metrics record, whichever key the task produced.
fn primary_accuracy(metrics: &BTreeMap<String, f64>) -> f64 {
    *metrics
        .get("accuracy")
        .or_else(|| metrics.get("head_accuracy"))
        .or_else(|| metrics.get("micro_f1"))
        .unwrap_or(&0.0)
}

/// Two-arm catastrophic-forgetting contrast over two disjoint tasks.
///
/// Arm 1 trains the full model on task A, records dev-A accuracy, continues
/// training the same parameters on task B, and re-measures dev-A. Arm 2
/// trains adapter-A on task A against the frozen backbone, then adapter-B
/// on task B; adapter-A's checkpoint and outputs are compared byte-for-byte
/// before and after, so its forgetting is structurally zero.
pub fn forgetting_experiment(
    backbone_store: &ParamStore,
    bcfg: &BackboneConfig,
    acfg: &AdapterConfig,
    task_a: &TaskData,
    labels_a: &[String],
    task_b: &TaskData,
    labels_b: &[String],
    tcfg: &TrainConfig,
) -> Result<ForgetReport> {
    if labels_a.iter().any(|l| labels_b.contains(l)) {
        return Err(Error::Configuration(
            "forgetting experiment requires disjoint label spaces".into(),
        ));
    }
    let (train_a, dev_a, _) = crate::corpus::split_indices(task_a.len());
    let (train_b, _, _) = crate::corpus::split_indices(task_b.len());

    // arm 1: sequential full-model training with shared parameters
    let sequential = {
        let mut model = Model::backbone_only(bcfg.clone(), backbone_store.clone());
        let mut rng = Rng::new(tcfg.seed ^ 0xa);
        let d = model.feature_dim();
        task_a.init_head(&mut model.store, d, &mut rng);
        train_task(&mut model, task_a, &train_a, tcfg)?;
        let before = primary_accuracy(&evaluate(&model, task_a, &dev_a, tcfg.batch_size)?);

        // continue on task B with the same backbone parameters. A and B use
        // the same head name prefix, so A's head is set aside and restored
        // for the re-evaluation; only the shared backbone carries over.
        let head_a = model.store.subset(&["head."]);
        let mut store_b_head = ParamStore::new();
        task_b.init_head(&mut store_b_head, d, &mut rng);
        model.store.merge(&store_b_head);
        train_task(&mut model, task_b, &train_b, tcfg)?;
        model.store.merge(&head_a);
        let after = primary_accuracy(&evaluate(&model, task_a, &dev_a, tcfg.batch_size)?);
        ArmReport {
            dev_a_before: before,
            dev_a_after: after,
            forgetting: before - after,
        }
    };

    // arm 2: independent adapters over the frozen backbone
    let (adapter_arm, bytes_identical, outputs_identical) = {
        let outcome_a = pretrain_adapter(
            backbone_store,
            bcfg,
            acfg,
            "a",
            "task-a",
            task_a,
            &train_a,
            &dev_a,
            tcfg,
        )?;
        let before = primary_accuracy(&outcome_a.dev_metrics);
        let ckpt_bytes_before = crate::checkpoint::to_bytes(&outcome_a.adapter_ckpt);
        let probe_idx: Vec<usize> = dev_a.iter().copied().take(8).collect();
        let probe_out_before = adapter_probe_outputs(&outcome_a.model, task_a, &probe_idx)?;

        // train adapter B on task B; adapter A's parameters are not shared
        let mut cfg_b = tcfg.clone();
        cfg_b.seed ^= 0xb;
        let (train_b2, dev_b2, _) = crate::corpus::split_indices(task_b.len());
        let _outcome_b = pretrain_adapter(
            backbone_store,
            bcfg,
            acfg,
            "b",
            "task-b",
            task_b,
            &train_b2,
            &dev_b2,
            &cfg_b,
        )?;

        let ckpt_bytes_after = crate::checkpoint::to_bytes(&outcome_a.adapter_ckpt);
        let probe_out_after = adapter_probe_outputs(&outcome_a.model, task_a, &probe_idx)?;
        let after = primary_accuracy(&evaluate(
            &outcome_a.model,
            task_a,
            &dev_a,
            tcfg.batch_size,
        )?);
        (
            ArmReport {
                dev_a_before: before,
                dev_a_after: after,
                forgetting: before - after,
            },
            ckpt_bytes_before == ckpt_bytes_after,
            probe_out_before == probe_out_after,
        )
    };

    Ok(ForgetReport {
        sequential,
        adapter: adapter_arm,
        adapter_bytes_identical: bytes_identical,
        adapter_outputs_identical: outputs_identical,
    })
}

/// Raw fused-feature bytes of the model on a fixed probe batch.
pub fn adapter_probe_outputs(model: &Model, data: &TaskData, idx: &[usize]) -> Result<Vec<u8>> {
    let batch = data.batch_for(idx)?;
    let mut graph = Graph::new();
    let mut binder = Binder::new(&model.store, &[String::new()]);
    let features = model.features(&mut graph, &mut binder, &batch)?;
    let mut bytes = Vec::new();
    for &v in graph.data(features) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// True when the byte images of two stores differ only at names matched by
/// `expected_changed` prefixes; used by freezing-soundness checks.
pub fn changed_names(before: &ParamStore, after: &ParamStore) -> Vec<String> {
    let a = store_value_bytes(before);
    let b = store_value_bytes(after);
    let mut changed = Vec::new();
    for (name, bytes) in &a {
        if b.get(name).map(|x| x != bytes).unwrap_or(true) {
            changed.push(name.clone());
        }
    }
    for name in b.keys() {
        if !a.contains_key(name) {
            changed.push(name.clone());
        }
    }
    changed.sort();
    changed.dedup();
    changed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(steps: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk(seed);
        cfg.total_steps = steps;
        cfg.warmup_steps = (steps / 5).min(10);
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn lr_schedule_hand_points() {
        let mut cfg = TrainConfig::desk(42);
        cfg.lr = 1.0;
        cfg.warmup_steps = 100;
        cfg.total_steps = 500;
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 1.0);
        assert!((lr_at(300, &cfg) - 0.5).abs() < 1e-12);
        assert_eq!(lr_at(500, &cfg), 0.0);
        assert_eq!(lr_at(1000, &cfg), 0.0);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut store = ParamStore::new();
        store.insert_filled("p", &[3], 1.5);
        store.get_mut("p").unwrap().set_grad(Some(vec![0.0; 3]));
        let mut cfg = TrainConfig::desk(1);
        cfg.weight_decay = 0.0;
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.1, &cfg, 1);
        assert_eq!(store.get("p").unwrap().data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn adamw_first_step_hand_value() {
        // p=0, grad=1, lr=0.1, betas=(0.9, 0.999), wd=0: p -> ~ -0.1
        let mut store = ParamStore::new();
        store.insert_filled("p", &[1], 0.0);
        store.get_mut("p").unwrap().set_grad(Some(vec![1.0]));
        let mut cfg = TrainConfig::desk(1);
        cfg.weight_decay = 0.0;
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.1, &cfg, 1);
        let p = store.get("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn adamw_decoupled_decay_law() {
        // zero-gradient parameter decays by exactly (1 - lr*wd)
        let mut store = ParamStore::new();
        store.insert_filled("p", &[1], 2.0);
        store.get_mut("p").unwrap().set_grad(Some(vec![0.0]));
        let mut cfg = TrainConfig::desk(1);
        cfg.weight_decay = 0.01;
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.5, &cfg, 1);
        let p = store.get("p").unwrap().data()[0];
        assert!((p - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn adamw_frozen_parameter_untouched() {
        let mut store = ParamStore::new();
        store.insert_filled("frozen", &[2], 3.0);
        // no gradient attached: optimizer must skip it even with decay on
        let mut cfg = TrainConfig::desk(1);
        cfg.weight_decay = 0.5;
        let mut state = AdamState::new();
        adamw_step(&mut store, &mut state, 0.9, &cfg, 1);
        assert_eq!(store.get("frozen").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn adamw_step_decreases_quadratic_loss() {
        // loss = p^2 / 2, grad = p
        for lr in [0.9, 0.5, 0.1, 0.01] {
            let mut store = ParamStore::new();
            store.insert_filled("p", &[1], 1.0);
            let mut cfg = TrainConfig::desk(1);
            cfg.weight_decay = 0.0;
            let mut state = AdamState::new();
            let before = 0.5 * 1.0f64;
            store.get_mut("p").unwrap().set_grad(Some(vec![1.0]));
            adamw_step(&mut store, &mut state, lr, &cfg, 1);
            let p = store.get("p").unwrap().data()[0];
            assert!(0.5 * p * p < before, "lr {lr}: p {p}");
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = TrainConfig::desk(1);
        cfg.warmup_steps = 10;
        cfg.total_steps = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(1);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(1);
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_log_format() {
        let text = loss_log_text(&[LossEntry { step: 3, lr: 0.5, loss: 1.25 }]);
        assert_eq!(text, "3\t5.0000000000e-1\t1.2500000000e0\n");
    }

    // integration-level behavior (freezing soundness, determinism, the
    // forgetting contrast) is covered in tests/training.rs
    #[test]
    fn quick_cfg_is_valid() {
        assert!(quick_cfg(10, 42).validate().is_ok());
    }
}
