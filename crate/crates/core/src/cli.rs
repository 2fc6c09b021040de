//! Subcommand implementations behind the `kadapter` binary.
//!
//! Every command is reproducible: identical config and seed produce
//! hash-identical outputs. Commands never mutate their inputs, write only
//! under their `out_dir`, and hold a lock file there so concurrent runs must
//! use distinct directories. The fully-resolved configuration is written
//! beside the outputs of every run.
//!
//! The environment variable `KADAPTER_SEED` overrides the configured seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig};
use crate::backbone::{init_backbone, BackboneConfig};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::corpus::{self, EncodedExample, MarkedExample, Vocab};
use crate::error::{Error, Result};
use crate::probe::{self, ClozeQuery};
use crate::rng::Rng;
use crate::trainer::{self, AdapterInput, Model, TaskData, TrainConfig};

// ── run configuration ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// facts.jsonl or a CoNLL-U file, depending on the task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub typing: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub types: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    /// Backbone checkpoint; a fresh backbone is initialized from the seed
    /// when absent (and written to the out dir for reuse).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_ckpt: Option<PathBuf>,
    /// Drop relations with fewer examples when loading facts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_relation_count: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    pub train: TrainConfig,
    /// fact | dep | typing | relation | qa | multichoice
    pub task: String,
    pub data: DataPaths,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let Ok(env_seed) = std::env::var("KADAPTER_SEED") {
            let seed: u64 = env_seed.parse().map_err(|_| {
                Error::Configuration(format!("KADAPTER_SEED is not an integer: {env_seed:?}"))
            })?;
            cfg.train.seed = seed;
        }
        cfg.backbone.validate()?;
        cfg.train.validate()?;
        if let Some(a) = &cfg.adapter {
            a.validate(&cfg.backbone)?;
        }
        Ok(cfg)
    }

    fn data_path(&self, field: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let path = field
            .clone()
            .ok_or_else(|| Error::Configuration(format!("config is missing data.{what}")))?;
        if !path.exists() {
            return Err(Error::Configuration(format!(
                "data.{what} points at a missing file: {path:?}"
            )));
        }
        Ok(path)
    }
}

/// Lock file guard: created exclusively at acquisition, removed on drop.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out_dir: &Path) -> Result<OutDirLock> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Configuration(format!(
                    "out_dir {out_dir:?} is locked by another run (remove {path:?} if stale)"
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(cfg.out_dir.join("config.json"), text)?;
    Ok(())
}

fn write_metrics(out_dir: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
    let text = serde_json::to_string_pretty(metrics)?;
    fs::write(out_dir.join("metrics.json"), text)?;
    Ok(())
}

// ── gen ─────────────────────────────────────────────────────────────

pub struct GenArgs {
    pub seed: u64,
    pub entities: usize,
    pub relations: usize,
    pub examples: usize,
    pub queries: usize,
    pub out_dir: PathBuf,
}

pub fn cmd_gen(kind: &str, args: &GenArgs) -> Result<()> {
    let _lock = OutDirLock::acquire(&args.out_dir)?;
    match kind {
        "fact" => {
            let c = corpus::gen_fact_corpus(args.seed, args.entities, args.relations, args.examples)?;
            // include the dependency lexicon so factual and linguistic
            // adapters can share one backbone and vocabulary
            let mut tokens: Vec<String> = c
                .examples
                .iter()
                .flat_map(|e| e.tokens.iter().cloned())
                .collect();
            tokens.extend(corpus::dep_lexicon().map(str::to_string));
            let vocab = Vocab::from_corpus(tokens.iter().map(|s| s.as_str()));
            corpus::write_facts_jsonl(&c.examples, &c.relations, &args.out_dir.join("facts.jsonl"))?;
            corpus::write_labels(&c.relations, &args.out_dir.join("labels.txt"))?;
            vocab.write(&args.out_dir.join("vocab.txt"))?;
            let type_names: Vec<String> = (0..c.n_types).map(|t| format!("type_{t}")).collect();
            let typing = corpus::derive_typing(&c);
            corpus::write_typing_jsonl(&typing, &type_names, &args.out_dir.join("typing.jsonl"))?;
            corpus::write_labels(&type_names, &args.out_dir.join("types.txt"))?;
            println!(
                "fact corpus: {} examples, {} relations, {} typing examples, vocab {}",
                c.examples.len(),
                c.relations.len(),
                typing.len(),
                vocab.size()
            );
        }
        "dep" => {
            let examples = corpus::gen_dep_corpus(args.seed, args.examples);
            for ex in &examples {
                ex.validate()?;
            }
            let vocab = Vocab::from_corpus(
                examples
                    .iter()
                    .flat_map(|e| e.tokens.iter().map(|t| t.as_str())),
            );
            corpus::write_conllu(&examples, &args.out_dir.join("dep.conllu"))?;
            vocab.write(&args.out_dir.join("vocab.txt"))?;
            println!("dep corpus: {} sentences, vocab {}", examples.len(), vocab.size());
        }
        "cloze" => {
            let c = corpus::gen_fact_corpus(args.seed, args.entities, args.relations, args.examples)?;
            let vocab = Vocab::from_corpus(
                c.examples
                    .iter()
                    .flat_map(|e| e.tokens.iter().map(|t| t.as_str())),
            );
            let queries = corpus::derive_cloze_queries(&c, args.queries, args.seed);
            corpus::write_cloze_jsonl(&queries, &args.out_dir.join("queries.jsonl"))?;
            corpus::write_labels(&c.relations, &args.out_dir.join("labels.txt"))?;
            vocab.write(&args.out_dir.join("vocab.txt"))?;
            println!("cloze queries: {}, relations {}", queries.len(), c.relations.len());
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown gen kind {other:?}; expected fact, dep, or cloze"
            )))
        }
    }
    Ok(())
}

// ── shared loading helpers ──────────────────────────────────────────

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::read(&cfg.data_path(&cfg.data.vocab, "vocab")?)
}

fn load_backbone(cfg: &RunConfig) -> Result<(crate::params::ParamStore, bool)> {
    if let Some(path) = &cfg.data.backbone_ckpt {
        if !path.exists() {
            return Err(Error::Configuration(format!(
                "data.backbone_ckpt points at a missing file: {path:?}"
            )));
        }
        let ckpt = checkpoint::load_file(path)?;
        let meta = ckpt.meta()?;
        if meta.kind != "backbone" {
            return Err(Error::Configuration(format!(
                "{path:?} is a {:?} checkpoint, expected a backbone",
                meta.kind
            )));
        }
        if let Some(b) = meta.backbone {
            if b != cfg.backbone {
                return Err(Error::Configuration(format!(
                    "backbone checkpoint {path:?} was built for a different configuration"
                )));
            }
        }
        Ok((ckpt.store, false))
    } else {
        let mut rng = Rng::new(cfg.train.seed);
        Ok((init_backbone(&cfg.backbone, &mut rng), true))
    }
}

fn save_backbone(cfg: &RunConfig, store: &crate::params::ParamStore) -> Result<()> {
    let mut meta = CheckpointMeta::new("backbone", 0, cfg.train.seed);
    meta.backbone = Some(cfg.backbone.clone());
    checkpoint::save_file(
        &Checkpoint::new(store.clone(), &meta),
        &cfg.out_dir.join("backbone.ckpt"),
    )
}

fn encode_fact_rows(
    examples: &[corpus::FactExample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        rows.extend(corpus::encode_with_markers(
            &MarkedExample::FactPretrain(ex),
            vocab,
            max_len,
        )?);
    }
    Ok(rows)
}

fn load_fact_task(cfg: &RunConfig, vocab: &Vocab) -> Result<(TaskData, Vec<String>)> {
    let path = cfg.data_path(&cfg.data.corpus, "corpus")?;
    let (examples, labels) = corpus::load_fact_jsonl(&path, cfg.data.min_relation_count)?;
    if examples.is_empty() {
        return Err(Error::Configuration(format!("{path:?} holds no examples")));
    }
    let rows = encode_fact_rows(&examples, vocab, cfg.train.max_seq_len)?;
    Ok((
        TaskData::FactPretrain { rows, n_relations: labels.len() },
        labels,
    ))
}

fn load_dep_task(cfg: &RunConfig, vocab: &Vocab) -> Result<TaskData> {
    let path = cfg.data_path(&cfg.data.corpus, "corpus")?;
    let examples = corpus::load_conllu(&path)?;
    if examples.is_empty() {
        return Err(Error::Configuration(format!("{path:?} holds no sentences")));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for ex in &examples {
        rows.extend(corpus::encode_with_markers(
            &MarkedExample::DepPretrain(ex),
            vocab,
            cfg.train.max_seq_len,
        )?);
    }
    Ok(TaskData::DepPretrain {
        rows,
        n_classes: cfg.train.max_seq_len + 1,
    })
}

fn load_downstream_task(cfg: &RunConfig, vocab: &Vocab) -> Result<TaskData> {
    let max_len = cfg.train.max_seq_len;
    match cfg.task.as_str() {
        "typing" => {
            let types = corpus::read_labels(&cfg.data_path(&cfg.data.types, "types")?)?;
            let examples = corpus::load_typing_jsonl(
                &cfg.data_path(&cfg.data.typing, "typing")?,
                &types,
            )?;
            let mut rows = Vec::with_capacity(examples.len());
            for ex in &examples {
                rows.extend(corpus::encode_with_markers(
                    &MarkedExample::Typing(ex),
                    vocab,
                    max_len,
                )?);
            }
            Ok(TaskData::Typing { rows, n_types: types.len() })
        }
        "relation" => {
            let (examples, labels) =
                corpus::load_fact_jsonl(&cfg.data_path(&cfg.data.corpus, "corpus")?, None)?;
            let mut rows = Vec::with_capacity(examples.len());
            for ex in &examples {
                rows.extend(corpus::encode_with_markers(
                    &MarkedExample::RelationFt {
                        tokens: &ex.tokens,
                        subj: ex.subj,
                        obj: ex.obj,
                        label: ex.relation,
                    },
                    vocab,
                    max_len,
                )?);
            }
            Ok(TaskData::RelationFt { rows, n_relations: labels.len() })
        }
        "qa" => {
            let (examples, _) =
                corpus::load_fact_jsonl(&cfg.data_path(&cfg.data.corpus, "corpus")?, None)?;
            let qa = corpus::derive_span_qa(&examples);
            let mut rows = Vec::with_capacity(qa.len());
            for ex in &qa {
                rows.extend(corpus::encode_with_markers(
                    &MarkedExample::SpanQa {
                        question: &ex.question,
                        paragraph: &ex.paragraph,
                        answer: ex.answer,
                    },
                    vocab,
                    max_len,
                )?);
            }
            Ok(TaskData::SpanQa { rows })
        }
        "multichoice" => {
            let (examples, _) =
                corpus::load_fact_jsonl(&cfg.data_path(&cfg.data.corpus, "corpus")?, None)?;
            let mc = corpus::derive_multichoice(&examples, cfg.train.seed);
            let mut groups = Vec::with_capacity(mc.len());
            for ex in &mc {
                groups.push(corpus::encode_with_markers(
                    &MarkedExample::MultiChoice {
                        context: &ex.context,
                        question: &ex.question,
                        answers: &ex.answers,
                        gold: ex.gold,
                    },
                    vocab,
                    max_len,
                )?);
            }
            Ok(TaskData::MultiChoice { groups })
        }
        other => Err(Error::Configuration(format!(
            "task {other:?} is not a fine-tuning task"
        ))),
    }
}

// ── pretrain ────────────────────────────────────────────────────────

pub fn cmd_pretrain(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let acfg = cfg
        .adapter
        .clone()
        .ok_or_else(|| Error::Configuration("pretrain requires an adapter config".into()))?;
    let (name, knowledge_kind) = match cfg.task.as_str() {
        "fact" => ("fac", "factual"),
        "dep" => ("lin", "linguistic"),
        other => {
            return Err(Error::Configuration(format!(
                "pretrain task must be fact or dep, got {other:?}"
            )))
        }
    };
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_resolved_config(&cfg)?;
    let vocab = load_vocab(&cfg)?;
    let data = match cfg.task.as_str() {
        "fact" => load_fact_task(&cfg, &vocab)?.0,
        _ => load_dep_task(&cfg, &vocab)?,
    };
    let (backbone_store, fresh) = load_backbone(&cfg)?;
    if fresh {
        save_backbone(&cfg, &backbone_store)?;
    }
    let (train_idx, dev_idx, _) = corpus::split_indices(data.len());
    let outcome = trainer::pretrain_adapter(
        &backbone_store,
        &cfg.backbone,
        &acfg,
        name,
        knowledge_kind,
        &data,
        &train_idx,
        &dev_idx,
        &cfg.train,
    )?;
    checkpoint::save_file(&outcome.adapter_ckpt, &cfg.out_dir.join("adapter.ckpt"))?;
    fs::write(cfg.out_dir.join("loss.log"), trainer::loss_log_text(&outcome.log))?;
    write_metrics(&cfg.out_dir, &outcome.dev_metrics)?;
    for (k, v) in &outcome.dev_metrics {
        println!("{k}: {v:.4}");
    }
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("loss: {:.4} -> {:.4} over {} steps", first.loss, last.loss, outcome.log.len());
    }
    Ok(())
}

// ── finetune / eval ─────────────────────────────────────────────────

fn load_adapter_inputs(paths: &[PathBuf]) -> Result<Vec<AdapterInput>> {
    let mut inputs = Vec::with_capacity(paths.len());
    let mut names = BTreeSet::new();
    for path in paths {
        if !path.exists() {
            return Err(Error::Configuration(format!(
                "adapter checkpoint is missing: {path:?}"
            )));
        }
        let ckpt = checkpoint::load_file(path)?;
        let input = AdapterInput::from_checkpoint(&ckpt)?;
        if !names.insert(input.slot.name.clone()) {
            return Err(Error::Configuration(format!(
                "two adapters share the name {:?}",
                input.slot.name
            )));
        }
        inputs.push(input);
    }
    Ok(inputs)
}

pub fn cmd_finetune(config_path: &Path, adapter_paths: &[PathBuf]) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    if !matches!(cfg.task.as_str(), "typing" | "relation" | "qa" | "multichoice") {
        return Err(Error::Configuration(format!(
            "finetune task must be typing, relation, qa, or multichoice, got {:?}",
            cfg.task
        )));
    }
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_resolved_config(&cfg)?;
    let vocab = load_vocab(&cfg)?;
    let data = load_downstream_task(&cfg, &vocab)?;
    let (backbone_store, fresh) = load_backbone(&cfg)?;
    if fresh {
        save_backbone(&cfg, &backbone_store)?;
    }
    let adapters = load_adapter_inputs(adapter_paths)?;
    let (train_idx, dev_idx, _) = corpus::split_indices(data.len());
    let outcome = trainer::finetune(
        &backbone_store,
        &cfg.backbone,
        adapters,
        &data,
        &train_idx,
        &dev_idx,
        &cfg.train,
    )?;
    let ckpt = trainer::model_checkpoint(
        &outcome.model,
        cfg.train.total_steps as u64,
        cfg.train.seed,
    );
    checkpoint::save_file(&ckpt, &cfg.out_dir.join("model.ckpt"))?;
    fs::write(cfg.out_dir.join("loss.log"), trainer::loss_log_text(&outcome.log))?;
    write_metrics(&cfg.out_dir, &outcome.metrics)?;
    for (k, v) in &outcome.metrics {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

pub fn cmd_eval(config_path: &Path, model_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_resolved_config(&cfg)?;
    let vocab = load_vocab(&cfg)?;
    let data = match cfg.task.as_str() {
        "fact" => load_fact_task(&cfg, &vocab)?.0,
        "dep" => load_dep_task(&cfg, &vocab)?,
        _ => load_downstream_task(&cfg, &vocab)?,
    };
    let ckpt = checkpoint::load_file(model_path)?;
    let meta = ckpt.meta()?;
    if meta.kind != "model" {
        return Err(Error::Configuration(format!(
            "{model_path:?} is a {:?} checkpoint, expected a fine-tuned model",
            meta.kind
        )));
    }
    let bcfg = meta.backbone.unwrap_or_else(|| cfg.backbone.clone());
    let model = Model {
        bcfg,
        adapters: meta.adapters.unwrap_or_default(),
        store: ckpt.store,
    };
    let (_, dev_idx, _) = corpus::split_indices(data.len());
    let metrics = trainer::evaluate(&model, &data, &dev_idx, cfg.train.batch_size)?;
    write_metrics(&cfg.out_dir, &metrics)?;
    for (k, v) in &metrics {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

// ── probe ───────────────────────────────────────────────────────────

fn load_queries(cfg: &RunConfig, vocab: &Vocab, labels: &[String]) -> Result<Vec<ClozeQuery>> {
    let records = corpus::load_cloze_jsonl(&cfg.data_path(&cfg.data.queries, "queries")?)?;
    let label_ids: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut queries = Vec::with_capacity(records.len());
    for rec in &records {
        let relation = *label_ids.get(rec.relation.as_str()).ok_or_else(|| {
            Error::Query(format!("query relation {:?} not in the label table", rec.relation))
        })?;
        queries.push(ClozeQuery::from_record(rec, relation, vocab, cfg.train.max_seq_len)?);
    }
    Ok(queries)
}

/// Train an MLM layer per arm (backbone-only, and backbone + adapters when
/// given) over the fact corpus, then score the queries. The candidate
/// vocabulary is the set of gold answers.
pub fn cmd_probe(config_path: &Path, adapter_paths: &[PathBuf]) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_resolved_config(&cfg)?;
    let vocab = load_vocab(&cfg)?;
    let (data, labels) = load_fact_task(&cfg, &vocab)?;
    let TaskData::FactPretrain { rows, .. } = &data else { unreachable!() };
    let queries = load_queries(&cfg, &vocab, &labels)?;
    if queries.is_empty() {
        return Err(Error::Configuration("no queries to probe".into()));
    }
    let candidates: BTreeSet<usize> = queries.iter().map(|q| q.gold).collect();
    let (backbone_store, fresh) = load_backbone(&cfg)?;
    if fresh {
        save_backbone(&cfg, &backbone_store)?;
    }
    let (train_idx, _, _) = corpus::split_indices(rows.len());

    let run_arm = |adapters: Vec<AdapterInput>, tag: &str| -> Result<f64> {
        let mut store = backbone_store.clone();
        let mut slots = Vec::new();
        for input in adapters {
            store.merge(&input.params);
            slots.push(input.slot);
        }
        let mut model = Model { bcfg: cfg.backbone.clone(), adapters: slots, store };
        let mut rng = Rng::new(cfg.train.seed ^ 0x9d);
        probe::init_mlm_head(&mut model, vocab.size(), &mut rng);
        probe::train_mlm_head(&mut model, rows, &train_idx, &cfg.train)?;
        let (_, score) = probe::probe_queries(&model, &queries, Some(&candidates))?;
        let head = model.store.subset(&[probe::MLM_PREFIX]);
        let mut meta = CheckpointMeta::new("mlm_head", cfg.train.total_steps as u64, cfg.train.seed);
        meta.name = Some(tag.to_string());
        checkpoint::save_file(
            &Checkpoint::new(head, &meta),
            &cfg.out_dir.join(format!("mlm_{tag}.ckpt")),
        )?;
        Ok(score)
    };

    let baseline = run_arm(Vec::new(), "baseline")?;
    let mut report = BTreeMap::new();
    report.insert("p_at_1_baseline".to_string(), baseline);
    if !adapter_paths.is_empty() {
        let adapters = load_adapter_inputs(adapter_paths)?;
        let with_adapters = run_arm(adapters, "adapter")?;
        report.insert("p_at_1_adapter".to_string(), with_adapters);
    }
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(cfg.out_dir.join("probe.json"), text)?;
    for (k, v) in &report {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

// ── forget ──────────────────────────────────────────────────────────

pub fn cmd_forget(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let acfg = cfg
        .adapter
        .clone()
        .ok_or_else(|| Error::Configuration("forget requires an adapter config".into()))?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_resolved_config(&cfg)?;
    let vocab = load_vocab(&cfg)?;
    let path = cfg.data_path(&cfg.data.corpus, "corpus")?;
    let (examples_a, labels_a) = corpus::load_fact_jsonl(&path, cfg.data.min_relation_count)?;
    let (examples_b, labels_b) = corpus::derive_conflicting(&examples_a, &labels_a);
    let rows_a = encode_fact_rows(&examples_a, &vocab, cfg.train.max_seq_len)?;
    let rows_b = encode_fact_rows(&examples_b, &vocab, cfg.train.max_seq_len)?;
    let task_a = TaskData::FactPretrain { rows: rows_a, n_relations: labels_a.len() };
    let task_b = TaskData::FactPretrain { rows: rows_b, n_relations: labels_b.len() };
    let (backbone_store, fresh) = load_backbone(&cfg)?;
    if fresh {
        save_backbone(&cfg, &backbone_store)?;
    }
    let report = trainer::forgetting_experiment(
        &backbone_store,
        &cfg.backbone,
        &acfg,
        &task_a,
        &labels_a,
        &task_b,
        &labels_b,
        &cfg.train,
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(cfg.out_dir.join("forget.json"), &text)?;
    println!("{text}");
    Ok(())
}

// ── paramcount ──────────────────────────────────────────────────────

pub fn cmd_paramcount(paper: bool, config_path: Option<&Path>) -> Result<()> {
    let (acfg, bcfg) = if paper {
        (AdapterConfig::paper(), BackboneConfig::paper())
    } else {
        let path = config_path.ok_or_else(|| {
            Error::Argument("paramcount needs --paper-config or --config <file>".into())
        })?;
        let cfg = RunConfig::load(path)?;
        let acfg = cfg
            .adapter
            .ok_or_else(|| Error::Configuration("config has no adapter section".into()))?;
        (acfg, cfg.backbone)
    };
    let formula = adapter::param_count(&acfg, &bcfg);
    let enumerated = adapter::param_count_enumerated(&acfg, &bcfg);
    println!("adapter parameters (closed form): {formula}");
    println!("adapter parameters (enumerated):  {enumerated}");
    println!("matches enumeration: {}", formula == enumerated);
    if formula != enumerated {
        return Err(Error::Configuration(
            "closed-form parameter count deviates from enumeration".into(),
        ));
    }
    Ok(())
}
