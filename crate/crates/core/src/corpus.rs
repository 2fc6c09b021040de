//! Tokenization, dataset file formats, and synthetic corpus generators.
//!
//! The tokenizer is a whitespace/lowercase map over a closed vocabulary with
//! an `<unk>` fallback. The first seven vocabulary entries are the special
//! tokens, in fixed order; specials are inserted only by the encoders and are
//! never produced from raw text.
//!
//! Two synthetic generators stand in for the large corpora the adapters are
//! pre-trained on: a templated knowledge base for relation classification
//! (every relation carries its own connective words, so a perfect classifier
//! exists) and a deterministic toy grammar for dependency-head prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{splitmix64, Rng};

// ── vocabulary ──────────────────────────────────────────────────────

pub const SPECIALS: [&str; 7] = ["<pad>", "<unk>", "<bos>", "<sep>", "<mask>", "@", "#"];

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const AT: usize = 5;
pub const HASH: usize = 6;

/// Closed vocabulary: bijective over non-special tokens, `<unk>` total fallback.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from raw corpus tokens; non-special tokens are deduplicated,
    /// lowercased, and sorted after the specials.
    pub fn from_corpus<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut set: Vec<String> = tokens
            .into_iter()
            .map(|t| t.to_lowercase())
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        set.sort();
        set.dedup();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(set);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens: all, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lookup with `<unk>` fallback. Special surface forms in raw text map
    /// to `<unk>`: only encoders may introduce specials.
    pub fn id_of_text_token(&self, token: &str) -> usize {
        let lower = token.to_lowercase();
        if SPECIALS.contains(&lower.as_str()) {
            return UNK;
        }
        self.index.get(&lower).copied().unwrap_or(UNK)
    }

    /// Exact lookup without the specials guard, used by loaders for answers.
    pub fn id_exact(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id_of_text_token(t))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            let _ = writeln!(body, "{t}");
        }
        fs::write(path, body)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vocab> {
        let body = fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Validation {
                line: None,
                message: format!("vocab file {path:?} has fewer than 7 lines"),
            });
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Validation {
                    line: Some(i + 1),
                    message: format!("vocab line {} must be {s:?}, got {:?}", i + 1, tokens[i]),
                });
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, index })
    }
}

// ── example types ───────────────────────────────────────────────────

/// Relation-classification example with token-offset entity spans.
#[derive(Clone, Debug)]
pub struct FactExample {
    pub tokens: Vec<String>,
    pub subj: (usize, usize),
    pub obj: (usize, usize),
    pub relation: usize,
}

impl FactExample {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let (s1, e1) = self.subj;
        let (s2, e2) = self.obj;
        if s1 >= e1 || e1 > n || s2 >= e2 || e2 > n {
            return Err(Error::Validation {
                line: None,
                message: format!("span out of bounds in {n}-token example"),
            });
        }
        if s1 < e2 && s2 < e1 {
            return Err(Error::Validation {
                line: None,
                message: "subject and object spans overlap".into(),
            });
        }
        Ok(())
    }
}

/// Dependency example: `heads[i]` is 0 for the root, otherwise the 1-based
/// position of token i's head.
#[derive(Clone, Debug, PartialEq)]
pub struct DepExample {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
}

impl DepExample {
    /// Heads must form a single-rooted tree: exactly one 0, no cycles.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.heads.len() != n {
            return Err(Error::Validation {
                line: None,
                message: format!("{} heads for {n} tokens", self.heads.len()),
            });
        }
        let roots = self.heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(Error::Validation {
                line: None,
                message: format!("expected exactly one root, found {roots}"),
            });
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while self.heads[cur] != 0 {
                let h = self.heads[cur];
                if h > n {
                    return Err(Error::Validation {
                        line: None,
                        message: format!("head {h} out of range for {n} tokens"),
                    });
                }
                cur = h - 1;
                steps += 1;
                if steps > n {
                    return Err(Error::Validation {
                        line: None,
                        message: format!("cycle reachable from token {}", start + 1),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Generated knowledge-base corpus. Each entity carries a type; each
/// relation constrains the types of its arguments, and each (subject,
/// relation) pair resolves to a single object, so the corpus supports
/// relation classification, entity typing, and cloze probing.
#[derive(Clone, Debug)]
pub struct FactCorpus {
    pub examples: Vec<FactExample>,
    pub relations: Vec<String>,
    pub entities: Vec<String>,
    pub entity_type: Vec<usize>,
    pub n_types: usize,
}

pub const N_ENTITY_TYPES: usize = 8;

/// Deterministic object for a (subject, relation) pair among the entities
/// of the relation's object type.
fn kb_object(subject: usize, relation: usize, of_type: &[Vec<usize>], obj_type: usize) -> usize {
    let pool = &of_type[obj_type];
    pool[(splitmix64((subject as u64) << 20 | relation as u64) as usize) % pool.len()]
}

/// Synthetic surrogate for a large aligned text-triple corpus. Every
/// relation owns a unique pair of connective words, so relation labels are
/// decidable from the lexicon alone; deterministic in `seed`.
pub fn gen_fact_corpus(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_examples: usize,
) -> Result<FactCorpus> {
    if n_relations < 2 {
        return Err(Error::Argument("gen_fact_corpus: need >= 2 relations".into()));
    }
    if n_entities < 2 * N_ENTITY_TYPES {
        return Err(Error::Argument(format!(
            "gen_fact_corpus: need >= {} entities",
            2 * N_ENTITY_TYPES
        )));
    }
    let mut rng = Rng::new(seed);
    let n_types = N_ENTITY_TYPES;
    let entities: Vec<String> = (0..n_entities).map(|i| format!("ent{i}")).collect();
    let entity_type: Vec<usize> = (0..n_entities).map(|i| i % n_types).collect();
    let mut of_type: Vec<Vec<usize>> = vec![Vec::new(); n_types];
    for (e, &t) in entity_type.iter().enumerate() {
        of_type[t].push(e);
    }
    let relations: Vec<String> = (0..n_relations).map(|r| format!("rel_{r}")).collect();
    let fillers = ["so", "then", "now", "indeed", "also"];

    let mut examples = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        // round-robin over relations guarantees full label coverage
        let r = i % n_relations;
        let subj_type = r % n_types;
        let obj_type = (r + 3) % n_types;
        let subj = of_type[subj_type][rng.below(of_type[subj_type].len())];
        let obj = kb_object(subj, r, &of_type, obj_type);

        let mut tokens: Vec<String> = Vec::new();
        for _ in 0..rng.below(3) {
            tokens.push(fillers[rng.below(fillers.len())].to_string());
        }
        let subj_start = tokens.len();
        tokens.push(entities[subj].clone());
        tokens.push(format!("verb{r}"));
        tokens.push(format!("prep{r}"));
        let obj_start = tokens.len();
        tokens.push(entities[obj].clone());
        if rng.below(2) == 1 {
            tokens.push(fillers[rng.below(fillers.len())].to_string());
        }
        examples.push(FactExample {
            tokens,
            subj: (subj_start, subj_start + 1),
            obj: (obj_start, obj_start + 1),
            relation: r,
        });
    }
    Ok(FactCorpus {
        examples,
        relations,
        entities,
        entity_type,
        n_types,
    })
}

/// Derive a task that conflicts with the source corpus: the same sentences,
/// but the label is a function of the subject mention crossed with the
/// relation. A linear head over relation-only features cannot express the
/// conjunction, so fitting the derived task forces the shared encoder to
/// build new features, actively disturbing what it learned on the source.
/// Label spaces stay disjoint by renaming.
pub fn derive_conflicting(
    examples: &[FactExample],
    labels: &[String],
) -> (Vec<FactExample>, Vec<String>) {
    let n = labels.len();
    let moved = examples
        .iter()
        .map(|ex| {
            let mut out = ex.clone();
            let subj_surface = ex.tokens[ex.subj.0..ex.subj.1].join(" ");
            let mut h: u64 = 0xcbf29ce484222325;
            for b in subj_surface.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            out.relation = (splitmix64(h) as usize + ex.relation) % n;
            out
        })
        .collect();
    let renamed = labels.iter().map(|l| format!("mix_{l}")).collect();
    (moved, renamed)
}

/// Copy-task span QA derived from fact examples: the paragraph is the
/// sentence, the question is the subject mention plus the following token,
/// and the answer is the object span (present verbatim exactly once).
#[derive(Clone, Debug)]
pub struct QaExample {
    pub question: Vec<String>,
    pub paragraph: Vec<String>,
    pub answer: (usize, usize),
}

pub fn derive_span_qa(examples: &[FactExample]) -> Vec<QaExample> {
    examples
        .iter()
        .map(|ex| {
            let hint_end = (ex.subj.1 + 1).min(ex.tokens.len());
            QaExample {
                question: ex.tokens[ex.subj.0..hint_end].to_vec(),
                paragraph: ex.tokens.clone(),
                answer: ex.obj,
            }
        })
        .collect()
}

/// Multiple-choice task derived from fact examples: the context is the
/// sentence, the gold answer is the object mention (so the correct choice
/// repeats a context token), distractors are object mentions of other
/// examples.
#[derive(Clone, Debug)]
pub struct McExample {
    pub context: Vec<String>,
    pub question: Vec<String>,
    pub answers: Vec<Vec<String>>,
    pub gold: usize,
}

pub const MC_CHOICES: usize = 4;

pub fn derive_multichoice(examples: &[FactExample], seed: u64) -> Vec<McExample> {
    let mut rng = Rng::new(seed ^ 0x6d63);
    let mut object_texts: Vec<Vec<String>> = examples
        .iter()
        .map(|ex| ex.tokens[ex.obj.0..ex.obj.1].to_vec())
        .collect();
    object_texts.sort();
    object_texts.dedup();
    examples
        .iter()
        .filter_map(|ex| {
            let gold_text = ex.tokens[ex.obj.0..ex.obj.1].to_vec();
            let mut distractors: Vec<Vec<String>> = Vec::new();
            let mut guard = 0;
            while distractors.len() < MC_CHOICES - 1 && guard < 1000 {
                guard += 1;
                let cand = object_texts[rng.below(object_texts.len())].clone();
                if cand != gold_text && !distractors.contains(&cand) {
                    distractors.push(cand);
                }
            }
            if distractors.len() < MC_CHOICES - 1 {
                return None; // too few distinct objects in the corpus
            }
            let gold = rng.below(MC_CHOICES);
            let mut answers = distractors;
            answers.insert(gold, gold_text);
            let hint_end = (ex.subj.1 + 1).min(ex.tokens.len());
            Some(McExample {
                context: ex.tokens.clone(),
                question: ex.tokens[ex.subj.0..hint_end].to_vec(),
                answers,
                gold,
            })
        })
        .collect()
}

/// Entity-typing example derived from the knowledge base: one entity is
/// marked and labeled with its type.
#[derive(Clone, Debug)]
pub struct TypingExample {
    pub tokens: Vec<String>,
    pub span: (usize, usize),
    pub labels: Vec<usize>,
}

/// Derive typing examples from a generated corpus, alternating between the
/// subject and the object mention. The marked mention is replaced by a
/// fresh surface form unique to the example (out-of-vocabulary at encode
/// time), so the type is decidable only from the relation context, never by
/// memorizing the mention itself.
pub fn derive_typing(corpus: &FactCorpus) -> Vec<TypingExample> {
    let entity_index: BTreeMap<&str, usize> = corpus
        .entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.as_str(), i))
        .collect();
    corpus
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let span = if i % 2 == 0 { ex.subj } else { ex.obj };
            let entity = entity_index[ex.tokens[span.0].as_str()];
            let mut tokens = ex.tokens.clone();
            tokens[span.0] = format!("mention{i}");
            TypingExample {
                tokens,
                span,
                labels: vec![corpus.entity_type[entity]],
            }
        })
        .collect()
}

/// Raw cloze record: the object mention replaced by a literal `[MASK]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClozeRecord {
    pub text: String,
    pub answer: String,
    pub relation: String,
}

/// Derive masked-object queries from a generated corpus.
pub fn derive_cloze_queries(corpus: &FactCorpus, n_queries: usize, seed: u64) -> Vec<ClozeRecord> {
    let mut rng = Rng::new(seed ^ 0xc1_02_e);
    let mut order: Vec<usize> = (0..corpus.examples.len()).collect();
    rng.shuffle(&mut order);
    order
        .into_iter()
        .take(n_queries)
        .map(|i| {
            let ex = &corpus.examples[i];
            let words: Vec<String> = ex
                .tokens
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == ex.obj.0 {
                        "[MASK]".to_string()
                    } else {
                        t.clone()
                    }
                })
                .collect();
            ClozeRecord {
                text: words.join(" "),
                answer: ex.tokens[ex.obj.0].clone(),
                relation: corpus.relations[ex.relation].clone(),
            }
        })
        .collect()
}

// ── toy dependency grammar ──────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pos {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
}

const DETS: [&str; 2] = ["the", "a"];
const ADJS: [&str; 3] = ["big", "small", "red"];
const NOUNS: [&str; 8] = ["cat", "dog", "bird", "fox", "cow", "horse", "mouse", "sheep"];
const VERBS: [&str; 6] = ["sleeps", "runs", "sees", "likes", "chases", "finds"];
const ADVS: [&str; 3] = ["quickly", "slowly", "happily"];

/// The full (fixed) grammar lexicon. Generated fact vocabularies include it
/// so one vocabulary serves both pre-training corpora and adapters trained
/// on either can be fused over the same backbone.
pub fn dep_lexicon() -> impl Iterator<Item = &'static str> {
    DETS.iter()
        .chain(ADJS.iter())
        .chain(NOUNS.iter())
        .chain(VERBS.iter())
        .chain(ADVS.iter())
        .copied()
}

/// Head assignment rules: det/adj attach to the next noun, nouns attach to
/// the verb, the verb is the root, adverbs attach to the verb.
fn heads_for_pattern(pattern: &[Pos]) -> Vec<usize> {
    let verb_pos = pattern.iter().position(|&p| p == Pos::Verb).expect("verb") + 1;
    pattern
        .iter()
        .enumerate()
        .map(|(i, &p)| match p {
            Pos::Verb => 0,
            Pos::Noun | Pos::Adv => verb_pos,
            Pos::Det | Pos::Adj => {
                let noun = pattern[i + 1..]
                    .iter()
                    .position(|&q| q == Pos::Noun)
                    .expect("noun follows det/adj");
                i + 1 + noun + 1
            }
        })
        .collect()
}

/// Samples sentences from the deterministic grammar; trees are valid by
/// construction.
pub fn gen_dep_corpus(seed: u64, n_examples: usize) -> Vec<DepExample> {
    use Pos::*;
    let patterns: [&[Pos]; 5] = [
        &[Det, Noun, Verb],
        &[Det, Noun, Verb, Det, Noun],
        &[Det, Noun, Verb, Det, Noun, Adv],
        &[Det, Adj, Noun, Verb, Det, Noun],
        &[Det, Noun, Verb, Adv],
    ];
    let mut rng = Rng::new(seed);
    (0..n_examples)
        .map(|_| {
            let pattern = patterns[rng.below(patterns.len())];
            let tokens: Vec<String> = pattern
                .iter()
                .map(|p| {
                    match p {
                        Det => DETS[rng.below(DETS.len())],
                        Adj => ADJS[rng.below(ADJS.len())],
                        Noun => NOUNS[rng.below(NOUNS.len())],
                        Verb => VERBS[rng.below(VERBS.len())],
                        Adv => ADVS[rng.below(ADVS.len())],
                    }
                    .to_string()
                })
                .collect();
            DepExample {
                tokens,
                heads: heads_for_pattern(pattern),
            }
        })
        .collect()
}

// ── file formats ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct FactRecord {
    text: String,
    subj: [usize; 2],
    obj: [usize; 2],
    relation: String,
}

/// One JSON object per line: text, subj, obj (token offsets), relation.
pub fn write_facts_jsonl(examples: &[FactExample], relations: &[String], path: &Path) -> Result<()> {
    let mut body = String::new();
    for ex in examples {
        let rec = FactRecord {
            text: ex.tokens.join(" "),
            subj: [ex.subj.0, ex.subj.1],
            obj: [ex.obj.0, ex.obj.1],
            relation: relations[ex.relation].clone(),
        };
        let _ = writeln!(body, "{}", serde_json::to_string(&rec)?);
    }
    fs::write(path, body)?;
    Ok(())
}

/// Parse and validate a facts file. Relation strings are interned in first-
/// appearance order; `min_count`, when set, drops relations with fewer
/// examples (and is the only silent filter).
pub fn load_fact_jsonl(
    path: &Path,
    min_count: Option<usize>,
) -> Result<(Vec<FactExample>, Vec<String>)> {
    let body = fs::read_to_string(path)?;
    let mut labels: Vec<String> = Vec::new();
    let mut label_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut examples = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactRecord = serde_json::from_str(line).map_err(|e| Error::Validation {
            line: Some(lineno + 1),
            message: format!("malformed record: {e}"),
        })?;
        let tokens: Vec<String> = rec.text.split_whitespace().map(|t| t.to_string()).collect();
        let relation = *label_index.entry(rec.relation.clone()).or_insert_with(|| {
            labels.push(rec.relation.clone());
            labels.len() - 1
        });
        let ex = FactExample {
            tokens,
            subj: (rec.subj[0], rec.subj[1]),
            obj: (rec.obj[0], rec.obj[1]),
            relation,
        };
        ex.validate().map_err(|e| Error::Validation {
            line: Some(lineno + 1),
            message: e.to_string(),
        })?;
        examples.push(ex);
    }
    if let Some(min) = min_count {
        let mut counts = vec![0usize; labels.len()];
        for ex in &examples {
            counts[ex.relation] += 1;
        }
        let keep: Vec<bool> = counts.iter().map(|&c| c >= min).collect();
        let mut remap = vec![usize::MAX; labels.len()];
        let mut kept_labels = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            if keep[i] {
                remap[i] = kept_labels.len();
                kept_labels.push(label.clone());
            }
        }
        examples.retain(|ex| keep[ex.relation]);
        for ex in &mut examples {
            ex.relation = remap[ex.relation];
        }
        labels = kept_labels;
    }
    Ok((examples, labels))
}

/// One label per line; the line number is the id.
pub fn write_labels(labels: &[String], path: &Path) -> Result<()> {
    let mut body = String::new();
    for l in labels {
        let _ = writeln!(body, "{l}");
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.to_string())
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TypingRecord {
    text: String,
    span: [usize; 2],
    labels: Vec<String>,
}

pub fn write_typing_jsonl(
    examples: &[TypingExample],
    type_names: &[String],
    path: &Path,
) -> Result<()> {
    let mut body = String::new();
    for ex in examples {
        let rec = TypingRecord {
            text: ex.tokens.join(" "),
            span: [ex.span.0, ex.span.1],
            labels: ex.labels.iter().map(|&l| type_names[l].clone()).collect(),
        };
        let _ = writeln!(body, "{}", serde_json::to_string(&rec)?);
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn load_typing_jsonl(path: &Path, type_names: &[String]) -> Result<Vec<TypingExample>> {
    let body = fs::read_to_string(path)?;
    let type_index: BTreeMap<&str, usize> = type_names
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut examples = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TypingRecord = serde_json::from_str(line).map_err(|e| Error::Validation {
            line: Some(lineno + 1),
            message: format!("malformed record: {e}"),
        })?;
        let tokens: Vec<String> = rec.text.split_whitespace().map(|t| t.to_string()).collect();
        if rec.span[0] >= rec.span[1] || rec.span[1] > tokens.len() {
            return Err(Error::Validation {
                line: Some(lineno + 1),
                message: format!("span {:?} out of bounds", rec.span),
            });
        }
        let mut labels = Vec::new();
        for l in &rec.labels {
            let id = type_index.get(l.as_str()).ok_or_else(|| Error::Validation {
                line: Some(lineno + 1),
                message: format!("unknown type {l:?}"),
            })?;
            labels.push(*id);
        }
        examples.push(TypingExample {
            tokens,
            span: (rec.span[0], rec.span[1]),
            labels,
        });
    }
    Ok(examples)
}

pub fn write_cloze_jsonl(records: &[ClozeRecord], path: &Path) -> Result<()> {
    let mut body = String::new();
    for rec in records {
        let _ = writeln!(body, "{}", serde_json::to_string(rec)?);
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn load_cloze_jsonl(path: &Path) -> Result<Vec<ClozeRecord>> {
    let body = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClozeRecord = serde_json::from_str(line).map_err(|e| Error::Validation {
            line: Some(lineno + 1),
            message: format!("malformed record: {e}"),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Standard 10-column dependency output; only FORM and HEAD are filled.
pub fn write_conllu(examples: &[DepExample], path: &Path) -> Result<()> {
    let mut body = String::new();
    for ex in examples {
        for (i, (tok, head)) in ex.tokens.iter().zip(&ex.heads).enumerate() {
            let _ = writeln!(body, "{}\t{tok}\t_\t_\t_\t_\t{head}\t_\t_\t_", i + 1);
        }
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Parse 10-column blocks, using FORM (col 2) and HEAD (col 7). Comments
/// and multi-word range lines are skipped; every tree is validated.
pub fn load_conllu(path: &Path) -> Result<Vec<DepExample>> {
    let body = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut heads: Vec<usize> = Vec::new();
    let mut sentence_start = 1usize;

    let mut flush = |tokens: &mut Vec<String>,
                     heads: &mut Vec<usize>,
                     start: usize|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let ex = DepExample {
            tokens: std::mem::take(tokens),
            heads: std::mem::take(heads),
        };
        ex.validate().map_err(|e| Error::Validation {
            line: Some(start),
            message: format!("sentence starting here is not a tree: {e}"),
        })?;
        examples.push(ex);
        Ok(())
    };

    for (lineno, line) in body.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            flush(&mut tokens, &mut heads, sentence_start)?;
            sentence_start = lineno + 2;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 8 {
            return Err(Error::Validation {
                line: Some(lineno + 1),
                message: format!("expected >= 8 tab-separated columns, got {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue; // multi-word range or empty node
        }
        if tokens.is_empty() {
            sentence_start = lineno + 1;
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Validation {
            line: Some(lineno + 1),
            message: format!("HEAD column is not an integer: {:?}", cols[6]),
        })?;
        tokens.push(cols[1].to_string());
        heads.push(head);
    }
    flush(&mut tokens, &mut heads, sentence_start)?;
    Ok(examples)
}

// ── marker insertion and batching ───────────────────────────────────

/// One encoded sequence plus its task annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub ann: Annotation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    FactPretrain {
        subj: (usize, usize),
        obj: (usize, usize),
        label: usize,
    },
    /// Per-token gold head class aligned with `ids`; -1 is ignored.
    DepPretrain { heads: Vec<i64> },
    Typing {
        at_index: usize,
        labels: Vec<usize>,
    },
    RelationFt {
        at_index: usize,
        hash_index: usize,
        label: usize,
    },
    SpanQa {
        answer: (usize, usize),
        paragraph: (usize, usize),
    },
    /// One row of a multiple-choice group; rows of a group are consecutive.
    MultiChoice { gold: usize, n_choices: usize },
    Cloze {
        mask_index: usize,
        gold: usize,
        relation: usize,
    },
}

/// Task-tagged input to [`encode_with_markers`].
pub enum MarkedExample<'a> {
    FactPretrain(&'a FactExample),
    DepPretrain(&'a DepExample),
    Typing(&'a TypingExample),
    RelationFt {
        tokens: &'a [String],
        subj: (usize, usize),
        obj: (usize, usize),
        label: usize,
    },
    SpanQa {
        question: &'a [String],
        paragraph: &'a [String],
        /// Token span of the answer within the paragraph.
        answer: (usize, usize),
    },
    MultiChoice {
        context: &'a [String],
        question: &'a [String],
        answers: &'a [Vec<String>],
        gold: usize,
    },
}

fn ids_of(vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id_of_text_token(t)).collect()
}

/// Insert the task's marker/separator convention, recompute every span
/// index after insertion, and truncate to `max_len`. Truncation that would
/// cut a marker, span, or answer is a length error. Multiple-choice input
/// yields one row per choice; every other task yields exactly one row.
pub fn encode_with_markers(
    example: &MarkedExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    match example {
        MarkedExample::FactPretrain(ex) => {
            // [bos] tokens...; spans shift by one
            let mut ids = vec![BOS];
            ids.extend(ids_of(vocab, &ex.tokens));
            let subj = (ex.subj.0 + 1, ex.subj.1 + 1);
            let obj = (ex.obj.0 + 1, ex.obj.1 + 1);
            let needed = subj.1.max(obj.1);
            if needed > max_len {
                return Err(Error::Length(format!(
                    "entity span ends at {needed} but max_len is {max_len}"
                )));
            }
            ids.truncate(max_len);
            Ok(vec![EncodedExample {
                ids,
                ann: Annotation::FactPretrain { subj, obj, label: ex.relation },
            }])
        }
        MarkedExample::DepPretrain(ex) => {
            // No specials: head classes refer to 1-based raw positions.
            let mut ids = ids_of(vocab, &ex.tokens);
            let mut heads: Vec<i64> = ex.heads.iter().map(|&h| h as i64).collect();
            if ids.len() > max_len {
                ids.truncate(max_len);
                heads.truncate(max_len);
                // heads pointing past the truncation are unpredictable
                for h in heads.iter_mut() {
                    if *h as usize > max_len {
                        *h = -1;
                    }
                }
            }
            Ok(vec![EncodedExample {
                ids,
                ann: Annotation::DepPretrain { heads },
            }])
        }
        MarkedExample::Typing(ex) => {
            let (s, e) = ex.span;
            if s >= e || e > ex.tokens.len() {
                return Err(Error::Annotation(format!(
                    "typing span [{s}, {e}) out of bounds"
                )));
            }
            let mut ids = vec![BOS];
            ids.extend(ids_of(vocab, &ex.tokens[..s]));
            let at_index = ids.len();
            ids.push(AT);
            ids.extend(ids_of(vocab, &ex.tokens[s..e]));
            ids.push(AT);
            ids.extend(ids_of(vocab, &ex.tokens[e..]));
            if at_index + (e - s) + 1 >= max_len {
                return Err(Error::Length(format!(
                    "entity markers would be truncated at max_len {max_len}"
                )));
            }
            ids.truncate(max_len);
            Ok(vec![EncodedExample {
                ids,
                ann: Annotation::Typing { at_index, labels: ex.labels.clone() },
            }])
        }
        MarkedExample::RelationFt { tokens, subj, obj, label } => {
            if subj.0 >= subj.1 || subj.1 > tokens.len() || obj.0 >= obj.1 || obj.1 > tokens.len() {
                return Err(Error::Annotation("relation spans out of bounds".into()));
            }
            // wrap the first entity in '@' and the second in '#', in text order
            let (first, second, first_is_subj) = if subj.0 <= obj.0 {
                (subj, obj, true)
            } else {
                (obj, subj, false)
            };
            let (m1, m2) = if first_is_subj { (AT, HASH) } else { (HASH, AT) };
            let mut ids = vec![BOS];
            ids.extend(ids_of(vocab, &tokens[..first.0]));
            let first_marker = ids.len();
            ids.push(m1);
            ids.extend(ids_of(vocab, &tokens[first.0..first.1]));
            ids.push(m1);
            ids.extend(ids_of(vocab, &tokens[first.1..second.0]));
            let second_marker = ids.len();
            ids.push(m2);
            ids.extend(ids_of(vocab, &tokens[second.0..second.1]));
            ids.push(m2);
            ids.extend(ids_of(vocab, &tokens[second.1..]));
            let (at_index, hash_index) = if first_is_subj {
                (first_marker, second_marker)
            } else {
                (second_marker, first_marker)
            };
            if second_marker + (second.1 - second.0) + 1 >= max_len {
                return Err(Error::Length(format!(
                    "entity markers would be truncated at max_len {max_len}"
                )));
            }
            ids.truncate(max_len);
            Ok(vec![EncodedExample {
                ids,
                ann: Annotation::RelationFt { at_index, hash_index, label: *label },
            }])
        }
        MarkedExample::SpanQa { question, paragraph, answer } => {
            // <SEP> question </SEP> paragraph </SEP>
            let mut ids = vec![SEP];
            ids.extend(ids_of(vocab, question));
            ids.push(SEP);
            let para_start = ids.len();
            ids.extend(ids_of(vocab, paragraph));
            let para_end = ids.len();
            ids.push(SEP);
            if answer.0 >= answer.1 || answer.1 > paragraph.len() {
                return Err(Error::Annotation(format!(
                    "answer span {answer:?} outside the paragraph"
                )));
            }
            let ans = (para_start + answer.0, para_start + answer.1);
            if ans.1 > max_len {
                return Err(Error::Length(format!(
                    "answer span ends at {} but max_len is {max_len}",
                    ans.1
                )));
            }
            ids.truncate(max_len);
            let para_end = para_end.min(max_len);
            Ok(vec![EncodedExample {
                ids,
                ann: Annotation::SpanQa { answer: ans, paragraph: (para_start, para_end) },
            }])
        }
        MarkedExample::MultiChoice { context, question, answers, gold } => {
            if answers.len() < 2 {
                return Err(Error::Argument(format!(
                    "multiple choice needs >= 2 candidates, got {}",
                    answers.len()
                )));
            }
            if *gold >= answers.len() {
                return Err(Error::Annotation(format!(
                    "gold choice {gold} out of range for {} candidates",
                    answers.len()
                )));
            }
            let mut rows = Vec::with_capacity(answers.len());
            for answer in answers.iter() {
                // <SEP> context </SEP> question </SEP> answer </SEP>
                let mut ids = vec![SEP];
                ids.extend(ids_of(vocab, context));
                ids.push(SEP);
                ids.extend(ids_of(vocab, question));
                ids.push(SEP);
                ids.extend(ids_of(vocab, answer));
                ids.push(SEP);
                ids.truncate(max_len);
                rows.push(EncodedExample {
                    ids,
                    ann: Annotation::MultiChoice { gold: *gold, n_choices: answers.len() },
                });
            }
            Ok(rows)
        }
    }
}

/// Encode a cloze record: exactly one `[MASK]` becomes the mask id.
pub fn encode_cloze(
    record: &ClozeRecord,
    relation_id: usize,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedExample> {
    let words: Vec<&str> = record.text.split_whitespace().collect();
    let mask_positions: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| **w == "[MASK]")
        .map(|(i, _)| i)
        .collect();
    if mask_positions.len() != 1 {
        return Err(Error::Query(format!(
            "query must contain exactly one [MASK], found {}",
            mask_positions.len()
        )));
    }
    let gold = vocab.id_exact(&record.answer).ok_or_else(|| {
        Error::Query(format!("answer {:?} not in vocabulary", record.answer))
    })?;
    let mut ids: Vec<usize> = words
        .iter()
        .map(|w| {
            if *w == "[MASK]" {
                MASK
            } else {
                vocab.id_of_text_token(w)
            }
        })
        .collect();
    let mask_index = mask_positions[0];
    if mask_index >= max_len {
        return Err(Error::Length(format!(
            "mask at {mask_index} would be truncated at max_len {max_len}"
        )));
    }
    ids.truncate(max_len);
    Ok(EncodedExample {
        ids,
        ann: Annotation::Cloze { mask_index, gold, relation: relation_id },
    })
}

/// Token grid with padding mask: the unit every model forward consumes.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// Row-major `[b, l]` token ids; pad positions carry the pad id.
    pub ids: Vec<usize>,
    pub b: usize,
    pub l: usize,
    /// 1.0 at real positions, 0.0 at padding.
    pub pad_mask: Vec<f64>,
    pub anns: Vec<Annotation>,
}

/// Pad a set of rows to their common length.
pub fn make_batch(examples: &[EncodedExample]) -> Result<EncodedBatch> {
    if examples.is_empty() {
        return Err(Error::Argument("make_batch: empty batch".into()));
    }
    let b = examples.len();
    let l = examples.iter().map(|e| e.ids.len()).max().unwrap().max(1);
    let mut ids = vec![PAD; b * l];
    let mut pad_mask = vec![0.0; b * l];
    for (r, ex) in examples.iter().enumerate() {
        for (c, &id) in ex.ids.iter().enumerate() {
            ids[r * l + c] = id;
            pad_mask[r * l + c] = 1.0;
        }
    }
    Ok(EncodedBatch {
        ids,
        b,
        l,
        pad_mask,
        anns: examples.iter().map(|e| e.ann.clone()).collect(),
    })
}

// ── splits ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Deterministic 80/10/10 split by hash of the example index.
pub fn split_of(index: usize) -> Split {
    match splitmix64(index as u64) % 10 {
        8 => Split::Dev,
        9 => Split::Test,
        _ => Split::Train,
    }
}

/// Index lists for (train, dev, test).
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        match split_of(i) {
            Split::Train => train.push(i),
            Split::Dev => dev.push(i),
            Split::Test => test.push(i),
        }
    }
    (train, dev, test)
}
