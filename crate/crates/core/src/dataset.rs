//! Dataset records, tokenization, vocabularies and split statistics.
//!
//! A split is a UTF-8 file with one JSON object per line:
//!
//! ```text
//! {"schema":1,"image_id":7,
//!  "objects":[{"id":0,"label":"clock","confidence":1.0,"bbox":[10,4,30,30]}, ...],
//!  "relations":[{"src":0,"dst":1,"predicate":"in","confidence":1.0}],
//!  "captions":["a clock tower is in the gray sky."]}
//! ```
//!
//! Detector output replaces `relations` with
//! `"relation_scores":[{"src":0,"dst":1,"scores":{"in":0.7,"on":0.2}}]`.
//! Missing confidences default to 1.0.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::PairScores;
use crate::scene_graph::{check_confidence, BoundingBox, LabelSpace, ObjectNode, RelationEdge, SceneGraph};

pub const SCHEMA_VERSION: u32 = 1;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases, splits on whitespace, splits off punctuation and splits
/// contractions before the apostrophe (`don't` → `don`, `'t`).
pub fn tokenize(caption: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in caption.to_lowercase().split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut current = String::new();
        for (k, &ch) in chars.iter().enumerate() {
            if PUNCT.contains(&ch) {
                flush(&mut current, &mut tokens);
                tokens.push(ch.to_string());
            } else if ch == '\'' {
                let next_letter = chars.get(k + 1).is_some_and(|c| c.is_alphabetic());
                let prev_letter = current.chars().last().is_some_and(|c| c.is_alphabetic());
                flush(&mut current, &mut tokens);
                if next_letter && (prev_letter || k == 0 || chars[k - 1] == '\'' || PUNCT.contains(&chars[k - 1]))
                {
                    current.push('\'');
                } else {
                    tokens.push("'".to_string());
                }
            } else {
                current.push(ch);
            }
        }
        flush(&mut current, &mut tokens);
    }
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Token list with reserved ids `0 = <pad>`, `1 = <start>`, `2 = <end>`,
/// `3 = <unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Format(format!("vocabulary must start with reserved token {r} at {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Every distinct token of the tokenized corpus, most frequent first,
    /// ties in lexicographic order. No frequency cutoff.
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(t, _)| t))
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Strict encoding; unknown tokens are an error.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::Vocabulary(format!("token {:?} not in vocabulary", t.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub label: String,
    #[serde(default = "one")]
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub src: usize,
    pub dst: usize,
    pub predicate: String,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

/// One image: its objects, either gold relations or detector pair scores,
/// and its captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub schema: u32,
    pub image_id: u64,
    pub objects: Vec<ObjectRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<Vec<RelationRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_scores: Option<Vec<PairScores>>,
    #[serde(default)]
    pub captions: Vec<String>,
}

impl DatasetRecord {
    /// Gold-form record from a scene graph.
    pub fn from_graph(image_id: u64, g: &SceneGraph, captions: Vec<String>) -> Self {
        DatasetRecord {
            schema: SCHEMA_VERSION,
            image_id,
            objects: object_records(&g.nodes),
            relations: Some(
                g.edges
                    .iter()
                    .map(|e| RelationRecord {
                        src: e.src,
                        dst: e.dst,
                        predicate: e.predicate.clone(),
                        confidence: e.confidence,
                    })
                    .collect(),
            ),
            relation_scores: None,
            captions,
        }
    }

    /// Detector-form record.
    pub fn from_detections(image_id: u64, nodes: &[ObjectNode], pairs: Vec<PairScores>, captions: Vec<String>) -> Self {
        DatasetRecord {
            schema: SCHEMA_VERSION,
            image_id,
            objects: object_records(nodes),
            relations: None,
            relation_scores: Some(pairs),
            captions,
        }
    }

    pub fn is_detection(&self) -> bool {
        self.relation_scores.is_some()
    }

    pub fn object_nodes(&self) -> Result<Vec<ObjectNode>> {
        self.objects
            .iter()
            .map(|o| {
                let bbox = o.bbox.map(|[x, y, w, h]| BoundingBox::new(x, y, w, h)).transpose()?;
                Ok(ObjectNode {
                    id: o.id,
                    label: o.label.clone(),
                    confidence: o.confidence,
                    bbox,
                })
            })
            .collect()
    }

    /// The gold scene graph; detector-form records have none.
    pub fn gold_graph(&self) -> Result<SceneGraph> {
        let rels = self
            .relations
            .as_ref()
            .ok_or_else(|| Error::Data(format!("record {} has no gold relations", self.image_id)))?;
        let edges = rels
            .iter()
            .map(|r| RelationEdge::new(r.src, r.dst, r.predicate.clone(), r.confidence))
            .collect();
        Ok(SceneGraph::new(self.object_nodes()?, edges)?.with_image_id(self.image_id))
    }

    pub fn tokenized_captions(&self) -> Vec<Vec<String>> {
        self.captions.iter().map(|c| tokenize(c)).collect()
    }

    /// Schema, structure and label checks.
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema {}", self.schema)));
        }
        match (&self.relations, &self.relation_scores) {
            (Some(_), Some(_)) => {
                return Err(Error::Format("record has both relations and relation_scores".into()))
            }
            (None, None) => {
                return Err(Error::Format("record has neither relations nor relation_scores".into()))
            }
            _ => {}
        }
        let nodes = self.object_nodes()?;
        for n in &nodes {
            labels.object_index(&n.label)?;
        }
        if self.relations.is_some() {
            let g = self.gold_graph()?;
            g.validate_labels(labels)?;
        } else {
            let g = SceneGraph::new(nodes, Vec::new())?;
            for p in self.relation_scores.as_deref().unwrap_or_default() {
                for end in [p.src, p.dst] {
                    if g.node(end).is_none() {
                        return Err(Error::Validation(format!(
                            "pair {}->{} references missing object {end}",
                            p.src, p.dst
                        )));
                    }
                }
                for (pred, &s) in &p.scores {
                    labels.predicate_index(pred)?;
                    if !(s >= 0.0 && s.is_finite()) {
                        return Err(Error::Validation(format!("negative score {s} for {pred}")));
                    }
                }
            }
        }
        for o in &self.objects {
            check_confidence(o.confidence, || format!("object {}", o.id))?;
        }
        Ok(())
    }
}

fn object_records(nodes: &[ObjectNode]) -> Vec<ObjectRecord> {
    nodes
        .iter()
        .map(|n| ObjectRecord {
            id: n.id,
            label: n.label.clone(),
            confidence: n.confidence,
            bbox: n.bbox.map(|b| [b.x, b.y, b.w, b.h]),
        })
        .collect()
}

/// Reads and validates a split. Errors name the offending line (1-based).
pub fn load_split(path: &Path, labels: &LabelSpace) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text, labels)
}

pub fn parse_split(text: &str, labels: &LabelSpace) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?;
        rec.validate(labels).map_err(|e| Error::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn serialize_split(records: &[DatasetRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_split(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    std::fs::write(path, serialize_split(records)).map_err(|e| Error::io(path, e))
}

/// One `(scene graph, caption)` training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub image_id: u64,
    pub graph: SceneGraph,
    pub caption: Vec<String>,
}

/// All captions of an image kept together as references.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGroup {
    pub image_id: u64,
    pub record: usize,
    pub references: Vec<Vec<String>>,
}

/// One sample per caption of every gold-form record.
pub fn make_training_pairs(records: &[DatasetRecord]) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for r in records {
        if r.captions.is_empty() {
            return Err(Error::Data(format!("training record {} has no captions", r.image_id)));
        }
        let g = r.gold_graph()?;
        for c in r.tokenized_captions() {
            pairs.push(TrainingPair {
                image_id: r.image_id,
                graph: g.clone(),
                caption: c,
            });
        }
    }
    Ok(pairs)
}

/// Evaluation mode: captions grouped per record.
pub fn reference_groups(records: &[DatasetRecord]) -> Result<Vec<ReferenceGroup>> {
    records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if r.captions.is_empty() {
                return Err(Error::Data(format!("evaluation record {} has no captions", r.image_id)));
            }
            Ok(ReferenceGroup {
                image_id: r.image_id,
                record: k,
                references: r.tokenized_captions(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetStats {
    pub records: usize,
    pub pairs: usize,
    pub mean_captions: f64,
    pub max_object_nodes: usize,
}

pub fn compute_stats(records: &[DatasetRecord]) -> DatasetStats {
    let pairs: usize = records.iter().map(|r| r.captions.len()).sum();
    DatasetStats {
        records: records.len(),
        pairs,
        mean_captions: if records.is_empty() {
            0.0
        } else {
            pairs as f64 / records.len() as f64
        },
        max_object_nodes: records.iter().map(|r| r.objects.len()).max().unwrap_or(0),
    }
}

impl DatasetStats {
    /// `key=value` lines under `prefix.`.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}.records={}", self.records);
        let _ = writeln!(s, "{prefix}.pairs={}", self.pairs);
        let _ = writeln!(s, "{prefix}.mean_captions={:.6}", self.mean_captions);
        let _ = writeln!(s, "{prefix}.max_object_nodes={}", self.max_object_nodes);
        s
    }
}
