//! Turning raw detector output into a usable scene graph.
//!
//! The pipeline runs in a fixed order: confidence threshold, predicate
//! selection among surviving pairs, duplicate removal, size cap, and the
//! two-object minimum.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::{LabelSpace, ObjectNode, RelationEdge, SceneGraph};

/// Predicate scores for one ordered object pair, as emitted by a detector.
/// Scores are not assumed to be normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub src: usize,
    pub dst: usize,
    pub scores: BTreeMap<String, f64>,
}

/// Outcome of the two-object check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Acceptance {
    Accept,
    Reject { objects: usize },
}

impl Acceptance {
    pub fn is_accept(&self) -> bool {
        matches!(self, Acceptance::Accept)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Postprocessed {
    Accepted(SceneGraph),
    Rejected { reason: String },
}

impl Postprocessed {
    pub fn accepted(self) -> Option<SceneGraph> {
        match self {
            Postprocessed::Accepted(g) => Some(g),
            Postprocessed::Rejected { .. } => None,
        }
    }
}

/// Keeps the highest-scoring predicate of every pair. Exact ties go to the
/// predicate listed first in the label space.
pub fn select_relationships(pairs: &[PairScores], labels: &LabelSpace) -> Result<Vec<RelationEdge>> {
    pairs
        .iter()
        .map(|p| {
            if p.src == p.dst {
                return Err(Error::Validation(format!("pair scores for self-pair {}", p.src)));
            }
            let mut best: Option<(usize, &str, f64)> = None;
            for (pred, &score) in &p.scores {
                let idx = labels.predicate_index(pred)?;
                let better = match best {
                    None => true,
                    Some((bi, _, bs)) => score > bs || (score == bs && idx < bi),
                };
                if better {
                    best = Some((idx, pred, score));
                }
            }
            let (_, pred, score) = best.ok_or_else(|| {
                Error::Validation(format!("empty predicate scores for pair {}->{}", p.src, p.dst))
            })?;
            Ok(RelationEdge::new(p.src, p.dst, pred, score))
        })
        .collect()
}

/// Drops nodes below `threshold` and every edge touching them.
pub fn prune_by_confidence(g: &SceneGraph, threshold: f64) -> SceneGraph {
    let nodes: Vec<ObjectNode> = g.nodes.iter().filter(|n| n.confidence >= threshold).cloned().collect();
    retain_nodes(g, nodes)
}

fn retain_nodes(g: &SceneGraph, nodes: Vec<ObjectNode>) -> SceneGraph {
    let keep: std::collections::HashSet<usize> = nodes.iter().map(|n| n.id).collect();
    let edges = g
        .edges
        .iter()
        .filter(|e| keep.contains(&e.src) && keep.contains(&e.dst))
        .cloned()
        .collect();
    SceneGraph {
        nodes,
        edges,
        image_id: g.image_id,
    }
}

/// Merges nodes with identical label and bounding box, then identical
/// `(src, dst, predicate)` relationships. The most confident instance of each
/// group survives (first occurrence on ties). Nodes without a box are never
/// considered duplicates.
pub fn dedup(g: &SceneGraph) -> SceneGraph {
    let mut group_of: HashMap<(&str, [u64; 4]), usize> = HashMap::new();
    // survivor index (into g.nodes) per group
    let mut survivors: Vec<usize> = Vec::new();
    let mut redirect: HashMap<usize, usize> = HashMap::new();
    let mut node_group = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        let group = match n.bbox {
            Some(b) => *group_of.entry((n.label.as_str(), b.key())).or_insert_with(|| {
                survivors.push(i);
                survivors.len() - 1
            }),
            None => {
                survivors.push(i);
                survivors.len() - 1
            }
        };
        if g.nodes[survivors[group]].confidence < n.confidence {
            survivors[group] = i;
        }
        node_group.push(group);
    }
    for (i, n) in g.nodes.iter().enumerate() {
        redirect.insert(n.id, g.nodes[survivors[node_group[i]]].id);
    }
    let mut kept: Vec<usize> = survivors.clone();
    kept.sort_unstable();
    let nodes: Vec<ObjectNode> = kept.iter().map(|&i| g.nodes[i].clone()).collect();

    let mut edge_slot: HashMap<(usize, usize, &str), usize> = HashMap::new();
    let mut edges: Vec<RelationEdge> = Vec::new();
    for e in &g.edges {
        let (s, d) = (redirect[&e.src], redirect[&e.dst]);
        if s == d {
            continue;
        }
        match edge_slot.get(&(s, d, e.predicate.as_str())) {
            Some(&k) => {
                if edges[k].confidence < e.confidence {
                    edges[k].confidence = e.confidence;
                }
            }
            None => {
                edge_slot.insert((s, d, e.predicate.as_str()), edges.len());
                edges.push(RelationEdge::new(s, d, e.predicate.clone(), e.confidence));
            }
        }
    }
    SceneGraph {
        nodes,
        edges,
        image_id: g.image_id,
    }
}

/// Removes the least confident nodes (higher id first on ties) until at most
/// `max_nodes` remain.
pub fn cap_size(g: &SceneGraph, max_nodes: usize) -> Result<SceneGraph> {
    if max_nodes < 2 {
        return Err(Error::Config(format!("graph size cap must be at least 2, got {max_nodes}")));
    }
    if g.nodes.len() <= max_nodes {
        return Ok(g.clone());
    }
    let mut order: Vec<usize> = (0..g.nodes.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, nb) = (&g.nodes[a], &g.nodes[b]);
        nb.confidence.total_cmp(&na.confidence).then(na.id.cmp(&nb.id))
    });
    let mut keep: Vec<usize> = order[..max_nodes].to_vec();
    keep.sort_unstable();
    Ok(retain_nodes(g, keep.into_iter().map(|i| g.nodes[i].clone()).collect()))
}

/// Graphs with fewer than two objects cannot be captioned.
pub fn validate_min_nodes(g: &SceneGraph) -> Acceptance {
    if g.object_count() < 2 {
        Acceptance::Reject {
            objects: g.object_count(),
        }
    } else {
        Acceptance::Accept
    }
}

/// Full detector-output pipeline.
pub fn postprocess_detection(
    nodes: &[ObjectNode],
    pairs: &[PairScores],
    threshold: f64,
    max_nodes: usize,
    labels: &LabelSpace,
) -> Result<Postprocessed> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    for n in nodes {
        labels.object_index(&n.label)?;
    }
    let raw = SceneGraph::new(nodes.to_vec(), Vec::new())?;
    let mut g = prune_by_confidence(&raw, threshold);
    let alive: std::collections::HashSet<usize> = g.nodes.iter().map(|n| n.id).collect();
    for p in pairs {
        if raw.node(p.src).is_none() || raw.node(p.dst).is_none() {
            return Err(Error::Validation(format!("pair {}->{} references a missing object", p.src, p.dst)));
        }
    }
    let surviving: Vec<PairScores> = pairs
        .iter()
        .filter(|p| alive.contains(&p.src) && alive.contains(&p.dst))
        .cloned()
        .collect();
    g.edges = select_relationships(&surviving, labels)?;
    let g = cap_size(&dedup(&g), max_nodes)?;
    Ok(match validate_min_nodes(&g) {
        Acceptance::Accept => Postprocessed::Accepted(g),
        Acceptance::Reject { objects } => Postprocessed::Rejected {
            reason: format!("only {objects} object node(s) after post-processing"),
        },
    })
}

/// Relation-form graph through the same stages; each edge acts as a pair
/// whose only candidate predicate is its own.
pub fn postprocess_graph(g: &SceneGraph, threshold: f64, max_nodes: usize, labels: &LabelSpace) -> Result<Postprocessed> {
    let pairs: Vec<PairScores> = g
        .edges
        .iter()
        .map(|e| PairScores {
            src: e.src,
            dst: e.dst,
            scores: BTreeMap::from([(e.predicate.clone(), e.confidence)]),
        })
        .collect();
    let mut out = postprocess_detection(&g.nodes, &pairs, threshold, max_nodes, labels)?;
    if let Postprocessed::Accepted(ref mut sg) = out {
        sg.image_id = g.image_id;
    }
    Ok(out)
}
