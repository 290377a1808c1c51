//! Scene-graph data model, label spaces and reification.
//!
//! Reification turns every predicate edge `(s, p, o)` into a node of its own,
//! linked by unlabeled undirected connections `s - p` and `p - o`. Every node
//! of the reified graph is its own neighbor.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("degenerate bounding box {self:?}")));
        }
        Ok(())
    }

    /// Bit-level identity, used for duplicate detection.
    pub(crate) fn key(&self) -> [u64; 4] {
        [self.x.to_bits(), self.y.to_bits(), self.w.to_bits(), self.h.to_bits()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectNode {
    pub id: usize,
    pub label: String,
    pub confidence: f64,
    pub bbox: Option<BoundingBox>,
}

impl ObjectNode {
    pub fn new(id: usize, label: impl Into<String>, confidence: f64) -> Self {
        ObjectNode {
            id,
            label: label.into(),
            confidence,
            bbox: None,
        }
    }

    pub fn with_bbox(mut self, bbox: BoundingBox) -> Self {
        self.bbox = Some(bbox);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationEdge {
    pub src: usize,
    pub dst: usize,
    pub predicate: String,
    pub confidence: f64,
}

impl RelationEdge {
    pub fn new(src: usize, dst: usize, predicate: impl Into<String>, confidence: f64) -> Self {
        RelationEdge {
            src,
            dst,
            predicate: predicate.into(),
            confidence,
        }
    }
}

/// A directed, labeled graph of detected objects and their relationships.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGraph {
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationEdge>,
    pub image_id: Option<u64>,
}

impl SceneGraph {
    /// Builds and validates a graph.
    pub fn new(nodes: Vec<ObjectNode>, edges: Vec<RelationEdge>) -> Result<Self> {
        let g = SceneGraph {
            nodes,
            edges,
            image_id: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_image_id(mut self, id: u64) -> Self {
        self.image_id = Some(id);
        self
    }

    /// Structural checks: unique node ids, resolvable non-loop edges,
    /// confidences in `[0, 1]`, non-degenerate boxes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(Error::Validation(format!("duplicate node id {}", n.id)));
            }
            check_confidence(n.confidence, || format!("node {}", n.id))?;
            if let Some(b) = &n.bbox {
                b.validate()?;
            }
        }
        for e in &self.edges {
            for end in [e.src, e.dst] {
                if !seen.contains(&end) {
                    return Err(Error::Validation(format!(
                        "edge {}->{} ({}) references missing node {end}",
                        e.src, e.dst, e.predicate
                    )));
                }
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!("self-loop edge on node {}", e.src)));
            }
            check_confidence(e.confidence, || format!("edge {}->{}", e.src, e.dst))?;
        }
        Ok(())
    }

    /// Checks every label against `labels`.
    pub fn validate_labels(&self, labels: &LabelSpace) -> Result<()> {
        for n in &self.nodes {
            labels.object_index(&n.label)?;
        }
        for e in &self.edges {
            labels.predicate_index(&e.predicate)?;
        }
        Ok(())
    }

    pub fn node(&self, id: usize) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn object_count(&self) -> usize {
        self.nodes.len()
    }
}

pub(crate) fn check_confidence(c: f64, what: impl FnOnce() -> String) -> Result<()> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Validation(format!("{} confidence {c} outside [0, 1]", what())));
    }
    Ok(())
}

/// Ordered object and predicate vocabularies with stable indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    objects: Vec<String>,
    predicates: Vec<String>,
    object_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(objects: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        let object_index = index_of(&objects, "object")?;
        let predicate_index = index_of(&predicates, "predicate")?;
        Ok(LabelSpace {
            objects,
            predicates,
            object_index,
            predicate_index,
        })
    }

    /// Reads two plain-text files with one label per line.
    pub fn load(objects: &Path, predicates: &Path) -> Result<Self> {
        LabelSpace::new(read_label_file(objects)?, read_label_file(predicates)?)
    }

    pub fn save(&self, objects: &Path, predicates: &Path) -> Result<()> {
        for (path, labels) in [(objects, &self.objects), (predicates, &self.predicates)] {
            let mut text = labels.join("\n");
            text.push('\n');
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn object_index(&self, label: &str) -> Result<usize> {
        self.object_index
            .get(label)
            .copied()
            .ok_or_else(|| Error::LabelSpace(format!("unknown object label {label:?}")))
    }

    pub fn predicate_index(&self, label: &str) -> Result<usize> {
        self.predicate_index
            .get(label)
            .copied()
            .ok_or_else(|| Error::LabelSpace(format!("unknown predicate {label:?}")))
    }

    /// Row in the joint node-label table: objects first, then predicates.
    pub fn node_label_index(&self, kind: NodeKind, label: &str) -> Result<usize> {
        let idx = match kind {
            NodeKind::Object => self.object_index.get(label).copied(),
            NodeKind::Relation => self.predicate_index.get(label).map(|i| i + self.objects.len()),
        };
        idx.ok_or_else(|| Error::Vocabulary(format!("no node embedding for {kind:?} label {label:?}")))
    }

    pub fn joint_size(&self) -> usize {
        self.objects.len() + self.predicates.len()
    }
}

fn index_of(labels: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if map.insert(l.clone(), i).is_some() {
            return Err(Error::LabelSpace(format!("duplicate {what} label {l:?}")));
        }
    }
    if labels.is_empty() {
        return Err(Error::LabelSpace(format!("empty {what} label list")));
    }
    Ok(map)
}

fn read_label_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Object,
    Relation,
}

/// Where a reified node came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Object node with this id.
    Object(usize),
    /// Relation node created from this edge index.
    Relation(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReifiedNode {
    pub label: String,
    pub kind: NodeKind,
    pub source: Provenance,
}

/// Graph in which every predicate is a node; adjacency is undirected,
/// unlabeled and includes self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct ReifiedGraph {
    nodes: Vec<ReifiedNode>,
    neighbors: Vec<Vec<usize>>,
}

impl ReifiedGraph {
    pub fn nodes(&self) -> &[ReifiedNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sorted neighborhood of node `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Row-major `n × n` neighborhood mask.
    pub fn adjacency_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut mask = vec![false; n * n];
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                mask[i * n + j] = true;
            }
        }
        mask
    }

    /// The same graph with nodes reordered: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut inverse = vec![usize::MAX; n];
        for (k, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Validation("not a permutation".into()));
            }
            inverse[old] = k;
        }
        if perm.len() != n {
            return Err(Error::Validation("not a permutation".into()));
        }
        let nodes = perm.iter().map(|&old| self.nodes[old].clone()).collect();
        let neighbors = perm
            .iter()
            .map(|&old| {
                let mut ns: Vec<usize> = self.neighbors[old].iter().map(|&j| inverse[j]).collect();
                ns.sort_unstable();
                ns
            })
            .collect();
        Ok(ReifiedGraph { nodes, neighbors })
    }

    pub fn object_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Object).count()
    }
}

/// `G → G′`: objects keep their order, then one relation node per edge in
/// edge order.
pub fn reify(g: &SceneGraph) -> Result<ReifiedGraph> {
    g.validate()?;
    let position: HashMap<usize, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let total = g.nodes.len() + g.edges.len();
    let mut nodes = Vec::with_capacity(total);
    let mut adj: Vec<BTreeSet<usize>> = (0..total).map(|i| BTreeSet::from([i])).collect();
    for n in &g.nodes {
        nodes.push(ReifiedNode {
            label: n.label.clone(),
            kind: NodeKind::Object,
            source: Provenance::Object(n.id),
        });
    }
    for (k, e) in g.edges.iter().enumerate() {
        let r = g.nodes.len() + k;
        nodes.push(ReifiedNode {
            label: e.predicate.clone(),
            kind: NodeKind::Relation,
            source: Provenance::Relation(k),
        });
        for end in [position[&e.src], position[&e.dst]] {
            adj[end].insert(r);
            adj[r].insert(end);
        }
    }
    Ok(ReifiedGraph {
        nodes,
        neighbors: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}
