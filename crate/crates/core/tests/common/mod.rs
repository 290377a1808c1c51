#![allow(dead_code)]

pub mod metric_fixtures;

use std::collections::BTreeSet;

use graphcap::tape::softmax;
use graphcap::encoder::{attention_coefficients, GatLayer};
use graphcap::model::{DecodeConfig, DecodeMode, GraphInput, ModelConfig};
use graphcap::postprocess::{cap_size, dedup, postprocess_graph, prune_by_confidence, validate_min_nodes};
use graphcap::scene_graph::{reify, BoundingBox, LabelSpace, NodeKind, ObjectNode, RelationEdge, SceneGraph};
use graphcap::{toy, CaptionModel, Tape, Tensor, Variant};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random valid scene graph over the toy label space. Labels, boxes and
/// confidences come from small pools so duplicates and ties are common.
pub fn random_graph(rng: &mut ChaCha8Rng) -> SceneGraph {
    let n = rng.gen_range(0..=9);
    let mut ids: Vec<usize> = (0..40).collect();
    ids.shuffle(rng);
    let boxes = [
        BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        BoundingBox::new(5.0, 5.0, 20.0, 8.0).unwrap(),
        BoundingBox::new(1.5, 2.5, 3.0, 4.0).unwrap(),
    ];
    let conf = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.3) {
            rng.gen_range(0..=10) as f64 / 10.0
        } else {
            rng.gen::<f64>()
        }
    };
    let nodes: Vec<ObjectNode> = (0..n)
        .map(|k| {
            let label = toy::OBJECTS[rng.gen_range(0..3)];
            let node = ObjectNode::new(ids[k], label, conf(rng));
            if rng.gen_bool(0.8) {
                node.with_bbox(boxes[rng.gen_range(0..boxes.len())])
            } else {
                node
            }
        })
        .collect();
    let mut edges = Vec::new();
    if n >= 2 {
        for _ in 0..rng.gen_range(0..=12) {
            let s = rng.gen_range(0..n);
            let mut d = rng.gen_range(0..n - 1);
            if d >= s {
                d += 1;
            }
            let p = toy::PREDICATES[rng.gen_range(0..2)];
            edges.push(RelationEdge::new(ids[s], ids[d], p, conf(rng)));
        }
    }
    SceneGraph::new(nodes, edges).unwrap()
}

fn node_ids(g: &SceneGraph) -> BTreeSet<usize> {
    g.nodes.iter().map(|n| n.id).collect()
}

fn edge_keys(g: &SceneGraph) -> BTreeSet<(usize, usize, String)> {
    g.edges.iter().map(|e| (e.src, e.dst, e.predicate.clone())).collect()
}

/// Reification and post-processing properties of one graph; returns a
/// description of every violation.
pub fn graph_property_violations(g: &SceneGraph, labels: &LabelSpace) -> Vec<String> {
    let mut bad = Vec::new();

    let r = reify(g).unwrap();
    if r.len() != g.nodes.len() + g.edges.len() {
        bad.push(format!("|V'| = {} but |V| + |E| = {}", r.len(), g.nodes.len() + g.edges.len()));
    }
    for i in 0..r.len() {
        if !r.is_adjacent(i, i) {
            bad.push(format!("node {i} lacks its self-loop"));
        }
        for &j in r.neighbors(i) {
            if !r.is_adjacent(j, i) {
                bad.push(format!("adjacency {i}-{j} is not symmetric"));
            }
        }
        if r.nodes()[i].kind == NodeKind::Relation {
            let objects = r
                .neighbors(i)
                .iter()
                .filter(|&&j| j != i && r.nodes()[j].kind == NodeKind::Object)
                .count();
            let others = r.neighbors(i).iter().filter(|&&j| j != i).count();
            if objects != 2 || others != 2 {
                bad.push(format!("relation node {i} has object-degree {objects}, degree {others}"));
            }
        }
    }

    let thresholds = [0.0, 0.1, 0.25, 0.4, 0.5, 0.75, 0.9, 1.0];
    let pruned: Vec<SceneGraph> = thresholds.iter().map(|&t| prune_by_confidence(g, t)).collect();
    for (t, p) in thresholds.iter().zip(&pruned) {
        if p.nodes.iter().any(|n| n.confidence < *t) {
            bad.push(format!("prune at {t} kept a node below threshold"));
        }
        let expect = g.nodes.iter().filter(|n| n.confidence >= *t).count();
        if p.nodes.len() != expect {
            bad.push(format!("prune at {t} kept {} nodes, expected {expect}", p.nodes.len()));
        }
        let ids = node_ids(p);
        if p.edges.iter().any(|e| !ids.contains(&e.src) || !ids.contains(&e.dst)) {
            bad.push(format!("prune at {t} left a dangling edge"));
        }
    }
    for w in pruned.windows(2) {
        if !node_ids(&w[1]).is_subset(&node_ids(&w[0])) || !edge_keys(&w[1]).is_subset(&edge_keys(&w[0])) {
            bad.push("pruning at a higher threshold is not nested".into());
        }
        if w[1].nodes.len() > w[0].nodes.len() || w[1].edges.len() > w[0].edges.len() {
            bad.push("pruning is not monotone".into());
        }
    }

    let once = dedup(g);
    if dedup(&once) != once {
        bad.push("dedup is not idempotent".into());
    }
    if once.validate().is_err() {
        bad.push("dedup produced an invalid graph".into());
    }
    if !node_ids(&once).is_subset(&node_ids(g)) {
        bad.push("dedup invented a node".into());
    }

    for k in 2..=6 {
        let capped = cap_size(g, k).unwrap();
        if capped.nodes.len() > k {
            bad.push(format!("cap {k} kept {} nodes", capped.nodes.len()));
        }
        if capped.nodes.len() != g.nodes.len().min(k) {
            bad.push(format!("cap {k} dropped too much"));
        }
        let kept = node_ids(&capped);
        let min_kept = capped.nodes.iter().map(|n| n.confidence).fold(f64::INFINITY, f64::min);
        if g.nodes.iter().any(|n| !kept.contains(&n.id) && n.confidence > min_kept) {
            bad.push(format!("cap {k} dropped a more confident node"));
        }
    }
    if cap_size(g, 1).is_ok() {
        bad.push("cap below 2 accepted".into());
    }

    let accepted = validate_min_nodes(g).is_accept();
    if accepted != (g.nodes.len() >= 2) {
        bad.push(format!("min-node check says {accepted} for {} objects", g.nodes.len()));
    }
    for t in [0.0, 0.3, 0.6] {
        for max_nodes in [2, 3, 5] {
            let out = postprocess_graph(g, t, max_nodes, labels).unwrap();
            let unlinked = SceneGraph::new(g.nodes.clone(), Vec::new()).unwrap();
            let survivors = cap_size(&dedup(&prune_by_confidence(&unlinked, t)), max_nodes)
                .unwrap()
                .nodes
                .len();
            match out.accepted() {
                Some(pg) => {
                    if pg.nodes.len() < 2 || pg.nodes.len() > max_nodes || survivors < 2 {
                        bad.push(format!("accepted a graph with {} nodes", pg.nodes.len()));
                    }
                }
                None => {
                    if survivors >= 2 {
                        bad.push(format!("rejected a graph with {survivors} surviving nodes"));
                    }
                }
            }
        }
    }
    bad
}

/// A random tiny model and graph; returns every row-sum violation of the GAT
/// coefficients, decoder attention weights and output distributions.
pub fn normalization_violations(seed: u64) -> Vec<String> {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = toy::labels();
    let variant = Variant::ALL[rng.gen_range(0..4)];
    let d = [4, 6, 8][rng.gen_range(0..3)];
    let h = [4, 8, 12][rng.gen_range(0..3)];
    let vocab = rng.gen_range(8..30);
    let mut cfg = ModelConfig::small(variant, vocab, labels.joint_size(), d, h);
    cfg.attn_dim = rng.gen_range(2..10);
    cfg.gat_layers = rng.gen_range(1..=3);
    let model = CaptionModel::new(cfg, seed).unwrap();

    let graph = loop {
        let g = random_graph(&mut rng);
        if g.nodes.len() >= 2 {
            break g;
        }
    };
    let reified = reify(&graph).unwrap();
    let input = GraphInput::new(reified.clone(), &labels).unwrap();
    let n = reified.len();
    let mut bad = Vec::new();

    // GAT coefficients from random layer weights, chained through sigmoid.
    let mut tape = Tape::new(seed);
    let mut v = tape.leaf(random_tensor(&mut rng, n, d, 1.0), false);
    for layer in 0..3 {
        let gat = GatLayer {
            w: tape.leaf(random_tensor(&mut rng, d, d, 1.0), false),
            a: tape.leaf(random_tensor(&mut rng, 1, 2 * d, 1.5), false),
        };
        let alpha = attention_coefficients(&mut tape, v, &gat, &reified, 0.2).unwrap();
        let a = tape.value(alpha).clone();
        for i in 0..n {
            let row = a.row_slice(i);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > TOL {
                bad.push(format!("GAT layer {layer} row {i} sums to {s}"));
            }
            for (j, &x) in row.iter().enumerate() {
                if !reified.is_adjacent(i, j) && x != 0.0 {
                    bad.push(format!("GAT layer {layer} weight outside the neighborhood at ({i}, {j})"));
                }
                if x < 0.0 {
                    bad.push(format!("negative GAT weight at ({i}, {j})"));
                }
            }
        }
        let wh = tape.matmul_t(v, gat.w).unwrap();
        let mixed = tape.matmul(alpha, wh).unwrap();
        v = tape.sigmoid(mixed);
    }

    for mode in [DecodeMode::Greedy, DecodeMode::Sample { temperature: 0.7 }] {
        let trace = model
            .decode_traced(&input, &DecodeConfig { max_len: 8, mode }, seed)
            .unwrap();
        for (t, dist) in trace.distributions.iter().enumerate() {
            let s: f64 = dist.iter().sum();
            if (s - 1.0).abs() > TOL || dist.len() != vocab {
                bad.push(format!("output distribution at step {t} sums to {s}"));
            }
        }
        if variant.attention() != !trace.attention.is_empty() {
            bad.push("attention trace presence does not match the variant".into());
        }
        for (t, w) in trace.attention.iter().enumerate() {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > TOL || w.len() != n {
                bad.push(format!("decoder attention at step {t} sums to {s} over {} nodes", w.len()));
            }
        }
    }

    let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-30.0..30.0)).collect();
    let s: f64 = softmax(&logits).iter().sum();
    if (s - 1.0).abs() > TOL {
        bad.push(format!("softmax of wide logits sums to {s}"));
    }
    bad
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}
