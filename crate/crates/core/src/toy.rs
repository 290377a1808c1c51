//! Small synthetic corpora for demos and tests.
//!
//! Each image has two objects joined by one predicate and a single caption
//! `"a <subject> <predicate> a <object> ."`. No two images share the same
//! unordered set of labels, so even the mean-pooled base model can tell them
//! apart.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetRecord, ObjectRecord};
use crate::error::{Error, Result};
use crate::model::{GraphInput, Sample};
use crate::postprocess::PairScores;
use crate::scene_graph::{reify, LabelSpace, ObjectNode, RelationEdge, SceneGraph};

pub const OBJECTS: [&str; 12] = [
    "dog", "cat", "man", "woman", "table", "chair", "car", "tree", "horse", "bench", "boat", "kite",
];
pub const PREDICATES: [&str; 4] = ["on", "near", "under", "behind"];

pub fn labels() -> LabelSpace {
    LabelSpace::new(
        OBJECTS.iter().map(|s| s.to_string()).collect(),
        PREDICATES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("toy label space is valid")
}

/// `(subject, predicate, object)` triples with distinct unordered label sets.
pub fn triples(n: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let max = OBJECTS.len() * (OBJECTS.len() - 1) / 2 * PREDICATES.len();
    if n > max {
        return Err(Error::Config(format!("toy corpus holds at most {max} images, asked for {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.gen_range(0..OBJECTS.len());
        let o = rng.gen_range(0..OBJECTS.len());
        let p = rng.gen_range(0..PREDICATES.len());
        if s == o || !seen.insert((s.min(o), s.max(o), p)) {
            continue;
        }
        out.push((s, p, o));
    }
    Ok(out)
}

pub fn caption(s: usize, p: usize, o: usize) -> String {
    format!("a {} {} a {} .", OBJECTS[s], PREDICATES[p], OBJECTS[o])
}

/// `n` gold-form records with image ids `1..=n`.
pub fn corpus(n: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    triples(n, seed)?
        .into_iter()
        .enumerate()
        .map(|(k, (s, p, o))| {
            let g = SceneGraph::new(
                vec![ObjectNode::new(0, OBJECTS[s], 1.0), ObjectNode::new(1, OBJECTS[o], 1.0)],
                vec![RelationEdge::new(0, 1, PREDICATES[p], 1.0)],
            )?;
            Ok(DatasetRecord::from_graph(k as u64 + 1, &g, vec![caption(s, p, o)]))
        })
        .collect()
}

/// Detector-form copies of gold records for threshold tuning: the
/// annotated objects at `signal` confidence plus `noise_nodes` random
/// objects at `noise` confidence, each noise node linked to a signal node.
pub fn detection_fixture(
    gold: &[DatasetRecord],
    noise_nodes: usize,
    signal: f64,
    noise: f64,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gold.iter()
        .map(|r| {
            let g = r.gold_graph()?;
            let mut nodes: Vec<ObjectNode> = g
                .nodes
                .iter()
                .map(|n| ObjectNode::new(n.id, n.label.clone(), signal))
                .collect();
            let mut pairs: Vec<PairScores> = g
                .edges
                .iter()
                .map(|e| PairScores {
                    src: e.src,
                    dst: e.dst,
                    scores: BTreeMap::from([(e.predicate.clone(), 0.9)]),
                })
                .collect();
            let base = nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1);
            for k in 0..noise_nodes {
                let id = base + k;
                nodes.push(ObjectNode::new(id, *OBJECTS.choose(&mut rng).unwrap(), noise));
                let anchor = g.nodes[rng.gen_range(0..g.nodes.len())].id;
                let pred = *PREDICATES.choose(&mut rng).unwrap();
                pairs.push(PairScores {
                    src: id,
                    dst: anchor,
                    scores: BTreeMap::from([(pred.to_string(), 0.9)]),
                });
            }
            Ok(DatasetRecord::from_detections(r.image_id, &nodes, pairs, r.captions.clone()))
        })
        .collect()
}

/// Replaces the labels of `fraction` of all object nodes (chosen by a seeded
/// shuffle across the split) with labels drawn uniformly from the label space.
pub fn corrupt_labels(records: &[DatasetRecord], fraction: f64, labels: &LabelSpace, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| (0..rec.objects.len()).map(move |o| (r, o)))
        .collect();
    slots.shuffle(&mut rng);
    let k = (fraction * slots.len() as f64).round() as usize;
    let mut out = records.to_vec();
    for &(r, o) in &slots[..k.min(slots.len())] {
        let obj: &mut ObjectRecord = &mut out[r].objects[o];
        obj.label = labels.objects()[rng.gen_range(0..labels.objects().len())].clone();
    }
    out
}

/// Three distinct four-node graphs (three objects, one relation) with short
/// captions over a vocabulary of `vocab_size`, used by gradient checks.
pub fn gradcheck_samples(vocab_size: usize) -> Result<Vec<Sample>> {
    let labels = labels();
    let graphs = [
        (["dog", "table", "man"], (0, 1, "on")),
        (["car", "tree", "kite"], (2, 1, "behind")),
        (["horse", "bench", "woman"], (1, 2, "near")),
    ];
    let captions: [&[usize]; 3] = [&[4, 5, 6, 7], &[8, 9, 4], &[10, 11, 5, 12]];
    graphs
        .iter()
        .zip(captions)
        .map(|((objs, (s, d, p)), cap)| {
            let nodes = objs
                .iter()
                .enumerate()
                .map(|(i, l)| ObjectNode::new(i, *l, 1.0))
                .collect();
            let g = SceneGraph::new(nodes, vec![RelationEdge::new(*s, *d, *p, 1.0)])?;
            if let Some(&bad) = cap.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Config(format!("token {bad} does not fit a vocabulary of {vocab_size}")));
            }
            Ok(Sample {
                graph: GraphInput::new(reify(&g)?, &labels)?,
                tokens: cap.to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Vocabulary;

    #[test]
    fn corpus_is_unique_and_small() {
        let recs = corpus(200, 1).unwrap();
        let caps: Vec<&str> = recs.iter().map(|r| r.captions[0].as_str()).collect();
        let v = Vocabulary::build(&caps).unwrap();
        assert!(v.len() <= 40);
        let mut keys = HashSet::new();
        for r in &recs {
            let g = r.gold_graph().unwrap();
            let mut ls = vec![g.nodes[0].label.clone(), g.nodes[1].label.clone()];
            ls.sort();
            assert!(keys.insert((ls, g.edges[0].predicate.clone())));
            assert!(crate::dataset::tokenize(&r.captions[0]).len() <= 8);
        }
        assert!(corpus(1000, 1).is_err());
    }

    #[test]
    fn corruption_touches_half_the_objects() {
        let recs = corpus(50, 2).unwrap();
        let bad = corrupt_labels(&recs, 0.5, &labels(), 3);
        let changed_slots = recs
            .iter()
            .zip(&bad)
            .flat_map(|(a, b)| a.objects.iter().zip(&b.objects))
            .filter(|(a, b)| a.label != b.label)
            .count();
        // Draws may land on the original label, so at most half change.
        assert!(changed_slots <= 50 && changed_slots > 30, "{changed_slots}");
        assert_eq!(bad, corrupt_labels(&recs, 0.5, &labels(), 3));
    }
}
