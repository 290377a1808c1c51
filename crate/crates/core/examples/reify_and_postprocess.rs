//! Turns raw detector output into a captionable graph and reifies it.

use std::collections::BTreeMap;

use graphcap::postprocess::{postprocess_detection, PairScores, Postprocessed};
use graphcap::scene_graph::{reify, BoundingBox, NodeKind, ObjectNode};
use graphcap::{LabelSpace, Result};

fn labels() -> LabelSpace {
    LabelSpace::new(
        ["man", "horse", "hat", "tree"].map(String::from).to_vec(),
        ["riding", "wearing", "near"].map(String::from).to_vec(),
    )
    .expect("labels")
}

pub fn run_example() -> Result<usize> {
    let labels = labels();
    let bbox = BoundingBox::new(10.0, 10.0, 40.0, 80.0)?;
    let nodes = vec![
        ObjectNode::new(0, "man", 0.92).with_bbox(bbox),
        ObjectNode::new(1, "horse", 0.88),
        ObjectNode::new(2, "hat", 0.35),
        // same label and box as node 0: a duplicate detection
        ObjectNode::new(3, "man", 0.60).with_bbox(bbox),
        ObjectNode::new(4, "tree", 0.15),
    ];
    let pair = |src, dst, scores: &[(&str, f64)]| PairScores {
        src,
        dst,
        scores: scores.iter().map(|(p, s)| (p.to_string(), *s)).collect::<BTreeMap<_, _>>(),
    };
    let pairs = vec![
        pair(0, 1, &[("riding", 0.7), ("near", 0.2)]),
        pair(3, 1, &[("near", 0.6)]),
        pair(0, 2, &[("wearing", 0.8)]),
        pair(1, 4, &[("near", 0.9)]),
    ];
    let graph = match postprocess_detection(&nodes, &pairs, 0.4, 10, &labels)? {
        Postprocessed::Accepted(g) => g,
        Postprocessed::Rejected { reason } => {
            println!("rejected: {reason}");
            return Ok(0);
        }
    };
    for e in &graph.edges {
        println!("{} --{}--> {}", graph.node(e.src).unwrap().label, e.predicate, graph.node(e.dst).unwrap().label);
    }
    let reified = reify(&graph)?;
    for (i, n) in reified.nodes().iter().enumerate() {
        let kind = match n.kind {
            NodeKind::Object => "object",
            NodeKind::Relation => "relation",
        };
        println!("{i}: {:<8} {:<7} neighbors {:?}", kind, n.label, reified.neighbors(i));
    }
    Ok(reified.len())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
