//! Evaluation harness: graph construction, decoding and scoring.

use std::fmt;

use crate::dataset::{DatasetRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricReport};
use crate::model::{CaptionModel, DecodeConfig, GraphInput};
use crate::postprocess::{postprocess_detection, postprocess_graph, validate_min_nodes, Acceptance, Postprocessed};
use crate::scene_graph::{reify, LabelSpace, SceneGraph};

/// Where evaluation graphs come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphSource {
    /// Annotated graphs, used as-is.
    Gold,
    /// Detector output post-processed at a confidence threshold.
    Detection { threshold: f64 },
}

impl fmt::Display for GraphSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSource::Gold => f.write_str("gold"),
            GraphSource::Detection { threshold } => write!(f, "detection@{threshold}"),
        }
    }
}

/// The graph a record contributes under `source`, or a rejection reason.
pub fn build_graph(
    record: &DatasetRecord,
    source: GraphSource,
    max_nodes: usize,
    labels: &LabelSpace,
) -> Result<std::result::Result<SceneGraph, String>> {
    let out = match source {
        GraphSource::Gold => {
            let g = record.gold_graph()?;
            match validate_min_nodes(&g) {
                Acceptance::Accept => Postprocessed::Accepted(g),
                Acceptance::Reject { objects } => Postprocessed::Rejected {
                    reason: format!("only {objects} object node(s)"),
                },
            }
        }
        GraphSource::Detection { threshold } => match &record.relation_scores {
            Some(pairs) => postprocess_detection(&record.object_nodes()?, pairs, threshold, max_nodes, labels)?,
            None => postprocess_graph(&record.gold_graph()?, threshold, max_nodes, labels)?,
        },
    };
    Ok(match out {
        Postprocessed::Accepted(g) => Ok(g),
        Postprocessed::Rejected { reason } => Err(reason),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub records: Vec<EvalRecord>,
    pub rejected: Vec<(u64, String)>,
}

/// Decodes every accepted record and scores it against all its captions.
pub fn evaluate_model(
    model: &CaptionModel,
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    labels: &LabelSpace,
    source: GraphSource,
    max_nodes: usize,
    decode: &DecodeConfig,
) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut scored = Vec::new();
    let mut rejected = Vec::new();
    for r in records {
        if r.captions.is_empty() {
            return Err(Error::Data(format!("evaluation record {} has no captions", r.image_id)));
        }
        match build_graph(r, source, max_nodes, labels)? {
            Ok(g) => {
                let input = GraphInput::new(reify(&g)?, labels)?;
                let ids = model.decode(&input, decode, r.image_id)?;
                scored.push(EvalRecord::new(r.image_id, vocab.decode(&ids), r.tokenized_captions()));
            }
            Err(reason) => rejected.push((r.image_id, reason)),
        }
    }
    if scored.is_empty() {
        return Err(Error::Data(format!(
            "all {} records rejected under {source}",
            rejected.len()
        )));
    }
    Ok(EvalOutcome {
        report: MetricReport::compute(&scored, rejected.len())?,
        records: scored,
        rejected,
    })
}
