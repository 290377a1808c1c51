//! Scene-graph-to-caption models built on a small reverse-mode autodiff core.
//!
//! The pipeline turns a detected or annotated scene graph into a sentence:
//! post-process detections ([`postprocess`]), reify relations into nodes
//! ([`scene_graph`]), optionally encode with graph attention ([`encoder`]),
//! and decode with an LSTM that may attend over the nodes ([`decoder`],
//! [`model`]). Training, checkpoints, and BLEU/METEOR evaluation sit on top.
//!
//! ```
//! use graphcap::{Tape, Tensor};
//!
//! let mut tape = Tape::new(0);
//! let x = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(y);
//! let grads = tape.backward_leaves(loss).unwrap();
//! assert_eq!(grads[&x].data(), &[2.0, 4.0]);
//! ```

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod scene_graph;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use model::{CaptionModel, ModelConfig, Variant};
pub use params::{Gradients, ParamId, ParamStore};
pub use scene_graph::{LabelSpace, SceneGraph};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
