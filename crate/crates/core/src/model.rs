//! The full graph-to-caption model and its four variants.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};

use crate::dataset::{make_training_pairs, DatasetRecord, Vocabulary, END, START};
use crate::decoder::{self, Attention, Lstm, Mlp, OutputLayer, StateInit};
use crate::encoder::{self, GatLayer, GatOptions};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scene_graph::{reify, LabelSpace, ReifiedGraph};
use crate::tape::{softmax, BatchNormState, BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Decoder attention and GAT encoder toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    Att,
    Enc,
    EncAtt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Att, Variant::Enc, Variant::EncAtt];

    pub fn attention(self) -> bool {
        matches!(self, Variant::Att | Variant::EncAtt)
    }

    pub fn encoder(self) -> bool {
        matches!(self, Variant::Enc | Variant::EncAtt)
    }

    pub fn from_flags(encoder: bool, attention: bool) -> Self {
        match (encoder, attention) {
            (false, false) => Variant::Base,
            (false, true) => Variant::Att,
            (true, false) => Variant::Enc,
            (true, true) => Variant::EncAtt,
        }
    }

    /// Display name used in logs and reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Base => "G-LSTM",
            Variant::Att => "G-LSTM+att",
            Variant::Enc => "G-LSTM+enc",
            Variant::EncAtt => "G-LSTM+enc+att",
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Att => "att",
            Variant::Enc => "enc",
            Variant::EncAtt => "enc_att",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "att" => Ok(Variant::Att),
            "enc" => Ok(Variant::Enc),
            "enc_att" => Ok(Variant::EncAtt),
            other => Err(Error::Usage(format!(
                "unknown variant {other:?} (expected base, att, enc or enc_att)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Node and word embedding width `D`.
    pub embed_dim: usize,
    /// LSTM hidden width `H`.
    pub hidden_dim: usize,
    /// Attention MLP width `A`.
    pub attn_dim: usize,
    /// Number of GAT layers when the encoder is on.
    pub gat_layers: usize,
    pub variant: Variant,
    pub vocab_size: usize,
    /// Rows of the joint object + predicate embedding table.
    pub node_labels: usize,
    pub gat_dropout: f64,
    pub decoder_dropout: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Full-scale widths: `D = 512`, `H = 1024`, `A = D`, two GAT layers.
    pub fn full_scale(variant: Variant, vocab_size: usize, node_labels: usize) -> Self {
        ModelConfig {
            embed_dim: 512,
            hidden_dim: 1024,
            attn_dim: 512,
            gat_layers: 2,
            variant,
            vocab_size,
            node_labels,
            gat_dropout: 0.25,
            decoder_dropout: 0.5,
            leaky_slope: 0.2,
        }
    }

    pub fn small(variant: Variant, vocab_size: usize, node_labels: usize, d: usize, h: usize) -> Self {
        ModelConfig {
            embed_dim: d,
            hidden_dim: h,
            attn_dim: d,
            ..ModelConfig::full_scale(variant, vocab_size, node_labels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.hidden_dim, self.attn_dim, self.vocab_size, self.node_labels];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {dims:?}")));
        }
        if self.vocab_size <= END {
            return Err(Error::Config("vocabulary lacks the reserved tokens".into()));
        }
        for r in [self.gat_dropout, self.decoder_dropout] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn active_gat_layers(&self) -> usize {
        if self.variant.encoder() {
            self.gat_layers
        } else {
            0
        }
    }

    /// Config as a flat list of numbers, for checkpoint metadata.
    pub fn to_meta(&self) -> Vec<f64> {
        vec![
            self.embed_dim as f64,
            self.hidden_dim as f64,
            self.attn_dim as f64,
            self.gat_layers as f64,
            self.variant.encoder() as u8 as f64,
            self.variant.attention() as u8 as f64,
            self.vocab_size as f64,
            self.node_labels as f64,
            self.gat_dropout,
            self.decoder_dropout,
            self.leaky_slope,
        ]
    }

    pub fn from_meta(m: &[f64]) -> Result<Self> {
        if m.len() != 11 {
            return Err(Error::Format(format!("model metadata has {} fields, expected 11", m.len())));
        }
        let cfg = ModelConfig {
            embed_dim: m[0] as usize,
            hidden_dim: m[1] as usize,
            attn_dim: m[2] as usize,
            gat_layers: m[3] as usize,
            variant: Variant::from_flags(m[4] != 0.0, m[5] != 0.0),
            vocab_size: m[6] as usize,
            node_labels: m[7] as usize,
            gat_dropout: m[8],
            decoder_dropout: m[9],
            leaky_slope: m[10],
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// A graph ready for the model: its reified form and label-table rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub graph: ReifiedGraph,
    pub label_ids: Vec<usize>,
}

impl GraphInput {
    pub fn new(graph: ReifiedGraph, labels: &LabelSpace) -> Result<Self> {
        let label_ids = encoder::node_label_ids(&graph, labels)?;
        if graph.is_empty() {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        Ok(GraphInput { graph, label_ids })
    }

    /// The same graph with node `k` taken from old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(GraphInput {
            graph: self.graph.permuted(perm)?,
            label_ids: perm.iter().map(|&i| self.label_ids[i]).collect(),
        })
    }
}

/// A caption paired with its graph; token ids exclude start/end markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub graph: GraphInput,
    pub tokens: Vec<usize>,
}

/// One sample per caption of every gold-form record.
pub fn samples_from_records(records: &[DatasetRecord], vocab: &Vocabulary, labels: &LabelSpace) -> Result<Vec<Sample>> {
    make_training_pairs(records)?
        .into_iter()
        .map(|p| {
            Ok(Sample {
                graph: GraphInput::new(reify(&p.graph)?, labels)?,
                tokens: vocab.encode(&p.caption)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: 20,
            mode: DecodeMode::Greedy,
        }
    }
}

/// Per-batch forward result.
pub struct BatchForward {
    pub tape: Tape,
    pub loss: Var,
    pub per_sample: Vec<f64>,
    pub bn_stats: Option<BatchStats>,
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: BatchNormState,
}

/// All model tensors bound to one tape.
struct Bound {
    node_table: Var,
    gat: Vec<GatLayer>,
    init: StateInit,
    lstm: Lstm,
    attention: Option<Attention>,
    output: OutputLayer,
}

impl CaptionModel {
    /// Seeded initialization: recurrent weights `U(−0.08, 0.08)`,
    /// projections `N(0, 1/fan_in)`, biases zero, batch-norm scale one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, a) = (config.embed_dim, config.hidden_dim, config.attn_dim);
        let mut ps = ParamStore::new();
        ps.insert("node_embed", normal(&mut rng, &[config.node_labels, d], 1.0))?;
        for k in 0..config.active_gat_layers() {
            ps.insert(format!("gat/{k}/w"), fan_in(&mut rng, &[d, d]))?;
            ps.insert(format!("gat/{k}/a"), normal(&mut rng, &[1, 2 * d], (1.0 / (2 * d) as f64).sqrt()))?;
        }
        ps.insert("bn/gamma", Tensor::full(&[1, d], 1.0))?;
        ps.insert("bn/beta", Tensor::zeros(&[1, d]))?;
        for psi in ["psi_h", "psi_c"] {
            ps.insert(format!("dec/{psi}/w1"), fan_in(&mut rng, &[h, d]))?;
            ps.insert(format!("dec/{psi}/b1"), Tensor::zeros(&[1, h]))?;
            ps.insert(format!("dec/{psi}/w2"), fan_in(&mut rng, &[h, h]))?;
            ps.insert(format!("dec/{psi}/b2"), Tensor::zeros(&[1, h]))?;
        }
        let lstm_in = if config.variant.attention() { 2 * d } else { d };
        ps.insert("dec/word_embed", normal(&mut rng, &[config.vocab_size, d], 1.0))?;
        ps.insert("dec/lstm/w_ih", uniform(&mut rng, &[4 * h, lstm_in], 0.08))?;
        ps.insert("dec/lstm/w_hh", uniform(&mut rng, &[4 * h, h], 0.08))?;
        ps.insert("dec/lstm/b", Tensor::zeros(&[1, 4 * h]))?;
        ps.insert("dec/p_o", fan_in(&mut rng, &[config.vocab_size, d]))?;
        ps.insert("dec/p_h", fan_in(&mut rng, &[d, h]))?;
        if config.variant.attention() {
            ps.insert("dec/p_z", fan_in(&mut rng, &[d, d]))?;
            ps.insert("dec/att/w_a", fan_in(&mut rng, &[a, d]))?;
            ps.insert("dec/att/u_a", fan_in(&mut rng, &[a, h]))?;
            ps.insert("dec/att/w_e", fan_in(&mut rng, &[1, a]))?;
        }
        Ok(CaptionModel {
            bn: BatchNormState::new(d),
            config,
            params: ps,
        })
    }

    fn bind(&self, tape: &mut Tape, params: &ParamStore) -> Result<Bound> {
        let mut p = |name: &str| tape.param_by_name(params, name);
        let node_table = p("node_embed")?;
        let mut gat = Vec::new();
        for k in 0..self.config.active_gat_layers() {
            gat.push(GatLayer {
                w: p(&format!("gat/{k}/w"))?,
                a: p(&format!("gat/{k}/a"))?,
            });
        }
        let mut mlp = |psi: &str| -> Result<Mlp> {
            Ok(Mlp {
                w1: p(&format!("dec/{psi}/w1"))?,
                b1: p(&format!("dec/{psi}/b1"))?,
                w2: p(&format!("dec/{psi}/w2"))?,
                b2: p(&format!("dec/{psi}/b2"))?,
            })
        };
        let psi_h = mlp("psi_h")?;
        let psi_c = mlp("psi_c")?;
        let init = StateInit {
            psi_h,
            psi_c,
            bn_gamma: p("bn/gamma")?,
            bn_beta: p("bn/beta")?,
        };
        let lstm = Lstm {
            w_ih: p("dec/lstm/w_ih")?,
            w_hh: p("dec/lstm/w_hh")?,
            b: p("dec/lstm/b")?,
        };
        let (attention, p_z) = if self.config.variant.attention() {
            (
                Some(Attention {
                    w_a: p("dec/att/w_a")?,
                    u_a: p("dec/att/u_a")?,
                    w_e: p("dec/att/w_e")?,
                }),
                Some(p("dec/p_z")?),
            )
        } else {
            (None, None)
        };
        let output = OutputLayer {
            word_embed: p("dec/word_embed")?,
            p_o: p("dec/p_o")?,
            p_h: p("dec/p_h")?,
            p_z,
        };
        Ok(Bound {
            node_table,
            gat,
            init,
            lstm,
            attention,
            output,
        })
    }

    fn encode(&self, tape: &mut Tape, b: &Bound, g: &GraphInput, training: bool) -> Result<Var> {
        let v = tape.gather_rows(b.node_table, &g.label_ids)?;
        let opts = GatOptions {
            leaky_slope: self.config.leaky_slope,
            dropout: self.config.gat_dropout,
            training,
        };
        encoder::encode(tape, v, &g.graph, &b.gat, &opts)
    }

    /// One decoder step from `y_prev`; returns the new state and the logits.
    fn step(
        &self,
        tape: &mut Tape,
        b: &Bound,
        nodes: Var,
        y_prev: usize,
        state: (Var, Var),
        training: bool,
    ) -> Result<((Var, Var), Var)> {
        let (h, c) = state;
        let emb = tape.embedding_lookup(b.output.word_embed, y_prev)?;
        let (x, z) = match &b.attention {
            Some(att) => {
                let (z, _) = decoder::attend(tape, att, nodes, h)?;
                (tape.concat_cols(&[emb, z])?, Some(z))
            }
            None => (emb, None),
        };
        let (h, c) = decoder::lstm_step(tape, &b.lstm, x, h, c)?;
        let logits = decoder::output_logits(
            tape,
            &b.output,
            y_prev,
            h,
            z,
            self.config.decoder_dropout,
            training,
        )?;
        Ok(((h, c), logits))
    }

    /// Mean over samples of the per-token negative log-likelihood under
    /// teacher forcing, recorded on a fresh tape seeded with `seed`.
    pub fn forward_batch_with(
        &self,
        params: &ParamStore,
        samples: &[&Sample],
        training: bool,
        seed: u64,
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut tape = Tape::new(seed);
        let b = self.bind(&mut tape, params)?;
        let mut encoded = Vec::with_capacity(samples.len());
        for s in samples {
            if s.tokens.is_empty() {
                return Err(Error::Data("empty caption".into()));
            }
            if let Some(&bad) = s.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary")));
            }
            encoded.push(self.encode(&mut tape, &b, &s.graph, training)?);
        }
        let (states, bn_stats) = decoder::init_states(&mut tape, &encoded, &b.init, &self.bn, training)?;
        let mut sample_losses = Vec::with_capacity(samples.len());
        let mut per_sample = Vec::with_capacity(samples.len());
        for ((s, &nodes), &state) in samples.iter().zip(&encoded).zip(&states) {
            let mut state = state;
            let mut nll = Vec::with_capacity(s.tokens.len() + 1);
            let inputs = std::iter::once(START).chain(s.tokens.iter().copied());
            let targets = s.tokens.iter().copied().chain(std::iter::once(END));
            for (y_prev, target) in inputs.zip(targets) {
                let (next, logits) = self.step(&mut tape, &b, nodes, y_prev, state, training)?;
                state = next;
                let logp = tape.log_softmax_rows(logits)?;
                nll.push(tape.pick(logp, 0, target)?);
            }
            let steps = nll.len() as f64;
            let stacked = tape.stack_rows(&nll)?;
            let total = tape.sum_all(stacked);
            let mean = tape.scale(total, -1.0 / steps);
            per_sample.push(tape.value(mean).item());
            sample_losses.push(mean);
        }
        let stacked = tape.stack_rows(&sample_losses)?;
        let total = tape.sum_all(stacked);
        let loss = tape.scale(total, 1.0 / samples.len() as f64);
        Ok(BatchForward {
            tape,
            loss,
            per_sample,
            bn_stats,
        })
    }

    pub fn forward_batch(&self, samples: &[&Sample], training: bool, seed: u64) -> Result<BatchForward> {
        self.forward_batch_with(&self.params, samples, training, seed)
    }

    /// Loss value and parameter gradients for a batch.
    pub fn loss_and_grad(&self, samples: &[&Sample], training: bool, seed: u64) -> Result<(f64, Gradients, Option<BatchStats>)> {
        let fwd = self.forward_batch(samples, training, seed)?;
        let grads = fwd.tape.backward(fwd.loss)?;
        Ok((fwd.tape.value(fwd.loss).item(), grads, fwd.bn_stats))
    }

    /// Teacher-forced loss of a single caption in eval mode.
    pub fn teacher_forced_loss(&self, sample: &Sample) -> Result<f64> {
        let fwd = self.forward_batch(&[sample], false, 0)?;
        Ok(fwd.tape.value(fwd.loss).item())
    }

    /// Greedy or temperature-sampled caption, without start/end markers.
    pub fn decode(&self, graph: &GraphInput, cfg: &DecodeConfig, seed: u64) -> Result<Vec<usize>> {
        Ok(self.decode_traced(graph, cfg, seed)?.tokens)
    }

    pub fn greedy_decode(&self, graph: &GraphInput, max_len: usize) -> Result<Vec<usize>> {
        self.decode(
            graph,
            &DecodeConfig {
                max_len,
                mode: DecodeMode::Greedy,
            },
            0,
        )
    }

    /// Decoding that also reports the per-step output distribution and
    /// attention weights.
    pub fn decode_traced(&self, graph: &GraphInput, cfg: &DecodeConfig, seed: u64) -> Result<DecodeTrace> {
        if cfg.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if let DecodeMode::Sample { temperature } = cfg.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(seed);
        let b = self.bind(&mut tape, &self.params)?;
        let nodes = self.encode(&mut tape, &b, graph, false)?;
        let (states, _) = decoder::init_states(&mut tape, &[nodes], &b.init, &self.bn, false)?;
        let mut state = states[0];
        let mut trace = DecodeTrace::default();
        let mut y_prev = START;
        for _ in 0..cfg.max_len {
            if let Some(att) = &b.attention {
                let (_, alpha) = decoder::attend(&mut tape, att, nodes, state.0)?;
                trace.attention.push(tape.value(alpha).data().to_vec());
            }
            let (next, logits) = self.step(&mut tape, &b, nodes, y_prev, state, false)?;
            state = next;
            let logits = tape.value(logits).data().to_vec();
            trace.distributions.push(softmax(&logits));
            let tok = match cfg.mode {
                DecodeMode::Greedy => decoder::argmax(&logits),
                DecodeMode::Sample { temperature } => {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                    sample_index(&softmax(&scaled), &mut rng)?
                }
            };
            if tok == END {
                break;
            }
            if tok != START {
                trace.tokens.push(tok);
            }
            y_prev = tok;
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
}

/// Multinomial draw from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> Result<usize> {
    // A fully saturated softmax may leave a single one-hot entry.
    if let Some(k) = probs.iter().position(|&p| p == 1.0) {
        return Ok(k);
    }
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Numeric(format!("bad distribution: {e}")))?;
    Ok(dist.sample(rng))
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn fan_in(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0 / (shape[1] as f64).sqrt())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}
