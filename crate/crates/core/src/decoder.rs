//! LSTM caption decoder pieces: state initialization from the pooled graph,
//! the recurrent step, additive attention over graph nodes and the output
//! distribution
//! `p(y_t | y_{t−1}, V) ∝ exp(P_o tanh(E_W y_{t−1} + P_h h_t [+ P_z z_t]))`.

use crate::error::{Error, Result};
use crate::tape::{BatchNormState, BatchStats, Tape, Var};

/// Two-layer perceptron `D → H → H` with a tanh hidden layer.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul_t(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul_t(h, self.w2)?;
        tape.add(o, self.b2)
    }
}

/// Gate weights for `[i, f, g, o]` stacked along rows: `w_ih` is
/// `4H × input`, `w_hh` is `4H × H`, `b` is `1 × 4H`.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

/// Additive attention: `e_i = w_eᵀ tanh(W_a v_i + U_a h)`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub w_a: Var,
    pub u_a: Var,
    pub w_e: Var,
}

/// Output projection. `p_z` is present only with attention.
#[derive(Clone, Copy, Debug)]
pub struct OutputLayer {
    pub word_embed: Var,
    pub p_o: Var,
    pub p_h: Var,
    pub p_z: Option<Var>,
}

/// Initial-state networks plus the batch-norm affine parameters applied to
/// the pooled node representation.
#[derive(Clone, Copy, Debug)]
pub struct StateInit {
    pub psi_h: Mlp,
    pub psi_c: Mlp,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

/// Mean of the node rows.
pub fn pool(tape: &mut Tape, nodes: Var) -> Result<Var> {
    let (n, _) = tape.value(nodes).dims2()?;
    if n == 0 {
        return Err(Error::Validation("cannot pool an empty graph".into()));
    }
    tape.mean_rows(nodes)
}

/// `(h₀, c₀)` for every graph in a batch. Pooled rows are batch-normalized
/// with batch statistics when `training` and the batch has at least two
/// graphs, with the running statistics otherwise.
pub fn init_states(
    tape: &mut Tape,
    graphs: &[Var],
    init: &StateInit,
    bn: &BatchNormState,
    training: bool,
) -> Result<(Vec<(Var, Var)>, Option<BatchStats>)> {
    if graphs.is_empty() {
        return Err(Error::Validation("no graphs to initialize from".into()));
    }
    let pooled: Vec<Var> = graphs.iter().map(|&g| pool(tape, g)).collect::<Result<_>>()?;
    let stacked = tape.stack_rows(&pooled)?;
    let use_batch_stats = training && graphs.len() >= 2;
    let (normed, stats) = tape.batch_norm(stacked, init.bn_gamma, init.bn_beta, bn, use_batch_stats)?;
    let mut states = Vec::with_capacity(graphs.len());
    for row in 0..graphs.len() {
        let p = tape.select_row(normed, row)?;
        let h0 = init.psi_h.forward(tape, p)?;
        let c0 = init.psi_c.forward(tape, p)?;
        states.push((h0, c0));
    }
    Ok((states, stats))
}

/// One standard LSTM step.
pub fn lstm_step(tape: &mut Tape, lstm: &Lstm, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let (_, hidden) = tape.value(h).dims2()?;
    let gx = tape.matmul_t(x, lstm.w_ih)?;
    let gh = tape.matmul_t(h, lstm.w_hh)?;
    let gates = tape.add(gx, gh)?;
    let gates = tape.add(gates, lstm.b)?;
    if tape.shape(gates) != [1, 4 * hidden] {
        return Err(Error::shape("lstm gates", tape.shape(gates), &[1, 4 * hidden]));
    }
    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Context vector `z = Σ α_i v_i` and the weights `α` (`1 × n`).
pub fn attend(tape: &mut Tape, att: &Attention, nodes: Var, h: Var) -> Result<(Var, Var)> {
    let proj_v = tape.matmul_t(nodes, att.w_a)?;
    let proj_h = tape.matmul_t(h, att.u_a)?;
    let pre = tape.add(proj_v, proj_h)?;
    let act = tape.tanh(pre);
    let e = tape.matmul_t(act, att.w_e)?;
    let e = tape.transpose(e)?;
    let alpha = tape.softmax_rows(e)?;
    let z = tape.matmul(alpha, nodes)?;
    Ok((z, alpha))
}

/// Unnormalized scores over the vocabulary for the next token.
pub fn output_logits(
    tape: &mut Tape,
    out: &OutputLayer,
    y_prev: usize,
    h: Var,
    z: Option<Var>,
    dropout: f64,
    training: bool,
) -> Result<Var> {
    let emb = tape.embedding_lookup(out.word_embed, y_prev)?;
    let h = tape.dropout(h, dropout, training)?;
    let ph = tape.matmul_t(h, out.p_h)?;
    let mut pre = tape.add(emb, ph)?;
    match (z, out.p_z) {
        (Some(z), Some(p_z)) => {
            let pz = tape.matmul_t(z, p_z)?;
            pre = tape.add(pre, pz)?;
        }
        (None, None) => {}
        _ => return Err(Error::Config("context vector and P_z must be used together".into())),
    }
    let act = tape.tanh(pre);
    tape.matmul_t(act, out.p_o)
}

/// Softmax of [`output_logits`].
pub fn output_distribution(
    tape: &mut Tape,
    out: &OutputLayer,
    y_prev: usize,
    h: Var,
    z: Option<Var>,
    dropout: f64,
    training: bool,
) -> Result<Var> {
    let logits = output_logits(tape, out, y_prev, h, z, dropout, training)?;
    tape.softmax_rows(logits)
}

/// Index of the largest value; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
