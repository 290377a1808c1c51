//! Node embedding and the graph attention encoder.
//!
//! One layer maps node rows `V` (`n × D`) to
//! `V′_i = sigmoid(Σ_{j ∈ N(i)} α_ij · W v_j)` where
//! `α_i· = softmax_{j ∈ N(i)}(LeakyReLU(aᵀ [W v_i ‖ W v_j]))`.
//! Single attention head; dropout acts on the transformed neighbor features
//! right before the weighted sum.

use crate::error::{Error, Result};
use crate::scene_graph::{LabelSpace, ReifiedGraph};
use crate::tape::{Tape, Var};

/// A GAT layer bound to a tape: `w` is `D′ × D`, `a` is `1 × 2D′`.
#[derive(Clone, Copy, Debug)]
pub struct GatLayer {
    pub w: Var,
    pub a: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GatOptions {
    pub leaky_slope: f64,
    pub dropout: f64,
    pub training: bool,
}

impl Default for GatOptions {
    fn default() -> Self {
        GatOptions {
            leaky_slope: 0.2,
            dropout: 0.25,
            training: false,
        }
    }
}

/// Joint label-table rows for every node of `g`.
pub fn node_label_ids(g: &ReifiedGraph, labels: &LabelSpace) -> Result<Vec<usize>> {
    g.nodes()
        .iter()
        .map(|n| labels.node_label_index(n.kind, &n.label))
        .collect()
}

/// `n × D` matrix whose row `i` is the table row of node `i`'s label.
pub fn embed_nodes(tape: &mut Tape, table: Var, g: &ReifiedGraph, labels: &LabelSpace) -> Result<Var> {
    let ids = node_label_ids(g, labels)?;
    tape.gather_rows(table, &ids)
}

/// Transformed features `W v_j` for every node (`n × D′`).
fn transform(tape: &mut Tape, v: Var, layer: &GatLayer) -> Result<Var> {
    tape.matmul_t(v, layer.w)
}

fn coefficients_from(tape: &mut Tape, wh: Var, layer: &GatLayer, g: &ReifiedGraph, slope: f64) -> Result<Var> {
    let (_, d_out) = tape.value(wh).dims2()?;
    let a_shape = tape.shape(layer.a).to_vec();
    if a_shape != [1, 2 * d_out] {
        return Err(Error::shape("gat attention vector", &a_shape, &[1, 2 * d_out]));
    }
    let a_src = tape.slice_cols(layer.a, 0, d_out)?;
    let a_dst = tape.slice_cols(layer.a, d_out, 2 * d_out)?;
    let s_src = tape.matmul_t(wh, a_src)?;
    let s_dst = tape.matmul_t(wh, a_dst)?;
    let scores = tape.add_outer(s_src, s_dst)?;
    let scores = tape.leaky_relu(scores, slope);
    tape.masked_softmax_rows(scores, &g.adjacency_mask())
}

/// The `n × n` attention matrix; row `i` holds `α_ij`, zero outside `N(i)`.
pub fn attention_coefficients(tape: &mut Tape, v: Var, layer: &GatLayer, g: &ReifiedGraph, slope: f64) -> Result<Var> {
    check_rows(tape, v, g)?;
    let wh = transform(tape, v, layer)?;
    coefficients_from(tape, wh, layer, g, slope)
}

/// Attention weights of node `i` over its neighborhood, as `(j, α_ij)` pairs.
pub fn neighborhood_weights(tape: &Tape, alpha: Var, g: &ReifiedGraph, i: usize) -> Vec<(usize, f64)> {
    let a = tape.value(alpha);
    g.neighbors(i).iter().map(|&j| (j, a.at(i, j))).collect()
}

pub fn gat_layer_forward(tape: &mut Tape, v: Var, g: &ReifiedGraph, layer: &GatLayer, opts: &GatOptions) -> Result<Var> {
    check_rows(tape, v, g)?;
    let wh = transform(tape, v, layer)?;
    let alpha = coefficients_from(tape, wh, layer, g, opts.leaky_slope)?;
    let dropped = tape.dropout(wh, opts.dropout, opts.training)?;
    let mixed = tape.matmul(alpha, dropped)?;
    Ok(tape.sigmoid(mixed))
}

/// Runs the layers in sequence. No layers is the identity.
pub fn encode(tape: &mut Tape, v: Var, g: &ReifiedGraph, layers: &[GatLayer], opts: &GatOptions) -> Result<Var> {
    let mut h = v;
    for (k, layer) in layers.iter().enumerate() {
        let (_, width) = tape.value(h).dims2()?;
        let w_shape = tape.shape(layer.w).to_vec();
        if w_shape.len() != 2 || w_shape[1] != width {
            return Err(Error::Config(format!(
                "GAT layer {k} expects input width {:?} but receives {width}",
                w_shape.get(1)
            )));
        }
        h = gat_layer_forward(tape, h, g, layer, opts)?;
    }
    Ok(h)
}

fn check_rows(tape: &Tape, v: Var, g: &ReifiedGraph) -> Result<()> {
    let (n, _) = tape.value(v).dims2()?;
    if n != g.len() {
        return Err(Error::shape("gat node rows", tape.shape(v), &[g.len()]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{reify, ObjectNode, RelationEdge, SceneGraph};
    use crate::tape::sigmoid;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    fn two_objects() -> ReifiedGraph {
        let g = SceneGraph::new(vec![ObjectNode::new(0, "a", 1.0), ObjectNode::new(1, "b", 1.0)], vec![]).unwrap();
        reify(&g).unwrap()
    }

    fn pair_graph() -> ReifiedGraph {
        // a - on - b, reified to 3 nodes
        let g = SceneGraph::new(
            vec![ObjectNode::new(0, "a", 1.0), ObjectNode::new(1, "b", 1.0)],
            vec![RelationEdge::new(0, 1, "on", 1.0)],
        )
        .unwrap();
        reify(&g).unwrap()
    }

    fn layer(tape: &mut Tape, w: Tensor, a: Tensor) -> GatLayer {
        GatLayer {
            w: tape.constant(w),
            a: tape.constant(a),
        }
    }

    #[test]
    fn zero_attention_vector_is_uniform() {
        let g = pair_graph();
        let mut tape = Tape::new(0);
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1., 2., -1., 0.5, 3., 1.]).unwrap());
        let l = layer(&mut tape, Tensor::identity(2), Tensor::zeros(&[1, 4]));
        let alpha = attention_coefficients(&mut tape, v, &l, &g, 0.2).unwrap();
        for (j, w) in neighborhood_weights(&tape, alpha, &g, 2) {
            assert!(j < 3);
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_eq!(neighborhood_weights(&tape, alpha, &g, 0).len(), 2);
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let g = two_objects();
        let mut tape = Tape::new(0);
        let v = tape.constant(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let l = layer(&mut tape, w.clone(), Tensor::row(&[0.3, 0.1, -0.4, 0.9]));
        let alpha = attention_coefficients(&mut tape, v, &l, &g, 0.2).unwrap();
        assert_eq!(neighborhood_weights(&tape, alpha, &g, 0), vec![(0, 1.0)]);
        let out = gat_layer_forward(&mut tape, v, &g, &l, &GatOptions::default()).unwrap();
        // sigmoid(W v) exactly
        let expect = [sigmoid(0.5 * 0.3 + -1.0 * -0.7), sigmoid(2.0 * 0.3 + 0.1 * -0.7)];
        assert_eq!(tape.value(out).row_slice(0), &expect);
    }

    /// Hand evaluation with W = I and a = [1, 0, 0, 0] on the 3-node graph:
    /// for node 0 (neighbors {0, 2}) the raw scores are
    /// LeakyReLU(v0[0]) for both neighbors, since only the source half of `a`
    /// is non-zero, so the weights are uniform. For a = [0, 0, 1, 0] the destination half
    /// scores neighbor j by LeakyReLU(v_j[0]).
    #[test]
    fn hand_computed_coefficients() {
        let g = pair_graph();
        let mut tape = Tape::new(0);
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.0]).unwrap());
        let l = layer(&mut tape, Tensor::identity(2), Tensor::row(&[1.0, 0.0, 0.0, 0.0]));
        let alpha = attention_coefficients(&mut tape, v, &l, &g, 0.2).unwrap();
        assert_relative_eq!(tape.value(alpha).at(0, 0), 0.5, epsilon = 1e-15);

        let l = layer(&mut tape, Tensor::identity(2), Tensor::row(&[0.0, 0.0, 1.0, 0.0]));
        let alpha = attention_coefficients(&mut tape, v, &l, &g, 0.2).unwrap();
        // node 0: scores LR(1) = 1 for j=0, LR(-1) = -0.2 for j=2
        let e1 = 1.0f64.exp();
        let e2 = (-0.2f64).exp();
        assert_relative_eq!(tape.value(alpha).at(0, 0), e1 / (e1 + e2), epsilon = 1e-15);
        assert_relative_eq!(tape.value(alpha).at(0, 2), e2 / (e1 + e2), epsilon = 1e-15);
        assert_eq!(tape.value(alpha).at(0, 1), 0.0);
        // node 2 sees all three: LR(1)=1, LR(2)=2, LR(-1)=-0.2
        let z = 1f64.exp() + 2f64.exp() + (-0.2f64).exp();
        assert_relative_eq!(tape.value(alpha).at(2, 1), 2f64.exp() / z, epsilon = 1e-15);
    }

    #[test]
    fn uniform_attention_averages_neighbors() {
        let g = pair_graph();
        let mut tape = Tape::new(0);
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.5, 3.0, 1.0]).unwrap());
        let l = layer(&mut tape, Tensor::identity(2), Tensor::zeros(&[1, 4]));
        let out = gat_layer_forward(&mut tape, v, &g, &l, &GatOptions::default()).unwrap();
        // node 0 has neighbors {0, 2}
        let expect = [sigmoid((1.0 + 3.0) / 2.0), sigmoid((-2.0 + 1.0) / 2.0)];
        let got = tape.value(out).row_slice(0);
        assert_relative_eq!(got[0], expect[0], epsilon = 1e-15);
        assert_relative_eq!(got[1], expect[1], epsilon = 1e-15);
        assert!(tape.value(out).data().iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn encode_composition_and_identity() {
        let g = two_objects();
        let mut tape = Tape::new(0);
        let v = tape.constant(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
        assert_eq!(encode(&mut tape, v, &g, &[], &GatOptions::default()).unwrap(), v);
        let w1 = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let w2 = Tensor::new(vec![3, 2], vec![1.0, 0.2, -0.3, 0.4, 0.0, 1.5]).unwrap();
        let l1 = layer(&mut tape, w1, Tensor::row(&[0.1; 4]));
        let l2 = layer(&mut tape, w2, Tensor::row(&[0.2; 6]));
        let out = encode(&mut tape, v, &g, &[l1, l2], &GatOptions::default()).unwrap();
        assert_eq!(tape.shape(out), &[2, 3]);
        let h1 = [sigmoid(0.5 * 0.3 + 0.7), sigmoid(0.6 - 0.07)];
        let h2 = [
            sigmoid(h1[0] + 0.2 * h1[1]),
            sigmoid(-0.3 * h1[0] + 0.4 * h1[1]),
            sigmoid(1.5 * h1[1]),
        ];
        for (g, e) in tape.value(out).row_slice(0).iter().zip(h2) {
            assert_relative_eq!(*g, e, epsilon = 1e-14);
        }
        // width mismatch: feed l2 output (3 wide) into l1 (expects 2)
        assert!(matches!(
            encode(&mut tape, v, &g, &[l2, l1], &GatOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn embedding_rows_follow_labels() {
        let ls = LabelSpace::new(vec!["a".into(), "b".into()], vec!["on".into()]).unwrap();
        let g = pair_graph();
        let mut tape = Tape::new(0);
        let table = tape.constant(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let v = embed_nodes(&mut tape, table, &g, &ls).unwrap();
        assert_eq!(tape.value(v).data(), &[1., 2., 3., 4., 5., 6.]);
        let bad = LabelSpace::new(vec!["a".into(), "xyz".into()], vec!["on".into()]).unwrap();
        assert!(matches!(embed_nodes(&mut tape, table, &g, &bad), Err(Error::Vocabulary(_))));
    }
}
