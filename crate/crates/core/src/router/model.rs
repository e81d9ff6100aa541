//! Heterogeneous message passing, scoring head, and the matching reverse pass.
//!
//! Per layer, for every relation: messages `W_rel · h_u` are mean-aggregated
//! at each destination, merged across relations with gate scalars, and the
//! node-kind update map is applied to `[h_v ‖ merged]`, followed by ReLU,
//! per-kind standardization with an affine, and (train mode) inverted dropout.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerParams, RouterParams, NUM_KINDS, NUM_RELATIONS};
use crate::graph::{NodeKind, TypedGraph};

const NORM_EPS: f64 = 1e-3;

/// Graph structure in the layout the router consumes.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub features: Array2<f64>,
    pub ranges: [Range<usize>; NUM_KINDS],
    /// Per relation: directed (src, dst) pairs.
    pub edges: Vec<Vec<(usize, usize)>>,
    /// Per relation: 1 / in-degree of each node (0 where no incoming edges).
    pub inv_degree: Vec<Vec<f64>>,
}

impl PreparedGraph {
    pub fn new(graph: &TypedGraph) -> Self {
        let n = graph.nodes.len();
        let d = graph.feature_dim();
        let mut features = Array2::zeros((n, d));
        for (i, node) in graph.nodes.iter().enumerate() {
            features.row_mut(i).assign(&ArrayView1::from(&node.feat[..]));
        }
        let mut edges = vec![Vec::new(); NUM_RELATIONS];
        let mut degree = vec![vec![0usize; n]; NUM_RELATIONS];
        for e in &graph.edges {
            edges[e.rel.index()].push((e.src, e.dst));
            degree[e.rel.index()][e.dst] += 1;
        }
        let inv_degree = degree
            .into_iter()
            .map(|d| d.into_iter().map(|c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect())
            .collect();
        Self {
            features,
            ranges: [
                graph.node_range(NodeKind::Query),
                graph.node_range(NodeKind::Agent),
                graph.node_range(NodeKind::Entity),
            ],
            edges,
            inv_degree,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_agents(&self) -> usize {
        self.ranges[NodeKind::Agent.index()].len()
    }
}

struct LayerTape {
    input: Array2<f64>,
    mbar: Vec<Option<Array2<f64>>>,
    concat: Array2<f64>,
    pre_act: Array2<f64>,
    normed: Array2<f64>,
    inv_std: Vec<Option<Array1<f64>>>,
    mask: Option<Array2<f64>>,
}

/// Intermediates kept for the reverse pass.
pub struct Tape {
    layers: Vec<LayerTape>,
    hidden_out: Array2<f64>,
    score_in: Array2<f64>,
    score_pre: Array2<f64>,
    pub scores: Array1<f64>,
    pub aux_logits: Array1<f64>,
}

/// Dropout source: `None` runs in eval mode.
pub type Dropout<'a> = Option<(f64, &'a mut ChaCha8Rng)>;

fn layer_forward(
    lp: &LayerParams,
    g: &PreparedGraph,
    input: Array2<f64>,
    dropout: &mut Dropout<'_>,
) -> (Array2<f64>, LayerTape) {
    let (n, h) = input.dim();
    let mut merged = Array2::<f64>::zeros((n, h));
    let mut mbar = Vec::with_capacity(NUM_RELATIONS);
    for r in 0..NUM_RELATIONS {
        if g.edges[r].is_empty() {
            mbar.push(None);
            continue;
        }
        let msg = input.dot(&lp.message[r].t());
        let mut agg = Array2::<f64>::zeros((n, h));
        for &(src, dst) in &g.edges[r] {
            agg.row_mut(dst).scaled_add(g.inv_degree[r][dst], &msg.row(src));
        }
        merged.scaled_add(lp.gate[r], &agg);
        mbar.push(Some(agg));
    }
    let concat = concatenate![Axis(1), input, merged];
    let mut pre_act = Array2::<f64>::zeros((n, h));
    for (k, range) in g.ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let block = concat.slice(s![range.clone(), ..]).dot(&lp.update[k].t()) + &lp.update_bias[k];
        pre_act.slice_mut(s![range.clone(), ..]).assign(&block);
    }
    let act = pre_act.mapv(|x| x.max(0.0));
    let mut normed = act.clone();
    let mut inv_std = Vec::with_capacity(NUM_KINDS);
    let mut out = Array2::<f64>::zeros((n, h));
    for (k, range) in g.ranges.iter().enumerate() {
        if range.len() >= 2 {
            let block = act.slice(s![range.clone(), ..]);
            let mean = block.mean_axis(Axis(0)).expect("non-empty block");
            let centered = &block - &mean;
            let var = centered.mapv(|x| x * x).mean_axis(Axis(0)).expect("non-empty block");
            let istd = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
            normed.slice_mut(s![range.clone(), ..]).assign(&(&centered * &istd));
            inv_std.push(Some(istd));
        } else {
            inv_std.push(None);
        }
        if !range.is_empty() {
            let y = &normed.slice(s![range.clone(), ..]) * &lp.norm_scale[k] + &lp.norm_shift[k];
            out.slice_mut(s![range.clone(), ..]).assign(&y);
        }
    }
    let mask = match dropout {
        Some((p, rng)) if *p > 0.0 => {
            let keep = 1.0 - *p;
            let m = Array2::from_shape_fn((n, h), |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            out *= &m;
            Some(m)
        }
        _ => None,
    };
    (
        out,
        LayerTape {
            input,
            mbar,
            concat,
            pre_act,
            normed,
            inv_std,
            mask,
        },
    )
}

/// Full forward pass; returns agent scores, aux logits and the tape.
pub fn forward_tape(params: &RouterParams, g: &PreparedGraph, mut dropout: Dropout<'_>) -> Tape {
    let h = params.shape.hidden;
    let n = g.num_nodes();
    let mut hidden = Array2::<f64>::zeros((n, h));
    for (k, range) in g.ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let block =
            g.features.slice(s![range.clone(), ..]).dot(&params.input_proj[k].t()) + &params.input_bias[k];
        hidden.slice_mut(s![range.clone(), ..]).assign(&block);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (next, tape) = layer_forward(lp, g, hidden, &mut dropout);
        layers.push(tape);
        hidden = next;
    }

    let agents = g.ranges[NodeKind::Agent.index()].clone();
    let q = hidden.row(TypedGraph::QUERY);
    let n_agents = agents.len();
    let mut score_in = Array2::<f64>::zeros((n_agents, 2 * h));
    for (i, a) in agents.enumerate() {
        score_in.slice_mut(s![i, ..h]).assign(&q);
        score_in.slice_mut(s![i, h..]).assign(&hidden.row(a));
    }
    let score_pre = score_in.dot(&params.score_hidden.t()) + &params.score_hidden_bias;
    let scores = score_pre.mapv(|x| x.max(0.0)).dot(&params.score_out);
    let aux_logits = params.aux_weight.dot(&q) + &params.aux_bias;
    Tape {
        layers,
        hidden_out: hidden,
        score_in,
        score_pre,
        scores,
        aux_logits,
    }
}

fn layer_backward(
    lp: &LayerParams,
    grad: &mut LayerParams,
    g: &PreparedGraph,
    tape: &LayerTape,
    mut d_out: Array2<f64>,
) -> Array2<f64> {
    let (n, h) = tape.input.dim();
    if let Some(mask) = &tape.mask {
        d_out *= mask;
    }
    let mut d_act = Array2::<f64>::zeros((n, h));
    for (k, range) in g.ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let dy = d_out.slice(s![range.clone(), ..]);
        let nh = tape.normed.slice(s![range.clone(), ..]);
        grad.norm_scale[k] += &(&dy * &nh).sum_axis(Axis(0));
        grad.norm_shift[k] += &dy.sum_axis(Axis(0));
        let dn = &dy * &lp.norm_scale[k];
        let dr = match &tape.inv_std[k] {
            Some(istd) => {
                let m = range.len() as f64;
                let sum_dn = dn.sum_axis(Axis(0));
                let sum_dn_nh = (&dn * &nh).sum_axis(Axis(0));
                ((&dn * m) - &sum_dn - &(&nh * &sum_dn_nh)) * &(istd / m)
            }
            None => dn,
        };
        d_act.slice_mut(s![range.clone(), ..]).assign(&dr);
    }
    let d_pre = &d_act * &tape.pre_act.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
    let mut d_concat = Array2::<f64>::zeros((n, 2 * h));
    for (k, range) in g.ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let dz = d_pre.slice(s![range.clone(), ..]);
        let x = tape.concat.slice(s![range.clone(), ..]);
        general_mat_mul(1.0, &dz.t(), &x, 1.0, &mut grad.update[k]);
        grad.update_bias[k] += &dz.sum_axis(Axis(0));
        d_concat.slice_mut(s![range.clone(), ..]).assign(&dz.dot(&lp.update[k]));
    }
    let mut d_input = d_concat.slice(s![.., ..h]).to_owned();
    let d_merged = d_concat.slice(s![.., h..]);
    for r in 0..NUM_RELATIONS {
        let Some(agg) = &tape.mbar[r] else { continue };
        grad.gate[r] += (&d_merged * agg).sum();
        let d_agg = &d_merged * lp.gate[r];
        let mut d_msg = Array2::<f64>::zeros((n, h));
        for &(src, dst) in &g.edges[r] {
            d_msg.row_mut(src).scaled_add(g.inv_degree[r][dst], &d_agg.row(dst));
        }
        general_mat_mul(1.0, &d_msg.t(), &tape.input, 1.0, &mut grad.message[r]);
        d_input += &d_msg.dot(&lp.message[r]);
    }
    d_input
}

/// Reverse pass. `d_scores` and `d_aux` are loss gradients w.r.t. the agent
/// scores and aux logits; gradients are accumulated into `grad`.
pub fn backward(
    params: &RouterParams,
    g: &PreparedGraph,
    tape: &Tape,
    d_scores: &Array1<f64>,
    d_aux: Option<&Array1<f64>>,
    grad: &mut RouterParams,
) {
    let h = params.shape.hidden;
    let n = g.num_nodes();
    let mut d_hidden = Array2::<f64>::zeros((n, h));

    // scoring perceptron
    let relu_pre = tape.score_pre.mapv(|x| x.max(0.0));
    grad.score_out += &relu_pre.t().dot(d_scores);
    let d_relu = d_scores
        .view()
        .insert_axis(Axis(1))
        .dot(&params.score_out.view().insert_axis(Axis(0)));
    let d_pre = &d_relu * &tape.score_pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
    general_mat_mul(1.0, &d_pre.t(), &tape.score_in, 1.0, &mut grad.score_hidden);
    grad.score_hidden_bias += &d_pre.sum_axis(Axis(0));
    let d_in = d_pre.dot(&params.score_hidden);
    {
        let mut dq = d_hidden.row_mut(TypedGraph::QUERY);
        dq += &d_in.slice(s![.., ..h]).sum_axis(Axis(0));
    }
    let agents = g.ranges[NodeKind::Agent.index()].clone();
    for (i, a) in agents.enumerate() {
        let mut row = d_hidden.row_mut(a);
        row += &d_in.slice(s![i, h..]);
    }

    if let Some(d_aux) = d_aux {
        let q = tape.hidden_out.row(TypedGraph::QUERY);
        grad.aux_weight += &d_aux
            .view()
            .insert_axis(Axis(1))
            .dot(&q.insert_axis(Axis(0)));
        grad.aux_bias += d_aux;
        let mut dq = d_hidden.row_mut(TypedGraph::QUERY);
        dq += &params.aux_weight.t().dot(d_aux);
    }

    for l in (0..params.layers.len()).rev() {
        d_hidden = layer_backward(&params.layers[l], &mut grad.layers[l], g, &tape.layers[l], d_hidden);
    }

    for (k, range) in g.ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let dh0 = d_hidden.slice(s![range.clone(), ..]);
        general_mat_mul(1.0, &dh0.t(), &g.features.slice(s![range.clone(), ..]), 1.0, &mut grad.input_proj[k]);
        grad.input_bias[k] += &dh0.sum_axis(Axis(0));
    }
}

/// Bit pattern of every ReLU gate in the pass. Two parameter settings with
/// equal signatures lie in the same linear region of the network.
pub fn activation_signature(tape: &Tape) -> Vec<bool> {
    let mut sig = Vec::new();
    for layer in &tape.layers {
        sig.extend(layer.pre_act.iter().map(|&x| x > 0.0));
    }
    sig.extend(tape.score_pre.iter().map(|&x| x > 0.0));
    sig
}
