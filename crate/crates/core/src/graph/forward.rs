//! Whole-network forward and backward orchestration.
//!
//! Forward walks the DAG in topological order; each junction sums its
//! incoming edges in edge-creation order, applies relu if it is internal,
//! and the output junction's plain sum feeds the head. Backward retraces in
//! reverse, fanning each junction's gradient to all incoming edges and
//! summing fan-out contributions at data-split nodes.

use std::collections::BTreeMap;

use super::{NodeId, ParamKey, SeriesNetwork};
use crate::error::{Error, Result};
use crate::layers::{relu_backward, BnCache, HeadCache};
use crate::tensor::{Element, Tensor};

/// Gradients keyed by trainable parameter.
pub type GradientMap<E> = BTreeMap<ParamKey, Tensor<E>>;

/// Everything a train-mode forward pass caches for backward.
///
/// Only post-activation node outputs are kept: relu's mask is recoverable
/// from its output (`out > 0` iff `pre > 0`), so junction pre-sums need no
/// storage.
pub struct ForwardCache<E: Element> {
    version: u64,
    /// Post-activation output per node (input node holds the batch).
    node_out: Vec<Option<Tensor<E>>>,
    /// Conv output (batch-norm input) per edge.
    conv_out: Vec<Option<Tensor<E>>>,
    /// Batch-norm moment cache per edge.
    bn: Vec<Option<BnCache<E>>>,
    head: HeadCache<E>,
    pub loss: f64,
    pub accuracy: f64,
}

/// Train-mode forward: batch statistics, running-stat updates, full cache.
pub fn forward_train<E: Element>(
    net: &mut SeriesNetwork<E>,
    batch: &Tensor<E>,
    labels: &[u8],
) -> Result<ForwardCache<E>> {
    check_batch(net, batch)?;
    let order = net.topo_order()?;
    let n_nodes = net.node_count();
    let n_edges = net.edges().len();
    let mut node_out: Vec<Option<Tensor<E>>> = vec![None; n_nodes];
    let mut conv_out: Vec<Option<Tensor<E>>> = vec![None; n_edges];
    let mut bn_caches: Vec<Option<BnCache<E>>> = vec![None; n_edges];
    node_out[net.input_node().0 as usize] = Some(batch.clone());
    for &nd in &order {
        if nd == net.input_node() {
            continue;
        }
        let incoming: Vec<usize> = net.incoming(nd).to_vec();
        // Junction sum accumulates into the first branch in creation order.
        let mut sum: Option<Tensor<E>> = None;
        for &e in &incoming {
            let src = net.edges()[e].from.0 as usize;
            let conv_y = {
                let input = node_out[src].as_ref().ok_or_else(|| {
                    Error::graph(format!("node {src} not evaluated before edge"))
                })?;
                net.edges()[e].conv.forward(input)?
            };
            let (bn_y, bn_cache) = net.edges_mut()[e].bn.forward_train(&conv_y)?;
            conv_out[e] = Some(conv_y);
            bn_caches[e] = Some(bn_cache);
            match &mut sum {
                None => sum = Some(bn_y),
                Some(acc) => {
                    if !acc.same_shape(&bn_y) {
                        return Err(junction_err(
                            nd,
                            Error::shape(format!(
                                "add junction shape mismatch: {:?} vs {:?}",
                                bn_y.shape(),
                                acc.shape()
                            )),
                        ));
                    }
                    for (a, &v) in acc.data_mut().iter_mut().zip(bn_y.data()) {
                        *a += v;
                    }
                }
            }
        }
        let mut out =
            sum.ok_or_else(|| junction_err(nd, Error::graph("junction has no incoming edges")))?;
        if nd != net.output_node() {
            for v in out.data_mut() {
                if *v < E::ZERO {
                    *v = E::ZERO;
                }
            }
        }
        node_out[nd.0 as usize] = Some(out);
    }
    let features = node_out[net.output_node().0 as usize]
        .as_ref()
        .ok_or_else(|| Error::graph("output node never evaluated"))?;
    let (loss, accuracy, head) = net.head.loss(features, labels)?;
    Ok(ForwardCache {
        version: net.version(),
        node_out,
        conv_out,
        bn: bn_caches,
        head,
        loss,
        accuracy,
    })
}

/// Eval-mode forward to logits (running statistics, no mutation).
pub fn forward_eval<E: Element>(net: &SeriesNetwork<E>, batch: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(eval_activations(net, batch)?.1)
}

/// Eval-mode forward keeping every node's post-activation output (used by
/// the receptive-field impulse oracle and inspection tooling).
pub fn eval_activations<E: Element>(
    net: &SeriesNetwork<E>,
    batch: &Tensor<E>,
) -> Result<(Vec<Option<Tensor<E>>>, Tensor<E>)> {
    check_batch(net, batch)?;
    let order = net.topo_order()?;
    let mut node_out: Vec<Option<Tensor<E>>> = vec![None; net.node_count()];
    node_out[net.input_node().0 as usize] = Some(batch.clone());
    for &nd in &order {
        if nd == net.input_node() {
            continue;
        }
        let mut sum: Option<Tensor<E>> = None;
        for &e in net.incoming(nd) {
            let edge = &net.edges()[e];
            let input = node_out[edge.from.0 as usize]
                .as_ref()
                .ok_or_else(|| Error::graph("source node not evaluated"))?;
            let conv_y = edge.conv.forward(input)?;
            let bn_y = edge.bn.forward_eval(&conv_y)?;
            match &mut sum {
                None => sum = Some(bn_y),
                Some(acc) => {
                    if !acc.same_shape(&bn_y) {
                        return Err(junction_err(
                            nd,
                            Error::shape(format!(
                                "add junction shape mismatch: {:?} vs {:?}",
                                bn_y.shape(),
                                acc.shape()
                            )),
                        ));
                    }
                    for (a, &v) in acc.data_mut().iter_mut().zip(bn_y.data()) {
                        *a += v;
                    }
                }
            }
        }
        let mut out =
            sum.ok_or_else(|| junction_err(nd, Error::graph("junction has no incoming edges")))?;
        if nd != net.output_node() {
            for v in out.data_mut() {
                if *v < E::ZERO {
                    *v = E::ZERO;
                }
            }
        }
        node_out[nd.0 as usize] = Some(out);
    }
    let features = node_out[net.output_node().0 as usize]
        .as_ref()
        .ok_or_else(|| Error::graph("output node never evaluated"))?;
    let (logits, _) = net.head.logits(features)?;
    Ok((node_out, logits))
}

/// Eval-mode loss and accuracy on one batch.
pub fn eval_loss_acc<E: Element>(
    net: &SeriesNetwork<E>,
    batch: &Tensor<E>,
    labels: &[u8],
) -> Result<(f64, f64)> {
    let logits = forward_eval(net, batch)?;
    let classes = net.head.classes();
    let b = batch.dims4()?.0;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for img in 0..b {
        let row = &logits.data()[img * classes..(img + 1) * classes];
        let label = labels[img] as usize;
        if label >= classes {
            return Err(Error::data(format!("label {label} out of range")));
        }
        let mut max = row[0];
        let mut argmax = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                argmax = i;
            }
        }
        let mut sum_exp = E::ZERO;
        for &v in row {
            sum_exp += (v - max).exp();
        }
        loss_sum += (sum_exp.ln() - (row[label] - max)).to_f64();
        if argmax == label {
            correct += 1;
        }
    }
    Ok((loss_sum / b as f64, correct as f64 / b as f64))
}

/// Reverse-topological gradient accumulation.
///
/// The gradient key set equals the network's trainable key set exactly.
pub fn backward<E: Element>(
    net: &SeriesNetwork<E>,
    cache: &ForwardCache<E>,
) -> Result<GradientMap<E>> {
    if cache.version != net.version() {
        return Err(Error::consistency(
            "stale forward cache: network was mutated since the forward pass",
        ));
    }
    let order = net.topo_order()?;
    let mut grads: GradientMap<E> = BTreeMap::new();
    let mut d_node: Vec<Option<Tensor<E>>> = vec![None; net.node_count()];

    let (d_features, d_head_w, d_head_b) = net.head.backward(&cache.head)?;
    grads.insert(ParamKey::HeadWeight, d_head_w);
    grads.insert(ParamKey::HeadBias, d_head_b);
    d_node[net.output_node().0 as usize] = Some(d_features);

    for &nd in order.iter().rev() {
        if nd == net.input_node() {
            continue;
        }
        let d_out = match d_node[nd.0 as usize].take() {
            Some(g) => g,
            None => continue,
        };
        // Relu mask from the post-activation output; out > 0 iff pre > 0.
        let d_pre = if nd == net.output_node() {
            d_out
        } else {
            let out = cache.node_out[nd.0 as usize]
                .as_ref()
                .ok_or_else(|| Error::consistency("cache missing junction output"))?;
            relu_backward(out, &d_out)?
        };
        for &e in net.incoming(nd) {
            let edge = &net.edges()[e];
            let conv_y = cache.conv_out[e]
                .as_ref()
                .ok_or_else(|| Error::consistency("cache missing conv output"))?;
            let bn_cache = cache.bn[e]
                .as_ref()
                .ok_or_else(|| Error::consistency("cache missing batch-norm moments"))?;
            let (d_conv_out, d_gamma, d_beta) = edge.bn.backward(conv_y, bn_cache, &d_pre)?;
            let input = cache.node_out[edge.from.0 as usize]
                .as_ref()
                .ok_or_else(|| Error::consistency("cache missing edge input"))?;
            let need_input_grad = edge.from != net.input_node();
            let (d_input, d_w) = edge.conv.backward_opt(input, &d_conv_out, need_input_grad)?;
            grads.insert(ParamKey::ConvWeight(edge.name), d_w);
            grads.insert(ParamKey::Gamma(edge.name), d_gamma);
            grads.insert(ParamKey::Beta(edge.name), d_beta);
            if need_input_grad {
                match &mut d_node[edge.from.0 as usize] {
                    Some(acc) => {
                        for (a, &g) in acc.data_mut().iter_mut().zip(d_input.data()) {
                            *a += g;
                        }
                    }
                    slot @ None => *slot = Some(d_input),
                }
            }
        }
    }
    Ok(grads)
}

fn check_batch<E: Element>(net: &SeriesNetwork<E>, batch: &Tensor<E>) -> Result<()> {
    let (_, c, _, _) = batch.dims4()?;
    if c != net.in_channels() {
        return Err(Error::shape(format!(
            "batch has {c} channels, network expects {}",
            net.in_channels()
        )));
    }
    Ok(())
}

fn junction_err(nd: NodeId, e: Error) -> Error {
    Error::graph(format!("junction at node {}: {e}", nd.0))
}
