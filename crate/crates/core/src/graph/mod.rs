//! The series-network graph: conv-bn edges between add junctions.
//!
//! A directed edge carries one conv-bn block; a node sums its incoming
//! edges elementwise and (at every internal junction) applies relu. The
//! output junction sums only and feeds the classifier head. Edges remember
//! the growth stage that created them, which drives growth planning and the
//! gamma reports.

pub mod checkpoint;
pub mod forward;
pub mod receptive;

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{BnParams, ConvParams, ConvSpec, HeadParams};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

/// Layer identifier "stage_ordinal", e.g. "0_6", "1_12", "2_24".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerName {
    pub stage: u32,
    pub ordinal: u32,
}

impl LayerName {
    pub fn new(stage: u32, ordinal: u32) -> Self {
        LayerName { stage, ordinal }
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.stage, self.ordinal)
    }
}

impl std::str::FromStr for LayerName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('_')
            .ok_or_else(|| Error::config(format!("bad layer name {s:?}, expected stage_ordinal")))?;
        Ok(LayerName {
            stage: a
                .parse()
                .map_err(|_| Error::config(format!("bad stage in layer name {s:?}")))?,
            ordinal: b
                .parse()
                .map_err(|_| Error::config(format!("bad ordinal in layer name {s:?}")))?,
        })
    }
}

/// Key of one trainable parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    ConvWeight(LayerName),
    Gamma(LayerName),
    Beta(LayerName),
    HeadWeight,
    HeadBias,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::ConvWeight(n) => write!(f, "conv/{n}"),
            ParamKey::Gamma(n) => write!(f, "gamma/{n}"),
            ParamKey::Beta(n) => write!(f, "beta/{n}"),
            ParamKey::HeadWeight => write!(f, "head/weight"),
            ParamKey::HeadBias => write!(f, "head/bias"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Default)]
struct Node {
    incoming: Vec<usize>,
    outgoing: Vec<usize>,
}

/// One conv-bn block.
#[derive(Debug, Clone)]
pub struct Edge<E: Element> {
    pub name: LayerName,
    pub from: NodeId,
    pub to: NodeId,
    pub conv: ConvParams<E>,
    pub bn: BnParams<E>,
    pub origin_stage: u32,
}

/// Per-layer plan entry for the plain starting network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerPlan {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// The default six-layer plain start: 5x5 kernels, filters 8,8,16,16,32,32,
/// downsampling by stride 2 at both filter-width transitions.
pub fn default_channel_plan() -> Vec<LayerPlan> {
    [
        (8, 5, 1),
        (8, 5, 1),
        (16, 5, 2),
        (16, 5, 1),
        (32, 5, 2),
        (32, 5, 1),
    ]
    .into_iter()
    .map(|(filters, kernel, stride)| LayerPlan {
        filters,
        kernel,
        stride,
    })
    .collect()
}

pub const BN_EPSILON: f64 = 1e-5;

/// Series neural network.
#[derive(Debug, Clone)]
pub struct SeriesNetwork<E: Element> {
    nodes: Vec<Node>,
    edges: Vec<Edge<E>>,
    input: NodeId,
    output: NodeId,
    pub head: HeadParams<E>,
    stage_count: u32,
    in_channels: usize,
    version: u64,
}

impl<E: Element> SeriesNetwork<E> {
    /// Build the plain chain network (stage 0): t conv-bn edges named
    /// 0_1..0_t with relu junctions between them.
    pub fn build_plain(
        in_channels: usize,
        plan: &[LayerPlan],
        classes: usize,
        ema_decay: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if plan.is_empty() {
            return Err(Error::config("channel plan must have at least one layer"));
        }
        let mut net = SeriesNetwork {
            nodes: vec![Node::default()],
            edges: Vec::new(),
            input: NodeId(0),
            output: NodeId(0),
            head: HeadParams {
                weight: Tensor::zeros(&[classes, plan.last().unwrap().filters]),
                bias: Tensor::zeros(&[classes]),
            },
            stage_count: 0,
            in_channels,
            version: 0,
        };
        let mut prev_node = net.input;
        let mut prev_ch = in_channels;
        for (i, layer) in plan.iter().enumerate() {
            let node = net.add_node();
            let spec = ConvSpec::new(prev_ch, layer.filters, layer.kernel, layer.stride);
            let conv = ConvParams::new_he(spec, rng)?;
            let bn = BnParams::new(layer.filters, BN_EPSILON, ema_decay);
            net.add_edge(LayerName::new(0, i as u32 + 1), prev_node, node, conv, bn, 0)?;
            prev_node = node;
            prev_ch = layer.filters;
        }
        net.output = prev_node;
        net.head = HeadParams::new_he(classes, prev_ch, rng)?;
        net.validate()?;
        Ok(net)
    }

    pub(crate) fn add_node(&mut self) -> NodeId {
        self.nodes.push(Node::default());
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub(crate) fn add_edge(
        &mut self,
        name: LayerName,
        from: NodeId,
        to: NodeId,
        conv: ConvParams<E>,
        bn: BnParams<E>,
        origin_stage: u32,
    ) -> Result<()> {
        if self.edges.iter().any(|e| e.name == name) {
            return Err(Error::graph(format!("duplicate layer name {name}")));
        }
        if bn.channels() != conv.spec.out_channels {
            return Err(Error::graph(format!(
                "edge {name}: batch norm has {} channels, conv emits {}",
                bn.channels(),
                conv.spec.out_channels
            )));
        }
        let idx = self.edges.len();
        self.edges.push(Edge {
            name,
            from,
            to,
            conv,
            bn,
            origin_stage,
        });
        self.nodes[from.0 as usize].outgoing.push(idx);
        self.nodes[to.0 as usize].incoming.push(idx);
        self.version += 1;
        Ok(())
    }

    pub fn input_node(&self) -> NodeId {
        self.input
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn stage_count(&self) -> u32 {
        self.stage_count
    }

    pub(crate) fn set_stage_count(&mut self, n: u32) {
        self.stage_count = n;
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn edges(&self) -> &[Edge<E>] {
        &self.edges
    }

    pub(crate) fn edges_mut(&mut self) -> &mut [Edge<E>] {
        self.version += 1;
        &mut self.edges
    }

    pub fn edge_by_name(&self, name: LayerName) -> Option<&Edge<E>> {
        self.edges.iter().find(|e| e.name == name)
    }

    /// Incoming edge indices of a node, in edge-creation order (which fixes
    /// junction summation order).
    pub(crate) fn incoming(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0 as usize].incoming
    }

    pub(crate) fn outgoing(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0 as usize].outgoing
    }

    /// Deterministic topological order of nodes (ready nodes taken in id
    /// order).
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut remaining: Vec<usize> = self.nodes.iter().map(|nd| nd.incoming.len()).collect();
        let mut order = Vec::with_capacity(n);
        let mut done = vec![false; n];
        while order.len() < n {
            let mut advanced = false;
            for id in 0..n {
                if !done[id] && remaining[id] == 0 {
                    done[id] = true;
                    order.push(NodeId(id as u32));
                    for &e in &self.nodes[id].outgoing {
                        remaining[self.edges[e].to.0 as usize] -= 1;
                    }
                    advanced = true;
                }
            }
            if !advanced {
                return Err(Error::graph("cycle detected in series network"));
            }
        }
        Ok(order)
    }

    /// All trainable parameter keys, in a fixed total order.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        let mut keys = BTreeSet::new();
        for e in &self.edges {
            keys.insert(ParamKey::ConvWeight(e.name));
            keys.insert(ParamKey::Gamma(e.name));
            keys.insert(ParamKey::Beta(e.name));
        }
        keys.insert(ParamKey::HeadWeight);
        keys.insert(ParamKey::HeadBias);
        keys.into_iter().collect()
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.trainable_keys()
            .iter()
            .map(|k| self.param(k).expect("key enumerated from net").len())
            .sum()
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Tensor<E>> {
        match key {
            ParamKey::ConvWeight(n) => self.edge_by_name(*n).map(|e| &e.conv.weights),
            ParamKey::Gamma(n) => self.edge_by_name(*n).map(|e| &e.bn.gamma),
            ParamKey::Beta(n) => self.edge_by_name(*n).map(|e| &e.bn.beta),
            ParamKey::HeadWeight => Some(&self.head.weight),
            ParamKey::HeadBias => Some(&self.head.bias),
        }
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor<E>> {
        self.version += 1;
        match key {
            ParamKey::ConvWeight(n) => {
                let name = *n;
                self.edges
                    .iter_mut()
                    .find(|e| e.name == name)
                    .map(|e| &mut e.conv.weights)
            }
            ParamKey::Gamma(n) => {
                let name = *n;
                self.edges
                    .iter_mut()
                    .find(|e| e.name == name)
                    .map(|e| &mut e.bn.gamma)
            }
            ParamKey::Beta(n) => {
                let name = *n;
                self.edges
                    .iter_mut()
                    .find(|e| e.name == name)
                    .map(|e| &mut e.bn.beta)
            }
            ParamKey::HeadWeight => Some(&mut self.head.weight),
            ParamKey::HeadBias => Some(&mut self.head.bias),
        }
    }

    /// Structural validation: connectivity, acyclicity, junction channel
    /// agreement and receptive-field alignment.
    pub fn validate(&self) -> Result<()> {
        let order = self.topo_order()?;
        // Every edge must lie on an input -> output path.
        let mut reach_fwd = vec![false; self.nodes.len()];
        reach_fwd[self.input.0 as usize] = true;
        for &nd in &order {
            if reach_fwd[nd.0 as usize] {
                for &e in self.outgoing(nd) {
                    reach_fwd[self.edges[e].to.0 as usize] = true;
                }
            }
        }
        let mut reach_bwd = vec![false; self.nodes.len()];
        reach_bwd[self.output.0 as usize] = true;
        for &nd in order.iter().rev() {
            if reach_bwd[nd.0 as usize] {
                for &e in self.incoming(nd) {
                    reach_bwd[self.edges[e].from.0 as usize] = true;
                }
            }
        }
        for (i, nd) in self.nodes.iter().enumerate() {
            if (!reach_fwd[i] || !reach_bwd[i]) && !(nd.incoming.is_empty() && nd.outgoing.is_empty())
            {
                return Err(Error::graph(format!(
                    "node {i} is not on an input-to-output path"
                )));
            }
        }
        // Junction channel agreement.
        for (i, nd) in self.nodes.iter().enumerate() {
            let chans: Vec<usize> = nd
                .incoming
                .iter()
                .map(|&e| self.edges[e].conv.spec.out_channels)
                .collect();
            if let Some(&first) = chans.first() {
                if chans.iter().any(|&c| c != first) {
                    return Err(Error::graph(format!(
                        "junction {i}: incoming edges disagree on channels {chans:?}"
                    )));
                }
            }
        }
        // Head feature width.
        let out_ch = self
            .incoming(self.output)
            .first()
            .map(|&e| self.edges[e].conv.spec.out_channels);
        if let Some(c) = out_ch {
            if c != self.head.features() {
                return Err(Error::graph(format!(
                    "head expects {} features but output junction carries {c} channels",
                    self.head.features()
                )));
            }
        }
        let rf = receptive::receptive_field_check(self)?;
        if !rf.pass {
            return Err(Error::graph(format!(
                "receptive-field misalignment: {}",
                rf.failures.join("; ")
            )));
        }
        Ok(())
    }

    /// Human-readable topology description.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "series network: {} nodes, {} edges, stage count {}, input node {}, output node {}\n",
            self.nodes.len(),
            self.edges.len(),
            self.stage_count,
            self.input.0,
            self.output.0
        ));
        for e in &self.edges {
            s.push_str(&format!(
                "edge {:>6}: node {} -> node {}  conv {}x{} {}->{} stride {} pad {}  stage {}\n",
                e.name.to_string(),
                e.from.0,
                e.to.0,
                e.conv.spec.kernel,
                e.conv.spec.kernel,
                e.conv.spec.in_channels,
                e.conv.spec.out_channels,
                e.conv.spec.stride,
                e.conv.spec.padding,
                e.origin_stage
            ));
        }
        s.push_str(&format!(
            "head: {} classes from {} features\n",
            self.head.classes(),
            self.head.features()
        ));
        s
    }
}

pub use receptive::{receptive_field_check, RfReport};
