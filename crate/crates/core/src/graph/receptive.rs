//! Receptive-field bookkeeping.
//!
//! Along a path, a conv with kernel k and stride s maps (rf, jump) to
//! (rf + (k-1) * jump, jump * stride). Every edge entering a junction must
//! deliver the same pair, otherwise the elementwise add mixes activations
//! that summarize different input regions.

use super::{NodeId, SeriesNetwork};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Receptive field size and jump (input-pixel distance between adjacent
/// activations) at one point of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfInfo {
    pub rf: u64,
    pub jump: u64,
}

#[derive(Debug, Clone)]
pub struct JunctionRf {
    pub node: NodeId,
    /// (edge name, pair it delivers) for each incoming edge.
    pub incoming: Vec<(String, RfInfo)>,
    /// Agreed pair at this junction (the first incoming edge's, or the
    /// input definition for the source node).
    pub info: RfInfo,
    pub consistent: bool,
}

#[derive(Debug, Clone)]
pub struct RfReport {
    pub junctions: Vec<JunctionRf>,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Compute (rf, jump) for every junction and check all incoming edges of
/// each junction agree.
pub fn receptive_field_check<E: Element>(net: &SeriesNetwork<E>) -> Result<RfReport> {
    let order = net.topo_order()?;
    let mut info: Vec<Option<RfInfo>> = vec![None; net.node_count()];
    info[net.input_node().0 as usize] = Some(RfInfo { rf: 1, jump: 1 });
    let mut junctions = Vec::new();
    let mut failures = Vec::new();
    for &nd in &order {
        if nd == net.input_node() {
            junctions.push(JunctionRf {
                node: nd,
                incoming: Vec::new(),
                info: RfInfo { rf: 1, jump: 1 },
                consistent: true,
            });
            continue;
        }
        let mut delivered = Vec::new();
        for &e in net.incoming(nd) {
            let edge = &net.edges()[e];
            let src = info[edge.from.0 as usize].ok_or_else(|| {
                Error::graph(format!("edge {} leaves an unevaluated node", edge.name))
            })?;
            let spec = &edge.conv.spec;
            delivered.push((
                edge.name.to_string(),
                RfInfo {
                    rf: src.rf + (spec.kernel as u64 - 1) * src.jump,
                    jump: src.jump * spec.stride as u64,
                },
            ));
        }
        let first = delivered
            .first()
            .map(|(_, i)| *i)
            .ok_or_else(|| Error::graph(format!("junction {} has no incoming edges", nd.0)))?;
        let consistent = delivered.iter().all(|(_, i)| *i == first);
        if !consistent {
            failures.push(format!(
                "junction {}: incoming receptive fields differ: {:?}",
                nd.0, delivered
            ));
        }
        info[nd.0 as usize] = Some(first);
        junctions.push(JunctionRf {
            node: nd,
            incoming: delivered,
            info: first,
            consistent,
        });
    }
    Ok(RfReport {
        pass: failures.is_empty(),
        junctions,
        failures,
    })
}

impl RfReport {
    pub fn info_at(&self, node: NodeId) -> Option<RfInfo> {
        self.junctions
            .iter()
            .find(|j| j.node == node)
            .map(|j| j.info)
    }
}
