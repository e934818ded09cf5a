//! Growing a series network: attach a two-layer residual path in parallel
//! with every newest-stage edge, zero-initializing the second batch norm's
//! gamma so the grown network computes exactly the same function as its
//! parent.

use crate::error::{Error, Result};
use crate::graph::{forward::forward_eval, LayerName, ParamKey, SeriesNetwork};
use crate::layers::{BnParams, ConvParams, ConvSpec};
use crate::rng::SeededRng;
use crate::tensor::{Element, Fill, Tensor};

/// Specification of one two-layer residual path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Addition {
    /// Edge (of the newest stage) the path runs in parallel with.
    pub target: LayerName,
    pub first_name: LayerName,
    pub first_spec: ConvSpec,
    pub second_name: LayerName,
    pub second_spec: ConvSpec,
}

/// All residual paths to attach at one growth step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrowthPlan {
    /// Stage the plan creates (parent stage + 1).
    pub stage: u32,
    pub additions: Vec<Addition>,
}

impl GrowthPlan {
    pub fn layer_names(&self) -> Vec<LayerName> {
        self.additions
            .iter()
            .flat_map(|a| [a.first_name, a.second_name])
            .collect()
    }
}

/// Kernel pair for a path paralleling a `kernel`-sized edge: the first conv
/// takes min(kernel, 3), the second takes the remainder so the composed
/// receptive field matches exactly. A 5x5 edge gets (3x3, 3x3); a 3x3 edge
/// gets (3x3, 1x1); a 1x1 edge gets (1x1, 1x1).
///
/// Stride placement: when the second kernel is 1x1 the full stride sits on
/// the first conv; otherwise it must sit on the second conv, or rf equality
/// breaks (rf grows by (k2 - 1) * jump * s1 through the second conv).
fn path_geometry(kernel: usize, stride: usize) -> ((usize, usize), (usize, usize)) {
    let k1 = kernel.min(3);
    let k2 = kernel - k1 + 1;
    if k2 == 1 {
        ((k1, stride), (k2, 1))
    } else {
        ((k1, 1), (k2, stride))
    }
}

/// Plan one growth step: a two-layer path in parallel with every edge of
/// the current newest stage. The path paralleling edge i_j is named
/// (i+1)_(2j-1), (i+1)_(2j).
pub fn plan_growth<E: Element>(net: &SeriesNetwork<E>) -> GrowthPlan {
    let stage = net.stage_count();
    let mut targets: Vec<&crate::graph::Edge<E>> = net
        .edges()
        .iter()
        .filter(|e| e.origin_stage == stage)
        .collect();
    targets.sort_by_key(|e| e.name);
    let next = stage + 1;
    let additions = targets
        .into_iter()
        .map(|edge| {
            let spec = &edge.conv.spec;
            let ((k1, s1), (k2, s2)) = path_geometry(spec.kernel, spec.stride);
            let width = spec.out_channels;
            Addition {
                target: edge.name,
                first_name: LayerName::new(next, 2 * edge.name.ordinal - 1),
                first_spec: ConvSpec::new(spec.in_channels, width, k1, s1),
                second_name: LayerName::new(next, 2 * edge.name.ordinal),
                second_spec: ConvSpec::new(width, width, k2, s2),
            }
        })
        .collect();
    GrowthPlan {
        stage: next,
        additions,
    }
}

/// Apply a growth plan, returning the stage i+1 network.
///
/// Inherited edges keep their parameter tensors bitwise. Each new path gets
/// a He-initialized first conv with a standard batch norm (gamma 1), and a
/// He-initialized second conv whose batch norm gamma and beta are zero, so
/// the path contributes nothing until training moves it.
pub fn apply_growth<E: Element>(
    net: &SeriesNetwork<E>,
    plan: &GrowthPlan,
    rng: &mut SeededRng,
) -> Result<SeriesNetwork<E>> {
    apply_growth_impl(net, plan, rng, true)
}

/// Same structural growth but with standard initialization on the second
/// batch norm (gamma 1): the end-to-end baseline's architecture builder.
/// The resulting parameter key set equals [`apply_growth`]'s exactly.
pub fn apply_growth_standard_init<E: Element>(
    net: &SeriesNetwork<E>,
    plan: &GrowthPlan,
    rng: &mut SeededRng,
) -> Result<SeriesNetwork<E>> {
    apply_growth_impl(net, plan, rng, false)
}

fn apply_growth_impl<E: Element>(
    net: &SeriesNetwork<E>,
    plan: &GrowthPlan,
    rng: &mut SeededRng,
    zero_second_gamma: bool,
) -> Result<SeriesNetwork<E>> {
    if plan.stage != net.stage_count() + 1 {
        return Err(Error::consistency(format!(
            "plan targets stage {} but network is at stage {}",
            plan.stage,
            net.stage_count()
        )));
    }
    let mut grown = net.clone();
    grown.set_stage_count(plan.stage);
    for addition in &plan.additions {
        let target = net.edge_by_name(addition.target).ok_or_else(|| {
            Error::consistency(format!(
                "plan references edge {} which is not in the network",
                addition.target
            ))
        })?;
        if target.origin_stage != net.stage_count() {
            return Err(Error::consistency(format!(
                "plan targets edge {} of stage {}, expected newest stage {}",
                addition.target,
                target.origin_stage,
                net.stage_count()
            )));
        }
        let (epsilon, ema_decay) = (target.bn.epsilon, target.bn.ema_decay);
        let mid = grown.add_node();
        let first_conv = ConvParams::new_he(addition.first_spec, rng)?;
        let first_bn = BnParams::new(addition.first_spec.out_channels, epsilon, ema_decay);
        grown.add_edge(
            addition.first_name,
            target.from,
            mid,
            first_conv,
            first_bn,
            plan.stage,
        )?;
        let second_conv = ConvParams::new_he(addition.second_spec, rng)?;
        let second_bn = if zero_second_gamma {
            BnParams::new_zero_gamma(addition.second_spec.out_channels, epsilon, ema_decay)
        } else {
            BnParams::new(addition.second_spec.out_channels, epsilon, ema_decay)
        };
        grown.add_edge(
            addition.second_name,
            mid,
            target.to,
            second_conv,
            second_bn,
            plan.stage,
        )?;
    }
    grown.validate()?;
    Ok(grown)
}

/// Outcome of probing a parent/child pair with seeded random batches.
#[derive(Debug, Clone)]
pub struct PreservationReport {
    pub max_abs_diff: f64,
    pub pass: bool,
    pub tol: f64,
    pub probes: usize,
}

/// Compare eval-mode logits of two networks on seeded random probe batches.
pub fn verify_preservation<E: Element>(
    parent: &SeriesNetwork<E>,
    child: &SeriesNetwork<E>,
    probes: usize,
    probe_hw: usize,
    rng: &mut SeededRng,
    tol: f64,
) -> Result<PreservationReport> {
    if parent.in_channels() != child.in_channels() {
        return Err(Error::shape(
            "parent and child expect different input channel counts",
        ));
    }
    let mut max_abs_diff = 0.0f64;
    for _ in 0..probes {
        let batch = Tensor::<E>::alloc(
            &[4, parent.in_channels(), probe_hw, probe_hw],
            Fill::Normal {
                mean: 0.0,
                stddev: 1.0,
                rng,
            },
        )?;
        let a = forward_eval(parent, &batch)?;
        let b = forward_eval(child, &batch)?;
        max_abs_diff = max_abs_diff.max(a.max_abs_diff(&b));
    }
    Ok(PreservationReport {
        max_abs_diff,
        pass: max_abs_diff <= tol,
        tol,
        probes,
    })
}

/// Decision from the gamma-based stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthDecision {
    Continue,
    Stop,
}

/// Mean |gamma| summary for one stage's junction-feeding batch norms.
#[derive(Debug, Clone)]
pub struct StageGammaSummary {
    pub stage: u32,
    /// Layers contributing to the mean: all stage-0 edges, or the second
    /// (even-ordinal) path layers of a growth stage.
    pub layers: Vec<LayerName>,
    pub mean_abs_gamma: f64,
}

/// Stop growing once the newest stage's second-batch-norm gammas have a
/// mean absolute value below `threshold` (strict comparison).
pub fn growth_stop_criterion<E: Element>(
    net: &SeriesNetwork<E>,
    threshold: f64,
) -> Result<(GrowthDecision, Vec<StageGammaSummary>)> {
    if net.stage_count() == 0 {
        return Err(Error::consistency(
            "stop criterion needs at least one growth stage",
        ));
    }
    let summaries = stage_gamma_summaries(net);
    let newest = summaries
        .last()
        .ok_or_else(|| Error::consistency("no gamma summaries"))?;
    let decision = if newest.mean_abs_gamma < threshold {
        GrowthDecision::Stop
    } else {
        GrowthDecision::Continue
    };
    Ok((decision, summaries))
}

/// Per-stage mean |gamma| over the batch norms that feed main-path add
/// junctions: every stage-0 edge, and the even-ordinal (second) layer of
/// each residual path for grown stages.
pub fn stage_gamma_summaries<E: Element>(net: &SeriesNetwork<E>) -> Vec<StageGammaSummary> {
    (0..=net.stage_count())
        .map(|stage| {
            let mut layers: Vec<LayerName> = net
                .edges()
                .iter()
                .filter(|e| e.origin_stage == stage && (stage == 0 || e.name.ordinal % 2 == 0))
                .map(|e| e.name)
                .collect();
            layers.sort();
            let mut sum = 0.0;
            let mut count = 0usize;
            for name in &layers {
                let edge = net.edge_by_name(*name).expect("layer listed from net");
                for &g in edge.bn.gamma.data() {
                    sum += g.to_f64().abs();
                    count += 1;
                }
            }
            StageGammaSummary {
                stage,
                layers,
                mean_abs_gamma: if count == 0 { 0.0 } else { sum / count as f64 },
            }
        })
        .collect()
}

/// Eq.-style parameter accounting between a parent and its grown child:
/// inherited keys must keep bitwise-equal tensors and new keys must be
/// exactly the planned ones.
pub fn check_growth_accounting<E: Element>(
    parent: &SeriesNetwork<E>,
    child: &SeriesNetwork<E>,
    plan: &GrowthPlan,
) -> Result<()> {
    let parent_keys: std::collections::BTreeSet<ParamKey> =
        parent.trainable_keys().into_iter().collect();
    let child_keys: std::collections::BTreeSet<ParamKey> =
        child.trainable_keys().into_iter().collect();
    if !parent_keys.is_subset(&child_keys) {
        return Err(Error::consistency(
            "growth dropped parameters: parent keys are not a subset of child keys",
        ));
    }
    for key in &parent_keys {
        let a = parent.param(key).expect("parent key");
        let b = child.param(key).expect("subset checked");
        if !a.bit_eq(b) {
            return Err(Error::consistency(format!(
                "inherited parameter {key} changed during growth"
            )));
        }
    }
    let mut expected_new: std::collections::BTreeSet<ParamKey> = std::collections::BTreeSet::new();
    for name in plan.layer_names() {
        expected_new.insert(ParamKey::ConvWeight(name));
        expected_new.insert(ParamKey::Gamma(name));
        expected_new.insert(ParamKey::Beta(name));
    }
    let actual_new: std::collections::BTreeSet<ParamKey> =
        child_keys.difference(&parent_keys).copied().collect();
    if actual_new != expected_new {
        return Err(Error::consistency(
            "new parameter keys do not match the growth plan",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::default_channel_plan;

    fn stage0(seed: u64) -> SeriesNetwork<f64> {
        let mut rng = SeededRng::new(seed);
        SeriesNetwork::build_plain(3, &default_channel_plan(), 10, 0.9999, &mut rng).unwrap()
    }

    #[test]
    fn plan_names_follow_doubling_rule() {
        let net = stage0(1);
        let plan = plan_growth(&net);
        assert_eq!(plan.stage, 1);
        assert_eq!(plan.additions.len(), 6);
        let names: Vec<String> = plan.layer_names().iter().map(|n| n.to_string()).collect();
        let expect: Vec<String> = (1..=12).map(|o| format!("1_{o}")).collect();
        assert_eq!(names, expect);
        // Path of 0_3 is (1_5, 1_6).
        let add = &plan.additions[2];
        assert_eq!(add.target.to_string(), "0_3");
        assert_eq!(add.first_name.to_string(), "1_5");
        assert_eq!(add.second_name.to_string(), "1_6");
    }

    #[test]
    fn second_growth_doubles_again() {
        let net = stage0(2);
        let mut rng = SeededRng::new(1000);
        let plan1 = plan_growth(&net);
        let net1 = apply_growth(&net, &plan1, &mut rng).unwrap();
        assert_eq!(net1.edges().len(), 18);
        let plan2 = plan_growth(&net1);
        assert_eq!(plan2.additions.len(), 12);
        let names: Vec<String> = plan2.layer_names().iter().map(|n| n.to_string()).collect();
        let expect: Vec<String> = (1..=24).map(|o| format!("2_{o}")).collect();
        assert_eq!(names, expect);
        // Path of 1_12 is (2_23, 2_24).
        let add = plan2
            .additions
            .iter()
            .find(|a| a.target.to_string() == "1_12")
            .unwrap();
        assert_eq!(add.first_name.to_string(), "2_23");
        assert_eq!(add.second_name.to_string(), "2_24");
    }

    #[test]
    fn growth_preserves_function_and_counts() {
        let net = stage0(3);
        let mut rng = SeededRng::new(2000);
        let plan = plan_growth(&net);
        let grown = apply_growth(&net, &plan, &mut rng).unwrap();
        check_growth_accounting(&net, &grown, &plan).unwrap();
        // Parameter count grows by exactly the planned tensors.
        let added: usize = plan
            .additions
            .iter()
            .map(|a| {
                a.first_spec.weight_count()
                    + a.second_spec.weight_count()
                    + 2 * (a.first_spec.out_channels + a.second_spec.out_channels)
            })
            .sum();
        assert_eq!(grown.parameter_count(), net.parameter_count() + added);
        // Double precision: exact preservation.
        let mut probe_rng = SeededRng::new(42);
        let report = verify_preservation(&net, &grown, 4, 16, &mut probe_rng, 0.0).unwrap();
        assert_eq!(report.max_abs_diff, 0.0, "diff {}", report.max_abs_diff);
        assert!(report.pass);
    }

    #[test]
    fn empty_plan_is_identity() {
        let net = stage0(4);
        let plan = GrowthPlan {
            stage: 1,
            additions: Vec::new(),
        };
        let mut rng = SeededRng::new(1);
        let grown = apply_growth(&net, &plan, &mut rng).unwrap();
        assert_eq!(grown.edges().len(), net.edges().len());
        let mut probe_rng = SeededRng::new(9);
        let report = verify_preservation(&net, &grown, 2, 16, &mut probe_rng, 0.0).unwrap();
        assert_eq!(report.max_abs_diff, 0.0);
    }

    #[test]
    fn parent_vs_itself_is_exact() {
        let net = stage0(5);
        let mut rng = SeededRng::new(3);
        let report = verify_preservation(&net, &net, 3, 16, &mut rng, 0.0).unwrap();
        assert_eq!(report.max_abs_diff, 0.0);
    }

    #[test]
    fn stop_criterion_cases() {
        let net = stage0(6);
        let mut rng = SeededRng::new(4);
        let grown = apply_growth(&net, &plan_growth(&net), &mut rng).unwrap();
        // Freshly grown: newest-stage second gammas are all zero -> stop.
        let (decision, summaries) = growth_stop_criterion(&grown, 0.01).unwrap();
        assert_eq!(decision, GrowthDecision::Stop);
        assert_eq!(summaries.last().unwrap().mean_abs_gamma, 0.0);
        // Threshold zero: strict inequality means continue.
        let (decision, _) = growth_stop_criterion(&grown, 0.0).unwrap();
        assert_eq!(decision, GrowthDecision::Continue);
        // A Table-3-scale mean (2.580) with threshold 0.1 -> continue.
        let mut pumped = grown.clone();
        for e in 0..pumped.edges().len() {
            let name = pumped.edges()[e].name;
            if name.stage == 1 && name.ordinal % 2 == 0 {
                for g in pumped.param_mut(&ParamKey::Gamma(name)).unwrap().data_mut() {
                    *g = 2.580;
                }
            }
        }
        let (decision, summaries) = growth_stop_criterion(&pumped, 0.1).unwrap();
        assert_eq!(decision, GrowthDecision::Continue);
        assert!((summaries.last().unwrap().mean_abs_gamma - 2.580).abs() < 1e-12);
    }

    #[test]
    fn stop_criterion_requires_a_grown_stage() {
        let net = stage0(7);
        assert!(growth_stop_criterion(&net, 0.01).is_err());
    }

    #[test]
    fn plan_rejected_on_wrong_network() {
        let net = stage0(8);
        let plan = plan_growth(&net);
        let mut rng = SeededRng::new(5);
        let grown = apply_growth(&net, &plan, &mut rng).unwrap();
        // Re-applying the same stage-1 plan to the grown net must fail.
        assert!(matches!(
            apply_growth(&grown, &plan, &mut rng),
            Err(Error::Consistency(_))
        ));
    }
}
