//! Slot-by-slot policy synthesis over one hyperperiod.
//!
//! Each slot releases due instances into their coordinators' active lists,
//! lets the builder pick the pulls, applies them with every link quality
//! pinned to `m`, and retires hops whose bound reached the local target. A
//! retired hop releases the next hop of the same instance one slot later.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{self, Candidate, SlotAssignment, SlotProblem};
use crate::evaluator::{CoordinatorState, EvaluatorError, FlowAnalysis, LinkQualityView};
use crate::model::{
    self, Channel, FlowId, FlowInstance, FlowSpec, HopRecord, InstanceKey, InstanceRecord, ModelError, NodeId, Policy,
    PolicyHeader, Slot, Topology, DEFAULT_ACTIVE_CAP, DEFAULT_SERVICE_CAP,
};

/// Slot length used to turn releases per hyperperiod into packets per second.
pub const DEFAULT_SLOT_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Link-quality threshold of the TLR model.
    pub m: f64,
    pub service_cap: usize,
    pub active_cap: usize,
    /// Overrides the topology's channel count when set.
    pub channels: Option<Channel>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            m: 0.7,
            service_cap: DEFAULT_SERVICE_CAP,
            active_cap: DEFAULT_ACTIVE_CAP,
            channels: None,
        }
    }
}

impl SynthesisConfig {
    pub fn with_m(m: f64) -> Self {
        SynthesisConfig {
            m,
            ..Default::default()
        }
    }

    /// The classical non-shared schedule: one instance per pull.
    pub fn sched(m: f64) -> Self {
        SynthesisConfig {
            m,
            service_cap: 1,
            ..Default::default()
        }
    }
}

/// The first instance that could not be served in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unschedulable {
    pub instance: InstanceKey,
    pub slot: Slot,
    pub reason: String,
}

impl std::fmt::Display for Unschedulable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} unschedulable at slot {}: {}",
            self.instance, self.slot, self.reason
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unschedulable: {} at slot {}: {}", .0.instance, .0.slot, .0.reason)]
    Unschedulable(Unschedulable),
    #[error("evaluator invariant broken: {0}")]
    Evaluator(#[from] EvaluatorError),
}

impl SynthesisError {
    pub fn is_unschedulable(&self) -> bool {
        matches!(self, SynthesisError::Unschedulable(_))
    }
}

/// Wall-clock split of one synthesis run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SynthesisTiming {
    pub builder: Duration,
    pub evaluator: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub policy: Policy,
    pub timing: SynthesisTiming,
}

pub fn synthesize(topo: &Topology, flows: &[FlowSpec], config: &SynthesisConfig) -> Result<Synthesis, SynthesisError> {
    synthesize_traced(topo, flows, config, |_, _, _| {})
}

/// Like [`synthesize`], calling `on_slot` with every slot's problem and solution.
pub fn synthesize_traced(
    topo: &Topology,
    flows: &[FlowSpec],
    config: &SynthesisConfig,
    mut on_slot: impl FnMut(Slot, &SlotProblem, &SlotAssignment),
) -> Result<Synthesis, SynthesisError> {
    let started = Instant::now();
    check_config(config)?;
    model::validate_flows(topo, flows)?;
    let hp = model::hyperperiod(flows)?;
    let channels = config.channels.unwrap_or(topo.channels());
    if channels < 2 {
        return Err(ModelError::TooFewChannels(channels).into());
    }
    let header = PolicyHeader {
        hyperperiod: hp,
        channels,
        m: config.m,
        service_cap: config.service_cap,
        active_cap: config.active_cap,
    };

    let by_id: BTreeMap<FlowId, &FlowSpec> = flows.iter().map(|f| (f.id, f)).collect();
    let mut releases: BTreeMap<Slot, Vec<FlowInstance>> = BTreeMap::new();
    for f in flows {
        for k in 0..f.instances_per(hp) {
            releases.entry(f.release(k)).or_default().push(f.instance(k, 0));
        }
    }
    for batch in releases.values_mut() {
        batch.sort_by_key(|i| i.key);
    }

    let mut coords: BTreeMap<NodeId, CoordinatorState> = BTreeMap::new();
    let mut inflight: BTreeMap<(FlowId, u32), FlowAnalysis> = BTreeMap::new();
    let mut tracked: BTreeMap<InstanceKey, FlowInstance> = BTreeMap::new();
    let mut trajectories: BTreeMap<InstanceKey, Vec<(Slot, f64)>> = BTreeMap::new();
    let mut prev_channels: BTreeMap<NodeId, Channel> = BTreeMap::new();
    let mut policy = Policy::empty(header);
    let lq = LinkQualityView::Uniform(config.m);
    let mut timing = SynthesisTiming::default();

    for t in 0..hp {
        let ev = Instant::now();
        if let Some(miss) = first_miss(&inflight, t) {
            return Err(SynthesisError::Unschedulable(miss));
        }
        for inst in releases.remove(&t).unwrap_or_default() {
            if inst.key.hop == 0 {
                let f = by_id[&inst.key.flow];
                inflight.insert((f.id, inst.key.instance), FlowAnalysis::new(f, inst.key.instance));
            }
            coords
                .entry(inst.link.dst)
                .or_insert_with(|| CoordinatorState::new(inst.link.dst, config.active_cap))
                .admit_instance(&inst)?;
            tracked.insert(inst.key, inst);
        }
        timing.evaluator += ev.elapsed();

        let bt = Instant::now();
        let candidates = coords
            .values()
            .flat_map(|s| s.active())
            .map(|k| {
                let link = tracked[k].link;
                Candidate {
                    key: *k,
                    src: link.src,
                    dst: link.dst,
                }
            })
            .collect();
        let mut problem = SlotProblem::new(candidates, channels, config.service_cap);
        for (&node, &ch) in &prev_channels {
            problem.exclude(node, ch);
        }
        if hp >= 2 && t == hp - 1 {
            for p in &policy.grid[0] {
                problem.exclude(p.coordinator, p.channel);
            }
        }
        let assignment = builder::solve_slot(&problem);
        let pulls = builder::to_pulls(&assignment, &problem);
        timing.builder += bt.elapsed();
        on_slot(t, &problem, &assignment);

        let ev = Instant::now();
        for pull in &pulls {
            let state = coords.get_mut(&pull.coordinator).expect("coordinator has state");
            state.apply_pull(&pull.service, &lq)?;
            for key in &pull.service {
                let bound = state.marginal_reliability(key)?;
                trajectories.entry(*key).or_default().push((t, bound));
                if bound < tracked[key].local_target {
                    continue;
                }
                state.retire_instance(key)?;
                tracked.remove(key);
                let f = by_id[&key.flow];
                let fa = inflight.get_mut(&(key.flow, key.instance)).expect("in flight");
                let record = HopRecord {
                    completion: t,
                    bound,
                    trajectory: trajectories.remove(key).unwrap_or_default(),
                };
                match fa.release_next_subflow(f, record) {
                    Some((next, at)) => releases.entry(at).or_default().push(next),
                    None => {
                        let fa = inflight.remove(&(key.flow, key.instance)).expect("in flight");
                        policy.analysis.push(InstanceRecord {
                            flow: fa.spec_id,
                            instance: fa.instance,
                            release: fa.release,
                            deadline: fa.deadline,
                            hops: fa.into_hops(),
                        });
                    }
                }
            }
        }
        prev_channels = pulls.iter().map(|p| (p.coordinator, p.channel)).collect();
        policy.grid[t as usize] = pulls;
        timing.evaluator += ev.elapsed();
    }
    if let Some(miss) = first_miss(&inflight, hp) {
        return Err(SynthesisError::Unschedulable(miss));
    }

    policy.analysis.sort_by_key(|r| (r.flow, r.instance));
    timing.total = started.elapsed();
    Ok(Synthesis { policy, timing })
}

fn check_config(config: &SynthesisConfig) -> Result<(), SynthesisError> {
    if !(config.m > 0.0 && config.m <= 1.0) {
        return Err(SynthesisError::Config(format!("m = {} is not in (0, 1]", config.m)));
    }
    if config.service_cap == 0 {
        return Err(SynthesisError::Config("service cap must be at least 1".into()));
    }
    if !(1..=20).contains(&config.active_cap) {
        return Err(SynthesisError::Config("active cap must be in 1..=20".into()));
    }
    Ok(())
}

/// Highest-priority in-flight instance whose deadline is `<= t`.
fn first_miss(inflight: &BTreeMap<(FlowId, u32), FlowAnalysis>, t: Slot) -> Option<Unschedulable> {
    inflight.values().find(|fa| fa.deadline <= t).map(|fa| {
        let hop = fa.current_hop().unwrap_or(0) as u16;
        Unschedulable {
            instance: InstanceKey {
                flow: fa.spec_id,
                instance: fa.instance,
                hop,
            },
            slot: fa.deadline,
            reason: format!("hop {hop} has not met its local target by the deadline"),
        }
    })
}

/// Worst analytic response time of `flow`, in slots, counting the release slot.
pub fn response_time(policy: &Policy, flow: FlowId) -> Option<Slot> {
    policy
        .analysis
        .iter()
        .filter(|r| r.flow == flow)
        .filter_map(|r| r.completion().map(|c| c - r.release + 1))
        .max()
}

/// A flow whose period is `class * base` for a searched base period.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTemplate {
    pub path: Vec<NodeId>,
    pub class: u32,
    pub reliability: f64,
}

/// Instantiates templates for one base period: implicit deadlines, zero
/// phase, deadline-monotonic priorities with longer routes first on ties.
pub fn flows_for_base(templates: &[FlowTemplate], base: Slot) -> Vec<FlowSpec> {
    let mut order: Vec<usize> = (0..templates.len()).collect();
    order.sort_by_key(|&i| (templates[i].class, std::cmp::Reverse(templates[i].path.len()), i));
    order
        .into_iter()
        .enumerate()
        .map(|(id, i)| {
            let t = &templates[i];
            FlowSpec {
                id: FlowId(id as u32),
                phase: 0,
                period: t.class * base,
                deadline: t.class * base,
                reliability: t.reliability,
                path: t.path.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    /// Smallest schedulable base period, `None` for an empty template set.
    pub base_period: Option<Slot>,
    pub hyperperiod: Slot,
    pub releases: u64,
    pub packets_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("no schedulable base period in {lo}..={hi}")]
    NoSchedulablePeriod { lo: Slot, hi: Slot },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacitySearch {
    pub min_base: Slot,
    pub max_base: Slot,
    /// Linear step; the last failing gap is refined by bisection when > 1.
    pub step: Slot,
    pub slot_ms: f64,
}

impl Default for CapacitySearch {
    fn default() -> Self {
        CapacitySearch {
            min_base: 1,
            max_base: 1000,
            step: 1,
            slot_ms: DEFAULT_SLOT_MS,
        }
    }
}

/// Decreases the base period until the workload stops being schedulable and
/// reports the real-time capacity at the smallest schedulable one.
pub fn capacity_search(
    topo: &Topology,
    templates: &[FlowTemplate],
    config: &SynthesisConfig,
    search: &CapacitySearch,
) -> Result<CapacityResult, SearchError> {
    if templates.is_empty() {
        return Ok(CapacityResult {
            base_period: None,
            hyperperiod: 0,
            releases: 0,
            packets_per_second: 0.0,
        });
    }
    let schedulable = |base: Slot| -> Result<bool, SearchError> {
        match synthesize(topo, &flows_for_base(templates, base), config) {
            Ok(_) => Ok(true),
            Err(e) if e.is_unschedulable() => Ok(false),
            Err(e) => Err(e.into()),
        }
    };
    let step = search.step.max(1);
    let mut best: Option<Slot> = None;
    let mut base = search.max_base;
    loop {
        if base < search.min_base.max(1) {
            break;
        }
        if schedulable(base)? {
            best = Some(base);
        } else if let Some(ok) = best {
            // Bisect between the failure and the last success.
            let (mut lo, mut hi) = (base, ok);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if schedulable(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            best = Some(hi);
            break;
        }
        match base.checked_sub(step) {
            Some(b) => base = b,
            None => break,
        }
    }
    let base = best.ok_or(SearchError::NoSchedulablePeriod {
        lo: search.min_base,
        hi: search.max_base,
    })?;
    let flows = flows_for_base(templates, base);
    let hp = model::hyperperiod(&flows).map_err(SynthesisError::from)?;
    let releases: u64 = flows.iter().map(|f| u64::from(hp / f.period)).sum();
    let seconds = f64::from(hp) * search.slot_ms / 1000.0;
    Ok(CapacityResult {
        base_period: Some(base),
        hyperperiod: hp,
        releases,
        packets_per_second: releases as f64 / seconds,
    })
}

/// Grows the workload one flow at a time until synthesis fails and returns
/// the last schedulable count (at most `limit`).
pub fn max_flows_search<E>(
    mut make: impl FnMut(usize) -> Result<(Topology, Vec<FlowSpec>), E>,
    config: &SynthesisConfig,
    limit: usize,
) -> Result<usize, E>
where
    E: From<SynthesisError>,
{
    let mut best = 0;
    for n in 1..=limit {
        let (topo, flows) = make(n)?;
        match synthesize(&topo, &flows, config) {
            Ok(_) => best = n,
            Err(e) if e.is_unschedulable() => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(best)
}
