//! Slot-level replay of a policy against stochastic link processes.
//!
//! At run time a coordinator attempts the first instance of its service list
//! that it has not executed yet. One Bernoulli draw covers the request and
//! the response. A sender that no longer holds the packet answers with a
//! dropped marker: the instance counts as executed but nothing is delivered.
//!
//! Draws come from ChaCha8 with the hyperperiod index as stream and the
//! `(slot, channel)` cell as word position, so any block of hyperperiods can
//! be replayed on its own and sharded runs match sequential ones.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Channel, FlowId, FlowSpec, InstanceKey, Link, NodeId, Policy, Slot};

/// Words reserved per `(slot, channel)` cell.
const WORDS_PER_CELL: u128 = 16;

pub const DEFAULT_WINDOW: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkModel {
    Constant(f64),
    /// Fresh uniform draw in `[lo, hi]` every slot.
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Quality per absolute slot, repeated when exhausted.
    Trace(Vec<f64>),
    /// A constant quality allowed to fall below the threshold.
    BelowThreshold(f64),
}

impl LinkModel {
    fn check(&self, m: f64) -> Result<(), SimError> {
        let ok = |q: f64| (m..=1.0).contains(&q);
        let fine = match self {
            LinkModel::Constant(q) => ok(*q),
            LinkModel::Uniform { lo, hi } => lo <= hi && ok(*lo) && ok(*hi),
            LinkModel::Trace(qs) => !qs.is_empty() && qs.iter().all(|&q| ok(q)),
            LinkModel::BelowThreshold(q) => (0.0..=1.0).contains(q),
        };
        if fine {
            Ok(())
        } else {
            Err(SimError::BadLinkModel(format!("{self:?} leaves [{m}, 1]")))
        }
    }

    fn quality(&self, abs_slot: u64, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LinkModel::Constant(q) | LinkModel::BelowThreshold(q) => *q,
            LinkModel::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            LinkModel::Trace(qs) => qs[(abs_slot % qs.len() as u64) as usize],
        }
    }
}

/// Link models for every link, with optional per-link overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkProcess {
    pub default: LinkModel,
    pub overrides: BTreeMap<Link, LinkModel>,
}

impl LinkProcess {
    pub fn uniform(model: LinkModel) -> Self {
        LinkProcess {
            default: model,
            overrides: BTreeMap::new(),
        }
    }

    fn model(&self, link: &Link) -> &LinkModel {
        self.overrides.get(link).unwrap_or(&self.default)
    }

    fn check(&self, m: f64) -> Result<(), SimError> {
        self.default.check(m)?;
        self.overrides.values().try_for_each(|l| l.check(m))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("pull references unknown instance {0}")]
    UnknownInstance(InstanceKey),
    #[error("link model rejected: {0}")]
    BadLinkModel(String),
    #[error("at least one hyperperiod is required")]
    NoHyperperiods,
}

#[derive(Debug, Clone)]
pub(crate) struct HopInfo {
    pub(crate) link: Link,
    pub(crate) instance: usize,
    pub(crate) prev: Option<usize>,
    pub(crate) last: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct InstanceInfo {
    pub(crate) flow: usize,
    pub(crate) release: Slot,
}

#[derive(Debug, Clone)]
pub struct CompiledPull {
    pub coordinator: NodeId,
    pub channel: Channel,
    /// Hop indices in priority order.
    service: Vec<usize>,
}

/// A policy flattened into index arrays for fast replay.
#[derive(Debug, Clone)]
pub struct CompiledPolicy {
    hyperperiod: Slot,
    channels: Channel,
    m: f64,
    slots: Vec<Vec<CompiledPull>>,
    pub(crate) keys: Vec<InstanceKey>,
    pub(crate) hops: Vec<HopInfo>,
    pub(crate) instances: Vec<InstanceInfo>,
    pub(crate) flows: Vec<FlowId>,
    bounds: Vec<f64>,
}

impl CompiledPolicy {
    pub fn new(policy: &Policy, flows: &[FlowSpec]) -> Result<Self, SimError> {
        let hp = policy.hyperperiod();
        let mut index: BTreeMap<InstanceKey, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut hops = Vec::new();
        let mut instances = Vec::new();
        let mut bounds = Vec::new();
        for (fi, f) in flows.iter().enumerate() {
            let mut bound = 1.0f64;
            for k in 0..f.instances_per(hp) {
                let inst = instances.len();
                instances.push(InstanceInfo {
                    flow: fi,
                    release: f.release(k),
                });
                if let Some(r) = policy.record(f.id, k) {
                    bound = bound.min(r.end_to_end());
                } else {
                    bound = 0.0;
                }
                for h in 0..f.hop_count() {
                    let key = InstanceKey {
                        flow: f.id,
                        instance: k,
                        hop: h as u16,
                    };
                    index.insert(key, hops.len());
                    keys.push(key);
                    hops.push(HopInfo {
                        link: f.link(h),
                        instance: inst,
                        prev: (h > 0).then(|| hops.len() - 1),
                        last: h + 1 == f.hop_count(),
                    });
                }
            }
            bounds.push(bound);
        }
        let slots = policy
            .grid
            .iter()
            .map(|pulls| {
                pulls
                    .iter()
                    .map(|p| {
                        let service = p
                            .service
                            .iter()
                            .map(|k| index.get(k).copied().ok_or(SimError::UnknownInstance(*k)))
                            .collect::<Result<_, _>>()?;
                        Ok(CompiledPull {
                            coordinator: p.coordinator,
                            channel: p.channel,
                            service,
                        })
                    })
                    .collect::<Result<Vec<_>, SimError>>()
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        Ok(CompiledPolicy {
            hyperperiod: hp,
            channels: policy.header.channels,
            m: policy.header.m,
            slots,
            keys,
            hops,
            instances,
            flows: flows.iter().map(|f| f.id).collect(),
            bounds,
        })
    }

    pub fn hyperperiod(&self) -> Slot {
        self.hyperperiod
    }

    pub fn slot(&self, t: Slot) -> &[CompiledPull] {
        &self.slots[t as usize]
    }

    pub fn fresh_state(&self) -> RuntimeState {
        RuntimeState {
            executed: vec![false; self.hops.len()],
            payload: vec![false; self.hops.len()],
            delivered: vec![None; self.instances.len()],
        }
    }

    /// Flow of every tracked instance paired with its delivery slot.
    pub fn deliveries<'a>(&'a self, state: &'a RuntimeState) -> impl Iterator<Item = (FlowId, Option<Slot>)> + 'a {
        self.instances
            .iter()
            .zip(&state.delivered)
            .map(|(i, d)| (self.flows[i.flow], *d))
    }
}

/// Per-hyperperiod run-time marks: which hops were executed by their
/// coordinator, which of those carried the payload, and delivery slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeState {
    pub(crate) executed: Vec<bool>,
    pub(crate) payload: Vec<bool>,
    pub(crate) delivered: Vec<Option<Slot>>,
}

impl RuntimeState {
    fn reset(&mut self) {
        self.executed.fill(false);
        self.payload.fill(false);
        self.delivered.fill(None);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullEvent {
    pub slot: Slot,
    pub channel: Channel,
    pub coordinator: NodeId,
    /// `None` when every serviced instance was already executed.
    pub attempted: Option<InstanceKey>,
    pub sender: Option<NodeId>,
    pub success: bool,
    pub payload: bool,
}

/// Executes one pull. `draw` decides the round trip over the given link.
pub fn execute_pull_runtime(
    policy: &CompiledPolicy,
    state: &mut RuntimeState,
    slot: Slot,
    pull: &CompiledPull,
    draw: impl FnOnce(&Link) -> bool,
) -> PullEvent {
    let mut event = PullEvent {
        slot,
        channel: pull.channel,
        coordinator: pull.coordinator,
        attempted: None,
        sender: None,
        success: false,
        payload: false,
    };
    let Some(&h) = pull.service.iter().find(|&&h| !state.executed[h]) else {
        return event;
    };
    let hop = &policy.hops[h];
    event.attempted = Some(policy.keys[h]);
    event.sender = Some(hop.link.src);
    if !draw(&hop.link) {
        return event;
    }
    let held = match hop.prev {
        None => policy.instances[hop.instance].release <= slot,
        Some(p) => state.payload[p],
    };
    state.executed[h] = true;
    state.payload[h] = held;
    if held && hop.last {
        state.delivered[hop.instance] = Some(slot);
    }
    event.success = true;
    event.payload = held;
    event
}

/// Replays slot `t` and returns the number of run-time conflicts: nodes that
/// would send and receive at once, or send to two coordinators.
fn replay_slot(
    policy: &CompiledPolicy,
    state: &mut RuntimeState,
    t: Slot,
    mut draw: impl FnMut(&CompiledPull, &Link) -> bool,
) -> u64 {
    let pulls = policy.slot(t);
    if pulls.is_empty() {
        return 0;
    }
    // (sender, coordinator) of every attempted transmission.
    let mut tx: Vec<(NodeId, NodeId)> = Vec::with_capacity(pulls.len());
    for pull in pulls {
        let ev = execute_pull_runtime(policy, state, t, pull, |l| draw(pull, l));
        if let Some(s) = ev.sender {
            tx.push((s, ev.coordinator));
        }
    }
    let mut conflicts = 0;
    for (i, &(s, _)) in tx.iter().enumerate() {
        let receives = tx.iter().any(|&(_, r)| r == s);
        let twice = tx[..i].iter().any(|&(s2, _)| s2 == s);
        if (receives || tx[i + 1..].iter().any(|&(s2, _)| s2 == s)) && !twice {
            conflicts += 1;
        }
    }
    conflicts
}

fn run_hyperperiod(
    policy: &CompiledPolicy,
    links: &LinkProcess,
    seed: u64,
    index: u64,
    state: &mut RuntimeState,
) -> u64 {
    state.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let hp = u64::from(policy.hyperperiod);
    let k = u128::from(policy.channels);
    let mut conflicts = 0;
    for t in 0..policy.hyperperiod {
        conflicts += replay_slot(policy, state, t, |pull, link| {
            rng.set_word_pos((u128::from(t) * k + u128::from(pull.channel)) * WORDS_PER_CELL);
            let q = links.model(link).quality(index * hp + u64::from(t), &mut rng);
            rng.random::<f64>() < q
        });
    }
    conflicts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub id: FlowId,
    pub instances: u64,
    pub delivered: u64,
    pub pdr: f64,
    /// Binomial standard error of `pdr`.
    pub sigma: f64,
    /// Smallest analytic end-to-end bound over the flow's instances.
    pub bound: f64,
    pub max_response: Option<Slot>,
    /// PDR per window of hyperperiods.
    pub windows: Vec<f64>,
}

impl FlowStats {
    /// Standard error a PDR exactly at the bound would have.
    pub fn bound_sigma(&self) -> f64 {
        binomial_sigma(self.bound, self.instances)
    }

    /// Whether the observed PDR sits no more than `k` standard errors below
    /// the analytic bound.
    pub fn dominates_bound(&self, k: f64) -> bool {
        self.pdr >= self.bound - k * self.bound_sigma()
    }
}

pub fn binomial_sigma(p: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub hyperperiods: u64,
    pub seed: u64,
    pub window: u64,
    pub runtime_conflicts: u64,
    pub flows: Vec<FlowStats>,
}

impl RunStats {
    pub fn min_pdr(&self) -> f64 {
        self.flows.iter().map(|f| f.pdr).fold(1.0, f64::min)
    }

    /// `(window index, pdr)` points of one flow.
    pub fn window_series(&self, flow: FlowId) -> Vec<(f64, f64)> {
        self.flows
            .iter()
            .find(|f| f.id == flow)
            .map(|f| f.windows.iter().enumerate().map(|(i, p)| (i as f64, *p)).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub hyperperiods: u64,
    pub seed: u64,
    pub window: u64,
}

impl RunConfig {
    pub fn new(hyperperiods: u64, seed: u64) -> Self {
        RunConfig {
            hyperperiods,
            seed,
            window: DEFAULT_WINDOW,
        }
    }
}

struct BlockCounts {
    delivered: Vec<u64>,
    total: Vec<u64>,
    max_response: Vec<Option<Slot>>,
    conflicts: u64,
}

fn run_block(policy: &CompiledPolicy, links: &LinkProcess, seed: u64, range: std::ops::Range<u64>) -> BlockCounts {
    let nf = policy.flows.len();
    let mut c = BlockCounts {
        delivered: vec![0; nf],
        total: vec![0; nf],
        max_response: vec![None; nf],
        conflicts: 0,
    };
    let mut state = policy.fresh_state();
    for index in range {
        c.conflicts += run_hyperperiod(policy, links, seed, index, &mut state);
        for (inst, d) in policy.instances.iter().zip(&state.delivered) {
            c.total[inst.flow] += 1;
            if let Some(slot) = d {
                c.delivered[inst.flow] += 1;
                let rt = slot - inst.release + 1;
                let m = &mut c.max_response[inst.flow];
                *m = Some(m.map_or(rt, |x| x.max(rt)));
            }
        }
    }
    c
}

/// Replays `config.hyperperiods` hyperperiods, one window per parallel block.
pub fn run(policy: &Policy, flows: &[FlowSpec], links: &LinkProcess, config: &RunConfig) -> Result<RunStats, SimError> {
    let compiled = CompiledPolicy::new(policy, flows)?;
    run_compiled(&compiled, links, config)
}

pub fn run_compiled(policy: &CompiledPolicy, links: &LinkProcess, config: &RunConfig) -> Result<RunStats, SimError> {
    if config.hyperperiods == 0 {
        return Err(SimError::NoHyperperiods);
    }
    links.check(policy.m)?;
    let window = config.window.max(1);
    let blocks: Vec<_> = (0..config.hyperperiods.div_ceil(window))
        .map(|b| b * window..((b + 1) * window).min(config.hyperperiods))
        .collect();
    let counts: Vec<BlockCounts> = blocks
        .into_par_iter()
        .map(|r| run_block(policy, links, config.seed, r))
        .collect();

    let flows = policy
        .flows
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let delivered: u64 = counts.iter().map(|c| c.delivered[i]).sum();
            let instances: u64 = counts.iter().map(|c| c.total[i]).sum();
            let pdr = if instances == 0 {
                0.0
            } else {
                delivered as f64 / instances as f64
            };
            FlowStats {
                id,
                instances,
                delivered,
                pdr,
                sigma: binomial_sigma(pdr, instances),
                bound: policy.bounds[i],
                max_response: counts.iter().filter_map(|c| c.max_response[i]).max(),
                windows: counts
                    .iter()
                    .map(|c| match c.total[i] {
                        0 => 0.0,
                        n => c.delivered[i] as f64 / n as f64,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(RunStats {
        hyperperiods: config.hyperperiods,
        seed: config.seed,
        window,
        runtime_conflicts: counts.iter().map(|c| c.conflicts).sum(),
        flows,
    })
}

/// Minimum per-flow PDR under constant link quality at each grid point.
pub fn degradation_sweep(
    policy: &Policy,
    flows: &[FlowSpec],
    grid: &[f64],
    config: &RunConfig,
) -> Result<Vec<(f64, f64)>, SimError> {
    let compiled = CompiledPolicy::new(policy, flows)?;
    grid.iter()
        .map(|&q| {
            let links = LinkProcess::uniform(LinkModel::BelowThreshold(q));
            Ok((q, run_compiled(&compiled, &links, config)?.min_pdr()))
        })
        .collect()
}

/// `{0.50, 0.55, ..., 1.00}`.
pub fn default_quality_grid() -> Vec<f64> {
    (0..=10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}
