//! Domain types: topologies, flows, instances, pulls and policies.
//!
//! Everything here is an immutable value once constructed. The checks in
//! [`validate_policy`] are the well-formedness rules every synthesized policy
//! has to satisfy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slot index inside a hyperperiod.
pub type Slot = u32;
/// Channel offset in `0..K`.
pub type Channel = u16;

/// Default number of 802.15.4 channels.
pub const DEFAULT_CHANNELS: Channel = 16;
/// Default service-list cap.
pub const DEFAULT_SERVICE_CAP: usize = 4;
/// Default active-list cap.
pub const DEFAULT_ACTIVE_CAP: usize = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Flow identifier. Doubles as the static priority: lower is more important.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.0)
    }
}

/// A directed wireless link `src -> dst`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no flows")]
    NoFlows,
    #[error("hyperperiod overflows the slot counter")]
    HyperperiodOverflow,
    #[error("flow {0} has a zero period")]
    ZeroPeriod(FlowId),
    #[error("base station {0} is not a node of the topology")]
    BaseStationMissing(NodeId),
    #[error("edge {0} -> {1} references an unknown node")]
    DanglingEdge(NodeId, NodeId),
    #[error("at least 2 channels are required, got {0}")]
    TooFewChannels(Channel),
    #[error("flow {0}: deadline must be in 1..=period")]
    BadDeadline(FlowId),
    #[error("flow {0}: phase + deadline exceeds the period")]
    PhaseTooLate(FlowId),
    #[error("flow {flow}: target reliability {value} is not in (0, 1)")]
    BadReliability { flow: FlowId, value: f64 },
    #[error("flow {0}: path needs at least two nodes")]
    PathTooShort(FlowId),
    #[error("flow {flow}: path uses {src} -> {dst}, which is not an edge")]
    MissingEdge { flow: FlowId, src: NodeId, dst: NodeId },
    #[error("duplicate flow priority {0}")]
    DuplicatePriority(FlowId),
}

/// Communication graph plus the channel budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct Topology {
    nodes: BTreeSet<NodeId>,
    edges: BTreeSet<Link>,
    base_station: NodeId,
    channels: Channel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyRepr {
    nodes: Vec<NodeId>,
    edges: Vec<(NodeId, NodeId)>,
    base_station: NodeId,
    #[serde(default = "default_channels")]
    channels: Channel,
}

fn default_channels() -> Channel {
    DEFAULT_CHANNELS
}

impl TryFrom<TopologyRepr> for Topology {
    type Error = ModelError;

    fn try_from(repr: TopologyRepr) -> Result<Self, Self::Error> {
        Topology::new(repr.nodes, repr.edges, repr.base_station, repr.channels)
    }
}

impl From<Topology> for TopologyRepr {
    fn from(topo: Topology) -> Self {
        TopologyRepr {
            nodes: topo.nodes.into_iter().collect(),
            edges: topo.edges.into_iter().map(|l| (l.src, l.dst)).collect(),
            base_station: topo.base_station,
            channels: topo.channels,
        }
    }
}

impl Topology {
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        base_station: NodeId,
        channels: Channel,
    ) -> Result<Self, ModelError> {
        let nodes: BTreeSet<NodeId> = nodes.into_iter().collect();
        if !nodes.contains(&base_station) {
            return Err(ModelError::BaseStationMissing(base_station));
        }
        if channels < 2 {
            return Err(ModelError::TooFewChannels(channels));
        }
        let mut set = BTreeSet::new();
        for (src, dst) in edges {
            if !nodes.contains(&src) || !nodes.contains(&dst) {
                return Err(ModelError::DanglingEdge(src, dst));
            }
            set.insert(Link { src, dst });
        }
        Ok(Topology {
            nodes,
            edges: set,
            base_station,
            channels,
        })
    }

    /// Star with the base station `0` and `leaves` field devices `1..=leaves`,
    /// linked in both directions.
    pub fn star(leaves: u32, channels: Channel) -> Result<Self, ModelError> {
        let bs = NodeId(0);
        let nodes = (0..=leaves).map(NodeId);
        let edges = (1..=leaves).flat_map(|i| [(NodeId(i), bs), (bs, NodeId(i))]);
        Topology::new(nodes, edges, bs, channels)
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<Link> {
        &self.edges
    }

    pub fn base_station(&self) -> NodeId {
        self.base_station
    }

    pub fn channels(&self) -> Channel {
        self.channels
    }

    pub fn with_channels(mut self, channels: Channel) -> Result<Self, ModelError> {
        if channels < 2 {
            return Err(ModelError::TooFewChannels(channels));
        }
        self.channels = channels;
        Ok(self)
    }

    pub fn has_edge(&self, src: NodeId, dst: NodeId) -> bool {
        self.edges.contains(&Link { src, dst })
    }

    /// Out-neighbours of `node`, ascending.
    pub fn successors(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let lo = Link {
            src: node,
            dst: NodeId(0),
        };
        self.edges.range(lo..).take_while(move |l| l.src == node).map(|l| l.dst)
    }
}

/// Periodic real-time flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub id: FlowId,
    pub phase: Slot,
    pub period: Slot,
    pub deadline: Slot,
    pub reliability: f64,
    pub path: Vec<NodeId>,
}

impl FlowSpec {
    pub fn hop_count(&self) -> usize {
        self.path.len().saturating_sub(1)
    }

    /// Per-hop target `T^(1/hops)`, nudged up to the smallest double whose
    /// `hops`-fold product is still `>= T` so per-hop checks imply the
    /// end-to-end one in floating point.
    pub fn local_target(&self) -> f64 {
        let hops = self.hop_count().max(1);
        let mut x = self.reliability.powf(1.0 / hops as f64);
        while (0..hops).fold(1.0, |acc, _| acc * x) < self.reliability {
            x = f64::from_bits(x.to_bits() + 1);
        }
        x
    }

    pub fn link(&self, hop: usize) -> Link {
        Link {
            src: self.path[hop],
            dst: self.path[hop + 1],
        }
    }

    pub fn release(&self, instance: u32) -> Slot {
        self.phase + instance * self.period
    }

    /// Number of instances released in one hyperperiod.
    pub fn instances_per(&self, hyperperiod: Slot) -> u32 {
        hyperperiod / self.period
    }

    /// The instance `k`, positioned on hop `hop`.
    pub fn instance(&self, k: u32, hop: u16) -> FlowInstance {
        let release = self.release(k);
        FlowInstance {
            key: InstanceKey {
                flow: self.id,
                instance: k,
                hop,
            },
            release,
            deadline: release + self.deadline,
            link: self.link(hop as usize),
            local_target: self.local_target(),
        }
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), ModelError> {
        if self.period == 0 {
            return Err(ModelError::ZeroPeriod(self.id));
        }
        if self.deadline == 0 || self.deadline > self.period {
            return Err(ModelError::BadDeadline(self.id));
        }
        if self.phase + self.deadline > self.period {
            return Err(ModelError::PhaseTooLate(self.id));
        }
        if !(self.reliability > 0.0 && self.reliability < 1.0) {
            return Err(ModelError::BadReliability {
                flow: self.id,
                value: self.reliability,
            });
        }
        if self.path.len() < 2 {
            return Err(ModelError::PathTooShort(self.id));
        }
        for w in self.path.windows(2) {
            if !topo.has_edge(w[0], w[1]) {
                return Err(ModelError::MissingEdge {
                    flow: self.id,
                    src: w[0],
                    dst: w[1],
                });
            }
        }
        Ok(())
    }
}

/// Validates every flow against the topology and checks priorities are unique.
pub fn validate_flows(topo: &Topology, flows: &[FlowSpec]) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for flow in flows {
        flow.validate(topo)?;
        if !seen.insert(flow.id) {
            return Err(ModelError::DuplicatePriority(flow.id));
        }
    }
    Ok(())
}

/// Identifies one hop (subflow) of one released instance.
///
/// The derived ordering is the service priority: flow id first, then the
/// instance index, then the hop.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceKey {
    pub flow: FlowId,
    pub instance: u32,
    pub hop: u16,
}

impl fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "J{}.{}#{}", self.flow.0, self.instance, self.hop)
    }
}

/// A released instance positioned on one hop of its path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowInstance {
    pub key: InstanceKey,
    pub release: Slot,
    pub deadline: Slot,
    pub link: Link,
    pub local_target: f64,
}

/// A receiver-initiated pull: `coordinator` asks for the first instance of
/// `service` it has not yet executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pull {
    pub coordinator: NodeId,
    pub service: Vec<InstanceKey>,
    pub channel: Channel,
}

/// Analysis of one hop of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    /// Slot in which the hop met its local target.
    pub completion: Slot,
    /// Reliability lower bound at completion.
    pub bound: f64,
    /// Bound after every pull of the hop's coordinator while the hop was tracked.
    pub trajectory: Vec<(Slot, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub flow: FlowId,
    pub instance: u32,
    pub release: Slot,
    pub deadline: Slot,
    pub hops: Vec<HopRecord>,
}

impl InstanceRecord {
    /// Slot in which the final hop met its target, if all hops finished.
    pub fn completion(&self) -> Option<Slot> {
        self.hops.last().map(|h| h.completion)
    }

    /// Product of the per-hop bounds.
    pub fn end_to_end(&self) -> f64 {
        self.hops.iter().map(|h| h.bound).product()
    }
}

/// Synthesis parameters a policy was built with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub hyperperiod: Slot,
    pub channels: Channel,
    pub m: f64,
    pub service_cap: usize,
    pub active_cap: usize,
}

/// Channels x slots matrix of pulls plus the analysis that certifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub header: PolicyHeader,
    /// `grid[t]` holds the pulls of slot `t`, ascending by channel.
    pub grid: Vec<Vec<Pull>>,
    pub analysis: Vec<InstanceRecord>,
}

impl Policy {
    pub fn empty(header: PolicyHeader) -> Self {
        Policy {
            header,
            grid: vec![Vec::new(); header.hyperperiod as usize],
            analysis: Vec::new(),
        }
    }

    pub fn hyperperiod(&self) -> Slot {
        self.header.hyperperiod
    }

    pub fn pull_count(&self) -> usize {
        self.grid.iter().map(Vec::len).sum()
    }

    pub fn record(&self, flow: FlowId, instance: u32) -> Option<&InstanceRecord> {
        self.analysis.iter().find(|r| r.flow == flow && r.instance == instance)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of all flow periods.
pub fn hyperperiod(flows: &[FlowSpec]) -> Result<Slot, ModelError> {
    if flows.is_empty() {
        return Err(ModelError::NoFlows);
    }
    let mut h: u64 = 1;
    for f in flows {
        if f.period == 0 {
            return Err(ModelError::ZeroPeriod(f.id));
        }
        let p = u64::from(f.period);
        h = (h / gcd(h, p)).checked_mul(p).ok_or(ModelError::HyperperiodOverflow)?;
        if h > u64::from(Slot::MAX) {
            return Err(ModelError::HyperperiodOverflow);
        }
    }
    Ok(h as Slot)
}

/// Well-formedness rule broken by a policy.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// A node coordinates more than one pull in a slot.
    DoubleCoordinator,
    /// A coordinator is the sender of an instance serviced in the same slot.
    SenderIsReceiver,
    /// A sender serves pulls of two different coordinators in one slot.
    SenderTransmitsTwice,
    /// Hop `h + 1` is pulled before hop `h` met its local target.
    HopPrecedence,
    /// A coordinator keeps its channel across consecutive slots.
    ChannelReuse,
    /// Two pulls share a channel in one slot, or a channel is out of range.
    ChannelCollision,
    /// A pull whose service list is empty, unsorted, too long, or does not
    /// end at the coordinator.
    MalformedPull,
    /// An instance completes at or after its absolute deadline, or never.
    DeadlineMiss,
    /// An instance's end-to-end bound falls short of the flow target.
    ReliabilityShortfall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub slot: Option<Slot>,
    pub channel: Option<Channel>,
    pub nodes: Vec<NodeId>,
    pub instance: Option<InstanceKey>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.rule)?;
        if let Some(t) = self.slot {
            write!(f, " slot={t}")?;
        }
        if let Some(c) = self.channel {
            write!(f, " ch={c}")?;
        }
        if !self.nodes.is_empty() {
            let nodes: Vec<String> = self.nodes.iter().map(ToString::to_string).collect();
            write!(f, " nodes=[{}]", nodes.join(","))?;
        }
        if let Some(k) = self.instance {
            write!(f, " instance={k}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

struct Violations(Vec<Violation>);

impl Violations {
    fn push(
        &mut self,
        rule: Rule,
        slot: Option<Slot>,
        channel: Option<Channel>,
        nodes: Vec<NodeId>,
        instance: Option<InstanceKey>,
        detail: impl Into<String>,
    ) {
        self.0.push(Violation {
            rule,
            slot,
            channel,
            nodes,
            instance,
            detail: detail.into(),
        });
    }
}

/// Checks every well-formedness rule and returns one record per breach.
pub fn validate_policy(policy: &Policy, topo: &Topology, flows: &[FlowSpec]) -> Vec<Violation> {
    let mut out = Violations(Vec::new());
    let by_id: BTreeMap<FlowId, &FlowSpec> = flows.iter().map(|f| (f.id, f)).collect();
    let hp = policy.hyperperiod();
    let k = policy.header.channels;

    // Per-slot structural checks.
    for (t, pulls) in policy.grid.iter().enumerate() {
        let t = t as Slot;
        let mut channels_used = BTreeSet::new();
        let mut coordinators = BTreeSet::new();
        // sender -> coordinators it may answer in this slot
        let mut senders: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();

        for pull in pulls {
            let ch = Some(pull.channel);
            if pull.channel >= k || !channels_used.insert(pull.channel) {
                out.push(
                    Rule::ChannelCollision,
                    Some(t),
                    ch,
                    vec![pull.coordinator],
                    None,
                    "channel out of range or already used in this slot",
                );
            }
            if !coordinators.insert(pull.coordinator) {
                out.push(
                    Rule::DoubleCoordinator,
                    Some(t),
                    ch,
                    vec![pull.coordinator],
                    None,
                    "node coordinates more than one pull",
                );
            }
            if pull.service.is_empty() || pull.service.len() > policy.header.service_cap {
                out.push(
                    Rule::MalformedPull,
                    Some(t),
                    ch,
                    vec![pull.coordinator],
                    None,
                    format!("service list length {}", pull.service.len()),
                );
            }
            if pull.service.windows(2).any(|w| w[0] >= w[1]) {
                out.push(
                    Rule::MalformedPull,
                    Some(t),
                    ch,
                    vec![pull.coordinator],
                    None,
                    "service list not strictly priority ordered",
                );
            }
            for key in &pull.service {
                let Some(flow) = by_id.get(&key.flow) else {
                    out.push(
                        Rule::MalformedPull,
                        Some(t),
                        ch,
                        vec![pull.coordinator],
                        Some(*key),
                        "unknown flow",
                    );
                    continue;
                };
                if key.hop as usize >= flow.hop_count() {
                    out.push(
                        Rule::MalformedPull,
                        Some(t),
                        ch,
                        vec![pull.coordinator],
                        Some(*key),
                        "hop index beyond the path",
                    );
                    continue;
                }
                let link = flow.link(key.hop as usize);
                if !topo.has_edge(link.src, link.dst) {
                    out.push(
                        Rule::MalformedPull,
                        Some(t),
                        ch,
                        vec![link.src, link.dst],
                        Some(*key),
                        "active link is not a topology edge",
                    );
                }
                if link.dst != pull.coordinator {
                    out.push(
                        Rule::MalformedPull,
                        Some(t),
                        ch,
                        vec![pull.coordinator, link.dst],
                        Some(*key),
                        "active link does not end at the coordinator",
                    );
                }
                senders.entry(link.src).or_default().insert(pull.coordinator);
            }
        }

        for (sender, receivers) in &senders {
            if coordinators.contains(sender) {
                let mut nodes = vec![*sender];
                nodes.extend(receivers.iter().copied());
                out.push(
                    Rule::SenderIsReceiver,
                    Some(t),
                    None,
                    nodes,
                    None,
                    "node must send and receive in the same slot",
                );
            }
            if receivers.len() > 1 {
                let mut nodes = vec![*sender];
                nodes.extend(receivers.iter().copied());
                out.push(
                    Rule::SenderTransmitsTwice,
                    Some(t),
                    None,
                    nodes,
                    None,
                    "sender serves more than one coordinator",
                );
            }
        }
    }

    // Channel hopping, cyclically across the hyperperiod boundary.
    if hp >= 2 {
        for t in 0..hp {
            let next = (t + 1) % hp;
            for pull in &policy.grid[t as usize] {
                let reused = policy.grid[next as usize]
                    .iter()
                    .any(|p| p.coordinator == pull.coordinator && p.channel == pull.channel);
                if reused {
                    out.push(
                        Rule::ChannelReuse,
                        Some(next),
                        Some(pull.channel),
                        vec![pull.coordinator],
                        None,
                        format!("channel also used in slot {t}"),
                    );
                }
            }
        }
    }

    // Pull slots per hop, used for precedence.
    let mut hop_slots: BTreeMap<InstanceKey, (Slot, Slot)> = BTreeMap::new();
    for (t, pulls) in policy.grid.iter().enumerate() {
        for key in pulls.iter().flat_map(|p| p.service.iter()) {
            let e = hop_slots.entry(*key).or_insert((t as Slot, t as Slot));
            e.1 = t as Slot;
        }
    }
    let records: BTreeMap<(FlowId, u32), &InstanceRecord> =
        policy.analysis.iter().map(|r| ((r.flow, r.instance), r)).collect();

    for (key, (first, _)) in &hop_slots {
        if key.hop == 0 {
            continue;
        }
        let prev = InstanceKey {
            hop: key.hop - 1,
            ..*key
        };
        let prev_done = records
            .get(&(key.flow, key.instance))
            .and_then(|r| r.hops.get(prev.hop as usize))
            .map(|h| h.completion);
        let prev_last = hop_slots.get(&prev).map(|s| s.1);
        let ok = match (prev_done, prev_last) {
            (Some(done), Some(last)) => *first > done && *first > last,
            _ => false,
        };
        if !ok {
            out.push(
                Rule::HopPrecedence,
                Some(*first),
                None,
                Vec::new(),
                Some(*key),
                "pulled before the previous hop met its local target",
            );
        }
    }

    // Every released instance meets its deadline and reliability target.
    for flow in flows {
        for k in 0..flow.instances_per(hp) {
            let key = InstanceKey {
                flow: flow.id,
                instance: k,
                hop: 0,
            };
            let deadline = flow.release(k) + flow.deadline;
            match records.get(&(flow.id, k)) {
                Some(rec) if rec.hops.len() == flow.hop_count() => {
                    let done = rec.completion().unwrap_or(Slot::MAX);
                    if done >= deadline {
                        out.push(
                            Rule::DeadlineMiss,
                            Some(done),
                            None,
                            Vec::new(),
                            Some(key),
                            format!("completes in slot {done}, deadline {deadline}"),
                        );
                    }
                    let e2e = rec.end_to_end();
                    if e2e < flow.reliability {
                        out.push(
                            Rule::ReliabilityShortfall,
                            rec.completion(),
                            None,
                            Vec::new(),
                            Some(key),
                            format!("bound {e2e} below target {}", flow.reliability),
                        );
                    }
                }
                _ => out.push(
                    Rule::DeadlineMiss,
                    None,
                    None,
                    Vec::new(),
                    Some(key),
                    "instance never completes all hops",
                ),
            }
        }
    }

    out.0
}
