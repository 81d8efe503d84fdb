//! Topology and flow-set generators for the experiment families.
//!
//! The mesh generators are synthetic stand-ins: nodes are dropped uniformly
//! in the unit square and joined shortest-distance-first until the requested
//! average degree is reached, then bridged into one component.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Channel, FlowId, FlowSpec, ModelError, NodeId, Slot, Topology, DEFAULT_CHANNELS};
use crate::synthesizer::{flows_for_base, FlowTemplate};

/// Period multipliers of the three rate classes.
pub const CLASS_RATIO: [u32; 3] = [1, 2, 5];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no route between {0} and {1}")]
    Disconnected(NodeId, NodeId),
    #[error("topology has no field devices besides the base station")]
    NoDevices,
    #[error("RTB flows need at least two field devices")]
    TooFewDevices,
    #[error("unknown workload kind {0:?} (expected col, dis, mix or rtb)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    /// Field device to base station.
    Col,
    /// Base station to field device.
    Dis,
    /// Each flow is COL or DIS with equal odds.
    Mix,
    /// Field device to field device, routed through the base station.
    Rtb,
}

impl FromStr for WorkloadKind {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "col" => Ok(WorkloadKind::Col),
            "dis" => Ok(WorkloadKind::Dis),
            "mix" => Ok(WorkloadKind::Mix),
            "rtb" => Ok(WorkloadKind::Rtb),
            _ => Err(WorkloadError::UnknownKind(s.to_string())),
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            WorkloadKind::Col => "col",
            WorkloadKind::Dis => "dis",
            WorkloadKind::Mix => "mix",
            WorkloadKind::Rtb => "rtb",
        };
        f.write_str(s)
    }
}

/// `n` single-hop flows from leaves `1..=n` of a star to its base station,
/// all released at slot 0 with implicit deadlines.
pub fn star_workload(n: u32, period: Slot, reliability: f64) -> Result<(Topology, Vec<FlowSpec>), ModelError> {
    let topo = Topology::star(n, DEFAULT_CHANNELS)?;
    let flows = (0..n)
        .map(|i| FlowSpec {
            id: FlowId(i),
            phase: 0,
            period,
            deadline: period,
            reliability,
            path: vec![NodeId(i + 1), topo.base_station()],
        })
        .collect();
    Ok((topo, flows))
}

/// Random geometric mesh with `n` nodes and roughly `avg_degree` neighbours
/// per node. Links are bidirectional; the base station is the node nearest
/// the centre of the square.
pub fn random_mesh(n: u32, avg_degree: f64, channels: Channel, seed: u64) -> Result<Topology, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let dist = |a: usize, b: usize| ((pos[a].0 - pos[b].0).powi(2) + (pos[a].1 - pos[b].1).powi(2)).sqrt();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n as usize {
        for b in a + 1..n as usize {
            pairs.push((dist(a, b), a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));

    let target = ((f64::from(n) * avg_degree) / 2.0).round() as usize;
    let mut uf = UnionFind::new(n as usize);
    let mut links: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(_, a, b) in pairs.iter().take(target) {
        links.insert((a, b));
        uf.union(a, b);
    }
    // Bridge remaining components with the shortest available links.
    for &(_, a, b) in &pairs {
        if uf.union(a, b) {
            links.insert((a, b));
        }
    }

    let bs = (0..n as usize)
        .min_by(|&a, &b| {
            let da = (pos[a].0 - 0.5).hypot(pos[a].1 - 0.5);
            let db = (pos[b].0 - 0.5).hypot(pos[b].1 - 0.5);
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let edges = links
        .iter()
        .flat_map(|&(a, b)| {
            let (a, b) = (NodeId(a as u32), NodeId(b as u32));
            [(a, b), (b, a)]
        })
        .collect::<Vec<_>>();
    Topology::new((0..n).map(NodeId), edges, NodeId(bs as u32), channels)
}

/// 41-node mesh with average degree 5.5, a synthetic approximation of a
/// building-scale testbed.
pub fn washu_like(seed: u64) -> Topology {
    random_mesh(41, 5.5, DEFAULT_CHANNELS, seed).expect("fixed parameters are valid")
}

/// 85-node mesh with average degree 10.4, a synthetic approximation of a
/// larger multi-floor testbed.
pub fn indriya_like(seed: u64) -> Topology {
    random_mesh(85, 10.4, DEFAULT_CHANNELS, seed).expect("fixed parameters are valid")
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    /// Returns true when `a` and `b` were in different sets.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Shortest-path trees rooted at the base station. BFS visits neighbours in
/// ascending id order, so ties go to the lower id.
#[derive(Debug, Clone)]
pub struct RoutingTrees {
    bs: NodeId,
    /// Next hop towards the base station.
    up: BTreeMap<NodeId, NodeId>,
    /// Parent on the path from the base station.
    down: BTreeMap<NodeId, NodeId>,
}

impl RoutingTrees {
    pub fn new(topo: &Topology) -> Self {
        let bs = topo.base_station();
        let mut preds: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for l in topo.edges() {
            preds.entry(l.dst).or_default().insert(l.src);
        }
        let up = bfs(bs, |n| preds.get(&n).into_iter().flatten().copied().collect());
        let down = bfs(bs, |n| topo.successors(n).collect());
        RoutingTrees { bs, up, down }
    }

    /// Node list from `src` to the base station.
    pub fn uplink(&self, src: NodeId) -> Result<Vec<NodeId>, WorkloadError> {
        let mut path = vec![src];
        let mut cur = src;
        while cur != self.bs {
            cur = *self.up.get(&cur).ok_or(WorkloadError::Disconnected(src, self.bs))?;
            path.push(cur);
        }
        Ok(path)
    }

    /// Node list from the base station to `dst`.
    pub fn downlink(&self, dst: NodeId) -> Result<Vec<NodeId>, WorkloadError> {
        let mut path = vec![dst];
        let mut cur = dst;
        while cur != self.bs {
            cur = *self.down.get(&cur).ok_or(WorkloadError::Disconnected(self.bs, dst))?;
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }
}

fn bfs(root: NodeId, next: impl Fn(NodeId) -> Vec<NodeId>) -> BTreeMap<NodeId, NodeId> {
    let mut parent = BTreeMap::new();
    let mut seen = BTreeSet::from([root]);
    let mut queue = VecDeque::from([root]);
    while let Some(n) = queue.pop_front() {
        let mut succ = next(n);
        succ.sort();
        for s in succ {
            if seen.insert(s) {
                parent.insert(s, n);
                queue.push_back(s);
            }
        }
    }
    parent
}

/// Draws `count` flow templates of the given kind with classes picked
/// uniformly from [`CLASS_RATIO`].
pub fn generate_templates(
    topo: &Topology,
    kind: WorkloadKind,
    count: usize,
    reliability: f64,
    seed: u64,
) -> Result<Vec<FlowTemplate>, WorkloadError> {
    let trees = RoutingTrees::new(topo);
    let devices: Vec<NodeId> = topo
        .nodes()
        .iter()
        .copied()
        .filter(|&n| n != topo.base_station())
        .collect();
    if devices.is_empty() && count > 0 {
        return Err(WorkloadError::NoDevices);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match kind {
            WorkloadKind::Mix if rng.random_bool(0.5) => WorkloadKind::Col,
            WorkloadKind::Mix => WorkloadKind::Dis,
            k => k,
        };
        let path = match kind {
            WorkloadKind::Col => trees.uplink(*devices.choose(&mut rng).expect("non-empty"))?,
            WorkloadKind::Dis => trees.downlink(*devices.choose(&mut rng).expect("non-empty"))?,
            WorkloadKind::Rtb => {
                if devices.len() < 2 {
                    return Err(WorkloadError::TooFewDevices);
                }
                let pick: Vec<_> = devices.choose_multiple(&mut rng, 2).copied().collect();
                let mut path = trees.uplink(pick[0])?;
                path.extend(trees.downlink(pick[1])?.into_iter().skip(1));
                path
            }
            WorkloadKind::Mix => unreachable!("resolved above"),
        };
        let class = *CLASS_RATIO.choose(&mut rng).expect("non-empty");
        out.push(FlowTemplate {
            path,
            class,
            reliability,
        });
    }
    Ok(out)
}

/// A deadline-monotonic flow set for one base period.
pub fn generate_workload(
    topo: &Topology,
    kind: WorkloadKind,
    count: usize,
    base_period: Slot,
    reliability: f64,
    seed: u64,
) -> Result<Vec<FlowSpec>, WorkloadError> {
    let templates = generate_templates(topo, kind, count, reliability, seed)?;
    Ok(flows_for_base(&templates, base_period))
}
