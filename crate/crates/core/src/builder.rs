//! Per-slot pull selection.
//!
//! The slot problem is a 0-1 program over coordinator variables `N_R`,
//! instance variables `I_i` and channel variables `C_{R,ch}` with a
//! power-of-two objective that favours higher-priority instances. Because
//! every constraint is closed under removing instances, the optimum is the
//! lexicographically greatest feasible instance set, which a greedy pass in
//! priority order finds exactly: an instance is kept iff adding it to the
//! already kept ones stays feasible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::model::{Channel, InstanceKey, NodeId, Pull};

/// One released, active instance competing for the slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub key: InstanceKey,
    pub src: NodeId,
    pub dst: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotProblem {
    /// Candidates in any order; priority is the key order.
    pub candidates: Vec<Candidate>,
    /// Channels each node may not use as coordinator in this slot (its
    /// previous-slot channel, and at the wrap the channel of slot 0).
    pub excluded: BTreeMap<NodeId, Vec<Channel>>,
    pub channels: Channel,
    pub service_cap: usize,
}

impl SlotProblem {
    pub fn new(candidates: Vec<Candidate>, channels: Channel, service_cap: usize) -> Self {
        SlotProblem {
            candidates,
            excluded: BTreeMap::new(),
            channels,
            service_cap,
        }
    }

    pub fn exclude(&mut self, node: NodeId, channel: Channel) {
        let e = self.excluded.entry(node).or_default();
        if !e.contains(&channel) {
            e.push(channel);
        }
    }

    fn by_priority(&self) -> Vec<Candidate> {
        let mut c = self.candidates.clone();
        c.sort_by_key(|c| c.key);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SlotAssignment {
    /// Selected instances, highest priority first.
    pub selected: Vec<InstanceKey>,
    pub coordinators: BTreeSet<NodeId>,
    pub channels: BTreeMap<NodeId, Channel>,
}

impl SlotAssignment {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Injective channel map avoiding each coordinator's excluded channels, or
/// `None` when no perfect matching exists. Coordinators earlier in the slice
/// are matched first and prefer low channels.
pub fn assign_channels(
    coordinators: &[NodeId],
    excluded: &BTreeMap<NodeId, Vec<Channel>>,
    channels: Channel,
) -> Option<BTreeMap<NodeId, Channel>> {
    if coordinators.len() > channels as usize {
        return None;
    }
    let allowed = |i: usize, ch: Channel| excluded.get(&coordinators[i]).is_none_or(|ex| !ex.contains(&ch));
    // owner[ch] = index of the coordinator holding channel ch
    let mut owner: Vec<Option<usize>> = vec![None; channels as usize];

    fn augment(
        i: usize,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
        allowed: &dyn Fn(usize, Channel) -> bool,
    ) -> bool {
        for ch in 0..owner.len() {
            if seen[ch] || !allowed(i, ch as Channel) {
                continue;
            }
            seen[ch] = true;
            if owner[ch].is_none_or(|j| augment(j, seen, owner, allowed)) {
                owner[ch] = Some(i);
                return true;
            }
        }
        false
    }

    for i in 0..coordinators.len() {
        let mut seen = vec![false; channels as usize];
        if !augment(i, &mut seen, &mut owner, &allowed) {
            return None;
        }
    }
    Some(
        owner
            .iter()
            .enumerate()
            .filter_map(|(ch, o)| o.map(|i| (coordinators[i], ch as Channel)))
            .collect(),
    )
}

/// Incremental feasibility state for the greedy.
#[derive(Default)]
struct Partial {
    selected: Vec<InstanceKey>,
    /// coordinator -> number of instances in its service list
    load: BTreeMap<NodeId, usize>,
    /// coordinators in the order they were opened
    order: Vec<NodeId>,
    /// sender -> the coordinator it answers
    sender_to: BTreeMap<NodeId, NodeId>,
}

impl Partial {
    fn admits(&self, c: &Candidate, problem: &SlotProblem) -> bool {
        // A selected instance's sender cannot coordinate.
        if self.load.contains_key(&c.src) || self.sender_to.contains_key(&c.dst) {
            return false;
        }
        // A sender answers at most one coordinator.
        if self.sender_to.get(&c.src).is_some_and(|&r| r != c.dst) {
            return false;
        }
        match self.load.get(&c.dst) {
            Some(&n) => n < problem.service_cap,
            None => {
                let mut coords = self.order.clone();
                coords.push(c.dst);
                problem.service_cap > 0 && assign_channels(&coords, &problem.excluded, problem.channels).is_some()
            }
        }
    }

    fn add(&mut self, c: &Candidate) {
        self.selected.push(c.key);
        let n = self.load.entry(c.dst).or_insert(0);
        if *n == 0 {
            self.order.push(c.dst);
        }
        *n += 1;
        self.sender_to.insert(c.src, c.dst);
    }
}

/// Lexicographically optimal assignment for one slot.
pub fn solve_slot(problem: &SlotProblem) -> SlotAssignment {
    let mut partial = Partial::default();
    for c in problem.by_priority() {
        if c.src != c.dst && partial.admits(&c, problem) {
            partial.add(&c);
        }
    }
    let channels = assign_channels(&partial.order, &problem.excluded, problem.channels)
        .expect("every kept coordinator set was checked to be channel feasible");
    SlotAssignment {
        selected: partial.selected,
        coordinators: partial.order.into_iter().collect(),
        channels,
    }
}

/// One pull per coordinator, service list in priority order.
pub fn to_pulls(assignment: &SlotAssignment, problem: &SlotProblem) -> Vec<Pull> {
    let dst: BTreeMap<InstanceKey, NodeId> = problem.candidates.iter().map(|c| (c.key, c.dst)).collect();
    let mut pulls: Vec<Pull> = assignment
        .coordinators
        .iter()
        .map(|&r| Pull {
            coordinator: r,
            service: assignment
                .selected
                .iter()
                .filter(|k| dst.get(k) == Some(&r))
                .copied()
                .collect(),
            channel: assignment.channels[&r],
        })
        .collect();
    pulls.sort_by_key(|p| p.channel);
    pulls
}

/// Plain-text LP listing of the slot problem and the chosen solution.
pub fn lp_listing(problem: &SlotProblem, assignment: &SlotAssignment) -> String {
    let cands = problem.by_priority();
    let n = cands.len();
    let mut nodes = BTreeSet::new();
    for c in &cands {
        nodes.insert(c.src);
        nodes.insert(c.dst);
    }
    let var = |k: &InstanceKey| format!("I_{}_{}_{}", k.flow.0, k.instance, k.hop);
    let mut s = String::new();
    let _ = writeln!(s, "maximize");
    let terms: Vec<String> = cands
        .iter()
        .enumerate()
        .map(|(rank, c)| format!("2^{} {}", n - rank, var(&c.key)))
        .collect();
    let _ = writeln!(
        s,
        "  {}",
        if terms.is_empty() {
            "0".into()
        } else {
            terms.join(" + ")
        }
    );
    let _ = writeln!(s, "subject to");
    for c in &cands {
        let _ = writeln!(s, "  N_{} + {} <= 1", c.src.0, var(&c.key));
        let _ = writeln!(s, "  {} - N_{} <= 0", var(&c.key), c.dst.0);
    }
    for (i, a) in cands.iter().enumerate() {
        for b in &cands[i + 1..] {
            if a.src == b.src && a.dst != b.dst {
                let _ = writeln!(s, "  {} + {} - N_{} <= 1", var(&a.key), var(&b.key), a.src.0);
            }
        }
    }
    for r in &nodes {
        let on_r: Vec<String> = cands.iter().filter(|c| c.dst == *r).map(|c| var(&c.key)).collect();
        if !on_r.is_empty() {
            let _ = writeln!(s, "  {} <= {}", on_r.join(" + "), problem.service_cap);
        }
        let _ = writeln!(s, "  sum_ch C_{}_ch - N_{} = 0", r.0, r.0);
        if let Some(ex) = problem.excluded.get(r) {
            for ch in ex {
                let _ = writeln!(s, "  C_{}_{} = 0", r.0, ch);
            }
        }
    }
    let _ = writeln!(s, "  sum_R C_R_ch <= 1  for ch in 0..{}", problem.channels);
    let _ = writeln!(s, "solution");
    for c in &cands {
        let on = assignment.selected.contains(&c.key) as u8;
        let _ = writeln!(s, "  {} = {}", var(&c.key), on);
    }
    for (r, ch) in &assignment.channels {
        let _ = writeln!(s, "  N_{} = 1, C_{}_{} = 1", r.0, r.0, ch);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlowId;

    const A: NodeId = NodeId(0);
    const B: NodeId = NodeId(1);
    const C: NodeId = NodeId(2);
    const S: NodeId = NodeId(3);

    fn cand(flow: u32, src: NodeId, dst: NodeId) -> Candidate {
        Candidate {
            key: InstanceKey {
                flow: FlowId(flow),
                instance: 0,
                hop: 0,
            },
            src,
            dst,
        }
    }

    fn flows(a: &SlotAssignment) -> Vec<u32> {
        a.selected.iter().map(|k| k.flow.0).collect()
    }

    #[test]
    fn common_receiver_shares_one_pull() {
        let p = SlotProblem::new(vec![cand(1, C, A), cand(0, B, A)], 16, 4);
        let a = solve_slot(&p);
        assert_eq!(flows(&a), vec![0, 1]);
        let pulls = to_pulls(&a, &p);
        assert_eq!(pulls.len(), 1);
        assert_eq!(pulls[0].coordinator, A);
        assert_eq!(pulls[0].service, vec![cand(0, B, A).key, cand(1, C, A).key]);
    }

    #[test]
    fn opposite_link_keeps_higher_priority() {
        let p = SlotProblem::new(vec![cand(0, B, A), cand(1, A, B)], 16, 4);
        assert_eq!(flows(&solve_slot(&p)), vec![0]);
        let p = SlotProblem::new(vec![cand(1, B, A), cand(0, A, B)], 16, 4);
        assert_eq!(flows(&solve_slot(&p)), vec![0]);
    }

    #[test]
    fn common_sender_keeps_higher_priority() {
        let p = SlotProblem::new(vec![cand(0, S, A), cand(1, S, B)], 16, 4);
        assert_eq!(flows(&solve_slot(&p)), vec![0]);
    }

    #[test]
    fn relay_chain_conflicts() {
        // B -> A and C -> B: B would send and receive.
        let p = SlotProblem::new(vec![cand(0, B, A), cand(1, C, B)], 16, 4);
        assert_eq!(flows(&solve_slot(&p)), vec![0]);
    }

    #[test]
    fn empty_problem() {
        let p = SlotProblem::new(vec![], 16, 4);
        let a = solve_slot(&p);
        assert!(a.is_empty());
        assert!(to_pulls(&a, &p).is_empty());
    }

    #[test]
    fn service_cap_is_enforced() {
        let cands = (0..6).map(|i| cand(i, NodeId(10 + i), A)).collect();
        let a = solve_slot(&SlotProblem::new(cands, 16, 1));
        assert_eq!(flows(&a), vec![0]);
    }

    #[test]
    fn to_pulls_uses_channel_map() {
        let p = SlotProblem::new(vec![cand(0, B, A), cand(1, NodeId(5), NodeId(4))], 16, 4);
        let mut a = solve_slot(&p);
        a.channels.insert(A, 5);
        a.channels.insert(NodeId(4), 9);
        let pulls = to_pulls(&a, &p);
        assert_eq!(pulls.len(), 2);
        assert_eq!((pulls[0].coordinator, pulls[0].channel), (A, 5));
        assert_eq!((pulls[1].coordinator, pulls[1].channel), (NodeId(4), 9));
    }

    #[test]
    fn channel_assignment_avoids_previous() {
        let mut ex = BTreeMap::new();
        ex.insert(A, vec![3]);
        let m = assign_channels(&[A], &ex, 16).unwrap();
        assert_ne!(m[&A], 3);
    }

    #[test]
    fn channel_assignment_derangement() {
        let coords: Vec<NodeId> = (0..16).map(NodeId).collect();
        let ex: BTreeMap<_, _> = coords.iter().map(|&n| (n, vec![n.0 as Channel])).collect();
        let m = assign_channels(&coords, &ex, 16).unwrap();
        let used: BTreeSet<_> = m.values().collect();
        assert_eq!(used.len(), 16);
        assert!(m.iter().all(|(n, &ch)| n.0 as Channel != ch));
    }

    #[test]
    fn channel_assignment_pigeonhole() {
        let mut ex = BTreeMap::new();
        ex.insert(A, vec![0]);
        ex.insert(B, vec![0]);
        assert!(assign_channels(&[A, B], &ex, 2).is_none());
    }

    #[test]
    fn channel_shortage_drops_lower_priority_coordinator() {
        let mut p = SlotProblem::new(vec![cand(0, B, A), cand(1, S, C)], 2, 4);
        p.exclude(A, 0);
        p.exclude(C, 0);
        let a = solve_slot(&p);
        assert_eq!(flows(&a), vec![0]);
        assert_eq!(a.channels[&A], 1);
    }

    #[test]
    fn lp_listing_mentions_variables() {
        let p = SlotProblem::new(vec![cand(0, S, A), cand(1, S, B)], 16, 4);
        let a = solve_slot(&p);
        let s = lp_listing(&p, &a);
        assert!(s.contains("I_0_0_0 + I_1_0_0 - N_3 <= 1"));
        assert!(s.contains("I_1_0_0 = 0"));
    }
}
