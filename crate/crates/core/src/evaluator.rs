//! Per-coordinator reliability tracking.
//!
//! A coordinator keeps the joint success/failure law of the instances in its
//! active list as a dense probability vector indexed by bitmask: bit `b` set
//! means the instance in active position `b` has been executed (its pull
//! succeeded). Pulls move probability mass upward along the bit lattice, so
//! the vector is updated in place by a single descending sweep.
//!
//! With every link quality pinned to `m` the marginals are the reliability
//! lower bounds used during synthesis; with true per-slot qualities they are
//! the exact reliabilities.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{FlowInstance, FlowSpec, HopRecord, InstanceKey, NodeId, Slot};

/// Tolerance on the normalization of a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluatorError {
    #[error("instance {0} is not in the active list")]
    NotActive(InstanceKey),
    #[error("instance {0} was already admitted")]
    Duplicate(InstanceKey),
    #[error("instance {key} is pulled by {expected}, not {coordinator}")]
    WrongCoordinator {
        key: InstanceKey,
        expected: NodeId,
        coordinator: NodeId,
    },
    #[error("no link quality for instance {0}")]
    MissingQuality(InstanceKey),
    #[error("hop {hop} of {flow}.{instance} has not completed")]
    IncompleteHop { flow: u32, instance: u32, hop: usize },
}

/// Sets bit `index` of `mask`: the instance in that position succeeded.
#[inline]
pub fn on_success(mask: usize, index: usize) -> usize {
    mask | (1 << index)
}

/// Link qualities `LQ_i(t)` for the current slot.
#[derive(Debug, Clone, PartialEq)]
pub enum LinkQualityView {
    /// Every link has the same quality (the synthesis case, pinned to `m`).
    Uniform(f64),
    PerInstance(BTreeMap<InstanceKey, f64>),
}

impl LinkQualityView {
    pub fn quality(&self, key: &InstanceKey) -> Option<f64> {
        match self {
            LinkQualityView::Uniform(q) => Some(*q),
            LinkQualityView::PerInstance(map) => map.get(key).copied(),
        }
    }

    /// True when every quality lies in `[m, 1]`.
    pub fn respects_threshold(&self, m: f64) -> bool {
        let ok = |q: f64| (m..=1.0).contains(&q);
        match self {
            LinkQualityView::Uniform(q) => ok(*q),
            LinkQualityView::PerInstance(map) => map.values().all(|&q| ok(q)),
        }
    }
}

/// Where an admitted instance ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Active(usize),
    Queued,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorState {
    coordinator: NodeId,
    active_cap: usize,
    active: Vec<InstanceKey>,
    inactive: BTreeSet<InstanceKey>,
    dist: Vec<f64>,
}

impl CoordinatorState {
    pub fn new(coordinator: NodeId, active_cap: usize) -> Self {
        assert!((1..=20).contains(&active_cap), "active cap out of range");
        CoordinatorState {
            coordinator,
            active_cap,
            active: Vec::new(),
            inactive: BTreeSet::new(),
            dist: vec![1.0],
        }
    }

    pub fn coordinator(&self) -> NodeId {
        self.coordinator
    }

    /// Active instances; position `b` corresponds to bit `b` of the distribution.
    pub fn active(&self) -> &[InstanceKey] {
        &self.active
    }

    pub fn inactive(&self) -> impl Iterator<Item = &InstanceKey> {
        self.inactive.iter()
    }

    pub fn distribution(&self) -> &[f64] {
        &self.dist
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.inactive.is_empty()
    }

    pub fn position(&self, key: &InstanceKey) -> Option<usize> {
        self.active.iter().position(|k| k == key)
    }

    /// Adds `instance` to the active list when a position is free, otherwise
    /// to the inactive queue.
    pub fn admit_instance(&mut self, instance: &FlowInstance) -> Result<Admission, EvaluatorError> {
        if instance.link.dst != self.coordinator {
            return Err(EvaluatorError::WrongCoordinator {
                key: instance.key,
                expected: instance.link.dst,
                coordinator: self.coordinator,
            });
        }
        self.admit_key(instance.key)
    }

    fn admit_key(&mut self, key: InstanceKey) -> Result<Admission, EvaluatorError> {
        if self.position(&key).is_some() || self.inactive.contains(&key) {
            return Err(EvaluatorError::Duplicate(key));
        }
        if self.active.len() < self.active_cap {
            Ok(Admission::Active(self.activate(key)))
        } else {
            self.inactive.insert(key);
            Ok(Admission::Queued)
        }
    }

    fn activate(&mut self, key: InstanceKey) -> usize {
        // Tensor with [1, 0]: the new bit starts unset.
        let len = self.dist.len();
        self.dist.resize(len * 2, 0.0);
        self.active.push(key);
        self.active.len() - 1
    }

    /// Removes `key`, marginalizing its bit out of the joint distribution, and
    /// promotes the highest-priority queued instance into the freed position.
    pub fn retire_instance(&mut self, key: &InstanceKey) -> Result<Option<InstanceKey>, EvaluatorError> {
        if self.inactive.remove(key) {
            return Ok(None);
        }
        let b = self.position(key).ok_or(EvaluatorError::NotActive(*key))?;
        let low = (1usize << b) - 1;
        let mut next = vec![0.0; self.dist.len() / 2];
        for (mask, &p) in self.dist.iter().enumerate() {
            let folded = (mask & low) | ((mask >> (b + 1)) << b);
            next[folded] += p;
        }
        self.dist = next;
        self.active.remove(b);
        let promoted = self.inactive.pop_first();
        if let Some(k) = promoted {
            self.activate(k);
        }
        Ok(promoted)
    }

    /// Applies one pull. For every state, the first serviced instance whose
    /// bit is unset is executed: it succeeds with its link quality, otherwise
    /// the state is unchanged.
    pub fn apply_pull(&mut self, service: &[InstanceKey], lq: &LinkQualityView) -> Result<(), EvaluatorError> {
        let mut bits = Vec::with_capacity(service.len());
        for key in service {
            let b = self.position(key).ok_or(EvaluatorError::NotActive(*key))?;
            let q = lq.quality(key).ok_or(EvaluatorError::MissingQuality(*key))?;
            bits.push((1usize << b, q));
        }
        // Mass only moves to larger masks, so a descending sweep reads every
        // source before anything lands on it.
        for mask in (0..self.dist.len()).rev() {
            let p = self.dist[mask];
            if p == 0.0 {
                continue;
            }
            if let Some(&(bit, q)) = bits.iter().find(|(bit, _)| mask & bit == 0) {
                let moved = p * q;
                self.dist[mask] = p - moved;
                self.dist[mask | bit] += moved;
            }
        }
        Ok(())
    }

    /// Probability that `key` has been executed.
    pub fn marginal_reliability(&self, key: &InstanceKey) -> Result<f64, EvaluatorError> {
        let b = self.position(key).ok_or(EvaluatorError::NotActive(*key))?;
        Ok(self
            .dist
            .iter()
            .enumerate()
            .filter(|(mask, _)| mask & (1 << b) != 0)
            .map(|(_, p)| p)
            .sum())
    }

    /// Marginals of every active instance, in active order.
    pub fn marginals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.active.len()];
        for (mask, &p) in self.dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut m = mask;
            while m != 0 {
                let b = m.trailing_zeros() as usize;
                out[b] += p;
                m &= m - 1;
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.dist.iter().sum()
    }
}

/// Hop-by-hop analysis of one instance of a (possibly multi-hop) flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAnalysis {
    pub spec_id: crate::model::FlowId,
    pub instance: u32,
    pub release: Slot,
    pub deadline: Slot,
    hop_count: usize,
    hops: Vec<HopRecord>,
}

impl FlowAnalysis {
    pub fn new(flow: &FlowSpec, instance: u32) -> Self {
        let release = flow.release(instance);
        FlowAnalysis {
            spec_id: flow.id,
            instance,
            release,
            deadline: release + flow.deadline,
            hop_count: flow.hop_count(),
            hops: Vec::new(),
        }
    }

    pub fn hop_count(&self) -> usize {
        self.hop_count
    }

    pub fn hops(&self) -> &[HopRecord] {
        &self.hops
    }

    /// Hop currently in progress, if any.
    pub fn current_hop(&self) -> Option<usize> {
        (self.hops.len() < self.hop_count).then_some(self.hops.len())
    }

    pub fn is_complete(&self) -> bool {
        self.hops.len() == self.hop_count
    }

    pub fn into_hops(self) -> Vec<HopRecord> {
        self.hops
    }

    /// Records that the current hop met its local target in `record.completion`
    /// and returns the next subflow together with the slot it is released in.
    /// `None` means the final hop just completed.
    pub fn release_next_subflow(&mut self, flow: &FlowSpec, record: HopRecord) -> Option<(FlowInstance, Slot)> {
        let slot = record.completion;
        self.hops.push(record);
        let next = self.hops.len();
        (next < self.hop_count).then(|| (flow.instance(self.instance, next as u16), slot + 1))
    }

    /// Product of the per-hop bounds at their completion slots.
    pub fn end_to_end_bound(&self) -> Result<f64, EvaluatorError> {
        if !self.is_complete() {
            return Err(EvaluatorError::IncompleteHop {
                flow: self.spec_id.0,
                instance: self.instance,
                hop: self.hops.len(),
            });
        }
        Ok(self.hops.iter().map(|h| h.bound).product())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowId, Link};

    const A: NodeId = NodeId(0);

    fn key(flow: u32) -> InstanceKey {
        InstanceKey {
            flow: FlowId(flow),
            instance: 0,
            hop: 0,
        }
    }

    fn inst(flow: u32) -> FlowInstance {
        FlowInstance {
            key: key(flow),
            release: 0,
            deadline: 10,
            link: Link {
                src: NodeId(flow + 1),
                dst: A,
            },
            local_target: 0.99,
        }
    }

    fn state_with(flows: &[u32], cap: usize) -> CoordinatorState {
        let mut s = CoordinatorState::new(A, cap);
        for &f in flows {
            s.admit_instance(&inst(f)).unwrap();
        }
        s
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} != {b:?}");
        }
    }

    #[test]
    fn on_success_sets_one_bit() {
        assert_eq!(on_success(0b00, 0), 0b01);
        assert_eq!(on_success(0b11, 1), 0b11);
        assert_eq!(on_success(0b010, 2), 0b110);
    }

    #[test]
    fn running_example_pulls() {
        let mut s = state_with(&[0, 1], 10);
        assert_close(s.distribution(), &[1.0, 0.0, 0.0, 0.0]);
        let lq = LinkQualityView::Uniform(0.7);
        s.apply_pull(&[key(0)], &lq).unwrap();
        assert_close(s.distribution(), &[0.3, 0.7, 0.0, 0.0]);
        assert!((s.marginal_reliability(&key(0)).unwrap() - 0.7).abs() < 1e-12);

        s.apply_pull(&[key(0), key(1)], &lq).unwrap();
        assert_close(s.distribution(), &[0.09, 0.42, 0.0, 0.49]);
        assert!((s.marginal_reliability(&key(1)).unwrap() - 0.49).abs() < 1e-12);
        assert!((s.marginal_reliability(&key(0)).unwrap() - 0.91).abs() < 1e-12);
    }

    #[test]
    fn saturated_pull_is_identity() {
        let mut s = state_with(&[0, 1], 10);
        let lq = LinkQualityView::Uniform(1.0);
        s.apply_pull(&[key(0)], &lq).unwrap();
        s.apply_pull(&[key(1)], &lq).unwrap();
        let before = s.distribution().to_vec();
        s.apply_pull(&[key(0), key(1)], &LinkQualityView::Uniform(0.3)).unwrap();
        assert_eq!(s.distribution(), &before[..]);
    }

    #[test]
    fn fresh_instance_has_zero_reliability() {
        let s = state_with(&[0], 10);
        assert_eq!(s.distribution(), &[1.0, 0.0]);
        assert_eq!(s.marginal_reliability(&key(0)).unwrap(), 0.0);
    }

    #[test]
    fn full_active_list_queues_and_promotes_by_priority() {
        let mut s = state_with(&(0..10).collect::<Vec<_>>(), 10);
        assert_eq!(s.admit_instance(&inst(11)).unwrap(), Admission::Queued);
        assert_eq!(s.admit_instance(&inst(10)).unwrap(), Admission::Queued);
        assert_eq!(s.distribution().len(), 1024);
        let promoted = s.retire_instance(&key(3)).unwrap();
        assert_eq!(promoted, Some(key(10)));
        assert_eq!(s.active().len(), 10);
        assert_eq!(s.inactive().copied().collect::<Vec<_>>(), vec![key(11)]);
    }

    #[test]
    fn retire_marginalizes() {
        let mut s = state_with(&[0, 1], 10);
        s.apply_pull(&[key(0)], &LinkQualityView::Uniform(0.7)).unwrap();
        s.apply_pull(&[key(0), key(1)], &LinkQualityView::Uniform(0.7)).unwrap();
        s.retire_instance(&key(0)).unwrap();
        assert_eq!(s.active(), &[key(1)]);
        assert_close(s.distribution(), &[0.51, 0.49]);

        s.retire_instance(&key(1)).unwrap();
        assert_close(s.distribution(), &[1.0]);
    }

    #[test]
    fn errors() {
        let mut s = state_with(&[0], 10);
        assert_eq!(s.admit_instance(&inst(0)), Err(EvaluatorError::Duplicate(key(0))));
        assert_eq!(
            s.apply_pull(&[key(5)], &LinkQualityView::Uniform(0.7)),
            Err(EvaluatorError::NotActive(key(5)))
        );
        assert_eq!(
            s.apply_pull(&[key(0)], &LinkQualityView::PerInstance(BTreeMap::new())),
            Err(EvaluatorError::MissingQuality(key(0)))
        );
        let mut other = inst(1);
        other.link.dst = NodeId(7);
        assert!(matches!(
            s.admit_instance(&other),
            Err(EvaluatorError::WrongCoordinator { .. })
        ));
        assert_eq!(s.marginal_reliability(&key(9)), Err(EvaluatorError::NotActive(key(9))));
    }

    fn multi_hop(path: &[u32], t: f64) -> FlowSpec {
        FlowSpec {
            id: FlowId(2),
            phase: 0,
            period: 20,
            deadline: 20,
            reliability: t,
            path: path.iter().copied().map(NodeId).collect(),
        }
    }

    fn hop(completion: Slot, bound: f64) -> HopRecord {
        HopRecord {
            completion,
            bound,
            trajectory: vec![(completion, bound)],
        }
    }

    #[test]
    fn subflow_release_chain() {
        // D=3, C=2, B=1, A=0
        let flow = multi_hop(&[3, 2, 1, 0], 0.99);
        let mut fa = FlowAnalysis::new(&flow, 0);
        let (next, at) = fa.release_next_subflow(&flow, hop(5, 0.997)).unwrap();
        assert_eq!(at, 6);
        assert_eq!(
            next.link,
            Link {
                src: NodeId(2),
                dst: NodeId(1)
            }
        );
        assert_eq!(next.key.hop, 1);
        assert!(fa.end_to_end_bound().is_err());
        assert!(fa.release_next_subflow(&flow, hop(9, 0.997)).is_some());
        assert!(fa.release_next_subflow(&flow, hop(12, 0.997)).is_none());
        assert!(fa.is_complete());
    }

    #[test]
    fn single_hop_flow_finishes_on_first_hop() {
        let flow = multi_hop(&[1, 0], 0.99);
        let mut fa = FlowAnalysis::new(&flow, 0);
        assert!(fa.release_next_subflow(&flow, hop(3, 0.9919)).is_none());
        assert!((fa.end_to_end_bound().unwrap() - 0.9919).abs() < 1e-15);
    }

    #[test]
    fn end_to_end_is_product_of_local_targets() {
        let flow = multi_hop(&[2, 1, 0], 0.99);
        let local = flow.local_target();
        let mut fa = FlowAnalysis::new(&flow, 0);
        fa.release_next_subflow(&flow, hop(1, local));
        fa.release_next_subflow(&flow, hop(3, local));
        assert!(fa.end_to_end_bound().unwrap() >= 0.99 - 1e-15);

        let flow3 = multi_hop(&[3, 2, 1, 0], 0.95);
        let local = flow3.local_target();
        let mut fa = FlowAnalysis::new(&flow3, 0);
        for t in 0..3 {
            fa.release_next_subflow(&flow3, hop(t, local));
        }
        assert!((fa.end_to_end_bound().unwrap() - 0.95).abs() < 1e-12);
    }
}
