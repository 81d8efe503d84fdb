//! Independent oracles and randomized checks for the analysis.
//!
//! States of a coordinator with `w` active instances are bitmasks; bit `b`
//! set means instance `b` was executed. `s1 ⪯ s2` when the bits of `s1` are a
//! subset of those of `s2`, so ascending mask order is a topological order.
//! Matrices are row-stochastic and act on row vectors: `v' = v M`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{self, Candidate, SlotProblem};
use crate::evaluator::{on_success, CoordinatorState, LinkQualityView};
use crate::model::{
    Channel, FlowId, FlowInstance, FlowSpec, InstanceKey, Link, NodeId, Policy, PolicyHeader, Pull, Slot,
};
use crate::simulator::{execute_pull_runtime, CompiledPolicy, RuntimeState};

pub const MAX_MATRIX_WIDTH: usize = 12;
pub const MAX_BRUTE_PULLS: usize = 12;
pub const DEFAULT_SEED: u64 = 42;
/// Slack for floating-point accumulation in the bound comparison.
pub const DOMINATION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("width {0} exceeds the dense-matrix cap")]
    WidthTooLarge(usize),
    #[error("service bit {0} is outside the state width")]
    BitOutOfRange(usize),
    #[error("{0} pulls exceed the enumeration cap")]
    TooManyPulls(usize),
    #[error(transparent)]
    Simulation(#[from] crate::simulator::SimError),
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: u64,
    pub failures: u64,
    /// The first few failing cases.
    pub counterexamples: Vec<String>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        CheckReport {
            name: name.to_string(),
            cases: 0,
            failures: 0,
            counterexamples: Vec::new(),
        }
    }

    fn case(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.counterexamples.len() < 10 {
                self.counterexamples.push(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Subset test for the partial order on states.
#[inline]
pub fn precedes(s1: usize, s2: usize) -> bool {
    s1 & !s2 == 0
}

/// Explicit transition matrix of one pull over `width` instances. `service`
/// lists bit indices in service order, `lq` the quality of each bit.
pub fn dense_transition_matrix(service: &[usize], lq: &[f64], width: usize) -> Result<DMatrix<f64>, VerifyError> {
    if width > MAX_MATRIX_WIDTH {
        return Err(VerifyError::WidthTooLarge(width));
    }
    if let Some(&b) = service.iter().find(|&&b| b >= width) {
        return Err(VerifyError::BitOutOfRange(b));
    }
    let n = 1usize << width;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        match service.iter().find(|&&b| s & (1 << b) == 0) {
            Some(&b) => {
                m[(s, s)] = 1.0 - lq[b];
                m[(s, on_success(s, b))] = lq[b];
            }
            None => m[(s, s)] = 1.0,
        }
    }
    Ok(m)
}

/// Recovers `E_b` per bit from a pull matrix such that
/// `M = I + Σ lq[b] E_b`, checking the structure of every `E_b`.
pub fn decompose(m: &DMatrix<f64>, lq: &[f64]) -> Result<Vec<DMatrix<f64>>, String> {
    let n = m.nrows();
    let width = n.trailing_zeros() as usize;
    if n != 1 << width || m.ncols() != n {
        return Err(format!("{}x{} is not a state matrix", m.nrows(), m.ncols()));
    }
    let mut es = vec![DMatrix::zeros(n, n); width];
    for s in 0..n {
        let off: Vec<usize> = (0..n).filter(|&c| c != s && m[(s, c)] != 0.0).collect();
        match off.as_slice() {
            [] => {
                if (m[(s, s)] - 1.0).abs() > 1e-12 {
                    return Err(format!("row {s} is absorbing but its diagonal is {}", m[(s, s)]));
                }
            }
            [c] => {
                let bit = c ^ s;
                if bit.count_ones() != 1 || c & s != s {
                    return Err(format!("row {s} jumps to {c}, not a single success"));
                }
                let b = bit.trailing_zeros() as usize;
                es[b][(s, s)] = -1.0;
                es[b][(s, *c)] = 1.0;
            }
            _ => return Err(format!("row {s} has {} off-diagonal entries", off.len())),
        }
    }
    let mut sum = DMatrix::identity(n, n);
    for (b, e) in es.iter().enumerate() {
        sum += e * lq[b];
    }
    let err = (&sum - m).abs().max();
    if err > 1e-12 {
        return Err(format!("reconstruction differs by {err}"));
    }
    for (b, e) in es.iter().enumerate() {
        check_e_structure(e).map_err(|msg| format!("E_{b}: {msg}"))?;
    }
    Ok(es)
}

fn check_e_structure(e: &DMatrix<f64>) -> Result<(), String> {
    let n = e.nrows();
    for r in 0..n {
        let mut plus = 0;
        let mut minus = 0;
        for c in 0..n {
            let v = e[(r, c)];
            if v != 0.0 && v != 1.0 && v != -1.0 {
                return Err(format!("entry ({r},{c}) = {v}"));
            }
            if v != 0.0 && c < r {
                return Err(format!("entry ({r},{c}) below the diagonal"));
            }
            if v == 1.0 {
                if c == r {
                    return Err(format!("+1 on the diagonal of row {r}"));
                }
                plus += 1;
            }
            if v == -1.0 {
                if c != r {
                    return Err(format!("-1 off the diagonal of row {r}"));
                }
                minus += 1;
            }
        }
        if (plus, minus) != (0, 0) && (plus, minus) != (1, 1) {
            return Err(format!("row {r} has {plus} (+1) and {minus} (-1)"));
        }
    }
    Ok(())
}

/// Exhaustive check that success moves a state up the order and preserves
/// the order between comparable states.
pub fn check_partial_order(width: usize) -> CheckReport {
    let mut r = CheckReport::new(&format!("partial order, width {width}"));
    let n = 1usize << width;
    for s in 0..n {
        for k in 0..width {
            r.case(precedes(s, on_success(s, k)), || format!("s={s:b} k={k}"));
        }
    }
    for s2 in 0..n {
        // Every submask of s2.
        let mut s1 = s2;
        loop {
            for k in 0..width {
                let ok = precedes(on_success(s1, k), on_success(s2, k));
                r.case(ok, || format!("s1={s1:b} s2={s2:b} k={k}"));
            }
            if s1 == 0 {
                break;
            }
            s1 = (s1 - 1) & s2;
        }
    }
    r
}

fn coordinator_with(width: usize) -> (CoordinatorState, Vec<InstanceKey>) {
    let mut state = CoordinatorState::new(NodeId(0), width.max(1));
    let keys: Vec<InstanceKey> = (0..width)
        .map(|i| InstanceKey {
            flow: FlowId(i as u32),
            instance: 0,
            hop: 0,
        })
        .collect();
    for (i, key) in keys.iter().enumerate() {
        let inst = FlowInstance {
            key: *key,
            release: 0,
            deadline: 1,
            link: Link {
                src: NodeId(i as u32 + 1),
                dst: NodeId(0),
            },
            local_target: 1.0,
        };
        state.admit_instance(&inst).expect("fresh coordinator");
    }
    (state, keys)
}

fn view(keys: &[InstanceKey], lq: &[f64]) -> LinkQualityView {
    LinkQualityView::PerInstance(keys.iter().copied().zip(lq.iter().copied()).collect())
}

fn random_service(rng: &mut ChaCha8Rng, width: usize) -> Vec<usize> {
    let mut bits: Vec<usize> = (0..width).collect();
    bits.shuffle(rng);
    bits.truncate(rng.random_range(1..=width));
    bits
}

fn random_lq(rng: &mut ChaCha8Rng, width: usize, m: f64) -> Vec<f64> {
    (0..width).map(|_| rng.random_range(m..=1.0)).collect()
}

fn row_step(v: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    m.transpose() * v
}

/// The evaluator's sweep agrees with explicit matrix products on random pull
/// sequences, including priority-inverted service lists.
pub fn check_matrix_equivalence(trials: usize, max_width: usize, seed: u64) -> CheckReport {
    let mut r = CheckReport::new("evaluator sweep equals dense matrix product");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let width = rng.random_range(1..=max_width);
        let (mut state, keys) = coordinator_with(width);
        let mut v = DVector::zeros(1 << width);
        v[0] = 1.0;
        for step in 0..rng.random_range(1..=8) {
            let service = random_service(&mut rng, width);
            let lq = random_lq(&mut rng, width, 0.0);
            let m = dense_transition_matrix(&service, &lq, width).expect("width within cap");
            v = row_step(&v, &m);
            let keyed: Vec<InstanceKey> = service.iter().map(|&b| keys[b]).collect();
            state.apply_pull(&keyed, &view(&keys, &lq)).expect("active instances");
            let err = state
                .distribution()
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            r.case(err <= 1e-12, || format!("trial {trial} step {step}: error {err}"));
        }
    }
    r
}

/// Structural decomposition of random pull matrices.
pub fn check_decomposition(trials: usize, max_width: usize, seed: u64) -> CheckReport {
    let mut r = CheckReport::new("pull matrix decomposes into I + Σ LQ E");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let width = rng.random_range(1..=max_width);
        let service = random_service(&mut rng, width);
        let lq = random_lq(&mut rng, width, 0.01);
        let m = dense_transition_matrix(&service, &lq, width).expect("width within cap");
        let res = decompose(&m, &lq);
        r.case(res.is_ok(), || format!("trial {trial} {service:?}: {:?}", res.err()));
    }
    r
}

/// A random vector over states that is non-decreasing along the order.
fn random_increasing(rng: &mut ChaCha8Rng, width: usize) -> DVector<f64> {
    let n = 1usize << width;
    let mut f = DVector::zeros(n);
    for s in 0..n {
        let floor = (0..width)
            .filter(|&b| s & (1 << b) != 0)
            .map(|b| f[s & !(1 << b)])
            .fold(0.0, f64::max);
        f[s] = floor + if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 };
    }
    f
}

fn is_increasing(g: &DVector<f64>, width: usize, slack: f64) -> bool {
    (0..g.len()).all(|s| (0..width).all(|b| g[s] <= g[s | (1 << b)] + slack))
}

/// `M f` stays increasing for increasing `f`, and dominates `M̂ f` where
/// `M̂` pins every quality to `m`.
pub fn check_increasing_vectors(trials: usize, max_width: usize, m: f64, seed: u64) -> (CheckReport, CheckReport) {
    let mut keep = CheckReport::new("pull preserves increasing vectors");
    let mut dom = CheckReport::new("pull at LQ >= m dominates pull at m");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let width = rng.random_range(1..=max_width);
        let service = random_service(&mut rng, width);
        let lq = random_lq(&mut rng, width, m);
        let f = random_increasing(&mut rng, width);
        let mm = dense_transition_matrix(&service, &lq, width).expect("width within cap");
        let mh = dense_transition_matrix(&service, &vec![m; width], width).expect("width within cap");
        let g = &mm * &f;
        let gh = &mh * &f;
        keep.case(is_increasing(&g, width, 1e-12), || format!("trial {trial} {service:?}"));
        let ok = g.iter().zip(gh.iter()).all(|(a, b)| *a >= b - 1e-12);
        dom.case(ok, || format!("trial {trial} {service:?}"));
    }
    (keep, dom)
}

/// Exact reliability under random qualities in `[m, 1]` never drops below
/// the bound computed with every quality at `m`.
pub fn check_bound_domination(trials: usize, max_width: usize, max_horizon: usize, m: f64, seed: u64) -> CheckReport {
    let mut r = CheckReport::new("exact reliability dominates the m-bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let width = rng.random_range(1..=max_width);
        let horizon = rng.random_range(1..=max_horizon);
        let (mut exact, keys) = coordinator_with(width);
        let (mut bound, _) = coordinator_with(width);
        let at_m = LinkQualityView::Uniform(m);
        let mut ok = true;
        let mut worst = f64::INFINITY;
        for _ in 0..horizon {
            let service: Vec<InstanceKey> = random_service(&mut rng, width).into_iter().map(|b| keys[b]).collect();
            let lq = random_lq(&mut rng, width, m);
            exact.apply_pull(&service, &view(&keys, &lq)).expect("active instances");
            bound.apply_pull(&service, &at_m).expect("active instances");
            for (e, b) in exact.marginals().iter().zip(bound.marginals()) {
                worst = worst.min(e - b);
                ok &= *e >= b - DOMINATION_SLACK;
            }
        }
        r.case(ok, || format!("trial {trial}: margin {worst}"));
    }
    r
}

/// Marginals after replaying non-preemptive pulls (service lists that are
/// prefixes of the execution order) with every quality at `ps`.
pub fn nonpreemptive_marginals(prefixes: &[usize], width: usize, ps: f64) -> Vec<f64> {
    let (mut state, keys) = coordinator_with(width);
    let lq = LinkQualityView::Uniform(ps);
    for &len in prefixes {
        state.apply_pull(&keys[..len], &lq).expect("active instances");
    }
    state.marginals()
}

/// Marginals are non-decreasing in the success probability along `grid`.
pub fn check_nonpreemptive_monotonicity(
    trials: usize,
    max_instances: usize,
    max_horizon: usize,
    grid: &[f64],
    seed: u64,
) -> CheckReport {
    let mut r = CheckReport::new("non-preemptive reliability is monotone in P_s");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let width = rng.random_range(1..=max_instances);
        let horizon = rng.random_range(1..=max_horizon);
        let prefixes: Vec<usize> = (0..horizon).map(|_| rng.random_range(1..=width)).collect();
        let curves: Vec<Vec<f64>> = grid
            .iter()
            .map(|&p| nonpreemptive_marginals(&prefixes, width, p))
            .collect();
        let ok = curves
            .windows(2)
            .all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| *a <= b + 1e-12));
        r.case(ok, || format!("trial {trial}: prefixes {prefixes:?}"));
    }
    r
}

/// Exact probabilities from enumerating every outcome of the run-time state
/// machine.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BruteForce {
    /// Probability that each hop was executed by its coordinator.
    pub executed: BTreeMap<InstanceKey, f64>,
    /// Probability that each instance's payload reached its destination.
    pub delivered: BTreeMap<(FlowId, u32), f64>,
}

/// Enumerates all outcomes of the pulls in slots `0..horizon`.
pub fn brute_force_reliability(
    policy: &Policy,
    flows: &[FlowSpec],
    horizon: Slot,
    lq: impl Fn(Slot, &Link) -> f64,
) -> Result<BruteForce, VerifyError> {
    let compiled = CompiledPolicy::new(policy, flows)?;
    let horizon = horizon.min(policy.hyperperiod());
    let pulls: Vec<(Slot, usize)> = (0..horizon)
        .flat_map(|t| (0..compiled.slot(t).len()).map(move |i| (t, i)))
        .collect();
    if pulls.len() > MAX_BRUTE_PULLS {
        return Err(VerifyError::TooManyPulls(pulls.len()));
    }
    let mut out = BruteForce::default();
    for key in &compiled.keys {
        out.executed.insert(*key, 0.0);
    }
    for (flow, k) in compiled
        .instances
        .iter()
        .map(|i| i.flow)
        .zip(instance_indices(&compiled))
    {
        out.delivered.insert((compiled.flows[flow], k), 0.0);
    }
    let state = compiled.fresh_state();
    enumerate(&compiled, &pulls, &lq, state, 1.0, &mut out);
    Ok(out)
}

fn instance_indices(c: &CompiledPolicy) -> Vec<u32> {
    let mut next: BTreeMap<usize, u32> = BTreeMap::new();
    c.instances
        .iter()
        .map(|i| {
            let k = next.entry(i.flow).or_default();
            *k += 1;
            *k - 1
        })
        .collect()
}

fn enumerate(
    c: &CompiledPolicy,
    pulls: &[(Slot, usize)],
    lq: &impl Fn(Slot, &Link) -> f64,
    state: RuntimeState,
    weight: f64,
    out: &mut BruteForce,
) {
    let Some((&(t, i), rest)) = pulls.split_first() else {
        for (h, &done) in state.executed.iter().enumerate() {
            if done {
                *out.executed.get_mut(&c.keys[h]).expect("known key") += weight;
            }
        }
        for (idx, d) in state.delivered.iter().enumerate() {
            if d.is_some() {
                let k = instance_indices(c)[idx];
                *out.delivered
                    .get_mut(&(c.flows[c.instances[idx].flow], k))
                    .expect("known instance") += weight;
            }
        }
        return;
    };
    let pull = &c.slot(t)[i];
    let mut ok = state.clone();
    let mut q = 0.0;
    let ev = execute_pull_runtime(c, &mut ok, t, pull, |l| {
        q = lq(t, l);
        true
    });
    if ev.attempted.is_none() {
        enumerate(c, rest, lq, state, weight, out);
        return;
    }
    enumerate(c, rest, lq, ok, weight * q, out);
    let mut fail = state;
    execute_pull_runtime(c, &mut fail, t, pull, |_| false);
    enumerate(c, rest, lq, fail, weight * (1.0 - q), out);
}

/// Evaluator marginals and brute-force probabilities agree on random
/// single-coordinator pull sequences.
pub fn check_brute_force(trials: usize, seed: u64) -> CheckReport {
    let mut r = CheckReport::new("evaluator equals brute-force enumeration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let width = rng.random_range(1..=3usize);
        let horizon = rng.random_range(1..=8u32);
        let seq: Vec<Vec<usize>> = (0..horizon).map(|_| random_service(&mut rng, width)).collect();
        let lq: Vec<Vec<f64>> = (0..horizon).map(|_| random_lq(&mut rng, width, 0.3)).collect();
        let (policy, flows) = star_sequence_policy(width, &seq);
        let bf = brute_force_reliability(&policy, &flows, horizon, |t, l| lq[t as usize][l.src.0 as usize - 1])
            .expect("within caps");
        let (mut state, keys) = coordinator_with(width);
        for (t, service) in seq.iter().enumerate() {
            let keyed: Vec<InstanceKey> = service.iter().map(|&b| keys[b]).collect();
            state
                .apply_pull(&keyed, &view(&keys, &lq[t]))
                .expect("active instances");
        }
        let err = state
            .marginals()
            .iter()
            .zip(&keys)
            .map(|(m, k)| (m - bf.executed[k]).abs())
            .fold(0.0, f64::max);
        r.case(err <= 1e-9, || format!("trial {trial}: error {err}"));
    }
    r
}

/// A star policy whose coordinator `0` replays `seq`, one pull per slot;
/// flow `i` runs from leaf `i + 1`.
pub fn star_sequence_policy(width: usize, seq: &[Vec<usize>]) -> (Policy, Vec<FlowSpec>) {
    let hp = seq.len().max(1) as Slot;
    let flows: Vec<FlowSpec> = (0..width as u32)
        .map(|i| FlowSpec {
            id: FlowId(i),
            phase: 0,
            period: hp,
            deadline: hp,
            reliability: 0.5,
            path: vec![NodeId(i + 1), NodeId(0)],
        })
        .collect();
    let mut policy = Policy::empty(PolicyHeader {
        hyperperiod: hp,
        channels: 16,
        m: 0.0,
        service_cap: width,
        active_cap: width,
    });
    for (t, service) in seq.iter().enumerate() {
        policy.grid[t].push(Pull {
            coordinator: NodeId(0),
            channel: (t % 2) as Channel,
            service: service
                .iter()
                .map(|&b| InstanceKey {
                    flow: FlowId(b as u32),
                    instance: 0,
                    hop: 0,
                })
                .collect(),
        });
    }
    (policy, flows)
}

/// Independent feasibility test for a set of candidate indices, with
/// channels checked by Hall's condition.
pub fn slot_feasible(problem: &SlotProblem, chosen: &[usize]) -> bool {
    let c = &problem.candidates;
    let coords: BTreeSet<NodeId> = chosen.iter().map(|&i| c[i].dst).collect();
    let mut load: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut sender_to: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for &i in chosen {
        if coords.contains(&c[i].src) {
            return false;
        }
        if *sender_to.entry(c[i].src).or_insert(c[i].dst) != c[i].dst {
            return false;
        }
        let l = load.entry(c[i].dst).or_default();
        *l += 1;
        if *l > problem.service_cap {
            return false;
        }
    }
    let coords: Vec<NodeId> = coords.into_iter().collect();
    let allowed: Vec<u64> = coords
        .iter()
        .map(|r| {
            let mut mask = if problem.channels >= 64 {
                u64::MAX
            } else {
                (1u64 << problem.channels) - 1
            };
            for &ch in problem.excluded.get(r).into_iter().flatten() {
                if ch < 64 {
                    mask &= !(1u64 << ch);
                }
            }
            mask
        })
        .collect();
    (1u32..(1 << coords.len())).all(|sub| {
        let union = (0..coords.len())
            .filter(|&j| sub & (1 << j) != 0)
            .fold(0u64, |acc, j| acc | allowed[j]);
        union.count_ones() >= sub.count_ones()
    })
}

/// Lexicographically best feasible subset by exhaustive enumeration,
/// returned as keys in priority order.
pub fn exhaustive_slot_optimum(problem: &SlotProblem) -> Vec<InstanceKey> {
    let mut order: Vec<usize> = (0..problem.candidates.len()).collect();
    order.sort_by_key(|&i| problem.candidates[i].key);
    let n = order.len();
    assert!(n <= 20, "exhaustive search is capped at 20 candidates");
    let mut best = 0u32;
    for subset in 0u32..(1 << n) {
        // Bit n-1-rank carries the weight of the rank-th highest priority.
        let chosen: Vec<usize> = (0..n)
            .filter(|&r| subset & (1 << (n - 1 - r)) != 0)
            .map(|r| order[r])
            .collect();
        if subset > best && slot_feasible(problem, &chosen) {
            best = subset;
        }
    }
    (0..n)
        .filter(|&r| best & (1 << (n - 1 - r)) != 0)
        .map(|r| problem.candidates[order[r]].key)
        .collect()
}

fn random_slot_problem(rng: &mut ChaCha8Rng, max_candidates: usize) -> SlotProblem {
    let nodes = rng.random_range(2..=7u32);
    let count = rng.random_range(0..=max_candidates);
    let mut flows: Vec<u32> = (0..40).collect();
    flows.shuffle(rng);
    let candidates = flows[..count]
        .iter()
        .map(|&f| {
            let src = rng.random_range(0..nodes);
            let mut dst = rng.random_range(0..nodes - 1);
            if dst >= src {
                dst += 1;
            }
            Candidate {
                key: InstanceKey {
                    flow: FlowId(f),
                    instance: 0,
                    hop: 0,
                },
                src: NodeId(src),
                dst: NodeId(dst),
            }
        })
        .collect();
    let channels = rng.random_range(2..=4);
    let mut p = SlotProblem::new(candidates, channels, rng.random_range(1..=3));
    for n in 0..nodes {
        if rng.random_bool(0.5) {
            p.exclude(NodeId(n), rng.random_range(0..channels));
        }
    }
    p
}

/// Builder against exhaustive enumeration: same selection, no node both
/// sending and receiving, no sender serving two coordinators, and every
/// skipped instance infeasible alongside the higher-priority selections.
pub fn check_builder(trials: usize, max_candidates: usize, seed: u64) -> (CheckReport, CheckReport, CheckReport) {
    let mut opt = CheckReport::new("builder matches exhaustive lexicographic optimum");
    let mut conflict = CheckReport::new("builder output is conflict free");
    let mut prio = CheckReport::new("skipped instances cannot be added");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let p = random_slot_problem(&mut rng, max_candidates);
        let a = builder::solve_slot(&p);
        let expected = exhaustive_slot_optimum(&p);
        opt.case(a.selected == expected, || {
            format!("trial {trial}: builder {:?} oracle {:?}", a.selected, expected)
        });

        let idx: BTreeMap<InstanceKey, usize> = p.candidates.iter().enumerate().map(|(i, c)| (c.key, i)).collect();
        let chosen: Vec<usize> = a.selected.iter().map(|k| idx[k]).collect();
        let coords: BTreeSet<NodeId> = chosen.iter().map(|&i| p.candidates[i].dst).collect();
        let mut sends: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for &i in &chosen {
            sends
                .entry(p.candidates[i].src)
                .or_default()
                .insert(p.candidates[i].dst);
        }
        let clean = sends.iter().all(|(s, rs)| !coords.contains(s) && rs.len() == 1);
        let channels_ok = a.coordinators == coords
            && a.channels.len() == coords.len()
            && a.channels.values().collect::<BTreeSet<_>>().len() == coords.len()
            && a.channels
                .iter()
                .all(|(r, ch)| *ch < p.channels && !p.excluded.get(r).is_some_and(|x| x.contains(ch)));
        conflict.case(clean && channels_ok, || format!("trial {trial}: {a:?}"));

        let selected: BTreeSet<InstanceKey> = a.selected.iter().copied().collect();
        let mut ok = true;
        for (i, c) in p.candidates.iter().enumerate() {
            if selected.contains(&c.key) {
                continue;
            }
            let mut with: Vec<usize> = a.selected.iter().filter(|k| **k < c.key).map(|k| idx[k]).collect();
            with.push(i);
            ok &= !slot_feasible(&p, &with);
        }
        prio.case(ok, || format!("trial {trial}"));
    }
    (opt, conflict, prio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub order_width: usize,
    pub random_trials: usize,
    pub domination_trials: usize,
    pub m: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: DEFAULT_SEED,
            order_width: 10,
            random_trials: 1000,
            domination_trials: 10_000,
            m: 0.7,
        }
    }
}

/// Every check, in a fixed order, each with its own derived seed.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<CheckReport> {
    let s = |i: u64| cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
    let mut out = vec![check_partial_order(cfg.order_width)];
    out.push(check_matrix_equivalence(cfg.random_trials, 4, s(1)));
    out.push(check_decomposition(cfg.random_trials, 6, s(2)));
    let (keep, dom) = check_increasing_vectors(cfg.random_trials, 6, cfg.m, s(3));
    out.push(keep);
    out.push(dom);
    out.push(check_bound_domination(cfg.domination_trials, 6, 20, cfg.m, s(4)));
    let grid = crate::simulator::default_quality_grid();
    out.push(check_nonpreemptive_monotonicity(cfg.random_trials, 3, 12, &grid, s(5)));
    out.push(check_brute_force(cfg.random_trials.min(200), s(6)));
    let (opt, conflict, prio) = check_builder(cfg.random_trials, 12, s(7));
    out.push(opt);
    out.push(conflict);
    out.push(prio);
    out
}

/// Fixed-width table of suite results.
pub fn summary_table(reports: &[CheckReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<52} {:>8} {:>8}  result", "check", "cases", "failed");
    for r in reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(s, "{:<52} {:>8} {:>8}  {verdict}", r.name, r.cases, r.failures);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
    }

    #[test]
    fn fig2_matrices() {
        let (a, b) = (0.7, 0.6);
        let m0 = dense_transition_matrix(&[0], &[a, b], 2).unwrap();
        assert_eq!(
            rows(&m0),
            vec![
                vec![1.0 - a, a, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0 - a, a],
                vec![0.0, 0.0, 0.0, 1.0],
            ]
        );
        let m01 = dense_transition_matrix(&[0, 1], &[a, b], 2).unwrap();
        assert_eq!(
            rows(&m01),
            vec![
                vec![1.0 - a, a, 0.0, 0.0],
                vec![0.0, 1.0 - b, 0.0, b],
                vec![0.0, 0.0, 1.0 - a, a],
                vec![0.0, 0.0, 0.0, 1.0],
            ]
        );
        let m10 = dense_transition_matrix(&[1, 0], &[a, b], 2).unwrap();
        assert_eq!(m10[(0, 2)], b);
        assert_eq!(m10[(2, 3)], a);
        assert_eq!(dense_transition_matrix(&[], &[], 2).unwrap(), DMatrix::identity(4, 4));
        assert!(dense_transition_matrix(&[], &[], 13).is_err());
    }

    #[test]
    fn worked_decomposition() {
        let lq = [0.7, 0.6];
        let m01 = dense_transition_matrix(&[0, 1], &lq, 2).unwrap();
        let es = decompose(&m01, &lq).unwrap();
        assert_eq!(
            rows(&es[0]),
            vec![
                vec![-1.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, -1.0, 1.0],
                vec![0.0, 0.0, 0.0, 0.0],
            ]
        );
        assert_eq!(
            rows(&es[1]),
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.0, -1.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0],
            ]
        );
        let id = decompose(&DMatrix::identity(4, 4), &lq).unwrap();
        assert!(id.iter().all(|e| e.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn decompose_rejects_non_pull_matrix() {
        let mut m = DMatrix::identity(4, 4);
        m[(3, 0)] = 0.5;
        m[(3, 3)] = 0.5;
        assert!(decompose(&m, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn order_examples() {
        let (ff, sf, fs, ss) = (0b00, 0b01, 0b10, 0b11);
        assert!(precedes(ff, sf) && precedes(sf, ss));
        assert!(precedes(ff, fs) && precedes(fs, ss));
        assert!(!precedes(sf, fs) && !precedes(fs, sf));
        assert!(check_partial_order(2).passed());
    }

    #[test]
    fn brute_force_closed_forms() {
        let (policy, flows) = star_sequence_policy(1, &[vec![0], vec![0], vec![0], vec![0]]);
        let bf = brute_force_reliability(&policy, &flows, 4, |_, _| 0.7).unwrap();
        let p = bf.delivered[&(FlowId(0), 0)];
        assert!((p - (1.0 - 0.3f64.powi(4))).abs() < 1e-12);
        let none = brute_force_reliability(&policy, &flows, 0, |_, _| 0.7).unwrap();
        assert_eq!(none.delivered[&(FlowId(0), 0)], 0.0);
    }

    #[test]
    fn brute_force_cap() {
        let seq = vec![vec![0]; 13];
        let (policy, flows) = star_sequence_policy(1, &seq);
        assert!(matches!(
            brute_force_reliability(&policy, &flows, 13, |_, _| 0.5),
            Err(VerifyError::TooManyPulls(13))
        ));
    }

    #[test]
    fn domination_is_tight_at_m() {
        // With qualities pinned to m the exact chain is the bound chain.
        let r = check_bound_domination(50, 4, 10, 1.0, 3);
        assert!(r.passed());
    }

    #[test]
    fn nonpreemptive_single_instance_closed_form() {
        for n in 1..6 {
            for &p in &[0.5, 0.75, 1.0] {
                let e = nonpreemptive_marginals(&vec![1; n], 1, p)[0];
                assert!((e - (1.0 - (1.0 - p).powi(n as i32))).abs() < 1e-12);
            }
        }
        let e = nonpreemptive_marginals(&[1, 2, 3], 3, 1.0);
        assert_eq!(e, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn hall_condition_pigeonhole() {
        let cand = |f, s, d| Candidate {
            key: InstanceKey {
                flow: FlowId(f),
                instance: 0,
                hop: 0,
            },
            src: NodeId(s),
            dst: NodeId(d),
        };
        let mut p = SlotProblem::new(vec![cand(0, 1, 0), cand(1, 3, 2)], 2, 4);
        assert!(slot_feasible(&p, &[0, 1]));
        p.exclude(NodeId(0), 0);
        p.exclude(NodeId(2), 0);
        assert!(!slot_feasible(&p, &[0, 1]));
        assert_eq!(exhaustive_slot_optimum(&p).len(), 1);
    }

    #[test]
    fn small_suite_passes() {
        let cfg = SuiteConfig {
            order_width: 6,
            random_trials: 60,
            domination_trials: 200,
            ..Default::default()
        };
        let reports = run_suite(&cfg);
        for r in &reports {
            assert!(r.passed(), "{} failed: {:?}", r.name, r.counterexamples);
        }
        assert!(summary_table(&reports).contains("pass"));
    }
}
