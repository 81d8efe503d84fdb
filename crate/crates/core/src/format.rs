//! File formats: TOML workloads and policies, JSON metrics, plain-text traces.
//!
//! Serializing a parsed document reproduces it byte for byte, provided it was
//! itself produced by this module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, FlowId, FlowSpec, HopRecord, InstanceKey, InstanceRecord, ModelError, NodeId, Policy, PolicyHeader, Pull,
    Slot, Topology,
};
use crate::synthesizer::{response_time, Synthesis, SynthesisTiming, Unschedulable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    /// TOML syntax or schema error; the message carries line and field.
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pull at slot {slot} lies outside the hyperperiod {hyperperiod}")]
    SlotOutOfRange { slot: Slot, hyperperiod: Slot },
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl From<toml::de::Error> for FormatError {
    fn from(e: toml::de::Error) -> Self {
        FormatError::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for FormatError {
    fn from(e: toml::ser::Error) -> Self {
        FormatError::Serialize(e.to_string())
    }
}

/// A topology together with the flows that run on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub topology: Topology,
    #[serde(default, rename = "flow")]
    pub flows: Vec<FlowSpec>,
}

impl Workload {
    /// Checks every flow against the topology.
    pub fn validate(&self) -> Result<(), ModelError> {
        model::validate_flows(&self.topology, &self.flows)
    }
}

pub fn parse_workload(text: &str) -> Result<Workload, FormatError> {
    let w: Workload = toml::from_str(text)?;
    w.validate()?;
    Ok(w)
}

pub fn write_workload(w: &Workload) -> Result<String, FormatError> {
    Ok(toml::to_string(w)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PullDoc {
    slot: Slot,
    channel: u16,
    coordinator: NodeId,
    /// `(flow, instance, hop)` triples in priority order.
    service: Vec<(FlowId, u32, u16)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    flow: FlowId,
    instance: u32,
    release: Slot,
    deadline: Slot,
    #[serde(default, rename = "hop")]
    hops: Vec<HopRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    header: PolicyHeader,
    #[serde(default, rename = "pull")]
    pulls: Vec<PullDoc>,
    #[serde(default, rename = "instance")]
    instances: Vec<InstanceDoc>,
}

pub fn write_policy(policy: &Policy) -> Result<String, FormatError> {
    let pulls = policy
        .grid
        .iter()
        .enumerate()
        .flat_map(|(t, pulls)| {
            pulls.iter().map(move |p| PullDoc {
                slot: t as Slot,
                channel: p.channel,
                coordinator: p.coordinator,
                service: p.service.iter().map(|k| (k.flow, k.instance, k.hop)).collect(),
            })
        })
        .collect();
    let instances = policy
        .analysis
        .iter()
        .map(|r| InstanceDoc {
            flow: r.flow,
            instance: r.instance,
            release: r.release,
            deadline: r.deadline,
            hops: r.hops.clone(),
        })
        .collect();
    let doc = PolicyDoc {
        header: policy.header,
        pulls,
        instances,
    };
    Ok(toml::to_string(&doc)?)
}

pub fn parse_policy(text: &str) -> Result<Policy, FormatError> {
    let doc: PolicyDoc = toml::from_str(text)?;
    let mut policy = Policy::empty(doc.header);
    for p in doc.pulls {
        let hp = policy.hyperperiod();
        let cell = policy
            .grid
            .get_mut(p.slot as usize)
            .ok_or(FormatError::SlotOutOfRange {
                slot: p.slot,
                hyperperiod: hp,
            })?;
        cell.push(Pull {
            coordinator: p.coordinator,
            channel: p.channel,
            service: p
                .service
                .into_iter()
                .map(|(flow, instance, hop)| InstanceKey { flow, instance, hop })
                .collect(),
        });
    }
    for cell in &mut policy.grid {
        cell.sort_by_key(|p| p.channel);
    }
    policy.analysis = doc
        .instances
        .into_iter()
        .map(|i| InstanceRecord {
            flow: i.flow,
            instance: i.instance,
            release: i.release,
            deadline: i.deadline,
            hops: i.hops,
        })
        .collect();
    Ok(policy)
}

/// Per-slot link qualities, one number per line. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<f64>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let q: f64 = line.parse().map_err(|_| FormatError::Trace {
            line: i + 1,
            message: format!("{line:?} is not a number"),
        })?;
        if !(0.0..=1.0).contains(&q) {
            return Err(FormatError::Trace {
                line: i + 1,
                message: format!("{q} is not a probability"),
            });
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(FormatError::Trace {
            line: 0,
            message: "trace is empty".into(),
        });
    }
    Ok(out)
}

/// `x,y` lines with a header row.
pub fn csv_series(header: (&str, &str), points: &[(f64, f64)]) -> String {
    let mut s = format!("{},{}\n", header.0, header.1);
    for (x, y) in points {
        s.push_str(&format!("{x},{y}\n"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingMetrics {
    pub builder_ms: f64,
    pub evaluator_ms: f64,
    pub total_ms: f64,
}

impl From<SynthesisTiming> for TimingMetrics {
    fn from(t: SynthesisTiming) -> Self {
        TimingMetrics {
            builder_ms: t.builder.as_secs_f64() * 1e3,
            evaluator_ms: t.evaluator.as_secs_f64() * 1e3,
            total_ms: t.total.as_secs_f64() * 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowMetrics {
    pub id: FlowId,
    pub target: f64,
    /// Smallest end-to-end bound over the flow's instances.
    pub bound: f64,
    pub response_time: Slot,
    pub deadline: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Schedulable,
    Unschedulable,
}

/// The metrics document written next to a synthesized policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisMetrics {
    pub verdict: Verdict,
    pub hyperperiod: Slot,
    pub pulls: usize,
    pub flows: Vec<FlowMetrics>,
    pub unschedulable: Option<Unschedulable>,
    pub timing: TimingMetrics,
}

impl SynthesisMetrics {
    pub fn from_synthesis(s: &Synthesis, flows: &[FlowSpec]) -> Self {
        let mut bounds: BTreeMap<FlowId, f64> = BTreeMap::new();
        for r in &s.policy.analysis {
            let b = bounds.entry(r.flow).or_insert(1.0);
            *b = b.min(r.end_to_end());
        }
        SynthesisMetrics {
            verdict: Verdict::Schedulable,
            hyperperiod: s.policy.hyperperiod(),
            pulls: s.policy.pull_count(),
            flows: flows
                .iter()
                .map(|f| FlowMetrics {
                    id: f.id,
                    target: f.reliability,
                    bound: bounds.get(&f.id).copied().unwrap_or(0.0),
                    response_time: response_time(&s.policy, f.id).unwrap_or(0),
                    deadline: f.deadline,
                })
                .collect(),
            unschedulable: None,
            timing: s.timing.into(),
        }
    }

    pub fn unschedulable(u: Unschedulable, hyperperiod: Slot, timing: SynthesisTiming) -> Self {
        SynthesisMetrics {
            verdict: Verdict::Unschedulable,
            hyperperiod,
            pulls: 0,
            flows: Vec::new(),
            unschedulable: Some(u),
            timing: timing.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Parses a metrics document, rejecting missing or unknown fields.
pub fn parse_metrics(text: &str) -> Result<SynthesisMetrics, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Parse(e.to_string()))
}
