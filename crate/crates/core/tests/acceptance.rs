//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use recorp::format::{parse_metrics, Verdict};
use recorp::model::{validate_policy, FlowId, FlowSpec, InstanceKey, NodeId, Topology};
use recorp::simulator::{
    binomial_sigma, default_quality_grid, run, run_compiled, CompiledPolicy, LinkModel, LinkProcess, RunConfig,
};
use recorp::synthesizer::{max_flows_search, synthesize, SynthesisConfig, SynthesisError};
use recorp::verifier::{brute_force_reliability, run_suite, SuiteConfig};
use recorp::workload::{generate_workload, random_mesh, star_workload, WorkloadKind};

const STAR_PERIOD: u32 = 100;
const TARGET: f64 = 0.99;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(results: &mut Vec<bool>, n: u32, title: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let pass = o.pass && elapsed < limit;
    println!(
        "{} criterion {n}: {title}: {} [{:.2}s, limit {}s]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    results.push(pass);
}

fn star_max(m: f64, service_cap: usize) -> usize {
    let cfg = SynthesisConfig {
        service_cap,
        ..SynthesisConfig::with_m(m)
    };
    max_flows_search::<SynthesisError>(|n| Ok(star_workload(n as u32, STAR_PERIOD, TARGET)?), &cfg, 200).unwrap()
}

fn running_example() -> Outcome {
    let a = NodeId(0);
    let topo = Topology::star(2, 16).unwrap();
    let flow = |id, src, phase, deadline| FlowSpec {
        id: FlowId(id),
        phase,
        period: 4,
        deadline,
        reliability: 0.93,
        path: vec![src, a],
    };
    let flows = vec![flow(0, NodeId(1), 0, 4), flow(1, NodeId(2), 1, 3)];
    let p = synthesize(&topo, &flows, &SynthesisConfig::with_m(0.7)).unwrap().policy;
    let j = |f| InstanceKey {
        flow: FlowId(f),
        instance: 0,
        hop: 0,
    };
    let layout: Vec<Vec<(NodeId, Vec<InstanceKey>)>> = p
        .grid
        .iter()
        .map(|s| s.iter().map(|x| (x.coordinator, x.service.clone())).collect())
        .collect();
    let layout_ok = layout
        == vec![
            vec![(a, vec![j(0)])],
            vec![(a, vec![j(0), j(1)])],
            vec![(a, vec![j(0), j(1)])],
            vec![(a, vec![j(1)])],
        ];
    let t0 = &p.record(FlowId(0), 0).unwrap().hops[0].trajectory;
    let t1 = &p.record(FlowId(1), 0).unwrap().hops[0].trajectory;
    let first_exact = t0.first() == Some(&(0, 0.7));
    let mut worst = 0.0f64;
    for (f, traj) in [(0, t0), (1, t1)] {
        for &(t, bound) in traj.iter() {
            let bf = brute_force_reliability(&p, &flows, t + 1, |_, _| 0.7).unwrap();
            worst = worst.max((bf.executed[&j(f)] - bound).abs());
        }
    }
    Outcome {
        pass: layout_ok && first_exact && worst <= 1e-12,
        detail: format!(
            "layout {layout_ok}, R0 = {:?}, brute-force gap {worst:.1e}",
            t0.first().map(|x| x.1)
        ),
    }
}

fn sched_capacity() -> Outcome {
    let n = star_max(0.7, 1);
    // One flow needs the smallest k with 0.3^k <= 0.01, i.e. 4 pulls.
    let oracle = (STAR_PERIOD / 4) as usize;
    Outcome {
        pass: n == 25 && n == oracle,
        detail: format!("max flows {n}, closed form {oracle}, expected 25"),
    }
}

fn recorp_capacity() -> Outcome {
    let r7 = star_max(0.7, 4);
    let s6 = star_max(0.6, 1);
    let r6 = star_max(0.6, 4);
    let ratio = r6 as f64 / s6 as f64;
    let uncapped7 = star_max(0.7, 10);
    let uncapped6 = star_max(0.6, 10);
    println!(
        "info criterion 3: service list cap 10 gives {uncapped7} flows at m=0.7 and ratio {:.2} at m=0.6",
        uncapped6 as f64 / s6 as f64
    );
    Outcome {
        pass: r7.abs_diff(63) <= 3 && s6 == 16 && (ratio - 3.25).abs() <= 0.35,
        detail: format!("m=0.7 max flows {r7} (63 +/- 3), m=0.6 Sched {s6} (16), ratio {ratio:.3} (3.25 +/- 0.35)"),
    }
}

fn service_sweep() -> Outcome {
    let counts: Vec<usize> = (1..=8).map(|s| star_max(0.7, s)).collect();
    let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
    let tail = counts[7] - counts[6];
    Outcome {
        pass: monotone && tail <= 1,
        detail: format!("max flows by cap 1..8 {counts:?}, 7 to 8 adds {tail}"),
    }
}

fn mesh_workload() -> (Topology, Vec<FlowSpec>) {
    let topo = random_mesh(15, 4.0, 16, 2024).unwrap();
    let flows = generate_workload(&topo, WorkloadKind::Mix, 10, 50, TARGET, 7).unwrap();
    (topo, flows)
}

fn safety_at_scale() -> Outcome {
    let (topo, flows) = mesh_workload();
    let p = synthesize(&topo, &flows, &SynthesisConfig::default()).unwrap().policy;
    let violations = validate_policy(&p, &topo, &flows).len();
    let links = LinkProcess::uniform(LinkModel::Uniform { lo: 0.7, hi: 1.0 });
    let stats = run(&p, &flows, &links, &RunConfig::new(100_000, 1)).unwrap();
    let below: Vec<FlowId> = stats
        .flows
        .iter()
        .filter(|f| !f.dominates_bound(3.0))
        .map(|f| f.id)
        .collect();
    let margin = stats
        .flows
        .iter()
        .map(|f| (f.pdr - f.bound) / f.bound_sigma().max(f64::MIN_POSITIVE))
        .fold(f64::INFINITY, f64::min);
    Outcome {
        pass: below.is_empty() && violations == 0 && stats.runtime_conflicts == 0,
        detail: format!(
            "{} flows, hyperperiod {}, min (PDR - bound)/sigma {margin:.2}, below {below:?}, conflicts {}, policy violations {violations}",
            flows.len(),
            p.hyperperiod(),
            stats.runtime_conflicts
        ),
    }
}

fn degradation() -> Outcome {
    let (topo, flows) = mesh_workload();
    let p = synthesize(&topo, &flows, &SynthesisConfig::default()).unwrap().policy;
    let compiled = CompiledPolicy::new(&p, &flows).unwrap();
    let cfg = RunConfig::new(20_000, 3);
    // (q, min PDR, its standard error, every flow meets the target)
    let mut series = Vec::new();
    for q in default_quality_grid() {
        let stats = run_compiled(&compiled, &LinkProcess::uniform(LinkModel::BelowThreshold(q)), &cfg).unwrap();
        let worst = stats.flows.iter().min_by(|a, b| a.pdr.total_cmp(&b.pdr)).unwrap();
        let meets = stats
            .flows
            .iter()
            .all(|f| f.pdr >= TARGET - 3.0 * binomial_sigma(TARGET, f.instances));
        series.push((q, worst.pdr, binomial_sigma(worst.pdr, worst.instances), meets));
    }
    let monotone = series
        .windows(2)
        .all(|w| w[1].1 >= w[0].1 - 3.0 * (w[0].2.powi(2) + w[1].2.powi(2)).sqrt());
    let targets = series.iter().filter(|s| s.0 >= 0.70 - 1e-9).all(|s| s.3);
    let shown: Vec<String> = series.iter().map(|s| format!("{:.2}:{:.4}", s.0, s.1)).collect();
    Outcome {
        pass: monotone && targets,
        detail: format!(
            "non-decreasing {monotone}, targets met at q >= 0.70 {targets}, min PDR {}",
            shown.join(" ")
        ),
    }
}

fn property_suites() -> Outcome {
    let reports = run_suite(&SuiteConfig::default());
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let cases: u64 = reports.iter().map(|r| r.cases).sum();
    Outcome {
        pass: failed.is_empty(),
        detail: format!("{} checks, {cases} cases, failed {failed:?}", reports.len()),
    }
}

fn timing_report() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (topology, flows) = mesh_workload();
    let w = recorp::format::Workload { topology, flows };
    std::fs::write(dir.path().join("w.toml"), recorp::format::write_workload(&w).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_recorp"))
        .args([
            "synthesize",
            "--workload",
            "w.toml",
            "--out",
            "p.toml",
            "--metrics",
            "m.json",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    let text = std::fs::read_to_string(dir.path().join("m.json")).unwrap_or_default();
    match parse_metrics(&text) {
        Ok(m) => {
            let t = &m.timing;
            let sane = [t.builder_ms, t.evaluator_ms, t.total_ms]
                .iter()
                .all(|x| x.is_finite() && *x >= 0.0)
                && t.builder_ms + t.evaluator_ms <= t.total_ms + 1e-6;
            Outcome {
                pass: out.status.success() && m.verdict == Verdict::Schedulable && sane,
                detail: format!(
                    "builder {:.2} ms, evaluator {:.2} ms, total {:.2} ms",
                    t.builder_ms, t.evaluator_ms, t.total_ms
                ),
            }
        }
        Err(e) => Outcome {
            pass: false,
            detail: format!("metrics unreadable: {e}"),
        },
    }
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let mut results = Vec::new();
    check(&mut results, 1, "running example", s(1), running_example);
    check(&mut results, 2, "Sched star capacity", s(10), sched_capacity);
    check(&mut results, 3, "shared star capacity", s(120), recorp_capacity);
    check(&mut results, 4, "service list sweep", s(300), service_sweep);
    check(&mut results, 5, "safety under uniform links", s(300), safety_at_scale);
    check(&mut results, 6, "degradation sweep", s(600), degradation);
    check(&mut results, 7, "property suites", s(180), property_suites);
    check(&mut results, 8, "synthesis timing report", s(60), timing_report);
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
