use recorp::model::FlowId;
use recorp::simulator::{degradation_sweep, run, LinkModel, LinkProcess, RunConfig};
use recorp::synthesizer::{synthesize, SynthesisConfig};
use recorp::workload::{generate_workload, random_mesh, star_workload, WorkloadKind};

#[test]
fn single_flow_pdr_matches_binomial_oracle() {
    let (topo, flows) = star_workload(1, 10, 0.99).unwrap();
    let s = synthesize(&topo, &flows, &SynthesisConfig::with_m(0.7)).unwrap();
    let links = LinkProcess::uniform(LinkModel::Constant(0.7));
    let stats = run(&s.policy, &flows, &links, &RunConfig::new(200_000, 5)).unwrap();
    let f = &stats.flows[0];
    let p = 1.0 - 0.3f64.powi(4);
    assert!((f.bound - p).abs() < 1e-12);
    let sigma = (p * (1.0 - p) / f.instances as f64).sqrt();
    assert!((f.pdr - p).abs() <= 4.0 * sigma, "{} vs {p}", f.pdr);
    assert!(f.dominates_bound(3.0));
}

#[test]
fn perfect_links_respond_at_first_opportunity() {
    let topo = random_mesh(12, 3.5, 16, 8).unwrap();
    let flows = generate_workload(&topo, WorkloadKind::Mix, 4, 60, 0.99, 1).unwrap();
    let s = synthesize(&topo, &flows, &SynthesisConfig::default()).unwrap();
    let stats = run(
        &s.policy,
        &flows,
        &LinkProcess::uniform(LinkModel::Constant(1.0)),
        &RunConfig::new(20, 1),
    )
    .unwrap();
    for (f, spec) in stats.flows.iter().zip(&flows) {
        assert_eq!(f.pdr, 1.0);
        // Every hop succeeds on its first pull, so delivery comes no later
        // than the analytic completion.
        let analytic = recorp::synthesizer::response_time(&s.policy, spec.id).unwrap();
        assert!(f.max_response.unwrap() <= analytic);
    }
}

#[test]
fn uniform_links_dominate_bound() {
    let topo = random_mesh(12, 3.5, 16, 8).unwrap();
    let flows = generate_workload(&topo, WorkloadKind::Mix, 5, 60, 0.99, 2).unwrap();
    let s = synthesize(&topo, &flows, &SynthesisConfig::default()).unwrap();
    let links = LinkProcess::uniform(LinkModel::Uniform { lo: 0.7, hi: 1.0 });
    let stats = run(&s.policy, &flows, &links, &RunConfig::new(20_000, 11)).unwrap();
    assert_eq!(stats.runtime_conflicts, 0);
    for f in &stats.flows {
        assert!(f.dominates_bound(3.0), "flow {} pdr {} bound {}", f.id, f.pdr, f.bound);
    }
}

#[test]
fn adversarial_trace_at_threshold() {
    let (topo, flows) = star_workload(3, 20, 0.99).unwrap();
    let s = synthesize(&topo, &flows, &SynthesisConfig::with_m(0.7)).unwrap();
    let trace = vec![0.7, 1.0, 0.7, 0.7, 0.85];
    let stats = run(
        &s.policy,
        &flows,
        &LinkProcess::uniform(LinkModel::Trace(trace)),
        &RunConfig::new(20_000, 3),
    )
    .unwrap();
    for f in &stats.flows {
        assert!(f.dominates_bound(3.0));
    }
}

#[test]
fn windows_partition_the_run() {
    let (topo, flows) = star_workload(2, 10, 0.99).unwrap();
    let s = synthesize(&topo, &flows, &SynthesisConfig::default()).unwrap();
    let links = LinkProcess::uniform(LinkModel::Constant(0.8));
    let stats = run(&s.policy, &flows, &links, &RunConfig::new(1050, 1)).unwrap();
    let w = stats.window_series(FlowId(0));
    assert_eq!(w.len(), 11);
    assert!(stats.window_series(FlowId(9)).is_empty());
}

#[test]
fn degradation_endpoints() {
    let (topo, flows) = star_workload(2, 20, 0.99).unwrap();
    let s = synthesize(&topo, &flows, &SynthesisConfig::default()).unwrap();
    let series = degradation_sweep(&s.policy, &flows, &[0.0, 1.0], &RunConfig::new(100, 1)).unwrap();
    assert_eq!(series, vec![(0.0, 0.0), (1.0, 1.0)]);
}
