//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use moechip::placement::{
    allocate_exact, baseline_layout, cluster_experts, objective_units, AllocationMode,
};
use moechip::sim::{self, LadderReport, Method, SimError, SweepReport, SweepSpec};
use moechip::trace::generate_trace;
use moechip::{
    account_all_to_all, verify_bound, DramKind, HardwareSpec, ModelSpec, ReplicaPolicy, RunConfig,
    StepReport, TokenSource, TraceGenConfig,
};
use rand::Rng;
use rayon::prelude::*;

const LADDER_SEEDS: u64 = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn preset(name: &str) -> (ModelSpec, HardwareSpec) {
    (
        ModelSpec::preset(name).unwrap(),
        HardwareSpec::preset(name).unwrap(),
    )
}

fn planted(seed: u64, n_tokens: usize) -> TraceGenConfig {
    TraceGenConfig {
        seed,
        skew: 0.5,
        n_collab_groups: 16,
        collab_strength: 0.9,
        n_tokens,
    }
}

fn run_at(seq_len: usize) -> RunConfig {
    RunConfig {
        seq_len,
        ..RunConfig::default()
    }
}

/// Shared state for the in-engine invariant tally of criterion 7.
#[derive(Default)]
struct Tally {
    runs: usize,
    violations: Vec<String>,
}

impl Tally {
    fn report(&mut self, r: &StepReport) {
        self.runs += 1;
        let tol = 1e-9 * r.latency_s.max(1e-12);
        if r.lower_bound_s > r.latency_s + tol || r.latency_s > r.upper_bound_s + tol {
            self.violations.push(format!(
                "{} {}: bound chain {} <= {} <= {}",
                r.model, r.method, r.lower_bound_s, r.latency_s, r.upper_bound_s
            ));
        }
        if r.breakdown.kind_sum() + tol < r.latency_s {
            self.violations.push(format!(
                "{} {}: breakdown does not cover latency",
                r.model, r.method
            ));
        }
    }

    fn error(&mut self, e: &SimError) {
        self.runs += 1;
        self.violations.push(e.to_string());
    }
}

// 1. C_T is exactly k when every chiplet hosts a single expert.
fn criterion_1() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for name in ModelSpec::preset_names() {
        let (mut model, mut hw) = preset(name);
        model.n_layers = 2;
        hw.n_moe_chiplets = model.n_routed_experts;
        let traces = [
            generate_trace(&model, &planted(3, 2000)).unwrap(),
            generate_trace(&model, &TraceGenConfig::uniform(4, 2000)).unwrap(),
            generate_trace(
                &model,
                &TraceGenConfig {
                    skew: 2.0,
                    ..planted(5, 2000)
                },
            )
            .unwrap(),
        ];
        for t in &traces {
            for layer in 0..model.n_layers {
                let layout = baseline_layout(layer, &model, &hw).unwrap();
                for policy in [ReplicaPolicy::PerExpert, ReplicaPolicy::CoLocated] {
                    for source in [TokenSource::AttentionChiplet, TokenSource::RoundRobin] {
                        let a = account_all_to_all(t, &layout, layer, source, policy, 1).unwrap();
                        checked += 1;
                        if a.c_t != model.top_k as f64 || a.min_replicas != a.max_replicas {
                            bad.push(format!("{name} layer {layer}: C_T {}", a.c_t));
                        }
                    }
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{checked} accounts, {} mismatches {:?}",
            bad.len(),
            bad.first()
        ),
    )
}

// 2. inter-chiplet volume <= C_T * n <= k * n on random pairs.
fn criterion_2() -> Outcome {
    let shapes = [
        (16usize, 2usize, 8usize, 2usize),
        (32, 4, 16, 4),
        (64, 6, 16, 4),
        (128, 8, 16, 4),
        (64, 8, 64, 4),
        (12, 3, 6, 3),
        (20, 5, 4, 2),
    ];
    let mut rng = common::rng(2024);
    let mut pairs = 0;
    let mut violations = 0;
    for i in 0..1200 {
        let (n_e, k, nc, ng) = shapes[i % shapes.len()];
        let tokens = rng.random_range(1..400);
        let t = common::random_trace(&mut rng, n_e, k, 1, tokens);
        let layout = common::random_layout(&mut rng, 0, n_e, nc, ng);
        let (oracle_total, _) = common::oracle_c_t(&t, &layout, 0);
        for source in [TokenSource::AttentionChiplet, TokenSource::RoundRobin] {
            let a =
                account_all_to_all(&t, &layout, 0, source, ReplicaPolicy::CoLocated, 2).unwrap();
            let cert = verify_bound(&a, k);
            let independent = a.inter_chiplet_tokens <= oracle_total
                && oracle_total <= (k * tokens) as u64
                && a.c_t * tokens as f64 <= (k * tokens) as f64 + 1e-9;
            if !cert.holds || !independent || a.total_replicas != oracle_total {
                violations += 1;
            }
        }
        pairs += 1;
    }
    outcome(
        violations == 0,
        format!("{pairs} pairs, {violations} violations"),
    )
}

// 3. Clustering vs pseudocode oracle; exact allocation vs enumeration.
fn criterion_3() -> Outcome {
    let mut rng = common::rng(77);
    let mut cluster_cases = 0;
    let mut cluster_bad = 0;
    let shapes: Vec<(usize, usize)> = (2..=16)
        .flat_map(|n| (1..=n).filter(move |d| n % d == 0).map(move |d| (n, d)))
        .collect();
    for i in 0..300 {
        let (n, nc) = shapes[i % shapes.len()];
        let max = [0u64, 1, 3, 10, 1000][i % 5];
        let c = common::random_coactivation(&mut rng, n, max);
        cluster_cases += 1;
        if cluster_experts(&c, nc).unwrap() != common::oracle_cluster(&c, nc) {
            cluster_bad += 1;
        }
    }
    let mut alloc_cases = 0;
    let mut alloc_bad = 0;
    for ng in [2usize, 3, 4] {
        for nc in (ng..=12).filter(|n| n % ng == 0) {
            for i in 0..12 {
                let hi = [2u64, 10, 1000][i % 3];
                let loads: Vec<u64> = (0..nc).map(|_| rng.random_range(0..hi)).collect();
                let got = allocate_exact(&loads, ng).unwrap();
                alloc_cases += 1;
                let feasible = (0..ng).all(|g| got.clusters_in(g).len() == nc / ng);
                if !feasible
                    || got.objective_units != common::exhaustive_allocation(&loads, ng)
                    || got.objective_units != objective_units(&loads, &got.group_of_cluster, ng)
                {
                    alloc_bad += 1;
                }
            }
        }
    }
    outcome(
        cluster_bad == 0 && alloc_bad == 0,
        format!(
            "clustering {cluster_bad}/{cluster_cases} mismatches, allocation {alloc_bad}/{alloc_cases} mismatches"
        ),
    )
}

fn ladder(name: &str, seed: u64, seq_len: usize) -> Result<LadderReport, SimError> {
    let (model, hw) = preset(name);
    let run = run_at(seq_len);
    let trace = generate_trace(&model, &planted(seed, run.tokens_per_step()))?;
    sim::run_ladder(&model, &hw, &run, &trace, AllocationMode::Exact)
}

// 4. Ladder ordering over seeds on two model shapes.
fn criterion_4(tally: &mut Tally) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for name in ["deepseek-moe-16b", "qwen3-30b-a3b"] {
        let k = ModelSpec::preset(name).unwrap().top_k as f64;
        let results: Vec<_> = (0..LADDER_SEEDS)
            .into_par_iter()
            .map(|seed| ladder(name, seed, 128))
            .collect();
        let (mut ordered, mut ct_ok, mut n) = (0, 0, 0);
        let mut worst = (0.0f64, 0.0f64);
        for r in results {
            let l = match r {
                Ok(l) => l,
                Err(e) => {
                    tally.error(&e);
                    continue;
                }
            };
            for rep in &l.reports {
                tally.report(rep);
            }
            n += 1;
            let lat = |m| l.row(m).unwrap().normalized_latency;
            let ct = |m| l.row(m).unwrap().c_t;
            if lat(Method::Baseline) > lat(Method::A)
                && lat(Method::A) > lat(Method::B)
                && lat(Method::B) >= lat(Method::C)
            {
                ordered += 1;
            }
            if ct(Method::C) <= ct(Method::B)
                && ct(Method::B) <= ct(Method::A)
                && ct(Method::A) == k
            {
                ct_ok += 1;
            }
            worst.0 = worst.0.max(lat(Method::C));
            worst.1 = worst.1.max(ct(Method::C));
        }
        let frac = ordered as f64 / LADDER_SEEDS as f64;
        pass &= n as u64 == LADDER_SEEDS && frac >= 0.95 && ct_ok as u64 == LADDER_SEEDS;
        lines.push(format!(
            "{name}: latency order {ordered}/{LADDER_SEEDS}, C_T chain {ct_ok}/{LADDER_SEEDS}, worst C {:.3} (C_T {:.2})",
            worst.0, worst.1
        ));
    }
    outcome(pass, lines.join("; "))
}

fn sweep_for(name: &str) -> Result<SweepReport, SimError> {
    let (model, hw) = preset(name);
    let grid = SweepSpec::default();
    let max_seq = *grid.seq_lens.iter().max().unwrap();
    let run = RunConfig::default();
    let trace = generate_trace(&model, &planted(1, run.batch_samples * max_seq))?;
    sim::sweep(&model, &hw, &run, &trace, &grid, AllocationMode::Exact)
}

// 5. Sweep shape on every preset.
fn criterion_5(tally: &mut Tally) -> Outcome {
    let mut violations = Vec::new();
    let mut cells = 0;
    for name in ModelSpec::preset_names() {
        let s = match sweep_for(name) {
            Ok(s) => s,
            Err(e) => {
                tally.error(&e);
                violations.push(format!("{name}: {e}"));
                continue;
            }
        };
        for r in &s.reports {
            tally.report(r);
        }
        cells += s.rows.len();
        let lat = |seq, dram, m| s.latency(seq, dram, m).unwrap();
        for m in Method::ALL {
            for dram in [DramKind::Hbm2, DramKind::Ssd] {
                if !(lat(128, dram, m) < lat(256, dram, m) && lat(256, dram, m) < lat(512, dram, m))
                {
                    violations.push(format!("{name} {m} {dram:?}: not increasing in seq_len"));
                }
            }
            for seq in [128, 256, 512] {
                if lat(seq, DramKind::Hbm2, m) >= lat(seq, DramKind::Ssd, m) {
                    violations.push(format!("{name} {m} seq {seq}: HBM2 not faster"));
                }
            }
        }
        for seq in [128, 256, 512] {
            let speedup = |d| lat(seq, d, Method::Baseline) / lat(seq, d, Method::C);
            if speedup(DramKind::Hbm2) <= speedup(DramKind::Ssd) {
                violations.push(format!("{name} seq {seq}: speedup not larger under HBM2"));
            }
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{cells} cells, {} violations {:?}",
            violations.len(),
            violations.first()
        ),
    )
}

fn calibration_reports() -> Result<(StepReport, StepReport), SimError> {
    let (model, hw) = preset("qwen3-30b-a3b");
    let run = run_at(256).with_method(Method::Baseline);
    let trace = generate_trace(&model, &planted(1, run.tokens_per_step()))?;
    let layouts = sim::baseline_layouts(&model, &hw)?;
    let hbm = sim::simulate_step(
        &model,
        &hw.clone().with_dram(DramKind::Hbm2),
        &run,
        &layouts,
        &trace,
    )?;
    let ssd = sim::simulate_step(&model, &hw.with_dram(DramKind::Ssd), &run, &layouts, &trace)?;
    Ok((hbm.report, ssd.report))
}

// 6. Baseline latency of the Qwen3 preset within 2x of the reference.
fn criterion_6(tally: &mut Tally) -> Outcome {
    match calibration_reports() {
        Ok((hbm, ssd)) => {
            tally.report(&hbm);
            tally.report(&ssd);
            let in_band = |x: f64, r: f64| x >= r / 2.0 && x <= r * 2.0;
            outcome(
                in_band(hbm.latency_s, 4.87) && in_band(ssd.latency_s, 9.17),
                format!(
                    "HBM2 {:.3} s in [2.435, 9.74], SSD {:.3} s in [4.585, 18.34]",
                    hbm.latency_s, ssd.latency_s
                ),
            )
        }
        Err(e) => {
            tally.error(&e);
            outcome(false, e.to_string())
        }
    }
}

// 7. Invariants: every run of 4-6 completed without an in-engine violation,
// plus an external resource-exclusivity pass over one full timeline.
fn criterion_7(tally: &Tally) -> Outcome {
    let (model, hw) = preset("qwen3-30b-a3b");
    let run = run_at(128);
    let trace = generate_trace(&model, &planted(0, run.tokens_per_step())).unwrap();
    let layouts = sim::optimized_layouts(&trace, &hw, AllocationMode::Exact).unwrap();
    let s = sim::simulate_step(&model, &hw, &run, &layouts, &trace).unwrap();
    let mut events = s.timeline();
    events.sort_by(|a, b| {
        a.resource
            .cmp(&b.resource)
            .then(a.start_s.total_cmp(&b.start_s))
    });
    let overlaps = events
        .windows(2)
        .filter(|w| w[0].resource == w[1].resource && w[0].end_s > w[1].start_s + 1e-15)
        .count();
    outcome(
        tally.violations.is_empty() && overlaps == 0 && tally.runs > 0,
        format!(
            "{} runs, {} violations {:?}; {} timeline events, {overlaps} overlaps",
            tally.runs,
            tally.violations.len(),
            tally.violations.first(),
            events.len()
        ),
    )
}

// 8. Identical seeds give byte-identical reports.
fn criterion_8() -> Outcome {
    let render = || -> Result<Vec<String>, SimError> {
        let l = ladder("deepseek-moe-16b", 7, 128)?;
        let s = sweep_for("olmoe-1b-7b")?;
        let (hbm, ssd) = calibration_reports()?;
        Ok(vec![
            serde_json::to_string_pretty(&l).unwrap(),
            sim::to_csv(&l.rows),
            serde_json::to_string_pretty(&s).unwrap(),
            sim::to_csv(&s.rows),
            hbm.to_json(),
            ssd.to_json(),
            sim::to_csv(&[hbm.summary(), ssd.summary()]),
        ])
    };
    match (render(), render()) {
        (Ok(a), Ok(b)) => {
            let bytes: usize = a.iter().map(|x| x.len()).sum();
            let same = a == b;
            outcome(
                same,
                format!("{} files, {bytes} bytes, identical: {same}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e.to_string()),
    }
}

fn main() {
    // Panics are reported as failures of their criterion.
    std::panic::set_hook(Box::new(|info| eprintln!("  panic: {info}")));
    let mut tally = Tally::default();
    let limits = [1u64, 10, 60, 300, 300, 60, 60, 600].map(Duration::from_secs);
    let names = [
        "C_T = k on one-expert-per-chiplet layouts",
        "replication bound on random trace/layout pairs",
        "placement matches oracles",
        "method ladder ordering",
        "sweep shape",
        "calibration band",
        "simulator invariants",
        "determinism",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match i {
            0 => criterion_1(),
            1 => criterion_2(),
            2 => criterion_3(),
            3 => criterion_4(&mut tally),
            4 => criterion_5(&mut tally),
            5 => criterion_6(&mut tally),
            6 => criterion_7(&tally),
            _ => criterion_8(),
        }));
        let elapsed = start.elapsed();
        let o = result.unwrap_or_else(|_| outcome(false, "panicked"));
        let in_time = elapsed <= limits[i];
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {} [{:.2} s{}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over time limit" }
        );
    }
    println!(
        "{} of {} criteria passed",
        names.len() - failed,
        names.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
