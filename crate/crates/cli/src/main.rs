use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use moechip::experiment::{ConfigError, ExperimentConfig, Format, OUT_DIR_ENV};
use moechip::placement::{self, ExpertLayout, PlacementError};
use moechip::profiling::{profile_trace, ProfileError};
use moechip::sim::{self, Method, SimError};
use moechip::trace::{read_trace, write_trace, TraceError};

#[derive(Parser)]
#[command(
    name = "moechip",
    version,
    about = "MoE expert placement and chiplet training-step simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the trace generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Write only this report format.
    #[arg(long, value_parser = ["json", "csv"])]
    format: Option<String>,
    /// Worker threads for ladder and sweep cells.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-layer workload and co-activation profiles.
    Profile(Common),
    /// Cluster, allocate and order experts; write per-layer layouts.
    Place(Common),
    /// Simulate the configured method.
    Simulate(Common),
    /// Simulate all four methods and normalize to the baseline.
    Ladder(Common),
    /// Sequence length x memory x method grid.
    Sweep(Common),
    /// Check a binary routing trace and print its shape.
    ValidateTrace { path: PathBuf },
    /// Write the configured synthetic trace to a file.
    GenerateTrace {
        #[command(flatten)]
        common: Common,
        /// Destination file.
        #[arg(long)]
        to: PathBuf,
    },
}

/// Failure classes with their exit codes.
enum Failure {
    Config(String),
    Io(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Invariant(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::InvalidConfig(_) | TraceError::ModelMismatch { .. } => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<PlacementError> for Failure {
    fn from(e: PlacementError) -> Self {
        match e {
            PlacementError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Trace(t) => t.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invariant(_) => Failure::Invariant(e.to_string()),
            SimError::Trace(t) => t.into(),
            SimError::Placement(p) => p.into(),
            SimError::Profile(p) => p.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    formats: Vec<Format>,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, Failure> {
        let mut cfg = ExperimentConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            cfg.set_seed(seed);
        }
        let out = match (&c.out, std::env::var_os(OUT_DIR_ENV)) {
            (Some(p), _) => p.clone(),
            (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
            _ => cfg.output.dir.clone(),
        };
        let formats = match &c.format {
            Some(f) => vec![f.parse::<Format>().map_err(Failure::Config)?],
            None => cfg.output.formats.clone(),
        };
        if let Some(jobs) = c.jobs {
            if jobs == 0 {
                return Err(Failure::Config("--jobs must be at least 1".into()));
            }
            // Only the first configuration of the global pool takes effect.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
        Ok(Ctx { cfg, out, formats })
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| io_failure(&path, e))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(rel, &text).map(drop)
    }

    fn layouts_for(
        &self,
        method: Method,
        trace: &moechip::RoutingTrace,
    ) -> Result<Vec<ExpertLayout>, Failure> {
        let model = &self.cfg.model;
        let hw = &self.cfg.hardware;
        if method.optimized_layout() {
            if let Some(dir) = &self.cfg.placement.layout_dir {
                return Ok(placement::read_layouts(dir, model.n_layers)?);
            }
            return Ok(sim::optimized_layouts(
                trace,
                hw,
                self.cfg.placement.allocation,
            )?);
        }
        Ok(sim::baseline_layouts(model, hw)?)
    }
}

fn cmd_profile(c: &Common) -> Result<(), Failure> {
    let ctx = Ctx::new(c)?;
    let trace = ctx.cfg.load_trace()?;
    let profiles = profile_trace(&trace)?;
    #[derive(Serialize)]
    struct Row {
        layer: usize,
        expert: usize,
        activations: u64,
        v: f64,
    }
    let mut rows = Vec::new();
    for p in &profiles {
        let mut text = p.to_json();
        text.push('\n');
        ctx.write(&format!("profiles/layer_{:03}.json", p.layer), &text)?;
        for (e, (&a, &v)) in p.activations.iter().zip(&p.v).enumerate() {
            rows.push(Row {
                layer: p.layer,
                expert: e,
                activations: a,
                v,
            });
        }
    }
    if ctx.wants(Format::Csv) {
        ctx.write("profiles/workload.csv", &sim::to_csv(&rows))?;
    }
    println!(
        "wrote {} profiles to {}",
        profiles.len(),
        ctx.out.join("profiles").display()
    );
    Ok(())
}

fn cmd_place(c: &Common) -> Result<(), Failure> {
    let ctx = Ctx::new(c)?;
    let trace = ctx.cfg.load_trace()?;
    let hw = &ctx.cfg.hardware;
    let profiles = profile_trace(&trace)?;
    let mut layouts = Vec::new();
    let mut objectives = Vec::new();
    for p in &profiles {
        let (layout, obj) = placement::place_layer(p, hw, ctx.cfg.placement.allocation)?;
        layouts.push(layout);
        objectives.push(obj);
    }
    placement::write_layouts(&layouts, &ctx.out.join("layouts"))?;
    if ctx.wants(Format::Json) {
        ctx.write_json("placement_summary.json", &objectives)?;
    }
    if ctx.wants(Format::Csv) {
        ctx.write("placement_summary.csv", &sim::to_csv(&objectives))?;
    }
    println!(
        "placed {} layers: {} experts per chiplet, {} clusters per group",
        layouts.len(),
        ctx.cfg.model.n_routed_experts / hw.n_moe_chiplets,
        hw.chiplets_per_group()
    );
    Ok(())
}

fn cmd_simulate(c: &Common) -> Result<(), Failure> {
    let ctx = Ctx::new(c)?;
    let trace = ctx.cfg.load_trace()?;
    let method = ctx.cfg.run.method;
    let layouts = ctx.layouts_for(method, &trace)?;
    let s = sim::simulate_step(
        &ctx.cfg.model,
        &ctx.cfg.hardware,
        &ctx.cfg.run,
        &layouts,
        &trace,
    )?;
    if ctx.wants(Format::Json) {
        ctx.write_json("report.json", &s.report)?;
    }
    if ctx.wants(Format::Csv) {
        ctx.write("report.csv", &sim::to_csv(&[s.report.summary()]))?;
        ctx.write("per_layer.csv", &sim::to_csv(&s.report.per_layer))?;
    }
    if ctx.cfg.output.timeline {
        ctx.write("timeline.csv", &s.timeline_csv())?;
    }
    println!(
        "{}: {:.4} s/step, {:.1} J/step, C_T {:.3}",
        method, s.report.latency_s, s.report.energy_j, s.report.c_t_mean
    );
    Ok(())
}

fn cmd_ladder(c: &Common) -> Result<(), Failure> {
    let ctx = Ctx::new(c)?;
    let trace = ctx.cfg.load_trace()?;
    let baseline = ctx.layouts_for(Method::Baseline, &trace)?;
    let optimized = ctx.layouts_for(Method::C, &trace)?;
    let l = sim::run_ladder_with_layouts(
        &ctx.cfg.model,
        &ctx.cfg.hardware,
        &ctx.cfg.run,
        &trace,
        &baseline,
        &optimized,
    )?;
    if ctx.wants(Format::Json) {
        ctx.write_json("ladder.json", &l)?;
    }
    if ctx.wants(Format::Csv) {
        ctx.write("ladder.csv", &sim::to_csv(&l.rows))?;
    }
    for r in &l.rows {
        println!(
            "{:<8} {:>9.4} s  normalized {:.3}  C_T {:.3}",
            r.method.as_str(),
            r.latency_s,
            r.normalized_latency,
            r.c_t
        );
    }
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<(), Failure> {
    let ctx = Ctx::new(c)?;
    let trace = ctx.cfg.load_trace()?;
    let report = match &ctx.cfg.placement.layout_dir {
        Some(_) => {
            return Err(Failure::Config(
                "sweep places layers itself; remove [placement] layout_dir".into(),
            ))
        }
        None => sim::sweep(
            &ctx.cfg.model,
            &ctx.cfg.hardware,
            &ctx.cfg.run,
            &trace,
            &ctx.cfg.sweep,
            ctx.cfg.placement.allocation,
        )?,
    };
    if ctx.wants(Format::Json) {
        ctx.write_json("sweep.json", &report)?;
    }
    if ctx.wants(Format::Csv) {
        ctx.write("sweep.csv", &sim::to_csv(&report.rows))?;
    }
    println!(
        "wrote {} sweep cells to {}",
        report.rows.len(),
        ctx.out.display()
    );
    Ok(())
}

fn cmd_validate_trace(path: &Path) -> Result<(), Failure> {
    let t = read_trace(path)?;
    println!(
        "{}: ok ({} layers, {} tokens, {} experts, top-{})",
        path.display(),
        t.n_layers(),
        t.n_tokens(),
        t.n_experts(),
        t.top_k()
    );
    Ok(())
}

fn cmd_generate_trace(c: &Common, to: &Path) -> Result<(), Failure> {
    let ctx = Ctx::new(c)?;
    let trace = ctx.cfg.load_trace()?;
    write_trace(&trace, to)?;
    println!(
        "wrote {} tokens x {} layers to {}",
        trace.n_tokens(),
        trace.n_layers(),
        to.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile(c) => cmd_profile(c),
        Command::Place(c) => cmd_place(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Ladder(c) => cmd_ladder(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::ValidateTrace { path } => cmd_validate_trace(path),
        Command::GenerateTrace { common, to } => cmd_generate_trace(common, to),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
