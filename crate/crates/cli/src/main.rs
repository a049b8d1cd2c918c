use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use p2p_market::clearing::{clear_as, ClearingError, ClearingResult};
use p2p_market::harness::{
    gen_synthetic, ingest_files, simulate, HarnessError, HorizonReport, SimulationOptions, TimeSeriesBundle,
};
use p2p_market::model::{build_instance, Design, InstanceConfig, MarketInstance};
use p2p_market::negotiation::{
    negotiate_community, negotiate_full_p2p, NegotiationConfig, NegotiationError, NegotiationTrace,
};
use p2p_market::qp::SolveOptions;

mod failure;

use failure::Failure;

#[derive(Parser)]
#[command(name = "p2p-market", version, about = "Peer-to-peer electricity market clearing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear one market interval centrally.
    Clear {
        #[arg(long)]
        instance: PathBuf,
        /// Defaults to the design the instance is tagged with.
        #[arg(long)]
        design: Option<Design>,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Clear one interval by distributed negotiation (full_p2p or community).
    Negotiate {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        design: Option<Design>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        rho: Option<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Clear every step of a horizon under one design.
    Simulate {
        #[command(flatten)]
        inputs: HorizonArgs,
        #[arg(long)]
        design: Option<Design>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        skip_infeasible: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run all three designs on the same inputs and tabulate welfare and energy.
    Compare {
        /// An instance alone is compared as a single one-hour interval;
        /// without any input a synthetic horizon is generated.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, requires = "instance", requires = "prices")]
        profiles: Option<PathBuf>,
        #[arg(long, requires = "instance", requires = "profiles")]
        prices: Option<PathBuf>,
        #[command(flatten)]
        synthetic: SyntheticArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        skip_infeasible: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Write a synthetic instance, profiles and prices into a directory.
    GenData {
        #[command(flatten)]
        synthetic: SyntheticArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an instance file; exits 0 iff it is valid.
    Validate {
        #[arg(long)]
        instance: PathBuf,
    },
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HorizonArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    prices: PathBuf,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 19)]
    peers: usize,
    #[arg(long, default_value_t = 3)]
    communities: usize,
    #[arg(long, default_value_t = 48)]
    steps: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl SolverArgs {
    fn options(&self) -> Result<SolveOptions, Failure> {
        let mut opts = SolveOptions::default();
        if let Some(tol) = self.tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Failure::invalid("--tol must be positive"));
            }
            opts.tol = tol;
        }
        if let Some(n) = self.max_iter {
            opts.max_iter = n;
        }
        Ok(opts)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn load_instance(path: &Path) -> Result<MarketInstance, Failure> {
    let config =
        InstanceConfig::from_json(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    build_instance(config).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn emit(output: &OutputArgs, text: &str) -> Result<(), Failure> {
    match &output.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn net_injection_csv(result: &ClearingResult) -> String {
    let mut out = String::from("peer,net_injection\n");
    for (id, v) in result.peer_ids.iter().zip(&result.net_injection) {
        writeln!(out, "{id},{v}").expect("writing to a string");
    }
    out
}

fn run_clear(instance: &Path, design: Option<Design>, solver: &SolverArgs, output: &OutputArgs) -> Result<(), Failure> {
    let inst = load_instance(instance)?;
    let result = clear_as(&inst, design.unwrap_or(inst.design()), &solver.options()?)?;
    match output.format {
        Format::Json => emit(output, &format!("{}\n", result.to_json())),
        Format::Csv => emit(output, &net_injection_csv(&result)),
    }
}

#[derive(Serialize)]
struct TraceSummary {
    agents: Vec<String>,
    rounds: usize,
    tie_break_rounds: usize,
    converged: bool,
    tie_break_applied: bool,
    final_primal_residual: Option<f64>,
    final_dual_residual: Option<f64>,
}

impl From<&NegotiationTrace> for TraceSummary {
    fn from(t: &NegotiationTrace) -> Self {
        let last = t.rounds.last();
        Self {
            agents: t.agents.clone(),
            rounds: t.rounds.len(),
            tie_break_rounds: t.tie_break_rounds.len(),
            converged: t.converged,
            tie_break_applied: t.tie_break_applied,
            final_primal_residual: last.map(|r| r.primal_residual),
            final_dual_residual: last.map(|r| r.dual_residual),
        }
    }
}

#[derive(Serialize)]
struct Negotiated<'a> {
    community: Option<&'a str>,
    result: &'a ClearingResult,
    trace: TraceSummary,
}

fn run_negotiate(
    instance: &Path,
    design: Option<Design>,
    solver: &SolverArgs,
    rho: Option<f64>,
    output: &OutputArgs,
) -> Result<(), Failure> {
    let inst = load_instance(instance)?;
    let mut cfg = NegotiationConfig::default();
    if let Some(tol) = solver.tol {
        cfg.tol_primal = tol;
        cfg.tol_dual = tol;
    }
    if let Some(n) = solver.max_iter {
        cfg.max_rounds = n;
    }
    if let Some(rho) = rho {
        cfg.rho = rho;
    }
    let outcomes: Vec<(Option<&str>, ClearingResult, NegotiationTrace)> = match design.unwrap_or(inst.design()) {
        Design::FullP2p => {
            let (r, t) = negotiate_full_p2p(&inst, &cfg)?;
            vec![(None, r, t)]
        }
        Design::Community => {
            if inst.communities().is_empty() {
                return Err(Failure::invalid("the instance has no communities"));
            }
            inst.communities()
                .iter()
                .map(|c| negotiate_community(&inst, c, &cfg).map(|(r, t)| (Some(c.id.as_str()), r, t)))
                .collect::<Result<_, _>>()?
        }
        Design::Hybrid => {
            return Err(Failure::invalid(
                "negotiation supports the full_p2p and community designs",
            ))
        }
    };
    match output.format {
        Format::Json => {
            let out: Vec<Negotiated> = outcomes
                .iter()
                .map(|(c, r, t)| Negotiated {
                    community: *c,
                    result: r,
                    trace: t.into(),
                })
                .collect();
            emit(output, &to_json(&out))
        }
        Format::Csv => {
            let mut text = String::new();
            for (c, _, t) in &outcomes {
                if let Some(c) = c {
                    writeln!(text, "# community {c}").expect("writing to a string");
                }
                text.push_str(&t.to_csv());
            }
            emit(output, &text)
        }
    }
}

fn horizon(inputs: &HorizonArgs) -> Result<(TimeSeriesBundle, MarketInstance), Failure> {
    Ok(ingest_files(&inputs.profiles, &inputs.prices, &inputs.instance)?)
}

fn report_text(report: &HorizonReport, format: Format) -> String {
    match format {
        Format::Json => format!("{}\n", report.to_json()),
        Format::Csv => report.to_csv(),
    }
}

/// A one-hour, one-step horizon at the instance's own grid price.
fn single_interval(inst: &MarketInstance) -> TimeSeriesBundle {
    TimeSeriesBundle {
        timestamps: vec![chrono::NaiveDateTime::default()],
        step_minutes: 60.0,
        profiles: Default::default(),
        prices: vec![inst.grid_terms().map_or(0.0, |g| g.price)],
        capacities: Default::default(),
    }
}

#[derive(Serialize)]
struct WelfareRow {
    design: Design,
    #[serde(rename = "Total SW")]
    total_sw: f64,
    #[serde(rename = "Import cost")]
    import_cost: f64,
    #[serde(rename = "Export revenue")]
    export_revenue: f64,
    #[serde(rename = "Inter-community fees")]
    inter_community_fees: f64,
}

#[derive(Serialize)]
struct EnergyRow {
    design: Design,
    #[serde(rename = "Total load")]
    total_load: f64,
    #[serde(rename = "Total import")]
    total_import: f64,
    #[serde(rename = "Total export")]
    total_export: f64,
    #[serde(rename = "Community exchange")]
    community_exchange: f64,
}

#[derive(Serialize)]
struct Comparison {
    steps: usize,
    step_minutes: f64,
    welfare: Vec<WelfareRow>,
    energy: Vec<EnergyRow>,
}

const COMPARE_HEADER: &str = "design,Total SW,Import cost,Export revenue,Inter-community fees,Total load,Total import,Total export,Community exchange";

impl Comparison {
    fn to_csv(&self) -> String {
        let mut out = format!("{COMPARE_HEADER}\n");
        for (w, e) in self.welfare.iter().zip(&self.energy) {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                w.design,
                w.total_sw,
                w.import_cost,
                w.export_revenue,
                w.inter_community_fees,
                e.total_load,
                e.total_import,
                e.total_export,
                e.community_exchange
            )
            .expect("writing to a string");
        }
        out
    }
}

fn compare(bundle: &TimeSeriesBundle, inst: &MarketInstance, opts: &SimulationOptions) -> Result<Comparison, Failure> {
    let mut welfare = Vec::new();
    let mut energy = Vec::new();
    for design in [Design::FullP2p, Design::Community, Design::Hybrid] {
        let t = simulate(bundle, inst, design, opts)?.totals;
        welfare.push(WelfareRow {
            design,
            total_sw: t.social_welfare,
            import_cost: t.import_cost,
            export_revenue: t.export_revenue,
            inter_community_fees: t.inter_community_fees,
        });
        energy.push(EnergyRow {
            design,
            total_load: t.total_load,
            total_import: t.total_import,
            total_export: t.total_export,
            community_exchange: t.community_exchange,
        });
    }
    Ok(Comparison {
        steps: bundle.num_steps(),
        step_minutes: bundle.step_minutes,
        welfare,
        energy,
    })
}

fn check_synthetic(s: &SyntheticArgs) -> Result<(), Failure> {
    if s.steps == 0 {
        return Err(Failure::invalid("--steps must be at least 1"));
    }
    if s.communities > s.peers {
        return Err(Failure::invalid("--communities cannot exceed --peers"));
    }
    Ok(())
}

#[derive(Serialize)]
struct Generated {
    peers: usize,
    communities: usize,
    steps: usize,
    instance: PathBuf,
    profiles: PathBuf,
    prices: PathBuf,
}

fn run_gen_data(s: &SyntheticArgs, out: &Path) -> Result<(), Failure> {
    check_synthetic(s)?;
    let (bundle, inst) = gen_synthetic(s.seed, s.peers, s.communities, s.steps);
    std::fs::create_dir_all(out).map_err(|e| Failure::invalid(format!("{}: {e}", out.display())))?;
    let files = Generated {
        peers: inst.num_peers(),
        communities: inst.communities().len(),
        steps: bundle.num_steps(),
        instance: out.join("instance.json"),
        profiles: out.join("profiles.csv"),
        prices: out.join("prices.csv"),
    };
    for (path, text) in [
        (&files.instance, format!("{}\n", inst.to_json())),
        (&files.profiles, bundle.profiles_csv()),
        (&files.prices, bundle.prices_csv()),
    ] {
        std::fs::write(path, text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    }
    print!("{}", to_json(&files));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Clear {
            instance,
            design,
            solver,
            output,
        } => run_clear(&instance, design, &solver, &output),
        Command::Negotiate {
            instance,
            design,
            solver,
            rho,
            output,
        } => run_negotiate(&instance, design, &solver, rho, &output),
        Command::Simulate {
            inputs,
            design,
            solver,
            skip_infeasible,
            output,
        } => {
            let (bundle, inst) = horizon(&inputs)?;
            let opts = SimulationOptions {
                solver: solver.options()?,
                skip_infeasible,
            };
            let report = simulate(&bundle, &inst, design.unwrap_or(inst.design()), &opts)?;
            emit(&output, &report_text(&report, output.format))
        }
        Command::Compare {
            instance,
            profiles,
            prices,
            synthetic,
            solver,
            skip_infeasible,
            output,
        } => {
            let opts = SimulationOptions {
                solver: solver.options()?,
                skip_infeasible,
            };
            let (bundle, inst) = match (instance, profiles, prices) {
                (Some(instance), Some(profiles), Some(prices)) => horizon(&HorizonArgs {
                    instance,
                    profiles,
                    prices,
                })?,
                (Some(instance), _, _) => {
                    let inst = load_instance(&instance)?;
                    (single_interval(&inst), inst)
                }
                _ => {
                    check_synthetic(&synthetic)?;
                    gen_synthetic(synthetic.seed, synthetic.peers, synthetic.communities, synthetic.steps)
                }
            };
            let table = compare(&bundle, &inst, &opts)?;
            let text = match output.format {
                Format::Json => to_json(&table),
                Format::Csv => table.to_csv(),
            };
            emit(&output, &text)
        }
        Command::GenData { synthetic, out } => run_gen_data(&synthetic, &out),
        Command::Validate { instance } => {
            load_instance(&instance)?;
            println!("{}: valid", instance.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Step { step, source } => Failure::from(source).at_step(step),
            other => Failure::invalid(other.to_string()),
        }
    }
}

impl From<ClearingError> for Failure {
    fn from(e: ClearingError) -> Self {
        match &e {
            ClearingError::Infeasible(_) => Failure::unsolved("infeasible", e.to_string()),
            ClearingError::NotConverged { .. } | ClearingError::NotOptimal => {
                Failure::unsolved("not_converged", e.to_string())
            }
            ClearingError::InvalidInput(_) => Failure::invalid(e.to_string()),
        }
    }
}

impl From<NegotiationError> for Failure {
    fn from(e: NegotiationError) -> Self {
        match e {
            NegotiationError::InvalidConfig(m) => Failure::invalid(m),
            NegotiationError::Clearing(c) => c.into(),
            NegotiationError::Infeasible(_) => Failure::unsolved("infeasible", e.to_string()),
            NegotiationError::MaxRoundsExceeded { ref trace, .. } => {
                let last = trace.rounds.last().map(|r| (r.primal_residual, r.dual_residual));
                let mut f = Failure::unsolved("not_converged", e.to_string());
                f.residuals = last;
                f
            }
        }
    }
}
