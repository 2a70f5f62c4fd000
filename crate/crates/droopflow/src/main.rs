//! Command-line front end: curve tabulation, power flow, OPF/SCOPF with
//! epsilon continuation, and smooth-vs-oracle comparison, all writing a small
//! set of artifacts plus a reproducible run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use droopflow::curves::{curve_table, CurveError, DroopCurve};
use droopflow::network::matpower::import_matpower;
use droopflow::network::{Network, NetworkError};
use droopflow::nlp::{trace_csv, IpmOptions};
use droopflow::opf::{
    build_opf, build_scopf, epsilon_continuation, verify_against_exact, ContinuationResult,
    DroopModeConfig, OpfError, OpfProblem, OpfSummary, Scenario, SolveStatus,
};
use droopflow::oracle::{records_csv, solve_exact_piecewise, OracleError};
use droopflow::pf::{solve_newton, DroopMode, PfError, PfOptions, PfSolution};
use droopflow::smooth::{SmoothError, SmoothingConfig};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// Exit codes: 2 for unreadable input, 3 for a case that parses but cannot be
/// modeled, 4 for numerical failure, 1 for everything else (mostly io on the
/// output side).
#[derive(Debug)]
enum CliError {
    Parse(String),
    Model(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Model(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Parse(m) | CliError::Model(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Parse { .. } | NetworkError::Version(_) | NetworkError::Io(_) => {
                CliError::Parse(e.to_string())
            }
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<PfError> for CliError {
    fn from(e: PfError) -> Self {
        match e {
            PfError::Model(_) | PfError::Curve(_) => CliError::Model(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OpfError> for CliError {
    fn from(e: OpfError) -> Self {
        match e {
            OpfError::Model(_) | OpfError::Curve(_) => CliError::Model(e.to_string()),
            OpfError::Network(inner) => inner.into(),
            OpfError::Solver(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::TooLarge(_) => CliError::Model(e.to_string()),
            OracleError::AllInfeasible(_) => CliError::Numerical(e.to_string()),
            OracleError::Opf(inner) => inner.into(),
        }
    }
}

impl From<SmoothError> for CliError {
    fn from(e: SmoothError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<CurveError> for CliError {
    fn from(e: CurveError) -> Self {
        CliError::Model(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "droopflow",
    version,
    about = "Steady-state AC-DC power system solver with smooth droop control"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Target smoothing sharpness epsilon.
    #[arg(long, global = true, default_value_t = 1e-3)]
    eps: f64,

    /// Comma-separated decreasing annealing schedule; eps is appended if the
    /// list does not already end there. Defaults to decades down from 1e-1.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    anneal: Vec<f64>,

    /// Solution artifact format.
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,

    /// Directory the artifacts are written into.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

impl OutFormat {
    fn name(self) -> &'static str {
        match self {
            OutFormat::Json => "json",
            OutFormat::Csv => "csv",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate every droop curve in a case: exact values against the smooth
    /// approximation at each sharpness of the annealing schedule.
    Curve {
        /// Case file (droopflow-net JSON, or a matpower subset if it ends in .m).
        case: PathBuf,
        /// Number of grid points per curve.
        #[arg(long, default_value_t = 2001)]
        grid: usize,
    },
    /// Newton power flow with optional smooth droop rows.
    Pf {
        case: PathBuf,
        /// Converter P-Vdc characteristic: none, linear or deadband.
        #[arg(long, default_value = "none")]
        mode: String,
        /// Use the converter Q-Vac curve where one is defined.
        #[arg(long)]
        qvac: bool,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 40)]
        max_iter: usize,
    },
    /// Smooth OPF solved by epsilon continuation.
    Opf {
        case: PathBuf,
        /// Droop scenario i..v.
        #[arg(long, default_value = "ii")]
        scenario: String,
    },
    /// Security-constrained OPF over the contingencies listed in the case.
    Scopf {
        case: PathBuf,
        /// Droop scenario i..v.
        #[arg(long, default_value = "ii")]
        scenario: String,
    },
    /// Solve the smooth OPF and the exact segment-enumeration oracle, and
    /// report whether the objectives agree within the smoothing bound.
    Compare {
        case: PathBuf,
        /// Droop scenario i..v.
        #[arg(long, default_value = "ii")]
        scenario: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Curve { .. } => "curve",
            Command::Pf { .. } => "pf",
            Command::Opf { .. } => "opf",
            Command::Scopf { .. } => "scopf",
            Command::Compare { .. } => "compare",
        }
    }

    fn case(&self) -> &Path {
        match self {
            Command::Curve { case, .. }
            | Command::Pf { case, .. }
            | Command::Opf { case, .. }
            | Command::Scopf { case, .. }
            | Command::Compare { case, .. } => case,
        }
    }
}

// ---------------------------------------------------------------------------
// Artifacts and manifest
// ---------------------------------------------------------------------------

struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            names: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut body = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Io(format!("cannot serialize {name}: {e}")))?;
        body.push('\n');
        self.write(name, &body)
    }
}

/// Everything needed to reproduce a run; deliberately free of timestamps and
/// wall times so two identical invocations produce identical bytes.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    case: String,
    case_hash: String,
    eps: f64,
    anneal: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    format: String,
    artifacts: Vec<String>,
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// Shared setup
// ---------------------------------------------------------------------------

fn load_network(path: &Path) -> Result<(Network, String), CliError> {
    let source = std::fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
    let hash = fnv1a_hex(source.as_bytes());
    let net = if path.extension().is_some_and(|e| e == "m") {
        import_matpower(&source)?
    } else {
        Network::from_json(&source)?
    };
    Ok((net, hash))
}

fn smoothing(g: &GlobalOpts) -> Result<SmoothingConfig, CliError> {
    let mut schedule = if g.anneal.is_empty() {
        // decades down from 1e-1, stopping above the target
        let mut s = Vec::new();
        let mut e = 1e-1;
        while e > g.eps * (1.0 + 1e-12) {
            s.push(e);
            e /= 10.0;
        }
        s
    } else {
        g.anneal.clone()
    };
    if schedule.last() != Some(&g.eps) {
        schedule.push(g.eps);
    }
    Ok(SmoothingConfig::new(g.eps, schedule)?)
}

fn parse_scenario(s: &str) -> Result<Scenario, CliError> {
    s.parse().map_err(CliError::Parse)
}

fn parse_mode(s: &str) -> Result<DroopMode, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Ok(DroopMode::None),
        "linear" => Ok(DroopMode::Linear),
        "deadband" => Ok(DroopMode::Deadband),
        other => Err(CliError::Parse(format!(
            "unknown droop mode {other:?}, expected none, linear or deadband"
        ))),
    }
}

fn write_manifest(
    art: &mut Artifacts,
    cli: &Cli,
    case_hash: &str,
    scenario: Option<&str>,
    mode: Option<&str>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        tool: "droopflow",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cli.cmd.name().to_string(),
        case: cli.cmd.case().display().to_string(),
        case_hash: case_hash.to_string(),
        eps: cli.global.eps,
        anneal: cli.global.anneal.clone(),
        scenario: scenario.map(str::to_string),
        mode: mode.map(str::to_string),
        format: cli.global.format.name().to_string(),
        artifacts: art.names.clone(),
    };
    art.write_json("manifest.json", &manifest)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn run_curve(cli: &Cli, grid_points: usize) -> Result<(), CliError> {
    if grid_points < 2 {
        return Err(CliError::Parse(format!(
            "--grid must be at least 2, got {grid_points}"
        )));
    }
    let (net, hash) = load_network(cli.cmd.case())?;
    let cfg = smoothing(&cli.global)?;

    // one curve per droop characteristic present in the case
    let mut curves: Vec<(String, DroopCurve, f64, f64)> = Vec::new();
    for gen in &net.generators {
        curves.push((
            format!("{}_gen_p", gen.id),
            DroopCurve::GenP(gen.p_response.clone()),
            -2.0,
            2.0,
        ));
    }
    for conv in &net.converters {
        if let Some(spec) = &conv.pvdc_linear {
            curves.push((
                format!("{}_pvdc_linear", conv.id),
                DroopCurve::PVdcLinear(spec.clone()),
                spec.v_min - 0.05,
                spec.v_max + 0.05,
            ));
        }
        if let Some(spec) = &conv.pvdc_deadband {
            curves.push((
                format!("{}_pvdc_deadband", conv.id),
                DroopCurve::PVdcDeadband(spec.clone()),
                spec.v_min - 0.05,
                spec.v_max + 0.05,
            ));
        }
        if let Some(spec) = &conv.qvac {
            curves.push((
                format!("{}_qvac", conv.id),
                DroopCurve::QVac(spec.clone()),
                spec.v_min - 0.05,
                spec.v_max + 0.05,
            ));
        }
    }
    if curves.is_empty() {
        return Err(CliError::Model("case defines no droop curves".into()));
    }

    let mut art = Artifacts::create(&cli.global.out)?;
    for (name, curve, lo, hi) in &curves {
        let step = (hi - lo) / (grid_points - 1) as f64;
        let grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
        let table = curve_table(curve, &grid, &cfg.anneal_schedule)?;
        match cli.global.format {
            OutFormat::Csv => art.write(&format!("curve_{name}.csv"), &table.to_csv())?,
            OutFormat::Json => art.write_json(&format!("curve_{name}.json"), &table)?,
        }
    }
    write_manifest(&mut art, cli, &hash, None, None)?;
    println!(
        "tabulated {} curves over {} points into {}",
        curves.len(),
        grid_points,
        cli.global.out.display()
    );
    Ok(())
}

fn pf_csv(sol: &PfSolution) -> String {
    let mut out = String::from("component,id,field,value\n");
    for b in &sol.buses {
        let _ = writeln!(out, "bus,{},vm,{}", b.id, b.vm);
        let _ = writeln!(out, "bus,{},va,{}", b.id, b.va);
    }
    for b in &sol.dc_buses {
        let _ = writeln!(out, "dc_bus,{},v,{}", b.id, b.v);
    }
    for g in &sol.generators {
        let _ = writeln!(out, "generator,{},p,{}", g.id, g.p);
        let _ = writeln!(out, "generator,{},q,{}", g.id, g.q);
    }
    for c in &sol.converters {
        let _ = writeln!(out, "converter,{},p_ac,{}", c.id, c.p_ac);
        let _ = writeln!(out, "converter,{},q_ac,{}", c.id, c.q_ac);
        let _ = writeln!(out, "converter,{},p_dc,{}", c.id, c.p_dc);
        let _ = writeln!(out, "converter,{},loss,{}", c.id, c.loss);
    }
    out
}

fn run_pf(cli: &Cli, mode: &str, qvac: bool, tol: f64, max_iter: usize) -> Result<(), CliError> {
    let (net, hash) = load_network(cli.cmd.case())?;
    let opts = PfOptions {
        mode: parse_mode(mode)?,
        use_qvac: qvac,
        smoothing: smoothing(&cli.global)?,
        tol,
        max_iter,
    };
    let sol = solve_newton(&net, &opts)?;
    let mut art = Artifacts::create(&cli.global.out)?;
    match cli.global.format {
        OutFormat::Json => art.write_json("solution.json", &sol)?,
        OutFormat::Csv => art.write("solution.csv", &pf_csv(&sol))?,
    }
    write_manifest(&mut art, cli, &hash, None, Some(mode))?;
    println!(
        "pf converged in {} iterations, mismatch {:.3e}, eps {:.1e}",
        sol.iterations, sol.mismatch, sol.epsilon
    );
    Ok(())
}

fn summary_csv(s: &OpfSummary) -> String {
    let mut out = String::from("state,component,id,field,value\n");
    for st in &s.states {
        if let Some(d) = st.delta {
            let _ = writeln!(out, "{},state,,delta,{}", st.label, d);
        }
        for b in &st.buses {
            let _ = writeln!(out, "{},bus,{},vm,{}", st.label, b.id, b.vm);
            let _ = writeln!(out, "{},bus,{},va,{}", st.label, b.id, b.va);
        }
        for b in &st.dc_buses {
            let _ = writeln!(out, "{},dc_bus,{},v,{}", st.label, b.id, b.v);
        }
        for g in &st.generators {
            let _ = writeln!(out, "{},generator,{},p,{}", st.label, g.id, g.p);
            let _ = writeln!(out, "{},generator,{},q,{}", st.label, g.id, g.q);
            let _ = writeln!(out, "{},generator,{},cost,{}", st.label, g.id, g.cost);
        }
        for c in &st.converters {
            let _ = writeln!(out, "{},converter,{},p_ac,{}", st.label, c.id, c.p_ac);
            let _ = writeln!(out, "{},converter,{},q_ac,{}", st.label, c.id, c.q_ac);
            let _ = writeln!(out, "{},converter,{},p_dc,{}", st.label, c.id, c.p_dc);
        }
        for m in &st.margins {
            let _ = writeln!(out, "{},margin,{},v_plus,{}", st.label, m.generator, m.v_plus);
            let _ = writeln!(
                out,
                "{},margin,{},v_minus,{}",
                st.label, m.generator, m.v_minus
            );
        }
    }
    let _ = writeln!(out, ",run,,objective,{}", s.objective);
    let _ = writeln!(out, ",run,,eps,{}", s.eps);
    let _ = writeln!(out, ",run,,kkt,{}", s.kkt);
    let _ = writeln!(out, ",run,,iterations,{}", s.iterations);
    out
}

fn emit_opf_artifacts(
    art: &mut Artifacts,
    format: OutFormat,
    problem: &OpfProblem,
    res: &ContinuationResult,
) -> Result<OpfSummary, CliError> {
    let summary = problem.summarize(res);
    match format {
        OutFormat::Json => art.write_json("solution.json", &summary)?,
        OutFormat::Csv => art.write("solution.csv", &summary_csv(&summary))?,
    }
    let report = verify_against_exact(problem, &res.solution.x);
    art.write("consistency.csv", &report.to_csv())?;
    art.write("trace.csv", &trace_csv(&res.solution.trace))?;
    if !report.all_within {
        eprintln!("warning: some rows exceed the smoothing consistency bound; see consistency.csv");
    }
    Ok(summary)
}

fn report_status(kind: &str, res: &ContinuationResult) {
    match &res.status {
        SolveStatus::Converged => println!(
            "{kind} converged: objective {:.6}, eps {:.1e}, kkt {:.3e}, {} final-stage iterations",
            res.solution.objective, res.eps, res.solution.kkt, res.solution.iterations
        ),
        SolveStatus::Downgraded { reached_eps, message } => println!(
            "{kind} downgraded to eps {reached_eps:.1e} ({message}): objective {:.6}, kkt {:.3e}",
            res.solution.objective, res.solution.kkt
        ),
    }
}

fn run_opf(cli: &Cli, scenario: &str, security: bool) -> Result<(), CliError> {
    let (net, hash) = load_network(cli.cmd.case())?;
    let sc = parse_scenario(scenario)?;
    let cfg = DroopModeConfig::for_scenario(sc, smoothing(&cli.global)?);
    let mut problem = if security {
        build_scopf(&net, &cfg)?
    } else {
        build_opf(&net, &cfg)?
    };
    let res = epsilon_continuation(&mut problem, &IpmOptions::default())?;
    let mut art = Artifacts::create(&cli.global.out)?;
    emit_opf_artifacts(&mut art, cli.global.format, &problem, &res)?;
    write_manifest(&mut art, cli, &hash, Some(scenario), None)?;
    report_status(if security { "scopf" } else { "opf" }, &res);
    Ok(())
}

#[derive(Serialize)]
struct CompareSummary {
    scenario: String,
    smooth_objective: f64,
    oracle_objective: f64,
    oracle_best_assignment: String,
    abs_gap: f64,
    tolerance: f64,
    within_tolerance: bool,
    assignments: usize,
}

fn run_compare(cli: &Cli, scenario: &str) -> Result<(), CliError> {
    let (net, hash) = load_network(cli.cmd.case())?;
    let sc = parse_scenario(scenario)?;
    let cfg = DroopModeConfig::for_scenario(sc, smoothing(&cli.global)?);

    let t = std::time::Instant::now();
    let mut problem = build_opf(&net, &cfg)?;
    let res = epsilon_continuation(&mut problem, &IpmOptions::default())?;
    let smooth_wall = t.elapsed().as_secs_f64();

    let oracle = solve_exact_piecewise(&net, &cfg, &IpmOptions::default())?;

    let rows = problem.droop_handles().len() as f64;
    let eps = cli.global.eps;
    let tolerance =
        (1e-4 * oracle.objective.abs()).max(5.0 * eps * std::f64::consts::LN_2 * rows);
    let abs_gap = (res.solution.objective - oracle.objective).abs();
    let summary = CompareSummary {
        scenario: scenario.to_string(),
        smooth_objective: res.solution.objective,
        oracle_objective: oracle.objective,
        oracle_best_assignment: oracle.best_assignment.key(),
        abs_gap,
        tolerance,
        within_tolerance: abs_gap <= tolerance,
        assignments: oracle.records.len(),
    };

    let mut art = Artifacts::create(&cli.global.out)?;
    emit_opf_artifacts(&mut art, cli.global.format, &problem, &res)?;
    art.write("oracle.csv", &records_csv(&oracle.records))?;
    art.write_json("compare.json", &summary)?;
    write_manifest(&mut art, cli, &hash, Some(scenario), None)?;

    report_status("smooth opf", &res);
    println!(
        "oracle best {:.6} over {} assignments (best: {})",
        oracle.objective,
        oracle.records.len(),
        oracle.best_assignment.key()
    );
    println!(
        "gap {abs_gap:.3e} {} tolerance {tolerance:.3e}; smooth {smooth_wall:.2}s vs oracle {:.2}s enumeration",
        if summary.within_tolerance { "within" } else { "EXCEEDS" },
        oracle.total_time_s
    );
    if !summary.within_tolerance {
        return Err(CliError::Numerical(format!(
            "smooth objective {} deviates from oracle {} by {abs_gap:.3e} (tolerance {tolerance:.3e})",
            res.solution.objective, oracle.objective
        )));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Command::Curve { grid, .. } => run_curve(cli, *grid),
        Command::Pf {
            mode,
            qvac,
            tol,
            max_iter,
            ..
        } => run_pf(cli, mode, *qvac, *tol, *max_iter),
        Command::Opf { scenario, .. } => run_opf(cli, scenario, false),
        Command::Scopf { scenario, .. } => run_opf(cli, scenario, true),
        Command::Compare { scenario, .. } => run_compare(cli, scenario),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
