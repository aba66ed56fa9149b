use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use quantized_consensus::consensus::{RunConfig, RunResult, TraceMode};
use quantized_consensus::error::{ConsensusError, Result};
use quantized_consensus::graph::{gen_random_connected, Graph};
use quantized_consensus::harness::{
    count_cycles, emit_outputs, run_algorithm, run_experiment, Algorithm, ExperimentKind,
    ExperimentSpec, Format, GraphFamily, GridPoint, Scale, Table,
};
use quantized_consensus::linalg::symmetric_eigen;
use quantized_consensus::metrics::error_bound;
use quantized_consensus::rng::{derive_seed, experiment_data, purpose, Stream};
use quantized_consensus::spectral::{
    build_incidence, build_iteration_matrix, iteration_matrix_limit, limit_structure,
    spectral_bounds,
};

/// Quantized average consensus simulator.
#[derive(Parser, Debug)]
#[command(name = "consensus", version, about, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one algorithm on one graph and print its result.
    Run(RunArgs),
    /// Run a seeded Monte Carlo experiment and write the aggregate table.
    Sweep(SweepArgs),
    /// Count convergent and cyclic outcomes over star, random and complete graphs.
    Cycles(CyclesArgs),
    /// Print the spectral quantities of a graph.
    Spectra(SpectraArgs),
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct GraphArgs {
    /// Number of nodes.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Number of edges.
    #[arg(long, default_value_t = 500)]
    e: usize,
    /// Read the graph from an edge-list file instead of generating it.
    #[arg(long)]
    graph_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    #[arg(long, default_value = "pqdq")]
    algo: String,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Write the per-iteration trace (csv) or the full result (json) here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct SweepArgs {
    /// trace, sweep_edges, sweep_nodes, sweep_avg_degree or delta_sweep.
    #[arg(long, default_value = "sweep_edges")]
    kind: String,
    /// Comma-separated algorithms; defaults to the experiment's set.
    #[arg(long)]
    algo: Option<String>,
    /// Node count (trace experiments only).
    #[arg(long)]
    n: Option<usize>,
    /// Edge count (trace experiments only).
    #[arg(long)]
    e: Option<usize>,
    /// Resolution for every grid point (not for delta_sweep).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: String,
    /// Use the reference trial counts and grids.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct CyclesArgs {
    /// Comma-separated node counts.
    #[arg(long)]
    n: Option<String>,
    /// Comma-separated algorithms (dq, pqdq).
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct SpectraArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Resolution used for the deterministic error bound.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also print the Laplacian spectra and the iteration-matrix limit check.
    #[arg(long)]
    full: bool,
}

fn parse_list<T: std::str::FromStr<Err = ConsensusError>>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| ConsensusError::param(format!("invalid node count {p:?}")))
        })
        .collect()
}

fn load_graph(args: &GraphArgs, seed: u64) -> Result<Graph> {
    match &args.graph_file {
        Some(path) => Graph::read_edge_list(path),
        None => gen_random_connected(args.n, args.e, derive_seed(seed, &[purpose::GRAPH])),
    }
}

fn trace_csv(result: &RunResult) -> String {
    let mut s = String::new();
    let Some(trace) = &result.trace else {
        return s;
    };
    let n = trace.values.first().map_or(0, Vec::len);
    s.push_str("k,iterative_error");
    for i in 0..n {
        let _ = write!(s, ",node_{i}");
    }
    s.push('\n');
    for (k, err) in trace.iterative_error.iter().enumerate() {
        let _ = write!(s, "{k},{err}");
        for v in &trace.values[k] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Prints to stdout, treating a closed pipe as success.
fn emit(text: &str) {
    let mut out = io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ConsensusError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| ConsensusError::io(path, e))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let alg: Algorithm = a.algo.parse()?;
    let format: Format = a.format.parse()?;
    let g = load_graph(&a.graph, a.seed)?;
    let r = experiment_data(g.n(), &mut Stream::derived(a.seed, &[purpose::DATA]));
    let stream = if alg == Algorithm::Gossip {
        purpose::GOSSIP
    } else {
        purpose::QUANTIZER
    };
    let mode = if a.out.is_some() {
        TraceMode::Full
    } else {
        TraceMode::None
    };
    let cfg = RunConfig::new(r, a.rho, a.delta)
        .with_max_iter(a.max_iter.unwrap_or_else(|| alg.default_max_iter()))
        .with_seed(derive_seed(a.seed, &[stream]))
        .with_trace(mode);
    let (result, per_edge) = run_algorithm(alg, &g, &cfg, 1e-12)?;

    let mut summary = result.summary_json();
    let map = summary.as_object_mut().expect("summary is an object");
    map.insert("algorithm".into(), alg.name().into());
    map.insert("n".into(), g.n().into());
    map.insert("e".into(), g.e().into());
    map.insert("x_avg".into(), cfg.x_avg().into());
    if let Some(t) = per_edge {
        map.insert("time_per_edge".into(), t.into());
    }
    if let Some(path) = &a.out {
        let text = match format {
            Format::Csv => trace_csv(&result),
            Format::Json => serde_json::to_string_pretty(&json!({
                "summary": summary,
                "result": result,
            }))
            .expect("results serialize"),
        };
        write_file(path, &text)?;
        log::info!("wrote {}", path.display());
    }
    emit(&(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"));
    Ok(())
}

fn apply_overrides(
    spec: &mut ExperimentSpec,
    algo: Option<&str>,
    delta: Option<f64>,
    rho: Option<f64>,
    trials: Option<usize>,
    max_iter: Option<usize>,
) -> Result<()> {
    if let Some(list) = algo {
        spec.algorithms = parse_list(list)?;
    }
    for p in &mut spec.grid {
        if let Some(d) = delta {
            p.delta = d;
        }
        if let Some(r) = rho {
            p.rho = r;
        }
    }
    if let Some(t) = trials {
        spec.trials = t;
    }
    spec.max_iter = max_iter;
    spec.validate()
}

fn finish(table: &Table, kind: ExperimentKind, format: &str, out: Option<&Path>) -> Result<()> {
    let format: Format = format.parse()?;
    match out {
        Some(path) => {
            for p in emit_outputs(table, kind, format, path)? {
                eprintln!("wrote {}", p.display());
            }
        }
        None => match format {
            Format::Csv => emit(&quantized_consensus::harness::table_csv(table)),
            Format::Json => emit(&(quantized_consensus::harness::table_json(table) + "\n")),
        },
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let kind: ExperimentKind = a.kind.parse()?;
    if kind == ExperimentKind::CycleCount {
        return Err(ConsensusError::param("use the cycles command for cycle counts"));
    }
    // Validate the output format before spending time on trials.
    let _: Format = a.format.parse()?;
    let scale = if a.full { Scale::Full } else { Scale::Desk };
    let mut spec = ExperimentSpec::preset(kind, scale, a.seed);
    if kind == ExperimentKind::Trace {
        let p = &mut spec.grid[0];
        p.n = a.n.unwrap_or(p.n);
        p.e = Some(a.e.unwrap_or(p.e.unwrap_or(p.n - 1)));
    } else if a.n.is_some() || a.e.is_some() {
        return Err(ConsensusError::param("--n and --e apply to trace experiments only"));
    }
    if kind == ExperimentKind::DeltaSweep && a.delta.is_some() {
        return Err(ConsensusError::param("delta_sweep sets its own resolutions"));
    }
    apply_overrides(&mut spec, a.algo.as_deref(), a.delta, a.rho, a.trials, a.max_iter)?;
    let out = run_experiment(&spec)?;
    finish(&out.table, kind, &a.format, a.out.as_deref())
}

fn cmd_cycles(a: CyclesArgs) -> Result<()> {
    let _: Format = a.format.parse()?;
    let scale = if a.full { Scale::Full } else { Scale::Desk };
    let mut spec = ExperimentSpec::preset(ExperimentKind::CycleCount, scale, a.seed);
    if let Some(list) = &a.n {
        let sizes = parse_sizes(list)?;
        spec.grid = [GraphFamily::Star, GraphFamily::Random, GraphFamily::Complete]
            .into_iter()
            .flat_map(|family| {
                sizes.iter().map(move |&n| GridPoint {
                    n,
                    e: None,
                    delta: 1.0,
                    rho: 1.0,
                    family,
                })
            })
            .collect();
    }
    apply_overrides(&mut spec, a.algo.as_deref(), a.delta, a.rho, a.trials, a.max_iter)?;
    let rows = count_cycles(&spec)?;
    finish(&Table::Summary(rows), ExperimentKind::CycleCount, &a.format, a.out.as_deref())
}

fn cmd_spectra(a: SpectraArgs) -> Result<()> {
    if !(a.delta > 0.0 && a.delta.is_finite()) {
        return Err(ConsensusError::param(format!("resolution must be positive, got {}", a.delta)));
    }
    let g = load_graph(&a.graph, a.seed)?;
    let inc = build_incidence(&g);
    let b = spectral_bounds(&inc, a.rho)?;
    let mut out = json!({
        "n": g.n(),
        "e": g.e(),
        "average_degree": g.average_degree(),
        "rho": a.rho,
        "sigma_max_m_plus": b.sigma_max_mplus,
        "sigma_min_m_minus": b.sigma_min_mminus,
        "sigma_max_m_minus": b.sigma_max_mminus,
        "delta": b.delta,
        "contraction": b.contraction(),
        "envelope_factor": b.envelope_factor(),
        "resolution": a.delta,
        "error_bound": error_bound(a.rho, g.e(), g.n(), a.delta),
    });
    if a.full {
        let map = out.as_object_mut().expect("object literal");
        map.insert("l_minus_spectrum".into(), symmetric_eigen(&inc.l_minus)?.values.into());
        map.insert("l_plus_spectrum".into(), symmetric_eigen(&inc.l_plus)?.values.into());
        let dm = build_iteration_matrix(&inc, a.rho, g.n())?;
        let dstar = iteration_matrix_limit(&dm, 1e-12, 64)?;
        let s = limit_structure(&dstar, g.n());
        map.insert("limit_structure".into(), serde_json::to_value(s).expect("serializes"));
    }
    emit(&(serde_json::to_string_pretty(&out).expect("serializes") + "\n"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Cycles(a) => cmd_cycles(a),
        Command::Spectra(a) => cmd_spectra(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use quantized_consensus::graph::star;

    #[test]
    fn algorithm_lists_parse() {
        let v: Vec<Algorithm> = parse_list("dq, pqdq,").unwrap();
        assert_eq!(v, vec![Algorithm::Dq, Algorithm::Pqdq]);
        assert!(parse_list::<Algorithm>("dq,bogus").is_err());
        assert_eq!(parse_sizes("4,10").unwrap(), vec![4, 10]);
        assert!(parse_sizes("4,").is_err());
    }

    #[test]
    fn trace_csv_has_one_row_per_recorded_iteration() {
        let g = star(3).unwrap();
        let cfg = RunConfig::new(vec![0.0, 1.0, 5.0], 1.0, 1.0).with_trace(TraceMode::Full);
        let (res, _) = run_algorithm(Algorithm::Dq, &g, &cfg, 1e-12).unwrap();
        let csv = trace_csv(&res);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,iterative_error,node_0,node_1,node_2");
        assert_eq!(lines.len(), res.trace.unwrap().values.len() + 1);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn untraced_result_gives_empty_csv() {
        let g = star(3).unwrap();
        let cfg = RunConfig::new(vec![0.0, 1.0, 5.0], 1.0, 1.0);
        let (res, _) = run_algorithm(Algorithm::Dq, &g, &cfg, 1e-12).unwrap();
        assert!(trace_csv(&res).is_empty());
    }
}
