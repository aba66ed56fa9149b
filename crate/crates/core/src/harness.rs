//! Seeded Monte Carlo experiments over graph families and parameter grids.
//!
//! Every trial derives its own streams from `(master_seed, point, trial)`,
//! so results do not depend on how trials are scheduled.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineKind, GOSSIP_MAX_ITER};
use crate::consensus::{
    run_cadmm, run_dq, run_pq, run_pqdq, stage1_length, ConsensusState, Outcome, RunConfig,
    RunResult, TraceMode, CADMM_MAX_ITER, DQ_MAX_ITER,
};
use crate::error::{ConsensusError, Result};
use crate::graph::{complete, gen_random_connected, max_edges, star, Graph};
use crate::metrics::mean_var;
use crate::rng::{derive_seed, experiment_data, purpose, Stream};

/// Iterations of a stand-alone probabilistic run.
pub const PQ_ITERATIONS: usize = 1000;
/// Default horizon of trace experiments.
pub const TRACE_HORIZON: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Cadmm,
    Pq,
    Dq,
    Pqdq,
    Gossip,
    Classical,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Cadmm,
        Algorithm::Pq,
        Algorithm::Dq,
        Algorithm::Pqdq,
        Algorithm::Gossip,
        Algorithm::Classical,
    ];

    /// The four quantized methods compared in the reference experiments.
    pub const COMPARED: [Algorithm; 4] = [
        Algorithm::Pqdq,
        Algorithm::Dq,
        Algorithm::Gossip,
        Algorithm::Classical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cadmm => "cadmm",
            Algorithm::Pq => "pq",
            Algorithm::Dq => "dq",
            Algorithm::Pqdq => "pqdq",
            Algorithm::Gossip => "gossip",
            Algorithm::Classical => "classical",
        }
    }

    pub fn default_max_iter(self) -> usize {
        match self {
            Algorithm::Cadmm => CADMM_MAX_ITER,
            Algorithm::Pq => PQ_ITERATIONS,
            Algorithm::Dq | Algorithm::Pqdq | Algorithm::Classical => DQ_MAX_ITER,
            Algorithm::Gossip => GOSSIP_MAX_ITER,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ConsensusError::param(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    /// Random connected graph; edge count from the grid point or drawn per trial.
    Random,
    Star,
    Complete,
}

impl GraphFamily {
    pub fn name(self) -> &'static str {
        match self {
            GraphFamily::Random => "random",
            GraphFamily::Star => "star",
            GraphFamily::Complete => "complete",
        }
    }
}

impl std::str::FromStr for GraphFamily {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(GraphFamily::Random),
            "star" => Ok(GraphFamily::Star),
            "complete" => Ok(GraphFamily::Complete),
            other => Err(ConsensusError::param(format!("unknown graph family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Trace,
    SweepEdges,
    SweepNodes,
    SweepAvgDegree,
    DeltaSweep,
    CycleCount,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Trace => "trace",
            ExperimentKind::SweepEdges => "sweep_edges",
            ExperimentKind::SweepNodes => "sweep_nodes",
            ExperimentKind::SweepAvgDegree => "sweep_avg_degree",
            ExperimentKind::DeltaSweep => "delta_sweep",
            ExperimentKind::CycleCount => "cycle_count",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = [
            ExperimentKind::Trace,
            ExperimentKind::SweepEdges,
            ExperimentKind::SweepNodes,
            ExperimentKind::SweepAvgDegree,
            ExperimentKind::DeltaSweep,
            ExperimentKind::CycleCount,
        ];
        let norm = s.replace('-', "_");
        kinds
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| ConsensusError::param(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    /// Edge count for random graphs; `None` draws it uniformly from
    /// `[N-1, N(N-1)/2]` per trial. Ignored for star and complete graphs.
    pub e: Option<usize>,
    pub delta: f64,
    pub rho: f64,
    pub family: GraphFamily,
}

impl GridPoint {
    pub fn random(n: usize, e: usize, delta: f64) -> Self {
        GridPoint {
            n,
            e: Some(e),
            delta,
            rho: 1.0,
            family: GraphFamily::Random,
        }
    }

    fn feasible(&self) -> bool {
        if self.n < 2 {
            return false;
        }
        match (self.family, self.e) {
            (GraphFamily::Random, Some(e)) => e >= self.n - 1 && e <= max_edges(self.n),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Shrunk grids and trial counts that finish on a laptop.
    Desk,
    /// Trial counts of the reference experiments.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub algorithms: Vec<Algorithm>,
    pub grid: Vec<GridPoint>,
    pub trials: usize,
    pub master_seed: u64,
    /// Overrides every algorithm's default iteration cap.
    pub max_iter: Option<usize>,
    /// Iterations recorded by trace experiments.
    pub horizon: usize,
}

fn edge_grid(scale: Scale) -> Vec<usize> {
    match scale {
        Scale::Desk => vec![49, 100, 200, 400, 700, 1000, 1225],
        Scale::Full => {
            let mut v: Vec<usize> = (0..=23).map(|i| 49 + 50 * i).collect();
            v.push(1225);
            v
        }
    }
}

impl ExperimentSpec {
    /// Default protocol for `kind`, mirroring the reference experiment settings.
    pub fn preset(kind: ExperimentKind, scale: Scale, master_seed: u64) -> Self {
        let full = scale == Scale::Full;
        let sweep_trials = if full { 100 } else { 20 };
        let (algorithms, grid, trials) = match kind {
            ExperimentKind::Trace => (
                Algorithm::COMPARED.to_vec(),
                vec![GridPoint::random(50, 500, 1.0)],
                if full { 1000 } else { 20 },
            ),
            ExperimentKind::SweepEdges => (
                Algorithm::COMPARED.to_vec(),
                edge_grid(scale)
                    .into_iter()
                    .map(|e| GridPoint::random(50, e, 1.0))
                    .collect(),
                sweep_trials,
            ),
            ExperimentKind::SweepNodes => {
                let ns: Vec<usize> = if full {
                    (0..=18).map(|i| 29 + 20 * i).chain([399]).collect()
                } else {
                    vec![29, 50, 100, 200, 399]
                };
                (
                    Algorithm::COMPARED.to_vec(),
                    ns.into_iter()
                        .map(|n| GridPoint::random(n, 400, 1.0))
                        .collect(),
                    sweep_trials,
                )
            }
            ExperimentKind::SweepAvgDegree => {
                let ns: Vec<usize> = if full {
                    (1..=10).map(|i| 20 * i).collect()
                } else {
                    vec![20, 50, 100, 200]
                };
                (
                    Algorithm::COMPARED.to_vec(),
                    ns.into_iter()
                        .map(|n| GridPoint::random(n, 5 * n, 1.0))
                        .collect(),
                    sweep_trials,
                )
            }
            ExperimentKind::DeltaSweep => {
                let mut grid = Vec::new();
                for delta in [0.02, 0.1, 0.5, 2.5] {
                    for e in edge_grid(scale) {
                        grid.push(GridPoint::random(50, e, delta));
                    }
                }
                (vec![Algorithm::Pqdq], grid, sweep_trials)
            }
            ExperimentKind::CycleCount => {
                let mut grid = Vec::new();
                for family in [GraphFamily::Star, GraphFamily::Random, GraphFamily::Complete] {
                    for n in [10, 50] {
                        grid.push(GridPoint {
                            n,
                            e: None,
                            delta: 1.0,
                            rho: 1.0,
                            family,
                        });
                    }
                }
                (
                    vec![Algorithm::Dq, Algorithm::Pqdq],
                    grid,
                    if full { 10_000 } else { 200 },
                )
            }
        };
        ExperimentSpec {
            kind,
            algorithms,
            grid,
            trials,
            master_seed,
            max_iter: None,
            horizon: TRACE_HORIZON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(ConsensusError::param("experiment grid is empty"));
        }
        if self.algorithms.is_empty() {
            return Err(ConsensusError::param("no algorithms selected"));
        }
        if self.trials == 0 {
            return Err(ConsensusError::param("trials must be at least 1"));
        }
        if self.max_iter == Some(0) {
            return Err(ConsensusError::param("max_iter must be at least 1"));
        }
        if self.kind == ExperimentKind::Trace && self.horizon == 0 {
            return Err(ConsensusError::param("trace horizon must be at least 1"));
        }
        for p in &self.grid {
            if !(p.delta > 0.0 && p.delta.is_finite() && p.rho > 0.0 && p.rho.is_finite()) {
                return Err(ConsensusError::param(format!(
                    "grid point N={} has non-positive delta or rho",
                    p.n
                )));
            }
        }
        Ok(())
    }

    fn cap(&self, alg: Algorithm) -> usize {
        self.max_iter.unwrap_or_else(|| alg.default_max_iter())
    }
}

/// Graph and data of one trial, with the trial's derived seed.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub graph: Graph,
    pub r: Vec<f64>,
    pub seed: u64,
}

/// Builds the graph and data of trial `trial` at grid point `point`.
pub fn trial_setup(master_seed: u64, point: usize, trial: usize, p: &GridPoint) -> Result<TrialSetup> {
    let seed = derive_seed(master_seed, &[point as u64, trial as u64]);
    let mut gs = Stream::derived(seed, &[purpose::GRAPH]);
    let graph = match p.family {
        GraphFamily::Star => star(p.n)?,
        GraphFamily::Complete => complete(p.n)?,
        GraphFamily::Random => {
            let e = match p.e {
                Some(e) => e,
                None => p.n - 1 + gs.index(max_edges(p.n) + 2 - p.n),
            };
            gen_random_connected(p.n, e, gs.next_u64())?
        }
    };
    let r = experiment_data(p.n, &mut Stream::derived(seed, &[purpose::DATA]));
    Ok(TrialSetup { graph, r, seed })
}

/// Outcome of one algorithm on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub algorithm: Algorithm,
    pub outcome: String,
    pub consensus_error: f64,
    pub bound: Option<f64>,
    /// Convergence time: `k0` for the ADMM variants, `2K + k0` for the
    /// two-stage algorithm, start of the stable window for the baselines.
    pub time: f64,
    pub time_per_edge: Option<f64>,
    pub stage2_time: Option<f64>,
    pub period: Option<usize>,
    /// Largest deviation of a node's period mean from the common value.
    pub period_spread: Option<f64>,
    pub edges: usize,
    pub trace: Option<Vec<f64>>,
}

fn trial_config(setup: &TrialSetup, p: &GridPoint, alg: Algorithm, cap: usize, trace: TraceMode) -> RunConfig {
    let stream_purpose = match alg {
        Algorithm::Gossip => purpose::GOSSIP,
        _ => purpose::QUANTIZER,
    };
    RunConfig::new(setup.r.clone(), p.rho, p.delta)
        .with_max_iter(cap)
        .with_seed(derive_seed(setup.seed, &[stream_purpose]))
        .with_trace(trace)
}

/// Extends a trace that ended in a repeating state: `errs[j..j+period]`
/// repeats forever. Truncates or extends to `len` entries.
fn extend_periodic(mut errs: Vec<f64>, j: usize, period: usize, len: usize) -> Vec<f64> {
    errs.truncate(j + period);
    while errs.len() < len {
        let m = errs.len();
        errs.push(errs[j + (m - j) % period]);
    }
    errs.truncate(len);
    errs
}

/// Runs one algorithm from its standard start: zeros for the ADMM
/// variants, `x0 = r` for the baselines. The unquantized iteration stops at
/// `tol` (relative change); `tol = 0` runs it to the cap. Returns the run
/// and, for gossip, its per-edge convergence time.
pub fn run_algorithm(alg: Algorithm, g: &Graph, cfg: &RunConfig, tol: f64) -> Result<(RunResult, Option<f64>)> {
    let n = g.n();
    Ok(match alg {
        Algorithm::Cadmm => (run_cadmm(&ConsensusState::zeros(n), g, cfg, tol)?.0, None),
        Algorithm::Pq => (run_pq(&ConsensusState::zeros(n), g, cfg)?, None),
        Algorithm::Dq => (run_dq(&ConsensusState::zeros(n), g, cfg)?, None),
        Algorithm::Pqdq => (run_pqdq(g, cfg)?, None),
        Algorithm::Gossip | Algorithm::Classical => {
            let kind = if alg == Algorithm::Gossip {
                BaselineKind::Gossip
            } else {
                BaselineKind::Classical
            };
            let run = run_baseline(kind, g, cfg)?;
            (run.result, run.per_edge_time)
        }
    })
}

/// Runs one algorithm on one trial. With `horizon`, the per-iteration
/// iterative error is recorded for iterations `0..=horizon`.
pub fn run_trial(
    setup: &TrialSetup,
    p: &GridPoint,
    alg: Algorithm,
    cap: usize,
    horizon: Option<usize>,
) -> Result<TrialRecord> {
    let g = &setup.graph;
    let mode = if horizon.is_some() {
        TraceMode::Errors
    } else {
        TraceMode::None
    };
    let mut cap = horizon.unwrap_or(cap);
    let mut offset = 0;
    if alg == Algorithm::Pqdq {
        offset = 2 * stage1_length(g.n(), p.delta, p.rho);
        if let Some(h) = horizon {
            cap = h.saturating_sub(offset).max(1);
        }
    }
    let cfg = trial_config(setup, p, alg, cap, mode);
    let tol = if horizon.is_some() { 0.0 } else { 1e-12 };
    let (result, time_per_edge) = run_algorithm(alg, g, &cfg, tol)?;
    let stage2_time = (alg == Algorithm::Pqdq).then(|| result.outcome.k0() as f64);
    let time = (offset + result.outcome.k0()) as f64;
    let (period, repeat_len) = match result.outcome {
        Outcome::Cyclic { period, .. } => (Some(period), period),
        _ => (None, 1),
    };
    let period_spread = match (&result.period_means, result.outcome.consensus_value()) {
        (Some(means), Some(v)) => Some(means.iter().map(|m| (m - v).abs()).fold(0.0, f64::max)),
        _ => None,
    };
    let trace = match (horizon, result.trace.as_ref()) {
        (Some(h), Some(t)) => {
            let errs = t.iterative_error.clone();
            Some(if result.outcome.is_terminal() {
                extend_periodic(errs, offset + result.outcome.k0(), repeat_len, h + 1)
            } else {
                let mut e = errs;
                e.truncate(h + 1);
                while e.len() < h + 1 {
                    let last = *e.last().expect("trace has the initial entry");
                    e.push(last);
                }
                e
            })
        }
        _ => None,
    };
    Ok(TrialRecord {
        algorithm: alg,
        outcome: result.outcome.name().to_string(),
        consensus_error: result.consensus_error,
        bound: result.bound.is_finite().then_some(result.bound),
        time,
        time_per_edge,
        stage2_time,
        period,
        period_spread,
        edges: g.e(),
        trace,
    })
}

/// Aggregate of one algorithm at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub point: usize,
    pub n: usize,
    pub mean_edges: f64,
    pub delta: f64,
    pub rho: f64,
    pub family: GraphFamily,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub mean_error: f64,
    pub var_error: f64,
    pub max_error: f64,
    pub mean_time: f64,
    pub mean_time_per_edge: Option<f64>,
    pub mean_stage2_time: Option<f64>,
    pub bound: Option<f64>,
    pub within_bound: usize,
    pub converged: usize,
    pub cyclic: usize,
    pub capped: usize,
    /// Largest period-mean deviation over cyclic trials.
    pub max_period_spread: Option<f64>,
}

/// Mean iterative error of one algorithm at iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub point: usize,
    pub algorithm: Algorithm,
    pub k: usize,
    pub mean_iterative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "table", content = "rows", rename_all = "snake_case")]
pub enum Table {
    Summary(Vec<ExperimentRow>),
    Trace(Vec<TraceRow>),
}

impl Table {
    pub fn len(&self) -> usize {
        match self {
            Table::Summary(r) => r.len(),
            Table::Trace(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn summary(&self) -> Option<&[ExperimentRow]> {
        match self {
            Table::Summary(r) => Some(r),
            Table::Trace(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub table: Table,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

fn aggregate(point: usize, p: &GridPoint, alg: Algorithm, recs: &[&TrialRecord]) -> ExperimentRow {
    let errs: Vec<f64> = recs.iter().map(|r| r.consensus_error).collect();
    let (mean_error, var_error) = mean_var(&errs);
    let count = |name: &str| recs.iter().filter(|r| r.outcome == name).count();
    let bound = recs.iter().filter_map(|r| r.bound).fold(None, |m: Option<f64>, b| {
        Some(m.map_or(b, |m| m.max(b)))
    });
    ExperimentRow {
        point,
        n: p.n,
        mean_edges: mean_of(recs.iter().map(|r| r.edges as f64)).unwrap_or(0.0),
        delta: p.delta,
        rho: p.rho,
        family: p.family,
        algorithm: alg,
        trials: recs.len(),
        mean_error,
        var_error,
        max_error: errs.iter().cloned().fold(0.0, f64::max),
        mean_time: mean_of(recs.iter().map(|r| r.time)).unwrap_or(0.0),
        mean_time_per_edge: mean_of(recs.iter().filter_map(|r| r.time_per_edge)),
        mean_stage2_time: mean_of(recs.iter().filter_map(|r| r.stage2_time)),
        bound,
        within_bound: recs
            .iter()
            .filter(|r| r.bound.is_some_and(|b| r.consensus_error <= b))
            .count(),
        converged: count("converged"),
        cyclic: count("cyclic"),
        capped: count("capped"),
        max_period_spread: recs
            .iter()
            .filter_map(|r| r.period_spread)
            .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s)))),
    }
}

#[cfg(feature = "parallel")]
fn map_jobs<T, F>(jobs: &[(usize, usize)], parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&(usize, usize)) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        jobs.par_iter().map(f).collect()
    } else {
        jobs.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T, F>(jobs: &[(usize, usize)], _parallel: bool, f: F) -> Vec<T>
where
    F: Fn(&(usize, usize)) -> T,
{
    jobs.iter().map(f).collect()
}

/// Runs every trial of `spec` and returns the per-trial records grouped by
/// grid point (infeasible points are skipped and absent).
pub fn run_trials(spec: &ExperimentSpec, parallel: bool) -> Result<Vec<(usize, Vec<Vec<TrialRecord>>)>> {
    spec.validate()?;
    let mut points = Vec::new();
    for (i, p) in spec.grid.iter().enumerate() {
        if p.feasible() {
            points.push(i);
        } else {
            log::warn!(
                "skipping infeasible grid point N={} E={:?} ({})",
                p.n,
                p.e,
                p.family.name()
            );
        }
    }
    if points.is_empty() {
        return Err(ConsensusError::param("no feasible grid point in the experiment"));
    }
    let jobs: Vec<(usize, usize)> = points
        .iter()
        .flat_map(|&i| (0..spec.trials).map(move |t| (i, t)))
        .collect();
    let horizon = (spec.kind == ExperimentKind::Trace).then_some(spec.horizon);
    let results: Vec<Result<Vec<TrialRecord>>> = map_jobs(&jobs, parallel, |&(i, t)| {
        let p = &spec.grid[i];
        let setup = trial_setup(spec.master_seed, i, t, p)?;
        spec.algorithms
            .iter()
            .map(|&alg| run_trial(&setup, p, alg, spec.cap(alg), horizon))
            .collect()
    });
    let mut grouped: Vec<(usize, Vec<Vec<TrialRecord>>)> = points.iter().map(|&i| (i, Vec::new())).collect();
    for (&(i, _), res) in jobs.iter().zip(results) {
        let slot = grouped
            .iter_mut()
            .find(|(p, _)| *p == i)
            .expect("job point is in the feasible set");
        slot.1.push(res?);
    }
    Ok(grouped)
}

/// Runs `spec` and aggregates it into a table. Deterministic given the
/// master seed, whether or not trials run in parallel.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    run_experiment_with(spec, cfg!(feature = "parallel"))
}

pub fn run_experiment_with(spec: &ExperimentSpec, parallel: bool) -> Result<ExperimentOutput> {
    let grouped = run_trials(spec, parallel)?;
    let table = if spec.kind == ExperimentKind::Trace {
        let mut rows = Vec::new();
        for (i, trials) in &grouped {
            for (a, &alg) in spec.algorithms.iter().enumerate() {
                let mut sum = vec![0.0; spec.horizon + 1];
                for t in trials {
                    let tr = t[a].trace.as_ref().expect("trace experiments record traces");
                    for (s, v) in sum.iter_mut().zip(tr) {
                        *s += v;
                    }
                }
                rows.extend(sum.into_iter().enumerate().map(|(k, s)| TraceRow {
                    point: *i,
                    algorithm: alg,
                    k,
                    mean_iterative_error: s / trials.len() as f64,
                }));
            }
        }
        Table::Trace(rows)
    } else {
        let mut rows = Vec::new();
        for (i, trials) in &grouped {
            for (a, &alg) in spec.algorithms.iter().enumerate() {
                let recs: Vec<&TrialRecord> = trials.iter().map(|t| &t[a]).collect();
                rows.push(aggregate(*i, &spec.grid[*i], alg, &recs));
            }
        }
        Table::Summary(rows)
    };
    Ok(ExperimentOutput {
        spec: spec.clone(),
        table,
    })
}

/// Cycle counting over graph families; rows are keyed by (family, N, algorithm).
pub fn count_cycles(spec: &ExperimentSpec) -> Result<Vec<ExperimentRow>> {
    if spec.kind != ExperimentKind::CycleCount {
        return Err(ConsensusError::param("count_cycles expects a cycle_count spec"));
    }
    let out = run_experiment(spec)?;
    match out.table {
        Table::Summary(rows) => Ok(rows),
        Table::Trace(_) => unreachable!("cycle counts aggregate to a summary"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(ConsensusError::param(format!("unknown output format {other:?}"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_COLUMNS: &str = "point,n,mean_edges,delta,rho,family,algorithm,trials,mean_error,var_error,max_error,mean_time,mean_time_per_edge,mean_stage2_time,bound,within_bound,converged,cyclic,capped,max_period_spread";
pub const TRACE_COLUMNS: &str = "point,algorithm,k,mean_iterative_error";

/// Renders a table as CSV with a header row.
pub fn table_csv(table: &Table) -> String {
    let mut s = String::new();
    match table {
        Table::Summary(rows) => {
            s.push_str(SUMMARY_COLUMNS);
            s.push('\n');
            for r in rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.point,
                    r.n,
                    r.mean_edges,
                    r.delta,
                    r.rho,
                    r.family.name(),
                    r.algorithm,
                    r.trials,
                    r.mean_error,
                    r.var_error,
                    r.max_error,
                    r.mean_time,
                    opt(r.mean_time_per_edge),
                    opt(r.mean_stage2_time),
                    opt(r.bound),
                    r.within_bound,
                    r.converged,
                    r.cyclic,
                    r.capped,
                    opt(r.max_period_spread),
                );
            }
        }
        Table::Trace(rows) => {
            s.push_str(TRACE_COLUMNS);
            s.push('\n');
            for r in rows {
                let _ = writeln!(s, "{},{},{},{}", r.point, r.algorithm, r.k, r.mean_iterative_error);
            }
        }
    }
    s
}

pub fn table_json(table: &Table) -> String {
    serde_json::to_string_pretty(table).expect("tables serialize")
}

pub fn parse_table_json(text: &str) -> Result<Table> {
    serde_json::from_str(text).map_err(|e| ConsensusError::param(format!("invalid table JSON: {e}")))
}

/// Path of the plotting script written next to `path`.
pub fn plot_script_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    path.with_file_name(format!("{stem}.plot.py"))
}

fn plot_script(kind: ExperimentKind, data_file: &str, format: Format) -> String {
    let loader = match format {
        Format::Csv => format!(
            "with open(HERE / {data_file:?}) as fh:\n    rows = list(csv.DictReader(fh))\n"
        ),
        Format::Json => format!(
            "with open(HERE / {data_file:?}) as fh:\n    rows = json.load(fh)[\"rows\"]\n\
             rows = [{{k: (\"\" if v is None else str(v)) for k, v in r.items()}} for r in rows]\n"
        ),
    };
    let body = match kind {
        ExperimentKind::Trace => "\
fig, ax = plt.subplots()
for alg in sorted({r['algorithm'] for r in rows}):
    pts = [(int(r['k']), float(r['mean_iterative_error'])) for r in rows if r['algorithm'] == alg]
    ax.semilogy([p[0] for p in pts], [max(p[1], 1e-6) for p in pts], label=alg)
ax.set_xlabel('iteration k')
ax.set_ylabel('iterative error')
"
        .to_string(),
        ExperimentKind::CycleCount => "\
fig, ax = plt.subplots()
labels = [f\"{r['family']} N={r['n']} {r['algorithm']}\" for r in rows]
ax.bar(range(len(rows)), [int(r['cyclic']) for r in rows])
ax.set_xticks(range(len(rows)), labels, rotation=60, ha='right')
ax.set_ylabel('cyclic trials')
"
        .to_string(),
        other => {
            let x = match other {
                ExperimentKind::SweepNodes | ExperimentKind::SweepAvgDegree => "n",
                _ => "mean_edges",
            };
            let group = if other == ExperimentKind::DeltaSweep {
                "f\"delta={r['delta']}\""
            } else {
                "r['algorithm']"
            };
            let y = if other == ExperimentKind::DeltaSweep {
                "float(r['mean_error']) / float(r['delta'])"
            } else {
                "float(r['mean_error'])"
            };
            format!(
                "\
fig, (ax, bx) = plt.subplots(1, 2, figsize=(11, 4))
for key in sorted({{{group} for r in rows}}):
    sel = [r for r in rows if {group} == key]
    xs = [float(r['{x}']) for r in sel]
    ax.plot(xs, [{y} for r in sel], marker='o', label=key)
    bx.plot(xs, [float(r['mean_time']) for r in sel], marker='o', label=key)
    if any(r['mean_time_per_edge'] for r in sel):
        bx.plot(xs, [float(r['mean_time_per_edge']) for r in sel], ls='--', label=f'{{key}} per edge')
ax.set_xlabel('{x}')
ax.set_ylabel('consensus error')
bx.set_xlabel('{x}')
bx.set_ylabel('convergence time')
bx.set_yscale('log')
bx.legend()
"
            )
        }
    };
    format!(
        "# Plots {} from {data_file}.\nimport csv\nimport json\nimport pathlib\n\nimport matplotlib.pyplot as plt\n\nHERE = pathlib.Path(__file__).resolve().parent\n{loader}\n{body}ax.legend()\nfig.tight_layout()\nplt.show()\n",
        kind.name()
    )
}

/// Writes `table` to `path` and a matplotlib script next to it.
/// Returns the paths written.
pub fn emit_outputs(table: &Table, kind: ExperimentKind, format: Format, path: &Path) -> Result<Vec<PathBuf>> {
    let text = match format {
        Format::Csv => table_csv(table),
        Format::Json => table_json(table),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ConsensusError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| ConsensusError::io(path, e))?;
    let script = plot_script_path(path);
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    fs::write(&script, plot_script(kind, &name, format)).map_err(|e| ConsensusError::io(&script, e))?;
    Ok(vec![path.to_path_buf(), script])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(kind: ExperimentKind) -> ExperimentSpec {
        ExperimentSpec {
            kind,
            algorithms: Algorithm::COMPARED.to_vec(),
            grid: vec![GridPoint::random(10, 20, 1.0), GridPoint::random(10, 30, 1.0)],
            trials: 3,
            master_seed: 7,
            max_iter: None,
            horizon: 250,
        }
    }

    #[test]
    fn periodic_extension() {
        let e = extend_periodic(vec![5.0, 4.0, 1.0, 2.0, 1.0], 2, 2, 8);
        assert_eq!(e, vec![5.0, 4.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let e = extend_periodic(vec![3.0, 1.0], 1, 1, 4);
        assert_eq!(e, vec![3.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn summary_rows_per_point_and_algorithm() {
        let out = run_experiment(&small_spec(ExperimentKind::SweepEdges)).unwrap();
        let rows = out.table.summary().unwrap();
        assert_eq!(rows.len(), 2 * 4);
        for r in rows {
            assert_eq!(r.converged + r.cyclic + r.capped, r.trials);
            assert_eq!(r.trials, 3);
        }
        let gossip = rows.iter().find(|r| r.algorithm == Algorithm::Gossip).unwrap();
        assert!(gossip.mean_time_per_edge.is_some());
        let csv = table_csv(&out.table);
        assert_eq!(csv.lines().count(), 1 + rows.len());
    }

    #[test]
    fn infeasible_points_are_skipped() {
        let mut spec = small_spec(ExperimentKind::SweepEdges);
        spec.grid.push(GridPoint::random(10, 100, 1.0));
        let out = run_experiment(&spec).unwrap();
        assert_eq!(out.table.len(), 2 * 4);
    }

    #[test]
    fn parallel_matches_serial() {
        let spec = small_spec(ExperimentKind::SweepEdges);
        let a = run_experiment_with(&spec, true).unwrap();
        let b = run_experiment_with(&spec, false).unwrap();
        assert_eq!(table_csv(&a.table), table_csv(&b.table));
    }

    #[test]
    fn trace_rows_cover_horizon() {
        let out = run_experiment(&small_spec(ExperimentKind::Trace)).unwrap();
        match &out.table {
            Table::Trace(rows) => assert_eq!(rows.len(), 2 * 4 * 251),
            _ => panic!("expected trace table"),
        }
    }

    #[test]
    fn json_round_trip() {
        let out = run_experiment(&small_spec(ExperimentKind::SweepEdges)).unwrap();
        let text = table_json(&out.table);
        assert_eq!(parse_table_json(&text).unwrap(), out.table);
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(ExperimentKind::SweepEdges);
        s.trials = 0;
        assert!(s.validate().is_err());
        let mut s = small_spec(ExperimentKind::SweepEdges);
        s.grid.clear();
        assert!(s.validate().is_err());
        assert!("sweep-edges".parse::<ExperimentKind>().is_ok());
        assert!("pqdq".parse::<Algorithm>().is_ok());
        assert!("nope".parse::<Algorithm>().is_err());
    }

    #[test]
    fn presets_are_valid() {
        for kind in [
            ExperimentKind::Trace,
            ExperimentKind::SweepEdges,
            ExperimentKind::SweepNodes,
            ExperimentKind::SweepAvgDegree,
            ExperimentKind::DeltaSweep,
            ExperimentKind::CycleCount,
        ] {
            for scale in [Scale::Desk, Scale::Full] {
                let s = ExperimentSpec::preset(kind, scale, 1);
                s.validate().unwrap();
                assert!(s.grid.iter().all(|p| p.feasible()));
            }
        }
        let d = ExperimentSpec::preset(ExperimentKind::DeltaSweep, Scale::Desk, 0);
        let mut deltas: Vec<f64> = d.grid.iter().map(|p| p.delta).collect();
        deltas.dedup();
        assert_eq!(deltas, vec![0.02, 0.1, 0.5, 2.5]);
        let a = ExperimentSpec::preset(ExperimentKind::SweepAvgDegree, Scale::Full, 0);
        assert!(a.grid.iter().all(|p| 2 * p.e.unwrap() / p.n == 10));
        assert_eq!(a.grid.first().unwrap().n, 20);
        assert_eq!(a.grid.last().unwrap().n, 200);
    }

    #[test]
    fn outputs_write_table_and_script() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small_spec(ExperimentKind::SweepEdges)).unwrap();
        let path = dir.path().join("sweep.csv");
        let files = emit_outputs(&out.table, ExperimentKind::SweepEdges, Format::Csv, &path).unwrap();
        assert_eq!(files.len(), 2);
        let script = fs::read_to_string(&files[1]).unwrap();
        assert!(script.contains("sweep.csv"));
        assert!(script.contains("mean_error"));
        let bad = Path::new("/proc/nonexistent/dir/x.csv");
        assert!(matches!(
            emit_outputs(&out.table, ExperimentKind::SweepEdges, Format::Csv, bad),
            Err(ConsensusError::Io { .. })
        ));
    }
}
