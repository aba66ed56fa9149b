//! The ADMM consensus engine.
//!
//! Node-form CADMM: with `d_i = |N_i|`,
//!
//! ```text
//! x_i <- (rho d_i x_i + rho sum_{j in N_i} x_j - alpha_i + r_i) / (1 + 2 rho d_i)
//! alpha_i <- alpha_i + rho (d_i x_i' - sum_{j in N_i} x_j')
//! ```
//!
//! The quantized variants replace every transmitted `x` by its quantized
//! value, including the node's own copy. Each node quantizes its fresh
//! iterate exactly once per iteration; that one value feeds the multiplier
//! update and is the message all neighbours (and the node itself) use in
//! the next primal update.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{ConsensusError, Result};
use crate::graph::Graph;
use crate::linalg::{norm2, Matrix};
use crate::metrics::{self, error_bound, iterative_error, GMetric};
use crate::quantize::{check_delta, q_prob_unchecked, round_index};
use crate::rng::Stream;
use crate::spectral::{IncidenceSet, SpectralBounds};

/// Default iteration cap for deterministic runs.
pub const DQ_MAX_ITER: usize = 100_000;
/// Default iteration cap for the unquantized iteration.
pub const CADMM_MAX_ITER: usize = 10_000;
/// Allowed rounding residual when encoding a multiplier as `alpha_base + m rho delta`,
/// as a fraction of `rho delta`.
pub const ALPHA_SNAP: f64 = 1e-6;

/// Node-form iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub x: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Values last transmitted by each node (`x` itself for the unquantized iteration).
    pub xq: Vec<f64>,
    pub k: usize,
}

impl ConsensusState {
    /// Unquantized start; `xq` mirrors `x`.
    pub fn new(x: Vec<f64>, alpha: Vec<f64>) -> Self {
        let xq = x.clone();
        ConsensusState { x, alpha, xq, k: 0 }
    }

    pub fn zeros(n: usize) -> Self {
        ConsensusState::new(vec![0.0; n], vec![0.0; n])
    }

    /// Start for the probabilistic iteration: the initial broadcast is `Q_p(x)`.
    pub fn with_probabilistic_broadcast(
        x: Vec<f64>,
        alpha: Vec<f64>,
        delta: f64,
        stream: &mut Stream,
    ) -> Self {
        let xq = x.iter().map(|&v| q_prob_unchecked(v, delta, stream)).collect();
        ConsensusState { x, alpha, xq, k: 0 }
    }

    /// Start for the deterministic iteration: the initial broadcast is `Q_d(x)`.
    pub fn with_rounding_broadcast(x: Vec<f64>, alpha: Vec<f64>, delta: f64) -> Self {
        let xq = x.iter().map(|&v| round_index(v, delta) * delta).collect();
        ConsensusState { x, alpha, xq, k: 0 }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

/// Distance of `alpha` from the column space of the signed Laplacian.
///
/// `col(L-)` is the orthogonal complement of `1` on a connected graph, so
/// the distance is `|1'alpha| / sqrt(N)`.
pub fn init_condition_residual(alpha: &[f64]) -> f64 {
    alpha.iter().sum::<f64>().abs() / (alpha.len() as f64).sqrt()
}

/// Which per-iteration series a run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    #[default]
    None,
    /// Iterative error of the transmitted values only.
    Errors,
    /// Iterative error plus every node's transmitted value.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub r: Vec<f64>,
    pub rho: f64,
    pub delta: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Overrides the stage-1 length of the two-stage algorithm.
    pub k_stage1: Option<usize>,
    pub trace: TraceMode,
}

impl RunConfig {
    pub fn new(r: Vec<f64>, rho: f64, delta: f64) -> Self {
        RunConfig {
            r,
            rho,
            delta,
            max_iter: DQ_MAX_ITER,
            seed: 0,
            k_stage1: None,
            trace: TraceMode::None,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trace(mut self, trace: TraceMode) -> Self {
        self.trace = trace;
        self
    }

    pub fn with_k_stage1(mut self, k: usize) -> Self {
        self.k_stage1 = Some(k);
        self
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(ConsensusError::param(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        check_delta(self.delta)?;
        if self.max_iter == 0 {
            return Err(ConsensusError::param("max_iter must be at least 1"));
        }
        if self.r.len() != g.n() {
            return Err(ConsensusError::param(format!(
                "data vector has {} entries for a {}-node graph",
                self.r.len(),
                g.n()
            )));
        }
        if self.r.iter().any(|v| !v.is_finite()) {
            return Err(ConsensusError::param("data vector has non-finite entries"));
        }
        if self.k_stage1 == Some(0) {
            return Err(ConsensusError::param("stage-1 length K must be at least 1"));
        }
        Ok(())
    }

    pub fn x_avg(&self) -> f64 {
        self.r.iter().sum::<f64>() / self.r.len() as f64
    }
}

/// Stage-1 length of the two-stage algorithm,
/// `ceil(10 N (log10(1/delta + 1) + 1) max{-log10 rho, 1})`.
pub fn stage1_length(n: usize, delta: f64, rho: f64) -> usize {
    let k = 10.0 * n as f64 * ((1.0 / delta + 1.0).log10() + 1.0) * (-rho.log10()).max(1.0);
    k.ceil() as usize
}

/// Per-iteration record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// `iterative_error[k]` is the error of the values transmitted at iteration `k`.
    pub iterative_error: Vec<f64>,
    /// Transmitted values per iteration; empty unless the trace mode is `Full`.
    pub values: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn push(&mut self, mode: TraceMode, xq: &[f64], x_avg: f64) {
        match mode {
            TraceMode::None => {}
            TraceMode::Errors => self.iterative_error.push(iterative_error(xq, x_avg)),
            TraceMode::Full => {
                self.iterative_error.push(iterative_error(xq, x_avg));
                self.values.push(xq.to_vec());
            }
        }
    }

    fn append(&mut self, other: Trace) {
        self.iterative_error.extend(other.iterative_error);
        self.values.extend(other.values);
    }

    pub fn len(&self) -> usize {
        self.iterative_error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterative_error.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    /// Every node transmits the same lattice value from iteration `k0` on.
    Converged { x_star_q: f64, k0: usize },
    /// The state repeats with period `period >= 2` from iteration `k0` on;
    /// each node's transmitted values average to `cycle_mean` over a period.
    Cyclic {
        period: usize,
        k0: usize,
        cycle_mean: f64,
    },
    IterationCapped { iterations: usize },
}

impl Outcome {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Outcome::IterationCapped { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Converged { .. } => "converged",
            Outcome::Cyclic { .. } => "cyclic",
            Outcome::IterationCapped { .. } => "capped",
        }
    }

    /// Iteration at which the terminal behaviour starts; the cap for capped runs.
    pub fn k0(&self) -> usize {
        match *self {
            Outcome::Converged { k0, .. } | Outcome::Cyclic { k0, .. } => k0,
            Outcome::IterationCapped { iterations } => iterations,
        }
    }

    pub fn consensus_value(&self) -> Option<f64> {
        match *self {
            Outcome::Converged { x_star_q, .. } => Some(x_star_q),
            Outcome::Cyclic { cycle_mean, .. } => Some(cycle_mean),
            Outcome::IterationCapped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub k: usize,
    pub x_bar: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub outcome: Outcome,
    /// `|x* - x_avg|` for terminal outcomes; the final iterative error otherwise.
    pub consensus_error: f64,
    /// Deterministic worst-case bound `(1/2 + rho 2E/N) delta` (infinite when not applicable).
    pub bound: f64,
    /// Iterations executed, counting from the start of the run (stage 1 included).
    pub iterations: usize,
    /// Per-node means over one period for cyclic runs.
    pub period_means: Option<Vec<f64>>,
    /// Set when the exact state encoding failed and a tolerance match was used.
    pub fallback: bool,
    pub stage1: Option<Stage1Summary>,
    pub trace: Option<Trace>,
}

impl RunResult {
    pub fn within_bound(&self) -> bool {
        self.consensus_error <= self.bound
    }

    /// Compact JSON view: outcome, k0, period (cyclic only), consensus error and bound.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut obj = serde_json::json!({
            "outcome": self.outcome.name(),
            "k0": self.outcome.k0(),
            "consensus_error": self.consensus_error,
            "bound": if self.bound.is_finite() { serde_json::json!(self.bound) } else { serde_json::Value::Null },
            "within_bound": self.within_bound(),
            "iterations": self.iterations,
        });
        let map = obj.as_object_mut().expect("object literal");
        if let Outcome::Cyclic { period, .. } = self.outcome {
            map.insert("period".into(), period.into());
        }
        if let Some(v) = self.outcome.consensus_value() {
            map.insert("consensus_value".into(), v.into());
        }
        if let Some(s) = &self.stage1 {
            map.insert("stage1_k".into(), s.k.into());
        }
        if self.fallback {
            map.insert("fallback".into(), true.into());
        }
        obj
    }
}

#[inline]
fn neighbor_sum(g: &Graph, v: &[f64], i: usize) -> f64 {
    g.neighbors(i).iter().map(|&j| v[j]).sum()
}

/// Primal update from the transmitted values `xq`.
#[inline]
fn primal_update(g: &Graph, xq: &[f64], alpha: &[f64], r: &[f64], rho: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let d = g.degree(i) as f64;
        *o = (rho * d * xq[i] + rho * neighbor_sum(g, xq, i) - alpha[i] + r[i])
            / (1.0 + 2.0 * rho * d);
    }
}

#[inline]
fn dual_update(g: &Graph, xq_new: &[f64], rho: f64, alpha: &mut [f64]) {
    for (i, a) in alpha.iter_mut().enumerate() {
        let d = g.degree(i) as f64;
        *a += rho * (d * xq_new[i] - neighbor_sum(g, xq_new, i));
    }
}

/// One synchronous unquantized CADMM iteration.
pub fn cadmm_step(state: &ConsensusState, g: &Graph, cfg: &RunConfig) -> ConsensusState {
    let mut x = vec![0.0; g.n()];
    primal_update(g, &state.x, &state.alpha, &cfg.r, cfg.rho, &mut x);
    let mut alpha = state.alpha.clone();
    dual_update(g, &x, cfg.rho, &mut alpha);
    ConsensusState {
        xq: x.clone(),
        x,
        alpha,
        k: state.k + 1,
    }
}

/// One iteration with probabilistic quantization of every transmitted value.
///
/// Consumes exactly one uniform draw per node.
pub fn pq_cadmm_step(
    state: &ConsensusState,
    g: &Graph,
    cfg: &RunConfig,
    stream: &mut Stream,
) -> ConsensusState {
    let mut x = vec![0.0; g.n()];
    primal_update(g, &state.xq, &state.alpha, &cfg.r, cfg.rho, &mut x);
    let xq: Vec<f64> = x
        .iter()
        .map(|&v| q_prob_unchecked(v, cfg.delta, stream))
        .collect();
    let mut alpha = state.alpha.clone();
    dual_update(g, &xq, cfg.rho, &mut alpha);
    ConsensusState {
        x,
        alpha,
        xq,
        k: state.k + 1,
    }
}

/// One iteration with rounding quantization; a deterministic map.
pub fn dq_cadmm_step(state: &ConsensusState, g: &Graph, cfg: &RunConfig) -> ConsensusState {
    let mut x = vec![0.0; g.n()];
    primal_update(g, &state.xq, &state.alpha, &cfg.r, cfg.rho, &mut x);
    let xq: Vec<f64> = x
        .iter()
        .map(|&v| round_index(v, cfg.delta) * cfg.delta)
        .collect();
    let mut alpha = state.alpha.clone();
    dual_update(g, &xq, cfg.rho, &mut alpha);
    ConsensusState {
        x,
        alpha,
        xq,
        k: state.k + 1,
    }
}

/// Exact integer encoding of a deterministic-iteration state.
struct StateEncoder {
    alpha_base: Vec<f64>,
    unit: f64,
    delta: f64,
    exact: bool,
    tol: f64,
}

impl StateEncoder {
    fn new(alpha_base: Vec<f64>, rho: f64, delta: f64) -> Self {
        StateEncoder {
            alpha_base,
            unit: rho * delta,
            delta,
            exact: true,
            tol: 0.0,
        }
    }

    /// Encodes `(xq, alpha)` as lattice indices and multiplier offsets,
    /// then rewrites `alpha` to its canonical value `alpha_base + m rho delta`
    /// so that the iteration map depends on the encoded state only.
    ///
    /// Once an offset misses the snap guard, the encoder switches for the
    /// rest of the run to tolerance-matched keys.
    fn encode(&mut self, xq: &[f64], alpha: &mut [f64]) -> Result<Vec<i64>> {
        let n = xq.len();
        let mut key = Vec::with_capacity(2 * n);
        for &v in xq {
            key.push(lattice_index(v / self.delta)?);
        }
        if self.exact {
            let mut offsets = Vec::with_capacity(n);
            for (a, b) in alpha.iter().zip(&self.alpha_base) {
                let m = ((a - b) / self.unit).round();
                if (a - b - m * self.unit).abs() > ALPHA_SNAP * self.unit {
                    self.exact = false;
                    let scale = 1.0 + alpha.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    self.tol = 1e-9 * scale;
                    log::warn!(
                        "multiplier offset off the rho*delta grid by {:.3e}; \
                         switching to tolerance-matched cycle detection",
                        (a - b - m * self.unit).abs()
                    );
                    break;
                }
                offsets.push(m);
            }
            if self.exact {
                for ((a, b), m) in alpha.iter_mut().zip(&self.alpha_base).zip(&offsets) {
                    *a = b + m * self.unit;
                }
                for m in offsets {
                    key.push(lattice_index(m)?);
                }
                return Ok(key);
            }
        }
        for &a in alpha.iter() {
            key.push(lattice_index(a / self.tol)?);
        }
        Ok(key)
    }
}

/// Integers beyond this no longer identify lattice points exactly.
const MAX_LATTICE_INDEX: f64 = 9_007_199_254_740_992.0;

fn lattice_index(t: f64) -> Result<i64> {
    let t = t.round();
    if !t.is_finite() || t.abs() > MAX_LATTICE_INDEX {
        return Err(ConsensusError::numerical(format!(
            "lattice index {t:e} out of exact range; resolution too fine for the data"
        )));
    }
    Ok(t as i64)
}

/// History of encoded states with first-visit indices.
struct StateHistory {
    keys: Vec<Vec<i64>>,
    index: HashMap<u64, Vec<usize>>,
}

impl StateHistory {
    fn new() -> Self {
        StateHistory {
            keys: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn fingerprint(key: &[i64]) -> u64 {
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        h.finish()
    }

    /// Records `key` as the state at the next iteration index; returns the
    /// index of an earlier identical state if there is one.
    fn visit(&mut self, key: Vec<i64>) -> Option<usize> {
        let fp = Self::fingerprint(&key);
        if let Some(prev) = self.index.get(&fp) {
            if let Some(&j) = prev.iter().find(|&&j| self.keys[j] == key) {
                return Some(j);
            }
        }
        let k = self.keys.len();
        self.index.entry(fp).or_default().push(k);
        self.keys.push(key);
        None
    }
}

/// Runs the deterministic iteration from `initial` until the state repeats.
///
/// The starting broadcast is `Q_d(initial.x)`; `initial.xq` is ignored.
/// `initial.alpha` must satisfy the initialization condition. A repeat at
/// distance one is a convergence, a longer repeat is a cycle; both are
/// checked against the worst-case error bound.
pub fn run_dq(initial: &ConsensusState, g: &Graph, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate(g)?;
    if initial.n() != g.n() || initial.alpha.len() != g.n() {
        return Err(ConsensusError::param("initial state size does not match graph"));
    }
    let x_avg = cfg.x_avg();
    let alpha_scale = 1.0 + initial.alpha.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let resid = init_condition_residual(&initial.alpha);
    if resid > 1e-9 * alpha_scale * (g.n() as f64).sqrt() {
        return Err(ConsensusError::param(format!(
            "initial multipliers violate the initialization condition (sum residual {resid:.3e})"
        )));
    }

    let n = g.n();
    let delta = cfg.delta;
    let mut state =
        ConsensusState::with_rounding_broadcast(initial.x.clone(), initial.alpha.clone(), delta);
    let mut encoder = StateEncoder::new(initial.alpha.clone(), cfg.rho, delta);
    let mut history = StateHistory::new();
    let mut trace = Trace::default();

    let key = encoder.encode(&state.xq, &mut state.alpha)?;
    history.visit(key);
    trace.push(cfg.trace, &state.xq, x_avg);

    let bound = error_bound(cfg.rho, g.e(), n, delta);
    for k in 1..=cfg.max_iter {
        state = dq_cadmm_step(&state, g, cfg);
        trace.push(cfg.trace, &state.xq, x_avg);
        let key = encoder.encode(&state.xq, &mut state.alpha)?;
        let Some(j) = history.visit(key) else {
            continue;
        };
        let period = k - j;
        let lattice = |key: &[i64]| key[..n].to_vec();
        let start = lattice(&history.keys[j]);
        let (outcome, period_means) = if period == 1 {
            if start.iter().any(|&t| t != start[0]) {
                return Err(ConsensusError::numerical(format!(
                    "state fixed at iteration {j} without consensus"
                )));
            }
            (
                Outcome::Converged {
                    x_star_q: start[0] as f64 * delta,
                    k0: j,
                },
                None,
            )
        } else {
            let mut sums = vec![0i64; n];
            for key in &history.keys[j..k] {
                for (s, &t) in sums.iter_mut().zip(&key[..n]) {
                    *s += t;
                }
            }
            let means: Vec<f64> = sums
                .iter()
                .map(|&s| s as f64 * delta / period as f64)
                .collect();
            (
                Outcome::Cyclic {
                    period,
                    k0: j,
                    cycle_mean: means[0],
                },
                Some(means),
            )
        };
        let value = outcome.consensus_value().expect("terminal outcome");
        return Ok(RunResult {
            consensus_error: (value - x_avg).abs(),
            outcome,
            bound,
            iterations: k,
            period_means,
            fallback: !encoder.exact,
            stage1: None,
            trace: (cfg.trace != TraceMode::None).then_some(trace),
        });
    }
    Ok(RunResult {
        outcome: Outcome::IterationCapped {
            iterations: cfg.max_iter,
        },
        consensus_error: iterative_error(&state.xq, x_avg),
        bound,
        iterations: cfg.max_iter,
        period_means: None,
        fallback: !encoder.exact,
        stage1: None,
        trace: (cfg.trace != TraceMode::None).then_some(trace),
    })
}

/// Two-stage algorithm: `2K` probabilistic iterations from zero, then the
/// deterministic iteration started from the averages of iterates `K+1..=2K`.
///
/// The quantizer stream is `Stream::new(cfg.seed)`. Outcome indices (`k0`)
/// are relative to the start of stage 2; `iterations` includes both stages.
pub fn run_pqdq(g: &Graph, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate(g)?;
    let n = g.n();
    let k = cfg
        .k_stage1
        .unwrap_or_else(|| stage1_length(n, cfg.delta, cfg.rho));
    let x_avg = cfg.x_avg();
    let mut stream = Stream::new(cfg.seed);
    let mut state =
        ConsensusState::with_probabilistic_broadcast(vec![0.0; n], vec![0.0; n], cfg.delta, &mut stream);
    let mut trace = Trace::default();
    trace.push(cfg.trace, &state.xq, x_avg);

    let mut x_sum = vec![0.0; n];
    let mut a_sum = vec![0.0; n];
    for step in 1..=2 * k {
        state = pq_cadmm_step(&state, g, cfg, &mut stream);
        if step > k {
            for i in 0..n {
                x_sum[i] += state.x[i];
                a_sum[i] += state.alpha[i];
            }
        }
        // The last stage-1 iterate is replaced by the averages below.
        if step < 2 * k {
            trace.push(cfg.trace, &state.xq, x_avg);
        }
    }
    let x_bar: Vec<f64> = x_sum.iter().map(|v| v / k as f64).collect();
    let alpha_bar: Vec<f64> = a_sum.iter().map(|v| v / k as f64).collect();

    let start = ConsensusState::new(x_bar.clone(), alpha_bar.clone());
    let mut result = run_dq(&start, g, cfg)?;
    if let Some(t2) = result.trace.take() {
        trace.append(t2);
        result.trace = Some(trace);
    }
    result.iterations += 2 * k;
    result.stage1 = Some(Stage1Summary {
        k,
        x_bar,
        alpha_bar,
    });
    Ok(result)
}

/// Runs the unquantized iteration until both `x` and `alpha` stop moving
/// (max change below `tol` times the data scale) or `cfg.max_iter` steps.
pub fn run_cadmm(initial: &ConsensusState, g: &Graph, cfg: &RunConfig, tol: f64) -> Result<(RunResult, ConsensusState)> {
    cfg.validate(g)?;
    let x_avg = cfg.x_avg();
    let scale = 1.0 + cfg.r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut state = initial.clone();
    state.xq = state.x.clone();
    let mut trace = Trace::default();
    trace.push(cfg.trace, &state.x, x_avg);
    for k in 1..=cfg.max_iter {
        let next = cadmm_step(&state, g, cfg);
        trace.push(cfg.trace, &next.x, x_avg);
        let change = next
            .x
            .iter()
            .zip(&state.x)
            .chain(next.alpha.iter().zip(&state.alpha))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        state = next;
        if change < tol * scale {
            let value = state.x.iter().sum::<f64>() / state.n() as f64;
            let result = RunResult {
                outcome: Outcome::Converged {
                    x_star_q: value,
                    k0: k,
                },
                consensus_error: iterative_error(&state.x, x_avg),
                bound: f64::INFINITY,
                iterations: k,
                period_means: None,
                fallback: false,
                stage1: None,
                trace: (cfg.trace != TraceMode::None).then_some(trace),
            };
            return Ok((result, state));
        }
    }
    let result = RunResult {
        outcome: Outcome::IterationCapped {
            iterations: cfg.max_iter,
        },
        consensus_error: iterative_error(&state.x, x_avg),
        bound: f64::INFINITY,
        iterations: cfg.max_iter,
        period_means: None,
        fallback: false,
        stage1: None,
        trace: (cfg.trace != TraceMode::None).then_some(trace),
    };
    Ok((result, state))
}

/// Runs the probabilistic iteration for exactly `cfg.max_iter` steps from
/// `initial`. The reported error is that of the running average of the
/// iterates, which converges almost surely.
pub fn run_pq(initial: &ConsensusState, g: &Graph, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate(g)?;
    let n = g.n();
    let x_avg = cfg.x_avg();
    let mut stream = Stream::new(cfg.seed);
    let mut state = ConsensusState::with_probabilistic_broadcast(
        initial.x.clone(),
        initial.alpha.clone(),
        cfg.delta,
        &mut stream,
    );
    let mut trace = Trace::default();
    trace.push(cfg.trace, &state.xq, x_avg);
    let mut sum = vec![0.0; n];
    for _ in 0..cfg.max_iter {
        state = pq_cadmm_step(&state, g, cfg, &mut stream);
        trace.push(cfg.trace, &state.xq, x_avg);
        for (s, v) in sum.iter_mut().zip(&state.x) {
            *s += v;
        }
    }
    let running: Vec<f64> = sum.iter().map(|s| s / cfg.max_iter as f64).collect();
    Ok(RunResult {
        outcome: Outcome::IterationCapped {
            iterations: cfg.max_iter,
        },
        consensus_error: iterative_error(&running, x_avg),
        bound: f64::INFINITY,
        iterations: cfg.max_iter,
        period_means: None,
        fallback: false,
        stage1: None,
        trace: (cfg.trace != TraceMode::None).then_some(trace),
    })
}

/// Prefix means `x_bar^k = (1/k) sum_{l=1..k} x^l` of an iterate series.
///
/// `trace[l-1]` is iterate `x^l`; the result has the same length.
pub fn running_average(trace: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let first = trace
        .first()
        .ok_or_else(|| ConsensusError::param("running average of an empty trace"))?;
    let n = first.len();
    let mut sum = vec![0.0; n];
    let mut out = Vec::with_capacity(trace.len());
    for (k, x) in trace.iter().enumerate() {
        if x.len() != n {
            return Err(ConsensusError::param("ragged trace"));
        }
        for (s, v) in sum.iter_mut().zip(x) {
            *s += v;
        }
        out.push(sum.iter().map(|s| s / (k + 1) as f64).collect());
    }
    Ok(out)
}

/// Arc-space shadow `(z, beta)` of the centralized ADMM iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub z: Vec<f64>,
    pub beta: Vec<f64>,
}

impl EdgeState {
    /// `z = M+' x / 2`, `beta = 0`.
    pub fn initial(x0: &[f64], inc: &IncidenceSet) -> Self {
        EdgeState {
            z: half_mt_x(&inc.m_plus, x0),
            beta: vec![0.0; inc.arcs()],
        }
    }

    /// Stacked `u = [z; beta]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut u = self.z.clone();
        u.extend_from_slice(&self.beta);
        u
    }
}

/// `M' x / 2` for an `N x 2E` incidence matrix.
fn half_mt_x(m: &Matrix, x: &[f64]) -> Vec<f64> {
    let (n, arcs) = (m.rows(), m.cols());
    let mut out = vec![0.0; arcs];
    for i in 0..n {
        let xi = x[i];
        for (o, &mv) in out.iter_mut().zip(m.row(i)) {
            *o += 0.5 * mv * xi;
        }
    }
    out
}

/// Advances the shadow with the fresh primal iterate:
/// `beta' = beta + (rho/2) M-' x'`, `z' = M+' x' / 2`.
pub fn edge_shadow_step(edge: &EdgeState, x_new: &[f64], inc: &IncidenceSet, rho: f64) -> EdgeState {
    let dm = half_mt_x(&inc.m_minus, x_new);
    EdgeState {
        z: half_mt_x(&inc.m_plus, x_new),
        beta: edge
            .beta
            .iter()
            .zip(&dm)
            .map(|(b, d)| b + rho * d)
            .collect(),
    }
}

/// `M- beta`, the node multipliers implied by an arc dual.
pub fn alpha_from_beta(inc: &IncidenceSet, beta: &[f64]) -> Vec<f64> {
    inc.m_minus.matvec(beta)
}

/// Unquantized run with its arc-space shadow recorded at every iteration.
#[derive(Debug, Clone)]
pub struct ShadowRun {
    pub states: Vec<ConsensusState>,
    pub edges: Vec<EdgeState>,
}

/// Runs `steps` unquantized iterations from `x0` (with `alpha = 0`, `beta = 0`) alongside the shadow.
pub fn run_with_shadow(
    g: &Graph,
    inc: &IncidenceSet,
    cfg: &RunConfig,
    x0: &[f64],
    steps: usize,
) -> ShadowRun {
    let mut state = ConsensusState::new(x0.to_vec(), vec![0.0; g.n()]);
    let mut edge = EdgeState::initial(x0, inc);
    let mut states = vec![state.clone()];
    let mut edges = vec![edge.clone()];
    for _ in 0..steps {
        state = cadmm_step(&state, g, cfg);
        edge = edge_shadow_step(&edge, &state.x, inc, cfg.rho);
        states.push(state.clone());
        edges.push(edge.clone());
    }
    ShadowRun { states, edges }
}

/// Optimal arc dual `beta*`, obtained by running the shadow until the dual
/// changes by less than `tol` (max-norm, relative to the data scale).
pub fn converged_beta(
    g: &Graph,
    inc: &IncidenceSet,
    cfg: &RunConfig,
    tol: f64,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let scale = 1.0 + cfg.r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut state = ConsensusState::zeros(g.n());
    let mut edge = EdgeState::initial(&state.x, inc);
    for _ in 0..max_steps {
        state = cadmm_step(&state, g, cfg);
        let next = edge_shadow_step(&edge, &state.x, inc, cfg.rho);
        let change = next
            .beta
            .iter()
            .zip(&edge.beta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        edge = next;
        if change < tol * scale {
            return Ok(edge.beta);
        }
    }
    Err(ConsensusError::numerical(format!(
        "arc dual did not settle to {tol:.1e} within {max_steps} iterations"
    )))
}

/// Optimal stacked arc iterate `u* = [M+' 1 x_avg / 2; beta*]`.
pub fn optimal_u(inc: &IncidenceSet, x_avg: f64, beta_star: &[f64]) -> Vec<f64> {
    let ones = vec![x_avg; inc.n()];
    let mut u = half_mt_x(&inc.m_plus, &ones);
    u.extend_from_slice(beta_star);
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepCheck {
    pub k: usize,
    /// `||u^{k+1} - u*||_G^2`.
    pub next_sq: f64,
    /// `||u^k - u*||_G^2 / (1 + delta)`.
    pub bound_sq: f64,
    pub contraction_ok: bool,
    /// `||s^{k+1} - s*||_2`.
    pub state_err: f64,
    /// `(1 + sqrt(rho/(1+delta)) sigma_max(M-)) ||u^k - u*||_G`.
    pub envelope: f64,
    pub envelope_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub steps: Vec<StepCheck>,
    /// Steps skipped because the error had reached the floating-point floor.
    pub skipped: usize,
}

impl ContractionReport {
    pub fn all_ok(&self) -> bool {
        self.steps.iter().all(|s| s.contraction_ok && s.envelope_ok)
    }

    pub fn first_violation(&self) -> Option<&StepCheck> {
        self.steps.iter().find(|s| !(s.contraction_ok && s.envelope_ok))
    }

    /// Largest observed ratio `||u^{k+1}-u*||^2 / ||u^k-u*||^2`.
    pub fn worst_ratio(&self, contraction: f64) -> f64 {
        self.steps
            .iter()
            .map(|s| s.next_sq / (s.bound_sq / contraction))
            .fold(0.0, f64::max)
    }
}

/// Relative slack on both inequalities.
pub const CONTRACTION_SLACK: f64 = 1e-9;
/// Steps whose squared G-norm error is below this fraction of the initial
/// one are at the rounding floor and are not checked.
pub const CONTRACTION_FLOOR: f64 = 1e-16;

/// Checks the per-step G-norm contraction and the stacked-state envelope
/// along an unquantized run.
pub fn contraction_check(
    run: &ShadowRun,
    r: &[f64],
    u_star: &[f64],
    bounds: &SpectralBounds,
    gm: &GMetric,
) -> Result<ContractionReport> {
    let x_avg = metrics::data_average(r)?;
    let alpha_star: Vec<f64> = r.iter().map(|v| v - x_avg).collect();
    let dist = |e: &EdgeState| -> Result<f64> {
        let u = e.stacked();
        let d: Vec<f64> = u.iter().zip(u_star).map(|(a, b)| a - b).collect();
        metrics::g_norm_sq(&d, gm)
    };
    let start = dist(&run.edges[0])?;
    let floor = CONTRACTION_FLOOR * start;
    let c = bounds.contraction();
    let env = bounds.envelope_factor();

    let mut steps = Vec::new();
    let mut skipped = 0;
    for k in 0..run.edges.len().saturating_sub(1) {
        let cur = dist(&run.edges[k])?;
        if cur <= floor {
            skipped += 1;
            continue;
        }
        let next = dist(&run.edges[k + 1])?;
        let bound_sq = c * cur;
        let s = &run.states[k + 1];
        let mut diff: Vec<f64> = s.x.iter().map(|v| v - x_avg).collect();
        diff.extend(s.alpha.iter().zip(&alpha_star).map(|(a, b)| a - b));
        let state_err = norm2(&diff);
        let envelope = env * cur.sqrt();
        steps.push(StepCheck {
            k,
            next_sq: next,
            bound_sq,
            contraction_ok: next <= bound_sq + CONTRACTION_SLACK * cur,
            state_err,
            envelope,
            envelope_ok: state_err <= envelope * (1.0 + CONTRACTION_SLACK),
        });
    }
    Ok(ContractionReport { steps, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_random_connected, star};
    use crate::spectral::{build_incidence, build_iteration_matrix, spectral_bounds, stack_state};

    fn two_node() -> Graph {
        Graph::from_edges(2, &[(0, 1)]).unwrap()
    }

    fn fixture_cfg() -> RunConfig {
        RunConfig::new(vec![-1.5, -3.5], 1.0, 1.0)
    }

    #[test]
    fn fixed_point_of_cadmm() {
        let g = gen_random_connected(8, 14, 3).unwrap();
        let r: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).sin() * 10.0).collect();
        let cfg = RunConfig::new(r.clone(), 1.0, 1.0);
        let avg = cfg.x_avg();
        let s = ConsensusState::new(vec![avg; 8], r.iter().map(|v| v - avg).collect());
        let next = cadmm_step(&s, &g, &cfg);
        for i in 0..8 {
            assert!((next.x[i] - avg).abs() < 1e-12);
            assert!((next.alpha[i] - s.alpha[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_cadmm_converges() {
        let g = two_node();
        let cfg = fixture_cfg();
        let mut s = ConsensusState::zeros(2);
        for _ in 0..2000 {
            s = cadmm_step(&s, &g, &cfg);
        }
        assert!((s.x[0] + 2.5).abs() < 1e-8);
        assert!((s.x[1] + 2.5).abs() < 1e-8);
    }

    #[test]
    fn node_form_matches_matrix_form() {
        let g = gen_random_connected(7, 12, 1).unwrap();
        let r: Vec<f64> = (0..7).map(|i| i as f64 - 2.0).collect();
        let cfg = RunConfig::new(r.clone(), 0.8, 1.0);
        let dm = build_iteration_matrix(&build_incidence(&g), 0.8, 7).unwrap();
        let mut s = ConsensusState::zeros(7);
        let mut stacked = stack_state(&s.x, &s.alpha, &r);
        for _ in 0..30 {
            s = cadmm_step(&s, &g, &cfg);
            stacked = dm.apply(&stacked);
            for i in 0..7 {
                assert!((stacked[i] - s.x[i]).abs() < 1e-12);
                assert!((stacked[7 + i] - s.alpha[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tight_fixture_is_fixed() {
        let g = two_node();
        let cfg = fixture_cfg();
        let s0 = ConsensusState::with_rounding_broadcast(vec![-1.0, -1.0], vec![1.0, -1.0], 1.0);
        let s1 = dq_cadmm_step(&s0, &g, &cfg);
        assert_eq!(s1.xq, vec![-1.0, -1.0]);
        assert_eq!(s1.alpha, vec![1.0, -1.0]);
        let res = run_dq(&ConsensusState::new(vec![-1.0, -1.0], vec![1.0, -1.0]), &g, &cfg).unwrap();
        assert_eq!(res.outcome, Outcome::Converged { x_star_q: -1.0, k0: 0 });
        assert_eq!(res.consensus_error, 1.5);
        assert_eq!(res.consensus_error, error_bound(1.0, 1, 2, 1.0));
        assert!(res.within_bound());
    }

    #[test]
    fn dq_alpha_increments_are_lattice_multiples() {
        let g = gen_random_connected(9, 15, 4).unwrap();
        let r: Vec<f64> = (0..9).map(|i| (i as f64 * 2.3).cos() * 40.0).collect();
        let (rho, delta) = (0.7, 0.25);
        let cfg = RunConfig::new(r, rho, delta);
        let mut s = ConsensusState::with_rounding_broadcast(vec![0.0; 9], vec![0.0; 9], delta);
        for _ in 0..50 {
            let next = dq_cadmm_step(&s, &g, &cfg);
            for i in 0..9 {
                let m = (next.alpha[i] - s.alpha[i]) / (rho * delta);
                assert!((m - m.round()).abs() < 1e-9, "{m}");
            }
            s = next;
        }
    }

    #[test]
    fn vanishing_resolution_tracks_cadmm() {
        let g = gen_random_connected(6, 9, 2).unwrap();
        let r: Vec<f64> = (0..6).map(|i| i as f64 * 1.5 - 3.0).collect();
        let ideal_cfg = RunConfig::new(r.clone(), 1.0, 1.0);
        let fine = RunConfig::new(r, 1.0, 1e-12);
        let mut a = ConsensusState::zeros(6);
        let mut b = ConsensusState::zeros(6);
        for _ in 0..200 {
            a = cadmm_step(&a, &g, &ideal_cfg);
            b = dq_cadmm_step(&b, &g, &fine);
        }
        for i in 0..6 {
            assert!((a.x[i] - b.x[i]).abs() < 1e-8);
        }

        let pq_cfg = RunConfig::new(ideal_cfg.r.clone(), 1.0, 1e-9);
        let mut c = ConsensusState::zeros(6);
        let mut a = ConsensusState::zeros(6);
        let mut st = Stream::new(5);
        for _ in 0..100 {
            a = cadmm_step(&a, &g, &ideal_cfg);
            c = pq_cadmm_step(&c, &g, &pq_cfg, &mut st);
        }
        for i in 0..6 {
            assert!((a.x[i] - c.x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pq_alpha_sum_stays_zero() {
        let g = gen_random_connected(10, 20, 8).unwrap();
        let r: Vec<f64> = (0..10).map(|i| (i * i) as f64 - 20.0).collect();
        let cfg = RunConfig::new(r, 1.0, 1.0);
        let mut st = Stream::new(1);
        let mut s = ConsensusState::with_probabilistic_broadcast(vec![0.0; 10], vec![0.0; 10], 1.0, &mut st);
        for _ in 0..300 {
            s = pq_cadmm_step(&s, &g, &cfg, &mut st);
            assert!(s.alpha_sum().abs() < 1e-9);
        }
    }

    #[test]
    fn stage1_length_formula() {
        assert_eq!(stage1_length(50, 1.0, 1.0), 651);
        // rho < 1/10 stretches K by -log10(rho)
        assert_eq!(stage1_length(10, 1.0, 0.01), 261);
        assert_eq!(stage1_length(10, 0.1, 1.0), 205);
    }

    #[test]
    fn running_average_examples() {
        assert_eq!(
            running_average(&[vec![1.0], vec![3.0]]).unwrap(),
            vec![vec![1.0], vec![2.0]]
        );
        let c = running_average(&vec![vec![4.0, -2.0]; 5]).unwrap();
        assert!(c.iter().all(|v| v == &vec![4.0, -2.0]));
        assert!(running_average(&[]).is_err());
    }

    #[test]
    fn shadow_reproduces_multipliers() {
        let g = gen_random_connected(8, 13, 6).unwrap();
        let inc = build_incidence(&g);
        let r: Vec<f64> = (0..8).map(|i| (i as f64).sqrt() * 5.0).collect();
        let cfg = RunConfig::new(r, 1.3, 1.0);
        let x0: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let run = run_with_shadow(&g, &inc, &cfg, &x0, 100);
        assert!(run.edges[0].beta.iter().all(|&b| b == 0.0));
        for (s, e) in run.states.iter().zip(&run.edges) {
            let a = alpha_from_beta(&inc, &e.beta);
            for i in 0..8 {
                assert!((a[i] - s.alpha[i]).abs() < 1e-10);
            }
            let z = half_mt_x(&inc.m_plus, &s.x);
            for (p, q) in z.iter().zip(&e.z) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_node_contraction() {
        let g = two_node();
        let inc = build_incidence(&g);
        let cfg = fixture_cfg();
        let bounds = spectral_bounds(&inc, 1.0).unwrap();
        assert!((bounds.delta - 0.5).abs() < 1e-12);
        let beta_star = converged_beta(&g, &inc, &cfg, 1e-14, 100_000).unwrap();
        let u_star = optimal_u(&inc, cfg.x_avg(), &beta_star);
        let run = run_with_shadow(&g, &inc, &cfg, &[0.0, 0.0], 60);
        let gm = GMetric { rho: 1.0, dimension: 2 };
        let report = contraction_check(&run, &cfg.r, &u_star, &bounds, &gm).unwrap();
        assert!(!report.steps.is_empty());
        assert!(report.all_ok(), "{:?}", report.first_violation());
        assert!(report.worst_ratio(bounds.contraction()) <= 2.0 / 3.0 + 1e-9);
    }

    #[test]
    fn contraction_check_flags_an_overstated_rate() {
        let g = gen_random_connected(8, 14, 2).unwrap();
        let inc = build_incidence(&g);
        let cfg = RunConfig::new((0..8).map(|i| i as f64).collect(), 1.0, 1.0);
        let mut bounds = spectral_bounds(&inc, 1.0).unwrap();
        let beta_star = converged_beta(&g, &inc, &cfg, 1e-13, 100_000).unwrap();
        let u_star = optimal_u(&inc, cfg.x_avg(), &beta_star);
        let run = run_with_shadow(&g, &inc, &cfg, &[0.0; 8], 50);
        let gm = GMetric { rho: 1.0, dimension: inc.arcs() };
        assert!(contraction_check(&run, &cfg.r, &u_star, &bounds, &gm).unwrap().all_ok());
        bounds.delta = 100.0;
        let report = contraction_check(&run, &cfg.r, &u_star, &bounds, &gm).unwrap();
        assert!(report.first_violation().is_some());
    }

    #[test]
    fn contraction_at_optimum_is_trivial() {
        let g = two_node();
        let inc = build_incidence(&g);
        let cfg = fixture_cfg();
        let bounds = spectral_bounds(&inc, 1.0).unwrap();
        let beta_star = converged_beta(&g, &inc, &cfg, 1e-14, 100_000).unwrap();
        let u_star = optimal_u(&inc, -2.5, &beta_star);
        let e = EdgeState {
            z: u_star[..2].to_vec(),
            beta: beta_star.clone(),
        };
        let gm = GMetric { rho: 1.0, dimension: 2 };
        let d: Vec<f64> = e.stacked().iter().zip(&u_star).map(|(a, b)| a - b).collect();
        assert_eq!(metrics::g_norm_sq(&d, &gm).unwrap(), 0.0);
        let _ = bounds;
    }

    #[test]
    fn run_dq_rejects_bad_initial_alpha() {
        let g = two_node();
        let cfg = fixture_cfg();
        let s = ConsensusState::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(run_dq(&s, &g, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let g = two_node();
        assert!(RunConfig::new(vec![0.0, 1.0], 0.0, 1.0).validate(&g).is_err());
        assert!(RunConfig::new(vec![0.0, 1.0], 1.0, -1.0).validate(&g).is_err());
        assert!(RunConfig::new(vec![0.0], 1.0, 1.0).validate(&g).is_err());
        assert!(RunConfig::new(vec![0.0, 1.0], 1.0, 1.0)
            .with_max_iter(0)
            .validate(&g)
            .is_err());
        assert!(RunConfig::new(vec![0.0, 1.0], 1.0, 1.0).validate(&g).is_ok());
    }

    #[test]
    fn dq_on_star_terminates_within_bound() {
        let g = star(6).unwrap();
        let r = vec![12.3, -4.0, 7.7, 0.1, -9.9, 3.3];
        let cfg = RunConfig::new(r, 1.0, 1.0);
        let res = run_dq(&ConsensusState::zeros(6), &g, &cfg).unwrap();
        assert!(res.outcome.is_terminal());
        assert!(res.within_bound(), "{} > {}", res.consensus_error, res.bound);
    }

    #[test]
    fn pqdq_alpha_bar_meets_initialization_condition() {
        let g = gen_random_connected(12, 30, 2).unwrap();
        let mut st = Stream::new(9);
        let r = crate::rng::experiment_data(12, &mut st);
        let cfg = RunConfig::new(r, 1.0, 1.0).with_seed(4);
        let res = run_pqdq(&g, &cfg).unwrap();
        let s1 = res.stage1.as_ref().unwrap();
        assert_eq!(s1.k, stage1_length(12, 1.0, 1.0));
        assert!(init_condition_residual(&s1.alpha_bar) < 1e-9);
        assert!(res.outcome.is_terminal());
        assert!(res.within_bound());
    }

    #[test]
    fn traces_cover_every_iteration() {
        let g = gen_random_connected(5, 7, 2).unwrap();
        let cfg = RunConfig::new(vec![3.0, -1.0, 4.0, 1.0, -5.0], 1.0, 1.0)
            .with_trace(TraceMode::Full)
            .with_k_stage1(20);
        let res = run_pqdq(&g, &cfg).unwrap();
        let t = res.trace.as_ref().unwrap();
        // states 0..2K-1 from stage 1, then stage-2 states 0..=iterations-2K
        assert_eq!(t.len(), res.iterations + 1);
        assert_eq!(t.values.len(), t.len());
    }

    #[test]
    fn resolution_too_fine_for_the_data_is_numerical() {
        let g = star(4).unwrap();
        let cfg = RunConfig::new(vec![1.0, -3.0, 7.0, 2.0], 1.0, 1e-300);
        let err = run_dq(&ConsensusState::zeros(4), &g, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(lattice_index(2f64.powi(60)).is_err());
        assert!(lattice_index(f64::NAN).is_err());
        assert_eq!(lattice_index(-3.4).unwrap(), -3);
    }
}
