//! Quantized gossip and classical linear averaging, for comparison.
//!
//! Both start from `x0 = r` and stop once every node's quantized value is
//! the same and stays the same for `N` consecutive iterations.

use serde::{Deserialize, Serialize};

use crate::consensus::{Outcome, RunConfig, RunResult, Trace, TraceMode};
use crate::error::Result;
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::metrics::iterative_error;
use crate::quantize::{round_index, snapped_floor};
use crate::rng::Stream;

/// Default iteration cap for gossip, which touches a single edge per iteration.
pub const GOSSIP_MAX_ITER: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Gossip,
    Classical,
}

/// Metropolis weights stored along the adjacency lists of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MetropolisWeights {
    pub diag: Vec<f64>,
    /// `off[i][p]` is the weight on the `p`-th neighbour of `i`.
    pub off: Vec<Vec<f64>>,
    neighbors: Vec<Vec<usize>>,
}

impl MetropolisWeights {
    pub fn new(g: &Graph) -> Self {
        let n = g.n();
        let mut diag = Vec::with_capacity(n);
        let mut off = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = g
                .neighbors(i)
                .iter()
                .map(|&j| 1.0 / (1 + g.degree(i).max(g.degree(j))) as f64)
                .collect();
            diag.push(1.0 - row.iter().sum::<f64>());
            off.push(row);
        }
        MetropolisWeights {
            diag,
            off,
            neighbors: (0..n).map(|i| g.neighbors(i).to_vec()).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// Dense `N x N` weight matrix.
    pub fn matrix(&self) -> Matrix {
        let n = self.n();
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            w[(i, i)] = self.diag[i];
            for (&j, &v) in self.neighbors[i].iter().zip(&self.off[i]) {
                w[(i, j)] = v;
            }
        }
        w
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.diag[i] * v[i]
                    + self.neighbors[i]
                        .iter()
                        .zip(&self.off[i])
                        .map(|(&j, w)| w * v[j])
                        .sum::<f64>()
            })
            .collect()
    }
}

#[inline]
fn qd(v: f64, delta: f64) -> f64 {
    round_index(v, delta) * delta
}

#[inline]
fn qrd(v: f64, delta: f64) -> f64 {
    snapped_floor(v / delta) * delta
}

/// Averages the rounded values across one uniformly chosen edge, in place.
/// Returns the chosen edge.
pub fn gossip_step_in_place(x: &mut [f64], g: &Graph, delta: f64, stream: &mut Stream) -> (usize, usize) {
    let (i, j) = g.edges()[stream.index(g.e())];
    let v = 0.5 * (qd(x[i], delta) + qd(x[j], delta));
    x[i] = v;
    x[j] = v;
    (i, j)
}

/// One gossip iteration.
pub fn gossip_step(x: &[f64], g: &Graph, delta: f64, stream: &mut Stream) -> Vec<f64> {
    let mut out = x.to_vec();
    gossip_step_in_place(&mut out, g, delta, stream);
    out
}

/// One classical iteration `x <- W Q_rd(x)`.
pub fn classical_step(x: &[f64], w: &MetropolisWeights, delta: f64) -> Vec<f64> {
    let q: Vec<f64> = x.iter().map(|&v| qrd(v, delta)).collect();
    w.apply(&q)
}

/// Result of a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub result: RunResult,
    /// Gossip convergence time divided by the edge count.
    pub per_edge_time: Option<f64>,
}

/// Iterates a baseline from `x0 = cfg.r` for at most `cfg.max_iter` steps.
///
/// Gossip draws its edges from `Stream::new(cfg.seed)`. On convergence
/// `k0` is the first iteration of the stable window.
pub fn run_baseline(kind: BaselineKind, g: &Graph, cfg: &RunConfig) -> Result<BaselineRun> {
    cfg.validate(g)?;
    let n = g.n();
    let delta = cfg.delta;
    let x_avg = cfg.x_avg();
    let quantize: fn(f64, f64) -> f64 = match kind {
        BaselineKind::Gossip => qd,
        BaselineKind::Classical => qrd,
    };
    let weights = (kind == BaselineKind::Classical).then(|| MetropolisWeights::new(g));
    let mut stream = Stream::new(cfg.seed);
    let mut x = cfg.r.clone();
    let mut xq: Vec<f64> = x.iter().map(|&v| quantize(v, delta)).collect();
    let mut trace = Trace::default();
    trace.push(cfg.trace, &xq, x_avg);

    let consensus = |xq: &[f64]| xq.iter().all(|&v| v == xq[0]);
    let mut window_start = consensus(&xq).then_some(0usize);
    let mut finished = None;
    if window_start.is_some() && n == 1 {
        finished = Some(0);
    }
    let mut k = 0;
    while finished.is_none() && k < cfg.max_iter {
        k += 1;
        match &weights {
            Some(w) => x = classical_step(&x, w, delta),
            None => {
                gossip_step_in_place(&mut x, g, delta, &mut stream);
            }
        }
        for (q, &v) in xq.iter_mut().zip(&x) {
            *q = quantize(v, delta);
        }
        trace.push(cfg.trace, &xq, x_avg);
        if consensus(&xq) {
            let start = *window_start.get_or_insert(k);
            if k - start >= n {
                finished = Some(start);
            }
        } else {
            window_start = None;
        }
    }

    let trace = (cfg.trace != TraceMode::None).then_some(trace);
    let result = match finished {
        Some(k0) => RunResult {
            outcome: Outcome::Converged { x_star_q: xq[0], k0 },
            consensus_error: (xq[0] - x_avg).abs(),
            bound: f64::INFINITY,
            iterations: k,
            period_means: None,
            fallback: false,
            stage1: None,
            trace,
        },
        None => RunResult {
            outcome: Outcome::IterationCapped { iterations: k },
            consensus_error: iterative_error(&xq, x_avg),
            bound: f64::INFINITY,
            iterations: k,
            period_means: None,
            fallback: false,
            stage1: None,
            trace,
        },
    };
    let per_edge_time = (kind == BaselineKind::Gossip)
        .then(|| result.outcome.k0() as f64 / g.e() as f64);
    Ok(BaselineRun {
        kind,
        result,
        per_edge_time,
    })
}
