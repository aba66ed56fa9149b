//! Browser bindings for the consensus simulator.
//!
//! Every export takes plain numbers and returns a JSON string. The inner
//! functions are ordinary Rust so they can be tested natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use quantized_consensus::consensus::{RunConfig, TraceMode};
use quantized_consensus::error::Result;
use quantized_consensus::graph::gen_random_connected;
use quantized_consensus::harness::{
    count_cycles, run_algorithm, Algorithm, ExperimentKind, ExperimentSpec, GraphFamily,
    GridPoint, Scale,
};
use quantized_consensus::linalg::symmetric_eigen;
use quantized_consensus::rng::{derive_seed, experiment_data, purpose, Stream};
use quantized_consensus::spectral::{build_incidence, spectral_bounds};

/// Node trajectories are kept for at most this many iterations.
pub const MAX_PLOTTED: usize = 2000;

/// Runs one algorithm and returns its summary, error trace and node values.
pub fn trace_json(algo: &str, n: usize, e: usize, delta: f64, rho: f64, seed: u64, max_iter: usize) -> Result<String> {
    let alg: Algorithm = algo.parse()?;
    let g = gen_random_connected(n, e, derive_seed(seed, &[purpose::GRAPH]))?;
    let r = experiment_data(n, &mut Stream::derived(seed, &[purpose::DATA]));
    let stream = if alg == Algorithm::Gossip {
        purpose::GOSSIP
    } else {
        purpose::QUANTIZER
    };
    let cfg = RunConfig::new(r, rho, delta)
        .with_max_iter(max_iter)
        .with_seed(derive_seed(seed, &[stream]))
        .with_trace(TraceMode::Full);
    let (res, per_edge) = run_algorithm(alg, &g, &cfg, 1e-12)?;
    let trace = res.trace.clone().unwrap_or_default();
    let values: Vec<Vec<f64>> = trace.values.into_iter().take(MAX_PLOTTED).collect();
    Ok(json!({
        "summary": res.summary_json(),
        "x_avg": cfg.x_avg(),
        "time_per_edge": per_edge,
        "errors": trace.iterative_error,
        "values": values,
    })
    .to_string())
}

/// Singular-value bounds and Laplacian spectra of a random graph.
pub fn spectra_json(n: usize, e: usize, rho: f64, seed: u64) -> Result<String> {
    let g = gen_random_connected(n, e, derive_seed(seed, &[purpose::GRAPH]))?;
    let inc = build_incidence(&g);
    let b = spectral_bounds(&inc, rho)?;
    Ok(json!({
        "n": n,
        "e": e,
        "sigma_max_m_plus": b.sigma_max_mplus,
        "sigma_min_m_minus": b.sigma_min_mminus,
        "sigma_max_m_minus": b.sigma_max_mminus,
        "delta": b.delta,
        "contraction": b.contraction(),
        "l_minus_spectrum": symmetric_eigen(&inc.l_minus)?.values,
        "l_plus_spectrum": symmetric_eigen(&inc.l_plus)?.values,
    })
    .to_string())
}

/// Convergent, cyclic and capped counts for star, random and complete graphs.
pub fn cycles_json(n: usize, trials: usize, seed: u64) -> Result<String> {
    let mut spec = ExperimentSpec::preset(ExperimentKind::CycleCount, Scale::Desk, seed);
    spec.grid = [GraphFamily::Star, GraphFamily::Random, GraphFamily::Complete]
        .into_iter()
        .map(|family| GridPoint {
            n,
            e: None,
            delta: 1.0,
            rho: 1.0,
            family,
        })
        .collect();
    spec.trials = trials;
    spec.validate()?;
    let rows: Vec<Value> = count_cycles(&spec)?
        .into_iter()
        .map(|r| {
            json!({
                "family": r.family,
                "algorithm": r.algorithm,
                "converged": r.converged,
                "cyclic": r.cyclic,
                "capped": r.capped,
                "mean_error": r.mean_error,
            })
        })
        .collect();
    Ok(Value::Array(rows).to_string())
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn trace(algo: &str, n: usize, e: usize, delta: f64, rho: f64, seed: u32, max_iter: usize) -> std::result::Result<String, JsError> {
    js(trace_json(algo, n, e, delta, rho, seed as u64, max_iter))
}

#[wasm_bindgen]
pub fn spectra(n: usize, e: usize, rho: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(spectra_json(n, e, rho, seed as u64))
}

#[wasm_bindgen]
pub fn cycles(n: usize, trials: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(cycles_json(n, trials, seed as u64))
}
