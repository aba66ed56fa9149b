//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use quantized_consensus::consensus::{
    contraction_check, converged_beta, dq_cadmm_step, optimal_u, pq_cadmm_step, run_dq, run_pqdq,
    run_with_shadow, stage1_length, ConsensusState, Outcome, RunConfig,
};
use quantized_consensus::graph::{gen_random_connected, max_edges, Graph};
use quantized_consensus::harness::{
    count_cycles, trial_setup, Algorithm, ExperimentKind, ExperimentSpec, GraphFamily, GridPoint,
    Scale,
};
use quantized_consensus::metrics::{error_bound, mean_var, GMetric};
use quantized_consensus::quantize::{q_prob, q_round};
use quantized_consensus::rng::{derive_seed, experiment_data, Stream};
use quantized_consensus::spectral::{
    build_incidence, build_iteration_matrix, iteration_matrix_limit, limit_structure,
    spectral_bounds,
};

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {id}: {verdict} {name} ({:.2}s of {:.0}s) {detail}\n",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

#[test]
fn criterion_1_tight_bound_fixture() {
    let t = Instant::now();
    let budget = Duration::from_secs(1);
    let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
    let cfg = RunConfig::new(vec![-1.5, -3.5], 1.0, 1.0);
    let init = ConsensusState::new(vec![-1.0, -1.0], vec![1.0, -1.0]);
    let res = run_dq(&init, &g, &cfg).unwrap();
    let converged = matches!(res.outcome, Outcome::Converged { x_star_q, .. } if x_star_q == -1.0);
    let exact = res.consensus_error == 1.5 && res.consensus_error == error_bound(1.0, 1, 2, 1.0);

    let mut s = ConsensusState::with_rounding_broadcast(vec![-1.0, -1.0], vec![1.0, -1.0], 1.0);
    let first = dq_cadmm_step(&s, &g, &cfg);
    let mut stable = true;
    for _ in 0..10_000 {
        s = dq_cadmm_step(&s, &g, &cfg);
        stable &= s.xq == first.xq && s.alpha == first.alpha && s.x == first.x;
    }
    let elapsed = t.elapsed();
    let pass = converged && exact && stable && elapsed < budget;
    report(
        1,
        "tight-bound fixture",
        pass,
        elapsed,
        budget,
        &format!("outcome={:?} error={} stable={stable}", res.outcome, res.consensus_error),
    );
    assert!(pass);
}

#[test]
fn criterion_2_dq_error_bound() {
    let t = Instant::now();
    let budget = Duration::from_secs(60);
    let p = GridPoint::random(50, 500, 1.0);
    let mut errs = Vec::new();
    let mut terminal = 0;
    let mut within = 0;
    for seed in 0..100 {
        let setup = trial_setup(2024, 0, seed, &p).unwrap();
        let cfg = RunConfig::new(setup.r.clone(), 1.0, 1.0);
        let res = run_dq(&ConsensusState::zeros(50), &setup.graph, &cfg).unwrap();
        terminal += res.outcome.is_terminal() as usize;
        within += (res.consensus_error <= 20.5) as usize;
        errs.push(res.consensus_error);
    }
    let (mean, _) = mean_var(&errs);
    let elapsed = t.elapsed();
    let pass = terminal == 100 && within == 100 && mean <= 5.0 && elapsed < budget;
    report(
        2,
        "DQ error bound N=50 E=500",
        pass,
        elapsed,
        budget,
        &format!("terminal={terminal}/100 within={within}/100 mean_error={mean:.3} (band <= 5)"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_contraction_and_envelope() {
    let t = Instant::now();
    let budget = Duration::from_secs(30);
    let mut s = Stream::new(303);
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for trial in 0..20u64 {
        let n = 3 + s.index(28);
        let e = n - 1 + s.index(max_edges(n) + 2 - n);
        let g = gen_random_connected(n, e, s.next_u64()).unwrap();
        let inc = build_incidence(&g);
        let rho = [0.5, 1.0, 2.0][trial as usize % 3];
        let r: Vec<f64> = (0..n).map(|_| 10.0 * s.standard_normal()).collect();
        let cfg = RunConfig::new(r.clone(), rho, 1.0);
        let bounds = spectral_bounds(&inc, rho).unwrap();
        let beta_star = converged_beta(&g, &inc, &cfg, 1e-12, 1_000_000).unwrap();
        let u_star = optimal_u(&inc, cfg.x_avg(), &beta_star);
        let x0: Vec<f64> = (0..n).map(|_| 10.0 * s.standard_normal()).collect();
        let run = run_with_shadow(&g, &inc, &cfg, &x0, 400);
        let gm = GMetric { rho, dimension: inc.arcs() };
        let rep = contraction_check(&run, &r, &u_star, &bounds, &gm).unwrap();
        checked += rep.steps.len();
        skipped += rep.skipped;
        worst = worst.max(rep.worst_ratio(bounds.contraction()) / bounds.contraction());
        if let Some(v) = rep.first_violation() {
            failures.push(format!("trial {trial} N={n} E={e} step {}: {v:?}", v.k));
        }
    }
    let elapsed = t.elapsed();
    let pass = failures.is_empty() && checked > 0 && elapsed < budget;
    report(
        3,
        "G-norm contraction and R-linear envelope",
        pass,
        elapsed,
        budget,
        &format!(
            "steps_checked={checked} floor_skipped={skipped} worst_ratio/bound={worst:.4} {}",
            failures.first().map(String::as_str).unwrap_or("")
        ),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_4_iteration_matrix_limit() {
    let t = Instant::now();
    let budget = Duration::from_secs(30);
    let mut s = Stream::new(404);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..10 {
        let n = 2 + s.index(19);
        let e = n - 1 + s.index(max_edges(n) + 2 - n);
        let g = gen_random_connected(n, e, s.next_u64()).unwrap();
        let inc = build_incidence(&g);
        for rho in [0.5, 1.0, 2.0] {
            let dm = build_iteration_matrix(&inc, rho, n).unwrap();
            let dstar = iteration_matrix_limit(&dm, 1e-13, 64).unwrap();
            worst = worst.max(limit_structure(&dstar, n).max_deviation());
            cases += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = worst <= 1e-6 && elapsed < budget;
    report(
        4,
        "iteration-matrix limit structure",
        pass,
        elapsed,
        budget,
        &format!("cases={cases} max_block_deviation={worst:.2e} (tol 1e-6)"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_pq_mean_convergence() {
    let t = Instant::now();
    let budget = Duration::from_secs(60);
    let n = 10;
    let g = gen_random_connected(n, 20, 505).unwrap();
    let r = experiment_data(n, &mut Stream::new(506));
    let cfg = RunConfig::new(r, 1.0, 1.0);
    let x_avg = cfg.x_avg();
    let seeds = 500;
    let mut x200: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(seeds)).collect();
    let mut avg20: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(seeds)).collect();
    let mut avg200: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(seeds)).collect();
    for seed in 0..seeds {
        let mut st = Stream::new(derive_seed(507, &[seed as u64]));
        let mut s = ConsensusState::with_probabilistic_broadcast(vec![0.0; n], vec![0.0; n], 1.0, &mut st);
        let mut sum = vec![0.0; n];
        for k in 1..=200 {
            s = pq_cadmm_step(&s, &g, &cfg, &mut st);
            for i in 0..n {
                sum[i] += s.x[i];
            }
            if k == 20 {
                for i in 0..n {
                    avg20[i].push(sum[i] / 20.0);
                }
            }
        }
        for i in 0..n {
            x200[i].push(s.x[i]);
            avg200[i].push(sum[i] / 200.0);
        }
    }
    let mut unbiased = true;
    let mut worst_z: f64 = 0.0;
    for xs in &x200 {
        let (m, v) = mean_var(xs);
        let se = v.sqrt() / (seeds as f64).sqrt();
        worst_z = worst_z.max((m - x_avg).abs() / se);
        unbiased &= (m - x_avg).abs() <= 4.0 * se;
    }
    let var_at = |a: &Vec<Vec<f64>>| a.iter().map(|xs| mean_var(xs).1).sum::<f64>() / n as f64;
    let (v20, v200) = (var_at(&avg20), var_at(&avg200));
    let elapsed = t.elapsed();
    let pass = unbiased && v200 < v20 && elapsed < budget;
    report(
        5,
        "PQ mean convergence",
        pass,
        elapsed,
        budget,
        &format!("max|mean-x_avg|/se={worst_z:.2} (<= 4) running-avg var k=20:{v20:.4} k=200:{v200:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_pqdq_quality() {
    let t = Instant::now();
    let budget = Duration::from_secs(600);
    let mut details = Vec::new();
    let mut pass = true;
    for (pi, e) in [49usize, 200, 500, 1225].into_iter().enumerate() {
        let p = GridPoint::random(50, e, 1.0);
        let k = stage1_length(50, 1.0, 1.0);
        let mut errs = Vec::new();
        let mut stage2 = Vec::new();
        for seed in 0..100 {
            let setup = trial_setup(2025, pi, seed, &p).unwrap();
            let cfg = RunConfig::new(setup.r.clone(), 1.0, 1.0).with_seed(derive_seed(setup.seed, &[1]));
            let res = run_pqdq(&setup.graph, &cfg).unwrap();
            errs.push(res.consensus_error);
            stage2.push((res.iterations - 2 * k) as f64);
        }
        let (me, _) = mean_var(&errs);
        let (ms, _) = mean_var(&stage2);
        pass &= me <= 0.6 && ms <= 10.0;
        details.push(format!("E={e}: err={me:.3} stage2={ms:.2}"));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < budget;
    report(
        6,
        "PQDQ quality N=50",
        pass,
        elapsed,
        budget,
        &format!("{} (err <= 0.6, stage2 <= 10)", details.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_7_quantizer_contracts() {
    let t = Instant::now();
    let budget = Duration::from_secs(10);
    let draws = 1_000_000;
    let mut s = Stream::new(707);
    let mut pass = true;
    let mut details = Vec::new();
    for (y, delta) in [(0.3, 1.0), (-2.71, 0.5), (13.05, 2.5), (0.5, 1.0)] {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..draws {
            let q = q_prob(y, delta, &mut s).unwrap();
            sum += q;
            sq += (q - y) * (q - y);
        }
        let mean = sum / draws as f64;
        let m2 = sq / draws as f64;
        let tol = 4.0 * (delta / 2.0) / (draws as f64).sqrt();
        let unbiased = (mean - y).abs() <= tol;
        let second = m2 <= delta * delta / 4.0 + 4.0 * delta * delta / 4.0 / (draws as f64).sqrt();
        pass &= unbiased && second;
        details.push(format!("y={y}: bias={:.1e} m2={m2:.4}", mean - y));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let y = (s.uniform() - 0.5) * 2e4;
        let delta = 0.01 + 5.0 * s.uniform();
        worst = worst.max((q_round(y, delta).unwrap() - y).abs() / delta);
    }
    pass &= worst <= 0.5 * (1.0 + 1e-9);
    let boundary = [0.25, 1.0, 3.0].iter().all(|&d| q_round(0.5 * d, d).unwrap() == d);
    pass &= boundary;
    let elapsed = t.elapsed();
    pass &= elapsed < budget;
    report(
        7,
        "quantizer contracts",
        pass,
        elapsed,
        budget,
        &format!(
            "{} max|Qd-y|/delta={worst:.4} boundary={boundary}",
            details.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_cycle_accounting() {
    let t = Instant::now();
    let budget = Duration::from_secs(300);
    let spec = ExperimentSpec::preset(ExperimentKind::CycleCount, Scale::Desk, 808);
    assert_eq!(spec.trials, 200);
    let rows = count_cycles(&spec).unwrap();
    let capped: usize = rows.iter().map(|r| r.capped).sum();
    let spread = rows
        .iter()
        .filter_map(|r| r.max_period_spread)
        .fold(0.0, f64::max);
    let cyclic: usize = rows.iter().map(|r| r.cyclic).sum();
    let mut random_ok = true;
    let mut details = Vec::new();
    for r in &rows {
        if r.family == GraphFamily::Random && r.algorithm == Algorithm::Dq {
            random_ok &= r.converged as f64 >= 0.7 * r.trials as f64;
        }
        details.push(format!(
            "{}/{}/N={}: {}c {}y",
            r.family.name(),
            r.algorithm,
            r.n,
            r.converged,
            r.cyclic
        ));
    }
    let elapsed = t.elapsed();
    let pass = capped == 0 && spread <= 1e-9 && random_ok && elapsed < budget;
    report(
        8,
        "cycle accounting",
        pass,
        elapsed,
        budget,
        &format!(
            "capped={capped} cyclic={cyclic} max_period_spread={spread:.1e} [{}]",
            details.join(", ")
        ),
    );
    assert!(pass);
}
