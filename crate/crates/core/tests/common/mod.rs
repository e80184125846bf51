//! Shared helpers for the integration suites: deterministic RNG and
//! randomized-but-valid microgrid configurations.

use dcmg::config::{Dgu, DguParams, IntegratorSettings, Line, MicrogridConfig, SolverSettings};
use dcmg::loads::ZieLoad;
use dcmg::network::CommLink;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Random spanning tree plus a few extra edges over `n` nodes.
pub fn random_connected_edges(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        edges.push((j, i));
    }
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    edges
}

/// Randomized connected ZIP microgrid with toolkit-scale parameters.
pub fn random_zip_config(rng: &mut ChaCha8Rng, n: usize) -> MicrogridConfig {
    let extra = if n > 2 { rng.random_range(0..n) } else { 0 };
    let edges = random_connected_edges(rng, n, extra);
    let lines = edges
        .iter()
        .map(|&(a, b)| Line {
            from: a,
            to: b,
            resistance: uniform(rng, 0.03, 0.12),
            inductance: uniform(rng, 2.0e-6, 3.0e-6),
            closed: true,
        })
        .collect();
    let comm_edges = random_connected_edges(rng, n, 1);
    let comm = comm_edges
        .iter()
        .map(|&(a, b)| CommLink {
            a,
            b,
            weight: uniform(rng, 3.0, 8.0),
        })
        .collect();
    let dgus = (0..n)
        .map(|_| Dgu {
            params: DguParams {
                r_t: uniform(rng, 0.15, 0.3),
                l_t: uniform(rng, 1.5e-3, 2.5e-3),
                c_t: uniform(rng, 2.0e-3, 3.0e-3),
                rating: uniform(rng, 5.0, 15.0),
                v_ref: uniform(rng, 45.0, 50.0),
                v_s: 80.0,
            },
            load: ZieLoad {
                conductance: uniform(rng, 0.3, 0.8),
                current: uniform(rng, 0.0, 1.0),
                power: uniform(rng, 50.0, 250.0),
                exponent: 0.0,
            },
            gains: None,
            secondary: true,
            present: true,
        })
        .collect();
    MicrogridConfig {
        schema_version: 1,
        dgus,
        lines,
        comm,
        scenario: vec![],
        solver: SolverSettings::default(),
        integrator: IntegratorSettings::default(),
    }
}

/// Rescales the constant-power loads so the certificate lands on the target
/// contraction parameter (the parameter is linear in the power vector).
pub fn with_target_delta(config: &MicrogridConfig, target: f64) -> MicrogridConfig {
    let cert = dcmg::equilibrium::certificate(config).expect("ZIP config");
    assert!(cert.delta > 0.0, "base config must draw some power");
    let factor = target / cert.delta;
    let mut scaled = config.clone();
    for d in &mut scaled.dgus {
        d.load.power *= factor;
    }
    scaled
}
