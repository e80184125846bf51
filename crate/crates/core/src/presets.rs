//! Ready-made configurations used by the docs, the CLI examples, and the
//! test suites.
//!
//! Filter and line values follow the documented toolkit defaults: filters
//! around R_t = 0.2 ohm / L_t = 1.8 mH / C_t = 2.2 mF, lines in the
//! 50-100 mohm and 2-3 uH range, references between 45 and 50 V, and 80 V
//! source voltages. Loads are chosen so the stock configurations satisfy the
//! load damping condition and carry a feasible existence certificate.

use crate::config::{Dgu, DguParams, IntegratorSettings, Line, MicrogridConfig, SolverSettings};
use crate::loads::ZieLoad;
use crate::network::CommLink;
use crate::simulator::paper_timeline;

fn dgu(
    r_t: f64,
    l_t: f64,
    c_t: f64,
    rating: f64,
    v_ref: f64,
    load: ZieLoad,
) -> Dgu {
    Dgu {
        params: DguParams {
            r_t,
            l_t,
            c_t,
            rating,
            v_ref,
            v_s: 80.0,
        },
        load,
        gains: None,
        secondary: true,
        present: true,
    }
}

fn zip(conductance: f64, current: f64, power: f64) -> ZieLoad {
    ZieLoad {
        conductance,
        current,
        power,
        exponent: 0.0,
    }
}

/// Two-DGU worked example: one line, one communication link, ZIP loads.
pub fn two_node() -> MicrogridConfig {
    MicrogridConfig {
        schema_version: crate::config::SCHEMA_VERSION,
        dgus: vec![
            dgu(0.2, 1.8e-3, 2.2e-3, 12.0, 48.0, zip(0.5, 0.5, 150.0)),
            dgu(0.22, 2.0e-3, 2.4e-3, 10.0, 47.5, zip(0.6, 0.3, 120.0)),
        ],
        lines: vec![Line {
            from: 0,
            to: 1,
            resistance: 0.07,
            inductance: 2.5e-6,
            closed: true,
        }],
        comm: vec![CommLink {
            a: 0,
            b: 1,
            weight: 5.0,
        }],
        scenario: vec![],
        solver: SolverSettings::default(),
        integrator: IntegratorSettings::default(),
    }
}

/// Four DGUs in an electrical and communication ring, ZIP loads.
pub fn four_ring() -> MicrogridConfig {
    let r_line = [0.05, 0.08, 0.06, 0.07];
    let l_line = [2.1e-6, 2.8e-6, 2.3e-6, 2.6e-6];
    let lines = (0..4)
        .map(|l| Line {
            from: l,
            to: (l + 1) % 4,
            resistance: r_line[l],
            inductance: l_line[l],
            closed: true,
        })
        .collect();
    let comm = (0..4)
        .map(|l| CommLink {
            a: l,
            b: (l + 1) % 4,
            weight: 15.0,
        })
        .collect();
    MicrogridConfig {
        schema_version: crate::config::SCHEMA_VERSION,
        dgus: vec![
            dgu(0.2, 1.8e-3, 2.2e-3, 12.0, 48.0, zip(0.5, 0.5, 150.0)),
            dgu(0.22, 2.0e-3, 2.4e-3, 10.0, 47.6, zip(0.65, 0.3, 100.0)),
            dgu(0.18, 1.7e-3, 2.1e-3, 15.0, 48.4, zip(0.45, 0.8, 180.0)),
            dgu(0.24, 2.1e-3, 2.3e-3, 8.0, 47.9, zip(0.7, 0.4, 120.0)),
        ],
        lines,
        comm,
        scenario: vec![],
        solver: SolverSettings::default(),
        integrator: IntegratorSettings::default(),
    }
}

/// The four-ring with mixed exponential loads; used where general-exponent
/// behavior matters.
pub fn four_ring_zie() -> MicrogridConfig {
    let mut config = four_ring();
    config.dgus[1].load.exponent = 0.6;
    config.dgus[2].load.exponent = 1.45;
    config.dgus[3].load.exponent = 0.4;
    config
}

/// Six-DGU benchmark grid: seven lines, six communication links, the
/// plug-and-play scenario timeline embedded. All switches start open and
/// every secondary controller starts disabled; the scenario closes the grid
/// in stages.
pub fn six_dgu_scenario() -> MicrogridConfig {
    let mut config = six_dgu_base();
    for line in &mut config.lines {
        line.closed = false;
    }
    for d in &mut config.dgus {
        d.secondary = false;
    }
    config.integrator.t_end = 27.0;
    config.scenario = paper_timeline(&config).expect("six-DGU preset matches timeline");
    config
}

/// The six-DGU grid wired and running under secondary control, no scenario.
pub fn six_dgu_base() -> MicrogridConfig {
    let r_line = [0.05, 0.07, 0.06, 0.08, 0.10, 0.06, 0.09];
    let l_line = [2.0e-6, 2.5e-6, 2.2e-6, 3.0e-6, 2.8e-6, 2.1e-6, 2.6e-6];
    let endpoints = [(0, 1), (0, 2), (0, 5), (1, 3), (2, 3), (3, 4), (4, 5)];
    let lines = (0..7)
        .map(|l| Line {
            from: endpoints[l].0,
            to: endpoints[l].1,
            resistance: r_line[l],
            inductance: l_line[l],
            closed: true,
        })
        .collect();
    let comm = [(0, 3), (0, 2), (1, 2), (2, 3), (2, 4), (2, 5)]
        .iter()
        .map(|&(a, b)| CommLink { a, b, weight: 5.0 })
        .collect();
    MicrogridConfig {
        schema_version: crate::config::SCHEMA_VERSION,
        dgus: vec![
            dgu(0.20, 1.8e-3, 2.2e-3, 12.0, 48.0, zip(0.50, 0.5, 150.0)),
            dgu(0.22, 2.0e-3, 2.4e-3, 10.0, 47.5, zip(0.60, 0.3, 100.0)),
            dgu(0.19, 1.7e-3, 2.0e-3, 15.0, 48.5, zip(0.45, 0.8, 180.0)),
            dgu(0.24, 2.2e-3, 2.6e-3, 10.0, 47.8, zip(0.70, 0.4, 120.0)),
            dgu(0.21, 1.9e-3, 2.3e-3, 8.0, 48.2, zip(0.55, 0.6, 90.0)),
            Dgu {
                load: ZieLoad {
                    conductance: 0.50,
                    current: 0.4,
                    power: 110.0,
                    exponent: 0.65,
                },
                ..dgu(0.23, 2.1e-3, 2.5e-3, 12.0, 47.6, zip(0.0, 0.0, 0.0))
            },
        ],
        lines,
        comm,
        scenario: vec![],
        solver: SolverSettings::default(),
        integrator: IntegratorSettings::default(),
    }
}

/// Six-DGU all-ZIP grid with a strongly uneven constant-power distribution.
/// Scaling its line resistances drives the existence certificate infeasible;
/// see `run_collapse_scenario`. Line inductances are those of long feeders so
/// the scaled-resistance grid stays integrable at the default step.
pub fn six_dgu_collapse_base() -> MicrogridConfig {
    let mut config = six_dgu_base();
    let conductances = [0.55, 0.60, 0.50, 0.65, 0.30, 0.55];
    let powers = [150.0, 100.0, 180.0, 120.0, 600.0, 140.0];
    for ((d, &y), &p) in config
        .dgus
        .iter_mut()
        .zip(conductances.iter())
        .zip(powers.iter())
    {
        d.load = zip(y, 0.0, p);
    }
    for line in &mut config.lines {
        line.inductance *= 30.0;
    }
    // lightly damped gains: k3 close to its bound leaves little margin
    // against negative load admittance once the grid voltage sags
    for d in &mut config.dgus {
        d.gains = Some(
            crate::control::sample_stabilizing_gains(d.params.r_t, d.params.l_t, 0.9)
                .expect("valid margin"),
        );
    }
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for config in [
            two_node(),
            four_ring(),
            four_ring_zie(),
            six_dgu_base(),
            six_dgu_scenario(),
            six_dgu_collapse_base(),
        ] {
            config.validate().unwrap();
            config.gain_set().unwrap();
        }
    }

    #[test]
    fn scenario_preset_starts_open_and_quiet() {
        let config = six_dgu_scenario();
        assert!(config.lines.iter().all(|l| !l.closed));
        assert!(config.dgus.iter().all(|d| !d.secondary));
        assert!(!config.scenario.is_empty());
    }

    #[test]
    fn presets_are_connected() {
        for config in [two_node(), four_ring(), six_dgu_base()] {
            let topo = config.topology();
            assert!(topo.electrical_connected());
            assert!(topo.comm_connected());
        }
    }
}
