//! Static microgrid description and the on-disk config document.
//!
//! The config file is a single JSON document. `schema_version` gates future
//! format changes. Parsing yields a validated [`MicrogridConfig`]; semantic
//! violations fail with a path-qualified message
//! (e.g. `dgus[2].load.conductance`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{DguGains, GainSet};
use crate::error::{Error, Result};
use crate::loads::ZieLoad;
use crate::network::{CommLink, MicrogridTopology};
use crate::simulator::ScenarioEvent;

pub const SCHEMA_VERSION: u32 = 1;

/// Converter filter and reference data for one DGU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DguParams {
    /// Filter resistance R_t, ohms.
    pub r_t: f64,
    /// Filter inductance L_t, henries.
    pub l_t: f64,
    /// Filter capacitance C_t (line capacitances lumped in), farads.
    pub c_t: f64,
    /// Rated filter current I_t^s, amperes.
    pub rating: f64,
    /// Voltage reference at the point of coupling, volts.
    pub v_ref: f64,
    /// Source voltage, volts; used only for duty-cycle saturation reporting.
    pub v_s: f64,
}

impl DguParams {
    fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("r_t", self.r_t),
            ("l_t", self.l_t),
            ("c_t", self.c_t),
            ("rating", self.rating),
            ("v_ref", self.v_ref),
            ("v_s", self.v_s),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config {
                    path: format!("{path}.{name}"),
                    message: format!("must be strictly positive, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dgu {
    #[serde(flatten)]
    pub params: DguParams,
    #[serde(default)]
    pub load: ZieLoad,
    /// Feedback gains; synthesized from the filter parameters when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<DguGains>,
    /// Whether the secondary controller starts enabled.
    #[serde(default = "default_true")]
    pub secondary: bool,
    /// Whether the DGU is part of the network at t = 0. Absent DGUs join via
    /// a plug-in event and are initialized at that moment.
    #[serde(default = "default_true")]
    pub present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Line resistance, ohms.
    pub resistance: f64,
    /// Line inductance, henries.
    pub inductance: f64,
    /// Whether the line switch starts closed.
    #[serde(default = "default_true")]
    pub closed: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub fixed_point_tol: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            fixed_point_tol: 1e-10,
            newton_tol: 1e-9,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorSettings {
    /// Fixed integration step, seconds.
    pub dt: f64,
    /// Simulation horizon, seconds.
    pub t_end: f64,
    /// Trace recording cadence in steps.
    pub record_every: usize,
    /// A PC voltage at or below this level terminates the run as a collapse.
    pub voltage_floor: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            dt: 1e-5,
            t_end: 2.0,
            record_every: 100,
            voltage_floor: 0.0,
        }
    }
}

/// Full static description of one microgrid plus optional scenario script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridConfig {
    #[serde(default = "schema_version_default")]
    pub schema_version: u32,
    pub dgus: Vec<Dgu>,
    #[serde(default)]
    pub lines: Vec<Line>,
    #[serde(default)]
    pub comm: Vec<CommLink>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenario: Vec<ScenarioEvent>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub integrator: IntegratorSettings,
}

fn schema_version_default() -> u32 {
    SCHEMA_VERSION
}

impl MicrogridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: MicrogridConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n(&self) -> usize {
        self.dgus.len()
    }

    pub fn m(&self) -> usize {
        self.lines.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                path: "schema_version".into(),
                message: format!(
                    "unsupported schema version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        if self.dgus.is_empty() {
            return Err(Error::Config {
                path: "dgus".into(),
                message: "at least one DGU is required".into(),
            });
        }
        for (i, dgu) in self.dgus.iter().enumerate() {
            dgu.params.validate(&format!("dgus[{i}]"))?;
            dgu.load.validate().map_err(|e| Error::Config {
                path: format!("dgus[{i}].load"),
                message: e.to_string(),
            })?;
        }
        for (l, line) in self.lines.iter().enumerate() {
            if line.resistance <= 0.0 || !line.resistance.is_finite() {
                return Err(Error::Config {
                    path: format!("lines[{l}].resistance"),
                    message: format!("must be strictly positive, got {}", line.resistance),
                });
            }
            if line.inductance <= 0.0 || !line.inductance.is_finite() {
                return Err(Error::Config {
                    path: format!("lines[{l}].inductance"),
                    message: format!("must be strictly positive, got {}", line.inductance),
                });
            }
        }
        self.topology().validate()?;
        Ok(())
    }

    pub fn topology(&self) -> MicrogridTopology {
        MicrogridTopology {
            n_dgus: self.n(),
            lines: self.lines.iter().map(|l| (l.from, l.to)).collect(),
            comm_links: self.comm.clone(),
        }
    }

    pub fn ratings(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.params.rating))
    }

    pub fn v_ref(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.params.v_ref))
    }

    pub fn c_t(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.params.c_t))
    }

    pub fn loads(&self) -> Vec<ZieLoad> {
        self.dgus.iter().map(|d| d.load).collect()
    }

    pub fn load_conductances(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.load.conductance))
    }

    pub fn load_currents(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.load.current))
    }

    pub fn load_powers(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.load.power))
    }

    pub fn load_exponents(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dgus.iter().map(|d| d.load.exponent))
    }

    pub fn line_resistances(&self) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.lines.iter().map(|l| l.resistance))
    }

    pub fn line_inductances(&self) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.lines.iter().map(|l| l.inductance))
    }

    pub fn comm_weights(&self) -> DMatrix<f64> {
        self.topology().comm_weight_matrix()
    }

    /// Per-DGU gains: explicit where given, synthesized (margin 0.5) elsewhere.
    pub fn gain_set(&self) -> Result<GainSet> {
        let r_t: Vec<f64> = self.dgus.iter().map(|d| d.params.r_t).collect();
        let l_t: Vec<f64> = self.dgus.iter().map(|d| d.params.l_t).collect();
        let raw = self
            .dgus
            .iter()
            .enumerate()
            .map(|(i, d)| match d.gains {
                Some(g) => Ok(g),
                None => crate::control::sample_stabilizing_gains(r_t[i], l_t[i], 0.5),
            })
            .collect::<Result<Vec<_>>>()?;
        GainSet::new(raw, &r_t, &l_t)
    }

    /// True when every load is ZIP (exponent identically zero).
    pub fn all_zip(&self) -> bool {
        self.dgus.iter().all(|d| d.load.is_zip())
    }

    /// Copy with every line resistance multiplied by `factor`.
    pub fn scale_line_resistances(&self, factor: f64) -> Self {
        let mut scaled = self.clone();
        for line in &mut scaled.lines {
            line.resistance *= factor;
        }
        scaled
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "schema_version": 1,
            "dgus": [
                {
                    "r_t": 0.2, "l_t": 0.0018, "c_t": 0.0022,
                    "rating": 12.0, "v_ref": 48.0, "v_s": 80.0,
                    "load": { "conductance": 0.5, "current": 0.5, "power": 150.0, "exponent": 0.0 }
                },
                {
                    "r_t": 0.22, "l_t": 0.002, "c_t": 0.0024,
                    "rating": 10.0, "v_ref": 47.5, "v_s": 80.0,
                    "load": { "conductance": 0.6, "current": 0.3, "power": 120.0, "exponent": 0.0 }
                }
            ],
            "lines": [
                { "from": 0, "to": 1, "resistance": 0.07, "inductance": 2.5e-6 }
            ],
            "comm": [ { "a": 0, "b": 1, "weight": 5.0 } ]
        }"#
    }

    #[test]
    fn parses_and_validates() {
        let config = MicrogridConfig::from_json(minimal_json()).unwrap();
        assert_eq!(config.n(), 2);
        assert_eq!(config.m(), 1);
        assert!(config.all_zip());
        assert!(config.dgus[0].secondary);
        assert!(config.lines[0].closed);
    }

    #[test]
    fn round_trip_is_identity() {
        let config = MicrogridConfig::from_json(minimal_json()).unwrap();
        let text = config.to_json().unwrap();
        let reparsed = MicrogridConfig::from_json(&text).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn rejects_nonpositive_parameter_with_path() {
        let bad = minimal_json().replace("\"r_t\": 0.2,", "\"r_t\": -0.2,");
        let err = MicrogridConfig::from_json(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dgus[0].r_t"), "message was: {msg}");
    }

    #[test]
    fn rejects_unknown_schema_version() {
        let bad = minimal_json().replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(MicrogridConfig::from_json(&bad).is_err());
    }

    #[test]
    fn rejects_line_out_of_range() {
        let bad = minimal_json().replace("\"from\": 0, \"to\": 1", "\"from\": 0, \"to\": 7");
        assert!(MicrogridConfig::from_json(&bad).is_err());
    }

    #[test]
    fn synthesizes_missing_gains() {
        let config = MicrogridConfig::from_json(minimal_json()).unwrap();
        let gains = config.gain_set().unwrap();
        assert_eq!(gains.len(), 2);
        for (i, g) in gains.raw.iter().enumerate() {
            let p = &config.dgus[i].params;
            assert!(crate::control::check_gain_set(g.k1, g.k2, g.k3, p.r_t, p.l_t).ok);
        }
    }
}
