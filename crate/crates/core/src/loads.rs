//! ZIE load model: constant-impedance (Z), constant-current (I), and
//! exponential (E) components in parallel at one node.
//!
//! The E component draws `V^(r-1) * P*` amperes; `r = 0` gives a constant-power
//! load and `r = 1` degenerates to a constant current. Powers are evaluated as
//! `exp((r-1) ln V)`, so every evaluation requires `V > 0`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZieLoad {
    /// Conductance of the Z part, siemens, >= 0.
    #[serde(default)]
    pub conductance: f64,
    /// Constant-current part, amperes.
    #[serde(default)]
    pub current: f64,
    /// Coefficient of the E part, watts.
    #[serde(default)]
    pub power: f64,
    /// Exponent of the E part, dimensionless.
    #[serde(default = "one")]
    pub exponent: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ZieLoad {
    /// An open circuit: a node without a load.
    fn default() -> Self {
        Self {
            conductance: 0.0,
            current: 0.0,
            power: 0.0,
            exponent: 1.0,
        }
    }
}

impl ZieLoad {
    pub fn validate(&self) -> Result<()> {
        if self.conductance < 0.0 || !self.conductance.is_finite() {
            return Err(Error::NonPositive {
                name: "load conductance (must be >= 0)",
                value: self.conductance,
            });
        }
        if !(self.current.is_finite() && self.power.is_finite() && self.exponent.is_finite()) {
            return Err(Error::InvalidTopology("non-finite load parameter".into()));
        }
        Ok(())
    }

    pub fn is_zip(&self) -> bool {
        self.exponent == 0.0
    }

    /// V^(r-1) with the V > 0 domain guard.
    fn exp_pow(&self, v: f64) -> f64 {
        ((self.exponent - 1.0) * v.ln()).exp()
    }

    /// Total load current Y*V + Ibar + V^(r-1)*P* at PC voltage `v`.
    pub fn load_current(&self, v: f64) -> Result<f64> {
        self.check_voltage(v, 0)?;
        Ok(self.conductance * v + self.current + self.exp_pow(v) * self.power)
    }

    /// dI/dV = Y + (r-1) V^(r-2) P*. Negative values mean the load injects
    /// negative damping into the network.
    pub fn incremental_admittance(&self, v: f64) -> Result<f64> {
        self.check_voltage(v, 0)?;
        let dexp = (self.exponent - 1.0) * ((self.exponent - 2.0) * v.ln()).exp();
        Ok(self.conductance + dexp * self.power)
    }

    fn check_voltage(&self, v: f64, node: usize) -> Result<()> {
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::VoltageDomain { node, value: v });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn load_current_mixed_zie() {
        let load = ZieLoad {
            conductance: 0.5,
            current: 1.0,
            power: 10.0,
            exponent: 0.0,
        };
        // 0.5*50 + 1 + 10/50 = 25 + 1 + 0.2
        assert_relative_eq!(load.load_current(50.0).unwrap(), 26.2, max_relative = 1e-14);
    }

    #[test]
    fn unit_exponent_is_constant_current() {
        let load = ZieLoad {
            conductance: 0.0,
            current: 0.0,
            power: 10.0,
            exponent: 1.0,
        };
        for v in [1.0, 7.5, 50.0, 923.0] {
            assert_relative_eq!(load.load_current(v).unwrap(), 10.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn quadratic_exponent_is_resistive() {
        // space-heater style load, r = 2
        let load = ZieLoad {
            conductance: 0.0,
            current: 0.0,
            power: 2.0,
            exponent: 2.0,
        };
        assert_relative_eq!(load.load_current(50.0).unwrap(), 100.0, max_relative = 1e-14);
    }

    #[test]
    fn load_current_rejects_nonpositive_voltage() {
        let load = ZieLoad::default();
        assert!(load.load_current(0.0).is_err());
        assert!(load.load_current(-5.0).is_err());
    }

    #[test]
    fn constant_power_has_negative_admittance() {
        let load = ZieLoad {
            conductance: 0.0,
            current: 0.0,
            power: 100.0,
            exponent: 0.0,
        };
        // dI/dV = -P/V^2 = -100/100
        assert_relative_eq!(
            load.incremental_admittance(10.0).unwrap(),
            -1.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn impedance_only_admittance_is_conductance() {
        let load = ZieLoad {
            conductance: 0.3,
            ..Default::default()
        };
        for v in [2.0, 48.0, 400.0] {
            assert_relative_eq!(
                load.incremental_admittance(v).unwrap(),
                0.3,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn unit_exponent_admittance_is_conductance() {
        let load = ZieLoad {
            conductance: 0.7,
            current: 2.0,
            power: 55.0,
            exponent: 1.0,
        };
        assert_relative_eq!(
            load.incremental_admittance(13.0).unwrap(),
            0.7,
            max_relative = 1e-14
        );
    }

    proptest! {
        /// Central finite difference of the load current matches the
        /// incremental admittance to 1e-6 relative.
        #[test]
        fn admittance_matches_finite_difference(
            y in 0.0..2.0f64,
            ibar in -5.0..5.0f64,
            p in -200.0..200.0f64,
            r in -1.0..3.0f64,
            v in 1.0..100.0f64,
        ) {
            let load = ZieLoad { conductance: y, current: ibar, power: p, exponent: r };
            let h = 1e-6 * v;
            let fd = (load.load_current(v + h).unwrap() - load.load_current(v - h).unwrap())
                / (2.0 * h);
            let adm = load.incremental_admittance(v).unwrap();
            let scale = adm.abs().max(1e-3);
            prop_assert!((fd - adm).abs() <= 1e-6 * scale.max(fd.abs()),
                "fd {fd} vs admittance {adm}");
        }

        /// r = 0 reproduces the constant-power ZIP model: V * I_E = P*.
        #[test]
        fn zip_power_is_constant(p in 1.0..500.0f64, v in 1.0..100.0f64) {
            let load = ZieLoad { conductance: 0.0, current: 0.0, power: p, exponent: 0.0 };
            let i = load.load_current(v).unwrap();
            prop_assert!((i * v - p).abs() <= 1e-9 * p);
        }
    }
}
