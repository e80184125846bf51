//! Primary PI gain derivation and validation, and the consensus-based
//! secondary layer.
//!
//! Each DGU carries four feedback gains `k1..k4`. The derived quantities
//! `alpha = (k1-1)/L_t`, `beta = (k2-R_t)/L_t`, `gamma = k3/L_t`,
//! `delta = k4/L_t` drive the closed-loop filter-current equation. The
//! Lyapunov parameter `mu = gamma - alpha*beta` is kept per DGU; valid
//! stabilizing gains give `mu < 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Raw per-DGU feedback gains.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DguGains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

/// Gains mapped through the filter parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedGains {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub mu: f64,
}

/// alpha, beta, gamma, delta from raw gains and the filter R_t, L_t.
pub fn derive_abgd(gains: &DguGains, r_t: f64, l_t: f64) -> Result<DerivedGains> {
    if l_t <= 0.0 || !l_t.is_finite() {
        return Err(Error::NonPositive {
            name: "filter inductance",
            value: l_t,
        });
    }
    let alpha = (gains.k1 - 1.0) / l_t;
    let beta = (gains.k2 - r_t) / l_t;
    let gamma = gains.k3 / l_t;
    let delta = gains.k4 / l_t;
    Ok(DerivedGains {
        alpha,
        beta,
        gamma,
        delta,
        mu: gamma - alpha * beta,
    })
}

/// Recovers (k1, k2, k3, k4) from derived values; inverse of [`derive_abgd`].
pub fn gains_from_abgd(d: &DerivedGains, r_t: f64, l_t: f64) -> DguGains {
    DguGains {
        k1: d.alpha * l_t + 1.0,
        k2: d.beta * l_t + r_t,
        k3: d.gamma * l_t,
        k4: d.delta * l_t,
    }
}

/// Verdict of the stabilizing-gain membership test.
#[derive(Debug, Clone, PartialEq)]
pub struct GainCheck {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Strict membership in the stabilizing set:
/// `k1 < 1`, `k2 < R_t`, `0 < k3 < (1/L_t)(k1-1)(k2-R_t)`.
pub fn check_gain_set(k1: f64, k2: f64, k3: f64, r_t: f64, l_t: f64) -> GainCheck {
    let mut violations = Vec::new();
    if !(k1 < 1.0) {
        violations.push(format!("k1 < 1 violated (k1 = {k1})"));
    }
    if !(k2 < r_t) {
        violations.push(format!("k2 < R_t violated (k2 = {k2}, R_t = {r_t})"));
    }
    if !(k3 > 0.0) {
        violations.push(format!("0 < k3 violated (k3 = {k3})"));
    }
    let k3_bound = (k1 - 1.0) * (k2 - r_t) / l_t;
    if !(k3 < k3_bound) {
        violations.push(format!(
            "k3 < (1/L_t)(k1-1)(k2-R_t) violated (k3 = {k3}, bound = {k3_bound})"
        ));
    }
    GainCheck {
        ok: violations.is_empty(),
        violations,
    }
}

/// Deterministic gain synthesis strictly inside the stabilizing set.
///
/// Uses a fixed unit offset from the open `k1`/`k2` boundaries and places
/// `k3` at `margin` times its upper bound; `k4 = k1 - 1` makes the gains
/// secondary-compatible.
pub fn sample_stabilizing_gains(r_t: f64, l_t: f64, margin: f64) -> Result<DguGains> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::InvalidGains(format!(
            "margin must lie in (0, 1), got {margin}"
        )));
    }
    if l_t <= 0.0 {
        return Err(Error::NonPositive {
            name: "filter inductance",
            value: l_t,
        });
    }
    let k1 = 0.0;
    let k2 = r_t - 1.0;
    let k3 = margin * (k1 - 1.0) * (k2 - r_t) / l_t;
    let k4 = k1 - 1.0;
    Ok(DguGains { k1, k2, k3, k4 })
}

/// Relative tolerance on the secondary-compatibility identity `k4 = k1 - 1`.
pub const K4_TOL: f64 = 1e-9;

pub fn secondary_compatible(gains: &DguGains) -> bool {
    let target = gains.k1 - 1.0;
    (gains.k4 - target).abs() <= K4_TOL * target.abs().max(1.0)
}

/// Per-DGU gains with their derived quantities, dimensioned for one microgrid.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub raw: Vec<DguGains>,
    pub derived: Vec<DerivedGains>,
}

impl GainSet {
    pub fn new(raw: Vec<DguGains>, r_t: &[f64], l_t: &[f64]) -> Result<Self> {
        if raw.len() != r_t.len() || raw.len() != l_t.len() {
            return Err(Error::DimensionMismatch {
                what: "gain set",
                expected: r_t.len(),
                got: raw.len(),
            });
        }
        let derived = raw
            .iter()
            .zip(r_t.iter().zip(l_t.iter()))
            .map(|(g, (&r, &l))| derive_abgd(g, r, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { raw, derived })
    }

    pub fn synthesize(r_t: &[f64], l_t: &[f64], margin: f64) -> Result<Self> {
        let raw = r_t
            .iter()
            .zip(l_t.iter())
            .map(|(&r, &l)| sample_stabilizing_gains(r, l, margin))
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw, r_t, l_t)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.derived.iter().map(|d| d.alpha))
    }

    pub fn beta(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.derived.iter().map(|d| d.beta))
    }

    pub fn gamma(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.derived.iter().map(|d| d.gamma))
    }

    pub fn delta(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.derived.iter().map(|d| d.delta))
    }

    pub fn mu(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.derived.iter().map(|d| d.mu))
    }
}

/// One evaluation of the consensus layer:
/// `Omega_dot = L_c [I_s]^-1 I_t` and `omega = [I_s]^-1 L_c Omega`.
pub fn consensus_rhs(
    i_t: &DVector<f64>,
    omega_state: &DVector<f64>,
    l_c: &DMatrix<f64>,
    ratings: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = ratings.len();
    if i_t.len() != n || omega_state.len() != n || l_c.nrows() != n || l_c.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "consensus layer",
            expected: n,
            got: i_t.len(),
        });
    }
    for &r in ratings.iter() {
        if r <= 0.0 {
            return Err(Error::NonPositive {
                name: "rated current",
                value: r,
            });
        }
    }
    let weighted = DVector::from_iterator(n, i_t.iter().zip(ratings.iter()).map(|(&i, &s)| i / s));
    let omega_dot = l_c * weighted;
    let coupled = l_c * omega_state;
    let injection =
        DVector::from_iterator(n, coupled.iter().zip(ratings.iter()).map(|(&c, &s)| c / s));
    Ok((omega_dot, injection))
}
