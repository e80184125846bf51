//! Lyapunov-based stability certification of the closed-loop microgrid.
//!
//! The candidate function is `V(e) = 1/2 e^T P e` with the block-diagonal `P`
//! built from the filter capacitances, the gain-derived 2x2 blocks, the line
//! inductances, and the identity on the consensus states. Its derivative
//! along trajectories is `e^T Q(V) e`; with secondary-compatible gains
//! (`k4 = k1 - 1`) the cross couplings cancel and `-Q` is block diagonal with
//! the load damping `Y_L + Y_E(V)` in the voltage block. Certification
//! combines the gain membership test, the load damping condition, positive
//! definiteness of `P`, and negative semidefiniteness of `Q` at equilibrium.

use nalgebra::{Complex, DMatrix, DVector};

use crate::config::MicrogridConfig;
use crate::control::{check_gain_set, secondary_compatible, GainSet};
use crate::dynamics::{self, ControlMode, SystemState};
use crate::equilibrium::EquilibriumSolution;
use crate::error::{Error, Result};
use crate::loads::ZieLoad;

/// Verdict of a definiteness test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    PositiveDefinite,
    PositiveSemidefinite,
    Indefinite,
}

/// Definiteness of the symmetric block matrix `[[A, B], [B, D]]` with
/// diagonal N x N blocks, decided per 2x2 pencil `[[A_i, B_i], [B_i, D_i]]`.
pub fn block_pd_test(
    a_diag: &DVector<f64>,
    b_diag: &DVector<f64>,
    d_diag: &DVector<f64>,
) -> Definiteness {
    let n = a_diag.len();
    let mut any_psd = false;
    for i in 0..n {
        let (a, b, d) = (a_diag[i], b_diag[i], d_diag[i]);
        let det = a * d - b * b;
        if a > 0.0 && det > 0.0 {
            continue; // strictly PD block
        }
        if a >= 0.0 && d >= 0.0 && det >= 0.0 {
            any_psd = true;
            continue;
        }
        return Definiteness::Indefinite;
    }
    if any_psd {
        Definiteness::PositiveSemidefinite
    } else {
        Definiteness::PositiveDefinite
    }
}

/// Lyapunov matrix `P = blockdiag(C_t, [[beta/mu, gamma/mu], [gamma/mu,
/// alpha gamma/mu]], L, I)` on the secondary state layout.
pub fn build_p(config: &MicrogridConfig, gains: &GainSet) -> Result<DMatrix<f64>> {
    let n = config.n();
    let m = config.m();
    if gains.len() != n {
        return Err(Error::DimensionMismatch {
            what: "gain set",
            expected: n,
            got: gains.len(),
        });
    }
    let layout = dynamics::StateLayout {
        n,
        m,
        mode: ControlMode::Secondary,
    };
    let mut p = DMatrix::zeros(layout.dim(), layout.dim());
    for i in 0..n {
        let d = &gains.derived[i];
        if d.mu == 0.0 {
            return Err(Error::InvalidGains(format!(
                "mu[{i}] = gamma - alpha*beta = 0"
            )));
        }
        p[(layout.voltage(i), layout.voltage(i))] = config.dgus[i].params.c_t;
        let it = layout.filter_current(i);
        let vi = layout.integrator(i);
        p[(it, it)] = d.beta / d.mu;
        p[(it, vi)] = d.gamma / d.mu;
        p[(vi, it)] = d.gamma / d.mu;
        p[(vi, vi)] = d.alpha * d.gamma / d.mu;
        let om = layout.consensus(i).expect("secondary layout");
        p[(om, om)] = 1.0;
    }
    for (l, line) in config.lines.iter().enumerate() {
        let idx = layout.line_current(l);
        p[(idx, idx)] = line.inductance;
    }
    Ok(p)
}

/// Equivalent-admittance of the exponential load part around the equilibrium
/// voltage. Uses the secant form away from `v_bar` and its limit
/// `(r-1) P* v_bar^(r-2)` within a relative band of 1e-9 to avoid the 0/0.
pub fn exponential_admittance(load: &ZieLoad, v_bar: f64, v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::VoltageDomain { node: 0, value: v });
    }
    if !(v_bar > 0.0) {
        return Err(Error::VoltageDomain {
            node: 0,
            value: v_bar,
        });
    }
    if load.power == 0.0 {
        return Ok(0.0);
    }
    let pow = |base: f64, e: f64| (e * base.ln()).exp();
    if (v - v_bar).abs() < 1e-9 * v_bar {
        Ok((load.exponent - 1.0) * load.power * pow(v_bar, load.exponent - 2.0))
    } else {
        let num = load.power * (pow(v, load.exponent - 1.0) - pow(v_bar, load.exponent - 1.0));
        Ok(num / (v - v_bar))
    }
}

/// Effective voltage-block damping `f_i(V_i) = Y_Li + Y_Ei(V_i)`.
pub fn damping_profile(
    config: &MicrogridConfig,
    v_bar: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = config.n();
    let mut f = DVector::zeros(n);
    for i in 0..n {
        f[i] = config.dgus[i].load.conductance
            + exponential_admittance(&config.dgus[i].load, v_bar[i], v[i])?;
    }
    Ok(f)
}

/// The simplified derivative matrix `Q(V)`: `-Q = blockdiag(Y_L + Y_E(V),
/// [[-beta^2/mu, -beta*gamma/mu], [-beta*gamma/mu, -gamma^2/mu]], R, 0)`.
///
/// Valid for secondary-compatible gains (`k4 = k1 - 1`), which cancel every
/// off-diagonal coupling of the full derivative matrix.
pub fn build_q(
    config: &MicrogridConfig,
    gains: &GainSet,
    v_bar: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = config.n();
    let m = config.m();
    for (i, g) in gains.raw.iter().enumerate() {
        if !secondary_compatible(g) {
            return Err(Error::InvalidGains(format!(
                "k4[{i}] != k1[{i}] - 1; the simplified derivative matrix requires it"
            )));
        }
    }
    let damping = damping_profile(config, v_bar, v)?;
    let layout = dynamics::StateLayout {
        n,
        m,
        mode: ControlMode::Secondary,
    };
    let mut q = DMatrix::zeros(layout.dim(), layout.dim());
    for i in 0..n {
        let d = &gains.derived[i];
        if d.mu == 0.0 {
            return Err(Error::InvalidGains(format!("mu[{i}] = 0")));
        }
        q[(layout.voltage(i), layout.voltage(i))] = -damping[i];
        let it = layout.filter_current(i);
        let vi = layout.integrator(i);
        q[(it, it)] = d.beta * d.beta / d.mu;
        q[(it, vi)] = d.beta * d.gamma / d.mu;
        q[(vi, it)] = d.beta * d.gamma / d.mu;
        q[(vi, vi)] = d.gamma * d.gamma / d.mu;
    }
    for (l, line) in config.lines.iter().enumerate() {
        let idx = layout.line_current(l);
        q[(idx, idx)] = -line.resistance;
    }
    Ok(q)
}

/// Load damping condition at the equilibrium: for exponents below one the
/// equilibrium power draw must stay under `Y_L V^2`; higher exponents pass
/// unconditionally.
pub fn check_load_condition(config: &MicrogridConfig, v_bar: &DVector<f64>) -> Result<Vec<bool>> {
    let n = config.n();
    if v_bar.len() != n {
        return Err(Error::DimensionMismatch {
            what: "equilibrium voltages",
            expected: n,
            got: v_bar.len(),
        });
    }
    let mut ok = Vec::with_capacity(n);
    for i in 0..n {
        let load = &config.dgus[i].load;
        let v = v_bar[i];
        if !(v > 0.0) {
            return Err(Error::VoltageDomain { node: i, value: v });
        }
        if load.exponent >= 1.0 {
            ok.push(true);
        } else {
            // (1 - r) P* V^r < Y V^2
            let lhs = (1.0 - load.exponent) * load.power * (load.exponent * v.ln()).exp();
            let rhs = load.conductance * v * v;
            ok.push(lhs < rhs);
        }
    }
    Ok(ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    CertifiedLocal,
    CertifiedGlobal,
    NotCertified,
}

/// Outcome of the full certification chain.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub gains_ok: Vec<bool>,
    pub load_ok: Vec<bool>,
    pub p_pd: bool,
    /// Smallest determinant over the 2x2 gain blocks of `P`.
    pub min_block_det: f64,
    pub q_nsd: bool,
    /// Damping values `f_i` at the equilibrium voltages.
    pub f_bar: DVector<f64>,
    pub verdict: Verdict,
}

fn eigen_definiteness(m: &DMatrix<f64>) -> Definiteness {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .map(|e| e.abs())
        .fold(0.0_f64, f64::max);
    let tol = 1e-9 * max_abs.max(1e-300);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > tol {
        Definiteness::PositiveDefinite
    } else if min >= -tol {
        Definiteness::PositiveSemidefinite
    } else {
        Definiteness::Indefinite
    }
}

/// Block-test verdict on `P`: filter capacitances and line inductances are
/// positive by validation, so only the 2x2 gain blocks matter.
fn p_block_verdict(config: &MicrogridConfig, gains: &GainSet) -> Definiteness {
    let n = config.n();
    let a = DVector::from_iterator(n, gains.derived.iter().map(|d| d.beta / d.mu));
    let b = DVector::from_iterator(n, gains.derived.iter().map(|d| d.gamma / d.mu));
    let dd = DVector::from_iterator(n, gains.derived.iter().map(|d| d.alpha * d.gamma / d.mu));
    let blocks = block_pd_test(&a, &b, &dd);
    let _ = config;
    blocks
}

/// Block-test verdict on `-Q`: the voltage block is the damping diagonal, the
/// gain block is tested per 2x2 pencil, line resistances are positive, and
/// the consensus block is identically zero (so `-Q` is at best PSD).
fn neg_q_block_verdict(
    config: &MicrogridConfig,
    gains: &GainSet,
    damping: &DVector<f64>,
) -> Definiteness {
    if damping.iter().any(|&f| f < 0.0) {
        return Definiteness::Indefinite;
    }
    let n = config.n();
    let a = DVector::from_iterator(n, gains.derived.iter().map(|d| -d.beta * d.beta / d.mu));
    let b = DVector::from_iterator(n, gains.derived.iter().map(|d| -d.beta * d.gamma / d.mu));
    let dd = DVector::from_iterator(n, gains.derived.iter().map(|d| -d.gamma * d.gamma / d.mu));
    match block_pd_test(&a, &b, &dd) {
        Definiteness::Indefinite => Definiteness::Indefinite,
        // the zero consensus block caps the whole matrix at PSD
        _ => Definiteness::PositiveSemidefinite,
    }
}

/// Runs the certification chain at a reconstructed equilibrium.
///
/// Positive-definiteness of `P` and negative-semidefiniteness of `Q` are each
/// decided twice, by the diagonal block test and by a full eigendecomposition;
/// disagreement is an internal error.
pub fn certify(
    config: &MicrogridConfig,
    gains: &GainSet,
    equilibrium: &EquilibriumSolution,
) -> Result<StabilityReport> {
    let n = config.n();
    let v_bar = &equilibrium.state.voltage;

    let gains_ok: Vec<bool> = (0..n)
        .map(|i| {
            let g = &gains.raw[i];
            let p = &config.dgus[i].params;
            check_gain_set(g.k1, g.k2, g.k3, p.r_t, p.l_t).ok && secondary_compatible(g)
        })
        .collect();
    let load_ok = check_load_condition(config, v_bar)?;
    let f_bar = damping_profile(config, v_bar, v_bar)?;

    let p = build_p(config, gains)?;
    let p_blocks = p_block_verdict(config, gains);
    let p_eigen = eigen_definiteness(&p);
    let p_pd_blocks = p_blocks == Definiteness::PositiveDefinite;
    let p_pd_eigen = p_eigen == Definiteness::PositiveDefinite;
    if p_pd_blocks != p_pd_eigen {
        return Err(Error::Internal(format!(
            "P definiteness disagreement: blocks {p_blocks:?} vs eigen {p_eigen:?}"
        )));
    }

    let (q_nsd, q_ok_pair) = if gains.raw.iter().all(secondary_compatible) {
        let q = build_q(config, gains, v_bar, v_bar)?;
        let neg_q = -q;
        let blocks = neg_q_block_verdict(config, gains, &f_bar);
        let eigen = eigen_definiteness(&neg_q);
        let nsd_blocks = blocks != Definiteness::Indefinite;
        let nsd_eigen = eigen != Definiteness::Indefinite;
        if nsd_blocks != nsd_eigen {
            return Err(Error::Internal(format!(
                "Q definiteness disagreement: blocks {blocks:?} vs eigen {eigen:?}"
            )));
        }
        (nsd_blocks, true)
    } else {
        (false, false)
    };
    let _ = q_ok_pair;

    let min_block_det = gains
        .derived
        .iter()
        .map(|d| {
            (d.beta / d.mu) * (d.alpha * d.gamma / d.mu) - (d.gamma / d.mu) * (d.gamma / d.mu)
        })
        .fold(f64::INFINITY, f64::min);

    let certified = gains_ok.iter().all(|&b| b)
        && load_ok.iter().all(|&b| b)
        && p_pd_blocks
        && q_nsd;
    let verdict = if certified {
        if config.load_powers().iter().all(|&p| p == 0.0) {
            Verdict::CertifiedGlobal
        } else {
            Verdict::CertifiedLocal
        }
    } else {
        Verdict::NotCertified
    };

    Ok(StabilityReport {
        gains_ok,
        load_ok,
        p_pd: p_pd_blocks,
        min_block_det,
        q_nsd,
        f_bar,
        verdict,
    })
}

/// Result of checking the Lyapunov function along trajectory samples.
#[derive(Debug, Clone)]
pub struct LyapunovCheck {
    /// `1/2 e^T P e` per sample.
    pub values: Vec<f64>,
    pub nonincreasing: bool,
    /// First sample index whose value exceeds its predecessor beyond
    /// tolerance, if any.
    pub first_violation: Option<usize>,
    pub max_increase: f64,
}

/// Evaluates `V(e) = 1/2 e^T P e` on the supplied flat state samples and
/// checks it decreases between consecutive samples within
/// `tol_rel * max(1, V(e_0))`.
pub fn lyapunov_decrease_check(
    config: &MicrogridConfig,
    gains: &GainSet,
    x_bar: &SystemState,
    samples: &[DVector<f64>],
    tol_rel: f64,
) -> Result<LyapunovCheck> {
    let p = build_p(config, gains)?;
    let x_bar_flat = x_bar.stack();
    let dim = x_bar_flat.len();
    let mut values = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "trajectory sample",
                expected: dim,
                got: s.len(),
            });
        }
        let e = s - &x_bar_flat;
        values.push(0.5 * (&e).dot(&(&p * &e)));
        let _ = k;
    }
    let scale = values.first().copied().unwrap_or(0.0).max(1.0);
    let tol = tol_rel * scale;
    let mut first_violation = None;
    let mut max_increase = 0.0_f64;
    for k in 1..values.len() {
        let increase = values[k] - values[k - 1];
        if increase > max_increase {
            max_increase = increase;
        }
        if increase > tol && first_violation.is_none() {
            first_violation = Some(k);
        }
    }
    Ok(LyapunovCheck {
        values,
        nonincreasing: first_violation.is_none(),
        first_violation,
        max_increase,
    })
}

/// Eigenvalues of the linearization at a state, sorted by descending real
/// part.
pub fn linearized_spectrum(
    config: &MicrogridConfig,
    gains: &GainSet,
    x_bar: &SystemState,
) -> Result<Vec<Complex<f64>>> {
    let mode = x_bar.layout().mode;
    let sys = dynamics::assemble(config, gains, mode)?;
    let jac = sys.jacobian(x_bar)?;
    let mut eigs: Vec<Complex<f64>> = jac.complex_eigenvalues().iter().cloned().collect();
    eigs.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
    Ok(eigs)
}

/// Number of eigenvalues with real part above the instability threshold.
pub fn count_unstable(eigs: &[Complex<f64>], threshold: f64) -> usize {
    eigs.iter().filter(|e| e.re > threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium;
    use crate::presets;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn block_test_identity_blocks() {
        let ones = DVector::from_element(3, 1.0);
        let zeros = DVector::zeros(3);
        assert_eq!(
            block_pd_test(&ones, &zeros, &ones),
            Definiteness::PositiveDefinite
        );
    }

    #[test]
    fn block_test_semidefinite_edge() {
        // middle block has det = 0 (A*D = B^2); the rest are PD
        let a = DVector::from_vec(vec![2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![0.5, 1.0, 0.2]);
        let d = DVector::from_vec(vec![2.0, 1.0, 1.0]);
        assert_eq!(
            block_pd_test(&a, &b, &d),
            Definiteness::PositiveSemidefinite
        );
    }

    #[test]
    fn block_test_negative_block_is_indefinite() {
        let a = DVector::from_vec(vec![-1.0, 1.0]);
        let b = DVector::zeros(2);
        let d = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(block_pd_test(&a, &b, &d), Definiteness::Indefinite);
    }

    #[test]
    fn p_is_positive_definite_for_valid_gains() {
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let p = build_p(&config, &gains).unwrap();
        assert_eq!(eigen_definiteness(&p), Definiteness::PositiveDefinite);
        assert_eq!(
            p_block_verdict(&config, &gains),
            Definiteness::PositiveDefinite
        );
    }

    #[test]
    fn p_block_entries_hand_check() {
        // alpha = -1000, beta = -500, gamma = 50000 -> mu = 50000 - 500000
        let d = crate::control::derive_abgd(
            &crate::control::DguGains {
                k1: -1.0,
                k2: -0.8,
                k3: 100.0,
                k4: -2.0,
            },
            0.2,
            0.002,
        )
        .unwrap();
        assert_relative_eq!(d.mu, -450_000.0, max_relative = 1e-12);
        assert_relative_eq!(d.beta / d.mu, 1.0 / 900.0, max_relative = 1e-12);
        assert!(d.beta / d.mu > 0.0);
    }

    #[test]
    fn q_nsd_at_equilibrium_for_certified_config() {
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::solve_equilibrium(&config, &gains).unwrap();
        let q = build_q(&config, &gains, &eq.state.voltage, &eq.state.voltage).unwrap();
        assert_eq!(
            eigen_definiteness(&(-q)),
            Definiteness::PositiveSemidefinite
        );
    }

    #[test]
    fn unit_exponent_kills_exponential_admittance() {
        let load = ZieLoad {
            conductance: 0.4,
            current: 0.0,
            power: 90.0,
            exponent: 1.0,
        };
        for v in [20.0, 48.0, 70.0] {
            assert_abs_diff_eq!(
                exponential_admittance(&load, 48.0, v).unwrap(),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn admittance_limit_matches_closed_form() {
        let load = ZieLoad {
            conductance: 0.5,
            current: 0.0,
            power: 130.0,
            exponent: 0.3,
        };
        let v_bar = 47.3_f64;
        // f(v_bar) = Y - (Pbar/Vbar^2)(1 - r) with Pbar = P* Vbar^r
        let p_bar = load.power * (load.exponent * v_bar.ln()).exp();
        let expected = -(p_bar / (v_bar * v_bar)) * (1.0 - load.exponent);
        assert_relative_eq!(
            exponential_admittance(&load, v_bar, v_bar).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn admittance_secant_converges_to_limit() {
        let load = ZieLoad {
            conductance: 0.5,
            current: 0.0,
            power: 150.0,
            exponent: 0.4,
        };
        let v_bar = 48.0;
        let limit = exponential_admittance(&load, v_bar, v_bar).unwrap();
        let h = 1e-6 * v_bar;
        for v in [v_bar - h, v_bar + h] {
            let secant = exponential_admittance(&load, v_bar, v).unwrap();
            assert_relative_eq!(secant, limit, max_relative = 1e-4);
        }
    }

    #[test]
    fn load_condition_cases() {
        let mk = |y: f64, p: f64, r: f64| {
            let mut config = presets::two_node();
            config.dgus.truncate(1);
            config.lines.clear();
            config.comm.clear();
            config.dgus[0].load = ZieLoad {
                conductance: y,
                current: 0.0,
                power: p,
                exponent: r,
            };
            config
        };
        let v = DVector::from_element(1, 50.0);
        // r = 1: true regardless
        assert!(check_load_condition(&mk(0.0, 5000.0, 1.0), &v).unwrap()[0]);
        // r = 0, Y = 0.5, V = 50: threshold is 1250
        assert!(check_load_condition(&mk(0.5, 1000.0, 0.0), &v).unwrap()[0]);
        assert!(!check_load_condition(&mk(0.5, 1300.0, 0.0), &v).unwrap()[0]);
        // no Z part, r < 1, positive P: never satisfiable
        assert!(!check_load_condition(&mk(0.0, 10.0, 0.0), &v).unwrap()[0]);
    }

    #[test]
    fn full_derivative_matrix_reduces_to_simplified() {
        // Builds the derivative matrix without assuming the gain identity and
        // checks it collapses onto build_q when k4 = k1 - 1. The couplings
        // carry -I + [gamma][mu]^-1 - [alpha][beta][mu]^-1 and
        // [alpha - delta][gamma][mu]^-1 factors, which vanish exactly.
        let config = presets::four_ring_zie();
        let gains = config.gain_set().unwrap();
        let n = config.n();
        let layout = dynamics::StateLayout {
            n,
            m: config.m(),
            mode: ControlMode::Secondary,
        };
        let l_c = crate::network::comm_laplacian(&config.comm_weights()).unwrap();
        let ratings = config.ratings();
        let v_bar = config.v_ref();
        let v = &v_bar * 1.003;
        let damping = damping_profile(&config, &v_bar, &v).unwrap();

        let dim = layout.dim();
        let mut full = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let d = &gains.derived[i];
            let cross = -1.0 + d.gamma / d.mu - d.alpha * d.beta / d.mu;
            let vgain = (d.alpha - d.delta) * d.gamma / d.mu;
            full[(layout.voltage(i), layout.voltage(i))] = 2.0 * damping[i];
            full[(layout.voltage(i), layout.filter_current(i))] = cross;
            full[(layout.filter_current(i), layout.voltage(i))] = cross;
            full[(layout.filter_current(i), layout.filter_current(i))] =
                -2.0 * d.beta * d.beta / d.mu;
            full[(layout.filter_current(i), layout.integrator(i))] =
                -2.0 * d.beta * d.gamma / d.mu;
            full[(layout.integrator(i), layout.filter_current(i))] =
                -2.0 * d.beta * d.gamma / d.mu;
            full[(layout.integrator(i), layout.integrator(i))] = -2.0 * d.gamma * d.gamma / d.mu;
            for j in 0..n {
                let om_j = layout.consensus(j).unwrap();
                let lc_ij = l_c[(i, j)];
                full[(layout.filter_current(i), om_j)] = cross * lc_ij / ratings[i];
                full[(om_j, layout.filter_current(i))] = cross * lc_ij / ratings[i];
                full[(layout.integrator(i), om_j)] = vgain * lc_ij / ratings[i];
                full[(om_j, layout.integrator(i))] = vgain * lc_ij / ratings[i];
            }
        }
        for (l, line) in config.lines.iter().enumerate() {
            full[(layout.line_current(l), layout.line_current(l))] = 2.0 * line.resistance;
        }
        let q_full = full * (-0.5);
        let q_simplified = build_q(&config, &gains, &v_bar, &v).unwrap();
        let scale = q_full.amax();
        assert!(
            (&q_full - &q_simplified).amax() <= 1e-9 * scale,
            "max diff {}",
            (&q_full - &q_simplified).amax()
        );
    }

    #[test]
    fn derivative_matrix_matches_symmetrized_construction() {
        // independent route: Q = sym(P (A + E(V))) where E carries the
        // equivalent exponential-load admittance on the voltage block
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::solve_equilibrium(&config, &gains).unwrap();
        let v_bar = &eq.state.voltage;
        let v = v_bar * 1.0007;

        let sys = dynamics::assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let n = config.n();
        let mut a_eff = sys.a.clone();
        let damping = damping_profile(&config, v_bar, &v).unwrap();
        for i in 0..n {
            // replace the Z-load damping with the full equivalent damping
            let c_inv = 1.0 / config.dgus[i].params.c_t;
            a_eff[(i, i)] = -damping[i] * c_inv;
        }
        let p = build_p(&config, &gains).unwrap();
        let pa = &p * &a_eff;
        let q_sym = (&pa + pa.transpose()) * 0.5;
        let q = build_q(&config, &gains, v_bar, &v).unwrap();
        let scale = q_sym.amax();
        assert!(
            (&q_sym - &q).amax() <= 1e-9 * scale,
            "max diff {} at scale {scale}",
            (&q_sym - &q).amax()
        );
    }

    #[test]
    fn certify_stock_config_locally() {
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::solve_equilibrium(&config, &gains).unwrap();
        let report = certify(&config, &gains, &eq).unwrap();
        assert!(report.gains_ok.iter().all(|&b| b));
        assert!(report.load_ok.iter().all(|&b| b));
        assert!(report.p_pd);
        assert!(report.q_nsd);
        assert_eq!(report.verdict, Verdict::CertifiedLocal);
    }

    #[test]
    fn certify_zero_power_globally() {
        let mut config = presets::four_ring();
        for d in &mut config.dgus {
            d.load.power = 0.0;
        }
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::solve_equilibrium(&config, &gains).unwrap();
        let report = certify(&config, &gains, &eq).unwrap();
        assert_eq!(report.verdict, Verdict::CertifiedGlobal);
    }

    #[test]
    fn certify_rejects_undamped_constant_power() {
        // P load with no Z damping: the load condition fails
        let mut config = presets::four_ring();
        config.dgus[2].load = ZieLoad {
            conductance: 0.0,
            current: 0.0,
            power: 180.0,
            exponent: 0.0,
        };
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::solve_equilibrium(&config, &gains).unwrap();
        let report = certify(&config, &gains, &eq).unwrap();
        assert!(!report.load_ok[2]);
        assert_eq!(report.verdict, Verdict::NotCertified);
    }

    #[test]
    fn invariant_set_condition_fails_for_certified_gains() {
        // the only way a trajectory could stall off-equilibrium would need
        // alpha*beta = gamma; stabilizing gains keep gamma strictly below
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        for d in &gains.derived {
            assert!(d.gamma < d.alpha * d.beta);
            assert!(d.gamma > 0.0);
        }
    }

    #[test]
    fn spectrum_certified_secondary_has_single_zero_mode() {
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::solve_equilibrium(&config, &gains).unwrap();
        let eigs = linearized_spectrum(&config, &gains, &eq.state).unwrap();
        assert_eq!(count_unstable(&eigs, 1e-9), 0);
        let near_zero = eigs.iter().filter(|e| e.norm() <= 1e-6).count();
        assert_eq!(near_zero, 1, "spectrum head: {:?}", &eigs[..4]);
    }

    #[test]
    fn spectrum_primary_only_strictly_stable() {
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let eq = equilibrium::primary_only_equilibrium(&config, &gains).unwrap();
        let eigs = linearized_spectrum(&config, &gains, &eq).unwrap();
        assert!(eigs.iter().all(|e| e.re < -1e-9), "head: {:?}", &eigs[..3]);
    }
}
