//! Steady-state analysis: the primary-only equilibrium, the constrained DC
//! power-flow map, the contraction fixed-point solver for constant-power
//! loads with its existence certificate, a damped-Newton fallback for general
//! exponents, and full-state reconstruction.
//!
//! A steady state under secondary control requires a voltage profile solving
//!
//! ```text
//! L_e V + L_t [I_s]^-1 (V^(r-1) P* + Ibar + Y_L V) = 0      (power flow)
//! 1^T [I_s] V = 1^T [I_s] V_ref                             (weighted balance)
//! ```
//!
//! For r = 0 the pair collapses to the stacked linear-plus-reciprocal system
//! `Ltilde V = Itilde - Ltilde_t [V^-1] P*` with `Ltilde` of full column rank,
//! which the fixed-point solver attacks through the change of variables
//! `x = [V*]^-1 V - 1`.

use nalgebra::{DMatrix, DVector};

use crate::config::MicrogridConfig;
use crate::control::GainSet;
use crate::dynamics::{self, ControlMode, SystemState};
use crate::error::{Error, Result};
use crate::network::{self, RANK_TOL};

/// Existence/uniqueness certificate for constant-power operation.
///
/// `delta` is the contraction parameter; when it is below one, the unique
/// solution lies in the box `(1 - delta_minus) V* <= V <= (1 + delta_minus) V*`
/// and the surrounding region up to `(1 - delta_plus) V*` holds no solution.
#[derive(Debug, Clone)]
pub struct ExistenceCertificate {
    pub v_star: DVector<f64>,
    pub p_cri: DMatrix<f64>,
    pub delta: f64,
    pub delta_minus: Option<f64>,
    pub delta_plus: Option<f64>,
    pub feasible: bool,
}

impl ExistenceCertificate {
    /// Componentwise bounds of the guaranteed-solution box, when feasible.
    pub fn h_box(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let dm = self.delta_minus?;
        Some((&self.v_star * (1.0 - dm), &self.v_star * (1.0 + dm)))
    }
}

/// Which of the characterized voltage regions a vector falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetMembership {
    /// Inside the guaranteed-solution box.
    InH,
    /// Above the low-voltage cutoff but outside the box: no solutions here.
    InI,
    /// At or below the low-voltage cutoff: no solutions here either.
    InJ,
    /// Not componentwise comparable to the box bounds; nothing is claimed.
    Outside,
}

/// Full reconstructed equilibrium and its diagnostics.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub state: SystemState,
    /// Common sharing ratio: filter currents are `epsilon * [I_s] 1`.
    pub epsilon: f64,
    /// Max-norm residual of the power-flow equation at the solved voltages.
    pub residual_power_flow: f64,
    /// Residual of the weighted balance constraint.
    pub residual_balance: f64,
}

/// The stacked constrained power-flow matrices `(Ltilde, Itilde, Ltilde_t)`.
pub fn stacked_power_flow(
    config: &MicrogridConfig,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let n = config.n();
    let topo = config.topology();
    let b = network::incidence_matrix(&topo)?;
    let l_e = network::electrical_laplacian(&b, &config.line_resistances())?;
    let l_t = network::sharing_projector(&config.ratings())?;
    let ratings = config.ratings();

    // L_t [I_s]^-1 as a reusable block
    let mut lt_is_inv = l_t.clone();
    for j in 0..n {
        let s = 1.0 / ratings[j];
        lt_is_inv.column_mut(j).scale_mut(s);
    }

    // L_p = L_e + L_t [I_s]^-1 Y_L
    let y = config.load_conductances();
    let mut l_p = l_e;
    for j in 0..n {
        for i in 0..n {
            l_p[(i, j)] += lt_is_inv[(i, j)] * y[j];
        }
    }

    let mut l_tilde = DMatrix::zeros(n + 1, n);
    l_tilde.view_mut((0, 0), (n, n)).copy_from(&l_p);
    for j in 0..n {
        l_tilde[(n, j)] = ratings[j];
    }

    let i_bar = config.load_currents();
    let mut i_tilde = DVector::zeros(n + 1);
    let head = -(&lt_is_inv * i_bar);
    i_tilde.rows_mut(0, n).copy_from(&head);
    i_tilde[n] = config
        .ratings()
        .iter()
        .zip(config.v_ref().iter())
        .map(|(&s, &v)| s * v)
        .sum();

    let mut l_tilde_t = DMatrix::zeros(n + 1, n);
    l_tilde_t.view_mut((0, 0), (n, n)).copy_from(&lt_is_inv);

    Ok((l_tilde, i_tilde, l_tilde_t))
}

/// Left pseudo-inverse `(L^T L)^-1 L^T` of a tall full-column-rank matrix.
pub fn pseudo_inverse_tall(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.ncols();
    if network::numerical_rank(l) != n {
        return Err(Error::SingularMap(format!(
            "matrix of shape {}x{} is column-rank deficient",
            l.nrows(),
            n
        )));
    }
    let gram = l.transpose() * l;
    let lu = gram.lu();
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::SingularMap("Gram matrix not invertible".into()))?;
    Ok(inv * l.transpose())
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via eigendecomposition,
/// dropping eigenvalues below `RANK_TOL` relative to the largest magnitude.
pub fn symmetric_pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .map(|e| e.abs())
        .fold(0.0_f64, f64::max);
    let mut out = DMatrix::zeros(n, n);
    if max == 0.0 {
        return out;
    }
    for k in 0..n {
        let ev = eig.eigenvalues[k];
        if ev.abs() <= RANK_TOL * max {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        out += (&u * u.transpose()) / ev;
    }
    out
}

/// Builds the existence certificate for a constant-power configuration.
///
/// `V* = Ltilde^+ Itilde` is the exact solution at zero power;
/// `P_cri = 4 [V*]^-1 Ltilde^+ Ltilde_t [V*]^-1` measures voltage sensitivity
/// to power absorption, and `delta = ||P_cri [P*]||_inf` (induced norm) gates
/// the contraction argument.
pub fn certificate(config: &MicrogridConfig) -> Result<ExistenceCertificate> {
    for (i, dgu) in config.dgus.iter().enumerate() {
        if !dgu.load.is_zip() {
            return Err(Error::NonZipLoad {
                node: i,
                exponent: dgu.load.exponent,
            });
        }
    }
    if !config.topology().electrical_connected() {
        return Err(Error::Disconnected { graph: "electrical" });
    }
    let n = config.n();
    let (l_tilde, i_tilde, l_tilde_t) = stacked_power_flow(config)?;
    let pinv = pseudo_inverse_tall(&l_tilde)
        .map_err(|_| Error::SingularMap("constrained power-flow map singular".into()))?;
    let v_star = &pinv * &i_tilde;

    let v_scale = v_star.amax();
    for i in 0..n {
        if v_star[i].abs() <= 1e-12 * v_scale.max(1.0) {
            return Err(Error::SingularMap(format!(
                "V*[{i}] = {}; [V*] not invertible",
                v_star[i]
            )));
        }
    }

    // P_cri = 4 [V*]^-1 pinv Ltilde_t [V*]^-1
    let mut p_cri = &pinv * &l_tilde_t;
    for j in 0..n {
        for i in 0..n {
            p_cri[(i, j)] *= 4.0 / (v_star[i] * v_star[j]);
        }
    }

    let p_star = config.load_powers();
    let delta = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (p_cri[(i, j)] * p_star[j]).abs())
                .sum::<f64>()
        })
        .fold(0.0_f64, f64::max);

    let feasible = delta < 1.0;
    let (delta_minus, delta_plus) = if feasible {
        let root = (1.0 - delta).sqrt();
        (Some((1.0 - root) / 2.0), Some((1.0 + root) / 2.0))
    } else {
        (None, None)
    };

    Ok(ExistenceCertificate {
        v_star,
        p_cri,
        delta,
        delta_minus,
        delta_plus,
        feasible,
    })
}

/// Classifies a voltage vector against the certificate's regions.
pub fn membership(v: &DVector<f64>, cert: &ExistenceCertificate) -> Result<SetMembership> {
    if !cert.feasible {
        return Err(Error::Infeasible { delta: cert.delta });
    }
    let dm = cert.delta_minus.expect("feasible certificate");
    let dp = cert.delta_plus.expect("feasible certificate");
    let n = cert.v_star.len();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            what: "voltage vector",
            expected: n,
            got: v.len(),
        });
    }
    let in_h = (0..n).all(|i| {
        v[i] >= (1.0 - dm) * cert.v_star[i] && v[i] <= (1.0 + dm) * cert.v_star[i]
    });
    if in_h {
        return Ok(SetMembership::InH);
    }
    if (0..n).all(|i| v[i] > (1.0 - dp) * cert.v_star[i]) {
        return Ok(SetMembership::InI);
    }
    if (0..n).all(|i| v[i] <= (1.0 - dp) * cert.v_star[i]) {
        return Ok(SetMembership::InJ);
    }
    Ok(SetMembership::Outside)
}

/// Solves the constant-power flow by the contraction iteration
/// `x <- -(1/4) P_cri [P*] r(x)`, `r(x)_i = 1/(1+x_i)`, starting from x = 0.
///
/// Returns the voltage solution `V = [V*](1 + x)` and the iteration count.
/// Refuses infeasible certificates; reports divergence if an iterate ever
/// leaves the contraction box.
pub fn solve_zip_fixed_point(
    config: &MicrogridConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let cert = certificate(config)?;
    if !cert.feasible {
        return Err(Error::Infeasible { delta: cert.delta });
    }
    let dm = cert.delta_minus.expect("feasible certificate");
    let n = config.n();
    let p_star = config.load_powers();
    // column-scaled map -(1/4) P_cri [P*]
    let mut map = cert.p_cri.clone();
    for j in 0..n {
        map.column_mut(j).scale_mut(-0.25 * p_star[j]);
    }

    let mut x = DVector::zeros(n);
    let mut r = DVector::zeros(n);
    for k in 1..=max_iter {
        for i in 0..n {
            r[i] = 1.0 / (1.0 + x[i]);
        }
        let x_next = &map * &r;
        let gap = (&x_next - &x).amax();
        if x_next.amax() > dm + 1e-12 {
            return Err(Error::IterationDiverged { iteration: k });
        }
        x = x_next;
        if gap <= tol {
            let v = DVector::from_iterator(
                n,
                x.iter()
                    .zip(cert.v_star.iter())
                    .map(|(&xi, &vs)| vs * (1.0 + xi)),
            );
            return Ok((v, k));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_residual: f64::NAN,
        residual_history: vec![],
    })
}

/// Stacked residual of the power-flow and balance equations at `v`, for any
/// exponent vector. The first N entries are amperes, the last is volt-amperes.
pub fn power_flow_residual(config: &MicrogridConfig, v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = config.n();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            what: "voltage vector",
            expected: n,
            got: v.len(),
        });
    }
    let topo = config.topology();
    let b = network::incidence_matrix(&topo)?;
    let l_e = network::electrical_laplacian(&b, &config.line_resistances())?;
    let l_t = network::sharing_projector(&config.ratings())?;
    let ratings = config.ratings();

    let mut load = DVector::zeros(n);
    for (i, dgu) in config.dgus.iter().enumerate() {
        load[i] = dgu.load.load_current(v[i]).map_err(|_| Error::VoltageDomain {
            node: i,
            value: v[i],
        })? / ratings[i];
    }
    let head = &l_e * v + &l_t * load;
    let mut res = DVector::zeros(n + 1);
    res.rows_mut(0, n).copy_from(&head);
    res[n] = ratings
        .iter()
        .zip(v.iter().zip(config.v_ref().iter()))
        .map(|(&s, (&vi, &vr))| s * (vi - vr))
        .sum();
    Ok(res)
}

/// Natural magnitude for power-flow residual tolerances.
pub fn power_flow_scale(config: &MicrogridConfig) -> f64 {
    let weighted: f64 = config
        .ratings()
        .iter()
        .zip(config.v_ref().iter())
        .map(|(&s, &v)| s * v)
        .sum();
    weighted.abs().max(1.0)
}

/// Damped Gauss-Newton iteration on the stacked residual, for general load
/// exponents. Steps are halved (up to 30 times) until the residual decreases
/// and every voltage stays positive; acceptance requires the max-norm
/// residual to drop below `tol` times the problem scale.
pub fn solve_zie_newton(
    config: &MicrogridConfig,
    v_init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let n = config.n();
    if v_init.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial voltages",
            expected: n,
            got: v_init.len(),
        });
    }
    for i in 0..n {
        if !(v_init[i] > 0.0) {
            return Err(Error::VoltageDomain {
                node: i,
                value: v_init[i],
            });
        }
    }
    let scale = power_flow_scale(config);
    let topo = config.topology();
    let b = network::incidence_matrix(&topo)?;
    let l_e = network::electrical_laplacian(&b, &config.line_resistances())?;
    let l_t = network::sharing_projector(&config.ratings())?;
    let ratings = config.ratings();

    // L_t [I_s]^-1
    let mut lt_is_inv = l_t;
    for j in 0..n {
        let s = 1.0 / ratings[j];
        lt_is_inv.column_mut(j).scale_mut(s);
    }

    let mut v = v_init.clone();
    let mut res = power_flow_residual(config, &v)?;
    let mut history = vec![res.amax()];

    for k in 1..=max_iter {
        if res.amax() <= tol * scale {
            return Ok((v, k - 1));
        }
        // Jacobian: [L_e + L_t [I_s]^-1 (Y_L + dI_E/dV); 1^T [I_s]]
        let mut jac = DMatrix::zeros(n + 1, n);
        let mut head = l_e.clone();
        for j in 0..n {
            let di = config.dgus[j]
                .load
                .incremental_admittance(v[j])
                .map_err(|_| Error::VoltageDomain {
                    node: j,
                    value: v[j],
                })?;
            for i in 0..n {
                head[(i, j)] += lt_is_inv[(i, j)] * di;
            }
        }
        jac.view_mut((0, 0), (n, n)).copy_from(&head);
        for j in 0..n {
            jac[(n, j)] = ratings[j];
        }

        // least-squares step: minimize ||jac s + res||
        let gram = jac.transpose() * &jac;
        let rhs = jac.transpose() * &res;
        let step = gram.lu().solve(&rhs).ok_or_else(|| {
            Error::SingularMap("Newton normal equations singular".into())
        })?;

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &v - &step * t;
            if trial.iter().all(|&vi| vi > 0.0) {
                if let Ok(trial_res) = power_flow_residual(config, &trial) {
                    if trial_res.amax() < res.amax() {
                        v = trial;
                        res = trial_res;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        history.push(res.amax());
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: k,
                last_residual: res.amax(),
                residual_history: history,
            });
        }
    }
    if res.amax() <= tol * scale {
        if v.iter().any(|&vi| !(vi > 0.0)) {
            return Err(Error::SingularMap(
                "Newton converged to a non-positive voltage component".into(),
            ));
        }
        return Ok((v, max_iter));
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_residual: res.amax(),
        residual_history: history,
    })
}

/// The unique primary-only stationary point: every PC at its reference.
pub fn primary_only_equilibrium(config: &MicrogridConfig, gains: &GainSet) -> Result<SystemState> {
    let closed = vec![true; config.m()];
    primary_equilibrium_effective(config, gains, &closed, None)
}

/// Primary-only stationary point of an arbitrary switch configuration; used
/// to initialize simulations and to seed joining DGUs. With `loads` you can
/// supply the live load set; `None` uses the configured loads.
pub(crate) fn primary_equilibrium_effective(
    config: &MicrogridConfig,
    gains: &GainSet,
    line_closed: &[bool],
    loads: Option<&[crate::loads::ZieLoad]>,
) -> Result<SystemState> {
    let n = config.n();
    let m = config.m();
    let v_ref = config.v_ref();
    for i in 0..n {
        if !(v_ref[i] > 0.0) {
            return Err(Error::VoltageDomain {
                node: i,
                value: v_ref[i],
            });
        }
    }
    let default_loads = config.loads();
    let loads = loads.unwrap_or(&default_loads);

    // line currents (V_from - V_to)/R on closed lines
    let mut line_current = DVector::zeros(m);
    for (l, line) in config.lines.iter().enumerate() {
        if line_closed[l] {
            line_current[l] = (v_ref[line.from] - v_ref[line.to]) / line.resistance;
        }
    }
    // filter currents: local load plus net line export
    let mut filter_current = DVector::zeros(n);
    for i in 0..n {
        let mut injected = 0.0;
        for (l, line) in config.lines.iter().enumerate() {
            if !line_closed[l] {
                continue;
            }
            if line.from == i {
                injected += line_current[l];
            } else if line.to == i {
                injected -= line_current[l];
            }
        }
        filter_current[i] = loads[i]
            .load_current(v_ref[i])
            .map_err(|_| Error::VoltageDomain {
                node: i,
                value: v_ref[i],
            })?
            + injected;
    }
    // integrator: v = -(alpha V_ref + beta I_t)/gamma
    let mut integrator = DVector::zeros(n);
    for i in 0..n {
        let d = &gains.derived[i];
        if d.gamma == 0.0 {
            return Err(Error::InvalidGains(format!("gamma[{i}] = 0")));
        }
        integrator[i] = -(d.alpha * v_ref[i] + d.beta * filter_current[i]) / d.gamma;
    }
    Ok(SystemState {
        voltage: v_ref,
        filter_current,
        integrator,
        line_current,
        consensus: None,
    })
}

/// Reconstructs the full secondary-control equilibrium from a solved voltage
/// profile and verifies the vector field vanishes there.
pub fn reconstruct_full(
    config: &MicrogridConfig,
    gains: &GainSet,
    v_bar: &DVector<f64>,
) -> Result<EquilibriumSolution> {
    let n = config.n();
    let res = power_flow_residual(config, v_bar)?;
    let scale = power_flow_scale(config);
    let residual_power_flow = res.rows(0, n).amax();
    let residual_balance = res[n].abs();
    let gate = 1e-6 * scale;
    if residual_power_flow > gate || residual_balance > gate {
        return Err(Error::ResidualTooLarge {
            residual: residual_power_flow.max(residual_balance),
            tolerance: gate,
        });
    }

    let ratings = config.ratings();
    let v_ref = config.v_ref();

    // epsilon and the proportional filter currents
    let mut total_load = 0.0;
    for (i, dgu) in config.dgus.iter().enumerate() {
        total_load += dgu.load.load_current(v_bar[i]).map_err(|_| Error::VoltageDomain {
            node: i,
            value: v_bar[i],
        })?;
    }
    let epsilon = total_load / ratings.sum();
    let filter_current = &ratings * epsilon;

    // line currents from the voltage differences
    let m = config.m();
    let mut line_current = DVector::zeros(m);
    for (l, line) in config.lines.iter().enumerate() {
        line_current[l] = (v_bar[line.from] - v_bar[line.to]) / line.resistance;
    }

    // Omega from the pseudo-inverse of the communication Laplacian; the
    // zero-mean representative is the one a zero-initialized run converges to
    let l_c = network::comm_laplacian(&config.comm_weights())?;
    let weighted_gap = DVector::from_iterator(
        n,
        ratings
            .iter()
            .zip(v_ref.iter().zip(v_bar.iter()))
            .map(|(&s, (&vr, &vb))| s * (vr - vb)),
    );
    let omega_bar = symmetric_pseudo_inverse(&l_c) * weighted_gap;

    // integrator states: gamma v = (delta - alpha) V - delta V_ref - beta I_t
    let mut integrator = DVector::zeros(n);
    for i in 0..n {
        let d = &gains.derived[i];
        if d.gamma == 0.0 {
            return Err(Error::InvalidGains(format!("gamma[{i}] = 0")));
        }
        integrator[i] = ((d.delta - d.alpha) * v_bar[i]
            - d.delta * v_ref[i]
            - d.beta * filter_current[i])
            / d.gamma;
    }

    let state = SystemState {
        voltage: v_bar.clone(),
        filter_current,
        integrator,
        line_current,
        consensus: Some(omega_bar),
    };

    let sys = dynamics::assemble(config, gains, ControlMode::Secondary)?;
    let x = state.stack();
    let mut xdot = DVector::zeros(sys.layout.dim());
    sys.vector_field_into(&x, &mut xdot)
        .map_err(|node| Error::VoltageDomain {
            node,
            value: x[node],
        })?;
    let term_scale = sys.term_scale(&x);
    let field_residual = xdot.amax();
    if field_residual > 1e-8 * term_scale {
        return Err(Error::ResidualTooLarge {
            residual: field_residual,
            tolerance: 1e-8 * term_scale,
        });
    }

    Ok(EquilibriumSolution {
        state,
        epsilon,
        residual_power_flow,
        residual_balance,
    })
}

/// Convenience: solve for the steady-state voltages with the configured
/// solver settings, choosing the fixed point for ZIP loads and Newton
/// otherwise, then reconstruct the full state.
pub fn solve_equilibrium(config: &MicrogridConfig, gains: &GainSet) -> Result<EquilibriumSolution> {
    let settings = config.solver;
    let v_bar = if config.all_zip() {
        solve_zip_fixed_point(config, settings.fixed_point_tol, settings.max_iter)?.0
    } else {
        solve_zie_newton(config, &config.v_ref(), settings.newton_tol, settings.max_iter)?.0
    };
    reconstruct_full(config, gains, &v_bar)
}
