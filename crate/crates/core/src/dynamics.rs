//! Closed-loop state-space assembly and vector-field evaluation.
//!
//! The stacked state is X = (V, I_t, v, I, Omega) of dimension 4N+M under
//! secondary control, or (V, I_t, v, I) of dimension 3N+M when the consensus
//! layer is absent. The dynamics split as `dX/dt = A X + b(V)` where `b`
//! collects the load constants, the exponential-load current, and the voltage
//! references. `A` is stored dense; the systems this toolkit targets are
//! desk-scale and the definiteness checks need dense algebra anyway.

use nalgebra::{DMatrix, DVector};

use crate::config::MicrogridConfig;
use crate::control::GainSet;
use crate::error::{Error, Result};
use crate::loads::ZieLoad;
use crate::network;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Secondary,
    PrimaryOnly,
}

/// Index layout of the stacked state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub m: usize,
    pub mode: ControlMode,
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        match self.mode {
            ControlMode::Secondary => 4 * self.n + self.m,
            ControlMode::PrimaryOnly => 3 * self.n + self.m,
        }
    }

    pub fn voltage(&self, i: usize) -> usize {
        i
    }

    pub fn filter_current(&self, i: usize) -> usize {
        self.n + i
    }

    pub fn integrator(&self, i: usize) -> usize {
        2 * self.n + i
    }

    pub fn line_current(&self, l: usize) -> usize {
        3 * self.n + l
    }

    pub fn consensus(&self, i: usize) -> Option<usize> {
        match self.mode {
            ControlMode::Secondary => Some(3 * self.n + self.m + i),
            ControlMode::PrimaryOnly => None,
        }
    }
}

/// Stacked system state with named components.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub voltage: DVector<f64>,
    pub filter_current: DVector<f64>,
    pub integrator: DVector<f64>,
    pub line_current: DVector<f64>,
    /// Consensus integrator Omega; `None` in primary-only mode.
    pub consensus: Option<DVector<f64>>,
}

impl SystemState {
    pub fn layout(&self) -> StateLayout {
        StateLayout {
            n: self.voltage.len(),
            m: self.line_current.len(),
            mode: if self.consensus.is_some() {
                ControlMode::Secondary
            } else {
                ControlMode::PrimaryOnly
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn stack(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut x = DVector::zeros(layout.dim());
        x.rows_mut(0, layout.n).copy_from(&self.voltage);
        x.rows_mut(layout.n, layout.n).copy_from(&self.filter_current);
        x.rows_mut(2 * layout.n, layout.n).copy_from(&self.integrator);
        x.rows_mut(3 * layout.n, layout.m).copy_from(&self.line_current);
        if let Some(omega) = &self.consensus {
            x.rows_mut(3 * layout.n + layout.m, layout.n).copy_from(omega);
        }
        x
    }

    pub fn from_flat(layout: StateLayout, x: &DVector<f64>) -> Result<Self> {
        if x.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                what: "stacked state",
                expected: layout.dim(),
                got: x.len(),
            });
        }
        let n = layout.n;
        let m = layout.m;
        Ok(Self {
            voltage: x.rows(0, n).into_owned(),
            filter_current: x.rows(n, n).into_owned(),
            integrator: x.rows(2 * n, n).into_owned(),
            line_current: x.rows(3 * n, m).into_owned(),
            consensus: match layout.mode {
                ControlMode::Secondary => Some(x.rows(3 * n + m, n).into_owned()),
                ControlMode::PrimaryOnly => None,
            },
        })
    }
}

/// The assembled closed-loop system `dX/dt = A X + b(V)`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub layout: StateLayout,
    pub a: DMatrix<f64>,
    c_t_inv: DVector<f64>,
    i_const: DVector<f64>,
    p_star: DVector<f64>,
    exponent: DVector<f64>,
    v_ref: DVector<f64>,
}

impl AssembledSystem {
    /// State-dependent affine term b(V).
    pub fn b_of(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.layout.n;
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                what: "voltage vector",
                expected: n,
                got: v.len(),
            });
        }
        let mut b = DVector::zeros(self.layout.dim());
        for i in 0..n {
            let vi = v[i];
            if !(vi > 0.0) {
                return Err(Error::VoltageDomain { node: i, value: vi });
            }
            b[i] = -self.c_t_inv[i] * (self.i_const[i] + self.e_load_current(i, vi));
            b[2 * n + i] = self.v_ref[i];
        }
        Ok(b)
    }

    #[inline]
    fn e_load_current(&self, i: usize, v: f64) -> f64 {
        if self.p_star[i] == 0.0 {
            0.0
        } else {
            ((self.exponent[i] - 1.0) * v.ln()).exp() * self.p_star[i]
        }
    }

    /// Evaluates `out = A x + b(V)` without allocating. Returns the offending
    /// node index if any PC voltage is outside the V > 0 domain.
    pub fn vector_field_into(
        &self,
        x: &DVector<f64>,
        out: &mut DVector<f64>,
    ) -> std::result::Result<(), usize> {
        let n = self.layout.n;
        let dim = self.layout.dim();
        debug_assert_eq!(x.len(), dim);
        debug_assert_eq!(out.len(), dim);
        for i in 0..n {
            if !(x[i] > 0.0) {
                return Err(i);
            }
        }
        let o = out.as_mut_slice();
        o.fill(0.0);
        let a = self.a.as_slice();
        let xs = x.as_slice();
        // column-major axpy accumulation; zero state entries contribute
        // nothing and are skipped
        for (j, &xj) in xs.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let col = &a[j * dim..(j + 1) * dim];
            for i in 0..dim {
                o[i] += col[i] * xj;
            }
        }
        for i in 0..n {
            o[i] -= self.c_t_inv[i] * (self.i_const[i] + self.e_load_current(i, xs[i]));
            o[2 * n + i] += self.v_ref[i];
        }
        Ok(())
    }

    /// `dX/dt` at the given state.
    pub fn vector_field(&self, state: &SystemState) -> Result<SystemState> {
        let x = state.stack();
        let mut out = DVector::zeros(self.layout.dim());
        self.vector_field_into(&x, &mut out)
            .map_err(|node| Error::VoltageDomain {
                node,
                value: x[node],
            })?;
        SystemState::from_flat(self.layout, &out)
    }

    /// Linearization `A + dB/dX`: only the (V, V) diagonal gains the term
    /// `-C_t^-1 (r-1) V^(r-2) P*`.
    pub fn jacobian(&self, state: &SystemState) -> Result<DMatrix<f64>> {
        let n = self.layout.n;
        let mut jac = self.a.clone();
        for i in 0..n {
            let vi = state.voltage[i];
            if !(vi > 0.0) {
                return Err(Error::VoltageDomain { node: i, value: vi });
            }
            if self.p_star[i] != 0.0 {
                let r = self.exponent[i];
                let dexp = (r - 1.0) * ((r - 2.0) * vi.ln()).exp() * self.p_star[i];
                jac[(i, i)] -= self.c_t_inv[i] * dexp;
            }
        }
        Ok(jac)
    }

    /// Magnitude of the terms that cancel in `A x + b(V)`; the natural scale
    /// for equilibrium-residual tolerances.
    pub fn term_scale(&self, x: &DVector<f64>) -> f64 {
        let dim = self.layout.dim();
        let n = self.layout.n;
        let mut acc: DVector<f64> = DVector::zeros(dim);
        for j in 0..dim {
            let xj = x[j].abs();
            if xj == 0.0 {
                continue;
            }
            for i in 0..dim {
                acc[i] += self.a[(i, j)].abs() * xj;
            }
        }
        for i in 0..n {
            let vi = x[i];
            if vi > 0.0 {
                acc[i] += self.c_t_inv[i] * (self.i_const[i].abs() + self.e_load_current(i, vi).abs());
            }
            acc[2 * n + i] += self.v_ref[i].abs();
        }
        acc.amax().max(1.0)
    }
}

/// Assembles the closed-loop system over the full configured topology.
///
/// In secondary mode the communication graph must be connected; primary-only
/// assembly carries no consensus blocks.
pub fn assemble(config: &MicrogridConfig, gains: &GainSet, mode: ControlMode) -> Result<AssembledSystem> {
    let n = config.n();
    if gains.len() != n {
        return Err(Error::DimensionMismatch {
            what: "gain set",
            expected: n,
            got: gains.len(),
        });
    }
    let l_c = match mode {
        ControlMode::Secondary => Some(network::comm_laplacian(&config.comm_weights())?),
        ControlMode::PrimaryOnly => None,
    };
    let line_closed = vec![true; config.m()];
    build_system(config, gains, mode, &line_closed, l_c.as_ref(), &config.loads())
}

/// Assembles the secondary-layout system for a specific runtime topology:
/// open lines have their row and column zeroed, and `l_c_eff` is the
/// Laplacian of the currently active communication links (possibly zero).
pub fn assemble_effective(
    config: &MicrogridConfig,
    gains: &GainSet,
    line_closed: &[bool],
    l_c_eff: &DMatrix<f64>,
    loads: &[ZieLoad],
) -> Result<AssembledSystem> {
    build_system(
        config,
        gains,
        ControlMode::Secondary,
        line_closed,
        Some(l_c_eff),
        loads,
    )
}

/// Primary-only assembly on a specific switch topology with live loads.
pub fn assemble_primary_effective(
    config: &MicrogridConfig,
    gains: &GainSet,
    line_closed: &[bool],
    loads: &[ZieLoad],
) -> Result<AssembledSystem> {
    build_system(
        config,
        gains,
        ControlMode::PrimaryOnly,
        line_closed,
        None,
        loads,
    )
}

fn build_system(
    config: &MicrogridConfig,
    gains: &GainSet,
    mode: ControlMode,
    line_closed: &[bool],
    l_c: Option<&DMatrix<f64>>,
    loads: &[ZieLoad],
) -> Result<AssembledSystem> {
    let n = config.n();
    let m = config.m();
    if line_closed.len() != m {
        return Err(Error::DimensionMismatch {
            what: "line switch states",
            expected: m,
            got: line_closed.len(),
        });
    }
    if loads.len() != n {
        return Err(Error::DimensionMismatch {
            what: "loads",
            expected: n,
            got: loads.len(),
        });
    }
    let layout = StateLayout { n, m, mode };
    let dim = layout.dim();
    let ratings = config.ratings();
    let mut a = DMatrix::zeros(dim, dim);

    for i in 0..n {
        let p = &config.dgus[i].params;
        let d = &gains.derived[i];
        let c_inv = 1.0 / p.c_t;
        // V-row
        a[(layout.voltage(i), layout.voltage(i))] = -loads[i].conductance * c_inv;
        a[(layout.voltage(i), layout.filter_current(i))] = c_inv;
        // I_t-row
        a[(layout.filter_current(i), layout.voltage(i))] = d.alpha;
        a[(layout.filter_current(i), layout.filter_current(i))] = d.beta;
        a[(layout.filter_current(i), layout.integrator(i))] = d.gamma;
        // v-row
        a[(layout.integrator(i), layout.voltage(i))] = -1.0;
    }

    for (l, line) in config.lines.iter().enumerate() {
        if !line_closed[l] {
            continue;
        }
        let c_from = 1.0 / config.dgus[line.from].params.c_t;
        let c_to = 1.0 / config.dgus[line.to].params.c_t;
        let l_inv = 1.0 / line.inductance;
        // V-rows: -C_t^-1 B
        a[(layout.voltage(line.from), layout.line_current(l))] = -c_from;
        a[(layout.voltage(line.to), layout.line_current(l))] = c_to;
        // I-row: L^-1 B^T and -L^-1 R
        a[(layout.line_current(l), layout.voltage(line.from))] = l_inv;
        a[(layout.line_current(l), layout.voltage(line.to))] = -l_inv;
        a[(layout.line_current(l), layout.line_current(l))] = -line.resistance * l_inv;
    }

    if let Some(l_c) = l_c {
        if l_c.nrows() != n || l_c.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "communication Laplacian",
                expected: n,
                got: l_c.nrows(),
            });
        }
        for i in 0..n {
            let d = &gains.derived[i];
            let om_i = layout.consensus(i).expect("secondary layout");
            for j in 0..n {
                let lc_ij = l_c[(i, j)];
                if lc_ij == 0.0 {
                    continue;
                }
                let om_j = layout.consensus(j).expect("secondary layout");
                // I_t-row: [delta][I_s]^-1 L_c
                a[(layout.filter_current(i), om_j)] = d.delta * lc_ij / ratings[i];
                // v-row: -[I_s]^-1 L_c
                a[(layout.integrator(i), om_j)] = -lc_ij / ratings[i];
                // Omega-row: L_c [I_s]^-1
                a[(om_i, layout.filter_current(j))] = lc_ij / ratings[j];
            }
        }
    }

    Ok(AssembledSystem {
        layout,
        a,
        c_t_inv: DVector::from_iterator(n, config.dgus.iter().map(|d| 1.0 / d.params.c_t)),
        i_const: DVector::from_iterator(n, loads.iter().map(|l| l.current)),
        p_star: DVector::from_iterator(n, loads.iter().map(|l| l.power)),
        exponent: DVector::from_iterator(n, loads.iter().map(|l| l.exponent)),
        v_ref: config.v_ref(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;

    fn single_dgu_config() -> MicrogridConfig {
        let mut config = presets::two_node();
        config.dgus.truncate(1);
        config.lines.clear();
        config.comm.clear();
        config
    }

    #[test]
    fn single_dgu_primary_only_matrix() {
        let config = single_dgu_config();
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::PrimaryOnly).unwrap();
        let p = &config.dgus[0].params;
        let d = &gains.derived[0];
        let y = config.dgus[0].load.conductance;
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                -y / p.c_t,
                1.0 / p.c_t,
                0.0,
                d.alpha,
                d.beta,
                d.gamma,
                -1.0,
                0.0,
                0.0,
            ],
        );
        assert_abs_diff_eq!(sys.a, expected, epsilon = 1e-12);
    }

    #[test]
    fn secondary_with_zero_omega_matches_primary_only() {
        // with Omega = 0 the consensus-coupled columns contribute nothing
        let config = presets::two_node();
        let gains = config.gain_set().unwrap();
        let sec = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let pri = assemble(&config, &gains, ControlMode::PrimaryOnly).unwrap();

        let state_pri = SystemState {
            voltage: DVector::from_vec(vec![48.0, 47.5]),
            filter_current: DVector::from_vec(vec![20.0, 18.0]),
            integrator: DVector::from_vec(vec![0.1, -0.2]),
            line_current: DVector::from_vec(vec![1.5]),
            consensus: None,
        };
        let mut state_sec = state_pri.clone();
        state_sec.consensus = Some(DVector::zeros(2));

        let f_sec = sec.vector_field(&state_sec).unwrap();
        let f_pri = pri.vector_field(&state_pri).unwrap();
        assert_eq!(f_sec.voltage, f_pri.voltage);
        assert_eq!(f_sec.filter_current, f_pri.filter_current);
        assert_eq!(f_sec.integrator, f_pri.integrator);
        assert_eq!(f_sec.line_current, f_pri.line_current);
        // Omega rate is driven by the weighted-current disagreement only
        let omega_dot = f_sec.consensus.unwrap();
        let ratings = config.ratings();
        let w = DVector::from_iterator(
            2,
            state_sec
                .filter_current
                .iter()
                .zip(ratings.iter())
                .map(|(&i, &s)| i / s),
        );
        let l_c = crate::network::comm_laplacian(&config.comm_weights()).unwrap();
        assert_abs_diff_eq!(omega_dot, &l_c * w, epsilon = 1e-12);
    }

    #[test]
    fn line_coupling_conserves_injected_current() {
        // 1^T B = 0: the line current enters one V-equation with +1/C and
        // leaves the other with -1/C; weighting by C_t recovers zero net sum.
        let config = presets::two_node();
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let col = sys.layout.line_current(0);
        let c_t = config.c_t();
        let total: f64 = (0..2).map(|i| sys.a[(i, col)] * c_t[i]).sum();
        assert_abs_diff_eq!(total, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn component_wise_oracle_matches_matrix_evaluation() {
        // per-node/per-line evaluation of the physical equations against A x + b
        let config = presets::four_ring();
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let n = config.n();
        let m = config.m();

        let state = SystemState {
            voltage: DVector::from_vec(vec![48.3, 47.1, 48.9, 47.7]),
            filter_current: DVector::from_vec(vec![22.0, 15.0, 30.0, 9.0]),
            integrator: DVector::from_vec(vec![0.05, -0.04, 0.08, 0.01]),
            line_current: DVector::from_vec(vec![2.0, -1.0, 0.5, 1.2]),
            consensus: Some(DVector::from_vec(vec![0.6, -0.2, -0.3, -0.1])),
        };
        let f = sys.vector_field(&state).unwrap();

        let ratings = config.ratings();
        let l_c = crate::network::comm_laplacian(&config.comm_weights()).unwrap();
        let omega = state.consensus.as_ref().unwrap();
        let (omega_dot, injection) = crate::control::consensus_rhs(
            &state.filter_current,
            omega,
            &l_c,
            &ratings,
        )
        .unwrap();

        let mut scale = 0.0_f64;
        for i in 0..n {
            let p = &config.dgus[i].params;
            let d = &gains.derived[i];
            let load = &config.dgus[i].load;
            let v = state.voltage[i];
            let mut injected = 0.0;
            for (l, line) in config.lines.iter().enumerate() {
                let b_il = if line.from == i {
                    1.0
                } else if line.to == i {
                    -1.0
                } else {
                    0.0
                };
                injected += b_il * state.line_current[l];
            }
            let v_dot = (state.filter_current[i] - load.load_current(v).unwrap() - injected) / p.c_t;
            let it_dot = d.alpha * v
                + d.beta * state.filter_current[i]
                + d.gamma * state.integrator[i]
                + d.delta * injection[i];
            let vi_dot = p.v_ref - v - injection[i];
            scale = scale.max(v_dot.abs()).max(it_dot.abs()).max(vi_dot.abs());
            assert_abs_diff_eq!(f.voltage[i], v_dot, epsilon = 1e-12 * scale.max(1.0));
            assert_abs_diff_eq!(f.filter_current[i], it_dot, epsilon = 1e-12 * scale.max(1.0));
            assert_abs_diff_eq!(f.integrator[i], vi_dot, epsilon = 1e-12 * scale.max(1.0));
        }
        for (l, line) in config.lines.iter().enumerate() {
            let i_dot = (-line.resistance * state.line_current[l] + state.voltage[line.from]
                - state.voltage[line.to])
                / line.inductance;
            scale = scale.max(i_dot.abs());
            assert_abs_diff_eq!(f.line_current[l], i_dot, epsilon = 1e-12 * scale.max(1.0));
        }
        let f_omega = f.consensus.unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(f_omega[i], omega_dot[i], epsilon = 1e-12 * scale.max(1.0));
        }
        let _ = m;
    }

    #[test]
    fn nonlinearity_enters_only_through_voltage() {
        // f(X) - A X must agree across states that share the voltage block
        let config = presets::four_ring_zie();
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let dim = sys.layout.dim();
        let v = DVector::from_vec(vec![48.1, 47.2, 49.0, 46.8]);

        let residual = |x: &DVector<f64>| {
            let mut f = DVector::zeros(dim);
            sys.vector_field_into(x, &mut f).unwrap();
            f - &sys.a * x
        };
        let mut x1 = DVector::from_element(dim, 0.37);
        let mut x2 = DVector::from_element(dim, -4.2);
        for i in 0..4 {
            x1[i] = v[i];
            x2[i] = v[i];
        }
        let r1 = residual(&x1);
        let r2 = residual(&x2);
        assert_abs_diff_eq!(r1, r2, epsilon = 1e-9);
        assert_abs_diff_eq!(r1, sys.b_of(&v).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn vector_field_rejects_nonpositive_voltage() {
        let config = presets::two_node();
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let state = SystemState {
            voltage: DVector::from_vec(vec![48.0, -1.0]),
            filter_current: DVector::zeros(2),
            integrator: DVector::zeros(2),
            line_current: DVector::zeros(1),
            consensus: Some(DVector::zeros(2)),
        };
        match sys.vector_field(&state) {
            Err(Error::VoltageDomain { node, .. }) => assert_eq!(node, 1),
            other => panic!("expected voltage domain error, got {other:?}"),
        }
    }

    #[test]
    fn jacobian_equals_a_for_linear_loads() {
        let mut config = presets::two_node();
        // r = 1 makes the E term constant; P* = 0 removes it entirely
        config.dgus[0].load.exponent = 1.0;
        config.dgus[1].load.power = 0.0;
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let state = SystemState {
            voltage: DVector::from_vec(vec![48.0, 47.5]),
            filter_current: DVector::zeros(2),
            integrator: DVector::zeros(2),
            line_current: DVector::zeros(1),
            consensus: Some(DVector::zeros(2)),
        };
        let jac = sys.jacobian(&state).unwrap();
        assert_abs_diff_eq!(jac, sys.a, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let config = presets::four_ring_zie();
        let gains = config.gain_set().unwrap();
        let sys = assemble(&config, &gains, ControlMode::Secondary).unwrap();
        let x0 = SystemState {
            voltage: DVector::from_vec(vec![48.3, 47.1, 48.9, 47.7]),
            filter_current: DVector::from_vec(vec![22.0, 15.0, 30.0, 9.0]),
            integrator: DVector::from_vec(vec![0.05, -0.04, 0.08, 0.01]),
            line_current: DVector::from_vec(vec![2.0, -1.0, 0.5, 1.2]),
            consensus: Some(DVector::from_vec(vec![0.6, -0.2, -0.3, -0.1])),
        }
        .stack();
        let jac = sys
            .jacobian(&SystemState::from_flat(sys.layout, &x0).unwrap())
            .unwrap();

        let dim = sys.layout.dim();
        let mut fp = DVector::zeros(dim);
        let mut fm = DVector::zeros(dim);
        for j in 0..dim {
            let scale = x0[j].abs().max(1.0);
            let h = 1e-6 * scale;
            let mut xp = x0.clone();
            xp[j] += h;
            let mut xm = x0.clone();
            xm[j] -= h;
            sys.vector_field_into(&xp, &mut fp).unwrap();
            sys.vector_field_into(&xm, &mut fm).unwrap();
            for i in 0..dim {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let reference = jac[(i, j)];
                let tol = 1e-5 * reference.abs().max(fd.abs()).max(1.0);
                assert!(
                    (fd - reference).abs() <= tol,
                    "jacobian ({i},{j}): fd {fd} vs analytic {reference}"
                );
            }
        }
    }
}
