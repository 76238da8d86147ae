//! Dispatch and network-state types, the AC power balance and a Newton power flow.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AttackVector, PowerSystem};
use crate::linalg::{Factorization, SparseMatrix, SymbolicCache};
use crate::network::{BusVar, Network};

/// First-stage decision: real power of every non-slack generator (dispatch order)
/// and the voltage magnitude of every generator, `2 n_g - 1` values in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
}

impl Dispatch {
    pub fn new(sys: &PowerSystem, p: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_len("dispatch real power", sys.n_gen().saturating_sub(1), p.len())?;
        check_len("dispatch voltage", sys.n_gen(), v.len())?;
        Ok(Dispatch { p, v })
    }

    pub fn from_vec(sys: &PowerSystem, x: &[f64]) -> Result<Self> {
        let np = sys.n_gen().saturating_sub(1);
        check_len("dispatch vector", np + sys.n_gen(), x.len())?;
        Ok(Dispatch {
            p: x[..np].to_vec(),
            v: x[np..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = self.p.clone();
        x.extend_from_slice(&self.v);
        x
    }

    pub fn len(&self) -> usize {
        self.p.len() + self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Set points stored in the case file.
    pub fn nominal(sys: &PowerSystem) -> Self {
        let gens = sys.generators();
        Dispatch {
            p: sys.dispatchable_generators().iter().map(|&g| gens[g].p_init).collect(),
            v: gens.iter().map(|g| g.v_set).collect(),
        }
    }

    /// Real power set point of generator `g`, `None` for the slack unit.
    pub fn generator_p(&self, sys: &PowerSystem, g: usize) -> Option<f64> {
        sys.dispatch_slot(g).map(|k| self.p[k])
    }

    /// Largest violation of generator real-power and bus voltage limits.
    pub fn limit_violation(&self, sys: &PowerSystem) -> f64 {
        let gens = sys.generators();
        let mut worst = 0.0f64;
        for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
            worst = worst.max(gens[g].p_min - self.p[k]).max(self.p[k] - gens[g].p_max);
        }
        for (g, gen) in gens.iter().enumerate() {
            let bus = &sys.buses()[gen.bus];
            worst = worst.max(bus.v_min - self.v[g]).max(self.v[g] - bus.v_max);
        }
        worst
    }

    pub(crate) fn check(&self, sys: &PowerSystem) -> Result<()> {
        check_len("dispatch real power", sys.n_gen().saturating_sub(1), self.p.len())?;
        check_len("dispatch voltage", sys.n_gen(), self.v.len())
    }
}

/// Quantities determined by the power flow for a given dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Voltage magnitudes at buses without a generator, in bus order.
    pub vm: Vec<f64>,
    /// Voltage angles (rad) at every bus except the slack, in bus order.
    pub va: Vec<f64>,
    /// Reactive output of every generator.
    pub qg: Vec<f64>,
    /// Real output of the slack generator.
    pub p_slack: f64,
}

impl NetworkState {
    pub fn flat(sys: &PowerSystem) -> Self {
        let nb = sys.n_bus();
        let n_load = (0..nb).filter(|&i| sys.generator_at_bus(i).is_none()).count();
        NetworkState {
            vm: vec![1.0; n_load],
            va: vec![0.0; nb - 1],
            qg: vec![0.0; sys.n_gen()],
            p_slack: 0.0,
        }
    }

    /// Length of the unknown vector `[vm, va, qg, p_slack]`, equal to `2 n_bus`.
    pub fn len(&self) -> usize {
        self.vm.len() + self.va.len() + self.qg.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.vm);
        out.extend_from_slice(&self.va);
        out.extend_from_slice(&self.qg);
        out.push(self.p_slack);
        out
    }

    pub(crate) fn check(&self, sys: &PowerSystem) -> Result<()> {
        let nb = sys.n_bus();
        let n_load = (0..nb).filter(|&i| sys.generator_at_bus(i).is_none()).count();
        check_len("state voltage magnitudes", n_load, self.vm.len())?;
        check_len("state voltage angles", nb - 1, self.va.len())?;
        check_len("state reactive powers", sys.n_gen(), self.qg.len())
    }
}

/// Full operating point: every generator output and every bus voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl OperatingPoint {
    pub fn assemble(sys: &PowerSystem, x: &Dispatch, w: &NetworkState) -> Result<Self> {
        x.check(sys)?;
        w.check(sys)?;
        let nb = sys.n_bus();
        let gens = sys.generators();
        let mut pg = vec![0.0; sys.n_gen()];
        for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
            pg[g] = x.p[k];
        }
        pg[sys.slack_generator()] = w.p_slack;
        let mut vm = vec![0.0; nb];
        let mut va = vec![0.0; nb];
        let (mut iv, mut ia) = (0, 0);
        for i in 0..nb {
            vm[i] = match sys.generator_at_bus(i) {
                Some(g) => x.v[g],
                None => {
                    iv += 1;
                    w.vm[iv - 1]
                }
            };
            if i != sys.slack_bus() {
                va[i] = w.va[ia];
                ia += 1;
            }
        }
        debug_assert_eq!(gens.len(), pg.len());
        Ok(OperatingPoint {
            pg,
            qg: w.qg.clone(),
            vm,
            va,
        })
    }

    pub fn dispatch(&self, sys: &PowerSystem) -> Dispatch {
        Dispatch {
            p: sys.dispatchable_generators().iter().map(|&g| self.pg[g]).collect(),
            v: sys.generators().iter().map(|g| self.vm[g.bus]).collect(),
        }
    }

    /// Network state relative to the slack angle.
    pub fn state(&self, sys: &PowerSystem) -> NetworkState {
        let slack = sys.slack_bus();
        let ref_angle = self.va[slack];
        NetworkState {
            vm: (0..sys.n_bus())
                .filter(|&i| sys.generator_at_bus(i).is_none())
                .map(|i| self.vm[i])
                .collect(),
            va: (0..sys.n_bus())
                .filter(|&i| i != slack)
                .map(|i| self.va[i] - ref_angle)
                .collect(),
            qg: self.qg.clone(),
            p_slack: self.pg[sys.slack_generator()],
        }
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

/// Balance residual `[P_1..P_n, Q_1..Q_n]`: generation minus load minus the
/// power leaving each bus through branches and shunts.
pub(crate) fn balance(sys: &PowerSystem, net: &Network, op: &OperatingPoint) -> Vec<f64> {
    let nb = sys.n_bus();
    let (pn, qn) = net.injections(&op.vm, &op.va);
    let mut g = vec![0.0; 2 * nb];
    for i in 0..nb {
        let (pd, qd) = sys.bus_demand(i);
        g[i] = -pd - pn[i];
        g[nb + i] = -qd - qn[i];
    }
    for (k, gen) in sys.generators().iter().enumerate() {
        g[gen.bus] += op.pg[k];
        g[nb + gen.bus] += op.qg[k];
    }
    g
}

/// Power balance residual of `(x, w)` on the network modulated by `y`.
pub fn power_mismatch(
    sys: &PowerSystem,
    x: &Dispatch,
    w: &NetworkState,
    y: Option<&AttackVector>,
) -> Result<Vec<f64>> {
    check_attack(sys, y)?;
    let op = OperatingPoint::assemble(sys, x, w)?;
    let net = Network::new(sys, sys.branch_scaling(y));
    Ok(balance(sys, &net, &op))
}

pub(crate) fn check_attack(sys: &PowerSystem, y: Option<&AttackVector>) -> Result<()> {
    if let Some(y) = y {
        check_len("attack vector", sys.n_outage(), y.len())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; flat start when absent.
    pub warm_start: Option<NetworkState>,
    /// CSV file receiving `iteration,residual` lines.
    pub trace: Option<PathBuf>,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tol: 1e-8,
            max_iter: 50,
            warm_start: None,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowResult {
    pub state: NetworkState,
    /// Residual evaluations performed, including the one that met the tolerance.
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// Newton power flow for dispatch `x` on the network modulated by `y`.
///
/// Unknowns are the [`NetworkState`] entries. Generator reactive limits are not
/// enforced. Failure to converge is an error, never a silent answer.
pub fn solve_power_flow(
    sys: &PowerSystem,
    x: &Dispatch,
    y: Option<&AttackVector>,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowResult> {
    x.check(sys)?;
    check_attack(sys, y)?;
    let net = Network::new(sys, sys.branch_scaling(y));
    let mut w = match &opts.warm_start {
        Some(w) => {
            w.check(sys)?;
            w.clone()
        }
        None => NetworkState::flat(sys),
    };
    let mut trace = match &opts.trace {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "iteration,residual")?;
            Some(f)
        }
        None => None,
    };

    let cols = FlowColumns::new(sys);
    let n = cols.n;

    let mut cache = SymbolicCache::default();
    let mut history = Vec::new();
    for iter in 1..=opts.max_iter {
        let op = OperatingPoint::assemble(sys, x, &w)?;
        let g = balance(sys, &net, &op);
        let res = inf_norm(&g);
        history.push(res);
        if let Some(f) = trace.as_mut() {
            writeln!(f, "{iter},{res:.6e}")?;
        }
        if !res.is_finite() || res > 1e10 {
            return Err(Error::NonConvergence {
                context: "power flow diverged".into(),
                iterations: iter,
                residual: res,
                history,
            });
        }
        if res <= opts.tol {
            return Ok(PowerFlowResult {
                state: w,
                iterations: iter,
                residual: res,
                converged: true,
                history,
            });
        }
        let trip = cols.jacobian(sys, &net, &op);
        let jac = Factorization::new(SparseMatrix::from_triplets(n, trip), &mut cache, "power flow")?;
        let dx = jac.solve(&g.iter().map(|v| -v).collect::<Vec<_>>())?;
        let mut u = w.to_vec();
        for (a, d) in u.iter_mut().zip(&dx) {
            *a += d;
        }
        w = state_from_vec(&w, &u);
    }
    let res = *history.last().unwrap_or(&f64::INFINITY);
    Err(Error::NonConvergence {
        context: "power flow".into(),
        iterations: opts.max_iter,
        residual: res,
        history,
    })
}

/// Column layout of the power-flow unknowns inside the balance Jacobian.
struct FlowColumns {
    vm: Vec<Option<usize>>,
    va: Vec<Option<usize>>,
    qg: usize,
    p_slack: usize,
    n: usize,
}

impl FlowColumns {
    fn new(sys: &PowerSystem) -> Self {
        let nb = sys.n_bus();
        let mut vm = vec![None; nb];
        let mut va = vec![None; nb];
        let mut col = 0;
        for (i, c) in vm.iter_mut().enumerate() {
            if sys.generator_at_bus(i).is_none() {
                *c = Some(col);
                col += 1;
            }
        }
        for (i, c) in va.iter_mut().enumerate() {
            if i != sys.slack_bus() {
                *c = Some(col);
                col += 1;
            }
        }
        let p_slack = col + sys.n_gen();
        debug_assert_eq!(p_slack + 1, 2 * nb);
        FlowColumns { vm, va, qg: col, p_slack, n: 2 * nb }
    }

    /// Triplets of `d balance / d state`.
    fn jacobian(&self, sys: &PowerSystem, net: &Network, op: &OperatingPoint) -> Vec<(usize, usize, f64)> {
        let nb = sys.n_bus();
        let mut trip = Vec::with_capacity(16 * sys.branches().len() + self.n);
        for (row, var, val) in net.injection_jacobian(&op.vm, &op.va) {
            let c = match var {
                BusVar::Vm(i) => self.vm[i],
                BusVar::Va(i) => self.va[i],
            };
            if let Some(c) = c {
                trip.push((row, c, -val));
            }
        }
        for (k, gen) in sys.generators().iter().enumerate() {
            trip.push((nb + gen.bus, self.qg + k, 1.0));
        }
        trip.push((sys.slack_bus(), self.p_slack, 1.0));
        trip
    }
}

/// Derivative of the slack generator's real output with respect to the
/// dispatch, holding the base-case power flow `G(w, x) = 0` satisfied at `w`.
pub(crate) fn slack_output_sensitivity(sys: &PowerSystem, x: &Dispatch, w: &NetworkState) -> Result<Vec<f64>> {
    x.check(sys)?;
    w.check(sys)?;
    let net = Network::new(sys, sys.branch_scaling(None));
    let op = OperatingPoint::assemble(sys, x, w)?;
    let cols = FlowColumns::new(sys);
    let jac = Factorization::new(
        SparseMatrix::from_triplets(cols.n, cols.jacobian(sys, &net, &op)),
        &mut SymbolicCache::default(),
        "power-flow sensitivity",
    )?;
    let mut e = vec![0.0; cols.n];
    e[cols.p_slack] = 1.0;
    let t = jac.solve_transpose(&e)?;
    let ng = sys.n_gen();
    let mut grad = vec![0.0; x.len()];
    for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
        grad[k] = -t[sys.generators()[g].bus];
    }
    let mut col_of_bus = vec![None; sys.n_bus()];
    for (g, gen) in sys.generators().iter().enumerate() {
        col_of_bus[gen.bus] = Some(ng - 1 + g);
    }
    for (row, var, val) in net.injection_jacobian(&op.vm, &op.va) {
        if let BusVar::Vm(i) = var {
            if let Some(k) = col_of_bus[i] {
                // d balance / d V = -d injection / d V
                grad[k] += t[row] * val;
            }
        }
    }
    Ok(grad)
}

fn state_from_vec(like: &NetworkState, u: &[f64]) -> NetworkState {
    let (a, b, c) = (like.vm.len(), like.va.len(), like.qg.len());
    NetworkState {
        vm: u[..a].to_vec(),
        va: u[a..a + b].to_vec(),
        qg: u[a + b..a + b + c].to_vec(),
        p_slack: u[a + b + c],
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::two_bus;
    use crate::grid::{parse_case, Bus, BusKind, Generator, PowerSystem};
    use num_complex::Complex64;

    pub(crate) fn case14() -> PowerSystem {
        parse_case(include_str!("../../../cases/case14.m")).unwrap()
    }

    fn bus(id: usize, kind: BusKind) -> Bus {
        Bus {
            id,
            kind,
            v_min: 0.9,
            v_max: 1.1,
            shunt: Complex64::new(0.0, 0.0),
            v_init: 1.0,
            angle_init: 0.0,
        }
    }

    #[test]
    fn zero_load_flat_profile_has_zero_mismatch() {
        let sys = two_bus(0.0, 0.0);
        let x = Dispatch::new(&sys, vec![], vec![1.0]).unwrap();
        let mut w = NetworkState::flat(&sys);
        w.vm = vec![1.0];
        let g = power_mismatch(&sys, &x, &w, None).unwrap();
        // line charging injects reactive power at a flat profile
        assert!(g[..2].iter().all(|v| v.abs() < 1e-15));
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default()).unwrap();
        assert!(r.residual <= 1e-8);
    }

    #[test]
    fn zero_load_without_charging_converges_in_one_iteration() {
        let mut sys = two_bus(0.0, 0.0);
        let mut branches = sys.branches().to_vec();
        branches[0].charging = 0.0;
        sys = PowerSystem::new(
            sys.base_mva(),
            sys.buses().to_vec(),
            sys.generators().to_vec(),
            branches,
            vec![],
        );
        let x = Dispatch::new(&sys, vec![], vec![1.0]).unwrap();
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.residual, 0.0);
        assert!(r.state.va.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn two_bus_analytic_solution_has_tiny_mismatch() {
        // Lossless line with reactance 0.1, no charging: P = V1 V2 sin(d) / x.
        let buses = vec![bus(1, BusKind::Slack), bus(2, BusKind::Load)];
        let gen = Generator {
            bus: 0,
            p_min: 0.0,
            p_max: 5.0,
            q_min: -5.0,
            q_max: 5.0,
            cost: [0.0, 1.0, 0.0],
            ramp: 0.1,
            p_init: 0.0,
            v_set: 1.0,
            outage_eligible: false,
        };
        let br = crate::grid::Branch {
            from: 0,
            to: 1,
            admittance: Complex64::new(0.0, -10.0),
            charging: 0.0,
            tap: 1.0,
            shift: 0.0,
            outage_eligible: true,
        };
        let (pd, v2) = (0.5f64, 0.98f64);
        // theta2 from P balance, Q demand from the receiving-end reactive flow
        let delta = -(pd * 0.1 / v2).asin();
        let qd = (1.0 * v2 * delta.cos() - v2 * v2) / 0.1;
        let sys = PowerSystem::new(
            100.0,
            buses,
            vec![gen],
            vec![br],
            vec![crate::grid::Load { bus: 1, p: pd, q: qd }],
        );
        let x = Dispatch::new(&sys, vec![], vec![1.0]).unwrap();
        let q1 = (1.0 - v2 * delta.cos()) / 0.1;
        let w = NetworkState {
            vm: vec![v2],
            va: vec![delta],
            qg: vec![q1],
            p_slack: pd,
        };
        let g = power_mismatch(&sys, &x, &w, None).unwrap();
        assert!(inf_norm(&g) < 1e-12, "{g:?}");
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default()).unwrap();
        assert!((r.state.vm[0] - v2).abs() < 1e-8);
        assert!((r.state.va[0] - delta).abs() < 1e-8);
    }

    #[test]
    fn mismatch_jacobian_matches_finite_differences() {
        let sys = case14();
        let x = Dispatch::nominal(&sys);
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default()).unwrap();
        let mut op = OperatingPoint::assemble(&sys, &x, &r.state).unwrap();
        for (i, v) in op.va.iter_mut().enumerate() {
            *v += 0.01 * (i as f64).sin();
        }
        let net = Network::new(&sys, vec![0.7; sys.branches().len()]);
        let nb = sys.n_bus();
        let mut dense = vec![vec![0.0; 2 * nb]; 2 * nb];
        for (row, var, val) in net.injection_jacobian(&op.vm, &op.va) {
            let c = match var {
                BusVar::Vm(i) => i,
                BusVar::Va(i) => nb + i,
            };
            dense[row][c] -= val;
        }
        let h = 1e-6;
        for c in 0..2 * nb {
            let eval = |d: f64| {
                let mut o = op.clone();
                if c < nb {
                    o.vm[c] += d;
                } else {
                    o.va[c - nb] += d;
                }
                balance(&sys, &net, &o)
            };
            let (up, dn) = (eval(h), eval(-h));
            for row in 0..2 * nb {
                let fd = (up[row] - dn[row]) / (2.0 * h);
                let an = dense[row][c];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "({row},{c}) {fd} {an}");
            }
        }
    }

    #[test]
    fn case14_nominal_converges() {
        let sys = case14();
        let x = Dispatch::nominal(&sys);
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default()).unwrap();
        assert!(r.converged && r.residual <= 1e-8);
        let g = power_mismatch(&sys, &x, &r.state, None).unwrap();
        assert!(inf_norm(&g) <= 1e-8);
    }

    #[test]
    fn absent_and_zero_attack_are_bitwise_identical() {
        let sys = case14();
        let x = Dispatch::nominal(&sys);
        let opts = PowerFlowOptions::default();
        let a = solve_power_flow(&sys, &x, None, &opts).unwrap();
        let y = AttackVector::zeros(sys.n_outage(), 2.0);
        let b = solve_power_flow(&sys, &x, Some(&y), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_equals_load_plus_losses() {
        let sys = case14();
        let x = Dispatch::nominal(&sys);
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default()).unwrap();
        let op = OperatingPoint::assemble(&sys, &x, &r.state).unwrap();
        let net = Network::new(&sys, vec![1.0; sys.branches().len()]);
        let (pn, _) = net.injections(&op.vm, &op.va);
        let losses: f64 = pn.iter().sum();
        let gen: f64 = op.pg.iter().sum();
        assert!((gen - sys.total_demand() - losses).abs() < 1e-7);
        assert!(losses > 0.0);
    }

    #[test]
    fn islanded_load_is_an_error() {
        let sys = case14();
        // bus 8 (index 7) hangs off a single transformer branch 7-8
        let b = sys
            .branches()
            .iter()
            .position(|br| br.from == 6 && br.to == 7)
            .unwrap();
        let j = sys.branch_device(b).unwrap();
        let y = AttackVector::discrete(sys.n_outage(), &[j]).unwrap();
        let x = Dispatch::nominal(&sys);
        let r = solve_power_flow(&sys, &x, Some(&y), &PowerFlowOptions::default());
        assert!(matches!(r, Err(Error::Singular { .. }) | Err(Error::NonConvergence { .. })), "{r:?}");
    }

    #[test]
    fn absurd_loading_diverges() {
        let sys = two_bus(50.0, 10.0);
        let x = Dispatch::new(&sys, vec![], vec![1.0]).unwrap();
        let r = solve_power_flow(&sys, &x, None, &PowerFlowOptions::default());
        assert!(matches!(r, Err(Error::NonConvergence { .. }) | Err(Error::Singular { .. })));
    }
}
