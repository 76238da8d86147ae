//! Contingency redispatch: minimize scaled cost plus `0.5 |s|^2` under the
//! attacked network, with ramp and voltage-band ties to the base dispatch.

use crate::error::{Error, Result};
use crate::grid::{AttackVector, PowerSystem};
use crate::linalg::{bump, Factorization};
use crate::opf::{build_problem, point_from_primal, solve_ipm, starting_point, Problem, ProblemSpec, SolverConfig};
use crate::powerflow::{check_attack, inf_norm, Dispatch, NetworkState, OperatingPoint};

/// Converged third-stage solve together with the factorization of its final
/// KKT Jacobian.
#[derive(Debug, Clone)]
pub struct ThirdStageSolution {
    /// Redispatch in the shape of a [`Dispatch`].
    pub z: Dispatch,
    /// Power-balance slack, `[P_1..P_n, Q_1..Q_n]`.
    pub s: Vec<f64>,
    pub w_cont: NetworkState,
    pub lambda_cont: Vec<f64>,
    pub mu_cont: Vec<f64>,
    /// Barrier parameter at exit.
    pub barrier: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub barrier_history: Vec<f64>,
    /// Ramp or band constraints that had to be dropped.
    pub diagnostics: Vec<String>,
    pub kkt_factorization: Factorization,
    pub rhs_b: Vec<f64>,
    pub(crate) problem: Problem,
    pub(crate) x: Dispatch,
    pub(crate) y: AttackVector,
    pub(crate) cost_scale: f64,
    pub(crate) voltage_band: f64,
}

impl ThirdStageSolution {
    /// Real power of every generator, slack unit included.
    pub fn generator_p(&self, sys: &PowerSystem) -> Vec<f64> {
        let mut pg = vec![0.0; sys.n_gen()];
        for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
            pg[g] = self.z.p[k];
        }
        pg[sys.slack_generator()] = self.w_cont.p_slack;
        pg
    }

    pub fn point(&self, sys: &PowerSystem) -> OperatingPoint {
        OperatingPoint::assemble(sys, &self.z, &self.w_cont).expect("solution dimensions are consistent")
    }

    pub fn slack_norm(&self) -> f64 {
        inf_norm(&self.s)
    }

    /// `0.5 |s|^2`
    pub fn slack_penalty(&self) -> f64 {
        self.s.iter().map(|v| v * v).sum::<f64>() / 2.0
    }

    /// Multiplier that turns $/h into loss units for this solve.
    pub fn cost_scale(&self) -> f64 {
        self.cost_scale
    }

    /// Inner loss: scaled contingency cost plus the slack penalty.
    pub fn attack_loss(&self, sys: &PowerSystem) -> f64 {
        self.cost_scale * sys.generation_cost(&self.generator_p(sys)) + self.slack_penalty()
    }

    /// `|mu' h|` over all inequalities.
    pub fn complementarity_gap(&self, sys: &PowerSystem) -> f64 {
        let u = self.pack(sys);
        let np = self.problem.n_primal();
        (0..self.problem.n_ineq())
            .map(|i| self.mu_cont[i] * self.problem.h(&u[..np], i))
            .sum::<f64>()
            .abs()
    }

    pub fn n_ineq(&self) -> usize {
        self.mu_cont.len()
    }

    /// Size of the KKT system.
    pub fn kkt_dim(&self) -> usize {
        self.problem.n_kkt()
    }

    /// The dispatch and attack this solution was computed for.
    pub fn inputs(&self) -> (&Dispatch, &AttackVector) {
        (&self.x, &self.y)
    }

    pub(crate) fn ensure_fresh(&self, x: &Dispatch, y: &AttackVector) -> Result<()> {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        if same(&self.x.to_vec(), &x.to_vec()) && same(self.y.values(), y.values()) {
            Ok(())
        } else {
            Err(Error::StaleSolution)
        }
    }

    /// KKT unknown vector rebuilt from the public fields.
    pub(crate) fn pack(&self, sys: &PowerSystem) -> Vec<f64> {
        pack_into(&self.problem, sys, self)
    }
}

fn pack_into(problem: &Problem, sys: &PowerSystem, sol: &ThirdStageSolution) -> Vec<f64> {
    problem.pack(&sol.point(sys), &sol.s, &sol.lambda_cont, &sol.mu_cont)
}

pub(crate) fn contingency_problem(sys: &PowerSystem, x: &Dispatch, y: &AttackVector, cfg: &SolverConfig) -> Problem {
    build_problem(
        sys,
        ProblemSpec {
            y: Some(y),
            slack: true,
            coupling: Some(x),
            linear: None,
            voltage_band: cfg.voltage_band,
            cost_scale: cfg.cost_scale,
        },
    )
}

fn check_inputs(sys: &PowerSystem, x: &Dispatch, y: &AttackVector) -> Result<()> {
    x.check(sys)?;
    check_attack(sys, Some(y))
}

/// Solves the contingency redispatch for dispatch `x` under attack `y`.
pub fn solve_third_stage(
    sys: &PowerSystem,
    x: &Dispatch,
    y: &AttackVector,
    cfg: &SolverConfig,
) -> Result<ThirdStageSolution> {
    check_inputs(sys, x, y)?;
    bump(|c| c.third_stage_solves += 1);
    let problem = contingency_problem(sys, x, y, cfg);
    let start = starting_point(sys, x, Some(y), cfg);
    let u0 = problem.initial_point(&start);
    let sol = solve_ipm(&problem, u0, cfg, "third-stage redispatch")?;
    let l = &problem.layout;
    let (np, me) = (problem.n_primal(), problem.n_eq());
    let p = &sol.u[..np];
    let point = point_from_primal(sys, &problem, p);
    Ok(ThirdStageSolution {
        z: point.dispatch(sys),
        s: (0..me).map(|r| p[l.s(r)]).collect(),
        w_cont: point.state(sys),
        lambda_cont: sol.u[np..np + me].to_vec(),
        mu_cont: sol.u[np + me..].to_vec(),
        barrier: sol.eps,
        converged: true,
        iterations: sol.iterations,
        residual: sol.residual,
        history: sol.history,
        barrier_history: sol.barrier_history,
        diagnostics: problem.diagnostics.clone(),
        kkt_factorization: sol.factorization,
        rhs_b: sol.rhs,
        problem,
        x: x.clone(),
        y: y.clone(),
        cost_scale: cfg.cost_scale,
        voltage_band: cfg.voltage_band,
    })
}

/// Infinity norm of the KKT residual of `sol`'s public fields for the problem
/// defined by `(x, y)`, at the solution's barrier parameter.
pub fn kkt_residual(sys: &PowerSystem, x: &Dispatch, y: &AttackVector, sol: &ThirdStageSolution) -> Result<f64> {
    check_inputs(sys, x, y)?;
    let mut cfg = SolverConfig::default();
    cfg.cost_scale = sol.cost_scale;
    cfg.voltage_band = sol.voltage_band;
    let problem = contingency_problem(sys, x, y, &cfg);
    if problem.n_kkt() != sol.problem.n_kkt() || sol.s.len() != problem.n_eq() {
        return Err(Error::Dimension {
            what: "third-stage solution",
            expected: problem.n_kkt(),
            got: sol.problem.n_kkt(),
        });
    }
    let u = pack_into(&problem, sys, sol);
    Ok(inf_norm(&problem.residual(&u, sol.barrier)))
}

/// Generation cost `sum c2 p^2 + c1 p + c0` in $/h for per-generator real
/// powers (slack unit included). The attack only changes limits, not the cost form.
pub fn contingency_cost(sys: &PowerSystem, pg: &[f64], y: &AttackVector) -> Result<f64> {
    check_attack(sys, Some(y))?;
    if pg.len() != sys.n_gen() {
        return Err(Error::Dimension {
            what: "generator real powers",
            expected: sys.n_gen(),
            got: pg.len(),
        });
    }
    Ok(sys.generation_cost(pg))
}
