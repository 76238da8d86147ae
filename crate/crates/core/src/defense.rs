//! Outer minimization step over the base dispatch.
//!
//! The contingency block is already solved at `(x, y*)`, so one ordered
//! Gauss-Seidel pass reduces to a base-side solve in which the frozen
//! contingency multipliers enter as a linear term over the dispatch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AttackVector, PowerSystem};
use crate::implicit_grad::{coupling_vector, dispatch_gradient};
use crate::opf::{build_problem, solve_base_side, starting_point, BaseOpfSolution, ProblemSpec, SolverConfig};
use crate::powerflow::{inf_norm, slack_output_sensitivity, solve_power_flow, Dispatch, NetworkState, PowerFlowOptions};
use crate::third_stage::{kkt_residual, ThirdStageSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// KKT tolerance of the base-side solve and bound on the base power-flow
    /// residual at the new dispatch.
    pub base_tol: f64,
    /// Initial blend `eta` in `x + eta (x_raw - x)`.
    pub damping: f64,
    pub max_retries: usize,
    /// Include the contingency multipliers. Off gives the decoupled base OPF.
    pub coupling: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            base_tol: 1e-6,
            damping: 1.0,
            max_retries: 3,
            coupling: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.base_tol > 0.0) {
            out.push(format!("defense.base_tol must be positive, got {}", self.base_tol));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            out.push(format!("defense.damping must lie in (0, 1], got {}", self.damping));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DefenseStepResult {
    pub x: Dispatch,
    /// Base-side optimum before blending.
    pub raw: Dispatch,
    pub eta: f64,
    pub base_kkt_residual: f64,
    pub base_pf_residual: f64,
    /// Base power-flow state at `x`.
    pub base_state: NetworkState,
    pub lambda_base: Vec<f64>,
    pub mu_base: Vec<f64>,
    /// Linear coupling term `sum_i mu_i dh_i/dx` per dispatch coordinate.
    pub coupling: Vec<f64>,
    pub coupling_norm: f64,
    /// Every attempt failed; `x` is the input dispatch.
    pub stalled: bool,
    pub attempts: usize,
    /// Full base-side solution, used for the stacked KKT residual.
    pub base: Option<BaseOpfSolution>,
}

fn base_config(solver: &SolverConfig, cfg: &DefenseConfig) -> SolverConfig {
    let mut out = solver.clone();
    out.kkt_tol = out.kkt_tol.min(cfg.base_tol);
    out
}

fn blend(sys: &PowerSystem, x: &Dispatch, raw: &Dispatch, eta: f64) -> Dispatch {
    let v: Vec<f64> = x.to_vec().iter().zip(raw.to_vec()).map(|(a, b)| a + eta * (b - a)).collect();
    Dispatch::from_vec(sys, &v).expect("blend keeps the dispatch length")
}

/// Base power flow at `x`, accepted when its residual is within `tol`.
pub(crate) fn base_power_flow(sys: &PowerSystem, x: &Dispatch, solver: &SolverConfig, tol: f64) -> Result<(NetworkState, f64)> {
    let opts = PowerFlowOptions {
        tol: solver.pf_tol.min(tol),
        max_iter: solver.pf_max_iter,
        ..Default::default()
    };
    let pf = solve_power_flow(sys, x, None, &opts)?;
    Ok((pf.state, pf.residual))
}

/// One ordered Gauss-Seidel pass: the contingency block is taken from
/// `sol_star`, the base block is solved with the coupling term added.
pub fn defense_step(
    sys: &PowerSystem,
    x: &Dispatch,
    y_star: &AttackVector,
    sol_star: &ThirdStageSolution,
    cfg: &DefenseConfig,
    solver: &SolverConfig,
) -> Result<DefenseStepResult> {
    sol_star.ensure_fresh(x, y_star)?;
    let full = if cfg.coupling {
        coupling_vector(sys, sol_star)
    } else {
        vec![0.0; x.len()]
    };
    let bcfg = base_config(solver, cfg);
    let start = starting_point(sys, x, None, &bcfg);
    let (state0, pf0) = base_power_flow(sys, x, solver, cfg.base_tol)?;

    let mut eta = cfg.damping;
    let mut attempts = 0;
    let mut solved: Option<BaseOpfSolution> = None;
    while attempts <= cfg.max_retries {
        attempts += 1;
        if solved.is_none() {
            // a failed base solve is retried with the coupling pull damped as well
            let linear: Vec<f64> = full.iter().map(|c| c * eta / cfg.damping).collect();
            match solve_base_side(sys, &bcfg, Some(&linear), &start) {
                Ok(b) => solved = Some(b),
                Err(_) => {
                    eta /= 2.0;
                    continue;
                }
            }
        }
        let base = solved.as_ref().expect("base side solved above");
        let candidate = blend(sys, x, &base.dispatch, eta);
        match base_power_flow(sys, &candidate, solver, cfg.base_tol) {
            Ok((state, res)) if res <= cfg.base_tol => {
                return Ok(DefenseStepResult {
                    x: candidate,
                    raw: base.dispatch.clone(),
                    eta,
                    base_kkt_residual: base.residual,
                    base_pf_residual: res,
                    base_state: state,
                    lambda_base: base.lambda.clone(),
                    mu_base: base.mu.clone(),
                    coupling_norm: inf_norm(&full),
                    coupling: full,
                    stalled: false,
                    attempts,
                    base: solved,
                });
            }
            _ => eta /= 2.0,
        }
    }
    let (lambda_base, mu_base) = match &solved {
        Some(b) => (b.lambda.clone(), b.mu.clone()),
        None => (Vec::new(), Vec::new()),
    };
    Ok(DefenseStepResult {
        x: x.clone(),
        raw: x.clone(),
        eta: 0.0,
        base_kkt_residual: f64::NAN,
        base_pf_residual: pf0,
        base_state: state0,
        lambda_base,
        mu_base,
        coupling_norm: inf_norm(&full),
        coupling: full,
        stalled: true,
        attempts,
        base: solved,
    })
}

/// Infinity norm of the stacked KKT residual: the base block (with the
/// coupling term of `sol`) at `base`, and the contingency block of `sol`
/// re-evaluated at the dispatch carried by `base`.
pub fn combined_kkt_residual(
    sys: &PowerSystem,
    base: &BaseOpfSolution,
    y: &AttackVector,
    sol: &ThirdStageSolution,
) -> Result<f64> {
    let c = coupling_vector(sys, sol);
    let problem = build_problem(
        sys,
        ProblemSpec {
            y: None,
            slack: false,
            coupling: None,
            linear: Some(&c),
            voltage_band: sol.voltage_band,
            cost_scale: sol.cost_scale(),
        },
    );
    if base.lambda.len() != problem.n_eq() || base.mu.len() != problem.n_ineq() {
        return Err(Error::Dimension {
            what: "base-side multipliers",
            expected: problem.n_eq() + problem.n_ineq(),
            got: base.lambda.len() + base.mu.len(),
        });
    }
    let u = problem.pack(&base.point, &[], &base.lambda, &base.mu);
    let base_res = inf_norm(&problem.residual(&u, base.barrier));
    let cont_res = kkt_residual(sys, &base.dispatch, y, sol)?;
    Ok(base_res.max(cont_res))
}

/// Gradient of the full loss `f_base(x) + l(x, y*)` in loss units with the
/// attack held fixed: the base cost through the base power flow plus the
/// implicit contingency term.
pub fn outer_gradient(
    sys: &PowerSystem,
    x: &Dispatch,
    y_star: &AttackVector,
    sol_star: &ThirdStageSolution,
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut grad = dispatch_gradient(sys, x, y_star, sol_star)?;
    let (state, _) = base_power_flow(sys, x, solver, f64::INFINITY)?;
    let ds = slack_output_sensitivity(sys, x, &state)?;
    let gens = sys.generators();
    let scale = sol_star.cost_scale();
    let slack_marginal = gens[sys.slack_generator()].marginal_cost(state.p_slack);
    for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
        grad[k] += scale * gens[g].marginal_cost(x.p[k]);
    }
    for (gk, d) in grad.iter_mut().zip(&ds) {
        *gk += scale * slack_marginal * d;
    }
    Ok(grad)
}

/// Projected gradient step `clip(x - beta grad)` on the dispatch box. Base
/// power-flow feasibility of the result is not guaranteed.
pub fn outer_gradient_step(
    sys: &PowerSystem,
    x: &Dispatch,
    y_star: &AttackVector,
    sol_star: &ThirdStageSolution,
    beta: f64,
    solver: &SolverConfig,
) -> Result<Dispatch> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidInput(format!("outer step {beta} must be nonnegative")));
    }
    if beta == 0.0 {
        sol_star.ensure_fresh(x, y_star)?;
        return Ok(x.clone());
    }
    let grad = outer_gradient(sys, x, y_star, sol_star, solver)?;
    let gens = sys.generators();
    let mut p = x.p.clone();
    for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
        p[k] = (p[k] - beta * grad[k]).clamp(gens[g].p_min, gens[g].p_max);
    }
    let off = p.len();
    let mut v = x.v.clone();
    for (g, gen) in gens.iter().enumerate() {
        let bus = &sys.buses()[gen.bus];
        v[g] = (v[g] - beta * grad[off + g]).clamp(bus.v_min, bus.v_max);
    }
    Dispatch::new(sys, p, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{find_worst_case_attack, AttackConfig, AttackResult};
    use crate::driver::loss;
    use crate::linalg::counters;
    use crate::opf::{solve_base_opf, solve_base_opf_full};
    use crate::third_stage::solve_third_stage;

    fn attacked() -> (PowerSystem, SolverConfig, BaseOpfSolution, AttackResult) {
        let sys = crate::grid::parse_case(include_str!("../../../cases/case14.m")).unwrap();
        let cfg = SolverConfig::default();
        let base = solve_base_opf_full(&sys, &cfg).unwrap();
        let r = find_worst_case_attack(&sys, &base.dispatch, 3, &AttackConfig::default(), &cfg, None).unwrap();
        assert!(r.solution.slack_norm() > 1e-3);
        (sys, cfg, base, r)
    }

    #[test]
    fn base_optimum_is_a_fixed_point_without_attack() {
        let sys = crate::grid::parse_case(include_str!("../../../cases/case14.m")).unwrap();
        let cfg = SolverConfig::default();
        let x = solve_base_opf(&sys, &cfg).unwrap();
        let y = AttackVector::zeros(sys.n_outage(), 2.0);
        let sol = solve_third_stage(&sys, &x, &y, &cfg).unwrap();
        let d = defense_step(&sys, &x, &y, &sol, &DefenseConfig::default(), &cfg).unwrap();
        assert!(!d.stalled);
        let dx = d.x.to_vec().iter().zip(x.to_vec()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dx <= 1e-6, "{dx}");
    }

    #[test]
    fn defense_lowers_the_loss_against_the_fixed_attack() {
        let (sys, cfg, base, r) = attacked();
        let x = &base.dispatch;
        let pre = loss(&sys, x, &r.y, &r.solution).unwrap();
        let before = counters();
        let d = defense_step(&sys, x, &r.y, &r.solution, &DefenseConfig::default(), &cfg).unwrap();
        assert_eq!((counters() - before).third_stage_solves, 0);
        assert!(!d.stalled);
        assert!(d.base_pf_residual <= 1e-6);
        assert!(d.coupling_norm > 0.0);
        let after = solve_third_stage(&sys, &d.x, &r.y, &cfg).unwrap();
        let post = loss(&sys, &d.x, &r.y, &after).unwrap();
        assert!(post.total < pre.total, "{} vs {}", post.total, pre.total);
        let pf = base_power_flow(&sys, &d.x, &cfg, 1e-6).unwrap();
        assert!(pf.1 <= 1e-6);
    }

    #[test]
    fn decoupled_step_is_the_plain_base_opf() {
        let (sys, cfg, base, r) = attacked();
        let dcfg = DefenseConfig {
            coupling: false,
            ..Default::default()
        };
        let d = defense_step(&sys, &base.dispatch, &r.y, &r.solution, &dcfg, &cfg).unwrap();
        let dx = d.x.to_vec().iter().zip(base.dispatch.to_vec()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dx <= 1e-6, "{dx}");
        assert!(d.coupling.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn ordered_pass_reduces_the_stacked_residual() {
        let (sys, cfg, base, r) = attacked();
        let d = defense_step(&sys, &base.dispatch, &r.y, &r.solution, &DefenseConfig::default(), &cfg).unwrap();
        let before = combined_kkt_residual(&sys, &base, &r.y, &r.solution).unwrap();
        let after = combined_kkt_residual(&sys, d.base.as_ref().unwrap(), &r.y, &r.solution).unwrap();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn stale_contingency_solution_is_rejected() {
        let (sys, cfg, base, r) = attacked();
        let other = AttackVector::zeros(sys.n_outage(), 3.0);
        assert!(matches!(
            defense_step(&sys, &base.dispatch, &other, &r.solution, &DefenseConfig::default(), &cfg),
            Err(Error::StaleSolution)
        ));
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let (sys, cfg, base, r) = attacked();
        let x = &base.dispatch;
        let g = outer_gradient(&sys, x, &r.y, &r.solution, &cfg).unwrap();
        let total = |v: &[f64]| {
            let xd = Dispatch::from_vec(&sys, v).unwrap();
            let sol = solve_third_stage(&sys, &xd, &r.y, &cfg).unwrap();
            loss(&sys, &xd, &r.y, &sol).unwrap().total
        };
        let xv = x.to_vec();
        let h = 1e-6;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..xv.len() {
            let (mut a, mut b) = (xv.clone(), xv.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (total(&a) - total(&b)) / (2.0 * h);
            if g[k].abs() > 1e-3 * scale {
                assert!((g[k] - fd).abs() < 1e-3 * fd.abs(), "{k}: {} vs {fd}", g[k]);
            } else {
                assert!((g[k] - fd).abs() < 1e-6 * scale, "{k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn gradient_step_of_zero_length_keeps_the_dispatch() {
        let (sys, cfg, base, r) = attacked();
        let x2 = outer_gradient_step(&sys, &base.dispatch, &r.y, &r.solution, 0.0, &cfg).unwrap();
        assert_eq!(x2, base.dispatch);
        assert!(outer_gradient_step(&sys, &base.dispatch, &r.y, &r.solution, -1.0, &cfg).is_err());
    }

    #[test]
    fn gradient_step_clips_to_the_box() {
        let (sys, cfg, base, r) = attacked();
        let g = outer_gradient(&sys, &base.dispatch, &r.y, &r.solution, &cfg).unwrap();
        let x2 = outer_gradient_step(&sys, &base.dispatch, &r.y, &r.solution, 1e6, &cfg).unwrap();
        let gens = sys.generators();
        for (k, &gi) in sys.dispatchable_generators().iter().enumerate() {
            if g[k] < -1e-3 {
                assert_eq!(x2.p[k], gens[gi].p_max);
            }
            assert!(x2.p[k] >= gens[gi].p_min && x2.p[k] <= gens[gi].p_max);
        }
        for (gi, gen) in gens.iter().enumerate() {
            let bus = &sys.buses()[gen.bus];
            assert!(x2.v[gi] >= bus.v_min && x2.v[gi] <= bus.v_max);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DefenseConfig::default().validate().is_empty());
        let bad = DefenseConfig {
            base_tol: 0.0,
            damping: 1.5,
            ..Default::default()
        };
        assert_eq!(bad.validate().len(), 2);
    }
}
