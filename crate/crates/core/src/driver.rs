//! Alternating attack and defense until the robust dispatch settles.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{find_worst_case_attack, AttackConfig, AttackTrace, InitKind};
use crate::defense::{base_power_flow, defense_step, DefenseConfig};
use crate::error::{Error, Result};
use crate::grid::{AttackVector, PowerSystem};
use crate::opf::{solve_base_opf, SolverConfig};
use crate::powerflow::{Dispatch, OperatingPoint};
use crate::third_stage::{solve_third_stage, ThirdStageSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScopfConfig {
    /// Attack budget: at most `k` devices' worth of outage.
    pub k: usize,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub max_outer: usize,
    /// Relative change of the post-defense loss below which iterations count
    /// as stagnant.
    pub loss_tol: f64,
    pub loss_window: usize,
    /// Infinity-norm dispatch change that counts as converged.
    pub dispatch_tol: f64,
    /// Halvings of the blend when the defended dispatch does not lower the loss.
    pub max_eta_backtracks: usize,
    /// Consecutive stalled defense steps that abort the run.
    pub max_stalls: usize,
    pub solver: SolverConfig,
}

impl Default for ScopfConfig {
    fn default() -> Self {
        ScopfConfig {
            k: 2,
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            max_outer: 50,
            loss_tol: 1e-4,
            loss_window: 3,
            dispatch_tol: 1e-5,
            max_eta_backtracks: 6,
            max_stalls: 3,
            solver: SolverConfig::default(),
        }
    }
}

impl ScopfConfig {
    /// Every schema problem found, empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k == 0 {
            out.push("k must be at least 1".into());
        }
        if self.max_outer == 0 {
            out.push("max_outer must be positive".into());
        }
        if !(self.loss_tol > 0.0) {
            out.push(format!("loss_tol must be positive, got {}", self.loss_tol));
        }
        if self.loss_window < 2 {
            out.push(format!("loss_window must be at least 2, got {}", self.loss_window));
        }
        if !(self.dispatch_tol > 0.0) {
            out.push(format!("dispatch_tol must be positive, got {}", self.dispatch_tol));
        }
        if self.max_stalls == 0 {
            out.push("max_stalls must be positive".into());
        }
        out.extend(self.attack.validate());
        out.extend(self.defense.validate());
        out.extend(self.solver.validate());
        out
    }

    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScopfConfig = serde_json::from_str(text)?;
        let problems = cfg.validate();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// Loss terms in loss units (generation costs multiplied by `cost_scale`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub f_base: f64,
    pub f_cont: f64,
    pub slack: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(f_base: f64, f_cont: f64, slack: f64) -> Self {
        LossBreakdown {
            f_base,
            f_cont,
            slack,
            total: f_base + f_cont + slack,
        }
    }
}

/// Base cost of `x` in $/h, with the slack unit's output from the base power flow.
pub fn base_cost(sys: &PowerSystem, x: &Dispatch, solver: &SolverConfig) -> Result<f64> {
    let (state, _) = base_power_flow(sys, x, solver, f64::INFINITY)?;
    let op = OperatingPoint::assemble(sys, x, &state)?;
    Ok(sys.generation_cost(&op.pg))
}

/// Full objective at `(x, y)` given the contingency solve `sol` there.
pub fn loss(sys: &PowerSystem, x: &Dispatch, y: &AttackVector, sol: &ThirdStageSolution) -> Result<LossBreakdown> {
    sol.ensure_fresh(x, y)?;
    let mut solver = SolverConfig::default();
    solver.cost_scale = sol.cost_scale();
    let scale = sol.cost_scale();
    Ok(LossBreakdown::new(
        scale * base_cost(sys, x, &solver)?,
        scale * sys.generation_cost(&sol.generator_p(sys)),
        sol.slack_penalty(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub y_star: Vec<f64>,
    /// Loss at the dispatch the attack was run against.
    pub pre: LossBreakdown,
    /// Loss at the new dispatch against the same `y_star`.
    pub post: LossBreakdown,
    pub attack: AttackTrace,
    pub eta: f64,
    pub defense_stalled: bool,
    pub base_kkt_residual: f64,
    pub base_pf_residual: f64,
    pub coupling_norm: f64,
    /// Dispatch after the iteration.
    pub dispatch: Vec<f64>,
    pub dispatch_change: f64,
    pub attack_seconds: f64,
    pub defense_seconds: f64,
    pub evaluation_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
    pub initial_dispatch: Vec<f64>,
    pub converged: bool,
    /// The iteration limit ended the run.
    pub hit_max_outer: bool,
    pub reason: String,
}

pub const HISTORY_CSV_HEADER: &str = "iteration,pre_loss,post_loss,post_f_base,post_f_cont,post_slack,eta,attack_iterations,defense_stalled,dispatch_change,y_l1";

impl IterationRecord {
    /// One history CSV line without a trailing newline. Wall times are left
    /// out so that the file is reproducible.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6e},{},{},{:.6e},{:.9}",
            self.iteration,
            self.pre.total,
            self.post.total,
            self.post.f_base,
            self.post.f_cont,
            self.post.slack,
            self.eta,
            self.attack.iterations.len(),
            self.defense_stalled,
            self.dispatch_change,
            self.y_star.iter().sum::<f64>()
        )
    }
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_CSV_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_line());
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceDecision {
    pub converged: bool,
    pub hit_max_outer: bool,
    pub reason: String,
}

/// Applies the loss-window, dispatch-change and iteration-limit rules.
pub fn convergence_check(history: &RunHistory, cfg: &ScopfConfig) -> ConvergenceDecision {
    let recs = &history.records;
    let mut reasons = Vec::new();
    if recs.len() >= cfg.loss_window {
        let tail = &recs[recs.len() - cfg.loss_window..];
        let flat = tail.windows(2).all(|w| {
            let (a, b) = (w[0].post.total, w[1].post.total);
            (b - a).abs() <= cfg.loss_tol * a.abs().max(f64::MIN_POSITIVE)
        });
        if flat {
            reasons.push(format!(
                "post-defense loss changed by less than {} over {} iterations",
                cfg.loss_tol, cfg.loss_window
            ));
        }
    }
    if let Some(last) = recs.last() {
        if !last.defense_stalled && last.dispatch_change <= cfg.dispatch_tol {
            reasons.push(format!("dispatch moved {:.3e} <= {}", last.dispatch_change, cfg.dispatch_tol));
        }
    }
    let hit = recs.len() >= cfg.max_outer;
    if hit {
        reasons.push(format!("reached max_outer = {}", cfg.max_outer));
    }
    ConvergenceDecision {
        converged: !reasons.is_empty(),
        hit_max_outer: hit,
        reason: if reasons.is_empty() {
            "not converged".into()
        } else {
            reasons.join("; ")
        },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
}

/// Runs the robust dispatch loop from the base OPF optimum.
pub fn run_scopf(sys: &PowerSystem, cfg: &ScopfConfig) -> Result<(Dispatch, RunHistory)> {
    run_scopf_with(sys, cfg, |_| Ok(()))
}

/// As [`run_scopf`], calling `observer` after every completed outer iteration.
pub fn run_scopf_with<F>(sys: &PowerSystem, cfg: &ScopfConfig, mut observer: F) -> Result<(Dispatch, RunHistory)>
where
    F: FnMut(&IterationRecord) -> Result<()>,
{
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidInput(problems.join("; ")));
    }
    let solver = &cfg.solver;
    let mut x = solve_base_opf(sys, solver)?;
    let mut history = RunHistory {
        initial_dispatch: x.to_vec(),
        ..Default::default()
    };

    if sys.n_outage() == 0 {
        let y = AttackVector::zeros(0, cfg.k as f64);
        let t0 = Instant::now();
        let sol = solve_third_stage(sys, &x, &y, solver)?;
        let l = loss(sys, &x, &y, &sol)?;
        let record = IterationRecord {
            iteration: 1,
            y_star: Vec::new(),
            pre: l,
            post: l,
            attack: AttackTrace {
                initial_loss: sol.attack_loss(sys),
                best_loss: sol.attack_loss(sys),
                converged: true,
                reason: "no outage-eligible devices".into(),
                ..Default::default()
            },
            eta: 0.0,
            defense_stalled: false,
            base_kkt_residual: 0.0,
            base_pf_residual: 0.0,
            coupling_norm: 0.0,
            dispatch: x.to_vec(),
            dispatch_change: 0.0,
            attack_seconds: t0.elapsed().as_secs_f64(),
            defense_seconds: 0.0,
            evaluation_seconds: 0.0,
        };
        observer(&record)?;
        history.records.push(record);
        history.converged = true;
        history.reason = "no outage-eligible devices".into();
        return Ok((x, history));
    }

    let warm = cfg.attack.init == InitKind::WarmStart;
    let mut y_prev: Option<AttackVector> = None;
    let mut stalls = 0usize;
    for iteration in 1..=cfg.max_outer {
        let t_attack = Instant::now();
        let attack = find_worst_case_attack(
            sys,
            &x,
            cfg.k,
            &cfg.attack,
            solver,
            if warm { y_prev.as_ref() } else { None },
        )
        .map_err(|e| Error::RunAborted {
            reason: format!("attack failed in outer iteration {iteration}: {e}"),
            history: Box::new(history.clone()),
        })?;
        let attack_seconds = t_attack.elapsed().as_secs_f64();
        let y = attack.y.clone();
        let pre = loss(sys, &x, &y, &attack.solution)?;

        let t_defense = Instant::now();
        let step = defense_step(sys, &x, &y, &attack.solution, &cfg.defense, solver)?;
        let defense_seconds = t_defense.elapsed().as_secs_f64();

        let t_eval = Instant::now();
        let mut eta = step.eta;
        let mut next = step.x.clone();
        let mut post = pre;
        if !step.stalled {
            let mut accepted = false;
            for _ in 0..=cfg.max_eta_backtracks {
                if let Ok(sol) = solve_third_stage(sys, &next, &y, solver) {
                    let l = loss(sys, &next, &y, &sol)?;
                    if l.total < pre.total {
                        post = l;
                        accepted = true;
                        break;
                    }
                }
                eta /= 2.0;
                let v: Vec<f64> = x.to_vec().iter().zip(step.raw.to_vec()).map(|(a, b)| a + eta * (b - a)).collect();
                next = Dispatch::from_vec(sys, &v)?;
                if base_power_flow(sys, &next, solver, cfg.defense.base_tol).map(|(_, r)| r > cfg.defense.base_tol).unwrap_or(true) {
                    break;
                }
            }
            if !accepted {
                next = x.clone();
                eta = 0.0;
            }
        }
        let evaluation_seconds = t_eval.elapsed().as_secs_f64();
        stalls = if step.stalled { stalls + 1 } else { 0 };

        let (_, pf_res) = base_power_flow(sys, &next, solver, cfg.defense.base_tol)?;
        let record = IterationRecord {
            iteration,
            y_star: y.values().to_vec(),
            pre,
            post,
            attack: attack.trace,
            eta,
            defense_stalled: step.stalled,
            base_kkt_residual: step.base_kkt_residual,
            base_pf_residual: pf_res,
            coupling_norm: step.coupling_norm,
            dispatch_change: max_abs_diff(&next.to_vec(), &x.to_vec()),
            dispatch: next.to_vec(),
            attack_seconds,
            defense_seconds,
            evaluation_seconds,
        };
        observer(&record)?;
        history.records.push(record);
        x = next;
        y_prev = Some(y);

        if stalls >= cfg.max_stalls {
            history.reason = format!("{stalls} consecutive defense stalls");
            return Err(Error::RunAborted {
                reason: history.reason.clone(),
                history: Box::new(history),
            });
        }
        let decision = convergence_check(&history, cfg);
        if decision.converged {
            history.converged = true;
            history.hit_max_outer = decision.hit_max_outer;
            history.reason = decision.reason;
            break;
        }
    }
    Ok((x, history))
}
