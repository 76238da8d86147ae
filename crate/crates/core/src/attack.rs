//! Worst-case relaxed contingency search by projected gradient ascent.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AttackVector, PowerSystem};
use crate::implicit_grad::attack_gradient;
use crate::opf::SolverConfig;
use crate::powerflow::Dispatch;
use crate::third_stage::{solve_third_stage, ThirdStageSolution};

/// Euclidean projection onto `{y in [0,1]^n : sum y <= k}`.
pub fn project_attack(y_raw: &[f64], k: usize) -> AttackVector {
    let budget = k as f64;
    let clip = |tau: f64| -> Vec<f64> { y_raw.iter().map(|&v| (v - tau).clamp(0.0, 1.0)).collect() };
    let clipped = clip(0.0);
    if clipped.iter().sum::<f64>() <= budget {
        return AttackVector::new(clipped, budget).expect("clipped vector lies in the box");
    }
    // sum(clip(y - tau)) is nonincreasing in tau and reaches 0 at max(y)
    let mut lo = 0.0f64;
    let mut hi = y_raw.iter().cloned().fold(0.0f64, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = clip(mid).iter().sum();
        if s > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 || (s - budget).abs() <= 1e-12 && s <= budget {
            break;
        }
    }
    AttackVector::new(clip(hi), budget).expect("projection stays inside the budget")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    UniformSmall,
    Random,
    WarmStart(Vec<f64>),
}

pub fn init_attack(sys: &PowerSystem, k: usize, strategy: &InitStrategy, seed: u64) -> Result<AttackVector> {
    let n = sys.n_outage();
    match strategy {
        InitStrategy::UniformSmall => {
            let v = if n == 0 { 0.0 } else { (k as f64 / n as f64).min(0.01) };
            AttackVector::new(vec![v; n], k as f64)
        }
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            Ok(project_attack(&raw, k))
        }
        InitStrategy::WarmStart(prev) => {
            if prev.len() != n {
                return Err(Error::Dimension {
                    what: "warm-start attack",
                    expected: n,
                    got: prev.len(),
                });
            }
            Ok(project_attack(prev, k))
        }
    }
}

/// Initialization named in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    UniformSmall,
    Random,
    /// Start from the previous worst case when one exists, else `uniform_small`.
    WarmStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Step length in the infinity norm of the normalized gradient.
    pub step: f64,
    pub max_iters: usize,
    /// Stop when a step moves `y` less than this in the infinity norm.
    pub tol: f64,
    pub init: InitKind,
    pub seed: u64,
    /// Step halvings after a failed third-stage solve.
    pub max_retries: usize,
    /// Step halvings when a step lowers the loss.
    pub max_backtracks: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            step: 0.1,
            max_iters: 10,
            tol: 1e-4,
            init: InitKind::WarmStart,
            seed: 0,
            max_retries: 3,
            max_backtracks: 6,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.step >= 0.0 && self.step.is_finite()) {
            out.push(format!("attack.step must be nonnegative, got {}", self.step));
        }
        if self.max_iters == 0 {
            out.push("attack.max_iters must be positive".into());
        }
        if !(self.tol > 0.0) {
            out.push(format!("attack.tol must be positive, got {}", self.tol));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackIteration {
    pub iteration: usize,
    /// Loss at the iterate the gradient was taken at.
    pub loss: f64,
    pub grad_norm: f64,
    /// Step length that was accepted, 0 when none was.
    pub step: f64,
    pub projection_active: bool,
    pub third_stage_solves: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub iterations: Vec<AttackIteration>,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub final_y: Vec<f64>,
    pub converged: bool,
    pub reason: String,
}

impl AttackTrace {
    /// `iteration,loss,grad_norm,step` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,grad_norm,step\n");
        for it in &self.iterations {
            let _ = writeln!(out, "{},{:.12e},{:.12e},{:.6e}", it.iteration, it.loss, it.grad_norm, it.step);
        }
        out
    }

    /// Wall time of each iteration divided by the third-stage solves it needed.
    pub fn seconds_per_solve(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .filter(|it| it.third_stage_solves > 0)
            .map(|it| it.seconds / it.third_stage_solves as f64)
            .collect()
    }
}

/// Outcome of [`find_worst_case_attack`].
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub y: AttackVector,
    pub solution: ThirdStageSolution,
    pub trace: AttackTrace,
}

/// Projected gradient ascent on the inner loss, starting from `init` (or the
/// configured strategy). Returns the best iterate and its solution.
pub fn find_worst_case_attack(
    sys: &PowerSystem,
    x: &Dispatch,
    k: usize,
    cfg: &AttackConfig,
    solver: &SolverConfig,
    init: Option<&AttackVector>,
) -> Result<AttackResult> {
    let n = sys.n_outage();
    let mut trace = AttackTrace::default();
    let abort = |iteration: usize, e: Error, trace: &AttackTrace| Error::AttackAborted {
        iteration,
        source: Box::new(e),
        trace: Box::new(trace.clone()),
    };

    let mut y = match (init, cfg.init) {
        (Some(prev), _) => init_attack(sys, k, &InitStrategy::WarmStart(prev.values().to_vec()), cfg.seed)?,
        (None, InitKind::Random) => init_attack(sys, k, &InitStrategy::Random, cfg.seed)?,
        (None, _) => init_attack(sys, k, &InitStrategy::UniformSmall, cfg.seed)?,
    };
    if k == 0 || n == 0 {
        y = AttackVector::zeros(n, k as f64);
    }

    let started = Instant::now();
    let mut sol = solve_third_stage(sys, x, &y, solver).map_err(|e| abort(0, e, &trace))?;
    let mut loss = sol.attack_loss(sys);
    trace.initial_loss = loss;
    let mut pending_solves = 1usize;
    let mut pending_seconds = started.elapsed().as_secs_f64();

    if k == 0 || n == 0 {
        trace.iterations.push(AttackIteration {
            iteration: 1,
            loss,
            grad_norm: 0.0,
            step: 0.0,
            projection_active: false,
            third_stage_solves: pending_solves,
            seconds: pending_seconds,
        });
        trace.best_loss = loss;
        trace.final_y = y.values().to_vec();
        trace.converged = true;
        trace.reason = "empty threat model".into();
        return Ok(AttackResult { y, solution: sol, trace });
    }

    trace.reason = "iteration limit".into();
    for iteration in 1..=cfg.max_iters {
        let t0 = Instant::now();
        let grad = attack_gradient(sys, x, &y, &sol).map_err(|e| abort(iteration, e, &trace))?;
        let gnorm = grad.inf_norm();
        let mut record = AttackIteration {
            iteration,
            loss,
            grad_norm: gnorm,
            step: 0.0,
            projection_active: false,
            third_stage_solves: pending_solves,
            seconds: 0.0,
        };
        pending_solves = 0;
        if gnorm == 0.0 || cfg.step == 0.0 {
            record.seconds = pending_seconds + t0.elapsed().as_secs_f64();
            trace.iterations.push(record);
            trace.converged = true;
            trace.reason = "zero step".into();
            break;
        }
        let mut step = cfg.step;
        let (mut failures, mut backtracks) = (0usize, 0usize);
        let mut accepted = None;
        let mut stop = None;
        loop {
            let raw: Vec<f64> = y.values().iter().zip(&grad.total).map(|(v, g)| v + step * g / gnorm).collect();
            let clipped_sum: f64 = raw.iter().map(|v| v.clamp(0.0, 1.0)).sum();
            let active = raw.iter().any(|v| !(0.0..=1.0).contains(v)) || clipped_sum > k as f64;
            let candidate = project_attack(&raw, k);
            let moved = candidate
                .values()
                .iter()
                .zip(y.values())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if moved < cfg.tol {
                stop = Some("attack step below tolerance");
                break;
            }
            let t_solve = Instant::now();
            match solve_third_stage(sys, x, &candidate, solver) {
                Ok(next) => {
                    record.third_stage_solves += 1;
                    let _ = t_solve;
                    let next_loss = next.attack_loss(sys);
                    if next_loss >= loss {
                        accepted = Some((candidate, next, next_loss, step, active));
                        break;
                    }
                    backtracks += 1;
                    if backtracks > cfg.max_backtracks {
                        stop = Some("no ascent along the gradient");
                        break;
                    }
                }
                Err(e) => {
                    record.third_stage_solves += 1;
                    failures += 1;
                    if failures > cfg.max_retries {
                        record.seconds = pending_seconds + t0.elapsed().as_secs_f64();
                        trace.iterations.push(record);
                        return Err(abort(iteration, e, &trace));
                    }
                }
            }
            step /= 2.0;
        }
        match accepted {
            Some((candidate, next, next_loss, used, active)) => {
                record.step = used;
                record.projection_active = active;
                y = candidate;
                sol = next;
                loss = next_loss;
            }
            None => {
                record.seconds = pending_seconds + t0.elapsed().as_secs_f64();
                trace.iterations.push(record);
                trace.converged = true;
                trace.reason = stop.unwrap_or("stopped").into();
                break;
            }
        }
        record.seconds = pending_seconds + t0.elapsed().as_secs_f64();
        pending_seconds = 0.0;
        trace.iterations.push(record);
    }
    trace.best_loss = loss;
    trace.final_y = y.values().to_vec();
    Ok(AttackResult { y, solution: sol, trace })
}
