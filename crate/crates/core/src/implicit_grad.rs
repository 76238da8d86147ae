//! Gradients of the inner loss through the converged third-stage solve.
//!
//! The solver's fixed point `F(u; x, y) = 0` gives `du/dy = -J^{-1} dF/dy`, so
//! `dl/dy = (J^{-T} v)' (-dF/dy)` with `v = dl/du`. One transpose solve against
//! the stored factor serves every coordinate. `-dF/dy_j` touches at most eight
//! KKT rows for a branch and six for a generator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AttackVector, Device, PowerSystem};
use crate::opf::{BoundSource, SolverConfig};
use crate::powerflow::Dispatch;
use crate::third_stage::{solve_third_stage, ThirdStageSolution};

/// Largest stencil a single device can produce.
pub const MAX_STENCIL_NNZ: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGradient {
    pub total: Vec<f64>,
    /// `dl/dy` holding the solution fixed. Zero: the loss has no direct `y` term.
    pub explicit: Vec<f64>,
    /// Contribution through the solution.
    pub implicit: Vec<f64>,
}

impl AttackGradient {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn inf_norm(&self) -> f64 {
        self.total.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `-dF/dy_j` for every outage device as sparse `(kkt row, value)` lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDerivativeStencil {
    pub devices: Vec<Vec<(usize, f64)>>,
}

impl SparseDerivativeStencil {
    pub fn nnz(&self, device: usize) -> usize {
        self.devices[device].len()
    }

    pub fn max_nnz(&self) -> usize {
        self.devices.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `v' stencil_j` for every device.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.devices
            .iter()
            .map(|entries| entries.iter().map(|&(r, val)| v[r] * val).sum())
            .collect()
    }
}

/// Stencil at the solution. Structural entries are kept even when their value is zero.
pub fn derivative_stencil(
    sys: &PowerSystem,
    x: &Dispatch,
    y: &AttackVector,
    sol: &ThirdStageSolution,
) -> Result<SparseDerivativeStencil> {
    sol.ensure_fresh(x, y)?;
    let u = sol.pack(sys);
    Ok(stencil_at(sys, sol, &u))
}

fn stencil_at(sys: &PowerSystem, sol: &ThirdStageSolution, u: &[f64]) -> SparseDerivativeStencil {
    let problem = &sol.problem;
    let l = &problem.layout;
    let (np, me) = (problem.n_primal(), problem.n_eq());
    let nb = l.nb;
    let lam = &u[np..np + me];
    let mu = &u[np + me..];
    let (vm, va) = problem.voltages(&u[..np]);

    let mut devices = Vec::with_capacity(sys.n_outage());
    for device in sys.outage_devices() {
        let mut entries: Vec<(usize, f64)> = Vec::new();
        match *device {
            Device::Branch(b) => {
                let ends: Vec<_> = problem.net.ends.iter().filter(|e| e.branch == b).collect();
                let mut stat: Vec<(usize, f64)> = Vec::new();
                for end in &ends {
                    let e = end.power(&vm, &va, false);
                    entries.push((np + end.bus, -e.p));
                    entries.push((np + nb + end.bus, -e.q));
                    let (lp, lq) = (lam[end.bus], lam[nb + end.bus]);
                    for (k, var) in end.vars().into_iter().enumerate() {
                        if let Some(c) = l.bus_var(var) {
                            let val = -(lp * e.dp[k] + lq * e.dq[k]);
                            match stat.iter_mut().find(|(r, _)| *r == c) {
                                Some(slot) => slot.1 += val,
                                None => stat.push((c, val)),
                            }
                        }
                    }
                }
                entries.extend(stat);
            }
            Device::Generator(g) => {
                for (i, bnd) in problem.bounds.iter().enumerate() {
                    let mine = matches!(bnd.source,
                        BoundSource::GenP(k) | BoundSource::GenQ(k) | BoundSource::Ramp(k) if k == g);
                    if mine && bnd.dvalue_dy != 0.0 {
                        entries.push((np + me + i, -mu[i] * bnd.sign() * bnd.dvalue_dy));
                    }
                }
            }
        }
        devices.push(entries);
    }
    SparseDerivativeStencil { devices }
}

/// `dl/du` for `l = cost_scale * f_cont + 0.5 |s|^2`.
fn loss_sensitivity(sol: &ThirdStageSolution, u: &[f64]) -> Vec<f64> {
    let problem = &sol.problem;
    let l = &problem.layout;
    let mut v = vec![0.0; problem.n_kkt()];
    for g in 0..l.ng {
        let [c2, c1, _] = problem.gen_cost[g];
        v[l.pg(g)] = problem.cost_scale * (2.0 * c2 * u[l.pg(g)] + c1);
    }
    if l.slack {
        for r in 0..problem.n_eq() {
            v[l.s(r)] = u[l.s(r)];
        }
    }
    v
}

fn finite_or_error(values: &[f64], what: &str) -> Result<()> {
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: coordinate {k} is {}", values[k])));
    }
    Ok(())
}

/// Implicit gradient of the inner loss with respect to the attack.
pub fn attack_gradient(
    sys: &PowerSystem,
    x: &Dispatch,
    y: &AttackVector,
    sol: &ThirdStageSolution,
) -> Result<AttackGradient> {
    sol.ensure_fresh(x, y)?;
    let u = sol.pack(sys);
    let v = loss_sensitivity(sol, &u);
    let t = sol.kkt_factorization.solve_transpose(&v)?;
    let stencil = stencil_at(sys, sol, &u);
    let implicit = stencil.apply(&t);
    finite_or_error(&implicit, "attack gradient")?;
    Ok(AttackGradient {
        total: implicit.clone(),
        explicit: vec![0.0; implicit.len()],
        implicit,
    })
}

/// `v' (-(dJ/dy_j) u* + db/dy_j)` for every device.
pub fn djdy_vjp(
    sys: &PowerSystem,
    x: &Dispatch,
    y: &AttackVector,
    sol: &ThirdStageSolution,
    v: &[f64],
) -> Result<Vec<f64>> {
    sol.ensure_fresh(x, y)?;
    if v.len() != sol.kkt_dim() {
        return Err(Error::Dimension {
            what: "vector-Jacobian product input",
            expected: sol.kkt_dim(),
            got: v.len(),
        });
    }
    let u = sol.pack(sys);
    Ok(stencil_at(sys, sol, &u).apply(v))
}

/// Gradient of the inner loss with respect to the dispatch through the same
/// fixed point. The base cost is not included.
pub fn dispatch_gradient(sys: &PowerSystem, x: &Dispatch, y: &AttackVector, sol: &ThirdStageSolution) -> Result<Vec<f64>> {
    sol.ensure_fresh(x, y)?;
    let u = sol.pack(sys);
    let v = loss_sensitivity(sol, &u);
    let t = sol.kkt_factorization.solve_transpose(&v)?;
    let stencil = dispatch_stencil(sol, &u, x.len());
    let grad = stencil.apply(&t);
    finite_or_error(&grad, "dispatch gradient")?;
    Ok(grad)
}

/// `-dF/dx_k`: only the ramp and voltage-band bounds move with the dispatch.
fn dispatch_stencil(sol: &ThirdStageSolution, u: &[f64], n: usize) -> SparseDerivativeStencil {
    let problem = &sol.problem;
    let off = problem.n_primal() + problem.n_eq();
    let mut devices = vec![Vec::new(); n];
    for (i, b) in problem.bounds.iter().enumerate() {
        if let Some((k, rate)) = b.dvalue_dx {
            devices[k].push((off + i, -u[off + i] * b.sign() * rate));
        }
    }
    SparseDerivativeStencil { devices }
}

/// `sum_i mu_i dh_i/dx_k`: sensitivity of the contingency optimum to the
/// dispatch with the contingency solution frozen.
pub fn coupling_vector(sys: &PowerSystem, sol: &ThirdStageSolution) -> Vec<f64> {
    let problem = &sol.problem;
    let n = 2 * sys.n_gen() - 1;
    let mut c = vec![0.0; n];
    for (i, b) in problem.bounds.iter().enumerate() {
        if let Some((k, rate)) = b.dvalue_dx {
            c[k] += sol.mu_cont[i] * b.sign() * rate;
        }
    }
    c
}

/// Finite-difference gradient of the inner loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffGradient {
    pub values: Vec<f64>,
    /// Coordinates where `y +- h` left `[0, 1]` and a one-sided difference was used.
    pub one_sided: Vec<bool>,
}

/// Central differences of the inner loss with a fresh third-stage solve per
/// evaluation, one-sided where `y_j +- h` leaves `[0, 1]`.
pub fn finite_diff_gradient(
    sys: &PowerSystem,
    x: &Dispatch,
    y: &AttackVector,
    h: f64,
    cfg: &SolverConfig,
) -> Result<FiniteDiffGradient> {
    // the perturbed point may exceed the budget by h; only the box matters here
    let loose = y.len() as f64 + 1.0;
    box_finite_differences(y.values(), h, |v| {
        let yy = AttackVector::new(v.to_vec(), loose)?;
        Ok(solve_third_stage(sys, x, &yy, cfg)?.attack_loss(sys))
    })
}

/// Differences of `f` on `[0, 1]^n` around `y`, coordinates evaluated in
/// parallel. Failures are tagged with their coordinate.
pub fn box_finite_differences<F>(y: &[f64], h: f64, f: F) -> Result<FiniteDiffGradient>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(h > 0.0 && h < 0.5) {
        return Err(Error::InvalidInput(format!("finite-difference step {h} must lie in (0, 0.5)")));
    }
    let eval = |j: usize, val: f64| -> Result<f64> {
        let mut v = y.to_vec();
        v[j] = val;
        f(&v)
    };
    let base = if y.iter().any(|&v| v - h < 0.0 || v + h > 1.0) {
        Some(f(y)?)
    } else {
        None
    };
    let results: Vec<Result<(f64, bool)>> = (0..y.len())
        .into_par_iter()
        .map(|j| {
            let yj = y[j];
            let wrap = |e: Error| Error::Coordinate {
                coordinate: j,
                source: Box::new(e),
            };
            if yj + h > 1.0 {
                let lo = eval(j, yj - h).map_err(wrap)?;
                Ok(((base.expect("base loss evaluated") - lo) / h, true))
            } else if yj - h < 0.0 {
                let hi = eval(j, yj + h).map_err(wrap)?;
                Ok(((hi - base.expect("base loss evaluated")) / h, true))
            } else {
                let hi = eval(j, yj + h).map_err(wrap)?;
                let lo = eval(j, yj - h).map_err(wrap)?;
                Ok(((hi - lo) / (2.0 * h), false))
            }
        })
        .collect();
    let mut values = Vec::with_capacity(y.len());
    let mut one_sided = Vec::with_capacity(y.len());
    for r in results {
        let (v, flag) = r?;
        values.push(v);
        one_sided.push(flag);
    }
    Ok(FiniteDiffGradient { values, one_sided })
}
