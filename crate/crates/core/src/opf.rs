//! Primal-dual interior-point Newton solver for AC optimal power flow problems.
//!
//! The unknown vector is `u = (p, lambda, mu)` where the primal part is
//! `p = (Pg, Qg, Vm, Va[free], s)`. Every inequality is a simple bound on one
//! primal variable, written `h_i(p) <= 0`. The solver drives
//!
//! ```text
//! F(u) = [ grad f + Jg' lambda + sum_i mu_i grad h_i ;  g(p) + s ;  mu_i h_i + eps ]
//! ```
//!
//! to zero while the barrier `eps` shrinks geometrically. The final Jacobian
//! factorization is kept for implicit differentiation.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bus_components, AttackVector, PowerSystem};
use crate::linalg::{Factorization, SparseMatrix, SymbolicCache};
use crate::network::{BusVar, Network};
use crate::powerflow::{inf_norm, Dispatch, OperatingPoint};

/// Padding that keeps a fully outaged generator's box from collapsing to a point.
pub(crate) const OUTAGE_PAD: f64 = 1e-6;
/// Narrowest box the solver accepts for a single variable.
pub(crate) const MIN_BOX: f64 = 1e-6;

/// Numerical settings shared by every interior-point solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Required infinity norm of the KKT residual at the final barrier level.
    pub kkt_tol: f64,
    pub barrier_init: f64,
    pub barrier_min: f64,
    pub barrier_factor: f64,
    /// The barrier shrinks once the residual is below `barrier_kappa * eps`.
    pub barrier_kappa: f64,
    pub max_newton: usize,
    pub fraction_to_boundary: f64,
    /// Extra Newton iterations after `kkt_tol` is met stop at this residual.
    pub polish_tol: f64,
    pub max_polish: usize,
    /// Multiplier turning $/h generation cost into loss units.
    pub cost_scale: f64,
    /// Half width of the band tying contingency generator voltages to the dispatch.
    pub voltage_band: f64,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
    /// CSV file receiving `iteration,residual,barrier` lines.
    #[serde(skip)]
    pub trace: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kkt_tol: 1e-6,
            barrier_init: 0.1,
            barrier_min: 1e-12,
            barrier_factor: 0.2,
            barrier_kappa: 10.0,
            max_newton: 100,
            fraction_to_boundary: 0.995,
            polish_tol: 1e-11,
            max_polish: 3,
            cost_scale: 1e-10,
            voltage_band: 0.02,
            pf_tol: 1e-8,
            pf_max_iter: 50,
            trace: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("kkt_tol", self.kkt_tol),
            ("barrier_init", self.barrier_init),
            ("barrier_min", self.barrier_min),
            ("barrier_kappa", self.barrier_kappa),
            ("polish_tol", self.polish_tol),
            ("cost_scale", self.cost_scale),
            ("voltage_band", self.voltage_band),
            ("pf_tol", self.pf_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("solver.{name} must be positive, got {v}"));
            }
        }
        if !(self.barrier_factor > 0.0 && self.barrier_factor < 1.0) {
            out.push(format!("solver.barrier_factor must lie in (0, 1), got {}", self.barrier_factor));
        }
        if !(self.fraction_to_boundary > 0.0 && self.fraction_to_boundary < 1.0) {
            out.push(format!(
                "solver.fraction_to_boundary must lie in (0, 1), got {}",
                self.fraction_to_boundary
            ));
        }
        if self.barrier_min > self.barrier_init {
            out.push("solver.barrier_min exceeds solver.barrier_init".into());
        }
        if self.max_newton == 0 || self.pf_max_iter == 0 {
            out.push("solver iteration limits must be positive".into());
        }
        out
    }
}

/// What a bound limits, used for reporting and for attack derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSource {
    GenP(usize),
    GenQ(usize),
    Voltage(usize),
    Ramp(usize),
    Band(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Bound {
    pub var: usize,
    pub upper: bool,
    pub value: f64,
    pub source: BoundSource,
    pub dvalue_dy: f64,
    /// Dispatch coordinate the bound moves with, and the rate.
    pub dvalue_dx: Option<(usize, f64)>,
}

impl Bound {
    /// Derivative of `h` with respect to the bound value.
    pub fn sign(&self) -> f64 {
        if self.upper {
            -1.0
        } else {
            1.0
        }
    }
}

/// Index map of the primal variables.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub ng: usize,
    pub nb: usize,
    pub va_index: Vec<Option<usize>>,
    pub n_va: usize,
    pub slack: bool,
}

impl Layout {
    pub fn pg(&self, g: usize) -> usize {
        g
    }
    pub fn qg(&self, g: usize) -> usize {
        self.ng + g
    }
    pub fn vm(&self, i: usize) -> usize {
        2 * self.ng + i
    }
    pub fn va(&self, i: usize) -> Option<usize> {
        self.va_index[i].map(|k| 2 * self.ng + self.nb + k)
    }
    pub fn s(&self, row: usize) -> usize {
        2 * self.ng + self.nb + self.n_va + row
    }
    pub fn bus_var(&self, v: BusVar) -> Option<usize> {
        match v {
            BusVar::Vm(i) => Some(self.vm(i)),
            BusVar::Va(i) => self.va(i),
        }
    }
    pub fn n_primal(&self) -> usize {
        2 * self.ng + self.nb + self.n_va + if self.slack { 2 * self.nb } else { 0 }
    }
    pub fn n_eq(&self) -> usize {
        2 * self.nb
    }
}

/// One optimal power flow instance.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub layout: Layout,
    pub net: Network,
    pub bounds: Vec<Bound>,
    pub cost_scale: f64,
    /// Linear objective terms `(primal variable, coefficient)`.
    pub linear: Vec<(usize, f64)>,
    pub gen_cost: Vec<[f64; 3]>,
    pub gen_bus: Vec<usize>,
    pub demand: Vec<(f64, f64)>,
    pub diagnostics: Vec<String>,
}

/// Options for [`build_problem`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProblemSpec<'a> {
    pub y: Option<&'a AttackVector>,
    /// Add the power-balance slack `s` and its quadratic penalty.
    pub slack: bool,
    /// Base dispatch that ramp and voltage-band constraints refer to.
    pub coupling: Option<&'a Dispatch>,
    /// Linear objective over dispatch coordinates.
    pub linear: Option<&'a [f64]>,
    pub voltage_band: f64,
    pub cost_scale: f64,
}

/// Primal variable carrying dispatch coordinate `k`.
pub(crate) fn dispatch_var(sys: &PowerSystem, layout: &Layout, k: usize) -> usize {
    let np = sys.n_gen() - 1;
    if k < np {
        layout.pg(sys.dispatchable_generators()[k])
    } else {
        layout.vm(sys.generators()[k - np].bus)
    }
}

pub(crate) fn build_problem(sys: &PowerSystem, spec: ProblemSpec<'_>) -> Problem {
    let nb = sys.n_bus();
    let ng = sys.n_gen();
    let scaling = sys.branch_scaling(spec.y);
    let slack_bus = sys.slack_bus();

    // Angles fixed at zero: the slack bus and, when outages split the network,
    // the lowest-numbered bus of every island without the slack.
    let mut fixed = vec![false; nb];
    fixed[slack_bus] = true;
    if scaling.iter().any(|&s| s == 0.0) {
        let comp = bus_components(sys, &scaling);
        let mut seen = std::collections::BTreeSet::new();
        seen.insert(comp[slack_bus]);
        for i in 0..nb {
            if seen.insert(comp[i]) {
                fixed[i] = true;
            }
        }
    }
    let mut va_index = vec![None; nb];
    let mut n_va = 0;
    for i in 0..nb {
        if !fixed[i] {
            va_index[i] = Some(n_va);
            n_va += 1;
        }
    }
    let layout = Layout {
        ng,
        nb,
        va_index,
        n_va,
        slack: spec.slack,
    };

    let mut bounds = Vec::new();
    let mut diagnostics = Vec::new();
    let gens = sys.generators();
    for (g, gen) in gens.iter().enumerate() {
        let yg = sys.generator_outage(g, spec.y);
        let eligible = sys.generator_device(g).is_some();
        let d = if eligible { 1.0 } else { 0.0 };
        let pad = OUTAGE_PAD / 2.0;
        let boxed = |lo: f64, hi: f64, source: BoundSource, var: usize, out: &mut Vec<Bound>| {
            let mut l = (1.0 - yg) * lo - yg * pad;
            let mut u = (1.0 - yg) * hi + yg * pad;
            let mut dl = d * (-lo - pad);
            let mut du = d * (-hi + pad);
            if u - l < MIN_BOX {
                let (mid, dmid) = ((l + u) / 2.0, (dl + du) / 2.0);
                l = mid - MIN_BOX / 2.0;
                u = mid + MIN_BOX / 2.0;
                dl = dmid;
                du = dmid;
            }
            out.push(Bound {
                var,
                upper: false,
                value: l,
                source,
                dvalue_dy: dl,
                dvalue_dx: None,
            });
            out.push(Bound {
                var,
                upper: true,
                value: u,
                source,
                dvalue_dy: du,
                dvalue_dx: None,
            });
            (l, u)
        };
        let (plo, phi) = boxed(gen.p_min, gen.p_max, BoundSource::GenP(g), layout.pg(g), &mut bounds);
        boxed(gen.q_min, gen.q_max, BoundSource::GenQ(g), layout.qg(g), &mut bounds);
        if let (Some(x), Some(k)) = (spec.coupling, sys.dispatch_slot(g)) {
            let center = (1.0 - yg) * x.p[k];
            let half = gen.ramp * gen.p_max;
            let (lo, hi) = (center - half, center + half);
            if lo.max(plo) > hi.min(phi) - MIN_BOX {
                diagnostics.push(format!(
                    "ramp window [{lo:.6}, {hi:.6}] of generator {g} misses its limits [{plo:.6}, {phi:.6}]; ramp dropped"
                ));
            } else {
                for (upper, value) in [(false, lo), (true, hi)] {
                    bounds.push(Bound {
                        var: layout.pg(g),
                        upper,
                        value,
                        source: BoundSource::Ramp(g),
                        dvalue_dy: -d * x.p[k],
                        dvalue_dx: Some((k, 1.0 - yg)),
                    });
                }
            }
        }
    }
    for (i, bus) in sys.buses().iter().enumerate() {
        for (upper, value) in [(false, bus.v_min), (true, bus.v_max)] {
            bounds.push(Bound {
                var: layout.vm(i),
                upper,
                value,
                source: BoundSource::Voltage(i),
                dvalue_dy: 0.0,
                dvalue_dx: None,
            });
        }
        if let (Some(x), Some(g)) = (spec.coupling, sys.generator_at_bus(i)) {
            let k = ng - 1 + g;
            let (lo, hi) = (x.v[g] - spec.voltage_band, x.v[g] + spec.voltage_band);
            if lo.max(bus.v_min) > hi.min(bus.v_max) - MIN_BOX {
                diagnostics.push(format!("voltage band of generator {g} misses the bus limits; band dropped"));
            } else {
                for (upper, value) in [(false, lo), (true, hi)] {
                    bounds.push(Bound {
                        var: layout.vm(i),
                        upper,
                        value,
                        source: BoundSource::Band(i),
                        dvalue_dy: 0.0,
                        dvalue_dx: Some((k, 1.0)),
                    });
                }
            }
        }
    }

    let mut linear = Vec::new();
    if let Some(c) = spec.linear {
        for (k, &ck) in c.iter().enumerate() {
            if ck != 0.0 {
                linear.push((dispatch_var(sys, &layout, k), ck));
            }
        }
    }

    Problem {
        layout,
        net: Network::new(sys, scaling),
        bounds,
        cost_scale: spec.cost_scale,
        linear,
        gen_cost: gens.iter().map(|g| g.cost).collect(),
        gen_bus: gens.iter().map(|g| g.bus).collect(),
        demand: (0..nb).map(|i| sys.bus_demand(i)).collect(),
        diagnostics,
    }
}

impl Problem {
    pub fn n_primal(&self) -> usize {
        self.layout.n_primal()
    }
    pub fn n_eq(&self) -> usize {
        self.layout.n_eq()
    }
    pub fn n_ineq(&self) -> usize {
        self.bounds.len()
    }
    pub fn n_kkt(&self) -> usize {
        self.n_primal() + self.n_eq() + self.n_ineq()
    }

    /// Full voltage vectors with fixed angles at zero.
    pub fn voltages(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let vm = (0..l.nb).map(|i| p[l.vm(i)]).collect();
        let va = (0..l.nb).map(|i| l.va(i).map_or(0.0, |k| p[k])).collect();
        (vm, va)
    }

    pub fn h(&self, p: &[f64], i: usize) -> f64 {
        let b = &self.bounds[i];
        if b.upper {
            p[b.var] - b.value
        } else {
            b.value - p[b.var]
        }
    }

    /// Power-balance residual `g(p)` without the slack.
    pub fn balance(&self, p: &[f64]) -> Vec<f64> {
        let nb = self.layout.nb;
        let (vm, va) = self.voltages(p);
        let (pn, qn) = self.net.injections(&vm, &va);
        let mut g = vec![0.0; 2 * nb];
        for i in 0..nb {
            g[i] = -self.demand[i].0 - pn[i];
            g[nb + i] = -self.demand[i].1 - qn[i];
        }
        for (k, &bus) in self.gen_bus.iter().enumerate() {
            g[bus] += p[self.layout.pg(k)];
            g[nb + bus] += p[self.layout.qg(k)];
        }
        g
    }

    pub fn residual(&self, u: &[f64], eps: f64) -> Vec<f64> {
        let l = &self.layout;
        let (np, me) = (self.n_primal(), self.n_eq());
        let nb = l.nb;
        let p = &u[..np];
        let lam = &u[np..np + me];
        let mu = &u[np + me..];
        let mut f = vec![0.0; self.n_kkt()];

        for g in 0..l.ng {
            let [c2, c1, _] = self.gen_cost[g];
            let pg = p[l.pg(g)];
            f[l.pg(g)] += self.cost_scale * (2.0 * c2 * pg + c1) + lam[self.gen_bus[g]];
            f[l.qg(g)] += lam[nb + self.gen_bus[g]];
        }
        for &(v, c) in &self.linear {
            f[v] += c;
        }
        let (vm, va) = self.voltages(p);
        for (row, var, val) in self.net.injection_jacobian(&vm, &va) {
            if let Some(c) = l.bus_var(var) {
                f[c] -= val * lam[row];
            }
        }
        let mut g = self.balance(p);
        if l.slack {
            for r in 0..me {
                f[l.s(r)] += p[l.s(r)] + lam[r];
                g[r] += p[l.s(r)];
            }
        }
        f[np..np + me].copy_from_slice(&g);
        for (i, b) in self.bounds.iter().enumerate() {
            f[b.var] -= b.sign() * mu[i];
            f[np + me + i] = mu[i] * self.h(p, i) + eps;
        }
        f
    }

    pub fn jacobian(&self, u: &[f64]) -> SparseMatrix {
        let l = &self.layout;
        let (np, me) = (self.n_primal(), self.n_eq());
        let nb = l.nb;
        let p = &u[..np];
        let lam = &u[np..np + me];
        let mu = &u[np + me..];
        let mut t = Vec::with_capacity(24 * self.net.ends.len() + 4 * self.n_kkt());

        for g in 0..l.ng {
            let c2 = self.gen_cost[g][0];
            t.push((l.pg(g), l.pg(g), self.cost_scale * 2.0 * c2));
            let (rp, rq) = (np + self.gen_bus[g], np + nb + self.gen_bus[g]);
            t.push((rp, l.pg(g), 1.0));
            t.push((l.pg(g), rp, 1.0));
            t.push((rq, l.qg(g), 1.0));
            t.push((l.qg(g), rq, 1.0));
        }
        let (vm, va) = self.voltages(p);
        for (row, var, val) in self.net.injection_jacobian(&vm, &va) {
            if let Some(c) = l.bus_var(var) {
                t.push((np + row, c, -val));
                t.push((c, np + row, -val));
            }
        }
        let hess = self.net.weighted_injection_hessian(&vm, &va, &lam[..nb], &lam[nb..]);
        for (a, b, val) in hess {
            if let (Some(ca), Some(cb)) = (l.bus_var(a), l.bus_var(b)) {
                t.push((ca, cb, -val));
            }
        }
        if l.slack {
            for r in 0..me {
                t.push((l.s(r), l.s(r), 1.0));
                t.push((np + r, l.s(r), 1.0));
                t.push((l.s(r), np + r, 1.0));
            }
        }
        for (i, b) in self.bounds.iter().enumerate() {
            let row = np + me + i;
            let dh = -b.sign();
            t.push((b.var, row, dh));
            t.push((row, b.var, mu[i] * dh));
            t.push((row, row, self.h(p, i)));
        }
        SparseMatrix::from_triplets(self.n_kkt(), t)
    }

    /// Starting vector: primal values pushed strictly inside their bounds,
    /// `lambda = 0`, `mu = 1`.
    /// KKT unknown vector from an operating point, slack and multipliers.
    pub(crate) fn pack(&self, op: &OperatingPoint, s: &[f64], lambda: &[f64], mu: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let (np, me) = (self.n_primal(), self.n_eq());
        let mut u = vec![0.0; self.n_kkt()];
        for g in 0..l.ng {
            u[l.pg(g)] = op.pg[g];
            u[l.qg(g)] = op.qg[g];
        }
        for i in 0..l.nb {
            u[l.vm(i)] = op.vm[i];
            if let Some(k) = l.va(i) {
                u[k] = op.va[i];
            }
        }
        if l.slack {
            for r in 0..me {
                u[l.s(r)] = s[r];
            }
        }
        u[np..np + me].copy_from_slice(lambda);
        u[np + me..].copy_from_slice(mu);
        u
    }

    pub fn initial_point(&self, op: &OperatingPoint) -> Vec<f64> {
        let l = &self.layout;
        let mut p = vec![0.0; self.n_primal()];
        for g in 0..l.ng {
            p[l.pg(g)] = op.pg[g];
            p[l.qg(g)] = op.qg[g];
        }
        let ref_angle = op.va[(0..l.nb).find(|&i| l.va(i).is_none()).unwrap_or(0)];
        for i in 0..l.nb {
            p[l.vm(i)] = op.vm[i];
            if let Some(k) = l.va(i) {
                p[k] = op.va[i] - ref_angle;
            }
        }
        let mut lo = vec![f64::NEG_INFINITY; p.len()];
        let mut hi = vec![f64::INFINITY; p.len()];
        for b in &self.bounds {
            if b.upper {
                hi[b.var] = hi[b.var].min(b.value);
            } else {
                lo[b.var] = lo[b.var].max(b.value);
            }
        }
        for k in 0..p.len() {
            let (a, b) = (lo[k], hi[k]);
            let margin = if a.is_finite() && b.is_finite() {
                (0.1 * (b - a)).min(1e-2)
            } else {
                1e-2
            };
            if a.is_finite() && b.is_finite() && b - a <= 2.0 * margin {
                p[k] = (a + b) / 2.0;
                continue;
            }
            if a.is_finite() {
                p[k] = p[k].max(a + margin);
            }
            if b.is_finite() {
                p[k] = p[k].min(b - margin);
            }
        }
        let mut u = p;
        u.extend(std::iter::repeat_n(0.0, self.n_eq()));
        u.extend(std::iter::repeat_n(1.0, self.n_ineq()));
        u
    }
}

/// Converged interior-point solve.
#[derive(Debug, Clone)]
pub(crate) struct IpmSolution {
    pub u: Vec<f64>,
    pub eps: f64,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub barrier_history: Vec<f64>,
    pub factorization: Factorization,
    /// `J u - F(u)`, the right-hand side of the final Newton system.
    pub rhs: Vec<f64>,
}

pub(crate) fn solve_ipm(problem: &Problem, mut u: Vec<f64>, cfg: &SolverConfig, context: &str) -> Result<IpmSolution> {
    let (np, me) = (problem.n_primal(), problem.n_eq());
    let mu_off = np + me;
    let mut trace = match &cfg.trace {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "iteration,residual,barrier")?;
            Some(f)
        }
        None => None,
    };
    let eps_min = cfg.barrier_min;
    let mut eps = cfg.barrier_init.max(eps_min);
    let mut cache = SymbolicCache::default();
    let mut history = Vec::new();
    let mut barrier_history = Vec::new();
    let mut polish = 0usize;

    for iter in 1..=cfg.max_newton {
        let mut f = problem.residual(&u, eps);
        let mut r = inf_norm(&f);
        while eps > eps_min && r <= cfg.barrier_kappa * eps {
            eps = (eps * cfg.barrier_factor).max(eps_min);
            f = problem.residual(&u, eps);
            r = inf_norm(&f);
        }
        history.push(r);
        barrier_history.push(eps);
        if let Some(t) = trace.as_mut() {
            writeln!(t, "{iter},{r:.6e},{eps:.3e}")?;
        }
        if !r.is_finite() || r > 1e12 {
            return Err(Error::NonConvergence {
                context: format!("{context} diverged"),
                iterations: iter,
                residual: r,
                history,
            });
        }
        let jac = problem.jacobian(&u);
        let fact = Factorization::new(jac, &mut cache, context)?;
        let at_min = eps <= eps_min;
        if at_min && r <= cfg.kkt_tol && (r <= cfg.polish_tol || polish >= cfg.max_polish) {
            let mut rhs = fact.matrix().mul_vec(&u);
            for (b, fi) in rhs.iter_mut().zip(&f) {
                *b -= fi;
            }
            return Ok(IpmSolution {
                u,
                eps,
                iterations: iter,
                residual: r,
                history,
                barrier_history,
                factorization: fact,
                rhs,
            });
        }
        if at_min && r <= cfg.kkt_tol {
            polish += 1;
        }
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let du = fact.solve(&neg)?;

        let tau = cfg.fraction_to_boundary;
        let mut ap = 1.0f64;
        let mut ad = 1.0f64;
        for (i, b) in problem.bounds.iter().enumerate() {
            let h = problem.h(&u, i);
            let dh = -b.sign() * du[b.var];
            if dh > 0.0 {
                ap = ap.min(tau * (-h) / dh);
            }
            let dmu = du[mu_off + i];
            if dmu < 0.0 {
                ad = ad.min(tau * u[mu_off + i] / (-dmu));
            }
        }
        for k in 0..np {
            u[k] += ap * du[k];
        }
        for k in np..u.len() {
            u[k] += ad * du[k];
        }
    }
    let residual = *history.last().unwrap_or(&f64::INFINITY);
    Err(Error::NonConvergence {
        context: context.to_string(),
        iterations: cfg.max_newton,
        residual,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::two_bus;

    fn problem_and_point() -> (Problem, Vec<f64>) {
        let sys = two_bus(0.6, 0.2);
        let x = Dispatch::new(&sys, vec![], vec![1.02]).unwrap();
        let y = AttackVector::new(vec![0.3], 1.0).unwrap();
        let prob = build_problem(
            &sys,
            ProblemSpec {
                y: Some(&y),
                slack: true,
                coupling: Some(&x),
                linear: None,
                voltage_band: 0.02,
                cost_scale: 1.0,
            },
        );
        let n = prob.n_kkt();
        let u: Vec<f64> = (0..n).map(|k| 0.3 + 0.1 * ((k * 7 % 11) as f64 / 11.0)).collect();
        (prob, u)
    }

    #[test]
    fn kkt_jacobian_matches_finite_differences() {
        let (prob, mut u) = problem_and_point();
        let l = prob.layout.clone();
        u[l.vm(0)] = 1.01;
        u[l.vm(1)] = 0.97;
        let j = prob.jacobian(&u);
        let h = 1e-6;
        for c in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[c] += h;
            dn[c] -= h;
            let (fu, fd) = (prob.residual(&up, 0.01), prob.residual(&dn, 0.01));
            for r in 0..u.len() {
                let fdv = (fu[r] - fd[r]) / (2.0 * h);
                let an = j.get(r, c);
                assert!((fdv - an).abs() <= 1e-6 * an.abs().max(1.0), "({r},{c}) fd {fdv} an {an}");
            }
        }
    }

    #[test]
    fn initial_point_is_strictly_interior() {
        let (prob, _) = problem_and_point();
        let sys = two_bus(0.6, 0.2);
        let op = OperatingPoint {
            pg: vec![5.0],
            qg: vec![-3.0],
            vm: vec![1.3, 0.5],
            va: vec![0.0, 0.0],
        };
        let _ = sys;
        let u = prob.initial_point(&op);
        for i in 0..prob.n_ineq() {
            assert!(prob.h(&u, i) < 0.0, "bound {i}");
        }
    }
}

/// Base-case optimal power flow result.
#[derive(Debug, Clone)]
pub struct BaseOpfSolution {
    pub dispatch: Dispatch,
    pub state: crate::powerflow::NetworkState,
    pub point: OperatingPoint,
    /// Generation cost in $/h.
    pub cost: f64,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Barrier parameter at exit.
    pub barrier: f64,
}

/// Minimizes generation cost subject to the base-case power flow and limits.
pub fn solve_base_opf(sys: &PowerSystem, cfg: &SolverConfig) -> Result<Dispatch> {
    Ok(solve_base_opf_full(sys, cfg)?.dispatch)
}

pub fn solve_base_opf_full(sys: &PowerSystem, cfg: &SolverConfig) -> Result<BaseOpfSolution> {
    check_capacity(sys)?;
    let start = base_starting_point(sys, cfg);
    solve_base_side(sys, cfg, None, &start)
}

fn check_capacity(sys: &PowerSystem) -> Result<()> {
    let demand = sys.total_demand();
    let capacity: f64 = sys.generators().iter().map(|g| g.p_max).sum();
    if demand > capacity {
        return Err(Error::Infeasible {
            max_violation: demand - capacity,
        });
    }
    Ok(())
}

/// Case set points clipped into their limits, completed by a power flow
/// (flat start when the power flow fails).
pub(crate) fn base_starting_point(sys: &PowerSystem, cfg: &SolverConfig) -> OperatingPoint {
    let gens = sys.generators();
    let mut x = Dispatch::nominal(sys);
    for (k, &g) in sys.dispatchable_generators().iter().enumerate() {
        x.p[k] = x.p[k].clamp(gens[g].p_min, gens[g].p_max);
    }
    for (g, gen) in gens.iter().enumerate() {
        let bus = &sys.buses()[gen.bus];
        x.v[g] = x.v[g].clamp(bus.v_min, bus.v_max);
    }
    starting_point(sys, &x, None, cfg)
}

pub(crate) fn starting_point(
    sys: &PowerSystem,
    x: &Dispatch,
    y: Option<&AttackVector>,
    cfg: &SolverConfig,
) -> OperatingPoint {
    let opts = crate::powerflow::PowerFlowOptions {
        tol: cfg.pf_tol,
        max_iter: cfg.pf_max_iter,
        ..Default::default()
    };
    let state = match crate::powerflow::solve_power_flow(sys, x, y, &opts) {
        Ok(r) => r.state,
        Err(_) => {
            let mut w = crate::powerflow::NetworkState::flat(sys);
            w.p_slack = sys.total_demand() - x.p.iter().sum::<f64>();
            w
        }
    };
    OperatingPoint::assemble(sys, x, &state).expect("dimensions checked by caller")
}

/// Base-side solve with an optional linear objective over the dispatch.
pub(crate) fn solve_base_side(
    sys: &PowerSystem,
    cfg: &SolverConfig,
    linear: Option<&[f64]>,
    start: &OperatingPoint,
) -> Result<BaseOpfSolution> {
    let problem = build_problem(
        sys,
        ProblemSpec {
            y: None,
            slack: false,
            coupling: None,
            linear,
            voltage_band: cfg.voltage_band,
            cost_scale: cfg.cost_scale,
        },
    );
    let u0 = problem.initial_point(start);
    let sol = solve_ipm(&problem, u0, cfg, "base optimal power flow")?;
    let (np, me) = (problem.n_primal(), problem.n_eq());
    let point = point_from_primal(sys, &problem, &sol.u[..np]);
    Ok(BaseOpfSolution {
        dispatch: point.dispatch(sys),
        state: point.state(sys),
        cost: sys.generation_cost(&point.pg),
        point,
        lambda: sol.u[np..np + me].to_vec(),
        mu: sol.u[np + me..].to_vec(),
        iterations: sol.iterations,
        residual: sol.residual,
        barrier: sol.eps,
    })
}

pub(crate) fn point_from_primal(sys: &PowerSystem, problem: &Problem, p: &[f64]) -> OperatingPoint {
    let l = &problem.layout;
    let (vm, va) = problem.voltages(p);
    OperatingPoint {
        pg: (0..sys.n_gen()).map(|g| p[l.pg(g)]).collect(),
        qg: (0..sys.n_gen()).map(|g| p[l.qg(g)]).collect(),
        vm,
        va,
    }
}
