//! Polar AC power injections with first and second derivatives.
//!
//! Every branch is split into two ends. The power entering the branch at end `a`
//! (towards `b`) with `phi = theta_a - theta_b` is
//!
//! ```text
//! P = Va^2 Gd + Va Vb (Go cos phi + Bo sin phi)
//! Q = -Va^2 Bd + Va Vb (Go sin phi - Bo cos phi)
//! ```
//!
//! where `Gd + jBd` is the end's self admittance and `Go + jBo` the transfer admittance.

use num_complex::Complex64;

use crate::grid::{branch_two_port, PowerSystem};

/// Voltage variable of a bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BusVar {
    Vm(usize),
    Va(usize),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BranchEnd {
    pub branch: usize,
    pub bus: usize,
    pub other: usize,
    pub self_y: Complex64,
    pub transfer_y: Complex64,
}

/// Unscaled power entering one branch end, with derivatives in the local
/// variable order `(Va, Vb, theta_a, theta_b)`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct EndPower {
    pub p: f64,
    pub q: f64,
    pub dp: [f64; 4],
    pub dq: [f64; 4],
    pub hp: [[f64; 4]; 4],
    pub hq: [[f64; 4]; 4],
}

impl BranchEnd {
    pub fn vars(&self) -> [BusVar; 4] {
        [
            BusVar::Vm(self.bus),
            BusVar::Vm(self.other),
            BusVar::Va(self.bus),
            BusVar::Va(self.other),
        ]
    }

    pub fn power(&self, vm: &[f64], va: &[f64], with_hessian: bool) -> EndPower {
        let (gd, bd) = (self.self_y.re, self.self_y.im);
        let (go, bo) = (self.transfer_y.re, self.transfer_y.im);
        let (a, b) = (vm[self.bus], vm[self.other]);
        let phi = va[self.bus] - va[self.other];
        let (sin, cos) = phi.sin_cos();
        let big_a = go * cos + bo * sin;
        let big_c = go * sin - bo * cos;
        let mut out = EndPower {
            p: a * a * gd + a * b * big_a,
            q: -a * a * bd + a * b * big_c,
            ..Default::default()
        };
        let dp3 = [2.0 * a * gd + b * big_a, a * big_a, -a * b * big_c];
        let dq3 = [-2.0 * a * bd + b * big_c, a * big_c, a * b * big_a];
        out.dp = [dp3[0], dp3[1], dp3[2], -dp3[2]];
        out.dq = [dq3[0], dq3[1], dq3[2], -dq3[2]];
        if with_hessian {
            let hp3 = [
                [2.0 * gd, big_a, -b * big_c],
                [big_a, 0.0, -a * big_c],
                [-b * big_c, -a * big_c, -a * b * big_a],
            ];
            let hq3 = [
                [-2.0 * bd, big_c, b * big_a],
                [big_c, 0.0, a * big_a],
                [b * big_a, a * big_a, -a * b * big_c],
            ];
            out.hp = lift_hessian(&hp3);
            out.hq = lift_hessian(&hq3);
        }
        out
    }
}

/// Maps a Hessian in `(Va, Vb, phi)` to `(Va, Vb, theta_a, theta_b)`.
fn lift_hessian(h: &[[f64; 3]; 3]) -> [[f64; 4]; 4] {
    const MAP: [(usize, f64); 4] = [(0, 1.0), (1, 1.0), (2, 1.0), (2, -1.0)];
    let mut out = [[0.0; 4]; 4];
    for (i, &(ii, si)) in MAP.iter().enumerate() {
        for (j, &(jj, sj)) in MAP.iter().enumerate() {
            out[i][j] = si * sj * h[ii][jj];
        }
    }
    out
}

/// Branch ends of every in-service branch together with the per-branch scale.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    pub ends: Vec<BranchEnd>,
    pub scaling: Vec<f64>,
    pub shunts: Vec<Complex64>,
    pub n_bus: usize,
}

impl Network {
    pub fn new(sys: &PowerSystem, scaling: Vec<f64>) -> Self {
        let mut ends = Vec::with_capacity(2 * sys.branches().len());
        for (b, br) in sys.branches().iter().enumerate() {
            let [yff, yft, ytf, ytt] = branch_two_port(br);
            ends.push(BranchEnd {
                branch: b,
                bus: br.from,
                other: br.to,
                self_y: yff,
                transfer_y: yft,
            });
            ends.push(BranchEnd {
                branch: b,
                bus: br.to,
                other: br.from,
                self_y: ytt,
                transfer_y: ytf,
            });
        }
        Network {
            ends,
            scaling,
            shunts: sys.buses().iter().map(|b| b.shunt).collect(),
            n_bus: sys.n_bus(),
        }
    }

    /// Real and reactive power leaving each bus into the network and shunts.
    pub fn injections(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.n_bus];
        let mut q = vec![0.0; self.n_bus];
        for (i, y) in self.shunts.iter().enumerate() {
            let v2 = vm[i] * vm[i];
            p[i] += v2 * y.re;
            q[i] -= v2 * y.im;
        }
        for end in &self.ends {
            let s = self.scaling[end.branch];
            if s == 0.0 {
                continue;
            }
            let e = end.power(vm, va, false);
            p[end.bus] += s * e.p;
            q[end.bus] += s * e.q;
        }
        (p, q)
    }

    /// Derivatives of the injections: `(row, var, value)` with rows `0..n` for P and
    /// `n..2n` for Q. Entries for branches with zero scale are kept as structural zeros.
    pub fn injection_jacobian(&self, vm: &[f64], va: &[f64]) -> Vec<(usize, BusVar, f64)> {
        let n = self.n_bus;
        let mut out = Vec::with_capacity(8 * self.ends.len() + 2 * n);
        for (i, y) in self.shunts.iter().enumerate() {
            out.push((i, BusVar::Vm(i), 2.0 * vm[i] * y.re));
            out.push((n + i, BusVar::Vm(i), -2.0 * vm[i] * y.im));
        }
        for end in &self.ends {
            let s = self.scaling[end.branch];
            let e = end.power(vm, va, false);
            for (k, var) in end.vars().into_iter().enumerate() {
                out.push((end.bus, var, s * e.dp[k]));
                out.push((n + end.bus, var, s * e.dq[k]));
            }
        }
        out
    }

    /// `sum_i wp_i * hess(P_i) + wq_i * hess(Q_i)` as `(var, var, value)` triplets.
    pub fn weighted_injection_hessian(
        &self,
        vm: &[f64],
        va: &[f64],
        wp: &[f64],
        wq: &[f64],
    ) -> Vec<(BusVar, BusVar, f64)> {
        let mut out = Vec::with_capacity(16 * self.ends.len() + self.n_bus);
        for (i, y) in self.shunts.iter().enumerate() {
            let v = 2.0 * (wp[i] * y.re - wq[i] * y.im);
            out.push((BusVar::Vm(i), BusVar::Vm(i), v));
        }
        for end in &self.ends {
            let s = self.scaling[end.branch];
            let e = end.power(vm, va, true);
            let (a, b) = (wp[end.bus] * s, wq[end.bus] * s);
            let vars = end.vars();
            for i in 0..4 {
                for j in 0..4 {
                    out.push((vars[i], vars[j], a * e.hp[i][j] + b * e.hq[i][j]));
                }
            }
        }
        out
    }
}
