use std::collections::BTreeMap;

use num_complex::Complex64;

use super::{AttackVector, Branch, PowerSystem};

/// Two-port admittances `[Yff, Yft, Ytf, Ytt]` of an in-service branch.
pub(crate) fn branch_two_port(br: &Branch) -> [Complex64; 4] {
    let ys = br.admittance;
    let ytt = ys + Complex64::new(0.0, br.charging / 2.0);
    let t = Complex64::from_polar(br.tap, br.shift);
    [
        ytt / (br.tap * br.tap),
        -ys / t.conj(),
        -ys / t,
        ytt,
    ]
}

/// Sparse complex bus admittance matrix (row-major, sorted columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl AdmittanceMatrix {
    fn from_map(n: usize, map: BTreeMap<(usize, usize), Complex64>) -> Self {
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(map.len());
        let mut vals = Vec::with_capacity(map.len());
        for (&(r, c), &v) in &map {
            row_ptr[r + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        AdmittanceMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[range.clone()].binary_search(&col) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    /// Stored entries `(row, col, value)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        (0..self.n).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    /// `Y v`
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * v[self.cols[k]])
                    .sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let mut d = vec![vec![Complex64::new(0.0, 0.0); self.n]; self.n];
        for (r, c, v) in self.entries() {
            d[r][c] = v;
        }
        d
    }
}

/// Bus admittance matrix with every outage-eligible branch scaled by `1 - y_j`.
/// Branches scaled to zero contribute no entries.
pub fn build_admittance(sys: &PowerSystem, y: Option<&AttackVector>) -> AdmittanceMatrix {
    let n = sys.n_bus();
    let mut map: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    for (i, bus) in sys.buses().iter().enumerate() {
        if bus.shunt.norm() > 0.0 {
            *map.entry((i, i)).or_default() += bus.shunt;
        }
    }
    let scaling = sys.branch_scaling(y);
    for (b, br) in sys.branches().iter().enumerate() {
        let s = scaling[b];
        if s == 0.0 {
            continue;
        }
        let [yff, yft, ytf, ytt] = branch_two_port(br);
        let (f, t) = (br.from, br.to);
        *map.entry((f, f)).or_default() += yff * s;
        *map.entry((f, t)).or_default() += yft * s;
        *map.entry((t, f)).or_default() += ytf * s;
        *map.entry((t, t)).or_default() += ytt * s;
    }
    AdmittanceMatrix::from_map(n, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::two_bus;
    use crate::grid::{parse_case, PowerSystem};

    fn case14() -> PowerSystem {
        parse_case(include_str!("../../../../cases/case14.m")).unwrap()
    }

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() <= 1e-12 * (1.0 + a.norm().max(b.norm()))
    }

    #[test]
    fn half_outage_halves_branch_admittance() {
        let sys = two_bus(0.5, 0.1);
        let y = AttackVector::new(vec![0.5], 1.0).unwrap();
        let ybus = build_admittance(&sys, Some(&y));
        // series 1 - j10 scaled to 0.5 - j5, off-diagonal is its negative
        assert!(close(ybus.get(0, 1), Complex64::new(-0.5, 5.0)));
        assert!(close(ybus.get(1, 1), Complex64::new(0.5, -5.0 + 0.005)));
    }

    #[test]
    fn full_outage_removes_branch_entries() {
        let sys = two_bus(0.5, 0.1);
        let y = AttackVector::new(vec![1.0], 1.0).unwrap();
        let ybus = build_admittance(&sys, Some(&y));
        assert_eq!(ybus.nnz(), 0);
    }

    #[test]
    fn zero_attack_matches_base() {
        let sys = case14();
        let base = build_admittance(&sys, None);
        let zero = build_admittance(&sys, Some(&AttackVector::zeros(sys.n_outage(), 1.0)));
        assert_eq!(base, zero);
    }

    #[test]
    fn discrete_outage_equals_rebuilt_network() {
        let sys = case14();
        for outaged in [vec![0usize], vec![3, 7], vec![10, 15, 19]] {
            let y = AttackVector::discrete(sys.n_outage(), &outaged).unwrap();
            let attacked = build_admittance(&sys, Some(&y));
            let kept: Vec<_> = sys
                .branches()
                .iter()
                .enumerate()
                .filter(|(b, _)| !outaged.contains(&sys.branch_device(*b).unwrap()))
                .map(|(_, br)| br.clone())
                .collect();
            let rebuilt = PowerSystem::new(
                sys.base_mva(),
                sys.buses().to_vec(),
                sys.generators().to_vec(),
                kept,
                sys.loads().to_vec(),
            );
            let fresh = build_admittance(&rebuilt, None);
            for i in 0..sys.n_bus() {
                for j in 0..sys.n_bus() {
                    assert!(close(attacked.get(i, j), fresh.get(i, j)), "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn unit_taps_give_symmetric_matrix() {
        let sys = two_bus(0.5, 0.1);
        let y = build_admittance(&sys, None);
        assert_eq!(y.get(0, 1), y.get(1, 0));
    }

    #[test]
    fn admittance_is_affine_in_each_attack_coordinate() {
        let sys = case14();
        let n = sys.n_outage();
        for j in [0usize, 6, 13] {
            let at = |t: f64| {
                let mut v = vec![0.1; n];
                v[j] = t;
                build_admittance(&sys, Some(&AttackVector::new(v, n as f64).unwrap()))
            };
            let (a, b, c) = (at(0.2), at(0.5), at(0.8));
            for (r, col, vb) in b.entries() {
                let mid = (a.get(r, col) + c.get(r, col)) * 0.5;
                assert!(close(vb, mid));
            }
        }
    }
}
