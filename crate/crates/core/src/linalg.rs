//! Sparse LU factorization with direct and transpose solves, plus per-thread
//! counters used to check that gradients reuse the stored factor.

use std::cell::Cell;
use std::fmt;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat};

use crate::error::{Error, Result};

/// Counts of expensive linear-algebra and solver events on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub factorizations: usize,
    pub solves: usize,
    pub transpose_solves: usize,
    pub third_stage_solves: usize,
}

impl std::ops::Sub for Counters {
    type Output = Counters;
    fn sub(self, rhs: Counters) -> Counters {
        Counters {
            factorizations: self.factorizations - rhs.factorizations,
            solves: self.solves - rhs.solves,
            transpose_solves: self.transpose_solves - rhs.transpose_solves,
            third_stage_solves: self.third_stage_solves - rhs.third_stage_solves,
        }
    }
}

thread_local! {
    static COUNTERS: Cell<Counters> = Cell::new(Counters::default());
}

/// Snapshot of this thread's counters. Take two snapshots and subtract.
pub fn counters() -> Counters {
    COUNTERS.with(|c| c.get())
}

pub(crate) fn bump(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Square sparse matrix in compressed-column form with summed duplicates.
#[derive(Clone)]
pub struct SparseMatrix {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl fmt::Debug for SparseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SparseMatrix({}x{}, nnz {})", self.n, self.n, self.vals.len())
    }
}

impl SparseMatrix {
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r < n && c < n);
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                vals.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseMatrix {
            n,
            col_ptr,
            row_idx,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |k| (self.row_idx[k], c, self.vals[k]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        match self.row_idx[range.clone()].binary_search(&row) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, c, v) in self.entries() {
            out[r] += v * x[c];
        }
        out
    }

    /// `A^T x`
    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, c, v) in self.entries() {
            out[c] += v * x[r];
        }
        out
    }

    fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let triplets: Vec<_> = self.entries().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.n, self.n, &triplets)
            .map_err(|e| Error::Numerical(format!("sparse matrix assembly: {e:?}")))
    }
}

/// Symbolic analysis that can be shared between factorizations of matrices
/// with the same sparsity pattern.
#[derive(Clone, Default)]
pub struct SymbolicCache {
    entry: Option<(SparseMatrix, SymbolicLu<usize>)>,
}

impl fmt::Debug for SymbolicCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymbolicCache")
    }
}

/// LU factorization of a square sparse matrix, kept together with the matrix.
#[derive(Clone)]
pub struct Factorization {
    matrix: SparseMatrix,
    lu: Lu<usize, f64>,
}

impl fmt::Debug for Factorization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Factorization({:?})", self.matrix)
    }
}

impl Factorization {
    pub fn new(matrix: SparseMatrix, cache: &mut SymbolicCache, context: &str) -> Result<Self> {
        bump(|c| c.factorizations += 1);
        if matrix.vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite matrix entry in {context}")));
        }
        let a = matrix.to_faer()?;
        let symbolic = match &cache.entry {
            Some((pattern, sym)) if pattern.same_pattern(&matrix) => sym.clone(),
            _ => {
                let sym = SymbolicLu::try_new(a.symbolic()).map_err(|e| Error::Numerical(format!("{e:?}")))?;
                cache.entry = Some((matrix.clone(), sym.clone()));
                sym
            }
        };
        let lu = Lu::try_new_with_symbolic(symbolic, a.as_ref()).map_err(|_| Error::Singular {
            context: context.to_string(),
        })?;
        let f = Factorization { matrix, lu };
        Ok(f)
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        bump(|c| c.solves += 1);
        let x = self.raw_solve(rhs, false)?;
        self.check(&x, rhs, false)?;
        Ok(x)
    }

    /// Solves `A^T x = b` with the same factors.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        bump(|c| c.transpose_solves += 1);
        let x = self.raw_solve(rhs, true)?;
        self.check(&x, rhs, true)?;
        Ok(x)
    }

    fn raw_solve(&self, rhs: &[f64], transpose: bool) -> Result<Vec<f64>> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(Error::Dimension {
                what: "linear solve right-hand side",
                expected: n,
                got: rhs.len(),
            });
        }
        let mut b = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
        if transpose {
            self.lu.solve_transpose_in_place_with_conj(Conj::No, b.as_mut());
        } else {
            self.lu.solve_in_place_with_conj(Conj::No, b.as_mut());
        }
        Ok((0..n).map(|i| b[(i, 0)]).collect())
    }

    /// Rejects solutions that are non-finite or whose backward error shows the
    /// factor is numerically singular.
    fn check(&self, x: &[f64], rhs: &[f64], transpose: bool) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular {
                context: "linear solve produced non-finite values".into(),
            });
        }
        let ax = if transpose {
            self.matrix.mul_vec_transpose(x)
        } else {
            self.matrix.mul_vec(x)
        };
        let res = ax.iter().zip(rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let norm_a = self.matrix.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm_b = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = norm_a * norm_x * self.dim() as f64 + norm_b;
        if res > 1e-6 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Singular {
                context: format!("linear solve backward error {res:.3e} relative to {scale:.3e}"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseMatrix {
        SparseMatrix::from_triplets(
            3,
            vec![
                (0, 0, 4.0),
                (0, 1, 1.0),
                (1, 0, 2.0),
                (1, 1, 5.0),
                (1, 2, 1.0),
                (2, 2, 3.0),
                (2, 0, 0.5),
                (2, 2, 0.5),
            ],
        )
    }

    #[test]
    fn duplicates_are_summed() {
        let a = sample();
        assert_eq!(a.get(2, 2), 3.5);
        assert_eq!(a.nnz(), 7);
    }

    #[test]
    fn direct_and_transpose_solves() {
        let a = sample();
        let mut cache = SymbolicCache::default();
        let f = Factorization::new(a.clone(), &mut cache, "test").unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = f.solve(&b).unwrap();
        let ax = a.mul_vec(&x);
        let xt = f.solve_transpose(&b).unwrap();
        let atx = a.mul_vec_transpose(&xt);
        for i in 0..3 {
            assert!((ax[i] - b[i]).abs() < 1e-12);
            assert!((atx[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn counters_track_operations() {
        let before = counters();
        let mut cache = SymbolicCache::default();
        let f = Factorization::new(sample(), &mut cache, "test").unwrap();
        f.solve(&[1.0, 0.0, 0.0]).unwrap();
        f.solve_transpose(&[1.0, 0.0, 0.0]).unwrap();
        f.solve_transpose(&[0.0, 1.0, 0.0]).unwrap();
        let d = counters() - before;
        assert_eq!((d.factorizations, d.solves, d.transpose_solves), (1, 1, 2));
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = SparseMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)]);
        let mut cache = SymbolicCache::default();
        let r = Factorization::new(a, &mut cache, "test").and_then(|f| f.solve(&[1.0, 1.0]));
        assert!(matches!(r, Err(Error::Singular { .. })));
    }

    #[test]
    fn structurally_singular_matrix_is_reported() {
        let a = SparseMatrix::from_triplets(2, vec![(0, 0, 1.0), (1, 0, 2.0)]);
        let mut cache = SymbolicCache::default();
        let r = Factorization::new(a, &mut cache, "test").and_then(|f| f.solve(&[1.0, 1.0]));
        assert!(r.is_err());
    }
}
