//! Thin sparse linear-algebra layer: triplet assembly, CSR matvec, and a
//! direct symmetric factorization reused across many solves.

use crate::error::{Error, Result};
use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

/// Triplet accumulator for finite-element assembly.
pub struct Assembler {
    rows: usize,
    cols: usize,
    tri: TriMat<f64>,
}

impl Assembler {
    pub fn new(rows: usize, cols: usize) -> Self {
        Assembler {
            rows,
            cols,
            tri: TriMat::new((rows, cols)),
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        if v != 0.0 {
            self.tri.add_triplet(i, j, v);
        }
    }

    /// Finish assembly into compressed sparse row form (duplicates summed).
    pub fn into_csr(self) -> CsMat<f64> {
        self.tri.to_csr()
    }
}

/// y = A x for CSR/CSC matrices of any shape.
pub fn matvec(a: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.cols(), x.len());
    debug_assert_eq!(a.rows(), y.len());
    y.fill(0.0);
    for (v, (i, j)) in a.iter() {
        y[i] += v * x[j];
    }
}

/// Direct factorization of a sparse symmetric positive definite matrix.
///
/// The factorization is computed once with a fill-reducing ordering and then
/// reused for every right-hand side, which is the profile of time-stepping
/// schemes whose matrices do not change between steps.
pub struct SpdSolver {
    mat: CsMat<f64>,
    fact: LdlNumeric<f64, usize>,
}

impl SpdSolver {
    pub fn new(mat: CsMat<f64>) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::DimensionMismatch(format!(
                "cannot factor a {}x{} matrix",
                mat.rows(),
                mat.cols()
            )));
        }
        // Quadrature assembly can leave the pattern (dropped exact zeros) or
        // the last bits of paired entries asymmetric; the fill-reducing
        // ordering requires exact structural symmetry, so enforce it.
        let mat = {
            let transposed = mat.transpose_view().to_csr();
            (&mat + &transposed).map(|v| 0.5 * v)
        };
        let csc = mat.to_csc();
        let fact = Ldl::new()
            .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
            .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
            .numeric(csc.view())
            .map_err(|e| Error::LinearSolve(format!("factorization failed: {e:?}")))?;
        Ok(SpdSolver { mat, fact })
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &CsMat<f64> {
        &self.mat
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n());
        self.fact.solve(b)
    }

    /// Relative residual ||A x - b|| / ||b|| of a candidate solution.
    pub fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut r = vec![0.0; b.len()];
        matvec(&self.mat, x, &mut r);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..b.len() {
            let d = r[i] - b[i];
            num += d * d;
            den += b[i] * b[i];
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

/// Dense symmetric positive definite solver for small systems.
#[derive(Debug, Clone)]
pub struct DenseChol {
    n: usize,
    /// Lower factor, row-major.
    l: Vec<f64>,
}

impl DenseChol {
    pub fn new(n: usize, a: &[f64]) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::LinearSolve(format!(
                            "matrix not positive definite at pivot {i} (value {s:.3e})"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(DenseChol { n, l })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(x.len(), n);
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[i * n + k] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solver_recovers_known_solution() {
        // Tridiagonal SPD system with a manufactured solution.
        let n = 50;
        let mut asm = Assembler::new(n, n);
        for i in 0..n {
            asm.add(i, i, 2.5);
            if i + 1 < n {
                asm.add(i, i + 1, -1.0);
                asm.add(i + 1, i, -1.0);
            }
        }
        let a = asm.into_csr();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        matvec(&a, &x_true, &mut b);
        let solver = SpdSolver::new(a).unwrap();
        let x = solver.solve(&b);
        assert!(solver.residual(&x, &b) < 1e-12);
        for i in 0..n {
            assert!((x[i] - x_true[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_cholesky_solves_and_rejects_indefinite() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let ch = DenseChol::new(3, &a).unwrap();
        let x = ch.solve(&[1.0, 2.0, 3.0]);
        // Residual check.
        for i in 0..3 {
            let mut r = -[1.0, 2.0, 3.0][i];
            for j in 0..3 {
                r += a[i * 3 + j] * x[j];
            }
            assert!(r.abs() < 1e-12);
        }
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(DenseChol::new(2, &bad).is_err());
    }
}
