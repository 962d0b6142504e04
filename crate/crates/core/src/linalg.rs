//! Symmetric eigendecomposition, linear solves and spectral reference
//! functions used as verification oracles.

use crate::error::{ensure, CeError, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Symmetric eigendecomposition `m = V diag(λ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Eigh {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, ordered like `values`.
    pub vectors: Matrix,
}

impl Eigh {
    /// `V f(Λ) Vᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors[(i, k)] * fl[k] * self.vectors[(j, k)])
                .sum()
        })
    }

    pub fn reconstruct(&self) -> Matrix {
        self.apply_fn(|l| l)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm drops
/// below `1e-12` (scaled by the matrix norm when that exceeds one) or 100
/// sweeps have run.
pub fn jacobi_eigh(m: &Matrix) -> Result<Eigh> {
    ensure!(
        m.is_square(),
        Contract,
        "jacobi_eigh needs a square matrix, got {:?}",
        m.shape()
    );
    let scale = m.frobenius().max(1.0);
    ensure!(
        m.is_symmetric(1e-9 * scale),
        Contract,
        "jacobi_eigh needs a symmetric matrix (asymmetry {:e})",
        m.asymmetry()
    );
    ensure!(
        m.is_finite(),
        Contract,
        "jacobi_eigh input has non-finite entries"
    );

    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let tol = JACOBI_TOL * scale;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J with J the (p, q) plane rotation.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, k| v[(r, order[k])]);
    Ok(Eigh { values, vectors })
}

/// `m^{-1/2}` through the eigendecomposition. Rejects non-positive spectra.
pub fn inv_sqrt_eig(m: &Matrix) -> Result<Matrix> {
    let e = jacobi_eigh(m)?;
    let min = e.values.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        return Err(CeError::Contract(format!(
            "inverse square root needs a positive definite matrix (min eigenvalue {min:e})"
        )));
    }
    Ok(e.apply_fn(|l| 1.0 / l.sqrt()))
}

/// `m^{1/2}` through the eigendecomposition; negative round-off eigenvalues clamp to zero.
pub fn sqrt_eig(m: &Matrix) -> Result<Matrix> {
    let e = jacobi_eigh(m)?;
    Ok(e.apply_fn(|l| l.max(0.0).sqrt()))
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    ensure!(a.is_square(), Shape, "solve needs a square matrix");
    ensure!(
        a.rows() == b.len(),
        Shape,
        "solve rhs length {} != {}",
        b.len(),
        a.rows()
    );
    let n = a.rows();
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m
        .as_slice()
        .iter()
        .fold(0.0f64, |s, v| s.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .expect("non-empty range");
        if m[(pivot, col)].abs() <= 1e-14 * scale {
            return Err(CeError::Degenerate(
                "matrix is singular to working precision".into(),
            ));
        }
        if pivot != col {
            for k in 0..n {
                let tmp = m[(col, k)];
                m[(col, k)] = m[(pivot, k)];
                m[(pivot, k)] = tmp;
            }
            x.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[(r, k)] -= f * m[(col, k)];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for k in col + 1..n {
            s -= m[(col, k)] * x[k];
        }
        x[col] = s / m[(col, col)];
    }
    Ok(x)
}

/// Random test matrices.
pub mod random {
    use super::*;

    /// Haar-ish orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
    pub fn orthogonal(n: usize, rng: &mut Rng) -> Matrix {
        loop {
            let g = Matrix::from_fn(n, n, |_, _| rng.normal());
            let mut q = Matrix::zeros(n, n);
            let mut ok = true;
            for j in 0..n {
                let mut col: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
                for k in 0..j {
                    let d: f64 = (0..n).map(|i| q[(i, k)] * col[i]).sum();
                    for (i, c) in col.iter_mut().enumerate() {
                        *c -= d * q[(i, k)];
                    }
                }
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    ok = false;
                    break;
                }
                for (i, c) in col.iter().enumerate() {
                    q[(i, j)] = c / norm;
                }
            }
            if ok {
                return q;
            }
        }
    }

    /// `Q diag(values) Qᵀ` for a random orthogonal `Q`.
    pub fn with_spectrum(values: &[f64], rng: &mut Rng) -> Matrix {
        let n = values.len();
        let q = orthogonal(n, rng);
        let m = Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| q[(i, k)] * values[k] * q[(j, k)]).sum()
        });
        symmetrize(&m)
    }

    /// Unit-trace SPD matrix with every eigenvalue at least `min_eig`.
    pub fn trace_normalized_spd(n: usize, min_eig: f64, rng: &mut Rng) -> Matrix {
        assert!(
            min_eig * n as f64 <= 1.0,
            "min eigenvalue too large for unit trace"
        );
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let slack = 1.0 - min_eig * n as f64;
        let values: Vec<f64> = raw.iter().map(|r| min_eig + slack * r / total).collect();
        let m = with_spectrum(&values, rng);
        let tr = m.trace();
        m.scale(1.0 / tr)
    }

    pub fn symmetrize(m: &Matrix) -> Matrix {
        m.add(&m.transpose()).scale(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_input() {
        let e = jacobi_eigh(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        // columns permuted to descending order
        assert_eq!(e.vectors[(1, 0)].abs(), 1.0);
        assert_eq!(e.vectors[(0, 1)].abs(), 1.0);
        let e = jacobi_eigh(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.vectors, Matrix::identity(2));
    }

    #[test]
    fn two_by_two_hand_case() {
        // char. poly (2-λ)² - 1 = 0  =>  λ = 3, 1
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = jacobi_eigh(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_spd_reconstructs() {
        let mut rng = Rng::new(8);
        let g = Matrix::from_fn(8, 8, |_, _| rng.normal());
        let spd = random::symmetrize(&g.mul(&g.transpose())).add(&Matrix::identity(8).scale(0.1));
        let e = jacobi_eigh(&spd).unwrap();
        assert!(e.reconstruct().max_abs_diff(&spd) < 1e-9);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn recovers_planted_spectrum() {
        let mut rng = Rng::new(21);
        for n in [3, 7, 12] {
            let mut vals: Vec<f64> = (0..n).map(|_| rng.uniform_range(-2.0, 5.0)).collect();
            let m = random::with_spectrum(&vals, &mut rng);
            vals.sort_by(|a, b| b.total_cmp(a));
            let e = jacobi_eigh(&m).unwrap();
            for (a, b) in e.values.iter().zip(&vals) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigh(&m), Err(CeError::Contract(_))));
    }

    #[test]
    fn solve_small_system() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let x = solve(&a, &[4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve(&sing, &[1.0, 1.0]).is_err());
    }
}
