use crate::error::{check_dim, Error, Result};

use super::DenseMatrix;

const MAX_SWEEPS: usize = 100;
const CONVERGENCE: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEig {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: DenseMatrix,
    pub sweeps: usize,
}

impl SymEig {
    /// `V · diag(λ) · Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.values.len();
        let mut out = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                let s = (0..n)
                    .map(|k| self.vectors.get(r, k) * self.values[k] * self.vectors.get(c, k))
                    .sum();
                out.set(r, c, s);
            }
        }
        out
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..n {
        for c in 0..n {
            if r != c {
                s += a[r * n + c] * a[r * n + c];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigensolver.
///
/// Sweeps over all `(p, q)` pairs, annihilating each off-diagonal entry with
/// a plane rotation, until the off-diagonal Frobenius norm falls to
/// `1e-12 · ‖M‖_F` or 100 sweeps have run. Eigenvalues are returned in
/// descending order (ties keep diagonal order) and each eigenvector is
/// signed so its largest-magnitude entry is non-negative.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymEig> {
    check_dim("sym_eig", "columns", m.rows(), m.cols())?;
    let n = m.rows();
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let scale = m.max_abs();
    let mut max_asym: f64 = 0.0;
    for r in 0..n {
        for c in r + 1..n {
            max_asym = max_asym.max((m.get(r, c) - m.get(c, r)).abs());
        }
    }
    if max_asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: max_asym,
        });
    }

    // Work on the symmetrized copy; `vt` holds eigenvectors as rows.
    let mut a = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            a[r * n + c] = 0.5 * (m.get(r, c) + m.get(c, r));
        }
    }
    let mut vt = DenseMatrix::identity(n).data().to_vec();
    let threshold = CONVERGENCE * m.frobenius_norm();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a, n);
        if off <= threshold {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                if s == 0.0 {
                    // Rotation underflows; the entry is negligible at this precision.
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_p = c * arp - s * arq;
                    let new_q = s * arp + c * arq;
                    a[r * n + p] = new_p;
                    a[p * n + r] = new_p;
                    a[r * n + q] = new_q;
                    a[q * n + r] = new_q;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                let (head, tail) = vt.split_at_mut(q * n);
                let vp = &mut head[p * n..(p + 1) * n];
                let vq = &mut tail[..n];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));

    let mut values = Vec::with_capacity(n);
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        values.push(a[src * n + src]);
        let v = &vt[src * n..(src + 1) * n];
        let mut pivot = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (r, &x) in v.iter().enumerate() {
            vectors.set(r, col, sign * x);
        }
    }
    Ok(SymEig {
        values,
        vectors,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_derive;

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = rng_derive(seed, 0);
        let mut m = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v = rng.normal();
                m.set(r, c, v);
                m.set(c, r, v);
            }
        }
        m
    }

    fn orthonormality_error(v: &DenseMatrix) -> f64 {
        let vtv = v.transpose().matmul(v).unwrap();
        vtv.sub(&DenseMatrix::identity(v.cols())).unwrap().max_abs()
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(e.vectors, DenseMatrix::identity(3));
    }

    #[test]
    fn diagonal_case() {
        let e = sym_eig(&DenseMatrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors.column(0), vec![0.0, 1.0]);
        assert_eq!(e.vectors.column(1), vec![1.0, 0.0]);
    }

    #[test]
    fn random_reconstruction() {
        for seed in 0..5 {
            let m = random_symmetric(8, seed);
            let e = sym_eig(&m).unwrap();
            let err = e.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(err < 1e-6, "reconstruction error {err}");
            assert!(orthonormality_error(&e.vectors) < 1e-6);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention() {
        let e = sym_eig(&random_symmetric(6, 17)).unwrap();
        for c in 0..6 {
            let col = e.vectors.column(c);
            let pivot = col.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(pivot >= 0.0);
        }
    }

    #[test]
    fn rejects_non_symmetric() {
        let m = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn rejects_non_square() {
        assert!(sym_eig(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_matrix() {
        let e = sym_eig(&DenseMatrix::zeros(4, 4)).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn pure_function() {
        let m = random_symmetric(10, 3);
        assert_eq!(sym_eig(&m).unwrap(), sym_eig(&m).unwrap());
    }
}
