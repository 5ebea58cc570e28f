//! Small dense linear-algebra utilities: a pivoted Gaussian solver and a
//! Jacobi eigendecomposition for symmetric matrices. Problem sizes here are
//! tiny (band counts, not pixel counts), so simplicity wins over blocking.

use crate::error::{Error, Result};
use crate::Scalar;
use ndarray::{Array1, Array2};

/// Solve `A X = B` for a square `A` via Gaussian elimination with partial
/// pivoting. `B` may carry multiple right-hand sides as columns.
pub fn solve<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Result<Array2<F>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let nrhs = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        // pivot
        let mut piv = col;
        let mut best = lu[[col, col]].abs();
        for r in col + 1..n {
            let v = lu[[r, col]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best > F::zero()) || !best.is_finite() {
            return Err(Error::SingularSystem(format!(
                "pivot {best} at column {col}"
            )));
        }
        if piv != col {
            for c in 0..n {
                let t = lu[[col, c]];
                lu[[col, c]] = lu[[piv, c]];
                lu[[piv, c]] = t;
            }
            for c in 0..nrhs {
                let t = x[[col, c]];
                x[[col, c]] = x[[piv, c]];
                x[[piv, c]] = t;
            }
        }
        let d = lu[[col, col]];
        for r in col + 1..n {
            let f = lu[[r, col]] / d;
            if f == F::zero() {
                continue;
            }
            lu[[r, col]] = F::zero();
            for c in col + 1..n {
                let v = lu[[col, c]] * f;
                lu[[r, c]] -= v;
            }
            for c in 0..nrhs {
                let v = x[[col, c]] * f;
                x[[r, c]] -= v;
            }
        }
    }
    // back substitution
    for col in (0..n).rev() {
        let d = lu[[col, col]];
        for c in 0..nrhs {
            let mut acc = x[[col, c]];
            for k in col + 1..n {
                acc = acc - lu[[col, k]] * x[[k, c]];
            }
            x[[col, c]] = acc / d;
        }
    }
    Ok(x)
}

/// Solve `A x = b` for a single right-hand side.
pub fn solve_vec<F: Scalar>(a: &Array2<F>, b: &Array1<F>) -> Result<Array1<F>> {
    let n = b.len();
    let bm = b.clone().into_shape_with_order((n, 1)).expect("reshape");
    let xm = solve(a, &bm)?;
    Ok(xm.column(0).to_owned())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of an orthogonal matrix.
pub fn sym_eig(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "sym_eig: matrix is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and q
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).expect("finite eigenvalues"));
    let vals: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, newc]] = v[[r, oldc]];
        }
    }
    Ok((vals, vecs))
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solve_recovers_known_solution() {
        let a: Array2<f64> = array![[4.0, 1.0], [1.0, 3.0]];
        let x_true: Array2<f64> = array![[1.0, -2.0], [0.5, 3.0]];
        let b = a.dot(&x_true);
        let x = solve(&a, &b).unwrap();
        for (xi, ti) in x.iter().zip(x_true.iter()) {
            assert!((xi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let b = array![[1.0], [1.0]];
        assert!(matches!(solve(&a, &b), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn solve_random_residuals_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(2..10usize);
            let a = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5)
                + Array2::<f64>::eye(n) * 2.0;
            let b = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() - 0.5);
            let x = solve(&a, &b).unwrap();
            let r = &a.dot(&x) - &b;
            assert!(r.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-10);
        }
    }

    #[test]
    fn sym_eig_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8usize;
        let g = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
        let a = &g + &g.t();
        let (vals, vecs) = sym_eig(&a).unwrap();
        // descending order
        for w in vals.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        // A v_i = lambda_i v_i
        for i in 0..n {
            let vi = vecs.column(i).to_owned();
            let av = a.dot(&vi);
            for k in 0..n {
                assert!((av[k] - vals[i] * vi[k]).abs() < 1e-9);
            }
        }
        // orthonormal columns
        let vtv = vecs.t().dot(&vecs);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - want).abs() < 1e-10);
            }
        }
    }
}
