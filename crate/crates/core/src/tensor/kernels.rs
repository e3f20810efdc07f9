//! Small dense kernels for the CP-ALS normal equations. Everything here is
//! `R × R` scale and runs single-threaded.

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are treated as a
/// failed factorization.
const PIVOT_FLOOR: f64 = 1e-14;
const SHIFT_START: f64 = 1e-12;
const SHIFT_MAX: f64 = 1e-3;

/// `aᵀa`, with the upper triangle mirrored so the result is exactly symmetric.
pub fn gram(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_finite() {
        return Err(Error::Shape("gram input has non-finite entries".into()));
    }
    let r = a.cols();
    let mut g = DenseMatrix::zeros(r, r);
    for i in 0..a.rows() {
        let row = a.row(i);
        for p in 0..r {
            let rp = row[p];
            let out = g.row_mut(p);
            for q in p..r {
                out[q] += rp * row[q];
            }
        }
    }
    for p in 0..r {
        for q in 0..p {
            g[(p, q)] = g[(q, p)];
        }
    }
    Ok(g)
}

/// Element-wise product `acc ∘ b`.
pub fn hadamard_accumulate(mut acc: DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if acc.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "hadamard of {:?} and {:?}",
            acc.shape(),
            b.shape()
        )));
    }
    for (x, y) in acc.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x *= y;
    }
    Ok(acc)
}

/// Solves `A·V = M` for `A` given symmetric positive semi-definite `V`.
///
/// Uses a Cholesky factorization of `V`. If that fails, a diagonal shift of
/// `1e-12·trace(V)/R` is added and escalated by ×10 until `1e-3·trace(V)/R`.
pub fn solve_normal(m: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    let r = v.rows();
    if v.cols() != r || m.cols() != r {
        return Err(Error::Shape(format!(
            "solve_normal with M {:?} and V {:?}",
            m.shape(),
            v.shape()
        )));
    }
    if !v.is_finite() || !m.is_finite() {
        return Err(Error::Singular);
    }
    let chol = match cholesky(v, 0.0) {
        Some(l) => l,
        None => {
            let trace: f64 = (0..r).map(|i| v[(i, i)]).sum();
            if trace <= 0.0 {
                return Err(Error::Singular);
            }
            let unit = trace / r as f64;
            let mut factor = SHIFT_START;
            loop {
                if let Some(l) = cholesky(v, factor * unit) {
                    break l;
                }
                factor *= 10.0;
                if factor > SHIFT_MAX * (1.0 + 1e-9) {
                    return Err(Error::Singular);
                }
            }
        }
    };
    let mut a = DenseMatrix::zeros(m.rows(), r);
    let mut y = vec![0.0; r];
    for i in 0..m.rows() {
        let rhs = m.row(i);
        // L y = rhs
        for p in 0..r {
            let mut s = rhs[p];
            for q in 0..p {
                s -= chol[(p, q)] * y[q];
            }
            y[p] = s / chol[(p, p)];
        }
        // Lᵀ x = y
        let x = a.row_mut(i);
        for p in (0..r).rev() {
            let mut s = y[p];
            for q in p + 1..r {
                s -= chol[(q, p)] * x[q];
            }
            x[p] = s / chol[(p, p)];
        }
    }
    Ok(a)
}

/// Lower Cholesky factor of `v + shift·I`, or `None` when a pivot collapses.
fn cholesky(v: &DenseMatrix, shift: f64) -> Option<DenseMatrix> {
    let r = v.rows();
    let max_diag = (0..r).map(|i| v[(i, i)] + shift).fold(0.0_f64, f64::max);
    if max_diag <= 0.0 {
        return None;
    }
    let floor = PIVOT_FLOOR * max_diag;
    let mut l = DenseMatrix::zeros(r, r);
    for j in 0..r {
        let mut d = v[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..r {
            let mut s = v[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_gram(a: &DenseMatrix) -> DenseMatrix {
        let r = a.cols();
        let mut g = DenseMatrix::zeros(r, r);
        for p in 0..r {
            for q in 0..r {
                let mut s = 0.0;
                for i in 0..a.rows() {
                    s += a[(i, p)] * a[(i, q)];
                }
                g[(p, q)] = s;
            }
        }
        g
    }

    #[test]
    fn gram_of_ones_counts_rows() {
        let g = gram(&DenseMatrix::filled(4, 2, 1.0)).unwrap();
        assert_eq!(g, DenseMatrix::filled(2, 2, 4.0));
        assert_eq!(gram(&DenseMatrix::identity(2)).unwrap(), DenseMatrix::identity(2));
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseMatrix::random(5, 3, &mut rng);
        let g = gram(&a).unwrap();
        let oracle = naive_gram(&a);
        for p in 0..3 {
            for q in 0..3 {
                assert!((g[(p, q)] - oracle[(p, q)]).abs() <= 1e-14);
                assert_eq!(g[(p, q)].to_bits(), g[(q, p)].to_bits());
            }
        }
    }

    #[test]
    fn gram_rejects_non_finite() {
        let mut a = DenseMatrix::zeros(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(gram(&a).is_err());
    }

    #[test]
    fn hadamard_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseMatrix::random(3, 4, &mut rng);
        assert_eq!(
            hadamard_accumulate(x.clone(), &DenseMatrix::filled(3, 4, 1.0)).unwrap(),
            x
        );
        let a = DenseMatrix::from_rows(&[&[2.0, 3.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[&[4.0, 5.0]]).unwrap();
        assert_eq!(
            hadamard_accumulate(a, &b).unwrap().as_slice(),
            &[8.0, 15.0]
        );
        let y = DenseMatrix::random(3, 4, &mut rng);
        let h = hadamard_accumulate(x.clone(), &y).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(h[(i, j)], x[(i, j)] * y[(i, j)]);
            }
        }
        assert!(hadamard_accumulate(x, &DenseMatrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn solve_with_scalar_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DenseMatrix::random(6, 3, &mut rng);
        assert_eq!(solve_normal(&m, &DenseMatrix::identity(3)).unwrap(), m);
        let mut two = DenseMatrix::identity(3);
        two.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
        let half = solve_normal(&m, &two).unwrap();
        for (a, b) in half.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b / 2.0).abs() <= 1e-15);
        }
    }

    fn residual(a: &DenseMatrix, v: &DenseMatrix, m: &DenseMatrix) -> f64 {
        a.matmul(v).unwrap().relative_error(m)
    }

    #[test]
    fn solve_random_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in [1, 2, 5, 16, 32] {
            let b = DenseMatrix::random(3 * r, r, &mut rng);
            let mut v = gram(&b).unwrap();
            for i in 0..r {
                v[(i, i)] += 1.0;
            }
            let m = DenseMatrix::random(10, r, &mut rng);
            let a = solve_normal(&m, &v).unwrap();
            assert!(residual(&a, &v, &m) <= 1e-10);
        }
    }

    #[test]
    fn solve_residual_holds_up_to_condition_1e8() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = 6;
        // V = Q diag(σ) Qᵀ with a Householder Q.
        for &cond in &[1e2f64, 1e5, 1e8] {
            let u: Vec<f64> = (0..r).map(|_| rng.gen::<f64>() - 0.5).collect();
            let un: f64 = u.iter().map(|x| x * x).sum();
            let mut q = DenseMatrix::identity(r);
            for i in 0..r {
                for j in 0..r {
                    q[(i, j)] -= 2.0 * u[i] * u[j] / un;
                }
            }
            let mut d = DenseMatrix::zeros(r, r);
            for i in 0..r {
                d[(i, i)] = cond.powf(-(i as f64) / (r - 1) as f64);
            }
            let v = q.matmul(&d).unwrap().matmul(&q.transpose()).unwrap();
            let mut vs = v.clone();
            for i in 0..r {
                for j in 0..i {
                    let avg = 0.5 * (v[(i, j)] + v[(j, i)]);
                    vs[(i, j)] = avg;
                    vs[(j, i)] = avg;
                }
            }
            let m = DenseMatrix::random(8, r, &mut rng);
            let a = solve_normal(&m, &vs).unwrap();
            assert!(residual(&a, &vs, &m) <= 1e-8, "cond {cond}");
        }
    }

    #[test]
    fn rank_deficient_falls_back_to_shift() {
        // V = ones: rank one, PSD.
        let v = DenseMatrix::filled(3, 3, 1.0);
        let m = DenseMatrix::from_rows(&[&[3.0, 3.0, 3.0]]).unwrap();
        let a = solve_normal(&m, &v).unwrap();
        assert!(a.is_finite());
        // Consistent system: the regularized solution still reproduces M.
        assert!(residual(&a, &v, &m) <= 1e-6);
    }

    #[test]
    fn zero_gram_is_singular() {
        let v = DenseMatrix::zeros(2, 2);
        let m = DenseMatrix::filled(1, 2, 1.0);
        assert!(matches!(solve_normal(&m, &v), Err(Error::Singular)));
    }
}
