//! Canonical 2-D matrix product and its two gradient kernels.
//!
//! One accumulation order, everywhere: output rows are filled by walking the
//! left operand's row left to right and adding scaled right-operand rows
//! (i-k-j order). This never reassociates a given output element's sum, so
//! results are bit-identical across calls, and the zero/one fast paths (spike
//! inputs are mostly 0s and 1s) change nothing but speed.

use super::tensor::Tensor;
use super::Scalar;
use crate::{DistaError, Result};

fn check_2d<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(DistaError::Shape(format!(
            "{} must be 2-D, got {:?}",
            name,
            t.shape()
        )));
    }
    Ok(())
}

/// C = A (m x k) * B (k x p).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(a, "matmul lhs")?;
    check_2d(b, "matmul rhs")?;
    let (m, ka) = (a.rows(), a.cols());
    let (kb, p) = (b.rows(), b.cols());
    if ka != kb {
        return Err(DistaError::Shape(format!(
            "matmul: lhs is {}x{}, rhs is {}x{}",
            m, ka, kb, p
        )));
    }
    let mut out = Tensor::zeros(&[m, p]);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = b.row(kk);
            if av == T::one() {
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += bv;
                }
            } else {
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(out)
}

/// dA = G (m x p) * B^T, accumulated into `da`.
/// dA[i,k] is a single left-to-right dot product over j.
pub fn matmul_grad_a<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>, da: &mut Tensor<T>) {
    let m = g.rows();
    let k = b.rows();
    for i in 0..m {
        let g_row = g.row(i);
        let da_row = da.row_mut(i);
        for (kk, slot) in da_row.iter_mut().enumerate().take(k) {
            let b_row = b.row(kk);
            let mut acc = T::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *slot += acc;
        }
    }
}

/// dB = A^T * G (k x p), accumulated into `db`.
/// Row k of dB collects a[i,k]-scaled rows of G in ascending i; zero left
/// entries (silent spikes) are skipped without changing the sum.
pub fn matmul_grad_b<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, db: &mut Tensor<T>) {
    let m = a.rows();
    for i in 0..m {
        let a_row = a.row(i);
        let g_row = g.row(i);
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let db_row = db.row_mut(kk);
            if av == T::one() {
                for (o, &gv) in db_row.iter_mut().zip(g_row) {
                    *o += gv;
                }
            } else {
                for (o, &gv) in db_row.iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdiff::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // [[1,2]] * [[3],[4]] = [[11]]
    #[test]
    fn hand_dot_product() {
        let a = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn identity_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap(), x);
        assert_eq!(matmul(&x, &eye).unwrap(), x);
    }

    #[test]
    fn zeros_produce_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::randn(&[4, 5], 1.0, &mut rng);
        let z = Tensor::<f32>::zeros(&[5, 2]);
        let c = matmul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one() {
        let a = Tensor::<f32>::scalar(3.0);
        let a = Tensor::from_vec(&[1, 1], a.data().to_vec()).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![-2.0f32]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data()[0], -6.0);
    }

    #[test]
    fn inner_dim_mismatch_is_shape_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(
            matmul(&a, &b),
            Err(crate::DistaError::Shape(_))
        ));
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::randn(&[7, 9], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[9, 5], 1.0, &mut rng);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1, c2);
    }

    // Gradient kernels against the central-difference oracle on
    // L = sum(A*B): dL/dA = ones * B^T, dL/dB = A^T * ones.
    #[test]
    fn grad_kernels_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let ones = Tensor::<f64>::filled(&[3, 2], 1.0);

        let mut da = Tensor::zeros(&[3, 4]);
        matmul_grad_a(&ones, &b, &mut da);
        let fd_a = finite_diff_grad(
            |x| Ok(matmul(x, &b)?.data().iter().sum()),
            &a,
            1e-6,
        )
        .unwrap();
        for (g, f) in da.data().iter().zip(fd_a.data()) {
            assert!((g - f).abs() < 1e-7, "dA {g} vs {f}");
        }

        let mut db = Tensor::zeros(&[4, 2]);
        matmul_grad_b(&a, &ones, &mut db);
        let fd_b = finite_diff_grad(
            |x| Ok(matmul(&a, x)?.data().iter().sum()),
            &b,
            1e-6,
        )
        .unwrap();
        for (g, f) in db.data().iter().zip(fd_b.data()) {
            assert!((g - f).abs() < 1e-7, "dB {g} vs {f}");
        }
    }
}
