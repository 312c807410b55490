//! Central-difference gradient oracle, f64 only. This is the independent
//! route every analytic backward rule in the crate is checked against.

use super::tensor::Tensor;
use crate::Result;

/// d f / d x[i] ~= (f(x + h e_i) - f(x - h e_i)) / (2h), error O(h^2).
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Halving h must shrink the truncation error ~4x (second-order scheme).
    #[test]
    fn central_difference_is_second_order() {
        let x = Tensor::scalar(0.3);
        let f = |t: &Tensor<f64>| Ok(t.data()[0].exp());
        let exact = 0.3f64.exp();
        let g1 = finite_diff_grad(f, &x, 1e-3).unwrap().data()[0];
        let g2 = finite_diff_grad(f, &x, 5e-4).unwrap().data()[0];
        let e1 = (g1 - exact).abs();
        let e2 = (g2 - exact).abs();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}, e1 {e1}, e2 {e2}");
    }

    #[test]
    fn quadratic_gradient_is_exact_to_rounding() {
        // f = sum((x - t)^2), df/dx = 2(x - t).
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let t = [0.5, 0.5, 0.5];
        let g = finite_diff_grad(
            |p: &Tensor<f64>| {
                Ok(p.data()
                    .iter()
                    .zip(&t)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            let exact = 2.0 * (x.data()[i] - t[i]);
            assert!((gv - exact).abs() < 1e-8, "{gv} vs {exact}");
        }
    }
}
