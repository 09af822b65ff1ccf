//! Central finite-difference oracle for analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Maximum relative error between the analytic gradient of a scalar
/// function at `x` and its central finite difference with step
/// [`DEFAULT_EPS`]:
///
/// `max_i |a_i − fd_i| / max(1e-8, |a_i| + |fd_i|)`
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_eps(f, x, DEFAULT_EPS)
}

pub fn grad_check_eps<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let xv = graph.variable(x.clone())?;
    let y = f(&mut graph, xv)?;
    if graph.value(y).numel() != 1 {
        return Err(Error::NotScalar(graph.shape(y).to_vec()));
    }
    graph.backward(y)?;
    let analytic = graph.grad_or_zero(xv);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.variable(Tensor::new(x.shape().to_vec(), values)?)?;
        let y = f(&mut g, v)?;
        Ok(g.values(y)[0])
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.values().to_vec();
        plus[i] += eps;
        let mut minus = x.values().to_vec();
        minus[i] -= eps;
        // divide by the step actually taken after rounding
        let step = plus[i] - minus[i];
        let fd = (eval(plus)? - eval(minus)?) / step;
        let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_f64s([1], &[0.3]).unwrap();
        assert_eq!(grad_check(|g, v| g.sum(v), &x).unwrap(), 0.0);
        let x = Tensor::from_f64s([3], &[0.3, -1.2, 4.0]).unwrap();
        assert!(grad_check(|g, v| g.sum(v), &x).unwrap() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::from_f64s([1], &[0.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.sigmoid(v)?;
                g.sum(s)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::from_f64s([2], &[1.0, 2.0]).unwrap();
        assert!(matches!(grad_check(|g, v| g.tanh(v), &x), Err(Error::NotScalar(_))));
    }
}
