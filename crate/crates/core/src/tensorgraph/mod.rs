//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! The operation set is exactly what the point-set classifier, the
//! perturbation network and the input-gradient alignment loss need. There
//! is no broadcasting beyond the bias add in [`Graph::linear`].

mod graph;
mod tensor;

pub use graph::{Graph, NodeId, NORMALIZE_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let base = x.data().to_vec();
    let mut probe = Tensor::new(x.shape().to_vec(), base.clone())?;
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut d = base.clone();
        d[i] = base[i] + h;
        probe.set_data(d.clone())?;
        let up = f(&probe)?;
        d[i] = base[i] - h;
        probe.set_data(d)?;
        let down = f(&probe)?;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normwise relative error `max|a - b| / max(max|a|, max|b|)`.
///
/// Returns the absolute error when both sides are below `1e-12`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_multiply() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 2.0]]));
        let w = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let w = g.constant(t2(&[&[2.0, 0.0], &[0.0, 3.0]]));
        let b = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[3.0, 1.0, 1.0, 4.0]);
    }

    #[test]
    fn linear_bias_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.3, -1.0], &[2.0, 0.5], &[1.0, 1.0]]));
        let w = g.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let b = g.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap().with_grad());
        let y = g.linear(x, w, b).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // three rows each contribute one
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0, 3.0]);

        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.3, -1.0]]));
        let w = g.constant(t2(&[&[1.0, 2.0], &[4.0, 5.0]]));
        let b = g.leaf(Tensor::vector(vec![0.1, 0.2]).unwrap().with_grad());
        let y = g.linear(x, w, b).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_forward_backward_idempotent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap().with_grad());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let yy = g.relu(y).unwrap();
        assert_eq!(g.value(yy).data(), g.value(y).data());

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 2.0]).unwrap().with_grad());
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0]).unwrap().with_grad());
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn max_pool_values_and_routing() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[&[1.0, 5.0], &[3.0, 2.0]]).with_grad());
        let p = g.max_pool_points(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[&[2.0], &[2.0], &[1.0]]).with_grad());
        let p = g.max_pool_points(x).unwrap();
        assert_eq!(g.pool_argmax(p).unwrap(), &[0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut g = Graph::new();
        let z = g.constant(t2(&[&[0.0, 0.0]]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let z = g.constant(t2(&[&[1000.0, 0.0]]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.value(l).item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let z = g.constant(t2(&[&[0.0, 0.0]]));
        assert!(matches!(g.softmax_cross_entropy(z, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_basic_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 7.0]).unwrap().with_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(Error::Rank { .. })));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e308]).unwrap());
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn row_normalize_zero_rows() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[&[3.0, 4.0], &[0.0, 0.0]]).with_grad());
        let u = g.row_normalize(x).unwrap();
        assert_eq!(g.value(u).data(), &[0.6, 0.8, 0.0, 0.0]);
        let s = g.sum(u).unwrap();
        g.backward(s).unwrap();
        let gr = g.grad(x).unwrap();
        assert_eq!(&gr[2..], &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_simple_cases() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!(relative_error(g.data(), &[2.0, 4.0]) < 1e-9);
        let g = finite_difference_gradient(|_| Ok(3.0), &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
