//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! then walks the record in reverse and returns [`Gradients`] for every node
//! that depends on a [`Graph::param`] leaf. Constants (and values passed
//! through [`Graph::detach`]) stop gradient flow.
//!
//! The operation set is what a small two-stage detector needs: convolution,
//! bilinear region pooling, dense layers, softmax-family losses, and a
//! gradient-reversal node.
//!
//! ```
//! use dgdet_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[1, 2], vec![1.0, -2.0]));
//! let r = g.grl(x, 0.5);
//! let s = g.sum(r);
//! let grads = g.backward(s);
//! assert_eq!(grads.wrt(x).data(), &[-0.5, -0.5]);
//! ```

mod graph;
mod tensor;

pub use graph::{smooth_l1_value, softmax_in_place, Gradients, Graph, PoolRegion, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function.
pub fn numeric_gradient<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}
