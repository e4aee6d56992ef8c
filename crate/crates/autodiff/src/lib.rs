//! Minimal reverse-mode automatic differentiation over dynamic-dimensional
//! `f64` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates gradients for every node that
//! requires them. Everything is deterministic: no threading inside the tape,
//! no hash-order iteration, plain IEEE-754 double arithmetic.
//!
//! The op set is exactly what a small convolutional GAN needs: conv2d
//! (im2col), linear maps, instance normalization, leaky-relu/tanh/softplus,
//! nearest-neighbor upsampling, average pooling, channel split/concat,
//! elementwise max, log-softmax, and a gradient-reversal op.

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use optim::Adam;
pub use tape::{Gradients, Tape, TensorId};

/// Dynamic-dimensional `f64` tensor, the only value type on the tape.
pub type Arr = ndarray::ArrayD<f64>;

/// Build a 0-dimensional tensor holding one scalar.
pub fn scalar(v: f64) -> Arr {
    ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), v)
}

/// Read a 0-dimensional tensor back as `f64`.
pub fn scalar_value(a: &Arr) -> f64 {
    debug_assert_eq!(a.ndim(), 0, "expected a scalar tensor");
    *a.iter().next().expect("empty tensor")
}
