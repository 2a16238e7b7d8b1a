//! Minimal dense tensor library with reverse-mode autodiff, sized for small
//! convolutional networks on the CPU. Everything is `f64` so that analytic
//! gradients can be checked against finite differences at tight tolerances.

pub mod array;
pub mod conv;
pub mod graph;
pub mod optim;

pub use array::Tensor;
pub use conv::Conv2dSpec;
pub use graph::{inverse_softplus, softplus, Gradients, Graph, Var};
pub use optim::{Adam, Sgd};

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (hi - lo) / (2.0 * step);
    }
    Tensor::new(x.shape(), out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a.sub(b).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
