//! Dense 64-bit tensors, a reverse-mode tape, the binary-concrete edge gate
//! and a finite-difference gradient checker.

mod gate;
mod gradcheck;
mod optim;
mod tape;

use ndarray::Array2;

pub use gate::{concrete_gate, deterministic_gate, gate_derivative, temperature_at, GateParams};
pub use gradcheck::finite_diff_check;
pub use optim::Sgd;
pub use tape::{Gradients, ParamId, ParamStore, SparseMatrix, Tape, Var};

/// All tensors are 2-D and row-major; scalars are `1x1`.
pub type Tensor = Array2<f64>;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn scalar(v: f64) -> Tensor {
    Array2::from_elem((1, 1), v)
}
