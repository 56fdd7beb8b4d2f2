//! Minimal dense-tensor engine: reverse-mode differentiation, an Adam
//! optimizer with an inverse-square-root schedule, and a one-sided Jacobi
//! SVD. Everything runs in 64-bit floats on a single thread; determinism is
//! by construction (no unordered reductions, all randomness seeded).

mod optim;
mod svd;
mod tensor;

pub use optim::{
    AdamConfig, LrSchedule, NamedGradients, OptimizerState, Param, ParameterSet, optimizer_step,
};
pub use svd::{singular_values, svd_full, SvdDecomposition};
pub use tensor::{GradStore, NumericsError, Tensor, TensorId};
