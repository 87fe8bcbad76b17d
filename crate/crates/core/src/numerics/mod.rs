//! Dense values, analytic-gradient building blocks, and the finite-difference
//! oracle that certifies them.

pub mod gradcheck;
pub mod linear;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckError};
pub use linear::{linear_backward, linear_forward, Linear, Mlp2, Mlp2Cache};
pub use ops::{l2_normalize, softmax_cross_entropy};
pub use tensor::{GradSet, ParamSet, Parameter, Tensor};
