//! Allocation-only building blocks for generalised magnetic polarizability
//! tensors: multi-index tensor algebra, Laplace Green's function derivatives and
//! divergence-free polynomial fields.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod kernels;
pub mod linalg;
pub mod polyfield;
pub mod tensor;

pub use kernels::{green, green_deriv, green_deriv_with_limit, green_hessian, KernelError};
pub use linalg::{Mat3, Vec3};
pub use polyfield::{
    dipole_field, taylor_background, BackgroundModel, PolyError, PolyField, VectorPolynomial,
};
pub use tensor::{
    alternating, enumerate_multiindices, monomial, DenseTensor, MultiIndex, TensorError, C64,
};
