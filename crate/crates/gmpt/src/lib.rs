//! Polarizability tensors of small conducting permeable objects: edge-element
//! solves of the transmission problems, tensor assembly, the asymptotic
//! forward model and dictionary-based identification.

pub mod cli;
pub mod dictionary;
pub mod fem;
pub mod fixtures;
pub mod forward;
pub mod mesh;
pub mod polarizability;
pub mod quadrature;
pub mod scalar;
pub mod transmission;
pub mod verify;

pub use gmpt_core;
