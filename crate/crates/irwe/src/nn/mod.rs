//! Differentiable building blocks: tape autodiff, parameter registry, layer
//! builders, Adam, and finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
