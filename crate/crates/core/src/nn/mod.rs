//! Minimal neural-network toolkit: kernels, reverse-mode autograd, parameter
//! storage and optimizers.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};

use rand::Rng;

use crate::tensor::{Element, Tensor};

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<E: Element, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<E> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// He-normal initialization, `N(0, 2/fan_in)`.
pub fn he_normal<E: Element, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<E> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::<E>::randn(shape, rng).map(|v| v * E::of(std))
}

/// Glorot-uniform initialization, `U(-sqrt(6/(fan_in+fan_out)), +...)`.
pub fn glorot_uniform<E: Element, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}
