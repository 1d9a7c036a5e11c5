//! Weight initializers.

use rand::Rng;

use super::Tensor;

/// Uniform in `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Glorot/Xavier uniform for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}

/// Uniform with the given standard deviation.
pub fn uniform_std<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor<f32> {
    uniform(shape, std * 3f32.sqrt(), rng)
}

use super::{ParamStore, Scalar};
use crate::error::{bail, Result};

/// How a declared parameter starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// Xavier uniform over a rank-2 `[fan_in, fan_out]` weight.
    Xavier,
    /// Uniform with this standard deviation.
    Std(f32),
}

/// Declared name, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Allocates and initializes every declared parameter, in order.
pub fn materialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for spec in specs {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
            Init::Const(c) => Tensor::full(&spec.shape, c),
            Init::Xavier => {
                if spec.shape.len() != 2 {
                    bail!(Config, "xavier init needs a rank-2 shape for {}", spec.name);
                }
                xavier_uniform(spec.shape[0], spec.shape[1], rng)
            }
            Init::Std(std) => uniform_std(&spec.shape, std, rng),
        };
        store.add(spec.name.clone(), t)?;
    }
    Ok(store)
}

/// Checks that `store` holds exactly the declared parameters, in order.
pub fn check_store<T: Scalar>(specs: &[ParamSpec], store: &ParamStore<T>) -> Result<()> {
    if specs.len() != store.len() {
        bail!(
            Integrity,
            "model declares {} parameters, store holds {}",
            specs.len(),
            store.len()
        );
    }
    for (spec, (name, t)) in specs.iter().zip(store.iter()) {
        if spec.name != name || spec.shape != t.shape() {
            bail!(
                Integrity,
                "expected parameter {} {:?}, found {} {:?}",
                spec.name,
                spec.shape,
                name,
                t.shape()
            );
        }
    }
    Ok(())
}
