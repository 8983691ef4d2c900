//! Named parameter storage shared by the recognizer and the language model.
//!
//! Parameters live outside any tape as plain tensors. Each forward pass
//! binds the whole store onto a fresh tape once (`bind`), so every use of a
//! parameter within the pass shares one node and gradients accumulate there.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in ±1/√fan_in, the row count for matrices.
    pub fn register_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(
            name,
            Tensor {
                shape: shape.to_vec(),
                data,
                grad: None,
            },
        )
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrite a parameter's data from a loaded tensor, checking shape.
    pub fn fill(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| {
            Error::from(crate::error::CheckpointError::UnknownParam(name.to_string()))
        })?;
        let expected = self.tensors[id.0].shape.clone();
        if expected != tensor.shape {
            return Err(crate::error::CheckpointError::ParamShape {
                name: name.to_string(),
                found: tensor.shape,
                expected,
            }
            .into());
        }
        self.tensors[id.0].data = tensor.data;
        Ok(())
    }

    /// Leaf every parameter onto `tape` in registration order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            refs: self.tensors.iter().map(|t| tape.leaf_from(t)).collect(),
        }
    }
}

/// Tape handles for every parameter of a store, in registration order.
#[derive(Debug, Clone)]
pub struct Bound {
    refs: Vec<TensorRef>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> TensorRef {
        self.refs[id.0]
    }

    pub fn refs(&self) -> &[TensorRef] {
        &self.refs
    }
}

/// Affine map `x·W + b`, bias broadcast over rows.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LinearParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register_init(
            format!("{prefix}.w"),
            &[input_dim, output_dim],
            input_dim,
            rng,
        );
        let b = store.register_zeros(format!("{prefix}.b"), &[1, output_dim]);
        LinearParams {
            w,
            b,
            input_dim,
            output_dim,
        }
    }
}

pub fn linear(
    tape: &mut Tape,
    bound: &Bound,
    p: &LinearParams,
    x: TensorRef,
) -> Result<TensorRef> {
    let xw = tape.matmul(x, bound.get(p.w))?;
    tape.add_row(xw, bound.get(p.b))
}
