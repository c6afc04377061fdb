//! Named, ordered parameter storage shared by the encoder, filters and decoder.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// The tape variable for this parameter on a tape filled by [`ParamSet::bind`].
    #[inline]
    pub fn var(self) -> Var {
        Var(self.0)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        self.add_uniform(name, rows, cols, init.scale(rows, cols), rng)
    }

    /// Adds a parameter initialized uniformly in `[-scale, scale)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Matrix::uniform(rows, cols, scale, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.iter().map(|(n, m)| (n.to_string(), m.shape())).collect()
    }

    /// Pushes every parameter onto an empty tape, in order.
    pub fn bind(&self, tape: &mut Tape<T>) {
        assert!(tape.is_empty(), "parameters must be bound to a fresh tape");
        for v in &self.values {
            tape.leaf(v.clone());
        }
    }

    /// Extracts per-parameter gradients, substituting zeros for parameters
    /// the loss did not reach.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Matrix<T>> {
        self.ids()
            .map(|id| {
                grads
                    .get(id.var())
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.get(id).rows(), self.get(id).cols()))
            })
            .collect()
    }

    /// Replaces values from `(name, matrix)` pairs; names and shapes must match.
    pub fn load_named(&mut self, tensors: Vec<(String, Matrix<T>)>) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.values.len(),
                tensors.len()
            )));
        }
        for (name, m) in tensors {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown tensor `{name}`")))?;
            if self.get(id).shape() != m.shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{name}: {:?} vs {:?}", self.get(id).shape(), m.shape()),
                ));
            }
            self.values[id.0] = m;
        }
        Ok(())
    }
}
