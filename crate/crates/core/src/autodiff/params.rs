//! Named parameter storage and initializers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Included in the L2 penalty (weight matrices, not biases).
    pub decay: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter and return its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> usize {
        self.params.push(Parameter {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_constant(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// `Σ w²` over decaying parameters.
    pub fn l2_penalty(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.decay)
            .flat_map(|p| p.value.data())
            .map(|w| w * w)
            .sum()
    }

    /// Snapshot of all values in order.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.data().to_vec()).collect()
    }

    pub fn set_values(&mut self, values: &[Vec<f64>]) -> Result<(), AutodiffError> {
        if values.len() != self.params.len() {
            return Err(AutodiffError::ParameterMismatch(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.value.len() {
                return Err(AutodiffError::ParameterMismatch(format!("length of `{}`", p.name)));
            }
            p.value.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}

/// `rows×cols` matrix uniform in `±√(6/(rows+cols))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Square orthogonal matrix from the QR factorization of a Gaussian draw,
/// with column signs fixed by `diag(R)` so the result is Haar distributed.
pub fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let gaussian = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = gaussian.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let data = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect();
    Tensor::matrix(n, n, data).expect("shape matches data")
}
