use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, Axis, Ix1, Ix2};

use super::init::xavier_uniform;
use super::param::{ParamMut, Parameter, Parameterized};
use crate::error::{Error, Result};

/// `y = W x + b`, checking shapes.
pub fn linear(x: ArrayView1<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "linear: x has {} entries, W is {}x{}, b has {}",
            x.len(),
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    Ok(w.dot(&x) + &b)
}

/// Affine layer with weight `out x in` and bias `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter<Ix2>,
    pub bias: Parameter<Ix1>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "linear: weight has {} rows, bias has {}",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
        })
    }

    pub fn init(out_dim: usize, in_dim: usize, seed: u64) -> Result<Self> {
        Self::new(xavier_uniform(out_dim, in_dim, seed)?, Array1::zeros(out_dim))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        linear(x, self.weight.value.view(), self.bias.value.view())
    }

    /// Applies the layer to every row of `xs` (`n x in` -> `n x out`).
    pub fn forward_rows(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if xs.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear: input rows have {} entries, layer expects {}",
                xs.ncols(),
                self.in_dim()
            )));
        }
        Ok(xs.dot(&self.weight.value.t()) + &self.bias.value)
    }

    /// Accumulates `dW += dy x^T`, `db += dy` and returns `dx = W^T dy`.
    pub fn backward(&mut self, x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
        let dy2 = dy.insert_axis(Axis(1));
        let x2 = x.insert_axis(Axis(0));
        self.weight.grad += &dy2.dot(&x2);
        self.bias.grad += &dy;
        self.weight.value.t().dot(&dy)
    }

    /// Row-wise version of [`Linear::backward`].
    pub fn backward_rows(&mut self, xs: ArrayView2<f64>, dys: ArrayView2<f64>) -> Array2<f64> {
        self.weight.grad += &dys.t().dot(&xs);
        self.bias.grad += &dys.sum_axis(Axis(0));
        dys.dot(&self.weight.value)
    }
}

impl Parameterized for Linear {
    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![self.weight.named_mut("weight"), self.bias.named_mut("bias")]
    }

    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![self.weight.named("weight"), self.bias.named("bias")]
    }
}
