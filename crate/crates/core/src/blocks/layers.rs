//! Dense layers, activations and LayerNorm.
//!
//! Every layer acts on `s x n` inputs row by row: a row is one sequence
//! position, and right-multiplication by a weight matrix maps widths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Lipschitz constant. Sigmoid is in fact 1/4-Lipschitz; 1 is the
    /// uniform bound the MLP estimates assume.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    /// Whether σ(0) = 0, required by the MLP covering argument.
    pub fn fixes_zero(self) -> bool {
        !matches!(self, Activation::Sigmoid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// `X ↦ X W` with square `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
}

impl Linear {
    pub fn new(weight: Matrix) -> Result<Self> {
        if weight.rows() != weight.cols() {
            return Err(Error::InvalidArgument(format!(
                "linear weight must be square, got {:?}",
                weight.shape()
            )));
        }
        Ok(Linear { weight })
    }

    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)
    }
}

/// Two-layer perceptron `X ↦ σ(X W₁) W₂`, bias free.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub w2: Matrix,
    pub activation: Activation,
}

impl Mlp2 {
    pub fn new(w1: Matrix, w2: Matrix, activation: Activation) -> Result<Self> {
        if w1.cols() != w2.rows() || w1.rows() != w2.cols() {
            return Err(Error::InvalidArgument(format!(
                "mlp weights {:?} and {:?} do not compose to a square map",
                w1.shape(),
                w2.shape()
            )));
        }
        Ok(Mlp2 { w1, w2, activation })
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Forward pass; also lowers `margin` to the smallest |pre-activation|
    /// when the activation is ReLU.
    pub(crate) fn forward(&self, x: &Matrix, margin: &mut f64) -> Result<Matrix> {
        let pre = x.matmul(&self.w1)?;
        if self.activation == Activation::Relu {
            for v in pre.as_slice() {
                *margin = margin.min(v.abs());
            }
        }
        let act = self.activation;
        pre.map(|v| act.eval(v)).matmul(&self.w2)
    }
}

/// Row-wise LayerNorm `γ ⊙ (x − μ)/√(var + ε) + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    /// `1 x n`
    pub gamma: Matrix,
    /// `1 x n`
    pub beta: Matrix,
    pub epsilon: f64,
}

pub const DEFAULT_LN_EPSILON: f64 = 1e-5;

impl LayerNorm {
    pub fn new(gamma: Matrix, beta: Matrix, epsilon: f64) -> Result<Self> {
        if gamma.rows() != 1 || beta.shape() != gamma.shape() {
            return Err(Error::InvalidArgument(format!(
                "layernorm gamma/beta must be matching row vectors, got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::InvalidArgument("layernorm epsilon must be positive".into()));
        }
        Ok(LayerNorm { gamma, beta, epsilon })
    }

    /// γ = 1, β = 0.
    pub fn standard(width: usize, epsilon: f64) -> Self {
        LayerNorm {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            epsilon,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Matrix {
        let n = x.cols();
        let mut out = Matrix::zeros(x.rows(), n);
        let gamma = self.gamma.as_slice();
        let beta = self.beta.as_slice();
        for i in 0..x.rows() {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.epsilon).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = gamma[j] * (row[j] - mu) * inv + beta[j];
            }
        }
        out
    }

    /// Bound on ‖LN(x)‖₂ for one row: ‖γ‖_∞·√n + ‖β‖₂.
    pub fn row_output_bound(&self) -> f64 {
        self.gamma.max_abs() * (self.width() as f64).sqrt() + self.beta.frobenius()
    }
}
