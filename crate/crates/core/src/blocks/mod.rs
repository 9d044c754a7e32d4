//! Network building blocks as self-maps on `ℝ^{s×n}`.
//!
//! A [`Block`] is an immutable operator. [`Block::apply`] is the exact forward
//! pass; [`Block::jvp`] is a central finite difference of it. Blocks never
//! change the input shape: narrower internal widths are handled by
//! [`Block::pad_to_width`], which adds zero-weight virtual neurons.

mod attention;
mod layers;

pub use attention::{softmax_rows, Head, MultiHeadAttention, SelfAttention};
pub use layers::{Activation, LayerNorm, Linear, Mlp2, DEFAULT_LN_EPSILON};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Transformer block with LayerNorm in front of each residual branch:
/// `(I + α·MSA∘LN) ∘ (I + α·MLP∘LN)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreLn {
    pub ln: LayerNorm,
    pub mlp: Mlp2,
    pub attn: MultiHeadAttention,
    pub alpha: f64,
}

/// Transformer block with LayerNorm after each residual sum:
/// `LN ∘ (I + MLP) ∘ LN ∘ (I + MSA)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PostLn {
    pub ln: LayerNorm,
    pub mlp: Mlp2,
    pub attn: MultiHeadAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Linear(Linear),
    Mlp2(Mlp2),
    LayerNorm(LayerNorm),
    SelfAttention(SelfAttention),
    MultiHeadSelfAttention(MultiHeadAttention),
    /// `X + α·inner(X)`
    Residual { inner: Box<Block>, alpha: f64 },
    PreLnTransformer(PreLn),
    PostLnTransformer(PostLn),
    /// Applied first to last. An empty stack is the identity on its width.
    Stack { width: usize, blocks: Vec<Block> },
    /// `[X₁ | X₂] ↦ [inner(X₁) | 0]`: the inner block on the leading columns,
    /// zero on the virtual ones.
    Padded { inner: Box<Block>, width: usize },
}

impl Block {
    pub fn identity(width: usize) -> Block {
        Block::Stack {
            width,
            blocks: Vec::new(),
        }
    }

    pub fn linear(weight: Matrix) -> Result<Block> {
        Ok(Block::Linear(Linear::new(weight)?))
    }

    pub fn residual(inner: Block, alpha: f64) -> Block {
        Block::Residual {
            inner: Box::new(inner),
            alpha,
        }
    }

    pub fn stack(blocks: Vec<Block>) -> Result<Block> {
        let Some(first) = blocks.first() else {
            return Err(Error::InvalidArgument(
                "use Block::identity for an empty stack".into(),
            ));
        };
        let width = first.width();
        if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.width() != width) {
            return Err(Error::InvalidArgument(format!(
                "stack member {i} has width {}, expected {width}",
                b.width()
            )));
        }
        Ok(Block::Stack { width, blocks })
    }

    /// Stack of `count` copies of `self`.
    pub fn repeat(&self, count: usize) -> Block {
        Block::Stack {
            width: self.width(),
            blocks: vec![self.clone(); count],
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Block::Linear(l) => l.width(),
            Block::Mlp2(m) => m.width(),
            Block::LayerNorm(ln) => ln.width(),
            Block::SelfAttention(a) => a.width(),
            Block::MultiHeadSelfAttention(a) => a.width(),
            Block::Residual { inner, .. } => inner.width(),
            Block::PreLnTransformer(t) => t.ln.width(),
            Block::PostLnTransformer(t) => t.ln.width(),
            Block::Stack { width, .. } | Block::Padded { width, .. } => *width,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Block::Linear(_) => "linear",
            Block::Mlp2(_) => "mlp2",
            Block::LayerNorm(_) => "layernorm",
            Block::SelfAttention(_) => "self_attention",
            Block::MultiHeadSelfAttention(_) => "multi_head_self_attention",
            Block::Residual { .. } => "residual",
            Block::PreLnTransformer(_) => "pre_ln_transformer",
            Block::PostLnTransformer(_) => "post_ln_transformer",
            Block::Stack { .. } => "stack",
            Block::Padded { .. } => "padded",
        }
    }

    /// Whether the forward map is smooth (no ReLU kinks anywhere inside).
    pub fn is_smooth(&self) -> bool {
        match self {
            Block::Mlp2(m) => m.activation != Activation::Relu,
            Block::PreLnTransformer(t) => t.mlp.activation != Activation::Relu,
            Block::PostLnTransformer(t) => t.mlp.activation != Activation::Relu,
            Block::Residual { inner, .. } | Block::Padded { inner, .. } => inner.is_smooth(),
            Block::Stack { blocks, .. } => blocks.iter().all(Block::is_smooth),
            _ => true,
        }
    }

    /// Whether the block contains self-attention (whose Lipschitz bound needs
    /// a bounded domain).
    pub fn has_attention(&self) -> bool {
        match self {
            Block::SelfAttention(_)
            | Block::MultiHeadSelfAttention(_)
            | Block::PreLnTransformer(_)
            | Block::PostLnTransformer(_) => true,
            Block::Residual { inner, .. } | Block::Padded { inner, .. } => inner.has_attention(),
            Block::Stack { blocks, .. } => blocks.iter().any(Block::has_attention),
            _ => false,
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.width() || x.rows() == 0 {
            return Err(Error::shape(
                self.kind_name(),
                (x.rows().max(1), self.width()),
                x.shape(),
            ));
        }
        Ok(())
    }

    /// Exact forward pass.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut margin = f64::INFINITY;
        self.apply_with_margin(x, &mut margin)
    }

    /// Forward pass that also reports the smallest |pre-activation| seen by any
    /// ReLU inside the block (`∞` when there is none).
    pub fn apply_with_margin(&self, x: &Matrix, margin: &mut f64) -> Result<Matrix> {
        self.check_input(x)?;
        self.forward(x, margin)
    }

    fn forward(&self, x: &Matrix, margin: &mut f64) -> Result<Matrix> {
        let name = self.kind_name();
        match self {
            Block::Linear(l) => l.forward(x)?.ensure_finite(name),
            Block::Mlp2(m) => m.forward(x, margin)?.ensure_finite(name),
            Block::LayerNorm(ln) => ln.forward(x).ensure_finite(name),
            Block::SelfAttention(a) => a.forward(x)?.ensure_finite(name),
            Block::MultiHeadSelfAttention(a) => a.forward(x)?.ensure_finite(name),
            Block::Residual { inner, alpha } => {
                let f = inner.forward(x, margin).map_err(|e| nest(e, name))?;
                x.axpy(*alpha, &f)?.ensure_finite(name)
            }
            Block::PreLnTransformer(t) => {
                let f1 = t.mlp.forward(&t.ln.forward(x), margin)?;
                let h = x.axpy(t.alpha, &f1)?.ensure_finite("pre_ln_transformer/mlp_branch")?;
                let f2 = t.attn.forward(&t.ln.forward(&h))?;
                h.axpy(t.alpha, &f2)?
                    .ensure_finite("pre_ln_transformer/attention_branch")
            }
            Block::PostLnTransformer(t) => {
                let a = x
                    .add(&t.attn.forward(x)?)?
                    .ensure_finite("post_ln_transformer/attention_sum")?;
                let h = t.ln.forward(&a).ensure_finite("post_ln_transformer/first_norm")?;
                let m = h
                    .add(&t.mlp.forward(&h, margin)?)?
                    .ensure_finite("post_ln_transformer/mlp_sum")?;
                t.ln.forward(&m).ensure_finite("post_ln_transformer/second_norm")
            }
            Block::Stack { blocks, .. } => {
                let mut h = x.clone();
                for (i, b) in blocks.iter().enumerate() {
                    h = b
                        .forward(&h, margin)
                        .map_err(|e| nest(e, &format!("stack[{i}]")))?;
                }
                Ok(h)
            }
            Block::Padded { inner, .. } => {
                let w = inner.width();
                let y = inner
                    .forward(&x.columns(0, w), margin)
                    .map_err(|e| nest(e, name))?;
                y.pad(x.rows(), x.cols())
            }
        }
    }

    /// Central difference `(T(X + hV) − T(X − hV)) / 2h`.
    pub fn jvp(&self, x: &Matrix, v: &Matrix, h: f64) -> Result<Matrix> {
        if v.shape() != x.shape() {
            return Err(Error::shape("jvp direction", x.shape(), v.shape()));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
        }
        let plus = self.apply(&x.axpy(h, v)?)?;
        let minus = self.apply(&x.axpy(-h, v)?)?;
        Ok(plus.sub(&minus)?.scale(0.5 / h))
    }

    /// Returns a block on `n_target` columns that acts as `self` on the leading
    /// columns and keeps the added ones at zero.
    pub fn pad_to_width(&self, n_target: usize) -> Result<Block> {
        let n = self.width();
        if n_target < n {
            return Err(Error::InvalidArgument(format!(
                "cannot pad width {n} down to {n_target}"
            )));
        }
        if n_target == n {
            return Ok(self.clone());
        }
        Ok(match self {
            Block::Linear(l) => Block::Linear(Linear::new(l.weight.pad(n_target, n_target)?)?),
            Block::Mlp2(m) => Block::Mlp2(Mlp2::new(
                m.w1.pad(n_target, m.hidden())?,
                m.w2.pad(m.hidden(), n_target)?,
                m.activation,
            )?),
            Block::SelfAttention(a) => {
                let h = &a.head;
                Block::SelfAttention(SelfAttention {
                    head: Head::new(
                        h.wq.pad(n_target, h.wq.cols())?,
                        h.wk.pad(n_target, h.wk.cols())?,
                        h.wv.pad(n_target, n_target)?,
                    )?,
                    scale_dim: a.scale_dim,
                })
            }
            Block::MultiHeadSelfAttention(a) => {
                let heads = a
                    .heads
                    .iter()
                    .map(|h| {
                        Head::new(
                            h.wq.pad(n_target, h.wq.cols())?,
                            h.wk.pad(n_target, h.wk.cols())?,
                            h.wv.pad(n_target, h.wv.cols())?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut mha = MultiHeadAttention::new(heads, a.wo.pad(a.wo.rows(), n_target)?)?;
                mha.scale_dim = a.scale_dim;
                Block::MultiHeadSelfAttention(mha)
            }
            Block::Residual { inner, alpha } => Block::residual(inner.pad_to_width(n_target)?, *alpha),
            Block::Stack { blocks, .. } => Block::Stack {
                width: n_target,
                blocks: blocks
                    .iter()
                    .map(|b| b.pad_to_width(n_target))
                    .collect::<Result<Vec<_>>>()?,
            },
            Block::Padded { inner, .. } => Block::Padded {
                inner: inner.clone(),
                width: n_target,
            },
            // Row statistics would see the virtual neurons, so these wrap.
            Block::LayerNorm(_) | Block::PreLnTransformer(_) | Block::PostLnTransformer(_) => {
                Block::Padded {
                    inner: Box::new(self.clone()),
                    width: n_target,
                }
            }
        })
    }

    /// Number of leaf blocks along the main path (a stack counts its members).
    pub fn depth(&self) -> usize {
        match self {
            Block::Stack { blocks, .. } => blocks.len(),
            _ => 1,
        }
    }

    /// Members of a stack, or the block itself.
    pub fn layers(&self) -> Vec<&Block> {
        match self {
            Block::Stack { blocks, .. } => blocks.iter().collect(),
            other => vec![other],
        }
    }
}

impl PreLn {
    /// `F₁ = MLP∘LN`, the residual branch applied first.
    pub fn mlp_branch(&self) -> Block {
        Block::Stack {
            width: self.ln.width(),
            blocks: vec![Block::LayerNorm(self.ln.clone()), Block::Mlp2(self.mlp.clone())],
        }
    }

    /// `F₂ = MSA∘LN`, the residual branch applied second.
    pub fn attention_branch(&self) -> Block {
        Block::Stack {
            width: self.ln.width(),
            blocks: vec![
                Block::LayerNorm(self.ln.clone()),
                Block::MultiHeadSelfAttention(self.attn.clone()),
            ],
        }
    }
}

fn nest(e: Error, prefix: &str) -> Error {
    match e {
        Error::Divergence { origin } => Error::Divergence {
            origin: format!("{prefix}/{origin}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{gaussian_matrix, Seed};

    fn x34() -> Matrix {
        gaussian_matrix(3, 4, 1.0, &mut Seed::new(9, 9).rng())
    }

    #[test]
    fn linear_identity_is_identity() {
        let b = Block::linear(Matrix::identity(4)).unwrap();
        assert_eq!(b.apply(&x34()).unwrap(), x34());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let b = Block::linear(Matrix::identity(3)).unwrap();
        assert!(matches!(b.apply(&x34()), Err(Error::Shape { .. })));
        assert!(b.jvp(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4), 1e-3).is_err());
        assert!(b.jvp(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3), 0.0).is_err());
    }

    #[test]
    fn divergence_names_the_sub_block() {
        let big = Block::linear(Matrix::identity(2).scale(1e200)).unwrap();
        let s = Block::stack(vec![Block::identity(2), big.clone(), big]).unwrap();
        let x = Matrix::filled(1, 2, 1e200);
        match s.apply(&x) {
            Err(Error::Divergence { origin }) => assert_eq!(origin, "stack[1]/linear"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn padding_linear_is_block_diagonal() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Block::linear(w.clone()).unwrap();
        let p = b.pad_to_width(4).unwrap();
        match &p {
            Block::Linear(l) => assert_eq!(l.weight, w.pad(4, 4).unwrap()),
            other => panic!("{other:?}"),
        }
        assert!(b.pad_to_width(1).is_err());
    }

    #[test]
    fn padded_identity_is_identity() {
        let p = Block::identity(2).pad_to_width(4).unwrap();
        let x = x34();
        assert_eq!(p.apply(&x).unwrap(), x);
    }

    #[test]
    fn stack_width_checked() {
        assert!(Block::stack(vec![Block::identity(2), Block::identity(3)]).is_err());
        assert!(Block::stack(vec![]).is_err());
    }
}
