//! Seeded synthetic blocks and stacks used by the experiments, the CLI and the
//! tests.
//!
//! Weight matrices are drawn with i.i.d. `N(0, scale²)` entries; `scale = 1`
//! is the unit-scale initialisation.

use crate::blocks::{Activation, Block, Head, LayerNorm, Mlp2, MultiHeadAttention, PostLn, PreLn};
use crate::error::{Error, Result};
use crate::matrix::{spectral_norm, Matrix};
use crate::seed::{gaussian_matrix, random_orthogonal, Seed};

/// Widths of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerDims {
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_k: usize,
}

impl TransformerDims {
    /// Width `n`, MLP hidden width `2n`, one head per 4 columns, `d_k = 4`.
    pub fn small(width: usize) -> Self {
        TransformerDims {
            width,
            hidden: 2 * width,
            heads: (width / 4).max(1),
            d_k: 4.min(width),
        }
    }

    fn d_v(&self) -> usize {
        (self.width / self.heads).max(1)
    }
}

fn scaled(rows: usize, cols: usize, scale: f64, seed: Seed) -> Matrix {
    gaussian_matrix(rows, cols, scale, &mut seed.rng())
}

fn mlp(dims: &TransformerDims, scale: f64, activation: Activation, seed: Seed) -> Result<Mlp2> {
    Mlp2::new(
        scaled(dims.width, dims.hidden, scale, seed.derive(0)),
        scaled(dims.hidden, dims.width, scale, seed.derive(1)),
        activation,
    )
}

fn attention(dims: &TransformerDims, scale: f64, seed: Seed) -> Result<MultiHeadAttention> {
    let n = dims.width;
    let heads = (0..dims.heads)
        .map(|h| {
            let s = seed.derive(10 + h as u64);
            Head::new(
                scaled(n, dims.d_k, scale, s.derive(0)),
                scaled(n, dims.d_k, scale, s.derive(1)),
                scaled(n, dims.d_v(), scale, s.derive(2)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MultiHeadAttention::new(heads, scaled(dims.heads * dims.d_v(), n, scale, seed.derive(2)))
}

/// Pre-LN block with random weights of the given scale.
pub fn random_pre_ln(
    dims: &TransformerDims,
    scale: f64,
    alpha: f64,
    activation: Activation,
    seed: Seed,
) -> Result<Block> {
    Ok(Block::PreLnTransformer(PreLn {
        ln: LayerNorm::standard(dims.width, crate::blocks::DEFAULT_LN_EPSILON),
        mlp: mlp(dims, scale, activation, seed.derive(100))?,
        attn: attention(dims, scale, seed.derive(200))?,
        alpha,
    }))
}

/// Post-LN block with random weights of the given scale.
pub fn random_post_ln(dims: &TransformerDims, scale: f64, activation: Activation, seed: Seed) -> Result<Block> {
    Ok(Block::PostLnTransformer(PostLn {
        ln: LayerNorm::standard(dims.width, crate::blocks::DEFAULT_LN_EPSILON),
        mlp: mlp(dims, scale, activation, seed.derive(100))?,
        attn: attention(dims, scale, seed.derive(200))?,
    }))
}

/// `count` post-LN blocks with independent unit-scale weights.
pub fn post_ln_stack(dims: &TransformerDims, count: usize, seed: Seed) -> Result<Block> {
    let blocks = (0..count)
        .map(|i| random_post_ln(dims, 1.0, Activation::Tanh, seed.derive(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Block::stack(blocks)
}

/// Pre-LN blocks whose weight scale decays as `scale·decay^i`, the layer-wise
/// decay under which deep pre-LN stacks settle.
pub fn pre_ln_decay_stack(
    dims: &TransformerDims,
    count: usize,
    scale: f64,
    decay: f64,
    seed: Seed,
) -> Result<Block> {
    let blocks = (0..count)
        .map(|i| {
            random_pre_ln(
                dims,
                scale * decay.powi(i as i32),
                1.0,
                Activation::Tanh,
                seed.derive(i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Block::stack(blocks)
}

/// Pre-LN stack followed by a linear prediction layer, the shape of a
/// GPT-2-style model.
pub fn gpt2_like(dims: &TransformerDims, count: usize, scale: f64, seed: Seed) -> Result<Block> {
    let mut blocks = (0..count)
        .map(|i| random_pre_ln(dims, scale, 1.0, Activation::Relu, seed.derive(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    blocks.push(Block::linear(scaled(dims.width, dims.width, 1.0, seed.derive(u64::MAX)))?);
    Block::stack(blocks)
}

/// Random `n x n` matrix rescaled to unit spectral norm.
pub fn unit_perturbation(width: usize, seed: Seed) -> Result<Matrix> {
    let p = gaussian_matrix(width, width, 1.0, &mut seed.rng());
    let s = spectral_norm(&p)?;
    if s == 0.0 {
        return Err(Error::Degenerate("zero perturbation".into()));
    }
    Ok(p.scale(1.0 / s))
}

/// Symmetric negative semidefinite `P = −GGᵀ/‖GGᵀ‖`, so `I + c·P` is
/// nonexpansive for `0 ≤ c ≤ 2`.
pub fn contracting_perturbation(width: usize, seed: Seed) -> Result<Matrix> {
    let g = gaussian_matrix(width, width, 1.0, &mut seed.rng());
    let s = g.matmul(&g.transpose())?;
    let norm = spectral_norm(&s)?;
    if norm == 0.0 {
        return Err(Error::Degenerate("zero perturbation".into()));
    }
    Ok(s.scale(-1.0 / norm))
}

/// Linear blocks `T_i = I + c_i·P` for `i = 1..=count`.
pub fn perturbed_identity_stack(p: &Matrix, coefficients: impl IntoIterator<Item = f64>) -> Result<Vec<Block>> {
    let id = Matrix::identity(p.rows());
    coefficients
        .into_iter()
        .map(|c| Block::linear(id.axpy(c, p)?))
        .collect()
}

/// `T_i = I + rate^i·P`, condensing onto the identity.
pub fn condensing_stack(p: &Matrix, count: usize, rate: f64) -> Result<Vec<Block>> {
    perturbed_identity_stack(p, (1..=count).map(|i| rate.powi(i as i32)))
}

/// `T_i = I + P/i`, whose perturbations are not summable.
pub fn harmonic_stack(p: &Matrix, count: usize) -> Result<Vec<Block>> {
    perturbed_identity_stack(p, (1..=count).map(|i| 1.0 / i as f64))
}

/// Independent random orthogonal maps.
pub fn rotation_stack(width: usize, count: usize, seed: Seed) -> Result<Vec<Block>> {
    (0..count)
        .map(|i| Block::linear(random_orthogonal(width, &mut seed.derive(i as u64).rng())))
        .collect()
}
