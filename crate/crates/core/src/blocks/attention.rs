//! Single- and multi-head self-attention.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Query/key/value projections of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `n x d_k`
    pub wq: Matrix,
    /// `n x d_k`
    pub wk: Matrix,
    /// `n x d_v`
    pub wv: Matrix,
}

impl Head {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        if wq.shape() != wk.shape() || wv.rows() != wq.rows() {
            return Err(Error::InvalidArgument(format!(
                "attention head shapes disagree: W^Q {:?}, W^K {:?}, W^V {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape()
            )));
        }
        Ok(Head { wq, wk, wv })
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    /// `softmax(X W^Q (X W^K)ᵀ / √d) X W^V`
    pub(crate) fn forward(&self, x: &Matrix, scale_dim: usize) -> Result<Matrix> {
        let p = self.attention_matrix(x, scale_dim)?;
        p.matmul(&x.matmul(&self.wv)?)
    }

    pub fn attention_matrix(&self, x: &Matrix, scale_dim: usize) -> Result<Matrix> {
        let q = x.matmul(&self.wq)?;
        let k = x.matmul(&self.wk)?;
        let logits = q.matmul(&k.transpose())?.scale(1.0 / (scale_dim as f64).sqrt());
        Ok(softmax_rows(&logits))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Single head whose value projection is square, so the block is a self-map.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub head: Head,
    /// `d` in the `1/√d` logit scale; the input width unless padded.
    pub scale_dim: usize,
}

impl SelfAttention {
    pub fn new(head: Head) -> Result<Self> {
        if head.wv.cols() != head.wv.rows() {
            return Err(Error::InvalidArgument(format!(
                "single-head W^V must be square, got {:?}",
                head.wv.shape()
            )));
        }
        let scale_dim = head.width();
        Ok(SelfAttention { head, scale_dim })
    }

    pub fn width(&self) -> usize {
        self.head.width()
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.head.forward(x, self.scale_dim)
    }
}

/// `[head₁(X), …, head_H(X)] W^O`
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: Vec<Head>,
    /// `(H·d_v) x n`
    pub wo: Matrix,
    pub scale_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(heads: Vec<Head>, wo: Matrix) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::InvalidArgument("multi-head attention needs at least one head".into()));
        };
        let n = first.width();
        if heads.iter().any(|h| h.width() != n || h.wv.cols() != first.wv.cols()) {
            return Err(Error::InvalidArgument("heads must share input and value widths".into()));
        }
        let concat = heads.iter().map(|h| h.wv.cols()).sum::<usize>();
        if wo.shape() != (concat, n) {
            return Err(Error::InvalidArgument(format!(
                "W^O must be {concat}x{n}, got {:?}",
                wo.shape()
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            wo,
            scale_dim: n,
        })
    }

    pub fn width(&self) -> usize {
        self.wo.cols()
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let outs = self
            .heads
            .iter()
            .map(|h| h.forward(x, self.scale_dim))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = outs.iter().collect();
        Matrix::hstack(&refs)?.matmul(&self.wo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Matrix::from_rows(&[&[1000.0, 0.0, -5.0], &[0.1, 0.2, 0.3]]);
        let p = softmax_rows(&l);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p.is_finite());
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let n = 3;
        let head = Head::new(Matrix::zeros(n, 2), Matrix::zeros(n, 2), Matrix::identity(n)).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[0.0, -1.0, 4.0]]);
        let p = head.attention_matrix(&x, n).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn head_validation() {
        assert!(Head::new(Matrix::zeros(3, 2), Matrix::zeros(3, 1), Matrix::zeros(3, 3)).is_err());
        let h = Head::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2), Matrix::zeros(3, 2)).unwrap();
        assert!(SelfAttention::new(h.clone()).is_err());
        assert!(MultiHeadAttention::new(vec![h.clone()], Matrix::zeros(3, 3)).is_err());
        assert!(MultiHeadAttention::new(vec![h], Matrix::zeros(2, 3)).is_ok());
        assert!(MultiHeadAttention::new(vec![], Matrix::zeros(2, 3)).is_err());
    }
}
