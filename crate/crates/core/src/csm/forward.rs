use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::weights::{CsmWeights, LayerNorm};
use crate::error::{Error, Result};

/// Dense row-major matrix, one row per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::LengthMismatch {
                what: "matrix row width",
                left: bad.len(),
                right: cols,
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows reordered so that output row `i` is input row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let mut out = Matrix::zeros(order.len(), self.cols);
        for (i, &src) in order.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        out
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &[f64], ln: &LayerNorm, eps: f64, out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (j, o) in out.iter_mut().enumerate() {
        *o = (x[j] - mean) * inv * ln.weight[j] + ln.bias[j];
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn check_width(input: &Matrix, weights: &CsmWeights) -> Result<()> {
    if input.cols != weights.d_model() {
        return Err(Error::LengthMismatch {
            what: "embedding dimension vs model dimension",
            left: input.cols,
            right: weights.d_model(),
        });
    }
    Ok(())
}

/// Multi-head attention over all rows of `h`.
///
/// Each query visits keys in a canonical order (by score, then by value row)
/// so every floating-point sum is independent of the input row order.
fn attention(h: &Matrix, block: &super::weights::Block, heads: usize) -> Matrix {
    let (n, d) = (h.rows, h.cols);
    let hd = d / heads;
    let project = |lin: &super::weights::Linear| {
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            lin.apply(h.row(i), m.row_mut(i));
        }
        m
    };
    let (q, k, v) = (project(&block.q_proj), project(&block.k_proj), project(&block.v_proj));
    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = Matrix::zeros(n, d);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for head in 0..heads {
            let span = head * hd..(head + 1) * hd;
            let qi = &q.row(i)[span.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = qi.iter().zip(&k.row(j)[span.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| {
                scores[a]
                    .total_cmp(&scores[b])
                    .then_with(|| lex_cmp(&v.row(a)[span.clone()], &v.row(b)[span.clone()]))
            });
            let max = scores[order[n - 1]];
            let mut z = 0.0;
            let out = &mut mixed.row_mut(i)[span.clone()];
            for &j in &order {
                let e = (scores[j] - max).exp();
                z += e;
                for (o, vj) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                    *o += e * vj;
                }
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
    }
    let mut projected = Matrix::zeros(n, d);
    for i in 0..n {
        block.out_proj.apply(mixed.row(i), projected.row_mut(i));
    }
    projected
}

/// Pre-normalised self-attention blocks over the context rows, no positional encoding.
pub fn global_forward(input: &Matrix, weights: &CsmWeights) -> Result<Matrix> {
    check_width(input, weights)?;
    let (n, d) = (input.rows, input.cols);
    let eps = weights.metadata.layer_norm_eps;
    let mut x = input.clone();
    if n == 0 {
        return Ok(x);
    }
    let mut normed = Matrix::zeros(n, d);
    for block in &weights.blocks {
        for i in 0..n {
            layer_norm(x.row(i), &block.ln1, eps, normed.row_mut(i));
        }
        let attn = attention(&normed, block, weights.metadata.head_count);
        x.data.iter_mut().zip(&attn.data).for_each(|(a, b)| *a += b);

        let mut hidden = vec![0.0; block.fc1.out_dim];
        let mut delta = vec![0.0; d];
        for i in 0..n {
            layer_norm(x.row(i), &block.ln2, eps, normed.row_mut(i));
            block.fc1.apply(normed.row(i), &mut hidden);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            block.fc2.apply(&hidden, &mut delta);
            x.row_mut(i).iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
        }
    }
    Ok(x)
}

/// Row-wise two-layer output head, one score per context.
pub fn score(global: &Matrix, weights: &CsmWeights) -> Result<Vec<f64>> {
    check_width(global, weights)?;
    let mut hidden = vec![0.0; weights.head_fc1.out_dim];
    let mut out = [0.0];
    Ok((0..global.rows)
        .map(|i| {
            weights.head_fc1.apply(global.row(i), &mut hidden);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            weights.head_fc2.apply(&hidden, &mut out);
            out[0]
        })
        .collect())
}

pub fn predict(input: &Matrix, weights: &CsmWeights) -> Result<Vec<f64>> {
    score(&global_forward(input, weights)?, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csm::weights::CsmMetadata;
    use rand::{Rng, SeedableRng};

    fn weights(seed: u64) -> CsmWeights {
        CsmWeights::random(CsmMetadata::new(16, 32, 8, "test"), seed).unwrap()
    }

    fn input(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix {
            rows: n,
            cols: d,
            data: (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn zeroed_block_outputs_give_identity() {
        let w = weights(1).with_zeroed_block_outputs();
        let l = input(6, 16, 2);
        assert_eq!(global_forward(&l, &w).unwrap(), l);
    }

    #[test]
    fn zero_weights_score_zero() {
        let w = CsmWeights::zeros(CsmMetadata::new(16, 32, 8, "test")).unwrap();
        assert_eq!(predict(&input(5, 16, 3), &w).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let w = weights(4);
        let l = input(7, 16, 5);
        let base = predict(&l, &w).unwrap();
        let order = [3, 0, 6, 1, 5, 2, 4];
        let permuted = predict(&l.permute_rows(&order), &w).unwrap();
        let expected: Vec<f64> = order.iter().map(|&i| base[i]).collect();
        assert_eq!(permuted, expected);
    }

    #[test]
    fn duplicate_rows_stay_equivariant() {
        let w = weights(6);
        let mut l = input(4, 16, 7);
        let first = l.row(0).to_vec();
        l.row_mut(2).copy_from_slice(&first);
        let base = predict(&l, &w).unwrap();
        assert_eq!(base[0], base[2]);
        let order = [2, 3, 0, 1];
        let expected: Vec<f64> = order.iter().map(|&i| base[i]).collect();
        assert_eq!(predict(&l.permute_rows(&order), &w).unwrap(), expected);
    }

    #[test]
    fn single_row_is_deterministic() {
        let w = weights(8);
        let l = input(1, 16, 9);
        let a = predict(&l, &w).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, predict(&l, &w).unwrap());
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(matches!(
            global_forward(&input(2, 8, 0), &weights(0)),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(score(&input(2, 8, 0), &weights(0)).is_err());
        assert!(predict(&Matrix::zeros(0, 16), &weights(0)).unwrap().is_empty());
    }
}
