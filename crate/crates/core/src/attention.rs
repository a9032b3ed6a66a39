//! Dense causal attention, the ground truth for every sparse result.

use rayon::prelude::*;

use crate::dense::{DenseMatrix, HeadInput};

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `softmax(Q K^T / sqrt(d) + M_causal) V`, one row at a time.
///
/// Logits, softmax statistics and the weighted sum are accumulated in `f64`
/// with max subtraction; row `i` reads only key/value rows `0..=i`.
pub fn full_attention(input: &HeadInput) -> DenseMatrix {
    let (n, d) = (input.n(), input.d());
    let scale = 1.0 / (d as f64).sqrt();
    let (q, k, v) = (input.q(), input.k(), input.v());
    let mut out = vec![0.0f32; n * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, out_row)| {
        let qi = q.row(i);
        let logits: Vec<f64> = (0..=i).map(|j| dot(qi, k.row(j)) * scale).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = vec![0.0f64; d];
        let mut sum = 0.0;
        for (j, &s) in logits.iter().enumerate() {
            let w = (s - max).exp();
            sum += w;
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += w * x as f64;
            }
        }
        for (o, a) in out_row.iter_mut().zip(&acc) {
            *o = (a / sum) as f32;
        }
    });
    DenseMatrix::new(n, d, out).expect("attention output is a convex combination of finite rows")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(n: usize, d: usize, f: impl Fn(usize, usize, usize) -> f32) -> HeadInput {
        let m = |which| DenseMatrix::from_fn(n, d, |r, c| f(which, r, c)).unwrap();
        HeadInput::new(m(0), m(1), m(2)).unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let h = head(1, 3, |w, _, c| (w * 10 + c) as f32 - 7.5);
        assert_eq!(full_attention(&h).row(0), h.v().row(0));
    }

    #[test]
    fn identical_keys_give_causal_mean() {
        let h = head(6, 2, |w, r, c| match w {
            0 => (r * 3 + c) as f32 * 0.3,
            1 => 0.5 + c as f32,
            _ => (r * r) as f32 - c as f32,
        });
        let o = full_attention(&h);
        for i in 0..6 {
            for c in 0..2 {
                let mean: f32 = (0..=i).map(|j| h.v().get(j, c)).sum::<f32>() / (i + 1) as f32;
                assert!((o.get(i, c) - mean).abs() < 1e-5, "row {i} col {c}");
            }
        }
    }
}
