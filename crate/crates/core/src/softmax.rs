//! Streaming max/exp-sum accumulation.

/// Running `(max, sum exp(x - max))` over a stream of logits.
///
/// Absorbing chunks in any split of the same sequence gives the same result up
/// to rounding; the max is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineSoftmax {
    pub max: f64,
    pub sum: f64,
}

impl Default for OnlineSoftmax {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl OnlineSoftmax {
    /// Folds `logits` in and returns the factor `exp(old_max - new_max)` that
    /// any accumulator weighted by the old statistics must be multiplied by.
    pub fn absorb(&mut self, logits: &[f64]) -> f64 {
        let chunk_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if chunk_max == f64::NEG_INFINITY {
            return 1.0;
        }
        let new_max = self.max.max(chunk_max);
        let rescale = if self.max == f64::NEG_INFINITY {
            0.0
        } else {
            (self.max - new_max).exp()
        };
        self.sum = self.sum * rescale + logits.iter().map(|&x| (x - new_max).exp()).sum::<f64>();
        self.max = new_max;
        rescale
    }

    pub fn is_empty(&self) -> bool {
        self.max == f64::NEG_INFINITY
    }
}
