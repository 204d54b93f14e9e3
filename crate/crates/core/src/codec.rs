//! Parameter-free mapping between continuous action chunks and 256-bin tokens.
//!
//! Tokens are laid out step-major: token `h * A + c` encodes component `c` of
//! micro-step `h`.

use crate::error::{LapoError, Result};

pub const NUM_BINS: u32 = 256;

/// `H` micro-steps of `A` normalized control components, flattened step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dims: usize,
    values: Vec<f32>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != horizon * dims {
            return Err(LapoError::Invalid(format!(
                "action chunk needs {} values, got {}",
                horizon * dims,
                values.len()
            )));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(LapoError::ActionRange { index, value });
        }
        Ok(Self {
            horizon,
            dims,
            values,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn step(&self, h: usize) -> &[f32] {
        &self.values[h * self.dims..(h + 1) * self.dims]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTokens {
    horizon: usize,
    dims: usize,
    tokens: Vec<u32>,
}

impl ActionTokens {
    pub fn new(horizon: usize, dims: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != horizon * dims {
            return Err(LapoError::Invalid(format!(
                "action tokens need {} entries, got {}",
                horizon * dims,
                tokens.len()
            )));
        }
        if let Some((index, &token)) = tokens.iter().enumerate().find(|(_, t)| **t >= NUM_BINS) {
            return Err(LapoError::TokenRange { index, token });
        }
        Ok(Self {
            horizon,
            dims,
            tokens,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[inline]
pub fn token_of(a: f32) -> u32 {
    let t = (((a as f64) + 1.0) / 2.0 * NUM_BINS as f64).floor();
    t.clamp(0.0, (NUM_BINS - 1) as f64) as u32
}

#[inline]
pub fn value_of(token: u32) -> f32 {
    (-1.0 + (2.0 * token as f64 + 1.0) / NUM_BINS as f64) as f32
}

pub fn tokenize(chunk: &ActionChunk) -> ActionTokens {
    ActionTokens {
        horizon: chunk.horizon,
        dims: chunk.dims,
        tokens: chunk.values.iter().map(|&a| token_of(a)).collect(),
    }
}

/// Bin-center reconstruction.
pub fn detokenize(tokens: &ActionTokens) -> ActionChunk {
    ActionChunk {
        horizon: tokens.horizon,
        dims: tokens.dims,
        values: tokens.tokens.iter().map(|&t| value_of(t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries() {
        assert_eq!(token_of(-1.0), 0);
        assert_eq!(token_of(1.0), 255);
        assert_eq!(token_of(0.0), 128);
        assert_eq!(value_of(0), -1.0 + 1.0 / 256.0);
        assert_eq!(value_of(255), 1.0 - 1.0 / 256.0);
    }

    #[test]
    fn token_round_trip_is_identity() {
        for t in 0..NUM_BINS {
            assert_eq!(token_of(value_of(t)), t);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            ActionChunk::new(1, 2, vec![0.5, 1.5]),
            Err(LapoError::ActionRange { index: 1, .. })
        ));
        assert!(matches!(
            ActionTokens::new(1, 2, vec![3, 256]),
            Err(LapoError::TokenRange { index: 1, token: 256 })
        ));
    }

    #[test]
    fn step_major_layout() {
        let chunk = ActionChunk::new(2, 3, vec![-1.0, 0.0, 1.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!(tokenize(&chunk).tokens(), &[0, 128, 255, 255, 128, 0]);
        assert_eq!(chunk.step(1), &[1.0, 0.0, -1.0]);
    }

    proptest! {
        #[test]
        fn reconstruction_within_half_bin(a in -1.0f32..=1.0) {
            let err = (value_of(token_of(a)) - a).abs();
            prop_assert!(err <= 1.0 / 256.0 + 1e-7);
        }

        #[test]
        fn monotone(a in -1.0f32..=1.0, b in -1.0f32..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(token_of(lo) <= token_of(hi));
        }

        #[test]
        fn idempotent(a in -1.0f32..=1.0) {
            let once = value_of(token_of(a));
            prop_assert_eq!(value_of(token_of(once)), once);
        }
    }
}
