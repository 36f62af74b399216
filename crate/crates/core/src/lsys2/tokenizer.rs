//! Instruction word tokenizer and uniform per-dimension action binning.

use serde::{Deserialize, Serialize};

use super::Lsys2Error;
use crate::simenv::catalog::VOCABULARY;
use crate::simenv::{Action, ACTION_DIM};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Fed at the first decode step; its output predicts action token 1.
pub const ACT: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const BINS: usize = 256;

pub fn first_word_id() -> usize {
    NUM_SPECIALS
}

/// Vocabulary id of action bin 0.
pub fn first_action_id() -> usize {
    NUM_SPECIALS + VOCABULARY.len()
}

pub fn vocab_size() -> usize {
    first_action_id() + BINS
}

pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// `[BOS, words..., EOS]`.
pub fn tokenize_instruction(text: &str) -> Result<Vec<usize>, Lsys2Error> {
    let mut ids = vec![BOS];
    for w in text.split_whitespace() {
        let w = w.to_lowercase();
        let i = VOCABULARY
            .iter()
            .position(|v| *v == w)
            .ok_or_else(|| Lsys2Error::Vocab(w.clone()))?;
        ids.push(first_word_id() + i);
    }
    ids.push(EOS);
    Ok(ids)
}

/// Inverse of [`tokenize_instruction`]; special and action ids are skipped.
pub fn detokenize_instruction(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&i| i >= first_word_id() && i < first_action_id())
        .map(|&i| VOCABULARY[i - first_word_id()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-dimension uniform binning into 256 tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionTokenizer {
    bounds: Option<Vec<(f64, f64)>>,
}

impl ActionTokenizer {
    pub fn unfitted() -> Self {
        Self { bounds: None }
    }

    /// Fits min/max per dimension. A dimension with no spread (the reserved
    /// zero channels) falls back to [-1, 1] so that min < max always holds.
    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a Action>) -> Result<Self, Lsys2Error> {
        let mut lo = [f64::INFINITY; ACTION_DIM];
        let mut hi = [f64::NEG_INFINITY; ACTION_DIM];
        let mut n = 0usize;
        for a in actions {
            n += 1;
            for d in 0..ACTION_DIM {
                lo[d] = lo[d].min(a.0[d]);
                hi[d] = hi[d].max(a.0[d]);
            }
        }
        if n == 0 {
            return Err(Lsys2Error::State("cannot fit tokenizer on no actions".into()));
        }
        Self::from_bounds(
            lo.iter()
                .zip(&hi)
                .map(|(&l, &h)| if h > l { (l, h) } else { (-1.0, 1.0) })
                .collect(),
        )
    }

    pub fn from_bounds(bounds: Vec<(f64, f64)>) -> Result<Self, Lsys2Error> {
        if bounds.len() != ACTION_DIM
            || bounds.iter().any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Lsys2Error::State(format!("invalid tokenizer bounds {bounds:?}")));
        }
        Ok(Self {
            bounds: Some(bounds),
        })
    }

    pub fn bounds(&self) -> Result<&[(f64, f64)], Lsys2Error> {
        self.bounds
            .as_deref()
            .ok_or_else(|| Lsys2Error::State("action tokenizer is not fitted".into()))
    }

    pub fn bin_width(&self, dim: usize) -> Result<f64, Lsys2Error> {
        let (lo, hi) = self.bounds()?[dim];
        Ok((hi - lo) / BINS as f64)
    }

    /// Bin indices in `0..256`, one per dimension.
    pub fn tokenize(&self, a: &Action) -> Result<[usize; ACTION_DIM], Lsys2Error> {
        let b = self.bounds()?;
        let mut out = [0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            let (lo, hi) = b[d];
            let v = if a.0[d].is_finite() { a.0[d].clamp(lo, hi) } else { lo };
            let bin = ((v - lo) / (hi - lo) * BINS as f64).floor() as usize;
            out[d] = bin.min(BINS - 1);
        }
        Ok(out)
    }

    /// Bin centers.
    pub fn detokenize(&self, bins: &[usize; ACTION_DIM]) -> Result<Action, Lsys2Error> {
        let b = self.bounds()?;
        let mut a = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            if bins[d] >= BINS {
                return Err(Lsys2Error::State(format!("bin {} out of range", bins[d])));
            }
            let (lo, hi) = b[d];
            a[d] = lo + (bins[d] as f64 + 0.5) * (hi - lo) / BINS as f64;
        }
        Ok(Action(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::Catalog;
    use crate::simenv::catalog::NUM_OBJECTS;
    use proptest::prelude::*;

    fn symmetric() -> ActionTokenizer {
        ActionTokenizer::from_bounds(vec![(-1.0, 1.0); ACTION_DIM]).unwrap()
    }

    #[test]
    fn empty_and_short_instructions() {
        assert_eq!(tokenize_instruction("").unwrap(), vec![BOS, EOS]);
        assert_eq!(tokenize_instruction("open the door").unwrap().len(), 5);
        assert_eq!(tokenize_instruction("Open  THE door").unwrap(), tokenize_instruction("open the door").unwrap());
    }

    #[test]
    fn unknown_word_named() {
        match tokenize_instruction("open the fridge") {
            Err(Lsys2Error::Vocab(w)) => assert_eq!(w, "fridge"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn catalog_instructions_roundtrip() {
        let c = Catalog::standard();
        for t in &c.tasks {
            for o in 0..NUM_OBJECTS {
                let s = c.instruction(&t.spec(0, o)).unwrap();
                let ids = tokenize_instruction(&s).unwrap();
                assert_eq!(detokenize_instruction(&ids), normalize(&s));
            }
        }
    }

    #[test]
    fn boundaries_and_midpoint() {
        let t = symmetric();
        assert_eq!(t.tokenize(&Action([-1.0; 7])).unwrap(), [0; 7]);
        assert_eq!(t.tokenize(&Action([1.0; 7])).unwrap(), [255; 7]);
        for b in t.tokenize(&Action([0.0; 7])).unwrap() {
            assert!(b == 127 || b == 128);
        }
    }

    #[test]
    fn unfitted_is_an_error() {
        assert!(ActionTokenizer::unfitted().tokenize(&Action::zero()).is_err());
    }

    #[test]
    fn degenerate_dimension_falls_back() {
        let acts = [Action([0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]), Action([-0.5, 0.1, 0.0, 0.0, 0.0, 0.0, -1.0])];
        let t = ActionTokenizer::fit(acts.iter()).unwrap();
        let b = t.bounds().unwrap();
        assert_eq!(b[0], (-0.5, 0.5));
        assert_eq!(b[3], (-1.0, 1.0));
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_bin(vals in proptest::array::uniform7(-1.5f64..1.5)) {
            let t = ActionTokenizer::from_bounds(vec![(-1.0, 1.0), (-0.5, 0.8), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (-0.2, 1.0)]).unwrap();
            let a = Action(vals);
            let back = t.detokenize(&t.tokenize(&a).unwrap()).unwrap();
            for d in 0..ACTION_DIM {
                let (lo, hi) = t.bounds().unwrap()[d];
                let c = a.0[d].clamp(lo, hi);
                prop_assert!((back.0[d] - c).abs() <= (hi - lo) / 512.0 + 1e-12);
            }
        }
    }
}
