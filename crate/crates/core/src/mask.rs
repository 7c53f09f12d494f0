//! Attention admissibility masks and window bounds.
//!
//! A mask stores, for every (query, key) pair, whether the connection is
//! admissible. The additive-bias view (`0` for admissible, `-1e9` for
//! blocked) is what attention feeds to the softmax.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Additive penalty for inadmissible connections. exp(-1e9) underflows to
/// exactly 0.0, so blocked positions receive zero attention weight.
pub const MASK_LARGE: f64 = 1e9;

/// One side of an attention window: a finite span in frames/segments, or no
/// bound at all. Spelled `inf` in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Bounded(usize),
    Unbounded,
}

impl Window {
    pub fn is_unbounded(&self) -> bool {
        matches!(self, Window::Unbounded)
    }

    pub fn bound(&self) -> Option<usize> {
        match self {
            Window::Bounded(b) => Some(*b),
            Window::Unbounded => None,
        }
    }

    /// True when `other` admits at least every offset this window admits.
    pub fn within(&self, other: &Window) -> bool {
        match (other, self) {
            (Window::Unbounded, _) => true,
            (Window::Bounded(_), Window::Unbounded) => false,
            (Window::Bounded(o), Window::Bounded(s)) => o >= s,
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Bounded(b) => write!(f, "{b}"),
            Window::Unbounded => write!(f, "inf"),
        }
    }
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::Bounded(b) => serializer.serialize_u64(*b as u64),
            // JSON has no infinity literal, so the unbounded sentinel
            // serializes as the same string configs use.
            Window::Unbounded => serializer.serialize_str("inf"),
        }
    }
}

struct WindowVisitor;

impl Visitor<'_> for WindowVisitor {
    type Value = Window;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a non-negative integer or `inf`")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Window, E> {
        Ok(Window::Bounded(v as usize))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Window, E> {
        if v < 0 {
            return Err(E::custom("window bound must be non-negative"));
        }
        Ok(Window::Bounded(v as usize))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Window, E> {
        if v.is_infinite() && v > 0.0 {
            Ok(Window::Unbounded)
        } else if v >= 0.0 && v.fract() == 0.0 {
            Ok(Window::Bounded(v as usize))
        } else {
            Err(E::custom("window bound must be a non-negative integer or inf"))
        }
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Window, E> {
        if v == "inf" {
            Ok(Window::Unbounded)
        } else {
            v.parse::<usize>()
                .map(Window::Bounded)
                .map_err(|_| E::custom(format!("invalid window bound {v:?}")))
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Window, D::Error> {
        deserializer.deserialize_any(WindowVisitor)
    }
}

/// Admissibility mask over (query, key) pairs, optionally batched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    dims: Vec<usize>,
    admissible: Vec<bool>,
}

impl AttentionMask {
    /// `dims` is `[queries, keys]` or `[batch, queries, keys]`.
    pub fn new(dims: Vec<usize>, admissible: Vec<bool>) -> Result<AttentionMask> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::contract(format!(
                "attention mask must be rank 2 or 3, got {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != admissible.len() {
            return Err(Error::contract(format!(
                "mask dims {dims:?} imply {numel} entries, got {}",
                admissible.len()
            )));
        }
        Ok(AttentionMask { dims, admissible })
    }

    pub fn all_admissible(dims: Vec<usize>) -> AttentionMask {
        let numel = dims.iter().product();
        AttentionMask {
            dims,
            admissible: vec![true; numel],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn admissible(&self) -> &[bool] {
        &self.admissible
    }

    pub fn key_len(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn query_len(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn num_rows(&self) -> usize {
        self.admissible.len() / self.key_len()
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let k = self.key_len();
        &self.admissible[row * k..(row + 1) * k]
    }

    pub fn admits(&self, row: usize, key: usize) -> bool {
        self.admissible[row * self.key_len() + key]
    }

    /// Additive bias: 0 where admissible, -1e9 where blocked.
    pub fn bias_tensor(&self, precision: Precision) -> Tensor {
        let data: Vec<f64> = self
            .admissible
            .iter()
            .map(|&a| if a { 0.0 } else { -MASK_LARGE })
            .collect();
        Tensor::from_vec(&self.dims, data, precision).expect("mask dims are consistent")
    }

    /// Index of the first row with no admissible key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.num_rows()).find(|&r| self.row(r).iter().all(|&a| !a))
    }

    /// True when every connection admitted here is also admitted by `other`.
    pub fn subset_of(&self, other: &AttentionMask) -> bool {
        self.dims == other.dims
            && self
                .admissible
                .iter()
                .zip(&other.admissible)
                .all(|(a, b)| !a || *b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_has_at_most_two_values() {
        let m = AttentionMask::new(vec![2, 3], vec![true, false, true, true, true, false]).unwrap();
        let bias = m.bias_tensor(Precision::F64);
        for v in bias.data() {
            assert!(*v == 0.0 || *v == -MASK_LARGE);
        }
    }

    #[test]
    fn empty_row_detected() {
        let m = AttentionMask::new(vec![2, 2], vec![true, false, false, false]).unwrap();
        assert_eq!(m.first_empty_row(), Some(1));
        let full = AttentionMask::all_admissible(vec![2, 2]);
        assert_eq!(full.first_empty_row(), None);
    }

    #[test]
    fn window_serde_round_trip() {
        let b: Window = serde_json::from_str("11").unwrap();
        assert_eq!(b, Window::Bounded(11));
        let u: Window = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(u, Window::Unbounded);
        let js = serde_json::to_string(&Window::Unbounded).unwrap();
        let back: Window = serde_json::from_str(&js).unwrap();
        assert_eq!(back, Window::Unbounded);
    }

    #[test]
    fn window_within() {
        assert!(Window::Unbounded.within(&Window::Unbounded));
        assert!(!Window::Unbounded.within(&Window::Bounded(5)));
        assert!(Window::Bounded(2).within(&Window::Bounded(3)));
        assert!(!Window::Bounded(3).within(&Window::Bounded(2)));
        assert!(Window::Bounded(3).within(&Window::Unbounded));
    }
}
