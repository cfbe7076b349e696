//! Fixed-width binary concept vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest lexicon a [`ConceptVector`] can index.
pub const MAX_CONCEPTS: usize = 64;

/// A binary vector with one bit per lexicon concept, in lexicon order.
///
/// Serialized as a bit-string whose first character is concept index 0.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConceptVector {
    bits: u64,
    len: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VectorParseError {
    #[error("bit-string has length {0}, maximum is {MAX_CONCEPTS}")]
    TooLong(usize),
    #[error("invalid character {0:?} in bit-string")]
    BadChar(char),
}

impl ConceptVector {
    pub fn zeros(len: usize) -> Self {
        assert!(
            len <= MAX_CONCEPTS,
            "concept vector length {len} exceeds {MAX_CONCEPTS}"
        );
        Self {
            bits: 0,
            len: len as u8,
        }
    }

    /// Builds a vector from a raw mask; bits at or above `len` are dropped.
    pub fn from_mask(len: usize, mask: u64) -> Self {
        let mut v = Self::zeros(len);
        v.bits = mask & full_mask(len);
        v
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v = Self::zeros(len);
        for i in indices {
            v.set(i, true);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> u64 {
        self.bits
    }

    pub fn get(&self, index: usize) -> bool {
        index < self.len() && self.bits & (1 << index) != 0
    }

    pub fn set(&mut self, index: usize, value: bool) {
        assert!(
            index < self.len(),
            "concept index {index} out of range {}",
            self.len
        );
        if value {
            self.bits |= 1 << index;
        } else {
            self.bits &= !(1 << index);
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }

    pub fn is_zero(&self) -> bool {
        self.bits == 0
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        mask_indices(self.bits)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_mask(self.len(), self.bits | other.bits)
    }

    /// Bits restricted to `mask`, as a raw mask.
    pub fn restrict(&self, mask: u64) -> u64 {
        self.bits & mask
    }

    /// Replaces the bits selected by `mask` with those of `replacement`.
    pub fn with_masked(&self, mask: u64, replacement: u64) -> Self {
        Self::from_mask(self.len(), (self.bits & !mask) | (replacement & mask))
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len())
            .map(|i| if self.get(i) { '1' } else { '0' })
            .collect()
    }
}

/// Iterates the set bit positions of a raw mask in ascending order.
pub fn mask_indices(mask: u64) -> impl Iterator<Item = usize> {
    let mut rest = mask;
    std::iter::from_fn(move || {
        if rest == 0 {
            None
        } else {
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(i)
        }
    })
}

pub(crate) fn full_mask(len: usize) -> u64 {
    if len >= 64 {
        u64::MAX
    } else {
        (1u64 << len) - 1
    }
}

impl FromStr for ConceptVector {
    type Err = VectorParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let len = s.chars().count();
        if len > MAX_CONCEPTS {
            return Err(VectorParseError::TooLong(len));
        }
        let mut v = Self::zeros(len);
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => v.set(i, true),
                other => return Err(VectorParseError::BadChar(other)),
            }
        }
        Ok(v)
    }
}

impl fmt::Display for ConceptVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

impl fmt::Debug for ConceptVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConceptVector({})", self.to_bit_string())
    }
}

impl Serialize for ConceptVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bit_string())
    }
}

impl<'de> Deserialize<'de> for ConceptVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
