//! 16-bit one's-complement arithmetic.
//!
//! Every word is read as a one's-complement integer: negation inverts all
//! bits, so there are two zeros (`0x0000` and `0xFFFF`) and the representable
//! values are `-32767..=32767`. Addition carries the overflow bit back into
//! the lowest position, which makes it addition modulo `2^16 - 1`.

use std::fmt;
use std::ops::{Add, Neg};

use thiserror::Error;

/// Largest magnitude representable in a one's-complement word.
pub const MAX_MAGNITUDE: i32 = 0x7FFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{0} is outside the one's-complement range -32767..=32767")]
pub struct OutOfRange(pub i64);

/// A 16-bit word interpreted as a one's-complement integer.
///
/// Equality is bit-pattern equality: `PLUS_ZERO != MINUS_ZERO` even though
/// both have value zero. Use [`OcWord::value`] for value comparisons.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct OcWord(pub u16);

impl OcWord {
    /// `+0`, the all-zeros pattern.
    pub const PLUS_ZERO: OcWord = OcWord(0x0000);
    /// `-0`, the all-ones pattern. A valid checksum fold lands here.
    pub const MINUS_ZERO: OcWord = OcWord(0xFFFF);
    /// `M`, the largest positive value.
    pub const MAX: OcWord = OcWord(0x7FFF);

    #[inline]
    pub const fn bits(self) -> u16 {
        self.0
    }

    /// End-around-carry addition.
    ///
    /// The result is `+0` only when both operands are `+0`; every other
    /// zero-valued result comes out as `-0`.
    #[inline]
    pub const fn oc_add(self, other: OcWord) -> OcWord {
        let sum = self.0 as u32 + other.0 as u32;
        OcWord(((sum & 0xFFFF) + (sum >> 16)) as u16)
    }

    #[inline]
    pub const fn oc_negate(self) -> OcWord {
        OcWord(!self.0)
    }

    /// Signed value in `-32767..=32767`; both zeros map to 0.
    #[inline]
    pub const fn value(self) -> i32 {
        if self.0 & 0x8000 != 0 {
            -((!self.0) as i32)
        } else {
            self.0 as i32
        }
    }

    /// Encodes `n`. Zero always encodes as `+0`.
    pub fn from_int(n: i32) -> Result<OcWord, OutOfRange> {
        if !(-MAX_MAGNITUDE..=MAX_MAGNITUDE).contains(&n) {
            return Err(OutOfRange(n as i64));
        }
        Ok(if n < 0 {
            OcWord(!((-n) as u16))
        } else {
            OcWord(n as u16)
        })
    }

    /// `+1` for non-negative values (both zeros included), `-1` otherwise.
    #[inline]
    pub const fn sign(self) -> i8 {
        if self.value() >= 0 {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 == 0x0000 || self.0 == 0xFFFF
    }
}

impl Add for OcWord {
    type Output = OcWord;

    #[inline]
    fn add(self, rhs: OcWord) -> OcWord {
        self.oc_add(rhs)
    }
}

impl Neg for OcWord {
    type Output = OcWord;

    #[inline]
    fn neg(self) -> OcWord {
        self.oc_negate()
    }
}

impl fmt::Debug for OcWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OcWord({:#06x})", self.0)
    }
}

impl fmt::Display for OcWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0x0000 => f.write_str("+0"),
            0xFFFF => f.write_str("-0"),
            _ => write!(f, "{}", self.value()),
        }
    }
}

impl From<u16> for OcWord {
    fn from(bits: u16) -> Self {
        OcWord(bits)
    }
}

impl std::iter::Sum for OcWord {
    fn sum<I: Iterator<Item = OcWord>>(iter: I) -> OcWord {
        oc_sum(iter)
    }
}

/// One's-complement fold of a word sequence. The empty fold is `+0`.
///
/// Accumulates in a wide register and folds the carries once at the end;
/// the result is bit-identical to a left fold of [`OcWord::oc_add`].
pub fn oc_sum<I>(words: I) -> OcWord
where
    I: IntoIterator<Item = OcWord>,
{
    let wide: u64 = words.into_iter().map(|w| w.0 as u64).sum();
    fold_wide(wide)
}

/// Folds a wide unsigned accumulator of 16-bit words down to one word.
#[inline]
pub fn fold_wide(mut acc: u64) -> OcWord {
    while acc > 0xFFFF {
        acc = (acc & 0xFFFF) + (acc >> 16);
    }
    OcWord(acc as u16)
}

/// Fold over a big-endian byte buffer of whole 16-bit words.
///
/// A trailing odd byte is ignored; callers reject odd lengths earlier.
pub fn oc_sum_be_bytes(bytes: &[u8]) -> OcWord {
    let wide: u64 = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u64)
        .sum();
    fold_wide(wide)
}
