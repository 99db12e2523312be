use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Fixed-length bitset; bit `i` lives in byte `i / 8` at position `i % 8`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitset {
    len: usize,
    bytes: Vec<u8>,
}

impl Bitset {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut b = Self::zeros(len);
        for i in 0..len {
            b.set(i, true);
        }
        b
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut b = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                b.set(i, true);
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        if v {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Positions where the two bitsets differ. Panics on length mismatch.
    pub fn hamming(&self, other: &Bitset) -> usize {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        self.bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Positions set in both.
    pub fn overlap(&self, other: &Bitset) -> usize {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        self.bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn complement(&self) -> Bitset {
        Bitset::from_fn(self.len, |i| !self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn extend_from(&mut self, other: &Bitset) {
        let start = self.len;
        self.len += other.len;
        self.bytes.resize(self.len.div_ceil(8), 0);
        for i in 0..other.len {
            if other.get(i) {
                self.set(start + i, true);
            }
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        // padding bits past `len` must be clear
        if !len.is_multiple_of(8) && bytes.last().is_some_and(|&b| b >> (len % 8) != 0) {
            return None;
        }
        Some(Self { len, bytes })
    }
}

impl std::fmt::Debug for Bitset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bitset({}/{})", self.count_ones(), self.len)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BitsetRepr {
    len: usize,
    ones: usize,
    bits: String,
}

impl Serialize for Bitset {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BitsetRepr {
            len: self.len,
            ones: self.count_ones(),
            bits: STANDARD.encode(&self.bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Bitset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = BitsetRepr::deserialize(d)?;
        let bytes = STANDARD.decode(repr.bits.as_bytes()).map_err(D::Error::custom)?;
        let b = Bitset::from_bytes(repr.len, bytes)
            .ok_or_else(|| D::Error::custom("bitset length does not match payload"))?;
        if b.count_ones() != repr.ones {
            return Err(D::Error::custom(format!(
                "bitset popcount {} does not match recorded {}",
                b.count_ones(),
                repr.ones
            )));
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_count() {
        let mut b = Bitset::zeros(13);
        b.set(0, true);
        b.set(12, true);
        assert!(b.get(12) && !b.get(11));
        assert_eq!(b.count_ones(), 2);
        assert_eq!(b.complement().count_ones(), 11);
        assert_eq!(b.hamming(&b.complement()), 13);
    }

    #[test]
    fn rejects_dirty_padding() {
        assert!(Bitset::from_bytes(3, vec![0b1000_0000]).is_none());
        assert!(Bitset::from_bytes(3, vec![0b0000_0101]).is_some());
    }

    #[test]
    fn json_round_trip() {
        let b = Bitset::from_fn(37, |i| i % 3 == 0);
        let text = serde_json::to_string(&b).unwrap();
        assert_eq!(serde_json::from_str::<Bitset>(&text).unwrap(), b);
    }
}
