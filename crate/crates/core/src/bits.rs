//! Square binary grids packed row-major, most significant bit first.

use std::fmt;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitGrid {
    dim: usize,
    bytes: Vec<u8>,
}

impl BitGrid {
    pub fn new(dim: usize) -> Self {
        BitGrid {
            dim,
            bytes: vec![0; packed_len(dim)],
        }
    }

    /// Wraps already packed bytes. Returns `None` when the length is wrong or
    /// padding bits past `dim * dim` are set.
    pub fn from_packed(dim: usize, bytes: Vec<u8>) -> Option<Self> {
        if bytes.len() != packed_len(dim) {
            return None;
        }
        let used = dim * dim;
        if used % 8 != 0 {
            let mask = 0xffu8 >> (used % 8);
            if bytes[bytes.len() - 1] & mask != 0 {
                return None;
            }
        }
        Some(BitGrid { dim, bytes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_packed(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        let i = row * self.dim + col;
        self.bytes[i >> 3] & (0x80 >> (i & 7)) != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = row * self.dim + col;
        let m = 0x80 >> (i & 7);
        if value {
            self.bytes[i >> 3] |= m;
        } else {
            self.bytes[i >> 3] &= !m;
        }
    }

    #[inline]
    pub fn flip(&mut self, row: usize, col: usize) {
        let i = row * self.dim + col;
        self.bytes[i >> 3] ^= 0x80 >> (i & 7);
    }

    pub fn count_ones(&self) -> u32 {
        self.bytes.iter().map(|b| b.count_ones()).sum()
    }

    pub fn hamming(&self, other: &BitGrid) -> u32 {
        debug_assert_eq!(self.dim, other.dim);
        self.bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Row-major `(row, col)` of every set pixel.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let d = self.dim;
        (0..d * d)
            .filter(move |&i| self.bytes[i >> 3] & (0x80 >> (i & 7)) != 0)
            .map(move |i| (i / d, i % d))
    }

    /// Writes the grid as 0.0/1.0 values into `out` (length `dim * dim`).
    pub fn fill_real<T: From<u8> + Copy>(&self, out: &mut [T]) {
        let d = self.dim;
        assert_eq!(out.len(), d * d);
        for (i, o) in out.iter_mut().enumerate() {
            *o = T::from(((self.bytes[i >> 3] >> (7 - (i & 7))) & 1) as u8);
        }
    }
}

pub fn packed_len(dim: usize) -> usize {
    (dim * dim + 7) / 8
}

impl fmt::Debug for BitGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitGrid({}x{})", self.dim, self.dim)?;
        for r in 0..self.dim {
            for c in 0..self.dim {
                f.write_str(if self.get(r, c) { "#" } else { "." })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_packing() {
        let mut g = BitGrid::new(4);
        g.set(0, 0, true);
        g.set(1, 3, true);
        assert_eq!(g.as_packed(), &[0b1000_0001, 0]);
        g.flip(0, 0);
        assert_eq!(g.count_ones(), 1);
        assert_eq!(g.ones().collect::<Vec<_>>(), vec![(1, 3)]);
    }

    #[test]
    fn padding_bits_rejected() {
        // 3x3 uses 9 bits of 2 bytes
        assert!(BitGrid::from_packed(3, vec![0, 0x80]).is_some());
        assert!(BitGrid::from_packed(3, vec![0, 0x40]).is_none());
        assert!(BitGrid::from_packed(3, vec![0]).is_none());
    }
}
