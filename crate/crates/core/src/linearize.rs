//! Bit layouts for linearized coordinates.
//!
//! A coordinate is first linearized by interleaving the bits of every mode
//! (LSB-first round robin over modes, skipping modes whose bits are
//! exhausted). This gives a Morton-like ordering on regular spaces and a
//! compact curve on irregular ones. When the interleaved index needs more
//! than `target_bits`, its uppermost bits become a block key. The remaining
//! bits are re-encoded as contiguous per-mode fields, mode 0 in the least
//! significant field, so each coordinate is recovered with one shift and one
//! mask.

use crate::error::{Error, Result};

/// Widest interleaved index supported during construction.
pub const MAX_TOTAL_BITS: u32 = 128;
pub const DEFAULT_TARGET_BITS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitLayout {
    dims: Vec<u64>,
    mode_bits: Vec<u32>,
    total_bits: u32,
    target_bits: u32,
    /// `(mode, bit within mode)` for every interleaved position, LSB first.
    interleave: Vec<(usize, u32)>,
    /// Interleaved position of each mode's bits, indexed `[mode][bit]`.
    positions: Vec<Vec<u32>>,
    stripped_per_mode: Vec<u32>,
    rem_bits: Vec<u32>,
    field_shift: Vec<u32>,
    field_mask: Vec<u64>,
}

/// Bits needed to address `dim` coordinates: `⌈log₂ dim⌉`, 0 for `dim == 1`.
pub fn bits_for(dim: u64) -> u32 {
    if dim <= 1 {
        0
    } else {
        64 - (dim - 1).leading_zeros()
    }
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

impl BitLayout {
    pub fn new(dims: &[u64], target_bits: u32) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Layout("no modes".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Layout("mode lengths must be at least 1".into()));
        }
        if !(1..=64).contains(&target_bits) {
            return Err(Error::Layout(format!(
                "target width {target_bits} outside [1, 64]"
            )));
        }
        let mode_bits: Vec<u32> = dims.iter().map(|&d| bits_for(d)).collect();
        let total_bits: u32 = mode_bits.iter().sum();
        if total_bits > MAX_TOTAL_BITS {
            return Err(Error::Layout(format!(
                "{total_bits} index bits exceed the {MAX_TOTAL_BITS}-bit limit"
            )));
        }
        let stripped = total_bits.saturating_sub(target_bits);
        if stripped > 64 {
            return Err(Error::Layout(format!(
                "{stripped}-bit block key does not fit 64 bits"
            )));
        }

        let order = dims.len();
        let max_bits = mode_bits.iter().copied().max().unwrap_or(0);
        let mut interleave = Vec::with_capacity(total_bits as usize);
        let mut positions = vec![Vec::new(); order];
        for level in 0..max_bits {
            for (mode, &b) in mode_bits.iter().enumerate() {
                if level < b {
                    positions[mode].push(interleave.len() as u32);
                    interleave.push((mode, level));
                }
            }
        }

        let mut stripped_per_mode = vec![0u32; order];
        for &(mode, _) in &interleave[(total_bits - stripped) as usize..] {
            stripped_per_mode[mode] += 1;
        }
        let rem_bits: Vec<u32> = mode_bits
            .iter()
            .zip(&stripped_per_mode)
            .map(|(b, s)| b - s)
            .collect();
        let mut field_shift = Vec::with_capacity(order);
        let mut acc = 0;
        for &r in &rem_bits {
            field_shift.push(acc);
            acc += r;
        }
        let field_mask = rem_bits.iter().map(|&r| low_mask(r)).collect();

        Ok(BitLayout {
            dims: dims.to_vec(),
            mode_bits,
            total_bits,
            target_bits,
            interleave,
            positions,
            stripped_per_mode,
            rem_bits,
            field_shift,
            field_mask,
        })
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn mode_bits(&self) -> &[u32] {
        &self.mode_bits
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn target_bits(&self) -> u32 {
        self.target_bits
    }

    /// `(mode, bit within mode)` per interleaved position, LSB first.
    pub fn interleave_map(&self) -> &[(usize, u32)] {
        &self.interleave
    }

    /// Width `s` of the block key.
    pub fn stripped_bits(&self) -> u32 {
        self.total_bits - self.encoded_bits()
    }

    /// Upper bits of each mode that live in the block key.
    pub fn stripped_per_mode(&self) -> &[u32] {
        &self.stripped_per_mode
    }

    pub fn rem_bits(&self) -> &[u32] {
        &self.rem_bits
    }

    pub fn field_shift(&self) -> &[u32] {
        &self.field_shift
    }

    pub fn field_mask(&self) -> &[u64] {
        &self.field_mask
    }

    /// Width of the re-encoded in-block index, `Σ rem_bits`.
    pub fn encoded_bits(&self) -> u32 {
        self.rem_bits.iter().sum()
    }

    /// Interleaves the bits of `coords` into one index.
    pub fn linearize(&self, coords: &[u64]) -> Result<u128> {
        self.check_coords(coords)?;
        Ok(self.linearize_unchecked(coords))
    }

    pub(crate) fn check_coords(&self, coords: &[u64]) -> Result<()> {
        if coords.len() != self.order() {
            return Err(Error::Shape(format!(
                "{} coordinates for an order-{} layout",
                coords.len(),
                self.order()
            )));
        }
        for (mode, (&c, &d)) in coords.iter().zip(&self.dims).enumerate() {
            if c >= d {
                return Err(Error::CoordinateOutOfRange {
                    mode,
                    coord: c,
                    dim: d,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn linearize_unchecked(&self, coords: &[u64]) -> u128 {
        let mut alto = 0u128;
        for (pos, &c) in self.positions.iter().zip(coords) {
            let mut c = c;
            for &p in pos {
                alto |= ((c & 1) as u128) << p;
                c >>= 1;
            }
        }
        alto
    }

    /// Splits an interleaved index into `(block_key, reencoded_index)`.
    ///
    /// The key is the top [`stripped_bits`](Self::stripped_bits) bits of the
    /// interleaved index, in interleaved order. The re-encoded index holds
    /// each mode's remaining low bits in its contiguous field.
    pub fn split_block_key(&self, alto: u128) -> (u64, u64) {
        let encoded = self.encoded_bits();
        let key = if self.total_bits == encoded {
            0
        } else {
            (alto >> encoded) as u64
        };
        let mut reencoded = 0u64;
        for (mode, pos) in self.positions.iter().enumerate() {
            let shift = self.field_shift[mode];
            for (bit, &p) in pos.iter().take(self.rem_bits[mode] as usize).enumerate() {
                reencoded |= (((alto >> p) & 1) as u64) << (shift + bit as u32);
            }
        }
        (key, reencoded)
    }

    /// Per-mode upper coordinate bits encoded in a packed block key, already
    /// shifted to their coordinate position.
    pub fn key_upper_coords(&self, key: u64) -> Vec<u64> {
        let mut upper = vec![0u64; self.order()];
        let base = self.encoded_bits() as usize;
        for (j, &(mode, bit)) in self.interleave[base..].iter().enumerate() {
            upper[mode] |= ((key >> j) & 1) << bit;
        }
        upper
    }

    /// Per-mode key bits as small integers (`coord >> rem_bits`).
    pub fn key_per_mode(&self, key: u64) -> Vec<u64> {
        self.key_upper_coords(key)
            .into_iter()
            .zip(&self.rem_bits)
            .map(|(u, &r)| if r >= 64 { 0 } else { u >> r })
            .collect()
    }

    /// Recovers coordinates from a re-encoded index and its block key.
    pub fn delinearize(&self, reencoded: u64, key: u64) -> Vec<u64> {
        let upper = self.key_upper_coords(key);
        let mut coords = vec![0u64; self.order()];
        self.delinearize_into(reencoded, &upper, &mut coords);
        coords
    }

    /// Shift-and-mask decoding with precomputed [`key_upper_coords`](Self::key_upper_coords).
    #[inline]
    pub fn delinearize_into(&self, reencoded: u64, upper: &[u64], coords: &mut [u64]) {
        for mode in 0..coords.len() {
            coords[mode] = upper[mode] | self.field(reencoded, mode);
        }
    }

    /// Decodes one mode only.
    #[inline]
    pub fn delinearize_mode(&self, reencoded: u64, upper: &[u64], mode: usize) -> u64 {
        upper[mode] | self.field(reencoded, mode)
    }

    #[inline]
    fn field(&self, reencoded: u64, mode: usize) -> u64 {
        // a zero-width field may sit at shift 64
        reencoded
            .checked_shr(self.field_shift[mode])
            .unwrap_or(0)
            & self.field_mask[mode]
    }
}
