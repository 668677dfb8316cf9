use super::bits::RankBitVec;

/// Wavelet matrix over integer symbols.
///
/// Supports access, rank, and enumeration of the distinct symbols inside a
/// range, each in O(log sigma) bitvector ranks per reported symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveletMatrix {
    pub(crate) len: usize,
    pub(crate) levels: Vec<RankBitVec>,
    pub(crate) zeros: Vec<usize>,
}

/// Bits needed to represent every symbol below `sigma`.
pub fn bit_width(sigma: usize) -> usize {
    (usize::BITS - sigma.saturating_sub(1).leading_zeros()).max(1) as usize
}

impl WaveletMatrix {
    pub fn new(symbols: &[u32], sigma: usize) -> Self {
        let width = bit_width(sigma);
        let mut cur: Vec<u32> = symbols.to_vec();
        let mut next = Vec::with_capacity(cur.len());
        let mut levels = Vec::with_capacity(width);
        let mut zeros = Vec::with_capacity(width);
        for l in 0..width {
            let shift = width - 1 - l;
            let bv = RankBitVec::from_bits(cur.iter().map(|&s| (s >> shift) & 1 == 1));
            zeros.push(bv.rank0(bv.len()));
            next.clear();
            next.extend(cur.iter().filter(|&&s| (s >> shift) & 1 == 0));
            next.extend(cur.iter().filter(|&&s| (s >> shift) & 1 == 1));
            std::mem::swap(&mut cur, &mut next);
            levels.push(bv);
        }
        Self {
            len: symbols.len(),
            levels,
            zeros,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.levels.len()
    }

    pub fn access(&self, mut i: usize) -> u32 {
        let mut value = 0u32;
        for (bv, &z) in self.levels.iter().zip(&self.zeros) {
            value <<= 1;
            if bv.get(i) {
                value |= 1;
                i = z + bv.rank1(i);
            } else {
                i = bv.rank0(i);
            }
        }
        value
    }

    /// Occurrences of `c` in `[0, i)`.
    pub fn rank(&self, c: u32, mut i: usize) -> usize {
        let width = self.width();
        if width < 32 && (c >> width) != 0 {
            return 0;
        }
        let mut start = 0usize;
        for (l, (bv, &z)) in self.levels.iter().zip(&self.zeros).enumerate() {
            if (c >> (width - 1 - l)) & 1 == 1 {
                start = z + bv.rank1(start);
                i = z + bv.rank1(i);
            } else {
                start = bv.rank0(start);
                i = bv.rank0(i);
            }
        }
        i - start
    }

    /// Appends the distinct symbols of `[lo, hi)` to `out` in ascending order.
    pub fn distinct_in_range(&self, lo: usize, hi: usize, out: &mut Vec<u32>) {
        if lo >= hi {
            return;
        }
        let width = self.width();
        // (level, lo, hi, prefix)
        let mut stack = vec![(0usize, lo, hi, 0u32)];
        while let Some((l, s, e, prefix)) = stack.pop() {
            if l == width {
                out.push(prefix);
                continue;
            }
            let bv = &self.levels[l];
            let z = self.zeros[l];
            let (s1, e1) = (bv.rank1(s), bv.rank1(e));
            let (s0, e0) = (s - s1, e - e1);
            // ones pushed first so zeros pop first and output stays sorted
            if s1 < e1 {
                stack.push((l + 1, z + s1, z + e1, (prefix << 1) | 1));
            }
            if s0 < e0 {
                stack.push((l + 1, s0, e0, prefix << 1));
            }
        }
    }

    pub fn size_in_bytes(&self) -> usize {
        self.levels.iter().map(RankBitVec::size_in_bytes).sum::<usize>() + 8 * self.zeros.len()
    }
}
