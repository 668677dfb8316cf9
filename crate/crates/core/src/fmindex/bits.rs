/// Plain bitvector with constant-time rank.
///
/// Ones are counted per 512-bit block; a query adds the block prefix to at
/// most eight word popcounts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankBitVec {
    pub(crate) len: usize,
    pub(crate) words: Vec<u64>,
    pub(crate) blocks: Vec<u64>,
}

const WORDS_PER_BLOCK: usize = 8;

impl RankBitVec {
    pub fn from_bits(bits: impl ExactSizeIterator<Item = bool>) -> Self {
        let len = bits.len();
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, b) in bits.enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self::from_words(len, words)
    }

    pub fn from_words(len: usize, words: Vec<u64>) -> Self {
        let mut blocks = Vec::with_capacity(words.len() / WORDS_PER_BLOCK + 1);
        let mut acc = 0u64;
        for chunk in words.chunks(WORDS_PER_BLOCK) {
            blocks.push(acc);
            acc += chunk.iter().map(|w| w.count_ones() as u64).sum::<u64>();
        }
        blocks.push(acc);
        Self { len, words, blocks }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Number of ones in `[0, i)`.
    pub fn rank1(&self, i: usize) -> usize {
        debug_assert!(i <= self.len);
        let w = i / 64;
        let b = w / WORDS_PER_BLOCK;
        let mut r = self.blocks[b];
        for word in &self.words[b * WORDS_PER_BLOCK..w] {
            r += word.count_ones() as u64;
        }
        let rem = i % 64;
        if rem > 0 {
            r += (self.words[w] & ((1u64 << rem) - 1)).count_ones() as u64;
        }
        r as usize
    }

    pub fn rank0(&self, i: usize) -> usize {
        i - self.rank1(i)
    }

    pub fn count_ones(&self) -> usize {
        *self.blocks.last().expect("blocks is never empty") as usize
    }

    pub fn size_in_bytes(&self) -> usize {
        8 * (self.words.len() + self.blocks.len())
    }
}
