//! FM-index over reversed token sequences.
//!
//! Sequences are stored reversed, each bracketed by separators:
//!
//! ```text
//! SEP rev(s1) SEP rev(s2) SEP ... SEP rev(sk) SEP $
//! ```
//!
//! Backward search natively prepends a symbol to the matched pattern. On the
//! reversed text that is the same as appending a token to a forward prefix,
//! which is what constrained generation needs. Starting the search from the
//! separator rows anchors the prefix at the start of a sequence, and a prefix
//! whose rows are all preceded by a separator is a complete sequence.
//!
//! Internally every token `t` is stored as symbol `t + 1`; symbol 0 is the
//! unique end-of-text sentinel and is never reported to callers.

mod bits;
mod io;
mod sa;
mod wavelet;

use std::collections::BTreeSet;

use crate::corpus::Corpus;
use crate::tokenizer::{TokenId, Vocabulary, SEPARATOR_ID, UNK_ID};

pub use bits::RankBitVec;
pub use sa::suffix_array;
pub use wavelet::WaveletMatrix;

pub const DEFAULT_SA_RATE: u32 = 32;
pub(crate) const FORMAT_VERSION: u32 = 1;
pub(crate) const MAGIC: &[u8; 4] = b"TGRX";

const SENTINEL: u32 = 0;
const SEP_SYM: u32 = SEPARATOR_ID + 1;
/// Intervals at most this wide are scanned row by row under `Auto`.
const SCAN_THRESHOLD: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("corpus contains no docids")]
    EmptyCorpus,
    #[error("alphabet of {alphabet} tokens does not fit in {width} bits")]
    AlphabetOverflow { alphabet: usize, width: u32 },
    #[error("sequence {0} is empty")]
    EmptySequence(usize),
    #[error("sequence {0} contains the separator token")]
    SeparatorInSequence(usize),
    #[error("sequence {seq} contains token {token} outside the alphabet")]
    TokenOutOfAlphabet { seq: usize, token: TokenId },
    #[error("docid {0:?} contains tokens missing from the vocabulary")]
    UnknownToken(String),
    #[error("search state is empty")]
    EmptyState,
    #[error("search state does not correspond to complete sequences")]
    IncompleteSequence,
    #[error("pattern is empty")]
    EmptyPattern,
    #[error("index was built from raw sequences and carries no docid strings")]
    NoDocids,
    #[error("index format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt index section {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Declared bound on token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenWidth {
    U16,
    #[default]
    U32,
}

impl TokenWidth {
    pub fn bits(self) -> u32 {
        match self {
            TokenWidth::U16 => 16,
            TokenWidth::U32 => 32,
        }
    }

    pub(crate) fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            16 => Some(TokenWidth::U16),
            32 => Some(TokenWidth::U32),
            _ => None,
        }
    }

    fn max_symbols(self) -> u64 {
        1u64 << self.bits()
    }
}

/// How `allowed_next` enumerates the symbols of a BWT interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NextTokenStrategy {
    /// Row scan for narrow intervals, wavelet enumeration otherwise.
    #[default]
    Auto,
    /// Always access every row of the interval.
    Scan,
    /// Always use wavelet range-distinct enumeration.
    Wavelet,
}

impl NextTokenStrategy {
    pub(crate) fn code(self) -> u8 {
        match self {
            NextTokenStrategy::Auto => 0,
            NextTokenStrategy::Scan => 1,
            NextTokenStrategy::Wavelet => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NextTokenStrategy::Auto),
            1 => Some(NextTokenStrategy::Scan),
            2 => Some(NextTokenStrategy::Wavelet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexOptions {
    pub sa_rate: u32,
    pub width: TokenWidth,
    pub strategy: NextTokenStrategy,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            sa_rate: DEFAULT_SA_RATE,
            width: TokenWidth::U32,
            strategy: NextTokenStrategy::Auto,
        }
    }
}

/// A half-open BWT interval plus the number of tokens matched so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SearchState {
    pub lo: usize,
    pub hi: usize,
    pub depth: usize,
    /// Whether the match is pinned to the first token of a sequence.
    pub anchored: bool,
}

impl SearchState {
    pub fn size(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }
}

/// Where a forward pattern occurs: sequence ordinal and token offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Occurrence {
    pub seq: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmIndex {
    pub(crate) bwt: WaveletMatrix,
    /// `c_array[s]` = number of text symbols smaller than `s`; length sigma + 1.
    pub(crate) c_array: Vec<u64>,
    pub(crate) sampled: RankBitVec,
    pub(crate) samples: Vec<u32>,
    pub(crate) sa_rate: u32,
    /// Text position of the first symbol of each reversed sequence.
    pub(crate) seq_starts: Vec<u32>,
    pub(crate) seq_lens: Vec<u32>,
    pub(crate) docids: Vec<String>,
    pub(crate) vocab: Option<Vocabulary>,
    pub(crate) alphabet: usize,
    pub(crate) width: TokenWidth,
    pub(crate) strategy: NextTokenStrategy,
}

impl FmIndex {
    /// Indexes every distinct canonical docid of `corpus`, in corpus order.
    pub fn build(corpus: &Corpus, vocab: &Vocabulary, opts: IndexOptions) -> Result<Self, IndexError> {
        if corpus.num_docids() == 0 {
            return Err(IndexError::EmptyCorpus);
        }
        let mut seqs = Vec::with_capacity(corpus.num_docids());
        let mut docids = Vec::with_capacity(corpus.num_docids());
        for docid in corpus.docids() {
            let ids = vocab.encode(docid).into_inner();
            if ids.iter().any(|&t| t == UNK_ID || t as usize >= vocab.indexed_len()) {
                return Err(IndexError::UnknownToken(docid.to_string()));
            }
            seqs.push(ids);
            docids.push(docid.to_string());
        }
        let mut ix = Self::from_sequences(&seqs, vocab.indexed_len(), opts)?;
        ix.docids = docids;
        ix.vocab = Some(Vocabulary::from_indexed_tokens(vocab.indexed_tokens().iter().cloned())
            .expect("indexed tokens of a vocabulary are distinct"));
        Ok(ix)
    }

    /// Indexes arbitrary token sequences over ids `0..alphabet`.
    ///
    /// Sequences must be non-empty and must not contain the separator id.
    pub fn from_sequences(
        seqs: &[Vec<TokenId>],
        alphabet: usize,
        opts: IndexOptions,
    ) -> Result<Self, IndexError> {
        if seqs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let sigma = alphabet.max(1) + 1;
        if sigma as u64 > opts.width.max_symbols() {
            return Err(IndexError::AlphabetOverflow {
                alphabet,
                width: opts.width.bits(),
            });
        }
        let total: usize = seqs.iter().map(Vec::len).sum::<usize>() + seqs.len() + 2;
        let mut text = Vec::with_capacity(total);
        let mut seq_starts = Vec::with_capacity(seqs.len());
        let mut seq_lens = Vec::with_capacity(seqs.len());
        text.push(SEP_SYM);
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(IndexError::EmptySequence(i));
            }
            seq_starts.push(text.len() as u32);
            seq_lens.push(s.len() as u32);
            for &t in s.iter().rev() {
                if t == SEPARATOR_ID {
                    return Err(IndexError::SeparatorInSequence(i));
                }
                if t as usize >= alphabet {
                    return Err(IndexError::TokenOutOfAlphabet { seq: i, token: t });
                }
                text.push(t + 1);
            }
            text.push(SEP_SYM);
        }
        text.push(SENTINEL);

        let sa = suffix_array(&text, sigma);
        let n = text.len();
        let bwt: Vec<u32> = sa
            .iter()
            .map(|&p| if p == 0 { text[n - 1] } else { text[p as usize - 1] })
            .collect();

        let mut c_array = vec![0u64; sigma + 1];
        for &s in &text {
            c_array[s as usize + 1] += 1;
        }
        for i in 1..c_array.len() {
            c_array[i] += c_array[i - 1];
        }

        let rate = opts.sa_rate.max(1);
        let sampled = RankBitVec::from_bits(sa.iter().map(|&p| p % rate == 0));
        let samples = sa.iter().copied().filter(|&p| p % rate == 0).collect();

        Ok(Self {
            bwt: WaveletMatrix::new(&bwt, sigma),
            c_array,
            sampled,
            samples,
            sa_rate: rate,
            seq_starts,
            seq_lens,
            docids: Vec::new(),
            vocab: None,
            alphabet,
            width: opts.width,
            strategy: opts.strategy,
        })
    }

    /// Total text length, separators and sentinel included.
    pub fn len(&self) -> usize {
        self.bwt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bwt.is_empty()
    }

    pub fn num_sequences(&self) -> usize {
        self.seq_starts.len()
    }

    /// Number of indexable token ids (`0..alphabet`).
    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn sa_rate(&self) -> u32 {
        self.sa_rate
    }

    pub fn strategy(&self) -> NextTokenStrategy {
        self.strategy
    }

    pub fn set_strategy(&mut self, strategy: NextTokenStrategy) {
        self.strategy = strategy;
    }

    pub fn width(&self) -> TokenWidth {
        self.width
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }

    pub fn vocab_fingerprint(&self) -> Option<u64> {
        self.vocab.as_ref().map(Vocabulary::fingerprint)
    }

    /// Canonical docid string of sequence `seq`, for corpus-built indexes.
    pub fn docid(&self, seq: usize) -> Option<&str> {
        self.docids.get(seq).map(String::as_str)
    }

    /// The whole text: every position is a match of the empty pattern.
    pub fn start_state(&self) -> SearchState {
        SearchState {
            lo: 0,
            hi: self.len(),
            depth: 0,
            anchored: false,
        }
    }

    /// Empty prefix pinned to sequence starts; extensions enumerate indexed
    /// sequences by forward prefix.
    pub fn root_state(&self) -> SearchState {
        SearchState {
            lo: self.c_array[SEP_SYM as usize] as usize,
            hi: self.c_array[SEP_SYM as usize + 1] as usize,
            depth: 0,
            anchored: true,
        }
    }

    #[inline]
    fn lf(&self, sym: u32, i: usize) -> usize {
        self.c_array[sym as usize] as usize + self.bwt.rank(sym, i)
    }

    /// Extends the forward prefix of `s` by `token`; `None` when no indexed
    /// text continues that way. Ids outside the alphabet never match.
    pub fn extend(&self, s: SearchState, token: TokenId) -> Option<SearchState> {
        if token as usize >= self.alphabet {
            return None;
        }
        let sym = token + 1;
        let lo = self.lf(sym, s.lo);
        let hi = self.lf(sym, s.hi);
        (lo < hi).then_some(SearchState {
            lo,
            hi,
            depth: s.depth + 1,
            anchored: s.anchored,
        })
    }

    /// Occurrences of `pattern` as a contiguous run inside the sequences.
    pub fn count(&self, pattern: &[TokenId]) -> usize {
        self.search(self.start_state(), pattern)
            .map_or(0, |s| s.size())
    }

    /// Follows `pattern` from `from`, stopping at the first mismatch.
    pub fn search(&self, from: SearchState, pattern: &[TokenId]) -> Option<SearchState> {
        pattern.iter().try_fold(from, |s, &t| self.extend(s, t))
    }

    /// Tokens `t` for which `extend(s, t)` matches, ascending.
    pub fn allowed_next(&self, s: SearchState) -> Result<Vec<TokenId>, IndexError> {
        if s.is_empty() {
            return Err(IndexError::EmptyState);
        }
        let use_scan = match self.strategy {
            NextTokenStrategy::Scan => true,
            NextTokenStrategy::Wavelet => false,
            NextTokenStrategy::Auto => s.size() <= SCAN_THRESHOLD,
        };
        let mut syms = Vec::new();
        if use_scan {
            let set: BTreeSet<u32> = (s.lo..s.hi).map(|i| self.bwt.access(i)).collect();
            syms.extend(set);
        } else {
            self.bwt.distinct_in_range(s.lo, s.hi, &mut syms);
        }
        Ok(syms
            .into_iter()
            .filter(|&sym| sym != SENTINEL)
            .map(|sym| sym - 1)
            .collect())
    }

    /// True when `s` is anchored and every match ends at a sequence boundary.
    pub fn is_complete(&self, s: SearchState) -> bool {
        !s.is_empty()
            && s.anchored
            && s.depth > 0
            && self.bwt.rank(SEP_SYM, s.hi) - self.bwt.rank(SEP_SYM, s.lo) == s.size()
    }

    fn sa_value(&self, row: usize) -> usize {
        let mut i = row;
        let mut steps = 0usize;
        while !self.sampled.get(i) {
            let sym = self.bwt.access(i);
            i = self.lf(sym, i);
            steps += 1;
        }
        self.samples[self.sampled.rank1(i)] as usize + steps
    }

    /// Every occurrence of the pattern matched by `s`, sorted.
    ///
    /// Offsets are meaningful for separator-free patterns.
    pub fn locate_positions(&self, s: SearchState) -> Result<Vec<Occurrence>, IndexError> {
        if s.is_empty() {
            return Err(IndexError::EmptyState);
        }
        if s.depth == 0 {
            return Err(IndexError::EmptyPattern);
        }
        let mut out: Vec<Occurrence> = (s.lo..s.hi)
            .map(|row| {
                let q = self.sa_value(row);
                let seq = self.seq_starts.partition_point(|&b| b as usize <= q).saturating_sub(1);
                let b = self.seq_starts[seq] as usize;
                let len = self.seq_lens[seq] as usize;
                Occurrence {
                    seq,
                    offset: (len + b).saturating_sub(s.depth + q),
                }
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Sequence ordinals matched by a complete state.
    pub fn locate_sequences(&self, s: SearchState) -> Result<Vec<usize>, IndexError> {
        if s.is_empty() {
            return Err(IndexError::EmptyState);
        }
        if !self.is_complete(s) {
            return Err(IndexError::IncompleteSequence);
        }
        let mut seqs: Vec<usize> = self.locate_positions(s)?.into_iter().map(|o| o.seq).collect();
        seqs.dedup();
        Ok(seqs)
    }

    /// Docid strings matched by a complete state.
    pub fn locate(&self, s: SearchState) -> Result<Vec<&str>, IndexError> {
        if self.docids.is_empty() {
            return Err(IndexError::NoDocids);
        }
        Ok(self
            .locate_sequences(s)?
            .into_iter()
            .map(|i| self.docids[i].as_str())
            .collect())
    }

    /// Approximate in-memory footprint of the query structures.
    pub fn size_in_bytes(&self) -> usize {
        self.bwt.size_in_bytes()
            + 8 * self.c_array.len()
            + self.sampled.size_in_bytes()
            + 4 * (self.samples.len() + self.seq_starts.len() + self.seq_lens.len())
            + self.docids.iter().map(String::len).sum::<usize>()
    }
}

pub use io::{deserialize, serialize};
