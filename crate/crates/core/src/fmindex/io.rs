//! Versioned little-endian index file.
//!
//! ```text
//! "TGRX" u32:version
//! section*  where section = [u8;4]:tag u64:payload_len payload u32:crc32(payload)
//! ```
//!
//! Sections appear in a fixed order: HEAD, VOCB, BWT_, RANK, SAMP, SEQS.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::bits::RankBitVec;
use super::wavelet::WaveletMatrix;
use super::{FmIndex, IndexError, NextTokenStrategy, TokenWidth, FORMAT_VERSION, MAGIC};
use crate::tokenizer::Vocabulary;

const SECTIONS: [&[u8; 4]; 6] = [b"HEAD", b"VOCB", b"BWT_", b"RANK", b"SAMP", b"SEQS"];

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn u64s(&mut self, vs: &[u64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.u64(v);
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.u32(v);
        }
    }
    fn bitvec(&mut self, bv: &RankBitVec) {
        self.u64(bv.len as u64);
        self.u64s(&bv.words);
        self.u64s(&bv.blocks);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self) -> IndexError {
        IndexError::CorruptIndex(self.section.to_string())
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).ok_or_else(|| self.corrupt())?;
        let out = self.data.get(self.pos..end).ok_or_else(|| self.corrupt())?;
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize, IndexError> {
        let n = self.u64()? as usize;
        // reject lengths that cannot fit in the remaining bytes
        if n.checked_mul(elem).is_none_or(|b| b > self.data.len() - self.pos) {
            return Err(self.corrupt());
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt())
    }
    fn u64s(&mut self) -> Result<Vec<u64>, IndexError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }
    fn u32s(&mut self) -> Result<Vec<u32>, IndexError> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn bitvec(&mut self) -> Result<RankBitVec, IndexError> {
        let len = self.u64()? as usize;
        let words = self.u64s()?;
        let blocks = self.u64s()?;
        if words.len() != len.div_ceil(64) {
            return Err(self.corrupt());
        }
        let bv = RankBitVec::from_words(len, words);
        if bv.blocks != blocks {
            return Err(self.corrupt());
        }
        Ok(bv)
    }
    fn finish(&self) -> Result<(), IndexError> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(self.corrupt())
        }
    }
}

fn encode_sections(ix: &FmIndex) -> [Buf; 6] {
    let mut head = Buf::default();
    head.u32(ix.width.bits());
    head.u8(ix.strategy.code());
    head.u32(ix.sa_rate);
    head.u64(ix.len() as u64);
    head.u64(ix.alphabet as u64);
    head.u64(ix.num_sequences() as u64);

    let mut vocb = Buf::default();
    match &ix.vocab {
        Some(v) => {
            vocb.u8(1);
            vocb.u64(v.indexed_tokens().len() as u64);
            for tok in v.indexed_tokens() {
                vocb.str(tok);
            }
            vocb.u64(v.fingerprint());
        }
        None => vocb.u8(0),
    }

    let mut bwt = Buf::default();
    bwt.u64(ix.bwt.len as u64);
    bwt.u32(ix.bwt.levels.len() as u32);
    for (bv, &z) in ix.bwt.levels.iter().zip(&ix.bwt.zeros) {
        bwt.u64(z as u64);
        bwt.bitvec(bv);
    }

    let mut rank = Buf::default();
    rank.u64s(&ix.c_array);

    let mut samp = Buf::default();
    samp.bitvec(&ix.sampled);
    samp.u32s(&ix.samples);

    let mut seqs = Buf::default();
    seqs.u32s(&ix.seq_starts);
    seqs.u32s(&ix.seq_lens);
    seqs.u64(ix.docids.len() as u64);
    for d in &ix.docids {
        seqs.str(d);
    }

    [head, vocb, bwt, rank, samp, seqs]
}

/// Writes `ix` to `path`, returning the number of bytes written.
pub fn serialize(ix: &FmIndex, path: impl AsRef<Path>) -> Result<u64, IndexError> {
    let mut w = BufWriter::new(File::create(path)?);
    let bytes = write_to(ix, &mut w)?;
    w.flush()?;
    Ok(bytes)
}

pub fn write_to(ix: &FmIndex, w: &mut impl Write) -> Result<u64, IndexError> {
    let mut written = 0u64;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    written += 8;
    for (tag, payload) in SECTIONS.iter().zip(encode_sections(ix)) {
        w.write_all(*tag)?;
        w.write_all(&(payload.0.len() as u64).to_le_bytes())?;
        w.write_all(&payload.0)?;
        w.write_all(&crc32fast::hash(&payload.0).to_le_bytes())?;
        written += 4 + 8 + payload.0.len() as u64 + 4;
    }
    Ok(written)
}

pub fn deserialize(path: impl AsRef<Path>) -> Result<FmIndex, IndexError> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    read_from(&data)
}

fn section_name(tag: &[u8; 4]) -> &'static str {
    match tag {
        b"HEAD" => "HEAD",
        b"VOCB" => "VOCB",
        b"BWT_" => "BWT_",
        b"RANK" => "RANK",
        b"SAMP" => "SAMP",
        _ => "SEQS",
    }
}

pub fn read_from(data: &[u8]) -> Result<FmIndex, IndexError> {
    let mut top = Cursor {
        data,
        pos: 0,
        section: "magic",
    };
    if top.take(4)? != MAGIC {
        return Err(top.corrupt());
    }
    top.section = "version";
    let version = top.u32()?;
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut payloads: Vec<Cursor> = Vec::with_capacity(SECTIONS.len());
    for tag in SECTIONS {
        top.section = section_name(tag);
        if top.take(4)? != tag {
            return Err(top.corrupt());
        }
        let len = top.u64()? as usize;
        let payload = top.take(len)?;
        let crc = top.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(top.corrupt());
        }
        payloads.push(Cursor {
            data: payload,
            pos: 0,
            section: section_name(tag),
        });
    }
    top.section = "trailer";
    top.finish()?;
    let [mut head, mut vocb, mut bwt, mut rank, mut samp, mut seqs]: [Cursor; 6] =
        payloads.try_into().map_err(|_| IndexError::CorruptIndex("sections".into()))?;

    let width = TokenWidth::from_bits(head.u32()?).ok_or_else(|| head.corrupt())?;
    let strategy = NextTokenStrategy::from_code(head.u8()?).ok_or_else(|| head.corrupt())?;
    let sa_rate = head.u32()?;
    let text_len = head.u64()? as usize;
    let alphabet = head.u64()? as usize;
    let num_seqs = head.u64()? as usize;
    head.finish()?;
    if sa_rate == 0 {
        return Err(head.corrupt());
    }

    let vocab = match vocb.u8()? {
        0 => None,
        1 => {
            let n = vocb.len(4)?;
            let tokens = (0..n).map(|_| vocb.str()).collect::<Result<Vec<_>, _>>()?;
            let fp = vocb.u64()?;
            let v = Vocabulary::from_indexed_tokens(tokens).map_err(|_| vocb.corrupt())?;
            if v.fingerprint() != fp || v.indexed_len() != alphabet {
                return Err(vocb.corrupt());
            }
            Some(v)
        }
        _ => return Err(vocb.corrupt()),
    };
    vocb.finish()?;

    let len = bwt.u64()? as usize;
    let n_levels = bwt.u32()? as usize;
    let sigma = alphabet.max(1) + 1;
    if len != text_len || n_levels != super::wavelet::bit_width(sigma) {
        return Err(bwt.corrupt());
    }
    let mut levels = Vec::with_capacity(n_levels);
    let mut zeros = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let z = bwt.u64()? as usize;
        let bv = bwt.bitvec()?;
        if bv.len() != len || bv.rank0(len) != z {
            return Err(bwt.corrupt());
        }
        zeros.push(z);
        levels.push(bv);
    }
    bwt.finish()?;

    let c_array = rank.u64s()?;
    rank.finish()?;
    if c_array.len() != sigma + 1
        || c_array.windows(2).any(|w| w[0] > w[1])
        || c_array.last().copied() != Some(text_len as u64)
    {
        return Err(rank.corrupt());
    }

    let sampled = samp.bitvec()?;
    let samples = samp.u32s()?;
    samp.finish()?;
    if sampled.len() != text_len
        || sampled.count_ones() != samples.len()
        || samples.iter().any(|&p| p as usize >= text_len || p % sa_rate != 0)
    {
        return Err(samp.corrupt());
    }

    let seq_starts = seqs.u32s()?;
    let seq_lens = seqs.u32s()?;
    let n_docids = seqs.len(4)?;
    let docids = (0..n_docids).map(|_| seqs.str()).collect::<Result<Vec<_>, _>>()?;
    seqs.finish()?;
    if seq_starts.len() != num_seqs
        || seq_lens.len() != num_seqs
        || !(docids.is_empty() || docids.len() == num_seqs)
        || seq_starts
            .iter()
            .zip(&seq_lens)
            .any(|(&s, &l)| s as usize + l as usize >= text_len)
    {
        return Err(seqs.corrupt());
    }

    Ok(FmIndex {
        bwt: WaveletMatrix { len, levels, zeros },
        c_array,
        sampled,
        samples,
        sa_rate,
        seq_starts,
        seq_lens,
        docids,
        vocab,
        alphabet,
        width,
        strategy,
    })
}
