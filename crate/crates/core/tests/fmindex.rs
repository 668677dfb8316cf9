mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{naive_next, naive_occurrences, random_sequences, triple_corpus, Pools};
use thinkdex_core::corpus::{Corpus, Document, Triple};
use thinkdex_core::fmindex::{self, FmIndex, IndexError, IndexOptions, NextTokenStrategy, TokenWidth};
use thinkdex_core::tokenizer::{Vocabulary, SEPARATOR_ID, START_ID};

fn doc(id: &str, triples: &[(&str, &str, &str)]) -> Document {
    Document {
        doc_id: id.into(),
        title: String::new(),
        text: String::new(),
        triples: triples.iter().map(|(h, r, t)| Triple::new(h, r, t).unwrap()).collect(),
    }
}

fn build(corpus: &Corpus) -> (Vocabulary, FmIndex) {
    let vocab = Vocabulary::build(corpus).unwrap();
    let ix = FmIndex::build(corpus, &vocab, IndexOptions::default()).unwrap();
    (vocab, ix)
}

#[test]
fn singleton_docid_counts_once() {
    let corpus = Corpus::from_documents(vec![doc("d1", &[("Paris", "capital of", "France")])]).unwrap();
    let (vocab, ix) = build(&corpus);
    let docid = corpus.docids().next().unwrap().to_string();
    let seq = vocab.encode(&docid);
    assert_eq!(seq.len(), 6);
    assert_eq!(ix.count(&seq), 1);
    let st = ix.search(ix.root_state(), &seq).unwrap();
    assert_eq!(ix.allowed_next(st).unwrap(), vec![SEPARATOR_ID]);
    assert_eq!(ix.locate(st).unwrap(), vec![docid.as_str()]);
}

#[test]
fn duplicate_docid_indexed_once_resolved_twice() {
    let corpus = Corpus::from_documents(vec![
        doc("d1", &[("A", "b", "C")]),
        doc("d2", &[("A", "b", "C"), ("D", "e", "F")]),
    ])
    .unwrap();
    let (vocab, ix) = build(&corpus);
    let docid = Triple::new("A", "b", "C").map(|t| thinkdex_core::corpus::canonical_docid(&t)).unwrap();
    assert_eq!(ix.count(&vocab.encode(&docid)), 1);
    assert_eq!(ix.num_sequences(), 2);
    assert_eq!(corpus.resolve_docid(&docid), vec!["d1", "d2"]);
}

#[test]
fn start_state_and_root_state() {
    let corpus = Corpus::from_documents(vec![doc("d1", &[("A", "b", "C"), ("D", "e", "F")])]).unwrap();
    let (_, ix) = build(&corpus);
    let s = ix.start_state();
    assert_eq!(s.hi - s.lo, ix.len());
    assert_eq!(s.depth, 0);
    assert!(ix.extend(s, START_ID).is_some());
    assert_eq!(ix.allowed_next(ix.root_state()).unwrap(), vec![START_ID]);
    assert_eq!(ix.count(&[]), ix.len());
}

#[test]
fn shared_prefix_locate_is_precondition_error() {
    let corpus = Corpus::from_documents(vec![doc("d1", &[("A", "b", "C"), ("A", "b", "D")])]).unwrap();
    let (vocab, ix) = build(&corpus);
    let st = ix.search(ix.root_state(), &vocab.encode("<docid_start> A, b,")).unwrap();
    assert_eq!(st.size(), 2);
    assert!(matches!(ix.locate(st), Err(IndexError::IncompleteSequence)));
    let empty = thinkdex_core::fmindex::SearchState { lo: 0, hi: 0, depth: 1, anchored: true };
    assert!(matches!(ix.locate(empty), Err(IndexError::EmptyState)));
}

#[test]
fn absent_token_is_no_match() {
    let corpus = Corpus::from_documents(vec![doc("d1", &[("A", "b", "C")])]).unwrap();
    let (mut vocab, ix) = build(&corpus);
    vocab.extend_with_text("zebra");
    let z = vocab.id("zebra").unwrap();
    assert!(ix.extend(ix.start_state(), z).is_none());
    assert!(ix.extend(ix.root_state(), u32::MAX).is_none());
}

#[test]
fn empty_corpus_cannot_be_indexed() {
    let corpus = Corpus::from_documents(vec![doc("d1", &[])]).unwrap();
    let vocab = Vocabulary::from_indexed_tokens(Vec::<String>::new()).unwrap();
    assert!(matches!(FmIndex::build(&corpus, &vocab, IndexOptions::default()), Err(IndexError::EmptyCorpus)));
}

#[test]
fn build_is_deterministic() {
    let corpus = triple_corpus(&mut common::rng(3), 5_000, Pools { entities: 200, relations: 20 });
    let (_, a) = build(&corpus);
    let (_, b) = build(&corpus);
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
    fmindex::serialize(&a, &pa).unwrap();
    fmindex::serialize(&b, &pb).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn count_matches_naive_on_10k_tokens() {
    let mut rng = common::rng(11);
    let seqs = random_sequences(&mut rng, 10_000, 40, 12);
    let ix = FmIndex::from_sequences(&seqs, 40, IndexOptions::default()).unwrap();
    for _ in 0..1000 {
        let s = &seqs[rng.gen_range(0..seqs.len())];
        let len = rng.gen_range(1..=4);
        let p: Vec<u32> = if rng.gen_bool(0.5) && s.len() >= len {
            let o = rng.gen_range(0..=s.len() - len);
            s[o..o + len].to_vec()
        } else {
            (0..len).map(|_| rng.gen_range(1..40)).collect()
        };
        assert_eq!(ix.count(&p), naive_occurrences(&seqs, &p).len(), "{p:?}");
    }
}

#[test]
fn extend_interval_counts_sequences_with_prefix() {
    let mut rng = common::rng(5);
    let seqs = random_sequences(&mut rng, 8_000, 6, 10);
    let ix = FmIndex::from_sequences(&seqs, 6, IndexOptions::default()).unwrap();
    for _ in 0..500 {
        let s = &seqs[rng.gen_range(0..seqs.len())];
        let d = rng.gen_range(1..=s.len());
        let st = ix.search(ix.root_state(), &s[..d]).unwrap();
        let want = seqs.iter().filter(|x| x.starts_with(&s[..d])).count();
        assert_eq!(st.size(), want);
    }
}

#[test]
fn locate_recovers_200_docids() {
    let corpus = triple_corpus(&mut common::rng(8), 20_000, Pools { entities: 300, relations: 30 });
    let (vocab, ix) = build(&corpus);
    let docids: Vec<&str> = corpus.docids().collect();
    let mut rng = common::rng(9);
    for _ in 0..200 {
        let d = docids[rng.gen_range(0..docids.len())];
        let st = ix.search(ix.root_state(), &vocab.encode(d)).unwrap();
        assert!(ix.is_complete(st));
        assert_eq!(ix.locate(st).unwrap(), vec![d]);
    }
}

#[test]
fn token_width_bounds() {
    let seqs = vec![vec![1u32, 2, 3]];
    let narrow = IndexOptions { width: TokenWidth::U16, ..Default::default() };
    assert!(FmIndex::from_sequences(&seqs, 65_535, narrow).is_ok());
    assert!(matches!(
        FmIndex::from_sequences(&seqs, 65_536, narrow),
        Err(IndexError::AlphabetOverflow { .. })
    ));
}

#[test]
fn file_round_trip_preserves_options_and_size() {
    let corpus = triple_corpus(&mut common::rng(21), 3_000, Pools { entities: 50, relations: 5 });
    let vocab = Vocabulary::build(&corpus).unwrap();
    let opts = IndexOptions { sa_rate: 4, width: TokenWidth::U16, strategy: NextTokenStrategy::Wavelet };
    let ix = FmIndex::build(&corpus, &vocab, opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ix.tgrx");
    let bytes = fmindex::serialize(&ix, &path).unwrap();
    assert_eq!(bytes, std::fs::metadata(&path).unwrap().len());
    let back = fmindex::deserialize(&path).unwrap();
    assert_eq!(back, ix);
    assert_eq!(back.sa_rate(), 4);
    assert_eq!(back.width(), TokenWidth::U16);
    assert_eq!(back.strategy(), NextTokenStrategy::Wavelet);
    assert_eq!(back.vocab_fingerprint(), Some(vocab.fingerprint()));
}

#[test]
fn corrupt_files_are_rejected() {
    let corpus = triple_corpus(&mut common::rng(22), 500, Pools { entities: 20, relations: 3 });
    let (_, ix) = build(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ix.tgrx");
    fmindex::serialize(&ix, &path).unwrap();
    let good = std::fs::read(&path).unwrap();
    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x55;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(fmindex::deserialize(&path), Err(IndexError::CorruptIndex(_))));
    std::fs::write(&path, &good[..good.len() / 3]).unwrap();
    assert!(matches!(fmindex::deserialize(&path), Err(IndexError::CorruptIndex(_))));
    assert!(matches!(fmindex::deserialize(dir.path().join("missing")), Err(IndexError::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn count_and_locate_equal_naive(
        seqs in proptest::collection::vec(proptest::collection::vec(1u32..8, 1..12), 1..40),
        patterns in proptest::collection::vec(proptest::collection::vec(1u32..8, 1..4), 1..20),
        rate in 1u32..9,
    ) {
        let ix = FmIndex::from_sequences(&seqs, 8, IndexOptions { sa_rate: rate, ..Default::default() }).unwrap();
        for p in &patterns {
            let want = naive_occurrences(&seqs, p);
            prop_assert_eq!(ix.count(p), want.len());
            if let Some(st) = ix.search(ix.start_state(), p) {
                prop_assert_eq!(ix.locate_positions(st).unwrap(), want);
            } else {
                prop_assert!(want.is_empty());
            }
        }
    }

    #[test]
    fn every_indexed_sequence_counts_at_least_once(
        seqs in proptest::collection::vec(proptest::collection::vec(1u32..5, 1..8), 1..30),
    ) {
        let ix = FmIndex::from_sequences(&seqs, 5, IndexOptions::default()).unwrap();
        for s in &seqs {
            prop_assert!(ix.count(s) >= 1);
        }
    }

    #[test]
    fn allowed_next_equals_prefix_oracle(
        seqs in proptest::collection::vec(proptest::collection::vec(1u32..6, 1..10), 1..40),
        picks in proptest::collection::vec((any::<prop::sample::Index>(), 0usize..12), 1..20),
        strategy in prop_oneof![Just(NextTokenStrategy::Auto), Just(NextTokenStrategy::Scan), Just(NextTokenStrategy::Wavelet)],
    ) {
        let ix = FmIndex::from_sequences(&seqs, 6, IndexOptions { strategy, ..Default::default() }).unwrap();
        prop_assert_eq!(ix.allowed_next(ix.root_state()).unwrap(), naive_next(&seqs, &[]).into_iter().collect::<Vec<_>>());
        for (idx, d) in picks {
            let s = idx.get(&seqs);
            let prefix = &s[..d.min(s.len())];
            let st = ix.search(ix.root_state(), prefix).unwrap();
            let got = ix.allowed_next(st).unwrap();
            let want: Vec<u32> = naive_next(&seqs, prefix).into_iter().collect();
            prop_assert_eq!(&got, &want);
            for t in 0..7u32 {
                prop_assert_eq!(ix.extend(st, t).is_some(), got.contains(&t));
            }
        }
    }

    #[test]
    fn serialization_round_trip(
        seqs in proptest::collection::vec(proptest::collection::vec(1u32..30, 1..10), 1..30),
        rate in 1u32..40,
    ) {
        let ix = FmIndex::from_sequences(&seqs, 30, IndexOptions { sa_rate: rate, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ix");
        fmindex::serialize(&ix, &path).unwrap();
        prop_assert_eq!(fmindex::deserialize(&path).unwrap(), ix);
    }
}
