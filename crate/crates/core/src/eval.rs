//! Retrieval evaluation: recall, retrieved-count statistics, latency
//! benchmarks, and index footprint.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Corpus, QueryRecord};
use crate::decoder::{retrieved_docs, DecodeConfig, DecodeError, DecodeSession, Policy, Truncation};
use crate::fmindex::FmIndex;
use crate::scorer::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use crate::tokenizer::{Vocabulary, SEPARATOR_ID, START_ID};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("file missing: {0}")]
    FileMissing(String),
    #[error("at least 3 repeats are required, got {0}")]
    TooFewRepeats(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of gold documents present in `retrieved`, over sets.
pub fn recall<R: AsRef<str>, G: AsRef<str>>(retrieved: &[R], gold: &[G]) -> Result<f64, EvalError> {
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let got: HashSet<&str> = retrieved.iter().map(AsRef::as_ref).collect();
    Ok(gold.intersection(&got).count() as f64 / gold.len() as f64)
}

/// Everything a decoding session borrows.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub ix: &'a FmIndex,
    pub corpus: &'a Corpus,
    /// Must already contain the query words.
    pub vocab: &'a Vocabulary,
    pub scorer: &'a dyn Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRow {
    pub query_id: String,
    pub recall: f64,
    pub acc_r: f64,
    pub n_retrieved: usize,
    pub n_docid_spans: usize,
    pub latency_ms: f64,
    pub scorer_ms: f64,
    pub truncated: Option<Truncation>,
    pub failed: Option<String>,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n_queries: usize,
    pub mean_recall: f64,
    pub mean_retrieved: f64,
    pub mean_latency_ms: f64,
    pub mean_scorer_ms: f64,
    pub truncation_rate: f64,
    pub n_failed: usize,
    /// Gold ids that name no corpus document (kept, counted).
    pub missing_gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<QueryRow>,
    pub summary: Summary,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn summarize(rows: &[QueryRow], missing_gold: usize) -> Summary {
        Summary {
            n_queries: rows.len(),
            mean_recall: mean(rows.iter().map(|r| r.recall)),
            mean_retrieved: mean(rows.iter().map(|r| r.n_retrieved as f64)),
            mean_latency_ms: mean(rows.iter().map(|r| r.latency_ms)),
            mean_scorer_ms: mean(rows.iter().map(|r| r.scorer_ms)),
            truncation_rate: mean(rows.iter().map(|r| r.truncated.is_some() as u8 as f64)),
            n_failed: rows.iter().filter(|r| r.failed.is_some()).count(),
            missing_gold,
        }
    }

    /// Whether the stored aggregates equal a recomputation from the rows.
    pub fn is_consistent(&self) -> bool {
        Self::summarize(&self.rows, self.summary.missing_gold) == self.summary
    }

    pub const TSV_HEADER: &'static str =
        "query_id\trecall\tacc_r\tn_retrieved\tn_docid_spans\tlatency_ms\tscorer_ms\ttruncated\tfailed\tretrieved";

    /// One header line, then one row per query.
    pub fn write_tsv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::TSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{:.6}\t{:.6}\t{}\t{}\t{:.3}\t{:.3}\t{}\t{}\t{}",
                r.query_id,
                r.recall,
                r.acc_r,
                r.n_retrieved,
                r.n_docid_spans,
                r.latency_ms,
                r.scorer_ms,
                r.truncated.map_or("-".into(), |t| format!("{t:?}").to_lowercase()),
                r.failed.as_deref().map_or("-".into(), |f| f.replace(['\t', '\n'], " ")),
                if r.retrieved.is_empty() { "-".into() } else { r.retrieved.join(",") },
            )?;
        }
        Ok(())
    }
}

fn eval_one(q: &QueryRecord, c: Components<'_>, cfg: DecodeConfig) -> QueryRow {
    let t0 = Instant::now();
    let result = DecodeSession::new(&q.question, c.ix, c.corpus, c.vocab, c.scorer, cfg).and_then(DecodeSession::run);
    let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
    let score = |retrieved: &[String]| recall(retrieved, &q.gold_doc_ids).unwrap_or(0.0);
    match result {
        Ok(seq) => {
            let retrieved = retrieved_docs(&seq);
            let r = score(&retrieved);
            QueryRow {
                query_id: q.query_id.clone(),
                recall: r,
                acc_r: r,
                n_retrieved: retrieved.len(),
                n_docid_spans: seq.num_docid_spans(),
                latency_ms,
                scorer_ms: seq.scorer_us as f64 / 1e3,
                truncated: seq.truncation,
                failed: q.gold_doc_ids.is_empty().then(|| "empty gold set".to_string()),
                retrieved,
            }
        }
        Err(e) => QueryRow {
            query_id: q.query_id.clone(),
            recall: 0.0,
            acc_r: 0.0,
            n_retrieved: 0,
            n_docid_spans: 0,
            latency_ms,
            scorer_ms: 0.0,
            truncated: None,
            failed: Some(e.to_string()),
            retrieved: Vec::new(),
        },
    }
}

/// Decodes every query and aggregates. Per-query failures score zero.
///
/// `threads` caps the worker pool; `0` uses every core.
pub fn run_eval(queries: &[QueryRecord], c: Components<'_>, cfg: DecodeConfig, threads: usize) -> Result<EvalReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    cfg.validate()?;
    let missing_gold = queries
        .iter()
        .flat_map(|q| &q.gold_doc_ids)
        .filter(|id| c.corpus.document(id).is_none())
        .count();
    if missing_gold > 0 {
        log::warn!("{missing_gold} gold doc ids are not in the corpus");
    }
    let rows: Vec<QueryRow> = if threads == 1 {
        queries.iter().map(|q| eval_one(q, c, cfg)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        pool.install(|| queries.par_iter().map(|q| eval_one(q, c, cfg)).collect())
    };
    let summary = EvalReport::summarize(&rows, missing_gold);
    Ok(EvalReport { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountStats {
    pub mean: f64,
    /// Retrieved-set size to number of queries.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn retrieved_count_stats(report: &EvalReport) -> CountStats {
    let mut histogram = BTreeMap::new();
    for r in &report.rows {
        *histogram.entry(r.n_retrieved).or_insert(0) += 1;
    }
    CountStats {
        mean: mean(report.rows.iter().map(|r| r.n_retrieved as f64)),
        histogram,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeReport {
    pub index_bytes: u64,
    pub corpus_bytes: u64,
    pub ratio: f64,
}

pub fn index_size_report(index: impl AsRef<Path>, corpus: impl AsRef<Path>) -> Result<SizeReport, EvalError> {
    let size = |p: &Path| {
        std::fs::metadata(p)
            .ok()
            .filter(|m| m.is_file())
            .map(|m| m.len())
            .ok_or_else(|| EvalError::FileMissing(p.display().to_string()))
    };
    let index_bytes = size(index.as_ref())?;
    let corpus_bytes = size(corpus.as_ref())?;
    Ok(SizeReport {
        index_bytes,
        corpus_bytes,
        ratio: if corpus_bytes == 0 { f64::INFINITY } else { index_bytes as f64 / corpus_bytes as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub queries: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Decoder time per step with scorer time removed.
    pub per_step_us: f64,
    pub scorer_ms: f64,
    pub steps: usize,
    /// Text length of the index, separators included.
    pub corpus_tokens: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Times every query `repeats` times after one untimed warmup pass,
/// single-threaded.
pub fn bench_latency(queries: &[QueryRecord], c: Components<'_>, cfg: DecodeConfig, repeats: usize) -> Result<BenchReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    if repeats < 3 {
        return Err(EvalError::TooFewRepeats(repeats));
    }
    for q in queries {
        DecodeSession::new(&q.question, c.ix, c.corpus, c.vocab, c.scorer, cfg)?.run()?;
    }
    let mut lat = Vec::with_capacity(queries.len() * repeats);
    let (mut steps, mut decoder_s, mut scorer_s) = (0usize, 0.0, 0.0);
    for _ in 0..repeats {
        for q in queries {
            let t0 = Instant::now();
            let seq = DecodeSession::new(&q.question, c.ix, c.corpus, c.vocab, c.scorer, cfg)?.run()?;
            let dt = t0.elapsed().as_secs_f64();
            lat.push(dt * 1e3);
            steps += seq.steps;
            scorer_s += seq.scorer_us as f64 / 1e6;
            decoder_s += dt - seq.scorer_us as f64 / 1e6;
        }
    }
    let mean_ms = mean(lat.iter().copied());
    lat.sort_by(f64::total_cmp);
    Ok(BenchReport {
        queries: queries.len(),
        repeats,
        mean_ms,
        p50_ms: percentile(&lat, 0.5),
        p95_ms: percentile(&lat, 0.95),
        per_step_us: if steps == 0 { 0.0 } else { decoder_s.max(0.0) * 1e6 / steps as f64 },
        scorer_ms: scorer_s * 1e3 / lat.len() as f64,
        steps,
        corpus_tokens: c.ix.len(),
    })
}

/// Opens `spans` docid spans and picks uniformly among allowed tokens.
struct WalkScorer {
    spans: usize,
}

impl Scorer for WalkScorer {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        match req.mask {
            Some(mask) => ScoreResponse::uniform(mask),
            None => {
                let opened = req.generated().iter().filter(|&&t| t == START_ID).count();
                Ok(ScoreResponse::certain(if opened < self.spans { START_ID } else { SEPARATOR_ID }))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepBench {
    pub steps: usize,
    pub sessions: usize,
    pub mean_step_us: f64,
    pub corpus_tokens: usize,
}

/// Mean wall time per constrained decoding step, on the current thread.
///
/// Sessions use an in-process scorer that samples uniformly from the
/// allowed set, so the measured cost is the decoder and index work alone.
pub fn bench_constrained_steps(c: Components<'_>, min_steps: usize, seed: u64) -> Result<StepBench, EvalError> {
    let walker = WalkScorer { spans: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query = c
        .vocab
        .indexed_tokens()
        .first()
        .cloned()
        .unwrap_or_else(|| "query".to_string());
    let (mut steps, mut sessions) = (0usize, 0usize);
    let t0 = Instant::now();
    while steps < min_steps {
        let cfg = DecodeConfig {
            max_docids: 8,
            max_hops: 8,
            policy: Policy::Sample {
                seed: rng.gen(),
                temperature: 1.0,
            },
            ..DecodeConfig::default()
        };
        let seq = DecodeSession::new(&query, c.ix, c.corpus, c.vocab, &walker, cfg)?.run()?;
        steps += seq.steps;
        sessions += 1;
    }
    Ok(StepBench {
        steps,
        sessions,
        mean_step_us: t0.elapsed().as_secs_f64() * 1e6 / steps as f64,
        corpus_tokens: c.ix.len(),
    })
}
