use std::error::Error;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use thinkdex_core::corpus::{ngram_overlap, read_queries, Corpus, Document, QueryRecord};
use thinkdex_core::decoder::{retrieved_docs, DecodeConfig, DecodeSession, DecodedSequence, Policy, Span};
use thinkdex_core::eval::{bench_latency, index_size_report, run_eval, Components, EvalReport};
use thinkdex_core::fmindex::{self, FmIndex, IndexOptions, NextTokenStrategy};
use thinkdex_core::objectives::{
    examples_from_records, kto_loss, train_toy_policy, KtoConfig, KtoRecord, ToyConfig, ToyFixture, ValueFn,
};
use thinkdex_core::scorer::{LexicalConfig, LexicalScorer, OracleScorer, RemoteScorer, Scorer, DEFAULT_TIMEOUT_MS};
use thinkdex_core::tokenizer::{Vocabulary, WordTokenizer};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

/// Prefixes an error with the path it concerns.
fn at<T, E: std::fmt::Display>(path: &Path, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| format!("{}: {e}", path.display()).into())
}

const SCORER_URL_ENV: &str = "THINKDEX_SCORER_URL";

#[derive(Parser, Serialize)]
#[command(name = "thinkdex", version, about = "Triple-docid indexing, constrained decoding and retrieval evaluation")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[arg(long, global = true, value_enum, default_value_t = Format::Records)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    /// Tab-separated rows; the config header starts with '#'.
    Tsv,
    /// One JSON object per line.
    Records,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Builds an FM-index over the corpus docids.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = fmindex::DEFAULT_SA_RATE)]
        sa_rate: u32,
        /// Always enumerate next tokens through the wavelet matrix.
        #[arg(long)]
        wavelet: bool,
    },
    /// Decodes one query into interleaved thought and docid spans.
    Decode {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        query: String,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decodes every query and reports recall.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        queries: PathBuf,
        /// Per-query TSV report; rows go to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Times decoding on one thread.
    Bench {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// On-disk size of the index relative to the corpus.
    IndexSize {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Corpus analyses.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// KTO loss over a batch of graded samples.
    KtoLoss {
        /// One record per line: query_id, logp_policy, logp_ref, acc_r.
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, value_enum, default_value_t = ValueFnArg::Linear)]
        value_fn: ValueFnArg,
        #[arg(long, default_value_t = 1.0)]
        lambda_d: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_u: f64,
        /// Set lambda_u from the desirable/undesirable ratio.
        #[arg(long)]
        lambda_auto: bool,
    },
    /// Trains the table policy on the five-document fixture.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
    },
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "analysis", rename_all = "kebab-case")]
enum Analysis {
    /// Share of question n-grams found verbatim in the gold documents.
    Overlap {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// A single order or an inclusive range such as 4..12.
        #[arg(long, default_value = "4")]
        n: NRange,
    },
    /// How many docids are shared by several documents.
    Collisions {
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ValueFnArg {
    Linear,
    Logistic,
}

#[derive(Args, Serialize)]
struct Inputs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Serialize)]
struct ScorerArgs {
    /// oracle:<text>, oracle:@<file>, lexical, remote or remote:<url>.
    #[arg(long)]
    scorer: ScorerSpec,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    /// Docid spans the lexical scorer opens.
    #[arg(long, default_value_t = 1)]
    lexical_hops: usize,
}

#[derive(Args, Serialize)]
struct DecodeArgs {
    #[arg(long, default_value_t = 10)]
    max_docids: usize,
    #[arg(long, default_value_t = 5)]
    max_hops: usize,
    #[arg(long, default_value_t = 2048)]
    max_tokens: usize,
    /// Sample at this temperature, seeded by --seed; greedy when omitted.
    #[arg(long)]
    temperature: Option<f64>,
    /// Extra thought-mode token that ends the sequence.
    #[arg(long)]
    stop_token: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(into = "String")]
enum ScorerSpec {
    Oracle(String),
    OracleFile(PathBuf),
    Lexical,
    Remote(Option<String>),
}

impl FromStr for ScorerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(rest) = s.strip_prefix("oracle:") {
            return Ok(match rest.strip_prefix('@') {
                Some(path) => ScorerSpec::OracleFile(path.into()),
                None => ScorerSpec::Oracle(rest.to_string()),
            });
        }
        match s {
            "lexical" => Ok(ScorerSpec::Lexical),
            "remote" => Ok(ScorerSpec::Remote(None)),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(ScorerSpec::Remote(Some(url.to_string()))),
                _ => Err(format!("unknown scorer {s:?}; expected oracle:<text>, oracle:@<file>, lexical or remote[:<url>]")),
            },
        }
    }
}

impl From<ScorerSpec> for String {
    fn from(s: ScorerSpec) -> String {
        match s {
            ScorerSpec::Oracle(t) => format!("oracle:{t}"),
            ScorerSpec::OracleFile(p) => format!("oracle:@{}", p.display()),
            ScorerSpec::Lexical => "lexical".into(),
            ScorerSpec::Remote(None) => "remote".into(),
            ScorerSpec::Remote(Some(u)) => format!("remote:{u}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(into = "String")]
struct NRange {
    lo: usize,
    hi: usize,
}

impl FromStr for NRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("invalid n {s:?}"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
            None => (parse(s)?, parse(s)?),
        };
        if lo == 0 || lo > hi {
            return Err(format!("invalid n range {s:?}"));
        }
        Ok(NRange { lo, hi })
    }
}

impl From<NRange> for String {
    fn from(r: NRange) -> String {
        format!("{}..{}", r.lo, r.hi)
    }
}

/// Data sink: stdout only, in the chosen format.
struct Out {
    format: Format,
    w: BufWriter<io::StdoutLock<'static>>,
}

impl Out {
    fn header(&mut self, cli: &Cli) -> Result<()> {
        let cfg = serde_json::to_value(cli)?;
        match self.format {
            Format::Tsv => writeln!(self.w, "# config {cfg}")?,
            Format::Records => writeln!(self.w, "{}", json!({ "config": cfg }))?,
        }
        Ok(())
    }

    /// One record, or `key<TAB>value` lines in tsv mode.
    fn record(&mut self, v: &impl Serialize) -> Result<()> {
        let v = serde_json::to_value(v)?;
        match self.format {
            Format::Records => writeln!(self.w, "{v}")?,
            Format::Tsv => match v {
                Value::Object(map) => {
                    for (k, x) in map {
                        writeln!(self.w, "{k}\t{}", tsv_cell(&x))?;
                    }
                }
                other => writeln!(self.w, "{}", tsv_cell(&other))?,
            },
        }
        Ok(())
    }

    /// A table: column names once, then rows (records mode emits objects).
    fn table(&mut self, columns: &[&str], rows: &[Vec<Value>]) -> Result<()> {
        match self.format {
            Format::Tsv => {
                writeln!(self.w, "{}", columns.join("\t"))?;
                for r in rows {
                    let cells: Vec<String> = r.iter().map(tsv_cell).collect();
                    writeln!(self.w, "{}", cells.join("\t"))?;
                }
            }
            Format::Records => {
                for r in rows {
                    let obj: serde_json::Map<String, Value> =
                        columns.iter().map(|c| c.to_string()).zip(r.iter().cloned()).collect();
                    writeln!(self.w, "{}", Value::Object(obj))?;
                }
            }
        }
        Ok(())
    }
}

fn tsv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.replace(['\t', '\n'], " "),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

struct Loaded {
    ix: Arc<FmIndex>,
    corpus: Corpus,
    vocab: Arc<Vocabulary>,
    scorer: Box<dyn Scorer>,
}

fn load(inputs: &Inputs, spec: &ScorerArgs, texts: &[&str]) -> Result<Loaded> {
    let ix = Arc::new(at(&inputs.index, fmindex::deserialize(&inputs.index))?);
    let corpus = at(&inputs.corpus, Corpus::ingest(&inputs.corpus))?;
    let mut vocab = ix.vocabulary().ok_or("index was built without a vocabulary")?.clone();
    for t in texts {
        vocab.extend_with_text(t);
    }
    let script = match &spec.scorer {
        ScorerSpec::Oracle(t) => Some(t.clone()),
        ScorerSpec::OracleFile(p) => Some(at(p, std::fs::read_to_string(p))?),
        _ => None,
    };
    if let Some(s) = &script {
        vocab.extend_with_text(s);
    }
    let vocab = Arc::new(vocab);
    let scorer: Box<dyn Scorer> = match &spec.scorer {
        ScorerSpec::Oracle(_) | ScorerSpec::OracleFile(_) => {
            let s = script.expect("oracle specs carry a script");
            Box::new(OracleScorer::new(vocab.encode(&s).into_inner()))
        }
        ScorerSpec::Lexical => {
            let cfg = LexicalConfig { hops: spec.lexical_hops, ..Default::default() };
            Box::new(LexicalScorer::new(ix.clone(), vocab.clone(), cfg)?)
        }
        ScorerSpec::Remote(url) => {
            let url = match url {
                Some(u) => u.clone(),
                None => std::env::var(SCORER_URL_ENV)
                    .map_err(|_| format!("--scorer remote needs a URL or {SCORER_URL_ENV}"))?,
            };
            Box::new(RemoteScorer::with_timeout(url, spec.timeout_ms))
        }
    };
    log::info!(
        "loaded index: {} docids, {} text tokens; corpus: {} documents",
        ix.num_sequences(),
        ix.len(),
        corpus.len()
    );
    Ok(Loaded { ix, corpus, vocab, scorer })
}

fn decode_config(a: &DecodeArgs, seed: u64, vocab: &Vocabulary) -> Result<DecodeConfig> {
    let stop_token = match &a.stop_token {
        Some(t) => Some(vocab.id(t).ok_or_else(|| format!("stop token {t:?} is not in the vocabulary"))?),
        None => None,
    };
    let policy = match a.temperature {
        Some(temperature) => Policy::Sample { seed, temperature },
        None => Policy::Greedy,
    };
    let cfg = DecodeConfig {
        max_total_tokens: a.max_tokens,
        max_docids: a.max_docids,
        max_hops: a.max_hops,
        policy,
        stop_token,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Decoded output without timing fields, so reruns are byte-identical.
#[derive(Serialize)]
struct DecodeRecord<'a> {
    query: &'a str,
    spans: &'a [Span],
    tokens: &'a [u32],
    terminal: Option<u32>,
    truncation: Option<thinkdex_core::decoder::Truncation>,
    logprob: f64,
    steps: usize,
    retrieved: Vec<String>,
}

fn emit_decoded(out: &mut Out, query: &str, d: &DecodedSequence) -> Result<()> {
    let retrieved = retrieved_docs(d);
    match out.format {
        Format::Records => out.record(&DecodeRecord {
            query,
            spans: &d.spans,
            tokens: &d.tokens,
            terminal: d.terminal,
            truncation: d.truncation,
            logprob: d.logprob,
            steps: d.steps,
            retrieved,
        }),
        Format::Tsv => {
            let mut rows = Vec::new();
            for s in &d.spans {
                rows.push(match s {
                    Span::Thought { text, .. } => vec![json!("thought"), json!(text), Value::Null],
                    Span::Docid { docid, doc_ids, .. } => vec![json!("docid"), json!(docid), json!(doc_ids.join(","))],
                });
            }
            rows.push(vec![json!("retrieved"), Value::Null, json!(retrieved.join(","))]);
            out.table(&["kind", "text", "doc_ids"], &rows)
        }
    }
}

fn gold_docs<'a>(corpus: &'a Corpus, q: &QueryRecord) -> Vec<&'a Document> {
    q.gold_doc_ids.iter().filter_map(|id| corpus.document(id)).collect()
}

fn run(cli: &Cli, out: &mut Out) -> Result<()> {
    match &cli.command {
        Command::BuildIndex { corpus, out: path, sa_rate, wavelet } => {
            let c = at(corpus, Corpus::ingest(corpus))?;
            let vocab = Vocabulary::build(&c)?;
            let opts = IndexOptions {
                sa_rate: *sa_rate,
                strategy: if *wavelet { NextTokenStrategy::Wavelet } else { NextTokenStrategy::Auto },
                ..Default::default()
            };
            let ix = FmIndex::build(&c, &vocab, opts)?;
            let bytes = at(path, fmindex::serialize(&ix, path))?;
            out.record(&json!({
                "documents": c.len(),
                "docids": ix.num_sequences(),
                "text_tokens": ix.len(),
                "vocabulary": vocab.len(),
                "index_bytes": bytes,
            }))
        }
        Command::Decode { inputs, scorer, query, decode } => {
            let l = load(inputs, scorer, &[query])?;
            let cfg = decode_config(decode, cli.seed, &l.vocab)?;
            let d = DecodeSession::new(query, &l.ix, &l.corpus, &l.vocab, l.scorer.as_ref(), cfg)?.run()?;
            emit_decoded(out, query, &d)
        }
        Command::Eval { inputs, scorer, queries, out: report_path, decode } => {
            let qs = at(queries, read_queries(queries))?;
            let texts: Vec<&str> = qs.iter().map(|q| q.question.as_str()).collect();
            let l = load(inputs, scorer, &texts)?;
            let cfg = decode_config(decode, cli.seed, &l.vocab)?;
            let c = Components { ix: &l.ix, corpus: &l.corpus, vocab: &l.vocab, scorer: l.scorer.as_ref() };
            let report = run_eval(&qs, c, cfg, cli.threads)?;
            match report_path {
                Some(p) => {
                    let mut w = BufWriter::new(at(p, File::create(p))?);
                    report.write_tsv(&mut w)?;
                    w.flush()?;
                }
                None => emit_rows(out, &report)?,
            }
            out.record(&report.summary)
        }
        Command::Bench { inputs, scorer, queries, repeats, decode } => {
            let qs = at(queries, read_queries(queries))?;
            let texts: Vec<&str> = qs.iter().map(|q| q.question.as_str()).collect();
            let l = load(inputs, scorer, &texts)?;
            let cfg = decode_config(decode, cli.seed, &l.vocab)?;
            let c = Components { ix: &l.ix, corpus: &l.corpus, vocab: &l.vocab, scorer: l.scorer.as_ref() };
            out.record(&bench_latency(&qs, c, cfg, *repeats)?)
        }
        Command::IndexSize { index, corpus } => out.record(&index_size_report(index, corpus)?),
        Command::Analyze { what: Analysis::Collisions { corpus } } => {
            out.record(&at(corpus, Corpus::ingest(corpus))?.collision_stats()?)
        }
        Command::Analyze { what: Analysis::Overlap { corpus, queries, n } } => {
            let c = at(corpus, Corpus::ingest(corpus))?;
            let qs = at(queries, read_queries(queries))?;
            let mut rows = Vec::new();
            for order in n.lo..=n.hi {
                let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
                for q in &qs {
                    let docs = gold_docs(&c, q);
                    match ngram_overlap(&q.question, &docs, order, &WordTokenizer) {
                        Ok(x) if !docs.is_empty() => {
                            sum += x;
                            used += 1;
                        }
                        _ => skipped += 1,
                    }
                }
                let mean = if used == 0 { Value::Null } else { json!(sum / used as f64) };
                rows.push(vec![json!(order), mean, json!(used), json!(skipped)]);
            }
            out.table(&["n", "mean_overlap", "queries", "skipped"], &rows)
        }
        Command::KtoLoss { batch, beta, tau, value_fn, lambda_d, lambda_u, lambda_auto } => {
            let records = read_kto_records(batch)?;
            let cfg = KtoConfig {
                beta: *beta,
                tau: *tau,
                lambda_d: *lambda_d,
                lambda_u: *lambda_u,
                lambda_auto: *lambda_auto,
                value_fn: match value_fn {
                    ValueFnArg::Linear => ValueFn::Linear,
                    ValueFnArg::Logistic => ValueFn::Logistic,
                },
                ..Default::default()
            };
            cfg.validate()?;
            let (examples, discarded) = examples_from_records(&records, cfg.tau);
            let res = kto_loss(&examples, &cfg)?;
            let mut v = serde_json::to_value(&res)?;
            v["discarded"] = json!(discarded);
            out.record(&v)
        }
        Command::TrainToy { steps, lr, samples, beta } => {
            let cfg = ToyConfig {
                lr: *lr,
                samples_per_step: *samples,
                seed: cli.seed,
                kto: KtoConfig { beta: *beta, ..Default::default() },
                ..Default::default()
            };
            let report = train_toy_policy(&ToyFixture::standard(), *steps, &cfg)?;
            match out.format {
                Format::Records => out.record(&report),
                Format::Tsv => {
                    let rows: Vec<Vec<Value>> = report
                        .checkpoints
                        .iter()
                        .map(|c| vec![json!(c.step), json!(c.greedy_acc_r), json!(c.sample_acc_r), json!(c.loss)])
                        .collect();
                    out.table(&["step", "greedy_acc_r", "sample_acc_r", "loss"], &rows)?;
                    writeln!(out.w, "# solved_at {}", report.solved_at.map_or("none".into(), |s| s.to_string()))?;
                    Ok(())
                }
            }
        }
    }
}

fn emit_rows(out: &mut Out, report: &EvalReport) -> Result<()> {
    match out.format {
        Format::Tsv => report.write_tsv(&mut out.w)?,
        Format::Records => {
            for r in &report.rows {
                out.record(r)?;
            }
        }
    }
    Ok(())
}

fn read_kto_records(path: &Path) -> Result<Vec<KtoRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(at(path, File::open(path))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let stdout: &'static io::Stdout = Box::leak(Box::new(io::stdout()));
    let mut out = Out { format: cli.format, w: BufWriter::new(stdout.lock()) };
    let result = out.header(&cli).and_then(|_| run(&cli, &mut out));
    let flushed = out.w.flush();
    match result.and(flushed.map_err(Into::into)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
