//! A table-lookup policy trained with the KTO loss on decoder samples.
//!
//! Logits are free parameters keyed by (prompt, decoding context). The
//! decoding context is the open docid prefix in docid mode, and the number
//! of closed docid spans plus the current thought length (capped at 2) in
//! thought mode. Thought mode may only end the sequence, open a docid span,
//! or emit one filler word.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{acc_r, kto_loss, KtoConfig, KtoExample, ObjectiveError};
use crate::corpus::{Corpus, Document, QueryRecord, Triple};
use crate::decoder::{retrieved_docs, DecodeConfig, DecodeSession, DecodedSequence, Policy};
use crate::fmindex::{FmIndex, IndexOptions, SearchState};
use crate::scorer::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use crate::tokenizer::{TokenId, Vocabulary, END_ID, SEPARATOR_ID, START_ID};

const FILLER: &str = "hmm";

pub struct ToyFixture {
    pub corpus: Corpus,
    pub queries: Vec<QueryRecord>,
}

impl ToyFixture {
    /// Five single-triple documents and two single-gold queries.
    pub fn standard() -> Self {
        let doc = |id: &str, h: &str, r: &str, t: &str| Document {
            doc_id: id.into(),
            title: String::new(),
            text: format!("{h} {r} {t}."),
            triples: vec![Triple::new(h, r, t).expect("fixture fields are nonempty")],
        };
        let corpus = Corpus::from_documents(vec![
            doc("alice_birth", "Alice", "born in", "Paris"),
            doc("alice_work", "Alice", "works at", "Acme"),
            doc("bob_birth", "Bob", "born in", "Rome"),
            doc("bob_spouse", "Bob", "married to", "Alice"),
            doc("carol_home", "Carol", "lives in", "Paris"),
        ])
        .expect("fixture doc ids are unique");
        let q = |id: &str, question: &str, gold: &str| QueryRecord {
            query_id: id.into(),
            question: question.into(),
            gold_doc_ids: vec![gold.into()],
        };
        Self {
            corpus,
            queries: vec![
                q("q1", "where was alice born", "alice_birth"),
                q("q2", "who is bob married to", "bob_spouse"),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyConfig {
    pub lr: f64,
    pub samples_per_step: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub max_docids: usize,
    pub max_total_tokens: usize,
    pub kto: KtoConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            samples_per_step: 16,
            checkpoint_every: 10,
            seed: 0,
            max_docids: 2,
            max_total_tokens: 24,
            kto: KtoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyCheckpoint {
    pub step: usize,
    pub greedy_acc_r: f64,
    /// Mean accuracy of the step's samples; `None` before training.
    pub sample_acc_r: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub checkpoints: Vec<ToyCheckpoint>,
    pub losses: Vec<f64>,
    pub initial_greedy_acc_r: f64,
    pub final_greedy_acc_r: f64,
    /// First step after which greedy decoding retrieves every gold document.
    pub solved_at: Option<usize>,
    /// Whether greedy accuracy never decreased between checkpoints.
    pub monotone: bool,
    pub param_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    Thought { docids: usize, run: usize },
    Docid(Vec<TokenId>),
}

#[derive(Default)]
struct TablePolicy {
    theta: BTreeMap<(Vec<TokenId>, Key), BTreeMap<TokenId, f64>>,
    thought_support: Vec<TokenId>,
}

impl TablePolicy {
    fn key(generated: &[TokenId], constrained: bool) -> Key {
        if constrained {
            let start = generated.iter().rposition(|&t| t == START_ID).unwrap_or(0);
            return Key::Docid(generated[start..].to_vec());
        }
        let docids = generated.iter().filter(|&&t| t == END_ID).count();
        let since = generated.iter().rposition(|&t| t == END_ID).map_or(0, |i| i + 1);
        Key::Thought {
            docids,
            run: (generated.len() - since).min(2),
        }
    }

    fn distribution(&self, prompt: &[TokenId], key: Key, support: &[TokenId]) -> Result<ScoreResponse, ScorerError> {
        let row = self.theta.get(&(prompt.to_vec(), key));
        ScoreResponse::from_logits(
            support
                .iter()
                .map(|&t| (t, row.and_then(|r| r.get(&t)).copied().unwrap_or(0.0))),
        )
    }
}

impl Scorer for TablePolicy {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        let key = Self::key(req.generated(), req.mask.is_some());
        let support = req.mask.unwrap_or(&self.thought_support);
        self.distribution(req.prompt(), key, support)
    }
}

struct Choice {
    prompt: Vec<TokenId>,
    key: Key,
    support: Vec<TokenId>,
    chosen: TokenId,
}

/// Re-derives every decision of `seq` as if decoded under `prompt`.
fn trajectory(ix: &FmIndex, policy: &TablePolicy, prompt: &[TokenId], seq: &DecodedSequence) -> Vec<Choice> {
    let mut generated: Vec<TokenId> = Vec::new();
    let mut state: Option<SearchState> = None;
    let mut out = Vec::new();
    for &tok in seq.tokens.iter().chain(seq.terminal.iter()) {
        let support = match state {
            Some(st) => ix.allowed_next(st).expect("replayed state is nonempty"),
            None => policy.thought_support.clone(),
        };
        out.push(Choice {
            prompt: prompt.to_vec(),
            key: TablePolicy::key(&generated, state.is_some()),
            support,
            chosen: tok,
        });
        state = match state {
            Some(st) => ix.extend(st, tok).filter(|s| !ix.is_complete(*s)),
            None if tok == START_ID => ix.extend(ix.root_state(), START_ID),
            None => None,
        };
        generated.push(tok);
    }
    out
}

fn log_prob(policy: &TablePolicy, traj: &[Choice]) -> f64 {
    traj.iter()
        .map(|c| {
            policy
                .distribution(&c.prompt, c.key.clone(), &c.support)
                .ok()
                .and_then(|d| d.get(c.chosen))
                .unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

struct Toy<'a> {
    fixture: &'a ToyFixture,
    ix: FmIndex,
    vocab: Vocabulary,
    cfg: ToyConfig,
}

impl Toy<'_> {
    fn decode(&self, policy: &TablePolicy, query: &QueryRecord, decode_policy: Policy) -> Result<DecodedSequence, ObjectiveError> {
        let cfg = DecodeConfig {
            max_total_tokens: self.cfg.max_total_tokens,
            max_docids: self.cfg.max_docids,
            max_hops: self.cfg.max_docids,
            policy: decode_policy,
            stop_token: None,
        };
        DecodeSession::new(&query.question, &self.ix, &self.fixture.corpus, &self.vocab, policy, cfg)
            .and_then(DecodeSession::run)
            .map_err(|e| ObjectiveError::Decode(e.to_string()))
    }

    fn accuracy(&self, seq: &DecodedSequence, q: &QueryRecord) -> Result<f64, ObjectiveError> {
        acc_r(&retrieved_docs(seq), &q.gold_doc_ids)
    }

    fn greedy_acc(&self, policy: &TablePolicy) -> Result<f64, ObjectiveError> {
        let mut total = 0.0;
        for q in &self.fixture.queries {
            total += self.accuracy(&self.decode(policy, q, Policy::Greedy)?, q)?;
        }
        Ok(total / self.fixture.queries.len() as f64)
    }
}

/// Trains the table policy for `steps` updates.
///
/// Every step redraws the same sample seeds, so with a zero learning rate
/// the samples, and therefore the loss, never change.
pub fn train_toy_policy(fixture: &ToyFixture, steps: usize, cfg: &ToyConfig) -> Result<ToyReport, ObjectiveError> {
    cfg.kto.validate()?;
    if fixture.queries.is_empty() || cfg.samples_per_step < 2 {
        return Err(ObjectiveError::InvalidConfig("need queries and at least two samples per step"));
    }
    let mut vocab = Vocabulary::build(&fixture.corpus).map_err(|e| ObjectiveError::Decode(e.to_string()))?;
    let ix = FmIndex::build(&fixture.corpus, &vocab, IndexOptions::default())
        .map_err(|e| ObjectiveError::Decode(e.to_string()))?;
    vocab.extend_with_text(FILLER);
    for q in &fixture.queries {
        vocab.extend_with_text(&q.question);
    }
    let filler = vocab.id(FILLER).expect("filler was just added");
    let mut thought_support = vec![SEPARATOR_ID, START_ID, filler];
    thought_support.sort_unstable();
    let toy = Toy {
        fixture,
        ix,
        vocab,
        cfg: *cfg,
    };
    let reference = TablePolicy {
        theta: BTreeMap::new(),
        thought_support: thought_support.clone(),
    };
    let mut policy = TablePolicy {
        theta: BTreeMap::new(),
        thought_support,
    };
    let prompts: Vec<Vec<TokenId>> = fixture
        .queries
        .iter()
        .map(|q| toy.vocab.encode(&q.question).into_inner())
        .collect();

    let initial = toy.greedy_acc(&policy)?;
    let mut report = ToyReport {
        checkpoints: vec![ToyCheckpoint {
            step: 0,
            greedy_acc_r: initial,
            sample_acc_r: None,
            loss: None,
        }],
        losses: Vec::with_capacity(steps),
        initial_greedy_acc_r: initial,
        final_greedy_acc_r: initial,
        solved_at: (initial == 1.0).then_some(0),
        monotone: true,
        param_norm: 0.0,
    };

    for step in 1..=steps {
        let n = cfg.samples_per_step;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let qi = i % fixture.queries.len();
            let q = &fixture.queries[qi];
            let seq = toy.decode(
                &policy,
                q,
                Policy::Sample {
                    seed: cfg.seed.wrapping_add(i as u64),
                    temperature: 1.0,
                },
            )?;
            let acc = toy.accuracy(&seq, q)?;
            samples.push((qi, seq, acc));
        }

        let mut examples = Vec::new();
        let mut trajectories = Vec::new();
        for (i, (qi, seq, acc)) in samples.iter().enumerate() {
            let traj = trajectory(&toy.ix, &policy, &prompts[*qi], seq);
            let (_, nseq, _) = &samples[(i + 1) % n];
            let rotated = trajectory(&toy.ix, &policy, &prompts[*qi], nseq);
            let Some(e) = KtoExample::from_graded(
                fixture.queries[*qi].query_id.clone(),
                log_prob(&policy, &traj),
                log_prob(&reference, &traj),
                *acc,
                cfg.kto.tau,
            ) else {
                continue;
            };
            examples.push(e.with_mismatched(log_prob(&policy, &rotated), log_prob(&reference, &rotated)));
            trajectories.push(traj);
        }

        let sample_acc = samples.iter().map(|s| s.2).sum::<f64>() / n as f64;
        let loss = if examples.len() >= 2 {
            let res = kto_loss(&examples, &cfg.kto)?;
            if !res.loss.is_finite() || res.gradients.iter().any(|g| !g.is_finite()) {
                return Err(ObjectiveError::DivergenceDetected(step));
            }
            let mut delta: BTreeMap<(Vec<TokenId>, Key), BTreeMap<TokenId, f64>> = BTreeMap::new();
            for (traj, &g) in trajectories.iter().zip(&res.gradients) {
                for c in traj {
                    let dist = policy
                        .distribution(&c.prompt, c.key.clone(), &c.support)
                        .map_err(|e| ObjectiveError::Decode(e.to_string()))?;
                    let row = delta.entry((c.prompt.clone(), c.key.clone())).or_default();
                    for (t, lp) in dist.iter() {
                        let d = (t == c.chosen) as u8 as f64 - lp.exp();
                        *row.entry(t).or_insert(0.0) += g * d;
                    }
                }
            }
            for (k, grads) in delta {
                let row = policy.theta.entry(k).or_default();
                for (t, g) in grads {
                    *row.entry(t).or_insert(0.0) -= cfg.lr * g;
                }
            }
            res.loss
        } else {
            0.0
        };
        report.losses.push(loss);

        if step % cfg.checkpoint_every.max(1) == 0 || step == steps {
            let acc = toy.greedy_acc(&policy)?;
            let prev = report.checkpoints.last().map_or(acc, |c| c.greedy_acc_r);
            report.monotone &= acc >= prev;
            report.checkpoints.push(ToyCheckpoint {
                step,
                greedy_acc_r: acc,
                sample_acc_r: Some(sample_acc),
                loss: Some(loss),
            });
            if acc == 1.0 && report.solved_at.is_none() {
                report.solved_at = Some(step);
            }
            report.final_greedy_acc_r = acc;
        }
    }
    report.param_norm = policy
        .theta
        .values()
        .flat_map(|r| r.values())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    Ok(report)
}
