//! Training objectives over caller-supplied log-probabilities: sequence
//! negative log-likelihood, retrieval accuracy, accuracy-based labeling, and
//! the prospect-theoretic (KTO) loss with analytic gradients.

mod toy;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::decoder::{retrieved_docs, DecodedSequence};

pub use toy::{train_toy_policy, ToyCheckpoint, ToyConfig, ToyFixture, ToyReport};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("example {0} has no tokens")]
    EmptyExample(usize),
    #[error("example {example} has positive log-probability {value}")]
    PositiveLogProb { example: usize, value: f64 },
    #[error("gold set is empty")]
    EmptyGold,
    #[error("batch of {0} is too small to estimate the reference point")]
    BatchTooSmall(usize),
    #[error("batch has no labeled examples")]
    NoLabeledExamples,
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("loss diverged at step {0}")]
    DivergenceDetected(usize),
    #[error("toy decoding failed: {0}")]
    Decode(String),
}

/// Mean over examples of the summed token negative log-likelihood.
pub fn sft_nll(batch: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.is_empty() {
            return Err(ObjectiveError::EmptyExample(i));
        }
        if let Some(&value) = ex.iter().find(|&&x| x > 0.0 || x.is_nan()) {
            return Err(ObjectiveError::PositiveLogProb { example: i, value });
        }
        total -= ex.iter().sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of gold documents present in `predicted`; both sides are sets.
pub fn acc_r<P: AsRef<str>, G: AsRef<str>>(predicted: &[P], gold: &[G]) -> Result<f64, ObjectiveError> {
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    if gold.is_empty() {
        return Err(ObjectiveError::EmptyGold);
    }
    let pred: HashSet<&str> = predicted.iter().map(AsRef::as_ref).collect();
    Ok(gold.intersection(&pred).count() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Desirable,
    Undesirable,
}

/// Desirable iff `acc == 1`, undesirable iff `acc < tau`, otherwise `None`.
pub fn label(acc: f64, tau: f64) -> Option<Label> {
    if acc == 1.0 {
        Some(Label::Desirable)
    } else if acc < tau {
        Some(Label::Undesirable)
    } else {
        None
    }
}

/// Indices into the partitioned input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub desirable: Vec<usize>,
    pub undesirable: Vec<usize>,
    pub discarded: Vec<usize>,
}

/// Labels precomputed accuracies.
pub fn partition_scores(acc: &[f64], tau: f64) -> Partition {
    let mut p = Partition::default();
    for (i, &a) in acc.iter().enumerate() {
        match label(a, tau) {
            Some(Label::Desirable) => p.desirable.push(i),
            Some(Label::Undesirable) => p.undesirable.push(i),
            None => p.discarded.push(i),
        }
    }
    p
}

/// Labels decoded samples by the accuracy of their retrieved documents.
pub fn partition(samples: &[(DecodedSequence, Vec<String>)], cfg: &KtoConfig) -> Result<Partition, ObjectiveError> {
    let acc = samples
        .iter()
        .map(|(seq, gold)| acc_r(&retrieved_docs(seq), gold))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(partition_scores(&acc, cfg.tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueFn {
    /// Identity squashing, the literal form of the loss.
    #[default]
    Linear,
    Logistic,
}

impl ValueFn {
    fn g(self, x: f64) -> f64 {
        match self {
            ValueFn::Linear => x,
            ValueFn::Logistic => 1.0 / (1.0 + (-x).exp()),
        }
    }

    fn dg(self, x: f64) -> f64 {
        match self {
            ValueFn::Linear => 1.0,
            ValueFn::Logistic => {
                let s = self.g(x);
                s * (1.0 - s)
            }
        }
    }
}

/// How the batch reference point is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    /// Mean log-ratio of rotated (mismatched) pairs when every example
    /// carries them, otherwise the mean matched log-ratio.
    #[default]
    Rotation,
    /// Mean matched log-ratio.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KtoConfig {
    pub beta: f64,
    pub tau: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
    /// Replace the lambdas with `1` and `n_desirable / n_undesirable`.
    pub lambda_auto: bool,
    pub value_fn: ValueFn,
    pub mismatch: MismatchPolicy,
}

impl Default for KtoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            tau: 0.5,
            lambda_d: 1.0,
            lambda_u: 1.0,
            lambda_auto: false,
            value_fn: ValueFn::Linear,
            mismatch: MismatchPolicy::Rotation,
        }
    }
}

impl KtoConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::InvalidConfig("beta must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ObjectiveError::InvalidConfig("tau must lie in (0, 1]"));
        }
        if !(self.lambda_d > 0.0 && self.lambda_u > 0.0) {
            return Err(ObjectiveError::InvalidConfig("lambdas must be positive"));
        }
        Ok(())
    }
}

/// One graded sample. Labels come only from `from_graded`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KtoExample {
    pub query_id: String,
    /// Sequence log-probability under the policy.
    pub logp_policy: f64,
    /// Sequence log-probability under the reference model.
    pub logp_ref: f64,
    /// Log-probabilities of the next example's sequence under this example's
    /// query (batch rotation), for the mismatched-pair reference point.
    pub kl_logp_policy: Option<f64>,
    pub kl_logp_ref: Option<f64>,
    label: Label,
}

impl KtoExample {
    /// Labels by accuracy; `None` for the discarded band `[tau, 1)`.
    pub fn from_graded(query_id: impl Into<String>, logp_policy: f64, logp_ref: f64, acc: f64, tau: f64) -> Option<Self> {
        label(acc, tau).map(|label| Self {
            query_id: query_id.into(),
            logp_policy,
            logp_ref,
            kl_logp_policy: None,
            kl_logp_ref: None,
            label,
        })
    }

    pub fn with_mismatched(mut self, kl_logp_policy: f64, kl_logp_ref: f64) -> Self {
        self.kl_logp_policy = Some(kl_logp_policy);
        self.kl_logp_ref = Some(kl_logp_ref);
        self
    }

    pub fn label(&self) -> Label {
        self.label
    }

    /// Policy/reference log-ratio.
    pub fn reward(&self) -> f64 {
        self.logp_policy - self.logp_ref
    }
}

/// Batch reference point, clamped at zero.
pub fn estimate_z0(batch: &[KtoExample], policy: MismatchPolicy) -> Result<f64, ObjectiveError> {
    if batch.len() < 2 {
        return Err(ObjectiveError::BatchTooSmall(batch.len()));
    }
    let rotated: Option<Vec<f64>> = batch
        .iter()
        .map(|e| Some(e.kl_logp_policy? - e.kl_logp_ref?))
        .collect();
    let values = match (policy, rotated) {
        (MismatchPolicy::Rotation, Some(v)) => v,
        _ => batch.iter().map(KtoExample::reward).collect(),
    };
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(mean.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KtoBatchResult {
    pub loss: f64,
    pub z0: f64,
    pub per_example_v: Vec<f64>,
    /// d loss / d logp_policy, with z0 held fixed.
    pub gradients: Vec<f64>,
    pub n_desirable: usize,
    pub n_undesirable: usize,
    pub lambda_d: f64,
    pub lambda_u: f64,
}

pub fn kto_loss(batch: &[KtoExample], cfg: &KtoConfig) -> Result<KtoBatchResult, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::NoLabeledExamples);
    }
    let z0 = estimate_z0(batch, cfg.mismatch)?;
    kto_loss_with_z0(batch, cfg, z0)
}

/// The loss at a caller-chosen reference point.
pub fn kto_loss_with_z0(batch: &[KtoExample], cfg: &KtoConfig, z0: f64) -> Result<KtoBatchResult, ObjectiveError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::NoLabeledExamples);
    }
    let n_d = batch.iter().filter(|e| e.label == Label::Desirable).count();
    let n_u = batch.len() - n_d;
    let (lambda_d, lambda_u) = if cfg.lambda_auto && n_d > 0 && n_u > 0 {
        (1.0, n_d as f64 / n_u as f64)
    } else {
        (cfg.lambda_d, cfg.lambda_u)
    };
    let g = cfg.value_fn;
    let beta = cfg.beta;
    let mut loss = 0.0;
    let mut per_example_v = Vec::with_capacity(batch.len());
    let mut gradients = Vec::with_capacity(batch.len());
    for e in batch {
        let r = e.reward();
        let (v, grad) = match e.label {
            Label::Desirable => {
                let x = beta * (r - z0);
                let w = 1.0 / n_d as f64;
                loss += w * (lambda_d - lambda_d * g.g(x));
                (lambda_d * g.g(x), -w * lambda_d * beta * g.dg(x))
            }
            Label::Undesirable => {
                let x = beta * (z0 - r);
                let w = 1.0 / n_u as f64;
                loss += w * (lambda_u - lambda_u * g.g(x));
                (lambda_u * g.g(x), w * lambda_u * beta * g.dg(x))
            }
        };
        per_example_v.push(v);
        gradients.push(grad);
    }
    Ok(KtoBatchResult {
        loss,
        z0,
        per_example_v,
        gradients,
        n_desirable: n_d,
        n_undesirable: n_u,
        lambda_d,
        lambda_u,
    })
}

/// One record of the batch file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KtoRecord {
    pub query_id: String,
    pub logp_policy: f64,
    pub logp_ref: f64,
    pub acc_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_logp_policy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_logp_ref: Option<f64>,
}

/// Grades records into examples; the second value counts discarded records.
pub fn examples_from_records(records: &[KtoRecord], tau: f64) -> (Vec<KtoExample>, usize) {
    let mut out = Vec::with_capacity(records.len());
    let mut discarded = 0;
    for r in records {
        match KtoExample::from_graded(r.query_id.clone(), r.logp_policy, r.logp_ref, r.acc_r, tau) {
            Some(mut e) => {
                e.kl_logp_policy = r.kl_logp_policy;
                e.kl_logp_ref = r.kl_logp_ref;
                out.push(e);
            }
            None => discarded += 1,
        }
    }
    (out, discarded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(lp: f64, lr: f64, acc: f64) -> KtoExample {
        KtoExample::from_graded("q", lp, lr, acc, 0.5).unwrap()
    }

    #[test]
    fn sft_closed_forms() {
        assert_eq!(sft_nll(&[vec![0.0, 0.0]]).unwrap(), 0.0);
        let half = 0.5f64.ln();
        assert!((sft_nll(&[vec![half, half]]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(sft_nll(&[]), Err(ObjectiveError::EmptyBatch));
        assert_eq!(sft_nll(&[vec![]]), Err(ObjectiveError::EmptyExample(0)));
        assert!(matches!(sft_nll(&[vec![0.1]]), Err(ObjectiveError::PositiveLogProb { .. })));
    }

    #[test]
    fn acc_r_examples() {
        assert_eq!(acc_r(&["d1", "d2"], &["d1", "d2"]).unwrap(), 1.0);
        assert_eq!(acc_r(&["d3"], &["d1", "d2"]).unwrap(), 0.0);
        assert_eq!(acc_r(&["d1", "d3"], &["d1", "d2"]).unwrap(), 0.5);
        assert_eq!(acc_r::<&str, &str>(&["d1"], &[]), Err(ObjectiveError::EmptyGold));
    }

    #[test]
    fn labels_use_strict_threshold() {
        assert_eq!(label(1.0, 0.5), Some(Label::Desirable));
        assert_eq!(label(0.5, 0.5), None);
        assert_eq!(label(0.49, 0.5), Some(Label::Undesirable));
        assert_eq!(label(0.75, 0.5), None);
        assert!(KtoExample::from_graded("q", 0.0, 0.0, 0.5, 0.5).is_none());
    }

    #[test]
    fn z0_estimates() {
        let same = vec![ex(-1.0, -1.0, 1.0), ex(-2.0, -2.0, 0.0)];
        assert_eq!(estimate_z0(&same, MismatchPolicy::Rotation).unwrap(), 0.0);
        let planted: Vec<KtoExample> = [0.2, 0.4, -0.1, 0.3]
            .iter()
            .map(|&r| ex(-1.0, -1.0, 1.0).with_mismatched(-3.0 + r, -3.0))
            .collect();
        assert!((estimate_z0(&planted, MismatchPolicy::Rotation).unwrap() - 0.2).abs() < 1e-12);
        let negative: Vec<KtoExample> = (0..3).map(|_| ex(-1.0, -1.0, 1.0).with_mismatched(-2.0, -1.0)).collect();
        assert_eq!(estimate_z0(&negative, MismatchPolicy::Rotation).unwrap(), 0.0);
        assert_eq!(estimate_z0(&same[..1], MismatchPolicy::Rotation), Err(ObjectiveError::BatchTooSmall(1)));
    }

    #[test]
    fn closed_form_losses() {
        let cfg = KtoConfig::default();
        let origin = vec![ex(-1.0, -1.0, 1.0), ex(-1.0, -1.0, 0.0)];
        let r = kto_loss(&origin, &cfg).unwrap();
        assert_eq!(r.loss, 2.0);
        assert_eq!(r.per_example_v, vec![0.0, 0.0]);
        let single = vec![ex(0.0, -1.0, 1.0)];
        let r = kto_loss_with_z0(&single, &cfg, 0.0).unwrap();
        assert!((r.per_example_v[0] - 0.1).abs() < 1e-12);
        assert!((r.loss - 0.9).abs() < 1e-12);
    }

    #[test]
    fn lambda_auto_balances_counts() {
        let cfg = KtoConfig { lambda_auto: true, ..Default::default() };
        let b = vec![ex(0.0, 0.0, 1.0), ex(0.0, 0.0, 1.0), ex(0.0, 0.0, 1.0), ex(0.0, 0.0, 0.0)];
        let r = kto_loss_with_z0(&b, &cfg, 0.0).unwrap();
        assert_eq!((r.lambda_d, r.lambda_u), (1.0, 3.0));
    }
}
