//! Output metrics for patching experiments and their normalization against
//! clean/corrupt baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::PromptPair;
use crate::tensor::{log_softmax, softmax, Tensor};

/// Baseline gaps at or below this are treated as "metric does not separate
/// the prompts".
pub const DEGENERACY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LogitDiff,
    #[serde(rename = "logprob")]
    LogProb,
    Prob,
    Rank,
    #[serde(rename = "accuracy")]
    AccuracyTop1,
    Logit,
    #[serde(rename = "kl")]
    KlDiv,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::LogitDiff,
        MetricKind::LogProb,
        MetricKind::Prob,
        MetricKind::Rank,
        MetricKind::AccuracyTop1,
        MetricKind::Logit,
        MetricKind::KlDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::LogitDiff => "logit_diff",
            MetricKind::LogProb => "logprob",
            MetricKind::Prob => "prob",
            MetricKind::Rank => "rank",
            MetricKind::AccuracyTop1 => "accuracy",
            MetricKind::Logit => "logit",
            MetricKind::KlDiv => "kl",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "logit_diff" => MetricKind::LogitDiff,
            "logprob" | "log_prob" => MetricKind::LogProb,
            "prob" => MetricKind::Prob,
            "rank" => MetricKind::Rank,
            "accuracy" | "accuracy_top1" => MetricKind::AccuracyTop1,
            "logit" => MetricKind::Logit,
            "kl" | "kl_div" => MetricKind::KlDiv,
            other => {
                let valid: Vec<_> = MetricKind::ALL.iter().map(|k| k.name()).collect();
                return Err(Error::Input(format!(
                    "unknown metric {other:?}; valid: {}",
                    valid.join(", ")
                )));
            }
        };
        Ok(kind)
    }
}

fn check_id(logits: &[f64], id: usize) -> Result<()> {
    if id >= logits.len() {
        return Err(Error::Input(format!(
            "token id {id} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// `logit[answer] - mean(logit[foil])`.
pub fn logit_diff(logits: &[f64], answer: usize, foils: &[usize]) -> Result<f64> {
    if foils.is_empty() {
        return Err(Error::Input("logit_diff needs at least one foil".into()));
    }
    check_id(logits, answer)?;
    for &f in foils {
        check_id(logits, f)?;
    }
    let foil_mean = foils.iter().map(|&f| logits[f]).sum::<f64>() / foils.len() as f64;
    Ok(logits[answer] - foil_mean)
}

pub fn log_prob(logits: &[f64], answer: usize) -> Result<f64> {
    check_id(logits, answer)?;
    Ok(log_softmax(logits)?[answer])
}

pub fn prob(logits: &[f64], answer: usize) -> Result<f64> {
    check_id(logits, answer)?;
    Ok(softmax(logits)?[answer])
}

/// Number of tokens with a strictly larger logit; ties never hurt the answer.
pub fn rank(logits: &[f64], answer: usize) -> Result<usize> {
    check_id(logits, answer)?;
    let a = logits[answer];
    Ok(logits.iter().filter(|&&v| v > a).count())
}

pub fn accuracy_top1(logits: &[f64], answer: usize) -> Result<bool> {
    Ok(rank(logits, answer)? == 0)
}

/// Answer logit minus the mean logit over the vocabulary.
pub fn centered_logit(logits: &[f64], answer: usize) -> Result<f64> {
    check_id(logits, answer)?;
    let mean = logits.iter().sum::<f64>() / logits.len() as f64;
    Ok(logits[answer] - mean)
}

/// `KL(softmax(reference) || softmax(patched))`.
pub fn kl_div(reference: &[f64], patched: &[f64]) -> Result<f64> {
    if reference.len() != patched.len() {
        return Err(Error::Input(format!(
            "kl_div: reference has {} logits, patched has {}",
            reference.len(),
            patched.len()
        )));
    }
    let lp = log_softmax(reference)?;
    let lq = log_softmax(patched)?;
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum();
    // rounding can leave -1e-17 on shift-equivalent inputs
    Ok(kl.max(0.0))
}

/// `(patched - corrupt) / (clean - corrupt)`: 1 is fully clean behaviour,
/// 0 fully corrupt.
pub fn normalize_score(patched: f64, clean: f64, corrupt: f64) -> Result<f64> {
    let gap = clean - corrupt;
    if gap.abs() <= DEGENERACY_TOL {
        return Err(Error::Degenerate { clean, corrupt });
    }
    Ok((patched - corrupt) / gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub answer: usize,
    #[serde(default)]
    pub foils: Vec<usize>,
    #[serde(default)]
    pub reference_logits: Option<Vec<f64>>,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, answer: usize) -> Self {
        Self {
            kind,
            answer,
            foils: Vec::new(),
            reference_logits: None,
        }
    }

    /// A `MetricSpec` for `kind` on a prompt pair; `reference` is used only by KL.
    pub fn for_pair(kind: MetricKind, pair: &PromptPair, reference: Option<&[f64]>) -> Self {
        Self {
            kind,
            answer: pair.answer,
            foils: pair.foils.clone(),
            reference_logits: match kind {
                MetricKind::KlDiv => reference.map(<[f64]>::to_vec),
                _ => None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MetricKind::LogitDiff if self.foils.is_empty() => {
                Err(Error::Input("logit_diff needs at least one foil".into()))
            }
            MetricKind::KlDiv if self.reference_logits.is_none() => {
                Err(Error::Input("kl needs reference logits".into()))
            }
            _ => Ok(()),
        }
    }

    /// Raw metric value on one row of logits.
    pub fn compute(&self, logits: &[f64]) -> Result<f64> {
        self.validate()?;
        match self.kind {
            MetricKind::LogitDiff => logit_diff(logits, self.answer, &self.foils),
            MetricKind::LogProb => log_prob(logits, self.answer),
            MetricKind::Prob => prob(logits, self.answer),
            MetricKind::Rank => rank(logits, self.answer).map(|r| r as f64),
            MetricKind::AccuracyTop1 => {
                accuracy_top1(logits, self.answer).map(|ok| if ok { 1.0 } else { 0.0 })
            }
            MetricKind::Logit => centered_logit(logits, self.answer),
            MetricKind::KlDiv => kl_div(self.reference_logits.as_deref().unwrap_or_default(), logits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricResult {
    pub kind: MetricKind,
    pub raw: f64,
    /// Present iff baselines are present and separated by more than
    /// [`DEGENERACY_TOL`].
    pub normalized: Option<f64>,
    /// `(clean, corrupt)` metric values.
    pub baselines: Option<(f64, f64)>,
    /// Per-answer log-probabilities, for checking whether a logit-difference
    /// change comes from the answer or from damaging the foils.
    pub answer_logprob: f64,
    pub foil_logprobs: Vec<f64>,
}

impl MetricResult {
    pub fn is_degenerate(&self) -> bool {
        self.baselines.is_some() && self.normalized.is_none()
    }
}

/// Full `[seq, vocab]` logits of the unpatched clean and corrupt runs.
#[derive(Debug, Clone)]
pub struct BaselineLogits {
    pub clean: Tensor,
    pub corrupt: Tensor,
}

fn row_at(logits: &Tensor, pos: usize) -> Result<&[f64]> {
    if logits.shape().len() != 2 || pos >= logits.rows() {
        return Err(Error::Input(format!(
            "logits of shape {:?} have no position {pos}",
            logits.shape()
        )));
    }
    Ok(logits.row(pos))
}

/// Computes every metric at the pair's evaluation position.
pub fn evaluate_all(
    logits: &Tensor,
    pair: &PromptPair,
    specs: &[MetricSpec],
    baselines: Option<&BaselineLogits>,
) -> Result<Vec<MetricResult>> {
    let pos = pair.eval_pos();
    let row = row_at(logits, pos)?;
    let lp = log_softmax(row)?;
    let lookup = |id: usize| -> Result<f64> {
        lp.get(id)
            .copied()
            .ok_or_else(|| Error::Input(format!("token id {id} out of range")))
    };
    let answer_logprob = lookup(pair.answer)?;
    let foil_logprobs = pair.foils.iter().map(|&f| lookup(f)).collect::<Result<Vec<_>>>()?;
    let base_rows = match baselines {
        Some(b) => Some((row_at(&b.clean, pos)?, row_at(&b.corrupt, pos)?)),
        None => None,
    };

    specs
        .iter()
        .map(|spec| {
            let labeled = |e: Error| Error::Metric {
                metric: spec.kind.name().to_string(),
                source: Box::new(e),
            };
            let raw = spec.compute(row).map_err(labeled)?;
            let (normalized, baselines) = match base_rows {
                Some((clean, corrupt)) => {
                    let c = spec.compute(clean).map_err(labeled)?;
                    let k = spec.compute(corrupt).map_err(labeled)?;
                    (normalize_score(raw, c, k).ok(), Some((c, k)))
                }
                None => (None, None),
            };
            Ok(MetricResult {
                kind: spec.kind,
                raw,
                normalized,
                baselines,
                answer_logprob,
                foil_logprobs: foil_logprobs.clone(),
            })
        })
        .collect()
}
