//! Scene-level and text-level evaluation metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scene::{Scene, SceneGraph};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Match counts for one predicted/true scene pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub true_positive: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl Counts {
    pub fn of(predicted: &Scene, truth: &Scene) -> Self {
        let p = predicted.specs();
        let t = truth.specs();
        Self {
            true_positive: p.intersection(&t).count(),
            predicted: p.len(),
            actual: t.len(),
        }
    }

    pub fn prf(self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_positive, self.predicted);
        let recall = ratio(self.true_positive, self.actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            true_positive: self.true_positive + o.true_positive,
            predicted: self.predicted + o.predicted,
            actual: self.actual + o.actual,
        }
    }
}

/// Object-identity precision, recall and F1; positions are ignored.
pub fn f1(predicted: &Scene, truth: &Scene) -> Prf {
    Counts::of(predicted, truth).prf()
}

/// `recall * |E_pred ∩ E_gt| / |E_gt|`; equals `recall` when the truth has
/// no edges.
pub fn relsim(truth: &SceneGraph, predicted: &SceneGraph, recall: f64) -> f64 {
    if truth.edges.is_empty() {
        return recall;
    }
    let shared = truth.edges.intersection(&predicted.edges).count();
    recall * shared as f64 / truth.edges.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub id: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub relsim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub seed: u64,
    pub checkpoint: String,
    pub episodes: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of per-episode RelSim.
    pub relsim: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_episode: Vec<EpisodeScore>,
}

impl MetricsReport {
    /// Micro-averaged F1 and mean RelSim over `(id, predicted, truth)` final
    /// scenes.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (u64, &'a Scene, &'a Scene)>) -> Self {
        let mut total = Counts::default();
        let mut per_episode = Vec::new();
        for (id, pred, truth) in pairs {
            let c = Counts::of(pred, truth);
            total = total + c;
            let prf = c.prf();
            per_episode.push(EpisodeScore {
                id,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                relsim: relsim(&truth.scene_graph(), &pred.scene_graph(), prf.recall),
            });
        }
        let prf = total.prf();
        let n = per_episode.len();
        let relsim = if n == 0 {
            0.0
        } else {
            per_episode.iter().map(|e| e.relsim).sum::<f64>() / n as f64
        };
        Self {
            episodes: n,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            relsim,
            per_episode,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TextMetricError {
    #[error("empty corpus")]
    Empty,
    #[error("{hypotheses} hypotheses for {references} references")]
    Length { hypotheses: usize, references: usize },
}

fn ngrams<T: std::hash::Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with one reference per hypothesis and add-one smoothing
/// of every n-gram precision.
pub fn corpus_bleu<T: std::hash::Hash + Eq>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<f64, TextMetricError> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            matched[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let log_p: f64 = (0..4)
        .map(|i| ((matched[i] + 1) as f64 / (total[i] + 1) as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Share of reference positions where the hypothesis holds the same token.
pub fn token_accuracy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, TextMetricError> {
    check_lengths(hypotheses.len(), references.len())?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        n += r.len();
        hit += r.iter().zip(h).filter(|(a, b)| a == b).count();
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64, TextMetricError> {
    if tokens == 0 {
        return Err(TextMetricError::Empty);
    }
    Ok((total_nll / tokens as f64).exp())
}

fn check_lengths(h: usize, r: usize) -> Result<(), TextMetricError> {
    if h == 0 || r == 0 {
        return Err(TextMetricError::Empty);
    }
    if h != r {
        return Err(TextMetricError::Length {
            hypotheses: h,
            references: r,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQuality {
    pub ppl: f64,
    pub bleu: f64,
    pub token_accuracy: f64,
}

pub fn explainer_quality<T: std::hash::Hash + Eq>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    total_nll: f64,
    tokens: usize,
) -> Result<TextQuality, TextMetricError> {
    Ok(TextQuality {
        ppl: perplexity(total_nll, tokens)?,
        bleu: corpus_bleu(hypotheses, references)?,
        token_accuracy: token_accuracy(hypotheses, references)?,
    })
}
