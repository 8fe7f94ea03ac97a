use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::search::rank;
use super::Hypothesis;
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMethod {
    #[default]
    None,
    LengthNorm,
    BpNorm,
    Sbwr,
}

impl FromStr for RerankMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => RerankMethod::None,
            "length_norm" => RerankMethod::LengthNorm,
            "bp_norm" => RerankMethod::BpNorm,
            "sbwr" => RerankMethod::Sbwr,
            _ => {
                return Err(Error::Config(format!(
                    "unknown reranker {s:?} (none, length_norm, bp_norm, sbwr)"
                )))
            }
        })
    }
}

impl fmt::Display for RerankMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RerankMethod::None => "none",
            RerankMethod::LengthNorm => "length_norm",
            RerankMethod::BpNorm => "bp_norm",
            RerankMethod::Sbwr => "sbwr",
        })
    }
}

/// How the copy rate is scaled by `c` before entering the brevity penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyScaling {
    /// `r = copy / c`
    #[default]
    Divide,
    /// `r = copy * c`
    Multiply,
    /// `r = copy ^ c`
    Power,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub method: RerankMethod,
    pub c: f64,
    pub scaling: CopyScaling,
    pub r_sbwr: f64,
    /// Words added to the greedy length to get the SBWR target length.
    pub length_offset: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            method: RerankMethod::None,
            c: 0.55,
            scaling: CopyScaling::Divide,
            r_sbwr: 0.25,
            length_offset: 3.0,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c = {} must be positive", self.c)));
        }
        if !(self.r_sbwr >= 0.0 && self.r_sbwr.is_finite()) {
            return Err(Error::Config(format!(
                "r_sbwr = {} must be non-negative",
                self.r_sbwr
            )));
        }
        Ok(())
    }

    pub fn scaled_copy_rate(&self, copy_rate: f64) -> f64 {
        match self.scaling {
            CopyScaling::Divide => copy_rate / self.c,
            CopyScaling::Multiply => copy_rate * self.c,
            CopyScaling::Power => copy_rate.powf(self.c),
        }
    }
}

/// `min(e^{1 - 1/r}, 1)`; zero when `r` is zero.
pub fn brevity_penalty(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / r).exp().min(1.0)
    }
}

pub fn length_norm(score: f64, len: usize) -> f64 {
    score / len as f64
}

/// `log bp + S / |y|`, with `r` the already scaled copy rate.
pub fn bp_norm(score: f64, len: usize, r: f64) -> f64 {
    brevity_penalty(r).ln() + length_norm(score, len)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `r · Σ_{i=1..words} σ(L_pred − i)`.
pub fn sbwr_reward(words: usize, l_pred: f64, r_sbwr: f64) -> f64 {
    r_sbwr
        * (1..=words)
            .map(|i| logistic(l_pred - i as f64))
            .sum::<f64>()
}

/// Text-level facts about a candidate needed by the rerankers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeatures {
    /// Words in the detokenized summary.
    pub words: usize,
    /// Fraction of those words found in the source; `None` for empty summaries.
    pub copy_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reranked {
    /// Pool indices, best first.
    pub order: Vec<usize>,
    /// Reranked score per pool entry; `None` where the method is undefined.
    pub scores: Vec<Option<f64>>,
    pub excluded: usize,
}

impl Reranked {
    pub fn best(&self) -> Option<usize> {
        self.order.first().copied()
    }
}

/// Scores every pool entry under `config.method` and sorts the pool. Lengths
/// for normalization are token counts including END; SBWR counts words.
pub fn rerank(
    pool: &[Hypothesis],
    features: &[CandidateFeatures],
    config: &RerankConfig,
    l_pred: Option<f64>,
) -> Result<Reranked> {
    config.validate()?;
    contract!(
        pool.len() == features.len(),
        "{} hypotheses but {} feature rows",
        pool.len(),
        features.len()
    );
    let scores: Vec<Option<f64>> = pool
        .iter()
        .zip(features)
        .map(|(h, f)| {
            let len = h.ids.len();
            Ok(match config.method {
                RerankMethod::None => Some(h.score),
                RerankMethod::LengthNorm => (len > 0).then(|| length_norm(h.score, len)),
                RerankMethod::BpNorm => match f.copy_rate {
                    Some(c) if len > 0 => Some(bp_norm(h.score, len, config.scaled_copy_rate(c))),
                    _ => None,
                },
                RerankMethod::Sbwr => {
                    let Some(l) = l_pred else {
                        return Err(Error::Contract(
                            "sbwr reranking needs a predicted length".into(),
                        ));
                    };
                    Some(h.score + sbwr_reward(f.words, l, config.r_sbwr))
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match (scores[a], scores[b]) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_score.then_with(|| rank(&pool[b], &pool[a]))
    });
    let excluded = scores.iter().filter(|s| s.is_none()).count();
    Ok(Reranked {
        order,
        scores,
        excluded,
    })
}
