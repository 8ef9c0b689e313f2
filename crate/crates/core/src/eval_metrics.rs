//! Retrieval metrics (nDCG@k, Recall@k, MRR) and STS Spearman correlation.
//!
//! Rank-based metrics read the order of each ranking in a [`RunList`]; scores
//! themselves are ignored. Queries with no relevant document in the qrels are
//! left out of the aggregate and listed in [`MetricReport::no_relevant`];
//! queries the qrels never mention are listed in [`MetricReport::unjudged`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::model::{cosine_similarity, Qrels, RunList, ScoredDoc};
use crate::rt_engine::{refine, RefineConfig};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Ndcg { k: usize },
    Recall { k: usize },
    Mrr,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Ndcg { .. } => "ndcg",
            Metric::Recall { .. } => "recall",
            Metric::Mrr => "mrr",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match *self {
            Metric::Ndcg { k } | Metric::Recall { k } => Some(k),
            Metric::Mrr => None,
        }
    }

    /// Ranking depth the metric needs from a run; `None` means unbounded.
    pub fn depth(&self) -> Option<usize> {
        self.k()
    }

    pub fn evaluate(&self, run: &RunList, qrels: &Qrels) -> Result<MetricReport> {
        match *self {
            Metric::Ndcg { k } => ndcg_at_k(run, qrels, k),
            Metric::Recall { k } => recall_at_k(run, qrels, k),
            Metric::Mrr => mrr(run, qrels),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k() {
            Some(k) => write!(f, "{}@{k}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, k) = match s.split_once('@') {
            Some((n, k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad k in metric {s:?}")))?;
                if k == 0 {
                    return Err(Error::Config("metric k must be >= 1".into()));
                }
                (n.to_string(), Some(k))
            }
            None => (s.clone(), None),
        };
        match (name.as_str(), k) {
            ("ndcg", Some(k)) => Ok(Metric::Ndcg { k }),
            ("recall", Some(k)) => Ok(Metric::Recall { k }),
            ("mrr", None) => Ok(Metric::Mrr),
            _ => Err(Error::Config(format!("unknown metric {s:?}; expected ndcg@k, recall@k or mrr"))),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub k: Option<usize>,
    pub per_query: BTreeMap<String, f64>,
    /// Mean of `per_query`; 0 when no query qualifies.
    pub aggregate: f64,
    pub no_relevant: Vec<String>,
    pub unjudged: Vec<String>,
}

fn per_query_report(
    metric: Metric,
    run: &RunList,
    qrels: &Qrels,
    score: impl Fn(&[ScoredDoc], &std::collections::HashMap<String, u32>) -> f64,
) -> Result<MetricReport> {
    if metric.k() == Some(0) {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut report = MetricReport {
        metric: metric.name().to_string(),
        k: metric.k(),
        per_query: BTreeMap::new(),
        aggregate: 0.0,
        no_relevant: Vec::new(),
        unjudged: Vec::new(),
    };
    for (qid, ranking) in run.iter() {
        let Some(judged) = qrels.judgments(qid) else {
            report.unjudged.push(qid.to_string());
            continue;
        };
        if judged.values().all(|&g| g == 0) {
            report.no_relevant.push(qid.to_string());
            continue;
        }
        report.per_query.insert(qid.to_string(), score(ranking, judged));
    }
    if !report.per_query.is_empty() {
        report.aggregate = report.per_query.values().sum::<f64>() / report.per_query.len() as f64;
    }
    Ok(report)
}

/// Graded nDCG with linear gain and `log2(rank + 1)` discount.
pub fn ndcg_at_k(run: &RunList, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    per_query_report(Metric::Ndcg { k }, run, qrels, |ranking, judged| {
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, d)| {
                let g = judged.get(&d.doc_id).copied().unwrap_or(0);
                f64::from(g) / ((i + 2) as f64).log2()
            })
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| f64::from(g) / ((i + 2) as f64).log2())
            .sum();
        dcg / idcg
    })
}

pub fn recall_at_k(run: &RunList, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    per_query_report(Metric::Recall { k }, run, qrels, |ranking, judged| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let found = ranking
            .iter()
            .take(k)
            .filter(|d| judged.get(&d.doc_id).is_some_and(|&g| g > 0))
            .count();
        found as f64 / relevant as f64
    })
}

pub fn mrr(run: &RunList, qrels: &Qrels) -> Result<MetricReport> {
    per_query_report(Metric::Mrr, run, qrels, |ranking, judged| {
        ranking
            .iter()
            .position(|d| judged.get(&d.doc_id).is_some_and(|&g| g > 0))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::DimMismatch {
            expected: gold.len(),
            got: predicted.len(),
        });
    }
    if gold.len() < 2 {
        return Err(Error::invalid("spearman needs at least two points"));
    }
    if predicted.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman input has non-finite values"));
    }
    if gold.iter().all(|&g| g == gold[0]) {
        return Err(Error::DegenerateRanks("gold"));
    }
    if predicted.iter().all(|&p| p == predicted[0]) {
        return Err(Error::DegenerateRanks("predicted"));
    }
    let rp = fractional_ranks(predicted);
    let rg = fractional_ranks(gold);
    pearson(&rp, &rg).ok_or(Error::DegenerateRanks("gold"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub a: String,
    pub b: String,
    pub gold: f64,
}

impl StsPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, gold: f64) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            gold,
        }
    }
}

/// Which side of an STS pair is refined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StsSide {
    /// Sentence A only; B is encoded plainly.
    #[default]
    First,
    Both,
}

/// Cosine scores per pair, before correlation.
pub fn sts_predictions<T: Real, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    cfg: &RefineConfig,
    pairs: &[StsPair],
    side: StsSide,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no STS pairs"));
    }
    pairs
        .iter()
        .map(|p| {
            let a = refine(backend, &p.a, cfg)?;
            let b = match side {
                StsSide::First => backend.encode(&p.b, &[])?,
                StsSide::Both => refine(backend, &p.b, cfg)?.last().clone(),
            };
            Ok(cosine_similarity(a.last(), &b)?.to_f64_lossy())
        })
        .collect()
}

/// Spearman correlation between refined-pair cosine scores and gold scores.
pub fn eval_sts<T: Real, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    cfg: &RefineConfig,
    pairs: &[StsPair],
    side: StsSide,
) -> Result<f64> {
    let predicted = sts_predictions(backend, cfg, pairs, side)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    spearman(&predicted, &gold)
}
