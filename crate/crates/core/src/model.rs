//! Domain types shared by the encoder, engine, retrieval and evaluation layers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{self, Real};

/// Tolerance on the L2 norm of a vector flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A dense embedding vector.
///
/// Construction rejects empty and non-finite input. `is_normalized` is only
/// set by [`l2_normalize`] (or [`Embedding::unit`], which checks it).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Real> {
    values: Vec<T>,
    normalized: bool,
}

impl<T: Real> Embedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have dim >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Wraps a vector that is already unit-norm, verifying the norm.
    pub fn unit(values: Vec<T>) -> Result<Self> {
        let mut e = Self::new(values)?;
        let n = e.norm().to_f64_lossy();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("expected unit norm, got {n}")));
        }
        e.normalized = true;
        Ok(e)
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> T {
        scalar::norm(&self.values)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Converts to another scalar width. The normalized flag is recomputed.
    pub fn cast<U: Real>(&self) -> Embedding<U> {
        let values: Vec<U> = self
            .values
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        let normalized = self.normalized
            && (scalar::norm(&values).to_f64_lossy() - 1.0).abs() <= UNIT_NORM_TOL;
        Embedding { values, normalized }
    }
}

/// Cosine similarity `dot(a, b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine_similarity<T: Real>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    cosine_slices(a.values(), b.values())
}

pub(crate) fn cosine_slices<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = scalar::norm(a);
    let nb = scalar::norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let c = scalar::dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn l2_normalize<T: Real>(a: &Embedding<T>) -> Result<Embedding<T>> {
    normalize_vec(a.values().to_vec())
}

/// Normalizes an owned buffer into a unit [`Embedding`].
pub(crate) fn normalize_vec<T: Real>(mut values: Vec<T>) -> Result<Embedding<T>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let n = scalar::norm(&values);
    if n == T::zero() {
        return Err(Error::ZeroNorm);
    }
    for v in &mut values {
        *v = *v / n;
    }
    let mut e = Embedding::new(values)?;
    e.normalized = true;
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Converged,
}

/// The ordered states `h_0..h_last` of one refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    states: Vec<Embedding<T>>,
    stop_reason: StopReason,
}

impl<T: Real> Trajectory<T> {
    pub fn new(states: Vec<Embedding<T>>, stop_reason: StopReason) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::invalid("trajectory needs at least the initial state"))?;
        let dim = first.dim();
        if let Some(bad) = states.iter().find(|s| s.dim() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self {
            states,
            stop_reason,
        })
    }

    pub fn states(&self) -> &[Embedding<T>] {
        &self.states
    }

    pub fn steps_executed(&self) -> usize {
        self.states.len() - 1
    }

    pub fn stop_reason(&self) -> StopReason {
        self.stop_reason
    }

    pub fn initial(&self) -> &Embedding<T> {
        &self.states[0]
    }

    /// The embedding used for ranking: the last computed state.
    pub fn last(&self) -> &Embedding<T> {
        self.states.last().expect("non-empty by construction")
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Text handed to the encoder: `title\ntext`, or the text alone when the
    /// title is empty.
    pub fn encoder_input(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Fails with [`Error::DuplicateId`] on the first repeated id.
pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Graded relevance judgments. Absent pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: HashMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment, rejecting a repeated (query, document) pair.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        let per_query = self.grades.entry(query_id.to_string()).or_default();
        if per_query.insert(doc_id.to_string(), grade).is_some() {
            return Err(Error::DuplicateId(format!("{query_id}/{doc_id}")));
        }
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.grades.contains_key(query_id)
    }

    /// Judgments for one query, if it was judged at all.
    pub fn judgments(&self, query_id: &str) -> Option<&HashMap<String, u32>> {
        self.grades.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Ranked results per query, descending by score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunList {
    runs: BTreeMap<String, Vec<ScoredDoc>>,
}

impl RunList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a ranking for a query. Rejects duplicate documents, increasing
    /// scores, NaN scores, and a query that already has a ranking.
    pub fn insert(&mut self, query_id: &str, ranking: Vec<ScoredDoc>) -> Result<()> {
        ensure_unique_ids(ranking.iter().map(|d| d.doc_id.as_str()))?;
        if ranking.iter().any(|d| d.score.is_nan()) {
            return Err(Error::invalid(format!("NaN score in run for {query_id}")));
        }
        if ranking.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(Error::invalid(format!(
                "run for {query_id} is not sorted by descending score"
            )));
        }
        if self.runs.contains_key(query_id) {
            return Err(Error::DuplicateId(query_id.to_string()));
        }
        self.runs.insert(query_id.to_string(), ranking);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&[ScoredDoc]> {
        self.runs.get(query_id).map(Vec::as_slice)
    }

    /// Iterates queries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ScoredDoc])> {
        self.runs.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}
