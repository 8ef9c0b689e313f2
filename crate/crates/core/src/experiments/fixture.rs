//! Synthetic retrieval task whose relevant document is reached only after
//! refinement.
//!
//! Every query `q_i` gets two documents:
//!
//! * a distractor pinned to `e(q_i)`, the plain encoding of the query, so it
//!   wins at zero refinement steps;
//! * a target pinned to `h_2`, the state the additive recurrence reaches after
//!   two refinement steps with a quarter-turn block rotation as transition.
//!
//! Only the target is relevant. The builder checks that, for every query,
//! the intended winner beats every other document by at least
//! [`FIXTURE_MARGIN`] in cosine at both `T = 0` and `T = 2`.

use std::f64::consts::FRAC_PI_2;

use crate::backends::{block_rotation, AdditiveBackend, AdditiveRefParams};
use crate::error::{Error, Result};
use crate::model::{Document, Qrels, Query};
use crate::scalar;

pub const FIXTURE_MIX: f64 = 0.5;
pub const FIXTURE_MARGIN: f64 = 0.1;
/// Refinement steps after which the target is reached.
pub const FIXTURE_HOPS: usize = 2;

#[derive(Debug, Clone)]
pub struct TwoHopFixture {
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub params: AdditiveRefParams,
    /// Smallest winner-vs-runner-up cosine gap over all queries and both
    /// checkpoints.
    pub margin: f64,
}

impl TwoHopFixture {
    pub fn backend(&self) -> Result<AdditiveBackend<f64>> {
        AdditiveBackend::new(self.params.clone())
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = scalar::norm(v);
    v.iter().map(|x| x / n).collect()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| scalar::dot(row, x)).collect()
}

/// `normalize((1 - mix) e + mix * M * mean(states))`, all states so far.
fn closed_form_step(m: &[Vec<f64>], e: &[f64], states: &[Vec<f64>]) -> Vec<f64> {
    let d = e.len();
    let mut mean = vec![0.0; d];
    for s in states {
        for (a, b) in mean.iter_mut().zip(s) {
            *a += b / states.len() as f64;
        }
    }
    let moved = matvec(m, &mean);
    let mixed: Vec<f64> = e
        .iter()
        .zip(&moved)
        .map(|(a, b)| (1.0 - FIXTURE_MIX) * a + FIXTURE_MIX * b)
        .collect();
    normalized(&mixed)
}

pub fn query_text(i: usize) -> String {
    format!("two-hop query {i}")
}

pub fn target_text(i: usize) -> String {
    format!("two-hop target {i}")
}

pub fn distractor_text(i: usize) -> String {
    format!("two-hop distractor {i}")
}

pub fn make_two_hop_fixture(n_queries: usize, dim: usize, seed: u64) -> Result<TwoHopFixture> {
    if n_queries == 0 {
        return Err(Error::invalid("two-hop fixture needs at least one query"));
    }
    if dim < 4 {
        return Err(Error::invalid("two-hop fixture needs dim >= 4"));
    }
    let transition = block_rotation(dim, FRAC_PI_2);
    let mut params = AdditiveRefParams::new(dim, FIXTURE_MIX, seed).with_transition(transition.clone());

    let mut queries = Vec::with_capacity(n_queries);
    let mut corpus = Vec::with_capacity(2 * n_queries);
    let mut qrels = Qrels::new();
    // (plain query direction, two-hop direction) per query
    let mut anchors = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let qtext = query_text(i);
        let e = normalized(&params.raw_base(&qtext));
        let mut states = vec![e.clone()];
        for _ in 0..FIXTURE_HOPS {
            let next = closed_form_step(&transition, &e, &states);
            states.push(next);
        }
        let target = states.pop().expect("two hops computed");

        params.pin(distractor_text(i), e.clone());
        params.pin(target_text(i), target.clone());
        queries.push(Query::new(format!("q{i}"), qtext));
        corpus.push(Document::new(format!("x{i}"), "", distractor_text(i)));
        corpus.push(Document::new(format!("t{i}"), "", target_text(i)));
        qrels.insert(&format!("q{i}"), &format!("t{i}"), 1)?;
        anchors.push((e, target));
    }

    // Winner at T=0 is x_i (cos 1 with e_i); at T=2 it is t_i.
    let mut margin = f64::INFINITY;
    for (i, (e, target)) in anchors.iter().enumerate() {
        for (j, (other_e, other_t)) in anchors.iter().enumerate() {
            for (probe, winner_is_distractor) in [(e, true), (target, false)] {
                for (doc, doc_is_distractor) in [(other_e, true), (other_t, false)] {
                    if i == j && doc_is_distractor == winner_is_distractor {
                        continue;
                    }
                    let gap = 1.0 - scalar::dot(probe, doc);
                    margin = margin.min(gap);
                }
            }
        }
    }
    if margin < FIXTURE_MARGIN {
        return Err(Error::FixtureMargin {
            margin,
            required: FIXTURE_MARGIN,
        });
    }
    params.validate()?;
    Ok(TwoHopFixture {
        corpus,
        queries,
        qrels,
        params,
        margin,
    })
}
