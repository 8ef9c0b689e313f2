//! The refinement loop: encode once plainly, then re-encode `steps` times
//! with the prior states injected, keeping every state.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::model::{cosine_similarity, ensure_unique_ids, Embedding, Query, StopReason, Trajectory};
use crate::scalar::Real;

/// Upper bound on refinement steps.
pub const MAX_STEPS: usize = 64;

/// How many prior states are passed to the encoder on each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateWindow {
    #[default]
    All,
    Last(usize),
}

impl StateWindow {
    pub fn select<'a, T>(&self, states: &'a [T]) -> &'a [T] {
        match *self {
            StateWindow::All => states,
            StateWindow::Last(n) => &states[states.len().saturating_sub(n)..],
        }
    }
}

impl std::str::FromStr for StateWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(StateWindow::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(StateWindow::Last(n)),
            _ => Err(Error::Config(format!("state window must be \"all\" or >= 1, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for StateWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateWindow::All => f.write_str("all"),
            StateWindow::Last(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for StateWindow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StateWindow::All => s.serialize_str("all"),
            StateWindow::Last(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for StateWindow {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => format!("{n}").parse().map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Refinement iterations after the initial pass; 0 is the plain baseline.
    pub steps: usize,
    pub early_stop: bool,
    /// Early stop fires when `cos(h_t, h_{t-1}) > 1 - epsilon`.
    pub epsilon: f64,
    pub state_window: StateWindow,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            early_stop: false,
            epsilon: 1e-4,
            state_window: StateWindow::All,
        }
    }
}

impl RefineConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > MAX_STEPS {
            return Err(Error::Config(format!("steps {} exceeds {MAX_STEPS}", self.steps)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.state_window == StateWindow::Last(0) {
            return Err(Error::Config("state window must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn refine<T: Real, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    query_text: &str,
    cfg: &RefineConfig,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    if query_text.trim().is_empty() {
        return Err(Error::invalid("query text is empty"));
    }
    let at_step = |step: usize| move |e: Error| Error::Step { step, source: Box::new(e) };

    let h0 = backend.encode(query_text, &[]).map_err(at_step(0))?;
    let mut states: Vec<Embedding<T>> = vec![h0];
    let mut stop = StopReason::MaxSteps;
    for step in 1..=cfg.steps {
        let h = backend
            .encode(query_text, cfg.state_window.select(&states))
            .map_err(at_step(step))?;
        let prev = states.last().expect("h_0 present");
        let converged = cfg.early_stop
            && cosine_similarity(&h, prev).map_err(at_step(step))?.to_f64_lossy() > 1.0 - cfg.epsilon;
        states.push(h);
        if converged {
            stop = StopReason::Converged;
            break;
        }
    }
    Trajectory::new(states, stop)
}

/// Per-query outcome of [`refine_batch`].
#[derive(Debug)]
pub struct BatchOutcome<T: Real> {
    pub trajectories: BTreeMap<String, Trajectory<T>>,
    pub failures: BTreeMap<String, Error>,
}

impl<T: Real> BatchOutcome<T> {
    /// All trajectories, or an aggregate error naming every failed query.
    pub fn into_result(self) -> Result<BTreeMap<String, Trajectory<T>>> {
        if self.failures.is_empty() {
            Ok(self.trajectories)
        } else {
            Err(Error::Batch {
                failed: self.failures.into_iter().collect(),
            })
        }
    }
}

/// Refines every query independently, in parallel.
///
/// Duplicate query ids are rejected before any encoding.
pub fn refine_batch<T: Real, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    queries: &[Query],
    cfg: &RefineConfig,
) -> Result<BatchOutcome<T>> {
    cfg.validate()?;
    ensure_unique_ids(queries.iter().map(|q| q.id.as_str()))?;
    let results: Vec<(String, Result<Trajectory<T>>)> = queries
        .par_iter()
        .map(|q| (q.id.clone(), refine(backend, &q.text, cfg)))
        .collect();
    let mut outcome = BatchOutcome {
        trajectories: BTreeMap::new(),
        failures: BTreeMap::new(),
    };
    for (id, r) in results {
        match r {
            Ok(t) => {
                outcome.trajectories.insert(id, t);
            }
            Err(e) => {
                outcome.failures.insert(id, e);
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{block_rotation, AdditiveBackend, AdditiveRefParams};

    fn e2(mix: f64, transition: Option<Vec<Vec<f64>>>) -> AdditiveBackend<f64> {
        let mut p = AdditiveRefParams::new(2, mix, 0);
        p.transition = transition;
        p.pin("q", vec![1.0, 0.0]);
        AdditiveBackend::new(p).unwrap()
    }

    #[test]
    fn zero_steps_is_plain_encoding() {
        let b = e2(0.5, None);
        let t = refine(&b, "q", &RefineConfig::with_steps(0)).unwrap();
        assert_eq!(t.states().len(), 1);
        assert_eq!(t.stop_reason(), StopReason::MaxSteps);
        assert_eq!(t.last(), &b.encode("q", &[]).unwrap());
    }

    #[test]
    fn fixed_point_when_start_is_base() {
        let b = e2(0.5, None);
        let t = refine(&b, "q", &RefineConfig::with_steps(1)).unwrap();
        assert_eq!(t.states()[1].values(), &[1.0, 0.0]);
    }

    #[test]
    fn rotation_two_steps_matches_hand_iteration() {
        let b = e2(0.5, Some(block_rotation(2, std::f64::consts::FRAC_PI_2)));
        let t = refine(&b, "q", &RefineConfig::with_steps(2)).unwrap();
        // h0 = [1,0]; M h0 = [0,1]; h1 = norm([.5,.5])
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let h1 = [r, r];
        // mean(h0,h1) = [(1+r)/2, r/2]; M mean = [-r/2, (1+r)/2]
        let raw = [0.5 - 0.25 * r, 0.25 * (1.0 + r)];
        let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
        let h2 = [raw[0] / n, raw[1] / n];
        for (got, want) in t.states()[1].values().iter().zip(h1) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in t.states()[2].values().iter().zip(h2) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stop_on_fixed_point() {
        let b = e2(0.5, None);
        let cfg = RefineConfig {
            steps: 10,
            early_stop: true,
            ..RefineConfig::default()
        };
        let t = refine(&b, "q", &cfg).unwrap();
        assert_eq!(t.steps_executed(), 1);
        assert_eq!(t.stop_reason(), StopReason::Converged);
    }

    #[test]
    fn window_selects_suffix() {
        let v = [1, 2, 3, 4];
        assert_eq!(StateWindow::All.select(&v), &v);
        assert_eq!(StateWindow::Last(2).select(&v), &[3, 4]);
        assert_eq!(StateWindow::Last(9).select(&v), &v);
        assert_eq!("all".parse::<StateWindow>().unwrap(), StateWindow::All);
        assert_eq!("3".parse::<StateWindow>().unwrap(), StateWindow::Last(3));
        assert!("0".parse::<StateWindow>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::with_steps(65).validate().is_err());
        let bad_eps = RefineConfig {
            epsilon: 0.0,
            ..RefineConfig::default()
        };
        assert!(bad_eps.validate().is_err());
        let b = e2(0.5, None);
        assert!(refine(&b, "  ", &RefineConfig::default()).is_err());
    }

    #[test]
    fn config_serde() {
        let cfg: RefineConfig = serde_json::from_str(r#"{"steps":3,"state_window":2}"#).unwrap();
        assert_eq!(cfg.state_window, StateWindow::Last(2));
        assert_eq!(cfg.epsilon, 1e-4);
        let cfg: RefineConfig = toml::from_str("steps = 1\nstate_window = \"all\"").unwrap();
        assert_eq!(cfg.state_window, StateWindow::All);
    }

    #[test]
    fn step_index_attached_to_errors() {
        // anti-parallel: h0 = [1,0], M = -I  => (0.5)[1,0] + 0.5*(-[1,0]) = 0
        let b = e2(0.5, Some(vec![vec![-1.0, 0.0], vec![0.0, -1.0]]));
        let err = refine(&b, "q", &RefineConfig::with_steps(3)).unwrap_err();
        assert!(matches!(err, Error::Step { step: 1, .. }));
    }

    #[test]
    fn batch_reports_failures_individually() {
        let b = e2(0.5, None);
        let qs = vec![Query::new("ok", "q"), Query::new("bad", "   ")];
        let out = refine_batch(&b, &qs, &RefineConfig::with_steps(2)).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert!(out.failures.contains_key("bad"));
        assert!(matches!(out.into_result(), Err(Error::Batch { .. })));

        let dup = vec![Query::new("a", "q"), Query::new("a", "q")];
        assert!(matches!(refine_batch(&b, &dup, &RefineConfig::default()), Err(Error::DuplicateId(_))));
        assert!(refine_batch(&b, &[], &RefineConfig::default())
            .unwrap()
            .into_result()
            .unwrap()
            .is_empty());
    }
}
