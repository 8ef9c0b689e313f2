use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{normalize_vec, Embedding};
use crate::scalar::Real;
use crate::toy_encoder::fnv1a64;

/// Parameters of the closed-form reference backend
///
/// `encode(text, states) = normalize((1 - mix) * e(text) + mix * M * mean(states))`,
/// and `e(text)` alone when `states` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveRefParams {
    pub dim: usize,
    pub mix: f64,
    /// Seed of the hash-derived base embeddings.
    #[serde(default)]
    pub seed: u64,
    /// Row-major `dim x dim` transition; identity when absent.
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    /// Texts whose base embedding is fixed explicitly (normalized on use).
    #[serde(default)]
    pub pinned: BTreeMap<String, Vec<f64>>,
}

impl AdditiveRefParams {
    pub fn new(dim: usize, mix: f64, seed: u64) -> Self {
        Self {
            dim,
            mix,
            seed,
            transition: None,
            pinned: BTreeMap::new(),
        }
    }

    pub fn with_transition(mut self, m: Vec<Vec<f64>>) -> Self {
        self.transition = Some(m);
        self
    }

    pub fn pin(&mut self, text: impl Into<String>, v: Vec<f64>) {
        self.pinned.insert(text.into(), v);
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("additive dim must be positive".into()));
        }
        if !(self.mix > 0.0 && self.mix < 1.0) {
            return Err(Error::Config(format!("mix {} outside (0, 1)", self.mix)));
        }
        if let Some(m) = &self.transition {
            if m.len() != self.dim || m.iter().any(|r| r.len() != self.dim) {
                return Err(Error::Config(format!("transition must be {0}x{0}", self.dim)));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Config("transition has non-finite entries".into()));
            }
        }
        for (text, v) in &self.pinned {
            if v.len() != self.dim {
                return Err(Error::Config(format!("pinned vector for {text:?} has wrong dim")));
            }
            if v.iter().all(|&x| x == 0.0) || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("pinned vector for {text:?} is degenerate")));
            }
        }
        Ok(())
    }

    /// Base embedding coordinates before normalization, in `f64`.
    pub fn raw_base(&self, text: &str) -> Vec<f64> {
        if let Some(v) = self.pinned.get(text) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.as_bytes()) ^ self.seed.rotate_left(17));
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        }
    }
}

/// `dim x dim` block-diagonal rotation by `angle` in the coordinate planes
/// (0,1), (2,3), ...; an odd trailing coordinate is left fixed.
pub fn block_rotation(dim: usize, angle: f64) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; dim]; dim];
    let (s, c) = angle.sin_cos();
    let mut i = 0;
    while i + 1 < dim {
        m[i][i] = c;
        m[i][i + 1] = -s;
        m[i + 1][i] = s;
        m[i + 1][i + 1] = c;
        i += 2;
    }
    if dim % 2 == 1 {
        m[dim - 1][dim - 1] = 1.0;
    }
    m
}

#[derive(Debug, Clone)]
pub struct AdditiveBackend<T: Real> {
    params: AdditiveRefParams,
    transition: Matrix<T>,
    mix: T,
    name: String,
}

impl<T: Real> AdditiveBackend<T> {
    pub fn new(params: AdditiveRefParams) -> Result<Self> {
        params.validate()?;
        let transition = match &params.transition {
            Some(rows) => Matrix::<f64>::from_rows(rows)?.cast(),
            None => Matrix::identity(params.dim),
        };
        let name = format!("additive-a{}-d{}", params.mix, params.dim);
        Ok(Self {
            mix: T::from_f64_lossy(params.mix),
            params,
            transition,
            name,
        })
    }

    pub fn params(&self) -> &AdditiveRefParams {
        &self.params
    }

    /// `e(text)`: the unit-norm base embedding.
    pub fn base(&self, text: &str) -> Result<Embedding<T>> {
        normalize_vec(
            self.params
                .raw_base(text)
                .into_iter()
                .map(T::from_f64_lossy)
                .collect(),
        )
    }
}

impl<T: Real> EncoderBackend<T> for AdditiveBackend<T> {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        let base = self.base(text)?;
        if prefix_states.is_empty() {
            return Ok(base);
        }
        let d = self.params.dim;
        let mut mean = vec![T::zero(); d];
        for s in prefix_states {
            if s.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: s.dim(),
                });
            }
            for (m, &v) in mean.iter_mut().zip(s.values()) {
                *m = *m + v;
            }
        }
        let n = T::from_usize_lossy(prefix_states.len());
        for m in &mut mean {
            *m = *m / n;
        }
        let moved = self.transition.matvec(&mean);
        let keep = T::one() - self.mix;
        let mixed: Vec<T> = base
            .values()
            .iter()
            .zip(moved)
            .map(|(&e, m)| keep * e + self.mix * m)
            .collect();
        normalize_vec(mixed)
    }

    fn dim(&self) -> usize {
        self.params.dim
    }

    fn name(&self) -> &str {
        &self.name
    }
}
