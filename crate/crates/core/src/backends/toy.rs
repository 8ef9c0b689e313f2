use crate::backends::EncoderBackend;
use crate::error::Result;
use crate::model::Embedding;
use crate::scalar::Real;
use crate::toy_encoder::{forward, init_params, pool_scoped, tokenize, EncoderParams, Hyper, PoolScope};

/// The toy transformer as a backend: tokenize, forward, pool.
#[derive(Debug, Clone)]
pub struct ToyBackend<T: Real> {
    params: EncoderParams<T>,
    scope: PoolScope,
    name: String,
}

impl<T: Real> ToyBackend<T> {
    pub fn new(params: EncoderParams<T>, scope: PoolScope) -> Self {
        let name = format!("toy-s{}-d{}", params.seed(), params.dim());
        Self {
            params,
            scope,
            name,
        }
    }

    pub fn from_seed(seed: u64, hyper: Hyper, scope: PoolScope) -> Result<Self> {
        Ok(Self::new(init_params(seed, hyper)?, scope))
    }

    pub fn params(&self) -> &EncoderParams<T> {
        &self.params
    }

    pub fn pool_scope(&self) -> PoolScope {
        self.scope
    }
}

impl<T: Real> EncoderBackend<T> for ToyBackend<T> {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        let tokens = tokenize(text, self.params.hyper().vocab_size)?;
        let hidden = forward(&self.params, &tokens, prefix_states)?;
        pool_scoped(&hidden, self.scope)
    }

    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn name(&self) -> &str {
        &self.name
    }
}
