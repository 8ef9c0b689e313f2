//! Encoder backends: the function that maps `(text, prior states)` to a
//! pooled unit-norm embedding.

mod additive;
pub mod mock_server;
pub mod protocol;
mod remote;
mod toy;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use additive::{block_rotation, AdditiveBackend, AdditiveRefParams};
pub use remote::{RemoteBackend, RemoteConfig};
pub use toy::ToyBackend;

use crate::error::Result;
use crate::model::Embedding;
use crate::scalar::Real;

pub trait EncoderBackend<T: Real>: Send + Sync {
    /// Encodes `text` with `prefix_states` injected in trajectory order.
    ///
    /// Output has `self.dim()` coordinates and unit norm.
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>>;

    fn dim(&self) -> usize;

    fn name(&self) -> &str;
}

impl<T: Real, B: EncoderBackend<T> + ?Sized> EncoderBackend<T> for &B {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        (**self).encode(text, prefix_states)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<T: Real, B: EncoderBackend<T> + ?Sized> EncoderBackend<T> for Box<B> {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        (**self).encode(text, prefix_states)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<T: Real, B: EncoderBackend<T> + ?Sized> EncoderBackend<T> for std::sync::Arc<B> {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        (**self).encode(text, prefix_states)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Wraps a backend and counts `encode` calls, split by whether any prefix
/// state was passed.
pub struct CountingBackend<B> {
    inner: B,
    plain: AtomicUsize,
    with_states: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            plain: AtomicUsize::new(0),
            with_states: AtomicUsize::new(0),
        }
    }

    /// Calls with an empty prefix.
    pub fn plain_calls(&self) -> usize {
        self.plain.load(Ordering::SeqCst)
    }

    pub fn stateful_calls(&self) -> usize {
        self.with_states.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<T: Real, B: EncoderBackend<T>> EncoderBackend<T> for CountingBackend<B> {
    fn encode(&self, text: &str, prefix_states: &[Embedding<T>]) -> Result<Embedding<T>> {
        let counter = if prefix_states.is_empty() {
            &self.plain
        } else {
            &self.with_states
        };
        counter.fetch_add(1, Ordering::SeqCst);
        self.inner.encode(text, prefix_states)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}
