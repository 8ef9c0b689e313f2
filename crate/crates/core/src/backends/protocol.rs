//! JSON bodies of the `POST {endpoint}/v1/rt-encode` protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const ENCODE_PATH: &str = "/v1/rt-encode";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub version: u32,
    pub text: String,
    /// Prior states in trajectory order, `h_0` first. May be empty.
    pub prefix_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub version: u32,
    pub embedding: Vec<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl EncodeResponse {
    /// Checks version, the `dim` field, finiteness, and the expected width.
    pub fn validate(&self, expected_dim: Option<usize>) -> Result<()> {
        if self.version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported version {}", self.version)));
        }
        if self.dim != self.embedding.len() {
            return Err(Error::Protocol(format!(
                "dim field {} != embedding length {}",
                self.dim,
                self.embedding.len()
            )));
        }
        if self.embedding.is_empty() {
            return Err(Error::Protocol("empty embedding".into()));
        }
        if let Some(want) = expected_dim {
            if self.dim != want {
                return Err(Error::Protocol(format!(
                    "server returned dim {} but backend dim is {want}",
                    self.dim
                )));
            }
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("non-finite embedding value".into()));
        }
        Ok(())
    }
}
