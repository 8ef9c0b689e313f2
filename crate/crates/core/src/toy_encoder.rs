//! A small, randomly initialized decoder-only transformer used as a
//! desk-scale encoder.
//!
//! Sequence layout for one forward pass:
//!
//! ```text
//! [tok_0 .. tok_{n-1}] [state_0 .. state_{m-1}] [EOS]
//! ```
//!
//! State slots are the prior pooled embeddings passed through a linear
//! projection. Every position gets a learned position embedding. Blocks are
//! pre-layer-norm with causal multi-head attention and a 4x GELU MLP, so row
//! `i` of the output never depends on anything after position `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{normalize_vec, Embedding};
use crate::scalar::{self, Real};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const LN_EPS: f64 = 1e-5;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Token ids for one text, always ending in the single EOS id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
    eos_id: u32,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        let eos_id = (vocab_size - 1) as u32;
        match ids.split_last() {
            Some((&last, body)) if last == eos_id => {
                if let Some(bad) = body.iter().find(|&&id| id as usize >= vocab_size || id == eos_id) {
                    return Err(Error::invalid(format!("token id {bad} invalid before EOS")));
                }
                Ok(Self { ids, eos_id })
            }
            _ => Err(Error::invalid("token sequence must end with EOS")),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    /// Number of tokens including EOS.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens before EOS.
    pub fn body(&self) -> &[u32] {
        &self.ids[..self.ids.len() - 1]
    }
}

/// Whitespace tokenizer: each token is FNV-1a hashed into `[0, vocab_size - 2]`
/// and `vocab_size - 1` is appended as EOS.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<TokenSeq> {
    if vocab_size < 2 {
        return Err(Error::Config("vocab_size must be >= 2".into()));
    }
    let modulus = (vocab_size - 1) as u64;
    let mut ids: Vec<u32> = text
        .split_whitespace()
        .map(|tok| (fnv1a64(tok.as_bytes()) % modulus) as u32)
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid("cannot tokenize empty or whitespace-only text"));
    }
    ids.push((vocab_size - 1) as u32);
    TokenSeq::new(ids, vocab_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            dim: 32,
            n_layers: 2,
            n_heads: 4,
            max_positions: 128,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm<T: Real> {
    gain: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    fn new(dim: usize) -> Self {
        Self {
            gain: vec![T::one(); dim],
            bias: vec![T::zero(); dim],
        }
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        let n = T::from_usize_lossy(x.len());
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::from_f64_lossy(LN_EPS)).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
            .collect()
    }

    fn tensors(&self) -> [&[T]; 2] {
        [&self.gain, &self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T: Real> {
    ln_attn: LayerNorm<T>,
    w_q: Matrix<T>,
    w_k: Matrix<T>,
    w_v: Matrix<T>,
    w_o: Matrix<T>,
    ln_mlp: LayerNorm<T>,
    w_up: Matrix<T>,
    b_up: Vec<T>,
    w_down: Matrix<T>,
    b_down: Vec<T>,
}

/// Weights of the toy encoder. Fully determined by `(seed, hyper)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Real> {
    hyper: Hyper,
    seed: u64,
    tok_emb: Matrix<T>,
    pos_emb: Matrix<T>,
    w_inject: Matrix<T>,
    b_inject: Vec<T>,
    blocks: Vec<Block<T>>,
    ln_final: LayerNorm<T>,
}

struct WeightStream(ChaCha8Rng);

impl WeightStream {
    fn uniform<T: Real>(&mut self, len: usize, scale: f64) -> Vec<T> {
        (0..len)
            .map(|_| T::from_f64_lossy((self.0.random::<f64>() * 2.0 - 1.0) * scale))
            .collect()
    }

    fn matrix<T: Real>(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
        Matrix::from_vec(rows, cols, self.uniform(rows * cols, scale)).expect("shape")
    }

    fn linear<T: Real>(&mut self, out: usize, fan_in: usize) -> Matrix<T> {
        self.matrix(out, fan_in, 1.0 / (fan_in as f64).sqrt())
    }
}

/// Draws all weights from a ChaCha8 stream seeded with `seed`.
///
/// Values are generated in `f64` and rounded to `T`, so `f32` parameters are
/// the rounded `f64` parameters for the same seed.
pub fn init_params<T: Real>(seed: u64, hyper: Hyper) -> Result<EncoderParams<T>> {
    hyper.validate()?;
    let d = hyper.dim;
    let mut ws = WeightStream(ChaCha8Rng::seed_from_u64(seed));
    let tok_emb = ws.matrix(hyper.vocab_size, d, 1.0);
    let pos_emb = ws.matrix(hyper.max_positions, d, 0.1);
    let w_inject = ws.linear(d, d);
    let b_inject = ws.uniform(d, 0.1);
    let blocks = (0..hyper.n_layers)
        .map(|_| Block {
            ln_attn: LayerNorm::new(d),
            w_q: ws.linear(d, d),
            w_k: ws.linear(d, d),
            w_v: ws.linear(d, d),
            w_o: ws.linear(d, d),
            ln_mlp: LayerNorm::new(d),
            w_up: ws.linear(4 * d, d),
            b_up: ws.uniform(4 * d, 0.1),
            w_down: ws.linear(d, 4 * d),
            b_down: ws.uniform(d, 0.1),
        })
        .collect();
    Ok(EncoderParams {
        hyper,
        seed,
        tok_emb,
        pos_emb,
        w_inject,
        b_inject,
        blocks,
        ln_final: LayerNorm::new(d),
    })
}

impl<T: Real> EncoderParams<T> {
    pub fn hyper(&self) -> Hyper {
        self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            self.tok_emb.as_slice(),
            self.pos_emb.as_slice(),
            self.w_inject.as_slice(),
            &self.b_inject,
        ];
        for b in &self.blocks {
            out.extend(b.ln_attn.tensors());
            out.extend([
                b.w_q.as_slice(),
                b.w_k.as_slice(),
                b.w_v.as_slice(),
                b.w_o.as_slice(),
            ]);
            out.extend(b.ln_mlp.tensors());
            out.extend([b.w_up.as_slice(), &b.b_up, b.w_down.as_slice(), &b.b_down]);
        }
        out.extend(self.ln_final.tensors());
        out
    }

    /// FNV-1a over the little-endian `f64` bit patterns of every weight, in
    /// declaration order.
    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for t in self.tensors() {
            for v in t {
                for b in v.to_f64_lossy().to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn weight_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Per-position outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T: Real> {
    rows: Matrix<T>,
    n_tokens: usize,
    n_states: usize,
}

impl<T: Real> HiddenStates<T> {
    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.rows.row(i)
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text tokens before EOS.
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn eos_index(&self) -> usize {
        self.n_tokens + self.n_states
    }
}

/// Which rows before EOS enter the mean pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    /// Text tokens and injected state slots.
    #[default]
    AllBeforeEos,
    /// Text tokens only.
    TokensOnly,
}

impl std::str::FromStr for PoolScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_before_eos" | "all-before-eos" => Ok(Self::AllBeforeEos),
            "tokens_only" | "tokens-only" => Ok(Self::TokensOnly),
            other => Err(Error::Config(format!("unknown pool scope {other:?}"))),
        }
    }
}

/// Attention probabilities captured during a forward pass.
///
/// `weights[layer][head][i]` holds the softmax row for query position `i`,
/// of length `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T: Real> {
    pub weights: Vec<Vec<Vec<Vec<T>>>>,
}

pub fn forward<T: Real>(
    params: &EncoderParams<T>,
    tokens: &TokenSeq,
    prefix_states: &[Embedding<T>],
) -> Result<HiddenStates<T>> {
    run_forward(params, tokens, prefix_states, None)
}

/// Like [`forward`], also returning every attention row.
pub fn forward_traced<T: Real>(
    params: &EncoderParams<T>,
    tokens: &TokenSeq,
    prefix_states: &[Embedding<T>],
) -> Result<(HiddenStates<T>, AttentionTrace<T>)> {
    let mut trace = AttentionTrace { weights: Vec::new() };
    let hidden = run_forward(params, tokens, prefix_states, Some(&mut trace))?;
    Ok((hidden, trace))
}

fn run_forward<T: Real>(
    params: &EncoderParams<T>,
    tokens: &TokenSeq,
    prefix_states: &[Embedding<T>],
    mut trace: Option<&mut AttentionTrace<T>>,
) -> Result<HiddenStates<T>> {
    let hyper = params.hyper;
    let d = hyper.dim;
    let len = tokens.len() + prefix_states.len();
    if len > hyper.max_positions {
        return Err(Error::SequenceTooLong {
            len,
            max: hyper.max_positions,
        });
    }
    if tokens.eos_id() as usize != hyper.vocab_size - 1 {
        return Err(Error::invalid("token sequence built for a different vocab_size"));
    }
    if let Some(s) = prefix_states.iter().find(|s| s.dim() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            got: s.dim(),
        });
    }

    let mut x = Matrix::zeros(len, d);
    let body = tokens.body();
    for (pos, &id) in body.iter().enumerate() {
        x.row_mut(pos).copy_from_slice(params.tok_emb.row(id as usize));
    }
    for (slot, state) in prefix_states.iter().enumerate() {
        let projected = params.w_inject.matvec(state.values());
        let row = x.row_mut(body.len() + slot);
        for ((dst, p), b) in row.iter_mut().zip(projected).zip(&params.b_inject) {
            *dst = p + *b;
        }
    }
    x.row_mut(len - 1)
        .copy_from_slice(params.tok_emb.row(tokens.eos_id() as usize));
    for pos in 0..len {
        let pe = params.pos_emb.row(pos);
        for (v, &p) in x.row_mut(pos).iter_mut().zip(pe) {
            *v = *v + p;
        }
    }

    for block in &params.blocks {
        let layer_trace = apply_attention(block, hyper.n_heads, &mut x, trace.is_some());
        if let (Some(t), Some(lt)) = (trace.as_deref_mut(), layer_trace) {
            t.weights.push(lt);
        }
        apply_mlp(block, &mut x);
    }
    for pos in 0..len {
        let normed = params.ln_final.apply(x.row(pos));
        x.row_mut(pos).copy_from_slice(&normed);
    }

    if !x.is_finite() {
        return Err(Error::invalid("non-finite hidden state"));
    }
    Ok(HiddenStates {
        rows: x,
        n_tokens: body.len(),
        n_states: prefix_states.len(),
    })
}

fn apply_attention<T: Real>(
    block: &Block<T>,
    n_heads: usize,
    x: &mut Matrix<T>,
    capture: bool,
) -> Option<Vec<Vec<Vec<T>>>> {
    let (n, d) = (x.rows(), x.cols());
    let head_dim = d / n_heads;
    let scale = T::one() / T::from_usize_lossy(head_dim).sqrt();
    let normed: Vec<Vec<T>> = (0..n).map(|i| block.ln_attn.apply(x.row(i))).collect();
    let q: Vec<Vec<T>> = normed.iter().map(|h| block.w_q.matvec(h)).collect();
    let k: Vec<Vec<T>> = normed.iter().map(|h| block.w_k.matvec(h)).collect();
    let v: Vec<Vec<T>> = normed.iter().map(|h| block.w_v.matvec(h)).collect();

    let mut captured = capture.then(|| vec![Vec::with_capacity(n); n_heads]);
    let mut mixed = vec![vec![T::zero(); d]; n];
    for head in 0..n_heads {
        let span = head * head_dim..(head + 1) * head_dim;
        for i in 0..n {
            // causal: keys 0..=i only
            let logits: Vec<T> = (0..=i)
                .map(|j| scalar::dot(&q[i][span.clone()], &k[j][span.clone()]) * scale)
                .collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            let probs: Vec<T> = exps.into_iter().map(|e| e / total).collect();
            for (j, &p) in probs.iter().enumerate() {
                for c in span.clone() {
                    mixed[i][c] = mixed[i][c] + p * v[j][c];
                }
            }
            if let Some(c) = captured.as_mut() {
                c[head].push(probs);
            }
        }
    }
    for (i, m) in mixed.iter().enumerate() {
        let out = block.w_o.matvec(m);
        for (xv, o) in x.row_mut(i).iter_mut().zip(out) {
            *xv = *xv + o;
        }
    }
    captured
}

fn gelu<T: Real>(v: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let cubic = T::from_f64_lossy(0.044715);
    half * v * (T::one() + (c * (v + cubic * v * v * v)).tanh())
}

fn apply_mlp<T: Real>(block: &Block<T>, x: &mut Matrix<T>) {
    for i in 0..x.rows() {
        let h = block.ln_mlp.apply(x.row(i));
        let up: Vec<T> = block
            .w_up
            .matvec(&h)
            .into_iter()
            .zip(&block.b_up)
            .map(|(u, &b)| gelu(u + b))
            .collect();
        let down = block.w_down.matvec(&up);
        for ((xv, o), &b) in x.row_mut(i).iter_mut().zip(down).zip(&block.b_down) {
            *xv = *xv + o + b;
        }
    }
}

/// Mean of rows `[0, eos_index)`, L2-normalized.
pub fn pool<T: Real>(hidden: &HiddenStates<T>, eos_index: usize) -> Result<Embedding<T>> {
    if eos_index == 0 {
        return Err(Error::invalid("nothing to pool before EOS at index 0"));
    }
    if eos_index >= hidden.len() {
        return Err(Error::invalid(format!(
            "eos_index {eos_index} out of range for {} rows",
            hidden.len()
        )));
    }
    mean_rows(hidden.rows(), eos_index)
}

/// Pools according to `scope`, using the layout recorded in `hidden`.
pub fn pool_scoped<T: Real>(hidden: &HiddenStates<T>, scope: PoolScope) -> Result<Embedding<T>> {
    match scope {
        PoolScope::AllBeforeEos => pool(hidden, hidden.eos_index()),
        PoolScope::TokensOnly => {
            if hidden.n_tokens() == 0 {
                return Err(Error::invalid("no text tokens to pool"));
            }
            mean_rows(hidden.rows(), hidden.n_tokens())
        }
    }
}

fn mean_rows<T: Real>(rows: &Matrix<T>, count: usize) -> Result<Embedding<T>> {
    let mut acc = vec![T::zero(); rows.cols()];
    for r in rows.iter_rows().take(count) {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a = *a + v;
        }
    }
    let n = T::from_usize_lossy(count);
    normalize_vec(acc.into_iter().map(|v| v / n).collect())
}
