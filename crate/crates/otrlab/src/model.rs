//! Tiny causal language models on the autodiff engine.
//!
//! Two architectures share one parameter/forward interface:
//!
//! - [`ModelKind::Transformer`]: a pre-norm transformer with learned
//!   absolute positional embeddings, per-head attention projections,
//!   bias-free linear maps, a GELU MLP, a final layer norm, and an untied
//!   output projection.
//! - [`ModelKind::Bigram`]: a tabular model whose logits for the next token
//!   are a learned `[vocab, vocab]` table row for the current token. Its
//!   exactly-computable distributions make it the workhorse of the
//!   estimator verification suites.
//!
//! Parameters live outside any graph as plain `f64` vectors; a forward pass
//! binds them as leaves on a caller-supplied graph (`bind` for one leaf per
//! tensor, `bind_flat` for slices of a single flat vector, which is what
//! whole-model gradient checking uses). Initialization draws every weight
//! matrix i.i.d. Gaussian(0, 0.02^2) from a per-tensor counter-keyed
//! stream, so models are reproducible regardless of construction order.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng;
use crate::tensor::{Graph, Var};
use crate::Result;

/// Additive fill for masked attention scores.
const MASK_FILL: f64 = -1e9;
/// Standard deviation of weight initialization.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Bigram,
}

/// Architecture hyperparameters. For `Bigram`, only `vocab_size`,
/// `context_len`, and `init_seed` matter; the transformer dimensions are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Transformer,
            vocab_size: 24,
            context_len: 32,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "model.vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config(format!(
                "model.context_len must be at least 2, got {}",
                self.context_len
            )));
        }
        if self.kind == ModelKind::Transformer {
            for (name, v) in [
                ("model.d_model", self.d_model),
                ("model.n_heads", self.n_heads),
                ("model.n_layers", self.n_layers),
                ("model.d_ff", self.d_ff),
            ] {
                if v == 0 {
                    return Err(Error::Config(format!("{name} must be positive")));
                }
            }
            if self.d_model % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "model.d_model ({}) must be divisible by model.n_heads ({})",
                    self.d_model, self.n_heads
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

enum InitKind {
    Gaussian,
    Ones,
    Zeros,
}

/// Enumerates parameter tensors (name, shape, init) in their canonical
/// order. This order is the single source of truth shared by
/// initialization, binding, forward passes, checkpoints, and the optimizer.
fn visit_specs(cfg: &ModelConfig, mut f: impl FnMut(String, Vec<usize>, InitKind)) {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    match cfg.kind {
        ModelKind::Bigram => {
            f("table".into(), vec![v, v], InitKind::Gaussian);
        }
        ModelKind::Transformer => {
            let dh = cfg.head_dim();
            f("tok_emb".into(), vec![v, d], InitKind::Gaussian);
            f("pos_emb".into(), vec![cfg.context_len, d], InitKind::Gaussian);
            for i in 0..cfg.n_layers {
                f(format!("layer{i}.ln1.gain"), vec![d], InitKind::Ones);
                f(format!("layer{i}.ln1.bias"), vec![d], InitKind::Zeros);
                for h in 0..cfg.n_heads {
                    f(format!("layer{i}.attn.head{h}.wq"), vec![d, dh], InitKind::Gaussian);
                    f(format!("layer{i}.attn.head{h}.wk"), vec![d, dh], InitKind::Gaussian);
                    f(format!("layer{i}.attn.head{h}.wv"), vec![d, dh], InitKind::Gaussian);
                    f(format!("layer{i}.attn.head{h}.wo"), vec![dh, d], InitKind::Gaussian);
                }
                f(format!("layer{i}.ln2.gain"), vec![d], InitKind::Ones);
                f(format!("layer{i}.ln2.bias"), vec![d], InitKind::Zeros);
                f(format!("layer{i}.mlp.w1"), vec![d, cfg.d_ff], InitKind::Gaussian);
                f(format!("layer{i}.mlp.w2"), vec![cfg.d_ff, d], InitKind::Gaussian);
            }
            f("final_ln.gain".into(), vec![d], InitKind::Ones);
            f("final_ln.bias".into(), vec![d], InitKind::Zeros);
            f("out_proj".into(), vec![d, v], InitKind::Gaussian);
        }
    }
}

/// A model: configuration plus its parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn init(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = Vec::new();
        visit_specs(config, |name, shape, kind| {
            params.push((name, shape, kind));
        });
        let params = params
            .into_iter()
            .enumerate()
            .map(|(idx, (name, shape, kind))| {
                let n: usize = shape.iter().product();
                let values = match kind {
                    InitKind::Ones => vec![1.0; n],
                    InitKind::Zeros => vec![0.0; n],
                    InitKind::Gaussian => {
                        let mut stream = rng::init_stream(config.init_seed, idx as u64);
                        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
                        (0..n).map(|_| dist.sample(&mut stream)).collect()
                    }
                };
                Parameter { name, shape, values }
            })
            .collect();
        Ok(Model { config: config.clone(), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// All parameter values concatenated in canonical order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.values);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in canonical order.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidInput(format!(
                "flat vector has {} values, model has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Binds each parameter as a gradient-taking leaf on `g`, in canonical
    /// order (the order of [`Model::parameters`]).
    pub fn bind(&self, g: &Graph) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| g.leaf(p.values.clone(), &p.shape, true))
            .collect()
    }

    /// Binds parameters as slices of one flat leaf of length
    /// [`Model::param_count`]. Gradient checking differentiates through
    /// this single vector.
    pub fn bind_flat(&self, flat: &Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.params.len());
        let mut off = 0;
        for p in &self.params {
            let piece = flat.slice(off, p.len())?;
            out.push(if p.shape.len() == 1 { piece } else { piece.reshape(&p.shape)? });
            off += p.len();
        }
        Ok(out)
    }

    /// Next-token logits for a token sequence, using an existing parameter
    /// binding (from [`Model::bind`] or [`Model::bind_flat`]). Returns a
    /// `[len, vocab]` tensor; row `t` scores the token following
    /// `tokens[t]`.
    pub fn logits_with(&self, g: &Graph, bound: &[Var], tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("logits require at least one token".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if bound.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "bound parameter list has {} tensors, model has {}",
                bound.len(),
                self.params.len()
            )));
        }
        match self.config.kind {
            ModelKind::Bigram => bound[0].gather_rows(tokens),
            ModelKind::Transformer => self.transformer_logits(g, bound, tokens),
        }
    }

    /// Convenience: binds gradient-taking leaves and runs the forward pass.
    /// Returns the logits and the bound parameter leaves (whose `grad` is
    /// populated after `backward`), in canonical order.
    pub fn logits(&self, g: &Graph, tokens: &[usize]) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(g)?;
        let out = self.logits_with(g, &bound, tokens)?;
        Ok((out, bound))
    }

    /// Forward pass without gradient bookkeeping; returns the raw logit
    /// rows. Used by sampling-only paths (evaluation decoding, side
    /// rollouts).
    pub fn logits_values(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.values.clone(), &p.shape, false))
            .collect::<Result<_>>()?;
        Ok(self.logits_with(&g, &bound, tokens)?.values())
    }

    fn transformer_logits(&self, g: &Graph, bound: &[Var], tokens: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let len = tokens.len();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let causal = causal_mask(len);
        let positions: Vec<usize> = (0..len).collect();

        let mut cursor = bound.iter();
        let mut next = || -> Result<&Var> {
            cursor.next().ok_or_else(|| Error::InvalidInput("parameter binding exhausted".into()))
        };

        let tok_emb = next()?;
        let pos_emb = next()?;
        let mut h = tok_emb.gather_rows(tokens)?.add(&pos_emb.gather_rows(&positions)?)?;

        for _ in 0..cfg.n_layers {
            let ln1_gain = next()?;
            let ln1_bias = next()?;
            let a = h.layer_norm(ln1_gain, ln1_bias)?;
            let mut attn: Option<Var> = None;
            for _ in 0..cfg.n_heads {
                let wq = next()?;
                let wk = next()?;
                let wv = next()?;
                let wo = next()?;
                let q = a.matmul(wq)?;
                let k = a.matmul(wk)?;
                let v = a.matmul(wv)?;
                let scores = q.matmul(&k.transpose()?)?.scale(scale).masked_add(&causal, MASK_FILL)?;
                let probs = scores.log_softmax()?.exp()?;
                let head_out = probs.matmul(&v)?.matmul(wo)?;
                attn = Some(match attn {
                    Some(acc) => acc.add(&head_out)?,
                    None => head_out,
                });
            }
            h = h.add(&attn.expect("n_heads >= 1"))?;

            let ln2_gain = next()?;
            let ln2_bias = next()?;
            let m = h.layer_norm(ln2_gain, ln2_bias)?;
            let w1 = next()?;
            let w2 = next()?;
            let ff = m.matmul(w1)?.gelu()?.matmul(w2)?;
            h = h.add(&ff)?;
        }

        let final_gain = next()?;
        let final_bias = next()?;
        let out_proj = next()?;
        let _ = g;
        h.layer_norm(final_gain, final_bias)?.matmul(out_proj)
    }

    /// Order-insensitive digest of all parameter bits; used to compare
    /// models for exact equality in tests and resume checks.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &v in &p.values {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        acc
    }
}

/// Upper-triangular (strictly future) mask for an `[len, len]` score
/// matrix: `true` marks positions to suppress.
fn causal_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            mask[i * len + j] = true;
        }
    }
    mask
}
