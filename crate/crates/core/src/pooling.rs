//! Utterance-level pooling.
//!
//! Global query attention builds a query from VAD-weighted sums of both
//! feature streams, re-projects it per domain, and attends over each stream
//! with multi-head attention. The self-attention pooling is the structured
//! self-attentive baseline averaged over heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{frame_mask, Linear};
use crate::params::{ParamBuilder, ParamId, Session};
use crate::real::Real;
use crate::tensor::Tensor;

/// Score given to padded frames before a softmax over time.
pub const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, Copy)]
pub struct GlobalQuery {
    /// `[B, D_w]`
    pub q_w: Var,
    /// `[B, D_s]`
    pub q_s: Var,
    /// `[B, D_w + D_s]`, the concatenation `[q_w, q_s]`.
    pub q_g: Var,
}

/// `q_w = H_w^T v`, `q_s = H_s^T v` per item, unnormalized unless
/// `normalize` divides the weights by their sum first.
pub fn temp_queries<R: Real>(s: &mut Session<'_, R>, h_w: Var, h_s: Var, vad: Var, normalize: bool) -> Result<GlobalQuery> {
    let (sw, ss, sv) = (s.g.shape(h_w).to_vec(), s.g.shape(h_s).to_vec(), s.g.shape(vad).to_vec());
    if sw.len() != 3 || ss.len() != 3 || sv.len() != 2 || sw[..2] != ss[..2] || sw[..2] != sv[..] {
        return Err(Error::Shape {
            op: "temp_queries",
            lhs: sw,
            rhs: ss,
        });
    }
    let (b, t) = (sv[0], sv[1]);
    let v = if normalize { s.g.row_normalize(vad)? } else { vad };
    let v = s.g.reshape(v, &[b, 1, t])?;
    let q_w = s.g.batch_matmul(v, h_w)?;
    let q_w = s.g.reshape(q_w, &[b, sw[2]])?;
    let q_s = s.g.batch_matmul(v, h_s)?;
    let q_s = s.g.reshape(q_s, &[b, ss[2]])?;
    let q_g = s.g.concat(&[q_w, q_s], 1)?;
    Ok(GlobalQuery { q_w, q_s, q_g })
}

fn score_mask<R: Real>(rows: usize, per_item: usize, t: usize, lengths: &[usize]) -> Tensor<R> {
    Tensor::from_fn(&[rows, 1, t], |i| {
        let item = i / t / per_item;
        if i % t < lengths[item] {
            R::zero()
        } else {
            R::of(MASKED_SCORE)
        }
    })
}

/// Multi-head attention with a single query per item; keys and values are
/// the frame features themselves, followed by an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttend {
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[B, d]`
    pub output: Var,
    /// `[B * heads, 1, T]`, rows sum to one.
    pub weights: Var,
}

impl MultiHeadAttend {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(alloc::format!("dimension {dim} not divisible into {heads} heads")));
        }
        Ok(pb.scope(name, |pb| Self {
            out: Linear::new(pb, "out", dim, dim, true),
            dim,
            heads,
        }))
    }

    /// `query: [B, d]`, `frames: [B, T, d]`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, query: Var, frames: Var, lengths: &[usize]) -> Result<Attended> {
        let shape = s.g.shape(frames).to_vec();
        if shape.len() != 3 || shape[2] != self.dim || s.g.shape(query) != [shape[0], self.dim] {
            return Err(Error::Shape {
                op: "multi_head_attend",
                lhs: s.g.shape(query).to_vec(),
                rhs: shape,
            });
        }
        let (b, t, h) = (shape[0], shape[1], self.heads);
        let dh = self.dim / h;
        let q = s.g.reshape(query, &[b * h, 1, dh])?;
        let kv = s.g.reshape(frames, &[b, t, h, dh])?;
        let kv = s.g.permute(kv, &[0, 2, 1, 3])?;
        let kv = s.g.reshape(kv, &[b * h, t, dh])?;
        let keys_t = s.g.transpose(kv)?;
        let scores = s.g.batch_matmul(q, keys_t)?;
        let scores = s.g.scale(scores, R::one() / R::of(dh as f64).sqrt());
        let scores = if lengths.iter().any(|&l| l < t) {
            let m = s.g.constant(score_mask(b * h, h, t, lengths));
            s.g.add(scores, m)?
        } else {
            scores
        };
        let weights = s.g.softmax(scores)?;
        let heads_out = s.g.batch_matmul(weights, kv)?;
        let concat = s.g.reshape(heads_out, &[b, self.dim])?;
        let output = self.out.forward(s, concat)?;
        Ok(Attended { output, weights })
    }
}

/// Query re-projection and per-domain attention.
#[derive(Debug, Clone)]
pub struct GlobalQueryPooling {
    pub to_word: Linear,
    pub to_speaker: Linear,
    pub attend_word: MultiHeadAttend,
    pub attend_speaker: MultiHeadAttend,
    pub normalize_weights: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PooledPair {
    pub query: GlobalQuery,
    pub q_w_star: Var,
    pub q_s_star: Var,
    pub word: Attended,
    pub speaker: Attended,
}

impl GlobalQueryPooling {
    pub fn new<R: Real, G: Rng + ?Sized>(
        pb: &mut ParamBuilder<'_, R, G>,
        d_w: usize,
        d_s: usize,
        heads: usize,
        normalize_weights: bool,
    ) -> Result<Self> {
        pb.scope("global_query", |pb| {
            Ok(Self {
                to_word: Linear::new(pb, "linear_w", d_w + d_s, d_w, true),
                to_speaker: Linear::new(pb, "linear_s", d_w + d_s, d_s, true),
                attend_word: MultiHeadAttend::new(pb, "mha_w", d_w, heads)?,
                attend_speaker: MultiHeadAttend::new(pb, "mha_s", d_s, heads)?,
                normalize_weights,
            })
        })
    }

    /// Mutually informed domain queries `(q_w*, q_s*)` from `q_g`.
    pub fn domain_queries<R: Real>(&self, s: &mut Session<'_, R>, q_g: Var) -> Result<(Var, Var)> {
        Ok((self.to_word.forward(s, q_g)?, self.to_speaker.forward(s, q_g)?))
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, h_w: Var, h_s: Var, vad: Var, lengths: &[usize]) -> Result<PooledPair> {
        let query = temp_queries(s, h_w, h_s, vad, self.normalize_weights)?;
        let (q_w_star, q_s_star) = self.domain_queries(s, query.q_g)?;
        let word = self.attend_word.forward(s, q_w_star, h_w, lengths)?;
        let speaker = self.attend_speaker.forward(s, q_s_star, h_s, lengths)?;
        Ok(PooledPair {
            query,
            q_w_star,
            q_s_star,
            word,
            speaker,
        })
    }
}

/// `e = mean_h softmax_T(v_h . tanh(W H^T)) H`.
#[derive(Debug, Clone)]
pub struct SelfAttentionPooling {
    /// `[d, hidden]` (the transpose of the usual `hidden x d` projection).
    pub proj: ParamId,
    /// `[hidden, heads]`, one scoring vector per head.
    pub score: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl SelfAttentionPooling {
    pub fn new<R: Real, G: Rng + ?Sized>(pb: &mut ParamBuilder<'_, R, G>, name: &str, dim: usize, hidden: usize, heads: usize) -> Self {
        pb.scope(name, |pb| Self {
            proj: pb.weight("w", &[dim, hidden], dim, hidden),
            score: pb.weight("v", &[hidden, heads], hidden, 1),
            dim,
            heads,
        })
    }

    /// `frames: [B, T, d]` to `([B, d], weights [B, heads, T])`.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, frames: Var, lengths: &[usize]) -> Result<(Var, Var)> {
        let shape = s.g.shape(frames).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Shape {
                op: "self_attention",
                lhs: shape,
                rhs: alloc::vec![self.dim],
            });
        }
        let (b, t) = (shape[0], shape[1]);
        let w = s.param(self.proj);
        let v = s.param(self.score);
        let flat = s.g.reshape(frames, &[b * t, self.dim])?;
        let a = s.g.matmul(flat, w)?;
        let a = s.g.tanh(a);
        let scores = s.g.matmul(a, v)?;
        let scores = s.g.reshape(scores, &[b, t, self.heads])?;
        let scores = s.g.transpose(scores)?;
        let scores = if lengths.iter().any(|&l| l < t) {
            let mask = frame_mask::<R>(&[b, self.heads, t], 2, lengths).map(|m| if m > R::zero() { R::zero() } else { R::of(MASKED_SCORE) });
            let mask = s.g.constant(mask);
            s.g.add(scores, mask)?
        } else {
            scores
        };
        let weights = s.g.softmax(scores)?;
        let pooled = s.g.batch_matmul(weights, frames)?;
        Ok((s.g.mean_axis(pooled, 1)?, weights))
    }
}

/// Rescales each row of `e: [B, d]` to L2 norm `alpha`.
pub fn apply_norm_constraint<R: Real>(s: &mut Session<'_, R>, e: Var, alpha: f64) -> Result<Var> {
    s.g.scale_to_norm(e, R::of(alpha))
}
