//! A miniature causal decoder-only transformer that serves as the frozen
//! backbone for all parameter-efficient tuning experiments.
//!
//! Post-layer-norm block layout, per layer:
//!
//! ```text
//! x_mid = LN1(x + MultiHeadAttention(x))
//! f     = FFN(x_mid)                        // h → ffn_dim → h, ReLU
//! z     = plugin.ffn_slot(layer, f)  or  f  // adapter insertion point
//! x'    = LN2(x_mid + z)
//! ```
//!
//! Adapters hook in through [`BackbonePlugin`]: `ffn_slot` replaces the FFN
//! output (bottleneck/Compacter adapters, fusion), `attn_delta` adds a rank-
//! restricted term to the query/value projections (LoRA). A plugin that
//! returns `None` everywhere leaves the backbone bitwise untouched.
//!
//! Causal masking is additive: future positions get −1e9 before the softmax,
//! which underflows to an exact zero probability, so logits at position `t`
//! are bitwise independent of tokens after `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{concat, cross_entropy, embedding_lookup, Tensor};

/// Sentinel target value skipped by the training loss.
pub const IGNORE_INDEX: i64 = -1;

/// Additive mask value for future positions; −1e9 pushes the softmax input
/// far enough below the row maximum that `exp` underflows to exactly 0.
const MASK_VALUE: f64 = -1e9;

/// Which attention projection a plugin delta applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnProj {
    Query,
    Value,
}

/// Hook points the backbone offers to parameter-efficient modules.
pub trait BackbonePlugin {
    /// Extra term added to the `proj` projection output at `layer`
    /// (input is the residual stream `x`, shape `[T, hidden]`).
    fn attn_delta(&self, _layer: usize, _proj: AttnProj, _x: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    /// Replacement for the FFN output at `layer`; `None` passes it through.
    fn ffn_slot(&self, _layer: usize, _ffn_out: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// The do-nothing plugin: the backbone runs exactly as pretrained.
pub struct PassThrough;

impl BackbonePlugin for PassThrough {}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    256
}
fn default_max_seq() -> usize {
    256
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl BackboneConfig {
    pub fn with_vocab(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            hidden_dim: default_hidden(),
            num_layers: default_layers(),
            num_heads: default_heads(),
            ffn_dim: default_ffn(),
            max_seq_len: default_max_seq(),
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::ModelConfig(
                "vocab_size must cover at least the special tokens".to_string(),
            ));
        }
        let nonzero = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::ModelConfig(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::ModelConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        // `<= 0.0` alone would wave NaN through.
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::ModelConfig("ln_eps must be positive".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Trace of one layer's internals, for tests and attention analysis.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// FFN output `f` — the input handed to the adapter slot.
    pub ffn_out: Tensor,
    /// What the slot produced (equals `ffn_out` when no plugin intervenes).
    pub slot_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub w_out: Tensor,
}

const INIT_STD: f64 = 0.02;

fn gauss(rng: &mut SeedRng, rows: usize, cols: usize) -> Tensor {
    Tensor::param(rng.normal_vec(rows * cols, INIT_STD), &[rows, cols])
        .expect("finite init values")
}

impl Backbone {
    /// Fresh trainable backbone; every weight stream is derived from `seed`
    /// and a per-tensor label, so construction order never matters.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let h = config.hidden_dim;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let r = |label: &str| SeedRng::derive(seed, &format!("layer{l}/{label}"));
            let attn = AttentionWeights {
                w_q: gauss(&mut r("w_q"), h, h),
                b_q: Tensor::param(vec![0.0; h], &[h])?,
                w_k: gauss(&mut r("w_k"), h, h),
                b_k: Tensor::param(vec![0.0; h], &[h])?,
                w_v: gauss(&mut r("w_v"), h, h),
                b_v: Tensor::param(vec![0.0; h], &[h])?,
                w_o: gauss(&mut r("w_o"), h, h),
                b_o: Tensor::param(vec![0.0; h], &[h])?,
            };
            layers.push(LayerWeights {
                attn,
                ln1_gain: Tensor::param(vec![1.0; h], &[h])?,
                ln1_bias: Tensor::param(vec![0.0; h], &[h])?,
                ffn_w1: gauss(&mut r("ffn_w1"), h, config.ffn_dim),
                ffn_b1: Tensor::param(vec![0.0; config.ffn_dim], &[config.ffn_dim])?,
                ffn_w2: gauss(&mut r("ffn_w2"), config.ffn_dim, h),
                ffn_b2: Tensor::param(vec![0.0; h], &[h])?,
                ln2_gain: Tensor::param(vec![1.0; h], &[h])?,
                ln2_bias: Tensor::param(vec![0.0; h], &[h])?,
            });
        }
        Ok(Backbone {
            tok_emb: gauss(
                &mut SeedRng::derive(seed, "tok_emb"),
                config.vocab_size,
                h,
            ),
            pos_emb: gauss(
                &mut SeedRng::derive(seed, "pos_emb"),
                config.max_seq_len,
                h,
            ),
            layers: layers
                .into_iter()
                .collect(),
            w_out: gauss(&mut SeedRng::derive(seed, "w_out"), h, config.vocab_size),
            config,
        })
    }

    /// Named parameters in a fixed order (checkpoint and optimizer order).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let mut push = |name: &str, t: &Tensor| out.push((format!("layer{l}.{name}"), t.clone()));
            push("attn.w_q", &lw.attn.w_q);
            push("attn.b_q", &lw.attn.b_q);
            push("attn.w_k", &lw.attn.w_k);
            push("attn.b_k", &lw.attn.b_k);
            push("attn.w_v", &lw.attn.w_v);
            push("attn.b_v", &lw.attn.b_v);
            push("attn.w_o", &lw.attn.w_o);
            push("attn.b_o", &lw.attn.b_o);
            push("ln1.gain", &lw.ln1_gain);
            push("ln1.bias", &lw.ln1_bias);
            push("ffn.w1", &lw.ffn_w1);
            push("ffn.b1", &lw.ffn_b1);
            push("ffn.w2", &lw.ffn_w2);
            push("ffn.b2", &lw.ffn_b2);
            push("ln2.gain", &lw.ln2_gain);
            push("ln2.bias", &lw.ln2_bias);
        }
        out.push(("w_out".to_string(), self.w_out.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace every parameter with a frozen copy (gradients will never be
    /// populated for them). The returned backbone shares no autograd state
    /// with the original.
    pub fn frozen(&self) -> Backbone {
        self.map_params(&|t| t.detach())
    }

    fn map_params(&self, f: &dyn Fn(&Tensor) -> Tensor) -> Backbone {
        Backbone {
            config: self.config.clone(),
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|lw| LayerWeights {
                    attn: AttentionWeights {
                        w_q: f(&lw.attn.w_q),
                        b_q: f(&lw.attn.b_q),
                        w_k: f(&lw.attn.w_k),
                        b_k: f(&lw.attn.b_k),
                        w_v: f(&lw.attn.w_v),
                        b_v: f(&lw.attn.b_v),
                        w_o: f(&lw.attn.w_o),
                        b_o: f(&lw.attn.b_o),
                    },
                    ln1_gain: f(&lw.ln1_gain),
                    ln1_bias: f(&lw.ln1_bias),
                    ffn_w1: f(&lw.ffn_w1),
                    ffn_b1: f(&lw.ffn_b1),
                    ffn_w2: f(&lw.ffn_w2),
                    ffn_b2: f(&lw.ffn_b2),
                    ln2_gain: f(&lw.ln2_gain),
                    ln2_bias: f(&lw.ln2_bias),
                })
                .collect(),
            w_out: f(&self.w_out),
        }
    }

    fn causal_mask(t: usize) -> Tensor {
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                data[i * t + j] = MASK_VALUE;
            }
        }
        Tensor::from_vec(data, &[t, t]).expect("mask is finite")
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn attention(
        &self,
        layer: usize,
        x: &Tensor,
        plugin: &dyn BackbonePlugin,
    ) -> Result<Tensor> {
        let lw = &self.layers[layer];
        let t = x.rows();
        let dh = self.config.head_dim();

        let mut q = x.matmul(&lw.attn.w_q)?.add_bias(&lw.attn.b_q)?;
        if let Some(delta) = plugin.attn_delta(layer, AttnProj::Query, x)? {
            q = q.add(&delta)?;
        }
        let k = x.matmul(&lw.attn.w_k)?.add_bias(&lw.attn.b_k)?;
        let mut v = x.matmul(&lw.attn.w_v)?.add_bias(&lw.attn.b_v)?;
        if let Some(delta) = plugin.attn_delta(layer, AttnProj::Value, x)? {
            v = v.add(&delta)?;
        }

        let mask = Self::causal_mask(t);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for i in 0..self.config.num_heads {
            let qh = q.slice_cols(i * dh, dh)?;
            let kh = k.slice_cols(i * dh, dh)?;
            let vh = v.slice_cols(i * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?.add(&mask)?;
            let probs = scores.softmax(1)?;
            heads.push(probs.matmul(&vh)?);
        }
        let ctx = concat(&heads, 1)?;
        ctx.matmul(&lw.attn.w_o)?.add_bias(&lw.attn.b_o)
    }

    /// Full forward pass: token ids → logits `[T, vocab]`, with per-layer
    /// traces of the adapter slot.
    pub fn forward_traced(
        &self,
        ids: &[usize],
        plugin: &dyn BackbonePlugin,
    ) -> Result<(Tensor, Vec<LayerTrace>)> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = embedding_lookup(&self.tok_emb, ids)?;
        let pos = embedding_lookup(&self.pos_emb, &positions)?;
        let mut x = tok.add(&pos)?;

        let mut traces = Vec::with_capacity(self.layers.len());
        for (l, lw) in self.layers.iter().enumerate() {
            let attn_out = self.attention(l, &x, plugin)?;
            let x_mid = x
                .add(&attn_out)?
                .layer_norm(&lw.ln1_gain, &lw.ln1_bias, self.config.ln_eps)?;
            let f = x_mid
                .matmul(&lw.ffn_w1)?
                .add_bias(&lw.ffn_b1)?
                .relu()?
                .matmul(&lw.ffn_w2)?
                .add_bias(&lw.ffn_b2)?;
            let z = match plugin.ffn_slot(l, &f)? {
                Some(z) => z,
                None => f.clone(),
            };
            x = x_mid
                .add(&z)?
                .layer_norm(&lw.ln2_gain, &lw.ln2_bias, self.config.ln_eps)?;
            traces.push(LayerTrace {
                ffn_out: f,
                slot_out: z,
            });
        }
        Ok((x.matmul(&self.w_out)?, traces))
    }

    pub fn forward(&self, ids: &[usize], plugin: &dyn BackbonePlugin) -> Result<Tensor> {
        Ok(self.forward_traced(ids, plugin)?.0)
    }

    /// Next-token training loss: logits at position `t` are scored against
    /// the token at `t + 1` wherever `loss_mask[t + 1]` is set; everything
    /// else (prompt and padding) is ignored.
    pub fn clm_loss(
        &self,
        ids: &[usize],
        loss_mask: &[bool],
        plugin: &dyn BackbonePlugin,
    ) -> Result<Tensor> {
        if ids.len() != loss_mask.len() {
            return Err(Error::ShapeMismatch {
                op: "clm_loss",
                detail: format!("{} ids vs {} mask flags", ids.len(), loss_mask.len()),
            });
        }
        let logits = self.forward(ids, plugin)?;
        let mut targets = vec![IGNORE_INDEX; ids.len()];
        for t in 0..ids.len() - 1 {
            if loss_mask[t + 1] {
                targets[t] = ids[t + 1] as i64;
            }
        }
        cross_entropy(&logits, &targets, IGNORE_INDEX)
    }

    /// Deterministic greedy continuation. Returns only the newly generated
    /// tokens, stopping before `eos_id`, at `max_new` tokens, or at the
    /// positional limit, whichever comes first. Argmax ties break toward
    /// the lowest token id.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        max_new: usize,
        eos_id: usize,
        plugin: &dyn BackbonePlugin,
    ) -> Result<Vec<usize>> {
        self.check_ids(prompt)?;
        let mut ids = prompt.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            if ids.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.forward(&ids, plugin)?;
            let v = self.config.vocab_size;
            let guard = logits.read();
            let last = &guard[(ids.len() - 1) * v..ids.len() * v];
            let next = last
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 {
                        (i, x)
                    } else {
                        best
                    }
                })
                .0;
            drop(guard);
            if next == eos_id {
                break;
            }
            ids.push(next);
            generated.push(next);
        }
        Ok(generated)
    }
}
