//! Parameter-efficient adapter methods that attach to a frozen backbone.
//!
//! Three families, all initialized so a freshly built stack reproduces the
//! backbone's output exactly (the "do no harm at step zero" property):
//!
//! * **Bottleneck** — per layer, a down-projection to `bottleneck_dim`,
//!   ReLU, up-projection back to `hidden`, plus a residual around the
//!   whole block. The up-projection starts at zero.
//! * **Compacter** — the same bottleneck shape, but each projection matrix
//!   is a parameterized hypercomplex product: the sum over `phm_n` terms of
//!   `A_i ⊗ (s_i · t_iᵀ)`, where the small `A_i ∈ ℝ^{n×n}` factors are
//!   *shared* across layers and across the down/up projections of the
//!   stack. Only the rank-one factors are per-layer, which is where the
//!   parameter savings come from. The up-projection's `t_i` start at zero.
//! * **LoRA** — rank-`r` additive deltas `x·A·B · (α/r)` on the attention
//!   query and value projections. `B` starts at zero.
//!
//! A stack covers every backbone layer and plugs in via
//! [`BackbonePlugin`]; bottleneck/Compacter stacks additionally expose
//! [`AdapterStack::slot_forward`] so a fusion layer can query several
//! adapters side by side.

use serde::{Deserialize, Serialize};

use crate::backbone::{AttnProj, BackboneConfig, BackbonePlugin};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Bottleneck,
    Compacter,
    Lora,
}

impl AdapterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::Bottleneck => "bottleneck",
            AdapterKind::Compacter => "compacter",
            AdapterKind::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Result<AdapterKind> {
        match s {
            "bottleneck" => Ok(AdapterKind::Bottleneck),
            "compacter" => Ok(AdapterKind::Compacter),
            "lora" => Ok(AdapterKind::Lora),
            other => Err(Error::AdapterConfig(format!(
                "unknown adapter kind `{other}` (expected bottleneck, compacter, or lora)"
            ))),
        }
    }

    /// Whether this kind produces a slot output a fusion layer can attend
    /// over (LoRA modifies attention projections instead and cannot).
    pub fn fusable(&self) -> bool {
        !matches!(self, AdapterKind::Lora)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Language (or task) tag this adapter was trained for.
    pub language: String,
    #[serde(default = "default_bottleneck_dim")]
    pub bottleneck_dim: usize,
    #[serde(default = "default_phm_n")]
    pub phm_n: usize,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_lora_alpha")]
    pub lora_alpha: f64,
}

fn default_bottleneck_dim() -> usize {
    16
}
fn default_phm_n() -> usize {
    4
}
fn default_lora_rank() -> usize {
    16
}
fn default_lora_alpha() -> f64 {
    16.0
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, language: &str) -> AdapterSpec {
        AdapterSpec {
            kind,
            language: language.to_string(),
            bottleneck_dim: default_bottleneck_dim(),
            phm_n: default_phm_n(),
            lora_rank: default_lora_rank(),
            lora_alpha: default_lora_alpha(),
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.language.is_empty() {
            return Err(Error::AdapterConfig("language tag is empty".to_string()));
        }
        match self.kind {
            AdapterKind::Bottleneck => {
                if self.bottleneck_dim == 0 {
                    return Err(Error::AdapterConfig(
                        "bottleneck_dim must be positive".to_string(),
                    ));
                }
            }
            AdapterKind::Compacter => {
                if self.phm_n == 0 {
                    return Err(Error::AdapterConfig("phm_n must be positive".to_string()));
                }
                if !backbone.hidden_dim.is_multiple_of(self.phm_n) {
                    return Err(Error::AdapterConfig(format!(
                        "hidden_dim {} not divisible by phm_n {}",
                        backbone.hidden_dim, self.phm_n
                    )));
                }
                if self.bottleneck_dim == 0 || !self.bottleneck_dim.is_multiple_of(self.phm_n) {
                    return Err(Error::AdapterConfig(format!(
                        "bottleneck_dim {} not divisible by phm_n {}",
                        self.bottleneck_dim, self.phm_n
                    )));
                }
            }
            AdapterKind::Lora => {
                if self.lora_rank == 0 {
                    return Err(Error::AdapterConfig("lora_rank must be positive".to_string()));
                }
                // `<= 0.0` alone would wave NaN through.
                if self.lora_alpha.is_nan() || self.lora_alpha <= 0.0 {
                    return Err(Error::AdapterConfig("lora_alpha must be positive".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Sum of Kronecker products `Σ_i A_i ⊗ (s_i · t_iᵀ)`, accumulated left to
/// right. With `A_i ∈ ℝ^{n×n}`, `s_i ∈ ℝ^{p×1}`, `t_i ∈ ℝ^{1×q}` the result
/// is an `(n·p) × (n·q)` projection built from `n·(n + p + q)` parameters.
pub fn phm_compose(a: &[Tensor], s: &[Tensor], t: &[Tensor]) -> Result<Tensor> {
    if a.is_empty() || a.len() != s.len() || a.len() != t.len() {
        return Err(Error::AdapterConfig(format!(
            "phm factor count mismatch: {} / {} / {}",
            a.len(),
            s.len(),
            t.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for i in 0..a.len() {
        let term = a[i].kron(&s[i].matmul(&t[i])?)?;
        acc = Some(match acc {
            None => term,
            Some(w) => w.add(&term)?,
        });
    }
    Ok(acc.expect("at least one factor"))
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
enum LayerModule {
    Bottleneck {
        down: Tensor,
        b_down: Tensor,
        up: Tensor,
        b_up: Tensor,
    },
    Compacter {
        down_s: Vec<Tensor>,
        down_t: Vec<Tensor>,
        b_down: Tensor,
        up_s: Vec<Tensor>,
        up_t: Vec<Tensor>,
        b_up: Tensor,
    },
    Lora {
        q_a: Tensor,
        q_b: Tensor,
        v_a: Tensor,
        v_b: Tensor,
    },
}

/// One adapter of a given kind attached to every backbone layer.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub spec: AdapterSpec,
    hidden: usize,
    /// Compacter's shared Kronecker factors (empty for other kinds).
    shared_a: Vec<Tensor>,
    layers: Vec<LayerModule>,
}

impl AdapterStack {
    pub fn new(spec: AdapterSpec, backbone: &BackboneConfig, seed: u64) -> Result<AdapterStack> {
        spec.validate(backbone)?;
        let h = backbone.hidden_dim;
        let d = spec.bottleneck_dim;
        let n = spec.phm_n;
        let gauss = |rng: &mut SeedRng, rows: usize, cols: usize| {
            Tensor::param(rng.normal_vec(rows * cols, INIT_STD), &[rows, cols])
                .expect("finite init")
        };
        let zeros = |shape: &[usize]| {
            Tensor::param(vec![0.0; shape.iter().product()], shape).expect("zeros are finite")
        };

        let shared_a = if spec.kind == AdapterKind::Compacter {
            let mut rng = SeedRng::derive(seed, "shared_a");
            (0..n).map(|_| gauss(&mut rng, n, n)).collect()
        } else {
            Vec::new()
        };

        let mut layers = Vec::with_capacity(backbone.num_layers);
        for l in 0..backbone.num_layers {
            let r = |label: &str| SeedRng::derive(seed, &format!("layer{l}/{label}"));
            let module = match spec.kind {
                AdapterKind::Bottleneck => LayerModule::Bottleneck {
                    down: gauss(&mut r("down"), h, d),
                    b_down: zeros(&[d]),
                    // Zero up-projection ⇒ the residual alone flows through.
                    up: zeros(&[d, h]),
                    b_up: zeros(&[h]),
                },
                AdapterKind::Compacter => LayerModule::Compacter {
                    down_s: (0..n)
                        .map(|i| gauss(&mut r(&format!("down_s{i}")), h / n, 1))
                        .collect(),
                    down_t: (0..n)
                        .map(|i| gauss(&mut r(&format!("down_t{i}")), 1, d / n))
                        .collect(),
                    b_down: zeros(&[d]),
                    up_s: (0..n)
                        .map(|i| gauss(&mut r(&format!("up_s{i}")), d / n, 1))
                        .collect(),
                    // Zero t-factors null the whole up-projection at start.
                    up_t: (0..n).map(|_| zeros(&[1, h / n])).collect(),
                    b_up: zeros(&[h]),
                },
                AdapterKind::Lora => LayerModule::Lora {
                    q_a: gauss(&mut r("q_a"), h, spec.lora_rank),
                    q_b: zeros(&[spec.lora_rank, h]),
                    v_a: gauss(&mut r("v_a"), h, spec.lora_rank),
                    v_b: zeros(&[spec.lora_rank, h]),
                },
            };
            layers.push(module);
        }
        Ok(AdapterStack {
            spec,
            hidden: h,
            shared_a,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// A copy whose parameters never receive gradients (the state frozen
    /// adapters are held in while a fusion layer trains on top of them).
    pub fn frozen(&self) -> AdapterStack {
        let f = |t: &Tensor| t.detach();
        AdapterStack {
            spec: self.spec.clone(),
            hidden: self.hidden,
            shared_a: self.shared_a.iter().map(f).collect(),
            layers: self
                .layers
                .iter()
                .map(|m| match m {
                    LayerModule::Bottleneck {
                        down,
                        b_down,
                        up,
                        b_up,
                    } => LayerModule::Bottleneck {
                        down: f(down),
                        b_down: f(b_down),
                        up: f(up),
                        b_up: f(b_up),
                    },
                    LayerModule::Compacter {
                        down_s,
                        down_t,
                        b_down,
                        up_s,
                        up_t,
                        b_up,
                    } => LayerModule::Compacter {
                        down_s: down_s.iter().map(f).collect(),
                        down_t: down_t.iter().map(f).collect(),
                        b_down: f(b_down),
                        up_s: up_s.iter().map(f).collect(),
                        up_t: up_t.iter().map(f).collect(),
                        b_up: f(b_up),
                    },
                    LayerModule::Lora { q_a, q_b, v_a, v_b } => LayerModule::Lora {
                        q_a: f(q_a),
                        q_b: f(q_b),
                        v_a: f(v_a),
                        v_b: f(v_b),
                    },
                })
                .collect(),
        }
    }

    /// Named trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, a) in self.shared_a.iter().enumerate() {
            out.push((format!("shared.a{i}"), a.clone()));
        }
        for (l, module) in self.layers.iter().enumerate() {
            let mut push = |name: String, t: &Tensor| out.push((format!("layer{l}.{name}"), t.clone()));
            match module {
                LayerModule::Bottleneck {
                    down,
                    b_down,
                    up,
                    b_up,
                } => {
                    push("down".to_string(), down);
                    push("b_down".to_string(), b_down);
                    push("up".to_string(), up);
                    push("b_up".to_string(), b_up);
                }
                LayerModule::Compacter {
                    down_s,
                    down_t,
                    b_down,
                    up_s,
                    up_t,
                    b_up,
                } => {
                    for (i, t) in down_s.iter().enumerate() {
                        push(format!("down_s{i}"), t);
                    }
                    for (i, t) in down_t.iter().enumerate() {
                        push(format!("down_t{i}"), t);
                    }
                    push("b_down".to_string(), b_down);
                    for (i, t) in up_s.iter().enumerate() {
                        push(format!("up_s{i}"), t);
                    }
                    for (i, t) in up_t.iter().enumerate() {
                        push(format!("up_t{i}"), t);
                    }
                    push("b_up".to_string(), b_up);
                }
                LayerModule::Lora { q_a, q_b, v_a, v_b } => {
                    push("q_a".to_string(), q_a);
                    push("q_b".to_string(), q_b);
                    push("v_a".to_string(), v_a);
                    push("v_b".to_string(), v_b);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// The adapter transform at one layer: `up(relu(down(f))) + f`.
    /// Only bottleneck and Compacter stacks have a slot form; LoRA lives
    /// inside attention and cannot be queried this way.
    pub fn slot_forward(&self, layer: usize, f: &Tensor) -> Result<Tensor> {
        let module = self.layers.get(layer).ok_or_else(|| {
            Error::AdapterConfig(format!(
                "layer {layer} out of range for a {}-layer stack",
                self.layers.len()
            ))
        })?;
        match module {
            LayerModule::Bottleneck {
                down,
                b_down,
                up,
                b_up,
            } => {
                let hdim = f
                    .matmul(down)?
                    .add_bias(b_down)?
                    .relu()?
                    .matmul(up)?
                    .add_bias(b_up)?;
                hdim.add(f)
            }
            LayerModule::Compacter {
                down_s,
                down_t,
                b_down,
                up_s,
                up_t,
                b_up,
            } => {
                let w_down = phm_compose(&self.shared_a, down_s, down_t)?;
                let w_up = phm_compose(&self.shared_a, up_s, up_t)?;
                let hdim = f
                    .matmul(&w_down)?
                    .add_bias(b_down)?
                    .relu()?
                    .matmul(&w_up)?
                    .add_bias(b_up)?;
                hdim.add(f)
            }
            LayerModule::Lora { .. } => Err(Error::AdapterConfig(
                "LoRA adapters have no feed-forward slot output".to_string(),
            )),
        }
    }

    fn lora_delta(&self, layer: usize, proj: AttnProj, x: &Tensor) -> Result<Option<Tensor>> {
        let LayerModule::Lora { q_a, q_b, v_a, v_b } = &self.layers[layer] else {
            return Ok(None);
        };
        let (a, b) = match proj {
            AttnProj::Query => (q_a, q_b),
            AttnProj::Value => (v_a, v_b),
        };
        let scaling = self.spec.lora_alpha / self.spec.lora_rank as f64;
        Ok(Some(x.matmul(a)?.matmul(b)?.scale(scaling)?))
    }
}

impl BackbonePlugin for AdapterStack {
    fn attn_delta(&self, layer: usize, proj: AttnProj, x: &Tensor) -> Result<Option<Tensor>> {
        if self.spec.kind == AdapterKind::Lora {
            self.lora_delta(layer, proj, x)
        } else {
            Ok(None)
        }
    }

    fn ffn_slot(&self, layer: usize, ffn_out: &Tensor) -> Result<Option<Tensor>> {
        if self.spec.kind.fusable() {
            Ok(Some(self.slot_forward(layer, ffn_out)?))
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, PassThrough};
    use crate::rng::SeedRng;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 11,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 12,
            ln_eps: 1e-5,
        }
    }

    fn tiny_spec(kind: AdapterKind) -> AdapterSpec {
        AdapterSpec {
            kind,
            language: "ruby".to_string(),
            bottleneck_dim: 4,
            phm_n: 2,
            lora_rank: 3,
            lora_alpha: 3.0,
        }
    }

    #[test]
    fn spec_validation() {
        let bb = tiny_backbone();
        assert!(tiny_spec(AdapterKind::Bottleneck).validate(&bb).is_ok());
        let mut s = tiny_spec(AdapterKind::Compacter);
        s.phm_n = 3; // 8 % 3 != 0
        assert!(s.validate(&bb).is_err());
        s = tiny_spec(AdapterKind::Compacter);
        s.bottleneck_dim = 6; // 6 % 2 == 0 but 8 % 2 == 0 → fine; make it odd
        assert!(s.validate(&bb).is_ok());
        s.bottleneck_dim = 5;
        assert!(s.validate(&bb).is_err());
        s = tiny_spec(AdapterKind::Lora);
        s.lora_rank = 0;
        assert!(s.validate(&bb).is_err());
        s = tiny_spec(AdapterKind::Bottleneck);
        s.language.clear();
        assert!(s.validate(&bb).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // indexed loops keep the expansion legible
    fn phm_compose_matches_brute_force() {
        // Independent oracle: expand each Kronecker product element by
        // element and sum, then compare with the graph-built version.
        let mut rng = SeedRng::new(42);
        let n = 2;
        let (p, q) = (3, 2);
        let a: Vec<Tensor> = (0..n)
            .map(|_| Tensor::param(rng.normal_vec(n * n, 1.0), &[n, n]).unwrap())
            .collect();
        let s: Vec<Tensor> = (0..n)
            .map(|_| Tensor::param(rng.normal_vec(p, 1.0), &[p, 1]).unwrap())
            .collect();
        let t: Vec<Tensor> = (0..n)
            .map(|_| Tensor::param(rng.normal_vec(q, 1.0), &[1, q]).unwrap())
            .collect();

        let composed = phm_compose(&a, &s, &t).unwrap();
        assert_eq!(composed.shape(), &[n * p, n * q]);

        let mut expect = vec![0.0; (n * p) * (n * q)];
        for i in 0..n {
            let ad = a[i].data();
            let sd = s[i].data();
            let td = t[i].data();
            for ar in 0..n {
                for ac in 0..n {
                    for br in 0..p {
                        for bc in 0..q {
                            let row = ar * p + br;
                            let col = ac * q + bc;
                            expect[row * (n * q) + col] += ad[ar * n + ac] * sd[br] * td[bc];
                        }
                    }
                }
            }
        }
        let got = composed.data();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn fresh_adapters_do_no_harm() {
        let bb = Backbone::new(tiny_backbone(), 7).unwrap().frozen();
        let ids = [1, 5, 3, 2];
        let base = bb.forward(&ids, &PassThrough).unwrap().data();
        for kind in [AdapterKind::Bottleneck, AdapterKind::Compacter, AdapterKind::Lora] {
            let stack = AdapterStack::new(tiny_spec(kind), &bb.config, 99).unwrap();
            let with = bb.forward(&ids, &stack).unwrap().data();
            assert_eq!(base, with, "{kind:?} must start as an exact identity");
        }
    }

    #[test]
    fn trained_weights_change_the_output() {
        let bb = Backbone::new(tiny_backbone(), 7).unwrap().frozen();
        let ids = [1, 5, 3, 2];
        let base = bb.forward(&ids, &PassThrough).unwrap().data();
        for kind in [AdapterKind::Bottleneck, AdapterKind::Compacter, AdapterKind::Lora] {
            let stack = AdapterStack::new(tiny_spec(kind), &bb.config, 99).unwrap();
            // Nudge every parameter off its init.
            for (_, p) in stack.parameters() {
                let bumped: Vec<f64> = p.data().iter().map(|x| x + 0.05).collect();
                p.set_data(bumped).unwrap();
            }
            let with = bb.forward(&ids, &stack).unwrap().data();
            assert_ne!(base, with, "{kind:?} with nonzero weights must act");
        }
    }

    #[test]
    fn gradients_reach_adapter_but_not_frozen_backbone() {
        let bb = Backbone::new(tiny_backbone(), 7).unwrap().frozen();
        let ids = [1, 5, 3, 2];
        let mask = [false, true, true, true];
        for kind in [AdapterKind::Bottleneck, AdapterKind::Compacter, AdapterKind::Lora] {
            let stack = AdapterStack::new(tiny_spec(kind), &bb.config, 5).unwrap();
            let loss = bb.clm_loss(&ids, &mask, &stack).unwrap();
            loss.backward().unwrap();
            let any_nonzero = stack
                .parameters()
                .iter()
                .any(|(_, p)| p.grad().map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false));
            assert!(any_nonzero, "{kind:?} got no gradient");
            assert!(bb.tok_emb.grad().is_none(), "frozen backbone must stay grad-free");
        }
    }

    #[test]
    fn shared_phm_factors_accumulate_across_layers_and_projections() {
        let bb = Backbone::new(tiny_backbone(), 7).unwrap().frozen();
        let stack = AdapterStack::new(tiny_spec(AdapterKind::Compacter), &bb.config, 5).unwrap();
        // Make the up-projection nonzero so both projections carry signal.
        for (name, p) in stack.parameters() {
            if name.contains("up_t") {
                p.set_data(vec![0.1; p.numel()]).unwrap();
            }
        }
        let loss = bb
            .clm_loss(&[1, 5, 3, 2], &[false, true, true, true], &stack)
            .unwrap();
        loss.backward().unwrap();
        for (i, a) in stack.shared_a.iter().enumerate() {
            let g = a.grad().unwrap_or_else(|| panic!("shared factor {i} missing grad"));
            assert!(g.iter().any(|&x| x != 0.0), "shared factor {i} grad all zero");
        }
    }

    #[test]
    fn parameter_counts_at_reference_dimensions() {
        // Reference geometry: hidden 64, 4 layers, bottleneck 16, phm 4,
        // LoRA rank 16 on two projections.
        let bb = BackboneConfig::with_vocab(64);
        let count = |kind| {
            AdapterStack::new(AdapterSpec::new(kind, "ruby"), &bb, 1)
                .unwrap()
                .param_count()
        };
        // Per layer: 64·16 + 16 + 16·64 + 64 = 2128.
        assert_eq!(count(AdapterKind::Bottleneck), 4 * 2128);
        // Shared: 4 A-factors of 4×4 = 64. Per layer: down s 4·16, t 4·4,
        // bias 16; up s 4·4, t 4·16, bias 64 → 240.
        assert_eq!(count(AdapterKind::Compacter), 64 + 4 * 240);
        // Per layer: (64·16 + 16·64) × 2 projections = 4096.
        assert_eq!(count(AdapterKind::Lora), 4 * 4096);
        // The hierarchy the methods exist for.
        assert!(count(AdapterKind::Compacter) < count(AdapterKind::Bottleneck));
        assert!(count(AdapterKind::Bottleneck) < count(AdapterKind::Lora));
    }

    #[test]
    fn compacter_projection_matches_explicit_bottleneck() {
        // Composing W_down/W_up once and running a plain bottleneck with
        // them must equal the Compacter slot output.
        let bb = Backbone::new(tiny_backbone(), 7).unwrap().frozen();
        let stack = AdapterStack::new(tiny_spec(AdapterKind::Compacter), &bb.config, 5).unwrap();
        for (name, p) in stack.parameters() {
            if name.contains("up_t") {
                p.set_data(vec![0.2; p.numel()]).unwrap();
            }
        }
        let f = Tensor::from_vec(
            SeedRng::new(3).normal_vec(3 * 8, 1.0),
            &[3, 8],
        )
        .unwrap();
        let z = stack.slot_forward(0, &f).unwrap();

        let LayerModule::Compacter {
            down_s,
            down_t,
            b_down,
            up_s,
            up_t,
            b_up,
        } = &stack.layers[0]
        else {
            unreachable!()
        };
        let w_down = phm_compose(&stack.shared_a, down_s, down_t).unwrap();
        let w_up = phm_compose(&stack.shared_a, up_s, up_t).unwrap();
        let manual = f
            .matmul(&w_down)
            .unwrap()
            .add_bias(b_down)
            .unwrap()
            .relu()
            .unwrap()
            .matmul(&w_up)
            .unwrap()
            .add_bias(b_up)
            .unwrap()
            .add(&f)
            .unwrap();
        assert_eq!(z.data(), manual.data());
    }

    #[test]
    fn lora_has_no_slot_output() {
        let bb = tiny_backbone();
        let stack = AdapterStack::new(tiny_spec(AdapterKind::Lora), &bb, 5).unwrap();
        let f = Tensor::zeros(&[2, 8]).unwrap();
        assert!(stack.slot_forward(0, &f).is_err());
        assert!(!AdapterKind::Lora.fusable());
        assert!(AdapterKind::Bottleneck.fusable());
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let bb = tiny_backbone();
        let a = AdapterStack::new(tiny_spec(AdapterKind::Compacter), &bb, 31).unwrap();
        let b = AdapterStack::new(tiny_spec(AdapterKind::Compacter), &bb, 31).unwrap();
        for ((na, pa), (nb, pb)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data(), pb.data());
        }
        let c = AdapterStack::new(tiny_spec(AdapterKind::Compacter), &bb, 32).unwrap();
        let differs = a
            .parameters()
            .iter()
            .zip(c.parameters().iter())
            .any(|((_, pa), (_, pc))| pa.data() != pc.data());
        assert!(differs);
    }

    #[test]
    fn kind_round_trips_through_names() {
        for kind in [AdapterKind::Bottleneck, AdapterKind::Compacter, AdapterKind::Lora] {
            assert_eq!(AdapterKind::parse(kind.as_str()).unwrap(), kind);
        }
        assert!(AdapterKind::parse("prefix-tuning").is_err());
    }
}
