//! Attention over adapters: at every layer a learned mixture recombines
//! the outputs of several frozen, independently trained adapter stacks.
//!
//! Per layer, with FFN output `f` (shape `[T, h]`) and adapter outputs
//! `z_1 … z_N` (each `[T, h]`):
//!
//! ```text
//! q       = f · W_q
//! score_n = row-wise dot(q, z_n · W_k)          // [T, 1]
//! S       = softmax over adapters of [score_1 … score_N]   // [T, N]
//! O       = Σ_n  S[:, n] ⊙ (z_n · W_v)          // [T, h]
//! ```
//!
//! `O` replaces the adapter slot output, so the block becomes
//! `LN2(x_mid + O)`. Scores are plain dot products (no `1/√h` scaling);
//! the worked arithmetic in the tests pins that convention down.
//!
//! Masking supports the two-phase adversarial schedule: a masked adapter
//! is, by default, *excluded* — its `z_n` is never computed and the
//! softmax runs over the survivors only, so the fused model is bitwise
//! independent of the masked adapter's weights. The alternative
//! `ZeroWeights` mode computes the full softmax and then zeroes the masked
//! columns without renormalizing, which lets experiments measure how much
//! probability mass the schedule would have routed to the target.

use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::{AttnProj, Backbone, BackbonePlugin};
use crate::error::{Error, Result};
use crate::peft::AdapterStack;
use crate::rng::SeedRng;
use crate::tensor::{concat, Tensor};

/// How a masked adapter is kept out of the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Skip the adapter entirely; softmax over the remaining columns.
    #[default]
    Exclude,
    /// Softmax over all adapters, then zero the masked columns
    /// (no renormalization — the mass is simply dropped).
    ZeroWeights,
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Attention weights observed at one layer for one forward pass:
/// always full-width `[t, tags.len()]`, with exact zeros in masked columns.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub rows: usize,
    pub weights: Vec<f64>,
}

const INIT_STD: f64 = 0.02;
/// The value projection starts as `I + ε·noise`: the fused output then
/// begins close to a plain average of adapter outputs.
const VALUE_NOISE_STD: f64 = 1e-6;

/// The trainable mixture parameters for every backbone layer, plus the
/// adapter roster and mask state.
#[derive(Debug)]
pub struct FusionStack {
    pub tags: Vec<String>,
    pub mask_mode: MaskMode,
    layers: Vec<FusionLayer>,
    masked: RefCell<BTreeSet<usize>>,
    capture: RefCell<Option<Vec<FusionTrace>>>,
}

impl FusionStack {
    pub fn new(
        hidden: usize,
        num_layers: usize,
        tags: &[String],
        mask_mode: MaskMode,
        seed: u64,
    ) -> Result<FusionStack> {
        if tags.is_empty() {
            return Err(Error::FusionConfig("no adapters to fuse".to_string()));
        }
        let unique: BTreeSet<&String> = tags.iter().collect();
        if unique.len() != tags.len() {
            return Err(Error::FusionConfig(format!(
                "duplicate adapter tags in {tags:?}"
            )));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let r = |label: &str| SeedRng::derive(seed, &format!("fusion{l}/{label}"));
            let eye = Tensor::eye(hidden)?;
            let noise = Tensor::from_vec(
                r("w_v").normal_vec(hidden * hidden, VALUE_NOISE_STD),
                &[hidden, hidden],
            )?;
            let w_v_init: Vec<f64> = eye
                .data()
                .iter()
                .zip(noise.data().iter())
                .map(|(a, b)| a + b)
                .collect();
            layers.push(FusionLayer {
                w_q: Tensor::param(
                    r("w_q").normal_vec(hidden * hidden, INIT_STD),
                    &[hidden, hidden],
                )?,
                w_k: Tensor::param(
                    r("w_k").normal_vec(hidden * hidden, INIT_STD),
                    &[hidden, hidden],
                )?,
                w_v: Tensor::param(w_v_init, &[hidden, hidden])?,
            });
        }
        Ok(FusionStack {
            tags: tags.to_vec(),
            mask_mode,
            layers,
            masked: RefCell::new(BTreeSet::new()),
            capture: RefCell::new(None),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &FusionLayer {
        &self.layers[l]
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w_q"), layer.w_q.clone()));
            out.push((format!("layer{l}.w_k"), layer.w_k.clone()));
            out.push((format!("layer{l}.w_v"), layer.w_v.clone()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rewind the mixture parameters to a previously captured snapshot
    /// (name → tensor pairs as produced by [`FusionStack::parameters`]).
    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        let params = self.parameters();
        if snapshot.len() != params.len() {
            return Err(Error::FusionConfig(format!(
                "snapshot holds {} tensors, the mixture has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for ((have, param), (want, saved)) in params.iter().zip(snapshot) {
            if have != want {
                return Err(Error::FusionConfig(format!(
                    "snapshot tensor `{want}` does not line up with `{have}`"
                )));
            }
            if param.shape() != saved.shape() {
                return Err(Error::FusionConfig(format!(
                    "snapshot tensor `{want}` has shape {:?}, expected {:?}",
                    saved.shape(),
                    param.shape()
                )));
            }
            param.set_data(saved.data())?;
        }
        Ok(())
    }

    pub fn tag_index(&self, tag: &str) -> Result<usize> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::FusionConfig(format!("unknown adapter tag `{tag}`")))
    }

    /// Mask a set of adapters by tag; replaces any previous mask.
    pub fn set_masked(&self, tags: &[String]) -> Result<()> {
        let mut idx = BTreeSet::new();
        for tag in tags {
            idx.insert(self.tag_index(tag)?);
        }
        if idx.len() == self.tags.len() {
            return Err(Error::FusionConfig(
                "masking every adapter leaves nothing to fuse".to_string(),
            ));
        }
        *self.masked.borrow_mut() = idx;
        Ok(())
    }

    pub fn clear_mask(&self) {
        self.masked.borrow_mut().clear();
    }

    pub fn masked_tags(&self) -> Vec<String> {
        self.masked
            .borrow()
            .iter()
            .map(|&i| self.tags[i].clone())
            .collect()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked.borrow().contains(&index)
    }

    /// Start recording per-layer attention weights on the next forward.
    pub fn begin_capture(&self) {
        *self.capture.borrow_mut() = Some(Vec::new());
    }

    /// Stop recording and hand back what was captured (one trace per layer,
    /// in layer order).
    pub fn take_capture(&self) -> Option<Vec<FusionTrace>> {
        self.capture.borrow_mut().take()
    }

    /// The fusion mixture at one layer. `z` must hold one `[T, h]` output
    /// per *unmasked* adapter, in roster order; `active` maps them back to
    /// roster columns. Returns the fused `[T, h]` output and records the
    /// full-width attention row block if capture is on.
    ///
    /// Public so callers can mix externally computed streams — handy for
    /// verifying the attention arithmetic against hand-worked values.
    pub fn mix(&self, l: usize, f: &Tensor, z: &[Tensor], active: &[usize]) -> Result<Tensor> {
        let layer = &self.layers[l];
        let q = f.matmul(&layer.w_q)?;
        let mut scores = Vec::with_capacity(z.len());
        for zn in z {
            let k = zn.matmul(&layer.w_k)?;
            scores.push(q.mul(&k)?.rowsum()?);
        }
        let s = concat(&scores, 1)?.softmax(1)?;

        let t_rows = f.rows();
        let n_total = self.tags.len();
        let (weights, s_cols): (Vec<f64>, Vec<usize>) = match self.mask_mode {
            MaskMode::Exclude => {
                // Full-width trace with zero columns where adapters were
                // skipped; the mixture uses every softmax column.
                let sd = s.data();
                let mut full = vec![0.0; t_rows * n_total];
                for (col, &adapter) in active.iter().enumerate() {
                    for row in 0..t_rows {
                        full[row * n_total + adapter] = sd[row * active.len() + col];
                    }
                }
                (full, (0..active.len()).collect())
            }
            MaskMode::ZeroWeights => {
                // All adapters were computed; drop the masked columns'
                // contribution but keep the softmax as-is.
                let sd = s.data();
                let masked = self.masked.borrow();
                let mut full = vec![0.0; t_rows * n_total];
                let mut used = Vec::new();
                for (col, &adapter) in active.iter().enumerate() {
                    if masked.contains(&adapter) {
                        continue;
                    }
                    used.push(col);
                    for row in 0..t_rows {
                        full[row * n_total + adapter] = sd[row * active.len() + col];
                    }
                }
                (full, used)
            }
        };

        if let Some(cap) = self.capture.borrow_mut().as_mut() {
            cap.push(FusionTrace {
                rows: t_rows,
                weights,
            });
        }

        let mut out: Option<Tensor> = None;
        for &col in &s_cols {
            let weight_col = s.slice_cols(col, 1)?;
            let term = z[col].matmul(&layer.w_v)?.rowscale(&weight_col)?;
            out = Some(match out {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        out.ok_or_else(|| Error::FusionConfig("no active adapter in mixture".to_string()))
    }
}

/// A frozen backbone, a roster of frozen adapters, and a trainable fusion
/// stack, assembled into one pluggable model.
pub struct FusedModel {
    pub backbone: Backbone,
    pub adapters: Vec<AdapterStack>,
    pub fusion: FusionStack,
}

impl FusedModel {
    /// Validates that the roster is fusable: at least one adapter, all of
    /// the same slot-producing kind, distinct tags matching the fusion
    /// roster, and geometry matching the backbone.
    pub fn new(
        backbone: Backbone,
        adapters: Vec<AdapterStack>,
        fusion: FusionStack,
    ) -> Result<FusedModel> {
        if adapters.is_empty() {
            return Err(Error::FusionConfig("no adapters to fuse".to_string()));
        }
        let kind = adapters[0].spec.kind;
        for a in &adapters {
            if !a.spec.kind.fusable() {
                return Err(Error::FusionConfig(format!(
                    "adapter `{}` is {}, which has no slot output to fuse",
                    a.spec.language,
                    a.spec.kind.as_str()
                )));
            }
            if a.spec.kind != kind {
                return Err(Error::FusionConfig(format!(
                    "mixed adapter kinds in fusion roster: {} vs {}",
                    kind.as_str(),
                    a.spec.kind.as_str()
                )));
            }
            if a.num_layers() != backbone.config.num_layers {
                return Err(Error::FusionConfig(format!(
                    "adapter `{}` covers {} layers, backbone has {}",
                    a.spec.language,
                    a.num_layers(),
                    backbone.config.num_layers
                )));
            }
        }
        let tags: Vec<String> = adapters.iter().map(|a| a.spec.language.clone()).collect();
        if tags != fusion.tags {
            return Err(Error::FusionConfig(format!(
                "fusion roster {:?} does not match adapter tags {tags:?}",
                fusion.tags
            )));
        }
        Ok(FusedModel {
            backbone,
            adapters,
            fusion,
        })
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        self.backbone.forward(ids, self)
    }

    pub fn clm_loss(&self, ids: &[usize], loss_mask: &[bool]) -> Result<Tensor> {
        self.backbone.clm_loss(ids, loss_mask, self)
    }

    pub fn generate_greedy(&self, prompt: &[usize], max_new: usize, eos: usize) -> Result<Vec<usize>> {
        self.backbone.generate_greedy(prompt, max_new, eos, self)
    }

    /// Forward pass that also returns the per-layer attention traces.
    pub fn forward_with_trace(&self, ids: &[usize]) -> Result<(Tensor, Vec<FusionTrace>)> {
        self.fusion.begin_capture();
        let logits = self.forward(ids);
        let traces = self.fusion.take_capture().unwrap_or_default();
        let logits = logits?;
        if traces.len() != self.backbone.config.num_layers {
            return Err(Error::Analysis(format!(
                "expected {} fusion traces, captured {}",
                self.backbone.config.num_layers,
                traces.len()
            )));
        }
        Ok((logits, traces))
    }
}

impl BackbonePlugin for FusedModel {
    fn attn_delta(&self, _layer: usize, _proj: AttnProj, _x: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn ffn_slot(&self, layer: usize, ffn_out: &Tensor) -> Result<Option<Tensor>> {
        let masked = self.fusion.masked.borrow().clone();
        let compute_all = self.fusion.mask_mode == MaskMode::ZeroWeights;
        let mut z = Vec::new();
        let mut active = Vec::new();
        for (n, adapter) in self.adapters.iter().enumerate() {
            if !compute_all && masked.contains(&n) {
                continue;
            }
            z.push(adapter.slot_forward(layer, ffn_out)?);
            active.push(n);
        }
        Ok(Some(self.fusion.mix(layer, ffn_out, &z, &active)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::peft::{AdapterKind, AdapterSpec};

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

    fn spec(lang: &str) -> AdapterSpec {
        AdapterSpec {
            kind: AdapterKind::Bottleneck,
            language: lang.to_string(),
            bottleneck_dim: 4,
            phm_n: 2,
            lora_rank: 3,
            lora_alpha: 3.0,
        }
    }

    fn trained_stack(lang: &str, seed: u64, cfg: &BackboneConfig) -> AdapterStack {
        let stack = AdapterStack::new(spec(lang), cfg, seed).unwrap();
        // Give the up-projections signal so adapters actually differ.
        let mut rng = SeedRng::derive(seed, "fake-train");
        for (name, p) in stack.parameters() {
            if name.contains("up") {
                p.set_data(rng.normal_vec(p.numel(), 0.3)).unwrap();
            }
        }
        stack.frozen()
    }

    fn fused(tags: &[&str], mode: MaskMode) -> FusedModel {
        let cfg = tiny_backbone();
        let bb = Backbone::new(cfg.clone(), 7).unwrap().frozen();
        let adapters: Vec<AdapterStack> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| trained_stack(t, 100 + i as u64, &cfg))
            .collect();
        let tag_strings: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
        let fusion = FusionStack::new(
            cfg.hidden_dim,
            cfg.num_layers,
            &tag_strings,
            mode,
            500,
        )
        .unwrap();
        FusedModel::new(bb, adapters, fusion).unwrap()
    }

    #[test]
    fn scalar_mixture_matches_hand_arithmetic() {
        // One-dimensional hidden state, one token, two adapters, identity
        // projections: scores are [0, ln 3], so the softmax lands on
        // [1/4, 3/4] and the mixture is 0.75·ln 3.
        let fusion = FusionStack::new(1, 1, &["a".to_string(), "b".to_string()], MaskMode::Exclude, 1)
            .unwrap();
        let one = vec![1.0];
        fusion.layers[0].w_q.set_data(one.clone()).unwrap();
        fusion.layers[0].w_k.set_data(one.clone()).unwrap();
        fusion.layers[0].w_v.set_data(one).unwrap();

        let ln3 = 3.0_f64.ln();
        let f = Tensor::from_vec(vec![1.0], &[1, 1]).unwrap();
        let z = [
            Tensor::from_vec(vec![0.0], &[1, 1]).unwrap(),
            Tensor::from_vec(vec![ln3], &[1, 1]).unwrap(),
        ];
        fusion.begin_capture();
        let out = fusion.mix(0, &f, &z, &[0, 1]).unwrap();
        let trace = fusion.take_capture().unwrap();
        assert!((trace[0].weights[0] - 0.25).abs() < 1e-12);
        assert!((trace[0].weights[1] - 0.75).abs() < 1e-12);
        assert!((out.item() - 0.75 * ln3).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = fused(&["ruby", "go", "php"], MaskMode::Exclude);
        let (_, traces) = model.forward_with_trace(&[1, 5, 3, 2]).unwrap();
        assert_eq!(traces.len(), 2);
        for tr in traces {
            assert_eq!(tr.weights.len(), tr.rows * 3);
            for row in 0..tr.rows {
                let sum: f64 = tr.weights[row * 3..(row + 1) * 3].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
            }
        }
    }

    #[test]
    fn excluded_adapter_leaves_fusion_bitwise_unchanged() {
        let model = fused(&["ruby", "go", "php"], MaskMode::Exclude);
        model.fusion.set_masked(&["php".to_string()]).unwrap();
        let before = model.forward(&[1, 5, 3, 2]).unwrap().data();
        // Rewriting the masked adapter's weights must not move a single bit.
        for (_, p) in model.adapters[2].parameters() {
            p.set_data(vec![123.456; p.numel()]).unwrap();
        }
        let after = model.forward(&[1, 5, 3, 2]).unwrap().data();
        assert_eq!(before, after);
        // Unmasking exposes the sabotage.
        model.fusion.clear_mask();
        let unmasked = model.forward(&[1, 5, 3, 2]).unwrap().data();
        assert_ne!(before, unmasked);
    }

    #[test]
    fn masked_columns_are_exactly_zero_in_traces() {
        for mode in [MaskMode::Exclude, MaskMode::ZeroWeights] {
            let model = fused(&["ruby", "go", "php"], mode);
            model.fusion.set_masked(&["go".to_string()]).unwrap();
            let (_, traces) = model.forward_with_trace(&[1, 5, 3]).unwrap();
            for tr in &traces {
                for row in 0..tr.rows {
                    assert_eq!(tr.weights[row * 3 + 1], 0.0, "{mode:?}");
                }
            }
            // Exclude renormalizes over survivors; ZeroWeights drops mass.
            let sums: Vec<f64> = traces
                .iter()
                .flat_map(|tr| {
                    (0..tr.rows).map(move |r| tr.weights[r * 3..(r + 1) * 3].iter().sum::<f64>())
                })
                .collect();
            match mode {
                MaskMode::Exclude => {
                    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9));
                }
                MaskMode::ZeroWeights => {
                    assert!(sums.iter().all(|&s| s < 1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn two_adapter_roster_with_one_masked_is_pure_single_adapter() {
        let model = fused(&["ruby", "go"], MaskMode::Exclude);
        model.fusion.set_masked(&["go".to_string()]).unwrap();
        let (_, traces) = model.forward_with_trace(&[1, 5, 3]).unwrap();
        for tr in &traces {
            for row in 0..tr.rows {
                assert_eq!(tr.weights[row * 2], 1.0, "lone survivor takes all mass");
                assert_eq!(tr.weights[row * 2 + 1], 0.0);
            }
        }
    }

    #[test]
    fn mask_validation() {
        let model = fused(&["ruby", "go"], MaskMode::Exclude);
        assert!(model.fusion.set_masked(&["swift".to_string()]).is_err());
        assert!(model
            .fusion
            .set_masked(&["ruby".to_string(), "go".to_string()])
            .is_err());
        assert!(model.fusion.set_masked(&["go".to_string()]).is_ok());
        assert_eq!(model.fusion.masked_tags(), vec!["go".to_string()]);
    }

    #[test]
    fn roster_validation_rejects_bad_combinations() {
        let cfg = tiny_backbone();
        let bb = Backbone::new(cfg.clone(), 7).unwrap().frozen();
        let tags = vec!["ruby".to_string(), "go".to_string()];
        let fusion = |t: &[String]| {
            FusionStack::new(cfg.hidden_dim, cfg.num_layers, t, MaskMode::Exclude, 1).unwrap()
        };

        // LoRA in the roster.
        let mut s = spec("ruby");
        s.kind = AdapterKind::Lora;
        let lora = AdapterStack::new(s, &cfg, 1).unwrap();
        let go = AdapterStack::new(spec("go"), &cfg, 2).unwrap();
        assert!(FusedModel::new(bb.clone(), vec![lora, go.clone()], fusion(&tags)).is_err());

        // Mixed kinds.
        let mut s = spec("ruby");
        s.kind = AdapterKind::Compacter;
        let compacter = AdapterStack::new(s, &cfg, 1).unwrap();
        assert!(FusedModel::new(bb.clone(), vec![compacter, go.clone()], fusion(&tags)).is_err());

        // Roster/tag mismatch.
        let ruby = AdapterStack::new(spec("ruby"), &cfg, 1).unwrap();
        let wrong = vec!["ruby".to_string(), "php".to_string()];
        assert!(FusedModel::new(bb.clone(), vec![ruby.clone(), go.clone()], fusion(&wrong)).is_err());

        // Duplicate tags are rejected at the stack level.
        let dup = vec!["ruby".to_string(), "ruby".to_string()];
        assert!(FusionStack::new(cfg.hidden_dim, cfg.num_layers, &dup, MaskMode::Exclude, 1).is_err());

        // The happy path.
        assert!(FusedModel::new(bb, vec![ruby, go], fusion(&tags)).is_ok());
    }

    #[test]
    fn gradients_flow_to_fusion_only() {
        let model = fused(&["ruby", "go"], MaskMode::Exclude);
        let loss = model.clm_loss(&[1, 5, 3, 2], &[false, true, true, true]).unwrap();
        loss.backward().unwrap();
        let fusion_grads = model
            .fusion
            .parameters()
            .iter()
            .filter(|(_, p)| p.grad().map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false))
            .count();
        assert!(fusion_grads > 0, "fusion parameters must receive gradient");
        for a in &model.adapters {
            for (name, p) in a.parameters() {
                assert!(p.grad().is_none(), "frozen adapter param {name} got a gradient");
            }
        }
        assert!(model.backbone.tok_emb.grad().is_none());
    }

    #[test]
    fn fusion_parameter_census() {
        // 3 matrices of h² per layer: 3 · 64² · 4 = 49152 at reference size.
        let f = FusionStack::new(
            64,
            4,
            &["a".to_string(), "b".to_string()],
            MaskMode::Exclude,
            1,
        )
        .unwrap();
        assert_eq!(f.param_count(), 49152);
        // Roster size never changes the parameter count.
        let g = FusionStack::new(
            64,
            4,
            &["a".to_string(), "b".to_string(), "c".to_string(), "d".to_string()],
            MaskMode::Exclude,
            1,
        )
        .unwrap();
        assert_eq!(g.param_count(), f.param_count());
    }

    #[test]
    fn value_projection_starts_near_identity() {
        let f = FusionStack::new(4, 1, &["a".to_string()], MaskMode::Exclude, 9).unwrap();
        let wv = f.layers[0].w_v.data();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((wv[i * 4 + j] - expect).abs() < 1e-4);
            }
        }
    }
}
