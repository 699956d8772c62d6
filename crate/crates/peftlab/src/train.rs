//! Training loops for the four trainable configurations: backbone
//! pretraining, single-language adapters, fusion over frozen adapters,
//! and the two-phase adversarial fusion schedule.
//!
//! Conventions shared by every loop:
//! * Per-sample losses are token-mean cross-entropies; a batch accumulates
//!   per-sample gradients and steps once with the sum scaled by `1/B`.
//! * Everything is seeded. Batch order is a seeded shuffle per epoch, so a
//!   rerun with the same seed reproduces every parameter bit for bit.
//! * Frozen tensor groups are content-hashed before and after training,
//!   and any gradient observed on a frozen tensor is counted as a
//!   violation (the count is reported per epoch and must stay zero —
//!   frozen tensors are outside the autodiff graph by construction).
//! * Progress is reported as structured events, not timestamps, so event
//!   logs are byte-deterministic too.
//!
//! The adversarial schedule ([`train_advfusion`]) runs two equal-length
//! phases over the same mixed corpus: phase one masks the target
//! language's adapter, forcing the fusion attention to mine the remaining
//! adapters for whatever transfers; phase two unmasks it and continues
//! with the same optimizer state (by default — moments can be reset).
//! Exactly one `unmask` event separates the phases, and the phase-one
//! fusion parameters are snapshotted for later attention analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::corpus::Encoded;
use crate::error::{Error, Result};
use crate::fusion::FusedModel;
use crate::peft::AdapterStack;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

// ── optimizer ──────────────────────────────────────────────────────────────

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction over a fixed list of named parameters.
pub struct Adam {
    params: Vec<(String, Tensor)>,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64) -> Result<Adam> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::TrainPlan(format!("learning rate {lr} invalid")));
        }
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Ok(Adam {
            params,
            lr,
            m,
            v,
            t: 0,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Drop first and second moments and the step counter (used when a
    /// phase change wants a cold optimizer over warm weights).
    pub fn reset_moments(&mut self) {
        for m in &mut self.m {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
        for v in &mut self.v {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.t = 0;
    }

    /// One update using each parameter's accumulated gradient times
    /// `scale` (the loops pass `1/batch_size`). Missing gradients count
    /// as zero so the moments still decay.
    pub fn step_scaled(&mut self, scale: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let grad = p.grad();
            let mut data = p.data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad.as_ref().map(|g| g[j] * scale).unwrap_or(0.0);
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

// ── plans, events, outcomes ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    /// Epochs over the corpus; for the adversarial schedule this is the
    /// length of *each* of the two phases.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::TrainPlan("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::TrainPlan("batch_size must be at least 1".to_string()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::TrainPlan(format!("learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// One line of the structured training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainEvent {
    /// Optimizer steps taken so far when the event was emitted.
    pub step: usize,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_grad_violations: Option<usize>,
}

impl TrainEvent {
    fn named(event: &str, step: usize) -> TrainEvent {
        TrainEvent {
            step,
            event: event.to_string(),
            epoch: None,
            loss: None,
            detail: None,
            masked: None,
            frozen_grad_violations: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    pub events: Vec<TrainEvent>,
    pub frozen_hashes_before: BTreeMap<String, String>,
    pub frozen_hashes_after: BTreeMap<String, String>,
    /// Fusion parameters as they stood at the end of phase one
    /// (adversarial schedule only).
    pub phase1_snapshot: Option<Vec<(String, Tensor)>>,
}

// ── shared machinery ───────────────────────────────────────────────────────

fn check_data(data_len: usize, what: &str) -> Result<()> {
    if data_len == 0 {
        return Err(Error::TrainPlan(format!("no training samples for {what}")));
    }
    Ok(())
}

fn hash_groups(frozen: &[(String, Vec<(String, Tensor)>)]) -> BTreeMap<String, String> {
    frozen
        .iter()
        .map(|(name, group)| (name.clone(), Checkpoint::content_hash(group)))
        .collect()
}

fn count_violations(frozen: &[(String, Vec<(String, Tensor)>)]) -> usize {
    frozen
        .iter()
        .flat_map(|(_, group)| group.iter())
        .filter(|(_, t)| t.grad().is_some())
        .count()
}

/// Seeded shuffle + chunk of `0..n` into batches.
fn plain_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    SeedRng::derive(seed, &format!("epoch/{epoch}")).shuffle(&mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Language-homogeneous batches, interleaved round-robin over the sorted
/// language list: ruby batch, go batch, php batch, ruby batch, … Languages
/// that run out simply drop out of the rotation.
fn round_robin_batches(
    sizes: &BTreeMap<String, usize>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(String, Vec<usize>)> {
    let mut streams: Vec<(String, Vec<Vec<usize>>)> = sizes
        .iter()
        .map(|(lang, &n)| {
            let mut idx: Vec<usize> = (0..n).collect();
            SeedRng::derive(seed, &format!("epoch/{epoch}/{lang}")).shuffle(&mut idx);
            let chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
            (lang.clone(), chunks)
        })
        .collect();
    let mut out = Vec::new();
    let mut round = 0;
    loop {
        let mut any = false;
        for (lang, chunks) in &mut streams {
            if round < chunks.len() {
                out.push((lang.clone(), std::mem::take(&mut chunks[round])));
                any = true;
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    out
}

struct EpochStats {
    mean_loss: f64,
    steps: usize,
    violations: usize,
}

/// Run one epoch over prepared batches. `loss_of(batch_item)` builds the
/// graph for one sample; gradients accumulate across the batch and the
/// optimizer steps once per batch with the mean gradient.
fn run_epoch<F>(
    opt: &mut Adam,
    batches: &[Vec<usize>],
    mut loss_of: F,
    frozen: &[(String, Vec<(String, Tensor)>)],
    step_base: usize,
) -> Result<EpochStats>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    let mut total_loss = 0.0;
    let mut n_samples = 0usize;
    let mut steps = 0usize;
    let mut violations = 0usize;
    for batch in batches {
        opt.zero_grads();
        for &i in batch {
            let loss = loss_of(i).map_err(|e| Error::TrainAbort {
                step: step_base + steps,
                msg: e.to_string(),
            })?;
            loss.backward()?;
            total_loss += loss.item();
            n_samples += 1;
        }
        violations += count_violations(frozen);
        opt.step_scaled(1.0 / batch.len() as f64)
            .map_err(|e| Error::TrainAbort {
                step: step_base + steps,
                msg: e.to_string(),
            })?;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total_loss / n_samples.max(1) as f64,
        steps,
        violations,
    })
}

fn finish(
    mut events: Vec<TrainEvent>,
    epoch_losses: Vec<f64>,
    steps: usize,
    frozen_before: BTreeMap<String, String>,
    frozen: &[(String, Vec<(String, Tensor)>)],
    phase1_snapshot: Option<Vec<(String, Tensor)>>,
) -> Result<TrainOutcome> {
    let frozen_after = hash_groups(frozen);
    if frozen_after != frozen_before {
        return Err(Error::TrainAbort {
            step: steps,
            msg: "frozen tensor group changed during training".to_string(),
        });
    }
    let final_loss = *epoch_losses.last().unwrap_or(&f64::NAN);
    let mut end = TrainEvent::named("run_end", steps);
    end.loss = Some(final_loss);
    events.push(end);
    Ok(TrainOutcome {
        epoch_losses,
        final_loss,
        steps,
        events,
        frozen_hashes_before: frozen_before,
        frozen_hashes_after: frozen_after,
        phase1_snapshot,
    })
}

// ── the four training modes ────────────────────────────────────────────────

/// Train every backbone parameter on next-token prediction.
pub fn pretrain_backbone(bb: &Backbone, data: &[Encoded], plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.validate()?;
    check_data(data.len(), "backbone pretraining")?;
    let mut opt = Adam::new(bb.parameters(), plan.lr)?;
    let frozen: Vec<(String, Vec<(String, Tensor)>)> = Vec::new();
    let frozen_before = hash_groups(&frozen);

    let mut events = vec![{
        let mut e = TrainEvent::named("run_start", 0);
        e.detail = Some("pretrain-backbone".to_string());
        e
    }];
    let mut epoch_losses = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..plan.epochs {
        let batches = plain_batches(data.len(), plan.batch_size, plan.seed, epoch);
        let stats = run_epoch(
            &mut opt,
            &batches,
            |i| bb.clm_loss(&data[i].ids, &data[i].loss_mask, &crate::backbone::PassThrough),
            &frozen,
            steps,
        )?;
        steps += stats.steps;
        epoch_losses.push(stats.mean_loss);
        let mut e = TrainEvent::named("epoch", steps);
        e.epoch = Some(epoch);
        e.loss = Some(stats.mean_loss);
        e.frozen_grad_violations = Some(stats.violations);
        events.push(e);
    }
    finish(events, epoch_losses, steps, frozen_before, &frozen, None)
}

/// Train one adapter stack against a frozen backbone.
pub fn train_language_adapter(
    bb: &Backbone,
    stack: &AdapterStack,
    data: &[Encoded],
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.validate()?;
    check_data(data.len(), &format!("adapter `{}`", stack.spec.language))?;
    let mut opt = Adam::new(stack.parameters(), plan.lr)?;
    let frozen = vec![("backbone".to_string(), bb.parameters())];
    let frozen_before = hash_groups(&frozen);

    let mut events = vec![{
        let mut e = TrainEvent::named("run_start", 0);
        e.detail = Some(format!(
            "train-adapter {} ({})",
            stack.spec.language,
            stack.spec.kind.as_str()
        ));
        e
    }];
    let mut epoch_losses = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..plan.epochs {
        let batches = plain_batches(data.len(), plan.batch_size, plan.seed, epoch);
        let stats = run_epoch(
            &mut opt,
            &batches,
            |i| bb.clm_loss(&data[i].ids, &data[i].loss_mask, stack),
            &frozen,
            steps,
        )?;
        steps += stats.steps;
        epoch_losses.push(stats.mean_loss);
        let mut e = TrainEvent::named("epoch", steps);
        e.epoch = Some(epoch);
        e.loss = Some(stats.mean_loss);
        e.frozen_grad_violations = Some(stats.violations);
        events.push(e);
    }
    finish(events, epoch_losses, steps, frozen_before, &frozen, None)
}

fn fusion_frozen_groups(model: &FusedModel) -> Vec<(String, Vec<(String, Tensor)>)> {
    let mut frozen = vec![("backbone".to_string(), model.backbone.parameters())];
    for a in &model.adapters {
        frozen.push((format!("adapter/{}", a.spec.language), a.parameters()));
    }
    frozen
}

fn fusion_epoch(
    model: &FusedModel,
    data: &BTreeMap<String, Vec<Encoded>>,
    opt: &mut Adam,
    plan: &TrainPlan,
    epoch: usize,
    frozen: &[(String, Vec<(String, Tensor)>)],
    step_base: usize,
) -> Result<EpochStats> {
    let sizes: BTreeMap<String, usize> = data.iter().map(|(l, v)| (l.clone(), v.len())).collect();
    let batches = round_robin_batches(&sizes, plan.batch_size, plan.seed, epoch);
    let mut total_loss = 0.0;
    let mut n_samples = 0usize;
    let mut steps = 0usize;
    let mut violations = 0usize;
    for (lang, batch) in &batches {
        let samples = &data[lang];
        opt.zero_grads();
        for &i in batch {
            let loss = model
                .clm_loss(&samples[i].ids, &samples[i].loss_mask)
                .map_err(|e| Error::TrainAbort {
                    step: step_base + steps,
                    msg: e.to_string(),
                })?;
            loss.backward()?;
            total_loss += loss.item();
            n_samples += 1;
        }
        violations += count_violations(frozen);
        opt.step_scaled(1.0 / batch.len() as f64)?;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total_loss / n_samples.max(1) as f64,
        steps,
        violations,
    })
}

fn validate_fusion_data(model: &FusedModel, data: &BTreeMap<String, Vec<Encoded>>) -> Result<()> {
    if data.is_empty() || data.values().all(|v| v.is_empty()) {
        return Err(Error::TrainPlan("no training samples for fusion".to_string()));
    }
    for lang in data.keys() {
        model.fusion.tag_index(lang).map_err(|_| {
            Error::TrainPlan(format!(
                "training data language `{lang}` has no adapter in the roster"
            ))
        })?;
    }
    Ok(())
}

/// Train the fusion attention over frozen adapters on a mixed corpus,
/// language-homogeneous batches in round-robin order.
pub fn train_adapterfusion(
    model: &FusedModel,
    data: &BTreeMap<String, Vec<Encoded>>,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.validate()?;
    validate_fusion_data(model, data)?;
    model.fusion.clear_mask();
    let mut opt = Adam::new(model.fusion.parameters(), plan.lr)?;
    let frozen = fusion_frozen_groups(model);
    let frozen_before = hash_groups(&frozen);

    let mut events = vec![{
        let mut e = TrainEvent::named("run_start", 0);
        e.detail = Some("train-fusion".to_string());
        e
    }];
    let mut epoch_losses = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..plan.epochs {
        let stats = fusion_epoch(model, data, &mut opt, plan, epoch, &frozen, steps)?;
        steps += stats.steps;
        epoch_losses.push(stats.mean_loss);
        let mut e = TrainEvent::named("epoch", steps);
        e.epoch = Some(epoch);
        e.loss = Some(stats.mean_loss);
        e.frozen_grad_violations = Some(stats.violations);
        events.push(e);
    }
    finish(events, epoch_losses, steps, frozen_before, &frozen, None)
}

/// Two-phase adversarial fusion. Phase one trains with the target
/// language's adapter masked out of the mixture; phase two unmasks it and
/// continues with the same optimizer moments (unless `reset_moments`).
/// Both phases run `plan.epochs` epochs over the same mixed corpus.
pub fn train_advfusion(
    model: &FusedModel,
    data: &BTreeMap<String, Vec<Encoded>>,
    target: &str,
    plan: &TrainPlan,
    reset_moments: bool,
) -> Result<TrainOutcome> {
    plan.validate()?;
    validate_fusion_data(model, data)?;
    model.fusion.tag_index(target)?;

    let mut opt = Adam::new(model.fusion.parameters(), plan.lr)?;
    let frozen = fusion_frozen_groups(model);
    let frozen_before = hash_groups(&frozen);

    let mut events = vec![{
        let mut e = TrainEvent::named("run_start", 0);
        e.detail = Some(format!("train-advfusion target={target}"));
        e
    }];
    let mut epoch_losses = Vec::new();
    let mut steps = 0usize;

    // Phase one: the target adapter is invisible to the mixture.
    model.fusion.set_masked(&[target.to_string()])?;
    let mut e = TrainEvent::named("phase_start", 0);
    e.detail = Some("phase1".to_string());
    e.masked = Some(model.fusion.masked_tags());
    events.push(e);
    for epoch in 0..plan.epochs {
        let stats = fusion_epoch(model, data, &mut opt, plan, epoch, &frozen, steps)?;
        steps += stats.steps;
        epoch_losses.push(stats.mean_loss);
        let mut e = TrainEvent::named("epoch", steps);
        e.epoch = Some(epoch);
        e.loss = Some(stats.mean_loss);
        e.detail = Some("phase1".to_string());
        e.frozen_grad_violations = Some(stats.violations);
        events.push(e);
    }
    let phase1_snapshot: Vec<(String, Tensor)> = model
        .fusion
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.detach()))
        .collect();

    // The single unmask event: phase two sees the full roster.
    model.fusion.clear_mask();
    if reset_moments {
        opt.reset_moments();
    }
    let mut e = TrainEvent::named("unmask", steps);
    e.detail = Some(format!(
        "target={target} reset_moments={reset_moments}"
    ));
    events.push(e);
    let mut e = TrainEvent::named("phase_start", steps);
    e.detail = Some("phase2".to_string());
    e.masked = Some(Vec::new());
    events.push(e);

    for epoch in 0..plan.epochs {
        // Distinct epoch indices keep phase-two batch orders from
        // replaying phase one.
        let stats = fusion_epoch(model, data, &mut opt, plan, plan.epochs + epoch, &frozen, steps)?;
        steps += stats.steps;
        epoch_losses.push(stats.mean_loss);
        let mut e = TrainEvent::named("epoch", steps);
        e.epoch = Some(plan.epochs + epoch);
        e.loss = Some(stats.mean_loss);
        e.detail = Some("phase2".to_string());
        e.frozen_grad_violations = Some(stats.violations);
        events.push(e);
    }
    finish(
        events,
        epoch_losses,
        steps,
        frozen_before,
        &frozen,
        Some(phase1_snapshot),
    )
}

/// Serialize events as JSON lines.
pub fn events_to_jsonl(events: &[TrainEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}
