//! Cross-module flows: synthetic corpus → pretraining → adapters → fusion →
//! checkpoints → attention analysis. Each test walks a slice of the real
//! experiment protocol through files on disk, not just in-memory structs.

use std::collections::BTreeMap;

use peftlab::attnlab::{collect_traces, summarize};
use peftlab::backbone::{Backbone, BackboneConfig};
use peftlab::checkpoint::{
    load_adapter_checkpoint, load_fusion_checkpoint, save_adapter_checkpoint,
    save_fusion_checkpoint, Checkpoint,
};
use peftlab::corpus::{
    build_vocab, encode, load_corpus, partition_by_language, synth_corpus, Encoded, Sample,
    SynthSpec, Vocabulary,
};
use peftlab::fusion::{FusedModel, FusionStack, MaskMode};
use peftlab::peft::{AdapterKind, AdapterStack};
use peftlab::train::{
    train_adapterfusion, train_advfusion, train_language_adapter, pretrain_backbone, TrainPlan,
};

fn small_config(vocab_size: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size,
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 64,
        max_seq_len: 64,
        ln_eps: 1e-5,
    }
}

fn spec() -> SynthSpec {
    SynthSpec {
        languages: vec!["go".to_string(), "php".to_string(), "ruby".to_string()],
        train_sizes: vec![8, 8, 4],
        valid_sizes: vec![2, 2, 1],
        test_sizes: vec![2, 2, 1],
        overlap: 0.6,
        seed: 41,
    }
}

fn plan(epochs: usize, lr: f64, seed: u64) -> TrainPlan {
    TrainPlan {
        epochs,
        batch_size: 4,
        lr,
        seed,
    }
}

/// Corpus on disk → loaded samples → vocabulary → pretrained frozen
/// backbone, the setup every downstream stage builds on.
fn pretrained_world(dir: &std::path::Path) -> (Vec<Sample>, Vocabulary, Backbone) {
    let report = synth_corpus(&spec(), dir).unwrap();
    let samples = load_corpus(&report.train).unwrap().samples;
    let vocab = build_vocab(&samples, 512).unwrap();
    let encoded: Vec<Encoded> = samples
        .iter()
        .map(|s| encode(s, &vocab, 64).unwrap())
        .collect();
    let bb = Backbone::new(small_config(vocab.len()), 11).unwrap();
    pretrain_backbone(&bb, &encoded, &plan(1, 2e-3, 7)).unwrap();
    (samples, vocab, bb.frozen())
}

fn encode_lang(
    samples: &[Sample],
    vocab: &Vocabulary,
    lang: &str,
) -> Vec<Encoded> {
    partition_by_language(samples)
        .remove(lang)
        .unwrap_or_else(|| panic!("language {lang} missing from synth corpus"))
        .iter()
        .map(|s| encode(s, vocab, 64).unwrap())
        .collect()
}

fn trained_adapter(
    bb: &Backbone,
    samples: &[Sample],
    vocab: &Vocabulary,
    lang: &str,
    kind: AdapterKind,
) -> AdapterStack {
    let mut sp = peftlab::peft::AdapterSpec::new(kind, lang);
    sp.bottleneck_dim = 8;
    let stack = AdapterStack::new(sp, &bb.config, 19).unwrap();
    let data = encode_lang(samples, vocab, lang);
    train_language_adapter(bb, &stack, &data, &plan(1, 2e-3, 23)).unwrap();
    stack
}

#[test]
fn corpus_to_adapter_checkpoint_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, vocab, bb) = pretrained_world(dir.path());
    let stack = trained_adapter(&bb, &samples, &vocab, "go", AdapterKind::Bottleneck);

    let probe = encode(&samples[0], &vocab, 64).unwrap();
    let loss_before = bb
        .clm_loss(&probe.ids, &probe.loss_mask, &stack)
        .unwrap()
        .item();

    let path = dir.path().join("adapter.ckpt");
    save_adapter_checkpoint(&path, &bb, &stack, &vocab, BTreeMap::new()).unwrap();
    let (bb2, stack2, vocab2, meta) = load_adapter_checkpoint(&path).unwrap();

    assert_eq!(meta.kind, "adapter");
    assert_eq!(meta.adapter.as_ref().unwrap().language, "go");
    assert_eq!(vocab2.len(), vocab.len());

    let loss_after = bb2
        .clm_loss(&probe.ids, &probe.loss_mask, &stack2)
        .unwrap()
        .item();
    assert_eq!(
        loss_before.to_bits(),
        loss_after.to_bits(),
        "reloaded adapter+backbone must reproduce the loss bit for bit"
    );
}

#[test]
fn fusion_training_touches_only_the_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, vocab, bb) = pretrained_world(dir.path());
    let go = trained_adapter(&bb, &samples, &vocab, "go", AdapterKind::Bottleneck);
    let php = trained_adapter(&bb, &samples, &vocab, "php", AdapterKind::Bottleneck);

    let bb_hash = Checkpoint::content_hash(&bb.parameters());
    let go_hash = Checkpoint::content_hash(&go.parameters());
    let php_hash = Checkpoint::content_hash(&php.parameters());

    let adapters = vec![go.frozen(), php.frozen()];
    let tags: Vec<String> = adapters.iter().map(|a| a.spec.language.clone()).collect();
    let fusion =
        FusionStack::new(bb.config.hidden_dim, bb.config.num_layers, &tags, MaskMode::Exclude, 3)
            .unwrap();
    let fusion_hash_before = Checkpoint::content_hash(&fusion.parameters());
    let model = FusedModel::new(bb, adapters, fusion).unwrap();

    let mut data = BTreeMap::new();
    data.insert("go".to_string(), encode_lang(&samples, &vocab, "go"));
    data.insert("php".to_string(), encode_lang(&samples, &vocab, "php"));
    let outcome = train_adapterfusion(&model, &data, &plan(1, 1e-3, 29)).unwrap();

    assert_eq!(outcome.frozen_hashes_before, outcome.frozen_hashes_after);
    assert_eq!(Checkpoint::content_hash(&model.backbone.parameters()), bb_hash);
    assert_eq!(Checkpoint::content_hash(&model.adapters[0].parameters()), go_hash);
    assert_eq!(Checkpoint::content_hash(&model.adapters[1].parameters()), php_hash);
    assert_ne!(
        Checkpoint::content_hash(&model.fusion.parameters()),
        fusion_hash_before,
        "the mixture itself must move"
    );
    for e in &outcome.events {
        if let Some(v) = e.frozen_grad_violations {
            assert_eq!(v, 0, "no gradient may ever land on a frozen tensor");
        }
    }
}

#[test]
fn advfusion_cycle_with_phase_one_checkpoint_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, vocab, bb) = pretrained_world(dir.path());
    let adapters: Vec<AdapterStack> = ["go", "php", "ruby"]
        .iter()
        .map(|l| trained_adapter(&bb, &samples, &vocab, l, AdapterKind::Bottleneck).frozen())
        .collect();
    let tags: Vec<String> = adapters.iter().map(|a| a.spec.language.clone()).collect();
    let fusion =
        FusionStack::new(bb.config.hidden_dim, bb.config.num_layers, &tags, MaskMode::Exclude, 3)
            .unwrap();
    let model = FusedModel::new(bb, adapters, fusion).unwrap();

    let mut data = BTreeMap::new();
    for lang in ["go", "php", "ruby"] {
        data.insert(lang.to_string(), encode_lang(&samples, &vocab, lang));
    }
    let outcome = train_advfusion(&model, &data, "ruby", &plan(2, 1e-3, 31), false).unwrap();

    let unmasks: Vec<_> = outcome.events.iter().filter(|e| e.event == "unmask").collect();
    assert_eq!(unmasks.len(), 1, "exactly one phase boundary");
    assert_eq!(outcome.epoch_losses.len(), 4, "two phases of two epochs each");
    let snapshot = outcome.phase1_snapshot.as_ref().expect("snapshot present");

    // Checkpoint the phase-one state the way the driver does: rewind the
    // mixture, set the mask, save, then put the final weights back.
    let final_params: Vec<_> = model
        .fusion
        .parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.detach()))
        .collect();
    model.fusion.restore(snapshot).unwrap();
    model.fusion.set_masked(&["ruby".to_string()]).unwrap();
    let p1_path = dir.path().join("phase1.ckpt");
    save_fusion_checkpoint(&p1_path, &model, &vocab, BTreeMap::new()).unwrap();
    model.fusion.clear_mask();
    model.fusion.restore(&final_params).unwrap();

    let final_path = dir.path().join("fusion.ckpt");
    save_fusion_checkpoint(&final_path, &model, &vocab, BTreeMap::new()).unwrap();

    // Phase-one checkpoint: mask restored, target silent in traces.
    let (p1, _, p1_meta) = load_fusion_checkpoint(&p1_path).unwrap();
    assert_eq!(p1_meta.fusion_masked.as_deref(), Some(&["ruby".to_string()][..]));
    assert_eq!(p1.fusion.masked_tags(), vec!["ruby".to_string()]);
    let probe = encode(&samples[0], &vocab, 64).unwrap();
    let traces = collect_traces(&p1, std::slice::from_ref(&probe.ids)).unwrap();
    let summary = summarize(&p1.fusion.tags, &traces).unwrap();
    for layer in &summary.layers {
        let ruby = layer.adapters.iter().find(|a| a.tag == "ruby").unwrap();
        assert_eq!(ruby.raw, 0.0);
        assert_eq!(ruby.percent, 0.0);
    }

    // Final checkpoint: no mask, forward agrees with the live model bitwise.
    let (reloaded, _, meta) = load_fusion_checkpoint(&final_path).unwrap();
    assert!(meta.fusion_masked.as_deref().unwrap_or_default().is_empty());
    let live = model.forward(&probe.ids).unwrap().data();
    let loaded = reloaded.forward(&probe.ids).unwrap().data();
    let same = live
        .iter()
        .zip(&loaded)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "reloaded fused model must match the live one bit for bit");
}

#[test]
fn identical_seeds_reproduce_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let sub = dir.path().join(format!("run{run}"));
        std::fs::create_dir_all(&sub).unwrap();
        let (samples, vocab, bb) = pretrained_world(&sub);
        let stack = trained_adapter(&bb, &samples, &vocab, "ruby", AdapterKind::Compacter);
        let path = sub.join("adapter.ckpt");
        save_adapter_checkpoint(&path, &bb, &stack, &vocab, BTreeMap::new()).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "same seeds, same corpus, same bytes");
}

#[test]
fn fusion_data_for_unknown_language_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, vocab, bb) = pretrained_world(dir.path());
    let adapters = vec![
        trained_adapter(&bb, &samples, &vocab, "go", AdapterKind::Bottleneck).frozen(),
        trained_adapter(&bb, &samples, &vocab, "php", AdapterKind::Bottleneck).frozen(),
    ];
    let tags: Vec<String> = adapters.iter().map(|a| a.spec.language.clone()).collect();
    let fusion =
        FusionStack::new(bb.config.hidden_dim, bb.config.num_layers, &tags, MaskMode::Exclude, 3)
            .unwrap();
    let model = FusedModel::new(bb, adapters, fusion).unwrap();

    let mut data = BTreeMap::new();
    data.insert("ruby".to_string(), encode_lang(&samples, &vocab, "ruby"));
    let err = train_adapterfusion(&model, &data, &plan(1, 1e-3, 3)).unwrap_err();
    assert!(err.is_usage(), "unknown roster language should be a usage error");
    assert!(err.to_string().contains("ruby"));
}
