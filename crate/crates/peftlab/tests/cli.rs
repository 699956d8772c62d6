//! Behavior of the `peftlab` binary: exit codes, run-directory contents,
//! and byte-level determinism, checked by spawning the real executable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peftlab::backbone::{Backbone, BackboneConfig};
use peftlab::checkpoint::{save_adapter_checkpoint, save_backbone_checkpoint};
use peftlab::corpus::{build_vocab, load_corpus, synth_corpus, SynthSpec};
use peftlab::peft::{AdapterKind, AdapterSpec, AdapterStack};

const BIN: &str = env!("CARGO_BIN_EXE_peftlab");

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("PEFTLAB_RUN_ROOT")
        .output()
        .expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (signal?)")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("lab.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"
[backbone]
hidden_dim = 16
num_layers = 2
num_heads = 2
ffn_dim = 32
max_seq_len = 48

[peft]
bottleneck_dim = 4
phm_dim = 2
lora_rank = 2

[training]
epochs = 1
batch_size = 4
lr = 0.002
seed = 7

[data]
train = "runs/corpus/train.jsonl"
valid = "runs/corpus/valid.jsonl"
test = "runs/corpus/test.jsonl"

[synth]
languages = ["go", "ruby"]
train_sizes = [6, 3]
valid_sizes = [2, 1]
test_sizes = [2, 1]
overlap = 0.5
seed = 5
"#;

/// Untrained fixture checkpoints for the validation-path tests, built
/// through the library so no subprocess has to train anything.
fn fixture_checkpoints(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = SynthSpec {
        languages: vec!["go".to_string(), "ruby".to_string()],
        train_sizes: vec![3, 2],
        valid_sizes: vec![1, 1],
        test_sizes: vec![1, 1],
        overlap: 0.5,
        seed: 5,
    };
    let corpus_dir = dir.join("runs/corpus");
    fs::create_dir_all(&corpus_dir).unwrap();
    let report = synth_corpus(&spec, &corpus_dir).unwrap();
    let samples = load_corpus(&report.train).unwrap().samples;
    let vocab = build_vocab(&samples, 256).unwrap();
    let cfg = BackboneConfig {
        vocab_size: vocab.len(),
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 48,
        ln_eps: 1e-5,
    };
    let bb = Backbone::new(cfg, 11).unwrap().frozen();
    let bb_path = dir.join("backbone.ckpt");
    save_backbone_checkpoint(&bb_path, &bb, &vocab, BTreeMap::new()).unwrap();

    let roster = dir.join("roster");
    fs::create_dir_all(&roster).unwrap();
    for (lang, kind) in [
        ("go", AdapterKind::Bottleneck),
        ("ruby", AdapterKind::Bottleneck),
    ] {
        let mut sp = AdapterSpec::new(kind, lang);
        sp.bottleneck_dim = 4;
        let stack = AdapterStack::new(sp, &bb.config, 3).unwrap();
        save_adapter_checkpoint(
            &roster.join(format!("{lang}.ckpt")),
            &bb,
            &stack,
            &vocab,
            BTreeMap::new(),
        )
        .unwrap();
    }
    (bb_path, roster)
}

#[test]
fn usage_errors_exit_two_and_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, SMALL_CONFIG);
    let (bb_path, roster) = fixture_checkpoints(dir);
    let bb = bb_path.to_str().unwrap();
    let roster_s = roster.to_str().unwrap();

    // (args, fragment the error must mention)
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (
            vec!["-c", "lab.toml", "evaluate", "--checkpoint", bb, "--metrics", "bleu5"],
            "bleu5",
        ),
        (
            vec!["-c", "lab.toml", "evaluate", "--checkpoint", "missing.ckpt"],
            "missing.ckpt",
        ),
        (
            vec!["-c", "lab.toml", "train-adapter", "--backbone", bb, "--language", "zig", "--method", "bottleneck"],
            "zig",
        ),
        (
            vec!["-c", "lab.toml", "analyze-attention", "--checkpoint", bb],
            "fusion checkpoint",
        ),
        (
            vec!["-c", "lab.toml", "train-fusion", "--adapters", "runs/corpus", "--mode", "fusion"],
            "need at least 2",
        ),
        (vec!["pretrain-backbone"], "data.train"),
        (vec!["-c", "lab.toml", "compare", "runs/corpus"], "summary.json"),
    ];
    for (args, fragment) in cases {
        let out = run_in(dir, &args);
        assert_eq!(code(&out), 2, "args {args:?}\nstderr: {}", stderr(&out));
        assert!(
            stderr(&out).contains(fragment),
            "stderr for {args:?} should mention `{fragment}`:\n{}",
            stderr(&out)
        );
    }

    // Flag/structure errors come from the argument parser, same exit code.
    let clap_cases: Vec<Vec<&str>> = vec![
        vec!["-c", "lab.toml", "train-fusion", "--adapters", roster_s, "--mode", "advfusion"],
        vec!["-c", "lab.toml", "train-adapter", "--backbone", bb, "--language", "go", "--method", "sparse"],
        vec!["no-such-command"],
    ];
    for args in clap_cases {
        let out = run_in(dir, &args);
        assert_eq!(code(&out), 2, "args {args:?}\nstderr: {}", stderr(&out));
    }

    // A config file with a typo is rejected before anything runs.
    fs::write(dir.join("typo.toml"), "[backbone]\nhiden_dim = 8\n").unwrap();
    let out = run_in(dir, &["-c", "typo.toml", "pretrain-backbone"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hiden_dim"), "{}", stderr(&out));

    // synth-corpus without a [synth] block has nothing to do.
    fs::write(dir.join("nosynth.toml"), "[training]\nepochs = 1\n").unwrap();
    let out = run_in(dir, &["-c", "nosynth.toml", "synth-corpus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("[synth]"), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoints_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, SMALL_CONFIG);
    let (bb_path, _) = fixture_checkpoints(dir);

    // Truncation breaks the envelope before the payload parses.
    let bytes = fs::read(&bb_path).unwrap();
    fs::write(dir.join("truncated.ckpt"), &bytes[..200]).unwrap();
    let out = run_in(dir, &["-c", "lab.toml", "evaluate", "--checkpoint", "truncated.ckpt"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));

    // A flipped payload byte fails the checksum.
    let mut tampered = bytes.clone();
    let last = tampered.len() - 40; // inside the tensor payload
    tampered[last] ^= 0xff;
    fs::write(dir.join("tampered.ckpt"), &tampered).unwrap();
    let out = run_in(dir, &["-c", "lab.toml", "evaluate", "--checkpoint", "tampered.ckpt"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

fn assert_run_dir(root: &Path, name: &str, artifacts: &[&str]) {
    let dir = root.join(name);
    for required in ["resolved-config.toml", "events.jsonl"] {
        assert!(
            dir.join(required).is_file(),
            "{name} should contain {required}"
        );
    }
    for a in artifacts {
        assert!(dir.join(a).is_file(), "{name} should contain {a}");
    }
}

#[test]
fn full_protocol_produces_complete_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, SMALL_CONFIG);
    let ok = |args: &[&str]| {
        let out = run_in(dir, args);
        assert_eq!(code(&out), 0, "args {args:?}\nstderr: {}", stderr(&out));
        out
    };

    ok(&["-c", "lab.toml", "synth-corpus"]);
    ok(&["-c", "lab.toml", "pretrain-backbone"]);
    for lang in ["go", "ruby"] {
        ok(&[
            "-c", "lab.toml", "train-adapter",
            "--backbone", "runs/backbone/backbone.ckpt",
            "--language", lang, "--method", "bottleneck",
        ]);
    }
    let roster = dir.join("runs/roster");
    fs::create_dir_all(&roster).unwrap();
    for lang in ["go", "ruby"] {
        fs::copy(
            dir.join(format!("runs/adapter-bottleneck-{lang}/adapter.ckpt")),
            roster.join(format!("{lang}.ckpt")),
        )
        .unwrap();
    }
    ok(&["-c", "lab.toml", "train-fusion", "--adapters", "runs/roster", "--mode", "fusion"]);
    ok(&[
        "-c", "lab.toml", "train-fusion", "--adapters", "runs/roster",
        "--mode", "advfusion", "--target", "ruby",
    ]);
    ok(&[
        "-c", "lab.toml", "evaluate",
        "--checkpoint", "runs/advfusion-bottleneck/fusion.ckpt", "--label", "advfusion",
    ]);
    ok(&[
        "-c", "lab.toml", "evaluate",
        "--checkpoint", "runs/fusion-bottleneck/fusion.ckpt", "--label", "fusion",
    ]);
    ok(&[
        "-c", "lab.toml", "analyze-attention",
        "--checkpoint", "runs/advfusion-bottleneck/phase1.ckpt", "--name", "attention-phase1",
    ]);
    ok(&["-c", "lab.toml", "compare", "runs/eval-advfusion", "runs/eval-fusion"]);

    // Every run directory carries the config echo, the event log, and its
    // artifacts; nothing else is scattered around.
    let root = dir.join("runs");
    assert_run_dir(&root, "corpus", &["train.jsonl", "valid.jsonl", "test.jsonl"]);
    assert_run_dir(&root, "backbone", &["backbone.ckpt"]);
    assert_run_dir(&root, "adapter-bottleneck-go", &["adapter.ckpt"]);
    assert_run_dir(&root, "adapter-bottleneck-ruby", &["adapter.ckpt"]);
    assert_run_dir(&root, "fusion-bottleneck", &["fusion.ckpt"]);
    assert_run_dir(&root, "advfusion-bottleneck", &["fusion.ckpt", "phase1.ckpt"]);
    assert_run_dir(
        &root,
        "eval-advfusion",
        &["summary.json", "decodes.jsonl", "bleu4.jsonl", "rougeL.jsonl", "prf.jsonl"],
    );
    assert_run_dir(&root, "attention-phase1", &["attention.csv"]);
    assert_run_dir(&root, "comparison", &["comparison.csv"]);

    // The adversarial schedule logged exactly one unmask boundary.
    let events = fs::read_to_string(root.join("advfusion-bottleneck/events.jsonl")).unwrap();
    let unmasks = events
        .lines()
        .filter(|l| l.contains(r#""event":"unmask""#))
        .count();
    assert_eq!(unmasks, 1, "events:\n{events}");
    assert!(!events.contains("time"), "event log must carry no timestamps");

    // Phase-one attention: the masked target contributes exactly zero.
    let csv = fs::read_to_string(root.join("attention-phase1/attention.csv")).unwrap();
    let ruby_rows: Vec<&str> = csv.lines().filter(|l| l.contains(",ruby,")).collect();
    assert!(!ruby_rows.is_empty());
    for row in ruby_rows {
        assert!(row.ends_with(",0,0,0"), "masked target row should be all zero: {row}");
    }

    // The comparison table covers both configurations.
    let table = fs::read_to_string(root.join("comparison/comparison.csv")).unwrap();
    assert!(table.starts_with("configuration,bleu4,prf,rougeL"));
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("advfusion,") && table.contains("fusion,"));

    // Repeating an evaluation reproduces its outputs byte for byte.
    ok(&[
        "-c", "lab.toml", "evaluate",
        "--checkpoint", "runs/advfusion-bottleneck/fusion.ckpt",
        "--label", "advfusion", "--name", "eval-repeat",
    ]);
    for file in ["summary.json", "decodes.jsonl", "bleu4.jsonl"] {
        let a = fs::read(root.join("eval-advfusion").join(file)).unwrap();
        let b = fs::read(root.join("eval-repeat").join(file)).unwrap();
        assert_eq!(a, b, "{file} should be byte-identical across reruns");
    }
}

#[test]
fn run_root_environment_variable_is_honored_but_flag_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, SMALL_CONFIG);
    fixture_checkpoints(dir); // writes runs/corpus for data paths

    let out = Command::new(BIN)
        .args(["-c", "lab.toml", "pretrain-backbone", "--epochs", "1"])
        .current_dir(dir)
        .env("PEFTLAB_RUN_ROOT", "env-root")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.join("env-root/backbone/backbone.ckpt").is_file());

    let out = Command::new(BIN)
        .args(["-c", "lab.toml", "--run-root", "flag-root", "pretrain-backbone", "--epochs", "1"])
        .current_dir(dir)
        .env("PEFTLAB_RUN_ROOT", "env-root-2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.join("flag-root/backbone/backbone.ckpt").is_file());
    assert!(!dir.join("env-root-2").exists());

    // Identical seeds and corpus ⇒ identical checkpoint bytes.
    let a = fs::read(dir.join("env-root/backbone/backbone.ckpt")).unwrap();
    let b = fs::read(dir.join("flag-root/backbone/backbone.ckpt")).unwrap();
    assert_eq!(a, b);
}
