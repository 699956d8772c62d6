//! Sample corpora: loading, validation, vocabulary, encoding, synthesis.
//!
//! A corpus is a JSONL file of `{id, language, input, target}` records —
//! natural-language-ish prompts paired with code-ish targets, tagged by
//! language. The vocabulary maps tokens to dense ids with five reserved
//! specials, and [`encode`] lays a sample out as
//! `[bos] input [sep] target [eos]` with a loss mask that covers exactly the
//! target segment plus the closing `eos`.
//!
//! [`synth_corpus`] fabricates a controllable multi-language corpus: a
//! single template stream shared by all languages, with each word rendered
//! either in a shared surface form or a language-prefixed one according to
//! an overlap factor. Overlap 1.0 makes languages read identically; overlap
//! 0.0 makes their vocabularies disjoint.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// One prompt/target pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub language: String,
    pub input: String,
    pub target: String,
}

/// Result of loading a corpus file: the samples plus everything worth
/// telling the user that is not fatal.
#[derive(Debug)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    /// Non-fatal oddities (unknown fields), one message per occurrence.
    pub warnings: Vec<String>,
    /// Sample count per language tag.
    pub language_counts: BTreeMap<String, usize>,
}

const REQUIRED_FIELDS: [&str; 4] = ["id", "language", "input", "target"];

/// Load and validate a JSONL corpus. Malformed lines, missing or empty
/// required fields, and duplicate ids are errors that name the line;
/// unrecognized fields are warnings.
pub fn load_corpus(path: &Path) -> Result<LoadReport> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::CorpusFormat {
        path: display.clone(),
        line: 0,
        msg: format!("cannot read file: {e}"),
    })?;
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();
    let mut language_counts: BTreeMap<String, usize> = BTreeMap::new();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::CorpusFormat {
            path: display.clone(),
            line: line_no,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("record is not a JSON object".to_string()))?;

        let mut fields: HashMap<&str, String> = HashMap::new();
        for name in REQUIRED_FIELDS {
            let raw = obj
                .get(name)
                .ok_or_else(|| err(format!("missing required field `{name}`")))?;
            let s = raw
                .as_str()
                .ok_or_else(|| err(format!("field `{name}` must be a string")))?;
            if s.trim().is_empty() {
                return Err(err(format!("field `{name}` is empty")));
            }
            fields.insert(name, s.to_string());
        }
        for key in obj.keys() {
            if !REQUIRED_FIELDS.contains(&key.as_str()) {
                warnings.push(format!("{display}:{line_no}: unknown field `{key}` ignored"));
            }
        }

        let sample = Sample {
            id: fields.remove("id").unwrap(),
            language: fields.remove("language").unwrap(),
            input: fields.remove("input").unwrap(),
            target: fields.remove("target").unwrap(),
        };
        if let Some(first) = seen_ids.insert(sample.id.clone(), line_no) {
            return Err(err(format!(
                "duplicate sample id `{}` (first seen at line {first})",
                sample.id
            )));
        }
        *language_counts.entry(sample.language.clone()).or_insert(0) += 1;
        samples.push(sample);
    }

    if samples.is_empty() {
        return Err(Error::EmptyCorpus(display));
    }
    Ok(LoadReport {
        samples,
        warnings,
        language_counts,
    })
}

/// Write samples as JSONL. `load_corpus(save_corpus(s)) == s`.
pub fn save_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Group samples by language tag, preserving in-language order.
pub fn partition_by_language(samples: &[Sample]) -> BTreeMap<String, Vec<Sample>> {
    let mut map: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.language.clone()).or_default().push(s.clone());
    }
    map
}

/// Seeded split into train/valid/test by fraction (test takes the rest).
pub fn split_corpus(
    samples: &[Sample],
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&valid_frac)
        || train_frac + valid_frac > 1.0
    {
        return Err(Error::Config(format!(
            "split fractions invalid: train {train_frac} + valid {valid_frac} must stay within [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    SeedRng::derive(seed, "corpus-split").shuffle(&mut order);
    let n = samples.len() as f64;
    let n_train = (n * train_frac).round() as usize;
    let n_valid = ((n * valid_frac).round() as usize).min(samples.len() - n_train);
    let pick = |range: std::ops::Range<usize>| -> Vec<Sample> {
        order[range].iter().map(|&i| samples[i].clone()).collect()
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_valid),
        pick(n_train + n_valid..samples.len()),
    ))
}

// ── tokenization and vocabulary ────────────────────────────────────────────

/// Split text into word tokens (runs of `[A-Za-z0-9_]`) and single-character
/// punctuation tokens; whitespace only separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Token table with the five reserved specials at ids 0–4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuild from an id-ordered token list (checkpoint manifests store
    /// exactly this form).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Vocab(format!(
                "token list of {} entries cannot contain the {} specials",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Vocab(format!(
                    "token id {i} must be `{s}`, found `{}`",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Id-ordered token list (for persistence).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Build a vocabulary from corpus text: tokens ranked by frequency
/// (descending) with lexicographic tie-breaking, truncated to `max_size`
/// entries including the specials. Single characters of every token are
/// counted as well (weight 0 unless they occur as tokens themselves does
/// not apply — they are real occurrences below word level), so the
/// per-character fallback in [`encode`] has somewhere to land.
pub fn build_vocab(samples: &[Sample], max_size: usize) -> Result<Vocabulary> {
    if max_size < SPECIALS.len() {
        return Err(Error::Vocab(format!(
            "max_size {max_size} is smaller than the {} reserved specials",
            SPECIALS.len()
        )));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for sample in samples {
        for text in [&sample.input, &sample.target] {
            for tok in tokenize(text) {
                if tok.chars().count() > 1 {
                    // Count the characters too, at a fraction of the weight,
                    // so fallback pieces stay rankable but never outrank the
                    // words that contain them.
                    for ch in tok.chars() {
                        *counts.entry(ch.to_string()).or_insert(0) += 1;
                    }
                }
                *counts.entry(tok).or_insert(0) += 1000;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    // Frequency descending, then lexicographic ascending: fully deterministic.
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - SPECIALS.len())
            .map(|(t, _)| t),
    );
    Vocabulary::from_tokens(tokens)
}

/// A sample rendered as model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// True exactly at positions the training loss should cover: the target
    /// segment and the closing `eos`.
    pub loss_mask: Vec<bool>,
    /// Number of `<unk>` substitutions (after per-character fallback).
    pub unk_count: usize,
}

fn encode_tokens(tokens: &[String], vocab: &Vocabulary, unk_count: &mut usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tokens.len());
    for tok in tokens {
        if let Some(id) = vocab.id_of(tok) {
            ids.push(id);
        } else {
            // Out-of-vocabulary word: fall back to its characters.
            for ch in tok.chars() {
                match vocab.id_of(&ch.to_string()) {
                    Some(id) => ids.push(id),
                    None => {
                        ids.push(UNK);
                        *unk_count += 1;
                    }
                }
            }
        }
    }
    ids
}

/// Lay a sample out as `[bos] input [sep] target [eos]` with its loss mask.
///
/// When the sequence exceeds `max_seq_len`, input tokens are dropped from
/// the front (the tail closest to the separator carries the most signal)
/// before any target token is touched; if the target alone still does not
/// fit, its tail is dropped but the `eos` is kept.
pub fn encode(sample: &Sample, vocab: &Vocabulary, max_seq_len: usize) -> Result<Encoded> {
    if max_seq_len < 4 {
        return Err(Error::ModelConfig(format!(
            "max_seq_len {max_seq_len} cannot hold [bos, token, sep, eos]"
        )));
    }
    let mut unk_count = 0;
    let mut input_ids = encode_tokens(&tokenize(&sample.input), vocab, &mut unk_count);
    let mut target_ids = encode_tokens(&tokenize(&sample.target), vocab, &mut unk_count);

    let budget = max_seq_len - 3; // bos + sep + eos
    if target_ids.len() > budget {
        target_ids.truncate(budget);
        input_ids.clear();
    } else if input_ids.len() + target_ids.len() > budget {
        let keep = budget - target_ids.len();
        input_ids.drain(..input_ids.len() - keep);
    }

    let mut ids = Vec::with_capacity(input_ids.len() + target_ids.len() + 3);
    let mut loss_mask = Vec::with_capacity(ids.capacity());
    ids.push(BOS);
    loss_mask.push(false);
    ids.extend(&input_ids);
    loss_mask.extend(std::iter::repeat_n(false, input_ids.len()));
    ids.push(SEP);
    loss_mask.push(false);
    ids.extend(&target_ids);
    loss_mask.extend(std::iter::repeat_n(true, target_ids.len()));
    ids.push(EOS);
    loss_mask.push(true);

    Ok(Encoded {
        ids,
        loss_mask,
        unk_count,
    })
}

/// Map ids back to token strings.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().map(|&id| vocab.token(id).to_string()).collect()
}

// ── synthetic corpus ───────────────────────────────────────────────────────

/// Recipe for a synthesized multi-language corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub languages: Vec<String>,
    /// Training samples per language, parallel to `languages`.
    pub train_sizes: Vec<usize>,
    pub valid_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    /// Probability that a word keeps its shared surface form instead of the
    /// language-prefixed one. 1.0 = all languages identical, 0.0 = disjoint.
    pub overlap: f64,
    pub seed: u64,
}

/// Files written by [`synth_corpus`].
#[derive(Debug)]
pub struct SynthReport {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub sample_counts: BTreeMap<String, usize>,
}

const STEMS: [&str; 8] = [
    "alpha", "bravo", "castor", "delta", "ember", "fjord", "galena", "harbor",
];
const VERBS: [&str; 4] = ["make", "build", "write", "craft"];
const ARGS: [&str; 6] = ["x", "y", "z", "w", "val", "num"];
const OPS: [&str; 3] = ["plus", "minus", "times"];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("synth: no languages given".to_string()));
        }
        let n = self.languages.len();
        if self.train_sizes.len() != n || self.valid_sizes.len() != n || self.test_sizes.len() != n {
            return Err(Error::Config(format!(
                "synth: sizes must list one entry per language ({n})"
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "synth: overlap {} outside [0, 1]",
                self.overlap
            )));
        }
        if self.train_sizes.contains(&0) {
            return Err(Error::Config(
                "synth: every language needs at least one training sample".to_string(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for lang in &self.languages {
            if lang.is_empty() || !lang.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(Error::Config(format!("synth: bad language tag `{lang}`")));
            }
            if !seen.insert(lang) {
                return Err(Error::Config(format!("synth: duplicate language `{lang}`")));
            }
        }
        Ok(())
    }
}

/// One synthesized sample. The template stream depends only on
/// (seed, split, index), so every language realizes the same underlying
/// program; the pick stream decides, word by word, whether the shared or
/// the language-prefixed surface appears.
fn synth_sample(spec: &SynthSpec, lang: &str, split: &str, k: usize) -> Sample {
    let mut template = SeedRng::derive(spec.seed, &format!("template/{split}/{k}"));
    let mut picker = SeedRng::derive(spec.seed, &format!("pick/{lang}/{split}/{k}"));
    let mut memo: HashMap<&'static str, String> = HashMap::new();
    let mut pick = |word: &'static str| -> String {
        memo.entry(word)
            .or_insert_with(|| {
                if picker.uniform(0.0, 1.0) < spec.overlap {
                    word.to_string()
                } else {
                    format!("{lang}_{word}")
                }
            })
            .clone()
    };

    let stem = STEMS[template.index(STEMS.len())];
    let verb = VERBS[template.index(VERBS.len())];
    let op = OPS[template.index(OPS.len())];
    let arity = 1 + template.index(3);
    let first_arg = template.index(ARGS.len());
    let args: Vec<&'static str> = (0..arity).map(|i| ARGS[(first_arg + i) % ARGS.len()]).collect();

    let mut input_words = vec![pick(verb), pick("routine"), pick(stem), pick("with")];
    for a in &args {
        input_words.push(pick(a));
    }

    let mut target_words = vec![pick("begin"), pick(stem), pick("takes")];
    for a in &args {
        target_words.push(pick(a));
    }
    target_words.push(pick("ret"));
    target_words.push(pick(args[0]));
    target_words.push(pick(op));
    target_words.push(pick(args[arity - 1]));
    target_words.push(pick("end"));

    Sample {
        id: format!("{lang}-{split}-{k:04}"),
        language: lang.to_string(),
        input: input_words.join(" "),
        target: target_words.join(" "),
    }
}

/// Generate train/valid/test JSONL files under `out_dir`. Byte-identical
/// for a fixed spec.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthReport> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut sample_counts = BTreeMap::new();
    let splits: [(&str, &[usize]); 3] = [
        ("train", &spec.train_sizes),
        ("valid", &spec.valid_sizes),
        ("test", &spec.test_sizes),
    ];
    let mut paths = Vec::new();
    for (split, sizes) in splits {
        let mut samples = Vec::new();
        for (lang, &count) in spec.languages.iter().zip(sizes) {
            for k in 0..count {
                samples.push(synth_sample(spec, lang, split, k));
            }
            *sample_counts.entry(lang.clone()).or_insert(0) += count;
        }
        let path = out_dir.join(format!("{split}.jsonl"));
        save_corpus(&path, &samples)?;
        paths.push(path);
    }
    let mut it = paths.into_iter();
    Ok(SynthReport {
        train: it.next().unwrap(),
        valid: it.next().unwrap(),
        test: it.next().unwrap(),
        sample_counts,
    })
}
