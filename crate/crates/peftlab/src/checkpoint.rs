//! Self-contained model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "PEFTLAB\0"
//! version   u32       format revision (currently 1)
//! mlen      u64       manifest byte length
//! manifest  mlen      JSON: metadata + named tensor groups with shapes
//!                     and element offsets into the payload
//! payload   …         tensor data, f64 little-endian, concatenated
//! checksum  32 bytes  SHA-256 over everything above it
//! ```
//!
//! Design points:
//! * **Self-contained** — a checkpoint carries every tensor group needed
//!   to rebuild its model (an adapter checkpoint embeds the backbone it
//!   was trained on), plus the vocabulary and configuration.
//! * **Byte-deterministic** — maps are ordered, tensor order is fixed by
//!   the callers' parameter lists, and floats serialize canonically, so
//!   save → load → save reproduces the file bit for bit.
//! * **Tamper-evident** — the trailing checksum covers header, manifest,
//!   and payload; every failure mode has its own error variant.
//! * **Atomic** — writes go to a sibling temp file, then rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::MaskMode;
use crate::peft::AdapterSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PEFTLAB\0";
const VERSION: u32 = 1;

/// Everything about a checkpoint that is not tensor data.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// What the checkpoint holds: `backbone`, `adapter`, or `fusion`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
    /// Full vocabulary in id order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    /// Spec of the single adapter (adapter checkpoints).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
    /// Roster specs in fusion order (fusion checkpoints).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter_specs: Option<Vec<AdapterSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_mask_mode: Option<MaskMode>,
    /// Tags masked at save time (records the adversarial phase).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_masked: Option<Vec<String>>,
    /// Content hashes of the frozen groups this model was built on,
    /// keyed by group name — lets a loader verify nothing drifted.
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
    /// Free-form run metadata: seeds, step counts, phase markers.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload (not bytes).
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    groups: BTreeMap<String, Vec<TensorEntry>>,
}

/// An in-memory checkpoint: named tensor groups plus metadata.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    groups: BTreeMap<String, Vec<(String, Tensor)>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            meta,
            groups: BTreeMap::new(),
        }
    }

    /// Add (or replace) a tensor group; order within the group is kept.
    pub fn set_group(&mut self, group: &str, tensors: Vec<(String, Tensor)>) {
        self.groups.insert(group.to_string(), tensors);
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.keys().map(|s| s.as_str()).collect()
    }

    pub fn group(&self, name: &str) -> Option<&[(String, Tensor)]> {
        self.groups.get(name).map(|v| v.as_slice())
    }

    /// SHA-256 over a group's names, shapes, and data — the identity used
    /// for lineage records and frozen-weight discipline checks.
    pub fn content_hash(group: &[(String, Tensor)]) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in group {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Copy a stored group's values into live tensors, matched by name.
    /// The name sets and shapes must agree exactly in both directions.
    pub fn load_group_into(
        &self,
        path_label: &str,
        group: &str,
        targets: &[(String, Tensor)],
    ) -> Result<()> {
        let stored = self.groups.get(group).ok_or_else(|| {
            Error::CheckpointMissingGroup {
                path: path_label.to_string(),
                group: group.to_string(),
            }
        })?;
        if stored.len() != targets.len() {
            return Err(Error::CheckpointTensor {
                path: path_label.to_string(),
                name: group.to_string(),
                msg: format!(
                    "group holds {} tensors, model expects {}",
                    stored.len(),
                    targets.len()
                ),
            });
        }
        let by_name: BTreeMap<&str, &Tensor> =
            stored.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, target) in targets {
            let source = by_name.get(name.as_str()).ok_or_else(|| {
                Error::CheckpointTensor {
                    path: path_label.to_string(),
                    name: name.clone(),
                    msg: "missing from checkpoint group".to_string(),
                }
            })?;
            if source.shape() != target.shape() {
                return Err(Error::CheckpointTensor {
                    path: path_label.to_string(),
                    name: name.clone(),
                    msg: format!(
                        "shape {:?} in checkpoint, {:?} in model",
                        source.shape(),
                        target.shape()
                    ),
                });
            }
            target.set_data(source.data())?;
        }
        Ok(())
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<u8> = Vec::new();
        let mut groups = BTreeMap::new();
        let mut offset = 0u64;
        for (gname, tensors) in &self.groups {
            let mut entries = Vec::with_capacity(tensors.len());
            for (name, t) in tensors {
                let data = t.data();
                for v in &data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: data.len() as u64,
                });
                offset += data.len() as u64;
            }
            groups.insert(gname.clone(), entries);
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            groups,
        })?;

        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Serialize and write atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let label = path.display().to_string();
        let bytes = fs::read(path)?;
        Self::decode(&bytes, &label)
    }

    fn decode(bytes: &[u8], label: &str) -> Result<Checkpoint> {
        let bad_magic = || Error::CheckpointMagic {
            path: label.to_string(),
        };
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad_magic());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                path: label.to_string(),
                version,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_end = bytes.len() - 32;
        if mlen > body_end.saturating_sub(20) {
            return Err(Error::CheckpointManifest {
                path: label.to_string(),
                msg: format!("manifest length {mlen} exceeds file size"),
            });
        }
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(Error::CheckpointChecksum {
                path: label.to_string(),
            });
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..20 + mlen]).map_err(|e| Error::CheckpointManifest {
                path: label.to_string(),
                msg: e.to_string(),
            })?;
        let payload = &bytes[20 + mlen..body_end];
        let payload_elems = payload.len() / 8;

        let mut groups = BTreeMap::new();
        for (gname, entries) in manifest.groups {
            let mut tensors = Vec::with_capacity(entries.len());
            for e in entries {
                let numel: usize = e.shape.iter().product();
                let extent = e.offset.checked_add(e.len);
                if numel as u64 != e.len || extent.is_none_or(|end| end > payload_elems as u64) {
                    return Err(Error::CheckpointTensor {
                        path: label.to_string(),
                        name: e.name,
                        msg: format!(
                            "shape {:?} inconsistent with stored extent {}+{}",
                            e.shape, e.offset, e.len
                        ),
                    });
                }
                let start = e.offset as usize * 8;
                let data: Vec<f64> = payload[start..start + e.len as usize * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::from_vec(data, &e.shape).map_err(|err| Error::CheckpointTensor {
                    path: label.to_string(),
                    name: e.name.clone(),
                    msg: err.to_string(),
                })?;
                tensors.push((e.name, t));
            }
            groups.insert(gname, tensors);
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            groups,
        })
    }
}

// ── model-level assembly ───────────────────────────────────────────────────
//
// Complete checkpoints for the three model kinds. Each embeds everything
// needed to rebuild the model alone: configuration, vocabulary, the frozen
// backbone group, and (for fusion) every adapter in the roster. Lineage
// hashes record the identity of the frozen groups a model was trained on.

use crate::backbone::Backbone;
use crate::corpus::Vocabulary;
use crate::fusion::{FusedModel, FusionStack};
use crate::peft::AdapterStack;

fn missing(path: &Path, what: &str) -> Error {
    Error::CheckpointManifest {
        path: path.display().to_string(),
        msg: format!("missing {what}"),
    }
}

fn base_meta(kind: &str, bb: &Backbone, vocab: &Vocabulary) -> CheckpointMeta {
    CheckpointMeta {
        kind: kind.to_string(),
        backbone: Some(bb.config.clone()),
        vocab: Some(vocab.tokens().to_vec()),
        ..CheckpointMeta::default()
    }
}

/// Save a pretrained backbone. Returns the backbone group's content hash
/// (the identity later checkpoints record as lineage).
pub fn save_backbone_checkpoint(
    path: &Path,
    bb: &Backbone,
    vocab: &Vocabulary,
    extra: BTreeMap<String, String>,
) -> Result<String> {
    let mut meta = base_meta("backbone", bb, vocab);
    meta.extra = extra;
    let params = bb.parameters();
    let hash = Checkpoint::content_hash(&params);
    let mut ckpt = Checkpoint::new(meta);
    ckpt.set_group("backbone", params);
    ckpt.save(path)?;
    Ok(hash)
}

fn rebuild_backbone(ckpt: &Checkpoint, path: &Path) -> Result<(Backbone, Vocabulary)> {
    let label = path.display().to_string();
    let cfg = ckpt
        .meta
        .backbone
        .clone()
        .ok_or_else(|| missing(path, "backbone config"))?;
    let tokens = ckpt
        .meta
        .vocab
        .clone()
        .ok_or_else(|| missing(path, "vocabulary"))?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let bb = Backbone::new(cfg, 0)?;
    ckpt.load_group_into(&label, "backbone", &bb.parameters())?;
    Ok((bb.frozen(), vocab))
}

/// Load a backbone checkpoint; the returned backbone is frozen.
pub fn load_backbone_checkpoint(path: &Path) -> Result<(Backbone, Vocabulary, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let (bb, vocab) = rebuild_backbone(&ckpt, path)?;
    Ok((bb, vocab, ckpt.meta))
}

/// Save one trained adapter together with its frozen backbone.
pub fn save_adapter_checkpoint(
    path: &Path,
    bb: &Backbone,
    stack: &AdapterStack,
    vocab: &Vocabulary,
    extra: BTreeMap<String, String>,
) -> Result<()> {
    let mut meta = base_meta("adapter", bb, vocab);
    meta.adapter = Some(stack.spec.clone());
    meta.extra = extra;
    let bb_params = bb.parameters();
    meta.lineage
        .insert("backbone".to_string(), Checkpoint::content_hash(&bb_params));
    let mut ckpt = Checkpoint::new(meta);
    ckpt.set_group("backbone", bb_params);
    ckpt.set_group(
        &format!("adapter/{}", stack.spec.language),
        stack.parameters(),
    );
    ckpt.save(path)
}

/// Load an adapter checkpoint: frozen backbone, the adapter stack (left
/// trainable — callers freeze it when fusing), vocabulary, metadata.
pub fn load_adapter_checkpoint(
    path: &Path,
) -> Result<(Backbone, AdapterStack, Vocabulary, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let label = path.display().to_string();
    let (bb, vocab) = rebuild_backbone(&ckpt, path)?;
    let spec = ckpt
        .meta
        .adapter
        .clone()
        .ok_or_else(|| missing(path, "adapter spec"))?;
    let stack = AdapterStack::new(spec, &bb.config, 0)?;
    ckpt.load_group_into(
        &label,
        &format!("adapter/{}", stack.spec.language),
        &stack.parameters(),
    )?;
    Ok((bb, stack, vocab, ckpt.meta))
}

/// Save a fused model: backbone, the whole adapter roster, and the fusion
/// parameters, plus the mask state at save time (this is what marks a
/// phase-one snapshot as such).
pub fn save_fusion_checkpoint(
    path: &Path,
    model: &FusedModel,
    vocab: &Vocabulary,
    extra: BTreeMap<String, String>,
) -> Result<()> {
    let mut meta = base_meta("fusion", &model.backbone, vocab);
    meta.adapter_specs = Some(model.adapters.iter().map(|a| a.spec.clone()).collect());
    meta.fusion_mask_mode = Some(model.fusion.mask_mode);
    meta.fusion_masked = Some(model.fusion.masked_tags());
    meta.extra = extra;

    let bb_params = model.backbone.parameters();
    meta.lineage
        .insert("backbone".to_string(), Checkpoint::content_hash(&bb_params));
    let mut ckpt = Checkpoint::new(CheckpointMeta::default());
    for a in &model.adapters {
        let group = format!("adapter/{}", a.spec.language);
        let params = a.parameters();
        meta.lineage
            .insert(group.clone(), Checkpoint::content_hash(&params));
        ckpt.set_group(&group, params);
    }
    ckpt.meta = meta;
    ckpt.set_group("backbone", bb_params);
    ckpt.set_group("fusion", model.fusion.parameters());
    ckpt.save(path)
}

/// Load a fused model with its mask state restored. Embedded groups are
/// verified against the recorded lineage hashes.
pub fn load_fusion_checkpoint(path: &Path) -> Result<(FusedModel, Vocabulary, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let label = path.display().to_string();
    let (bb, vocab) = rebuild_backbone(&ckpt, path)?;
    let specs = ckpt
        .meta
        .adapter_specs
        .clone()
        .ok_or_else(|| missing(path, "adapter roster"))?;
    let mut adapters = Vec::with_capacity(specs.len());
    for spec in specs {
        let group = format!("adapter/{}", spec.language);
        let stack = AdapterStack::new(spec, &bb.config, 0)?;
        ckpt.load_group_into(&label, &group, &stack.parameters())?;
        let params = stack.parameters();
        if let Some(expect) = ckpt.meta.lineage.get(&group) {
            let got = Checkpoint::content_hash(&params);
            if &got != expect {
                return Err(Error::CheckpointTensor {
                    path: label.clone(),
                    name: group,
                    msg: "content does not match recorded lineage hash".to_string(),
                });
            }
        }
        adapters.push(stack.frozen());
    }
    let tags: Vec<String> = adapters.iter().map(|a| a.spec.language.clone()).collect();
    let mask_mode = ckpt.meta.fusion_mask_mode.unwrap_or_default();
    let fusion = FusionStack::new(
        bb.config.hidden_dim,
        bb.config.num_layers,
        &tags,
        mask_mode,
        0,
    )?;
    ckpt.load_group_into(&label, "fusion", &fusion.parameters())?;
    if let Some(masked) = &ckpt.meta.fusion_masked {
        if !masked.is_empty() {
            fusion.set_masked(masked)?;
        }
    }
    let model = FusedModel::new(bb, adapters, fusion)?;
    Ok((model, vocab, ckpt.meta))
}
