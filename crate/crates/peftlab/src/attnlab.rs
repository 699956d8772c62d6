//! Analysis of fusion attention: which adapters does the mixture actually
//! listen to, layer by layer?
//!
//! The pipeline:
//! 1. run the fused model over evaluation samples with tracing on,
//! 2. grand-mean the attention weight of every adapter per layer (all
//!    tokens of all samples weigh equally),
//! 3. min–max normalize within each layer,
//! 4. rescale the normalized values to percentages summing to 100.
//!
//! A layer whose raw means are all equal carries no signal to normalize;
//! it falls back to a uniform share and is flagged *degenerate*. A masked
//! adapter has raw mean exactly 0 — the layer minimum — so its share is
//! exactly 0 %.
//!
//! Exports are CSV with shortest-round-trip float formatting: parsing a
//! value back yields the identical `f64`, and re-exporting a parsed file
//! reproduces it byte for byte.

use crate::error::{Error, Result};
use crate::fusion::{FusedModel, FusionTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterContribution {
    pub tag: String,
    /// Grand mean of the attention weight over tokens and samples.
    pub raw: f64,
    /// Min–max normalized within the layer (0 when degenerate).
    pub normalized: f64,
    /// Share of the layer's normalized mass, summing to 100 per layer.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerContribution {
    pub layer: usize,
    /// One entry per adapter, in roster order.
    pub adapters: Vec<AdapterContribution>,
    /// True when every raw mean was equal and the uniform fallback applied.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub tags: Vec<String>,
    pub layers: Vec<LayerContribution>,
}

/// Run the model over samples with tracing and return per-sample traces
/// (outer Vec: samples; inner Vec: layers).
pub fn collect_traces(model: &FusedModel, samples: &[Vec<usize>]) -> Result<Vec<Vec<FusionTrace>>> {
    if samples.is_empty() {
        return Err(Error::Analysis("no samples to trace".to_string()));
    }
    samples
        .iter()
        .map(|ids| model.forward_with_trace(ids).map(|(_, tr)| tr))
        .collect()
}

/// Aggregate traces into per-layer adapter shares.
pub fn summarize(tags: &[String], traces: &[Vec<FusionTrace>]) -> Result<AttentionSummary> {
    if traces.is_empty() {
        return Err(Error::Analysis("no traces to summarize".to_string()));
    }
    let num_layers = traces[0].len();
    let n = tags.len();
    for (s, t) in traces.iter().enumerate() {
        if t.len() != num_layers {
            return Err(Error::Analysis(format!(
                "sample {s} has {} layers of trace, expected {num_layers}",
                t.len()
            )));
        }
    }

    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        // Grand mean: every (sample, token) row counts once.
        let mut sums = vec![0.0; n];
        let mut rows = 0usize;
        for sample in traces {
            let tr = &sample[l];
            debug_assert_eq!(tr.weights.len(), tr.rows * n);
            for r in 0..tr.rows {
                for (j, s) in sums.iter_mut().enumerate() {
                    *s += tr.weights[r * n + j];
                }
            }
            rows += tr.rows;
        }
        let raw: Vec<f64> = sums.iter().map(|s| s / rows as f64).collect();

        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let degenerate = max == min;
        let (normalized, percent): (Vec<f64>, Vec<f64>) = if degenerate {
            (vec![0.0; n], vec![100.0 / n as f64; n])
        } else {
            let norm: Vec<f64> = raw.iter().map(|&x| (x - min) / (max - min)).collect();
            let total: f64 = norm.iter().sum();
            let pct = norm.iter().map(|&x| 100.0 * x / total).collect();
            (norm, pct)
        };

        layers.push(LayerContribution {
            layer: l,
            adapters: (0..n)
                .map(|j| AdapterContribution {
                    tag: tags[j].clone(),
                    raw: raw[j],
                    normalized: normalized[j],
                    percent: percent[j],
                })
                .collect(),
            degenerate,
        });
    }
    Ok(AttentionSummary {
        tags: tags.to_vec(),
        layers,
    })
}

// ── token-level heatmap ────────────────────────────────────────────────────

/// Attention weights token by token for a single sample: one row per
/// token position, one column per adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenHeatmap {
    pub tags: Vec<String>,
    pub tokens: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Build a heatmap from one sample's trace. `layer` picks a single layer;
/// `None` averages cell-wise across layers.
pub fn token_heatmap(
    tags: &[String],
    tokens: &[String],
    trace: &[FusionTrace],
    layer: Option<usize>,
) -> Result<TokenHeatmap> {
    if trace.is_empty() {
        return Err(Error::Analysis("empty trace".to_string()));
    }
    let n = tags.len();
    let t_rows = trace[0].rows;
    if tokens.len() != t_rows {
        return Err(Error::Analysis(format!(
            "{} token labels for {} positions",
            tokens.len(),
            t_rows
        )));
    }
    let picked: Vec<&FusionTrace> = match layer {
        Some(l) => {
            let tr = trace.get(l).ok_or_else(|| {
                Error::Analysis(format!("layer {l} out of range ({} layers)", trace.len()))
            })?;
            vec![tr]
        }
        None => trace.iter().collect(),
    };
    let mut rows = vec![vec![0.0; n]; t_rows];
    for tr in &picked {
        if tr.rows != t_rows {
            return Err(Error::Analysis("trace layers disagree on length".to_string()));
        }
        for (r, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell += tr.weights[r * n + j] / picked.len() as f64;
            }
        }
    }
    Ok(TokenHeatmap {
        tags: tags.to_vec(),
        tokens: tokens.to_vec(),
        rows,
    })
}

// ── CSV export ─────────────────────────────────────────────────────────────

/// Shortest representation that parses back to the identical bits — this
/// is what `{}` prints for `f64` and it can exceed 12 significant digits.
fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// `layer,adapter,raw,normalized,percent`, layers ascending, adapter tags
/// lexicographic within a layer.
pub fn summary_to_csv(summary: &AttentionSummary) -> String {
    let mut out = String::from("layer,adapter,raw,normalized,percent\n");
    for layer in &summary.layers {
        let mut entries: Vec<&AdapterContribution> = layer.adapters.iter().collect();
        entries.sort_by(|a, b| a.tag.cmp(&b.tag));
        for e in entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                layer.layer,
                e.tag,
                fmt_f64(e.raw),
                fmt_f64(e.normalized),
                fmt_f64(e.percent)
            ));
        }
    }
    out
}

/// Parse what [`summary_to_csv`] wrote.
pub fn summary_from_csv(text: &str) -> Result<AttentionSummary> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Analysis("empty CSV".to_string()))?;
    if header != "layer,adapter,raw,normalized,percent" {
        return Err(Error::Analysis(format!("unexpected CSV header `{header}`")));
    }
    let mut layers: Vec<LayerContribution> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Analysis(format!(
                "line {}: expected 5 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Analysis(format!("line {}: bad float `{s}`", i + 2)))
        };
        let layer: usize = fields[0]
            .parse()
            .map_err(|_| Error::Analysis(format!("line {}: bad layer `{}`", i + 2, fields[0])))?;
        let contrib = AdapterContribution {
            tag: fields[1].to_string(),
            raw: parse_f(fields[2])?,
            normalized: parse_f(fields[3])?,
            percent: parse_f(fields[4])?,
        };
        match layers.last_mut() {
            Some(last) if last.layer == layer => last.adapters.push(contrib),
            _ => layers.push(LayerContribution {
                layer,
                adapters: vec![contrib],
                degenerate: false,
            }),
        }
    }
    if layers.is_empty() {
        return Err(Error::Analysis("CSV holds no data rows".to_string()));
    }
    // Recover the degenerate flag (uniform share ⇔ no normalized signal)
    // and the tag roster from the first layer.
    for l in &mut layers {
        l.degenerate = l.adapters.iter().all(|a| a.normalized == 0.0);
    }
    let tags = layers[0]
        .adapters
        .iter()
        .map(|a| a.tag.clone())
        .collect();
    Ok(AttentionSummary { tags, layers })
}
