//! Operation records and the reverse-mode sweep.
//!
//! Each op output stores an [`Op`] naming its inputs plus whatever forward
//! values its derivative needs (normalized rows for layer norm, class
//! probabilities for cross entropy). [`backward`] walks the DAG once in
//! topological order, carries per-node upstream gradients in a scratch map,
//! and only at the end adds each node's total into its persistent `grad`
//! slot — that separation is what makes repeated backward calls accumulate
//! exactly (two sweeps produce exactly twice one sweep).

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

/// How a tensor came to be. `Leaf` marks inputs, parameters, and any op
/// output whose inputs all run gradient-free.
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    /// `[m,n] + [n]`, the bias broadcast over the leading axis — the only
    /// broadcasting form in the crate.
    AddBias(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Matmul(Tensor, Tensor),
    Relu(Tensor),
    Sum(Tensor),
    Transpose(Tensor),
    SliceCols {
        x: Tensor,
        start: usize,
        len: usize,
    },
    RowSum(Tensor),
    /// Scale row i of `x` by the scalar `s[i]` (`s` is `[m,1]`).
    RowScale {
        x: Tensor,
        s: Tensor,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Kron(Tensor, Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        /// Normalized rows (x - mean) / sqrt(var + eps), saved at forward.
        xhat: Vec<f64>,
        /// Per-row 1 / sqrt(var + eps).
        inv: Vec<f64>,
    },
    Softmax {
        x: Tensor,
        axis: usize,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<i64>,
        ignore_index: i64,
        /// Softmax of each non-ignored row (ignored rows left zero).
        probs: Vec<f64>,
        /// Number of non-ignored positions.
        count: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Transpose(..) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::RowSum(..) => "rowsum",
            Op::RowScale { .. } => "rowscale",
            Op::Concat { .. } => "concat",
            Op::Kron(..) => "kron",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Embedding { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Kron(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Transpose(x)
            | Op::RowSum(x)
            | Op::SliceCols { x, .. }
            | Op::Softmax { x, .. } => vec![x],
            Op::RowScale { x, s } => vec![x, s],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

/// Scratch accumulator for one sweep: node id -> upstream gradient so far.
struct GradSink {
    by_id: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    fn add(&mut self, t: &Tensor, delta: Vec<f64>) {
        if !t.requires_grad() {
            return;
        }
        match self.by_id.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (gi, di) in e.get_mut().iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }
}

/// Topological order (inputs before consumers) of the grad-requiring
/// sub-DAG under `root`. Iterative so deep graphs cannot overflow the stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut expanded: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, children_done)) = stack.pop() {
        if children_done {
            order.push(node);
            continue;
        }
        if !expanded.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for input in node.op().inputs() {
            if input.requires_grad() && !expanded.contains(&input.id()) {
                stack.push((input.clone(), false));
            }
        }
    }
    order
}

pub(crate) fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.requires_grad() {
        // Nothing trainable contributed to this value; there is nothing to do.
        return Ok(());
    }

    let order = topo_order(loss);
    let mut sink = GradSink {
        by_id: HashMap::new(),
    };
    sink.by_id.insert(loss.id(), vec![1.0]);

    for node in order.iter().rev() {
        // A node can appear in the order yet receive no gradient only if it
        // were unreachable from the root, which topo_order excludes.
        let g = match sink.by_id.remove(&node.id()) {
            Some(g) => g,
            None => continue,
        };
        node.accumulate_grad(&g);
        propagate(node, &g, &mut sink);
    }
    Ok(())
}

/// Apply one op's local derivative, pushing contributions to its inputs.
fn propagate(node: &Tensor, g: &[f64], sink: &mut GradSink) {
    match node.op() {
        Op::Leaf => {}

        Op::Add(a, b) => {
            sink.add(a, g.to_vec());
            sink.add(b, g.to_vec());
        }

        Op::AddBias(x, b) => {
            sink.add(x, g.to_vec());
            if b.requires_grad() {
                let n = b.numel();
                let rows = g.len() / n;
                let mut db = vec![0.0; n];
                for i in 0..rows {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                sink.add(b, db);
            }
        }

        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.read();
                sink.add(a, g.iter().zip(bd.iter()).map(|(gi, bi)| gi * bi).collect());
            }
            if b.requires_grad() {
                let ad = a.read();
                sink.add(b, g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).collect());
            }
        }

        Op::Scale(x, c) => {
            sink.add(x, g.iter().map(|gi| gi * c).collect());
        }

        Op::Matmul(a, b) => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            if a.requires_grad() {
                // dA = g · Bᵀ
                let bd = b.read();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gv * bd[p * n + j];
                        }
                    }
                }
                sink.add(a, da);
            }
            if b.requires_grad() {
                // dB = Aᵀ · g
                let ad = a.read();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                sink.add(b, db);
            }
        }

        Op::Relu(x) => {
            let xd = x.read();
            sink.add(
                x,
                g.iter()
                    .zip(xd.iter())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            );
        }

        Op::Sum(x) => {
            sink.add(x, vec![g[0]; x.numel()]);
        }

        Op::Transpose(x) => {
            let (m, n) = (x.rows(), x.cols());
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            sink.add(x, dx);
        }

        Op::SliceCols { x, start, len } => {
            let (m, n) = (x.rows(), x.cols());
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..*len {
                    dx[i * n + start + j] = g[i * len + j];
                }
            }
            sink.add(x, dx);
        }

        Op::RowSum(x) => {
            let (m, n) = (x.rows(), x.cols());
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[i];
                }
            }
            sink.add(x, dx);
        }

        Op::RowScale { x, s } => {
            let (m, n) = (x.rows(), x.cols());
            if x.requires_grad() {
                let sd = s.read();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[i * n + j] * sd[i];
                    }
                }
                sink.add(x, dx);
            }
            if s.requires_grad() {
                let xd = x.read();
                let mut ds = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        ds[i] += g[i * n + j] * xd[i * n + j];
                    }
                }
                sink.add(s, ds);
            }
        }

        Op::Concat { parts, axis } => {
            if *axis == 0 || parts[0].shape().len() == 1 {
                // Contiguous blocks along the leading axis.
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    sink.add(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            } else {
                // Column blocks: split every row.
                let rows = parts[0].rows();
                let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
                let mut col_offset = 0;
                for p in parts {
                    let pc = p.cols();
                    let mut dp = vec![0.0; rows * pc];
                    for i in 0..rows {
                        for j in 0..pc {
                            dp[i * pc + j] = g[i * total_cols + col_offset + j];
                        }
                    }
                    sink.add(p, dp);
                    col_offset += pc;
                }
            }
        }

        Op::Kron(a, b) => {
            let (m, n) = (a.rows(), a.cols());
            let (p, q) = (b.rows(), b.cols());
            let out_cols = n * q;
            if a.requires_grad() {
                let bd = b.read();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for k in 0..p {
                            for l in 0..q {
                                acc += g[(i * p + k) * out_cols + j * q + l] * bd[k * q + l];
                            }
                        }
                        da[i * n + j] = acc;
                    }
                }
                sink.add(a, da);
            }
            if b.requires_grad() {
                let ad = a.read();
                let mut db = vec![0.0; p * q];
                for k in 0..p {
                    for l in 0..q {
                        let mut acc = 0.0;
                        for i in 0..m {
                            for j in 0..n {
                                acc += g[(i * p + k) * out_cols + j * q + l] * ad[i * n + j];
                            }
                        }
                        db[k * q + l] = acc;
                    }
                }
                sink.add(b, db);
            }
        }

        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv,
        } => {
            let (m, n) = (x.rows(), x.cols());
            let gd = gain.read();
            if x.requires_grad() {
                let mut dx = vec![0.0; m * n];
                for (i, &inv_i) in inv.iter().enumerate() {
                    let row = i * n;
                    let mut sum1 = 0.0; // Σ_j dxhat_j
                    let mut sum2 = 0.0; // Σ_j dxhat_j * xhat_j
                    for j in 0..n {
                        let dxh = g[row + j] * gd[j];
                        sum1 += dxh;
                        sum2 += dxh * xhat[row + j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dxh = g[row + j] * gd[j];
                        dx[row + j] = inv_i * (dxh - sum1 / nf - xhat[row + j] * sum2 / nf);
                    }
                }
                sink.add(x, dx);
            }
            if gain.requires_grad() {
                let mut dg = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
                sink.add(gain, dg);
            }
            if bias.requires_grad() {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                sink.add(bias, db);
            }
        }

        Op::Softmax { x, axis } => {
            // dx = s ⊙ (g − Σ_axis g ⊙ s), with s the op's own output.
            let s = node.read();
            let mut dx = vec![0.0; s.len()];
            if x.shape().len() == 1 {
                let dot: f64 = g.iter().zip(s.iter()).map(|(gi, si)| gi * si).sum();
                for i in 0..s.len() {
                    dx[i] = s[i] * (g[i] - dot);
                }
            } else {
                let (m, n) = (x.rows(), x.cols());
                if *axis == 1 {
                    for i in 0..m {
                        let row = i * n;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[row + j] * s[row + j];
                        }
                        for j in 0..n {
                            dx[row + j] = s[row + j] * (g[row + j] - dot);
                        }
                    }
                } else {
                    for j in 0..n {
                        let mut dot = 0.0;
                        for i in 0..m {
                            dot += g[i * n + j] * s[i * n + j];
                        }
                        for i in 0..m {
                            dx[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                }
            }
            drop(s);
            sink.add(x, dx);
        }

        Op::Embedding { table, ids } => {
            if table.requires_grad() {
                let (v, h) = (table.rows(), table.cols());
                let mut dt = vec![0.0; v * h];
                for (t, id) in ids.iter().enumerate() {
                    for j in 0..h {
                        dt[id * h + j] += g[t * h + j];
                    }
                }
                sink.add(table, dt);
            }
        }

        Op::CrossEntropy {
            logits,
            targets,
            ignore_index,
            probs,
            count,
        } => {
            if logits.requires_grad() && *count > 0 {
                let (t_len, v) = (logits.rows(), logits.cols());
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; t_len * v];
                for (t, tgt) in targets.iter().enumerate() {
                    if *tgt == *ignore_index {
                        continue;
                    }
                    let row = t * v;
                    for j in 0..v {
                        dl[row + j] = scale * probs[row + j];
                    }
                    dl[row + *tgt as usize] -= scale;
                }
                sink.add(logits, dl);
            }
        }
    }
}
