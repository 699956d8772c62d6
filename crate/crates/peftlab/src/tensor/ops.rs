//! Forward operations.
//!
//! Conventions shared by every op:
//! * shapes are validated up front and mismatches name the op and both
//!   offending shapes;
//! * outputs are freshly allocated, checked finite, and linked to their
//!   inputs through an [`Op`](super::autograd::Op) record when a gradient
//!   will be needed;
//! * the only broadcasting form is [`Tensor::add_bias`] (a `[n]` vector over
//!   the leading axis of an `[m, n]` matrix). Everything else demands exact
//!   shape agreement, which turns silent shape bugs into loud errors.

use crate::error::{Error, Result};

use super::autograd::Op;
use super::Tensor;

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if !t.is_matrix() {
        return Err(mismatch(op, format!("expected a 2-D tensor, got {:?}", t.shape())));
    }
    Ok(())
}

fn require_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tensor {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape(self, other, "add")?;
        let (a, b) = (self.read(), other.read());
        let data = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop((a, b));
        Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone()))
    }

    /// `[m, n] + [n]`: add `bias` to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        require_matrix(self, "add_bias")?;
        if bias.shape().len() != 1 || bias.numel() != self.cols() {
            return Err(mismatch(
                "add_bias",
                format!("bias {:?} does not fit matrix {:?}", bias.shape(), self.shape()),
            ));
        }
        let (m, n) = (self.rows(), self.cols());
        let (x, b) = (self.read(), bias.read());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = x[i * n + j] + b[j];
            }
        }
        drop((x, b));
        Tensor::from_op(data, vec![m, n], Op::AddBias(self.clone(), bias.clone()))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape(self, other, "multiply")?;
        let (a, b) = (self.read(), other.read());
        let data = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        drop((a, b));
        Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone()))
    }

    /// Multiply every element by the scalar `c`.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let data = self.read().iter().map(|x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    /// Matrix product `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        require_matrix(self, "matmul")?;
        require_matrix(other, "matmul")?;
        if self.cols() != other.rows() {
            return Err(mismatch(
                "matmul",
                format!("inner dimensions disagree: {:?} · {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let (a, b) = (self.read(), other.read());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = p * n;
                let orow = i * n;
                for j in 0..n {
                    data[orow + j] += av * b[brow + j];
                }
            }
        }
        drop((a, b));
        Tensor::from_op(data, vec![m, n], Op::Matmul(self.clone(), other.clone()))
    }

    /// max(x, 0) elementwise.
    pub fn relu(&self) -> Result<Tensor> {
        let data = self.read().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Relu(self.clone()))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.read().iter().sum();
        Tensor::from_op(vec![total], vec![1], Op::Sum(self.clone()))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        require_matrix(self, "transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let x = self.read();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        drop(x);
        Tensor::from_op(data, vec![n, m], Op::Transpose(self.clone()))
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        require_matrix(self, "slice_cols")?;
        let (m, n) = (self.rows(), self.cols());
        if len == 0 || start + len > n {
            return Err(mismatch(
                "slice_cols",
                format!("columns {start}..{} out of range for {:?}", start + len, self.shape()),
            ));
        }
        let x = self.read();
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&x[i * n + start..i * n + start + len]);
        }
        drop(x);
        Tensor::from_op(
            data,
            vec![m, len],
            Op::SliceCols {
                x: self.clone(),
                start,
                len,
            },
        )
    }

    /// Per-row sum: `[m, n] -> [m, 1]`.
    pub fn rowsum(&self) -> Result<Tensor> {
        require_matrix(self, "rowsum")?;
        let (m, n) = (self.rows(), self.cols());
        let x = self.read();
        let data = (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect();
        drop(x);
        Tensor::from_op(data, vec![m, 1], Op::RowSum(self.clone()))
    }

    /// Scale row i of `[m, n]` by the scalar in row i of the `[m, 1]` column `s`.
    pub fn rowscale(&self, s: &Tensor) -> Result<Tensor> {
        require_matrix(self, "rowscale")?;
        if s.shape() != [self.rows(), 1] {
            return Err(mismatch(
                "rowscale",
                format!("scale column {:?} does not fit matrix {:?}", s.shape(), self.shape()),
            ));
        }
        let (m, n) = (self.rows(), self.cols());
        let (x, sv) = (self.read(), s.read());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = x[i * n + j] * sv[i];
            }
        }
        drop((x, sv));
        Tensor::from_op(
            data,
            vec![m, n],
            Op::RowScale {
                x: self.clone(),
                s: s.clone(),
            },
        )
    }

    /// Kronecker product of two matrices: `[m, n] ⊗ [p, q] -> [m·p, n·q]`.
    pub fn kron(&self, other: &Tensor) -> Result<Tensor> {
        require_matrix(self, "kron")?;
        require_matrix(other, "kron")?;
        let (m, n) = (self.rows(), self.cols());
        let (p, q) = (other.rows(), other.cols());
        let (a, b) = (self.read(), other.read());
        let out_cols = n * q;
        let mut data = vec![0.0; m * p * out_cols];
        for i in 0..m {
            for j in 0..n {
                let av = a[i * n + j];
                for k in 0..p {
                    for l in 0..q {
                        data[(i * p + k) * out_cols + j * q + l] = av * b[k * q + l];
                    }
                }
            }
        }
        drop((a, b));
        Tensor::from_op(
            data,
            vec![m * p, out_cols],
            Op::Kron(self.clone(), other.clone()),
        )
    }

    /// Row-wise layer normalization of an `[m, n]` matrix with learned
    /// gain/bias of shape `[n]`. Variance is the population variance; `eps`
    /// keeps the denominator away from zero.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        require_matrix(self, "layer_norm")?;
        let n = self.cols();
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(mismatch(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not fit matrix {:?}",
                    gain.shape(),
                    bias.shape(),
                    self.shape()
                ),
            ));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::ModelConfig(format!("layer_norm epsilon must be positive, got {eps}")));
        }
        let m = self.rows();
        let (x, gd, bd) = (self.read(), gain.read(), bias.read());
        let mut data = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv = vec![0.0; m];
        let nf = n as f64;
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let r_inv = 1.0 / (var + eps).sqrt();
            inv[i] = r_inv;
            for j in 0..n {
                let xh = (row[j] - mean) * r_inv;
                xhat[i * n + j] = xh;
                data[i * n + j] = xh * gd[j] + bd[j];
            }
        }
        drop((x, gd, bd));
        Tensor::from_op(
            data,
            vec![m, n],
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv,
            },
        )
    }

    /// Softmax along `axis`, computed with max subtraction so magnitudes up
    /// to around 1e3 (and far beyond) cannot overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if (rank == 1 && axis != 0) || (rank == 2 && axis > 1) || rank > 2 {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let x = self.read();
        let mut data = vec![0.0; x.len()];
        let softmax_into = |src: &mut dyn Iterator<Item = usize>, x: &[f64], out: &mut [f64]| {
            let idx: Vec<usize> = src.collect();
            let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &idx {
                let e = (x[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for &i in &idx {
                out[i] /= total;
            }
        };
        if rank == 1 {
            softmax_into(&mut (0..x.len()), &x, &mut data);
        } else {
            let (m, n) = (self.rows(), self.cols());
            if axis == 1 {
                for i in 0..m {
                    softmax_into(&mut (i * n..(i + 1) * n), &x, &mut data);
                }
            } else {
                for j in 0..n {
                    softmax_into(&mut (0..m).map(|i| i * n + j), &x, &mut data);
                }
            }
        }
        drop(x);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        )
    }
}

/// Concatenate tensors along `axis` (axis 0 for 1-D, axis 0 or 1 for 2-D).
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(mismatch("concat", "no tensors given".to_string()));
    }
    let rank = parts[0].shape().len();
    if parts.iter().any(|p| p.shape().len() != rank) {
        return Err(mismatch("concat", "tensors of mixed rank".to_string()));
    }
    if axis >= rank {
        return Err(Error::InvalidAxis {
            op: "concat",
            axis,
            shape: parts[0].shape().to_vec(),
        });
    }
    let op = Op::Concat {
        parts: parts.to_vec(),
        axis,
    };
    if rank == 1 || axis == 0 {
        if rank == 2 {
            let n = parts[0].cols();
            if let Some(bad) = parts.iter().find(|p| p.cols() != n) {
                return Err(mismatch(
                    "concat",
                    format!("row widths disagree: {:?} vs {:?}", parts[0].shape(), bad.shape()),
                ));
            }
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.read());
        }
        let shape = if rank == 1 {
            vec![data.len()]
        } else {
            vec![data.len() / parts[0].cols(), parts[0].cols()]
        };
        Tensor::from_op(data, shape, op)
    } else {
        let m = parts[0].rows();
        if let Some(bad) = parts.iter().find(|p| p.rows() != m) {
            return Err(mismatch(
                "concat",
                format!("row counts disagree: {:?} vs {:?}", parts[0].shape(), bad.shape()),
            ));
        }
        let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = vec![0.0; m * total_cols];
        let mut offset = 0;
        for p in parts {
            let pc = p.cols();
            let pd = p.read();
            for i in 0..m {
                data[i * total_cols + offset..i * total_cols + offset + pc]
                    .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Tensor::from_op(data, vec![m, total_cols], op)
    }
}

/// Gather rows of `table` (`[v, h]`) by token id: result row t is
/// `table[ids[t]]`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    require_matrix(table, "embedding_lookup")?;
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (v, h) = (table.rows(), table.cols());
    if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
        return Err(Error::IndexOutOfRange {
            op: "embedding_lookup",
            index: bad,
            size: v,
        });
    }
    let td = table.read();
    let mut data = vec![0.0; ids.len() * h];
    for (t, &id) in ids.iter().enumerate() {
        data[t * h..(t + 1) * h].copy_from_slice(&td[id * h..(id + 1) * h]);
    }
    drop(td);
    Tensor::from_op(
        data,
        vec![ids.len(), h],
        Op::Embedding {
            table: table.clone(),
            ids: ids.to_vec(),
        },
    )
}

/// Mean negative log-softmax of the target class per row, skipping rows
/// whose target equals `ignore_index`. All rows ignored yields loss 0.
pub fn cross_entropy(logits: &Tensor, targets: &[i64], ignore_index: i64) -> Result<Tensor> {
    require_matrix(logits, "cross_entropy")?;
    let (t_len, v) = (logits.rows(), logits.cols());
    if targets.len() != t_len {
        return Err(mismatch(
            "cross_entropy",
            format!("{} targets for {} logit rows", targets.len(), t_len),
        ));
    }
    for &tgt in targets {
        if tgt != ignore_index && !(0..v as i64).contains(&tgt) {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                index: tgt.max(0) as usize,
                size: v,
            });
        }
    }
    let x = logits.read();
    let mut probs = vec![0.0; t_len * v];
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, &tgt) in targets.iter().enumerate() {
        if tgt == ignore_index {
            continue;
        }
        let row = &x[t * v..(t + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum_exp = 0.0;
        for (j, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            probs[t * v + j] = e;
            sum_exp += e;
        }
        for j in 0..v {
            probs[t * v + j] /= sum_exp;
        }
        // -log p[target] written as log-sum-exp minus the target logit.
        total += max + sum_exp.ln() - row[tgt as usize];
        count += 1;
    }
    drop(x);
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Tensor::from_op(
        vec![loss],
        vec![1],
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            ignore_index,
            probs,
            count,
        },
    )
}
