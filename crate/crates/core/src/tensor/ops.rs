//! Forward operations and their backward rules.
//!
//! Every op validates shapes up front, computes the forward result, and
//! registers a closure that accumulates vector-Jacobian products into its
//! parents. Matrix products support a leading batch dimension: a rank-3
//! left operand combines with either a shared rank-2 right operand or a
//! rank-3 right operand with identical leading extents.

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// out[m,n] (+)= a[m,k] . b[k,n], row-major.
fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            if acc { 1.0 } else { 0.0 },
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[m,n] (+)= a[m,k] . b[n,k]^T, row-major.
fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            if acc { 1.0 } else { 0.0 },
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[m,n] (+)= a[k,m]^T . b[k,n], row-major.
fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            if acc { 1.0 } else { 0.0 },
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "add",
            Box::new(|up, node| {
                node.parents[0].accumulate_grad(up);
                node.parents[1].accumulate_grad(up);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "sub",
            Box::new(|up, node| {
                node.parents[0].accumulate_grad(up);
                let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                node.parents[1].accumulate_grad(&neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            "mul",
            Box::new(|up, node| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                let da: Vec<f64> = up.iter().zip(b).map(|(g, bv)| g * bv).collect();
                let db: Vec<f64> = up.iter().zip(a).map(|(g, av)| g * av).collect();
                node.parents[0].accumulate_grad(&da);
                node.parents[1].accumulate_grad(&db);
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "scale",
            Box::new(move |up, node| {
                let d: Vec<f64> = up.iter().map(|g| g * c).collect();
                node.parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Broadcast-add a `[h]` bias over the last axis of `[..., h]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let h = *self.shape().last().ok_or_else(|| Error::contract("add_bias on rank-0 tensor"))?;
        if bias.rank() != 1 || bias.shape()[0] != h {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % h])
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            "add_bias",
            Box::new(move |up, node| {
                node.parents[0].accumulate_grad(up);
                let mut db = vec![0.0; h];
                for (i, g) in up.iter().enumerate() {
                    db[i % h] += g;
                }
                node.parents[1].accumulate_grad(&db);
            }),
        ))
    }

    /// Matrix product with leading-batch broadcasting. `[.., m, k] . [k, n]`
    /// shares the right operand across the batch; `[.., m, k] . [.., k, n]`
    /// requires equal leading extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n, batch, shared) = matmul_dims("matmul", self, other, false)?;
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bs = if shared { b } else { &b[i * k * n..(i + 1) * k * n] };
            mm_nn(m, k, n, &a[i * m * k..(i + 1) * m * k], bs, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let mut shape = self.leading_dims(2).to_vec();
        shape.extend_from_slice(&[m, n]);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            "matmul",
            Box::new(move |up, node| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                if node.parents[0].requires_grad() {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let bs = if shared { b } else { &b[i * k * n..(i + 1) * k * n] };
                        mm_nt(m, n, k, &up[i * m * n..(i + 1) * m * n], bs, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    node.parents[0].accumulate_grad(&da);
                }
                if node.parents[1].requires_grad() {
                    let db_len = if shared { k * n } else { batch * k * n };
                    let mut db = vec![0.0; db_len];
                    for i in 0..batch {
                        let slot = if shared { &mut db[..] } else { &mut db[i * k * n..(i + 1) * k * n] };
                        mm_tn(k, m, n, &a[i * m * k..(i + 1) * m * k], &up[i * m * n..(i + 1) * m * n], slot, true);
                    }
                    node.parents[1].accumulate_grad(&db);
                }
            }),
        ))
    }

    /// `a . b^T` over the last two axes: `[.., m, k] . [.., n, k] -> [.., m, n]`.
    pub fn matmul_tb(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n, batch, shared) = matmul_dims("matmul_tb", self, other, true)?;
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bs = if shared { b } else { &b[i * n * k..(i + 1) * n * k] };
            mm_nt(m, k, n, &a[i * m * k..(i + 1) * m * k], bs, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let mut shape = self.leading_dims(2).to_vec();
        shape.extend_from_slice(&[m, n]);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            "matmul_tb",
            Box::new(move |up, node| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                if node.parents[0].requires_grad() {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let bs = if shared { b } else { &b[i * n * k..(i + 1) * n * k] };
                        mm_nn(m, n, k, &up[i * m * n..(i + 1) * m * n], bs, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    node.parents[0].accumulate_grad(&da);
                }
                if node.parents[1].requires_grad() {
                    let db_len = if shared { n * k } else { batch * n * k };
                    let mut db = vec![0.0; db_len];
                    for i in 0..batch {
                        let slot = if shared { &mut db[..] } else { &mut db[i * n * k..(i + 1) * n * k] };
                        mm_tn(n, m, k, &up[i * m * n..(i + 1) * m * n], &a[i * m * k..(i + 1) * m * k], slot, true);
                    }
                    node.parents[1].accumulate_grad(&db);
                }
            }),
        ))
    }

    pub fn sigmoid(&self) -> Tensor {
        // Saturated exponentials are clamped back inside the open unit
        // interval. The bounds depend on precision: they must still round
        // strictly inside (0, 1) after f32 quantization.
        let (lo, hi) = match self.precision() {
            crate::tensor::Precision::F64 => (f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
            crate::tensor::Precision::F32 => (1e-37, 1.0 - 1e-7),
        };
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| stable_sigmoid(v).clamp(lo, hi))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "sigmoid",
            Box::new(|up, node| {
                let contrib: Vec<f64> = up
                    .iter()
                    .zip(&node.data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                node.parents[0].accumulate_grad(&contrib);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "relu",
            Box::new(|up, node| {
                let x = node.parents[0].data();
                let contrib: Vec<f64> = up
                    .iter()
                    .zip(x)
                    .map(|(g, &xi)| if xi > 0.0 { *g } else { 0.0 })
                    .collect();
                node.parents[0].accumulate_grad(&contrib);
            }),
        )
    }

    /// Inclusive prefix sum along the last axis. The backward rule is the
    /// reversed prefix sum of the incoming gradient.
    pub fn cumsum(&self) -> Tensor {
        let n = *self.shape().last().unwrap_or(&0);
        let mut data = self.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for i in 1..n {
                    row[i] += row[i - 1];
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "cumsum",
            Box::new(move |up, node| {
                let mut contrib = up.to_vec();
                if n > 0 {
                    for row in contrib.chunks_mut(n) {
                        for i in (0..n - 1).rev() {
                            row[i] += row[i + 1];
                        }
                    }
                }
                node.parents[0].accumulate_grad(&contrib);
            }),
        )
    }

    /// Normalize each position over the last axis to zero mean / unit
    /// variance, then apply a learned affine transform.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let h = *self.shape().last().ok_or_else(|| Error::contract("layer_norm on rank-0 tensor"))?;
        if gain.shape() != [h] || bias.shape() != [h] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let x = self.data();
        let rows = x.len() / h;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..h {
                let xh = (row[j] - mean) * istd;
                xhat[r * h + j] = xh;
                out[r * h + j] = gain.data()[j] * xh + bias.data()[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            "layer_norm",
            Box::new(move |up, node| {
                let gain = node.parents[1].data();
                let hf = h as f64;
                if node.parents[0].requires_grad() {
                    let mut dx = vec![0.0; up.len()];
                    for r in 0..rows {
                        let base = r * h;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..h {
                            let dxh = up[base + j] * gain[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[base + j];
                        }
                        for j in 0..h {
                            let dxh = up[base + j] * gain[j];
                            dx[base + j] = inv_std[r]
                                * (dxh - sum_dxhat / hf - xhat[base + j] * sum_dxhat_xhat / hf);
                        }
                    }
                    node.parents[0].accumulate_grad(&dx);
                }
                if node.parents[1].requires_grad() || node.parents[2].requires_grad() {
                    let mut dgain = vec![0.0; h];
                    let mut dbias = vec![0.0; h];
                    for r in 0..rows {
                        for j in 0..h {
                            dgain[j] += up[r * h + j] * xhat[r * h + j];
                            dbias[j] += up[r * h + j];
                        }
                    }
                    node.parents[1].accumulate_grad(&dgain);
                    node.parents[2].accumulate_grad(&dbias);
                }
            }),
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; in eval
    /// mode (or at rate 0) the input passes through unchanged.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut SeedRng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "dropout",
            Box::new(move |up, node| {
                let contrib: Vec<f64> = up.iter().zip(&mask).map(|(g, m)| g * m).collect();
                node.parents[0].accumulate_grad(&contrib);
            }),
        ))
    }

    /// Softmax over the last axis after applying an admissibility mask.
    /// Blocked positions receive exactly zero weight; a row with no
    /// admissible position is an error, never a silent NaN.
    pub fn masked_softmax(&self, mask: &AttentionMask) -> Result<Tensor> {
        if self.shape() != mask.dims() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape().to_vec(),
                rhs: mask.dims().to_vec(),
            });
        }
        let k = mask.key_len();
        let x = self.data();
        let rows = x.len() / k;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let adm = mask.row(r);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                if adm[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionRow { row: r });
            }
            let mut denom = 0.0;
            for j in 0..k {
                if adm[j] {
                    let e = (row[j] - mx).exp();
                    out[r * k + j] = e;
                    denom += e;
                }
            }
            for j in 0..k {
                out[r * k + j] /= denom;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            "masked_softmax",
            Box::new(move |up, node| {
                let y = &node.data;
                let mut contrib = vec![0.0; up.len()];
                for r in 0..y.len() / k {
                    let base = r * k;
                    let mut dot = 0.0;
                    for j in 0..k {
                        dot += up[base + j] * y[base + j];
                    }
                    for j in 0..k {
                        contrib[base + j] = y[base + j] * (up[base + j] - dot);
                    }
                }
                node.parents[0].accumulate_grad(&contrib);
            }),
        ))
    }

    /// Plain softmax over the last axis (no mask).
    pub fn softmax(&self) -> Tensor {
        let mask = AttentionMask::all_admissible(self.shape().to_vec());
        self.masked_softmax(&mask).expect("all-admissible mask cannot produce empty rows")
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            "sum_all",
            Box::new(move |up, node| {
                node.parents[0].accumulate_grad(&vec![up[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            "mean_all",
            Box::new(move |up, node| {
                node.parents[0].accumulate_grad(&vec![up[0] / n as f64; n]);
            }),
        )
    }

    /// Sum over the last axis: `[.., n] -> [..]` (a rank-1 input reduces to `[1]`).
    pub fn sum_last(&self) -> Tensor {
        let n = *self.shape().last().unwrap_or(&1);
        let rows = self.numel() / n.max(1);
        let data: Vec<f64> = (0..rows)
            .map(|r| self.data()[r * n..(r + 1) * n].iter().sum())
            .collect();
        let shape = if self.rank() <= 1 {
            vec![1]
        } else {
            self.leading_dims(1).to_vec()
        };
        Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            "sum_last",
            Box::new(move |up, node| {
                let mut contrib = vec![0.0; rows * n];
                for r in 0..rows {
                    for j in 0..n {
                        contrib[r * n + j] = up[r];
                    }
                }
                node.parents[0].accumulate_grad(&contrib);
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(|up, node| {
                node.parents[0].accumulate_grad(up);
            }),
        ))
    }

    /// Columns `[from, to)` of the last axis.
    pub fn slice_last(&self, from: usize, to: usize) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::contract("slice_last on rank-0 tensor"))?;
        if from >= to || to > n {
            return Err(Error::contract(format!(
                "slice_last range {from}..{to} out of bounds for axis of {n}"
            )));
        }
        let w = to - from;
        let rows = self.numel() / n;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&self.data()[r * n + from..r * n + to]);
        }
        let mut shape = self.leading_dims(1).to_vec();
        shape.push(w);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            "slice_last",
            Box::new(move |up, node| {
                let mut contrib = vec![0.0; rows * n];
                for r in 0..rows {
                    contrib[r * n + from..r * n + to].copy_from_slice(&up[r * w..(r + 1) * w]);
                }
                node.parents[0].accumulate_grad(&contrib);
            }),
        ))
    }

    /// Concatenate along the last axis. All parts must share leading dims.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_last of zero tensors"))?;
        let lead = first.leading_dims(1).to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                if p.leading_dims(1) != lead.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "concat_last",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                Ok(*p.shape().last().unwrap())
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        Ok(Tensor::from_op(
            shape,
            data,
            parts.to_vec(),
            "concat_last",
            Box::new(move |up, node| {
                let mut off = 0;
                for (i, &w) in widths.iter().enumerate() {
                    if node.parents[i].requires_grad() {
                        let mut contrib = vec![0.0; rows * w];
                        for r in 0..rows {
                            contrib[r * w..(r + 1) * w]
                                .copy_from_slice(&up[r * total + off..r * total + off + w]);
                        }
                        node.parents[i].accumulate_grad(&contrib);
                    }
                    off += w;
                }
            }),
        ))
    }

    /// Row lookup into an embedding table `[vocab, h]`; the output takes
    /// shape `leading ++ [h]`. Backward scatter-adds into the table.
    pub fn embedding(table: &Tensor, ids: &[usize], leading: &[usize]) -> Result<Tensor> {
        if table.rank() != 2 {
            return Err(Error::contract(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape()
            )));
        }
        let (v, h) = (table.shape()[0], table.shape()[1]);
        let m: usize = leading.iter().product();
        if m != ids.len() {
            return Err(Error::contract(format!(
                "embedding: {m} positions implied by {leading:?} but {} ids",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::contract(format!("embedding id {bad} out of range for vocab {v}")));
        }
        let mut data = vec![0.0; m * h];
        for (i, &id) in ids.iter().enumerate() {
            data[i * h..(i + 1) * h].copy_from_slice(&table.data()[id * h..(id + 1) * h]);
        }
        let mut shape = leading.to_vec();
        shape.push(h);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![table.clone()],
            "embedding",
            Box::new(move |up, node| {
                let mut dtable = vec![0.0; v * h];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        dtable[id * h + j] += up[i * h + j];
                    }
                }
                node.parents[0].accumulate_grad(&dtable);
            }),
        ))
    }

    /// Mean negative log-likelihood of target classes over valid rows, fused
    /// with a stable log-softmax.
    pub fn cross_entropy(logits: &Tensor, targets: &[usize], valid: &[bool]) -> Result<Tensor> {
        let v = *logits.shape().last().ok_or_else(|| Error::contract("cross_entropy on rank-0 tensor"))?;
        let rows = logits.numel() / v;
        if targets.len() != rows || valid.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy: {rows} logit rows but {} targets / {} valid flags",
                targets.len(),
                valid.len()
            )));
        }
        let nv = valid.iter().filter(|&&b| b).count();
        if nv == 0 {
            return Err(Error::contract("cross_entropy: no valid positions"));
        }
        let x = logits.data();
        let mut loss = 0.0;
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::contract(format!(
                    "cross_entropy: target {t} out of range for vocab {v} at row {r}"
                )));
            }
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= nv as f64;
        let targets = targets.to_vec();
        let valid = valid.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![logits.clone()],
            "cross_entropy",
            Box::new(move |up, node| {
                let x = node.parents[0].data();
                let scale = up[0] / nv as f64;
                let mut contrib = vec![0.0; x.len()];
                for r in 0..x.len() / v {
                    if !valid[r] {
                        continue;
                    }
                    let row = &x[r * v..(r + 1) * v];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..v {
                        let e = (row[j] - mx).exp();
                        contrib[r * v + j] = e;
                        denom += e;
                    }
                    for j in 0..v {
                        contrib[r * v + j] = scale * (contrib[r * v + j] / denom
                            - if j == targets[r] { 1.0 } else { 0.0 });
                    }
                }
                node.parents[0].accumulate_grad(&contrib);
            }),
        ))
    }
}

fn matmul_dims(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    b_transposed: bool,
) -> Result<(usize, usize, usize, usize, bool)> {
    let ar = a.rank();
    let br = b.rank();
    if ar < 2 || (br != 2 && br != ar) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let m = a.shape()[ar - 2];
    let k = a.shape()[ar - 1];
    let (bk, n) = if b_transposed {
        (b.shape()[br - 1], b.shape()[br - 2])
    } else {
        (b.shape()[br - 2], b.shape()[br - 1])
    };
    let shared = br == 2 && ar > 2;
    if k != bk || (!shared && br != 2 && a.leading_dims(2) != b.leading_dims(2)) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let batch: usize = a.leading_dims(2).iter().product();
    Ok((m, k, n, batch, shared))
}
