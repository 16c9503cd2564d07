//! Differentiable operations.
//!
//! Every op validates shapes, computes the forward value, and registers a
//! backward closure via `op_result`. Backward closures receive the output
//! gradient and accumulate into per-operand sinks; saved forward values are
//! captured as cheap `Arc` clones.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

use super::tape::op_result;
use super::{numel, strides, Tensor};

/// RMS-norm epsilon. Fixed; keeps the denominator bounded away from zero.
pub const RMS_EPS: f64 = 1e-6;

// ── raw matmul kernels ──────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm<E: Scalar>(a: &[E], b: &[E], c: &mut [E], _m: usize, k: usize, n: usize) {
    for_each_chunk_mut(c, n, |i, row| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    });
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    let _ = m;
    for_each_chunk_mut(c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *cv += acc;
        }
    });
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for_each_chunk_mut(c, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    });
}

fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<E: Scalar> Tensor<E> {
    // ── elementwise binary ──────────────────────────────────────────

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
        op_result("add", self.shape().to_vec(), data, &[self, other], move |g, sink| {
            sink.add(0, g);
            sink.add(1, g);
        })
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a - *b).collect();
        op_result("sub", self.shape().to_vec(), data, &[self, other], move |g, sink| {
            sink.add(0, g);
            sink.accumulate(1, |buf| {
                for (b, gv) in buf.iter_mut().zip(g) {
                    *b -= *gv;
                }
            });
        })
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a * *b).collect();
        let a = self.data_arc();
        let b = other.data_arc();
        op_result("mul", self.shape().to_vec(), data, &[self, other], move |g, sink| {
            sink.accumulate(0, |buf| {
                for ((d, gv), bv) in buf.iter_mut().zip(g).zip(b.iter()) {
                    *d += *gv * *bv;
                }
            });
            sink.accumulate(1, |buf| {
                for ((d, gv), av) in buf.iter_mut().zip(g).zip(a.iter()) {
                    *d += *gv * *av;
                }
            });
        })
    }

    // ── elementwise unary ───────────────────────────────────────────

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.affine(-1.0, 0.0)
    }

    /// y = a·x + b with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Result<Tensor<E>> {
        let (ae, be) = (E::from_f64(a), E::from_f64(b));
        let data = self.data().iter().map(|x| ae * *x + be).collect();
        op_result("affine", self.shape().to_vec(), data, &[self], move |g, sink| {
            sink.accumulate(0, |buf| {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += ae * *gv;
                }
            });
        })
    }

    pub fn scale(&self, a: f64) -> Result<Tensor<E>> {
        self.affine(a, 0.0)
    }

    pub fn add_scalar(&self, b: f64) -> Result<Tensor<E>> {
        self.affine(1.0, b)
    }

    pub fn exp(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data().iter().map(|x| x.exp()).collect();
        let y = data.clone();
        op_result("exp", self.shape().to_vec(), data, &[self], move |g, sink| {
            sink.accumulate(0, |buf| {
                for ((d, gv), yv) in buf.iter_mut().zip(g).zip(&y) {
                    *d += *gv * *yv;
                }
            });
        })
    }

    pub fn silu(&self) -> Result<Tensor<E>> {
        let x = self.data_arc();
        let data = x
            .iter()
            .map(|v| {
                let xf = v.to_f64();
                E::from_f64(xf * sigmoid_f64(xf))
            })
            .collect();
        op_result("silu", self.shape().to_vec(), data, &[self], move |g, sink| {
            sink.accumulate(0, |buf| {
                for ((d, gv), xv) in buf.iter_mut().zip(g).zip(x.iter()) {
                    let xf = xv.to_f64();
                    let s = sigmoid_f64(xf);
                    *d += *gv * E::from_f64(s * (1.0 + xf * (1.0 - s)));
                }
            });
        })
    }

    /// Clamp with straight-through gradient inside the range, zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<E>> {
        let (loe, hie) = (E::from_f64(lo), E::from_f64(hi));
        let x = self.data_arc();
        let data = x.iter().map(|v| (*v).maximum(loe).minimum(hie)).collect();
        op_result("clamp", self.shape().to_vec(), data, &[self], move |g, sink| {
            sink.accumulate(0, |buf| {
                for ((d, gv), xv) in buf.iter_mut().zip(g).zip(x.iter()) {
                    if *xv >= loe && *xv <= hie {
                        *d += *gv;
                    }
                }
            });
        })
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&self) -> Result<Tensor<E>> {
        let mut acc = E::ZERO;
        for v in self.data() {
            acc += *v;
        }
        let n = self.numel();
        op_result("sum", vec![], vec![acc], &[self], move |g, sink| {
            let gv = g[0];
            sink.accumulate(0, |buf| {
                for d in buf.iter_mut().take(n) {
                    *d += gv;
                }
            });
        })
    }

    pub fn mean(&self) -> Result<Tensor<E>> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean squared error against `other`, as a rank-0 tensor.
    pub fn mse(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "mse")?;
        let n = self.numel();
        let mut acc = E::ZERO;
        for (a, b) in self.data().iter().zip(other.data()) {
            let d = *a - *b;
            acc += d * d;
        }
        let a = self.data_arc();
        let b = other.data_arc();
        let inv_n = E::from_f64(1.0 / n as f64);
        op_result("mse", vec![], vec![acc * inv_n], &[self, other], move |g, sink| {
            let two = E::from_f64(2.0);
            let c = g[0] * two * inv_n;
            sink.accumulate(0, |buf| {
                for ((d, av), bv) in buf.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *d += c * (*av - *bv);
                }
            });
            sink.accumulate(1, |buf| {
                for ((d, av), bv) in buf.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *d -= c * (*av - *bv);
                }
            });
        })
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// Standard 2-D product: [m,k] · [k,n] → [m,n].
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = as_2d(self, "matmul")?;
        let (k2, n) = as_2d(other, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut data = vec![E::ZERO; m * n];
        mm(self.data(), other.data(), &mut data, m, k, n);
        let a = self.data_arc();
        let b = other.data_arc();
        op_result("matmul", vec![m, n], data, &[self, other], move |g, sink| {
            // dA = g · Bᵀ, dB = Aᵀ · g
            sink.accumulate(0, |buf| mm_nt(g, &b, buf, m, n, k));
            sink.accumulate(1, |buf| mm_tn(&a, g, buf, m, k, n));
        })
    }

    /// [m,k] · [n,k]ᵀ → [m,n].
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = as_2d(self, "matmul_nt")?;
        let (n, k2) = as_2d(other, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner extents differ: {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut data = vec![E::ZERO; m * n];
        mm_nt(self.data(), other.data(), &mut data, m, k, n);
        let a = self.data_arc();
        let b = other.data_arc();
        op_result("matmul_nt", vec![m, n], data, &[self, other], move |g, sink| {
            // dA = g · B, dB = gᵀ · A
            sink.accumulate(0, |buf| mm(g, &b, buf, m, n, k));
            sink.accumulate(1, |buf| mm_tn(g, &a, buf, m, n, k));
        })
    }

    // ── shape movement ──────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        let data = self.data().to_vec();
        op_result("reshape", shape.to_vec(), data, &[self], move |g, sink| {
            sink.add(0, g);
        })
    }

    /// Permute axes: `out[idx] = in[idx ∘ perm]` with `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let r = self.rank();
        if perm.len() != r || {
            let mut seen = vec![false; r];
            perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::invalid(format!("invalid permutation {:?} for rank {}", perm, r)));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_copy(self.data(), self.shape(), perm);
        let in_shape = self.shape().to_vec();
        let perm_owned = perm.to_vec();
        op_result("permute", out_shape.clone(), data, &[self], move |g, sink| {
            // inverse permutation maps output axes back to input axes
            let mut inv = vec![0usize; perm_owned.len()];
            for (i, &p) in perm_owned.iter().enumerate() {
                inv[p] = i;
            }
            let back = permute_copy(g, &out_shape, &inv);
            let _ = &in_shape;
            sink.add(0, &back);
        })
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let r = self.rank();
        if axis >= r || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "narrow(axis={axis}, start={start}, len={len}) on shape {:?}",
                self.shape()
            )));
        }
        let st = strides(self.shape());
        let outer: usize = self.shape()[..axis].iter().product();
        let inner = st[axis];
        let full_axis = self.shape()[axis];
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;

        let mut data = vec![E::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = o * full_axis * inner + start * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        op_result("narrow", out_shape, data, &[self], move |g, sink| {
            sink.accumulate(0, |buf| {
                for o in 0..outer {
                    let dst = o * full_axis * inner + start * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        buf[dst + i] += g[src + i];
                    }
                }
            });
        })
    }

    /// Split along `axis` into parts with the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<E>>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {:?} do not cover axis {} of {:?}", sizes, axis, self.shape()),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Concatenate along `axis`.
    pub fn concat(axis: usize, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let r = parts[0].rank();
        if axis >= r {
            return Err(Error::invalid(format!("concat axis {axis} out of range for rank {r}")));
        }
        for p in parts {
            if p.rank() != r
                || p.shape().iter().enumerate().any(|(i, &d)| i != axis && d != parts[0].shape()[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} outside axis {}", p.shape(), parts[0].shape(), axis),
                ));
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let total_axis = out_shape[axis];
        let part_axis: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

        let mut data = vec![E::ZERO; outer * total_axis * inner];
        for o in 0..outer {
            let mut offset = 0;
            for (p, &pa) in parts.iter().zip(&part_axis) {
                let src = o * pa * inner;
                let dst = o * total_axis * inner + offset * inner;
                data[dst..dst + pa * inner].copy_from_slice(&p.data()[src..src + pa * inner]);
                offset += pa;
            }
        }
        op_result("concat", out_shape, data, parts, move |g, sink| {
            let mut offset = 0;
            for (slot, &pa) in part_axis.iter().enumerate() {
                let off = offset;
                sink.accumulate(slot, |buf| {
                    for o in 0..outer {
                        let src = o * total_axis * inner + off * inner;
                        let dst = o * pa * inner;
                        for i in 0..pa * inner {
                            buf[dst + i] += g[src + i];
                        }
                    }
                });
                offset += pa;
            }
        })
    }

    // ── broadcast helpers ───────────────────────────────────────────

    /// Add a vector along the last axis: x[.., c] + v[c].
    pub fn add_rowvec(&self, v: &Tensor<E>) -> Result<Tensor<E>> {
        let c = last_axis(self, v, "add_rowvec")?;
        let rows = self.numel() / c;
        let vd = v.data_arc();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + vd[i % c])
            .collect();
        op_result("add_rowvec", self.shape().to_vec(), data, &[self, v], move |g, sink| {
            sink.add(0, g);
            sink.accumulate(1, |buf| {
                for r in 0..rows {
                    for j in 0..c {
                        buf[j] += g[r * c + j];
                    }
                }
            });
        })
    }

    /// Multiply by a vector along the last axis: x[.., c] · v[c].
    pub fn mul_rowvec(&self, v: &Tensor<E>) -> Result<Tensor<E>> {
        let c = last_axis(self, v, "mul_rowvec")?;
        let rows = self.numel() / c;
        let vd = v.data_arc();
        let xd = self.data_arc();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x * vd[i % c])
            .collect();
        op_result("mul_rowvec", self.shape().to_vec(), data, &[self, v], move |g, sink| {
            sink.accumulate(0, |buf| {
                for (i, d) in buf.iter_mut().enumerate() {
                    *d += g[i] * vd[i % c];
                }
            });
            sink.accumulate(1, |buf| {
                for r in 0..rows {
                    for j in 0..c {
                        buf[j] += g[r * c + j] * xd[r * c + j];
                    }
                }
            });
        })
    }

    // ── normalization & softmax ─────────────────────────────────────

    /// RMS normalization over `axis` with a learned gain indexed along it:
    /// y = x / sqrt(mean_axis(x²) + ε) ⊙ gain.
    pub fn rms_norm(&self, gain: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        let r = self.rank();
        if axis >= r {
            return Err(Error::invalid(format!("rms_norm axis {axis} out of range for rank {r}")));
        }
        let n = self.shape()[axis];
        if gain.shape() != [n] {
            return Err(Error::shape(
                "rms_norm",
                format!("gain shape {:?}, axis extent {}", gain.shape(), n),
            ));
        }
        let st = strides(self.shape());
        let inner = st[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let xd = self.data_arc();
        let gd = gain.data_arc();
        let eps = E::from_f64(RMS_EPS);
        let inv_n = E::from_f64(1.0 / n as f64);

        let mut data = vec![E::ZERO; self.numel()];
        let mut inv_rms = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut ms = E::ZERO;
                for j in 0..n {
                    let x = xd[base + j * inner];
                    ms += x * x;
                }
                let ir = E::ONE / (ms * inv_n + eps).sqrt();
                inv_rms[o * inner + i] = ir;
                for j in 0..n {
                    data[base + j * inner] = xd[base + j * inner] * ir * gd[j];
                }
            }
        }
        op_result("rms_norm", self.shape().to_vec(), data, &[self, gain], move |g, sink| {
            sink.accumulate(0, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let ir = inv_rms[o * inner + i];
                        // s = Σ_j g_j · gain_j · x_j
                        let mut s = E::ZERO;
                        for j in 0..n {
                            s += g[base + j * inner] * gd[j] * xd[base + j * inner];
                        }
                        let ir3 = ir * ir * ir * inv_n;
                        for j in 0..n {
                            let idx = base + j * inner;
                            buf[idx] += g[idx] * gd[j] * ir - xd[idx] * s * ir3;
                        }
                    }
                }
            });
            sink.accumulate(1, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let ir = inv_rms[o * inner + i];
                        for j in 0..n {
                            let idx = base + j * inner;
                            buf[j] += g[idx] * xd[idx] * ir;
                        }
                    }
                }
            });
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastaxis(&self) -> Result<Tensor<E>> {
        if self.rank() == 0 {
            return Err(Error::invalid("softmax_lastaxis requires rank >= 1"));
        }
        let n = *self.shape().last().unwrap();
        let rows = self.numel() / n;
        let xd = self.data();
        let mut data = vec![E::ZERO; self.numel()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mut mx = row[0];
            for v in row {
                mx = mx.maximum(*v);
            }
            let mut denom = E::ZERO;
            for (j, v) in row.iter().enumerate() {
                let e = (*v - mx).exp();
                data[r * n + j] = e;
                denom += e;
            }
            let inv = E::ONE / denom;
            for j in 0..n {
                data[r * n + j] *= inv;
            }
        }
        let y = data.clone();
        op_result("softmax", self.shape().to_vec(), data, &[self], move |g, sink| {
            sink.accumulate(0, |buf| {
                for r in 0..rows {
                    let base = r * n;
                    let mut dot = E::ZERO;
                    for j in 0..n {
                        dot += g[base + j] * y[base + j];
                    }
                    for j in 0..n {
                        buf[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            });
        })
    }

    // ── rotary position application ─────────────────────────────────

    /// Rotate adjacent pairs (2i, 2i+1) of each row by per-(row, pair) angles
    /// given as cos/sin tables of shape `[rows, dim/2]`. The tables are
    /// positional constants, not differentiated.
    pub fn rope_rotate(&self, cos: &Tensor<E>, sin: &Tensor<E>) -> Result<Tensor<E>> {
        let (rows, d) = as_2d(self, "rope_rotate")?;
        if d % 2 != 0 {
            return Err(Error::shape("rope_rotate", format!("odd feature dim {d}")));
        }
        let half = d / 2;
        if cos.shape() != [rows, half] || sin.shape() != [rows, half] {
            return Err(Error::shape(
                "rope_rotate",
                format!("tables {:?}/{:?} for input {:?}", cos.shape(), sin.shape(), self.shape()),
            ));
        }
        let cd = cos.data_arc();
        let sd = sin.data_arc();
        let xd = self.data();
        let mut data = vec![E::ZERO; self.numel()];
        for r in 0..rows {
            for i in 0..half {
                let (c, s) = (cd[r * half + i], sd[r * half + i]);
                let x0 = xd[r * d + 2 * i];
                let x1 = xd[r * d + 2 * i + 1];
                data[r * d + 2 * i] = c * x0 - s * x1;
                data[r * d + 2 * i + 1] = s * x0 + c * x1;
            }
        }
        op_result("rope_rotate", self.shape().to_vec(), data, &[self], move |g, sink| {
            // transpose of a rotation is the rotation by the negated angle
            sink.accumulate(0, |buf| {
                for r in 0..rows {
                    for i in 0..half {
                        let (c, s) = (cd[r * half + i], sd[r * half + i]);
                        let g0 = g[r * d + 2 * i];
                        let g1 = g[r * d + 2 * i + 1];
                        buf[r * d + 2 * i] += c * g0 + s * g1;
                        buf[r * d + 2 * i + 1] += c * g1 - s * g0;
                    }
                }
            });
        })
    }
}

fn as_2d<E: Scalar>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

fn last_axis<E: Scalar>(x: &Tensor<E>, v: &Tensor<E>, op: &'static str) -> Result<usize> {
    let c = match x.shape().last() {
        Some(&c) => c,
        None => return Err(Error::shape(op, "rank-0 input")),
    };
    if v.shape() != [c] {
        return Err(Error::shape(op, format!("vector {:?} vs last axis {}", v.shape(), c)));
    }
    Ok(c)
}

fn permute_copy<E: Scalar>(data: &[E], in_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let r = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_len: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(out_len);
    let mut idx = vec![0usize; r];
    for _ in 0..out_len {
        let mut src = 0;
        for (i, &p) in perm.iter().enumerate() {
            src += idx[i] * in_strides[p];
        }
        out.push(data[src]);
        // odometer over out_shape
        for i in (0..r).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::tape::Tape;
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let m = t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());

        let a = t64(&[2, 2], &[1., 2., 3., 4.]);
        let b = t64(&[2, 1], &[1., 1.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t64(&[2, 3], &[0.; 6]);
        let b = t64(&[2, 2], &[0.; 4]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_symmetric_case() {
        let x = t64(&[1, 2], &[0., 0.]);
        let y = x.softmax_lastaxis().unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::<f64>::randn(&[7, 11], 3).unwrap();
        let y = x.softmax_lastaxis().unwrap();
        for r in 0..7 {
            let s: f64 = y.data()[r * 11..(r + 1) * 11].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let x = Tensor::<f64>::randn(&[4, 5], 1).unwrap();
        assert_eq!(x.mse(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn rms_norm_zero_in_zero_out_and_unit_case() {
        let zero = Tensor::<f64>::zeros(&[2, 4]);
        let gain = Tensor::<f64>::ones(&[4]);
        let y = zero.rms_norm(&gain, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // rows with RMS exactly 1 pass through (up to the epsilon)
        let x = t64(&[1, 4], &[1., -1., 1., -1.]);
        let y = x.rms_norm(&gain, 1).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_output_rms_is_one_for_unit_gain() {
        let x = Tensor::<f64>::randn(&[3, 16], 9).unwrap();
        let gain = Tensor::<f64>::ones(&[16]);
        let y = x.rms_norm(&gain, 1).unwrap();
        for r in 0..3 {
            let ms: f64 = y.data()[r * 16..(r + 1) * 16].iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-6, "rms {}", ms.sqrt());
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f64>::randn(&[2, 3], 1).unwrap();
        let b = Tensor::<f64>::randn(&[2, 5], 2).unwrap();
        let c = Tensor::concat(1, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        let parts = c.split(1, &[3, 5]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::randn(&[2, 3, 4], 5).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn exp_overflow_is_an_error_not_inf() {
        let x = t64(&[1], &[1e4]);
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn two_layer_composite_backward_flows() {
        let tape = Tape::new();
        let mut w1 = Tensor::<f64>::randn(&[3, 4], 11).unwrap();
        let mut w2 = Tensor::<f64>::randn(&[4, 2], 12).unwrap();
        w1.watch(&tape).unwrap();
        w2.watch(&tape).unwrap();
        let x = Tensor::<f64>::randn(&[5, 3], 13).unwrap();
        let target = Tensor::<f64>::randn(&[5, 2], 14).unwrap();
        let h = x.matmul(&w1).unwrap().silu().unwrap();
        let out = h.matmul(&w2).unwrap();
        let loss = out.mse(&target).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&w1).unwrap().shape(), &[3, 4]);
        assert_eq!(grads.get(&w2).unwrap().shape(), &[4, 2]);
        assert!(grads.get(&w1).unwrap().max_abs() > 0.0);
    }
}
