//! Causal 3-D convolution and nearest-neighbor upsampling.
//!
//! The temporal axis is padded only at the start by `k_t − 1` zeros, so
//! output frame `t` depends exclusively on input frames `≤ t`. Spatial axes
//! use symmetric "same" padding (odd kernels required). Temporal upsampling
//! mirrors the causal downsampling arithmetic: factor 2 maps `T → 2T − 1` by
//! repeating every frame except the first.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

use super::tape::op_result;
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stride3(pub usize, pub usize, pub usize);

/// Output temporal extent of a causal conv: (T − 1) / s_t + 1.
pub fn causal_out_t(t: usize, stride_t: usize) -> usize {
    (t - 1) / stride_t + 1
}

struct ConvDims {
    ci: usize,
    co: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
    st: usize,
    sh: usize,
    sw: usize,
}

impl ConvDims {
    fn pad_t(&self) -> isize {
        self.kt as isize - 1
    }
    fn pad_h(&self) -> isize {
        (self.kh as isize - 1) / 2
    }
    fn pad_w(&self) -> isize {
        (self.kw as isize - 1) / 2
    }
}

fn conv_dims<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: Stride3,
) -> Result<ConvDims> {
    let (ci, t, h, w) = match input.shape() {
        [c, t, h, w] => (*c, *t, *h, *w),
        s => return Err(Error::shape("conv3d_causal", format!("input must be [C,T,H,W], got {s:?}"))),
    };
    let (co, ci2, kt, kh, kw) = match kernel.shape() {
        [co, ci2, kt, kh, kw] => (*co, *ci2, *kt, *kh, *kw),
        s => {
            return Err(Error::shape(
                "conv3d_causal",
                format!("kernel must be [Co,Ci,kt,kh,kw], got {s:?}"),
            ))
        }
    };
    if ci != ci2 {
        return Err(Error::shape("conv3d_causal", format!("channels {ci} vs kernel {ci2}")));
    }
    if [t, h, w, kt, kh, kw].iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape("conv3d_causal: zero extent".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidShape(format!(
            "conv3d_causal: spatial kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    let Stride3(st, sh, sw) = stride;
    if st == 0 || sh == 0 || sw == 0 {
        return Err(Error::invalid("conv3d_causal: stride must be >= 1 per axis"));
    }
    // Spatial kernels may not exceed the padded extent.
    if kh > h + (kh - 1) || kw > w + (kw - 1) {
        return Err(Error::InvalidShape("conv3d_causal: kernel larger than padded input".into()));
    }
    Ok(ConvDims {
        ci,
        co,
        t,
        h,
        w,
        kt,
        kh,
        kw,
        to: causal_out_t(t, st),
        ho: (h - 1) / sh + 1,
        wo: (w - 1) / sw + 1,
        st,
        sh,
        sw,
    })
}

/// For `wi = wo·sw + kw − pad`, the wo range keeping `wi ∈ [0, extent)`.
fn valid_out_range(extent: usize, stride: usize, k: isize, pad: isize, out: usize) -> (usize, usize) {
    let off = k - pad; // wi = wo*stride + off
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let max_in = extent as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = ((max_in as usize) / stride + 1).min(out);
    (lo.min(hi), hi)
}

impl<E: Scalar> Tensor<E> {
    /// Causal 3-D convolution of `[C,T,H,W]` by `[Co,C,kt,kh,kw]`.
    pub fn conv3d_causal(&self, kernel: &Tensor<E>, stride: Stride3) -> Result<Tensor<E>> {
        let d = conv_dims(self, kernel, stride)?;
        let xin = self.data_arc();
        let ker = kernel.data_arc();

        let out = conv_forward(&xin, &ker, &d);
        let dims = std::sync::Arc::new(d);
        let dims_b = std::sync::Arc::clone(&dims);
        op_result(
            "conv3d_causal",
            vec![dims.co, dims.to, dims.ho, dims.wo],
            out,
            &[self, kernel],
            move |g, sink| {
                let d = &*dims_b;
                sink.accumulate(0, |buf| conv_backward_input(g, &ker, buf, d));
                sink.accumulate(1, |buf| conv_backward_kernel(g, &xin, buf, d));
            },
        )
    }

    /// Per-channel bias over the first axis: y[c, ..] = x[c, ..] + b[c].
    pub fn add_channel_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let c = match self.shape().first() {
            Some(&c) => c,
            None => return Err(Error::shape("add_channel_bias", "rank-0 input")),
        };
        if bias.shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs channel extent {}", bias.shape(), c),
            ));
        }
        let inner = self.numel() / c;
        let bd = bias.data_arc();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bd[i / inner])
            .collect();
        op_result("add_channel_bias", self.shape().to_vec(), data, &[self, bias], move |g, sink| {
            sink.add(0, g);
            sink.accumulate(1, |buf| {
                for (ch, b) in buf.iter_mut().enumerate() {
                    for i in 0..inner {
                        *b += g[ch * inner + i];
                    }
                }
            });
        })
    }

    /// Nearest-neighbor upsampling of `[C,T,H,W]` by per-axis factors in {1,2}.
    /// The temporal factor repeats every frame except the first (T → 2T − 1);
    /// spatial factors repeat plainly (H → 2H).
    pub fn upsample_nearest_causal(&self, factors: (usize, usize, usize)) -> Result<Tensor<E>> {
        let (c, t, h, w) = match self.shape() {
            [c, t, h, w] => (*c, *t, *h, *w),
            s => {
                return Err(Error::shape(
                    "upsample_nearest_causal",
                    format!("input must be [C,T,H,W], got {s:?}"),
                ))
            }
        };
        let (ft, fh, fw) = factors;
        for f in [ft, fh, fw] {
            if f != 1 && f != 2 {
                return Err(Error::invalid(format!("upsample factor {f} outside {{1, 2}}")));
            }
        }
        let to = if ft == 2 { 2 * t - 1 } else { t };
        let ho = fh * h;
        let wo = fw * w;
        let src_t = move |tt: usize| if ft == 2 { (tt + 1) / 2 } else { tt };

        let mut data = vec![E::ZERO; c * to * ho * wo];
        {
            let xd = self.data();
            for_each_chunk_mut(&mut data, to * ho * wo, |ch, chunk| {
                for tt in 0..to {
                    let ti = src_t(tt);
                    for hh in 0..ho {
                        let hi = hh / fh;
                        let src = ((ch * t + ti) * h + hi) * w;
                        let dst = (tt * ho + hh) * wo;
                        for ww in 0..wo {
                            chunk[dst + ww] = xd[src + ww / fw];
                        }
                    }
                }
            });
        }
        op_result(
            "upsample_nearest_causal",
            vec![c, to, ho, wo],
            data,
            &[self],
            move |g, sink| {
                sink.accumulate(0, |buf| {
                    for_each_chunk_mut(buf, t * h * w, |ch, chunk| {
                        for tt in 0..to {
                            let ti = src_t(tt);
                            for hh in 0..ho {
                                let hi = hh / fh;
                                let dst = (ti * h + hi) * w;
                                let src = ((ch * to + tt) * ho + hh) * wo;
                                for ww in 0..wo {
                                    chunk[dst + ww / fw] += g[src + ww];
                                }
                            }
                        }
                    });
                });
            },
        )
    }

    /// Nearest-neighbor upsampling followed by a stride-1 causal convolution.
    pub fn upsample_nearest_then_conv(
        &self,
        factors: (usize, usize, usize),
        kernel: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.upsample_nearest_causal(factors)?.conv3d_causal(kernel, Stride3(1, 1, 1))
    }
}

fn conv_forward<E: Scalar>(xin: &[E], ker: &[E], d: &ConvDims) -> Vec<E> {
    let mut out = vec![E::ZERO; d.co * d.to * d.ho * d.wo];
    let (pt, ph, pw) = (d.pad_t(), d.pad_h(), d.pad_w());
    for_each_chunk_mut(&mut out, d.to * d.ho * d.wo, |co, chunk| {
        for ci in 0..d.ci {
            for kt in 0..d.kt {
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wgt = ker[(((co * d.ci + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw];
                        if wgt == E::ZERO {
                            continue;
                        }
                        let (wo_lo, wo_hi) =
                            valid_out_range(d.w, d.sw, kw as isize, pw, d.wo);
                        if wo_lo >= wo_hi {
                            continue;
                        }
                        let w_off = kw as isize - pw;
                        for to in 0..d.to {
                            let ti = to as isize * d.st as isize + kt as isize - pt;
                            if ti < 0 || ti >= d.t as isize {
                                continue;
                            }
                            for ho in 0..d.ho {
                                let hi = ho as isize * d.sh as isize + kh as isize - ph;
                                if hi < 0 || hi >= d.h as isize {
                                    continue;
                                }
                                let src = ((ci * d.t + ti as usize) * d.h + hi as usize) * d.w;
                                let dst = (to * d.ho + ho) * d.wo;
                                for wo in wo_lo..wo_hi {
                                    let wi = (wo * d.sw) as isize + w_off;
                                    chunk[dst + wo] += wgt * xin[src + wi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input<E: Scalar>(g: &[E], ker: &[E], dx: &mut [E], d: &ConvDims) {
    let (pt, ph, pw) = (d.pad_t(), d.pad_h(), d.pad_w());
    for_each_chunk_mut(dx, d.t * d.h * d.w, |ci, chunk| {
        for co in 0..d.co {
            for kt in 0..d.kt {
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wgt = ker[(((co * d.ci + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw];
                        if wgt == E::ZERO {
                            continue;
                        }
                        let (wo_lo, wo_hi) =
                            valid_out_range(d.w, d.sw, kw as isize, pw, d.wo);
                        let w_off = kw as isize - pw;
                        for to in 0..d.to {
                            let ti = to as isize * d.st as isize + kt as isize - pt;
                            if ti < 0 || ti >= d.t as isize {
                                continue;
                            }
                            for ho in 0..d.ho {
                                let hi = ho as isize * d.sh as isize + kh as isize - ph;
                                if hi < 0 || hi >= d.h as isize {
                                    continue;
                                }
                                let dst = ((ti as usize) * d.h + hi as usize) * d.w;
                                let src = ((co * d.to + to) * d.ho + ho) * d.wo;
                                for wo in wo_lo..wo_hi {
                                    let wi = (wo * d.sw) as isize + w_off;
                                    chunk[dst + wi as usize] += wgt * g[src + wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv_backward_kernel<E: Scalar>(g: &[E], xin: &[E], dk: &mut [E], d: &ConvDims) {
    let (pt, ph, pw) = (d.pad_t(), d.pad_h(), d.pad_w());
    for_each_chunk_mut(dk, d.ci * d.kt * d.kh * d.kw, |co, chunk| {
        for ci in 0..d.ci {
            for kt in 0..d.kt {
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let (wo_lo, wo_hi) =
                            valid_out_range(d.w, d.sw, kw as isize, pw, d.wo);
                        let w_off = kw as isize - pw;
                        let mut acc = E::ZERO;
                        for to in 0..d.to {
                            let ti = to as isize * d.st as isize + kt as isize - pt;
                            if ti < 0 || ti >= d.t as isize {
                                continue;
                            }
                            for ho in 0..d.ho {
                                let hi = ho as isize * d.sh as isize + kh as isize - ph;
                                if hi < 0 || hi >= d.h as isize {
                                    continue;
                                }
                                let src = ((ci * d.t + ti as usize) * d.h + hi as usize) * d.w;
                                let gsrc = ((co * d.to + to) * d.ho + ho) * d.wo;
                                for wo in wo_lo..wo_hi {
                                    let wi = (wo * d.sw) as isize + w_off;
                                    acc += g[gsrc + wo] * xin[src + wi as usize];
                                }
                            }
                        }
                        chunk[((ci * d.kt + kt) * d.kh + kh) * d.kw + kw] += acc;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_slice<E: Scalar>(t: &Tensor<E>, frame: usize) -> Vec<E> {
        let s = t.shape();
        let (c, tt, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let base = (ch * tt + frame) * h * w;
            out.extend_from_slice(&t.data()[base..base + h * w]);
        }
        out
    }

    #[test]
    fn causal_padding_first_frame_uses_only_frame_zero() {
        // k_t = 3: output frame 0 is computed from padded [0, 0, A].
        let x = Tensor::<f64>::randn(&[1, 3, 4, 4], 1).unwrap();
        // kernel that picks only its last temporal tap, center spatial tap
        let mut k = vec![0.0; 3 * 3 * 3];
        k[2 * 9 + 4] = 1.0;
        let kernel = Tensor::from_vec(vec![1, 1, 3, 3, 3], k).unwrap();
        let y = x.conv3d_causal(&kernel, Stride3(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data(), "delta kernel must reproduce the input");
    }

    #[test]
    fn causality_perturbing_late_frames_keeps_early_output_bits() {
        let x = Tensor::<f64>::randn(&[2, 4, 4, 4], 2).unwrap();
        let kernel = Tensor::<f64>::randn(&[3, 2, 3, 3, 3], 3).unwrap();
        let y = x.conv3d_causal(&kernel, Stride3(1, 1, 1)).unwrap();

        // perturb frame 2 only
        let mut data = x.data().to_vec();
        let (h, w, t) = (4, 4, 4);
        for c in 0..2 {
            let base = (c * t + 2) * h * w;
            for v in &mut data[base..base + h * w] {
                *v += 7.5;
            }
        }
        let x2 = Tensor::from_vec(x.shape().to_vec(), data).unwrap();
        let y2 = x2.conv3d_causal(&kernel, Stride3(1, 1, 1)).unwrap();
        for f in 0..2 {
            assert_eq!(frame_slice(&y, f), frame_slice(&y2, f), "frame {f} changed");
        }
        assert_ne!(frame_slice(&y, 2), frame_slice(&y2, 2));
    }

    #[test]
    fn strided_shapes_match_compression_arithmetic() {
        let x = Tensor::<f64>::randn(&[3, 5, 16, 16], 4).unwrap();
        let kernel = Tensor::<f64>::randn(&[8, 3, 3, 3, 3], 5).unwrap();
        let y = x.conv3d_causal(&kernel, Stride3(2, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[8, 3, 8, 8]); // T: 1+(5-1)/2, H/2, W/2
    }

    #[test]
    fn single_frame_input_works() {
        let x = Tensor::<f64>::randn(&[3, 1, 8, 8], 6).unwrap();
        let kernel = Tensor::<f64>::randn(&[4, 3, 3, 3, 3], 7).unwrap();
        let y = x.conv3d_causal(&kernel, Stride3(2, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[4, 1, 4, 4]);
    }

    #[test]
    fn upsample_shapes_and_constant_average() {
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 8).unwrap();
        let y = x.upsample_nearest_causal((1, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        let z = x.upsample_nearest_causal((2, 2, 2)).unwrap();
        assert_eq!(z.shape(), &[2, 5, 8, 8]);

        // constant input + averaging kernel stays constant
        let c = Tensor::<f64>::full(&[1, 2, 4, 4], 0.7);
        let k = Tensor::<f64>::full(&[1, 1, 1, 3, 3], 1.0 / 9.0);
        let u = c.upsample_nearest_then_conv((1, 2, 2), &k).unwrap();
        // interior points average nine 0.7s
        let v = u.data()[(1 * 8 + 4) * 8 + 4];
        assert!((v - 0.7).abs() < 1e-12);
    }

    #[test]
    fn upsample_rejects_bad_factor() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(x.upsample_nearest_causal((3, 1, 1)).is_err());
    }

    #[test]
    fn channel_bias_adds_per_channel() {
        let x = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
        let b = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
        let y = x.add_channel_bias(&b).unwrap();
        assert_eq!(&y.data()[..4], &[1.0; 4]);
        assert_eq!(&y.data()[4..], &[-2.0; 4]);
    }

    #[test]
    fn even_spatial_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        assert!(x.conv3d_causal(&k, Stride3(1, 1, 1)).is_err());
    }
}
