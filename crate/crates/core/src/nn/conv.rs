//! 1-D convolutions over `[B, T, C]` tensors: full, pointwise, depthwise,
//! strided, and the transposed (adjoint) variant used for decompression.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::normal;
use crate::scalar::{sc, Scalar};
use crate::tape::{Ctx, NodeId, Tape};
use crate::tensor::Tensor;

/// Shape of a convolution. `weights` live in the parameter store as
/// `[c_out, kernel, c_in]`, or `[c, kernel]` when depthwise (cross-channel
/// weights structurally absent). Output length is `ceil(T / stride)` with
/// zero padding of `kernel/2` on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub depthwise: bool,
}

impl Conv1dSpec {
    pub fn full(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::validate(Conv1dSpec { c_in, c_out, kernel, stride, depthwise: false })
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Result<Self> {
        Self::full(c_in, c_out, 1, 1)
    }

    pub fn depthwise(c: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::validate(Conv1dSpec { c_in: c, c_out: c, kernel, stride, depthwise: true })
    }

    fn validate(spec: Conv1dSpec) -> Result<Self> {
        if spec.kernel == 0 || spec.kernel % 2 == 0 {
            return Err(Error::invalid(
                "conv1d",
                format!("kernel must be odd and positive, got {}", spec.kernel),
            ));
        }
        if spec.stride == 0 || spec.c_in == 0 || spec.c_out == 0 {
            return Err(Error::invalid("conv1d", "channels and stride must be positive"));
        }
        if spec.depthwise && spec.c_in != spec.c_out {
            return Err(Error::invalid(
                "conv1d",
                format!("depthwise requires c_in == c_out, got {} and {}", spec.c_in, spec.c_out),
            ));
        }
        Ok(spec)
    }

    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        if self.depthwise {
            vec![self.c_out, self.kernel]
        } else {
            vec![self.c_out, self.kernel, self.c_in]
        }
    }

    fn fan_in(&self) -> usize {
        if self.depthwise {
            self.kernel
        } else {
            self.kernel * self.c_in
        }
    }
}

/// Kaiming-style weight tensor: N(0, 2/fan_in).
pub fn kaiming_weights<T: Scalar, R: Rng>(spec: &Conv1dSpec, rng: &mut R) -> Tensor<T> {
    let shape = spec.weight_shape();
    let std = (2.0 / spec.fan_in() as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| sc::<T>(normal(rng) * std)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Duplicate the first half of the output channels into the second half, so
/// a GLU applied to this layer's output initially computes the Swish of the
/// first-half pre-activations.
pub fn duplicate_output_halves<T: Scalar>(w: &mut Tensor<T>, b: &mut Tensor<T>) -> Result<()> {
    let c_out = w.shape()[0];
    if c_out % 2 != 0 {
        return Err(Error::invalid("glu_init", format!("odd output channels {c_out}")));
    }
    let per_out = w.numel() / c_out;
    let half = c_out / 2 * per_out;
    let (first, second) = w.data_mut().split_at_mut(half);
    second.copy_from_slice(first);
    let (bf, bs) = b.data_mut().split_at_mut(c_out / 2);
    bs.copy_from_slice(bf);
    Ok(())
}

/// A convolution layer bound to store parameters `{name}.w` and `{name}.b`.
pub struct Conv1d {
    pub spec: Conv1dSpec,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: Conv1dSpec,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_weights(&spec, rng);
        let b = Tensor::zeros(vec![spec.c_out]);
        Conv1d {
            spec,
            w: store.insert(format!("{name}.w"), w, true),
            b: store.insert(format!("{name}.b"), b, true),
        }
    }

    /// As [`Conv1d::init`] but with the GLU duplicate-half rule applied.
    pub fn init_glu<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: Conv1dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = kaiming_weights(&spec, rng);
        let mut b = Tensor::zeros(vec![spec.c_out]);
        duplicate_output_halves(&mut w, &mut b)?;
        Ok(Conv1d {
            spec,
            w: store.insert(format!("{name}.w"), w, true),
            b: store.insert(format!("{name}.b"), b, true),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = cx.param(self.w);
        let b = cx.param(self.b);
        conv1d(&mut cx.tape, x, w, b, &self.spec)
    }
}

/// Y[b,t,j] = sum_{d,i} X[b, t*stride + d - kernel/2, i] * W[j,d,i] + B[j],
/// out-of-range X read as zero.
pub fn conv1d<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    spec: &Conv1dSpec,
) -> Result<NodeId> {
    let spec = *spec;
    let xs = tape.value(x).shape();
    if xs.len() != 3 || xs[2] != spec.c_in {
        return Err(Error::shape(
            "conv1d",
            format!("[B, T, {}]", spec.c_in),
            format!("{xs:?}"),
        ));
    }
    let ws = tape.value(w).shape();
    if ws != spec.weight_shape() {
        return Err(Error::shape("conv1d", format!("{:?}", spec.weight_shape()), format!("{ws:?}")));
    }
    let (bsz, t_in) = (xs[0], xs[1]);
    let t_out = spec.out_len(t_in);
    let (xv, wv, bv) = (tape.value_rc(x), tape.value_rc(w), tape.value_rc(b));

    let out = if spec.depthwise {
        depthwise_forward(&xv, &wv, &bv, bsz, t_in, t_out, &spec)
    } else {
        full_forward(&xv, &wv, &bv, bsz, t_in, t_out, &spec)
    };

    Ok(tape.record(
        "conv1d",
        vec![x, w, b],
        out,
        Box::new(move |g| {
            if spec.depthwise {
                depthwise_backward(g, &xv, &wv, bsz, t_in, t_out, &spec)
            } else {
                full_backward(g, &xv, &wv, bsz, t_in, t_out, &spec)
            }
        }),
    ))
}

fn full_forward<T: Scalar>(
    xv: &Tensor<T>,
    wv: &Tensor<T>,
    bv: &Tensor<T>,
    bsz: usize,
    t_in: usize,
    t_out: usize,
    spec: &Conv1dSpec,
) -> Tensor<T> {
    let (ci, co, k) = (spec.c_in, spec.c_out, spec.kernel);
    let pad = k / 2;
    let mut out = Tensor::zeros(vec![bsz, t_out, co]);
    if bsz == 0 || t_out == 0 {
        return out;
    }
    let (x, w, b) = (xv.data(), wv.data(), bv.data());
    // reads are independent, so the batch splits across threads
    out.data_mut().par_chunks_mut(t_out * co).enumerate().for_each(|(bi, o)| {
        let xb = &x[bi * t_in * ci..][..t_in * ci];
        for t in 0..t_out {
            let obase = t * co;
            o[obase..obase + co].copy_from_slice(b);
            for d in 0..k {
                let src = (t * spec.stride + d) as isize - pad as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &xb[src as usize * ci..][..ci];
                for j in 0..co {
                    let wrow = &w[(j * k + d) * ci..][..ci];
                    let mut acc = T::zero();
                    for i in 0..ci {
                        acc += xrow[i] * wrow[i];
                    }
                    o[obase + j] += acc;
                }
            }
        }
    });
    out
}

fn full_backward<T: Scalar>(
    g: &Tensor<T>,
    xv: &Tensor<T>,
    wv: &Tensor<T>,
    bsz: usize,
    t_in: usize,
    t_out: usize,
    spec: &Conv1dSpec,
) -> Vec<Option<Tensor<T>>> {
    let (ci, co, k) = (spec.c_in, spec.c_out, spec.kernel);
    let pad = k / 2;
    let mut dx = Tensor::zeros(vec![bsz, t_in, ci]);
    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut db = Tensor::zeros(vec![co]);
    if bsz == 0 || t_in == 0 {
        return vec![Some(dx), Some(dw), Some(db)];
    }
    let (x, w, gd) = (xv.data(), wv.data(), g.data());
    // per-read dw/db partials, reduced in batch order below so the result
    // does not depend on the thread count
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .data_mut()
        .par_chunks_mut(t_in * ci)
        .enumerate()
        .map(|(bi, dxb)| {
            let mut dwb = vec![T::zero(); co * k * ci];
            let mut dbb = vec![T::zero(); co];
            let xb = &x[bi * t_in * ci..][..t_in * ci];
            let gb = &gd[bi * t_out * co..][..t_out * co];
            for t in 0..t_out {
                let gbase = t * co;
                for j in 0..co {
                    dbb[j] += gb[gbase + j];
                }
                for d in 0..k {
                    let src = (t * spec.stride + d) as isize - pad as isize;
                    if src < 0 || src >= t_in as isize {
                        continue;
                    }
                    let base = src as usize * ci;
                    let xrow = &xb[base..base + ci];
                    for j in 0..co {
                        let gj = gb[gbase + j];
                        if gj == T::zero() {
                            continue;
                        }
                        let wrow = &w[(j * k + d) * ci..][..ci];
                        let dwrow = &mut dwb[(j * k + d) * ci..][..ci];
                        for i in 0..ci {
                            dxb[base + i] += gj * wrow[i];
                            dwrow[i] += gj * xrow[i];
                        }
                    }
                }
            }
            (dwb, dbb)
        })
        .collect();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for (dwb, dbb) in partials {
        for (a, v) in dwd.iter_mut().zip(dwb) {
            *a += v;
        }
        for (a, v) in dbd.iter_mut().zip(dbb) {
            *a += v;
        }
    }
    vec![Some(dx), Some(dw), Some(db)]
}

fn depthwise_forward<T: Scalar>(
    xv: &Tensor<T>,
    wv: &Tensor<T>,
    bv: &Tensor<T>,
    bsz: usize,
    t_in: usize,
    t_out: usize,
    spec: &Conv1dSpec,
) -> Tensor<T> {
    let (c, k) = (spec.c_out, spec.kernel);
    let pad = k / 2;
    let mut out = Tensor::zeros(vec![bsz, t_out, c]);
    if bsz == 0 || t_out == 0 {
        return out;
    }
    let (x, w, b) = (xv.data(), wv.data(), bv.data());
    out.data_mut().par_chunks_mut(t_out * c).enumerate().for_each(|(bi, o)| {
        let xb = &x[bi * t_in * c..][..t_in * c];
        for t in 0..t_out {
            let obase = t * c;
            o[obase..obase + c].copy_from_slice(b);
            for d in 0..k {
                let src = (t * spec.stride + d) as isize - pad as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &xb[src as usize * c..][..c];
                for j in 0..c {
                    o[obase + j] += xrow[j] * w[j * k + d];
                }
            }
        }
    });
    out
}

fn depthwise_backward<T: Scalar>(
    g: &Tensor<T>,
    xv: &Tensor<T>,
    wv: &Tensor<T>,
    bsz: usize,
    t_in: usize,
    t_out: usize,
    spec: &Conv1dSpec,
) -> Vec<Option<Tensor<T>>> {
    let (c, k) = (spec.c_out, spec.kernel);
    let pad = k / 2;
    let mut dx = Tensor::zeros(vec![bsz, t_in, c]);
    let mut dw = Tensor::zeros(vec![c, k]);
    let mut db = Tensor::zeros(vec![c]);
    if bsz == 0 || t_in == 0 {
        return vec![Some(dx), Some(dw), Some(db)];
    }
    let (x, w, gd) = (xv.data(), wv.data(), g.data());
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .data_mut()
        .par_chunks_mut(t_in * c)
        .enumerate()
        .map(|(bi, dxb)| {
            let mut dwb = vec![T::zero(); c * k];
            let mut dbb = vec![T::zero(); c];
            let xb = &x[bi * t_in * c..][..t_in * c];
            let gb = &gd[bi * t_out * c..][..t_out * c];
            for t in 0..t_out {
                let gbase = t * c;
                for j in 0..c {
                    dbb[j] += gb[gbase + j];
                }
                for d in 0..k {
                    let src = (t * spec.stride + d) as isize - pad as isize;
                    if src < 0 || src >= t_in as isize {
                        continue;
                    }
                    let base = src as usize * c;
                    for j in 0..c {
                        let gj = gb[gbase + j];
                        dxb[base + j] += gj * w[j * k + d];
                        dwb[j * k + d] += gj * xb[base + j];
                    }
                }
            }
            (dwb, dbb)
        })
        .collect();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for (dwb, dbb) in partials {
        for (a, v) in dwd.iter_mut().zip(dwb) {
            *a += v;
        }
        for (a, v) in dbd.iter_mut().zip(dbb) {
            *a += v;
        }
    }
    vec![Some(dx), Some(dw), Some(db)]
}

/// Adjoint of a strided [`conv1d`]: maps `[B, T', C_in]` to
/// `[B, target_len, C_out]` where `ceil(target_len / stride) == T'`.
/// Weights are `[c_in, kernel, c_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvT1dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvT1dSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::invalid(
                "conv_transpose1d",
                format!("kernel must be odd and positive, got {kernel}"),
            ));
        }
        if stride == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::invalid("conv_transpose1d", "channels and stride must be positive"));
        }
        Ok(ConvT1dSpec { c_in, c_out, kernel, stride })
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.c_in, self.kernel, self.c_out]
    }
}

pub struct ConvTranspose1d {
    pub spec: ConvT1dSpec,
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose1d {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvT1dSpec,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (spec.kernel * spec.c_in) as f64).sqrt();
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|_| sc::<T>(normal(rng) * std)).collect()).unwrap();
        let b = Tensor::zeros(vec![spec.c_out]);
        ConvTranspose1d {
            spec,
            w: store.insert(format!("{name}.w"), w, true),
            b: store.insert(format!("{name}.b"), b, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
        target_len: usize,
    ) -> Result<NodeId> {
        let w = cx.param(self.w);
        let b = cx.param(self.b);
        conv_transpose1d(&mut cx.tape, x, w, b, &self.spec, target_len)
    }
}

/// Y[b,u,j] = B[j] + sum over (t,d) with t*stride + d - kernel/2 == u of
/// X[b,t,i] * W[i,d,j]; the scatter adjoint of the strided gather in conv1d.
pub fn conv_transpose1d<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    spec: &ConvT1dSpec,
    target_len: usize,
) -> Result<NodeId> {
    let spec = *spec;
    let xs = tape.value(x).shape();
    if xs.len() != 3 || xs[2] != spec.c_in {
        return Err(Error::shape(
            "conv_transpose1d",
            format!("[B, T', {}]", spec.c_in),
            format!("{xs:?}"),
        ));
    }
    let (bsz, t_in) = (xs[0], xs[1]);
    if target_len.div_ceil(spec.stride) != t_in {
        return Err(Error::invalid(
            "conv_transpose1d",
            format!("target length {target_len} does not compress to {t_in} at stride {}", spec.stride),
        ));
    }
    let (ci, co, k, pad) = (spec.c_in, spec.c_out, spec.kernel, spec.kernel / 2);
    let (xv, wv) = (tape.value_rc(x), tape.value_rc(w));
    let bv = tape.value(b);

    let mut out = Tensor::zeros(vec![bsz, target_len, co]);
    if bsz > 0 && target_len > 0 {
        let (x, w, b) = (xv.data(), wv.data(), bv.data());
        out.data_mut().par_chunks_mut(target_len * co).enumerate().for_each(|(bi, o)| {
            for u in 0..target_len {
                o[u * co..(u + 1) * co].copy_from_slice(b);
            }
            let xb = &x[bi * t_in * ci..][..t_in * ci];
            for t in 0..t_in {
                let xrow = &xb[t * ci..][..ci];
                for d in 0..k {
                    let u = (t * spec.stride + d) as isize - pad as isize;
                    if u < 0 || u >= target_len as isize {
                        continue;
                    }
                    let obase = u as usize * co;
                    for i in 0..ci {
                        let xi = xrow[i];
                        if xi == T::zero() {
                            continue;
                        }
                        let wrow = &w[(i * k + d) * co..][..co];
                        for j in 0..co {
                            o[obase + j] += xi * wrow[j];
                        }
                    }
                }
            }
        });
    }

    Ok(tape.record(
        "conv_transpose1d",
        vec![x, w, b],
        out,
        Box::new(move |g| {
            let gd = g.data();
            let mut dx = Tensor::zeros(vec![bsz, t_in, ci]);
            let mut dw = Tensor::zeros(spec.weight_shape());
            let mut db = Tensor::zeros(vec![co]);
            if bsz == 0 || t_in == 0 {
                return vec![Some(dx), Some(dw), Some(db)];
            }
            let (x, w) = (xv.data(), wv.data());
            let partials: Vec<(Vec<T>, Vec<T>)> = dx
                .data_mut()
                .par_chunks_mut(t_in * ci)
                .enumerate()
                .map(|(bi, dxb)| {
                    let mut dwb = vec![T::zero(); ci * k * co];
                    let mut dbb = vec![T::zero(); co];
                    let xb = &x[bi * t_in * ci..][..t_in * ci];
                    let gb = &gd[bi * target_len * co..][..target_len * co];
                    for u in 0..target_len {
                        for j in 0..co {
                            dbb[j] += gb[u * co + j];
                        }
                    }
                    for t in 0..t_in {
                        let xrow = &xb[t * ci..][..ci];
                        for d in 0..k {
                            let u = (t * spec.stride + d) as isize - pad as isize;
                            if u < 0 || u >= target_len as isize {
                                continue;
                            }
                            let grow = &gb[u as usize * co..][..co];
                            for i in 0..ci {
                                let wrow = &w[(i * k + d) * co..][..co];
                                let mut acc = T::zero();
                                for j in 0..co {
                                    acc += grow[j] * wrow[j];
                                }
                                dxb[t * ci + i] += acc;
                                let dwrow = &mut dwb[(i * k + d) * co..][..co];
                                let xi = xrow[i];
                                for j in 0..co {
                                    dwrow[j] += xi * grow[j];
                                }
                            }
                        }
                    }
                    (dwb, dbb)
                })
                .collect();
            let dwd = dw.data_mut();
            let dbd = db.data_mut();
            for (dwb, dbb) in partials {
                for (a, v) in dwd.iter_mut().zip(dwb) {
                    *a += v;
                }
                for (a, v) in dbd.iter_mut().zip(dbb) {
                    *a += v;
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }),
    ))
}
