//! Primitive differentiable operations.
//!
//! Each op computes its output eagerly and records a backward closure on the
//! tape. Tensors with a time axis use the `[B, T, C]` layout (row major).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, tape: &Tape<T>, a: NodeId, b: NodeId) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
    }
    Ok(())
}

fn rank3<T: Scalar>(op: &'static str, tape: &Tape<T>, a: NodeId) -> Result<(usize, usize, usize)> {
    let s = tape.value(a).shape();
    if s.len() != 3 {
        return Err(Error::shape(op, "[B, T, C]", format!("{s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape("add", tape, a, b)?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x + y);
    Ok(tape.record(
        "add",
        vec![a, b],
        out,
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape("sub", tape, a, b)?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x - y);
    Ok(tape.record(
        "sub",
        vec![a, b],
        out,
        Box::new(|g| vec![Some(g.clone()), Some(g.map(|x| -x))]),
    ))
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape("mul", tape, a, b)?;
    let (va, vb) = (tape.value_rc(a), tape.value_rc(b));
    let out = va.zip_map(&vb, |x, y| x * y);
    Ok(tape.record(
        "mul",
        vec![a, b],
        out,
        Box::new(move |g| {
            vec![
                Some(g.zip_map(&vb, |gi, y| gi * y)),
                Some(g.zip_map(&va, |gi, x| gi * x)),
            ]
        }),
    ))
}

pub fn neg<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let out = tape.value(a).map(|x| -x);
    tape.record("neg", vec![a], out, Box::new(|g| vec![Some(g.map(|x| -x))]))
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: NodeId, c: T) -> NodeId {
    let out = tape.value(a).map(|x| x * c);
    tape.record(
        "scale",
        vec![a],
        out,
        Box::new(move |g| vec![Some(g.map(|x| x * c))]),
    )
}

pub fn add_const<T: Scalar>(tape: &mut Tape<T>, a: NodeId, c: T) -> NodeId {
    let out = tape.value(a).map(|x| x + c);
    tape.record("add_const", vec![a], out, Box::new(|g| vec![Some(g.clone())]))
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let out = Rc::new(tape.value(a).map(crate::scalar::stable_sigmoid));
    let y = Rc::clone(&out);
    tape.record_rc(
        "sigmoid",
        vec![a],
        out,
        Box::new(move |g| vec![Some(g.zip_map(&y, |gi, yi| gi * yi * (T::one() - yi)))]),
    )
}

/// x * sigmoid(x)
pub fn swish<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let x = tape.value_rc(a);
    let out = x.map(|v| v * crate::scalar::stable_sigmoid(v));
    tape.record(
        "swish",
        vec![a],
        out,
        Box::new(move |g| {
            vec![Some(g.zip_map(&x, |gi, xi| {
                let s = crate::scalar::stable_sigmoid(xi);
                gi * (s + xi * s * (T::one() - s))
            }))]
        }),
    )
}

pub fn recip<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let out = Rc::new(tape.value(a).map(|x| T::one() / x));
    let y = Rc::clone(&out);
    tape.record_rc(
        "recip",
        vec![a],
        out,
        Box::new(move |g| vec![Some(g.zip_map(&y, |gi, yi| -gi * yi * yi))]),
    )
}

pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let v = tape.value(a);
    let shape = v.shape().to_vec();
    let total = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
    tape.record(
        "sum_all",
        vec![a],
        Tensor::scalar(total),
        Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
    )
}

pub fn mean_all<T: Scalar>(tape: &mut Tape<T>, a: NodeId) -> NodeId {
    let v = tape.value(a);
    let shape = v.shape().to_vec();
    let n = sc::<T>(v.numel() as f64);
    let total = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
    tape.record(
        "mean_all",
        vec![a],
        Tensor::scalar(total / n),
        Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]),
    )
}

/// Multiply a tensor by a `[1]` node, broadcasting the scalar.
pub fn mul_scalar_node<T: Scalar>(tape: &mut Tape<T>, a: NodeId, s: NodeId) -> Result<NodeId> {
    let sv = tape.value(s);
    if sv.numel() != 1 {
        return Err(Error::shape("mul_scalar_node", "[1]", format!("{:?}", sv.shape())));
    }
    let (va, vs) = (tape.value_rc(a), tape.value_rc(s));
    let c = vs.data()[0];
    let out = va.map(|x| x * c);
    let s_shape = vs.shape().to_vec();
    Ok(tape.record(
        "mul_scalar_node",
        vec![a, s],
        out,
        Box::new(move |g| {
            let da = g.map(|x| x * c);
            let ds = g
                .data()
                .iter()
                .zip(va.data())
                .fold(T::zero(), |acc, (&gi, &xi)| acc + gi * xi);
            vec![Some(da), Some(Tensor::new(s_shape.clone(), vec![ds]).unwrap())]
        }),
    ))
}

pub fn reshape<T: Scalar>(tape: &mut Tape<T>, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
    let v = tape.value(a);
    let out = v.reshaped(shape)?;
    let old = v.shape().to_vec();
    Ok(tape.record(
        "reshape",
        vec![a],
        out,
        Box::new(move |g| vec![Some(g.reshaped(old.clone()).unwrap())]),
    ))
}

/// Channel slice `[.., .., lo..hi]` of a `[B, T, C]` tensor.
pub fn slice_channels<T: Scalar>(
    tape: &mut Tape<T>,
    a: NodeId,
    lo: usize,
    hi: usize,
) -> Result<NodeId> {
    let (b, t, c) = rank3("slice_channels", tape, a)?;
    if lo >= hi || hi > c {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {lo}..{hi} out of bounds for {c} channels"),
        ));
    }
    let v = tape.value(a);
    let width = hi - lo;
    let mut data = Vec::with_capacity(b * t * width);
    for bi in 0..b {
        for ti in 0..t {
            let base = (bi * t + ti) * c;
            data.extend_from_slice(&v.data()[base + lo..base + hi]);
        }
    }
    let out = Tensor::new(vec![b, t, width], data)?;
    Ok(tape.record(
        "slice_channels",
        vec![a],
        out,
        Box::new(move |g| {
            let mut dx = Tensor::zeros(vec![b, t, c]);
            for bi in 0..b {
                for ti in 0..t {
                    let src = (bi * t + ti) * width;
                    let dst = (bi * t + ti) * c + lo;
                    dx.data_mut()[dst..dst + width].copy_from_slice(&g.data()[src..src + width]);
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Concatenate two `[B, T, C]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ba, ta, ca) = rank3("concat_channels", tape, a)?;
    let (bb, tb, cb) = rank3("concat_channels", tape, b)?;
    if (ba, ta) != (bb, tb) {
        return Err(Error::shape(
            "concat_channels",
            format!("[{ba}, {ta}, _]"),
            format!("[{bb}, {tb}, _]"),
        ));
    }
    let (va, vb) = (tape.value_rc(a), tape.value_rc(b));
    let mut data = Vec::with_capacity(ba * ta * (ca + cb));
    for bi in 0..ba {
        for ti in 0..ta {
            let base = bi * ta + ti;
            data.extend_from_slice(&va.data()[base * ca..(base + 1) * ca]);
            data.extend_from_slice(&vb.data()[base * cb..(base + 1) * cb]);
        }
    }
    let out = Tensor::new(vec![ba, ta, ca + cb], data)?;
    Ok(tape.record(
        "concat_channels",
        vec![a, b],
        out,
        Box::new(move |g| {
            let mut da = Tensor::zeros(vec![ba, ta, ca]);
            let mut db = Tensor::zeros(vec![ba, ta, cb]);
            for bi in 0..ba {
                for ti in 0..ta {
                    let base = bi * ta + ti;
                    let src = base * (ca + cb);
                    da.data_mut()[base * ca..(base + 1) * ca]
                        .copy_from_slice(&g.data()[src..src + ca]);
                    db.data_mut()[base * cb..(base + 1) * cb]
                        .copy_from_slice(&g.data()[src + ca..src + ca + cb]);
                }
            }
            vec![Some(da), Some(db)]
        }),
    ))
}

/// Shift a `[B, T, C]` tensor along time by `offset` frames (positive shifts
/// toward later time), filling vacated frames with zeros.
pub fn shift_time<T: Scalar>(tape: &mut Tape<T>, a: NodeId, offset: isize) -> Result<NodeId> {
    let (b, t, c) = rank3("shift_time", tape, a)?;
    let v = tape.value(a);
    let shifted = shift_time_raw(v, b, t, c, offset);
    Ok(tape.record(
        "shift_time",
        vec![a],
        shifted,
        Box::new(move |g| vec![Some(shift_time_raw(g, b, t, c, -offset))]),
    ))
}

fn shift_time_raw<T: Scalar>(v: &Tensor<T>, b: usize, t: usize, c: usize, offset: isize) -> Tensor<T> {
    let mut out = Tensor::zeros(vec![b, t, c]);
    for bi in 0..b {
        for ti in 0..t {
            let src = ti as isize - offset;
            if src < 0 || src >= t as isize {
                continue;
            }
            let dst_base = (bi * t + ti) * c;
            let src_base = (bi * t + src as usize) * c;
            out.data_mut()[dst_base..dst_base + c].copy_from_slice(&v.data()[src_base..src_base + c]);
        }
    }
    out
}

/// Keep the first `new_t` frames of a `[B, T, C]` tensor.
pub fn crop_time<T: Scalar>(tape: &mut Tape<T>, a: NodeId, new_t: usize) -> Result<NodeId> {
    let (b, t, c) = rank3("crop_time", tape, a)?;
    if new_t > t {
        return Err(Error::invalid(
            "crop_time",
            format!("cannot crop {t} frames to {new_t}"),
        ));
    }
    let v = tape.value(a);
    let mut data = Vec::with_capacity(b * new_t * c);
    for bi in 0..b {
        let base = bi * t * c;
        data.extend_from_slice(&v.data()[base..base + new_t * c]);
    }
    let out = Tensor::new(vec![b, new_t, c], data)?;
    Ok(tape.record(
        "crop_time",
        vec![a],
        out,
        Box::new(move |g| {
            let mut dx = Tensor::zeros(vec![b, t, c]);
            for bi in 0..b {
                let dst = bi * t * c;
                let src = bi * new_t * c;
                dx.data_mut()[dst..dst + new_t * c]
                    .copy_from_slice(&g.data()[src..src + new_t * c]);
            }
            vec![Some(dx)]
        }),
    ))
}

/// Zero-pad a `[B, T, C]` tensor at the end of the time axis up to `new_t`.
pub fn pad_time<T: Scalar>(tape: &mut Tape<T>, a: NodeId, new_t: usize) -> Result<NodeId> {
    let (b, t, c) = rank3("pad_time", tape, a)?;
    if new_t < t {
        return Err(Error::invalid(
            "pad_time",
            format!("cannot pad {t} frames down to {new_t}"),
        ));
    }
    let v = tape.value(a);
    let mut out = Tensor::zeros(vec![b, new_t, c]);
    for bi in 0..b {
        let dst = bi * new_t * c;
        let src = bi * t * c;
        out.data_mut()[dst..dst + t * c].copy_from_slice(&v.data()[src..src + t * c]);
    }
    Ok(tape.record(
        "pad_time",
        vec![a],
        out,
        Box::new(move |g| {
            let mut dx = Tensor::zeros(vec![b, t, c]);
            for bi in 0..b {
                let dst = bi * t * c;
                let src = bi * new_t * c;
                dx.data_mut()[dst..dst + t * c].copy_from_slice(&g.data()[src..src + t * c]);
            }
            vec![Some(dx)]
        }),
    ))
}

/// Interleave k same-shaped `[B, T, C]` streams along time:
/// `out[b, k*t + i, c] = inputs[i][b, t, c]`.
pub fn interleave_time<T: Scalar>(tape: &mut Tape<T>, inputs: &[NodeId]) -> Result<NodeId> {
    let k = inputs.len();
    if k == 0 {
        return Err(Error::invalid("interleave_time", "no inputs"));
    }
    let (b, t, c) = rank3("interleave_time", tape, inputs[0])?;
    for &n in &inputs[1..] {
        same_shape("interleave_time", tape, inputs[0], n)?;
    }
    let mut out = Tensor::zeros(vec![b, k * t, c]);
    for (i, &n) in inputs.iter().enumerate() {
        let v = tape.value(n);
        for bi in 0..b {
            for ti in 0..t {
                let dst = (bi * k * t + k * ti + i) * c;
                let src = (bi * t + ti) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&v.data()[src..src + c]);
            }
        }
    }
    Ok(tape.record(
        "interleave_time",
        inputs.to_vec(),
        out,
        Box::new(move |g| {
            (0..k)
                .map(|i| {
                    let mut dx = Tensor::zeros(vec![b, t, c]);
                    for bi in 0..b {
                        for ti in 0..t {
                            let src = (bi * k * t + k * ti + i) * c;
                            let dst = (bi * t + ti) * c;
                            dx.data_mut()[dst..dst + c].copy_from_slice(&g.data()[src..src + c]);
                        }
                    }
                    Some(dx)
                })
                .collect()
        }),
    ))
}

/// Extract read `b_index` from a `[B, T, C]` batch as `[1, T, C]`.
pub fn slice_read<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b_index: usize) -> Result<NodeId> {
    let (b, t, c) = rank3("slice_read", tape, a)?;
    if b_index >= b {
        return Err(Error::invalid(
            "slice_read",
            format!("read {b_index} out of range for batch of {b}"),
        ));
    }
    let v = tape.value(a);
    let base = b_index * t * c;
    let out = Tensor::new(vec![1, t, c], v.data()[base..base + t * c].to_vec())?;
    Ok(tape.record(
        "slice_read",
        vec![a],
        out,
        Box::new(move |g| {
            let mut dx = Tensor::zeros(vec![b, t, c]);
            dx.data_mut()[base..base + t * c].copy_from_slice(g.data());
            vec![Some(dx)]
        }),
    ))
}

/// Broadcast-add a `[C]` bias over a `[B, T, C]` tensor.
pub fn add_bias<T: Scalar>(tape: &mut Tape<T>, a: NodeId, bias: NodeId) -> Result<NodeId> {
    let (b, t, c) = rank3("add_bias", tape, a)?;
    let bs = tape.value(bias).shape().to_vec();
    if bs != [c] {
        return Err(Error::shape("add_bias", format!("[{c}]"), format!("{bs:?}")));
    }
    let v = tape.value(a);
    let bv = tape.value(bias);
    let mut out = v.clone();
    for bi in 0..b {
        for ti in 0..t {
            let base = (bi * t + ti) * c;
            for ci in 0..c {
                out.data_mut()[base + ci] += bv.data()[ci];
            }
        }
    }
    Ok(tape.record(
        "add_bias",
        vec![a, bias],
        out,
        Box::new(move |g| {
            let mut db = Tensor::zeros(vec![c]);
            for bi in 0..b {
                for ti in 0..t {
                    let base = (bi * t + ti) * c;
                    for ci in 0..c {
                        db.data_mut()[ci] += g.data()[base + ci];
                    }
                }
            }
            vec![Some(g.clone()), Some(db)]
        }),
    ))
}
