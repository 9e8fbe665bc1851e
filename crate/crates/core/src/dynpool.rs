//! Dynamic pooling: learned per-point length factors time-warp the input,
//! and features are resampled at integer positions by triangular-weighted
//! accumulation. Average pooling factor is held at `S` per batch by
//! renormalization; backward through the position prefix sum is truncated.
//!
//! Indexing convention: input points are 0-indexed, the warped position of
//! point i is the inclusive prefix sum p_i = m'_0 + ... + m'_i, and output
//! slot l (0-indexed) collects mass at pooling position j = l + 1. With all
//! m' = 1 this makes resampling the identity. Mass at positions below 1 is
//! dropped.


use crate::error::{Error, Result};
use crate::nn::Stack;
use crate::ops;
use crate::param::{ParamId, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::{Ctx, Mode, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct DynPoolCfg {
    /// Fixed batch-mean length factor S.
    pub s_target: f64,
    /// Retention factor of the running S/M average used in eval mode.
    pub ema_momentum: f64,
    /// Backward through the prefix sum sees this many downstream positions.
    pub trunc_window: usize,
    /// Renormalize by a constant ratio instead of differentiating through
    /// the batch mean M.
    pub detach_mean: bool,
    /// Bound features to (0,1) with a sigmoid (the stated range; a following
    /// batch norm restores dynamic range).
    pub sigmoid_features: bool,
}

impl Default for DynPoolCfg {
    fn default() -> Self {
        DynPoolCfg {
            s_target: 1.0 / 3.0,
            ema_momentum: 0.99,
            trunc_window: 20,
            detach_mean: false,
            sigmoid_features: true,
        }
    }
}

/// Per-read record of what the warp did.
#[derive(Clone, Debug)]
pub struct PoolingTrace {
    pub input_len: usize,
    pub output_len: usize,
    pub mean_length_factor: f64,
    /// Warped position of every input point.
    pub positions: Vec<f64>,
}

/// Scale length factors so their batch mean is exactly `s_target`.
/// Returns the renormalized node and the applied ratio S/M.
pub fn renormalize_batch<T: Scalar>(
    tape: &mut Tape<T>,
    m: NodeId,
    s_target: f64,
    detach_mean: bool,
) -> Result<(NodeId, T)> {
    let mv = tape.value(m);
    if mv.numel() == 0 {
        return Err(Error::invalid("renormalize", "empty length-factor tensor"));
    }
    let mean = mv.data().iter().fold(T::zero(), |a, &b| a + b) / sc::<T>(mv.numel() as f64);
    if mean == T::zero() {
        return Err(Error::invalid("renormalize", "length factors have zero mean"));
    }
    let ratio = sc::<T>(s_target) / mean;
    if detach_mean {
        Ok((ops::scale(tape, m, ratio), ratio))
    } else {
        let m_node = ops::mean_all(tape, m);
        let inv = ops::recip(tape, m_node);
        let ratio_node = ops::scale(tape, inv, sc::<T>(s_target));
        let out = ops::mul_scalar_node(tape, m, ratio_node)?;
        Ok((out, ratio))
    }
}

/// Output length of a warp whose last position is `p_last`.
pub fn output_length<T: Scalar>(p_last: T) -> usize {
    let l = p_last.ceil().to_f64().unwrap_or(0.0);
    if l <= 0.0 {
        0
    } else {
        l as usize
    }
}

pub struct WarpOutput {
    pub node: NodeId,
    pub lengths: Vec<usize>,
    pub positions: Vec<Vec<f64>>,
}

/// The resampling op: `r_j = sum over i with |p_i - j| <= 1 of
/// f_i * w_i * (1 - |p_i - j|)`, recorded with exact backward for f and w
/// and a prefix-sum backward for m' truncated to `trunc_window` positions.
pub fn dyn_warp<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    w: NodeId,
    mprime: NodeId,
    trunc_window: usize,
) -> Result<WarpOutput> {
    let fs = tape.value(f).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    let ms = tape.value(mprime).shape().to_vec();
    if fs.len() != 3 {
        return Err(Error::shape("dyn_warp", "[B, T, C]", format!("{fs:?}")));
    }
    let (bsz, t, c) = (fs[0], fs[1], fs[2]);
    if ws != [bsz, t, 1] || ms != [bsz, t, 1] {
        return Err(Error::shape(
            "dyn_warp",
            format!("w and m of [{bsz}, {t}, 1]"),
            format!("{ws:?} and {ms:?}"),
        ));
    }
    let (fv, wv, mv) = (tape.value_rc(f), tape.value_rc(w), tape.value_rc(mprime));
    if !fv.all_finite() || !wv.all_finite() || !mv.all_finite() {
        return Err(Error::NonFinite { op: "dynamic_pool" });
    }

    // Warped positions: inclusive prefix sums per read.
    let mut p: Vec<Vec<T>> = Vec::with_capacity(bsz);
    let mut lengths = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let mut row = Vec::with_capacity(t);
        let mut acc = T::zero();
        for i in 0..t {
            acc += mv.data()[b * t + i];
            row.push(acc);
        }
        lengths.push(if t == 0 { 0 } else { output_length(row[t - 1]) });
        p.push(row);
    }
    let l_max = lengths.iter().copied().max().unwrap_or(0);

    let mut out = Tensor::zeros(vec![bsz, l_max, c]);
    for b in 0..bsz {
        for i in 0..t {
            let pi = p[b][i];
            let wi = wv.data()[b * t + i];
            let j0 = pi.floor();
            for j in [j0, j0 + T::one()] {
                let tri = T::one() - (pi - j).abs();
                if tri <= T::zero() {
                    continue;
                }
                let ji = j.to_f64().unwrap() as isize;
                if ji < 1 || ji > lengths[b] as isize {
                    continue;
                }
                let slot = (ji - 1) as usize;
                let scale = wi * tri;
                let fbase = (b * t + i) * c;
                let obase = (b * l_max + slot) * c;
                for ci in 0..c {
                    out.data_mut()[obase + ci] += fv.data()[fbase + ci] * scale;
                }
            }
        }
    }

    let positions: Vec<Vec<f64>> = p
        .iter()
        .map(|row| row.iter().map(|v| v.to_f64().unwrap()).collect())
        .collect();

    let p_saved = p;
    let lengths_saved = lengths.clone();
    let node = tape.record(
        "dyn_warp",
        vec![f, w, mprime],
        out,
        Box::new(move |g| {
            let gd = g.data();
            let mut df = Tensor::zeros(vec![bsz, t, c]);
            let mut dw = Tensor::zeros(vec![bsz, t, 1]);
            let mut dm = Tensor::zeros(vec![bsz, t, 1]);
            for b in 0..bsz {
                let mut dp = vec![T::zero(); t];
                for i in 0..t {
                    let pi = p_saved[b][i];
                    let wi = wv.data()[b * t + i];
                    let j0 = pi.floor();
                    for j in [j0, j0 + T::one()] {
                        let tri = T::one() - (pi - j).abs();
                        if tri <= T::zero() {
                            continue;
                        }
                        let ji = j.to_f64().unwrap() as isize;
                        if ji < 1 || ji > lengths_saved[b] as isize {
                            continue;
                        }
                        let slot = (ji - 1) as usize;
                        let fbase = (b * t + i) * c;
                        let obase = (b * l_max + slot) * c;
                        let mut fg = T::zero();
                        for ci in 0..c {
                            let gi = gd[obase + ci];
                            df.data_mut()[fbase + ci] += wi * tri * gi;
                            fg += fv.data()[fbase + ci] * gi;
                        }
                        dw.data_mut()[b * t + i] += tri * fg;
                        // d tri / d p = -sign(p - j); zero exactly at p == j.
                        let diff = pi - j;
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        dp[i] += -sign * wi * fg;
                    }
                }
                // dL/dm'_u = sum of dL/dp_k for k in [u, u + window].
                for u in 0..t {
                    let hi = (u + trunc_window).min(t - 1);
                    let mut acc = T::zero();
                    for k in u..=hi {
                        acc += dp[k];
                    }
                    dm.data_mut()[b * t + u] = acc;
                }
            }
            vec![Some(df), Some(dw), Some(dm)]
        }),
    );
    Ok(WarpOutput { node, lengths, positions })
}

/// The full layer: three sub-networks produce features, importances, and
/// length factors from the same input; length factors are renormalized
/// (train) or scaled by the running ratio (eval) before warping.
pub struct DynPool {
    pub f_net: Stack,
    pub w_net: Stack,
    pub m_net: Stack,
    pub cfg: DynPoolCfg,
    pub ema_ratio: ParamId,
}

impl DynPool {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        f_net: Stack,
        w_net: Stack,
        m_net: Stack,
        cfg: DynPoolCfg,
    ) -> Self {
        let ema = store.insert(format!("{name}.ema"), Tensor::full(vec![1], T::one()), false);
        DynPool { f_net, w_net, m_net, cfg, ema_ratio: ema }
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
    ) -> Result<(NodeId, Vec<PoolingTrace>)> {
        let f_raw = self.f_net.forward(cx, x)?;
        let f = if self.cfg.sigmoid_features {
            ops::sigmoid(&mut cx.tape, f_raw)
        } else {
            f_raw
        };
        let w_raw = self.w_net.forward(cx, x)?;
        let w = ops::sigmoid(&mut cx.tape, w_raw);
        let m_raw = self.m_net.forward(cx, x)?;
        let m = ops::sigmoid(&mut cx.tape, m_raw);

        let mprime = match cx.mode {
            Mode::Train => {
                let (mprime, ratio) =
                    renormalize_batch(&mut cx.tape, m, self.cfg.s_target, self.cfg.detach_mean)?;
                let keep = sc::<T>(self.cfg.ema_momentum);
                let old = cx.param_value(self.ema_ratio).data()[0];
                let updated = keep * old + (T::one() - keep) * ratio;
                cx.push_pending(self.ema_ratio, Tensor::new(vec![1], vec![updated])?);
                mprime
            }
            Mode::Eval => {
                let ratio = cx.param_value(self.ema_ratio).data()[0];
                ops::scale(&mut cx.tape, m, ratio)
            }
        };

        let warp = dyn_warp(&mut cx.tape, f, w, mprime, self.cfg.trunc_window)?;
        let mpv = cx.tape.value(mprime);
        let t = cx.tape.value(x).shape()[1];
        let traces = (0..warp.lengths.len())
            .map(|b| {
                let row = &mpv.data()[b * t..(b + 1) * t];
                let mean = row.iter().fold(T::zero(), |a, &v| a + v).to_f64().unwrap()
                    / t.max(1) as f64;
                PoolingTrace {
                    input_len: t,
                    output_len: warp.lengths[b],
                    mean_length_factor: mean,
                    positions: warp.positions[b].clone(),
                }
            })
            .collect();
        Ok((warp.node, traces))
    }
}

/// (w, m) vectors instantiating mean pooling with window `s`:
/// m_i = 1 at multiples of s (0-indexed), w_i = 1/s everywhere.
pub fn mean_pool_controls<T: Scalar>(t: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let w = vec![T::one() / sc::<T>(s as f64); t];
    let m = (0..t)
        .map(|i| if i % s == 0 { T::one() } else { T::zero() })
        .collect();
    (w, m)
}

/// (w, m) vectors instantiating striding with step `s`:
/// w_i = m_i = 1 at multiples of s (0-indexed).
pub fn stride_controls<T: Scalar>(t: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let m: Vec<T> = (0..t)
        .map(|i| if i % s == 0 { T::one() } else { T::zero() })
        .collect();
    (m.clone(), m)
}

/// Forward resampling from explicit positions, for surrogate finite
/// differences around the truncated prefix-sum backward. The output length is
/// fixed by the caller so position perturbations cannot change shapes.
pub fn warp_with_positions<T: Scalar>(
    f: &Tensor<T>,
    w: &[T],
    p: &[T],
    out_len: usize,
) -> Tensor<T> {
    let (t, c) = (f.shape()[1], f.shape()[2]);
    let mut out = Tensor::zeros(vec![1, out_len, c]);
    for i in 0..t {
        let pi = p[i];
        let j0 = pi.floor();
        for j in [j0, j0 + T::one()] {
            let tri = T::one() - (pi - j).abs();
            if tri <= T::zero() {
                continue;
            }
            let ji = j.to_f64().unwrap() as isize;
            if ji < 1 || ji > out_len as isize {
                continue;
            }
            let slot = (ji - 1) as usize;
            let scale = w[i] * tri;
            for ci in 0..c {
                out.data_mut()[slot * c + ci] += f.data()[i * c + ci] * scale;
            }
        }
    }
    out
}

/// Reference mean pooling: zero-padded windows of `s`, output ceil(T/s),
/// accumulated as running sums of f * (1/s) to mirror the warp exactly.
pub fn direct_mean_pool<T: Scalar>(f: &Tensor<T>, s: usize) -> Tensor<T> {
    let (bsz, t, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let t_out = t.div_ceil(s);
    let inv = T::one() / sc::<T>(s as f64);
    let mut out = Tensor::zeros(vec![bsz, t_out, c]);
    for b in 0..bsz {
        for u in 0..t_out {
            for d in 0..s {
                let src = u * s + d;
                if src >= t {
                    break;
                }
                for ci in 0..c {
                    let v = f.data()[(b * t + src) * c + ci] * inv;
                    out.data_mut()[(b * t_out + u) * c + ci] += v;
                }
            }
        }
    }
    out
}

/// Reference striding: every s-th point starting at 0, output ceil(T/s).
pub fn direct_stride<T: Scalar>(f: &Tensor<T>, s: usize) -> Tensor<T> {
    let (bsz, t, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let t_out = t.div_ceil(s);
    let mut out = Tensor::zeros(vec![bsz, t_out, c]);
    for b in 0..bsz {
        for u in 0..t_out {
            for ci in 0..c {
                out.data_mut()[(b * t_out + u) * c + ci] = f.data()[(b * t + u * s) * c + ci];
            }
        }
    }
    out
}

/// O(T * L) reference for the warp itself: loops over every (input point,
/// output position) pair.
pub fn brute_force_warp<T: Scalar>(
    f: &Tensor<T>,
    w: &[T],
    mprime: &[T],
) -> (Tensor<T>, Vec<f64>) {
    let (t, c) = (f.shape()[1], f.shape()[2]);
    assert_eq!(f.shape()[0], 1, "reference covers single reads");
    let mut p = Vec::with_capacity(t);
    let mut acc = T::zero();
    for &m in mprime {
        acc += m;
        p.push(acc);
    }
    let l = if t == 0 { 0 } else { output_length(p[t - 1]) };
    let mut out = Tensor::zeros(vec![1, l, c]);
    for j in 1..=l {
        for i in 0..t {
            let dist = (p[i] - sc::<T>(j as f64)).abs();
            if dist <= T::one() {
                let tri = T::one() - dist;
                if tri > T::zero() {
                    for ci in 0..c {
                        let v = f.data()[i * c + ci] * (w[i] * tri);
                        out.data_mut()[(j - 1) * c + ci] += v;
                    }
                }
            }
        }
    }
    (out, p.iter().map(|v| v.to_f64().unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf3<T: Scalar>(tape: &mut Tape<T>, t: usize, c: usize, data: Vec<T>) -> NodeId {
        tape.leaf(Tensor::new(vec![1, t, c], data).unwrap())
    }

    #[test]
    fn unit_controls_make_identity() {
        let mut tape = Tape::<f32>::new();
        let t = 7;
        let fdata: Vec<f32> = (0..t * 2).map(|i| 0.1 + 0.07 * i as f32).collect();
        let f = leaf3(&mut tape, t, 2, fdata.clone());
        let w = leaf3(&mut tape, t, 1, vec![1.0; t]);
        let m = leaf3(&mut tape, t, 1, vec![1.0; t]);
        let out = dyn_warp(&mut tape, f, w, m, 20).unwrap();
        assert_eq!(out.lengths, vec![t]);
        assert_eq!(tape.value(out.node).data(), fdata.as_slice());
    }

    #[test]
    fn mean_pool_construction_is_exact() {
        for s in [2usize, 3, 5] {
            for t in 1..=64 {
                let fdata: Vec<f32> = (0..t).map(|i| ((i * 37 + 11) % 97) as f32 / 97.0).collect();
                let ften = Tensor::new(vec![1, t, 1], fdata.clone()).unwrap();
                let (w, m) = mean_pool_controls::<f32>(t, s);
                let mut tape = Tape::<f32>::new();
                let f = tape.leaf(ften.clone());
                let wn = leaf3(&mut tape, t, 1, w);
                let mn = leaf3(&mut tape, t, 1, m);
                let out = dyn_warp(&mut tape, f, wn, mn, 20).unwrap();
                let direct = direct_mean_pool(&ften, s);
                assert_eq!(tape.value(out.node).shape(), direct.shape(), "t={t} s={s}");
                assert_eq!(tape.value(out.node).data(), direct.data(), "t={t} s={s}");
            }
        }
    }

    #[test]
    fn stride_construction_is_exact() {
        for s in [2usize, 3, 5] {
            for t in 1..=64 {
                let fdata: Vec<f32> = (0..t).map(|i| ((i * 53 + 7) % 89) as f32 / 89.0).collect();
                let ften = Tensor::new(vec![1, t, 1], fdata.clone()).unwrap();
                let (w, m) = stride_controls::<f32>(t, s);
                let mut tape = Tape::<f32>::new();
                let f = tape.leaf(ften.clone());
                let wn = leaf3(&mut tape, t, 1, w);
                let mn = leaf3(&mut tape, t, 1, m);
                let out = dyn_warp(&mut tape, f, wn, mn, 20).unwrap();
                let direct = direct_stride(&ften, s);
                assert_eq!(tape.value(out.node).data(), direct.data(), "t={t} s={s}");
            }
        }
    }

    #[test]
    fn random_warp_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..25 {
            let t = 10;
            let c = 3;
            let fdata: Vec<f64> = (0..t * c).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
            let wdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
            let mdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.05, 0.95)).collect();
            let ften = Tensor::new(vec![1, t, c], fdata).unwrap();
            let (want, _) = brute_force_warp(&ften, &wdata, &mdata);
            let mut tape = Tape::<f64>::new();
            let f = tape.leaf(ften);
            let w = leaf3(&mut tape, t, 1, wdata);
            let m = leaf3(&mut tape, t, 1, mdata);
            let got = dyn_warp(&mut tape, f, w, m, 20).unwrap();
            assert_eq!(tape.value(got.node).shape(), want.shape());
            for (a, b) in tape.value(got.node).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn renormalize_uniform_and_noop_cases() {
        let mut tape = Tape::<f32>::new();
        let m = tape.leaf(Tensor::full(vec![1, 4, 1], 0.5));
        let (mp, ratio) = renormalize_batch(&mut tape, m, 0.25, false).unwrap();
        assert!((ratio - 0.5).abs() < 1e-6);
        for &v in tape.value(mp).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }

        let m2 = tape.leaf(Tensor::new(vec![1, 2, 1], vec![0.2, 0.6]).unwrap());
        let (mp2, ratio2) = renormalize_batch(&mut tape, m2, 0.4, false).unwrap();
        assert!((ratio2 - 1.0).abs() < 1e-6);
        let d = tape.value(mp2).data();
        assert!((d[0] - 0.2).abs() < 1e-6 && (d[1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn renormalized_batch_mean_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdata: Vec<f32> =
            (0..3 * 17).map(|_| uniform(&mut rng, 0.05, 0.95) as f32).collect();
        let mut tape = Tape::<f32>::new();
        let m = tape.leaf(Tensor::new(vec![3, 17, 1], mdata).unwrap());
        let (mp, _) = renormalize_batch(&mut tape, m, 0.33, false).unwrap();
        let out = tape.value(mp);
        let mean: f32 = out.data().iter().sum::<f32>() / out.numel() as f32;
        assert!((mean - 0.33).abs() < 1e-5, "{mean}");
    }

    #[test]
    fn renormalize_gradient_couples_batch_through_mean() {
        // loss = m'_0; with m' = m * S/M every m_k gets a gradient.
        let mut tape = Tape::<f64>::new();
        let m = tape.leaf(Tensor::new(vec![1, 3, 1], vec![0.3, 0.5, 0.7]).unwrap());
        let (mp, _) = renormalize_batch(&mut tape, m, 0.4, false).unwrap();
        let first = ops::slice_channels(&mut tape, mp, 0, 1).unwrap();
        let first = ops::crop_time(&mut tape, first, 1).unwrap();
        let loss = ops::sum_all(&mut tape, first);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(m).unwrap().data().to_vec();
        assert!(g.iter().all(|v| v.abs() > 1e-9), "{g:?}");
        // Detached variant: only m_0 sees a gradient.
        let mut tape2 = Tape::<f64>::new();
        let m2 = tape2.leaf(Tensor::new(vec![1, 3, 1], vec![0.3, 0.5, 0.7]).unwrap());
        let (mp2, _) = renormalize_batch(&mut tape2, m2, 0.4, true).unwrap();
        let first2 = ops::slice_channels(&mut tape2, mp2, 0, 1).unwrap();
        let first2 = ops::crop_time(&mut tape2, first2, 1).unwrap();
        let loss2 = ops::sum_all(&mut tape2, first2);
        let grads2 = tape2.backward(loss2).unwrap();
        let g2 = grads2.get(m2).unwrap().data().to_vec();
        assert!(g2[0].abs() > 1e-9 && g2[1] == 0.0 && g2[2] == 0.0, "{g2:?}");
    }

    #[test]
    fn output_length_examples() {
        // T=6, all m'=0.5 -> p_last = 3.0 -> 3; T=5, all 1.0 -> 5.
        assert_eq!(output_length(3.0f32), 3);
        assert_eq!(output_length(5.0f32), 5);
        assert_eq!(output_length(2.1f32), 3);
        assert_eq!(output_length(0.0f32), 0);
    }

    #[test]
    fn zero_upstream_grad_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let t = 9;
        let f = leaf3(&mut tape, t, 2, vec![0.4; t * 2]);
        let w = leaf3(&mut tape, t, 1, vec![0.6; t]);
        let m = leaf3(&mut tape, t, 1, vec![0.37; t]);
        let out = dyn_warp(&mut tape, f, w, m, 20).unwrap();
        let zero = ops::scale(&mut tape, out.node, 0.0);
        let loss = ops::sum_all(&mut tape, zero);
        let grads = tape.backward(loss).unwrap();
        for node in [f, w, m] {
            assert!(grads.get(node).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn truncation_limits_m_gradient_span() {
        // Loss reads only the last output position; with window 0 the
        // m-gradient at u reduces to dp_u, so early points whose positions
        // are far from the last slot get exactly zero.
        let t = 30;
        let run = |window: usize| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let f = leaf3(&mut tape, t, 1, vec![0.8; t]);
            let w = leaf3(&mut tape, t, 1, vec![1.0; t]);
            let m = leaf3(&mut tape, t, 1, vec![0.5; t]);
            let out = dyn_warp(&mut tape, f, w, m, window).unwrap();
            let l = out.lengths[0];
            let last = ops::crop_time(&mut tape, out.node, l).unwrap();
            let last = {
                // keep only the final time slot by subtracting the crop of l-1
                let head = ops::crop_time(&mut tape, out.node, l - 1).unwrap();
                let head_sum = ops::sum_all(&mut tape, head);
                let full_sum = ops::sum_all(&mut tape, last);
                ops::sub(&mut tape, full_sum, head_sum).unwrap()
            };
            let grads = tape.backward(last).unwrap();
            grads.get(m).unwrap().data().to_vec()
        };
        let tight = run(0);
        let wide = run(t);
        let nonzero_tight = tight.iter().filter(|v| v.abs() > 0.0).count();
        let nonzero_wide = wide.iter().filter(|v| v.abs() > 0.0).count();
        assert!(nonzero_tight < nonzero_wide, "{nonzero_tight} vs {nonzero_wide}");
        // Window 0 keeps only local position terms: at most the few points
        // whose own position lands within one slot of the read end.
        assert!(nonzero_tight <= 4, "{tight:?}");
    }

    #[test]
    fn forward_continuous_in_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = 20;
        let fdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let wdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.2, 0.9)).collect();
        let mdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.2, 0.8)).collect();
        let eval = |md: &[T64]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let f = leaf3(&mut tape, t, 1, fdata.clone());
            let w = leaf3(&mut tape, t, 1, wdata.clone());
            let m = leaf3(&mut tape, t, 1, md.to_vec());
            let out = dyn_warp(&mut tape, f, w, m, 20).unwrap();
            tape.value(out.node).data().to_vec()
        };
        type T64 = f64;
        let base = eval(&mdata);
        let mut bumped = mdata.clone();
        for v in bumped.iter_mut() {
            *v += 1e-6;
        }
        let moved = eval(&bumped);
        if moved.len() == base.len() {
            for (a, b) in base.iter().zip(&moved) {
                assert!((a - b).abs() < 1e-6 * t as f64 * 4.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn each_point_touches_at_most_three_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let t = 16;
            let mdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.05, 1.0)).collect();
            let mut p = Vec::new();
            let mut acc = 0.0;
            for &m in &mdata {
                acc += m;
                p.push(acc);
            }
            let l = p[t - 1].ceil() as i64;
            for &pi in &p {
                let touched: Vec<i64> = (1..=l).filter(|&j| (pi - j as f64).abs() <= 1.0).collect();
                assert!(touched.len() <= 3, "{touched:?}");
                let nonzero: Vec<i64> = (1..=l)
                    .filter(|&j| {
                        let tri = 1.0 - (pi - j as f64).abs();
                        tri > 0.0
                    })
                    .collect();
                if pi.fract() != 0.0 {
                    assert!(nonzero.len() <= 2, "{nonzero:?}");
                }
            }
        }
    }

    #[test]
    fn layer_eval_is_deterministic_and_trains_ema() {
        use crate::nn::{Conv1d, Conv1dSpec, Layer};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::<f32>::new();
        let mk_net = |store: &mut ParamStore<f32>, name: &str, c_out: usize, rng: &mut ChaCha8Rng| Stack {
            layers: vec![Layer::Conv(Conv1d::init(
                store,
                name,
                Conv1dSpec::pointwise(2, c_out).unwrap(),
                rng,
            ))],
        };
        let f_net = mk_net(&mut store, "dp.f", 3, &mut rng);
        let w_net = mk_net(&mut store, "dp.w", 1, &mut rng);
        let m_net = mk_net(&mut store, "dp.m", 1, &mut rng);
        let pool = DynPool::new(&mut store, "dp", f_net, w_net, m_net, DynPoolCfg::default());

        let x = Tensor::new(
            vec![2, 12, 2],
            (0..48).map(|i| ((i * 13 % 31) as f32) / 31.0 - 0.5).collect(),
        )
        .unwrap();

        let mut cx = Ctx::new(&store, Mode::Train);
        let xn = cx.tape.leaf(x.clone());
        let (_, traces) = pool.forward(&mut cx, xn).unwrap();
        assert_eq!(traces.len(), 2);
        let pending = cx.take_pending();
        assert!(pending.iter().any(|(id, _)| *id == pool.ema_ratio));
        // Batch mean of m' equals S.
        let mean: f64 = traces.iter().map(|t| t.mean_length_factor).sum::<f64>() / 2.0;
        assert!((mean - pool.cfg.s_target).abs() < 1e-5, "{mean}");

        let run_eval = || {
            let mut cx = Ctx::new(&store, Mode::Eval);
            let xn = cx.tape.leaf(x.clone());
            let (node, traces) = pool.forward(&mut cx, xn).unwrap();
            (cx.tape.value(node).data().to_vec(), traces)
        };
        let (a, ta) = run_eval();
        let (b, tb) = run_eval();
        assert_eq!(a, b);
        assert_eq!(ta[0].output_len, tb[0].output_len);
    }

    #[test]
    fn positions_nondecreasing_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 40;
        let mdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.01, 0.99)).collect();
        let mut tape = Tape::<f64>::new();
        let f = leaf3(&mut tape, t, 1, vec![0.5; t]);
        let w = leaf3(&mut tape, t, 1, vec![0.5; t]);
        let m = leaf3(&mut tape, t, 1, mdata);
        let out = dyn_warp(&mut tape, f, w, m, 20).unwrap();
        let p = &out.positions[0];
        for k in 1..p.len() {
            assert!(p[k] >= p[k - 1]);
        }
        let l = out.lengths[0] as f64;
        assert!(p[t - 1] <= l && l < p[t - 1] + 1.0);
    }
}
