//! Composite structures: cross-shift, mean pooling, space-to-depth
//! compression in both styles, variable-receptive-field depthwise groups,
//! and skip-connected convolutional blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::act::glu;
use crate::nn::conv::{Conv1d, Conv1dSpec, ConvT1dSpec, ConvTranspose1d};
use crate::nn::norm::BatchNorm1d;
use crate::ops;
use crate::param::ParamStore;
use crate::scalar::{sc, Scalar};
use crate::tape::{Ctx, NodeId, Tape};
use crate::tensor::Tensor;

/// Shift the first channel half one step toward later time and the second
/// half one step earlier, zero-filling vacated slots.
pub fn cross_shift<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xs = tape.value(x).shape();
    if xs.len() != 3 || xs[2] % 2 != 0 {
        return Err(Error::shape("cross_shift", "[B, T, 2k]", format!("{xs:?}")));
    }
    let c = xs[2];
    let a = ops::slice_channels(tape, x, 0, c / 2)?;
    let b = ops::slice_channels(tape, x, c / 2, c)?;
    let a = ops::shift_time(tape, a, 1)?;
    let b = ops::shift_time(tape, b, -1)?;
    ops::concat_channels(tape, a, b)
}

/// Mean pooling with window == stride == `s`, zero-padded (sums always
/// divided by s): `[B, T, C] -> [B, ceil(T/s), C]`.
pub fn mean_pool<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: usize) -> Result<NodeId> {
    let xs = tape.value(x).shape();
    if xs.len() != 3 {
        return Err(Error::shape("mean_pool", "[B, T, C]", format!("{xs:?}")));
    }
    if s == 0 {
        return Err(Error::invalid("mean_pool", "window must be positive"));
    }
    let (b, t, c) = (xs[0], xs[1], xs[2]);
    let t_out = t.div_ceil(s);
    let inv = T::one() / sc::<T>(s as f64);
    let xv = tape.value_rc(x);
    let mut out = Tensor::zeros(vec![b, t_out, c]);
    for bi in 0..b {
        for u in 0..t_out {
            let obase = (bi * t_out + u) * c;
            for d in 0..s {
                let src = u * s + d;
                if src >= t {
                    break;
                }
                let ibase = (bi * t + src) * c;
                for ci in 0..c {
                    out.data_mut()[obase + ci] += xv.data()[ibase + ci] * inv;
                }
            }
        }
    }
    Ok(tape.record(
        "mean_pool",
        vec![x],
        out,
        Box::new(move |g| {
            let mut dx = Tensor::zeros(vec![b, t, c]);
            for bi in 0..b {
                for u in 0..t_out {
                    let gbase = (bi * t_out + u) * c;
                    for d in 0..s {
                        let src = u * s + d;
                        if src >= t {
                            break;
                        }
                        let ibase = (bi * t + src) * c;
                        for ci in 0..c {
                            dx.data_mut()[ibase + ci] += g.data()[gbase + ci] * inv;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Channel-group sizes in ratio 2:2:1:1 by largest-remainder rounding.
pub fn rf_group_sizes(c: usize) -> Result<[usize; 4]> {
    if c < 6 {
        return Err(Error::invalid(
            "rf_groups",
            format!("need at least 6 channels for nonempty 2:2:1:1 groups, got {c}"),
        ));
    }
    let ratio = [2usize, 2, 1, 1];
    let mut sizes = [0usize; 4];
    let mut rema: Vec<(usize, usize)> = Vec::new(); // (remainder*denominator, index)
    let mut assigned = 0;
    for (i, &r) in ratio.iter().enumerate() {
        sizes[i] = c * r / 6;
        assigned += sizes[i];
        rema.push((c * r % 6, i));
    }
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for k in 0..c - assigned {
        sizes[rema[k].1] += 1;
    }
    Ok(sizes)
}

pub const RF_KERNELS: [usize; 4] = [3, 7, 15, 31];

/// Four depthwise convolutions with kernels 3/7/15/31 over disjoint channel
/// groups sized 2:2:1:1, concatenated back in order.
pub struct RfGroupDepthwise {
    pub convs: Vec<Conv1d>,
    pub bounds: [usize; 5],
}

impl RfGroupDepthwise {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = rf_group_sizes(c)?;
        let mut bounds = [0usize; 5];
        for i in 0..4 {
            bounds[i + 1] = bounds[i] + sizes[i];
        }
        let convs = (0..4)
            .map(|i| {
                let spec = Conv1dSpec::depthwise(sizes[i], RF_KERNELS[i], 1)?;
                Ok(Conv1d::init(store, &format!("{name}.g{i}"), spec, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RfGroupDepthwise { convs, bounds })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(4);
        for (i, conv) in self.convs.iter().enumerate() {
            let part = ops::slice_channels(&mut cx.tape, x, self.bounds[i], self.bounds[i + 1])?;
            parts.push(conv.forward(cx, part)?);
        }
        let mut out = parts[0];
        for &p in &parts[1..] {
            out = ops::concat_channels(&mut cx.tape, out, p)?;
        }
        Ok(out)
    }
}

/// How a block trades time resolution (/3) for channels (x2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2dStyle {
    /// Strided convolution in, transposed convolution out.
    Conv,
    /// Mean-pool + pointwise in; three pointwise convolutions over
    /// half-overlapping channel groups out, interleaved in time.
    Pooled,
}

pub const S2D_FACTOR: usize = 3;
pub const S2D_CHANNEL_MULT: usize = 2;

/// Compression half of space-to-depth: `[B, T, C] -> [B, ceil(T/3), 2C]`.
pub struct S2dCompress {
    pub style: S2dStyle,
    conv: Conv1d,
}

impl S2dCompress {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        style: S2dStyle,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = match style {
            S2dStyle::Conv => Conv1dSpec::full(c, S2D_CHANNEL_MULT * c, 3, S2D_FACTOR)?,
            S2dStyle::Pooled => Conv1dSpec::pointwise(c, S2D_CHANNEL_MULT * c)?,
        };
        Ok(S2dCompress { style, conv: Conv1d::init(store, name, spec, rng) })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        match self.style {
            S2dStyle::Conv => self.conv.forward(cx, x),
            S2dStyle::Pooled => {
                let pooled = mean_pool(&mut cx.tape, x, S2D_FACTOR)?;
                self.conv.forward(cx, pooled)
            }
        }
    }
}

/// Decompression half: `[B, T', 2C] -> [B, target_len, C]` with
/// `ceil(target_len/3) == T'`.
pub struct S2dDecompress {
    pub style: S2dStyle,
    convt: Option<ConvTranspose1d>,
    phases: Vec<(usize, usize, Conv1d)>,
}

impl S2dDecompress {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        style: S2dStyle,
        rng: &mut R,
    ) -> Result<Self> {
        let c2 = S2D_CHANNEL_MULT * c;
        match style {
            S2dStyle::Conv => {
                let spec = ConvT1dSpec::new(c2, c, 3, S2D_FACTOR)?;
                Ok(S2dDecompress {
                    style,
                    convt: Some(ConvTranspose1d::init(store, name, spec, rng)),
                    phases: Vec::new(),
                })
            }
            S2dStyle::Pooled => {
                if c % 2 != 0 {
                    return Err(Error::invalid(
                        "space_to_depth",
                        format!("pooled decompression needs even base channels, got {c}"),
                    ));
                }
                // Three groups of width C over the 2C channels, adjacent
                // groups overlapping by half a group.
                let offsets = [0, c / 2, c];
                let phases = offsets
                    .iter()
                    .enumerate()
                    .map(|(r, &lo)| {
                        let spec = Conv1dSpec::pointwise(c, c)?;
                        Ok((lo, lo + c, Conv1d::init(store, &format!("{name}.p{r}"), spec, rng)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(S2dDecompress { style, convt: None, phases })
            }
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
        target_len: usize,
    ) -> Result<NodeId> {
        match self.style {
            S2dStyle::Conv => self.convt.as_ref().unwrap().forward(cx, x, target_len),
            S2dStyle::Pooled => {
                let mut streams = Vec::with_capacity(3);
                for (lo, hi, conv) in &self.phases {
                    let part = ops::slice_channels(&mut cx.tape, x, *lo, *hi)?;
                    streams.push(conv.forward(cx, part)?);
                }
                let full = ops::interleave_time(&mut cx.tape, &streams)?;
                ops::crop_time(&mut cx.tape, full, target_len)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Glu,
}

impl Activation {
    /// Conv output width needed so the activation returns `c` channels.
    pub fn pre_width(&self, c: usize) -> usize {
        match self {
            Activation::Swish => c,
            Activation::Glu => 2 * c,
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Swish => Ok(ops::swish(tape, x)),
            Activation::Glu => glu(tape, x),
        }
    }
}

fn make_pointwise<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out_post: usize,
    act: Activation,
    rng: &mut R,
) -> Result<Conv1d> {
    let spec = Conv1dSpec::pointwise(c_in, act.pre_width(c_out_post))?;
    match act {
        Activation::Swish => Ok(Conv1d::init(store, name, spec, rng)),
        Activation::Glu => Conv1d::init_glu(store, name, spec, rng),
    }
}

struct BlockUnit {
    dw: DepthwiseKind,
    pw: Conv1d,
    bn: BatchNorm1d,
}

enum DepthwiseKind {
    Single(Conv1d),
    Groups(RfGroupDepthwise),
}

impl DepthwiseKind {
    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        match self {
            DepthwiseKind::Single(c) => c.forward(cx, x),
            DepthwiseKind::Groups(g) => g.forward(cx, x),
        }
    }
}

/// Repeated separable convolution units with a pointwise+norm skip branch
/// added before the final activation. Channel count is preserved.
pub struct ConvBlock {
    units: Vec<BlockUnit>,
    skip_conv: Conv1d,
    skip_bn: BatchNorm1d,
    act: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockCfg {
    pub channels: usize,
    pub kernel: usize,
    pub repeats: usize,
    pub act: Activation,
    pub rf_groups: bool,
}

impl ConvBlock {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ConvBlockCfg,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.repeats == 0 {
            return Err(Error::invalid("conv_block", "repeats must be positive"));
        }
        let c = cfg.channels;
        let units = (0..cfg.repeats)
            .map(|u| {
                let dw = if cfg.rf_groups {
                    DepthwiseKind::Groups(RfGroupDepthwise::init(
                        store,
                        &format!("{name}.u{u}.dw"),
                        c,
                        rng,
                    )?)
                } else {
                    let spec = Conv1dSpec::depthwise(c, cfg.kernel, 1)?;
                    DepthwiseKind::Single(Conv1d::init(store, &format!("{name}.u{u}.dw"), spec, rng))
                };
                let pw = make_pointwise(store, &format!("{name}.u{u}.pw"), c, c, cfg.act, rng)?;
                let bn = BatchNorm1d::init(store, &format!("{name}.u{u}.bn"), cfg.act.pre_width(c));
                Ok(BlockUnit { dw, pw, bn })
            })
            .collect::<Result<Vec<_>>>()?;
        let skip_conv = make_pointwise(store, &format!("{name}.skip.pw"), c, c, cfg.act, rng)?;
        let skip_bn = BatchNorm1d::init(store, &format!("{name}.skip.bn"), cfg.act.pre_width(c));
        Ok(ConvBlock { units, skip_conv, skip_bn, act: cfg.act })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.units.len() - 1;
        for (u, unit) in self.units.iter().enumerate() {
            h = unit.dw.forward(cx, h)?;
            h = unit.pw.forward(cx, h)?;
            h = unit.bn.forward(cx, h)?;
            if u != last {
                h = self.act.apply(&mut cx.tape, h)?;
            }
        }
        let skip = self.skip_conv.forward(cx, x)?;
        let skip = self.skip_bn.forward(cx, skip)?;
        let sum = ops::add(&mut cx.tape, h, skip)?;
        self.act.apply(&mut cx.tape, sum)
    }
}

/// A [`ConvBlock`] wrapped in space-to-depth compression: optional
/// cross-shift, compress (/3 time, x2 channels), norm + activation, the inner
/// block at the compressed rate, then decompression back to the input shape
/// with a final norm + activation.
pub struct CompressedBlock {
    cross_shift: bool,
    compress: S2dCompress,
    comp_bn: BatchNorm1d,
    inner: ConvBlock,
    decompress: S2dDecompress,
    out_bn: BatchNorm1d,
}

#[derive(Clone, Copy, Debug)]
pub struct CompressedBlockCfg {
    pub channels: usize,
    pub kernel: usize,
    pub repeats: usize,
    pub act: Activation,
    pub rf_groups: bool,
    pub style: S2dStyle,
    pub cross_shift: bool,
}

impl CompressedBlock {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: CompressedBlockCfg,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let c2 = S2D_CHANNEL_MULT * c;
        let compress = S2dCompress::init(store, &format!("{name}.comp"), c, cfg.style, rng)?;
        let comp_bn = BatchNorm1d::init(store, &format!("{name}.comp_bn"), c2);
        let inner = ConvBlock::init(
            store,
            &format!("{name}.body"),
            ConvBlockCfg {
                channels: c2,
                kernel: cfg.kernel,
                repeats: cfg.repeats,
                act: cfg.act,
                rf_groups: cfg.rf_groups,
            },
            rng,
        )?;
        let decompress = S2dDecompress::init(store, &format!("{name}.decomp"), c, cfg.style, rng)?;
        let out_bn = BatchNorm1d::init(store, &format!("{name}.out_bn"), c);
        Ok(CompressedBlock {
            cross_shift: cfg.cross_shift,
            compress,
            comp_bn,
            inner,
            decompress,
            out_bn,
        })
    }

    /// Compression and decompression stages always use Swish; the configured
    /// activation (possibly GLU) applies to the pointwise units inside the
    /// block body.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let t = cx.tape.value(x).shape()[1];
        let mut h = x;
        if self.cross_shift {
            h = cross_shift(&mut cx.tape, h)?;
        }
        h = self.compress.forward(cx, h)?;
        h = self.comp_bn.forward(cx, h)?;
        h = ops::swish(&mut cx.tape, h);
        h = self.inner.forward(cx, h)?;
        h = self.decompress.forward(cx, h, t)?;
        h = self.out_bn.forward(cx, h)?;
        Ok(ops::swish(&mut cx.tape, h))
    }
}

/// A sequential run of layers.
pub enum Layer {
    Conv(Conv1d),
    Bn(BatchNorm1d),
    Swish,
    Sigmoid,
    Glu,
    Block(ConvBlock),
    Compressed(CompressedBlock),
}

pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(cx, h)?,
                Layer::Bn(b) => b.forward(cx, h)?,
                Layer::Swish => ops::swish(&mut cx.tape, h),
                Layer::Sigmoid => ops::sigmoid(&mut cx.tape, h),
                Layer::Glu => glu(&mut cx.tape, h)?,
                Layer::Block(b) => b.forward(cx, h)?,
                Layer::Compressed(cb) => cb.forward(cx, h)?,
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_shift_matches_definition() {
        // x = [[a,b],[c,d],[e,f]] -> [[0,d],[a,f],[c,0]]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let y = cross_shift(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 4.0, 1.0, 6.0, 3.0, 0.0]);
    }

    #[test]
    fn double_cross_shift_drops_two_per_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 5, 2], 1.0));
        let y1 = cross_shift(&mut tape, x).unwrap();
        let y2 = cross_shift(&mut tape, y1).unwrap();
        let d = tape.value(y2).data();
        // First half shifted +2: zeros at t=0,1; second half shifted -2.
        let col = |t: usize, c: usize| d[t * 2 + c];
        assert_eq!(col(0, 0), 0.0);
        assert_eq!(col(1, 0), 0.0);
        assert_eq!(col(2, 0), 1.0);
        assert_eq!(col(3, 1), 0.0);
        assert_eq!(col(4, 1), 0.0);
        assert_eq!(col(2, 1), 1.0);
        let total: f64 = d.iter().sum();
        assert_eq!(total, 10.0 - 4.0);
    }

    #[test]
    fn rf_sizes_follow_largest_remainder() {
        assert_eq!(rf_group_sizes(24).unwrap(), [8, 8, 4, 4]);
        assert_eq!(rf_group_sizes(6).unwrap(), [2, 2, 1, 1]);
        assert_eq!(rf_group_sizes(16).unwrap(), [5, 5, 3, 3]);
        assert_eq!(rf_group_sizes(7).unwrap(), [3, 2, 1, 1]);
        assert!(rf_group_sizes(5).is_err());
        for c in 6..64 {
            let s = rf_group_sizes(c).unwrap();
            assert_eq!(s.iter().sum::<usize>(), c);
            assert!(s.iter().all(|&g| g > 0));
        }
    }

    #[test]
    fn mean_pool_window_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 7, 1], vec![3.0, 6.0, 9.0, 1.0, 2.0, 3.0, 12.0]).unwrap());
        let y = mean_pool(&mut tape, x, 3).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 1]);
        assert_eq!(tape.value(y).data(), &[6.0, 2.0, 4.0]); // last window zero-padded
    }

    #[test]
    fn s2d_shapes_both_styles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for style in [S2dStyle::Conv, S2dStyle::Pooled] {
            let mut store = ParamStore::<f64>::new();
            let comp = S2dCompress::init(&mut store, "c", 4, style, &mut rng).unwrap();
            let dec = S2dDecompress::init(&mut store, "d", 4, style, &mut rng).unwrap();
            let mut cx = Ctx::new(&store, Mode::Eval);
            let x = cx.tape.leaf(Tensor::full(vec![2, 10, 4], 0.5));
            let mid = comp.forward(&mut cx, x).unwrap();
            assert_eq!(cx.tape.value(mid).shape(), &[2, 4, 8], "{style:?}");
            let back = dec.forward(&mut cx, mid, 10).unwrap();
            assert_eq!(cx.tape.value(back).shape(), &[2, 10, 4], "{style:?}");
        }
    }

    #[test]
    fn pooled_compress_with_identity_pointwise_is_mean_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let comp = S2dCompress::init(&mut store, "c", 2, S2dStyle::Pooled, &mut rng).unwrap();
        // Overwrite the pointwise with a channel-duplicating identity:
        // out (4 channels) = [x0, x1, x0, x1].
        let mut w = Tensor::zeros(vec![4, 1, 2]);
        for (j, i) in [(0usize, 0usize), (1, 1), (2, 0), (3, 1)] {
            w.data_mut()[j * 2 + i] = 1.0;
        }
        store.get_mut(comp.conv.w).value = w;
        let mut cx = Ctx::new(&store, Mode::Eval);
        let xv: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = cx.tape.leaf(Tensor::new(vec![1, 6, 2], xv).unwrap());
        let y = comp.forward(&mut cx, x).unwrap();
        let pooled = {
            let mut t2 = Tape::<f64>::new();
            let x2 = t2.leaf(cx.tape.value(x).clone());
            let p = mean_pool(&mut t2, x2, 3).unwrap();
            t2.value(p).data().to_vec()
        };
        let yd = cx.tape.value(y);
        for u in 0..2 {
            for c in 0..2 {
                assert_eq!(yd.data()[u * 4 + c], pooled[u * 2 + c]);
                assert_eq!(yd.data()[u * 4 + 2 + c], pooled[u * 2 + c]);
            }
        }
    }

    #[test]
    fn block_skip_alone_when_main_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let cfg = ConvBlockCfg {
            channels: 4,
            kernel: 3,
            repeats: 2,
            act: Activation::Swish,
            rf_groups: false,
        };
        let block = ConvBlock::init(&mut store, "blk", cfg, &mut rng).unwrap();
        // Zero the final unit's pointwise weights and bias: main branch
        // contributes beta of its BN (zero) only.
        let last_pw = block.units.last().unwrap().pw.w;
        let shape = store.get(last_pw).value.shape().to_vec();
        store.get_mut(last_pw).value = Tensor::zeros(shape);

        let mut cx = Ctx::new(&store, Mode::Eval);
        let xv: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = cx.tape.leaf(Tensor::new(vec![1, 10, 4], xv).unwrap());
        let y = block.forward(&mut cx, x).unwrap();

        let mut cx2 = Ctx::new(&store, Mode::Eval);
        let x2 = cx2.tape.leaf(cx.tape.value(x).clone());
        let skip = block.skip_conv.forward(&mut cx2, x2).unwrap();
        let skip = block.skip_bn.forward(&mut cx2, skip).unwrap();
        let skip = ops::swish(&mut cx2.tape, skip);
        for (a, b) in cx.tape.value(y).data().iter().zip(cx2.tape.value(skip).data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
