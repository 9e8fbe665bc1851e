//! Finite-difference validation of recorded backward passes. Cases build a
//! scalar loss from leaf inputs and store parameters; the runner compares
//! analytic gradients against central differences for every element of every
//! checked input and every trainable parameter.
//!
//! Everything runs in f64: with eps = 1e-3 the central-difference error is
//! far below the 1e-2 relative tolerance for these smooth ops.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoders::ctc::ctc_loss;
use crate::decoders::rna::RnaHead;
use crate::decoders::Reduction;
use crate::dynpool::{dyn_warp, renormalize_batch, warp_with_positions, DynPool, DynPoolCfg};
use crate::error::Result;
use crate::nn::{
    cross_shift, glu, mean_pool, Activation, BatchNorm1d, CompressedBlock, CompressedBlockCfg,
    Conv1d, Conv1dSpec, ConvBlock, ConvBlockCfg, ConvT1dSpec, ConvTranspose1d, Layer, S2dStyle,
    Stack,
};
use crate::ops;
use crate::param::ParamStore;
use crate::rng::uniform;
use crate::tape::{Ctx, Mode, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            eps: 1e-3,
            rel_tol: 1e-2,
            abs_floor: 1e-4,
        }
    }
}

/// Outcome for one differentiated tensor (an input leaf or a parameter).
#[derive(Clone, Debug)]
pub struct FdReport {
    pub case: String,
    pub tensor: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

pub struct FdInput {
    pub name: String,
    pub value: Tensor<f64>,
    /// Some gradients are deliberately approximate (truncated warp backward);
    /// those inputs still feed the graph but skip the comparison.
    pub check: bool,
}

impl FdInput {
    fn checked(name: &str, value: Tensor<f64>) -> Self {
        FdInput {
            name: name.to_string(),
            value,
            check: true,
        }
    }

    fn unchecked(name: &str, value: Tensor<f64>) -> Self {
        FdInput {
            name: name.to_string(),
            value,
            check: false,
        }
    }
}

type BuildFn = Box<dyn Fn(&mut Ctx<'_, f64>, &[NodeId]) -> Result<NodeId>>;

pub struct FdCase {
    pub name: String,
    pub store: ParamStore<f64>,
    pub inputs: Vec<FdInput>,
    pub build: BuildFn,
}

fn loss_value(case: &FdCase, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut cx = Ctx::new(store, Mode::Train);
    let nodes: Vec<NodeId> = inputs.iter().map(|t| cx.tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut cx, &nodes)?;
    Ok(cx.tape.value(loss).data()[0])
}

fn compare(
    case: &str,
    tensor: &str,
    analytic: &[f64],
    fd: &[f64],
    settings: &FdSettings,
) -> FdReport {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut passed = true;
    for (&a, &f) in analytic.iter().zip(fd) {
        let abs = (a - f).abs();
        max_abs = max_abs.max(abs);
        if abs > settings.abs_floor {
            let rel = abs / a.abs().max(f.abs());
            max_rel = max_rel.max(rel);
            if rel > settings.rel_tol {
                passed = false;
            }
        }
    }
    FdReport {
        case: case.to_string(),
        tensor: tensor.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        passed,
    }
}

/// Run one case: analytic backward once, then central differences over every
/// element of checked inputs and trainable parameters.
pub fn check_case(case: &FdCase, settings: &FdSettings) -> Result<Vec<FdReport>> {
    let base_inputs: Vec<Tensor<f64>> = case.inputs.iter().map(|i| i.value.clone()).collect();
    let mut cx = Ctx::new(&case.store, Mode::Train);
    let nodes: Vec<NodeId> = base_inputs.iter().map(|t| cx.tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut cx, &nodes)?;
    let grads = cx.tape.backward(loss)?;
    let input_grads: Vec<Tensor<f64>> = nodes
        .iter()
        .map(|&n| grads.dense(&cx.tape, n))
        .collect();
    let param_grads = cx.tape.backward_params(loss, &case.store)?;

    let mut reports = Vec::new();
    for (idx, input) in case.inputs.iter().enumerate() {
        if !input.check {
            continue;
        }
        let mut fd = vec![0.0; input.value.numel()];
        for e in 0..input.value.numel() {
            let mut plus = base_inputs.to_vec();
            plus[idx].data_mut()[e] += settings.eps;
            let mut minus = base_inputs.to_vec();
            minus[idx].data_mut()[e] -= settings.eps;
            fd[e] = (loss_value(case, &case.store, &plus)?
                - loss_value(case, &case.store, &minus)?)
                / (2.0 * settings.eps);
        }
        reports.push(compare(
            &case.name,
            &input.name,
            input_grads[idx].data(),
            &fd,
            settings,
        ));
    }

    let trainable: Vec<String> = case
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in trainable {
        let id = case.store.id_of(&name).unwrap();
        let numel = case.store.get(id).value.numel();
        let mut fd = vec![0.0; numel];
        for e in 0..numel {
            let mut plus = case.store.clone();
            plus.get_mut(id).value.data_mut()[e] += settings.eps;
            let mut minus = case.store.clone();
            minus.get_mut(id).value.data_mut()[e] -= settings.eps;
            fd[e] = (loss_value(case, &plus, &base_inputs)?
                - loss_value(case, &minus, &base_inputs)?)
                / (2.0 * settings.eps);
        }
        let analytic = param_grads
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        reports.push(compare(&case.name, &name, &analytic, &fd, settings));
    }
    Ok(reports)
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| uniform(rng, lo, hi)).collect()).unwrap()
}

/// Weighted sum against a fixed coefficient leaf, shaped like `of`.
fn weighted_sum(cx: &mut Ctx<'_, f64>, of: NodeId, coeff: NodeId) -> Result<NodeId> {
    let prod = ops::mul(&mut cx.tape, of, coeff)?;
    Ok(ops::sum_all(&mut cx.tape, prod))
}

/// Positions must sit clear of the piecewise-linear kinks at integers so
/// finite differences stay inside one linear piece.
fn away_from_knots(m: &[f64], margin: f64) -> bool {
    let mut p = 0.0;
    for &v in m {
        p += v;
        if (p - p.round()).abs() < margin {
            return false;
        }
    }
    true
}

fn draw_clear_m<R: Rng>(rng: &mut R, t: usize, lo: f64, hi: f64) -> Vec<f64> {
    loop {
        let m: Vec<f64> = (0..t).map(|_| uniform(rng, lo, hi)).collect();
        if away_from_knots(&m, 8e-3) {
            return m;
        }
    }
}

/// The registry of differentiable pieces. Every primitive op, layer, and
/// loss appears in at least one case.
pub fn registry(seed: u64) -> Vec<FdCase> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    {
        let a = rand_tensor(&mut rng, vec![2, 3, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![2, 3, 2], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![2, 3, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "add_mul_chain".into(),
            store: ParamStore::new(),
            inputs: vec![
                FdInput::checked("a", a),
                FdInput::checked("b", b),
                FdInput::checked("c", c),
            ],
            build: Box::new(|cx, n| {
                let s = ops::add(&mut cx.tape, n[0], n[1])?;
                weighted_sum(cx, s, n[2])
            }),
        });
    }
    {
        let a = rand_tensor(&mut rng, vec![2, 4, 1], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![2, 4, 1], -1.0, 1.0);
        cases.push(FdCase {
            name: "sub_neg_scale".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("a", a), FdInput::checked("b", b)],
            build: Box::new(|cx, n| {
                let d = ops::sub(&mut cx.tape, n[0], n[1])?;
                let nd = ops::neg(&mut cx.tape, d);
                let sc = ops::scale(&mut cx.tape, nd, 1.7);
                let sh = ops::add_const(&mut cx.tape, sc, 0.3);
                let prod = ops::mul(&mut cx.tape, sh, n[1])?;
                Ok(ops::sum_all(&mut cx.tape, prod))
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![1, 6, 2], -3.0, 3.0);
        let c = rand_tensor(&mut rng, vec![1, 6, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "sigmoid_swish".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let s = ops::sigmoid(&mut cx.tape, n[0]);
                let w = ops::swish(&mut cx.tape, n[0]);
                let sum = ops::add(&mut cx.tape, s, w)?;
                weighted_sum(cx, sum, n[1])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![1, 5, 1], 0.5, 1.5);
        let c = rand_tensor(&mut rng, vec![1, 5, 1], -1.0, 1.0);
        cases.push(FdCase {
            name: "recip_mean".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let shifted = ops::add_const(&mut cx.tape, n[0], 1.0);
                let r = ops::recip(&mut cx.tape, shifted);
                let ws = weighted_sum(cx, r, n[1])?;
                let m = ops::mean_all(&mut cx.tape, n[0]);
                ops::add(&mut cx.tape, ws, m)
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 3, 2], -1.0, 1.0);
        let s = rand_tensor(&mut rng, vec![2, 2, 1], 0.2, 1.0);
        let c = rand_tensor(&mut rng, vec![2, 3, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "mul_scalar_node".into(),
            store: ParamStore::new(),
            inputs: vec![
                FdInput::checked("x", x),
                FdInput::checked("s", s),
                FdInput::checked("c", c),
            ],
            build: Box::new(|cx, n| {
                let mean = ops::mean_all(&mut cx.tape, n[1]);
                let scaled = ops::mul_scalar_node(&mut cx.tape, n[0], mean)?;
                weighted_sum(cx, scaled, n[2])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![1, 4, 4], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![1, 4, 4], -1.0, 1.0);
        cases.push(FdCase {
            name: "slice_concat_swap".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let lo = ops::slice_channels(&mut cx.tape, n[0], 0, 2)?;
                let hi = ops::slice_channels(&mut cx.tape, n[0], 2, 4)?;
                let swapped = ops::concat_channels(&mut cx.tape, hi, lo)?;
                weighted_sum(cx, swapped, n[1])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![1, 5, 2], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![1, 7, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "shift_pad_crop".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let sh = ops::shift_time(&mut cx.tape, n[0], 1)?;
                let back = ops::shift_time(&mut cx.tape, sh, -2)?;
                let padded = ops::pad_time(&mut cx.tape, back, 7)?;
                let prod = ops::mul(&mut cx.tape, padded, n[1])?;
                let cropped = ops::crop_time(&mut cx.tape, prod, 7)?;
                Ok(ops::sum_all(&mut cx.tape, cropped))
            }),
        });
    }
    {
        let a = rand_tensor(&mut rng, vec![1, 3, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![1, 3, 2], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![1, 6, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "interleave_time".into(),
            store: ParamStore::new(),
            inputs: vec![
                FdInput::checked("a", a),
                FdInput::checked("b", b),
                FdInput::checked("c", c),
            ],
            build: Box::new(|cx, n| {
                let il = ops::interleave_time(&mut cx.tape, &[n[0], n[1]])?;
                weighted_sum(cx, il, n[2])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 4, 3], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![3], -0.5, 0.5);
        let c = rand_tensor(&mut rng, vec![2, 4, 3], -1.0, 1.0);
        cases.push(FdCase {
            name: "add_bias_swish".into(),
            store: ParamStore::new(),
            inputs: vec![
                FdInput::checked("x", x),
                FdInput::checked("bias", bias),
                FdInput::checked("c", c),
            ],
            build: Box::new(|cx, n| {
                let b = ops::add_bias(&mut cx.tape, n[0], n[1])?;
                let s = ops::swish(&mut cx.tape, b);
                weighted_sum(cx, s, n[2])
            }),
        });
    }
    for stride in [1usize, 2] {
        let mut store = ParamStore::new();
        let conv = Conv1d::init(
            &mut store,
            "conv",
            Conv1dSpec::full(3, 4, 3, stride).unwrap(),
            &mut rng,
        );
        let t_out = 6usize.div_ceil(stride);
        let x = rand_tensor(&mut rng, vec![2, 6, 3], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![2, t_out, 4], -1.0, 1.0);
        cases.push(FdCase {
            name: format!("conv_full_s{stride}"),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(move |cx, n| {
                let y = conv.forward(cx, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let conv = Conv1d::init(
            &mut store,
            "dw",
            Conv1dSpec::depthwise(3, 5, 1).unwrap(),
            &mut rng,
        );
        let x = rand_tensor(&mut rng, vec![1, 7, 3], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![1, 7, 3], -1.0, 1.0);
        cases.push(FdCase {
            name: "conv_depthwise".into(),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(move |cx, n| {
                let y = conv.forward(cx, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let convt = ConvTranspose1d::init(
            &mut store,
            "up",
            ConvT1dSpec::new(4, 2, 3, 3).unwrap(),
            &mut rng,
        );
        let x = rand_tensor(&mut rng, vec![1, 3, 4], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![1, 8, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "conv_transpose".into(),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(move |cx, n| {
                let y = convt.forward(cx, n[0], 8)?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::init(&mut store, "bn", 3);
        let x = rand_tensor(&mut rng, vec![2, 4, 3], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![2, 4, 3], -1.0, 1.0);
        cases.push(FdCase {
            name: "batchnorm_train".into(),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(move |cx, n| {
                let y = bn.forward(cx, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![1, 4, 6], -1.5, 1.5);
        let c = rand_tensor(&mut rng, vec![1, 4, 3], -1.0, 1.0);
        cases.push(FdCase {
            name: "glu".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let y = glu(&mut cx.tape, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![1, 5, 4], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![1, 5, 4], -1.0, 1.0);
        cases.push(FdCase {
            name: "cross_shift".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let y = cross_shift(&mut cx.tape, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 7, 2], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![2, 3, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "mean_pool".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let y = mean_pool(&mut cx.tape, n[0], 3)?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        let mut store = ParamStore::new();
        let block = ConvBlock::init(
            &mut store,
            "blk",
            ConvBlockCfg {
                channels: 6,
                kernel: 3,
                repeats: 2,
                act: Activation::Glu,
                rf_groups: true,
            },
            &mut rng,
        )
        .unwrap();
        let x = rand_tensor(&mut rng, vec![2, 4, 6], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![2, 4, 6], -1.0, 1.0);
        cases.push(FdCase {
            name: "conv_block_glu_rf".into(),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(move |cx, n| {
                let y = block.forward(cx, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    for style in [S2dStyle::Conv, S2dStyle::Pooled] {
        let mut store = ParamStore::new();
        let block = CompressedBlock::init(
            &mut store,
            "cblk",
            CompressedBlockCfg {
                channels: 4,
                kernel: 3,
                repeats: 1,
                act: Activation::Swish,
                rf_groups: false,
                style,
                cross_shift: true,
            },
            &mut rng,
        )
        .unwrap();
        let x = rand_tensor(&mut rng, vec![4, 6, 4], -1.0, 1.0);
        let c = rand_tensor(&mut rng, vec![4, 6, 4], -1.0, 1.0);
        cases.push(FdCase {
            name: format!("compressed_block_{style:?}").to_lowercase(),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::checked("c", c)],
            build: Box::new(move |cx, n| {
                let y = block.forward(cx, n[0])?;
                weighted_sum(cx, y, n[1])
            }),
        });
    }
    {
        // T of 12 keeps the 20-step window longer than the read, so the
        // truncated backward is exact and plain FD applies to all three.
        let t = 12;
        let f = rand_tensor(&mut rng, vec![1, t, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![1, t, 1], 0.1, 0.9);
        let m = Tensor::new(vec![1, t, 1], draw_clear_m(&mut rng, t, 0.3, 0.9)).unwrap();
        let p_last: f64 = m.data().iter().sum();
        let l = p_last.ceil() as usize;
        let c = rand_tensor(&mut rng, vec![1, l, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "dyn_warp_short".into(),
            store: ParamStore::new(),
            inputs: vec![
                FdInput::checked("f", f),
                FdInput::checked("w", w),
                FdInput::checked("m", m),
                FdInput::checked("c", c),
            ],
            build: Box::new(|cx, n| {
                let out = dyn_warp(&mut cx.tape, n[0], n[1], n[2], 20)?;
                weighted_sum(cx, out.node, n[3])
            }),
        });
    }
    {
        // Long read: f and w gradients stay exact; m is checked separately
        // against the truncated surrogate (see truncation_check).
        let t = 60;
        let f = rand_tensor(&mut rng, vec![1, t, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![1, t, 1], 0.1, 0.9);
        let m = Tensor::new(vec![1, t, 1], draw_clear_m(&mut rng, t, 0.3, 0.9)).unwrap();
        let p_last: f64 = m.data().iter().sum();
        let l = p_last.ceil() as usize;
        let c = rand_tensor(&mut rng, vec![1, l, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "dyn_warp_long_fw".into(),
            store: ParamStore::new(),
            inputs: vec![
                FdInput::checked("f", f),
                FdInput::checked("w", w),
                FdInput::unchecked("m", m),
                FdInput::checked("c", c),
            ],
            build: Box::new(|cx, n| {
                let out = dyn_warp(&mut cx.tape, n[0], n[1], n[2], 20)?;
                weighted_sum(cx, out.node, n[3])
            }),
        });
    }
    {
        let m = rand_tensor(&mut rng, vec![2, 5, 1], 0.2, 0.9);
        let c = rand_tensor(&mut rng, vec![2, 5, 1], -1.0, 1.0);
        cases.push(FdCase {
            name: "renormalize".into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("m", m), FdInput::checked("c", c)],
            build: Box::new(|cx, n| {
                let (mp, _) = renormalize_batch(&mut cx.tape, n[0], 0.4, false)?;
                weighted_sum(cx, mp, n[1])
            }),
        });
    }
    for (nm, reduction) in [
        ("ctc_drop", Reduction::Drop),
        ("ctc_collapse", Reduction::CollapseDrop),
    ] {
        let logits = rand_tensor(&mut rng, vec![6, 5], -1.0, 1.0);
        cases.push(FdCase {
            name: nm.into(),
            store: ParamStore::new(),
            inputs: vec![FdInput::checked("logits", logits)],
            build: Box::new(move |cx, n| ctc_loss(&mut cx.tape, n[0], &[1, 1, 3], reduction)),
        });
    }
    {
        let mut store = ParamStore::new();
        let head = RnaHead::init(&mut store, "head", 3, 2, &mut rng).unwrap();
        let h = rand_tensor(&mut rng, vec![1, 6, 3], -1.0, 1.0);
        cases.push(FdCase {
            name: "rna_loss".into(),
            store,
            inputs: vec![FdInput::checked("h", h)],
            build: Box::new(move |cx, n| {
                let nodes = head.bind(cx);
                head.loss(&mut cx.tape, &nodes, n[0], &[0, 2, 2, 1])
            }),
        });
    }
    {
        // Full layer, train mode: renormalization plus warp end to end. T is
        // below the window so the m path is exact here too.
        let mut store = ParamStore::new();
        let mk = |store: &mut ParamStore<f64>, name: &str, c_out: usize, rng: &mut ChaCha8Rng| Stack {
            layers: vec![Layer::Conv(Conv1d::init(
                store,
                name,
                Conv1dSpec::pointwise(2, c_out).unwrap(),
                rng,
            ))],
        };
        let f_net = mk(&mut store, "dp.f", 2, &mut rng);
        let w_net = mk(&mut store, "dp.w", 1, &mut rng);
        let m_net = mk(&mut store, "dp.m", 1, &mut rng);
        let pool = DynPool::new(
            &mut store,
            "dp",
            f_net,
            w_net,
            m_net,
            DynPoolCfg {
                s_target: 0.5,
                ..DynPoolCfg::default()
            },
        );
        let x = rand_tensor(&mut rng, vec![2, 10, 2], -1.0, 1.0);
        // coefficient sized for the worst-case output length
        let c = rand_tensor(&mut rng, vec![2, 11, 2], -1.0, 1.0);
        cases.push(FdCase {
            name: "dynpool_layer".into(),
            store,
            inputs: vec![FdInput::checked("x", x), FdInput::unchecked("c", c)],
            build: Box::new(move |cx, n| {
                let (out, _) = pool.forward(cx, n[0])?;
                let l = cx.tape.value(out).shape()[1];
                let coeff = ops::crop_time(&mut cx.tape, n[1], l)?;
                weighted_sum(cx, out, coeff)
            }),
        });
    }
    cases
}

/// Validate the truncated prefix-sum backward on a long read against the
/// surrogate it approximates: finite differences where only positions within
/// the window move.
pub fn truncation_check(seed: u64, settings: &FdSettings) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let t = 60;
    let window = 20;
    let fdata = rand_tensor(&mut rng, vec![1, t, 2], -1.0, 1.0);
    let wdata: Vec<f64> = (0..t).map(|_| uniform(&mut rng, 0.1, 0.9)).collect();
    let mdata = draw_clear_m(&mut rng, t, 0.3, 0.9);
    let p: Vec<f64> = mdata
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let l = p[t - 1].ceil() as usize;
    let coeff = rand_tensor(&mut rng, vec![1, l, 2], -1.0, 1.0);

    let mut tape = crate::tape::Tape::<f64>::new();
    let f = tape.leaf(fdata.clone());
    let w = tape.leaf(Tensor::new(vec![1, t, 1], wdata.clone()).unwrap());
    let m = tape.leaf(Tensor::new(vec![1, t, 1], mdata).unwrap());
    let out = dyn_warp(&mut tape, f, w, m, window).unwrap();
    let cn = tape.leaf(coeff.clone());
    let prod = ops::mul(&mut tape, out.node, cn).unwrap();
    let loss = ops::sum_all(&mut tape, prod);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(m).unwrap().data().to_vec();

    let surrogate_loss = |positions: &[f64]| -> f64 {
        let warped = warp_with_positions(&fdata, &wdata, positions, l);
        warped
            .data()
            .iter()
            .zip(coeff.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let delta = 1e-4;
    let mut fd = vec![0.0; t];
    for u in 0..t {
        let hi = (u + window).min(t - 1);
        let mut plus = p.clone();
        let mut minus = p.clone();
        for k in u..=hi {
            plus[k] += delta;
            minus[k] -= delta;
        }
        fd[u] = (surrogate_loss(&plus) - surrogate_loss(&minus)) / (2.0 * delta);
    }
    compare("dyn_warp_truncation", "m", &analytic, &fd, settings)
}

/// Run the whole registry over several seeds plus the truncation check.
pub fn run_suite(seeds: &[u64], settings: &FdSettings) -> Result<Vec<FdReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        for case in registry(seed) {
            reports.extend(check_case(&case, settings)?);
        }
        reports.push(truncation_check(seed, settings));
    }
    Ok(reports)
}
