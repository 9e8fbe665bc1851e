//! Model construction from a declarative config: a conv stem, a downsample
//! stage that is either a strided conv or a dynamic-pooling layer, a stack of
//! trunk blocks, and a context-conditioned or plain CTC head.
//!
//! The two variants of each preset share every parameter name outside the
//! downsample stage (all of whose parameters live under `ds.`), so swapping
//! the stage is visible in a checkpoint only as a tensor-name diff.

use poolcall_core::decoders::ctc::{beam_decode, ctc_loss, greedy_decode, viterbi_align};
use poolcall_core::decoders::rna::{RnaHead, RnaNodes};
use poolcall_core::decoders::{Alignment, Reduction};
use poolcall_core::dynpool::{DynPool, DynPoolCfg, PoolingTrace};
use poolcall_core::nn::{
    Activation, BatchNorm1d, CompressedBlock, CompressedBlockCfg, Conv1d, Conv1dSpec, ConvBlock,
    ConvBlockCfg, Layer, S2dStyle, Stack,
};
use poolcall_core::{ops, Ctx, NodeId, ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKind {
    /// Strided convolution, stride = `ds_stride`.
    Stride,
    /// Dynamic pooling with target factor 1 / `ds_stride`.
    DynPool,
}

/// Shape of the nets producing point importances and length factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlNet {
    /// Single pointwise conv to one channel.
    Pointwise,
    /// Three conv layers with Swish between them.
    Conv3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockCfg {
    Plain { kernel: usize, repeats: usize, glu: bool, rf_groups: bool },
    Compressed {
        kernel: usize,
        repeats: usize,
        glu: bool,
        rf_groups: bool,
        pooled: bool,
        cross_shift: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    /// Emissions conditioned on the last k called bases.
    Rna { k: usize },
    /// Plain position-independent 5-way output with collapse-repeats CTC.
    Ctc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCfg {
    pub preset: String,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub trunk_channels: usize,
    pub ds_kernel: usize,
    pub ds_stride: usize,
    pub downsample: DownsampleKind,
    pub controls: ControlNet,
    pub blocks: Vec<BlockCfg>,
    pub head: HeadKind,
}

impl ModelCfg {
    pub fn s_target(&self) -> f64 {
        1.0 / self.ds_stride as f64
    }
}

/// Named preset configs. The `hac` family is the wider network with GLU
/// activations and receptive-field groups; the `fast` family is the slimmer
/// Swish network with cross-shifted pooled compression; both use three-layer
/// pooling controls so the length-factor net sees a full event. `smoke` is a
/// minimal model with pointwise controls for pipeline tests.
pub fn preset(name: &str) -> Result<ModelCfg> {
    let base = |preset: &str, downsample| match preset {
        "hac-mini" => ModelCfg {
            preset: String::new(),
            stem_channels: 16,
            stem_kernel: 9,
            trunk_channels: 24,
            ds_kernel: 9,
            ds_stride: 3,
            downsample,
            controls: ControlNet::Conv3,
            blocks: vec![
                BlockCfg::Plain { kernel: 5, repeats: 2, glu: true, rf_groups: true },
                BlockCfg::Compressed {
                    kernel: 5,
                    repeats: 2,
                    glu: true,
                    rf_groups: true,
                    pooled: false,
                    cross_shift: false,
                },
                BlockCfg::Plain { kernel: 5, repeats: 1, glu: true, rf_groups: true },
            ],
            head: HeadKind::Rna { k: 4 },
        },
        "fast-mini" => ModelCfg {
            preset: String::new(),
            stem_channels: 12,
            stem_kernel: 7,
            trunk_channels: 16,
            ds_kernel: 7,
            ds_stride: 3,
            downsample,
            controls: ControlNet::Conv3,
            blocks: vec![
                BlockCfg::Compressed {
                    kernel: 5,
                    repeats: 2,
                    glu: false,
                    rf_groups: false,
                    pooled: true,
                    cross_shift: true,
                },
                BlockCfg::Plain { kernel: 5, repeats: 1, glu: false, rf_groups: false },
            ],
            head: HeadKind::Rna { k: 4 },
        },
        _ => unreachable!(),
    };
    let mut cfg = match name {
        "hac-mini-stride" => base("hac-mini", DownsampleKind::Stride),
        "hac-mini-dynpool" => base("hac-mini", DownsampleKind::DynPool),
        "fast-mini-stride" => base("fast-mini", DownsampleKind::Stride),
        "fast-mini-dynpool" => base("fast-mini", DownsampleKind::DynPool),
        "smoke" => ModelCfg {
            preset: String::new(),
            stem_channels: 8,
            stem_kernel: 5,
            trunk_channels: 8,
            ds_kernel: 5,
            ds_stride: 3,
            downsample: DownsampleKind::DynPool,
            controls: ControlNet::Pointwise,
            blocks: vec![BlockCfg::Plain { kernel: 5, repeats: 1, glu: false, rf_groups: false }],
            head: HeadKind::Rna { k: 2 },
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected hac-mini-stride, hac-mini-dynpool, \
                 fast-mini-stride, fast-mini-dynpool, or smoke"
            )))
        }
    };
    cfg.preset = name.to_string();
    Ok(cfg)
}

enum Downsample {
    Stride(Conv1d),
    Pool(Box<DynPool>),
}

enum TrunkLayer {
    Plain(ConvBlock),
    Compressed(CompressedBlock),
}

pub enum Head {
    Rna(RnaHead),
    Ctc(Conv1d),
}

/// Bound per-batch head parameter nodes.
pub enum HeadNodes {
    Rna(RnaNodes),
    Ctc,
}

pub struct Model {
    pub cfg: ModelCfg,
    stem: Conv1d,
    stem_bn: BatchNorm1d,
    ds: Downsample,
    ds_bn: BatchNorm1d,
    trunk: Vec<TrunkLayer>,
    pub head: Head,
}

fn control_stack<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    net: ControlNet,
    rng: &mut R,
) -> Result<Stack> {
    let layers = match net {
        ControlNet::Pointwise => {
            vec![Layer::Conv(Conv1d::init(
                store,
                &format!("{name}.0"),
                Conv1dSpec::pointwise(c_in, 1)?,
                rng,
            ))]
        }
        ControlNet::Conv3 => vec![
            Layer::Conv(Conv1d::init(
                store,
                &format!("{name}.0"),
                Conv1dSpec::full(c_in, 8, 5, 1)?,
                rng,
            )),
            Layer::Swish,
            Layer::Conv(Conv1d::init(
                store,
                &format!("{name}.1"),
                Conv1dSpec::full(8, 8, 5, 1)?,
                rng,
            )),
            Layer::Swish,
            Layer::Conv(Conv1d::init(
                store,
                &format!("{name}.2"),
                Conv1dSpec::pointwise(8, 1)?,
                rng,
            )),
        ],
    };
    Ok(Stack { layers })
}

impl Model {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelCfg, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let (c_stem, c_trunk) = (cfg.stem_channels, cfg.trunk_channels);

        let stem = Conv1d::init(store, "stem", Conv1dSpec::full(1, c_stem, cfg.stem_kernel, 1)?, rng);
        let stem_bn = BatchNorm1d::init(store, "stem_bn", c_stem);

        let ds = match cfg.downsample {
            DownsampleKind::Stride => Downsample::Stride(Conv1d::init(
                store,
                "ds.conv",
                Conv1dSpec::full(c_stem, c_trunk, cfg.ds_kernel, cfg.ds_stride)?,
                rng,
            )),
            DownsampleKind::DynPool => {
                let f_net = Stack {
                    layers: vec![Layer::Conv(Conv1d::init(
                        store,
                        "ds.f.0",
                        Conv1dSpec::full(c_stem, c_trunk, cfg.ds_kernel, 1)?,
                        rng,
                    ))],
                };
                let w_net = control_stack(store, "ds.w", c_stem, cfg.controls, rng)?;
                let m_net = control_stack(store, "ds.m", c_stem, cfg.controls, rng)?;
                let pool_cfg = DynPoolCfg { s_target: cfg.s_target(), ..DynPoolCfg::default() };
                Downsample::Pool(Box::new(DynPool::new(store, "ds", f_net, w_net, m_net, pool_cfg)))
            }
        };
        let ds_bn = BatchNorm1d::init(store, "ds_bn", c_trunk);

        let trunk = cfg
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let name = format!("t{i}");
                let act = |glu| if glu { Activation::Glu } else { Activation::Swish };
                match *b {
                    BlockCfg::Plain { kernel, repeats, glu, rf_groups } => {
                        Ok(TrunkLayer::Plain(ConvBlock::init(
                            store,
                            &name,
                            ConvBlockCfg { channels: c_trunk, kernel, repeats, act: act(glu), rf_groups },
                            rng,
                        )?))
                    }
                    BlockCfg::Compressed { kernel, repeats, glu, rf_groups, pooled, cross_shift } => {
                        Ok(TrunkLayer::Compressed(CompressedBlock::init(
                            store,
                            &name,
                            CompressedBlockCfg {
                                channels: c_trunk,
                                kernel,
                                repeats,
                                act: act(glu),
                                rf_groups,
                                style: if pooled { S2dStyle::Pooled } else { S2dStyle::Conv },
                                cross_shift,
                            },
                            rng,
                        )?))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let head = match cfg.head {
            HeadKind::Rna { k } => Head::Rna(RnaHead::init(store, "head", c_trunk, k, rng)?),
            HeadKind::Ctc => Head::Ctc(Conv1d::init(
                store,
                "head.out",
                Conv1dSpec::pointwise(c_trunk, 5)?,
                rng,
            )),
        };

        Ok(Model { cfg: cfg.clone(), stem, stem_bn, ds, ds_bn, trunk, head })
    }

    /// Run the network up to head inputs: hidden rows for the RNA head, or
    /// 5-way logits for the CTC head. Traces are present iff the model uses
    /// dynamic pooling; their `output_len` gives each read's valid rows.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
    ) -> Result<(NodeId, Option<Vec<PoolingTrace>>)> {
        let mut h = self.stem.forward(cx, x)?;
        h = self.stem_bn.forward(cx, h)?;
        h = ops::swish(&mut cx.tape, h);

        let traces = match &self.ds {
            Downsample::Stride(conv) => {
                h = conv.forward(cx, h)?;
                None
            }
            Downsample::Pool(pool) => {
                let (warped, traces) = pool.forward(cx, h)?;
                h = warped;
                Some(traces)
            }
        };
        h = self.ds_bn.forward(cx, h)?;
        h = ops::swish(&mut cx.tape, h);

        for layer in &self.trunk {
            h = match layer {
                TrunkLayer::Plain(b) => b.forward(cx, h)?,
                TrunkLayer::Compressed(b) => b.forward(cx, h)?,
            };
        }

        if let Head::Ctc(out) = &self.head {
            h = out.forward(cx, h)?;
        }
        Ok((h, traces))
    }

    /// Valid output rows for a read of `t_in` signals whose trace is `trace`
    /// (dynpool) or `None` (stride).
    pub fn out_rows(&self, t_in: usize, trace: Option<&PoolingTrace>) -> usize {
        match trace {
            Some(tr) => tr.output_len,
            None => t_in.div_ceil(self.cfg.ds_stride),
        }
    }

    pub fn bind_head<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> HeadNodes {
        match &self.head {
            Head::Rna(head) => HeadNodes::Rna(head.bind(cx)),
            Head::Ctc(_) => HeadNodes::Ctc,
        }
    }

    /// Negative log likelihood of `target` for one read: `rows` is the
    /// read's cropped run of head inputs, shaped `[1, L', C]`.
    pub fn read_loss<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        nodes: &HeadNodes,
        rows: NodeId,
        target: &[usize],
    ) -> Result<NodeId> {
        match (&self.head, nodes) {
            (Head::Rna(head), HeadNodes::Rna(nodes)) => {
                Ok(head.loss(&mut cx.tape, nodes, rows, target)?)
            }
            (Head::Ctc(_), HeadNodes::Ctc) => {
                Ok(ctc_loss(&mut cx.tape, rows, target, Reduction::CollapseDrop)?)
            }
            _ => Err(Error::Config("head binding does not match model head".into())),
        }
    }

    /// Decode one read's cropped head inputs `[L', C]` (beam width 1 is
    /// greedy for the RNA head).
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rows: &Tensor<T>,
        width: usize,
    ) -> Result<Vec<usize>> {
        match &self.head {
            Head::Rna(head) => Ok(head.beam_decode(store, rows, width)?),
            Head::Ctc(_) => {
                if width <= 1 {
                    Ok(greedy_decode(rows, Reduction::CollapseDrop)?)
                } else {
                    Ok(beam_decode(rows, width, Reduction::CollapseDrop)?)
                }
            }
        }
    }

    /// Forced alignment of a call against the same rows, for quality scores.
    pub fn align<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rows: &Tensor<T>,
        call: &[usize],
    ) -> Result<Alignment> {
        match &self.head {
            Head::Rna(head) => Ok(head.viterbi(store, rows, call)?),
            Head::Ctc(_) => Ok(viterbi_align(rows, call, Reduction::CollapseDrop)?),
        }
    }
}

/// Copy parameters from a GLU-activation model's store into its Swish twin's
/// store. Where the GLU model's tensor has twice the rows (pointwise convs
/// and the norms after them), the first half is taken; everything else is
/// copied verbatim. At init the twin then computes the same function.
pub fn copy_glu_params_to_twin<T: Scalar>(
    glu: &ParamStore<T>,
    twin: &mut ParamStore<T>,
) -> Result<()> {
    let mut updates: Vec<(String, Tensor<T>)> = Vec::new();
    for (_, p) in twin.iter() {
        let src = glu
            .id_of(&p.name)
            .ok_or_else(|| Error::Config(format!("twin parameter {} missing from GLU store", p.name)))?;
        let sv = &glu.get(src).value;
        if sv.shape() == p.value.shape() {
            updates.push((p.name.clone(), sv.clone()));
        } else if sv.shape()[0] == 2 * p.value.shape()[0]
            && sv.shape()[1..] == p.value.shape()[1..]
        {
            let half = sv.numel() / 2;
            updates.push((
                p.name.clone(),
                Tensor::new(p.value.shape().to_vec(), sv.data()[..half].to_vec())?,
            ));
        } else {
            return Err(Error::Config(format!(
                "parameter {} has incompatible shapes {:?} vs {:?}",
                p.name,
                sv.shape(),
                p.value.shape()
            )));
        }
    }
    for (name, value) in updates {
        let id = twin.id_of(&name).unwrap();
        twin.get_mut(id).value = value;
    }
    Ok(())
}

/// The same config with every GLU block switched to Swish.
pub fn swish_twin_cfg(cfg: &ModelCfg) -> ModelCfg {
    let mut twin = cfg.clone();
    for b in twin.blocks.iter_mut() {
        match b {
            BlockCfg::Plain { glu, .. } => *glu = false,
            BlockCfg::Compressed { glu, .. } => *glu = false,
        }
    }
    twin
}
