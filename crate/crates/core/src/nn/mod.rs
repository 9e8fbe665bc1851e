pub mod act;
pub mod blocks;
pub mod conv;
pub mod norm;

pub use act::glu;
pub use blocks::{
    cross_shift, mean_pool, rf_group_sizes, Activation, CompressedBlock, CompressedBlockCfg,
    ConvBlock, ConvBlockCfg, Layer, RfGroupDepthwise, S2dCompress, S2dDecompress, S2dStyle, Stack,
    RF_KERNELS,
};
pub use conv::{
    conv1d, conv_transpose1d, duplicate_output_halves, kaiming_weights, Conv1d, Conv1dSpec,
    ConvT1dSpec, ConvTranspose1d,
};
pub use norm::BatchNorm1d;
