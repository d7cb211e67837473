//! Image codec with per-region variable granularity and an autoregressive
//! prior over the resulting code sequences.
//!
//! The pipeline has two trained stages. Stage 1 encodes an image into
//! per-granularity feature grids, routes every region of the image to one
//! granularity through a learned gate, vector-quantizes the selected
//! features against a shared codebook, and decodes the replicated code
//! grid back to pixels. Stage 2 fits a causal transformer pair to the
//! serialized code sequences: one stack picks the next code's position,
//! the other picks its content. The sampler then generates new grids
//! coarse to fine under masks that guarantee the result tiles the image.
//!
//! Everything runs on a small reverse-mode tape over dense row-major
//! tensors, generic over `f32`/`f64`. Gradients of every differentiable
//! path are validated against central finite differences; the
//! straight-through estimator has a dedicated surrogate mode so its soft
//! branch can be checked the same way.

pub mod error;
pub mod gradcheck;
pub mod grain;
pub mod nn;
pub mod prior;
pub mod quantizer;
pub mod sampler;
pub mod scalar;
pub mod sequence;
pub mod stage1;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_mode, FdReport};
pub use grain::{GrainGeometry, GrainSpec};
pub use nn::{bind, collect_grads, warmup_lr, Adam, Bound, ParamId, ParamSet};
pub use prior::{EmbedToggles, Prior, PriorConfig, PriorLosses, Stage2Loss};
pub use quantizer::{Codebook, QuantOut};
pub use sampler::{filter_logits, region_mask, sample_batch, SampleOut, SampleSettings, SamplingModel};
pub use scalar::{Dtype, Scalar};
pub use sequence::{
    decode_sequence, encode_sequence, make_conditional, natural_lengths, pad_plan, strip_labels,
    TokenSequence, Vocab,
};
pub use stage1::{
    budget_loss, forced_grain_map, mix_seed, route_from_logits, CodeGrid, Forward1, GatePolicy,
    GrainMap, Stage1, Stage1Config, Stage1Losses,
};
pub use tape::{NodeId, Reduction, StMode, Tape};
pub use tensor::Tensor;

/// Training-precision stage-1 model.
pub type Stage1F32 = Stage1<f32>;
/// Oracle-precision stage-1 model for gradient checks.
pub type Stage1F64 = Stage1<f64>;
pub type PriorF32 = Prior<f32>;
pub type PriorF64 = Prior<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
