//! The encoder-decoder model and its MoE feed-forward slots.

pub mod moe;
pub mod params;
pub mod transformer;

pub use moe::{
    moe_forward, route_classic, route_dataset_aware, top1, FfnMode, LayerId, MoeOptions, MoeOutput, RouteRecord,
    RoutingOverride, RoutingTrace, TokenRoute,
};
pub use params::{
    DeputyExpert, Layout, MainExpert, MoeFfnParams, ParamInfo, ParamKind, TransformerParams,
};
pub use transformer::{
    decode_step, decode_step_batch, encode, forward_log_probs, teacher_forced_logits, ExpertMode, Forward,
    ForwardOptions, PackedBatch, PassRouting, Segment, BOS, EOS, PAD, UNK,
};
