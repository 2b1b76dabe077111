//! Minimal differentiable-computation substrate and the toy grid detector
//! every loss and the federation protocol operate on.

pub mod detector;
pub mod optim;
pub mod params;
pub mod tape;

pub use detector::{
    backbone_cell_feats, backbone_embedding, embed_with_backbone, softmax, Assignment, BoxLossKind,
    DetectorConfig, DetectorOutput, GridDetector, TapeForward,
};
pub use optim::{clip_grad_norm, sgd_step, SgdState};
pub use params::{ParameterMap, Tensor, BACKBONE_PREFIX, HEAD_PREFIX};
pub use tape::{Gradients, NodeId, Tape};
