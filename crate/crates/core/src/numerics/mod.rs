//! Dense tensors with a reverse-mode tape, sized for the model in this crate.

mod gradcheck;
mod graph;
pub mod nn;
mod param;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckEntry, GradCheckReport, GradInput, REL_ERR_FLOOR,
};
pub use graph::{Graph, Var};
pub use nn::{multi_head_attention, AttentionWeights};
pub use param::{round_f32, Bindings, Init, ParamSet, ParamSpec, Parameter};
pub use tensor::{Element, Tensor};

pub(crate) use graph::sigmoid;
