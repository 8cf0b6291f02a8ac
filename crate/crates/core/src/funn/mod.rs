//! Second-order and mixed-function neurons and the network variants built
//! from them.

mod arch;
mod function;
mod model;
mod neuron;

pub use arch::{ArchSpec, Head, LayerSpec, Variant, Wiring};
pub use function::{apply_function, FunctionKind, SAFE_LOG_K};
pub use model::{build_model, LayerSlot, Model, ModelMeta, Term, WeightedTerms};
pub use neuron::{
    mixed_forward, pair_count, second_order_forward, softmax_weights, MixedFunctionNeuron, Normalization,
    PreActivation, SecondOrderNeuron,
};
