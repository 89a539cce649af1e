//! Minimal dense network with exact gradients, the distillation loss terms,
//! and first-order optimizers. All arithmetic is `f64`.

pub mod backprop;
pub mod loss;
pub mod model;
pub mod optim;

pub use backprop::{backward, backward_with_hidden, Gradients};
pub use loss::{
    cross_entropy, cross_entropy_grad, kl_div, kl_grad, lwd_backward, lwd_term, LossWeights,
    LwdAlignment, LwdGrad, Projection, PROB_FLOOR,
};
pub use model::{predicted_class, softmax2, Activation, ForwardTrace, MlpModel, MlpSpec};
pub use optim::{optimizer_step, Optimizer, OptimizerState};
