//! Small-network substrate: tensors, a reverse-mode tape, MLP classifiers,
//! random feature extractors and minibatch SGD.

pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{
    cross_entropy, feature_extract, forward, grad, grad_tensors, init_model, init_model_with,
    sample_extractor, sample_extractor_with, sgd_step, Activation, ExtractorParams, Gradient,
    Layer, Mlp, ModelParams, ParamVars,
};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
pub use train::{batch_objective, epoch_batches, l1_penalty, mean_loss, train, LabeledSet, LossSpec, TrainConfig};
