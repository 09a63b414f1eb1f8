//! Finite-difference check of the full network and loss in f64.

use conformer_tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use conformer_tensor::{Tape, Tensor, TensorError};

use crate::config::ConformerConfig;
use crate::data::synth_shapes;
use crate::error::{Error, Result};
use crate::model::{Conformer, ForwardOptions};
use crate::trainer::dual_loss;

/// Checks every parameter tensor of a freshly initialized model on a
/// two-image synthetic batch. Norms run in eval mode so the loss is a pure
/// function of the parameters.
pub fn check_model(config: &ConformerConfig, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let model = Conformer::new(config.clone(), seed)?.cast::<f64>();
    let classes = config.num_classes.clamp(1, 4);
    let data = synth_shapes(classes, config.input_size.max(32), 2, seed, "gradcheck")?;
    let images: Tensor<f64> = data.images.cast();
    let labels: Vec<usize> = data.labels.clone();
    let loss = |tape: &Tape<f64>, vars: &_| {
        let img = tape.constant(images.clone());
        let pass = model.forward_on(tape, vars, img, ForwardOptions::default()).map_err(as_tensor_error)?;
        dual_loss(tape, pass.cnn_logits, pass.trans_logits, &labels, [1.0, 1.0]).map_err(as_tensor_error)
    };
    Ok(grad_check(&model.params, loss, cfg)?)
}

fn as_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Contract { op: "check_model", detail: other.to_string() },
    }
}
