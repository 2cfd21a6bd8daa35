//! Stand-alone tensor functions. Each runs the corresponding tape op on
//! constant inputs; use a [`Tape`] directly when gradients are needed.

use crate::error::Result;
use crate::numcore::tape::Tape;
use crate::numcore::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let out = tape.matmul(va, vb)?;
    Ok(tape.tensor(out))
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = tape.softmax(v)?;
    Ok(tape.tensor(out))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
    let out = tape.layer_norm(vx, vg, vb, eps)?;
    Ok(tape.tensor(out))
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = tape.gelu(v);
    tape.tensor(out)
}

pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vk, vb) = (tape.constant(x), tape.constant(kernel), tape.constant(bias));
    let out = tape.conv2d(vx, vk, vb, stride)?;
    Ok(tape.tensor(out))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(logits);
    let out = tape.cross_entropy(v, labels)?;
    Ok(tape.tensor(out))
}
