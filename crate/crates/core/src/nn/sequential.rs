use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::{
    batchnorm_backward, batchnorm_forward, conv1d_backward, conv1d_forward, conv2d_backward,
    conv2d_forward, dropout_backward, dropout_forward, linear_backward, linear_forward,
    relu_backward, relu_forward, update_running_stats, BatchNormCache, LayerState, Mode,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d,
    Conv1d,
    Linear,
    BatchNorm,
    Relu,
    Dropout(f64),
    /// Reshape every batch item to the given per-item shape.
    Reshape(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind,
    pub state: Option<LayerState<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn parametric(name: impl Into<String>, kind: LayerKind, state: LayerState<T>) -> Self {
        Layer { name: name.into(), kind, state: Some(state) }
    }

    pub fn stateless(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer { name: name.into(), kind, state: None }
    }
}

#[derive(Debug, Clone)]
enum Saved<T> {
    Input(Tensor<T>),
    BatchNorm(BatchNormCache<T>),
    Dropout(Option<Vec<T>>),
    Shape(Vec<usize>),
}

/// Forward-pass record consumed by [`Sequential::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    saved: Vec<Saved<T>>,
    shapes: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Tape<T> {
    /// Output shape after each layer, in order.
    pub fn shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// Hash of every ReLU's active/inactive pattern. Two forward passes with
    /// the same pattern lie on the same smooth piece of the network.
    pub fn relu_pattern(&self, layers: &[Layer<T>]) -> u64 {
        let mut h = DefaultHasher::new();
        for (layer, saved) in layers.iter().zip(&self.saved) {
            if let (LayerKind::Relu, Saved::Input(x)) = (&layer.kind, saved) {
                for v in x.data() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

/// Per-parametric-layer gradients, in layer order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Flat view in the same order as [`Sequential::params_mut`].
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.state.as_ref()).map(LayerState::param_count).sum()
    }

    pub fn states(&self) -> impl Iterator<Item = (&str, &LayerState<T>)> {
        self.layers.iter().filter_map(|l| l.state.as_ref().map(|s| (l.name.as_str(), s)))
    }

    pub fn states_mut(&mut self) -> impl Iterator<Item = (&str, &mut LayerState<T>)> {
        self.layers.iter_mut().filter_map(|l| l.state.as_mut().map(|s| (l.name.as_str(), s)))
    }

    /// Weight then bias of each parametric layer, in layer order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().filter_map(|l| l.state.as_mut()).flat_map(|s| {
            let LayerState { weight, bias, .. } = s;
            [weight.data_mut(), bias.data_mut()]
        })
    }

    /// Forward pass. Batch-norm running statistics are not touched; call
    /// [`Sequential::commit_running_stats`] with the tape after a
    /// train-mode step.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let mut x = input;
        let mut tape = Tape { saved: Vec::with_capacity(self.layers.len()), shapes: vec![] };
        for layer in &self.layers {
            let name = layer.name.as_str();
            let (out, saved) = match (&layer.kind, layer.state.as_ref()) {
                (LayerKind::Conv2d, Some(s)) => (conv2d_forward(&x, &s.weight, &s.bias)?, Saved::Input(x)),
                (LayerKind::Conv1d, Some(s)) => (conv1d_forward(&x, &s.weight, &s.bias)?, Saved::Input(x)),
                (LayerKind::Linear, Some(s)) => (linear_forward(&x, &s.weight, &s.bias)?, Saved::Input(x)),
                (LayerKind::BatchNorm, Some(s)) => {
                    let LayerState { weight, bias, running } = s;
                    let (rm, rv) = running
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument(format!("{name}: missing running stats")))?;
                    let (out, cache) = batchnorm_forward(name, &x, weight, bias, rm, rv, mode)?;
                    (out, Saved::BatchNorm(cache))
                }
                (LayerKind::Relu, None) => (relu_forward(&x), Saved::Input(x)),
                (LayerKind::Dropout(rate), None) => {
                    let (out, mask) = dropout_forward(&x, *rate, mode, rng)?;
                    (out, Saved::Dropout(mask))
                }
                (LayerKind::Reshape(item), None) => {
                    let shape = x.shape().to_vec();
                    let mut target = vec![x.batch()];
                    target.extend_from_slice(item);
                    (x.reshape(&target)?, Saved::Shape(shape))
                }
                (kind, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: layer kind {kind:?} has inconsistent state"
                    )))
                }
            };
            tape.shapes.push((layer.name.clone(), out.shape().to_vec()));
            tape.saved.push(saved);
            x = out;
        }
        Ok((x, tape))
    }

    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        for (layer, saved) in self.layers.iter_mut().zip(&tape.saved) {
            if let (Some(state), Saved::BatchNorm(cache)) = (layer.state.as_mut(), saved) {
                if let Some((rm, rv)) = state.running_mut() {
                    update_running_stats(rm, rv, cache);
                }
            }
        }
    }

    pub fn backward(&self, tape: &Tape<T>, grad_out: Tensor<T>, need_input_grad: bool) -> Result<Gradients<T>> {
        let mut g = grad_out;
        let mut layer_grads = vec![];
        let first_param = self.layers.iter().position(|l| l.state.is_some());
        for (idx, (layer, saved)) in self.layers.iter().zip(&tape.saved).enumerate().rev() {
            // Nothing upstream of the first parametric layer needs a gradient.
            let need_input = need_input_grad || first_param.is_some_and(|f| idx > f);
            g = match (&layer.kind, layer.state.as_ref(), saved) {
                (LayerKind::Conv2d, Some(s), Saved::Input(x)) => {
                    let cg = conv2d_backward(x, &s.weight, &g, need_input)?;
                    layer_grads.push((cg.weight, cg.bias));
                    match cg.input {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                (LayerKind::Conv1d, Some(s), Saved::Input(x)) => {
                    let cg = conv1d_backward(x, &s.weight, &g, need_input)?;
                    layer_grads.push((cg.weight, cg.bias));
                    match cg.input {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                (LayerKind::Linear, Some(s), Saved::Input(x)) => {
                    let lg = linear_backward(x, &s.weight, &g)?;
                    layer_grads.push((lg.weight, lg.bias));
                    lg.input
                }
                (LayerKind::BatchNorm, Some(s), Saved::BatchNorm(cache)) => {
                    let bg = batchnorm_backward(&s.weight, cache, &g)?;
                    layer_grads.push((bg.gamma, bg.beta));
                    bg.input
                }
                (LayerKind::Relu, None, Saved::Input(x)) => relu_backward(x, &g)?,
                (LayerKind::Dropout(_), None, Saved::Dropout(mask)) => dropout_backward(mask.as_deref(), &g),
                (LayerKind::Reshape(_), None, Saved::Shape(shape)) => g.reshape(shape)?,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{}: tape does not match layer",
                        layer.name
                    )))
                }
            };
        }
        layer_grads.reverse();
        let reached_input = layer_grads.len() == self.states().count() && need_input_grad;
        Ok(Gradients { layers: layer_grads, input: reached_input.then_some(g) })
    }
}
