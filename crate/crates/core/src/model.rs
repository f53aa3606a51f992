//! The convolutional heart-rate network in its three variants.
//!
//! Feature extractor: five valid-padding 2-D convolutions (16 channels,
//! kernels 5×11 ×4 then 2×11), each followed by ReLU and 2-D batch norm,
//! shrinking an 18×64 window to 16×1×14. Head: FC 224→60 (ReLU, BN,
//! dropout) then FC 60→`fc_out` with BN. The filtering variant widens the
//! head to 134 outputs and refines them with three k=3 1-D convolutions
//! (each with ReLU and BN) down to the 128-class pseudo-spectrum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Layer, LayerKind, LayerState, Mode, Sequential, Tape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HR_MIN_BPM: f64 = 40.0;
pub const HR_MAX_BPM: f64 = 125.0;
pub const N_CLASSES: usize = 128;
pub const INPUT_ROWS: usize = 18;
pub const INPUT_FRAMES: usize = 64;
pub const CONV_CHANNELS: usize = 16;
pub const FC_HIDDEN: usize = 60;
pub const FILTER_HEAD: usize = 134;
pub const DROPOUT_RATE: f64 = 0.5;

/// Equal-width partition of the admissible HR range into classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassGrid {
    pub hr_min: f64,
    pub hr_max: f64,
    pub n_classes: usize,
}

impl Default for ClassGrid {
    fn default() -> Self {
        ClassGrid { hr_min: HR_MIN_BPM, hr_max: HR_MAX_BPM, n_classes: N_CLASSES }
    }
}

impl ClassGrid {
    /// bpm per class; 85/128 for the default grid.
    pub fn step(&self) -> f64 {
        (self.hr_max - self.hr_min) / self.n_classes as f64
    }

    pub fn contains(&self, hr: f64) -> bool {
        (self.hr_min..=self.hr_max).contains(&hr)
    }

    pub fn label_of(&self, hr: f64) -> Result<usize> {
        if !self.contains(hr) {
            return Err(Error::Data(format!(
                "HR {hr} bpm outside admissible range [{}, {}]",
                self.hr_min, self.hr_max
            )));
        }
        let raw = ((hr - self.hr_min) / self.step()).floor() as usize;
        Ok(raw.min(self.n_classes - 1))
    }

    /// Centre of a class in bpm.
    pub fn hr_of(&self, label: usize) -> f64 {
        self.hr_min + (label as f64 + 0.5) * self.step()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub with_filter: bool,
}

impl ModelSpec {
    pub const REGRESSION: ModelSpec = ModelSpec { task: Task::Regression, with_filter: false };
    pub const CLASSIFICATION: ModelSpec = ModelSpec { task: Task::Classification, with_filter: false };
    pub const FILTERED: ModelSpec = ModelSpec { task: Task::Classification, with_filter: true };

    pub fn validate(&self) -> Result<()> {
        if self.with_filter && self.task == Task::Regression {
            return Err(Error::Config("the filtering stack requires the classification task".into()));
        }
        Ok(())
    }

    pub fn conv_channels(&self) -> usize {
        CONV_CHANNELS
    }

    pub fn fc_hidden(&self) -> usize {
        FC_HIDDEN
    }

    /// Width of the second fully connected layer.
    pub fn fc_out(&self) -> usize {
        match (self.task, self.with_filter) {
            (Task::Regression, _) => 1,
            (Task::Classification, false) => N_CLASSES,
            (Task::Classification, true) => FILTER_HEAD,
        }
    }

    /// Width of the network output.
    pub fn output_len(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification => N_CLASSES,
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.task, self.with_filter) {
            (Task::Regression, _) => "SE",
            (Task::Classification, false) => "CE/CL",
            (Task::Classification, true) => "CL+F",
        }
    }
}

/// One HR estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Class index for classification models.
    pub label: Option<usize>,
    pub hr_bpm: f64,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub net: Sequential<T>,
}

fn conv_block<T: Scalar>(layers: &mut Vec<Layer<T>>, name: &str, kind: LayerKind, state: LayerState<T>, channels: usize) {
    layers.push(Layer::parametric(name, kind, state));
    layers.push(Layer::stateless(format!("{name}.relu"), LayerKind::Relu));
    layers.push(Layer::parametric(format!("{name}.bn"), LayerKind::BatchNorm, LayerState::batchnorm(channels)));
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights, zero biases, γ=1, β=0, all drawn from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.conv_channels();
        let mut layers = vec![];
        for (i, (cin, kh)) in [(1, 5), (c, 5), (c, 5), (c, 5), (c, 2)].into_iter().enumerate() {
            let state = LayerState::conv2d(cin, c, kh, 11, &mut rng);
            conv_block(&mut layers, &format!("conv{}", i + 1), LayerKind::Conv2d, state, c);
        }
        let flat = c * 14;
        layers.push(Layer::stateless("flatten", LayerKind::Reshape(vec![flat])));

        let hidden = spec.fc_hidden();
        conv_block(&mut layers, "fc1", LayerKind::Linear, LayerState::linear(flat, hidden, &mut rng), hidden);
        layers.push(Layer::stateless("fc1.dropout", LayerKind::Dropout(DROPOUT_RATE)));

        let out = spec.fc_out();
        layers.push(Layer::parametric("fc2", LayerKind::Linear, LayerState::linear(hidden, out, &mut rng)));
        layers.push(Layer::parametric("fc2.bn", LayerKind::BatchNorm, LayerState::batchnorm(out)));

        if spec.with_filter {
            layers.push(Layer::stateless("fc2.dropout", LayerKind::Dropout(DROPOUT_RATE)));
            layers.push(Layer::stateless("unsqueeze", LayerKind::Reshape(vec![1, out])));
            for (i, (cin, cout)) in [(1, c), (c, c), (c, 1)].into_iter().enumerate() {
                let state = LayerState::conv1d(cin, cout, 3, &mut rng);
                conv_block(&mut layers, &format!("filter{}", i + 1), LayerKind::Conv1d, state, cout);
            }
            layers.push(Layer::stateless("squeeze", LayerKind::Reshape(vec![N_CLASSES])));
        }
        Ok(Model { spec, seed, net: Sequential::new(layers) })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        match batch.shape() {
            &[_, 1, INPUT_ROWS, INPUT_FRAMES] => Ok(()),
            s => Err(Error::Shape(format!(
                "model input must be [B,1,{INPUT_ROWS},{INPUT_FRAMES}] \
                 (chain 18x64 -> 14x54 -> 10x44 -> 6x34 -> 2x24 -> 1x14 -> 224 -> 60 -> {}), got {s:?}",
                self.spec.fc_out()
            ))),
        }
    }

    /// Raw network outputs `[B, output_len]` plus the tape for backward.
    pub fn forward<R: Rng + ?Sized>(&self, batch: Tensor<T>, mode: Mode, rng: &mut R) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(&batch)?;
        self.net.forward(batch, mode, rng)
    }

    /// Eval-mode forward pass without a tape.
    pub fn infer(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        // Dropout is the identity in eval mode, so the rng is never drawn.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, Mode::Eval, &mut rng)?.0)
    }

    pub fn backward(&self, tape: &Tape<T>, grad_out: Tensor<T>) -> Result<Gradients<T>> {
        self.net.backward(tape, grad_out, false)
    }

    /// Argmax class centre (classification) or the raw output in bpm (regression).
    pub fn predict(&self, batch: Tensor<T>, grid: &ClassGrid) -> Result<Vec<Prediction>> {
        let out = self.infer(batch)?;
        Ok(decode_outputs(&out, self.spec.task, grid))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .net
            .layers
            .iter()
            .map(|l| Layer { name: l.name.clone(), kind: l.kind.clone(), state: l.state.as_ref().map(LayerState::cast) })
            .collect();
        Model { spec: self.spec, seed: self.seed, net: Sequential::new(layers) }
    }
}

pub fn decode_outputs<T: Scalar>(out: &Tensor<T>, task: Task, grid: &ClassGrid) -> Vec<Prediction> {
    (0..out.batch())
        .map(|b| {
            let row = out.item(b);
            match task {
                Task::Classification => {
                    let label = argmax(row);
                    Prediction { label: Some(label), hr_bpm: grid.hr_of(label) }
                }
                Task::Regression => Prediction { label: None, hr_bpm: row[0].to_f64_lossy() },
            }
        })
        .collect()
}
