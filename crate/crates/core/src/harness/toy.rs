//! Moving-bar classification trained end to end through the layer.
//!
//! Head: the flattened surface goes through a single linear map to two
//! logits, softmax cross-entropy on the direction. The LSTM, the SE block and
//! the head are updated together with ADAM.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::encoding::{FeatureConfig, TimeFeature};
use crate::error::{Error, Result};
use crate::events::{EventBatch, EventStream};
use crate::harness::synth::{gen_moving_bar_set, BarDirection, ToyTaskSpec};
use crate::layer::{layer_backward, LayerConfig, MatrixLstm};
use crate::surface::SurfaceTensor;

pub const CLASSES: usize = 2;
pub const MINIBATCH: usize = 8;

/// Layer used for the toy task unless told otherwise: 3 channels, one bin,
/// polarity and absolute timestamps, SE on.
pub fn default_toy_layer() -> LayerConfig {
    let features = FeatureConfig::new(true, &[TimeFeature::TsAbsolute], false).expect("non-empty feature set");
    LayerConfig::new(3, 1, features).with_se(true)
}

/// `logits = W·flatten(surface) + b`, `W` is `CLASSES × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub inputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn init(inputs: usize, seed: u64) -> Self {
        let k = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearHead {
            inputs,
            weights: (0..CLASSES * inputs).map(|_| rng.gen_range(-k..k)).collect(),
            bias: vec![0.0; CLASSES],
        }
    }

    pub fn logits(&self, x: &[f64]) -> [f64; CLASSES] {
        let mut z = [0.0; CLASSES];
        for (k, zk) in z.iter_mut().enumerate() {
            let w = &self.weights[k * self.inputs..(k + 1) * self.inputs];
            *zk = self.bias[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        z
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.weights[..], &self.bias].concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let (w, b) = flat.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }
}

fn softmax(z: &[f64; CLASSES]) -> [f64; CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn argmax(z: &[f64; CLASSES]) -> usize {
    (0..CLASSES).fold(0, |best, k| if z[k] > z[best] { k } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the whole training set after the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ToyReport {
    pub model: MatrixLstm,
    pub head: LinearHead,
    /// Held-out accuracy before any update.
    pub initial_test_accuracy: f64,
    pub history: Vec<EpochStats>,
}

impl ToyReport {
    pub fn test_accuracy(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.test_accuracy).collect()
    }

    pub fn best_test_accuracy(&self) -> f64 {
        self.history.iter().map(|s| s.test_accuracy).fold(self.initial_test_accuracy, f64::max)
    }

    pub fn final_test_accuracy(&self) -> f64 {
        self.history.last().map_or(self.initial_test_accuracy, |s| s.test_accuracy)
    }
}

type Labelled = (EventStream, BarDirection);

/// Mean loss and accuracy of the current parameters on `set`.
fn evaluate(model: &MatrixLstm, head: &LinearHead, set: &[Labelled]) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for part in set.chunks(32) {
        let batch = EventBatch::from_streams(part.iter().map(|(s, _)| s.clone()).collect())?;
        let surface = model.reconstruct(&batch)?;
        for (n, (_, dir)) in part.iter().enumerate() {
            let z = head.logits(surface.sample(n));
            let p = softmax(&z);
            loss -= p[dir.class_index()].max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax(&z) == dir.class_index());
        }
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Trains on `spec.train_size` samples for `epochs` epochs, reporting
/// held-out accuracy on `spec.test_size` fresh samples after every epoch.
pub fn train_toy_classifier(
    spec: &ToyTaskSpec,
    layer: &LayerConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyReport> {
    spec.validate()?;
    layer.validate()?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate {lr} must be finite and non-negative")));
    }
    let train = gen_moving_bar_set(spec, spec.train_size, spec.seed)?;
    let test = gen_moving_bar_set(spec, spec.test_size, spec.seed ^ 0x7e57_7e57)?;

    let mut model = MatrixLstm::new(layer.clone(), seed)?;
    let (oh, ow) = layer.output_dims(spec.height as usize, spec.width as usize)?;
    let inputs = oh * ow * layer.total_channels();
    let mut head = LinearHead::init(inputs, seed ^ 0x4ead);

    let mut lstm_opt = AdamState::new(model.lstm.num_params(), lr);
    let mut se_opt = model.se.as_ref().map(|se| AdamState::new(se.num_params(), lr));
    let mut head_opt = AdamState::new(head.flatten().len(), lr);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial_test_accuracy = evaluate(&model, &head, &test)?.1;
    let mut history = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(MINIBATCH) {
            let batch = EventBatch::from_streams(idx.iter().map(|&i| train[i].0.clone()).collect())?;
            let (surface, tape) = model.forward(&batch)?;
            let scale = 1.0 / idx.len() as f64;
            let mut d_surface = SurfaceTensor::zeros(surface.samples, surface.height, surface.width, surface.channels);
            let mut d_head = vec![0.0; head.weights.len() + CLASSES];
            let mut loss = 0.0;
            for (n, &i) in idx.iter().enumerate() {
                let x = surface.sample(n);
                let z = head.logits(x);
                let p = softmax(&z);
                let y = train[i].1.class_index();
                loss -= p[y].ln();
                let len = x.len();
                let dx = &mut d_surface.data[n * len..(n + 1) * len];
                for k in 0..CLASSES {
                    let dz = (p[k] - if k == y { 1.0 } else { 0.0 }) * scale;
                    d_head[head.weights.len() + k] += dz;
                    let w = &head.weights[k * inputs..(k + 1) * inputs];
                    let dw = &mut d_head[k * inputs..(k + 1) * inputs];
                    for j in 0..inputs {
                        dw[j] += dz * x[j];
                        dx[j] += dz * w[j];
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss became {loss}") });
            }
            let grads = layer_backward(&tape, &d_surface)?;
            let step = |e: Error| Error::Training { epoch, reason: e.to_string() };

            let mut flat = model.lstm.flatten();
            adam_step(&mut flat, &grads.lstm.flatten(), &mut lstm_opt).map_err(step)?;
            model.lstm.assign_flat(&flat)?;
            if let (Some(se), Some(g), Some(opt)) = (model.se.as_mut(), grads.se.as_ref(), se_opt.as_mut()) {
                let mut flat = se.flatten();
                adam_step(&mut flat, &g.flatten(), opt).map_err(step)?;
                se.assign_flat(&flat)?;
            }
            let mut flat = head.flatten();
            adam_step(&mut flat, &d_head, &mut head_opt).map_err(step)?;
            head.assign_flat(&flat);
        }
        let (train_loss, train_accuracy) = evaluate(&model, &head, &train)?;
        if !train_loss.is_finite() {
            return Err(Error::Training { epoch, reason: format!("training loss became {train_loss}") });
        }
        let test_accuracy = evaluate(&model, &head, &test)?.1;
        history.push(EpochStats { epoch, train_loss, train_accuracy, test_accuracy });
    }
    Ok(ToyReport { model, head, initial_test_accuracy, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(train: usize, test: usize) -> ToyTaskSpec {
        ToyTaskSpec { width: 8, height: 8, bar_height: 4, sweep: 4, train_size: train, test_size: test, ..ToyTaskSpec::default() }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let r = train_toy_classifier(&small_spec(16, 10), &default_toy_layer(), 3, 0.0, 5).unwrap();
        assert_eq!(r.history.len(), 3);
        assert!(r.history.iter().all(|s| s.test_accuracy == r.initial_test_accuracy));
        assert!(r.history.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
        assert_eq!(r.model, MatrixLstm::new(default_toy_layer(), 5).unwrap());
    }

    #[test]
    fn single_example_is_memorized() {
        let r = train_toy_classifier(&small_spec(1, 4), &default_toy_layer(), 60, 1e-2, 1).unwrap();
        assert_eq!(r.history.last().unwrap().train_accuracy, 1.0);
        assert!(r.history.last().unwrap().train_loss < r.history[0].train_loss);
    }

    #[test]
    fn bad_learning_rate_is_rejected() {
        assert!(train_toy_classifier(&small_spec(2, 2), &default_toy_layer(), 1, f64::NAN, 0).is_err());
    }
}
