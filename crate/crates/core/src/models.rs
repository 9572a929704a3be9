//! Multilayer perceptron classifiers over `f64` features.
//!
//! A model is a stack of affine layers with relu between them and raw logits
//! at the output. The same parameters drive two forward paths: a plain
//! evaluation for calibration and metrics, and a taped evaluation that
//! records onto an autodiff [`Tape`] so attacks can differentiate logits
//! with respect to the input and training can differentiate losses with
//! respect to the parameters.
//!
//! Models persist as versioned JSON. Floats are written with 17 significant
//! digits, which round-trips every `f64` exactly: a saved model reloads to
//! bitwise-identical parameters.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config invalid: {0}")]
    InvalidConfig(String),
    #[error("layer {layer}: shape {got:?} does not match config {expected:?}")]
    LayerShape {
        layer: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("input has dimension {got}, model expects {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("class {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Architecture: input width, hidden widths, and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl MlpConfig {
    /// A model with no hidden layers: logits are affine in the input.
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "input_dim must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(
                "num_classes must be at least 2".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::InvalidConfig(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Layer widths from input to output, e.g. `[2, 16, 4]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.num_classes);
        dims
    }
}

/// One affine layer: weight `[out, in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Feedforward classifier with relu hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
}

/// Parameter nodes recorded by [`Mlp::record`], plus the logits output.
pub struct TapedModel {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub logits: NodeId,
}

impl TapedModel {
    /// Weight and bias nodes interleaved per layer, the order in which
    /// [`Mlp::apply_param_step`] consumes gradients.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut nodes = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            nodes.push(*w);
            nodes.push(*b);
        }
        nodes
    }
}

impl Mlp {
    /// Glorot-uniform weights (drawn row-major per layer) and zero biases.
    pub fn glorot(config: MlpConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let dims = config.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            layers.push(Layer {
                weight: Tensor::new(vec![fan_out, fan_in], weight)?,
                bias: Tensor::new(vec![fan_out], vec![0.0; fan_out])?,
            });
        }
        Ok(Self { config, layers })
    }

    /// Assemble a model from explicit parameters, validating shapes.
    pub fn from_layers(config: MlpConfig, layers: Vec<Layer>) -> Result<Self, ModelError> {
        config.validate()?;
        let dims = config.dims();
        if layers.len() != dims.len() - 1 {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} layers, got {}",
                dims.len() - 1,
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let expected = vec![dims[l + 1], dims[l]];
            if layer.weight.shape() != expected.as_slice() {
                return Err(ModelError::LayerShape {
                    layer: l,
                    got: layer.weight.shape().to_vec(),
                    expected,
                });
            }
            if layer.bias.shape() != [dims[l + 1]] {
                return Err(ModelError::LayerShape {
                    layer: l,
                    got: layer.bias.shape().to_vec(),
                    expected: vec![dims[l + 1]],
                });
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Plain forward pass producing the logit vector.
    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.config.input_dim {
            return Err(ModelError::InputDim {
                got: x.len(),
                expected: self.config.input_dim,
            });
        }
        let mut act = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = layer.bias.len();
            let cols = act.len();
            let mut next = vec![0.0; rows];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut acc = layer.bias.data()[r];
                let row = &layer.weight.data()[r * cols..(r + 1) * cols];
                for (w, a) in row.iter().zip(&act) {
                    acc += w * a;
                }
                *slot = if l < last { acc.max(0.0) } else { acc };
            }
            act = next;
        }
        Ok(act)
    }

    /// Index of the largest logit, ties to the lower class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        let logits = self.forward_logits(x)?;
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Record the forward pass on a tape, starting from an input node the
    /// caller already created. Parameters are recorded as leaves so the
    /// reverse sweep can report their gradients alongside the input's.
    pub fn record(&self, tape: &mut Tape, x: NodeId) -> Result<TapedModel, ModelError> {
        if tape.value(x).shape() != [self.config.input_dim] {
            return Err(ModelError::InputDim {
                got: tape.value(x).len(),
                expected: self.config.input_dim,
            });
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut act = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            weights.push(w);
            biases.push(b);
            let z = tape.affine(w, b, act)?;
            act = if l < last { tape.relu(z)? } else { z };
        }
        Ok(TapedModel {
            weights,
            biases,
            logits: act,
        })
    }

    /// Add `scale * grad` to every parameter. `grads` must hold one tensor
    /// per layer parameter in [`TapedModel::param_nodes`] order.
    pub fn apply_param_step(&mut self, grads: &[Tensor], scale: f64) -> Result<(), ModelError> {
        if grads.len() != self.layers.len() * 2 {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} gradient tensors, got {}",
                self.layers.len() * 2,
                grads.len()
            )));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let gw = &grads[2 * l];
            let gb = &grads[2 * l + 1];
            if gw.shape() != layer.weight.shape() || gb.shape() != layer.bias.shape() {
                return Err(ModelError::LayerShape {
                    layer: l,
                    got: gw.shape().to_vec(),
                    expected: layer.weight.shape().to_vec(),
                });
            }
            for (p, g) in layer.weight.data_mut().iter_mut().zip(gw.data()) {
                *p += scale * g;
            }
            for (p, g) in layer.bias.data_mut().iter_mut().zip(gb.data()) {
                *p += scale * g;
            }
        }
        Ok(())
    }

    /// Serialize to versioned JSON with exact-round-trip floats.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n  \"format_version\": 1,\n  \"config\": ");
        out.push_str(&serde_json::to_string(&self.config).expect("config serializes"));
        out.push_str(",\n  \"layers\": [\n");
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = layer.bias.len();
            let cols = layer.weight.len() / rows;
            out.push_str("    {\"weight\": [");
            for r in 0..rows {
                if r > 0 {
                    out.push_str(", ");
                }
                out.push('[');
                for c in 0..cols {
                    if c > 0 {
                        out.push_str(", ");
                    }
                    push_f64(&mut out, layer.weight.data()[r * cols + c]);
                }
                out.push(']');
            }
            out.push_str("], \"bias\": [");
            for (i, &b) in layer.bias.data().iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                push_f64(&mut out, b);
            }
            out.push_str("]}");
            if l + 1 < self.layers.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != 1 {
            return Err(ModelError::FormatVersion(file.format_version));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    weight: Tensor::matrix(&l.weight)?,
                    bias: Tensor::vector(l.bias)?,
                })
            })
            .collect::<Result<Vec<_>, AutodiffError>>()?;
        Self::from_layers(file.config, layers)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// 17 significant digits: enough to reproduce any `f64` bit pattern.
fn push_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

/// Cross-entropy of a logit vector against a hard label, computed as
/// log-sum-exp(f) − f_y with a max shift.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln() - logits[label])
}

/// Record cross-entropy on a tape; gradients reach the logits (softmax
/// minus the one-hot label) and everything upstream of them.
pub fn cross_entropy_node(
    tape: &mut Tape,
    logits: NodeId,
    label: usize,
) -> Result<NodeId, ModelError> {
    let k = tape.value(logits).len();
    if label >= k {
        return Err(ModelError::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    let lse = tape.log_sum_exp(logits)?;
    let fy = tape.index(logits, label)?;
    Ok(tape.sub(lse, fy)?)
}

/// Forward pass over many rows at once.
pub fn batch_logits(model: &Mlp, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    features.iter().map(|x| model.forward_logits(x)).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: MlpConfig,
    layers: Vec<LayerFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream_rng;

    /// Four-class model on one feature: logits [2-x, 3+x, 2+x/2, 1-x/5].
    fn fixture_linear() -> Mlp {
        Mlp::from_layers(
            MlpConfig::linear(1, 4),
            vec![Layer {
                weight: Tensor::matrix(&[vec![-1.0], vec![1.0], vec![0.5], vec![-0.2]]).unwrap(),
                bias: Tensor::vector(vec![5.0, 3.0, 2.0, 1.0]).unwrap(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn linear_fixture_logits() {
        let model = fixture_linear();
        assert_eq!(
            model.forward_logits(&[2.0]).unwrap(),
            vec![3.0, 5.0, 3.0, 0.6]
        );
        assert_eq!(
            model.forward_logits(&[2.5]).unwrap(),
            vec![2.5, 5.5, 3.25, 0.5]
        );
    }

    #[test]
    fn predict_breaks_ties_low() {
        let model = fixture_linear();
        // At x = 2 classes 0 and 2 tie at 3.0 but class 1 wins outright.
        assert_eq!(model.predict(&[2.0]).unwrap(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::linear(0, 4).validate().is_err());
        assert!(MlpConfig::linear(2, 1).validate().is_err());
        assert!(MlpConfig {
            input_dim: 2,
            hidden: vec![0],
            num_classes: 3
        }
        .validate()
        .is_err());
        assert!(MlpConfig::linear(2, 2).validate().is_ok());
    }

    #[test]
    fn glorot_is_seed_deterministic() {
        let config = MlpConfig {
            input_dim: 3,
            hidden: vec![8],
            num_classes: 5,
        };
        let a = Mlp::glorot(config.clone(), &mut stream_rng(9, "init", 0)).unwrap();
        let b = Mlp::glorot(config, &mut stream_rng(9, "init", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glorot_biases_are_zero() {
        let config = MlpConfig {
            input_dim: 3,
            hidden: vec![4],
            num_classes: 2,
        };
        let model = Mlp::glorot(config, &mut stream_rng(1, "init", 0)).unwrap();
        for layer in model.layers() {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let config = MlpConfig {
            input_dim: 2,
            hidden: vec![7, 5],
            num_classes: 3,
        };
        let model = Mlp::glorot(config, &mut stream_rng(4, "init", 0)).unwrap();
        let x = vec![0.4, -1.3];
        let plain = model.forward_logits(&x).unwrap();

        let mut tape = Tape::new();
        let xn = tape.leaf(Tensor::vector(x).unwrap());
        let taped = model.record(&mut tape, xn).unwrap();
        assert_eq!(tape.value(taped.logits).data(), plain.as_slice());
    }

    #[test]
    fn input_gradient_of_linear_logit_is_weight_row() {
        let model = fixture_linear();
        let mut tape = Tape::new();
        let xn = tape.leaf(Tensor::vector(vec![2.0]).unwrap());
        let taped = model.record(&mut tape, xn).unwrap();
        let f1 = tape.index(taped.logits, 1).unwrap();
        let grad = tape.backward(f1, &[xn]).unwrap();
        assert_eq!(grad.grad(xn).unwrap().data(), &[1.0]);
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let config = MlpConfig {
            input_dim: 2,
            hidden: vec![6],
            num_classes: 4,
        };
        let model = Mlp::glorot(config, &mut stream_rng(11, "init", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = Mlp::load(&path).unwrap();
        assert_eq!(model, loaded);
        let x = vec![0.123456789, -0.987654321];
        let a = model.forward_logits(&x).unwrap();
        let b = loaded.forward_logits(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn load_rejects_future_version() {
        let text = r#"{"format_version": 2, "config": {"input_dim": 1, "hidden": [], "num_classes": 2}, "layers": []}"#;
        assert!(matches!(
            Mlp::from_json(text),
            Err(ModelError::FormatVersion(2))
        ));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let text = r#"{"format_version": 1, "config": {"input_dim": 2, "hidden": [], "num_classes": 2}, "layers": [{"weight": [[1.0]], "bias": [0.0]}]}"#;
        assert!(Mlp::from_json(text).is_err());
    }

    #[test]
    fn load_rejects_unknown_fields() {
        let text = r#"{"format_version": 1, "config": {"input_dim": 1, "hidden": [], "num_classes": 2}, "layers": [], "extra": 1}"#;
        assert!(matches!(Mlp::from_json(text), Err(ModelError::Parse(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let ce = cross_entropy(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_node_matches_scalar_bitwise() {
        let logits = [0.3, -1.7, 2.2];
        let mut tape = Tape::new();
        let ln = tape.leaf(Tensor::vector(logits.to_vec()).unwrap());
        let ce = cross_entropy_node(&mut tape, ln, 1).unwrap();
        assert_eq!(
            tape.value_scalar(ce).unwrap().to_bits(),
            cross_entropy(&logits, 1).unwrap().to_bits()
        );
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.5, -0.25, 1.0];
        let mut tape = Tape::new();
        let ln = tape.leaf(Tensor::vector(logits.to_vec()).unwrap());
        let ce = cross_entropy_node(&mut tape, ln, 0).unwrap();
        let grads = tape.backward(ce, &[ln]).unwrap();

        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
        for (k, g) in grads.grad(ln).unwrap().data().iter().enumerate() {
            let softmax = (logits[k] - m).exp() / z;
            let expected = softmax - if k == 0 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-12, "class {k}: {g} vs {expected}");
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            cross_entropy(&[1.0, 2.0], 2),
            Err(ModelError::LabelOutOfRange {
                label: 2,
                num_classes: 2
            })
        ));
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let model = fixture_linear();
        assert!(matches!(
            model.forward_logits(&[1.0, 2.0]),
            Err(ModelError::InputDim {
                got: 2,
                expected: 1
            })
        ));
    }
}
