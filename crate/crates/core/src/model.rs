//! Modality encoders, the EEG task head and the two reliability heads.
//!
//! Every encoder is an MLP `input → hidden… → embedding` with relu on the
//! hidden layers and a linear embedding layer. Heads are single linear maps
//! from the embedding: softmax for the task head, sigmoid for reliability.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Tape, Tensor, Var};
use crate::seeding::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Face,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Eeg => "eeg",
            Modality::Face => "face",
        })
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{modality} input has width {found}, encoder expects {expected}")]
    InputWidth {
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("embedding has width {found}, expected {expected}")]
    EmbeddingWidth { expected: usize, found: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub eeg_input_dim: usize,
    pub face_input_dim: usize,
    /// Hidden widths shared by both encoders; empty means a linear encoder.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn new(eeg_input_dim: usize, face_input_dim: usize, classes: usize) -> Self {
        Self {
            eeg_input_dim,
            face_input_dim,
            hidden: vec![32],
            embedding_dim: 16,
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [self.eeg_input_dim, self.face_input_dim, self.embedding_dim];
        if widths.iter().chain(&self.hidden).any(|&w| w == 0) {
            return Err(ModelError::Config("all layer widths must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Eeg => self.eeg_input_dim,
            Modality::Face => self.face_input_dim,
        }
    }

    fn encoder_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn encoder_widths(&self, modality: Modality) -> Vec<usize> {
        let mut widths = vec![self.input_dim(modality)];
        widths.extend(&self.hidden);
        widths.push(self.embedding_dim);
        widths
    }

    fn encoder_offset(&self, modality: Modality) -> usize {
        match modality {
            Modality::Eeg => 0,
            Modality::Face => 2 * self.encoder_layers(),
        }
    }

    fn task_offset(&self) -> usize {
        4 * self.encoder_layers()
    }

    fn reliability_offset(&self, modality: Modality) -> usize {
        self.task_offset()
            + match modality {
                Modality::Eeg => 2,
                Modality::Face => 4,
            }
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for m in [Modality::Eeg, Modality::Face] {
            for (l, pair) in self.encoder_widths(m).windows(2).enumerate() {
                out.push((format!("enc.{m}.{l}.w"), (pair[0], pair[1])));
                out.push((format!("enc.{m}.{l}.b"), (1, pair[1])));
            }
        }
        let d = self.embedding_dim;
        out.push(("head.task.w".into(), (d, self.classes)));
        out.push(("head.task.b".into(), (1, self.classes)));
        for m in [Modality::Eeg, Modality::Face] {
            out.push((format!("head.rel.{m}.w"), (d, 1)));
            out.push((format!("head.rel.{m}.b"), (1, 1)));
        }
        out
    }
}

/// All trainable tensors, stored in [`ModelConfig::layout`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeding::rng(seed, Stream::Init, 0);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, (rows, cols))| {
                if name.ends_with(".b") {
                    Tensor::zeros(rows, cols)
                } else {
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
                    Tensor::new(rows, cols, data).expect("layout shape")
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, (r, c))| Tensor::zeros(r, c))
            .collect();
        Ok(Self { config, tensors })
    }

    /// Assembles params from named tensors; names and shapes must match the layout exactly.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, tensor)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {want_name} {want_shape:?}, found {name} {:?}",
                    tensor.shape()
                )));
            }
            if !tensor.is_finite() {
                return Err(ModelError::Checkpoint(format!("{name} has non-finite values")));
            }
            tensors.push(tensor);
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.config
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.config.layout().iter().position(|(n, _)| n == name)?;
        Some(&mut self.tensors[idx])
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            config: &self.config,
            vars,
        }
    }

    /// Class probabilities from EEG features alone.
    pub fn predict_proba(&self, x_eeg: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let model = self.bind(&mut tape, false);
        let x = tape.constant(x_eeg.clone());
        let z = model.encode(&mut tape, Modality::Eeg, x)?;
        let p = model.predict(&mut tape, z)?;
        Ok(tape.value(p).clone())
    }

    pub fn embed(&self, modality: Modality, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let model = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let z = model.encode(&mut tape, modality, x)?;
        Ok(tape.value(z).clone())
    }

    /// Reliability estimates computed from raw features of one modality.
    pub fn reliability(&self, modality: Modality, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let model = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let z = model.encode(&mut tape, modality, x)?;
        let r = model.estimate_reliability(&mut tape, modality, z)?;
        Ok(tape.value(r).clone())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .named()
                .map(|(name, t)| NamedTensor {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let file: Checkpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported container {} v{}",
                file.format, file.version
            )));
        }
        let named = file
            .tensors
            .into_iter()
            .map(|t| Ok((t.name, Tensor::new(t.rows, t.cols, t.data)?)))
            .collect::<Result<Vec<_>, GradError>>()?;
        Self::from_named(file.config, named)
    }
}

const CHECKPOINT_FORMAT: &str = "cmal-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Model parameters recorded on a tape.
pub struct BoundModel<'a> {
    config: &'a ModelConfig,
    vars: Vec<Var>,
}

impl BoundModel<'_> {
    /// Tape handles in layout order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn linear(&self, tape: &mut Tape, x: Var, offset: usize) -> Result<Var, GradError> {
        let xw = tape.matmul(x, self.vars[offset])?;
        tape.add(xw, self.vars[offset + 1])
    }

    fn check_embedding(&self, tape: &Tape, z: Var) -> Result<(), ModelError> {
        let found = tape.value(z).cols();
        if found != self.config.embedding_dim {
            return Err(ModelError::EmbeddingWidth {
                expected: self.config.embedding_dim,
                found,
            });
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, modality: Modality, x: Var) -> Result<Var, ModelError> {
        let expected = self.config.input_dim(modality);
        let found = tape.value(x).cols();
        if found != expected {
            return Err(ModelError::InputWidth {
                modality,
                expected,
                found,
            });
        }
        let offset = self.config.encoder_offset(modality);
        let layers = self.config.encoder_layers();
        let mut h = x;
        for l in 0..layers {
            h = self.linear(tape, h, offset + 2 * l)?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn task_logits(&self, tape: &mut Tape, z_eeg: Var) -> Result<Var, ModelError> {
        self.check_embedding(tape, z_eeg)?;
        Ok(self.linear(tape, z_eeg, self.config.task_offset())?)
    }

    /// Softmax class probabilities from the EEG embedding.
    pub fn predict(&self, tape: &mut Tape, z_eeg: Var) -> Result<Var, ModelError> {
        let logits = self.task_logits(tape, z_eeg)?;
        Ok(tape.row_softmax(logits))
    }

    /// Sigmoid reliability per sample (`N×1`), read from the unnormalized embedding.
    pub fn estimate_reliability(
        &self,
        tape: &mut Tape,
        modality: Modality,
        z: Var,
    ) -> Result<Var, ModelError> {
        self.check_embedding(tape, z)?;
        let logit = self.linear(tape, z, self.config.reliability_offset(modality))?;
        Ok(tape.sigmoid(logit))
    }
}
