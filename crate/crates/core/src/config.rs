//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`raa.window = 5`). Later assignments win, so `--set` overrides can be
//! appended to a file's contents.

use std::path::Path;

use crate::error::{RaaError, Result};
use crate::losses::PairSemantics;
use crate::model::{ConvStage, ModelConfig};
use crate::raa::MlpActivation;
use crate::trainer::TrainConfig;

pub const KEYS: [&str; 24] = [
    "seed",
    "data.n",
    "data.size",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "train.folds",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "loss.lambda",
    "loss.m1",
    "loss.m2",
    "loss.pair_semantics",
    "raa.window",
    "raa.include_self",
    "raa.mlp_hidden",
    "raa.mlp_activation",
    "raa.gamma_init",
    "raa.d_proj",
    "raa.batch_norm",
    "model.head_hidden",
    "backbone.channels",
    "backbone.strides",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Number of synthetic samples.
    pub n: usize,
    /// Image side length; also the backbone input size.
    pub size: usize,
    pub model: ModelConfig,
    /// `train.seed` seeds data generation, fold assignment, init and shuffling.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 200,
            size: 64,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| RaaError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "seed" => t.seed = num(key, value)?,
            "data.n" => self.n = num(key, value)?,
            "data.size" => self.size = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.folds" => t.folds = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.eps" => t.adam_eps = num(key, value)?,
            "loss.lambda" => t.loss.lambda = num(key, value)?,
            "loss.m1" => t.loss.m1 = num(key, value)?,
            "loss.m2" => t.loss.m2 = num(key, value)?,
            "loss.pair_semantics" => t.loss.pair_semantics = value.parse::<PairSemantics>()?,
            "raa.window" => m.raa.window = num(key, value)?,
            "raa.include_self" => m.raa.include_self = num(key, value)?,
            "raa.mlp_hidden" => m.raa.mlp_hidden = num(key, value)?,
            "raa.mlp_activation" => m.raa.mlp_activation = value.parse::<MlpActivation>()?,
            "raa.gamma_init" => m.raa.gamma_init = num(key, value)?,
            "raa.d_proj" => m.raa.d_proj = num(key, value)?,
            "raa.batch_norm" => m.raa.batch_norm = num(key, value)?,
            "model.head_hidden" => m.head_hidden = num(key, value)?,
            "backbone.channels" => {
                let ch = list(key, value)?;
                m.backbone.stages = ch
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ConvStage::new(c, m.backbone.stages.get(i).map_or(1, |s| s.stride)))
                    .collect();
            }
            "backbone.strides" => {
                let st = list(key, value)?;
                if st.len() != m.backbone.stages.len() {
                    return Err(RaaError::Config(format!(
                        "backbone.strides has {} entries for {} stages; set backbone.channels first",
                        st.len(),
                        m.backbone.stages.len()
                    )));
                }
                for (s, v) in m.backbone.stages.iter_mut().zip(st) {
                    s.stride = v;
                }
            }
            other => return Err(RaaError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RaaError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| RaaError::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        c.finalize()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Derives the dependent architecture fields and validates everything.
    pub fn finalize(mut self) -> Result<Self> {
        let bb = &mut self.model.backbone;
        let stride: usize = bb.stages.iter().map(|s| s.stride).product();
        if stride == 0 || self.size % stride != 0 {
            return Err(RaaError::Config(format!(
                "image size {} is not divisible by the backbone stride {stride}",
                self.size
            )));
        }
        bb.input_size = self.size;
        bb.target_grid = self.size / stride;
        self.model.raa.d_in = bb.out_channels();
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    /// Every key with its current value, parseable by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let join = |v: Vec<usize>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let values = [
            t.seed.to_string(),
            self.n.to_string(),
            self.size.to_string(),
            t.lr.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.folds.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.adam_eps.to_string(),
            t.loss.lambda.to_string(),
            t.loss.m1.to_string(),
            t.loss.m2.to_string(),
            t.loss.pair_semantics.to_string(),
            m.raa.window.to_string(),
            m.raa.include_self.to_string(),
            m.raa.mlp_hidden.to_string(),
            m.raa.mlp_activation.to_string(),
            m.raa.gamma_init.to_string(),
            m.raa.d_proj.to_string(),
            m.raa.batch_norm.to_string(),
            m.head_hidden.to_string(),
            join(m.backbone.stages.iter().map(|s| s.out_channels).collect()),
            join(m.backbone.stages.iter().map(|s| s.stride).collect()),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default().finalize().unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_overrides_and_derived_fields() {
        let c = ExperimentConfig::parse(
            "# k = 5 ablation\nraa.window = 5  # wider\nloss.lambda=0\n\ndata.size = 32\nbackbone.channels = 8, 12\nbackbone.strides = 2,2\n",
        )
        .unwrap();
        assert_eq!(c.model.raa.window, 5);
        assert_eq!(c.train.loss.lambda, 0.0);
        assert_eq!((c.model.grid(), c.model.raa.d_in), (8, 12));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("raa.windw = 5").is_err());
        assert!(ExperimentConfig::parse("raa.window = 4").is_err());
        assert!(ExperimentConfig::parse("raa.window 5").is_err());
        assert!(ExperimentConfig::parse("data.size = 60").is_err());
        assert!(ExperimentConfig::parse("raa.mlp_activation = tanh").is_err());
        assert!(ExperimentConfig::parse("train.batch_size = 1").is_err());
    }
}
