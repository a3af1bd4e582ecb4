//! Run configuration files (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{presets, NetworkSpec};
use crate::neuron::NeuronConfig;
use crate::train::{SurrogateConfig, TrainConfig};

/// A named architecture, filled in with the run's neuron and time steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    Resnet8Slim {
        input_shape: Vec<usize>,
        classes: usize,
        #[serde(default = "default_widths")]
        widths: [usize; 3],
        #[serde(default = "default_eca")]
        eca_kernel: usize,
        #[serde(default = "default_true")]
        interlaminar: bool,
    },
    /// Spiking when the run has a `neuron`, ReLU otherwise.
    Mlp {
        in_features: usize,
        hidden: Vec<usize>,
        classes: usize,
        #[serde(default)]
        batch_norm: bool,
    },
}

fn default_widths() -> [usize; 3] {
    [16, 32, 64]
}

fn default_eca() -> usize {
    crate::network::DEFAULT_ECA_KERNEL
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Explicit layer list; exclusive with `preset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neuron: Option<NeuronConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.surrogate.validate()?;
        if let Some(n) = &cfg.neuron {
            n.validate()?;
        }
        cfg.network_spec()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)
    }

    /// The network to train, with `train.time_steps` applied.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let t = self.train.time_steps;
        let spec = match (&self.network, &self.preset) {
            (Some(spec), None) => NetworkSpec { time_steps: t, ..spec.clone() },
            (None, Some(Preset::Resnet8Slim { input_shape, classes, widths, eca_kernel, interlaminar })) => {
                let neuron = self
                    .neuron
                    .ok_or_else(|| Error::Config("preset resnet8_slim needs a neuron".into()))?;
                presets::resnet8_slim(input_shape, *classes, neuron, t, *widths, *eca_kernel, *interlaminar)
            }
            (None, Some(Preset::Mlp { in_features, hidden, classes, batch_norm })) => {
                let act = match self.neuron {
                    Some(n) => presets::Activation::Spiking(n),
                    None => presets::Activation::Relu,
                };
                presets::mlp(*in_features, hidden, *classes, act, *batch_norm, t)
            }
            _ => return Err(Error::Config("give exactly one of `network` and `preset`".into())),
        };
        spec.validate()?;
        Ok(spec)
    }
}
