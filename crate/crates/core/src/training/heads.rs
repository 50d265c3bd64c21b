use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{normal_tensor, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// One affine map to all labels.
    SingleHead,
    /// One affine map per label, outputs concatenated.
    #[default]
    MultiHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub input_dim: usize,
    pub num_labels: usize,
}

const INIT_STD: f64 = 0.02;

/// Classification head parameters, stored under the `head.` prefix.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    config: HeadConfig,
    params: ParamStore,
}

impl ClassifierHead {
    /// Truncated-normal weights, zero bias.
    pub fn new<R: Rng>(config: HeadConfig, rng: &mut R, device: &Device) -> Result<Self> {
        let (d, c) = (config.input_dim, config.num_labels);
        if d == 0 || c == 0 {
            return Err(Error::contract("head needs nonzero input and label dimensions"));
        }
        let mut params = ParamStore::new();
        match config.variant {
            HeadVariant::SingleHead => {
                params.insert("head.weight", normal_tensor(rng, &[c, d], INIT_STD, true, device)?)?;
                params.insert("head.bias", Tensor::zeros(c, candle_core::DType::F32, device)?)?;
            }
            HeadVariant::MultiHead => {
                for j in 0..c {
                    params.insert(
                        format!("head.{j}.weight"),
                        normal_tensor(rng, &[1, d], INIT_STD, true, device)?,
                    )?;
                    params.insert(
                        format!("head.{j}.bias"),
                        Tensor::zeros(1, candle_core::DType::F32, device)?,
                    )?;
                }
            }
        }
        Ok(ClassifierHead { config, params })
    }

    /// A head with the given weights (`C x d`) and bias (`C`).
    pub fn from_weights(variant: HeadVariant, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let (c, d) = weight.dims2()?;
        let mut params = ParamStore::new();
        match variant {
            HeadVariant::SingleHead => {
                params.insert("head.weight", weight.copy()?)?;
                params.insert("head.bias", bias.copy()?)?;
            }
            HeadVariant::MultiHead => {
                for j in 0..c {
                    params.insert(format!("head.{j}.weight"), weight.narrow(0, j, 1)?.copy()?)?;
                    params.insert(format!("head.{j}.bias"), bias.narrow(0, j, 1)?.copy()?)?;
                }
            }
        }
        Ok(ClassifierHead {
            config: HeadConfig {
                variant,
                input_dim: d,
                num_labels: c,
            },
            params,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `B x C` logits from pooled `B x d` features.
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let (_, d) = pooled.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::contract(format!(
                "pooled width {d} does not match head input {}",
                self.config.input_dim
            )));
        }
        match self.config.variant {
            HeadVariant::SingleHead => {
                let w = self.params.tensor("head.weight")?;
                let b = self.params.tensor("head.bias")?;
                Ok(pooled.matmul(&w.t()?)?.broadcast_add(&b)?)
            }
            HeadVariant::MultiHead => {
                let columns = (0..self.config.num_labels)
                    .map(|j| {
                        let w = self.params.tensor(&format!("head.{j}.weight"))?;
                        let b = self.params.tensor(&format!("head.{j}.bias"))?;
                        Ok(pooled.matmul(&w.t()?)?.broadcast_add(&b)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&columns, 1)?)
            }
        }
    }
}

pub fn forward_heads(pooled: &Tensor, head: &ClassifierHead) -> Result<Tensor> {
    head.forward(pooled)
}
