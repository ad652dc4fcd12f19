//! Low-rank additive update `W x + scale · (x A) B` at a linear map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, TensorId};
use crate::transformer::Site;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Update scale is `lora_alpha / rank`.
    pub lora_alpha: f64,
    pub init_std: f64,
    pub targets: Vec<Site>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            lora_alpha: 16.0,
            init_std: 0.02,
            targets: vec![Site::AttnO, Site::MlpDown],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> LoraParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &LoraConfig, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let r = config.rank;
        if r == 0 || r >= in_dim {
            return Err(Error::Config(format!("lora rank {r} must satisfy 1 <= R < {in_dim}")));
        }
        Ok(Self {
            a: Tensor::randn(vec![in_dim, r], config.init_std, rng)?,
            b: Tensor::zeros(vec![r, out_dim])?,
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("A", &self.a), ("B", &self.b)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("A", &mut self.a), ("B", &mut self.b)]
    }
}

/// `base_out + scale · (x A) B`. The `[B,S,R]` projection `x A` is what the
/// adapter keeps for backward; `x` itself is shared with the base projection.
pub fn lora_forward<T: Element>(
    tape: &mut Tape<T>,
    config: &LoraConfig,
    ids: &[TensorId],
    x: TensorId,
    base_out: TensorId,
) -> Result<TensorId> {
    let down = tape.matmul(x, ids[0])?;
    let up = tape.matmul(down, ids[1])?;
    let up = tape.scale(up, config.scale())?;
    tape.add(base_out, up)
}

pub fn lora_saved_elements(config: &LoraConfig, batch: usize, seq: usize) -> usize {
    batch * seq * config.rank
}
