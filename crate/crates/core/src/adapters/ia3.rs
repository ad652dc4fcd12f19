//! Learned per-channel rescaling of activations.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Element, Tape, Tensor, TensorId};
use crate::transformer::{BackboneConfig, Site};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ia3Config {
    pub targets: Vec<Site>,
}

impl Default for Ia3Config {
    fn default() -> Self {
        Self {
            targets: vec![Site::AttnV, Site::MlpDown],
        }
    }
}

/// IA3 scales the *input* of the MLP down-projection and the *output* of
/// every other site.
pub fn scales_input(site: Site) -> bool {
    site == Site::MlpDown
}

pub fn scaled_width(site: Site, config: &BackboneConfig) -> usize {
    let (i, o) = site.dims(config);
    if scales_input(site) {
        i
    } else {
        o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ia3Params<T> {
    pub l: Tensor<T>,
}

impl<T: Element> Ia3Params<T> {
    pub fn init(width: usize) -> Result<Self> {
        Ok(Self {
            l: Tensor::ones(vec![width])?,
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("l", &self.l)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("l", &mut self.l)]
    }
}

/// `activations ⊙ l`, broadcast over leading axes. Saves `activations` unless
/// an earlier op already has.
pub fn ia3_forward<T: Element>(tape: &mut Tape<T>, activations: TensorId, l: TensorId) -> Result<TensorId> {
    tape.mul(activations, l)
}

pub fn ia3_saved_elements(batch: usize, seq: usize, width: usize) -> usize {
    batch * seq * width
}
