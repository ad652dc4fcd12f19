//! Closed-form peak training memory, split the same way as the ledger.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::error::{Error, Result};
use crate::tensor::DType;
use crate::transformer::BackboneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adamw,
}

impl Optimizer {
    /// Optimizer state per trainable element, in units of the element size.
    pub fn state_multiplier(self) -> u64 {
        match self {
            Optimizer::Adamw => 2,
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(Optimizer::Adamw),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (supported: adamw)"))),
        }
    }
}

/// Constant-factor reductions of base activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Fused attention: the `heads·B·S²` probabilities are not kept.
    pub flash: bool,
    /// Fraction of base activations kept under checkpointing, in (0, 1].
    pub gc_factor: f64,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            flash: false,
            gc_factor: 1.0,
        }
    }
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        if !(self.gc_factor > 0.0 && self.gc_factor <= 1.0) {
            return Err(Error::Config(format!("gc_factor {} must be in (0, 1]", self.gc_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub params_bytes: u64,
    pub grads_bytes: u64,
    pub optimizer_bytes: u64,
    pub base_act_bytes: u64,
    pub adapter_act_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryEstimate {
    pub fn parts(&self) -> [(&'static str, u64); 5] {
        [
            ("params", self.params_bytes),
            ("grads", self.grads_bytes),
            ("optimizer", self.optimizer_bytes),
            ("base_act", self.base_act_bytes),
            ("adapter_act", self.adapter_act_bytes),
        ]
    }
}

impl fmt::Display for MemoryEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, bytes) in self.parts() {
            writeln!(f, "{name:<12} {bytes:>14}")?;
        }
        write!(f, "{:<12} {:>14}", "total", self.total_bytes)
    }
}

/// Elements the frozen backbone keeps for backward at `(batch, seq)`.
///
/// Per layer: ten `B·S·H` tensors (two norm inputs, two normalized outputs,
/// the attention and MLP inputs, q, kᵀ, v in head layout, the merged context),
/// the MLP pre- and post-activation `2·B·S·f·H`, four `B·S` norm statistics
/// and the `heads·B·S²` attention probabilities. The final norm and LM head add
/// `3·B·S·H + 2·B·S`.
pub fn base_saved_elements(config: &BackboneConfig, batch: usize, seq: usize, flash: bool) -> u64 {
    let (b, s, h) = (batch as u64, seq as u64, config.hidden as u64);
    let f = config.ffn_mult as u64;
    let attention = if flash { 0 } else { config.heads as u64 * b * s * s };
    let per_layer = 10 * b * s * h + 2 * f * b * s * h + 4 * b * s + attention;
    config.layers as u64 * per_layer + 3 * b * s * h + 2 * b * s
}

pub fn estimate_peak(
    config: &BackboneConfig,
    spec: &AdapterSpec,
    batch: usize,
    seq: usize,
    optimizer: Optimizer,
    toggles: Toggles,
    dtype: DType,
) -> Result<MemoryEstimate> {
    config.validate()?;
    spec.validate(config)?;
    toggles.validate()?;
    if batch == 0 || seq == 0 {
        return Err(Error::InvalidArgument(format!("batch {batch} and seq {seq} must be positive")));
    }
    let size = dtype.size() as u64;
    let trainable = spec.param_count(config) as u64 * size;
    let params_bytes = config.param_count() as u64 * size + trainable;
    let grads_bytes = trainable;
    let optimizer_bytes = optimizer.state_multiplier() * trainable;
    let base = base_saved_elements(config, batch, seq, toggles.flash) * size;
    let base_act_bytes = if toggles.gc_factor == 1.0 {
        base
    } else {
        (base as f64 * toggles.gc_factor).round() as u64
    };
    let adapter_act_bytes = spec.saved_elements(config, batch, seq) as u64 * size;
    Ok(MemoryEstimate {
        params_bytes,
        grads_bytes,
        optimizer_bytes,
        base_act_bytes,
        adapter_act_bytes,
        total_bytes: params_bytes + grads_bytes + optimizer_bytes + base_act_bytes + adapter_act_bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of bytes on S. Zero-variance `y` has R² = 1.
///
/// Integer-valued inputs are fitted with exact integer sums, so points that
/// are exactly collinear give R² = 1.0 and a flat series gives slope 0.0.
pub fn fit_growth_rate(points: &[(f64, f64)]) -> Result<GrowthFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "growth fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("growth fit points must be finite".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    if xs.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("growth fit needs distinct S values".into()));
    }
    Ok(fit_exact(points).unwrap_or_else(|| fit_float(points)))
}

fn fit_exact(points: &[(f64, f64)]) -> Option<GrowthFit> {
    const LIMIT: f64 = (1u64 << 53) as f64;
    let as_int = |v: f64| (v.fract() == 0.0 && v.abs() < LIMIT).then_some(v as i128);
    let mut sums = [0i128; 5]; // Σx Σy Σxx Σxy Σyy
    for &(x, y) in points {
        let (x, y) = (as_int(x)?, as_int(y)?);
        sums[0] = sums[0].checked_add(x)?;
        sums[1] = sums[1].checked_add(y)?;
        sums[2] = sums[2].checked_add(x.checked_mul(x)?)?;
        sums[3] = sums[3].checked_add(x.checked_mul(y)?)?;
        sums[4] = sums[4].checked_add(y.checked_mul(y)?)?;
    }
    let n = points.len() as i128;
    let [sx, sy, sxx, sxy, syy] = sums;
    let sxx_c = n.checked_mul(sxx)?.checked_sub(sx.checked_mul(sx)?)?;
    let sxy_c = n.checked_mul(sxy)?.checked_sub(sx.checked_mul(sy)?)?;
    let syy_c = n.checked_mul(syy)?.checked_sub(sy.checked_mul(sy)?)?;
    let slope = sxy_c as f64 / sxx_c as f64;
    let intercept = (sy as f64 - slope * sx as f64) / n as f64;
    let r_squared = if syy_c == 0 {
        1.0
    } else {
        let num = sxy_c.checked_mul(sxy_c)?;
        let den = sxx_c.checked_mul(syy_c)?;
        if num == den {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Some(GrowthFit {
        slope,
        intercept,
        r_squared,
    })
}

fn fit_float(points: &[(f64, f64)]) -> GrowthFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    GrowthFit {
        slope,
        intercept,
        r_squared,
    }
}
