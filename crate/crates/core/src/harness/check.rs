//! Finite-difference checks over every trainable tensor of an adapter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::adapters::{AdapterSet, AdapterSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{finite_diff_gradcheck, BackwardFault, GradCheckReport, Tape, TensorId};
use crate::transformer::{last_token_loss, AttachPoint, Backbone, BackboneConfig, Site, TokenBatch};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub layer: usize,
    pub site: Site,
    pub name: &'static str,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }

    pub fn label(&self) -> String {
        format!("layer{}.{}.{}", self.layer, self.site, self.name)
    }
}

/// One-layer f64 backbone used for gradient checks: wide enough for the
/// adapter's rank, weights large enough that attention is far from uniform.
pub fn probe_backbone(spec: &AdapterSpec, seed: u64) -> BackboneConfig {
    let hidden = (spec.rank().unwrap_or(1) + 1).max(8).next_multiple_of(2);
    BackboneConfig {
        layers: 1,
        hidden,
        heads: 2,
        ffn_mult: 2,
        vocab: 12,
        max_seq: 8,
        seed,
        init_std: 0.5,
    }
}

/// Smallest gradient magnitude at which a central difference with
/// `GRADCHECK_EPS` is still well inside `GRADCHECK_TOL` of f64 roundoff.
const GRADIENT_FLOOR: f64 = 5e-5;
const PROBE_DRAWS: u64 = 64;

fn perturbed(spec: &AdapterSpec, cfg: &BackboneConfig, seed: u64, draw: u64) -> Result<AdapterSet<f64>> {
    let mut set = AdapterSet::<f64>::new(spec.clone(), cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1).wrapping_mul(0x100_0000_01b3).wrapping_add(draw));
    for t in set.tensors_mut() {
        // matrices keep unit-scale outputs; scalars and vectors move by O(0.5)
        let std = match t.shape() {
            [rows, _, ..] => 1.0 / (*rows as f64).sqrt(),
            _ => 0.5,
        };
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in t.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(set)
}

/// A random parameter point where no gradient element sits near zero, so the
/// per-element relative error measures the backward rules and not roundoff.
/// Falls back to the best-conditioned draw.
fn probe_point(
    spec: &AdapterSpec,
    cfg: &BackboneConfig,
    model: &Backbone<f64>,
    tokens: &TokenBatch,
    targets: &[usize],
    seed: u64,
) -> Result<AdapterSet<f64>> {
    let mut best: Option<(f64, AdapterSet<f64>)> = None;
    for draw in 0..PROBE_DRAWS {
        let set = perturbed(spec, cfg, seed, draw)?;
        let smallest = {
            let mut tape = Tape::new();
            let bound = set.bind(&mut tape);
            let logits = model.forward(&mut tape, tokens, Some(&bound))?;
            let loss = last_token_loss(&mut tape, logits, targets.to_vec())?;
            let grads = tape.backward(loss)?;
            bound
                .collect_grads(&grads)?
                .iter()
                .flat_map(|g| g.data().iter().map(|v| v.abs()))
                // exact zeros are structural (LN over a single coordinate) and
                // their central difference is exactly zero too
                .filter(|&v| v > 0.0)
                .fold(f64::INFINITY, f64::min)
        };
        if smallest >= GRADIENT_FLOOR {
            return Ok(set);
        }
        if best.as_ref().is_none_or(|(b, _)| smallest > *b) {
            best = Some((smallest, set));
        }
    }
    Ok(best.map(|(_, s)| s).expect("at least one draw"))
}

/// Checks every adapter tensor at a random (non-init) point so that no
/// gradient is zero by construction. `fault` corrupts one backward rule.
pub fn check_adapter_gradients(
    spec: &AdapterSpec,
    seed: u64,
    exec: Exec,
    fault: Option<BackwardFault>,
) -> Result<Vec<TensorCheck>> {
    let cfg = probe_backbone(spec, seed);
    let model = Backbone::<f64>::build(&cfg)?;
    let tokens = TokenBatch::new(1, 4, vec![1, 5, 9, 3])?;
    let targets = vec![7];
    let set = probe_point(spec, &cfg, &model, &tokens, &targets, seed)?;

    let labels: Vec<(AttachPoint, &'static str)> = set
        .modules()
        .iter()
        .flat_map(|m| m.params.named().into_iter().map(move |(n, _)| (m.point, n)))
        .collect();
    let mut out = Vec::with_capacity(labels.len());
    for (target, (point, name)) in labels.into_iter().enumerate() {
        let param = set.tensors()[target].clone();
        let f = |tape: &mut Tape<f64>, id: TensorId| {
            if let Some(fault) = &fault {
                tape.inject_fault(fault.clone());
            }
            let mut k = 0;
            let bound = set.bind_with(tape, |tape, _, _, t| {
                let out = if k == target { id } else { tape.param(t, false) };
                k += 1;
                out
            });
            let logits = model.forward(tape, &tokens, Some(&bound))?;
            last_token_loss(tape, logits, targets.clone())
        };
        // a non-finite gradient is reported against its tensor, not raised
        let report = match finite_diff_gradcheck(f, &param, GRADCHECK_EPS, exec) {
            Err(Error::NonFinite { index }) => GradCheckReport {
                elements: param.numel(),
                max_rel_error: f64::NAN,
                worst_index: index,
            },
            other => other?,
        };
        out.push(TensorCheck {
            layer: point.layer,
            site: point.site,
            name,
            elements: report.elements,
            max_rel_error: report.max_rel_error,
            worst_index: report.worst_index,
        });
    }
    Ok(out)
}
