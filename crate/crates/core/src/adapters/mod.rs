//! Parameter-efficient adapters attached to the frozen backbone.

pub mod ia3;
pub mod lars;
pub mod lora;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ia3::{Ia3Config, Ia3Params};
pub use lars::{GeluPosition, LarsConfig, LarsParams, Pooling};
pub use lora::{LoraConfig, LoraParams};

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Tape, Tensor, TensorId};
use crate::transformer::{AttachPoint, BackboneConfig, Site, SiteHook};

/// One adapter family with its hyper-parameters, tagged by `kind` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterSpec {
    Lars(LarsConfig),
    Lora(LoraConfig),
    Ia3(Ia3Config),
}

impl AdapterSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AdapterSpec::Lars(_) => "lars",
            AdapterSpec::Lora(_) => "lora",
            AdapterSpec::Ia3(_) => "ia3",
        }
    }

    /// Ledger scope the adapter's saved tensors are attributed to.
    pub fn scope(&self) -> String {
        format!("adapter:{}", self.kind())
    }

    pub fn targets(&self) -> &[Site] {
        match self {
            AdapterSpec::Lars(c) => &c.targets,
            AdapterSpec::Lora(c) => &c.targets,
            AdapterSpec::Ia3(c) => &c.targets,
        }
    }

    pub fn targets_mut(&mut self) -> &mut Vec<Site> {
        match self {
            AdapterSpec::Lars(c) => &mut c.targets,
            AdapterSpec::Lora(c) => &mut c.targets,
            AdapterSpec::Ia3(c) => &mut c.targets,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            AdapterSpec::Lars(c) => Some(c.rank),
            AdapterSpec::Lora(c) => Some(c.rank),
            AdapterSpec::Ia3(_) => None,
        }
    }

    /// Sets the rank; a no-op for IA3.
    pub fn set_rank(&mut self, rank: usize) {
        match self {
            AdapterSpec::Lars(c) => c.rank = rank,
            AdapterSpec::Lora(c) => c.rank = rank,
            AdapterSpec::Ia3(_) => {}
        }
    }

    pub fn pooling(&self) -> &'static str {
        match self {
            AdapterSpec::Lars(c) => c.pooling.name(),
            _ => "none",
        }
    }

    /// Comma-free label for the target list, e.g. `attn_o+mlp_down`.
    pub fn targets_label(&self) -> String {
        self.targets().iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let targets = self.targets();
        if targets.is_empty() {
            return Err(Error::Config(format!("{} adapter has no target modules", self.kind())));
        }
        for (i, t) in targets.iter().enumerate() {
            if targets[..i].contains(t) {
                return Err(Error::Config(format!("target module `{t}` listed twice")));
            }
            if let Some(r) = self.rank() {
                let (in_dim, _) = t.dims(backbone);
                if r == 0 || r >= in_dim {
                    return Err(Error::Config(format!(
                        "{} rank {r} must satisfy 1 <= R < {in_dim} at `{t}`",
                        self.kind()
                    )));
                }
            }
        }
        if let AdapterSpec::Lora(c) = self {
            if !c.lora_alpha.is_finite() {
                return Err(Error::Config("lora_alpha must be finite".into()));
            }
        }
        Ok(())
    }

    /// Elements one module at `site` keeps for backward at `(batch, seq)`.
    pub fn saved_elements_at(&self, site: Site, backbone: &BackboneConfig, batch: usize, seq: usize) -> usize {
        let (in_dim, out_dim) = site.dims(backbone);
        match self {
            AdapterSpec::Lars(c) => lars::lars_saved_elements(c, batch, seq, in_dim, out_dim),
            AdapterSpec::Lora(c) => lora::lora_saved_elements(c, batch, seq),
            AdapterSpec::Ia3(_) => ia3::ia3_saved_elements(batch, seq, ia3::scaled_width(site, backbone)),
        }
    }

    /// Elements the whole adapter (every layer × target) keeps for backward.
    pub fn saved_elements(&self, backbone: &BackboneConfig, batch: usize, seq: usize) -> usize {
        let per_layer: usize = self
            .targets()
            .iter()
            .map(|&s| self.saved_elements_at(s, backbone, batch, seq))
            .sum();
        per_layer * backbone.layers
    }

    /// Trainable parameter count without building the tensors.
    pub fn param_count(&self, backbone: &BackboneConfig) -> usize {
        let per_layer: usize = self
            .targets()
            .iter()
            .map(|&site| {
                let (i, o) = site.dims(backbone);
                match self {
                    AdapterSpec::Lars(c) => {
                        let r = c.rank;
                        let pool = if c.pooling == Pooling::Learned { i } else { 0 };
                        2 * i * r + r * r + r * r + r * o + 3 + pool
                    }
                    AdapterSpec::Lora(c) => c.rank * (i + o),
                    AdapterSpec::Ia3(_) => ia3::scaled_width(site, backbone),
                }
            })
            .sum();
        per_layer * backbone.layers
    }
}

impl fmt::Display for AdapterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank() {
            Some(r) => write!(f, "{}(R={r}, {})", self.kind(), self.targets_label()),
            None => write!(f, "{}({})", self.kind(), self.targets_label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterParams<T> {
    Lars(LarsParams<T>),
    Lora(LoraParams<T>),
    Ia3(Ia3Params<T>),
}

impl<T: Element> AdapterParams<T> {
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            AdapterParams::Lars(p) => p.named(),
            AdapterParams::Lora(p) => p.named(),
            AdapterParams::Ia3(p) => p.named(),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            AdapterParams::Lars(p) => p.named_mut(),
            AdapterParams::Lora(p) => p.named_mut(),
            AdapterParams::Ia3(p) => p.named_mut(),
        }
    }
}

/// One module per `layer × target`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModule<T> {
    pub point: AttachPoint,
    pub params: AdapterParams<T>,
}

/// Every module of one adapter spec, in layer-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T> {
    spec: AdapterSpec,
    modules: Vec<AdapterModule<T>>,
}

impl<T: Element> AdapterSet<T> {
    pub fn new(spec: AdapterSpec, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        spec.validate(backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut modules = Vec::new();
        for layer in 0..backbone.layers {
            for &site in spec.targets() {
                let (i, o) = site.dims(backbone);
                let params = match &spec {
                    AdapterSpec::Lars(c) => AdapterParams::Lars(LarsParams::init(c, i, o, &mut rng)?),
                    AdapterSpec::Lora(c) => AdapterParams::Lora(LoraParams::init(c, i, o, &mut rng)?),
                    AdapterSpec::Ia3(_) => AdapterParams::Ia3(Ia3Params::init(ia3::scaled_width(site, backbone))?),
                };
                modules.push(AdapterModule {
                    point: AttachPoint { layer, site },
                    params,
                });
            }
        }
        Ok(Self { spec, modules })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn modules(&self) -> &[AdapterModule<T>] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [AdapterModule<T>] {
        &mut self.modules
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn trainable_bytes(&self) -> u64 {
        self.tensors().iter().map(|t| t.bytes()).sum()
    }

    /// Every trainable tensor in binding order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.modules
            .iter()
            .flat_map(|m| m.params.named().into_iter().map(|(_, t)| t))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.modules
            .iter_mut()
            .flat_map(|m| m.params.named_mut().into_iter().map(|(_, t)| t))
            .collect()
    }

    /// Registers every tensor on the tape as a trainable parameter.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundAdapters<'_, T> {
        self.bind_with(tape, |tape, _, _, t| tape.param(t, true))
    }

    /// Like [`bind`](Self::bind), but `register(tape, module, name, tensor)`
    /// chooses the tape id for each tensor.
    pub fn bind_with(
        &self,
        tape: &mut Tape<T>,
        mut register: impl FnMut(&mut Tape<T>, usize, &'static str, &Tensor<T>) -> TensorId,
    ) -> BoundAdapters<'_, T> {
        let mut ids = Vec::with_capacity(self.modules.len());
        let mut index = BTreeMap::new();
        for (m, module) in self.modules.iter().enumerate() {
            ids.push(
                module
                    .params
                    .named()
                    .into_iter()
                    .map(|(name, t)| register(tape, m, name, t))
                    .collect::<Vec<_>>(),
            );
            index.insert(module.point, m);
        }
        BoundAdapters {
            set: self,
            scope: self.spec.scope(),
            ids,
            index,
        }
    }
}

/// An [`AdapterSet`] whose tensors live on a tape.
pub struct BoundAdapters<'a, T> {
    set: &'a AdapterSet<T>,
    scope: String,
    ids: Vec<Vec<TensorId>>,
    index: BTreeMap<AttachPoint, usize>,
}

impl<T: Element> BoundAdapters<'_, T> {
    pub fn ids(&self) -> &[Vec<TensorId>] {
        &self.ids
    }

    /// Gradients in the same order as [`AdapterSet::tensors`].
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::new();
        for (module, ids) in self.set.modules.iter().zip(&self.ids) {
            for ((name, t), &id) in module.params.named().into_iter().zip(ids) {
                match grads.get(id) {
                    Some(g) => out.push(g.clone()),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "no gradient for {name} at layer {} {}",
                            module.point.layer, module.point.site
                        )))
                    }
                }
                debug_assert_eq!(out.last().map(|g| g.shape()), Some(t.shape()));
            }
        }
        Ok(out)
    }
}

impl<T: Element> SiteHook<T> for BoundAdapters<'_, T> {
    fn apply(
        &self,
        tape: &mut Tape<T>,
        point: AttachPoint,
        x: TensorId,
        base: &dyn Fn(&mut Tape<T>, TensorId) -> Result<TensorId>,
    ) -> Result<TensorId> {
        let Some(&m) = self.index.get(&point) else {
            return base(tape, x);
        };
        let ids = &self.ids[m];
        match &self.set.spec {
            AdapterSpec::Lars(c) => {
                let out = base(tape, x)?;
                tape.scoped(&self.scope, |tape| lars::lars_forward(tape, c, ids, x, out))
            }
            AdapterSpec::Lora(c) => {
                let out = base(tape, x)?;
                tape.scoped(&self.scope, |tape| lora::lora_forward(tape, c, ids, x, out))
            }
            AdapterSpec::Ia3(_) if ia3::scales_input(point.site) => {
                let scaled = tape.scoped(&self.scope, |tape| ia3::ia3_forward(tape, x, ids[0]))?;
                base(tape, scaled)
            }
            AdapterSpec::Ia3(_) => {
                let out = base(tape, x)?;
                tape.scoped(&self.scope, |tape| ia3::ia3_forward(tape, out, ids[0]))
            }
        }
    }
}
