//! Frozen decoder-only backbone with named attach points for adapters.
//!
//! Pre-norm blocks: `x += Attn(LN(x))`, `x += MLP(LN(x))`, standard softmax
//! attention that keeps its probabilities, GeLU MLP, untied LM head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, TensorId};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Std of the Gaussian weight and embedding init.
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn_mult: 4,
            vocab: 64,
            max_seq: 1024,
            seed: 0,
            init_std: INIT_STD,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone.{name} must be at least 1")));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config(format!("backbone.init_std {} must be positive", self.init_std)));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Closed-form count of every backbone weight.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let per_layer = 4 * h * h + 2 * self.ffn_mult * h * h + 4 * h;
        self.layers * per_layer + self.vocab * h + self.max_seq * h + 2 * h + h * self.vocab
    }
}

/// Linear map inside a block that an adapter can wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::AttnQ, Site::AttnK, Site::AttnV, Site::AttnO, Site::MlpUp, Site::MlpDown];

    pub fn name(self) -> &'static str {
        match self {
            Site::AttnQ => "attn_q",
            Site::AttnK => "attn_k",
            Site::AttnV => "attn_v",
            Site::AttnO => "attn_o",
            Site::MlpUp => "mlp_up",
            Site::MlpDown => "mlp_down",
        }
    }

    /// `(input width, output width)` of the wrapped linear map.
    pub fn dims(self, config: &BackboneConfig) -> (usize, usize) {
        let (h, f) = (config.hidden, config.ffn_dim());
        match self {
            Site::MlpUp => (h, f),
            Site::MlpDown => (f, h),
            _ => (h, h),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown target module `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttachPoint {
    pub layer: usize,
    pub site: Site,
}

/// `[batch, seq]` grid of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::InvalidArgument(format!(
                "token grid {batch}x{seq} does not hold {} ids",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[&[usize]]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::InvalidArgument("ragged token rows".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn token_count(&self) -> usize {
        self.ids.len()
    }
}

/// Wraps the frozen linear map at an attach point.
pub trait SiteHook<T: Element> {
    /// Output of the linear map at `point` for input `x`; `base` applies the
    /// frozen weight and must be called (once) for the base computation.
    fn apply(
        &self,
        tape: &mut Tape<T>,
        point: AttachPoint,
        x: TensorId,
        base: &dyn Fn(&mut Tape<T>, TensorId) -> Result<TensorId>,
    ) -> Result<TensorId>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Element> LayerWeights<T> {
    fn tensors(&self) -> [&Tensor<T>; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn site_weight(&self, site: Site) -> &Tensor<T> {
        match site {
            Site::AttnQ => &self.wq,
            Site::AttnK => &self.wk,
            Site::AttnV => &self.wv,
            Site::AttnO => &self.wo,
            Site::MlpUp => &self.w_up,
            Site::MlpDown => &self.w_down,
        }
    }
}

/// Frozen randomly-initialized decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    tok_emb: Tensor<T>,
    pos_emb: Tensor<T>,
    layers: Vec<LayerWeights<T>>,
    lnf_gain: Tensor<T>,
    lnf_bias: Tensor<T>,
    lm_head: Tensor<T>,
}

impl<T: Element> Backbone<T> {
    /// Gaussian (std `init_std`) matrices and embeddings, unit/zero norm affines,
    /// all drawn from `config.seed`.
    pub fn build(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, f, v) = (config.hidden, config.ffn_dim(), config.vocab);
        let mut randn = |shape: Vec<usize>| Tensor::randn(shape, config.init_std, &mut rng);
        let tok_emb = randn(vec![v, h])?;
        let pos_emb = randn(vec![config.max_seq, h])?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::ones(vec![h])?,
                ln1_bias: Tensor::zeros(vec![h])?,
                wq: randn(vec![h, h])?,
                wk: randn(vec![h, h])?,
                wv: randn(vec![h, h])?,
                wo: randn(vec![h, h])?,
                ln2_gain: Tensor::ones(vec![h])?,
                ln2_bias: Tensor::zeros(vec![h])?,
                w_up: randn(vec![h, f])?,
                w_down: randn(vec![f, h])?,
            });
        }
        let lm_head = randn(vec![h, v])?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::ones(vec![h])?,
            lnf_bias: Tensor::zeros(vec![h])?,
            lm_head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights<T>] {
        &self.layers
    }

    /// Every weight tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.lm_head]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        self.tensors().iter().map(|t| t.bytes()).sum()
    }

    fn embed(&self, tokens: &TokenBatch) -> Result<Tensor<T>> {
        let c = &self.config;
        if tokens.seq == 0 || tokens.seq > c.max_seq {
            return Err(Error::SequenceLength {
                len: tokens.seq,
                max: c.max_seq,
            });
        }
        if let Some(&token) = tokens.ids.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::TokenOutOfRange { token, vocab: c.vocab });
        }
        let h = c.hidden;
        let (tok, pos) = (self.tok_emb.data(), self.pos_emb.data());
        let mut data = Vec::with_capacity(tokens.ids.len() * h);
        for (i, &id) in tokens.ids.iter().enumerate() {
            let s = i % tokens.seq;
            data.extend(
                tok[id * h..(id + 1) * h]
                    .iter()
                    .zip(&pos[s * h..(s + 1) * h])
                    .map(|(&a, &b)| a + b),
            );
        }
        Tensor::new(vec![tokens.batch, tokens.seq, h], data)
    }

    fn causal_mask(seq: usize) -> Result<Tensor<T>> {
        let data = (0..seq * seq)
            .map(|i| if i % seq > i / seq { T::neg_infinity() } else { T::zero() })
            .collect();
        Tensor::new(vec![seq, seq], data)
    }

    fn norm(tape: &mut Tape<T>, x: TensorId, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<TensorId> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.param(gain, false);
        let b = tape.param(bias, false);
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }

    fn site(
        tape: &mut Tape<T>,
        hook: Option<&dyn SiteHook<T>>,
        point: AttachPoint,
        x: TensorId,
        weight: &Tensor<T>,
    ) -> Result<TensorId> {
        let w = tape.param(weight, false);
        let base = move |tape: &mut Tape<T>, input: TensorId| tape.matmul(input, w);
        match hook {
            Some(hook) => hook.apply(tape, point, x, &base),
            None => base(tape, x),
        }
    }

    /// `[B,S,H] -> [B,heads,S,dh]`
    fn split_heads(&self, tape: &mut Tape<T>, x: TensorId, batch: usize, seq: usize) -> Result<TensorId> {
        let c = &self.config;
        let r = tape.reshape(x, vec![batch, seq, c.heads, c.head_dim()])?;
        tape.transpose(r, 1, 2)
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        x: TensorId,
        mask: TensorId,
        hook: Option<&dyn SiteHook<T>>,
        batch: usize,
        seq: usize,
    ) -> Result<TensorId> {
        let w = &self.layers[layer];
        let at = |site| AttachPoint { layer, site };

        let a = Self::norm(tape, x, &w.ln1_gain, &w.ln1_bias)?;
        let q = Self::site(tape, hook, at(Site::AttnQ), a, &w.wq)?;
        let k = Self::site(tape, hook, at(Site::AttnK), a, &w.wk)?;
        let v = Self::site(tape, hook, at(Site::AttnV), a, &w.wv)?;
        let q = self.split_heads(tape, q, batch, seq)?;
        let k = self.split_heads(tape, k, batch, seq)?;
        let v = self.split_heads(tape, v, batch, seq)?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt())?;
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, vec![batch, seq, self.config.hidden])?;
        let o = Self::site(tape, hook, at(Site::AttnO), ctx, &w.wo)?;
        let x = tape.add(x, o)?;

        let b = Self::norm(tape, x, &w.ln2_gain, &w.ln2_bias)?;
        let up = Self::site(tape, hook, at(Site::MlpUp), b, &w.w_up)?;
        let act = tape.gelu(up)?;
        let down = Self::site(tape, hook, at(Site::MlpDown), act, &w.w_down)?;
        tape.add(x, down)
    }

    /// Final normalized hidden states `[B,S,H]`.
    pub fn forward_hidden(&self, tape: &mut Tape<T>, tokens: &TokenBatch, hook: Option<&dyn SiteHook<T>>) -> Result<TensorId> {
        let x0 = self.embed(tokens)?;
        let mut x = tape.constant(x0);
        let mask = tape.constant(Self::causal_mask(tokens.seq)?);
        for layer in 0..self.config.layers {
            x = self.block(tape, layer, x, mask, hook, tokens.batch, tokens.seq)?;
        }
        Self::norm(tape, x, &self.lnf_gain, &self.lnf_bias)
    }

    /// Logits `[B,S,vocab]`.
    pub fn forward(&self, tape: &mut Tape<T>, tokens: &TokenBatch, hook: Option<&dyn SiteHook<T>>) -> Result<TensorId> {
        let hidden = self.forward_hidden(tape, tokens, hook)?;
        let head = tape.param(&self.lm_head, false);
        tape.matmul(hidden, head)
    }

    pub fn site_weight(&self, point: AttachPoint) -> &Tensor<T> {
        self.layers[point.layer].site_weight(point.site)
    }
}

/// Mean cross-entropy of the final-position logits, recorded under scope `loss`.
pub fn last_token_loss<T: Element>(tape: &mut Tape<T>, logits: TensorId, targets: Vec<usize>) -> Result<TensorId> {
    let seq = tape.shape(logits)[1];
    tape.scoped(LOSS_SCOPE, |tape| {
        let last = tape.select(logits, 1, seq - 1)?;
        tape.cross_entropy(last, targets)
    })
}

pub const LOSS_SCOPE: &str = "loss";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = BackboneConfig {
            hidden: 16,
            heads: 3,
            ..Default::default()
        };
        assert!(matches!(Backbone::<f32>::build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = BackboneConfig::default();
        assert_eq!(Backbone::<f32>::build(&cfg).unwrap(), Backbone::<f32>::build(&cfg).unwrap());
        let other = BackboneConfig { seed: 1, ..cfg.clone() };
        assert_ne!(Backbone::<f32>::build(&cfg).unwrap(), Backbone::<f32>::build(&other).unwrap());
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let cfg = BackboneConfig {
            vocab: 8,
            ..Default::default()
        };
        let model = Backbone::<f32>::build(&cfg).unwrap();
        let mut tape = Tape::new();
        let tokens = TokenBatch::new(1, 2, vec![3, 8]).unwrap();
        assert_eq!(
            model.forward(&mut tape, &tokens, None).unwrap_err(),
            Error::TokenOutOfRange { token: 8, vocab: 8 }
        );
    }

    #[test]
    fn site_names_round_trip() {
        for site in Site::ALL {
            assert_eq!(site.name().parse::<Site>().unwrap(), site);
        }
        assert!("attn".parse::<Site>().is_err());
    }
}
