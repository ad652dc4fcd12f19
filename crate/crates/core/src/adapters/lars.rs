//! Pooled low-rank subspace adapter.
//!
//! The sequence is pooled to one `[B, in]` vector before any trainable map, so
//! every tensor the adapter keeps for backward is `[B, ·]`-shaped:
//!
//! ```text
//! x_pool = mean_s(X) + X_last                     (fixed)
//!        | Σ_s softmax_s(X_s · w_pool) X_s        (learned)
//! h      = x_pool A_pool
//! g      = σ(τ1 · x_pool W_x + τ2 · LN(h) W_h)
//! h'     = (g M_mix) ⊙ h
//! out    = base_out + broadcast_S(α · GeLU(h') B_pool)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, TensorId};
use crate::transformer::LN_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Fixed,
    Learned,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Fixed => "fixed",
            Pooling::Learned => "learned",
        }
    }
}

/// Where the subspace non-linearity sits relative to `B_pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluPosition {
    /// `B_pool(GeLU(h'))`
    #[default]
    Inner,
    /// `GeLU(B_pool(h'))`
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LarsConfig {
    pub rank: usize,
    pub pooling: Pooling,
    pub gelu_position: GeluPosition,
    pub gating: bool,
    pub mixing: bool,
    pub nonlinearity: bool,
    pub tau_init: f64,
    pub alpha_init: f64,
    pub init_std: f64,
    pub targets: Vec<crate::transformer::Site>,
}

impl Default for LarsConfig {
    fn default() -> Self {
        use crate::transformer::Site;
        Self {
            rank: 8,
            pooling: Pooling::Fixed,
            gelu_position: GeluPosition::Inner,
            gating: true,
            mixing: true,
            nonlinearity: true,
            tau_init: 1.0,
            alpha_init: 1.0,
            init_std: 0.02,
            targets: vec![Site::AttnO, Site::MlpDown],
        }
    }
}

/// Trainable tensors of one LARS module.
#[derive(Debug, Clone, PartialEq)]
pub struct LarsParams<T> {
    pub a_pool: Tensor<T>,
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub tau1: Tensor<T>,
    pub tau2: Tensor<T>,
    pub m_mix: Tensor<T>,
    pub b_pool: Tensor<T>,
    pub alpha: Tensor<T>,
    pub w_pool: Option<Tensor<T>>,
}

// Positions in `named()` order.
const A_POOL: usize = 0;
const W_X: usize = 1;
const W_H: usize = 2;
const TAU1: usize = 3;
const TAU2: usize = 4;
const M_MIX: usize = 5;
const B_POOL: usize = 6;
const ALPHA: usize = 7;
const W_POOL: usize = 8;

impl<T: Element> LarsParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &LarsConfig, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let r = config.rank;
        if r == 0 || r >= in_dim {
            return Err(Error::Config(format!("lars rank {r} must satisfy 1 <= R < {in_dim}")));
        }
        let std = config.init_std;
        Ok(Self {
            a_pool: Tensor::randn(vec![in_dim, r], std, rng)?,
            w_x: Tensor::randn(vec![in_dim, r], std, rng)?,
            w_h: Tensor::randn(vec![r, r], std, rng)?,
            tau1: Tensor::scalar(T::of(config.tau_init)),
            tau2: Tensor::scalar(T::of(config.tau_init)),
            m_mix: Tensor::eye(r)?,
            b_pool: Tensor::zeros(vec![r, out_dim])?,
            alpha: Tensor::scalar(T::of(config.alpha_init)),
            w_pool: match config.pooling {
                Pooling::Fixed => None,
                Pooling::Learned => Some(Tensor::zeros(vec![in_dim])?),
            },
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("A_pool", &self.a_pool),
            ("W_x", &self.w_x),
            ("W_h", &self.w_h),
            ("tau1", &self.tau1),
            ("tau2", &self.tau2),
            ("M_mix", &self.m_mix),
            ("B_pool", &self.b_pool),
            ("alpha", &self.alpha),
        ];
        if let Some(w) = &self.w_pool {
            out.push(("w_pool", w));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            ("A_pool", &mut self.a_pool),
            ("W_x", &mut self.w_x),
            ("W_h", &mut self.w_h),
            ("tau1", &mut self.tau1),
            ("tau2", &mut self.tau2),
            ("M_mix", &mut self.m_mix),
            ("B_pool", &mut self.b_pool),
            ("alpha", &mut self.alpha),
        ];
        if let Some(w) = &mut self.w_pool {
            out.push(("w_pool", w));
        }
        out
    }
}

fn check_sequence<T: Element>(tape: &Tape<T>, x: TensorId) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 3 {
        return Err(Error::RankMismatch {
            op: "lars_pool",
            left: shape.len(),
            right: 3,
        });
    }
    Ok(shape[1])
}

/// `mean_s(X) + X_last`; saves nothing.
pub fn lars_pool_fixed<T: Element>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
    let seq = check_sequence(tape, x)?;
    let mean = tape.mean(x, 1)?;
    let last = tape.select(x, 1, seq - 1)?;
    tape.add(mean, last)
}

/// Softmax-weighted sum of positions scored by `X · w_pool`; saves the `[B,S]`
/// weights (X itself is shared with the wrapped base projection).
pub fn lars_pool_learned<T: Element>(tape: &mut Tape<T>, x: TensorId, w_pool: TensorId) -> Result<TensorId> {
    let seq = check_sequence(tape, x)?;
    let (batch, width) = (tape.shape(x)[0], tape.shape(x)[2]);
    if tape.shape(w_pool).iter().product::<usize>() != width {
        return Err(Error::ShapeMismatch {
            op: "lars_pool_learned",
            left: width,
            right: tape.shape(w_pool).iter().product(),
        });
    }
    let w = tape.reshape(w_pool, vec![width, 1])?;
    let scores = tape.matmul(x, w)?;
    let scores = tape.reshape(scores, vec![batch, seq])?;
    let weights = tape.softmax(scores, 1)?;
    let weights = tape.reshape(weights, vec![batch, 1, seq])?;
    let pooled = tape.matmul(weights, x)?;
    tape.reshape(pooled, vec![batch, width])
}

/// Adapter update added to `base_out`. `ids` are the bound tensors in
/// [`LarsParams::named`] order. Call inside the adapter's ledger scope.
pub fn lars_forward<T: Element>(
    tape: &mut Tape<T>,
    config: &LarsConfig,
    ids: &[TensorId],
    x: TensorId,
    base_out: TensorId,
) -> Result<TensorId> {
    let seq = check_sequence(tape, x)?;
    let x_pool = match config.pooling {
        Pooling::Fixed => lars_pool_fixed(tape, x)?,
        Pooling::Learned => {
            let w = *ids.get(W_POOL).ok_or_else(|| Error::Config("learned pooling without w_pool".into()))?;
            lars_pool_learned(tape, x, w)?
        }
    };
    let h = tape.matmul(x_pool, ids[A_POOL])?;

    let modulated = if config.gating {
        let global = tape.matmul(x_pool, ids[W_X])?;
        let global = tape.scale_by(global, ids[TAU1])?;
        let local = tape.layer_norm(h, LN_EPS)?;
        let local = tape.matmul(local, ids[W_H])?;
        let local = tape.scale_by(local, ids[TAU2])?;
        let pre = tape.add(global, local)?;
        let gate = tape.sigmoid(pre)?;
        let gate = if config.mixing { tape.matmul(gate, ids[M_MIX])? } else { gate };
        tape.mul(gate, h)?
    } else {
        h
    };

    let inner = config.nonlinearity && config.gelu_position == GeluPosition::Inner;
    let outer = config.nonlinearity && config.gelu_position == GeluPosition::Outer;
    let features = if inner { tape.gelu(modulated)? } else { modulated };
    let update = tape.matmul(features, ids[B_POOL])?;
    let update = if outer { tape.gelu(update)? } else { update };
    let update = tape.scale_by(update, ids[ALPHA])?;
    let update = tape.broadcast(update, 1, seq)?;
    let out_shape = tape.shape(base_out).to_vec();
    if tape.shape(update) != out_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "lars_forward",
            left: out_shape.iter().product(),
            right: tape.shape(update).iter().product(),
        });
    }
    tape.add(base_out, update)
}

/// Saved elements one LARS module adds to the ledger at `(batch, seq)`.
pub fn lars_saved_elements(config: &LarsConfig, batch: usize, seq: usize, in_dim: usize, out_dim: usize) -> usize {
    let r = config.rank;
    // x_pool is saved by the A_pool projection
    let mut n = batch * in_dim;
    if config.pooling == Pooling::Learned {
        n += batch * seq;
    }
    let inner = config.nonlinearity && config.gelu_position == GeluPosition::Inner;
    let outer = config.nonlinearity && config.gelu_position == GeluPosition::Outer;
    if config.gating {
        // h, LN mean/var, LN(h), x_pool W_x, LN(h) W_h, g, g M_mix (if mixing)
        n += batch * r + 2 * batch + 4 * batch * r;
        if config.mixing {
            n += batch * r;
        }
        // h' (input of GeLU or of B_pool)
        n += batch * r;
        if inner {
            n += batch * r;
        }
    } else {
        // h feeds GeLU or B_pool directly
        n += batch * r;
        if inner {
            n += batch * r;
        }
    }
    if outer {
        n += batch * out_dim;
    }
    // α scaling keeps the projected update
    n += batch * out_dim;
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape_with(x: &[f64], shape: Vec<usize>) -> (Tape<f64>, TensorId) {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::from_f64(shape, x).unwrap(), false);
        (tape, id)
    }

    #[test]
    fn fixed_pool_is_mean_plus_last() {
        let (mut tape, x) = tape_with(&[1.0, 2.0, 3.0, 4.0], vec![1, 2, 2]);
        let p = lars_pool_fixed(&mut tape, x).unwrap();
        assert_eq!(tape.data(p), &[5.0, 7.0]);
        assert_eq!(tape.ledger().total(), 0);
    }

    #[test]
    fn fixed_pool_of_single_token_doubles_it() {
        let (mut tape, x) = tape_with(&[0.5, -1.5, 2.0], vec![1, 1, 3]);
        let p = lars_pool_fixed(&mut tape, x).unwrap();
        assert_eq!(tape.data(p), &[1.0, -3.0, 4.0]);
        let (mut tape, z) = tape_with(&[0.0; 6], vec![1, 3, 2]);
        let p = lars_pool_fixed(&mut tape, z).unwrap();
        assert_eq!(tape.data(p), &[0.0, 0.0]);
    }

    #[test]
    fn zero_length_sequence_cannot_be_built() {
        assert!(Tensor::<f64>::zeros(vec![1, 0, 2]).is_err());
    }

    #[test]
    fn learned_pool_with_zero_scores_is_mean() {
        let (mut tape, x) = tape_with(&[1.0, 2.0, 3.0, 4.0, 5.0, 9.0], vec![1, 3, 2]);
        tape.gelu(x).unwrap();
        let w = tape.param(&Tensor::zeros(vec![2]).unwrap(), true);
        tape.push_scope("adapter:lars");
        let p = lars_pool_learned(&mut tape, x, w).unwrap();
        tape.pop_scope().unwrap();
        let got = tape.data(p);
        assert!((got[0] - 3.0).abs() < 1e-12 && (got[1] - 5.0).abs() < 1e-12);
        // X is already on the ledger; only the softmax weights are new
        assert_eq!(tape.ledger().scope_bytes("adapter:lars"), 3 * 8);
    }

    #[test]
    fn learned_pool_single_token_ignores_weights() {
        let (mut tape, x) = tape_with(&[0.3, -0.7], vec![1, 1, 2]);
        let w = tape.param(&Tensor::from_f64(vec![2], &[4.0, -2.0]).unwrap(), true);
        let p = lars_pool_learned(&mut tape, x, w).unwrap();
        assert_eq!(tape.data(p), &[0.3, -0.7]);
    }

    #[test]
    fn learned_pool_focuses_on_high_score_token() {
        let (mut tape, x) = tape_with(&[1.0, 0.0, 0.0, 1.0], vec![1, 2, 2]);
        let w = tape.param(&Tensor::from_f64(vec![2], &[10.0, 0.0]).unwrap(), true);
        let p = lars_pool_learned(&mut tape, x, w).unwrap();
        // scalar softmax oracle
        let (e1, e2) = (10.0f64.exp(), 0.0f64.exp());
        let expect = [e1 / (e1 + e2), e2 / (e1 + e2)];
        let got = tape.data(p);
        assert!((got[0] - expect[0]).abs() < 1e-12 && (got[1] - expect[1]).abs() < 1e-12);
        assert!((got[0] - 1.0).abs() < 1e-4 && got[1].abs() < 1e-4);
    }

    #[test]
    fn rank_must_be_below_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = LarsConfig {
            rank: 16,
            ..Default::default()
        };
        assert!(LarsParams::<f32>::init(&cfg, 16, 16, &mut rng).is_err());
    }
}
