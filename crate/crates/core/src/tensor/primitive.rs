use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Differentiable primitives recorded on the tape.
///
/// The saved-for-backward set of each kind is fixed (see [`Primitive::saves`])
/// and is exactly what the activation ledger measures.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[.., m, k] x [.., k, n]`; the right operand may be a shared 2-D matrix.
    Matmul,
    Add,
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
    /// Multiplication by a compile-time constant.
    ScaleConst(f64),
    /// Multiplication by a one-element tensor (`inputs = [x, scalar]`).
    ScaleBy,
    MeanOverAxis(usize),
    SumOverAxis(usize),
    SelectIndex { axis: usize, index: usize },
    Sigmoid,
    Gelu,
    SoftmaxOverAxis(usize),
    /// Affine-free normalization over the last axis.
    LayerNorm { eps: f64 },
    /// Inserts a new axis of extent `len` at `axis`.
    BroadcastOverAxis { axis: usize, len: usize },
    /// Swaps two axes (materialized).
    Transpose(usize, usize),
    /// View with a new shape; shares the input's storage.
    Reshape(Vec<usize>),
    /// Mean cross-entropy of `[n, classes]` logits against integer targets.
    CrossEntropy(Vec<usize>),
}

/// Which tensors a primitive keeps alive for its backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SavedSet {
    Nothing,
    BothInputs,
    FirstInput,
    Output,
    /// Input plus the per-row mean and variance.
    InputAndStats,
    /// Auxiliary softmax probabilities.
    Probabilities,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScaleConst(_) => "scalar_mul",
            Primitive::ScaleBy => "scalar_mul_param",
            Primitive::MeanOverAxis(_) => "mean_over_axis",
            Primitive::SumOverAxis(_) => "sum_over_axis",
            Primitive::SelectIndex { .. } => "select_index",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Gelu => "gelu",
            Primitive::SoftmaxOverAxis(_) => "softmax_over_axis",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::BroadcastOverAxis { .. } => "broadcast_over_axis",
            Primitive::Transpose(..) => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::CrossEntropy(_) => "cross_entropy",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Matmul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::ScaleBy => 2,
            _ => 1,
        }
    }

    pub fn saves(&self) -> SavedSet {
        match self {
            // ScaleBy keeps its scalar too, but the scalar is a parameter and
            // parameters never count as activation bytes.
            Primitive::Matmul | Primitive::Mul | Primitive::ScaleBy => SavedSet::BothInputs,
            Primitive::Gelu => SavedSet::FirstInput,
            Primitive::Sigmoid | Primitive::SoftmaxOverAxis(_) => SavedSet::Output,
            Primitive::LayerNorm { .. } => SavedSet::InputAndStats,
            Primitive::CrossEntropy(_) => SavedSet::Probabilities,
            Primitive::Add
            | Primitive::Sub
            | Primitive::ScaleConst(_)
            | Primitive::MeanOverAxis(_)
            | Primitive::SumOverAxis(_)
            | Primitive::SelectIndex { .. }
            | Primitive::BroadcastOverAxis { .. }
            | Primitive::Transpose(..)
            | Primitive::Reshape(_) => SavedSet::Nothing,
        }
    }

    /// Output shape for the given input shapes, or the offending dimension pair.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let op = self.name();
        if inputs.len() != self.arity() {
            return Err(Error::Arity {
                op,
                expected: self.arity(),
                got: inputs.len(),
            });
        }
        let x = inputs[0];
        match self {
            Primitive::Matmul => matmul_shape(x, inputs[1]),
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let y = inputs[1];
                if y.len() > x.len() {
                    return Err(Error::RankMismatch {
                        op,
                        left: x.len(),
                        right: y.len(),
                    });
                }
                let offset = x.len() - y.len();
                for (i, &d) in y.iter().enumerate() {
                    if x[offset + i] != d {
                        return Err(Error::ShapeMismatch {
                            op,
                            left: x[offset + i],
                            right: d,
                        });
                    }
                }
                Ok(x.to_vec())
            }
            Primitive::ScaleBy => {
                let s: usize = inputs[1].iter().product();
                if s != 1 {
                    return Err(Error::ShapeMismatch { op, left: 1, right: s });
                }
                Ok(x.to_vec())
            }
            Primitive::ScaleConst(_) | Primitive::Sigmoid | Primitive::Gelu => Ok(x.to_vec()),
            Primitive::MeanOverAxis(axis) | Primitive::SumOverAxis(axis) => {
                check_axis(op, *axis, x.len())?;
                let mut out = x.to_vec();
                out.remove(*axis);
                if out.is_empty() {
                    out.push(1);
                }
                Ok(out)
            }
            Primitive::SelectIndex { axis, index } => {
                check_axis(op, *axis, x.len())?;
                if *index >= x[*axis] {
                    return Err(Error::IndexOutOfRange {
                        op,
                        index: *index,
                        extent: x[*axis],
                    });
                }
                let mut out = x.to_vec();
                out.remove(*axis);
                if out.is_empty() {
                    out.push(1);
                }
                Ok(out)
            }
            Primitive::SoftmaxOverAxis(axis) => {
                check_axis(op, *axis, x.len())?;
                Ok(x.to_vec())
            }
            Primitive::LayerNorm { .. } => Ok(x.to_vec()),
            Primitive::BroadcastOverAxis { axis, len } => {
                check_axis(op, *axis, x.len() + 1)?;
                if *len == 0 {
                    return Err(Error::EmptyShape(vec![0]));
                }
                let mut out = x.to_vec();
                out.insert(*axis, *len);
                Ok(out)
            }
            Primitive::Transpose(a, b) => {
                check_axis(op, *a, x.len())?;
                check_axis(op, *b, x.len())?;
                let mut out = x.to_vec();
                out.swap(*a, *b);
                Ok(out)
            }
            Primitive::Reshape(shape) => {
                let from: usize = x.iter().product();
                let to: usize = shape.iter().product();
                if from != to || shape.contains(&0) {
                    return Err(Error::ShapeMismatch { op, left: from, right: to });
                }
                Ok(shape.clone())
            }
            Primitive::CrossEntropy(targets) => {
                if x.len() != 2 {
                    return Err(Error::RankMismatch { op, left: x.len(), right: 2 });
                }
                if targets.len() != x[0] {
                    return Err(Error::ShapeMismatch {
                        op,
                        left: x[0],
                        right: targets.len(),
                    });
                }
                if let Some(&t) = targets.iter().find(|&&t| t >= x[1]) {
                    return Err(Error::IndexOutOfRange {
                        op,
                        index: t,
                        extent: x[1],
                    });
                }
                Ok(vec![1])
            }
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let op = "matmul";
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::RankMismatch {
            op,
            left: a.len(),
            right: b.len(),
        });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::ShapeMismatch { op, left: k, right: k2 });
    }
    if b.len() > 2 {
        if a.len() != b.len() {
            return Err(Error::RankMismatch {
                op,
                left: a.len(),
                right: b.len(),
            });
        }
        for (&da, &db) in a[..a.len() - 2].iter().zip(&b[..b.len() - 2]) {
            if da != db {
                return Err(Error::ShapeMismatch { op, left: da, right: db });
            }
        }
    }
    let mut out = a[..a.len() - 2].to_vec();
    out.extend([m, n]);
    Ok(out)
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `name` or `name:arg[,arg..]`, e.g. `matmul`, `mean_over_axis:1`,
/// `scalar_mul:0.5`, `select_index:1,7`, `layer_norm:1e-5`.
impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, a.split(',').map(str::trim).collect::<Vec<_>>()),
            None => (s, Vec::new()),
        };
        let unknown = || Error::UnknownPrimitive(s.to_string());
        let int = |i: usize| -> Result<usize> {
            args.get(i).and_then(|a| a.parse().ok()).ok_or_else(unknown)
        };
        let float = |i: usize| -> Result<f64> {
            args.get(i).and_then(|a| a.parse().ok()).ok_or_else(unknown)
        };
        Ok(match name.trim() {
            "matmul" => Primitive::Matmul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "scalar_mul" => Primitive::ScaleConst(float(0)?),
            "scalar_mul_param" => Primitive::ScaleBy,
            "mean_over_axis" => Primitive::MeanOverAxis(int(0)?),
            "sum_over_axis" => Primitive::SumOverAxis(int(0)?),
            "select_index" => Primitive::SelectIndex {
                axis: int(0)?,
                index: int(1)?,
            },
            "sigmoid" => Primitive::Sigmoid,
            "gelu" => Primitive::Gelu,
            "softmax_over_axis" => Primitive::SoftmaxOverAxis(int(0)?),
            "layer_norm" => Primitive::LayerNorm {
                eps: if args.is_empty() { 1e-5 } else { float(0)? },
            },
            "broadcast_over_axis" => Primitive::BroadcastOverAxis {
                axis: int(0)?,
                len: int(1)?,
            },
            "transpose" => {
                if args.is_empty() {
                    return Err(unknown());
                }
                Primitive::Transpose(int(0)?, int(1)?)
            }
            _ => return Err(unknown()),
        })
    }
}
