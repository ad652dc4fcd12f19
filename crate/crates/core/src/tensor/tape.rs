use std::collections::BTreeMap;

use super::kernels;
use super::ledger::{ActivationLedger, StorageId};
use super::primitive::{Primitive, SavedSet};
use super::value::{check_shape, Element, Tensor};
use crate::error::{Error, Result};

pub const BASE_SCOPE: &str = "base";

/// Handle to a tensor recorded on a [`Tape`]. Never reused within one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot {
    shape: Vec<usize>,
    storage: usize,
    requires_grad: bool,
    param: bool,
}

/// One recorded differentiable operation.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeNode {
    pub op: Primitive,
    pub input_ids: Vec<TensorId>,
    pub output_id: TensorId,
    /// Inputs, output or auxiliary tensors retained for the backward rule.
    pub saved_ids: Vec<TensorId>,
    pub scope: String,
}

/// Deliberately wrong backward rule, for negative-control tests of the
/// gradient checker.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardFault {
    pub op: String,
    pub factor: f64,
}

/// Gradients keyed by tensor handle.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<TensorId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode tape with scope-attributed activation accounting.
///
/// Parameters (trainable or frozen) are registered with [`Tape::param`] and
/// never count as activation bytes; everything else a primitive saves does.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    slots: Vec<Slot>,
    storages: Vec<Vec<T>>,
    nodes: Vec<TapeNode>,
    scopes: Vec<String>,
    ledger: ActivationLedger,
    budget: Option<u64>,
    fault: Option<BackwardFault>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            storages: Vec::new(),
            nodes: Vec::new(),
            scopes: Vec::new(),
            ledger: ActivationLedger::new(),
            budget: None,
            fault: None,
        }
    }

    /// Recording fails with [`Error::BudgetExceeded`] once saved bytes pass `bytes`.
    pub fn with_budget(mut self, bytes: Option<u64>) -> Self {
        self.budget = bytes;
        self
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    fn push_slot(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, param: bool) -> TensorId {
        self.storages.push(data);
        self.slots.push(Slot {
            shape,
            storage: self.storages.len() - 1,
            requires_grad,
            param,
        });
        TensorId(self.slots.len() - 1)
    }

    /// Input data (token embeddings, masks, targets).
    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> TensorId {
        let shape = tensor.shape().to_vec();
        self.push_slot(shape, tensor.into_data(), requires_grad, false)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> TensorId {
        self.leaf(tensor, false)
    }

    /// Model weight; `trainable` decides whether it receives a gradient.
    pub fn param(&mut self, tensor: &Tensor<T>, trainable: bool) -> TensorId {
        self.push_slot(tensor.shape().to_vec(), tensor.data().to_vec(), trainable, true)
    }

    pub fn push_scope(&mut self, label: impl Into<String>) {
        self.scopes.push(label.into());
    }

    pub fn pop_scope(&mut self) -> Result<()> {
        self.scopes.pop().map(|_| ()).ok_or(Error::ScopeUnderflow)
    }

    pub fn current_scope(&self) -> &str {
        self.scopes.last().map(String::as_str).unwrap_or(BASE_SCOPE)
    }

    /// Runs `f` with `label` pushed, popping it on both success and error.
    pub fn scoped<R>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.push_scope(label);
        let out = f(self);
        self.pop_scope()?;
        out
    }

    pub fn apply_named(&mut self, kind: &str, inputs: &[TensorId]) -> Result<TensorId> {
        let op: Primitive = kind.parse()?;
        self.apply(op, inputs)
    }

    /// Evaluates `op`, records one node and its saved set on the ledger.
    pub fn apply(&mut self, op: Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&id| self.slots[id.0].shape.as_slice()).collect();
        let out_shape = op.output_shape(&shapes)?;
        check_shape(&out_shape)?;
        let requires_grad = inputs.iter().any(|&id| self.slots[id.0].requires_grad);

        let output = if let Primitive::Reshape(_) = op {
            let source = &self.slots[inputs[0].0];
            let (storage, param) = (source.storage, source.param);
            self.slots.push(Slot {
                shape: out_shape,
                storage,
                requires_grad,
                param,
            });
            TensorId(self.slots.len() - 1)
        } else {
            let args: Vec<(&[usize], &[T])> = inputs
                .iter()
                .map(|&id| {
                    let slot = &self.slots[id.0];
                    (slot.shape.as_slice(), self.storages[slot.storage].as_slice())
                })
                .collect();
            let fwd = kernels::forward(&op, &args, &out_shape);
            let output = self.push_slot(out_shape, fwd.out, requires_grad, false);
            let aux: Vec<TensorId> = fwd
                .aux
                .into_iter()
                .map(|(shape, data)| self.push_slot(shape, data, false, false))
                .collect();
            if !aux.is_empty() {
                let saved = match op.saves() {
                    SavedSet::InputAndStats => vec![inputs[0], aux[0], aux[1]],
                    _ => aux,
                };
                return self.record(op, inputs, output, saved);
            }
            output
        };

        let saved = match op.saves() {
            SavedSet::Nothing => Vec::new(),
            SavedSet::BothInputs => inputs.to_vec(),
            SavedSet::FirstInput => vec![inputs[0]],
            SavedSet::Output => vec![output],
            SavedSet::InputAndStats | SavedSet::Probabilities => {
                unreachable!("ops with auxiliary tensors are recorded above")
            }
        };
        self.record(op, inputs, output, saved)
    }

    fn record(&mut self, op: Primitive, inputs: &[TensorId], output: TensorId, saved: Vec<TensorId>) -> Result<TensorId> {
        let scope = self.current_scope().to_string();
        for &id in &saved {
            let slot = &self.slots[id.0];
            if slot.param {
                continue;
            }
            let bytes = (self.storages[slot.storage].len() * T::DTYPE.size()) as u64;
            self.ledger.record(StorageId(slot.storage), bytes, &scope);
        }
        self.nodes.push(TapeNode {
            op,
            input_ids: inputs.to_vec(),
            output_id: output,
            saved_ids: saved,
            scope,
        });
        if let Some(budget) = self.budget {
            if self.ledger.total() > budget {
                return Err(Error::BudgetExceeded {
                    budget,
                    requested: self.ledger.total(),
                });
            }
        }
        Ok(output)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.apply(Primitive::ScaleConst(c), &[x])
    }

    pub fn scale_by(&mut self, x: TensorId, scalar: TensorId) -> Result<TensorId> {
        self.apply(Primitive::ScaleBy, &[x, scalar])
    }

    pub fn mean(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.apply(Primitive::MeanOverAxis(axis), &[x])
    }

    pub fn sum(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.apply(Primitive::SumOverAxis(axis), &[x])
    }

    pub fn select(&mut self, x: TensorId, axis: usize, index: usize) -> Result<TensorId> {
        self.apply(Primitive::SelectIndex { axis, index }, &[x])
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.apply(Primitive::SoftmaxOverAxis(axis), &[x])
    }

    pub fn layer_norm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        self.apply(Primitive::LayerNorm { eps }, &[x])
    }

    pub fn broadcast(&mut self, x: TensorId, axis: usize, len: usize) -> Result<TensorId> {
        self.apply(Primitive::BroadcastOverAxis { axis, len }, &[x])
    }

    pub fn transpose(&mut self, x: TensorId, a: usize, b: usize) -> Result<TensorId> {
        self.apply(Primitive::Transpose(a, b), &[x])
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.apply(Primitive::Reshape(shape), &[x])
    }

    pub fn cross_entropy(&mut self, logits: TensorId, targets: Vec<usize>) -> Result<TensorId> {
        self.apply(Primitive::CrossEntropy(targets), &[logits])
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n: usize = self.shape(x).iter().product();
        let flat = self.reshape(x, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.storages[self.slots[id.0].storage]
    }

    pub fn tensor(&self, id: TensorId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec()).expect("tape slots are well-formed")
    }

    pub fn storage_of(&self, id: TensorId) -> StorageId {
        StorageId(self.slots[id.0].storage)
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.slots[id.0].requires_grad
    }

    pub fn is_param(&self, id: TensorId) -> bool {
        self.slots[id.0].param
    }

    /// Bytes held by the tensor's storage.
    pub fn bytes_of(&self, id: TensorId) -> u64 {
        (self.data(id).len() * T::DTYPE.size()) as u64
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn ledger(&self) -> &ActivationLedger {
        &self.ledger
    }

    pub fn ledger_snapshot(&self) -> ActivationLedger {
        self.ledger.clone()
    }

    /// Gradients of a one-element `loss` for every tensor with `requires_grad`.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.slots.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.output_id.0].take() else {
                continue;
            };
            let needs: Vec<bool> = node.input_ids.iter().map(|&id| self.slots[id.0].requires_grad).collect();
            if needs.iter().any(|&n| n) {
                let shapes: Vec<&[usize]> = node.input_ids.iter().map(|&id| self.shape(id)).collect();
                let saved: Vec<&[T]> = node.saved_ids.iter().map(|&id| self.data(id)).collect();
                let mut input_grads = kernels::backward(&node.op, &shapes, &saved, &g, &needs);
                if let Some(fault) = self.fault.as_ref().filter(|f| f.op == node.op.name()) {
                    if let Some(Some(first)) = input_grads.first_mut() {
                        let factor = T::of(fault.factor);
                        first.iter_mut().for_each(|v| *v = *v * factor);
                    }
                }
                for (&id, grad) in node.input_ids.iter().zip(input_grads) {
                    let Some(grad) = grad else { continue };
                    match &mut grads[id.0] {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &v)| *a = *a + v),
                        slot @ None => *slot = Some(grad),
                    }
                }
            }
            grads[node.output_id.0] = Some(g);
        }

        let grads = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, slot)| slot.requires_grad)
            .map(|(i, slot)| {
                let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); self.storages[slot.storage].len()]);
                (TensorId(i), Tensor::new(slot.shape.clone(), data).expect("gradient matches slot shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}
