//! Dense tensors, a reverse-mode tape, and the activation ledger.

mod gradcheck;
mod kernels;
mod ledger;
mod primitive;
mod tape;
mod value;

pub use gradcheck::{finite_diff_gradcheck, GradCheckReport};
pub use ledger::{ActivationLedger, LedgerEntry, StorageId};
pub use primitive::{Primitive, SavedSet};
pub use tape::{BackwardFault, Gradients, Tape, TapeNode, TensorId, BASE_SCOPE};
pub use value::{DType, Element, Tensor};
