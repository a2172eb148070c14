//! The Wengert tape. Every differentiable op appends one entry holding a
//! backward closure over its operand handles; entries are therefore already
//! in topological order, and reverse replay visits each node after all of its
//! consumers.

use std::cell::RefCell;

use crate::error::{PhantomError, Result};

use super::Tensor;

pub(crate) struct TapeEntry {
    pub backward: Box<dyn Fn()>,
}

struct TapeState {
    entries: Vec<TapeEntry>,
    recording: bool,
    consumed: bool,
}

/// Records forward operations and replays them in reverse to produce
/// gradients. A tape is confined to one thread for the duration of a
/// forward/backward episode.
pub struct Tape {
    state: RefCell<TapeState>,
}

impl Tape {
    /// A recording tape for training-style forward passes.
    pub fn new() -> Tape {
        Tape {
            state: RefCell::new(TapeState {
                entries: Vec::new(),
                recording: true,
                consumed: false,
            }),
        }
    }

    /// A non-recording tape: ops compute values only, never gradients.
    pub fn no_grad() -> Tape {
        Tape {
            state: RefCell::new(TapeState {
                entries: Vec::new(),
                recording: false,
                consumed: false,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.state.borrow().recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.state.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(&self, backward: Box<dyn Fn()>) {
        self.state.borrow_mut().entries.push(TapeEntry { backward });
    }

    /// Seeds `root` with gradient 1 and replays the tape in reverse, filling
    /// `grad` on every grad-requiring tensor that took part in a recorded op.
    ///
    /// Errors when the root is not scalar, the tape recorded nothing, or
    /// backward already ran without an intervening [`Tape::reset`].
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        {
            let state = self.state.borrow();
            if state.consumed {
                return Err(PhantomError::DoubleBackward);
            }
            if state.entries.is_empty() {
                return Err(PhantomError::EmptyTape);
            }
        }
        if root.numel() != 1 {
            return Err(PhantomError::NonScalarRoot { shape: root.dims() });
        }

        root.ensure_grad();
        {
            let mut inner = root.borrow_mut();
            if let Some(g) = inner.grad.as_mut() {
                g[0] = 1.0;
            } else {
                // Root does not require gradients: nothing can flow.
                inner.grad = Some(vec![1.0]);
            }
        }

        let mut state = self.state.borrow_mut();
        state.consumed = true;
        for entry in state.entries.iter().rev() {
            (entry.backward)();
        }
        Ok(())
    }

    /// Clears recorded entries and re-arms the tape for another episode.
    /// Gradients accumulated on tensors are left untouched.
    pub fn reset(&self) {
        let mut state = self.state.borrow_mut();
        state.entries.clear();
        state.consumed = false;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        match tape.backward(&y) {
            Err(PhantomError::NonScalarRoot { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarRoot, got {other:?}"),
        }
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let tape = Tape::new();
        let x = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&x), Err(PhantomError::EmptyTape)));
    }

    #[test]
    fn double_backward_without_reset_errors() {
        let tape = Tape::new();
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert!(matches!(tape.backward(&y), Err(PhantomError::DoubleBackward)));
        tape.reset();
        let y2 = tape.mul(&x, &x).unwrap();
        tape.backward(&y2).unwrap();
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(y.item(), 9.0);
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
        assert!(x.grad().is_none());
    }
}
