//! Deliberate kernel faults, used to prove that the invariant suite notices
//! broken math. Faults are scoped to the calling thread.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Softmax normalizes over the axis before the requested one.
    SoftmaxAxis,
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Runs `f` with `fault` injected into the kernels.
pub fn with_fault<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<Fault>);
    impl Drop for Reset {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }
    let _reset = Reset(ACTIVE.with(|a| a.replace(Some(fault))));
    f()
}

pub(crate) fn is_active(fault: Fault) -> bool {
    ACTIVE.with(|a| a.get() == Some(fault))
}
