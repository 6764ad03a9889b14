//! The modeled kernel environment and exploration engine: virtual CPUs, lock
//! and interrupt models, shared-cell memory models, a deterministic
//! scheduler, and the native stress runner.

pub mod cell;
pub mod driver;
pub mod explore;
pub mod lock;
pub mod native;
pub mod step;
pub mod thread;
pub mod trace;
pub mod world;

use thiserror::Error;

/// A broken model rule. Distinct from a property violation: these indicate
/// the simulated kernel was driven outside its contract and abort the run
/// with a diagnostic.
#[derive(Debug, Error)]
pub enum ModelViolation {
    #[error("lock protocol violated: {0}")]
    Lock(#[from] lock::LockError),
    #[error("context switch inside a read-side critical section on cpu {0}")]
    SwitchInCriticalSection(usize),
    #[error("unbalanced rcu_read_unlock on cpu {0}")]
    UnbalancedUnlock(usize),
    #[error("grace-period driver misuse: {0}")]
    Driver(String),
    #[error("step audit failed: {0}")]
    Audit(String),
    #[error("callback queue misuse: {0}")]
    Cbs(#[from] crate::cbs::CbsError),
}
