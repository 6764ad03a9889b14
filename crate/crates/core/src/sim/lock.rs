//! Simulated kernel locks: per-node spinlocks (interrupt-disabling), per-CPU
//! scheduling locks, and the interrupt-disable bookkeeping.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LockError {
    #[error("thread {thread} re-acquired lock {lock} it already holds")]
    Recursion { thread: usize, lock: usize },
    #[error("thread {thread} released lock {lock} held by {holder:?}")]
    ForeignRelease { thread: usize, lock: usize, holder: Option<usize> },
    #[error("thread {thread} released cpu lock {cpu} it does not hold")]
    CpuLockRelease { thread: usize, cpu: usize },
}

/// Lock and interrupt state for every CPU and tree node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct LockState {
    /// Node spinlocks, indexed by lock identity (== node index). Value is the
    /// holding thread.
    pub spin: Vec<Option<usize>>,
    /// Exclusive-run token per CPU; held by the task scheduled there.
    pub cpu_lock: Vec<Option<usize>>,
    /// Interrupt-disable nesting depth per CPU.
    pub local_irq_depth: Vec<u32>,
    /// Whether interrupts are disabled, per CPU.
    pub irq_lock: Vec<bool>,
}

impl LockState {
    pub fn new(cpus: usize, nodes: usize) -> Self {
        LockState {
            spin: vec![None; nodes],
            cpu_lock: vec![None; cpus],
            local_irq_depth: vec![0; cpus],
            irq_lock: vec![false; cpus],
        }
    }

    pub fn spin_free(&self, lock: usize) -> bool {
        self.spin[lock].is_none()
    }

    /// Test-and-set acquire. Node spinlocks disable interrupts on their CPU
    /// for as long as they are held.
    pub fn spin_try_acquire(&mut self, thread: usize, cpu: usize, lock: usize) -> Result<bool, LockError> {
        match self.spin[lock] {
            Some(h) if h == thread => Err(LockError::Recursion { thread, lock }),
            Some(_) => Ok(false),
            None => {
                self.spin[lock] = Some(thread);
                self.irq_disable(cpu);
                Ok(true)
            }
        }
    }

    pub fn spin_release(&mut self, thread: usize, cpu: usize, lock: usize) -> Result<(), LockError> {
        if self.spin[lock] != Some(thread) {
            return Err(LockError::ForeignRelease { thread, lock, holder: self.spin[lock] });
        }
        self.spin[lock] = None;
        self.irq_enable(cpu);
        Ok(())
    }

    pub fn cpu_try_acquire(&mut self, thread: usize, cpu: usize) -> bool {
        if self.cpu_lock[cpu].is_none() {
            self.cpu_lock[cpu] = Some(thread);
            true
        } else {
            false
        }
    }

    pub fn cpu_release(&mut self, thread: usize, cpu: usize) -> Result<(), LockError> {
        if self.cpu_lock[cpu] != Some(thread) {
            return Err(LockError::CpuLockRelease { thread, cpu });
        }
        self.cpu_lock[cpu] = None;
        Ok(())
    }

    pub fn irq_disable(&mut self, cpu: usize) {
        self.local_irq_depth[cpu] += 1;
        self.irq_lock[cpu] = true;
    }

    pub fn irq_enable(&mut self, cpu: usize) {
        debug_assert!(self.local_irq_depth[cpu] > 0);
        self.local_irq_depth[cpu] -= 1;
        self.irq_lock[cpu] = self.local_irq_depth[cpu] > 0;
    }

    pub fn irqs_enabled(&self, cpu: usize) -> bool {
        !self.irq_lock[cpu]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spin_mutual_exclusion_and_irq_tracking() {
        let mut l = LockState::new(2, 1);
        assert!(l.spin_try_acquire(0, 0, 0).unwrap());
        assert!(!l.irqs_enabled(0));
        assert!(!l.spin_try_acquire(1, 1, 0).unwrap());
        assert_eq!(l.spin_try_acquire(0, 0, 0), Err(LockError::Recursion { thread: 0, lock: 0 }));
        assert_eq!(
            l.spin_release(1, 1, 0),
            Err(LockError::ForeignRelease { thread: 1, lock: 0, holder: Some(0) })
        );
        l.spin_release(0, 0, 0).unwrap();
        assert!(l.irqs_enabled(0));
        assert!(l.spin_try_acquire(1, 1, 0).unwrap());
    }

    #[test]
    fn irq_nesting_depth() {
        let mut l = LockState::new(1, 2);
        l.spin_try_acquire(0, 0, 0).unwrap();
        l.irq_disable(0);
        assert_eq!(l.local_irq_depth[0], 2);
        l.spin_release(0, 0, 0).unwrap();
        assert!(!l.irqs_enabled(0));
        l.irq_enable(0);
        assert!(l.irqs_enabled(0));
    }

    #[test]
    fn cpu_lock_is_exclusive() {
        let mut l = LockState::new(1, 0);
        assert!(l.cpu_try_acquire(0, 0));
        assert!(!l.cpu_try_acquire(1, 0));
        assert!(l.cpu_release(1, 0).is_err());
        l.cpu_release(0, 0).unwrap();
        assert!(l.cpu_try_acquire(1, 0));
    }
}
