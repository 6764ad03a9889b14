//! Instrumented shared cells and the store-buffer memory-model layer.
//!
//! Instrumented cells route every access through this layer; everything else
//! in the model is lock-protected and sequentially consistent. Under TSO each
//! CPU has one FIFO store buffer; under PSO the buffer keeps FIFO order only
//! per cell, so stores to different cells may flush out of order. Loads always
//! see the CPU's own newest buffered store first (store forwarding).

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MemoryModel {
    Sc,
    Tso,
    Pso,
}

impl MemoryModel {
    pub fn name(&self) -> &'static str {
        match self {
            MemoryModel::Sc => "sc",
            MemoryModel::Tso => "tso",
            MemoryModel::Pso => "pso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sc" => MemoryModel::Sc,
            "tso" => MemoryModel::Tso,
            "pso" => MemoryModel::Pso,
            _ => return None,
        })
    }
}

/// Address of an instrumented cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CellAddr {
    /// Litmus variable written by the updater before `synchronize`.
    X,
    /// Litmus variable written by the updater after `synchronize`.
    Y,
    /// Reader-side observation registers, one pair per reader.
    R1(u8),
    R2(u8),
    /// The updater's per-grace-period wait flag.
    WaitFlag,
    PassedQuiesce(u8),
    QsPending(u8),
    /// Extra cells for raw litmus programs.
    Lit(u8),
}

impl CellAddr {
    pub fn name(&self) -> String {
        match self {
            CellAddr::X => "x".into(),
            CellAddr::Y => "y".into(),
            CellAddr::R1(i) => format!("r1[{i}]"),
            CellAddr::R2(i) => format!("r2[{i}]"),
            CellAddr::WaitFlag => "wait_rcu_gp_flag".into(),
            CellAddr::PassedQuiesce(c) => format!("passed_quiesce[{c}]"),
            CellAddr::QsPending(c) => format!("qs_pending[{c}]"),
            CellAddr::Lit(i) => format!("lit[{i}]"),
        }
    }
}

/// One CPU's pending stores, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct StoreBuffer {
    pub entries: Vec<(CellAddr, u64)>,
}

impl StoreBuffer {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Newest buffered value for `addr`, if any (store forwarding).
    pub fn forward(&self, addr: CellAddr) -> Option<u64> {
        self.entries.iter().rev().find(|(a, _)| *a == addr).map(|&(_, v)| v)
    }

    /// Oldest entry overall (the only flushable one under TSO).
    pub fn pop_oldest(&mut self) -> Option<(CellAddr, u64)> {
        if self.entries.is_empty() {
            None
        } else {
            Some(self.entries.remove(0))
        }
    }

    /// Oldest entry for one cell (flushable under PSO).
    pub fn pop_oldest_for(&mut self, addr: CellAddr) -> Option<(CellAddr, u64)> {
        let pos = self.entries.iter().position(|(a, _)| *a == addr)?;
        Some(self.entries.remove(pos))
    }

    /// Distinct addresses with pending stores, in address order.
    pub fn pending_addrs(&self) -> Vec<CellAddr> {
        let mut addrs: Vec<CellAddr> = self.entries.iter().map(|&(a, _)| a).collect();
        addrs.sort();
        addrs.dedup();
        addrs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forwarding_returns_newest() {
        let mut b = StoreBuffer::default();
        b.entries.push((CellAddr::X, 1));
        b.entries.push((CellAddr::Y, 7));
        b.entries.push((CellAddr::X, 2));
        assert_eq!(b.forward(CellAddr::X), Some(2));
        assert_eq!(b.forward(CellAddr::Y), Some(7));
        assert_eq!(b.forward(CellAddr::WaitFlag), None);
    }

    #[test]
    fn pso_pop_keeps_per_cell_fifo() {
        let mut b = StoreBuffer::default();
        b.entries.push((CellAddr::X, 1));
        b.entries.push((CellAddr::Y, 7));
        b.entries.push((CellAddr::X, 2));
        assert_eq!(b.pop_oldest_for(CellAddr::X), Some((CellAddr::X, 1)));
        assert_eq!(b.pop_oldest_for(CellAddr::X), Some((CellAddr::X, 2)));
        assert_eq!(b.pop_oldest_for(CellAddr::X), None);
        assert_eq!(b.pop_oldest(), Some((CellAddr::Y, 7)));
    }
}
