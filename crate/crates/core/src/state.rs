//! Core Tree RCU records and their cross-level consistency rules.
//!
//! Counters are wide and never wrap. Field names follow the kernel's
//! (`gpnum`, `completed`, `qsmask`, ...) so trace dumps can be audited against
//! kernel documentation.

use crate::cbs::SegmentedCallbackList;
use crate::geometry::TreeGeometry;
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invariant violated: {0}")]
pub struct InvariantViolation(pub String);

/// Set of child ordinals still owing (or present for) quiescent states.
/// Ordinals are explicit bit positions 0..fanout-1; fan-outs are capped at 64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ChildSet(u64);

impl ChildSet {
    pub fn empty() -> Self {
        ChildSet(0)
    }

    pub fn insert(&mut self, ordinal: usize) {
        debug_assert!(ordinal < 64);
        self.0 |= 1 << ordinal;
    }

    pub fn remove(&mut self, ordinal: usize) {
        self.0 &= !(1 << ordinal);
    }

    pub fn contains(&self, ordinal: usize) -> bool {
        self.0 & (1 << ordinal) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(&self, other: &ChildSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn ordinals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(|&b| self.contains(b))
    }

    pub fn single(ordinal: usize) -> Self {
        let mut s = ChildSet::empty();
        s.insert(ordinal);
        s
    }

    pub fn intersects(&self, other: &ChildSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn subtract(&mut self, other: &ChildSet) {
        self.0 &= !other.0;
    }
}

impl Serialize for ChildSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.len()))?;
        for o in self.ordinals() {
            seq.serialize_element(&o)?;
        }
        seq.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum GpFlags {
    None,
    /// A new grace period has been requested.
    FlagInit,
}

/// Lifecycle phase of the grace-period driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum GpLifecycle {
    WaitGps,
    Init,
    WaitQs,
    Cleanup,
    Cleaned,
}

/// Global grace-period state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct RcuState {
    /// Most recently started grace period.
    pub gpnum: u64,
    /// Most recently ended grace period.
    pub completed: u64,
    pub gp_flags: GpFlags,
    pub gp_state: GpLifecycle,
}

impl RcuState {
    pub fn idle() -> Self {
        RcuState { gpnum: 0, completed: 0, gp_flags: GpFlags::None, gp_state: GpLifecycle::WaitGps }
    }

    /// True iff no grace period is in flight. Only gpnum == completed and
    /// gpnum == completed + 1 are valid states.
    pub fn is_idle(&self) -> bool {
        self.gpnum == self.completed
    }

    pub fn check(&self) -> Result<(), InvariantViolation> {
        let d = self.gpnum.wrapping_sub(self.completed);
        if d > 1 {
            return Err(InvariantViolation(format!(
                "gpnum {} / completed {} is not a valid combination",
                self.gpnum, self.completed
            )));
        }
        Ok(())
    }
}

/// `is_idle` with the state invariant enforced: gpnum more than one ahead of
/// completed is a fault, not an answer.
pub fn is_idle_checked(state: &RcuState) -> Result<bool, InvariantViolation> {
    state.check()?;
    Ok(state.is_idle())
}

/// One node of the combining tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct RcuNode {
    pub index: usize,
    pub parent: Option<usize>,
    pub level: usize,
    /// This node's bit position in its parent's qsmask.
    pub grpmask_bit: usize,
    pub grplo: usize,
    pub grphi: usize,
    /// Children still owing a quiescent state this grace period.
    pub qsmask: ChildSet,
    /// Children present under this node.
    pub qsmaskinit: ChildSet,
    pub gpnum: u64,
    pub completed: u64,
    /// Identity of the simulated spinlock guarding this node.
    pub lock: usize,
}

/// Per-CPU state.
///
/// `passed_quiesce` and `qs_pending` are instrumented shared cells in the
/// simulator; the fields here are their backing store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct RcuData {
    pub cpu: usize,
    /// Index of this CPU's leaf node.
    pub mynode: usize,
    /// This CPU's bit position in the leaf's qsmask.
    pub grpmask_bit: usize,
    pub qs_pending: bool,
    pub passed_quiesce: bool,
    pub gpnum: u64,
    pub completed: u64,
    pub callbacks: SegmentedCallbackList,
}

/// The whole RCU world: global state, breadth-first node array, per-CPU data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct RcuUniverse {
    pub geometry: TreeGeometry,
    pub state: RcuState,
    pub nodes: Vec<RcuNode>,
    pub data: Vec<RcuData>,
}

/// Builds an idle universe: counters equal everywhere, qsmask clear,
/// qsmaskinit populated from the geometry, callback lists empty.
pub fn init_universe(geom: &TreeGeometry) -> RcuUniverse {
    init_universe_with_blimit(geom, crate::cbs::DEFAULT_BLIMIT)
}

pub fn init_universe_with_blimit(geom: &TreeGeometry, blimit: usize) -> RcuUniverse {
    let mut nodes = Vec::with_capacity(geom.total_nodes);
    for idx in 0..geom.total_nodes {
        let parent = geom.parent_of(idx).expect("valid index");
        let level = geom.level_of(idx).expect("valid index");
        let (grplo, grphi) = geom.cpu_span_of(idx).expect("valid index");
        let mut qsmaskinit = ChildSet::empty();
        if geom.is_leaf(idx) {
            for cpu in grplo..=grphi {
                qsmaskinit.insert(geom.cpu_grpmask_bit(cpu));
            }
        } else {
            for child in geom.children_of(idx).expect("valid index") {
                qsmaskinit.insert(geom.grpmask_bit_of(child).expect("valid index"));
            }
        }
        nodes.push(RcuNode {
            index: idx,
            parent,
            level,
            grpmask_bit: geom.grpmask_bit_of(idx).expect("valid index"),
            grplo,
            grphi,
            qsmask: ChildSet::empty(),
            qsmaskinit,
            gpnum: 0,
            completed: 0,
            lock: idx,
        });
    }
    let data = (0..geom.cpus)
        .map(|cpu| RcuData {
            cpu,
            mynode: geom.leaf_of_cpu(cpu),
            grpmask_bit: geom.cpu_grpmask_bit(cpu),
            qs_pending: false,
            passed_quiesce: false,
            gpnum: 0,
            completed: 0,
            callbacks: SegmentedCallbackList::new(blimit),
        })
        .collect();
    RcuUniverse { geometry: geom.clone(), state: RcuState::idle(), nodes, data }
}

impl RcuUniverse {
    pub fn root(&self) -> &RcuNode {
        &self.nodes[0]
    }

    pub fn leaf_of(&self, cpu: usize) -> &RcuNode {
        &self.nodes[self.data[cpu].mynode]
    }

    /// Structured snapshot for trace dumps.
    pub fn snapshot_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("universe serializes")
    }
}

/// Audits every cross-level consistency rule that can be checked from a
/// single snapshot: counter validity, downward lag chains, and qsmask
/// containment. Monotonicity over time is checked by the harness, which
/// keeps the previous snapshot.
pub fn check_universe(u: &RcuUniverse) -> Result<(), InvariantViolation> {
    u.state.check()?;
    if u.nodes.len() != u.geometry.total_nodes || u.data.len() != u.geometry.cpus {
        return Err(InvariantViolation("array sizes do not match geometry".into()));
    }
    for node in &u.nodes {
        if !node.qsmask.is_subset_of(&node.qsmaskinit) {
            return Err(InvariantViolation(format!("node {} qsmask not within qsmaskinit", node.index)));
        }
        for (name, state_v, node_v) in
            [("gpnum", u.state.gpnum, node.gpnum), ("completed", u.state.completed, node.completed)]
        {
            if node_v > state_v || state_v - node_v > 1 {
                return Err(InvariantViolation(format!(
                    "node {} {name} {} lags state {} by more than one",
                    node.index, node_v, state_v
                )));
            }
        }
        if node.gpnum < node.completed {
            return Err(InvariantViolation(format!("node {} gpnum below completed", node.index)));
        }
    }
    for rdp in &u.data {
        let leaf = &u.nodes[rdp.mynode];
        for (name, leaf_v, rdp_v) in
            [("gpnum", leaf.gpnum, rdp.gpnum), ("completed", leaf.completed, rdp.completed)]
        {
            if rdp_v > leaf_v || leaf_v - rdp_v > 1 {
                return Err(InvariantViolation(format!(
                    "cpu {} {name} {} lags leaf {} by more than one",
                    rdp.cpu, rdp_v, leaf_v
                )));
            }
        }
        rdp.callbacks.check().map_err(|e| InvariantViolation(format!("cpu {}: {e}", rdp.cpu)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_geometry;

    #[test]
    fn init_two_cpu_universe() {
        let geom = compute_geometry(2, 16, 64).unwrap();
        let u = init_universe(&geom);
        assert_eq!(u.nodes.len(), 1);
        let init: Vec<usize> = u.root().qsmaskinit.ordinals().collect();
        assert_eq!(init, vec![0, 1]);
        assert!(u.root().qsmask.is_empty());
        assert!(u.state.is_idle());
        assert_eq!(u.state.gp_state, GpLifecycle::WaitGps);
        check_universe(&u).unwrap();
    }

    #[test]
    fn init_single_cpu_universe() {
        let geom = compute_geometry(1, 2, 2).unwrap();
        let u = init_universe(&geom);
        let init: Vec<usize> = u.root().qsmaskinit.ordinals().collect();
        assert_eq!(init, vec![0]);
    }

    #[test]
    fn init_4096_interior_node_has_64_children() {
        let geom = compute_geometry(4096, 16, 64).unwrap();
        let u = init_universe(&geom);
        assert_eq!(u.nodes[1].qsmaskinit.len(), 64);
        // Oracle: count leaves assigned to node 1 by dense forward assignment.
        let assigned = geom
            .children_of(1)
            .unwrap()
            .len();
        assert_eq!(assigned, 64);
        check_universe(&u).unwrap();
    }

    #[test]
    fn is_idle_cases() {
        let mut s = RcuState::idle();
        s.gpnum = 5;
        s.completed = 5;
        assert_eq!(is_idle_checked(&s), Ok(true));
        s.completed = 4;
        assert_eq!(is_idle_checked(&s), Ok(false));
        s.completed = 4;
        s.gpnum = 6;
        assert!(is_idle_checked(&s).is_err());
    }

    #[test]
    fn check_universe_catches_lag_breach() {
        let geom = compute_geometry(2, 16, 64).unwrap();
        let mut u = init_universe(&geom);
        u.state.gpnum = 2;
        u.state.completed = 2;
        // node still at 0: lags by 2
        assert!(check_universe(&u).is_err());
    }

    #[test]
    fn check_universe_catches_qsmask_escape() {
        let geom = compute_geometry(2, 16, 64).unwrap();
        let mut u = init_universe(&geom);
        u.nodes[0].qsmask.insert(3);
        assert!(check_universe(&u).is_err());
    }

    #[test]
    fn snapshot_uses_kernel_field_names() {
        let geom = compute_geometry(2, 16, 64).unwrap();
        let u = init_universe(&geom);
        let js = u.snapshot_json();
        assert!(js["state"]["gpnum"].is_number());
        assert!(js["state"]["completed"].is_number());
        assert!(js["nodes"][0]["qsmask"].is_array());
        assert!(js["data"][0]["qs_pending"].is_boolean());
    }

    #[test]
    fn childset_behaves_like_a_set() {
        let mut s = ChildSet::empty();
        s.insert(0);
        s.insert(5);
        assert!(s.contains(5));
        assert_eq!(s.len(), 2);
        s.remove(0);
        assert_eq!(s.ordinals().collect::<Vec<_>>(), vec![5]);
        assert!(ChildSet::single(5).is_subset_of(&s));
    }
}
