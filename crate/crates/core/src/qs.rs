//! Quiescent-state recording on a CPU and reporting up the combining tree.
//!
//! The softirq indirection is collapsed into a direct call sequence: a
//! scheduling-clock tick or voluntary context switch runs `process_callbacks`,
//! which notes grace-period changes, reports any pending quiescent state up
//! the tree, and invokes ready callbacks. Lock-protected node updates fold
//! into their lock steps; instrumented per-CPU cells (`passed_quiesce`,
//! `qs_pending`) are individual steps.

use crate::faults::HookPoint;
use crate::sim::cell::CellAddr;
use crate::sim::step::{emit, pop_frame, push_frame, set_frame, spin_acquire_step, spin_release_step, Effect, StepCtx};
use crate::sim::thread::{
    BatchFrame, BatchPhase, CleanupFrame, CleanupPhase, CqsPhase, CtxPhase, Frame, NgcFrame, NgcPhase,
    PcPhase, RdpFrame, RdpPhase, WalkFrame, WalkPhase,
};
use crate::sim::world::World;
use crate::sim::ModelViolation;
use crate::state::ChildSet;

/// rcu_sched_qs: records that this CPU passed through a quiescent state.
/// Idempotent; a no-op under the drop-quiescent-states fault.
pub fn record_qs(w: &mut World, cpu: usize) {
    if w.fault_overrides(HookPoint::RecordQs) {
        return;
    }
    w.shared_store(cpu, CellAddr::PassedQuiesce(cpu as u8), 1);
}

/// A voluntary context switch on `cpu`. Context switches inside a read-side
/// critical section are impossible in the non-preemptible model; hitting one
/// is a model violation, not an RCU state change.
pub fn note_context_switch(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    if crate::api::section_active(w, cpu) {
        return Err(ModelViolation::SwitchInCriticalSection(cpu));
    }
    record_qs(w, cpu);
    Ok(())
}

/// The target `completed` value covering callbacks accelerated now, judged
/// from the leaf: one more grace period if RCU is idle at the root, two
/// otherwise (the current one may not cover them).
pub(crate) fn cbs_target(w: &World, mynode: usize) -> u64 {
    let leaf = &w.universe.nodes[mynode];
    if mynode == 0 && leaf.gpnum == leaf.completed {
        leaf.completed + 1
    } else {
        leaf.completed + 2
    }
}

/// The counter/callback bookkeeping of note_gp_changes, run under the leaf
/// lock. Returns whether the new-grace-period cell stores are needed and the
/// qs_pending value to store.
pub(crate) fn ngc_body(w: &mut World, cpu: usize, from_gp_init: bool) -> (bool, bool) {
    let mynode = w.universe.data[cpu].mynode;
    let leaf_gpnum = w.universe.nodes[mynode].gpnum;
    let leaf_completed = w.universe.nodes[mynode].completed;
    let bit_pending = w.universe.nodes[mynode].qsmask.contains(w.universe.data[cpu].grpmask_bit);
    let target = cbs_target(w, mynode);

    if from_gp_init {
        // The grace period starting right now covers anything already queued:
        // bypass the next-ready segment.
        let rdp = &mut w.universe.data[cpu];
        rdp.callbacks.accelerate(leaf_gpnum, true);
    }

    let rdp = &mut w.universe.data[cpu];
    let end_observed = rdp.completed != leaf_completed;
    let start_observed = rdp.gpnum != leaf_gpnum;
    if end_observed {
        rdp.completed = leaf_completed;
        let c = rdp.completed;
        rdp.callbacks.advance(c, target);
    } else if !from_gp_init {
        rdp.callbacks.accelerate(target, false);
    }
    let mut qsp_value = false;
    if start_observed {
        rdp.gpnum = leaf_gpnum;
        qsp_value = bit_pending;
        if w.fault_overrides(HookPoint::NgcForceQsPendingZero) {
            // Bug 4: pretend RCU needs nothing from this CPU.
            qsp_value = false;
        }
    }
    (start_observed, qsp_value)
}

pub(crate) fn step_ngc(
    w: &mut World,
    tid: usize,
    mut f: NgcFrame,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = f.cpu;
    let leaf_idx = w.universe.data[cpu].mynode;
    let leaf_lock = w.universe.nodes[leaf_idx].lock;
    match f.phase {
        NgcPhase::Acquire => {
            if spin_acquire_step(w, tid, leaf_lock)? {
                let (start_observed, qsp_value) = ngc_body(w, cpu, f.from_gp_init);
                f.store_pq = start_observed;
                f.store_qsp = start_observed;
                f.qsp_value = qsp_value;
                f.phase = if start_observed { NgcPhase::StorePq } else { NgcPhase::Release };
                set_frame(w, tid, Frame::Ngc(f));
                emit(cx, w, cpu, tid, "note_gp_changes", format!("new_gp={start_observed}"));
            } else {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={leaf_lock}"));
            }
            Ok(Effect::Costed)
        }
        NgcPhase::Body => {
            let (start_observed, qsp_value) = ngc_body(w, cpu, f.from_gp_init);
            f.store_pq = start_observed;
            f.store_qsp = start_observed;
            f.qsp_value = qsp_value;
            f.phase = if start_observed { NgcPhase::StorePq } else { NgcPhase::Release };
            set_frame(w, tid, Frame::Ngc(f));
            emit(cx, w, cpu, tid, "note_gp_changes", format!("new_gp={start_observed}"));
            Ok(Effect::Costed)
        }
        NgcPhase::StorePq => {
            // A quiescent state recorded before the grace period began cannot
            // count for it.
            w.shared_store(cpu, CellAddr::PassedQuiesce(cpu as u8), 0);
            f.phase = NgcPhase::StoreQsp;
            set_frame(w, tid, Frame::Ngc(f));
            emit(cx, w, cpu, tid, "store", format!("passed_quiesce[{cpu}] := 0"));
            Ok(Effect::Costed)
        }
        NgcPhase::StoreQsp => {
            w.shared_store(cpu, CellAddr::QsPending(cpu as u8), f.qsp_value as u64);
            if w.fault_overrides(HookPoint::NgcClearLeafBit) {
                // Bug 3: claim this CPU's quiescent state was already
                // reported for the new grace period.
                let bit = w.universe.data[cpu].grpmask_bit;
                w.universe.nodes[leaf_idx].qsmask.remove(bit);
                w.ghost.cleared_this_gp.insert((leaf_idx, bit));
            }
            f.phase = NgcPhase::Release;
            set_frame(w, tid, Frame::Ngc(f));
            let v = f.qsp_value as u64;
            emit(cx, w, cpu, tid, "store", format!("qs_pending[{cpu}] := {v}"));
            Ok(Effect::Costed)
        }
        NgcPhase::Release => {
            if f.lock_held {
                pop_frame(w, tid);
                Ok(Effect::Book)
            } else {
                spin_release_step(w, tid, leaf_lock)?;
                pop_frame(w, tid);
                emit(cx, w, cpu, tid, "spin_release", format!("lock={leaf_lock}"));
                Ok(Effect::Costed)
            }
        }
    }
}

pub(crate) fn step_ctx_switch(
    w: &mut World,
    tid: usize,
    phase: CtxPhase,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    match phase {
        CtxPhase::RecordQs => {
            note_context_switch(w, cpu)?;
            set_frame(w, tid, Frame::CtxSwitch(CtxPhase::Pc));
            emit(cx, w, cpu, tid, "context_switch", String::new());
            Ok(Effect::Costed)
        }
        CtxPhase::Pc => {
            pop_frame(w, tid);
            push_frame(w, tid, Frame::ProcessCbs(PcPhase::PushCqs));
            Ok(Effect::Book)
        }
    }
}

pub(crate) fn step_process_cbs(
    w: &mut World,
    tid: usize,
    phase: PcPhase,
    _cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    match phase {
        PcPhase::PushCqs => {
            set_frame(w, tid, Frame::ProcessCbs(PcPhase::PushBatch));
            push_frame(w, tid, Frame::Cqs(CqsPhase::RunNgc));
            Ok(Effect::Book)
        }
        PcPhase::PushBatch => {
            pop_frame(w, tid);
            push_frame(w, tid, Frame::Batch(BatchFrame { cpu, phase: BatchPhase::Take }));
            Ok(Effect::Book)
        }
    }
}

pub(crate) fn step_cqs(
    w: &mut World,
    tid: usize,
    phase: CqsPhase,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    match phase {
        CqsPhase::RunNgc => {
            set_frame(w, tid, Frame::Cqs(CqsPhase::LoadQsp));
            push_frame(w, tid, Frame::Ngc(NgcFrame::new(cpu, false, false)));
            Ok(Effect::Book)
        }
        CqsPhase::LoadQsp => {
            let v = w.shared_load(cpu, CellAddr::QsPending(cpu as u8));
            emit(cx, w, cpu, tid, "load", format!("qs_pending[{cpu}] -> {v}"));
            if v == 0 {
                pop_frame(w, tid);
            } else {
                set_frame(w, tid, Frame::Cqs(CqsPhase::LoadPq));
            }
            Ok(Effect::Costed)
        }
        CqsPhase::LoadPq => {
            let v = w.shared_load(cpu, CellAddr::PassedQuiesce(cpu as u8));
            emit(cx, w, cpu, tid, "load", format!("passed_quiesce[{cpu}] -> {v}"));
            if v == 0 {
                pop_frame(w, tid);
            } else {
                set_frame(w, tid, Frame::Cqs(CqsPhase::MaybeReport));
            }
            Ok(Effect::Costed)
        }
        CqsPhase::MaybeReport => {
            pop_frame(w, tid);
            push_frame(
                w,
                tid,
                Frame::ReportRdp(RdpFrame { cpu, phase: RdpPhase::Acquire, will_walk: false }),
            );
            Ok(Effect::Book)
        }
    }
}

pub(crate) fn step_report_rdp(
    w: &mut World,
    tid: usize,
    mut f: RdpFrame,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = f.cpu;
    let leaf_idx = w.universe.data[cpu].mynode;
    let leaf_lock = w.universe.nodes[leaf_idx].lock;
    match f.phase {
        RdpPhase::Acquire => {
            if !spin_acquire_step(w, tid, leaf_lock)? {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={leaf_lock}"));
                return Ok(Effect::Costed);
            }
            let leaf = &w.universe.nodes[leaf_idx];
            let rdp = &w.universe.data[cpu];
            // A quiescent state only counts for the grace period it was
            // detected in; if the CPU missed a boundary, reset detection and
            // ignore the redundant report.
            let stale = rdp.gpnum != leaf.gpnum || leaf.completed == leaf.gpnum;
            if stale {
                f.phase = RdpPhase::ResetPq;
                emit(cx, w, cpu, tid, "report_qs_rdp", "stale quiescent state, resetting".into());
            } else if !leaf.qsmask.contains(rdp.grpmask_bit) {
                f.will_walk = false;
                f.phase = RdpPhase::StoreQspZero;
                emit(cx, w, cpu, tid, "report_qs_rdp", "bit already clear".into());
            } else {
                let target = cbs_target(w, leaf_idx);
                w.universe.data[cpu].callbacks.accelerate(target, false);
                f.will_walk = true;
                f.phase = RdpPhase::StoreQspZero;
                emit(cx, w, cpu, tid, "report_qs_rdp", "legitimate quiescent state".into());
            }
            set_frame(w, tid, Frame::ReportRdp(f));
            Ok(Effect::Costed)
        }
        RdpPhase::ResetPq => {
            w.shared_store(cpu, CellAddr::PassedQuiesce(cpu as u8), 0);
            f.phase = RdpPhase::ReleaseStale;
            set_frame(w, tid, Frame::ReportRdp(f));
            emit(cx, w, cpu, tid, "store", format!("passed_quiesce[{cpu}] := 0"));
            Ok(Effect::Costed)
        }
        RdpPhase::ReleaseStale | RdpPhase::ReleaseNoWalk => {
            spin_release_step(w, tid, leaf_lock)?;
            pop_frame(w, tid);
            emit(cx, w, cpu, tid, "spin_release", format!("lock={leaf_lock}"));
            Ok(Effect::Costed)
        }
        RdpPhase::StoreQspZero => {
            w.shared_store(cpu, CellAddr::QsPending(cpu as u8), 0);
            f.phase = if f.will_walk { RdpPhase::StartWalk } else { RdpPhase::ReleaseNoWalk };
            set_frame(w, tid, Frame::ReportRdp(f));
            emit(cx, w, cpu, tid, "store", format!("qs_pending[{cpu}] := 0"));
            Ok(Effect::Costed)
        }
        RdpPhase::StartWalk => {
            let gp = w.universe.nodes[leaf_idx].gpnum;
            let bit = w.universe.data[cpu].grpmask_bit;
            pop_frame(w, tid);
            push_frame(
                w,
                tid,
                Frame::RnpWalk(WalkFrame {
                    cpu,
                    node: leaf_idx,
                    mask: ChildSet::single(bit),
                    gp,
                    phase: WalkPhase::WorkHolding,
                    entered: false,
                }),
            );
            Ok(Effect::Book)
        }
    }
}

pub(crate) fn step_rnp_walk(
    w: &mut World,
    tid: usize,
    mut f: WalkFrame,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = f.cpu;
    match f.phase {
        WalkPhase::WorkHolding => {
            let node_idx = f.node;
            let lock = w.universe.nodes[node_idx].lock;
            if !f.entered && w.fault_overrides(HookPoint::RnpWalkEntry) {
                // Bug 6: the report never walks the tree.
                spin_release_step(w, tid, lock)?;
                pop_frame(w, tid);
                emit(cx, w, cpu, tid, "report_qs_rnp", "suppressed (returns immediately)".into());
                return Ok(Effect::Costed);
            }
            f.entered = true;
            let node = &w.universe.nodes[node_idx];
            if !node.qsmask.intersects(&f.mask) || node.gpnum != f.gp {
                // Bits already clear, or the grace period changed underneath
                // the walk: stop.
                spin_release_step(w, tid, lock)?;
                pop_frame(w, tid);
                emit(cx, w, cpu, tid, "report_qs_rnp", format!("stop at node {node_idx} (stale)"));
                return Ok(Effect::Costed);
            }
            // Clear the reported bits, with the clear-once and
            // subtree-completeness monitors watching.
            for ord in f.mask.ordinals().collect::<Vec<_>>() {
                if !w.ghost.cleared_this_gp.insert((node_idx, ord)) {
                    w.ghost.double_clear += 1;
                }
                let node = &w.universe.nodes[node_idx];
                if w.universe.geometry.is_leaf(node_idx) {
                    w.ghost.reported_cpus.insert(node.grplo + ord);
                } else {
                    let child_idx = w.universe.geometry.level_start[node.level + 1]
                        + (node_idx - w.universe.geometry.level_start[node.level])
                            * w.universe.geometry.interior_fanout
                        + ord;
                    let (lo, hi) = w.universe.geometry.cpu_span_of(child_idx).expect("valid child");
                    if !(lo..=hi).all(|c| w.ghost.reported_cpus.contains(&c)) {
                        w.ghost.premature_parent_clear += 1;
                    }
                }
            }
            let node = &mut w.universe.nodes[node_idx];
            node.qsmask.subtract(&f.mask);
            let remaining = node.qsmask;
            let skip_stop_check = w.fault_overrides(HookPoint::RnpWalkStopCheck);
            if !skip_stop_check && !remaining.is_empty() {
                // Other children of this node still owe quiescent states.
                spin_release_step(w, tid, lock)?;
                pop_frame(w, tid);
                emit(
                    cx,
                    w,
                    cpu,
                    tid,
                    "report_qs_rnp",
                    format!("cleared at node {node_idx}, siblings pending"),
                );
                return Ok(Effect::Costed);
            }
            match w.universe.nodes[node_idx].parent {
                None => {
                    // Root reached: report_qs_rsp awakens the grace-period
                    // driver; in this model that is a direct cleanup call.
                    if !remaining.is_empty() {
                        w.ghost.premature_rsp += 1;
                        emit(
                            cx,
                            w,
                            cpu,
                            tid,
                            "report_qs_rsp",
                            "diagnostic: root qsmask nonempty at grace-period end".into(),
                        );
                    } else {
                        emit(cx, w, cpu, tid, "report_qs_rsp", "grace period ended".into());
                    }
                    spin_release_step(w, tid, lock)?;
                    pop_frame(w, tid);
                    push_frame(
                        w,
                        tid,
                        Frame::GpCleanup(CleanupFrame { cpu, phase: CleanupPhase::NodeAcquire { idx: 0 } }),
                    );
                    Ok(Effect::Costed)
                }
                Some(parent) => {
                    let bit = w.universe.nodes[node_idx].grpmask_bit;
                    spin_release_step(w, tid, lock)?;
                    f.mask = ChildSet::single(bit);
                    f.node = parent;
                    f.phase = WalkPhase::AcquireParent;
                    set_frame(w, tid, Frame::RnpWalk(f));
                    emit(cx, w, cpu, tid, "report_qs_rnp", format!("ascend to node {parent}"));
                    Ok(Effect::Costed)
                }
            }
        }
        WalkPhase::AcquireParent => {
            let lock = w.universe.nodes[f.node].lock;
            if spin_acquire_step(w, tid, lock)? {
                f.phase = WalkPhase::WorkHolding;
                set_frame(w, tid, Frame::RnpWalk(f));
                emit(cx, w, cpu, tid, "spin_acquire", format!("lock={lock}"));
            } else {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={lock}"));
            }
            Ok(Effect::Costed)
        }
    }
}

pub(crate) fn step_batch(
    w: &mut World,
    tid: usize,
    f: BatchFrame,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = f.cpu;
    match f.phase {
        BatchPhase::Take => {
            let taken = w.universe.data[cpu].callbacks.take_done();
            if taken.is_empty() {
                pop_frame(w, tid);
                emit(cx, w, cpu, tid, "invoke_callbacks", "none ready".into());
            } else {
                let n = taken.len();
                set_frame(w, tid, Frame::Batch(BatchFrame { cpu, phase: BatchPhase::Invoke { pending: taken } }));
                emit(cx, w, cpu, tid, "invoke_callbacks", format!("taking {n}"));
            }
            Ok(Effect::Costed)
        }
        BatchPhase::Invoke { mut pending } => {
            let cb = pending.remove(0);
            w.ghost.invoked.push(cb.id);
            let is_wakeme = matches!(cb.func, crate::cbs::CallbackFunc::WakemeAfterRcu);
            if is_wakeme {
                w.shared_store(cpu, CellAddr::WaitFlag, 0);
            }
            if pending.is_empty() {
                pop_frame(w, tid);
            } else {
                set_frame(w, tid, Frame::Batch(BatchFrame { cpu, phase: BatchPhase::Invoke { pending } }));
            }
            emit(cx, w, cpu, tid, "invoke", format!("{} id={}", cb.func.name(), cb.id));
            Ok(Effect::Costed)
        }
    }
}

/// Strict report_qs_rsp as a directly callable operation: the root's qsmask
/// must be empty for the current grace period. (The in-walk path tolerates a
/// nonempty mask under the skip-stop-check fault and records a diagnostic
/// instead.)
pub fn report_qs_rsp(w: &mut World, tid: usize) -> Result<(), ModelViolation> {
    if !w.universe.nodes[0].qsmask.is_empty() {
        return Err(ModelViolation::Driver(
            "report_qs_rsp with nonempty root qsmask".into(),
        ));
    }
    let cpu = w.threads[tid].cpu;
    push_frame(w, tid, Frame::GpCleanup(CleanupFrame { cpu, phase: CleanupPhase::NodeAcquire { idx: 0 } }));
    Ok(())
}
