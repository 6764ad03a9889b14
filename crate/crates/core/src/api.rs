//! The five-primitive user-facing surface, plus the step logic for the
//! reader and updater task programs.
//!
//! Read-side primitives cost nothing in the modeled kernel; here they open
//! and close a ghost section per CPU so the safety monitor can tell whether a
//! reader predates a grace period. `synchronize` is the full update-side
//! sequence: set the wait flag, queue the wake-up callback, request and
//! initialize a grace period, record the voluntary context switch, then park
//! until the callback clears the flag.

use crate::cbs::{Callback, CallbackFunc};
use crate::faults::HookPoint;
use crate::sim::cell::CellAddr;
use crate::sim::step::{emit, pop_frame, push_frame, set_frame, spin_acquire_step, spin_release_step, Effect, StepCtx};
use crate::sim::thread::{CtxPhase, Frame, GpInitPhase, GpInitFrame, LitmusPhase, Program, ReaderPhase, ThreadStatus, UpdaterPhase};
use crate::sim::world::World;
use crate::sim::ModelViolation;

/// Opens (or nests into) the ghost read-side section on `cpu`. Nested
/// sections flatten into one.
pub fn read_lock(w: &mut World, cpu: usize, now: u64) {
    let s = &mut w.ghost.sections[cpu];
    if s.depth == 0 {
        s.enter_tick = now;
        s.predates_gp = false;
    }
    s.depth += 1;
}

/// Closes one nesting level; the section ends at depth zero.
pub fn read_unlock(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let s = &mut w.ghost.sections[cpu];
    if s.depth == 0 {
        return Err(ModelViolation::UnbalancedUnlock(cpu));
    }
    s.depth -= 1;
    if s.depth == 0 {
        s.predates_gp = false;
    }
    Ok(())
}

pub fn section_active(w: &World, cpu: usize) -> bool {
    w.ghost.sections[cpu].depth > 0
}

/// Publish with release ordering: everything this CPU stored earlier becomes
/// visible before the new value can.
pub fn assign_pointer(w: &mut World, cpu: usize, addr: CellAddr, value: u64) {
    w.flush_cpu(cpu);
    w.shared_store(cpu, addr, value);
}

/// Consume-side fetch; a plain load under every modeled memory model.
pub fn dereference(w: &World, cpu: usize, addr: CellAddr) -> u64 {
    w.shared_load(cpu, addr)
}

pub(crate) fn step_reader(
    w: &mut World,
    tid: usize,
    idx: u8,
    phase: ReaderPhase,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    match phase {
        ReaderPhase::AcquireCpu => {
            if w.locks.cpu_try_acquire(tid, cpu) {
                w.threads[tid].holds_cpu_lock = true;
                w.threads[tid].status = ThreadStatus::Runnable;
                w.flush_cpu(cpu);
                set_frame(w, tid, Frame::Reader(ReaderPhase::ReadLock));
                emit(cx, w, cpu, tid, "cpu_acquire", String::new());
            } else {
                w.threads[tid].status = ThreadStatus::BlockedOnLock { lock: cpu, cpu_lock: true };
                emit(cx, w, cpu, tid, "cpu_acquire_blocked", String::new());
            }
            Ok(Effect::Costed)
        }
        ReaderPhase::ReadLock => {
            read_lock(w, cpu, cx.step_no);
            set_frame(w, tid, Frame::Reader(ReaderPhase::LoadX));
            emit(cx, w, cpu, tid, "rcu_read_lock", String::new());
            Ok(Effect::Costed)
        }
        ReaderPhase::LoadX => {
            let v = dereference(w, cpu, CellAddr::X);
            w.threads[tid].scratch = v;
            set_frame(w, tid, Frame::Reader(ReaderPhase::StoreR1));
            emit(cx, w, cpu, tid, "load", format!("x -> {v}"));
            Ok(Effect::Costed)
        }
        ReaderPhase::StoreR1 => {
            let v = w.threads[tid].scratch;
            w.shared_store(cpu, CellAddr::R1(idx), v);
            set_frame(w, tid, Frame::Reader(ReaderPhase::LoadY));
            emit(cx, w, cpu, tid, "store", format!("r1[{idx}] := {v}"));
            Ok(Effect::Costed)
        }
        ReaderPhase::LoadY => {
            let v = w.shared_load(cpu, CellAddr::Y);
            w.threads[tid].scratch = v;
            set_frame(w, tid, Frame::Reader(ReaderPhase::StoreR2));
            emit(cx, w, cpu, tid, "load", format!("y -> {v}"));
            Ok(Effect::Costed)
        }
        ReaderPhase::StoreR2 => {
            let v = w.threads[tid].scratch;
            w.shared_store(cpu, CellAddr::R2(idx), v);
            set_frame(w, tid, Frame::Reader(ReaderPhase::ReadUnlock));
            emit(cx, w, cpu, tid, "store", format!("r2[{idx}] := {v}"));
            Ok(Effect::Costed)
        }
        ReaderPhase::ReadUnlock => {
            read_unlock(w, cpu)?;
            set_frame(w, tid, Frame::Reader(ReaderPhase::ExitCs));
            emit(cx, w, cpu, tid, "rcu_read_unlock", String::new());
            Ok(Effect::Costed)
        }
        ReaderPhase::ExitCs => {
            // Voluntary context switch at task exit, then RCU core processing.
            set_frame(w, tid, Frame::Reader(ReaderPhase::ReleaseCpu));
            push_frame(w, tid, Frame::CtxSwitch(CtxPhase::RecordQs));
            Ok(Effect::Book)
        }
        ReaderPhase::ReleaseCpu => {
            w.locks.cpu_release(tid, cpu)?;
            w.threads[tid].holds_cpu_lock = false;
            w.flush_cpu(cpu);
            pop_frame(w, tid);
            emit(cx, w, cpu, tid, "cpu_release", String::new());
            Ok(Effect::Costed)
        }
    }
}

pub(crate) fn step_updater(
    w: &mut World,
    tid: usize,
    phase: UpdaterPhase,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    match phase {
        UpdaterPhase::AcquireCpu => {
            if w.locks.cpu_try_acquire(tid, cpu) {
                w.threads[tid].holds_cpu_lock = true;
                w.threads[tid].status = ThreadStatus::Runnable;
                w.flush_cpu(cpu);
                set_frame(w, tid, Frame::Updater(UpdaterPhase::StoreX));
                emit(cx, w, cpu, tid, "cpu_acquire", String::new());
            } else {
                w.threads[tid].status = ThreadStatus::BlockedOnLock { lock: cpu, cpu_lock: true };
                emit(cx, w, cpu, tid, "cpu_acquire_blocked", String::new());
            }
            Ok(Effect::Costed)
        }
        UpdaterPhase::StoreX => {
            w.shared_store(cpu, CellAddr::X, 1);
            set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncEntry));
            emit(cx, w, cpu, tid, "store", "x := 1".into());
            Ok(Effect::Costed)
        }
        UpdaterPhase::SyncEntry => {
            if w.fault_overrides(HookPoint::SynchronizeEntry) {
                // Bug 1: synchronize returns immediately, touching nothing.
                set_frame(w, tid, Frame::Updater(UpdaterPhase::StoreY));
            } else if section_active(w, cpu) {
                return Err(ModelViolation::Driver(format!(
                    "synchronize called inside a read-side critical section on cpu {cpu}"
                )));
            } else {
                set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncSetFlag));
            }
            Ok(Effect::Book)
        }
        UpdaterPhase::SyncSetFlag => {
            w.shared_store(cpu, CellAddr::WaitFlag, 1);
            set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncEnqueue));
            emit(cx, w, cpu, tid, "store", "wait_rcu_gp_flag := 1".into());
            Ok(Effect::Costed)
        }
        UpdaterPhase::SyncEnqueue => {
            let id = w.next_cb_id;
            w.next_cb_id += 1;
            w.universe.data[cpu].callbacks.enqueue(Callback::new(id, CallbackFunc::WakemeAfterRcu))?;
            set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncRequestAcquire));
            emit(cx, w, cpu, tid, "enqueue_callback", format!("wakeme_after_rcu id={id}"));
            Ok(Effect::Costed)
        }
        UpdaterPhase::SyncRequestAcquire => {
            let root_lock = w.universe.nodes[0].lock;
            if spin_acquire_step(w, tid, root_lock)? {
                crate::gp::request_gp(w);
                set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncRequestRelease));
                emit(cx, w, cpu, tid, "request_gp", "gp_flags := FLAG_INIT".into());
            } else {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={root_lock}"));
            }
            Ok(Effect::Costed)
        }
        UpdaterPhase::SyncRequestRelease => {
            let root_lock = w.universe.nodes[0].lock;
            spin_release_step(w, tid, root_lock)?;
            set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncBlockCs));
            push_frame(w, tid, Frame::GpInit(GpInitFrame { cpu, phase: GpInitPhase::AcquireRoot }));
            emit(cx, w, cpu, tid, "spin_release", format!("lock={root_lock}"));
            Ok(Effect::Costed)
        }
        UpdaterPhase::SyncBlockCs => {
            // Blocking is a voluntary context switch; record the quiescent
            // state before waiting.
            crate::qs::note_context_switch(w, cpu)?;
            set_frame(w, tid, Frame::Updater(UpdaterPhase::SyncWaitLoad));
            emit(cx, w, cpu, tid, "context_switch", "blocking in synchronize".into());
            Ok(Effect::Costed)
        }
        UpdaterPhase::SyncWaitLoad => {
            let v = w.shared_load(cpu, CellAddr::WaitFlag);
            if v == 0 {
                w.threads[tid].status = ThreadStatus::Runnable;
                set_frame(w, tid, Frame::Updater(UpdaterPhase::StoreY));
                emit(cx, w, cpu, tid, "load", "wait_rcu_gp_flag -> 0, resuming".into());
            } else {
                w.threads[tid].status = ThreadStatus::Parked;
                emit(cx, w, cpu, tid, "park", "wait_rcu_gp_flag still set".into());
            }
            Ok(Effect::Costed)
        }
        UpdaterPhase::StoreY => {
            w.shared_store(cpu, CellAddr::Y, 1);
            set_frame(w, tid, Frame::Updater(UpdaterPhase::ExitCs));
            emit(cx, w, cpu, tid, "store", "y := 1".into());
            Ok(Effect::Costed)
        }
        UpdaterPhase::ExitCs => {
            set_frame(w, tid, Frame::Updater(UpdaterPhase::ReleaseCpu));
            push_frame(w, tid, Frame::CtxSwitch(CtxPhase::RecordQs));
            Ok(Effect::Book)
        }
        UpdaterPhase::ReleaseCpu => {
            w.locks.cpu_release(tid, cpu)?;
            w.threads[tid].holds_cpu_lock = false;
            w.flush_cpu(cpu);
            pop_frame(w, tid);
            emit(cx, w, cpu, tid, "cpu_release", String::new());
            Ok(Effect::Costed)
        }
    }
}

pub(crate) fn step_litmus(
    w: &mut World,
    tid: usize,
    phase: LitmusPhase,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    let program = w.threads[tid].program;
    let data = CellAddr::Lit(0);
    let flag = CellAddr::Lit(1);
    match (program, phase) {
        (Program::MpWriter { .. }, LitmusPhase::S0) => {
            w.shared_store(cpu, data, 1);
            set_frame(w, tid, Frame::Litmus(LitmusPhase::S1));
            emit(cx, w, cpu, tid, "store", "lit[0] := 1".into());
        }
        (Program::MpWriter { release }, LitmusPhase::S1) => {
            if release {
                assign_pointer(w, cpu, flag, 1);
            } else {
                w.shared_store(cpu, flag, 1);
            }
            pop_frame(w, tid);
            emit(cx, w, cpu, tid, "store", format!("lit[1] := 1 (release={release})"));
        }
        (Program::MpReader, LitmusPhase::S0) => {
            w.threads[tid].lit_r1 = dereference(w, cpu, flag);
            set_frame(w, tid, Frame::Litmus(LitmusPhase::S1));
            let v = w.threads[tid].lit_r1;
            emit(cx, w, cpu, tid, "load", format!("lit[1] -> {v}"));
        }
        (Program::MpReader, LitmusPhase::S1) => {
            w.threads[tid].lit_r2 = w.shared_load(cpu, data);
            pop_frame(w, tid);
            let v = w.threads[tid].lit_r2;
            emit(cx, w, cpu, tid, "load", format!("lit[0] -> {v}"));
        }
        (Program::SbLeft, LitmusPhase::S0) => {
            w.shared_store(cpu, data, 1);
            set_frame(w, tid, Frame::Litmus(LitmusPhase::S1));
            emit(cx, w, cpu, tid, "store", "lit[0] := 1".into());
        }
        (Program::SbLeft, LitmusPhase::S1) => {
            w.threads[tid].lit_r1 = w.shared_load(cpu, flag);
            pop_frame(w, tid);
            let v = w.threads[tid].lit_r1;
            emit(cx, w, cpu, tid, "load", format!("lit[1] -> {v}"));
        }
        (Program::SbRight, LitmusPhase::S0) => {
            w.shared_store(cpu, flag, 1);
            set_frame(w, tid, Frame::Litmus(LitmusPhase::S1));
            emit(cx, w, cpu, tid, "store", "lit[1] := 1".into());
        }
        (Program::SbRight, LitmusPhase::S1) => {
            w.threads[tid].lit_r2 = w.shared_load(cpu, data);
            pop_frame(w, tid);
            let v = w.threads[tid].lit_r2;
            emit(cx, w, cpu, tid, "load", format!("lit[0] -> {v}"));
        }
        _ => unreachable!("litmus phase for non-litmus program"),
    }
    Ok(Effect::Costed)
}

/// Fig-2 style grace-period property over the given reader count: for every
/// reader, r2 == 0 or r1 == 1.
pub fn fig2_holds(w: &World, readers: u32) -> bool {
    (0..readers as u8).all(|k| {
        w.memory_value(CellAddr::R2(k)) == 0 || w.memory_value(CellAddr::R1(k)) == 1
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::WorldConfig;

    #[test]
    fn nested_read_lock_flattens() {
        let mut w = World::new_rcu(WorldConfig::default());
        read_lock(&mut w, 0, 1);
        assert!(section_active(&w, 0));
        read_lock(&mut w, 0, 2);
        assert_eq!(w.ghost.sections[0].depth, 2);
        read_unlock(&mut w, 0).unwrap();
        assert!(section_active(&w, 0));
        read_unlock(&mut w, 0).unwrap();
        assert!(!section_active(&w, 0));
    }

    #[test]
    fn unbalanced_unlock_is_diagnosed() {
        let mut w = World::new_rcu(WorldConfig::default());
        assert!(matches!(read_unlock(&mut w, 0), Err(ModelViolation::UnbalancedUnlock(0))));
    }

    #[test]
    fn assign_pointer_flushes_prior_stores() {
        let cfg = WorldConfig { memory_model: crate::sim::cell::MemoryModel::Pso, ..Default::default() };
        let mut w = World::new_rcu(cfg);
        w.shared_store(0, CellAddr::Lit(0), 7);
        assign_pointer(&mut w, 0, CellAddr::Lit(1), 1);
        // data became globally visible at the release point
        assert_eq!(w.memory_value(CellAddr::Lit(0)), 7);
    }

    #[test]
    fn fig2_evaluates_per_reader() {
        let mut w = World::new_rcu(WorldConfig { readers: 2, ..Default::default() });
        assert!(fig2_holds(&w, 2));
        w.mem.r1[1] = 0;
        w.mem.r2[1] = 1;
        assert!(!fig2_holds(&w, 2));
        assert!(fig2_holds(&w, 1));
    }
}
