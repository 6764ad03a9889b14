//! The step interpreter: dispatches one scheduler step of a virtual thread,
//! folding pure frame bookkeeping into the surrounding observable action, and
//! delivers injected tick / context-switch events.

use super::thread::{CtxPhase, Frame, PcPhase, ThreadStatus};
use super::trace::{TraceEvent, TraceSink};
use super::world::{EventKind, World};
use super::ModelViolation;

/// Per-step context: where trace records go and the running step number.
pub struct StepCtx<'a> {
    pub sink: &'a mut dyn TraceSink,
    pub step_no: u64,
}

impl<'a> StepCtx<'a> {
    pub fn new(sink: &'a mut dyn TraceSink) -> Self {
        StepCtx { sink, step_no: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    /// Performed one observable action; the scheduler step is spent.
    Costed,
    /// Pure frame bookkeeping; keep going within the same step.
    Book,
}

pub(crate) fn emit(cx: &mut StepCtx, w: &World, cpu: usize, tid: usize, op: &str, detail: String) {
    let ev = TraceEvent {
        step: cx.step_no,
        cpu: Some(cpu),
        thread: Some(tid),
        op: op.to_string(),
        detail,
        gpnum: w.universe.state.gpnum,
        completed: w.universe.state.completed,
        root_qsmask: w.universe.nodes[0].qsmask.ordinals().collect(),
    };
    cx.sink.record(&ev);
}

pub(crate) fn set_frame(w: &mut World, tid: usize, frame: Frame) {
    *w.threads[tid].frames.last_mut().expect("thread has a frame") = frame;
}

pub(crate) fn pop_frame(w: &mut World, tid: usize) {
    w.threads[tid].frames.pop();
}

pub(crate) fn push_frame(w: &mut World, tid: usize, frame: Frame) {
    w.threads[tid].frames.push(frame);
}

/// Test-and-set acquire of a node spinlock as one scheduler step. Returns
/// false when the lock is held elsewhere; the thread is then parked on it.
pub(crate) fn spin_acquire_step(w: &mut World, tid: usize, lock: usize) -> Result<bool, ModelViolation> {
    let cpu = w.threads[tid].cpu;
    if w.locks.spin_try_acquire(tid, cpu, lock)? {
        w.threads[tid].held_locks.push(lock);
        w.threads[tid].status = ThreadStatus::Runnable;
        w.flush_cpu(cpu);
        Ok(true)
    } else {
        w.threads[tid].status = ThreadStatus::BlockedOnLock { lock, cpu_lock: false };
        Ok(false)
    }
}

pub(crate) fn spin_release_step(w: &mut World, tid: usize, lock: usize) -> Result<(), ModelViolation> {
    let cpu = w.threads[tid].cpu;
    w.locks.spin_release(tid, cpu, lock)?;
    w.threads[tid].held_locks.retain(|&l| l != lock);
    w.flush_cpu(cpu);
    Ok(())
}

/// Public spinlock operations (the simulated-lock surface).
pub fn spin_acquire(w: &mut World, tid: usize, lock: usize) -> Result<bool, ModelViolation> {
    spin_acquire_step(w, tid, lock)
}

pub fn spin_release(w: &mut World, tid: usize, lock: usize) -> Result<(), ModelViolation> {
    spin_release_step(w, tid, lock)
}

fn dispatch(w: &mut World, tid: usize, frame: Frame, cx: &mut StepCtx) -> Result<Effect, ModelViolation> {
    match frame {
        Frame::Reader(phase) => {
            let idx = match w.threads[tid].program {
                super::thread::Program::Reader { idx } => idx,
                _ => 0,
            };
            crate::api::step_reader(w, tid, idx, phase, cx)
        }
        Frame::Updater(phase) => crate::api::step_updater(w, tid, phase, cx),
        Frame::Litmus(phase) => crate::api::step_litmus(w, tid, phase, cx),
        Frame::TinySteps { remaining } => {
            w.threads[tid].scratch += 1;
            if remaining <= 1 {
                pop_frame(w, tid);
            } else {
                set_frame(w, tid, Frame::TinySteps { remaining: remaining - 1 });
            }
            let cpu = w.threads[tid].cpu;
            emit(cx, w, cpu, tid, "tiny_step", String::new());
            Ok(Effect::Costed)
        }
        Frame::CtxSwitch(phase) => crate::qs::step_ctx_switch(w, tid, phase, cx),
        Frame::ProcessCbs(phase) => crate::qs::step_process_cbs(w, tid, phase, cx),
        Frame::Ngc(f) => crate::qs::step_ngc(w, tid, f, cx),
        Frame::Cqs(phase) => crate::qs::step_cqs(w, tid, phase, cx),
        Frame::ReportRdp(f) => crate::qs::step_report_rdp(w, tid, f, cx),
        Frame::RnpWalk(f) => crate::qs::step_rnp_walk(w, tid, f, cx),
        Frame::GpInit(f) => crate::gp::step_gp_init(w, tid, f, cx),
        Frame::GpCleanup(f) => crate::gp::step_gp_cleanup(w, tid, f, cx),
        Frame::Batch(f) => crate::qs::step_batch(w, tid, f, cx),
        Frame::IrqExit => {
            pop_frame(w, tid);
            w.threads[tid].in_irq = false;
            Ok(Effect::Book)
        }
    }
}

/// Runs `tid` for exactly one observable step (folding bookkeeping), then
/// unwinds any finished interrupt markers.
pub fn step_thread(w: &mut World, tid: usize, cx: &mut StepCtx) -> Result<(), ModelViolation> {
    loop {
        let Some(top) = w.threads[tid].frames.last().cloned() else {
            w.threads[tid].task_done = true;
            return Ok(());
        };
        let effect = dispatch(w, tid, top, cx)?;
        if effect == Effect::Costed {
            while matches!(w.threads[tid].frames.last(), Some(Frame::IrqExit)) {
                w.threads[tid].frames.pop();
                w.threads[tid].in_irq = false;
            }
            if w.threads[tid].frames.is_empty() {
                w.threads[tid].task_done = true;
            }
            return Ok(());
        }
        if w.threads[tid].frames.is_empty() {
            w.threads[tid].task_done = true;
            return Ok(());
        }
    }
}

fn event_frames(kind: EventKind) -> Frame {
    match kind {
        EventKind::Tick => Frame::ProcessCbs(PcPhase::PushCqs),
        EventKind::CtxSwitch => Frame::CtxSwitch(CtxPhase::RecordQs),
    }
}

/// Runs an event's handler on `cpu`'s occupant as an interrupt: the handler
/// frames execute before whatever the occupant was doing.
pub(crate) fn deliver_event_now(w: &mut World, cpu: usize, kind: EventKind, cx: &mut StepCtx) {
    let tid = w.occupant(cpu).expect("event delivered to an occupied cpu");
    let t = &mut w.threads[tid];
    t.frames.push(Frame::IrqExit);
    t.frames.push(event_frames(kind));
    t.in_irq = true;
    if t.status == ThreadStatus::Parked {
        t.status = ThreadStatus::Runnable;
    }
    let name = match kind {
        EventKind::Tick => "tick",
        EventKind::CtxSwitch => "ctx_switch_event",
    };
    emit(cx, w, cpu, tid, name, String::new());
}

/// Injects a scheduling-clock interrupt. Delivered immediately when the CPU
/// can take it; deferred (never dropped) while interrupts are disabled.
pub fn inject_tick(w: &mut World, cpu: usize, cx: &mut StepCtx) {
    if w.event_landable(cpu, EventKind::Tick) {
        deliver_event_now(w, cpu, EventKind::Tick, cx);
    } else {
        w.events.pending[cpu].push(EventKind::Tick);
        emit(cx, w, cpu, 0, "tick_deferred", String::new());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trace::NullSink;
    use crate::sim::world::WorldConfig;

    #[test]
    fn contended_spin_acquire_parks_the_requester() {
        let mut w = World::new_rcu(WorldConfig::default());
        assert!(spin_acquire(&mut w, 0, 0).unwrap());
        assert!(!spin_acquire(&mut w, 1, 0).unwrap());
        assert_eq!(w.threads[1].status, ThreadStatus::BlockedOnLock { lock: 0, cpu_lock: false });
        assert!(!w.runnable(1));
        spin_release(&mut w, 0, 0).unwrap();
        assert!(w.runnable(1));
        assert!(spin_acquire(&mut w, 1, 0).unwrap());
    }

    #[test]
    fn double_acquire_is_diagnosed() {
        let mut w = World::new_rcu(WorldConfig::default());
        spin_acquire(&mut w, 0, 0).unwrap();
        assert!(spin_acquire(&mut w, 0, 0).is_err());
    }

    #[test]
    fn tick_defers_while_irqs_disabled() {
        let mut w = World::new_rcu(WorldConfig::default());
        let mut sink = NullSink;
        let mut cx = StepCtx::new(&mut sink);
        // Thread 0 holds its leaf (== root) lock: irqs off on cpu 0, and it
        // must hold the cpu lock to be the occupant.
        w.locks.cpu_try_acquire(0, 0);
        spin_acquire(&mut w, 0, 0).unwrap();
        inject_tick(&mut w, 0, &mut cx);
        assert_eq!(w.events.pending[0], vec![crate::sim::world::EventKind::Tick]);
        assert!(!w.threads[0].in_irq);
        spin_release(&mut w, 0, 0).unwrap();
        assert!(w.event_landable(0, crate::sim::world::EventKind::Tick));
    }
}
