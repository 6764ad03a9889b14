//! Runs individual RCU operations to completion on one thread, with no
//! concurrency. Unit tests drive the very same frame machinery the explorer
//! schedules, so operation semantics have a single source of truth.

use super::step::{step_thread, StepCtx};
use super::thread::{
    BatchFrame, BatchPhase, CleanupFrame, CleanupPhase, CqsPhase, CtxPhase, Frame, GpInitFrame,
    GpInitPhase, NgcFrame, PcPhase, RdpFrame, RdpPhase,
};
use super::trace::{NullSink, TraceSink};
use super::world::World;
use super::ModelViolation;

/// Replaces `tid`'s continuation with `frames` and steps until it empties.
/// Fails if the thread ever blocks (single-threaded runs must not contend).
pub fn run_frames(w: &mut World, tid: usize, frames: Vec<Frame>) -> Result<(), ModelViolation> {
    run_frames_traced(w, tid, frames, &mut NullSink)
}

pub fn run_frames_traced(
    w: &mut World,
    tid: usize,
    frames: Vec<Frame>,
    sink: &mut dyn TraceSink,
) -> Result<(), ModelViolation> {
    w.threads[tid].frames = frames;
    w.threads[tid].task_done = false;
    let mut cx = StepCtx::new(sink);
    let mut guard = 0u32;
    while !w.threads[tid].frames.is_empty() {
        if !w.runnable(tid) {
            return Err(ModelViolation::Driver(format!(
                "operation runner blocked (thread {tid}, status {:?})",
                w.threads[tid].status
            )));
        }
        step_thread(w, tid, &mut cx)?;
        guard += 1;
        if guard > 100_000 {
            return Err(ModelViolation::Driver("operation runner did not terminate".into()));
        }
    }
    Ok(())
}

fn thread_on(w: &World, cpu: usize) -> usize {
    w.threads.iter().find(|t| t.cpu == cpu).map(|t| t.id).unwrap_or(0)
}

/// note_gp_changes for `cpu`, taking the leaf lock.
pub fn note_gp_changes(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(w, tid, vec![Frame::Ngc(NgcFrame::new(cpu, false, false))])
}

/// check_quiescent_state for `cpu` (the softirq report half).
pub fn check_quiescent_state(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(w, tid, vec![Frame::Cqs(CqsPhase::RunNgc)])
}

/// report_qs_rdp for `cpu`.
pub fn report_qs_rdp(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(
        w,
        tid,
        vec![Frame::ReportRdp(RdpFrame { cpu, phase: RdpPhase::Acquire, will_walk: false })],
    )
}

/// The full softirq pass: note changes, report, invoke ready callbacks.
pub fn process_callbacks(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(w, tid, vec![Frame::ProcessCbs(PcPhase::PushCqs)])
}

/// Voluntary context switch plus the softirq pass (the release-a-CPU path).
pub fn context_switch_and_process(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(w, tid, vec![Frame::CtxSwitch(CtxPhase::RecordQs)])
}

/// Grace-period initialization from `cpu`'s request path.
pub fn gp_init(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(w, tid, vec![Frame::GpInit(GpInitFrame { cpu, phase: GpInitPhase::AcquireRoot })])
}

/// Grace-period cleanup running on `cpu`.
pub fn gp_cleanup(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(
        w,
        tid,
        vec![Frame::GpCleanup(CleanupFrame { cpu, phase: CleanupPhase::NodeAcquire { idx: 0 } })],
    )
}

/// Invoke up to blimit ready callbacks on `cpu`.
pub fn invoke_ready_callbacks(w: &mut World, cpu: usize) -> Result<(), ModelViolation> {
    let tid = thread_on(w, cpu);
    run_frames(w, tid, vec![Frame::Batch(BatchFrame { cpu, phase: BatchPhase::Take })])
}
