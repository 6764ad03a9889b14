//! Grace-period lifecycle: request, initialization sweep, cleanup sweep.
//!
//! There is no separate driver thread: initialization runs directly from the
//! requesting path and cleanup directly from the final quiescent-state
//! report, with each tree node's lock taken one at a time in breadth-first
//! order.

use crate::faults::HookPoint;
use crate::sim::step::{emit, pop_frame, push_frame, set_frame, spin_acquire_step, spin_release_step, Effect, StepCtx};
use crate::sim::thread::{CleanupFrame, CleanupPhase, Frame, GpInitFrame, GpInitPhase, NgcFrame};
use crate::sim::world::World;
use crate::sim::ModelViolation;
use crate::state::{ChildSet, GpFlags, GpLifecycle};

/// Marks that a new grace period is wanted. Idempotent. Caller holds the
/// root lock.
pub fn request_gp(w: &mut World) {
    w.universe.state.gp_flags = GpFlags::FlagInit;
}

pub(crate) fn step_gp_init(
    w: &mut World,
    tid: usize,
    mut f: GpInitFrame,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = f.cpu;
    let root_lock = w.universe.nodes[0].lock;
    match f.phase {
        GpInitPhase::AcquireRoot => {
            if !spin_acquire_step(w, tid, root_lock)? {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={root_lock}"));
                return Ok(Effect::Costed);
            }
            // Recheck the request under the root lock.
            if w.universe.state.gp_flags != GpFlags::FlagInit {
                f.phase = GpInitPhase::ReleaseRoot { began: false };
                set_frame(w, tid, Frame::GpInit(f));
                emit(cx, w, cpu, tid, "gp_init", "request gone, returning zero".into());
                return Ok(Effect::Costed);
            }
            if !w.universe.state.is_idle() {
                return Err(ModelViolation::Driver(
                    "gp_init while a grace period is in progress".into(),
                ));
            }
            w.universe.state.gp_flags = GpFlags::None;
            w.universe.state.gpnum += 1;
            w.universe.state.gp_state = GpLifecycle::Init;
            // Ghost: sections already open predate this grace period; fresh
            // per-grace-period monitors.
            w.ghost.cleared_this_gp.clear();
            w.ghost.reported_cpus.clear();
            for s in w.ghost.sections.iter_mut() {
                if s.depth > 0 {
                    s.predates_gp = true;
                }
            }
            f.phase = GpInitPhase::ReleaseRoot { began: true };
            set_frame(w, tid, Frame::GpInit(f));
            let gp = w.universe.state.gpnum;
            emit(cx, w, cpu, tid, "gp_init", format!("gpnum := {gp}"));
            Ok(Effect::Costed)
        }
        GpInitPhase::ReleaseRoot { began } => {
            spin_release_step(w, tid, root_lock)?;
            if began {
                f.phase = GpInitPhase::NodeAcquire { idx: 0 };
                set_frame(w, tid, Frame::GpInit(f));
            } else {
                pop_frame(w, tid);
            }
            emit(cx, w, cpu, tid, "spin_release", format!("lock={root_lock}"));
            Ok(Effect::Costed)
        }
        GpInitPhase::NodeAcquire { idx } => {
            let lock = w.universe.nodes[idx].lock;
            if !spin_acquire_step(w, tid, lock)? {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={lock}"));
                return Ok(Effect::Costed);
            }
            let seed_empty = w.fault_overrides(HookPoint::GpInitQsmask);
            let node = &mut w.universe.nodes[idx];
            // Bug 2 seeds the mask empty: no CPU will ever be asked for a
            // quiescent state.
            node.qsmask = if seed_empty { ChildSet::empty() } else { node.qsmaskinit };
            node.gpnum = w.universe.state.gpnum;
            node.completed = w.universe.state.completed;
            f.phase = GpInitPhase::NodeRelease { idx };
            set_frame(w, tid, Frame::GpInit(f));
            if idx == w.universe.data[cpu].mynode {
                // Set up the initiating CPU's local state while its leaf lock
                // is held.
                push_frame(w, tid, Frame::Ngc(NgcFrame::new(cpu, true, true)));
            }
            emit(cx, w, cpu, tid, "gp_init_node", format!("node={idx}"));
            Ok(Effect::Costed)
        }
        GpInitPhase::NodeRelease { idx } => {
            let lock = w.universe.nodes[idx].lock;
            spin_release_step(w, tid, lock)?;
            if idx + 1 < w.universe.nodes.len() {
                f.phase = GpInitPhase::NodeAcquire { idx: idx + 1 };
                set_frame(w, tid, Frame::GpInit(f));
            } else {
                w.universe.state.gp_state = GpLifecycle::WaitQs;
                pop_frame(w, tid);
            }
            emit(cx, w, cpu, tid, "spin_release", format!("lock={lock}"));
            Ok(Effect::Costed)
        }
    }
}

pub(crate) fn step_gp_cleanup(
    w: &mut World,
    tid: usize,
    mut f: CleanupFrame,
    cx: &mut StepCtx,
) -> Result<Effect, ModelViolation> {
    let cpu = f.cpu;
    let root_lock = w.universe.nodes[0].lock;
    match f.phase {
        CleanupPhase::NodeAcquire { idx } => {
            let lock = w.universe.nodes[idx].lock;
            if !spin_acquire_step(w, tid, lock)? {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={lock}"));
                return Ok(Effect::Costed);
            }
            if idx == 0 {
                w.universe.state.gp_state = GpLifecycle::Cleanup;
            }
            w.universe.nodes[idx].completed = w.universe.state.gpnum;
            f.phase = CleanupPhase::NodeRelease { idx };
            set_frame(w, tid, Frame::GpCleanup(f));
            if idx == w.universe.data[cpu].mynode {
                push_frame(w, tid, Frame::Ngc(NgcFrame::new(cpu, true, false)));
            }
            emit(cx, w, cpu, tid, "gp_cleanup_node", format!("node={idx}"));
            Ok(Effect::Costed)
        }
        CleanupPhase::NodeRelease { idx } => {
            let lock = w.universe.nodes[idx].lock;
            spin_release_step(w, tid, lock)?;
            if idx + 1 < w.universe.nodes.len() {
                f.phase = CleanupPhase::NodeAcquire { idx: idx + 1 };
            } else {
                f.phase = CleanupPhase::AcquireRoot;
            }
            set_frame(w, tid, Frame::GpCleanup(f));
            emit(cx, w, cpu, tid, "spin_release", format!("lock={lock}"));
            Ok(Effect::Costed)
        }
        CleanupPhase::AcquireRoot => {
            if !spin_acquire_step(w, tid, root_lock)? {
                emit(cx, w, cpu, tid, "spin_blocked", format!("lock={root_lock}"));
                return Ok(Effect::Costed);
            }
            // The grace period ends here. Any ghost section opened before it
            // began must already have closed; a survivor is a safety breach.
            for c in 0..w.config.cpus {
                let s = &w.ghost.sections[c];
                if s.depth > 0 && s.predates_gp {
                    w.ghost.breaches += 1;
                    emit(
                        cx,
                        w,
                        cpu,
                        tid,
                        "safety_monitor",
                        format!("pre-existing reader on cpu {c} outlived the grace period"),
                    );
                }
            }
            w.universe.state.completed = w.universe.state.gpnum;
            w.universe.state.gp_state = GpLifecycle::Cleaned;
            w.ghost.gp_completions += 1;
            let reinit = w.universe.state.gp_flags == GpFlags::FlagInit;
            f.phase = CleanupPhase::ReleaseRootAdvance { reinit };
            set_frame(w, tid, Frame::GpCleanup(f));
            let gp = w.universe.state.completed;
            emit(cx, w, cpu, tid, "gp_cleanup", format!("completed := {gp}"));
            Ok(Effect::Costed)
        }
        CleanupPhase::ReleaseRootAdvance { reinit } => {
            spin_release_step(w, tid, root_lock)?;
            // Advance the running CPU's callbacks; other CPUs catch up on
            // their next scheduling-clock pass.
            let mynode = w.universe.data[cpu].mynode;
            let target = crate::qs::cbs_target(w, mynode);
            let c = w.universe.data[cpu].completed;
            w.universe.data[cpu].callbacks.advance(c, target);
            pop_frame(w, tid);
            if reinit {
                push_frame(w, tid, Frame::GpInit(GpInitFrame { cpu, phase: GpInitPhase::AcquireRoot }));
            } else {
                w.universe.state.gp_state = GpLifecycle::WaitGps;
            }
            emit(cx, w, cpu, tid, "advance_callbacks", format!("completed={c}"));
            Ok(Effect::Costed)
        }
    }
}
