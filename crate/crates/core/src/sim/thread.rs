//! Virtual threads: resumable activities with explicit yield points.
//!
//! A thread's continuation is a stack of frames; one scheduler step runs the
//! top frame far enough to perform exactly one observable action (a shared
//! cell access, a lock operation, an event delivery, or a ghost transition).
//! Everything else is straight-line local computation and folds into the
//! surrounding step. Because continuations are plain data, whole worlds can
//! be cloned for backtracking and hashed for deduplication.

use serde::Serialize;

use crate::state::ChildSet;

/// What a virtual thread runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Program {
    /// Fig-style reader: lock, read x into r1, read y into r2, unlock.
    Reader { idx: u8 },
    /// Updater: x = 1; synchronize; y = 1.
    Updater,
    /// Message-passing litmus writer: data store then flag store.
    MpWriter { release: bool },
    /// Message-passing litmus reader: flag load then data load.
    MpReader,
    /// Store-buffering litmus halves.
    SbLeft,
    SbRight,
    /// Test-only program: `n` inert steps (schedule-count oracle).
    TinySteps { n: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReaderPhase {
    AcquireCpu,
    ReadLock,
    LoadX,
    StoreR1,
    LoadY,
    StoreR2,
    ReadUnlock,
    ExitCs,
    ReleaseCpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdaterPhase {
    AcquireCpu,
    StoreX,
    /// Bug 1 hook: the whole synchronize body may be skipped here.
    SyncEntry,
    SyncSetFlag,
    SyncEnqueue,
    SyncRequestAcquire,
    SyncRequestRelease,
    /// The voluntary context switch implied by blocking: records the
    /// quiescent state, then the wait begins.
    SyncBlockCs,
    SyncWaitLoad,
    StoreY,
    ExitCs,
    ReleaseCpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LitmusPhase {
    S0,
    S1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CtxPhase {
    RecordQs,
    Pc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PcPhase {
    PushCqs,
    PushBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NgcPhase {
    Acquire,
    /// Runs the counter/callback bookkeeping when the caller already holds
    /// the leaf lock.
    Body,
    StorePq,
    StoreQsp,
    Release,
}

/// note_gp_changes continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NgcFrame {
    pub cpu: usize,
    /// Caller (gp_init / gp_cleanup traversal) already holds the leaf lock.
    pub lock_held: bool,
    /// Invoked inline from gp_init on the initiating CPU: newly arrived
    /// callbacks may bypass into the WAIT segment.
    pub from_gp_init: bool,
    pub phase: NgcPhase,
    /// Decided at Body time: whether a new-GP notice requires the
    /// passed_quiesce / qs_pending stores, and the value for the latter.
    pub store_pq: bool,
    pub qsp_value: bool,
    pub store_qsp: bool,
}

impl NgcFrame {
    pub fn new(cpu: usize, lock_held: bool, from_gp_init: bool) -> Self {
        NgcFrame {
            cpu,
            lock_held,
            from_gp_init,
            phase: if lock_held { NgcPhase::Body } else { NgcPhase::Acquire },
            store_pq: false,
            qsp_value: false,
            store_qsp: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CqsPhase {
    RunNgc,
    LoadQsp,
    LoadPq,
    MaybeReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RdpPhase {
    Acquire,
    /// Stale detection: zero passed_quiesce, then release.
    ResetPq,
    ReleaseStale,
    /// Bit not set (or set): qs_pending goes to zero either way.
    StoreQspZero,
    ReleaseNoWalk,
    StartWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RdpFrame {
    pub cpu: usize,
    pub phase: RdpPhase,
    /// Set under the leaf lock at Acquire: walk the tree after qs_pending is
    /// cleared.
    pub will_walk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WalkPhase {
    /// Holding `node`'s lock: check, clear, and either stop (releasing) or
    /// ascend (releasing, then acquiring the parent).
    WorkHolding,
    AcquireParent,
}

/// report_qs_rnp continuation. Starts at the leaf with its lock held.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WalkFrame {
    pub cpu: usize,
    pub node: usize,
    pub mask: ChildSet,
    /// Grace period observed when the walk began; a change stops it.
    pub gp: u64,
    pub phase: WalkPhase,
    pub entered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GpInitPhase {
    AcquireRoot,
    ReleaseRoot { began: bool },
    NodeAcquire { idx: usize },
    NodeRelease { idx: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GpInitFrame {
    pub cpu: usize,
    pub phase: GpInitPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CleanupPhase {
    NodeAcquire { idx: usize },
    NodeRelease { idx: usize },
    AcquireRoot,
    ReleaseRootAdvance { reinit: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CleanupFrame {
    pub cpu: usize,
    pub phase: CleanupPhase,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BatchPhase {
    Take,
    Invoke { pending: Vec<crate::cbs::Callback> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BatchFrame {
    pub cpu: usize,
    pub phase: BatchPhase,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Frame {
    Reader(ReaderPhase),
    Updater(UpdaterPhase),
    Litmus(LitmusPhase),
    TinySteps { remaining: u32 },
    CtxSwitch(CtxPhase),
    ProcessCbs(PcPhase),
    Ngc(NgcFrame),
    Cqs(CqsPhase),
    ReportRdp(RdpFrame),
    RnpWalk(WalkFrame),
    GpInit(GpInitFrame),
    GpCleanup(CleanupFrame),
    Batch(BatchFrame),
    /// Marker under injected handler frames; popping it ends the interrupt.
    IrqExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThreadStatus {
    Runnable,
    BlockedOnLock { lock: usize, cpu_lock: bool },
    /// Waiting for the grace-period wait flag to clear.
    Parked,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VThread {
    pub id: usize,
    pub cpu: usize,
    pub program: Program,
    pub frames: Vec<Frame>,
    pub status: ThreadStatus,
    /// Node locks currently held, acquisition order. Also drives the
    /// one-lock-at-a-time audit and interrupt gating.
    pub held_locks: Vec<usize>,
    pub holds_cpu_lock: bool,
    /// Scratch register for values carried between adjacent steps.
    pub scratch: u64,
    /// Observation registers for raw litmus programs.
    pub lit_r1: u64,
    pub lit_r2: u64,
    /// Task body has finished (sticky; interrupt deliveries do not clear it).
    pub task_done: bool,
    /// Currently executing injected handler frames.
    pub in_irq: bool,
}

impl VThread {
    pub fn new(id: usize, cpu: usize, program: Program) -> Self {
        let frames = vec![match program {
            Program::Reader { .. } => Frame::Reader(ReaderPhase::AcquireCpu),
            Program::Updater => Frame::Updater(UpdaterPhase::AcquireCpu),
            Program::MpWriter { .. } | Program::MpReader | Program::SbLeft | Program::SbRight => {
                Frame::Litmus(LitmusPhase::S0)
            }
            Program::TinySteps { n } => Frame::TinySteps { remaining: n },
        }];
        VThread {
            id,
            cpu,
            program,
            frames,
            status: ThreadStatus::Runnable,
            held_locks: Vec::new(),
            holds_cpu_lock: false,
            scratch: 0,
            lit_r1: 0,
            lit_r2: 0,
            task_done: false,
            in_irq: false,
        }
    }

    pub fn is_updater(&self) -> bool {
        matches!(self.program, Program::Updater)
    }
}
