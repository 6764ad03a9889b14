//! The simulated machine: RCU universe, lock and interrupt models, store
//! buffers, virtual threads, event budgets, and ghost monitors. Everything
//! semantic is plain data, so worlds clone cheaply for backtracking and hash
//! deterministically for state deduplication.

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use crate::cbs::DEFAULT_BLIMIT;
use crate::faults::FaultPlan;
use crate::geometry::compute_geometry;
use crate::state::{init_universe_with_blimit, RcuUniverse};

use super::cell::{CellAddr, MemoryModel, StoreBuffer};
use super::lock::LockState;
use super::thread::{Program, ThreadStatus, VThread};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Tick,
    CtxSwitch,
}

/// Static run configuration. Not part of the semantic state digest.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub cpus: usize,
    pub readers: u32,
    /// Put the second reader on CPU 0 instead of its own CPU 2.
    pub second_reader_on_cpu0: bool,
    pub fault: FaultPlan,
    /// Bypasses every fault hook; used by the hook-transparency check.
    pub hooks_disabled: bool,
    pub memory_model: MemoryModel,
    pub blimit: usize,
    pub leaf_fanout: usize,
    pub interior_fanout: usize,
    /// Explorer-injected scheduling-clock interrupts per CPU.
    pub tick_budget: u32,
    /// Explorer-injected voluntary context switches per CPU.
    pub ctx_budget: u32,
    /// Allow tick delivery while a task is mid-execution (not just parked or
    /// finished).
    pub mid_task_ticks: bool,
    /// Pin scheduling to the fixed direct-call points: no injected events.
    pub paper_faithful: bool,
    /// Run the full universe audit after every step.
    pub audit_every_step: bool,
    /// Native mode only: dwell between the reader's two loads, per reader.
    pub reader_delays_us: Vec<u64>,
    /// Native mode only: stagger before the updater's first step.
    pub updater_stagger_us: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            cpus: 2,
            readers: 1,
            second_reader_on_cpu0: false,
            fault: FaultPlan::None,
            hooks_disabled: false,
            memory_model: MemoryModel::Sc,
            blimit: DEFAULT_BLIMIT,
            leaf_fanout: 16,
            interior_fanout: 64,
            tick_budget: 2,
            ctx_budget: 2,
            mid_task_ticks: true,
            paper_faithful: false,
            audit_every_step: false,
            reader_delays_us: Vec::new(),
            updater_stagger_us: 0,
        }
    }
}

/// Per-CPU ghost reader-section state (flattened nesting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SectionGhost {
    pub depth: u32,
    /// Section was already open when the current grace period started.
    pub predates_gp: bool,
    /// Logical step at which the section opened; trace metadata only, not
    /// hashed (it would defeat state deduplication).
    pub enter_tick: u64,
}

/// Monitors and bookkeeping that exist only to check the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct GhostState {
    pub sections: Vec<SectionGhost>,
    /// (node, child ordinal) pairs cleared in the current grace period.
    pub cleared_this_gp: BTreeSet<(usize, usize)>,
    /// CPUs whose leaf bit was cleared in the current grace period.
    pub reported_cpus: BTreeSet<usize>,
    /// Pre-existing reader sections still open when a grace period ended.
    pub breaches: u32,
    /// report_qs_rsp invoked with a nonempty root mask.
    pub premature_rsp: u32,
    /// Parent bit cleared before the whole child subtree reported.
    pub premature_parent_clear: u32,
    /// Same (node, bit) cleared twice within one grace period.
    pub double_clear: u32,
    /// Callback invocation order.
    pub invoked: Vec<u64>,
    pub gp_completions: u32,
}

/// Backing store for litmus cells that do not live in the RCU universe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct MemBacking {
    pub x: u64,
    pub y: u64,
    pub r1: Vec<u64>,
    pub r2: Vec<u64>,
    pub wait_flag: u64,
    pub lit: [u64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventState {
    pub tick_budget: Vec<u32>,
    pub ctx_budget: Vec<u32>,
    /// Injected but deferred events (interrupts arrived while disabled).
    pub pending: Vec<Vec<EventKind>>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub universe: RcuUniverse,
    pub locks: LockState,
    pub threads: Vec<VThread>,
    pub buffers: Vec<StoreBuffer>,
    pub mem: MemBacking,
    pub events: EventState,
    pub ghost: GhostState,
    pub next_cb_id: u64,
    pub config: WorldConfig,
}

impl World {
    /// Builds the reader/updater scenario world. CPU 0 runs the first reader,
    /// CPU 1 the updater; a second reader gets CPU 2 (or shares CPU 0).
    pub fn new_rcu(config: WorldConfig) -> Self {
        let mut config = config;
        let extra_reader_cpu = if config.readers >= 2 && !config.second_reader_on_cpu0 { 1 } else { 0 };
        config.cpus = 2 + extra_reader_cpu;
        let geom = compute_geometry(config.cpus, config.leaf_fanout, config.interior_fanout)
            .expect("scenario geometry is valid");
        let universe = init_universe_with_blimit(&geom, config.blimit);

        let mut threads = vec![VThread::new(0, 0, Program::Reader { idx: 0 })];
        threads.push(VThread::new(1, 1, Program::Updater));
        if config.readers >= 2 {
            let cpu = if config.second_reader_on_cpu0 { 0 } else { 2 };
            threads.push(VThread::new(2, cpu, Program::Reader { idx: 1 }));
        }

        Self::assemble(universe, threads, config)
    }

    /// Builds a raw-litmus world (no RCU activity) over two CPUs.
    pub fn new_litmus(programs: [Program; 2], config: WorldConfig) -> Self {
        let mut config = config;
        config.cpus = 2;
        let geom = compute_geometry(2, config.leaf_fanout, config.interior_fanout).expect("valid");
        let universe = init_universe_with_blimit(&geom, config.blimit);
        let threads = vec![VThread::new(0, 0, programs[0]), VThread::new(1, 1, programs[1])];
        Self::assemble(universe, threads, config)
    }

    /// Builds a world of inert step threads for schedule-count oracles.
    pub fn new_tiny(step_counts: &[u32], config: WorldConfig) -> Self {
        let mut config = config;
        config.cpus = step_counts.len().max(1);
        let geom = compute_geometry(config.cpus, config.leaf_fanout, config.interior_fanout).expect("valid");
        let universe = init_universe_with_blimit(&geom, config.blimit);
        let threads = step_counts
            .iter()
            .enumerate()
            .map(|(i, &n)| VThread::new(i, i, Program::TinySteps { n }))
            .collect();
        Self::assemble(universe, threads, config)
    }

    fn assemble(universe: RcuUniverse, threads: Vec<VThread>, config: WorldConfig) -> Self {
        let cpus = config.cpus;
        let nodes = universe.nodes.len();
        let readers = config.readers.max(1) as usize;
        let (tick_budget, ctx_budget) = if config.paper_faithful {
            (0, 0)
        } else {
            (config.tick_budget, config.ctx_budget)
        };
        World {
            universe,
            locks: LockState::new(cpus, nodes),
            threads,
            buffers: vec![StoreBuffer::default(); cpus],
            mem: MemBacking { r1: vec![0; readers], r2: vec![0; readers], ..Default::default() },
            events: EventState {
                tick_budget: vec![tick_budget; cpus],
                ctx_budget: vec![ctx_budget; cpus],
                pending: vec![Vec::new(); cpus],
            },
            ghost: GhostState { sections: vec![SectionGhost::default(); cpus], ..Default::default() },
            next_cb_id: 1,
            config,
        }
    }

    // ---- instrumented cell access -------------------------------------

    fn backing(&self, addr: CellAddr) -> u64 {
        match addr {
            CellAddr::X => self.mem.x,
            CellAddr::Y => self.mem.y,
            CellAddr::R1(i) => self.mem.r1[i as usize],
            CellAddr::R2(i) => self.mem.r2[i as usize],
            CellAddr::WaitFlag => self.mem.wait_flag,
            CellAddr::PassedQuiesce(c) => self.universe.data[c as usize].passed_quiesce as u64,
            CellAddr::QsPending(c) => self.universe.data[c as usize].qs_pending as u64,
            CellAddr::Lit(i) => self.mem.lit[i as usize],
        }
    }

    fn backing_store(&mut self, addr: CellAddr, value: u64) {
        match addr {
            CellAddr::X => self.mem.x = value,
            CellAddr::Y => self.mem.y = value,
            CellAddr::R1(i) => self.mem.r1[i as usize] = value,
            CellAddr::R2(i) => self.mem.r2[i as usize] = value,
            CellAddr::WaitFlag => self.mem.wait_flag = value,
            CellAddr::PassedQuiesce(c) => self.universe.data[c as usize].passed_quiesce = value != 0,
            CellAddr::QsPending(c) => self.universe.data[c as usize].qs_pending = value != 0,
            CellAddr::Lit(i) => self.mem.lit[i as usize] = value,
        }
    }

    /// Load as seen by `cpu`: own buffered stores first, then memory.
    pub fn shared_load(&self, cpu: usize, addr: CellAddr) -> u64 {
        if let Some(v) = self.buffers[cpu].forward(addr) {
            return v;
        }
        self.backing(addr)
    }

    /// Store from `cpu`: immediate under SC, buffered under TSO/PSO.
    pub fn shared_store(&mut self, cpu: usize, addr: CellAddr, value: u64) {
        match self.config.memory_model {
            MemoryModel::Sc => self.backing_store(addr, value),
            MemoryModel::Tso | MemoryModel::Pso => self.buffers[cpu].entries.push((addr, value)),
        }
    }

    /// Drains `cpu`'s buffer to memory in buffer order (a full barrier; lock
    /// operations and release stores do this).
    pub fn flush_cpu(&mut self, cpu: usize) {
        let entries = std::mem::take(&mut self.buffers[cpu].entries);
        for (addr, v) in entries {
            self.backing_store(addr, v);
        }
    }

    /// Flushes one pending store: the oldest overall under TSO, the oldest
    /// for `addr` under PSO.
    pub fn flush_one(&mut self, cpu: usize, addr: Option<CellAddr>) -> bool {
        let popped = match (self.config.memory_model, addr) {
            (MemoryModel::Pso, Some(a)) => self.buffers[cpu].pop_oldest_for(a),
            _ => self.buffers[cpu].pop_oldest(),
        };
        match popped {
            Some((a, v)) => {
                self.backing_store(a, v);
                true
            }
            None => false,
        }
    }

    /// Memory value ignoring buffers; used only by end-of-run property
    /// evaluation, after task exits have flushed.
    pub fn memory_value(&self, addr: CellAddr) -> u64 {
        self.backing(addr)
    }

    // ---- thread and event scheduling ----------------------------------

    pub fn thread(&self, tid: usize) -> &VThread {
        &self.threads[tid]
    }

    /// Whether the active fault plan mutates behavior at `hook`.
    pub fn fault_overrides(&self, hook: crate::faults::HookPoint) -> bool {
        !self.config.hooks_disabled && self.config.fault.overrides(hook)
    }

    pub fn all_tasks_done(&self) -> bool {
        self.threads.iter().all(|t| t.task_done)
    }

    pub fn updater_blocked(&self) -> bool {
        self.threads.iter().any(|t| t.is_updater() && !t.task_done)
    }

    pub fn runnable(&self, tid: usize) -> bool {
        let t = &self.threads[tid];
        if t.frames.is_empty() {
            return false;
        }
        match t.status {
            ThreadStatus::Runnable => true,
            ThreadStatus::BlockedOnLock { lock, cpu_lock } => {
                if cpu_lock {
                    self.locks.cpu_lock[lock].is_none()
                } else {
                    self.locks.spin_free(lock)
                }
            }
            ThreadStatus::Parked => self.shared_load(t.cpu, CellAddr::WaitFlag) == 0,
        }
    }

    /// The thread an interrupt on `cpu` would run on: the scheduled task, or
    /// a finished task's (empty) context.
    pub fn occupant(&self, cpu: usize) -> Option<usize> {
        if let Some(tid) = self.locks.cpu_lock[cpu] {
            return Some(tid);
        }
        self.threads.iter().find(|t| t.cpu == cpu && t.task_done).map(|t| t.id)
    }

    pub fn event_deliverable(&self, cpu: usize, kind: EventKind) -> bool {
        if self.all_tasks_done() {
            return false;
        }
        let budget = match kind {
            EventKind::Tick => self.events.tick_budget[cpu],
            EventKind::CtxSwitch => self.events.ctx_budget[cpu],
        };
        if budget == 0 {
            return false;
        }
        self.event_landable(cpu, kind)
    }

    /// Whether an event could run on `cpu` right now, budgets aside.
    pub fn event_landable(&self, cpu: usize, kind: EventKind) -> bool {
        if !self.locks.irqs_enabled(cpu) {
            return false;
        }
        let Some(tid) = self.occupant(cpu) else { return false };
        let t = &self.threads[tid];
        if t.in_irq || !t.held_locks.is_empty() {
            return false;
        }
        if matches!(t.status, ThreadStatus::BlockedOnLock { .. }) {
            return false;
        }
        let idle = t.task_done || matches!(t.status, ThreadStatus::Parked);
        match kind {
            EventKind::Tick => idle || self.config.mid_task_ticks,
            // Context switches are voluntary; only an idle occupant (a CPU
            // running unrelated work) produces them, and never from inside a
            // read-side critical section.
            EventKind::CtxSwitch => idle && self.ghost.sections[cpu].depth == 0,
        }
    }

    // ---- state digest --------------------------------------------------

    /// 128-bit semantic digest for state deduplication. Two structurally
    /// different hash functions over the same canonical field walk; trace
    /// metadata (section enter ticks) is excluded.
    pub fn digest(&self) -> (u64, u64) {
        let mut sip = std::collections::hash_map::DefaultHasher::new();
        let mut fnv = Fnv64::new();
        self.feed(&mut sip);
        self.feed(&mut fnv);
        (sip.finish(), fnv.finish())
    }

    fn feed<H: Hasher>(&self, h: &mut H) {
        self.universe.hash(h);
        self.locks.hash(h);
        self.buffers.hash(h);
        self.mem.hash(h);
        self.events.hash(h);
        self.next_cb_id.hash(h);
        for t in &self.threads {
            t.hash(h);
        }
        // Ghost state minus per-section enter ticks.
        for s in &self.ghost.sections {
            s.depth.hash(h);
            s.predates_gp.hash(h);
        }
        self.ghost.cleared_this_gp.hash(h);
        self.ghost.reported_cpus.hash(h);
        self.ghost.breaches.hash(h);
        self.ghost.premature_rsp.hash(h);
        self.ghost.premature_parent_clear.hash(h);
        self.ghost.double_clear.hash(h);
        self.ghost.invoked.hash(h);
        self.ghost.gp_completions.hash(h);
    }
}

/// FNV-1a, as the second independent hash for the state digest.
struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf29ce484222325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sc_store_is_immediate() {
        let mut w = World::new_rcu(WorldConfig::default());
        w.shared_store(0, CellAddr::X, 1);
        assert_eq!(w.shared_load(1, CellAddr::X), 1);
    }

    #[test]
    fn tso_store_buffers_and_forwards() {
        let cfg = WorldConfig { memory_model: MemoryModel::Tso, ..Default::default() };
        let mut w = World::new_rcu(cfg);
        w.shared_store(0, CellAddr::X, 1);
        // own CPU sees it, the other does not until a flush
        assert_eq!(w.shared_load(0, CellAddr::X), 1);
        assert_eq!(w.shared_load(1, CellAddr::X), 0);
        assert!(w.flush_one(0, None));
        assert_eq!(w.shared_load(1, CellAddr::X), 1);
    }

    #[test]
    fn flush_cpu_empties_buffer_in_order() {
        let cfg = WorldConfig { memory_model: MemoryModel::Pso, ..Default::default() };
        let mut w = World::new_rcu(cfg);
        w.shared_store(0, CellAddr::X, 1);
        w.shared_store(0, CellAddr::X, 2);
        w.flush_cpu(0);
        assert!(w.buffers[0].is_empty());
        assert_eq!(w.memory_value(CellAddr::X), 2);
    }

    #[test]
    fn digest_differs_on_semantic_change_only() {
        let w1 = World::new_rcu(WorldConfig::default());
        let mut w2 = w1.clone();
        assert_eq!(w1.digest(), w2.digest());
        w2.ghost.sections[0].enter_tick = 99; // metadata: not hashed
        assert_eq!(w1.digest(), w2.digest());
        w2.mem.x = 1;
        assert_ne!(w1.digest(), w2.digest());
    }

    #[test]
    fn rcu_world_shapes() {
        let w = World::new_rcu(WorldConfig::default());
        assert_eq!(w.threads.len(), 2);
        assert_eq!(w.config.cpus, 2);
        let w2 = World::new_rcu(WorldConfig { readers: 2, ..Default::default() });
        assert_eq!(w2.threads.len(), 3);
        assert_eq!(w2.config.cpus, 3);
        assert_eq!(w2.threads[2].cpu, 2);
        let w3 = World::new_rcu(WorldConfig {
            readers: 2,
            second_reader_on_cpu0: true,
            ..Default::default()
        });
        assert_eq!(w3.config.cpus, 2);
        assert_eq!(w3.threads[2].cpu, 0);
    }
}
