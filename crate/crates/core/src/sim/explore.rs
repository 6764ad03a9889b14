//! Deterministic schedule exploration.
//!
//! At every point the explorer enumerates the available choices in a stable
//! order: step one runnable thread, deliver a budgeted tick or context-switch
//! event, or flush one pending store. Exhaustive mode walks the whole choice
//! tree depth-first (optionally deduplicating identical states); random mode
//! samples schedules with a seeded generator; replay mode follows a recorded
//! choice-index string. A schedule is the sequence of chosen indices, so any
//! run is reproducible bit for bit.

use rand_core::{RngCore, SeedableRng};
use std::collections::HashSet;

use super::cell::{CellAddr, MemoryModel};
use super::step::{deliver_event_now, step_thread, StepCtx};
use super::trace::{NullSink, TraceSink};
use super::world::{EventKind, World};
use super::ModelViolation;
use crate::state::check_universe;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Step { tid: usize },
    Deliver { cpu: usize, kind: EventKind },
    DeliverPending { cpu: usize },
    Flush { cpu: usize, addr: Option<CellAddr> },
}

/// The schedule alphabet at the current state, in stable order.
pub fn enumerate_choices(w: &World) -> Vec<Choice> {
    let mut out = Vec::new();
    for tid in 0..w.threads.len() {
        if w.runnable(tid) {
            out.push(Choice::Step { tid });
        }
    }
    for cpu in 0..w.config.cpus {
        for kind in [EventKind::Tick, EventKind::CtxSwitch] {
            if w.event_deliverable(cpu, kind) {
                out.push(Choice::Deliver { cpu, kind });
            }
        }
    }
    for cpu in 0..w.config.cpus {
        if let Some(&kind) = w.events.pending[cpu].first() {
            if w.event_landable(cpu, kind) {
                out.push(Choice::DeliverPending { cpu });
            }
        }
    }
    match w.config.memory_model {
        MemoryModel::Sc => {}
        MemoryModel::Tso => {
            for cpu in 0..w.config.cpus {
                if !w.buffers[cpu].is_empty() {
                    out.push(Choice::Flush { cpu, addr: None });
                }
            }
        }
        MemoryModel::Pso => {
            for cpu in 0..w.config.cpus {
                for addr in w.buffers[cpu].pending_addrs() {
                    out.push(Choice::Flush { cpu, addr: Some(addr) });
                }
            }
        }
    }
    out
}

pub fn apply_choice(w: &mut World, choice: Choice, cx: &mut StepCtx) -> Result<(), ModelViolation> {
    match choice {
        Choice::Step { tid } => step_thread(w, tid, cx)?,
        Choice::Deliver { cpu, kind } => {
            match kind {
                EventKind::Tick => w.events.tick_budget[cpu] -= 1,
                EventKind::CtxSwitch => w.events.ctx_budget[cpu] -= 1,
            }
            deliver_event_now(w, cpu, kind, cx);
        }
        Choice::DeliverPending { cpu } => {
            let kind = w.events.pending[cpu].remove(0);
            deliver_event_now(w, cpu, kind, cx);
        }
        Choice::Flush { cpu, addr } => {
            w.flush_one(cpu, addr);
            super::step::emit(cx, w, cpu, 0, "flush", format!("{addr:?}"));
        }
    }
    cx.step_no += 1;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ExploreConfig {
    pub max_steps: u64,
    pub max_expansions: u64,
    pub dedup: bool,
    /// Stop as soon as a grace-period completion is witnessed.
    pub stop_on_gp_completion: bool,
    /// Stop as soon as a property violation is witnessed.
    pub stop_on_violation: bool,
}

impl ExploreConfig {
    pub fn standard() -> Self {
        ExploreConfig {
            max_steps: 400,
            max_expansions: 50_000_000,
            dedup: true,
            stop_on_gp_completion: false,
            stop_on_violation: true,
        }
    }
}

/// What exploration saw. `schedules` counts maximal paths only without
/// deduplication; with it, `terminals` counts distinct terminal states.
#[derive(Debug, Clone, Default)]
pub struct Exploration {
    pub violation: Option<Violation>,
    pub gp_witness: Option<Vec<u16>>,
    pub schedules: u64,
    pub expansions: u64,
    pub distinct_states: u64,
    pub terminals: u64,
    pub all_done_terminals: u64,
    pub updater_blocked_terminals: u64,
    pub truncated: bool,
    pub max_depth: u64,
    pub ghost_breaches: u64,
    pub premature_rsp_seen: bool,
    /// (r1, r2) pairs observed at completed litmus terminals.
    pub litmus_outcomes: std::collections::BTreeSet<(u64, u64)>,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub message: String,
    pub schedule: Vec<u16>,
}

/// Extracts the litmus observation registers, if this world runs a raw
/// litmus program.
fn litmus_pair(w: &World) -> Option<(u64, u64)> {
    use super::thread::Program;
    let mut r1 = None;
    let mut r2 = None;
    for t in &w.threads {
        match t.program {
            Program::MpReader => {
                r1 = Some(t.lit_r1);
                r2 = Some(t.lit_r2);
            }
            Program::SbLeft => r1 = Some(t.lit_r1),
            Program::SbRight => r2 = Some(t.lit_r2),
            _ => {}
        }
    }
    Some((r1?, r2?))
}

fn observe_terminal(w: &World, path: &[u16], exp: &mut Exploration) {
    exp.terminals += 1;
    if w.all_tasks_done() {
        exp.all_done_terminals += 1;
        if let Some(pair) = litmus_pair(w) {
            exp.litmus_outcomes.insert(pair);
        }
        if exp.violation.is_none() && !crate::api::fig2_holds(w, w.config.readers) {
            exp.violation = Some(Violation {
                message: violation_message(w),
                schedule: path.to_vec(),
            });
        }
    }
    if w.updater_blocked() {
        exp.updater_blocked_terminals += 1;
    }
}

fn violation_message(w: &World) -> String {
    let mut parts = Vec::new();
    for k in 0..w.config.readers as u8 {
        let r1 = w.memory_value(CellAddr::R1(k));
        let r2 = w.memory_value(CellAddr::R2(k));
        if !(r2 == 0 || r1 == 1) {
            parts.push(format!("reader {k}: r1={r1}, r2={r2}"));
        }
    }
    format!("grace-period guarantee violated ({})", parts.join("; "))
}

fn observe_step(w: &World, path: &[u16], exp: &mut Exploration) {
    if w.ghost.gp_completions > 0 && exp.gp_witness.is_none() {
        exp.gp_witness = Some(path.to_vec());
    }
    exp.ghost_breaches = exp.ghost_breaches.max(w.ghost.breaches as u64);
    if w.ghost.premature_rsp > 0 {
        exp.premature_rsp_seen = true;
    }
}

/// Depth-first exhaustive exploration of every schedule from `initial`.
pub fn explore_exhaustive(initial: &World, cfg: &ExploreConfig) -> Result<Exploration, ModelViolation> {
    let mut exp = Exploration::default();
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    // Stack of (state, its choices, next choice index to try).
    let mut stack: Vec<(World, Vec<Choice>, usize)> = Vec::new();
    let mut path: Vec<u16> = Vec::new();

    let root_choices = enumerate_choices(initial);
    if cfg.dedup {
        seen.insert(initial.digest());
    }
    exp.distinct_states = 1;
    if root_choices.is_empty() {
        observe_terminal(initial, &path, &mut exp);
        exp.schedules += 1;
        return Ok(exp);
    }
    stack.push((initial.clone(), root_choices, 0));

    let mut sink = NullSink;
    while let Some((world, choices, idx)) = stack.last_mut().map(|(w, c, i)| (w.clone(), c.clone(), *i)) {
        if idx >= choices.len() {
            stack.pop();
            path.pop();
            continue;
        }
        stack.last_mut().unwrap().2 += 1;

        if exp.expansions >= cfg.max_expansions {
            exp.truncated = true;
            break;
        }
        let mut next = world;
        let mut cx = StepCtx::new(&mut sink);
        cx.step_no = path.len() as u64;
        apply_choice(&mut next, choices[idx], &mut cx)?;
        exp.expansions += 1;
        path.push(idx as u16);
        exp.max_depth = exp.max_depth.max(path.len() as u64);
        observe_step(&next, &path, &mut exp);

        if cfg.stop_on_gp_completion && exp.gp_witness.is_some() {
            return Ok(exp);
        }

        if path.len() as u64 >= cfg.max_steps {
            exp.truncated = true;
            path.pop();
            continue;
        }
        if cfg.dedup && !seen.insert(next.digest()) {
            path.pop();
            continue;
        }
        if cfg.dedup {
            exp.distinct_states += 1;
        }
        let next_choices = enumerate_choices(&next);
        if next_choices.is_empty() {
            observe_terminal(&next, &path, &mut exp);
            exp.schedules += 1;
            if cfg.stop_on_violation && exp.violation.is_some() {
                return Ok(exp);
            }
            path.pop();
            continue;
        }
        stack.push((next, next_choices, 0));
    }
    Ok(exp)
}

/// Outcome of a single executed schedule.
#[derive(Debug, Clone, Default)]
pub struct RunObservation {
    pub steps: u64,
    pub all_done: bool,
    pub updater_blocked: bool,
    pub gp_completed: bool,
    pub violation: Option<String>,
    pub breaches: u32,
    pub litmus: Option<(u64, u64)>,
    pub schedule: Vec<u16>,
    pub truncated: bool,
}

fn finish_observation(w: &World, schedule: Vec<u16>, truncated: bool) -> RunObservation {
    let all_done = w.all_tasks_done();
    RunObservation {
        steps: schedule.len() as u64,
        all_done,
        updater_blocked: w.updater_blocked(),
        gp_completed: w.ghost.gp_completions > 0,
        violation: if all_done && !crate::api::fig2_holds(w, w.config.readers) {
            Some(violation_message(w))
        } else {
            None
        },
        breaches: w.ghost.breaches,
        litmus: if all_done { litmus_pair(w) } else { None },
        schedule,
        truncated,
    }
}

/// Runs one schedule picking uniformly with a seeded generator.
pub fn run_random(
    initial: &World,
    seed: u64,
    max_steps: u64,
    audit: bool,
    sink: &mut dyn TraceSink,
) -> Result<RunObservation, ModelViolation> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut w = initial.clone();
    let mut cx = StepCtx::new(sink);
    let mut schedule = Vec::new();
    let mut truncated = false;
    let mut prev_counters = counters_snapshot(&w);
    loop {
        let choices = enumerate_choices(&w);
        if choices.is_empty() {
            break;
        }
        if schedule.len() as u64 >= max_steps {
            truncated = true;
            break;
        }
        let idx = (rng.next_u64() % choices.len() as u64) as usize;
        apply_choice(&mut w, choices[idx], &mut cx)?;
        schedule.push(idx as u16);
        if audit {
            check_universe(&w.universe).map_err(|e| ModelViolation::Audit(e.to_string()))?;
            let now = counters_snapshot(&w);
            for (a, b) in prev_counters.iter().zip(now.iter()) {
                if b < a {
                    return Err(ModelViolation::Audit("a grace-period counter decreased".into()));
                }
            }
            prev_counters = now;
        }
    }
    Ok(finish_observation(&w, schedule, truncated))
}

fn counters_snapshot(w: &World) -> Vec<u64> {
    let mut v = vec![w.universe.state.gpnum, w.universe.state.completed];
    for n in &w.universe.nodes {
        v.push(n.gpnum);
        v.push(n.completed);
    }
    for d in &w.universe.data {
        v.push(d.gpnum);
        v.push(d.completed);
    }
    v
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("schedule index {index} out of range at step {step} ({available} choices)")]
    IndexOutOfRange { step: usize, index: u16, available: usize },
    #[error("model violation during replay: {0}")]
    Model(#[from] ModelViolation),
}

/// Re-executes a recorded schedule exactly.
pub fn replay(
    initial: &World,
    schedule: &[u16],
    sink: &mut dyn TraceSink,
) -> Result<RunObservation, ReplayError> {
    let mut w = initial.clone();
    let mut cx = StepCtx::new(sink);
    for (step, &idx) in schedule.iter().enumerate() {
        let choices = enumerate_choices(&w);
        if idx as usize >= choices.len() {
            return Err(ReplayError::IndexOutOfRange { step, index: idx, available: choices.len() });
        }
        apply_choice(&mut w, choices[idx as usize], &mut cx)?;
    }
    Ok(finish_observation(&w, schedule.to_vec(), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trace::HashingSink;
    use crate::sim::world::WorldConfig;

    #[test]
    fn single_runnable_thread_is_the_only_choice() {
        let w = World::new_tiny(&[3], WorldConfig::default());
        let choices = enumerate_choices(&w);
        assert_eq!(choices, vec![Choice::Step { tid: 0 }]);
    }

    /// Two threads of two inert steps each interleave in 4!/(2!2!) = 6 ways.
    #[test]
    fn schedule_count_matches_multinomial_oracle() {
        let mut cfg = WorldConfig::default();
        cfg.tick_budget = 0;
        cfg.ctx_budget = 0;
        let w = World::new_tiny(&[2, 2], cfg);
        let ex = ExploreConfig { max_steps: 100, max_expansions: 1 << 20, dedup: false, ..Default::default() };
        let exp = explore_exhaustive(&w, &ex).unwrap();
        assert_eq!(exp.schedules, 6);
        assert!(!exp.truncated);

        // 3+2 steps: 5!/(3!2!) = 10
        let w = World::new_tiny(&[3, 2], {
            let mut c = WorldConfig::default();
            c.tick_budget = 0;
            c.ctx_budget = 0;
            c
        });
        let exp = explore_exhaustive(&w, &ex).unwrap();
        assert_eq!(exp.schedules, 10);
    }

    #[test]
    fn same_seed_same_trace_hash() {
        let w = World::new_rcu(WorldConfig::default());
        let mut h1 = HashingSink::default();
        run_random(&w, 42, 400, false, &mut h1).unwrap();
        let mut h2 = HashingSink::default();
        run_random(&w, 42, 400, false, &mut h2).unwrap();
        assert_eq!(h1.finish_hex(), h2.finish_hex());
    }

    #[test]
    fn different_seed_usually_different_schedule() {
        let w = World::new_rcu(WorldConfig::default());
        let mut s = NullSink;
        let a = run_random(&w, 1, 400, false, &mut s).unwrap();
        let b = run_random(&w, 2, 400, false, &mut s).unwrap();
        assert!(a.schedule != b.schedule || a.steps == b.steps);
    }

    #[test]
    fn replay_reproduces_random_run() {
        let w = World::new_rcu(WorldConfig::default());
        let mut h1 = HashingSink::default();
        let obs = run_random(&w, 7, 400, false, &mut h1).unwrap();
        let mut h2 = HashingSink::default();
        let re = replay(&w, &obs.schedule, &mut h2).unwrap();
        assert_eq!(h1.finish_hex(), h2.finish_hex());
        assert_eq!(obs.all_done, re.all_done);
        assert_eq!(obs.gp_completed, re.gp_completed);
    }

    #[test]
    fn replay_rejects_bad_index() {
        let w = World::new_rcu(WorldConfig::default());
        let mut s = NullSink;
        let err = replay(&w, &[200], &mut s).unwrap_err();
        assert!(matches!(err, ReplayError::IndexOutOfRange { .. }));
    }
}
