//! Native stress mode: the same step machine driven by real operating-system
//! threads.
//!
//! One worker per virtual CPU steps its own task (and fires tick /
//! context-switch passes while the task is parked or finished), under a run
//! mutex that keeps each step atomic. Scheduling order, sleep jitter, and the
//! reader dwell come from the OS and a per-run seeded generator, so each run
//! explores a different interleaving in real time. A run that does not finish
//! within the timeout is classified as such; timeouts are data, not errors.

use rand_core::{RngCore, SeedableRng};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::step::{deliver_event_now, step_thread, StepCtx};
use super::thread::{Frame, Program, ReaderPhase, ThreadStatus, UpdaterPhase};
use super::trace::NullSink;
use super::world::{EventKind, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunClass {
    Successful,
    Failing,
    Timeout,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NativeCounts {
    pub successful: u32,
    pub failing: u32,
    pub timeout: u32,
}

#[derive(Debug, Clone)]
pub struct NativeConfig {
    pub runs: u32,
    pub timeout: Duration,
    pub seed: u64,
    /// Concurrent runs per wave.
    pub parallelism: u32,
    /// Upper bound of the reader's dwell between its two loads.
    pub max_reader_dwell_us: u64,
    /// Upper bound of the stagger before the updater starts.
    pub max_updater_stagger_us: u64,
}

impl Default for NativeConfig {
    fn default() -> Self {
        NativeConfig {
            runs: 200,
            timeout: Duration::from_secs(2),
            seed: 1,
            parallelism: 32,
            max_reader_dwell_us: 3_000,
            max_updater_stagger_us: 200,
        }
    }
}

/// Executes `cfg.runs` independent runs of worlds built by `build`, in
/// parallel waves, classifying each against the grace-period property.
pub fn run_native<F>(build: F, cfg: &NativeConfig) -> NativeCounts
where
    F: Fn(u64) -> World + Sync,
{
    let counts = Mutex::new(NativeCounts::default());
    let mut next = 0u32;
    while next < cfg.runs {
        let wave_end = (next + cfg.parallelism).min(cfg.runs);
        std::thread::scope(|scope| {
            for run in next..wave_end {
                let build = &build;
                let counts = &counts;
                let cfg = cfg.clone();
                scope.spawn(move || {
                    let seed = cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(run as u64);
                    let world = prepare_world(build(seed), seed, &cfg);
                    let class = one_run(world, seed, cfg.timeout);
                    let mut c = counts.lock().unwrap();
                    match class {
                        RunClass::Successful => c.successful += 1,
                        RunClass::Failing => c.failing += 1,
                        RunClass::Timeout => c.timeout += 1,
                    }
                });
            }
        });
        next = wave_end;
    }
    counts.into_inner().unwrap()
}

fn prepare_world(mut w: World, seed: u64, cfg: &NativeConfig) -> World {
    // Events are timer-driven in native mode; budgets do not apply.
    for b in w.events.tick_budget.iter_mut() {
        *b = u32::MAX;
    }
    for b in w.events.ctx_budget.iter_mut() {
        *b = u32::MAX;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce);
    let readers = w.config.readers.max(1) as usize;
    w.config.reader_delays_us = (0..readers)
        .map(|_| {
            if cfg.max_reader_dwell_us == 0 {
                0
            } else {
                rng.next_u64() % cfg.max_reader_dwell_us
            }
        })
        .collect();
    w.config.updater_stagger_us = if cfg.max_updater_stagger_us == 0 {
        0
    } else {
        rng.next_u64() % cfg.max_updater_stagger_us
    };
    w
}

fn one_run(world: World, seed: u64, timeout: Duration) -> RunClass {
    let cpus = world.config.cpus;
    let shared = Mutex::new(world);
    let stop = AtomicBool::new(false);
    let deadline = Instant::now() + timeout;

    std::thread::scope(|scope| {
        for cpu in 0..cpus {
            let shared = &shared;
            let stop = &stop;
            scope.spawn(move || worker(cpu, shared, stop, seed.wrapping_add(cpu as u64 + 1)));
        }
        // Supervise: stop when everything finished or the deadline passes.
        loop {
            if Instant::now() >= deadline {
                stop.store(true, Ordering::SeqCst);
                break;
            }
            {
                let w = shared.lock().unwrap();
                if w.all_tasks_done() {
                    stop.store(true, Ordering::SeqCst);
                    break;
                }
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    });

    let w = shared.lock().unwrap();
    if !w.all_tasks_done() {
        return RunClass::Timeout;
    }
    if crate::api::fig2_holds(&w, w.config.readers) {
        RunClass::Successful
    } else {
        RunClass::Failing
    }
}

fn worker(cpu: usize, shared: &Mutex<World>, stop: &AtomicBool, seed: u64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut staggered = false;
    let mut alternate = false;
    let mut sink = NullSink;
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let mut dwell_us = 0u64;
        {
            let mut w = shared.lock().unwrap();
            if w.all_tasks_done() {
                return;
            }
            let my_threads: Vec<usize> =
                w.threads.iter().filter(|t| t.cpu == cpu).map(|t| t.id).collect();
            let runnable = my_threads.iter().copied().find(|&tid| w.runnable(tid));
            if let Some(tid) = runnable {
                if !staggered && w.threads[tid].is_updater() && w.config.updater_stagger_us > 0 {
                    staggered = true;
                    dwell_us = w.config.updater_stagger_us;
                } else {
                    staggered = true;
                    let mut cx = StepCtx::new(&mut sink);
                    if step_thread(&mut w, tid, &mut cx).is_err() {
                        // Model violations abort the run; the supervisor will
                        // classify it on the timeout path.
                        stop.store(true, Ordering::SeqCst);
                        return;
                    }
                    dwell_us = post_step_dwell(&w, tid);
                }
            } else {
                // Task parked or finished: this CPU keeps taking scheduling
                // clock interrupts and running other, context-switching work.
                let idle = my_threads.iter().all(|&tid| {
                    w.threads[tid].task_done
                        || matches!(w.threads[tid].status, ThreadStatus::Parked)
                });
                if idle {
                    let kind = if alternate { EventKind::Tick } else { EventKind::CtxSwitch };
                    alternate = !alternate;
                    if w.event_landable(cpu, kind) {
                        let mut cx = StepCtx::new(&mut sink);
                        deliver_event_now(&mut w, cpu, kind, &mut cx);
                    }
                }
            }
        }
        if dwell_us > 0 {
            std::thread::sleep(Duration::from_micros(dwell_us));
        } else {
            std::thread::sleep(Duration::from_micros(20 + rng.next_u64() % 180));
        }
    }
}

/// Natural pause points: the reader dwells between its two loads, widening
/// the race window the scenarios probe.
fn post_step_dwell(w: &World, tid: usize) -> u64 {
    let t = &w.threads[tid];
    match (&t.program, t.frames.last()) {
        (Program::Reader { idx }, Some(Frame::Reader(ReaderPhase::LoadY))) => {
            *w.config.reader_delays_us.get(*idx as usize).unwrap_or(&0)
        }
        (Program::Updater, Some(Frame::Updater(UpdaterPhase::SyncWaitLoad))) => 50,
        _ => 0,
    }
}
