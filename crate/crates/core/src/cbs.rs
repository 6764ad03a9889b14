//! Per-CPU segmented callback queue.
//!
//! One ordered list with three boundary indices splits the queue into four
//! segments: `[0, done_end)` is ready to invoke, `[done_end, wait_end)` waits
//! for the current grace period, `[wait_end, next_ready_end)` for the next
//! one, and the tail is not yet associated with any grace period. The tail
//! marker of the last segment is implicitly the end of the list.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CbsError {
    #[error("callback id {0} already queued")]
    DuplicateId(u64),
    #[error("callback id {0} enqueued with a grace period already assigned")]
    AlreadyAssigned(u64),
}

/// What a callback does when invoked. Callbacks are named tokens; the only
/// one with behavior is the updater wake-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CallbackFunc {
    /// Clears the updater's wait flag, letting `synchronize` return.
    WakemeAfterRcu,
    /// Inert token used by tests and stress runs.
    Token(u32),
}

impl CallbackFunc {
    pub fn name(&self) -> String {
        match self {
            CallbackFunc::WakemeAfterRcu => "wakeme_after_rcu".to_string(),
            CallbackFunc::Token(n) => format!("token_{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Callback {
    pub id: u64,
    pub func: CallbackFunc,
    /// Grace period whose completion makes this callback runnable, in
    /// `completed`-counter terms. Ghost state for assertions; assigned by
    /// `accelerate`.
    pub assigned_gp: Option<u64>,
}

impl Callback {
    pub fn new(id: u64, func: CallbackFunc) -> Self {
        Callback { id, func, assigned_gp: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SegmentedCallbackList {
    entries: Vec<Callback>,
    done_end: usize,
    wait_end: usize,
    next_ready_end: usize,
    qlen: usize,
    pub blimit: usize,
}

pub const DEFAULT_BLIMIT: usize = 10;

impl Default for SegmentedCallbackList {
    fn default() -> Self {
        Self::new(DEFAULT_BLIMIT)
    }
}

impl SegmentedCallbackList {
    pub fn new(blimit: usize) -> Self {
        SegmentedCallbackList { entries: Vec::new(), done_end: 0, wait_end: 0, next_ready_end: 0, qlen: 0, blimit }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn qlen(&self) -> usize {
        self.qlen
    }

    pub fn boundaries(&self) -> (usize, usize, usize) {
        (self.done_end, self.wait_end, self.next_ready_end)
    }

    pub fn done(&self) -> &[Callback] {
        &self.entries[..self.done_end]
    }

    pub fn wait(&self) -> &[Callback] {
        &self.entries[self.done_end..self.wait_end]
    }

    pub fn next_ready(&self) -> &[Callback] {
        &self.entries[self.wait_end..self.next_ready_end]
    }

    pub fn next(&self) -> &[Callback] {
        &self.entries[self.next_ready_end..]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Callback> {
        self.entries.iter()
    }

    /// Boundary and counting invariants. Called by the universe audit.
    pub fn check(&self) -> Result<(), String> {
        if !(self.done_end <= self.wait_end
            && self.wait_end <= self.next_ready_end
            && self.next_ready_end <= self.entries.len())
        {
            return Err(format!(
                "segment boundaries out of order: {}/{}/{}/{}",
                self.done_end,
                self.wait_end,
                self.next_ready_end,
                self.entries.len()
            ));
        }
        if self.qlen != self.entries.len() {
            return Err(format!("qlen {} != {} entries", self.qlen, self.entries.len()));
        }
        // Assigned grace periods never decrease along the list, and the NEXT
        // segment is unassigned.
        let mut last = 0u64;
        for (i, cb) in self.entries.iter().enumerate() {
            if i < self.next_ready_end {
                match cb.assigned_gp {
                    Some(gp) => {
                        if gp < last {
                            return Err(format!("assigned gp decreases at {i}"));
                        }
                        last = gp;
                    }
                    None => return Err(format!("callback {i} before next tail has no gp", i = i)),
                }
            } else if cb.assigned_gp.is_some() {
                return Err(format!("callback {i} in NEXT segment already assigned"));
            }
        }
        Ok(())
    }

    /// Appends to the NEXT segment. Boundaries stay put.
    pub fn enqueue(&mut self, cb: Callback) -> Result<(), CbsError> {
        if cb.assigned_gp.is_some() {
            return Err(CbsError::AlreadyAssigned(cb.id));
        }
        if self.entries.iter().any(|e| e.id == cb.id) {
            return Err(CbsError::DuplicateId(cb.id));
        }
        self.entries.push(cb);
        self.qlen += 1;
        Ok(())
    }

    /// Assigns `assign_gp` to everything in the NEXT segment and merges it
    /// into NEXT_READY, or straight into WAIT when `bypass` is set (the
    /// gp-start path, where the new grace period is known to cover anything
    /// already queued).
    pub fn accelerate(&mut self, assign_gp: u64, bypass: bool) {
        for cb in &mut self.entries[self.next_ready_end..] {
            debug_assert!(cb.assigned_gp.is_none());
            cb.assigned_gp = Some(assign_gp);
        }
        self.next_ready_end = self.entries.len();
        if bypass {
            self.wait_end = self.entries.len();
        }
    }

    /// Moves every callback whose assigned grace period has completed into
    /// DONE, promotes NEXT_READY into WAIT, then applies `accelerate` to the
    /// tail. Idempotent for a fixed `completed_now`.
    pub fn advance(&mut self, completed_now: u64, assign_gp: u64) {
        let mut done = self.done_end;
        while done < self.next_ready_end {
            match self.entries[done].assigned_gp {
                Some(gp) if gp <= completed_now => done += 1,
                _ => break,
            }
        }
        self.done_end = done;
        self.wait_end = self.next_ready_end.max(self.done_end);
        self.accelerate(assign_gp, false);
    }

    /// Removes and returns at most `blimit` ready callbacks, preserving order.
    pub fn take_done(&mut self) -> Vec<Callback> {
        let n = self.blimit.min(self.done_end);
        let out: Vec<Callback> = self.entries.drain(..n).collect();
        self.done_end -= n;
        self.wait_end -= n;
        self.next_ready_end -= n;
        self.qlen -= n;
        out
    }

    pub fn has_ready(&self) -> bool {
        self.done_end > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(id: u64) -> Callback {
        Callback::new(id, CallbackFunc::Token(id as u32))
    }

    /// The callback-queuing figure: CB1, CB2 wait for the current grace
    /// period; CB3, CB4 are not yet associated with one.
    fn fig5_list() -> SegmentedCallbackList {
        let mut l = SegmentedCallbackList::new(256);
        for id in 1..=2 {
            l.enqueue(cb(id)).unwrap();
        }
        l.accelerate(1, true); // CB1, CB2 -> WAIT, assigned to gp 1
        for id in 3..=4 {
            l.enqueue(cb(id)).unwrap();
        }
        l.check().unwrap();
        assert_eq!(l.boundaries(), (0, 2, 2));
        l
    }

    #[test]
    fn enqueue_first_goes_to_next() {
        let mut l = SegmentedCallbackList::default();
        l.enqueue(cb(1)).unwrap();
        assert_eq!(l.boundaries(), (0, 0, 0));
        assert_eq!(l.next().len(), 1);
        assert_eq!(l.qlen(), 1);
    }

    #[test]
    fn enqueue_appends_after_fig5_tail() {
        let mut l = fig5_list();
        l.enqueue(cb(5)).unwrap();
        let next_ids: Vec<u64> = l.next().iter().map(|c| c.id).collect();
        assert_eq!(next_ids, vec![3, 4, 5]);
    }

    #[test]
    fn enqueue_rejects_duplicate_id() {
        let mut l = SegmentedCallbackList::default();
        l.enqueue(cb(7)).unwrap();
        assert_eq!(l.enqueue(cb(7)), Err(CbsError::DuplicateId(7)));
    }

    #[test]
    fn accelerate_moves_fig5_tail_into_next_ready() {
        let mut l = fig5_list();
        l.accelerate(2, false);
        let nr: Vec<u64> = l.next_ready().iter().map(|c| c.id).collect();
        assert_eq!(nr, vec![3, 4]);
        assert!(l.next().is_empty());
        l.check().unwrap();
    }

    #[test]
    fn accelerate_empty_list_is_noop() {
        let mut l = SegmentedCallbackList::default();
        l.accelerate(1, false);
        assert_eq!(l.boundaries(), (0, 0, 0));
    }

    /// Enumerate every boundary configuration of a 4-entry list and check
    /// that accelerate is idempotent and preserves the invariants.
    #[test]
    fn accelerate_idempotent_over_all_boundary_configs() {
        for done in 0..=4usize {
            for wait in done..=4 {
                for nr in wait..=4 {
                    let mut l = SegmentedCallbackList::new(256);
                    for id in 0..4u64 {
                        let mut c = cb(id);
                        if (id as usize) < nr {
                            c.assigned_gp = Some(1);
                        }
                        l.entries.push(c);
                        l.qlen += 1;
                    }
                    l.done_end = done;
                    l.wait_end = wait;
                    l.next_ready_end = nr;
                    l.check().unwrap();

                    let mut once = l.clone();
                    once.accelerate(2, false);
                    once.check().unwrap();
                    assert_eq!(once.boundaries().2, once.len());
                    let mut twice = once.clone();
                    twice.accelerate(2, false);
                    assert_eq!(once, twice);
                    // done/wait boundaries untouched
                    assert_eq!(once.boundaries().0, done);
                    assert_eq!(once.boundaries().1, wait);
                }
            }
        }
    }

    #[test]
    fn advance_moves_fig5_wait_to_done() {
        let mut l = fig5_list();
        l.advance(1, 2);
        let done_ids: Vec<u64> = l.done().iter().map(|c| c.id).collect();
        assert_eq!(done_ids, vec![1, 2]);
        // CB3, CB4 picked up by the trailing accelerate
        let wait_plus: Vec<u64> = l.next_ready().iter().map(|c| c.id).collect();
        assert_eq!(wait_plus, vec![3, 4]);
        l.check().unwrap();
    }

    #[test]
    fn advance_empty_is_noop() {
        let mut l = SegmentedCallbackList::default();
        l.advance(3, 4);
        assert_eq!(l.boundaries(), (0, 0, 0));
    }

    #[test]
    fn advance_single_next_entry_stays_out_of_done() {
        let mut l = SegmentedCallbackList::default();
        l.enqueue(cb(1)).unwrap();
        l.advance(0, 1);
        assert_eq!(l.boundaries().0, 0);
        // the entry is now assigned and sits past the done boundary
        assert_eq!(l.next_ready().len() + l.wait().len(), 1);
        l.check().unwrap();
    }

    #[test]
    fn advance_twice_same_completed_is_idempotent() {
        let mut a = fig5_list();
        a.advance(1, 2);
        let mut b = a.clone();
        b.advance(1, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn take_done_respects_blimit_and_order() {
        let mut l = SegmentedCallbackList::new(2);
        for id in 1..=5 {
            l.enqueue(cb(id)).unwrap();
        }
        l.accelerate(1, true);
        l.advance(1, 2);
        assert_eq!(l.done().len(), 5);
        let first = l.take_done();
        assert_eq!(first.iter().map(|c| c.id).collect::<Vec<_>>(), vec![1, 2]);
        let second = l.take_done();
        assert_eq!(second.iter().map(|c| c.id).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(l.take_done().len(), 1);
        assert!(l.is_empty());
        l.check().unwrap();
    }

    #[test]
    fn take_done_under_blimit_returns_all() {
        let mut l = SegmentedCallbackList::new(256);
        l.enqueue(cb(1)).unwrap();
        l.enqueue(cb(2)).unwrap();
        l.accelerate(1, true);
        l.enqueue(cb(3)).unwrap();
        l.advance(1, 2);
        let got = l.take_done();
        assert_eq!(got.iter().map(|c| c.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn take_done_empty_returns_empty() {
        let mut l = SegmentedCallbackList::default();
        assert!(l.take_done().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Enqueue,
            Accelerate(bool),
            Advance,
            TakeDone,
        }

        fn op_strategy() -> impl Strategy<Value = Op> {
            prop_oneof![
                3 => Just(Op::Enqueue),
                2 => any::<bool>().prop_map(Op::Accelerate),
                2 => Just(Op::Advance),
                2 => Just(Op::TakeDone),
            ]
        }

        proptest! {
            /// Boundary monotonicity, order preservation and conservation over
            /// random operation sequences.
            #[test]
            fn random_op_sequences_keep_invariants(ops in prop::collection::vec(op_strategy(), 1..60)) {
                let mut l = SegmentedCallbackList::new(3);
                let mut next_id = 0u64;
                let mut completed = 0u64;
                let mut enqueued = Vec::new();
                let mut taken = Vec::new();
                for op in ops {
                    match op {
                        Op::Enqueue => {
                            l.enqueue(cb(next_id)).unwrap();
                            enqueued.push(next_id);
                            next_id += 1;
                        }
                        Op::Accelerate(bypass) => l.accelerate(completed + 1, bypass),
                        Op::Advance => {
                            completed += 1;
                            l.advance(completed, completed + 1);
                        }
                        Op::TakeDone => taken.extend(l.take_done().into_iter().map(|c| c.id)),
                    }
                    l.check().unwrap();
                }
                // Conservation: everything enqueued is either taken or still queued,
                // nothing duplicated, relative order preserved.
                let queued: Vec<u64> = l.iter().map(|c| c.id).collect();
                let mut all = taken.clone();
                all.extend(&queued);
                prop_assert_eq!(all, enqueued);
            }
        }
    }
}
