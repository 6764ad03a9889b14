//! Declarative bug-injection plans.
//!
//! Each plan names one behavioral mutation wired into a specific hook point in
//! the quiescent-state or grace-period code. Bugs are runtime configuration,
//! not source mutation: one binary reproduces every scenario.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FaultPlan {
    None,
    /// `synchronize` returns immediately; updaters never wait for readers.
    Bug1,
    /// Grace-period init seeds every node's qsmask empty instead of qsmaskinit.
    Bug2,
    /// Noting a new grace period also clears this CPU's bit from the leaf qsmask.
    Bug3,
    /// Noting a new grace period forces qs_pending to 0.
    Bug4,
    /// Quiescent states are never recorded.
    Bug5,
    /// The upward report walk returns immediately.
    Bug6,
    /// The walk skips the "siblings still pending" stop check and always
    /// reaches the root.
    Bug7,
}

/// What a fault plan is expected to produce, per the scenario tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExpectedClass {
    Safe,
    SafetyViolation,
    LivenessHang,
}

/// The mutation sites wired into the qs/gp/api modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HookPoint {
    SynchronizeEntry,
    GpInitQsmask,
    NgcClearLeafBit,
    NgcForceQsPendingZero,
    RecordQs,
    RnpWalkEntry,
    RnpWalkStopCheck,
}

pub const ALL_HOOKS: [HookPoint; 7] = [
    HookPoint::SynchronizeEntry,
    HookPoint::GpInitQsmask,
    HookPoint::NgcClearLeafBit,
    HookPoint::NgcForceQsPendingZero,
    HookPoint::RecordQs,
    HookPoint::RnpWalkEntry,
    HookPoint::RnpWalkStopCheck,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FaultError {
    #[error("hook {0:?} is not wired for any fault plan")]
    UnknownHook(&'static str),
}

impl FaultPlan {
    pub fn expected_class(&self) -> ExpectedClass {
        match self {
            FaultPlan::None => ExpectedClass::Safe,
            FaultPlan::Bug1 | FaultPlan::Bug7 => ExpectedClass::SafetyViolation,
            FaultPlan::Bug2 | FaultPlan::Bug3 | FaultPlan::Bug4 | FaultPlan::Bug5 | FaultPlan::Bug6 => {
                ExpectedClass::LivenessHang
            }
        }
    }

    /// The hook this plan mutates, if any.
    pub fn hook(&self) -> Option<HookPoint> {
        match self {
            FaultPlan::None => None,
            FaultPlan::Bug1 => Some(HookPoint::SynchronizeEntry),
            FaultPlan::Bug2 => Some(HookPoint::GpInitQsmask),
            FaultPlan::Bug3 => Some(HookPoint::NgcClearLeafBit),
            FaultPlan::Bug4 => Some(HookPoint::NgcForceQsPendingZero),
            FaultPlan::Bug5 => Some(HookPoint::RecordQs),
            FaultPlan::Bug6 => Some(HookPoint::RnpWalkEntry),
            FaultPlan::Bug7 => Some(HookPoint::RnpWalkStopCheck),
        }
    }

    /// True when this plan overrides the default behavior at `hook`.
    pub fn overrides(&self, hook: HookPoint) -> bool {
        self.hook() == Some(hook)
    }

    /// Returns either the default or the mutated behavior for `hook`.
    pub fn apply<T>(&self, hook: HookPoint, default: T, mutated: T) -> T {
        if self.overrides(hook) {
            mutated
        } else {
            default
        }
    }

    /// Caveat strings carried into reports. Quiescent-state forcing, which
    /// would turn these two hangs into too-short grace periods, is not
    /// modeled.
    pub fn caveat(&self) -> Option<&'static str> {
        match self {
            FaultPlan::Bug2 | FaultPlan::Bug3 => Some(
                "with quiescent-state forcing this mutation would produce a too-short \
                 grace period instead of a hang; forcing is not modeled",
            ),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FaultPlan::None => "none",
            FaultPlan::Bug1 => "bug1",
            FaultPlan::Bug2 => "bug2",
            FaultPlan::Bug3 => "bug3",
            FaultPlan::Bug4 => "bug4",
            FaultPlan::Bug5 => "bug5",
            FaultPlan::Bug6 => "bug6",
            FaultPlan::Bug7 => "bug7",
        }
    }

    pub fn parse(s: &str) -> Option<FaultPlan> {
        Some(match s {
            "none" => FaultPlan::None,
            "bug1" => FaultPlan::Bug1,
            "bug2" => FaultPlan::Bug2,
            "bug3" => FaultPlan::Bug3,
            "bug4" => FaultPlan::Bug4,
            "bug5" => FaultPlan::Bug5,
            "bug6" => FaultPlan::Bug6,
            "bug7" => FaultPlan::Bug7,
            _ => return None,
        })
    }

    /// Startup validation: every plan's hook must be one of the wired points.
    pub fn validate(&self) -> Result<(), FaultError> {
        match self.hook() {
            None => Ok(()),
            Some(h) if ALL_HOOKS.contains(&h) => Ok(()),
            Some(_) => Err(FaultError::UnknownHook("unwired")),
        }
    }
}

pub const ALL_BUGS: [FaultPlan; 7] = [
    FaultPlan::Bug1,
    FaultPlan::Bug2,
    FaultPlan::Bug3,
    FaultPlan::Bug4,
    FaultPlan::Bug5,
    FaultPlan::Bug6,
    FaultPlan::Bug7,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_selects_mutation_only_at_own_hook() {
        assert_eq!(FaultPlan::Bug1.apply(HookPoint::SynchronizeEntry, "wait", "return"), "return");
        assert_eq!(FaultPlan::Bug7.apply(HookPoint::RnpWalkStopCheck, "stop", "skip"), "skip");
        assert_eq!(FaultPlan::None.apply(HookPoint::RecordQs, "record", "drop"), "record");
        assert_eq!(FaultPlan::Bug1.apply(HookPoint::RecordQs, "record", "drop"), "record");
    }

    #[test]
    fn expected_classes_match_scenario_table() {
        assert_eq!(FaultPlan::None.expected_class(), ExpectedClass::Safe);
        for b in [FaultPlan::Bug1, FaultPlan::Bug7] {
            assert_eq!(b.expected_class(), ExpectedClass::SafetyViolation);
        }
        for b in [FaultPlan::Bug2, FaultPlan::Bug3, FaultPlan::Bug4, FaultPlan::Bug5, FaultPlan::Bug6] {
            assert_eq!(b.expected_class(), ExpectedClass::LivenessHang);
        }
    }

    #[test]
    fn every_bug_wires_exactly_one_hook() {
        for b in ALL_BUGS {
            assert!(b.hook().is_some());
            b.validate().unwrap();
            let count = ALL_HOOKS.iter().filter(|&&h| b.overrides(h)).count();
            assert_eq!(count, 1, "{b:?}");
        }
        assert!(FaultPlan::None.hook().is_none());
    }

    #[test]
    fn names_round_trip() {
        for b in ALL_BUGS {
            assert_eq!(FaultPlan::parse(b.name()), Some(b));
        }
        assert_eq!(FaultPlan::parse("none"), Some(FaultPlan::None));
        assert_eq!(FaultPlan::parse("bug8"), None);
    }
}
