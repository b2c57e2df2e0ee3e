//! Violation management: immediate and deferred sanctions, warnings and
//! successive-violation counting.

use std::collections::VecDeque;
use std::num::NonZeroU32;

use serde::{Deserialize, Serialize};

use crate::container::{ViolationEvent, ViolationKind};
use crate::contracts::{matches, AccessKind, Amendment, ComponentId, ResourceDescriptor, ResourcePattern};
use crate::resources::{AccessVerdict, DenyReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SanctionAction {
    /// Deny the offending access.
    Reject,
    /// Deny and lock the handles matching the pattern.
    Lock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sanction {
    Immediate {
        pattern: ResourcePattern,
        action: SanctionAction,
    },
    Deferred {
        pattern: ResourcePattern,
        action: SanctionAction,
        threshold: NonZeroU32,
    },
}

impl Sanction {
    pub fn pattern(&self) -> &ResourcePattern {
        match self {
            Sanction::Immediate { pattern, .. } | Sanction::Deferred { pattern, .. } => pattern,
        }
    }

    pub fn action(&self) -> SanctionAction {
        match self {
            Sanction::Immediate { action, .. } | Sanction::Deferred { action, .. } => *action,
        }
    }
}

/// Notice sent to a component whose deferred sanction is in its warning phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub component: ComponentId,
    pub sanction: usize,
    pub pattern: ResourcePattern,
    pub count: u32,
    pub threshold: u32,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SanctionRecord {
    Warned {
        step: u64,
        sanction: usize,
        count: u32,
    },
    Applied {
        step: u64,
        sanction: usize,
        action: SanctionAction,
        permanent: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SanctionDecision {
    pub verdict: AccessVerdict,
    pub warning: Option<Warning>,
    /// Pattern whose handles must now be locked.
    pub lock_pattern: Option<ResourcePattern>,
}

pub fn deny_reason(violation: &ViolationEvent) -> DenyReason {
    match (violation.kind, &violation.profile_id) {
        (ViolationKind::Quota, _) => DenyReason::Quota,
        (ViolationKind::Permission, None) => DenyReason::Unmatched,
        (ViolationKind::Permission, Some(_)) => DenyReason::Permission,
    }
}

/// Per-component sanction state.
#[derive(Debug, Clone)]
pub struct SanctionEngine {
    component: ComponentId,
    sanctions: Vec<Sanction>,
    counters: Vec<u32>,
    applied: Vec<bool>,
    counting: usize,
    any_applied: bool,
    log: Vec<SanctionRecord>,
}

impl SanctionEngine {
    pub fn new(component: ComponentId, sanctions: Vec<Sanction>) -> Self {
        let n = sanctions.len();
        Self {
            component,
            sanctions,
            counters: vec![0; n],
            applied: vec![false; n],
            counting: 0,
            any_applied: false,
            log: Vec::new(),
        }
    }

    pub fn sanctions(&self) -> &[Sanction] {
        &self.sanctions
    }

    pub fn counter(&self, sanction: usize) -> u32 {
        self.counters[sanction]
    }

    pub fn is_applied(&self, sanction: usize) -> bool {
        self.applied[sanction]
    }

    /// True when some sanction reached permanent application.
    pub fn any_permanent(&self) -> bool {
        self.any_applied
    }

    pub fn log(&self) -> &[SanctionRecord] {
        &self.log
    }

    /// Index of the most specific sanction matching `descriptor`; ties go to
    /// the smaller pattern, then to declaration order.
    pub fn select(&self, descriptor: &ResourceDescriptor) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.sanctions.iter().enumerate() {
            if !matches(s.pattern(), descriptor) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (bp, sp) = (self.sanctions[b].pattern(), s.pattern());
                    if sp.specificity() > bp.specificity()
                        || (sp.specificity() == bp.specificity() && sp < bp)
                    {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    pub fn on_violation(&mut self, violation: &ViolationEvent) -> SanctionDecision {
        let reason = deny_reason(violation);
        let plain = SanctionDecision {
            verdict: AccessVerdict::Reject(reason),
            warning: None,
            lock_pattern: None,
        };
        let Some(i) = self.select(&violation.descriptor) else {
            return plain;
        };
        let step = violation.step;
        match self.sanctions[i].clone() {
            Sanction::Immediate { pattern, action } => {
                let permanent = action == SanctionAction::Lock;
                self.log.push(SanctionRecord::Applied {
                    step,
                    sanction: i,
                    action,
                    permanent,
                });
                if permanent {
                    self.mark_applied(i);
                }
                self.decision(action, reason, pattern)
            }
            Sanction::Deferred {
                pattern,
                action,
                threshold,
            } => {
                if self.applied[i] {
                    return self.decision(action, reason, pattern);
                }
                if self.counters[i] == 0 {
                    self.counting += 1;
                }
                self.counters[i] += 1;
                let count = self.counters[i];
                if count >= threshold.get() {
                    self.log.push(SanctionRecord::Applied {
                        step,
                        sanction: i,
                        action,
                        permanent: true,
                    });
                    self.mark_applied(i);
                    self.decision(action, reason, pattern)
                } else {
                    self.log.push(SanctionRecord::Warned {
                        step,
                        sanction: i,
                        count,
                    });
                    SanctionDecision {
                        warning: Some(Warning {
                            component: self.component.clone(),
                            sanction: i,
                            pattern,
                            count,
                            threshold: threshold.get(),
                            step,
                        }),
                        ..plain
                    }
                }
            }
        }
    }

    /// Resets the consecutive counters of unapplied deferred sanctions whose
    /// pattern matches the resource.
    pub fn on_conformant_access(&mut self, descriptor: &ResourceDescriptor, _access: AccessKind) {
        if self.counting == 0 {
            return;
        }
        for i in 0..self.sanctions.len() {
            if self.counters[i] > 0 && !self.applied[i] && matches(self.sanctions[i].pattern(), descriptor) {
                self.counters[i] = 0;
                self.counting -= 1;
            }
        }
    }

    /// Verdict for a new resource under an applied LOCK sanction.
    pub fn creation_block(&self, descriptor: &ResourceDescriptor) -> Option<AccessVerdict> {
        if !self.any_applied {
            return None;
        }
        self.sanctions
            .iter()
            .zip(&self.applied)
            .any(|(s, &on)| on && s.action() == SanctionAction::Lock && matches(s.pattern(), descriptor))
            .then_some(AccessVerdict::Reject(DenyReason::Sanctioned))
    }

    /// Verdict for an access under any permanently applied sanction.
    pub fn access_block(&self, descriptor: &ResourceDescriptor) -> Option<AccessVerdict> {
        if !self.any_applied {
            return None;
        }
        let mut verdict: Option<AccessVerdict> = None;
        for (s, &on) in self.sanctions.iter().zip(&self.applied) {
            if on && matches(s.pattern(), descriptor) {
                let v = match s.action() {
                    SanctionAction::Reject => AccessVerdict::Reject(DenyReason::Sanctioned),
                    SanctionAction::Lock => AccessVerdict::Lock(DenyReason::Sanctioned),
                };
                verdict = Some(verdict.map_or(v, |acc| acc.combine(v)));
            }
        }
        verdict
    }

    fn mark_applied(&mut self, i: usize) {
        if self.counters[i] > 0 {
            self.counting -= 1;
        }
        self.applied[i] = true;
        self.any_applied = true;
    }

    fn decision(&self, action: SanctionAction, reason: DenyReason, pattern: ResourcePattern) -> SanctionDecision {
        match action {
            SanctionAction::Reject => SanctionDecision {
                verdict: AccessVerdict::Reject(reason),
                warning: None,
                lock_pattern: None,
            },
            SanctionAction::Lock => SanctionDecision {
                verdict: AccessVerdict::Lock(reason),
                warning: None,
                lock_pattern: Some(pattern),
            },
        }
    }
}

/// What a component does when warned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reaction", rename_all = "snake_case")]
pub enum WarningReaction {
    Amend { amendment: Amendment },
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "notice", rename_all = "snake_case")]
pub enum Notice {
    SanctionWarning(Warning),
    CapacityDenied {
        profile_id: crate::contracts::ProfileId,
        descriptor: ResourceDescriptor,
        access: AccessKind,
        amount: u64,
        step: u64,
    },
}

/// A component's warning inbox and its scripted handlers. Each handler
/// reacts to one warning, in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ComponentInbox {
    pub notices: Vec<Notice>,
    handlers: VecDeque<WarningReaction>,
}

impl ComponentInbox {
    pub fn new(handlers: Vec<WarningReaction>) -> Self {
        Self {
            notices: Vec::new(),
            handlers: handlers.into(),
        }
    }

    pub fn pending_handlers(&self) -> usize {
        self.handlers.len()
    }
}

/// Appends the notice and returns the reaction the component schedules as
/// its next step, if any.
pub fn deliver_warning(inbox: &mut ComponentInbox, notice: Notice) -> Option<WarningReaction> {
    let reacts = matches!(notice, Notice::SanctionWarning(_));
    inbox.notices.push(notice);
    if reacts {
        inbox.handlers.pop_front()
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{Port, VPath};

    fn home_reject_2() -> Sanction {
        Sanction::Deferred {
            pattern: ResourcePattern::file("~/").unwrap(),
            action: SanctionAction::Reject,
            threshold: NonZeroU32::new(2).unwrap(),
        }
    }

    fn port80_lock() -> Sanction {
        Sanction::Immediate {
            pattern: ResourcePattern::socket("*", Port::Number(80)),
            action: SanctionAction::Lock,
        }
    }

    fn file(p: &str) -> ResourceDescriptor {
        ResourceDescriptor::File {
            path: VPath::parse(p).unwrap(),
        }
    }

    fn violation(descriptor: ResourceDescriptor, step: u64) -> ViolationEvent {
        ViolationEvent {
            component: "JMailer".into(),
            profile_id: Some("r1".into()),
            descriptor,
            access: AccessKind::Write,
            amount: 1,
            kind: ViolationKind::Quota,
            step,
        }
    }

    fn engine() -> SanctionEngine {
        SanctionEngine::new("JMailer".into(), vec![home_reject_2(), port80_lock()])
    }

    #[test]
    fn immediate_lock_on_first_violation() {
        let mut e = engine();
        let d = e.on_violation(&violation(
            ResourceDescriptor::Socket {
                host: "example.org".into(),
                port: 80,
            },
            1,
        ));
        assert_eq!(d.verdict, AccessVerdict::Lock(DenyReason::Quota));
        assert!(d.warning.is_none());
        assert_eq!(d.lock_pattern, Some(port80_lock().pattern().clone()));
        assert!(e.any_permanent());
        let other = ResourceDescriptor::Socket {
            host: "b".into(),
            port: 80,
        };
        assert_eq!(e.creation_block(&other), Some(AccessVerdict::Reject(DenyReason::Sanctioned)));
        assert_eq!(e.access_block(&other), Some(AccessVerdict::Lock(DenyReason::Sanctioned)));
    }

    #[test]
    fn deferred_applies_on_second_successive_violation() {
        let mut e = engine();
        let first = e.on_violation(&violation(file("~/.jmailer/a"), 1));
        assert_eq!(first.verdict, AccessVerdict::Reject(DenyReason::Quota));
        assert_eq!(first.warning.as_ref().map(|w| w.count), Some(1));
        let second = e.on_violation(&violation(file("~/.jmailer/a"), 2));
        assert_eq!(second.verdict, AccessVerdict::Reject(DenyReason::Quota));
        assert!(second.warning.is_none());
        assert!(e.is_applied(0));
        assert_eq!(e.access_block(&file("~/x")), Some(AccessVerdict::Reject(DenyReason::Sanctioned)));
        assert_eq!(e.creation_block(&file("~/x")), None);
    }

    #[test]
    fn conformant_access_resets_the_run() {
        let mut e = engine();
        e.on_violation(&violation(file("~/.jmailer/a"), 1));
        assert_eq!(e.counter(0), 1);
        e.on_conformant_access(&file("/tmp/x"), AccessKind::Write);
        assert_eq!(e.counter(0), 1);
        e.on_conformant_access(&file("~/.jmailer/a"), AccessKind::Write);
        assert_eq!(e.counter(0), 0);
        let d = e.on_violation(&violation(file("~/.jmailer/a"), 3));
        assert!(d.warning.is_some());
        assert!(!e.is_applied(0));
    }

    #[test]
    fn reset_after_application_has_no_effect() {
        let mut e = engine();
        e.on_violation(&violation(file("~/a"), 1));
        e.on_violation(&violation(file("~/a"), 2));
        e.on_conformant_access(&file("~/a"), AccessKind::Read);
        assert!(e.is_applied(0));
        assert_eq!(e.counter(0), 2);
    }

    #[test]
    fn unmatched_violation_is_plain_reject() {
        let mut e = engine();
        let mut v = violation(file("/tmp/x"), 1);
        v.profile_id = None;
        v.kind = ViolationKind::Permission;
        let d = e.on_violation(&v);
        assert_eq!(d.verdict, AccessVerdict::Reject(DenyReason::Unmatched));
        assert!(d.warning.is_none() && d.lock_pattern.is_none());
        assert_eq!((e.counter(0), e.counter(1)), (0, 0));
        assert!(e.log().is_empty());
    }

    #[test]
    fn most_specific_sanction_is_selected() {
        let narrow = Sanction::Immediate {
            pattern: ResourcePattern::file("~/.jmailer").unwrap(),
            action: SanctionAction::Reject,
        };
        let e = SanctionEngine::new("c".into(), vec![home_reject_2(), narrow]);
        assert_eq!(e.select(&file("~/.jmailer/x")), Some(1));
        assert_eq!(e.select(&file("~/.other")), Some(0));
        assert_eq!(e.select(&file("/tmp")), None);
    }

    #[test]
    fn warnings_drive_handlers_in_order() {
        let mut inbox = ComponentInbox::new(vec![WarningReaction::Terminate]);
        let w = Warning {
            component: "c".into(),
            sanction: 0,
            pattern: ResourcePattern::Memory,
            count: 1,
            threshold: 2,
            step: 1,
        };
        assert_eq!(deliver_warning(&mut inbox, Notice::SanctionWarning(w.clone())), Some(WarningReaction::Terminate));
        assert_eq!(deliver_warning(&mut inbox, Notice::SanctionWarning(w)), None);
        assert_eq!(inbox.notices.len(), 2);
    }

    #[test]
    fn sanction_json_shape() {
        let v = serde_json::to_value(home_reject_2()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"kind": "deferred", "pattern": {"kind": "file", "path_prefix": "~"}, "action": "reject", "threshold": 2})
        );
        assert!(serde_json::from_str::<Sanction>(
            r#"{"kind":"deferred","pattern":{"kind":"memory"},"action":"lock","threshold":0}"#
        )
        .is_err());
    }

    use proptest::prelude::*;

    proptest! {
        // Each permanent application is preceded by exactly threshold-1
        // warnings within its final uninterrupted violation run, and the
        // engine is deterministic.
        #[test]
        fn escalation_properties(steps in prop::collection::vec(prop::bool::ANY, 1..40), threshold in 1u32..5) {
            let s = Sanction::Deferred {
                pattern: ResourcePattern::file("~").unwrap(),
                action: SanctionAction::Reject,
                threshold: NonZeroU32::new(threshold).unwrap(),
            };
            let run = |steps: &[bool]| {
                let mut e = SanctionEngine::new("c".into(), vec![s.clone()]);
                let mut out = Vec::new();
                let mut run_warnings = 0u32;
                let mut applied_after = None;
                for (i, &violate) in steps.iter().enumerate() {
                    if violate {
                        if e.is_applied(0) {
                            out.push(None);
                            continue;
                        }
                        let d = e.on_violation(&violation(file("~/a"), i as u64));
                        if d.warning.is_some() { run_warnings += 1; }
                        if e.is_applied(0) && applied_after.is_none() { applied_after = Some(run_warnings); }
                        out.push(Some((d.verdict, d.warning.map(|w| w.count))));
                    } else {
                        e.on_conformant_access(&file("~/a"), AccessKind::Write);
                        if !e.is_applied(0) { run_warnings = 0; }
                        out.push(None);
                    }
                }
                (out, applied_after)
            };
            let (a, applied_after) = run(&steps);
            let (b, _) = run(&steps);
            prop_assert_eq!(&a, &b);
            if let Some(w) = applied_after {
                prop_assert_eq!(w, threshold - 1);
            }
        }
    }
}
