//! Offline trace checking.
//!
//! The checker replays a trace line by line against the contracts bound in
//! it and the sanctions of the scenario. It keeps its own ledgers, routing,
//! sanction counters and best-effort capacity, written from the contract
//! semantics rather than by reusing the container, so a disagreement
//! between the two shows up as a discrepancy.

use std::collections::HashMap;
use std::fmt;

use crate::contracts::{
    apply_amendment, matches, AccessKind, AccessPermission, AvailabilityPolicy, ComponentId, Contract,
    ProfileId, Quota, ResourceDescriptor, ResourcePattern, ResourceUtilisationProfile,
};
use crate::resources::{AccessVerdict, DenyReason};
use crate::sanctions::{Sanction, SanctionAction, WarningReaction};

use super::scenario::{ComponentSpec, Scenario, ScriptStep};
use super::trace::{parse_trace, LineBody, TraceLine, TraceParseError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discrepancy {
    /// 1-based line of the trace file.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Open,
    Locked,
    Closed,
}

#[derive(Debug, Clone)]
struct Handle {
    descriptor: ResourceDescriptor,
    state: State,
    profile: Option<ProfileId>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    handle: u32,
    access: AccessKind,
    amount: u64,
}

#[derive(Debug)]
struct Comp<'s> {
    spec: &'s ComponentSpec,
    contract: Option<Contract>,
    unbound: bool,
    last_seq: u64,
    used: HashMap<ProfileId, [u64; 2]>,
    handles: HashMap<u32, Handle>,
    counters: Vec<u32>,
    applied: Vec<bool>,
    pending: Option<Pending>,
    memory: u64,
    /// Index of the first script step no access has been matched to yet.
    script: usize,
}

/// Byte counter index an access is charged to, if it has one.
fn slot(access: AccessKind) -> Option<usize> {
    match access {
        AccessKind::Read | AccessKind::Send | AccessKind::Allocate => Some(0),
        AccessKind::Write | AccessKind::Receive => Some(1),
        _ => None,
    }
}

fn limits(q: &Quota) -> [u64; 2] {
    match *q {
        Quota::File {
            read_bytes,
            write_bytes,
        } => [read_bytes, write_bytes],
        Quota::Socket {
            sent_bytes,
            received_bytes,
        } => [sent_bytes, received_bytes],
        Quota::Memory { bytes } => [bytes, 0],
    }
}

fn permitted(p: &AccessPermission, access: AccessKind) -> bool {
    match (p, access) {
        (AccessPermission::File { read, .. }, AccessKind::Read) => *read,
        (AccessPermission::File { write, .. }, AccessKind::Write) => *write,
        (AccessPermission::Socket { connect, .. }, AccessKind::Connect) => *connect,
        (AccessPermission::Socket { accept, .. }, AccessKind::Accept) => *accept,
        (AccessPermission::Socket { connect, accept }, AccessKind::Send | AccessKind::Receive) => *connect || *accept,
        (AccessPermission::Memory { allocate }, AccessKind::Allocate) => *allocate,
        (AccessPermission::Memory { .. }, AccessKind::Free) => true,
        _ => false,
    }
}

fn mode_within(granted: &AccessPermission, mode: &AccessPermission) -> bool {
    match (granted, mode) {
        (AccessPermission::File { read: r, write: w }, AccessPermission::File { read, write }) => {
            (!read || *r) && (!write || *w)
        }
        (AccessPermission::Socket { connect: c, accept: a }, AccessPermission::Socket { connect, accept }) => {
            (!connect || *c) && (!accept || *a)
        }
        (AccessPermission::Memory { allocate: a }, AccessPermission::Memory { allocate }) => !allocate || *a,
        _ => false,
    }
}

/// Picks the best pattern: longest, then lexicographically smallest. With
/// `later_wins` an exact duplicate later in the list replaces an earlier one.
fn best<'a, T>(items: impl Iterator<Item = (&'a ResourcePattern, T)>, later_wins: bool) -> Option<T> {
    let mut chosen: Option<(&ResourcePattern, T)> = None;
    for (p, t) in items {
        let replace = match &chosen {
            None => true,
            Some((q, _)) => {
                let (sp, sq) = (p.specificity(), q.specificity());
                sp > sq || (sp == sq && (p < *q || (later_wins && p == *q)))
            }
        };
        if replace {
            chosen = Some((p, t));
        }
    }
    chosen.map(|(_, t)| t)
}

fn route(contract: &Contract, d: &ResourceDescriptor) -> Option<ProfileId> {
    best(
        contract
            .profiles
            .iter()
            .filter(|p| matches(&p.pattern, d))
            .map(|p| (&p.pattern, p.id.clone())),
        true,
    )
}

fn flag(out: &mut Vec<Discrepancy>, line: usize, message: impl Into<String>) {
    out.push(Discrepancy {
        line,
        message: message.into(),
    });
}

struct Checker<'s> {
    scenario: &'s Scenario,
    out: Vec<Discrepancy>,
    load: Vec<[u64; 2]>,
    comps: HashMap<ComponentId, Comp<'s>>,
}

impl<'s> Checker<'s> {
    fn entry_of(&self, pattern: &ResourcePattern) -> Option<usize> {
        best(
            self.scenario
                .capacity
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.pattern.covers(pattern))
                .map(|(i, e)| (&e.pattern, i)),
            false,
        )
    }

    /// What best-effort accesses may still use of each capacity entry.
    fn unreserved(&self, entry: usize) -> [u64; 2] {
        let mut free = limits(&self.scenario.capacity.entries[entry].quota);
        for c in self.comps.values() {
            let Some(k) = &c.contract else { continue };
            for p in &k.profiles {
                if p.policy == AvailabilityPolicy::Reservation && self.entry_of(&p.pattern) == Some(entry) {
                    let l = limits(&p.quota);
                    free[0] = free[0].saturating_sub(l[0]);
                    free[1] = free[1].saturating_sub(l[1]);
                }
            }
        }
        free
    }

    fn gate_entry(&self, profile: &ResourceUtilisationProfile) -> Option<usize> {
        (profile.policy == AvailabilityPolicy::BestEffort)
            .then(|| self.entry_of(&profile.pattern))
            .flatten()
    }

    fn check(&mut self, lineno: usize, line: &TraceLine) {
        let Some(spec) = self.scenario.components.iter().find(|c| c.id == line.component) else {
            flag(&mut self.out, lineno, format!("component {} is not in the scenario", line.component));
            return;
        };
        let n = self.scenario.sanctions.len();
        let comp = self.comps.entry(line.component.clone()).or_insert_with(|| Comp {
            spec,
            contract: None,
            unbound: false,
            last_seq: 0,
            used: HashMap::new(),
            handles: HashMap::new(),
            counters: vec![0; n],
            applied: vec![false; n],
            pending: None,
            memory: 0,
            script: 0,
        });
        if line.seq != comp.last_seq + 1 {
            let last = comp.last_seq;
            flag(&mut self.out, lineno, format!("sequence number {} does not follow {last}", line.seq));
        }
        let comp = self.comps.get_mut(&line.component).expect("inserted above");
        comp.last_seq = comp.last_seq.max(line.seq);

        if let Some(p) = comp.pending.take() {
            let completes = matches!(
                &line.body,
                LineBody::AccessCompleted { handle, access, amount, .. }
                    if handle.0 == p.handle && *access == p.access && *amount == p.amount
            );
            if !completes {
                flag(&mut self.out, lineno, format!("allowed {} on handle {} never completed", p.access, p.handle));
            } else {
                self.complete(lineno, &line.component, p);
                return;
            }
        }

        match &line.body {
            LineBody::Bound { contract } => self.bound(lineno, &line.component, contract),
            LineBody::Unbound { contract_id } => {
                let comp = self.comps.get_mut(&line.component).expect("known component");
                match &comp.contract {
                    Some(c) if &c.id == contract_id => {}
                    _ => {
                        flag(&mut self.out, lineno, format!("unbinding {contract_id}, which is not bound"));
                        return;
                    }
                }
                let comp = self.comps.get_mut(&line.component).expect("known component");
                let live = comp.handles.values().filter(|h| h.state != State::Closed).count();
                comp.contract = None;
                comp.unbound = true;
                if live > 0 {
                    flag(&mut self.out, lineno, format!("{live} resources still live at unbinding"));
                }
            }
            LineBody::Created {
                handle,
                descriptor,
                mode,
                verdict,
            } => self.created(lineno, &line.component, handle.0, descriptor, mode, *verdict),
            LineBody::AccessRequested {
                handle,
                descriptor,
                access,
                amount,
                verdict,
            } => self.requested(lineno, &line.component, handle.0, descriptor, *access, *amount, *verdict),
            LineBody::AccessCompleted { handle, access, .. } => {
                flag(&mut self.out, lineno, format!("{access} on handle {} completed without being allowed", handle.0));
            }
            LineBody::Destroyed { handle, descriptor } => {
                let comp = self.comps.get_mut(&line.component).expect("known component");
                match comp.handles.get_mut(&handle.0) {
                    Some(h) if h.state != State::Closed && &h.descriptor == descriptor => h.state = State::Closed,
                    Some(h) if h.state == State::Closed => {
                        flag(&mut self.out, lineno, format!("handle {} destroyed while not live", handle.0))
                    }
                    Some(_) => flag(&mut self.out, lineno, format!("handle {} destroyed under another resource", handle.0)),
                    None => flag(&mut self.out, lineno, format!("handle {} destroyed before being created", handle.0)),
                }
            }
        }
    }

    fn bound(&mut self, lineno: usize, component: &ComponentId, contract: &Contract) {
        let comp = self.comps.get_mut(component).expect("known component");
        if comp.unbound {
            flag(&mut self.out, lineno, "binding after the contract was terminated");
            return;
        }
        let legitimate = match &comp.contract {
            None => comp.spec.subscribe.as_ref() == Some(&contract.id)
                && comp.spec.contracts.iter().any(|c| c == contract),
            Some(prev) => amendments(comp.spec)
                .any(|a| apply_amendment(prev, a).is_ok_and(|next| &next == contract)),
        };
        if !legitimate {
            flag(&mut self.out, lineno, format!("bound contract {} is not derivable from the scenario", contract.id));
        }
        let kinds: HashMap<&ProfileId, _> = comp
            .contract
            .iter()
            .flat_map(|c| c.profiles.iter().map(|p| (&p.id, p.kind())))
            .collect();
        let mut used = HashMap::new();
        for p in &contract.profiles {
            let keep = kinds.get(&p.id) == Some(&p.kind());
            let u = if keep { comp.used.get(&p.id).copied() } else { None };
            used.insert(p.id.clone(), u.unwrap_or([0, 0]));
        }
        comp.used = used;
        for h in comp.handles.values_mut().filter(|h| h.state != State::Closed) {
            h.profile = route(contract, &h.descriptor);
        }
        comp.contract = Some(contract.clone());
    }

    fn sanction_index(&self, d: &ResourceDescriptor) -> Option<usize> {
        let mut chosen: Option<usize> = None;
        for (i, s) in self.scenario.sanctions.iter().enumerate() {
            if !matches(s.pattern(), d) {
                continue;
            }
            chosen = match chosen {
                Some(j) => {
                    let (a, b) = (s.pattern(), self.scenario.sanctions[j].pattern());
                    let better = a.specificity() > b.specificity() || (a.specificity() == b.specificity() && a < b);
                    Some(if better { i } else { j })
                }
                None => Some(i),
            };
        }
        chosen
    }

    /// Expected verdict of a violation, updating counters. The returned
    /// pattern is to be locked after the event.
    fn violation(&mut self, component: &ComponentId, d: &ResourceDescriptor, reason: DenyReason) -> (AccessVerdict, Option<ResourcePattern>) {
        let Some(i) = self.sanction_index(d) else {
            return (AccessVerdict::Reject(reason), None);
        };
        let comp = self.comps.get_mut(component).expect("known component");
        let (pattern, action, fires) = match &self.scenario.sanctions[i] {
            Sanction::Immediate { pattern, action } => (pattern, *action, true),
            Sanction::Deferred {
                pattern,
                action,
                threshold,
            } => {
                if !comp.applied[i] {
                    comp.counters[i] += 1;
                }
                (pattern, *action, comp.applied[i] || comp.counters[i] >= threshold.get())
            }
        };
        if !fires {
            return (AccessVerdict::Reject(reason), None);
        }
        match action {
            SanctionAction::Reject => {
                if matches!(self.scenario.sanctions[i], Sanction::Deferred { .. }) {
                    comp.applied[i] = true;
                }
                (AccessVerdict::Reject(reason), None)
            }
            SanctionAction::Lock => {
                comp.applied[i] = true;
                (AccessVerdict::Lock(reason), Some(pattern.clone()))
            }
        }
    }

    fn lock_matching(&mut self, component: &ComponentId, pattern: &ResourcePattern) {
        let comp = self.comps.get_mut(component).expect("known component");
        for h in comp.handles.values_mut() {
            if h.state == State::Open && matches(pattern, &h.descriptor) {
                h.state = State::Locked;
            }
        }
    }

    fn applied_verdict(&self, component: &ComponentId, d: &ResourceDescriptor, only_lock: bool) -> Option<AccessVerdict> {
        let comp = &self.comps[component];
        let mut v: Option<AccessVerdict> = None;
        for (i, s) in self.scenario.sanctions.iter().enumerate() {
            if !comp.applied[i] || !matches(s.pattern(), d) {
                continue;
            }
            let this = match (s.action(), only_lock) {
                (SanctionAction::Lock, true) => AccessVerdict::Reject(DenyReason::Sanctioned),
                (SanctionAction::Lock, false) => AccessVerdict::Lock(DenyReason::Sanctioned),
                (SanctionAction::Reject, false) => AccessVerdict::Reject(DenyReason::Sanctioned),
                (SanctionAction::Reject, true) => continue,
            };
            v = Some(match (v, this) {
                (Some(AccessVerdict::Lock(r)), _) | (_, AccessVerdict::Lock(r)) => AccessVerdict::Lock(r),
                _ => this,
            });
        }
        v
    }

    fn bound_contract(&mut self, lineno: usize, component: &ComponentId) -> Option<Contract> {
        let c = self.comps[component].contract.clone();
        if c.is_none() {
            flag(&mut self.out, lineno, "resource event while no contract is bound");
        }
        c
    }

    fn created(
        &mut self,
        lineno: usize,
        component: &ComponentId,
        handle: u32,
        d: &ResourceDescriptor,
        mode: &AccessPermission,
        actual: AccessVerdict,
    ) {
        let Some(contract) = self.bound_contract(lineno, component) else { return };
        if self.comps[component].handles.contains_key(&handle) {
            flag(&mut self.out, lineno, format!("handle {handle} created twice"));
            return;
        }
        if let ResourceDescriptor::Memory { component: owner } = d {
            if owner != component {
                flag(&mut self.out, lineno, format!("memory pool of {owner} created in {component}"));
            }
        }
        let mut lock = None;
        let profile = route(&contract, d);
        let expected = if let Some(v) = self.applied_verdict(component, d, true) {
            v
        } else {
            match profile.as_ref().and_then(|id| contract.profiles.iter().find(|p| &p.id == id)) {
                None => {
                    let (v, l) = self.violation(component, d, DenyReason::Unmatched);
                    lock = l;
                    v
                }
                Some(p) if !mode_within(&p.permission, mode) => {
                    let (v, l) = self.violation(component, d, DenyReason::Permission);
                    lock = l;
                    v
                }
                Some(_) => AccessVerdict::Allow,
            }
        };
        if expected != actual {
            flag(&mut self.out, lineno, format!("creation of {d} recorded as {actual}, expected {expected}"));
        }
        let state = if actual == AccessVerdict::Allow {
            State::Open
        } else {
            State::Closed
        };
        let comp = self.comps.get_mut(component).expect("known component");
        comp.handles.insert(
            handle,
            Handle {
                descriptor: d.clone(),
                state,
                profile,
            },
        );
        if let Some(p) = lock {
            self.lock_matching(component, &p);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn requested(
        &mut self,
        lineno: usize,
        component: &ComponentId,
        handle: u32,
        d: &ResourceDescriptor,
        access: AccessKind,
        amount: u64,
        actual: AccessVerdict,
    ) {
        if let Some(comp) = self.comps.get_mut(component) {
            let rest = &comp.spec.script[comp.script..];
            match rest.iter().position(|st| scripted_access(st) == Some((access, amount))) {
                Some(i) => comp.script += i + 1,
                None => flag(
                    &mut self.out,
                    lineno,
                    format!("{access} of {amount} bytes matches no remaining step of the {component} script"),
                ),
            }
        }
        let Some(contract) = self.bound_contract(lineno, component) else { return };
        let comp = &self.comps[component];
        let Some(h) = comp.handles.get(&handle).cloned() else {
            flag(&mut self.out, lineno, format!("access on handle {handle} before its creation"));
            return;
        };
        if &h.descriptor != d {
            flag(&mut self.out, lineno, format!("handle {handle} refers to {}, not {d}", h.descriptor));
        }
        match h.state {
            State::Open => {}
            State::Locked => {
                flag(&mut self.out, lineno, format!("access on locked handle {handle}"));
                return;
            }
            State::Closed => {
                flag(&mut self.out, lineno, format!("access on handle {handle}, which is not live"));
                return;
            }
        }
        if access.resource_kind() != d.kind() {
            flag(&mut self.out, lineno, format!("{access} is not an access on {d}"));
            return;
        }
        if access == AccessKind::Free && amount > comp.memory {
            flag(&mut self.out, lineno, format!("free of {amount} with {} allocated", comp.memory));
        }

        let mut lock = None;
        let profile = h
            .profile
            .as_ref()
            .and_then(|id| contract.profiles.iter().find(|p| &p.id == id));
        let expected = if let Some(v) = self.applied_verdict(component, d, false) {
            v
        } else {
            match profile {
                None => {
                    let (v, l) = self.violation(component, d, DenyReason::Unmatched);
                    lock = l;
                    v
                }
                Some(p) => {
                    let used = comp.used.get(&p.id).copied().unwrap_or([0, 0]);
                    let over = slot(access).is_some_and(|s| used[s].saturating_add(amount) > limits(&p.quota)[s]);
                    if !permitted(&p.permission, access) {
                        let (v, l) = self.violation(component, d, DenyReason::Permission);
                        lock = l;
                        v
                    } else if over && access != AccessKind::Free {
                        let (v, l) = self.violation(component, d, DenyReason::Quota);
                        lock = l;
                        v
                    } else if let Some(e) = self.gate_entry(p).filter(|_| access != AccessKind::Free) {
                        let fits = slot(access)
                            .is_none_or(|s| self.load[e][s].saturating_add(amount) <= self.unreserved(e)[s]);
                        if fits {
                            self.conformant(component, d);
                            AccessVerdict::Allow
                        } else {
                            AccessVerdict::Reject(DenyReason::Capacity)
                        }
                    } else {
                        self.conformant(component, d);
                        AccessVerdict::Allow
                    }
                }
            }
        };
        if expected != actual {
            flag(&mut self.out, lineno, format!("{access} of {amount} on {d} recorded as {actual}, expected {expected}"));
        }
        let comp = self.comps.get_mut(component).expect("known component");
        match actual {
            AccessVerdict::Allow => {
                comp.pending = Some(Pending {
                    handle,
                    access,
                    amount,
                })
            }
            AccessVerdict::Lock(_) => {
                comp.handles.get_mut(&handle).expect("checked above").state = State::Locked;
            }
            AccessVerdict::Reject(_) => {}
        }
        if let Some(p) = lock {
            self.lock_matching(component, &p);
        }
    }

    fn conformant(&mut self, component: &ComponentId, d: &ResourceDescriptor) {
        let comp = self.comps.get_mut(component).expect("known component");
        for (i, s) in self.scenario.sanctions.iter().enumerate() {
            if matches!(s, Sanction::Deferred { .. }) && !comp.applied[i] && matches(s.pattern(), d) {
                comp.counters[i] = 0;
            }
        }
    }

    fn complete(&mut self, lineno: usize, component: &ComponentId, p: Pending) {
        let comp = &self.comps[component];
        let Some(contract) = comp.contract.clone() else { return };
        let Some(profile) = comp.handles[&p.handle]
            .profile
            .as_ref()
            .and_then(|id| contract.profiles.iter().find(|q| &q.id == id))
            .cloned()
        else {
            flag(&mut self.out, lineno, "completed access on an unsupervised resource");
            return;
        };
        let gate = self.gate_entry(&profile);
        let comp = self.comps.get_mut(component).expect("known component");
        let used = comp.used.entry(profile.id.clone()).or_insert([0, 0]);
        match p.access {
            AccessKind::Free => {
                used[0] = used[0].saturating_sub(p.amount);
                comp.memory = comp.memory.saturating_sub(p.amount);
                if let Some(e) = gate {
                    self.load[e][0] = self.load[e][0].saturating_sub(p.amount);
                }
            }
            a => {
                if let Some(s) = slot(a) {
                    used[s] += p.amount;
                    if let Some(e) = gate {
                        self.load[e][s] += p.amount;
                    }
                }
                if a == AccessKind::Allocate {
                    comp.memory += p.amount;
                }
            }
        }
    }
}

fn scripted_access(step: &ScriptStep) -> Option<(AccessKind, u64)> {
    match *step {
        ScriptStep::Allocate { bytes } => Some((AccessKind::Allocate, bytes)),
        ScriptStep::Free { bytes } => Some((AccessKind::Free, bytes)),
        _ => step.handle_access(),
    }
}

fn amendments(spec: &ComponentSpec) -> impl Iterator<Item = &crate::contracts::Amendment> {
    let scripted = spec.script.iter().filter_map(|s| match s {
        ScriptStep::SubmitAmendment { amendment } => Some(amendment),
        _ => None,
    });
    let handlers = spec.warning_handlers.iter().filter_map(|h| match h {
        WarningReaction::Amend { amendment } => Some(amendment),
        WarningReaction::Terminate => None,
    });
    scripted.chain(handlers)
}

/// Checks parsed trace lines; `lines` pairs each line with its file line.
pub fn verify_lines(lines: &[(usize, TraceLine)], scenario: &Scenario) -> Vec<Discrepancy> {
    let mut c = Checker {
        scenario,
        out: Vec::new(),
        load: vec![[0, 0]; scenario.capacity.entries.len()],
        comps: HashMap::new(),
    };
    for (lineno, line) in lines {
        c.check(*lineno, line);
    }
    let last = lines.last().map_or(1, |(l, _)| *l);
    let mut open: Vec<_> = c
        .comps
        .iter()
        .filter(|(_, comp)| comp.pending.is_some())
        .map(|(id, _)| id.clone())
        .collect();
    open.sort();
    for id in open {
        flag(&mut c.out, last, format!("{id}: trace ends before an allowed access completed"));
    }
    let mut bound: Vec<_> = c
        .comps
        .iter()
        .filter_map(|(id, comp)| comp.contract.as_ref().map(|k| (id.clone(), k.id.clone())))
        .collect();
    bound.sort();
    for (id, contract) in bound {
        flag(&mut c.out, last, format!("{id}: trace ends with {contract} still bound"));
    }
    c.out
}

/// Parses `trace` and checks it against `scenario`. An empty list means
/// the trace is consistent.
pub fn verify_trace(trace: &str, scenario: &Scenario) -> Result<Vec<Discrepancy>, TraceParseError> {
    Ok(verify_lines(&parse_trace(trace)?, scenario))
}
