//! Simulated, reified resource layer.
//!
//! Every resource object lives in a per-container [`ResourceEnv`]: a virtual
//! filesystem, byte-counting sockets and a memory ledger. Resources announce
//! their creation, every access and their destruction to listeners. Listeners
//! are identified by [`ListenerId`] and reached through an [`EventSink`]
//! supplied by the caller, so the environment never owns its observers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{
    AccessKind, AccessPermission, ComponentId, Contract, ContractId, PathError, ResourceDescriptor,
    VPath,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HandleId(pub u32);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ListenerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandleState {
    Open,
    Locked,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    /// Over the profile quota.
    Quota,
    /// Access kind not granted by the profile.
    Permission,
    /// No contract profile covers the resource.
    Unmatched,
    /// A sanction has been applied permanently to the resource's pattern.
    Sanctioned,
    /// Best-effort access denied because the platform capacity is exhausted.
    Capacity,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Quota => "quota",
            DenyReason::Permission => "permission",
            DenyReason::Unmatched => "unmatched",
            DenyReason::Sanctioned => "sanctioned",
            DenyReason::Capacity => "capacity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            DenyReason::Quota,
            DenyReason::Permission,
            DenyReason::Unmatched,
            DenyReason::Sanctioned,
            DenyReason::Capacity,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "lowercase")]
pub enum AccessVerdict {
    Allow,
    Reject(DenyReason),
    Lock(DenyReason),
}

impl AccessVerdict {
    pub fn is_allow(self) -> bool {
        matches!(self, AccessVerdict::Allow)
    }

    /// Lock beats Reject beats Allow; among equals the earlier verdict wins.
    pub fn combine(self, next: AccessVerdict) -> AccessVerdict {
        match (self, next) {
            (AccessVerdict::Lock(_), _) => self,
            (_, AccessVerdict::Lock(_)) => next,
            (AccessVerdict::Reject(_), _) => self,
            (AccessVerdict::Allow, _) => next,
        }
    }
}

impl fmt::Display for AccessVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessVerdict::Allow => f.write_str("allow"),
            AccessVerdict::Reject(r) => write!(f, "reject:{}", r.as_str()),
            AccessVerdict::Lock(r) => write!(f, "lock:{}", r.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind<'a> {
    Created {
        handle: HandleId,
        descriptor: &'a ResourceDescriptor,
        mode: AccessPermission,
    },
    AccessRequested {
        handle: HandleId,
        access: AccessKind,
        amount: u64,
    },
    AccessCompleted {
        handle: HandleId,
        access: AccessKind,
        amount: u64,
    },
    Destroyed {
        handle: HandleId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceEvent<'a> {
    pub seq: u64,
    pub kind: EventKind<'a>,
}

/// Who listens to what. Listeners may subscribe to handles while an event
/// is being delivered, which is how a tracker attaches monitors.
#[derive(Debug, Default, Clone)]
pub struct ListenerTable {
    registry: Vec<ListenerId>,
    handles: Vec<Vec<ListenerId>>,
}

impl ListenerTable {
    pub fn registry(&self) -> &[ListenerId] {
        &self.registry
    }

    pub fn handle(&self, handle: HandleId) -> &[ListenerId] {
        self.handles
            .get(handle.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn subscribe(&mut self, handle: HandleId, listener: ListenerId) {
        let idx = handle.0 as usize;
        if self.handles.len() <= idx {
            self.handles.resize_with(idx + 1, Vec::new);
        }
        if !self.handles[idx].contains(&listener) {
            self.handles[idx].push(listener);
        }
    }

    pub fn unsubscribe(&mut self, handle: HandleId, listener: ListenerId) {
        if let Some(ls) = self.handles.get_mut(handle.0 as usize) {
            ls.retain(|l| *l != listener);
        }
    }

    pub fn clear(&mut self, handle: HandleId) {
        if let Some(ls) = self.handles.get_mut(handle.0 as usize) {
            ls.clear();
        }
    }
}

/// Receives resource events on behalf of listeners.
pub trait EventSink {
    /// Delivers `event` to `listener`. The returned verdict only matters for
    /// `Created` and `AccessRequested`.
    fn deliver(
        &mut self,
        listener: ListenerId,
        event: &ResourceEvent<'_>,
        table: &mut ListenerTable,
    ) -> AccessVerdict;

    /// Observes actions of the resource layer itself.
    fn flow(&mut self, _note: FlowNote<'_>) {}
}

/// Environment-side steps of the supervision flow.
#[derive(Debug, Clone, Copy)]
pub enum FlowNote<'a> {
    Created {
        handle: HandleId,
        descriptor: &'a ResourceDescriptor,
    },
    RegistryBroadcast {
        handle: HandleId,
    },
    Access {
        handle: HandleId,
        access: AccessKind,
        amount: u64,
    },
}

/// A sink with no listeners behind it.
pub struct NullSink;

impl EventSink for NullSink {
    fn deliver(&mut self, _: ListenerId, _: &ResourceEvent<'_>, _: &mut ListenerTable) -> AccessVerdict {
        AccessVerdict::Allow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscriptionTarget {
    Registry,
    Handle(HandleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subscription {
    pub target: SubscriptionTarget,
    pub listener: ListenerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("unknown handle {0}")]
    UnknownHandle(HandleId),
    #[error("handle {0} is closed")]
    HandleClosed(HandleId),
    #[error("handle {0} is locked")]
    HandleLocked(HandleId),
    #[error("{access} does not apply to {descriptor}")]
    KindMismatch {
        descriptor: ResourceDescriptor,
        access: AccessKind,
    },
    #[error("invalid path: {0}")]
    InvalidPath(#[from] PathError),
    #[error("invalid socket endpoint {host:?}:{port}")]
    InvalidEndpoint { host: String, port: u16 },
    #[error("no such file {0}")]
    NoSuchFile(VPath),
    #[error("open mode grants nothing or targets another resource kind")]
    InvalidMode,
    #[error("creation vetoed ({0})")]
    Vetoed(AccessVerdict),
    #[error("cannot free {requested} bytes, only {allocated} allocated")]
    FreeUnderflow { requested: u64, allocated: u64 },
    #[error("amount must be positive")]
    ZeroAmount,
}

#[derive(Debug, Clone)]
enum Target {
    File(usize),
    Socket { sent: u64, received: u64 },
    Memory,
}

#[derive(Debug, Clone)]
struct HandleRecord {
    descriptor: ResourceDescriptor,
    state: HandleState,
    target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Created,
    AccessRequested,
    AccessCompleted,
    Destroyed,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Created => "Created",
            TraceKind::AccessRequested => "AccessRequested",
            TraceKind::AccessCompleted => "AccessCompleted",
            TraceKind::Destroyed => "Destroyed",
        }
    }
}

/// One emitted event, kept for the trace log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceRecord {
    Event {
        seq: u64,
        kind: TraceKind,
        handle: HandleId,
        access: Option<AccessKind>,
        mode: Option<AccessPermission>,
        amount: Option<u64>,
        verdict: Option<AccessVerdict>,
    },
    /// The contract the container enforces from this point on.
    Bound { seq: u64, contract: Contract },
    /// Enforcement stopped for this contract.
    Unbound { seq: u64, contract_id: ContractId },
}

impl TraceRecord {
    pub fn seq(&self) -> u64 {
        match self {
            TraceRecord::Event { seq, .. }
            | TraceRecord::Bound { seq, .. }
            | TraceRecord::Unbound { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LedgerSnapshot {
    pub files: BTreeMap<VPath, u64>,
    pub memory_allocated: u64,
    pub sockets: BTreeMap<HandleId, (u64, u64)>,
}

#[derive(Debug, Clone)]
struct VirtualFile {
    path: VPath,
    size: u64,
}

/// The resource environment of one container.
#[derive(Debug)]
pub struct ResourceEnv {
    component: ComponentId,
    files: Vec<VirtualFile>,
    file_index: HashMap<VPath, usize>,
    handles: Vec<HandleRecord>,
    listeners: ListenerTable,
    memory_allocated: u64,
    memory_handle: Option<HandleId>,
    next_seq: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl ResourceEnv {
    pub fn new(component: ComponentId) -> Self {
        Self {
            component,
            files: Vec::new(),
            file_index: HashMap::new(),
            handles: Vec::new(),
            listeners: ListenerTable::default(),
            memory_allocated: 0,
            memory_handle: None,
            next_seq: 0,
            trace: None,
        }
    }

    pub fn component(&self) -> &ComponentId {
        &self.component
    }

    pub fn set_tracing(&mut self, on: bool) {
        if on && self.trace.is_none() {
            self.trace = Some(Vec::new());
        } else if !on {
            self.trace = None;
        }
    }

    pub fn drain_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Seeds a file in the virtual filesystem, bypassing supervision.
    pub fn seed_file(&mut self, path: VPath, size: u64) {
        let idx = self.file_slot(path);
        self.files[idx].size = size;
    }

    pub fn file_size(&self, path: &VPath) -> Option<u64> {
        self.file_index.get(path).map(|&i| self.files[i].size)
    }

    pub fn memory_allocated(&self) -> u64 {
        self.memory_allocated
    }

    pub fn descriptor(&self, handle: HandleId) -> Option<&ResourceDescriptor> {
        self.handles.get(handle.0 as usize).map(|h| &h.descriptor)
    }

    pub fn state(&self, handle: HandleId) -> Option<HandleState> {
        self.handles.get(handle.0 as usize).map(|h| h.state)
    }

    pub fn memory_handle(&self) -> Option<HandleId> {
        self.memory_handle
    }

    /// Handles created and not yet destroyed: the registry contents.
    pub fn live_handles(&self) -> impl Iterator<Item = (HandleId, &ResourceDescriptor)> + '_ {
        self.handles
            .iter()
            .enumerate()
            .filter(|(_, h)| h.state != HandleState::Closed)
            .map(|(i, h)| (HandleId(i as u32), &h.descriptor))
    }

    pub fn listeners(&self) -> &ListenerTable {
        &self.listeners
    }

    pub fn listeners_mut(&mut self) -> &mut ListenerTable {
        &mut self.listeners
    }

    pub fn register_registry_listener(&mut self, listener: ListenerId) -> Subscription {
        if !self.listeners.registry.contains(&listener) {
            self.listeners.registry.push(listener);
        }
        Subscription {
            target: SubscriptionTarget::Registry,
            listener,
        }
    }

    pub fn register_handle_listener(
        &mut self,
        handle: HandleId,
        listener: ListenerId,
    ) -> Result<Subscription, ResourceError> {
        let rec = self.record(handle)?;
        if rec.state == HandleState::Closed {
            return Err(ResourceError::HandleClosed(handle));
        }
        self.listeners.subscribe(handle, listener);
        Ok(Subscription {
            target: SubscriptionTarget::Handle(handle),
            listener,
        })
    }

    pub fn unregister(&mut self, sub: Subscription) {
        match sub.target {
            SubscriptionTarget::Registry => self.listeners.registry.retain(|l| *l != sub.listener),
            SubscriptionTarget::Handle(h) => self.listeners.unsubscribe(h, sub.listener),
        }
    }

    /// Allocates the next sequence number for a container-level record.
    pub fn record_binding(&mut self, contract: &Contract) {
        let seq = self.bump();
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord::Bound {
                seq,
                contract: contract.clone(),
            });
        }
    }

    pub fn record_unbinding(&mut self, contract_id: &ContractId) {
        let seq = self.bump();
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord::Unbound {
                seq,
                contract_id: contract_id.clone(),
            });
        }
    }

    pub fn open_file(
        &mut self,
        path: &str,
        mode: AccessPermission,
        sink: &mut dyn EventSink,
    ) -> Result<HandleId, ResourceError> {
        let path = VPath::parse(path)?;
        if !matches!(mode, AccessPermission::File { .. }) || mode.is_empty() {
            return Err(ResourceError::InvalidMode);
        }
        let writes = matches!(mode, AccessPermission::File { write: true, .. });
        let existing = self.file_index.get(&path).copied();
        if existing.is_none() && !writes {
            return Err(ResourceError::NoSuchFile(path));
        }
        let handle = self.create(ResourceDescriptor::File { path: path.clone() }, mode, sink)?;
        let idx = existing.unwrap_or_else(|| self.file_slot(path));
        self.handles[handle.0 as usize].target = Target::File(idx);
        Ok(handle)
    }

    pub fn open_socket(
        &mut self,
        host: &str,
        port: u16,
        sink: &mut dyn EventSink,
    ) -> Result<HandleId, ResourceError> {
        if host.is_empty() || port == 0 || host.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(ResourceError::InvalidEndpoint {
                host: host.to_owned(),
                port,
            });
        }
        let descriptor = ResourceDescriptor::Socket {
            host: host.to_owned(),
            port,
        };
        let mode = AccessPermission::Socket {
            connect: true,
            accept: false,
        };
        let handle = self.create(descriptor, mode, sink)?;
        self.handles[handle.0 as usize].target = Target::Socket {
            sent: 0,
            received: 0,
        };
        Ok(handle)
    }

    pub fn access(
        &mut self,
        handle: HandleId,
        access: AccessKind,
        amount: u64,
        sink: &mut dyn EventSink,
    ) -> Result<AccessVerdict, ResourceError> {
        let rec = self.record(handle)?;
        match rec.state {
            HandleState::Closed => return Err(ResourceError::HandleClosed(handle)),
            HandleState::Locked => return Err(ResourceError::HandleLocked(handle)),
            HandleState::Open => {}
        }
        if access.resource_kind() != rec.descriptor.kind() {
            return Err(ResourceError::KindMismatch {
                descriptor: rec.descriptor.clone(),
                access,
            });
        }
        if access == AccessKind::Free && amount > self.memory_allocated {
            return Err(ResourceError::FreeUnderflow {
                requested: amount,
                allocated: self.memory_allocated,
            });
        }

        sink.flow(FlowNote::Access {
            handle,
            access,
            amount,
        });
        let seq = self.bump();
        let event = ResourceEvent {
            seq,
            kind: EventKind::AccessRequested {
                handle,
                access,
                amount,
            },
        };
        let verdict = self.broadcast_handle(handle, &event, sink);
        self.trace_event(seq, TraceKind::AccessRequested, handle, Some(access), None, Some(amount), Some(verdict));

        match verdict {
            AccessVerdict::Allow => {}
            AccessVerdict::Reject(_) => return Ok(verdict),
            AccessVerdict::Lock(_) => {
                self.handles[handle.0 as usize].state = HandleState::Locked;
                return Ok(verdict);
            }
        }

        self.apply_effect(handle, access, amount);
        let seq = self.bump();
        let event = ResourceEvent {
            seq,
            kind: EventKind::AccessCompleted {
                handle,
                access,
                amount,
            },
        };
        self.broadcast_handle(handle, &event, sink);
        self.trace_event(seq, TraceKind::AccessCompleted, handle, Some(access), None, Some(amount), None);
        Ok(AccessVerdict::Allow)
    }

    /// Allocates from the component's memory pool. The pool resource is
    /// created on first use; a vetoed creation is reported as the verdict.
    pub fn allocate(&mut self, amount: u64, sink: &mut dyn EventSink) -> Result<AccessVerdict, ResourceError> {
        if amount == 0 {
            return Err(ResourceError::ZeroAmount);
        }
        let handle = match self.memory_pool(sink)? {
            Ok(h) => h,
            Err(verdict) => return Ok(verdict),
        };
        self.access(handle, AccessKind::Allocate, amount, sink)
    }

    pub fn free(&mut self, amount: u64, sink: &mut dyn EventSink) -> Result<AccessVerdict, ResourceError> {
        if amount == 0 {
            return Err(ResourceError::ZeroAmount);
        }
        if amount > self.memory_allocated {
            return Err(ResourceError::FreeUnderflow {
                requested: amount,
                allocated: self.memory_allocated,
            });
        }
        let handle = match self.memory_pool(sink)? {
            Ok(h) => h,
            Err(verdict) => return Ok(verdict),
        };
        self.access(handle, AccessKind::Free, amount, sink)
    }

    pub fn close(&mut self, handle: HandleId, sink: &mut dyn EventSink) -> Result<(), ResourceError> {
        let rec = self.record(handle)?;
        if rec.state == HandleState::Closed {
            return Err(ResourceError::HandleClosed(handle));
        }
        self.handles[handle.0 as usize].state = HandleState::Closed;
        if self.memory_handle == Some(handle) {
            self.memory_handle = None;
        }
        let seq = self.bump();
        let event = ResourceEvent {
            seq,
            kind: EventKind::Destroyed { handle },
        };
        self.broadcast_handle(handle, &event, sink);
        self.broadcast_registry(&event, sink);
        self.listeners.clear(handle);
        self.trace_event(seq, TraceKind::Destroyed, handle, None, None, None, None);
        Ok(())
    }

    /// Open → Locked. Returns false when the handle was not open.
    pub fn lock(&mut self, handle: HandleId) -> bool {
        match self.handles.get_mut(handle.0 as usize) {
            Some(rec) if rec.state == HandleState::Open => {
                rec.state = HandleState::Locked;
                true
            }
            _ => false,
        }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            files: self.files.iter().map(|f| (f.path.clone(), f.size)).collect(),
            memory_allocated: self.memory_allocated,
            sockets: self
                .handles
                .iter()
                .enumerate()
                .filter_map(|(i, h)| match h.target {
                    Target::Socket { sent, received } => Some((HandleId(i as u32), (sent, received))),
                    _ => None,
                })
                .collect(),
        }
    }

    fn memory_pool(&mut self, sink: &mut dyn EventSink) -> Result<Result<HandleId, AccessVerdict>, ResourceError> {
        if let Some(h) = self.memory_handle {
            return Ok(Ok(h));
        }
        let descriptor = ResourceDescriptor::Memory {
            component: self.component.clone(),
        };
        match self.create(descriptor, AccessPermission::Memory { allocate: true }, sink) {
            Ok(h) => {
                self.memory_handle = Some(h);
                Ok(Ok(h))
            }
            Err(ResourceError::Vetoed(v)) => Ok(Err(v)),
            Err(e) => Err(e),
        }
    }

    fn create(
        &mut self,
        descriptor: ResourceDescriptor,
        mode: AccessPermission,
        sink: &mut dyn EventSink,
    ) -> Result<HandleId, ResourceError> {
        let handle = HandleId(self.handles.len() as u32);
        self.handles.push(HandleRecord {
            descriptor,
            state: HandleState::Open,
            target: Target::Memory,
        });
        let seq = self.bump();
        let descriptor = &self.handles[handle.0 as usize].descriptor;
        sink.flow(FlowNote::Created { handle, descriptor });
        let event = ResourceEvent {
            seq,
            kind: EventKind::Created {
                handle,
                descriptor,
                mode,
            },
        };
        sink.flow(FlowNote::RegistryBroadcast { handle });
        let mut verdict = AccessVerdict::Allow;
        let mut i = 0;
        while let Some(&l) = self.listeners.registry.get(i) {
            verdict = verdict.combine(sink.deliver(l, &event, &mut self.listeners));
            i += 1;
        }
        self.trace_event(seq, TraceKind::Created, handle, None, Some(mode), None, Some(verdict));
        if !verdict.is_allow() {
            self.handles[handle.0 as usize].state = HandleState::Closed;
            self.listeners.clear(handle);
            return Err(ResourceError::Vetoed(verdict));
        }
        Ok(handle)
    }

    fn broadcast_handle(&mut self, handle: HandleId, event: &ResourceEvent<'_>, sink: &mut dyn EventSink) -> AccessVerdict {
        let mut verdict = AccessVerdict::Allow;
        let idx = handle.0 as usize;
        let mut i = 0;
        while let Some(&l) = self.listeners.handles.get(idx).and_then(|ls| ls.get(i)) {
            verdict = verdict.combine(sink.deliver(l, event, &mut self.listeners));
            i += 1;
        }
        verdict
    }

    fn broadcast_registry(&mut self, event: &ResourceEvent<'_>, sink: &mut dyn EventSink) {
        let mut i = 0;
        while let Some(&l) = self.listeners.registry.get(i) {
            sink.deliver(l, event, &mut self.listeners);
            i += 1;
        }
    }

    fn apply_effect(&mut self, handle: HandleId, access: AccessKind, amount: u64) {
        let rec = &mut self.handles[handle.0 as usize];
        match (&mut rec.target, access) {
            (Target::File(idx), AccessKind::Write) => {
                let f = &mut self.files[*idx];
                f.size = f.size.saturating_add(amount);
            }
            (Target::Socket { sent, .. }, AccessKind::Send) => *sent = sent.saturating_add(amount),
            (Target::Socket { received, .. }, AccessKind::Receive) => {
                *received = received.saturating_add(amount)
            }
            (Target::Memory, AccessKind::Allocate) => {
                self.memory_allocated = self.memory_allocated.saturating_add(amount)
            }
            (Target::Memory, AccessKind::Free) => self.memory_allocated -= amount,
            _ => {}
        }
    }

    fn file_slot(&mut self, path: VPath) -> usize {
        if let Some(&i) = self.file_index.get(&path) {
            return i;
        }
        let i = self.files.len();
        self.files.push(VirtualFile {
            path: path.clone(),
            size: 0,
        });
        self.file_index.insert(path, i);
        i
    }

    fn record(&self, handle: HandleId) -> Result<&HandleRecord, ResourceError> {
        self.handles
            .get(handle.0 as usize)
            .ok_or(ResourceError::UnknownHandle(handle))
    }

    fn bump(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    #[allow(clippy::too_many_arguments)]
    fn trace_event(
        &mut self,
        seq: u64,
        kind: TraceKind,
        handle: HandleId,
        access: Option<AccessKind>,
        mode: Option<AccessPermission>,
        amount: Option<u64>,
        verdict: Option<AccessVerdict>,
    ) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord::Event {
                seq,
                kind,
                handle,
                access,
                mode,
                amount,
                verdict,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{KO, MO};
    use proptest::prelude::*;

    /// Records deliveries; listener 0 on the registry attaches listener 1 to
    /// every new handle. Listener 1 enforces a cumulative write budget and an
    /// instantaneous memory budget.
    #[derive(Default)]
    struct Probe {
        log: Vec<(ListenerId, u64, String)>,
        write_budget: u64,
        written: u64,
        memory_budget: u64,
        held: u64,
        lock_sends: bool,
        veto_prefix: Option<String>,
    }

    impl EventSink for Probe {
        fn deliver(&mut self, l: ListenerId, ev: &ResourceEvent<'_>, table: &mut ListenerTable) -> AccessVerdict {
            let label = match ev.kind {
                EventKind::Created { handle, descriptor, .. } => {
                    if l == ListenerId(0) {
                        if let Some(p) = &self.veto_prefix {
                            if descriptor.to_string().starts_with(p.as_str()) {
                                self.log.push((l, ev.seq, format!("created {descriptor}")));
                                return AccessVerdict::Reject(DenyReason::Unmatched);
                            }
                        }
                        table.subscribe(handle, ListenerId(1));
                    }
                    format!("created {descriptor}")
                }
                EventKind::AccessRequested { access, amount, .. } => {
                    let label = format!("requested {access} {amount}");
                    if l == ListenerId(1) {
                        let verdict = match access {
                            AccessKind::Write if self.written + amount > self.write_budget => {
                                AccessVerdict::Reject(DenyReason::Quota)
                            }
                            AccessKind::Allocate if self.held + amount > self.memory_budget => {
                                AccessVerdict::Reject(DenyReason::Quota)
                            }
                            AccessKind::Send if self.lock_sends => AccessVerdict::Lock(DenyReason::Sanctioned),
                            _ => AccessVerdict::Allow,
                        };
                        self.log.push((l, ev.seq, label));
                        return verdict;
                    }
                    label
                }
                EventKind::AccessCompleted { access, amount, .. } => {
                    if l == ListenerId(1) {
                        match access {
                            AccessKind::Write => self.written += amount,
                            AccessKind::Allocate => self.held += amount,
                            AccessKind::Free => self.held -= amount,
                            _ => {}
                        }
                    }
                    format!("completed {access} {amount}")
                }
                EventKind::Destroyed { handle } => format!("destroyed {handle}"),
            };
            self.log.push((l, ev.seq, label));
            AccessVerdict::Allow
        }
    }

    fn env_with_probe() -> (ResourceEnv, Probe) {
        let mut env = ResourceEnv::new("JMailer".into());
        env.register_registry_listener(ListenerId(0));
        let probe = Probe {
            write_budget: 500 * KO,
            memory_budget: MO,
            ..Probe::default()
        };
        (env, probe)
    }

    const WRITE: AccessPermission = AccessPermission::File {
        read: false,
        write: true,
    };

    #[test]
    fn open_file_announces_creation() {
        let (mut env, mut probe) = env_with_probe();
        let h = env.open_file("~/.jmailer/out.txt", WRITE, &mut probe).unwrap();
        assert_eq!(env.state(h), Some(HandleState::Open));
        assert_eq!(probe.log, vec![(ListenerId(0), 1, "created file:~/.jmailer/out.txt".into())]);
        assert_eq!(env.file_size(&VPath::parse("~/.jmailer/out.txt").unwrap()), Some(0));
        assert_eq!(env.live_handles().count(), 1);
    }

    #[test]
    fn open_errors() {
        let (mut env, mut probe) = env_with_probe();
        assert!(matches!(
            env.open_file("../etc/x", WRITE, &mut probe),
            Err(ResourceError::InvalidPath(_))
        ));
        let read_only = AccessPermission::File {
            read: true,
            write: false,
        };
        assert!(matches!(
            env.open_file("/missing", read_only, &mut probe),
            Err(ResourceError::NoSuchFile(_))
        ));
        assert_eq!(
            env.open_file("/x", AccessPermission::Memory { allocate: true }, &mut probe),
            Err(ResourceError::InvalidMode)
        );
        assert!(env.open_socket("", 80, &mut probe).is_err());
        assert!(env.open_socket("h", 0, &mut probe).is_err());
        assert!(probe.log.is_empty());
    }

    #[test]
    fn vetoed_creation_leaves_no_resource() {
        let (mut env, mut probe) = env_with_probe();
        probe.veto_prefix = Some("file:~/.elsewhere".into());
        let err = env.open_file("~/.elsewhere/x", WRITE, &mut probe).unwrap_err();
        assert_eq!(err, ResourceError::Vetoed(AccessVerdict::Reject(DenyReason::Unmatched)));
        assert_eq!(env.file_size(&VPath::parse("~/.elsewhere/x").unwrap()), None);
        assert_eq!(env.live_handles().count(), 0);
    }

    #[test]
    fn write_quota_is_atomic() {
        let (mut env, mut probe) = env_with_probe();
        let h = env.open_file("~/.jmailer/out.txt", WRITE, &mut probe).unwrap();
        assert_eq!(env.access(h, AccessKind::Write, 400 * KO, &mut probe), Ok(AccessVerdict::Allow));
        let before = env.snapshot();
        assert_eq!(
            env.access(h, AccessKind::Write, 200 * KO, &mut probe),
            Ok(AccessVerdict::Reject(DenyReason::Quota))
        );
        assert_eq!(env.snapshot(), before);
        assert_eq!(before.files.values().copied().sum::<u64>(), 400 * KO);
    }

    #[test]
    fn closed_and_locked_handles_refuse_access() {
        let (mut env, mut probe) = env_with_probe();
        let h = env.open_file("/tmp/a", WRITE, &mut probe).unwrap();
        env.close(h, &mut probe).unwrap();
        assert_eq!(env.access(h, AccessKind::Write, 1, &mut probe), Err(ResourceError::HandleClosed(h)));
        assert_eq!(env.close(h, &mut probe), Err(ResourceError::HandleClosed(h)));

        probe.lock_sends = true;
        let s = env.open_socket("example.org", 80, &mut probe).unwrap();
        assert_eq!(
            env.access(s, AccessKind::Send, 10, &mut probe),
            Ok(AccessVerdict::Lock(DenyReason::Sanctioned))
        );
        assert_eq!(env.state(s), Some(HandleState::Locked));
        let n = probe.log.len();
        assert_eq!(env.access(s, AccessKind::Send, 10, &mut probe), Err(ResourceError::HandleLocked(s)));
        assert_eq!(probe.log.len(), n);
        env.close(s, &mut probe).unwrap();
        assert_eq!(env.state(s), Some(HandleState::Closed));
    }

    #[test]
    fn kind_mismatch() {
        let (mut env, mut probe) = env_with_probe();
        let h = env.open_file("/tmp/a", WRITE, &mut probe).unwrap();
        assert!(matches!(
            env.access(h, AccessKind::Send, 1, &mut probe),
            Err(ResourceError::KindMismatch { .. })
        ));
    }

    #[test]
    fn memory_examples() {
        let (mut env, mut probe) = env_with_probe();
        assert_eq!(env.allocate(MO, &mut probe), Ok(AccessVerdict::Allow));
        let (mut env, mut probe) = env_with_probe();
        assert_eq!(env.allocate(1, &mut probe), Ok(AccessVerdict::Allow));
        assert_eq!(env.allocate(MO, &mut probe), Ok(AccessVerdict::Reject(DenyReason::Quota)));
        assert_eq!(env.memory_allocated(), 1);
        let (mut env, mut probe) = env_with_probe();
        assert_eq!(env.allocate(512 * KO, &mut probe), Ok(AccessVerdict::Allow));
        assert_eq!(env.free(512 * KO, &mut probe), Ok(AccessVerdict::Allow));
        assert_eq!(env.allocate(MO, &mut probe), Ok(AccessVerdict::Allow));
        assert_eq!(
            env.free(MO + 1, &mut probe),
            Err(ResourceError::FreeUnderflow {
                requested: MO + 1,
                allocated: MO
            })
        );
        assert_eq!(env.allocate(0, &mut probe), Err(ResourceError::ZeroAmount));
        // one pool resource created, lazily
        let created = probe.log.iter().filter(|(_, _, s)| s.starts_with("created")).count();
        assert_eq!(created, 1);
    }

    #[test]
    fn listeners_broadcast_in_registration_order_without_replay() {
        let mut env = ResourceEnv::new("c".into());
        let mut probe = Probe::default();
        env.register_registry_listener(ListenerId(7));
        env.open_file("/a", WRITE, &mut probe).unwrap();
        env.register_registry_listener(ListenerId(8));
        env.open_file("/b", WRITE, &mut probe).unwrap();
        let got: Vec<_> = probe.log.iter().map(|(l, s, _)| (l.0, *s)).collect();
        assert_eq!(got, vec![(7, 1), (7, 2), (8, 2)]);
    }

    #[test]
    fn verdict_precedence() {
        use AccessVerdict::*;
        let q = DenyReason::Quota;
        let p = DenyReason::Permission;
        assert_eq!(Allow.combine(Reject(q)), Reject(q));
        assert_eq!(Reject(q).combine(Reject(p)), Reject(q));
        assert_eq!(Reject(q).combine(Lock(p)), Lock(p));
        assert_eq!(Lock(q).combine(Lock(p)), Lock(q));
        assert_eq!(Lock(q).combine(Reject(p)), Lock(q));
    }

    #[test]
    fn trace_orders_events_per_handle() {
        let (mut env, mut probe) = env_with_probe();
        env.set_tracing(true);
        let h = env.open_file("/tmp/a", WRITE, &mut probe).unwrap();
        env.access(h, AccessKind::Write, 10, &mut probe).unwrap();
        env.close(h, &mut probe).unwrap();
        let kinds: Vec<_> = env
            .drain_trace()
            .into_iter()
            .map(|r| match r {
                TraceRecord::Event { seq, kind, .. } => (seq, kind),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            kinds,
            vec![
                (1, TraceKind::Created),
                (2, TraceKind::AccessRequested),
                (3, TraceKind::AccessCompleted),
                (4, TraceKind::Destroyed)
            ]
        );
    }

    proptest! {
        #[test]
        fn memory_ledger_is_conserved(ops in prop::collection::vec((prop::bool::ANY, 1u64..(MO / 2)), 1..60)) {
            let (mut env, mut probe) = env_with_probe();
            let mut expected: u64 = 0;
            for (alloc, amount) in ops {
                let before = env.snapshot();
                let out = if alloc { env.allocate(amount, &mut probe) } else { env.free(amount, &mut probe) };
                match out {
                    Ok(AccessVerdict::Allow) => {
                        if alloc { expected += amount } else { expected -= amount }
                    }
                    Ok(_) | Err(_) => prop_assert_eq!(env.snapshot(), before),
                }
                prop_assert_eq!(env.memory_allocated(), expected);
                prop_assert!(expected <= MO);
            }
        }
    }
}
