//! Per-component supervision.
//!
//! A [`Container`] hosts one component behind its own [`ResourceEnv`]. On
//! configuration the resource tracker subscribes to the registry and the
//! application monitor instantiates one resource monitor per contract
//! profile. New resources are routed by the tracker to the most specific
//! monitor, which then listens to every access on them.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::broker::{CapacityGate, EntryId};
use crate::contracts::{
    matches, AccessKind, AccessPermission, AvailabilityPolicy, ComponentId, Contract, ContractId,
    ProfileId, Quota, ResourceDescriptor, ResourceKind, ResourcePattern, ResourceUtilisationProfile, VPath,
};
use crate::resources::{
    AccessVerdict, DenyReason, EventKind, EventSink, FlowNote, HandleId, HandleState, LedgerSnapshot,
    ListenerId, ListenerTable, ResourceEnv, ResourceError, ResourceEvent, TraceRecord,
};
use crate::sanctions::{Notice, Sanction, SanctionEngine, SanctionRecord};

pub const TRACKER: ListenerId = ListenerId(0);
pub const DEFAULT_DENY: ListenerId = ListenerId(1);
const FIRST_MONITOR: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Quota,
    Permission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolationEvent {
    pub component: ComponentId,
    /// `None` when no profile covers the resource.
    pub profile_id: Option<ProfileId>,
    pub descriptor: ResourceDescriptor,
    pub access: AccessKind,
    pub amount: u64,
    pub kind: ViolationKind,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MonitorKind {
    FileMonitor,
    SocketMonitor,
    MemoryMonitor,
}

/// Keeps the usage ledger of one profile.
#[derive(Debug, Clone)]
pub struct ResourceMonitor {
    listener: ListenerId,
    profile: ResourceUtilisationProfile,
    usage: Quota,
    handles: BTreeSet<HandleId>,
    gate_entry: Option<EntryId>,
}

impl ResourceMonitor {
    pub fn new(listener: ListenerId, profile: ResourceUtilisationProfile) -> Self {
        Self {
            listener,
            usage: Quota::zero(profile.kind()),
            profile,
            handles: BTreeSet::new(),
            gate_entry: None,
        }
    }

    pub fn listener(&self) -> ListenerId {
        self.listener
    }

    pub fn profile(&self) -> &ResourceUtilisationProfile {
        &self.profile
    }

    pub fn usage(&self) -> Quota {
        self.usage
    }

    pub fn handles(&self) -> &BTreeSet<HandleId> {
        &self.handles
    }

    pub fn kind(&self) -> MonitorKind {
        match self.profile.kind() {
            ResourceKind::File => MonitorKind::FileMonitor,
            ResourceKind::Socket => MonitorKind::SocketMonitor,
            ResourceKind::Memory => MonitorKind::MemoryMonitor,
        }
    }

    /// Permission first, then quota against the running ledger.
    #[inline]
    pub fn check(&self, access: AccessKind, amount: u64) -> Result<(), ViolationKind> {
        if self.profile.permission.allows(access) != Some(true) {
            return Err(ViolationKind::Permission);
        }
        match (self.usage.component(access), self.profile.quota.component(access)) {
            (Some(used), Some(limit)) if used.saturating_add(amount) > limit => Err(ViolationKind::Quota),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn charge(&mut self, access: AccessKind, amount: u64) {
        if access == AccessKind::Free {
            if let Some(held) = self.usage.component(AccessKind::Allocate) {
                self.usage = self.usage.with_component(AccessKind::Allocate, held.saturating_sub(amount));
            }
        } else if let Some(used) = self.usage.component(access) {
            self.usage = self.usage.with_component(access, used.saturating_add(amount));
        }
    }
}

impl fmt::Display for ResourceMonitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.profile.pattern {
            ResourcePattern::File { path_prefix } => write!(f, "FileMonitor({path_prefix})"),
            ResourcePattern::Socket { host_glob, port } => write!(f, "SocketMonitor({host_glob}:{port})"),
            ResourcePattern::Memory => match self.profile.quota {
                Quota::Memory { bytes } => write!(f, "MemoryMonitor({bytes})"),
                _ => f.write_str("MemoryMonitor()"),
            },
        }
    }
}

/// Holds the subscribed contract and one monitor per profile.
#[derive(Debug, Clone, Default)]
pub struct ApplicationMonitor {
    contract: Option<Contract>,
    slots: Vec<Option<ResourceMonitor>>,
}

impl ApplicationMonitor {
    pub fn contract(&self) -> Option<&Contract> {
        self.contract.as_ref()
    }

    pub fn monitors(&self) -> impl Iterator<Item = &ResourceMonitor> {
        self.slots.iter().flatten()
    }

    pub fn monitor(&self, listener: ListenerId) -> Option<&ResourceMonitor> {
        listener
            .0
            .checked_sub(FIRST_MONITOR)
            .and_then(|i| self.slots.get(i as usize))
            .and_then(Option::as_ref)
    }

    fn monitor_mut(&mut self, listener: ListenerId) -> Option<&mut ResourceMonitor> {
        listener
            .0
            .checked_sub(FIRST_MONITOR)
            .and_then(|i| self.slots.get_mut(i as usize))
            .and_then(Option::as_mut)
    }

    /// Most specific monitor whose profile pattern matches the resource.
    /// Among identical patterns the profile declared last wins.
    pub fn select(&self, descriptor: &ResourceDescriptor) -> Option<ListenerId> {
        let contract = self.contract.as_ref()?;
        let profile = contract
            .profiles
            .iter()
            .filter(|p| matches(&p.pattern, descriptor))
            .max_by(|a, b| {
                a.pattern
                    .specificity()
                    .cmp(&b.pattern.specificity())
                    .then_with(|| b.pattern.cmp(&a.pattern))
            })?;
        self.monitors().find(|m| m.profile.id == profile.id).map(|m| m.listener)
    }

    /// Installs `contract`. Monitors of profiles that keep their id keep
    /// their ledger; others are retired or created. Returns the monitors
    /// created by this call.
    fn install(&mut self, contract: &Contract, gate: Option<&dyn CapacityGate>) -> Vec<ListenerId> {
        let mut created = Vec::new();
        for slot in self.slots.iter_mut() {
            let keep = slot.as_ref().and_then(|m| {
                contract
                    .profile(&m.profile.id)
                    .filter(|p| p.kind() == m.profile.kind())
                    .cloned()
            });
            match (slot.as_mut(), keep) {
                (Some(m), Some(p)) => m.profile = p,
                _ => *slot = None,
            }
        }
        for p in &contract.profiles {
            if self.monitors().any(|m| m.profile.id == p.id) {
                continue;
            }
            let listener = ListenerId(FIRST_MONITOR + self.slots.len() as u32);
            self.slots.push(Some(ResourceMonitor::new(listener, p.clone())));
            created.push(listener);
        }
        for m in self.slots.iter_mut().flatten() {
            m.gate_entry = match (m.profile.policy, gate) {
                (AvailabilityPolicy::BestEffort, Some(g)) => g.entry_for(&m.profile.pattern),
                _ => None,
            };
        }
        self.contract = Some(contract.clone());
        created
    }
}

/// One step of the supervision flow, numbered as in the container diagram.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FlowAction {
    TrackerRegistered,
    MonitorsInstantiated { monitors: Vec<String> },
    ResourceCreated { handle: HandleId, descriptor: String },
    RegistryBroadcast { handle: HandleId },
    TrackerNotified { handle: HandleId },
    MonitorListQuery { monitors: usize },
    MonitorSelected { handle: HandleId, monitor: String },
    MonitorSubscribed { handle: HandleId, monitor: String },
    ComponentAccess { handle: HandleId, access: AccessKind, amount: u64 },
    MonitorNotified { handle: HandleId, monitor: String, access: AccessKind, amount: u64 },
}

impl FlowAction {
    pub fn number(&self) -> u8 {
        match self {
            FlowAction::TrackerRegistered => 1,
            FlowAction::MonitorsInstantiated { .. } => 2,
            FlowAction::ResourceCreated { .. } => 3,
            FlowAction::RegistryBroadcast { .. } => 4,
            FlowAction::TrackerNotified { .. } => 5,
            FlowAction::MonitorListQuery { .. } => 6,
            FlowAction::MonitorSelected { .. } => 7,
            FlowAction::MonitorSubscribed { .. } => 8,
            FlowAction::ComponentAccess { .. } => 9,
            FlowAction::MonitorNotified { .. } => 10,
        }
    }

    pub fn render(&self, component: &ComponentId) -> String {
        let detail = match self {
            FlowAction::TrackerRegistered => "tracker-registered\tregistry".to_owned(),
            FlowAction::MonitorsInstantiated { monitors } => {
                format!("monitors-instantiated\t{}", monitors.join(","))
            }
            FlowAction::ResourceCreated { handle, descriptor } => {
                format!("resource-created\t{handle}@{descriptor}")
            }
            FlowAction::RegistryBroadcast { handle } => format!("registry-broadcast\t{handle}"),
            FlowAction::TrackerNotified { handle } => format!("tracker-notified\t{handle}"),
            FlowAction::MonitorListQuery { monitors } => format!("monitor-list-query\t{monitors}"),
            FlowAction::MonitorSelected { handle, monitor } => {
                format!("monitor-selected\t{handle}->{monitor}")
            }
            FlowAction::MonitorSubscribed { handle, monitor } => {
                format!("monitor-subscribed\t{monitor}@{handle}")
            }
            FlowAction::ComponentAccess {
                handle,
                access,
                amount,
            } => format!("component-access\t{handle}:{access}:{amount}"),
            FlowAction::MonitorNotified {
                handle,
                monitor,
                access,
                amount,
            } => format!("monitor-notified\t{monitor}<-{handle}:{access}:{amount}"),
        };
        format!("{}\t{}\t{}", self.number(), component, detail)
    }
}

/// The event sink of a container: tracker, monitors, default-deny
/// interceptor and sanction engine.
struct Supervisor {
    component: ComponentId,
    app: ApplicationMonitor,
    engine: SanctionEngine,
    gate: Option<Box<dyn CapacityGate>>,
    descriptors: Vec<Option<ResourceDescriptor>>,
    routes: Vec<Option<ListenerId>>,
    violations: Vec<ViolationEvent>,
    notices: Vec<Notice>,
    pending_locks: Vec<ResourcePattern>,
    capacity_denials: usize,
    flow: Option<Vec<FlowAction>>,
    step: u64,
}

impl Supervisor {
    fn log(&mut self, action: impl FnOnce() -> FlowAction) {
        if let Some(flow) = self.flow.as_mut() {
            flow.push(action());
        }
    }

    fn monitor_name(&self, listener: ListenerId) -> String {
        self.app
            .monitor(listener)
            .map(|m| m.to_string())
            .unwrap_or_else(|| "DefaultDeny".to_owned())
    }

    fn set_route(&mut self, handle: HandleId, route: Option<ListenerId>) {
        let idx = handle.0 as usize;
        if self.routes.len() <= idx {
            self.routes.resize(idx + 1, None);
        }
        self.routes[idx] = route;
    }

    fn violate(
        &mut self,
        profile_id: Option<ProfileId>,
        descriptor: ResourceDescriptor,
        access: AccessKind,
        amount: u64,
        kind: ViolationKind,
    ) -> AccessVerdict {
        let v = ViolationEvent {
            component: self.component.clone(),
            profile_id,
            descriptor,
            access,
            amount,
            kind,
            step: self.step,
        };
        let decision = self.engine.on_violation(&v);
        self.violations.push(v);
        if let Some(w) = decision.warning {
            self.notices.push(Notice::SanctionWarning(w));
        }
        if let Some(p) = decision.lock_pattern {
            self.pending_locks.push(p);
        }
        decision.verdict
    }

    fn on_created(
        &mut self,
        handle: HandleId,
        descriptor: &ResourceDescriptor,
        mode: AccessPermission,
        table: &mut ListenerTable,
    ) -> AccessVerdict {
        self.log(|| FlowAction::TrackerNotified { handle });
        let idx = handle.0 as usize;
        if self.descriptors.len() <= idx {
            self.descriptors.resize(idx + 1, None);
        }
        self.descriptors[idx] = Some(descriptor.clone());

        if let Some(v) = self.engine.creation_block(descriptor) {
            return v;
        }
        let count = self.app.monitors().count();
        self.log(|| FlowAction::MonitorListQuery { monitors: count });
        let first_access = first_access(mode);
        let Some(listener) = self.app.select(descriptor) else {
            return self.violate(None, descriptor.clone(), first_access, 0, ViolationKind::Permission);
        };
        let monitor = self.app.monitor(listener).expect("selected monitor exists");
        if !monitor.profile.permission.covers(&mode) {
            let pid = monitor.profile.id.clone();
            return self.violate(Some(pid), descriptor.clone(), first_access, 0, ViolationKind::Permission);
        }
        let name = monitor.to_string();
        self.log(|| FlowAction::MonitorSelected {
            handle,
            monitor: name.clone(),
        });
        table.subscribe(handle, listener);
        if let Some(m) = self.app.monitor_mut(listener) {
            m.handles.insert(handle);
        }
        self.set_route(handle, Some(listener));
        self.log(|| FlowAction::MonitorSubscribed { handle, monitor: name });
        AccessVerdict::Allow
    }

    fn on_requested(&mut self, listener: ListenerId, handle: HandleId, access: AccessKind, amount: u64) -> AccessVerdict {
        if self.flow.is_some() {
            let monitor = self.monitor_name(listener);
            self.log(|| FlowAction::MonitorNotified {
                handle,
                monitor,
                access,
                amount,
            });
        }
        let Some(Some(descriptor)) = self.descriptors.get(handle.0 as usize) else {
            return AccessVerdict::Reject(DenyReason::Unmatched);
        };
        if let Some(v) = self.engine.access_block(descriptor) {
            return v;
        }
        let Some(monitor) = self.app.monitor(listener) else {
            let d = descriptor.clone();
            return self.violate(None, d, access, amount, ViolationKind::Permission);
        };
        if let Err(kind) = monitor.check(access, amount) {
            let pid = monitor.profile.id.clone();
            let d = descriptor.clone();
            return self.violate(Some(pid), d, access, amount, kind);
        }
        if let (Some(entry), Some(gate)) = (monitor.gate_entry, self.gate.as_mut()) {
            if !gate.admit(entry, access, amount) {
                self.notices.push(Notice::CapacityDenied {
                    profile_id: monitor.profile.id.clone(),
                    descriptor: descriptor.clone(),
                    access,
                    amount,
                    step: self.step,
                });
                self.capacity_denials += 1;
                return AccessVerdict::Reject(DenyReason::Capacity);
            }
        }
        self.engine.on_conformant_access(descriptor, access);
        AccessVerdict::Allow
    }

    fn on_completed(&mut self, listener: ListenerId, access: AccessKind, amount: u64) {
        if let Some(m) = self.app.monitor_mut(listener) {
            m.charge(access, amount);
            if let (Some(entry), Some(gate)) = (m.gate_entry, self.gate.as_mut()) {
                gate.charge(entry, access, amount);
            }
        }
    }

    fn on_destroyed(&mut self, listener: ListenerId, handle: HandleId) {
        if let Some(m) = self.app.monitor_mut(listener) {
            m.handles.remove(&handle);
        }
        if listener == TRACKER {
            self.set_route(handle, None);
        }
    }
}

fn first_access(mode: AccessPermission) -> AccessKind {
    match mode {
        AccessPermission::File { write: true, .. } => AccessKind::Write,
        AccessPermission::File { .. } => AccessKind::Read,
        AccessPermission::Socket { accept: true, connect: false } => AccessKind::Accept,
        AccessPermission::Socket { .. } => AccessKind::Connect,
        AccessPermission::Memory { .. } => AccessKind::Allocate,
    }
}

impl EventSink for Supervisor {
    fn deliver(&mut self, listener: ListenerId, event: &ResourceEvent<'_>, table: &mut ListenerTable) -> AccessVerdict {
        match event.kind {
            EventKind::Created {
                handle,
                descriptor,
                mode,
            } if listener == TRACKER => self.on_created(handle, descriptor, mode, table),
            EventKind::AccessRequested { handle, access, amount } if listener != TRACKER => {
                self.on_requested(listener, handle, access, amount)
            }
            EventKind::AccessCompleted { access, amount, .. } => {
                self.on_completed(listener, access, amount);
                AccessVerdict::Allow
            }
            EventKind::Destroyed { handle } => {
                self.on_destroyed(listener, handle);
                AccessVerdict::Allow
            }
            _ => AccessVerdict::Allow,
        }
    }

    fn flow(&mut self, note: FlowNote<'_>) {
        match note {
            FlowNote::Created { handle, descriptor } => self.log(|| FlowAction::ResourceCreated {
                handle,
                descriptor: descriptor.to_string(),
            }),
            FlowNote::RegistryBroadcast { handle } => self.log(|| FlowAction::RegistryBroadcast { handle }),
            FlowNote::Access { handle, access, amount } => self.log(|| FlowAction::ComponentAccess {
                handle,
                access,
                amount,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("container already configured")]
    AlreadyConfigured,
    #[error("container not configured")]
    NotConfigured,
    #[error("container stopped")]
    Stopped,
    #[error(transparent)]
    Resource(#[from] ResourceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProfileUsage {
    pub profile_id: ProfileId,
    pub monitor: String,
    pub consumed: Quota,
    pub quota: Quota,
    pub supervised_handles: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UsageReport {
    pub component: ComponentId,
    pub contract_id: Option<ContractId>,
    pub profiles: Vec<ProfileUsage>,
    pub violations: usize,
    pub warnings: usize,
    pub capacity_denials: usize,
    pub sanctions_applied: usize,
}

/// Hosts one component and supervises its resources.
pub struct Container {
    env: ResourceEnv,
    sup: Supervisor,
    configured: bool,
    stopped: bool,
}

impl Container {
    pub fn new(component: ComponentId) -> Self {
        Self {
            env: ResourceEnv::new(component.clone()),
            sup: Supervisor {
                engine: SanctionEngine::new(component.clone(), Vec::new()),
                component,
                app: ApplicationMonitor::default(),
                gate: None,
                descriptors: Vec::new(),
                routes: Vec::new(),
                violations: Vec::new(),
                notices: Vec::new(),
                pending_locks: Vec::new(),
                capacity_denials: 0,
                flow: None,
                step: 0,
            },
            configured: false,
            stopped: false,
        }
    }

    pub fn component(&self) -> &ComponentId {
        &self.sup.component
    }

    pub fn env(&self) -> &ResourceEnv {
        &self.env
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.env.set_tracing(on);
    }

    /// Places a file in the namespace before the component starts.
    pub fn seed_file(&mut self, path: VPath, size: u64) {
        self.env.seed_file(path, size);
    }

    pub fn set_flow_logging(&mut self, on: bool) {
        self.sup.flow = if on { Some(Vec::new()) } else { None };
    }

    pub fn set_step(&mut self, step: u64) {
        self.sup.step = step;
    }

    pub fn is_configured(&self) -> bool {
        self.configured
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn contract(&self) -> Option<&Contract> {
        self.sup.app.contract()
    }

    pub fn application_monitor(&self) -> &ApplicationMonitor {
        &self.sup.app
    }

    pub fn engine(&self) -> &SanctionEngine {
        &self.sup.engine
    }

    pub fn violations(&self) -> &[ViolationEvent] {
        &self.sup.violations
    }

    pub fn sanction_log(&self) -> &[SanctionRecord] {
        self.sup.engine.log()
    }

    pub fn flow(&self) -> &[FlowAction] {
        self.sup.flow.as_deref().unwrap_or(&[])
    }

    pub fn drain_trace(&mut self) -> Vec<TraceRecord> {
        self.env.drain_trace()
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.sup.notices)
    }

    /// Wires tracker and monitors for `contract` and arms the sanctions.
    pub fn configure(
        &mut self,
        contract: &Contract,
        sanctions: Vec<Sanction>,
        gate: Option<Box<dyn CapacityGate>>,
    ) -> Result<(), ContainerError> {
        if self.configured {
            return Err(ContainerError::AlreadyConfigured);
        }
        self.configured = true;
        self.env.register_registry_listener(TRACKER);
        self.sup.log(|| FlowAction::TrackerRegistered);
        self.sup.gate = gate;
        self.sup.engine = SanctionEngine::new(self.sup.component.clone(), sanctions);
        self.sup.app.install(contract, self.sup.gate.as_deref());
        let monitors: Vec<String> = self.sup.app.monitors().map(|m| m.to_string()).collect();
        self.sup.log(|| FlowAction::MonitorsInstantiated { monitors });
        self.env.record_binding(contract);
        Ok(())
    }

    /// Installs an amended contract and re-routes every live resource.
    pub fn reconfigure(&mut self, contract: &Contract) -> Result<(), ContainerError> {
        self.ensure_running()?;
        let created = self.sup.app.install(contract, self.sup.gate.as_deref());
        if !created.is_empty() {
            let monitors: Vec<String> = created.iter().map(|l| self.sup.monitor_name(*l)).collect();
            self.sup.log(|| FlowAction::MonitorsInstantiated { monitors });
        }
        let live: Vec<(HandleId, ResourceDescriptor)> =
            self.env.live_handles().map(|(h, d)| (h, d.clone())).collect();
        for (h, d) in live {
            let route = self.sup.app.select(&d).unwrap_or(DEFAULT_DENY);
            let table = self.env.listeners_mut();
            table.clear(h);
            table.subscribe(h, route);
            for m in self.sup.app.slots.iter_mut().flatten() {
                if m.listener == route {
                    m.handles.insert(h);
                } else {
                    m.handles.remove(&h);
                }
            }
            self.sup.set_route(h, Some(route));
        }
        self.env.record_binding(contract);
        Ok(())
    }

    /// Closes every live resource and stops enforcing the contract.
    pub fn stop(&mut self) -> Result<(), ContainerError> {
        self.ensure_running()?;
        let live: Vec<HandleId> = self.env.live_handles().map(|(h, _)| h).collect();
        for h in live {
            self.env.close(h, &mut self.sup)?;
        }
        if let Some(id) = self.sup.app.contract().map(|c| c.id.clone()) {
            self.env.record_unbinding(&id);
        }
        self.stopped = true;
        Ok(())
    }

    pub fn open_file(&mut self, path: &str, mode: AccessPermission) -> Result<HandleId, ContainerError> {
        self.ensure_running()?;
        let out = self.env.open_file(path, mode, &mut self.sup);
        self.apply_locks();
        Ok(out?)
    }

    pub fn open_socket(&mut self, host: &str, port: u16) -> Result<HandleId, ContainerError> {
        self.ensure_running()?;
        let out = self.env.open_socket(host, port, &mut self.sup);
        self.apply_locks();
        Ok(out?)
    }

    pub fn access(&mut self, handle: HandleId, access: AccessKind, amount: u64) -> Result<AccessVerdict, ContainerError> {
        self.ensure_running()?;
        let out = self.env.access(handle, access, amount, &mut self.sup);
        self.apply_locks();
        Ok(out?)
    }

    pub fn allocate(&mut self, amount: u64) -> Result<AccessVerdict, ContainerError> {
        self.ensure_running()?;
        let out = self.env.allocate(amount, &mut self.sup);
        self.apply_locks();
        Ok(out?)
    }

    pub fn free(&mut self, amount: u64) -> Result<AccessVerdict, ContainerError> {
        self.ensure_running()?;
        let out = self.env.free(amount, &mut self.sup);
        self.apply_locks();
        Ok(out?)
    }

    pub fn close(&mut self, handle: HandleId) -> Result<(), ContainerError> {
        self.ensure_running()?;
        Ok(self.env.close(handle, &mut self.sup)?)
    }

    pub fn handle_state(&self, handle: HandleId) -> Option<HandleState> {
        self.env.state(handle)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.env.snapshot()
    }

    pub fn usage_report(&self) -> UsageReport {
        let applied = (0..self.sup.engine.sanctions().len())
            .filter(|&i| self.sup.engine.is_applied(i))
            .count();
        UsageReport {
            component: self.sup.component.clone(),
            contract_id: self.sup.app.contract().map(|c| c.id.clone()),
            profiles: self
                .sup
                .app
                .monitors()
                .map(|m| ProfileUsage {
                    profile_id: m.profile.id.clone(),
                    monitor: m.to_string(),
                    consumed: m.usage,
                    quota: m.profile.quota,
                    supervised_handles: m.handles.len(),
                })
                .collect(),
            violations: self.sup.violations.len(),
            warnings: self
                .sup
                .engine
                .log()
                .iter()
                .filter(|r| matches!(r, SanctionRecord::Warned { .. }))
                .count(),
            capacity_denials: self.sup.capacity_denials,
            sanctions_applied: applied,
        }
    }

    fn ensure_running(&self) -> Result<(), ContainerError> {
        if !self.configured {
            Err(ContainerError::NotConfigured)
        } else if self.stopped {
            Err(ContainerError::Stopped)
        } else {
            Ok(())
        }
    }

    fn apply_locks(&mut self) {
        if self.sup.pending_locks.is_empty() {
            return;
        }
        let patterns = std::mem::take(&mut self.sup.pending_locks);
        let targets: Vec<HandleId> = self
            .env
            .live_handles()
            .filter(|(_, d)| patterns.iter().any(|p| matches(p, d)))
            .map(|(h, _)| h)
            .collect();
        for h in targets {
            self.env.lock(h);
        }
    }
}
