//! The host platform: runs scenarios end to end and checks contracts or
//! traces offline.
//!
//! A run has three phases. Every component first submits its contracts in
//! declaration order, then every component subscribes, and finally the
//! component scripts execute interleaved one step at a time. The default
//! schedule is round-robin in declaration order; a seed selects a
//! reproducible random interleaving instead. Components whose subscription
//! fails never run their script.

pub mod gen;
pub mod scenario;
pub mod trace;
pub mod verify;

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::broker::{Broker, CapacityConfig, PlatformCapacity, SharedBroker, SubmissionReport};
use crate::container::{Container, ContainerError, UsageReport, ViolationEvent};
use crate::contracts::{Amendment, ComponentId, Contract, ContractId, Quota, ResourcePattern};
use crate::negotiation::{
    ContractManager, ContractState, HistoryEntry, Journal, SubscribeResult,
};
use crate::resources::{AccessVerdict, HandleId, ResourceError};
use crate::sanctions::{deliver_warning, ComponentInbox, Notice, SanctionRecord, WarningReaction};

pub use scenario::{parse_json, parse_scenario, ComponentSpec, Scenario, ScenarioError, ScriptStep};
pub use trace::{parse_trace, render_trace, TraceLine, TRACE_HEADER};
pub use verify::{verify_trace, Discrepancy};

/// Process exit statuses of the command-line host.
pub mod exit {
    pub const OK: i32 = 0;
    pub const REJECTED: i32 = 1;
    pub const SCHEMA: i32 = 2;
    pub const SANCTIONED: i32 = 3;
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Random interleaving seed; `None` selects round-robin.
    pub seed: Option<u64>,
    /// Record the supervision flow of every container.
    pub flow: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub component: ComponentId,
    pub action: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContractStatus {
    pub id: ContractId,
    pub state: Option<ContractState>,
    pub report: Option<SubmissionReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComponentReport {
    pub id: ComponentId,
    pub contracts: Vec<ContractStatus>,
    pub contract_in_force: Option<Contract>,
    pub usage: Option<UsageReport>,
    pub violations: Vec<ViolationEvent>,
    pub sanctions: Vec<SanctionRecord>,
    pub notices: Vec<Notice>,
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapacityLedger {
    pub pattern: ResourcePattern,
    pub initial: Quota,
    pub remaining: Quota,
    pub best_effort_load: Quota,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub schedule: String,
    pub negotiation: Vec<HistoryEntry>,
    pub components: Vec<ComponentReport>,
    pub steps: Vec<StepRecord>,
    pub capacity: Vec<CapacityLedger>,
    /// Where the trace was written, when it was.
    pub trace: Option<String>,
    pub permanent_sanction: bool,
}

impl RunReport {
    pub fn component(&self, id: &str) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.id.as_str() == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<TraceLine>,
    pub flow: Vec<String>,
}

impl RunOutput {
    pub fn trace_text(&self) -> String {
        render_trace(&self.trace)
    }

    pub fn flow_text(&self) -> String {
        let mut s = String::new();
        for l in &self.flow {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn exit_code(&self) -> i32 {
        if self.report.permanent_sanction {
            exit::SANCTIONED
        } else {
            exit::OK
        }
    }
}

struct Runtime<'s> {
    spec: &'s ComponentSpec,
    manager: ContractManager,
    container: Container,
    inbox: ComponentInbox,
    reactions: VecDeque<WarningReaction>,
    handles: HashMap<String, HandleId>,
    pc: usize,
    running: bool,
}

impl Runtime<'_> {
    fn has_work(&self) -> bool {
        self.running && (!self.reactions.is_empty() || self.pc < self.spec.script.len())
    }

    fn drain_trace(&mut self, out: &mut Vec<TraceLine>) {
        let records = self.container.drain_trace();
        let env = self.container.env();
        let comp = self.container.component();
        out.extend(records.into_iter().map(|r| {
            TraceLine::from_record(comp, r, |h| {
                env.descriptor(h).cloned().expect("traced handles exist")
            })
        }));
    }

    fn amend(&mut self, amendment: &Amendment) -> String {
        match self.manager.amend(amendment) {
            Ok(r) => match r.amended {
                Some(c) => match self.container.reconfigure(&c) {
                    Ok(()) => "amendment accepted".to_owned(),
                    Err(e) => format!("error: {e}"),
                },
                None => format!("amendment rejected: {}", conflicts(&r.report)),
            },
            Err(e) => format!("error: {e}"),
        }
    }

    fn terminate(&mut self) -> String {
        self.running = false;
        let released = self.manager.terminate();
        let stopped = self.container.stop();
        match (released, stopped) {
            (Ok(id), Ok(())) => format!("terminated {id}"),
            (Err(e), _) => format!("error: {e}"),
            (_, Err(e)) => format!("error: {e}"),
        }
    }

    fn handle(&self, name: &str) -> Result<HandleId, String> {
        self.handles
            .get(name)
            .copied()
            .ok_or_else(|| format!("error: handle {name:?} was never opened"))
    }

    fn exec(&mut self, step: &ScriptStep) -> String {
        match step {
            ScriptStep::OpenFile { path, mode, name } => {
                let r = self.container.open_file(path, mode.permission());
                self.bind(name, r)
            }
            ScriptStep::OpenSocket { host, port, name } => {
                let r = self.container.open_socket(host, *port);
                self.bind(name, r)
            }
            ScriptStep::Read { handle, .. }
            | ScriptStep::Write { handle, .. }
            | ScriptStep::Send { handle, .. }
            | ScriptStep::Receive { handle, .. } => {
                let (access, amount) = step.handle_access().expect("handle access step");
                match self.handle(handle) {
                    Ok(h) => verdict(self.container.access(h, access, amount)),
                    Err(e) => e,
                }
            }
            ScriptStep::Close { handle } => match self.handle(handle) {
                Ok(h) => match self.container.close(h) {
                    Ok(()) => "closed".to_owned(),
                    Err(e) => format!("error: {e}"),
                },
                Err(e) => e,
            },
            ScriptStep::Allocate { bytes } => verdict(self.container.allocate(*bytes)),
            ScriptStep::Free { bytes } => verdict(self.container.free(*bytes)),
            ScriptStep::SubmitAmendment { amendment } => self.amend(amendment),
            ScriptStep::Terminate => self.terminate(),
        }
    }

    fn bind(&mut self, name: &str, r: Result<HandleId, ContainerError>) -> String {
        match r {
            Ok(h) => {
                self.handles.insert(name.to_owned(), h);
                "allow".to_owned()
            }
            Err(e) => {
                self.handles.remove(name);
                match e {
                    ContainerError::Resource(ResourceError::Vetoed(v)) => v.to_string(),
                    e => format!("error: {e}"),
                }
            }
        }
    }
}

fn verdict(r: Result<AccessVerdict, ContainerError>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => format!("error: {e}"),
    }
}

fn conflicts(report: &SubmissionReport) -> String {
    report
        .conflicting_clauses
        .iter()
        .map(|c| c.profile_id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn describe(step: &ScriptStep) -> String {
    match step {
        ScriptStep::OpenFile { path, mode, name } => format!("open_file {name}={path} {mode}"),
        ScriptStep::OpenSocket { host, port, name } => format!("open_socket {name}={host}:{port}"),
        ScriptStep::Close { handle } => format!("close {handle}"),
        ScriptStep::Allocate { bytes } | ScriptStep::Free { bytes } => format!("{} {bytes}", step.name()),
        ScriptStep::SubmitAmendment { amendment } => format!("submit_amendment {}", amendment.contract_id),
        ScriptStep::Terminate => "terminate".to_owned(),
        _ => {
            let (_, amount) = step.handle_access().expect("handle access step");
            format!("{} {} {amount}", step.name(), step.uses().unwrap_or("?"))
        }
    }
}

fn shared_broker(capacity: &CapacityConfig) -> SharedBroker {
    let capacity = PlatformCapacity::from_config(capacity).expect("validated scenario capacity");
    SharedBroker::new(Broker::new(capacity))
}

/// Runs a validated scenario. The same scenario and options always produce
/// the same output.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> RunOutput {
    let broker = shared_broker(&scenario.capacity);
    let journal = Journal::new();
    let mut trace = Vec::new();
    let mut steps = Vec::new();

    let mut rts: Vec<Runtime<'_>> = scenario
        .components
        .iter()
        .map(|spec| {
            let mut container = Container::new(spec.id.clone());
            container.set_tracing(true);
            container.set_flow_logging(opts.flow);
            for f in &spec.files {
                container.seed_file(f.path.clone(), f.size);
            }
            Runtime {
                spec,
                manager: ContractManager::new(spec.id.clone(), broker.clone(), journal.clone()),
                container,
                inbox: ComponentInbox::new(spec.warning_handlers.clone()),
                reactions: VecDeque::new(),
                handles: HashMap::new(),
                pc: 0,
                running: false,
            }
        })
        .collect();

    for rt in &mut rts {
        for c in &rt.spec.contracts {
            if let Err(e) = rt.manager.submit(c.clone()) {
                steps.push(StepRecord {
                    step: journal.tick(),
                    component: rt.spec.id.clone(),
                    action: format!("submit {}", c.id),
                    outcome: format!("error: {e}"),
                });
            }
        }
    }

    for rt in &mut rts {
        let Some(id) = &rt.spec.subscribe else { continue };
        let outcome = match rt.manager.subscribe(id) {
            Ok(SubscribeResult::Subscribed(_)) => {
                let contract = rt.manager.contract(id).expect("subscribed contract").clone();
                let gate = Box::new(broker.clone());
                match rt.container.configure(&contract, scenario.sanctions.clone(), Some(gate)) {
                    Ok(()) => {
                        rt.running = true;
                        rt.drain_trace(&mut trace);
                        None
                    }
                    Err(e) => Some(format!("error: {e}")),
                }
            }
            Ok(SubscribeResult::Rejected(r)) => Some(format!("subscription rejected: {}", conflicts(&r))),
            Err(e) => Some(format!("error: {e}")),
        };
        if let Some(outcome) = outcome {
            steps.push(StepRecord {
                step: journal.tick(),
                component: rt.spec.id.clone(),
                action: format!("subscribe {id}"),
                outcome,
            });
        }
    }

    let mut rng = opts.seed.map(ChaCha8Rng::seed_from_u64);
    loop {
        let ready: Vec<usize> = (0..rts.len()).filter(|&i| rts[i].has_work()).collect();
        if ready.is_empty() {
            break;
        }
        let batch = match rng.as_mut() {
            Some(rng) => vec![ready[rng.gen_range(0..ready.len())]],
            None => ready,
        };
        for i in batch {
            let rt = &mut rts[i];
            if !rt.has_work() {
                continue;
            }
            let step = journal.tick();
            rt.container.set_step(step);
            let (action, outcome) = match rt.reactions.pop_front() {
                Some(WarningReaction::Amend { amendment }) => (
                    format!("on_warning amend {}", amendment.contract_id),
                    rt.amend(&amendment),
                ),
                Some(WarningReaction::Terminate) => ("on_warning terminate".to_owned(), rt.terminate()),
                None => {
                    let s = &rt.spec.script[rt.pc];
                    rt.pc += 1;
                    (describe(s), rt.exec(s))
                }
            };
            rt.drain_trace(&mut trace);
            for notice in rt.container.take_notices() {
                if let Some(reaction) = deliver_warning(&mut rt.inbox, notice) {
                    rt.reactions.push_back(reaction);
                }
            }
            steps.push(StepRecord {
                step,
                component: rt.spec.id.clone(),
                action,
                outcome,
            });
        }
    }

    let halted: Vec<bool> = rts.iter().map(|rt| rt.container.is_stopped()).collect();
    for rt in &mut rts {
        if rt.container.is_configured() && !rt.container.is_stopped() {
            let outcome = match rt.container.stop() {
                Ok(()) => "stopped".to_owned(),
                Err(e) => format!("error: {e}"),
            };
            rt.drain_trace(&mut trace);
            steps.push(StepRecord {
                step: journal.tick(),
                component: rt.spec.id.clone(),
                action: "shutdown".to_owned(),
                outcome,
            });
        }
    }

    let flow = rts
        .iter()
        .flat_map(|rt| {
            let comp = rt.container.component();
            rt.container.flow().iter().map(move |a| a.render(comp))
        })
        .collect();

    let components: Vec<ComponentReport> = rts
        .iter()
        .zip(halted)
        .map(|(rt, halted)| ComponentReport {
            id: rt.spec.id.clone(),
            contracts: rt
                .spec
                .contracts
                .iter()
                .map(|c| ContractStatus {
                    id: c.id.clone(),
                    state: rt.manager.state(&c.id),
                    report: rt.manager.report(&c.id).cloned(),
                })
                .collect(),
            contract_in_force: rt.manager.subscribed().map(|(c, _)| c.clone()),
            usage: rt.container.is_configured().then(|| rt.container.usage_report()),
            violations: rt.container.violations().to_vec(),
            sanctions: rt.container.sanction_log().to_vec(),
            notices: rt.inbox.notices.clone(),
            halted,
        })
        .collect();

    let permanent_sanction = rts.iter().any(|rt| rt.container.engine().any_permanent());
    let b = broker.lock();
    let capacity = b
        .capacity()
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| CapacityLedger {
            pattern: e.pattern.clone(),
            initial: e.initial_quota,
            remaining: e.remaining_quota,
            best_effort_load: b
                .best_effort_load(crate::broker::EntryId(i))
                .unwrap_or_else(|| Quota::zero(e.pattern.kind())),
        })
        .collect();
    drop(b);

    RunOutput {
        report: RunReport {
            schema_version: scenario::SCHEMA_VERSION,
            schedule: match opts.seed {
                Some(s) => format!("seeded:{s}"),
                None => "round_robin".to_owned(),
            },
            negotiation: journal.history(),
            components,
            steps,
            capacity,
            trace: None,
            permanent_sanction,
        },
        trace,
        flow,
    }
}

/// Outcome of an offline admission check.
#[derive(Debug)]
pub enum CheckOutcome {
    Report(SubmissionReport),
    Invalid(String),
}

impl CheckOutcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            CheckOutcome::Report(r) if r.accepted => exit::OK,
            CheckOutcome::Report(_) => exit::REJECTED,
            CheckOutcome::Invalid(_) => exit::SCHEMA,
        }
    }
}

/// Evaluates `contract` against a capacity configuration, both as JSON.
pub fn check(contract_json: &str, capacity_json: &str) -> CheckOutcome {
    let contract: Contract = match parse_json(contract_json) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::Invalid(format!("contract: {e}")),
    };
    let config: CapacityConfig = match parse_json(capacity_json) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::Invalid(format!("capacity: {e}")),
    };
    let capacity = match PlatformCapacity::from_config(&config) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::Invalid(format!("capacity: {e}")),
    };
    match Broker::new(capacity).evaluate(&contract) {
        Ok(r) => CheckOutcome::Report(r),
        Err(e) => CheckOutcome::Invalid(format!("contract: {e}")),
    }
}
