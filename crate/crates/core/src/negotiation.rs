//! The contract negotiation protocol between a component and the broker.
//!
//! A component submits contracts, subscribes to one accepted contract,
//! may amend it while subscribed and eventually terminates it. Every
//! protocol action is stamped with a logical step shared by all components
//! of a platform, so the resulting history is a single total order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::broker::{
    BrokerError, Reservation, ReservationDelta, ReservationId, SharedBroker, SubmissionReport, SubscribeOutcome,
};
use crate::contracts::{Amendment, ComponentId, Contract, ContractId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractState {
    Submitted,
    Accepted,
    Rejected,
    Subscribed,
    RejectedAtSubscription,
    Terminated,
}

impl ContractState {
    pub fn can_become(self, next: ContractState) -> bool {
        use ContractState::*;
        matches!(
            (self, next),
            (Submitted, Accepted)
                | (Submitted, Rejected)
                | (Accepted, Subscribed)
                | (Accepted, RejectedAtSubscription)
                | (Subscribed, Subscribed)
                | (Subscribed, Terminated)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum NegotiationAction {
    Submit { report: SubmissionReport },
    Subscribe { reservation: Option<ReservationId>, report: Option<SubmissionReport> },
    Amend { report: SubmissionReport, delta: Option<ReservationDelta> },
    Terminate { reservation: ReservationId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub component: ComponentId,
    pub contract_id: ContractId,
    #[serde(flatten)]
    pub action: NegotiationAction,
    pub state: ContractState,
}

#[derive(Debug, Default)]
struct JournalInner {
    next_step: u64,
    entries: Vec<HistoryEntry>,
}

/// The step clock and history shared by every manager of a platform.
#[derive(Debug, Clone, Default)]
pub struct Journal(Arc<Mutex<JournalInner>>);

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current value of the logical clock.
    pub fn now(&self) -> u64 {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).next_step
    }

    /// Advances the clock and returns the step that was current.
    pub fn tick(&self) -> u64 {
        let mut j = self.0.lock().unwrap_or_else(|e| e.into_inner());
        let step = j.next_step;
        j.next_step += 1;
        step
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).entries.clone()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.history()).expect("history serializes")
    }

    fn record(&self, component: &ComponentId, contract_id: &ContractId, action: NegotiationAction, state: ContractState) -> u64 {
        let mut j = self.0.lock().unwrap_or_else(|e| e.into_inner());
        let step = j.next_step;
        j.next_step += 1;
        j.entries.push(HistoryEntry {
            step,
            component: component.clone(),
            contract_id: contract_id.clone(),
            action,
            state,
        });
        step
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NegotiationError {
    #[error("contract {0} was already submitted")]
    DuplicateContractId(ContractId),
    #[error("contract {0} was never submitted")]
    UnknownContract(ContractId),
    #[error("contract {id} is {state:?}, not accepted")]
    NotAccepted { id: ContractId, state: ContractState },
    #[error("component already subscribed to {0}")]
    AlreadySubscribedComponent(ContractId),
    #[error("no subscribed contract")]
    NoSubscribedContract,
    #[error("amendment targets {target}, subscribed contract is {subscribed}")]
    AmendmentTarget { target: ContractId, subscribed: ContractId },
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

#[derive(Debug, Clone)]
struct Record {
    contract: Contract,
    state: ContractState,
    report: Option<SubmissionReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubscribeResult {
    Subscribed(Reservation),
    Rejected(SubmissionReport),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmendResult {
    pub report: SubmissionReport,
    /// The contract now in force, present iff the amendment was accepted.
    pub amended: Option<Contract>,
}

/// Negotiates contracts on behalf of one component.
#[derive(Debug, Clone)]
pub struct ContractManager {
    component: ComponentId,
    broker: SharedBroker,
    journal: Journal,
    records: BTreeMap<ContractId, Record>,
    subscribed: Option<(ContractId, ReservationId)>,
}

impl ContractManager {
    pub fn new(component: ComponentId, broker: SharedBroker, journal: Journal) -> Self {
        Self {
            component,
            broker,
            journal,
            records: BTreeMap::new(),
            subscribed: None,
        }
    }

    pub fn component(&self) -> &ComponentId {
        &self.component
    }

    pub fn state(&self, id: &ContractId) -> Option<ContractState> {
        self.records.get(id).map(|r| r.state)
    }

    pub fn report(&self, id: &ContractId) -> Option<&SubmissionReport> {
        self.records.get(id).and_then(|r| r.report.as_ref())
    }

    pub fn contract(&self, id: &ContractId) -> Option<&Contract> {
        self.records.get(id).map(|r| &r.contract)
    }

    /// The contract in force and its reservation.
    pub fn subscribed(&self) -> Option<(&Contract, ReservationId)> {
        let (id, res) = self.subscribed.as_ref()?;
        Some((&self.records[id].contract, *res))
    }

    pub fn submit(&mut self, contract: Contract) -> Result<SubmissionReport, NegotiationError> {
        if self.records.contains_key(&contract.id) {
            return Err(NegotiationError::DuplicateContractId(contract.id));
        }
        let report = self.broker.lock().evaluate(&contract)?;
        let state = if report.accepted {
            ContractState::Accepted
        } else {
            ContractState::Rejected
        };
        self.journal.record(
            &self.component,
            &contract.id,
            NegotiationAction::Submit { report: report.clone() },
            state,
        );
        self.records.insert(
            contract.id.clone(),
            Record {
                contract,
                state,
                report: Some(report.clone()),
            },
        );
        Ok(report)
    }

    /// Subscribes to an accepted contract. Capacity is re-checked, since
    /// other components may have reserved it in the meantime.
    pub fn subscribe(&mut self, id: &ContractId) -> Result<SubscribeResult, NegotiationError> {
        if let Some((current, _)) = &self.subscribed {
            return Err(NegotiationError::AlreadySubscribedComponent(current.clone()));
        }
        let rec = self
            .records
            .get(id)
            .ok_or_else(|| NegotiationError::UnknownContract(id.clone()))?;
        if rec.state != ContractState::Accepted {
            return Err(NegotiationError::NotAccepted {
                id: id.clone(),
                state: rec.state,
            });
        }
        let outcome = self.broker.lock().subscribe(&self.component, &rec.contract)?;
        let rec = self.records.get_mut(id).expect("looked up above");
        match outcome {
            SubscribeOutcome::Reserved(r) => {
                rec.state = ContractState::Subscribed;
                self.subscribed = Some((id.clone(), r.id));
                self.journal.record(
                    &self.component,
                    id,
                    NegotiationAction::Subscribe {
                        reservation: Some(r.id),
                        report: None,
                    },
                    rec.state,
                );
                Ok(SubscribeResult::Subscribed(r))
            }
            SubscribeOutcome::Rejected(report) => {
                rec.state = ContractState::RejectedAtSubscription;
                rec.report = Some(report.clone());
                self.journal.record(
                    &self.component,
                    id,
                    NegotiationAction::Subscribe {
                        reservation: None,
                        report: Some(report.clone()),
                    },
                    rec.state,
                );
                Ok(SubscribeResult::Rejected(report))
            }
        }
    }

    /// Submits an amendment of the subscribed contract. On acceptance the
    /// amended contract replaces the current one under the same id.
    pub fn amend(&mut self, amendment: &Amendment) -> Result<AmendResult, NegotiationError> {
        let (id, res) = self.subscribed.clone().ok_or(NegotiationError::NoSubscribedContract)?;
        if amendment.contract_id != id {
            return Err(NegotiationError::AmendmentTarget {
                target: amendment.contract_id.clone(),
                subscribed: id,
            });
        }
        let rec = self.records.get_mut(&id).expect("subscribed contract is recorded");
        let outcome = self.broker.lock().evaluate_amendment(&rec.contract, res, amendment)?;
        if let Some(amended) = &outcome.amended {
            rec.contract = amended.clone();
        }
        self.journal.record(
            &self.component,
            &id,
            NegotiationAction::Amend {
                report: outcome.report.clone(),
                delta: outcome.delta,
            },
            rec.state,
        );
        Ok(AmendResult {
            report: outcome.report,
            amended: outcome.amended,
        })
    }

    /// Ends the subscription and releases its reservation.
    pub fn terminate(&mut self) -> Result<ContractId, NegotiationError> {
        let (id, res) = self.subscribed.take().ok_or(NegotiationError::NoSubscribedContract)?;
        if let Err(e) = self.broker.lock().release(res) {
            self.subscribed = Some((id, res));
            return Err(e.into());
        }
        let rec = self.records.get_mut(&id).expect("subscribed contract is recorded");
        rec.state = ContractState::Terminated;
        self.journal
            .record(&self.component, &id, NegotiationAction::Terminate { reservation: res }, rec.state);
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{Broker, CapacityConfig, CapacityEntryConfig, PlatformCapacity};
    use crate::contracts::fixtures::*;
    use crate::contracts::{AccessPermission, Quota, ResourceKind, ResourcePattern, MO};

    fn platform(memory: u64) -> SharedBroker {
        let file = |p: &str| CapacityEntryConfig {
            pattern: ResourcePattern::file(p).unwrap(),
            permission: AccessPermission::all(ResourceKind::File),
            quota: Quota::File {
                read_bytes: 10 * MO,
                write_bytes: 10 * MO,
            },
        };
        let config = CapacityConfig {
            entries: vec![
                file("~"),
                file("/tmp"),
                CapacityEntryConfig {
                    pattern: ResourcePattern::Memory,
                    permission: AccessPermission::all(ResourceKind::Memory),
                    quota: Quota::Memory { bytes: memory },
                },
            ],
        };
        SharedBroker::new(Broker::new(PlatformCapacity::from_config(&config).unwrap()))
    }

    fn manager(broker: &SharedBroker, journal: &Journal) -> ContractManager {
        ContractManager::new(ComponentId::new("jmailer"), broker.clone(), journal.clone())
    }

    #[test]
    fn submit_subscribe_amend_terminate() {
        let broker = platform(2 * MO);
        let journal = Journal::new();
        let mut m = manager(&broker, &journal);
        assert!(m.submit(contract1()).unwrap().accepted);
        assert!(m.submit(contract2()).unwrap().accepted);
        let id2 = ContractId::new("contract2");
        assert!(matches!(m.subscribe(&id2).unwrap(), SubscribeResult::Subscribed(_)));
        assert_eq!(m.state(&id2), Some(ContractState::Subscribed));
        assert_eq!(broker.lock().capacity().remaining()[2], Quota::Memory { bytes: MO });

        let r = m.amend(&a1()).unwrap();
        assert!(r.report.accepted);
        assert_eq!(r.amended.unwrap().profiles.len(), 3);
        assert_eq!(m.subscribed().unwrap().0.profiles.len(), 3);

        assert_eq!(m.terminate().unwrap(), id2);
        assert_eq!(m.state(&id2), Some(ContractState::Terminated));
        assert_eq!(broker.lock().capacity().remaining()[2], Quota::Memory { bytes: 2 * MO });
        assert!(broker.lock().is_conserved());

        let steps: Vec<u64> = journal.history().iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn protocol_errors() {
        let broker = platform(2 * MO);
        let journal = Journal::new();
        let mut m = manager(&broker, &journal);
        m.submit(contract2()).unwrap();
        assert!(matches!(m.submit(contract2()), Err(NegotiationError::DuplicateContractId(_))));
        assert!(matches!(
            m.subscribe(&ContractId::new("nope")),
            Err(NegotiationError::UnknownContract(_))
        ));
        assert!(matches!(m.amend(&a1()), Err(NegotiationError::NoSubscribedContract)));
        assert!(matches!(m.terminate(), Err(NegotiationError::NoSubscribedContract)));
        m.subscribe(&ContractId::new("contract2")).unwrap();
        assert!(matches!(
            m.subscribe(&ContractId::new("contract2")),
            Err(NegotiationError::AlreadySubscribedComponent(_))
        ));
    }

    #[test]
    fn rejected_submission_cannot_be_subscribed() {
        let broker = platform(MO);
        let journal = Journal::new();
        let mut m = manager(&broker, &journal);
        let report = m.submit(contract1()).unwrap();
        assert!(!report.accepted);
        assert_eq!(report.conflicting_clauses[0].profile_id.as_str(), "r4");
        assert!(matches!(
            m.subscribe(&ContractId::new("contract1")),
            Err(NegotiationError::NotAccepted { .. })
        ));
    }

    #[test]
    fn capacity_taken_between_submit_and_subscribe() {
        let broker = platform(MO);
        let journal = Journal::new();
        let mut a = manager(&broker, &journal);
        let mut b = ContractManager::new(ComponentId::new("other"), broker.clone(), journal.clone());
        a.submit(contract2()).unwrap();
        b.submit(contract2()).unwrap();
        let id = ContractId::new("contract2");
        assert!(matches!(a.subscribe(&id).unwrap(), SubscribeResult::Subscribed(_)));
        assert!(matches!(b.subscribe(&id).unwrap(), SubscribeResult::Rejected(_)));
        assert_eq!(b.state(&id), Some(ContractState::RejectedAtSubscription));
        assert!(journal.to_json().contains("rejected_at_subscription"));
    }

    #[test]
    fn rejected_amendment_keeps_contract() {
        let broker = platform(MO);
        let journal = Journal::new();
        let mut m = manager(&broker, &journal);
        m.submit(contract2()).unwrap();
        m.subscribe(&ContractId::new("contract2")).unwrap();
        let grow = Amendment {
            contract_id: ContractId::new("contract2"),
            clauses: vec![crate::contracts::AmendmentClause::Modify {
                target_profile_id: "r3".into(),
                profile: crate::contracts::ResourceUtilisationProfile {
                    id: "r3".into(),
                    ..r4()
                },
            }],
        };
        let r = m.amend(&grow).unwrap();
        assert!(!r.report.accepted);
        assert!(r.amended.is_none());
        assert_eq!(m.subscribed().unwrap().0, &contract2());
        assert!(broker.lock().is_conserved());
    }

    #[test]
    fn transitions() {
        use ContractState::*;
        assert!(Submitted.can_become(Accepted));
        assert!(!Rejected.can_become(Subscribed));
        assert!(!Terminated.can_become(Subscribed));
    }
}
