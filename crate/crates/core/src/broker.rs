//! Resource broker: admission control and reservation against the
//! platform capacity ledger.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::{
    apply_amendment, validate_contract, AccessKind, AccessPermission, Amendment, AvailabilityPolicy,
    ComponentId, Contract, ContractError, ContractId, ProfileId, Quota, ResourcePattern,
    ValidationError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityEntryConfig {
    pub pattern: ResourcePattern,
    pub permission: AccessPermission,
    pub quota: Quota,
}

/// Capacity as written in configuration files.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CapacityConfig {
    pub entries: Vec<CapacityEntryConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapacityEntry {
    pub pattern: ResourcePattern,
    pub permission: AccessPermission,
    pub initial_quota: Quota,
    pub remaining_quota: Quota,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlatformCapacity {
    pub entries: Vec<CapacityEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapacityError {
    #[error("capacity entry {0} mixes resource kinds")]
    KindMismatch(usize),
    #[error("capacity entries {0} and {1} have the same pattern")]
    DuplicatePattern(usize, usize),
}

impl PlatformCapacity {
    pub fn from_config(config: &CapacityConfig) -> Result<Self, CapacityError> {
        for (i, e) in config.entries.iter().enumerate() {
            let k = e.pattern.kind();
            if e.permission.kind() != k || e.quota.kind() != k {
                return Err(CapacityError::KindMismatch(i));
            }
            if let Some(j) = config.entries[..i].iter().position(|o| o.pattern == e.pattern) {
                return Err(CapacityError::DuplicatePattern(j, i));
            }
        }
        Ok(Self {
            entries: config
                .entries
                .iter()
                .map(|e| CapacityEntry {
                    pattern: e.pattern.clone(),
                    permission: e.permission,
                    initial_quota: e.quota,
                    remaining_quota: e.quota,
                })
                .collect(),
        })
    }

    /// The entry a profile pattern is charged to: the most specific entry of
    /// the same kind covering the pattern, ties broken by pattern order.
    pub fn entry_for(&self, pattern: &ResourcePattern) -> Option<EntryId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.pattern.covers(pattern))
            .max_by(|(_, a), (_, b)| {
                a.pattern
                    .specificity()
                    .cmp(&b.pattern.specificity())
                    .then_with(|| b.pattern.cmp(&a.pattern))
            })
            .map(|(i, _)| EntryId(i))
    }

    pub fn remaining(&self) -> Vec<Quota> {
        self.entries.iter().map(|e| e.remaining_quota).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ConflictReason {
    NoMatchingCapacity,
    PermissionDenied,
    QuotaExceeded { available: Quota },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictingClause {
    pub profile_id: ProfileId,
    #[serde(flatten)]
    pub reason: ConflictReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionReport {
    pub contract_id: ContractId,
    pub accepted: bool,
    pub conflicting_clauses: Vec<ConflictingClause>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReservationId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deduction {
    pub entry: EntryId,
    pub amount: Quota,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reservation {
    pub id: ReservationId,
    pub holder: ComponentId,
    pub contract_id: ContractId,
    pub deductions: Vec<Deduction>,
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReservationDelta {
    pub released: Vec<Deduction>,
    pub deducted: Vec<Deduction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubscribeOutcome {
    Reserved(Reservation),
    Rejected(SubmissionReport),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmendmentOutcome {
    pub report: SubmissionReport,
    /// The amended contract, present iff the amendment was accepted.
    pub amended: Option<Contract>,
    pub delta: Option<ReservationDelta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("invalid contract: {0:?}")]
    InvalidContract(Vec<ValidationError>),
    #[error("{holder} already holds a live reservation for {contract_id}")]
    AlreadySubscribed {
        holder: ComponentId,
        contract_id: ContractId,
    },
    #[error("unknown reservation {0:?}")]
    UnknownReservation(ReservationId),
    #[error("reservation {0:?} already released")]
    AlreadyReleased(ReservationId),
    #[error("reservation {reservation:?} does not belong to contract {contract_id}")]
    ReservationMismatch {
        reservation: ReservationId,
        contract_id: ContractId,
    },
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Checks every clause of `contract` against `remaining`. Reservation
/// clauses are deducted as they are accepted so later clauses of the same
/// contract see the net capacity.
fn assess(capacity: &PlatformCapacity, remaining: &[Quota], contract: &Contract) -> (SubmissionReport, Vec<Deduction>) {
    let mut net = remaining.to_vec();
    let mut conflicts = Vec::new();
    let mut deductions = Vec::new();
    for profile in &contract.profiles {
        let Some(entry) = capacity.entry_for(&profile.pattern) else {
            conflicts.push(ConflictingClause {
                profile_id: profile.id.clone(),
                reason: ConflictReason::NoMatchingCapacity,
            });
            continue;
        };
        let e = &capacity.entries[entry.0];
        if !e.permission.covers(&profile.permission) {
            conflicts.push(ConflictingClause {
                profile_id: profile.id.clone(),
                reason: ConflictReason::PermissionDenied,
            });
            continue;
        }
        let available = net[entry.0];
        if !available.covers(&profile.quota) {
            conflicts.push(ConflictingClause {
                profile_id: profile.id.clone(),
                reason: ConflictReason::QuotaExceeded { available },
            });
            continue;
        }
        if profile.policy == AvailabilityPolicy::Reservation {
            net[entry.0] = available
                .checked_sub(&profile.quota)
                .expect("covered above");
            deductions.push(Deduction {
                entry,
                amount: profile.quota,
            });
        }
    }
    let report = SubmissionReport {
        contract_id: contract.id.clone(),
        accepted: conflicts.is_empty(),
        conflicting_clauses: conflicts,
    };
    (report, deductions)
}

fn ensure_valid(contract: &Contract) -> Result<(), BrokerError> {
    let errors = validate_contract(contract);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(BrokerError::InvalidContract(errors))
    }
}

#[derive(Debug, Clone)]
pub struct Broker {
    capacity: PlatformCapacity,
    reservations: BTreeMap<ReservationId, Reservation>,
    next_reservation: u64,
    best_effort_load: Vec<Quota>,
}

impl Broker {
    pub fn new(capacity: PlatformCapacity) -> Self {
        let best_effort_load = capacity
            .entries
            .iter()
            .map(|e| Quota::zero(e.pattern.kind()))
            .collect();
        Self {
            capacity,
            reservations: BTreeMap::new(),
            next_reservation: 1,
            best_effort_load,
        }
    }

    pub fn capacity(&self) -> &PlatformCapacity {
        &self.capacity
    }

    pub fn reservation(&self, id: ReservationId) -> Option<&Reservation> {
        self.reservations.get(&id)
    }

    pub fn live_reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values().filter(|r| r.live)
    }

    pub fn evaluate(&self, contract: &Contract) -> Result<SubmissionReport, BrokerError> {
        ensure_valid(contract)?;
        Ok(assess(&self.capacity, &self.capacity.remaining(), contract).0)
    }

    pub fn get_conflicting_clauses(&self, contract: &Contract) -> Result<Vec<ConflictingClause>, BrokerError> {
        Ok(self.evaluate(contract)?.conflicting_clauses)
    }

    /// Re-evaluates and, on acceptance, deducts every reservation clause.
    pub fn subscribe(&mut self, holder: &ComponentId, contract: &Contract) -> Result<SubscribeOutcome, BrokerError> {
        ensure_valid(contract)?;
        if self
            .live_reservations()
            .any(|r| &r.holder == holder && r.contract_id == contract.id)
        {
            return Err(BrokerError::AlreadySubscribed {
                holder: holder.clone(),
                contract_id: contract.id.clone(),
            });
        }
        let (report, deductions) = assess(&self.capacity, &self.capacity.remaining(), contract);
        if !report.accepted {
            return Ok(SubscribeOutcome::Rejected(report));
        }
        self.deduct(&deductions);
        let id = ReservationId(self.next_reservation);
        self.next_reservation += 1;
        let reservation = Reservation {
            id,
            holder: holder.clone(),
            contract_id: contract.id.clone(),
            deductions,
            live: true,
        };
        self.reservations.insert(id, reservation.clone());
        Ok(SubscribeOutcome::Reserved(reservation))
    }

    pub fn release(&mut self, id: ReservationId) -> Result<(), BrokerError> {
        let r = self
            .reservations
            .get_mut(&id)
            .ok_or(BrokerError::UnknownReservation(id))?;
        if !r.live {
            return Err(BrokerError::AlreadyReleased(id));
        }
        r.live = false;
        let deductions = r.deductions.clone();
        self.restore(&deductions);
        Ok(())
    }

    /// Evaluates the amended contract with the current reservation virtually
    /// released, swapping the reservation on acceptance.
    pub fn evaluate_amendment(
        &mut self,
        contract: &Contract,
        reservation: ReservationId,
        amendment: &Amendment,
    ) -> Result<AmendmentOutcome, BrokerError> {
        let current = self
            .reservations
            .get(&reservation)
            .ok_or(BrokerError::UnknownReservation(reservation))?;
        if !current.live {
            return Err(BrokerError::AlreadyReleased(reservation));
        }
        if current.contract_id != contract.id {
            return Err(BrokerError::ReservationMismatch {
                reservation,
                contract_id: contract.id.clone(),
            });
        }
        let amended = apply_amendment(contract, amendment)?;
        ensure_valid(&amended)?;

        let mut remaining = self.capacity.remaining();
        for d in &current.deductions {
            remaining[d.entry.0] = remaining[d.entry.0]
                .checked_add(&d.amount)
                .expect("deduction kinds match their entry");
        }
        let (report, deductions) = assess(&self.capacity, &remaining, &amended);
        if !report.accepted {
            return Ok(AmendmentOutcome {
                report,
                amended: None,
                delta: None,
            });
        }
        let released = current.deductions.clone();
        self.restore(&released);
        self.deduct(&deductions);
        let r = self.reservations.get_mut(&reservation).expect("checked above");
        r.deductions = deductions.clone();
        Ok(AmendmentOutcome {
            report,
            amended: Some(amended),
            delta: Some(ReservationDelta {
                released,
                deducted: deductions,
            }),
        })
    }

    /// `initial = remaining + Σ live deductions` for every entry.
    pub fn is_conserved(&self) -> bool {
        let mut total = self.capacity.remaining();
        for r in self.live_reservations() {
            for d in &r.deductions {
                match total[d.entry.0].checked_add(&d.amount) {
                    Some(t) => total[d.entry.0] = t,
                    None => return false,
                }
            }
        }
        total
            .iter()
            .zip(&self.capacity.entries)
            .all(|(t, e)| *t == e.initial_quota && e.initial_quota.covers(&e.remaining_quota))
    }

    pub fn entry_for(&self, pattern: &ResourcePattern) -> Option<EntryId> {
        self.capacity.entry_for(pattern)
    }

    pub fn best_effort_load(&self, entry: EntryId) -> Option<Quota> {
        self.best_effort_load.get(entry.0).copied()
    }

    /// Whether a best-effort access fits in what reservations left over.
    pub fn admits_best_effort(&self, entry: EntryId, access: AccessKind, amount: u64) -> bool {
        let (Some(load), Some(e)) = (self.best_effort_load.get(entry.0), self.capacity.entries.get(entry.0)) else {
            return false;
        };
        match (load.component(access), e.remaining_quota.component(access)) {
            (Some(used), Some(free)) => used.saturating_add(amount) <= free,
            _ => true,
        }
    }

    pub fn charge_best_effort(&mut self, entry: EntryId, access: AccessKind, amount: u64) {
        let Some(load) = self.best_effort_load.get_mut(entry.0) else {
            return;
        };
        if access == AccessKind::Free {
            if let Some(used) = load.component(AccessKind::Allocate) {
                *load = load.with_component(AccessKind::Allocate, used.saturating_sub(amount));
            }
        } else if let Some(used) = load.component(access) {
            *load = load.with_component(access, used.saturating_add(amount));
        }
    }

    fn deduct(&mut self, deductions: &[Deduction]) {
        for d in deductions {
            let e = &mut self.capacity.entries[d.entry.0];
            e.remaining_quota = e
                .remaining_quota
                .checked_sub(&d.amount)
                .expect("assessed against remaining capacity");
        }
    }

    fn restore(&mut self, deductions: &[Deduction]) {
        for d in deductions {
            let e = &mut self.capacity.entries[d.entry.0];
            e.remaining_quota = e
                .remaining_quota
                .checked_add(&d.amount)
                .expect("restoring a live deduction");
        }
    }
}

/// A broker shared between containers. Every call runs under one lock,
/// which makes each operation atomic and linearizable.
#[derive(Debug, Clone)]
pub struct SharedBroker(Arc<Mutex<Broker>>);

impl SharedBroker {
    pub fn new(broker: Broker) -> Self {
        Self(Arc::new(Mutex::new(broker)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Broker> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Run-time capacity check for best-effort profiles.
pub trait CapacityGate: Send {
    fn admit(&mut self, entry: EntryId, access: AccessKind, amount: u64) -> bool;
    fn charge(&mut self, entry: EntryId, access: AccessKind, amount: u64);
    fn entry_for(&self, pattern: &ResourcePattern) -> Option<EntryId>;
}

impl CapacityGate for SharedBroker {
    fn admit(&mut self, entry: EntryId, access: AccessKind, amount: u64) -> bool {
        self.lock().admits_best_effort(entry, access, amount)
    }

    fn charge(&mut self, entry: EntryId, access: AccessKind, amount: u64) {
        self.lock().charge_best_effort(entry, access, amount)
    }

    fn entry_for(&self, pattern: &ResourcePattern) -> Option<EntryId> {
        self.lock().entry_for(pattern)
    }
}
