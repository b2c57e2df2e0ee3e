//! Contract data model: resource patterns, permissions, quotas, availability
//! policies, utilisation profiles, contracts and amendments.
//!
//! Everything in here is an immutable value. Operations are pure functions.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const KO: u64 = 1024;
pub const MO: u64 = 1024 * 1024;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identifier of a hosted component.
    ComponentId
);
string_id!(ContractId);
string_id!(ProfileId);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path must start with '/' or '~': {0:?}")]
    NotRooted(String),
    #[error("path contains a '..' segment: {0:?}")]
    ParentSegment(String),
    #[error("path contains a control character: {0:?}")]
    ControlChar(String),
}

/// A normalized path in the virtual filesystem.
///
/// Two roots exist: `/` and `~` (the virtual home directory). A normalized
/// path has no `.`/`..` segments, no empty segments and no trailing
/// separator except for the bare roots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VPath(String);

impl VPath {
    pub fn parse(raw: &str) -> Result<Self, PathError> {
        if raw.chars().any(|c| c.is_control()) {
            return Err(PathError::ControlChar(raw.to_owned()));
        }
        let (root, rest) = if let Some(rest) = raw.strip_prefix('~') {
            if !(rest.is_empty() || rest.starts_with('/')) {
                return Err(PathError::NotRooted(raw.to_owned()));
            }
            ("~", rest)
        } else if raw.starts_with('/') {
            ("", raw)
        } else {
            return Err(PathError::NotRooted(raw.to_owned()));
        };

        let mut out = String::with_capacity(raw.len());
        out.push_str(root);
        for seg in rest.split('/') {
            match seg {
                "" | "." => {}
                ".." => return Err(PathError::ParentSegment(raw.to_owned())),
                s => {
                    out.push('/');
                    out.push_str(s);
                }
            }
        }
        if out.is_empty() {
            out.push('/');
        }
        Ok(VPath(out))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Segment-aware prefix test: `self` equals `prefix` or lies under it.
    pub fn is_within(&self, prefix: &VPath) -> bool {
        let (p, s) = (prefix.0.as_str(), self.0.as_str());
        if p == "/" {
            return s.starts_with('/');
        }
        match s.strip_prefix(p) {
            Some("") => true,
            Some(rest) => rest.starts_with('/'),
            None => false,
        }
    }
}

impl fmt::Display for VPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for VPath {
    type Error = PathError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        VPath::parse(&s)
    }
}

impl Serialize for VPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for VPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        VPath::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// A socket port in a pattern. `Any` is distinct from every concrete port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Port {
    Any,
    Number(u16),
}

impl Port {
    pub fn admits(self, port: u16) -> bool {
        match self {
            Port::Any => true,
            Port::Number(p) => p == port,
        }
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Port::Any => f.write_str("*"),
            Port::Number(p) => write!(f, "{p}"),
        }
    }
}

impl Serialize for Port {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Port::Any => s.serialize_str("any"),
            Port::Number(p) => s.serialize_u16(*p),
        }
    }
}

impl<'de> Deserialize<'de> for Port {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(n) if (1..=65535).contains(&n) => Ok(Port::Number(n as u16)),
            Repr::Num(n) => Err(serde::de::Error::custom(format!(
                "port {n} outside 1..65535"
            ))),
            Repr::Text(t) if t == "any" || t == "*" => Ok(Port::Any),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "port must be an integer or \"any\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    File,
    Socket,
    Memory,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::File => "file",
            ResourceKind::Socket => "socket",
            ResourceKind::Memory => "memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResourcePattern {
    File { path_prefix: VPath },
    Socket { host_glob: String, port: Port },
    Memory,
}

impl ResourcePattern {
    pub fn file(prefix: &str) -> Result<Self, PathError> {
        Ok(ResourcePattern::File {
            path_prefix: VPath::parse(prefix)?,
        })
    }

    pub fn socket(host_glob: impl Into<String>, port: Port) -> Self {
        ResourcePattern::Socket {
            host_glob: host_glob.into(),
            port,
        }
    }

    pub fn kind(&self) -> ResourceKind {
        match self {
            ResourcePattern::File { .. } => ResourceKind::File,
            ResourcePattern::Socket { .. } => ResourceKind::Socket,
            ResourcePattern::Memory => ResourceKind::Memory,
        }
    }

    /// Specificity rank, only meaningful between patterns of the same kind.
    pub fn specificity(&self) -> usize {
        match self {
            ResourcePattern::File { path_prefix } => path_prefix.as_str().len(),
            ResourcePattern::Socket { host_glob, port } => {
                usize::from(host_glob != "*") + usize::from(*port != Port::Any)
            }
            ResourcePattern::Memory => 0,
        }
    }

    /// True when every resource matched by `inner` is also matched by `self`.
    pub fn covers(&self, inner: &ResourcePattern) -> bool {
        match (self, inner) {
            (
                ResourcePattern::File { path_prefix: outer },
                ResourcePattern::File { path_prefix: inner },
            ) => inner.is_within(outer),
            (
                ResourcePattern::Socket {
                    host_glob: oh,
                    port: op,
                },
                ResourcePattern::Socket {
                    host_glob: ih,
                    port: ip,
                },
            ) => {
                let host_ok = oh == "*" || oh == ih;
                let port_ok = match (op, ip) {
                    (Port::Any, _) => true,
                    (Port::Number(a), Port::Number(b)) => a == b,
                    (Port::Number(_), Port::Any) => false,
                };
                host_ok && port_ok
            }
            (ResourcePattern::Memory, ResourcePattern::Memory) => true,
            _ => false,
        }
    }
}

impl fmt::Display for ResourcePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourcePattern::File { path_prefix } => write!(f, "FilePattern({path_prefix})"),
            ResourcePattern::Socket { host_glob, port } => {
                write!(f, "SocketPattern({host_glob}, {port})")
            }
            ResourcePattern::Memory => f.write_str("MemoryPattern()"),
        }
    }
}

/// Identity of a concrete resource.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResourceDescriptor {
    File { path: VPath },
    Socket { host: String, port: u16 },
    Memory { component: ComponentId },
}

impl ResourceDescriptor {
    pub fn kind(&self) -> ResourceKind {
        match self {
            ResourceDescriptor::File { .. } => ResourceKind::File,
            ResourceDescriptor::Socket { .. } => ResourceKind::Socket,
            ResourceDescriptor::Memory { .. } => ResourceKind::Memory,
        }
    }
}

impl fmt::Display for ResourceDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceDescriptor::File { path } => write!(f, "file:{path}"),
            ResourceDescriptor::Socket { host, port } => write!(f, "socket:{host}:{port}"),
            ResourceDescriptor::Memory { component } => write!(f, "memory:{component}"),
        }
    }
}

pub fn matches(pattern: &ResourcePattern, descriptor: &ResourceDescriptor) -> bool {
    match (pattern, descriptor) {
        (ResourcePattern::File { path_prefix }, ResourceDescriptor::File { path }) => {
            path.is_within(path_prefix)
        }
        (ResourcePattern::Socket { host_glob, port }, ResourceDescriptor::Socket { host, port: p }) => {
            (host_glob == "*" || host_glob == host) && port.admits(*p)
        }
        (ResourcePattern::Memory, ResourceDescriptor::Memory { .. }) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
    Connect,
    Accept,
    Send,
    Receive,
    Allocate,
    Free,
}

impl AccessKind {
    pub const ALL: [AccessKind; 8] = [
        AccessKind::Read,
        AccessKind::Write,
        AccessKind::Connect,
        AccessKind::Accept,
        AccessKind::Send,
        AccessKind::Receive,
        AccessKind::Allocate,
        AccessKind::Free,
    ];

    pub fn resource_kind(self) -> ResourceKind {
        match self {
            AccessKind::Read | AccessKind::Write => ResourceKind::File,
            AccessKind::Connect | AccessKind::Accept | AccessKind::Send | AccessKind::Receive => {
                ResourceKind::Socket
            }
            AccessKind::Allocate | AccessKind::Free => ResourceKind::Memory,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Connect => "connect",
            AccessKind::Accept => "accept",
            AccessKind::Send => "send",
            AccessKind::Receive => "receive",
            AccessKind::Allocate => "allocate",
            AccessKind::Free => "free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AccessPermission {
    File { read: bool, write: bool },
    Socket { connect: bool, accept: bool },
    Memory { allocate: bool },
}

impl AccessPermission {
    /// The permission with every flag set.
    pub fn all(kind: ResourceKind) -> Self {
        match kind {
            ResourceKind::File => AccessPermission::File {
                read: true,
                write: true,
            },
            ResourceKind::Socket => AccessPermission::Socket {
                connect: true,
                accept: true,
            },
            ResourceKind::Memory => AccessPermission::Memory { allocate: true },
        }
    }

    pub fn kind(&self) -> ResourceKind {
        match self {
            AccessPermission::File { .. } => ResourceKind::File,
            AccessPermission::Socket { .. } => ResourceKind::Socket,
            AccessPermission::Memory { .. } => ResourceKind::Memory,
        }
    }

    pub fn is_empty(&self) -> bool {
        match *self {
            AccessPermission::File { read, write } => !read && !write,
            AccessPermission::Socket { connect, accept } => !connect && !accept,
            AccessPermission::Memory { allocate } => !allocate,
        }
    }

    /// Flag-wise superset test. Different kinds never cover each other.
    pub fn covers(&self, other: &AccessPermission) -> bool {
        match (*self, *other) {
            (
                AccessPermission::File { read, write },
                AccessPermission::File {
                    read: r2,
                    write: w2,
                },
            ) => (read || !r2) && (write || !w2),
            (
                AccessPermission::Socket { connect, accept },
                AccessPermission::Socket {
                    connect: c2,
                    accept: a2,
                },
            ) => (connect || !c2) && (accept || !a2),
            (
                AccessPermission::Memory { allocate },
                AccessPermission::Memory { allocate: a2 },
            ) => allocate || !a2,
            _ => false,
        }
    }

    /// Returns `None` when the access kind targets another resource kind.
    ///
    /// Send and receive need an established socket, which either flag grants.
    /// Freeing memory is always allowed.
    pub fn allows(&self, access: AccessKind) -> Option<bool> {
        if access.resource_kind() != self.kind() {
            return None;
        }
        Some(match (*self, access) {
            (AccessPermission::File { read, .. }, AccessKind::Read) => read,
            (AccessPermission::File { write, .. }, AccessKind::Write) => write,
            (AccessPermission::Socket { connect, .. }, AccessKind::Connect) => connect,
            (AccessPermission::Socket { accept, .. }, AccessKind::Accept) => accept,
            (AccessPermission::Socket { connect, accept }, _) => connect || accept,
            (AccessPermission::Memory { allocate }, AccessKind::Allocate) => allocate,
            (AccessPermission::Memory { .. }, _) => true,
            _ => unreachable!("kind checked above"),
        })
    }
}

/// Byte budgets. File and socket quotas bound cumulative totals; the memory
/// quota bounds the amount held at any instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Quota {
    File { read_bytes: u64, write_bytes: u64 },
    Socket { sent_bytes: u64, received_bytes: u64 },
    Memory { bytes: u64 },
}

impl Quota {
    pub fn zero(kind: ResourceKind) -> Self {
        match kind {
            ResourceKind::File => Quota::File {
                read_bytes: 0,
                write_bytes: 0,
            },
            ResourceKind::Socket => Quota::Socket {
                sent_bytes: 0,
                received_bytes: 0,
            },
            ResourceKind::Memory => Quota::Memory { bytes: 0 },
        }
    }

    pub fn kind(&self) -> ResourceKind {
        match self {
            Quota::File { .. } => ResourceKind::File,
            Quota::Socket { .. } => ResourceKind::Socket,
            Quota::Memory { .. } => ResourceKind::Memory,
        }
    }

    fn parts(&self) -> [u64; 2] {
        match *self {
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

    fn from_parts(kind: ResourceKind, [a, b]: [u64; 2]) -> Self {
        match kind {
            ResourceKind::File => Quota::File {
                read_bytes: a,
                write_bytes: b,
            },
            ResourceKind::Socket => Quota::Socket {
                sent_bytes: a,
                received_bytes: b,
            },
            ResourceKind::Memory => Quota::Memory { bytes: a },
        }
    }

    /// Component-wise `self >= other`. False across kinds.
    pub fn covers(&self, other: &Quota) -> bool {
        if self.kind() != other.kind() {
            return false;
        }
        let (a, b) = (self.parts(), other.parts());
        a[0] >= b[0] && a[1] >= b[1]
    }

    pub fn checked_add(&self, other: &Quota) -> Option<Quota> {
        if self.kind() != other.kind() {
            return None;
        }
        let (a, b) = (self.parts(), other.parts());
        Some(Self::from_parts(
            self.kind(),
            [a[0].checked_add(b[0])?, a[1].checked_add(b[1])?],
        ))
    }

    pub fn checked_sub(&self, other: &Quota) -> Option<Quota> {
        if self.kind() != other.kind() {
            return None;
        }
        let (a, b) = (self.parts(), other.parts());
        Some(Self::from_parts(
            self.kind(),
            [a[0].checked_sub(b[0])?, a[1].checked_sub(b[1])?],
        ))
    }

    /// Component-wise saturating subtraction.
    pub fn saturating_sub(&self, other: &Quota) -> Quota {
        let (a, b) = (self.parts(), other.parts());
        Self::from_parts(
            self.kind(),
            [a[0].saturating_sub(b[0]), a[1].saturating_sub(b[1])],
        )
    }

    /// The budget component an access draws on. Connect, accept and free
    /// draw on nothing.
    pub fn component(&self, access: AccessKind) -> Option<u64> {
        let slot = quota_slot(access)?;
        if access.resource_kind() != self.kind() {
            return None;
        }
        Some(self.parts()[slot])
    }

    pub fn with_component(&self, access: AccessKind, value: u64) -> Quota {
        let mut parts = self.parts();
        if let Some(slot) = quota_slot(access) {
            parts[slot] = value;
        }
        Self::from_parts(self.kind(), parts)
    }
}

fn quota_slot(access: AccessKind) -> Option<usize> {
    match access {
        AccessKind::Read | AccessKind::Send | AccessKind::Allocate => Some(0),
        AccessKind::Write | AccessKind::Receive => Some(1),
        AccessKind::Connect | AccessKind::Accept | AccessKind::Free => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityPolicy {
    BestEffort,
    Reservation,
}

/// One contract clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUtilisationProfile {
    pub id: ProfileId,
    pub pattern: ResourcePattern,
    pub permission: AccessPermission,
    pub quota: Quota,
    pub policy: AvailabilityPolicy,
}

impl ResourceUtilisationProfile {
    pub fn new(
        id: impl Into<String>,
        pattern: ResourcePattern,
        permission: AccessPermission,
        quota: Quota,
        policy: AvailabilityPolicy,
    ) -> Self {
        Self {
            id: ProfileId::new(id),
            pattern,
            permission,
            quota,
            policy,
        }
    }

    pub fn kind(&self) -> ResourceKind {
        self.pattern.kind()
    }

    pub fn is_consistent(&self) -> bool {
        let k = self.pattern.kind();
        self.permission.kind() == k && self.quota.kind() == k
    }
}

/// True iff the profile grants the access kind. Quota is not consulted.
///
/// # Panics
/// When the access kind targets another resource kind than the profile.
pub fn permits(profile: &ResourceUtilisationProfile, access: AccessKind) -> bool {
    profile
        .permission
        .allows(access)
        .unwrap_or_else(|| panic!("{access} is not an access on a {} resource", profile.kind()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub id: ContractId,
    pub profiles: Vec<ResourceUtilisationProfile>,
}

impl Contract {
    pub fn new(id: impl Into<String>, profiles: Vec<ResourceUtilisationProfile>) -> Self {
        Self {
            id: ContractId::new(id),
            profiles,
        }
    }

    pub fn profile(&self, id: &ProfileId) -> Option<&ResourceUtilisationProfile> {
        self.profiles.iter().find(|p| &p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AmendmentClause {
    Add {
        profile: ResourceUtilisationProfile,
    },
    Remove {
        target_profile_id: ProfileId,
    },
    Modify {
        target_profile_id: ProfileId,
        profile: ResourceUtilisationProfile,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Amendment {
    pub contract_id: ContractId,
    pub clauses: Vec<AmendmentClause>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("amendment targets contract {amendment} but was applied to {contract}")]
    ContractIdMismatch {
        contract: ContractId,
        amendment: ContractId,
    },
    #[error("no profile {0} in the contract")]
    UnknownTargetProfile(ProfileId),
    #[error("profile {0} already exists in the contract")]
    DuplicateProfileId(ProfileId),
    #[error("amendment has no clauses")]
    EmptyAmendment,
}

/// Applies the clauses of `amendment` in order and returns the new contract.
pub fn apply_amendment(contract: &Contract, amendment: &Amendment) -> Result<Contract, ContractError> {
    if contract.id != amendment.contract_id {
        return Err(ContractError::ContractIdMismatch {
            contract: contract.id.clone(),
            amendment: amendment.contract_id.clone(),
        });
    }
    if amendment.clauses.is_empty() {
        return Err(ContractError::EmptyAmendment);
    }
    let mut profiles = contract.profiles.clone();
    let position = |profiles: &[ResourceUtilisationProfile], id: &ProfileId| {
        profiles
            .iter()
            .position(|p| &p.id == id)
            .ok_or_else(|| ContractError::UnknownTargetProfile(id.clone()))
    };
    for clause in &amendment.clauses {
        match clause {
            AmendmentClause::Add { profile } => {
                if profiles.iter().any(|p| p.id == profile.id) {
                    return Err(ContractError::DuplicateProfileId(profile.id.clone()));
                }
                profiles.push(profile.clone());
            }
            AmendmentClause::Remove { target_profile_id } => {
                let at = position(&profiles, target_profile_id)?;
                profiles.remove(at);
            }
            AmendmentClause::Modify {
                target_profile_id,
                profile,
            } => {
                let at = position(&profiles, target_profile_id)?;
                profiles[at] = ResourceUtilisationProfile {
                    id: target_profile_id.clone(),
                    ..profile.clone()
                };
            }
        }
    }
    Ok(Contract {
        id: contract.id.clone(),
        profiles,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(tag = "error", content = "profile", rename_all = "snake_case")]
pub enum ValidationError {
    #[error("contract has no profiles")]
    EmptyContract,
    #[error("profile id {0} used more than once")]
    DuplicateProfileId(ProfileId),
    #[error("profile {0} mixes resource kinds")]
    KindMismatch(ProfileId),
    #[error("profile {0} grants no access")]
    EmptyPermission(ProfileId),
    #[error("profile {0} has port 0")]
    InvalidPort(ProfileId),
    #[error("contract has more than one memory profile")]
    DuplicateMemoryProfile,
}

pub fn validate_contract(contract: &Contract) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    if contract.profiles.is_empty() {
        errors.push(ValidationError::EmptyContract);
    }
    let mut seen = HashSet::new();
    let mut memory = 0usize;
    for p in &contract.profiles {
        if !seen.insert(&p.id) {
            errors.push(ValidationError::DuplicateProfileId(p.id.clone()));
        }
        if !p.is_consistent() {
            errors.push(ValidationError::KindMismatch(p.id.clone()));
        }
        if p.permission.is_empty() {
            errors.push(ValidationError::EmptyPermission(p.id.clone()));
        }
        if let ResourcePattern::Socket {
            port: Port::Number(0),
            ..
        } = p.pattern
        {
            errors.push(ValidationError::InvalidPort(p.id.clone()));
        }
        if p.kind() == ResourceKind::Memory {
            memory += 1;
        }
    }
    if memory > 1 {
        errors.push(ValidationError::DuplicateMemoryProfile);
    }
    errors
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn file_all(id: &str, prefix: &str, read: u64, write: u64, policy: AvailabilityPolicy) -> ResourceUtilisationProfile {
        ResourceUtilisationProfile::new(
            id,
            ResourcePattern::file(prefix).unwrap(),
            AccessPermission::all(ResourceKind::File),
            Quota::File {
                read_bytes: read,
                write_bytes: write,
            },
            policy,
        )
    }

    pub fn memory(id: &str, bytes: u64, policy: AvailabilityPolicy) -> ResourceUtilisationProfile {
        ResourceUtilisationProfile::new(
            id,
            ResourcePattern::Memory,
            AccessPermission::all(ResourceKind::Memory),
            Quota::Memory { bytes },
            policy,
        )
    }

    pub fn r1() -> ResourceUtilisationProfile {
        file_all("r1", "~/.jmailer", 500 * KO, 500 * KO, AvailabilityPolicy::BestEffort)
    }
    pub fn r2() -> ResourceUtilisationProfile {
        file_all("r2", "~/.jaddrbook", MO, MO, AvailabilityPolicy::BestEffort)
    }
    pub fn r3() -> ResourceUtilisationProfile {
        memory("r3", MO, AvailabilityPolicy::Reservation)
    }
    pub fn r4() -> ResourceUtilisationProfile {
        memory("r4", 2 * MO, AvailabilityPolicy::Reservation)
    }
    pub fn r5() -> ResourceUtilisationProfile {
        file_all("r5", "/tmp", 2 * MO, 2 * MO, AvailabilityPolicy::BestEffort)
    }
    pub fn contract1() -> Contract {
        Contract::new("contract1", vec![r1(), r2(), r4()])
    }
    pub fn contract2() -> Contract {
        Contract::new("contract2", vec![r1(), r3()])
    }
    pub fn a1() -> Amendment {
        Amendment {
            contract_id: ContractId::new("contract2"),
            clauses: vec![AmendmentClause::Add { profile: r5() }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn file(p: &str) -> ResourceDescriptor {
        ResourceDescriptor::File {
            path: VPath::parse(p).unwrap(),
        }
    }

    #[test]
    fn path_normalization() {
        assert_eq!(VPath::parse("~/.jmailer/").unwrap().as_str(), "~/.jmailer");
        assert_eq!(VPath::parse("~/").unwrap().as_str(), "~");
        assert_eq!(VPath::parse("//tmp/./x//").unwrap().as_str(), "/tmp/x");
        assert_eq!(VPath::parse("/").unwrap().as_str(), "/");
        assert!(matches!(VPath::parse("../etc/x"), Err(PathError::NotRooted(_))));
        assert!(matches!(VPath::parse("/tmp/../etc"), Err(PathError::ParentSegment(_))));
        assert!(VPath::parse("~bob/x").is_err());
        assert!(VPath::parse("/a\tb").is_err());
    }

    #[test]
    fn file_pattern_is_segment_aware() {
        let p = ResourcePattern::file("~/.jmailer").unwrap();
        assert!(matches(&p, &file("~/.jmailer/drafts/a.txt")));
        assert!(matches(&p, &file("~/.jmailer")));
        assert!(!matches(&p, &file("~/.jmailerX/a.txt")));
        assert!(!matches(&p, &file("/.jmailer/a.txt")));
        let root = ResourcePattern::file("/").unwrap();
        assert!(matches(&root, &file("/tmp/x")));
        assert!(!matches(&root, &file("~/x")));
        let home = ResourcePattern::file("~/").unwrap();
        assert!(matches(&home, &file("~/.jmailer/x")));
    }

    #[test]
    fn socket_and_memory_patterns() {
        let any_host_80 = ResourcePattern::socket("*", Port::Number(80));
        let sock = |h: &str, p| ResourceDescriptor::Socket {
            host: h.into(),
            port: p,
        };
        assert!(matches(&any_host_80, &sock("example.org", 80)));
        assert!(!matches(&any_host_80, &sock("example.org", 443)));
        let exact = ResourcePattern::socket("mail.example.org", Port::Any);
        assert!(matches(&exact, &sock("mail.example.org", 25)));
        assert!(!matches(&exact, &sock("example.org", 25)));
        let mem = ResourceDescriptor::Memory {
            component: "JMailer".into(),
        };
        assert!(matches(&ResourcePattern::Memory, &mem));
        assert!(!matches(&ResourcePattern::Memory, &file("~/x")));
        assert!(!matches(&any_host_80, &mem));
    }

    #[test]
    fn specificity_order() {
        let a = ResourcePattern::file("~").unwrap();
        let b = ResourcePattern::file("~/.jmailer").unwrap();
        assert!(b.specificity() > a.specificity());
        assert!(a.covers(&b) && !b.covers(&a));
        let s0 = ResourcePattern::socket("*", Port::Any);
        let s1 = ResourcePattern::socket("*", Port::Number(80));
        let s2 = ResourcePattern::socket("h", Port::Number(80));
        assert_eq!((s0.specificity(), s1.specificity(), s2.specificity()), (0, 1, 2));
        assert!(s0.covers(&s1) && s1.covers(&s2) && !s2.covers(&s1));
    }

    #[test]
    fn permits_examples() {
        assert!(permits(&r1(), AccessKind::Write));
        let ro = ResourceUtilisationProfile {
            permission: AccessPermission::File {
                read: true,
                write: false,
            },
            ..r1()
        };
        assert!(!permits(&ro, AccessKind::Write));
        assert!(permits(&ro, AccessKind::Read));
        assert!(permits(&r3(), AccessKind::Allocate));
    }

    #[test]
    #[should_panic]
    fn permits_kind_mismatch_panics() {
        permits(&r3(), AccessKind::Write);
    }

    #[test]
    fn amendment_examples() {
        let amended = apply_amendment(&contract2(), &a1()).unwrap();
        assert_eq!(amended.profiles, vec![r1(), r3(), r5()]);
        assert_eq!(contract2().profiles.len(), 2);

        let x2 = ResourceUtilisationProfile {
            quota: Quota::File {
                read_bytes: 1,
                write_bytes: 2,
            },
            ..r1()
        };
        let replace = Amendment {
            contract_id: "contract2".into(),
            clauses: vec![
                AmendmentClause::Remove {
                    target_profile_id: "r1".into(),
                },
                AmendmentClause::Add { profile: x2.clone() },
            ],
        };
        let out = apply_amendment(&contract2(), &replace).unwrap();
        assert_eq!(out.profiles, vec![r3(), x2]);

        let bad = Amendment {
            contract_id: "contract2".into(),
            clauses: vec![AmendmentClause::Remove {
                target_profile_id: "r9".into(),
            }],
        };
        assert_eq!(
            apply_amendment(&contract2(), &bad),
            Err(ContractError::UnknownTargetProfile("r9".into()))
        );
        assert!(matches!(
            apply_amendment(&contract1(), &a1()),
            Err(ContractError::ContractIdMismatch { .. })
        ));
        let dup = Amendment {
            contract_id: "contract2".into(),
            clauses: vec![AmendmentClause::Add { profile: r1() }],
        };
        assert_eq!(
            apply_amendment(&contract2(), &dup),
            Err(ContractError::DuplicateProfileId("r1".into()))
        );
    }

    #[test]
    fn modify_keeps_target_id() {
        let mut payload = r4();
        payload.id = "whatever".into();
        let a = Amendment {
            contract_id: "contract2".into(),
            clauses: vec![AmendmentClause::Modify {
                target_profile_id: "r3".into(),
                profile: payload,
            }],
        };
        let out = apply_amendment(&contract2(), &a).unwrap();
        assert_eq!(out.profiles[1].id.as_str(), "r3");
        assert_eq!(out.profiles[1].quota, Quota::Memory { bytes: 2 * MO });
    }

    #[test]
    fn validation_examples() {
        assert!(validate_contract(&contract1()).is_empty());
        assert!(validate_contract(&contract2()).is_empty());
        assert_eq!(
            validate_contract(&Contract::new("c", vec![r3(), r4()])),
            vec![ValidationError::DuplicateMemoryProfile]
        );
        assert_eq!(
            validate_contract(&Contract::new("c", vec![])),
            vec![ValidationError::EmptyContract]
        );
        let mixed = ResourceUtilisationProfile {
            quota: Quota::Memory { bytes: 1 },
            ..r1()
        };
        assert_eq!(
            validate_contract(&Contract::new("c", vec![mixed, r1()])),
            vec![
                ValidationError::KindMismatch("r1".into()),
                ValidationError::DuplicateProfileId("r1".into())
            ]
        );
    }

    #[test]
    fn json_shapes() {
        let v = serde_json::to_value(r1()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "id": "r1",
                "pattern": {"kind": "file", "path_prefix": "~/.jmailer"},
                "permission": {"kind": "file", "read": true, "write": true},
                "quota": {"kind": "file", "read_bytes": 512000, "write_bytes": 512000},
                "policy": "best_effort"
            })
        );
        let s: ResourcePattern =
            serde_json::from_str(r#"{"kind":"socket","host_glob":"*","port":80}"#).unwrap();
        assert_eq!(s, ResourcePattern::socket("*", Port::Number(80)));
        let any: ResourcePattern =
            serde_json::from_str(r#"{"kind":"socket","host_glob":"*","port":"any"}"#).unwrap();
        assert_eq!(any, ResourcePattern::socket("*", Port::Any));
        assert!(serde_json::from_str::<ResourcePattern>(r#"{"kind":"socket","host_glob":"*","port":0}"#).is_err());
        assert!(serde_json::from_str::<ResourcePattern>(r#"{"kind":"file","path_prefix":"a/../b"}"#).is_err());
        let a: Amendment = serde_json::from_value(serde_json::to_value(a1()).unwrap()).unwrap();
        assert_eq!(a, a1());
    }

    fn arb_path() -> impl Strategy<Value = VPath> {
        (prop::bool::ANY, prop::collection::vec("[a-c]{1,2}", 0..4)).prop_map(|(home, segs)| {
            let root = if home { "~" } else { "" };
            VPath::parse(&format!("{root}/{}", segs.join("/"))).unwrap()
        })
    }

    fn arb_profile() -> impl Strategy<Value = ResourceUtilisationProfile> {
        ("[p-s][0-3]", arb_path(), 0u64..4096, prop::bool::ANY).prop_map(|(id, path, q, res)| {
            let policy = if res {
                AvailabilityPolicy::Reservation
            } else {
                AvailabilityPolicy::BestEffort
            };
            ResourceUtilisationProfile::new(
                id,
                ResourcePattern::File { path_prefix: path },
                AccessPermission::all(ResourceKind::File),
                Quota::File {
                    read_bytes: q,
                    write_bytes: q,
                },
                policy,
            )
        })
    }

    fn arb_contract() -> impl Strategy<Value = Contract> {
        prop::collection::vec(arb_profile(), 0..5).prop_map(|mut ps| {
            let mut seen = HashSet::new();
            ps.retain(|p| seen.insert(p.id.clone()));
            Contract::new("c", ps)
        })
    }

    proptest! {
        #[test]
        fn add_grows_by_one(c in arb_contract(), p in arb_profile()) {
            prop_assume!(c.profile(&p.id).is_none());
            let before = c.clone();
            let a = Amendment { contract_id: c.id.clone(), clauses: vec![AmendmentClause::Add { profile: p.clone() }] };
            let out = apply_amendment(&c, &a).unwrap();
            prop_assert_eq!(&c, &before);
            prop_assert_eq!(out.profiles.len(), c.profiles.len() + 1);
            prop_assert!(out.profiles.contains(&p));
            prop_assert_eq!(apply_amendment(&c, &a).unwrap(), out);
        }

        #[test]
        fn remove_add_equals_modify(c in arb_contract(), idx in 0usize..5, payload in arb_profile()) {
            prop_assume!(!c.profiles.is_empty());
            let target = c.profiles[idx % c.profiles.len()].id.clone();
            let replacement = ResourceUtilisationProfile { id: target.clone(), ..payload.clone() };
            let via_remove = Amendment { contract_id: c.id.clone(), clauses: vec![
                AmendmentClause::Remove { target_profile_id: target.clone() },
                AmendmentClause::Add { profile: replacement.clone() },
            ]};
            let via_modify = Amendment { contract_id: c.id.clone(), clauses: vec![
                AmendmentClause::Modify { target_profile_id: target, profile: payload },
            ]};
            let mut a = apply_amendment(&c, &via_remove).unwrap().profiles;
            let mut b = apply_amendment(&c, &via_modify).unwrap().profiles;
            a.sort_by(|x, y| x.id.cmp(&y.id));
            b.sort_by(|x, y| x.id.cmp(&y.id));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn file_match_monotone(p in arb_path(), ext in prop::collection::vec("[a-c]{1,2}", 0..3), d in arb_path()) {
            let q = VPath::parse(&format!("{}/{}", p, ext.join("/"))).unwrap();
            let pp = ResourcePattern::File { path_prefix: p };
            let qp = ResourcePattern::File { path_prefix: q };
            let desc = ResourceDescriptor::File { path: d };
            if matches(&qp, &desc) {
                prop_assert!(matches(&pp, &desc));
            }
        }
    }
}
