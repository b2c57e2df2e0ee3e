//! Scenario files: platform capacity, sanctions and scripted components.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "capacity": { "entries": [ ... ] },
//!   "sanctions": [ { "kind": "deferred", "pattern": {...}, "action": "reject", "threshold": 2 } ],
//!   "components": [ {
//!     "id": "jmailer",
//!     "contracts": [ ... ],
//!     "subscribe": "contract2",
//!     "files": [ { "path": "~/.jmailer/inbox", "size": 1024 } ],
//!     "script": [
//!       { "step": "open_file", "path": "~/.jmailer/mbox", "mode": "rw", "as": "mbox" },
//!       { "step": "write", "handle": "mbox", "bytes": 409600 },
//!       { "step": "allocate", "bytes": 1048576 },
//!       { "step": "submit_amendment", "amendment": { ... } },
//!       { "step": "terminate" }
//!     ],
//!     "warning_handlers": [ { "reaction": "terminate" } ]
//!   } ]
//! }
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{CapacityConfig, CapacityError, PlatformCapacity};
use crate::contracts::{AccessKind, AccessPermission, Amendment, ComponentId, Contract, ContractId, VPath};
use crate::sanctions::{Sanction, WarningReaction};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub capacity: CapacityConfig,
    #[serde(default)]
    pub sanctions: Vec<Sanction>,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub id: ComponentId,
    #[serde(default)]
    pub contracts: Vec<Contract>,
    #[serde(default)]
    pub subscribe: Option<ContractId>,
    #[serde(default)]
    pub files: Vec<SeedFile>,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
    #[serde(default)]
    pub warning_handlers: Vec<WarningReaction>,
}

/// A file present in the component's namespace before it starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedFile {
    pub path: VPath,
    #[serde(default)]
    pub size: u64,
}

/// Open mode of a file: `"r"`, `"w"` or `"rw"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileMode {
    pub read: bool,
    pub write: bool,
}

impl FileMode {
    pub fn permission(self) -> AccessPermission {
        AccessPermission::File {
            read: self.read,
            write: self.write,
        }
    }
}

impl fmt::Display for FileMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.read {
            f.write_str("r")?;
        }
        if self.write {
            f.write_str("w")?;
        }
        Ok(())
    }
}

impl Serialize for FileMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FileMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "r" => Ok(FileMode { read: true, write: false }),
            "w" => Ok(FileMode { read: false, write: true }),
            "rw" => Ok(FileMode { read: true, write: true }),
            other => Err(serde::de::Error::custom(format!(
                "file mode must be \"r\", \"w\" or \"rw\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptStep {
    OpenFile {
        path: String,
        mode: FileMode,
        #[serde(rename = "as")]
        name: String,
    },
    OpenSocket {
        host: String,
        port: u16,
        #[serde(rename = "as")]
        name: String,
    },
    Read { handle: String, bytes: u64 },
    Write { handle: String, bytes: u64 },
    Send { handle: String, bytes: u64 },
    Receive { handle: String, bytes: u64 },
    Close { handle: String },
    Allocate { bytes: u64 },
    Free { bytes: u64 },
    SubmitAmendment { amendment: Amendment },
    Terminate,
}

impl ScriptStep {
    /// The handle name this step binds, if it creates a resource.
    pub fn binds(&self) -> Option<&str> {
        match self {
            ScriptStep::OpenFile { name, .. } | ScriptStep::OpenSocket { name, .. } => Some(name),
            _ => None,
        }
    }

    /// The handle name this step uses, if any.
    pub fn uses(&self) -> Option<&str> {
        match self {
            ScriptStep::Read { handle, .. }
            | ScriptStep::Write { handle, .. }
            | ScriptStep::Send { handle, .. }
            | ScriptStep::Receive { handle, .. }
            | ScriptStep::Close { handle } => Some(handle),
            _ => None,
        }
    }

    /// The handle access performed by this step.
    pub fn handle_access(&self) -> Option<(AccessKind, u64)> {
        match *self {
            ScriptStep::Read { bytes, .. } => Some((AccessKind::Read, bytes)),
            ScriptStep::Write { bytes, .. } => Some((AccessKind::Write, bytes)),
            ScriptStep::Send { bytes, .. } => Some((AccessKind::Send, bytes)),
            ScriptStep::Receive { bytes, .. } => Some((AccessKind::Receive, bytes)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScriptStep::OpenFile { .. } => "open_file",
            ScriptStep::OpenSocket { .. } => "open_socket",
            ScriptStep::Read { .. } => "read",
            ScriptStep::Write { .. } => "write",
            ScriptStep::Send { .. } => "send",
            ScriptStep::Receive { .. } => "receive",
            ScriptStep::Close { .. } => "close",
            ScriptStep::Allocate { .. } => "allocate",
            ScriptStep::Free { .. } => "free",
            ScriptStep::SubmitAmendment { .. } => "submit_amendment",
            ScriptStep::Terminate => "terminate",
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema error at {path} (line {line}, column {column}): {message}")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    Version(u32),
    #[error("invalid capacity: {0}")]
    Capacity(#[from] CapacityError),
    #[error("duplicate component id {0}")]
    DuplicateComponent(ComponentId),
    #[error("component id {0:?} must be non-empty and free of whitespace")]
    BadComponentId(String),
    #[error("component {component}: contract id {contract} declared twice")]
    DuplicateContract { component: ComponentId, contract: ContractId },
    #[error("component {component}: subscribes to undeclared contract {contract}")]
    DanglingSubscription { component: ComponentId, contract: ContractId },
    #[error("component {component}: step {index} uses handle {handle:?} before any step creates it")]
    DanglingHandle {
        component: ComponentId,
        index: usize,
        handle: String,
    },
}

/// Parses scenario JSON, reporting the JSON path and position of schema
/// errors, then checks cross references.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = parse_json(text)?;
    validate_scenario(&scenario)?;
    Ok(scenario)
}

/// Deserializes any JSON document with path diagnostics.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Schema {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}

pub fn validate_scenario(s: &Scenario) -> Result<(), ScenarioError> {
    if s.schema_version != SCHEMA_VERSION {
        return Err(ScenarioError::Version(s.schema_version));
    }
    PlatformCapacity::from_config(&s.capacity)?;
    let mut ids = HashSet::new();
    for c in &s.components {
        let raw = c.id.as_str();
        if raw.is_empty() || raw.chars().any(|ch| ch.is_whitespace() || ch.is_control()) {
            return Err(ScenarioError::BadComponentId(raw.to_owned()));
        }
        if !ids.insert(&c.id) {
            return Err(ScenarioError::DuplicateComponent(c.id.clone()));
        }
        let mut contracts = HashSet::new();
        for k in &c.contracts {
            if !contracts.insert(&k.id) {
                return Err(ScenarioError::DuplicateContract {
                    component: c.id.clone(),
                    contract: k.id.clone(),
                });
            }
        }
        if let Some(sub) = &c.subscribe {
            if !contracts.contains(sub) {
                return Err(ScenarioError::DanglingSubscription {
                    component: c.id.clone(),
                    contract: sub.clone(),
                });
            }
        }
        let mut bound = HashSet::new();
        for (index, step) in c.script.iter().enumerate() {
            if let Some(h) = step.uses() {
                if !bound.contains(h) {
                    return Err(ScenarioError::DanglingHandle {
                        component: c.id.clone(),
                        index,
                        handle: h.to_owned(),
                    });
                }
            }
            if let Some(h) = step.binds() {
                bound.insert(h);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema_version": 1, "capacity": {"entries": []}}"#;

    #[test]
    fn minimal_scenario() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert!(s.components.is_empty() && s.sanctions.is_empty());
    }

    #[test]
    fn schema_errors_carry_a_path() {
        let text = r#"{"schema_version": 1, "capacity": {"entries": []},
            "components": [{"id": "a", "script": [{"step": "write", "handle": "h", "bytes": -1}]}]}"#;
        match parse_scenario(text) {
            Err(ScenarioError::Schema { path, line, message, .. }) => {
                // Tagged steps are buffered before decoding, so the path
                // stops at the step and the message names the bad value.
                assert_eq!(path, "components[0].script[0]");
                assert_eq!(line, 2);
                assert!(message.contains("-1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_handle_is_reported() {
        let text = r#"{"schema_version": 1, "capacity": {"entries": []},
            "components": [{"id": "a", "script": [{"step": "close", "handle": "h"}]}]}"#;
        assert!(matches!(parse_scenario(text), Err(ScenarioError::DanglingHandle { index: 0, .. })));
    }

    #[test]
    fn wrong_version_and_unknown_fields() {
        let text = r#"{"schema_version": 2, "capacity": {"entries": []}}"#;
        assert!(matches!(parse_scenario(text), Err(ScenarioError::Version(2))));
        let text = r#"{"schema_version": 1, "capacity": {"entries": []}, "extra": 0}"#;
        assert!(matches!(parse_scenario(text), Err(ScenarioError::Schema { .. })));
    }

    #[test]
    fn file_mode_round_trip() {
        for m in ["r", "w", "rw"] {
            let mode: FileMode = serde_json::from_str(&format!("\"{m}\"")).unwrap();
            assert_eq!(mode.to_string(), m);
        }
        assert!(serde_json::from_str::<FileMode>("\"x\"").is_err());
    }
}
