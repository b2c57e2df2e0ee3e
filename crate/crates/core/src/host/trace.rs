//! The text trace format.
//!
//! The first line is `# jamus-trace v1`. Every other line has seven
//! tab-separated columns:
//!
//! | column | content |
//! |---|---|
//! | seq | per-container sequence number |
//! | component | component id |
//! | variant | `Created`, `AccessRequested`, `AccessCompleted`, `Destroyed`, `Bound` or `Unbound` |
//! | descriptor | `<handle>@<resource>` such as `0@file:~/.jmailer/mbox`, or `contract:<json>` / `contract:<id>` |
//! | access | access kind, the open mode of a `Created` line (`read+write`), or `-` |
//! | amount | bytes, or `-` |
//! | verdict | `allow`, `reject:<reason>`, `lock:<reason>`, or `-` |
//!
//! Lines appear in execution order across all containers. `Bound` lines
//! carry the full contract a container enforces from that point on as
//! compact JSON; `Unbound` lines only the contract id.

use std::fmt::Write as _;

use thiserror::Error;

use crate::contracts::{
    AccessKind, AccessPermission, ComponentId, Contract, ContractId, ResourceDescriptor, VPath,
};
use crate::resources::{AccessVerdict, DenyReason, HandleId, TraceKind, TraceRecord};

pub const TRACE_HEADER: &str = "# jamus-trace v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineBody {
    Created {
        handle: HandleId,
        descriptor: ResourceDescriptor,
        mode: AccessPermission,
        verdict: AccessVerdict,
    },
    AccessRequested {
        handle: HandleId,
        descriptor: ResourceDescriptor,
        access: AccessKind,
        amount: u64,
        verdict: AccessVerdict,
    },
    AccessCompleted {
        handle: HandleId,
        descriptor: ResourceDescriptor,
        access: AccessKind,
        amount: u64,
    },
    Destroyed {
        handle: HandleId,
        descriptor: ResourceDescriptor,
    },
    Bound {
        contract: Contract,
    },
    Unbound {
        contract_id: ContractId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub seq: u64,
    pub component: ComponentId,
    pub body: LineBody,
}

pub fn render_mode(mode: &AccessPermission) -> String {
    AccessKind::ALL
        .iter()
        .filter(|a| !matches!(a, AccessKind::Send | AccessKind::Receive | AccessKind::Free))
        .filter(|a| mode.allows(**a) == Some(true))
        .map(|a| a.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn parse_mode(s: &str) -> Option<AccessPermission> {
    let mut kinds = Vec::new();
    for part in s.split('+') {
        kinds.push(AccessKind::parse(part)?);
    }
    let has = |k| kinds.contains(&k);
    let mode = match kinds.first()? {
        AccessKind::Read | AccessKind::Write => AccessPermission::File {
            read: has(AccessKind::Read),
            write: has(AccessKind::Write),
        },
        AccessKind::Connect | AccessKind::Accept => AccessPermission::Socket {
            connect: has(AccessKind::Connect),
            accept: has(AccessKind::Accept),
        },
        AccessKind::Allocate => AccessPermission::Memory { allocate: true },
        _ => return None,
    };
    (render_mode(&mode) == s).then_some(mode)
}

pub fn render_descriptor(d: &ResourceDescriptor) -> String {
    d.to_string()
}

fn parse_descriptor(s: &str) -> Option<ResourceDescriptor> {
    if let Some(p) = s.strip_prefix("file:") {
        return VPath::parse(p).ok().map(|path| ResourceDescriptor::File { path });
    }
    if let Some(rest) = s.strip_prefix("socket:") {
        let (host, port) = rest.rsplit_once(':')?;
        let port: u16 = port.parse().ok()?;
        if host.is_empty() || port == 0 {
            return None;
        }
        return Some(ResourceDescriptor::Socket {
            host: host.to_owned(),
            port,
        });
    }
    let c = s.strip_prefix("memory:")?;
    (!c.is_empty()).then(|| ResourceDescriptor::Memory {
        component: ComponentId::new(c),
    })
}

fn parse_verdict(s: &str) -> Option<AccessVerdict> {
    if s == "allow" {
        return Some(AccessVerdict::Allow);
    }
    let (kind, reason) = s.split_once(':')?;
    let reason = DenyReason::parse(reason)?;
    match kind {
        "reject" => Some(AccessVerdict::Reject(reason)),
        "lock" => Some(AccessVerdict::Lock(reason)),
        _ => None,
    }
}

impl TraceLine {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let (variant, descriptor, access, amount, verdict) = match &self.body {
            LineBody::Created {
                handle,
                descriptor,
                mode,
                verdict,
            } => (
                "Created",
                format!("{handle}@{descriptor}"),
                render_mode(mode),
                "-".to_owned(),
                verdict.to_string(),
            ),
            LineBody::AccessRequested {
                handle,
                descriptor,
                access,
                amount,
                verdict,
            } => (
                "AccessRequested",
                format!("{handle}@{descriptor}"),
                access.to_string(),
                amount.to_string(),
                verdict.to_string(),
            ),
            LineBody::AccessCompleted {
                handle,
                descriptor,
                access,
                amount,
            } => (
                "AccessCompleted",
                format!("{handle}@{descriptor}"),
                access.to_string(),
                amount.to_string(),
                "-".to_owned(),
            ),
            LineBody::Destroyed { handle, descriptor } => (
                "Destroyed",
                format!("{handle}@{descriptor}"),
                "-".to_owned(),
                "-".to_owned(),
                "-".to_owned(),
            ),
            LineBody::Bound { contract } => (
                "Bound",
                format!(
                    "contract:{}",
                    serde_json::to_string(contract).expect("contracts serialize")
                ),
                "-".to_owned(),
                "-".to_owned(),
                "-".to_owned(),
            ),
            LineBody::Unbound { contract_id } => (
                "Unbound",
                format!("contract:{contract_id}"),
                "-".to_owned(),
                "-".to_owned(),
                "-".to_owned(),
            ),
        };
        let _ = write!(
            out,
            "{}\t{}\t{variant}\t{descriptor}\t{access}\t{amount}\t{verdict}",
            self.seq, self.component
        );
        out
    }

    /// Builds a line from a raw record; `descriptor` resolves handles.
    pub fn from_record(
        component: &ComponentId,
        record: TraceRecord,
        descriptor: impl Fn(HandleId) -> ResourceDescriptor,
    ) -> TraceLine {
        let (seq, body) = match record {
            TraceRecord::Bound { seq, contract } => (seq, LineBody::Bound { contract }),
            TraceRecord::Unbound { seq, contract_id } => (seq, LineBody::Unbound { contract_id }),
            TraceRecord::Event {
                seq,
                kind,
                handle,
                access,
                mode,
                amount,
                verdict,
            } => {
                let d = descriptor(handle);
                let body = match kind {
                    TraceKind::Created => LineBody::Created {
                        handle,
                        descriptor: d,
                        mode: mode.expect("creation records carry a mode"),
                        verdict: verdict.expect("creation records carry a verdict"),
                    },
                    TraceKind::AccessRequested => LineBody::AccessRequested {
                        handle,
                        descriptor: d,
                        access: access.expect("access records carry a kind"),
                        amount: amount.expect("access records carry an amount"),
                        verdict: verdict.expect("request records carry a verdict"),
                    },
                    TraceKind::AccessCompleted => LineBody::AccessCompleted {
                        handle,
                        descriptor: d,
                        access: access.expect("access records carry a kind"),
                        amount: amount.expect("access records carry an amount"),
                    },
                    TraceKind::Destroyed => LineBody::Destroyed { handle, descriptor: d },
                };
                (seq, body)
            }
        };
        TraceLine {
            seq,
            component: component.clone(),
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceParseError {
    #[error("line 1: missing `{TRACE_HEADER}` header")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

fn bad(line: usize, message: impl Into<String>) -> TraceParseError {
    TraceParseError::Line {
        line,
        message: message.into(),
    }
}

fn parse_handle_descriptor(line: usize, s: &str) -> Result<(HandleId, ResourceDescriptor), TraceParseError> {
    let (h, d) = s
        .split_once('@')
        .ok_or_else(|| bad(line, format!("expected <handle>@<resource>, got {s:?}")))?;
    let h: u32 = h.parse().map_err(|_| bad(line, format!("bad handle {h:?}")))?;
    let d = parse_descriptor(d).ok_or_else(|| bad(line, format!("bad resource {d:?}")))?;
    Ok((HandleId(h), d))
}

fn dash(line: usize, s: &str, what: &str) -> Result<(), TraceParseError> {
    if s == "-" {
        Ok(())
    } else {
        Err(bad(line, format!("{what} column must be `-`, got {s:?}")))
    }
}

/// Parses one non-header line. `line` is 1-based and only used in errors.
pub fn parse_line(line: usize, text: &str) -> Result<TraceLine, TraceParseError> {
    let cols: Vec<&str> = text.split('\t').collect();
    let [seq, component, variant, descriptor, access, amount, verdict] = cols[..] else {
        return Err(bad(line, format!("expected 7 tab-separated columns, got {}", cols.len())));
    };
    let seq: u64 = seq.parse().map_err(|_| bad(line, format!("bad sequence number {seq:?}")))?;
    if component.is_empty() {
        return Err(bad(line, "empty component id"));
    }
    let parse_access =
        |s: &str| AccessKind::parse(s).ok_or_else(|| bad(line, format!("bad access kind {s:?}")));
    let parse_amount = |s: &str| s.parse::<u64>().map_err(|_| bad(line, format!("bad amount {s:?}")));
    let parse_v = |s: &str| parse_verdict(s).ok_or_else(|| bad(line, format!("bad verdict {s:?}")));
    let body = match variant {
        "Created" => {
            let (handle, descriptor) = parse_handle_descriptor(line, descriptor)?;
            let mode = parse_mode(access).ok_or_else(|| bad(line, format!("bad open mode {access:?}")))?;
            dash(line, amount, "amount")?;
            LineBody::Created {
                handle,
                descriptor,
                mode,
                verdict: parse_v(verdict)?,
            }
        }
        "AccessRequested" => {
            let (handle, descriptor) = parse_handle_descriptor(line, descriptor)?;
            LineBody::AccessRequested {
                handle,
                descriptor,
                access: parse_access(access)?,
                amount: parse_amount(amount)?,
                verdict: parse_v(verdict)?,
            }
        }
        "AccessCompleted" => {
            let (handle, descriptor) = parse_handle_descriptor(line, descriptor)?;
            dash(line, verdict, "verdict")?;
            LineBody::AccessCompleted {
                handle,
                descriptor,
                access: parse_access(access)?,
                amount: parse_amount(amount)?,
            }
        }
        "Destroyed" => {
            let (handle, descriptor) = parse_handle_descriptor(line, descriptor)?;
            for (s, what) in [(access, "access"), (amount, "amount"), (verdict, "verdict")] {
                dash(line, s, what)?;
            }
            LineBody::Destroyed { handle, descriptor }
        }
        "Bound" | "Unbound" => {
            for (s, what) in [(access, "access"), (amount, "amount"), (verdict, "verdict")] {
                dash(line, s, what)?;
            }
            let payload = descriptor
                .strip_prefix("contract:")
                .ok_or_else(|| bad(line, "expected contract:<...>"))?;
            if variant == "Bound" {
                let contract: Contract =
                    serde_json::from_str(payload).map_err(|e| bad(line, format!("bad contract: {e}")))?;
                LineBody::Bound { contract }
            } else {
                LineBody::Unbound {
                    contract_id: ContractId::new(payload),
                }
            }
        }
        other => return Err(bad(line, format!("unknown event variant {other:?}"))),
    };
    Ok(TraceLine {
        seq,
        component: ComponentId::new(component),
        body,
    })
}

/// Parses a whole trace. Returned pairs hold the 1-based file line.
pub fn parse_trace(text: &str) -> Result<Vec<(usize, TraceLine)>, TraceParseError> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(TraceParseError::MissingHeader);
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_line(i + 2, l).map(|t| (i + 2, t)))
        .collect()
}

pub fn render_trace<'a>(lines: impl IntoIterator<Item = &'a TraceLine>) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for l in lines {
        out.push_str(&l.render());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::fixtures::contract2;

    fn sample() -> Vec<TraceLine> {
        let comp = ComponentId::new("jmailer");
        let file = ResourceDescriptor::File {
            path: VPath::parse("~/.jmailer/mbox").unwrap(),
        };
        let line = |seq, body| TraceLine {
            seq,
            component: comp.clone(),
            body,
        };
        vec![
            line(1, LineBody::Bound { contract: contract2() }),
            line(
                2,
                LineBody::Created {
                    handle: HandleId(0),
                    descriptor: file.clone(),
                    mode: AccessPermission::File { read: true, write: true },
                    verdict: AccessVerdict::Allow,
                },
            ),
            line(
                3,
                LineBody::AccessRequested {
                    handle: HandleId(0),
                    descriptor: file.clone(),
                    access: AccessKind::Write,
                    amount: 10,
                    verdict: AccessVerdict::Lock(DenyReason::Quota),
                },
            ),
            line(
                4,
                LineBody::Created {
                    handle: HandleId(1),
                    descriptor: ResourceDescriptor::Socket {
                        host: "example.org".into(),
                        port: 80,
                    },
                    mode: AccessPermission::Socket {
                        connect: true,
                        accept: false,
                    },
                    verdict: AccessVerdict::Reject(DenyReason::Unmatched),
                },
            ),
            line(
                5,
                LineBody::Destroyed {
                    handle: HandleId(0),
                    descriptor: file,
                },
            ),
            line(
                6,
                LineBody::Unbound {
                    contract_id: ContractId::new("contract2"),
                },
            ),
        ]
    }

    #[test]
    fn round_trip() {
        let lines = sample();
        let text = render_trace(&lines);
        assert!(text.starts_with("# jamus-trace v1\n1\tjmailer\tBound\tcontract:{"));
        assert!(text.contains("\n3\tjmailer\tAccessRequested\t0@file:~/.jmailer/mbox\twrite\t10\tlock:quota\n"));
        assert!(text.contains("\n2\tjmailer\tCreated\t0@file:~/.jmailer/mbox\tread+write\t-\tallow\n"));
        let parsed: Vec<TraceLine> = parse_trace(&text).unwrap().into_iter().map(|(_, l)| l).collect();
        assert_eq!(parsed, lines);
    }

    #[test]
    fn errors_name_the_line() {
        let text = format!("{TRACE_HEADER}\n1\ta\tCreated\tx\tread\t-\tallow\n");
        assert!(matches!(parse_trace(&text), Err(TraceParseError::Line { line: 2, .. })));
        assert_eq!(parse_trace("1\ta"), Err(TraceParseError::MissingHeader));
        let text = format!("{TRACE_HEADER}\n1\ta\tCreated\n");
        assert!(matches!(parse_trace(&text), Err(TraceParseError::Line { line: 2, .. })));
    }

    #[test]
    fn modes() {
        for m in ["read", "write", "read+write", "connect", "accept", "connect+accept", "allocate"] {
            assert_eq!(render_mode(&parse_mode(m).unwrap()), m);
        }
        assert!(parse_mode("write+read").is_none());
        assert!(parse_mode("send").is_none());
    }
}
