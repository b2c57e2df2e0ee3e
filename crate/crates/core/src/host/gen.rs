//! Seeded random scenarios for property tests.
//!
//! Generated scenarios are always schema-valid; contracts, amendments and
//! scripts are drawn from small pools so that routing ties, quota
//! exhaustion, sanctions and capacity contention all occur frequently.

use std::num::NonZeroU32;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broker::{CapacityConfig, CapacityEntryConfig};
use crate::contracts::{
    AccessPermission, Amendment, AmendmentClause, AvailabilityPolicy, ComponentId, Contract, Port,
    ProfileId, Quota, ResourceKind, ResourcePattern, ResourceUtilisationProfile, VPath, KO, MO,
};
use crate::sanctions::{Sanction, SanctionAction, WarningReaction};

use super::scenario::{ComponentSpec, FileMode, Scenario, ScriptStep, SeedFile, SCHEMA_VERSION};

const FILE_PREFIXES: [&str; 4] = ["~", "~/.a", "~/.b", "/tmp"];
const PATHS: [&str; 6] = ["~/.a/x", "~/.a/y", "~/.b/z", "~/c", "/tmp/t", "/etc/p"];
const HOSTS: [&str; 2] = ["example.org", "example.net"];
const PORTS: [u16; 2] = [80, 443];
const AMOUNTS: [u64; 6] = [1, KO, 64 * KO, 200 * KO, 400 * KO, MO];

fn file_pattern(p: &str) -> ResourcePattern {
    ResourcePattern::file(p).expect("pool paths are valid")
}

fn quota_for(kind: ResourceKind, rng: &mut ChaCha8Rng, scale: u64) -> Quota {
    let mut pick = || *[scale / 2, scale, 2 * scale, 4 * scale].choose(rng).expect("non-empty");
    match kind {
        ResourceKind::File => Quota::File {
            read_bytes: pick(),
            write_bytes: pick(),
        },
        ResourceKind::Socket => Quota::Socket {
            sent_bytes: pick(),
            received_bytes: pick(),
        },
        ResourceKind::Memory => Quota::Memory { bytes: pick() },
    }
}

fn permission_for(kind: ResourceKind, rng: &mut ChaCha8Rng) -> AccessPermission {
    loop {
        let p = match kind {
            ResourceKind::File => AccessPermission::File {
                read: rng.gen_bool(0.8),
                write: rng.gen_bool(0.8),
            },
            ResourceKind::Socket => AccessPermission::Socket {
                connect: rng.gen_bool(0.8),
                accept: rng.gen_bool(0.3),
            },
            ResourceKind::Memory => AccessPermission::Memory { allocate: true },
        };
        if !p.is_empty() {
            return p;
        }
    }
}

fn random_pattern(rng: &mut ChaCha8Rng, allow_memory: bool) -> ResourcePattern {
    match rng.gen_range(0..if allow_memory { 10 } else { 8 }) {
        0..=5 => file_pattern(FILE_PREFIXES.choose(rng).expect("non-empty")),
        6 => ResourcePattern::socket("*", Port::Number(80)),
        7 => ResourcePattern::socket(*HOSTS.choose(rng).expect("non-empty"), Port::Any),
        _ => ResourcePattern::Memory,
    }
}

fn random_profile(rng: &mut ChaCha8Rng, id: &str, allow_memory: bool) -> ResourceUtilisationProfile {
    let pattern = random_pattern(rng, allow_memory);
    let kind = pattern.kind();
    ResourceUtilisationProfile {
        id: ProfileId::new(id),
        permission: permission_for(kind, rng),
        quota: quota_for(kind, rng, 256 * KO),
        policy: if rng.gen_bool(0.4) {
            AvailabilityPolicy::Reservation
        } else {
            AvailabilityPolicy::BestEffort
        },
        pattern,
    }
}

fn random_contract(rng: &mut ChaCha8Rng, id: &str) -> Contract {
    let n = rng.gen_range(1..=4);
    let mut profiles: Vec<ResourceUtilisationProfile> = Vec::new();
    for i in 0..n {
        let has_memory = profiles.iter().any(|p| p.kind() == ResourceKind::Memory);
        profiles.push(random_profile(rng, &format!("p{i}"), !has_memory));
    }
    Contract::new(id, profiles)
}

fn random_amendment(rng: &mut ChaCha8Rng, contract: &Contract, serial: usize) -> Amendment {
    let target = contract.profiles.choose(rng).expect("contracts are non-empty");
    let clause = match rng.gen_range(0..3) {
        0 => {
            let has_memory = contract.profiles.iter().any(|p| p.kind() == ResourceKind::Memory);
            AmendmentClause::Add {
                profile: random_profile(rng, &format!("q{serial}"), !has_memory),
            }
        }
        1 => AmendmentClause::Remove {
            target_profile_id: target.id.clone(),
        },
        _ => {
            let mut profile = target.clone();
            profile.quota = quota_for(profile.kind(), rng, MO);
            AmendmentClause::Modify {
                target_profile_id: target.id.clone(),
                profile,
            }
        }
    };
    Amendment {
        contract_id: contract.id.clone(),
        clauses: vec![clause],
    }
}

fn random_capacity(rng: &mut ChaCha8Rng) -> CapacityConfig {
    let mut entries = Vec::new();
    for p in ["~", "/tmp"] {
        entries.push(CapacityEntryConfig {
            pattern: file_pattern(p),
            permission: AccessPermission::all(ResourceKind::File),
            quota: quota_for(ResourceKind::File, rng, 3 * MO),
        });
    }
    if rng.gen_bool(0.7) {
        entries.push(CapacityEntryConfig {
            pattern: file_pattern("~/.a"),
            permission: AccessPermission::File {
                read: true,
                write: rng.gen_bool(0.7),
            },
            quota: quota_for(ResourceKind::File, rng, MO),
        });
    }
    entries.push(CapacityEntryConfig {
        pattern: ResourcePattern::Memory,
        permission: AccessPermission::all(ResourceKind::Memory),
        quota: quota_for(ResourceKind::Memory, rng, 2 * MO),
    });
    entries.push(CapacityEntryConfig {
        pattern: ResourcePattern::socket("*", Port::Any),
        permission: AccessPermission::all(ResourceKind::Socket),
        quota: quota_for(ResourceKind::Socket, rng, 2 * MO),
    });
    CapacityConfig { entries }
}

fn random_sanction(rng: &mut ChaCha8Rng) -> Sanction {
    let pattern = match rng.gen_range(0..6) {
        0 => file_pattern("~"),
        1 => file_pattern("~/.a"),
        2 => file_pattern("/tmp"),
        3 => ResourcePattern::socket("*", Port::Number(80)),
        4 => ResourcePattern::socket("*", Port::Any),
        _ => ResourcePattern::Memory,
    };
    let action = if rng.gen_bool(0.5) {
        SanctionAction::Reject
    } else {
        SanctionAction::Lock
    };
    if rng.gen_bool(0.4) {
        Sanction::Immediate { pattern, action }
    } else {
        Sanction::Deferred {
            pattern,
            action,
            threshold: NonZeroU32::new(rng.gen_range(1..=4)).expect("positive"),
        }
    }
}

/// Paths a script is likely to touch: mostly under the contract's file
/// patterns, sometimes anywhere in the pool.
fn pick_path(rng: &mut ChaCha8Rng, contract: Option<&Contract>) -> String {
    let prefixes: Vec<&str> = contract
        .into_iter()
        .flat_map(|c| &c.profiles)
        .filter_map(|p| match &p.pattern {
            ResourcePattern::File { path_prefix } => Some(path_prefix.as_str()),
            _ => None,
        })
        .collect();
    match prefixes.choose(rng) {
        Some(prefix) if rng.gen_bool(0.75) => {
            let leaf = *["x", "y", "z/w"].choose(rng).expect("non-empty");
            format!("{prefix}/{leaf}")
        }
        _ => PATHS.choose(rng).expect("non-empty").to_string(),
    }
}

fn random_script(rng: &mut ChaCha8Rng, contract: Option<&Contract>) -> Vec<ScriptStep> {
    let len = rng.gen_range(3..=30);
    let mut names: Vec<(String, ResourceKind)> = Vec::new();
    let mut steps = Vec::new();
    for i in 0..len {
        let amount = *AMOUNTS.choose(rng).expect("non-empty");
        let roll = if names.is_empty() { rng.gen_range(0..5) } else { rng.gen_range(0..24) };
        let step = match roll {
            0..=2 => {
                let name = format!("h{i}");
                names.push((name.clone(), ResourceKind::File));
                let mode = *[
                    FileMode { read: true, write: false },
                    FileMode { read: false, write: true },
                    FileMode { read: true, write: true },
                    FileMode { read: true, write: true },
                ]
                .choose(rng)
                .expect("non-empty");
                ScriptStep::OpenFile {
                    path: pick_path(rng, contract),
                    mode,
                    name,
                }
            }
            3 => {
                let name = format!("h{i}");
                names.push((name.clone(), ResourceKind::Socket));
                ScriptStep::OpenSocket {
                    host: HOSTS.choose(rng).expect("non-empty").to_string(),
                    port: *PORTS.choose(rng).expect("non-empty"),
                    name,
                }
            }
            4 | 5 => ScriptStep::Allocate { bytes: amount },
            6 => ScriptStep::Free { bytes: amount },
            7 => ScriptStep::Close {
                handle: names.choose(rng).expect("non-empty").0.clone(),
            },
            8 => match contract {
                Some(c) if rng.gen_bool(0.5) => ScriptStep::SubmitAmendment {
                    amendment: random_amendment(rng, c, i),
                },
                _ => ScriptStep::Allocate { bytes: amount },
            },
            9 if rng.gen_bool(0.15) => ScriptStep::Terminate,
            _ => {
                let (handle, kind) = names.choose(rng).expect("non-empty").clone();
                let first = rng.gen_bool(0.5);
                match (kind, first) {
                    (ResourceKind::File, true) => ScriptStep::Read { handle, bytes: amount },
                    (ResourceKind::File, false) => ScriptStep::Write { handle, bytes: amount },
                    (_, true) => ScriptStep::Send { handle, bytes: amount },
                    (_, false) => ScriptStep::Receive { handle, bytes: amount },
                }
            }
        };
        steps.push(step);
    }
    steps
}

/// A schema-valid scenario drawn from `seed`.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = random_capacity(&mut rng);
    let sanctions = (0..rng.gen_range(0..=3)).map(|_| random_sanction(&mut rng)).collect();
    let components = (0..rng.gen_range(1..=3))
        .map(|i| {
            let contracts: Vec<Contract> = (0..rng.gen_range(1..=2))
                .map(|j| random_contract(&mut rng, &format!("k{i}{j}")))
                .collect();
            let subscribe = contracts.choose(&mut rng).map(|c| c.id.clone());
            let chosen = contracts.iter().find(|c| Some(&c.id) == subscribe.as_ref()).cloned();
            let script = random_script(&mut rng, chosen.as_ref());
            let files = script
                .iter()
                .filter_map(|st| match st {
                    ScriptStep::OpenFile { path, .. } if rng.gen_bool(0.6) => Some(SeedFile {
                        path: VPath::parse(path).expect("generated paths are valid"),
                        size: KO,
                    }),
                    _ => None,
                })
                .collect();
            let warning_handlers = (0..rng.gen_range(0..=2))
                .map(|k| match &chosen {
                    Some(c) if rng.gen_bool(0.7) => WarningReaction::Amend {
                        amendment: random_amendment(&mut rng, c, 100 + k),
                    },
                    _ => WarningReaction::Terminate,
                })
                .collect();
            ComponentSpec {
                id: ComponentId::new(format!("c{i}")),
                contracts,
                subscribe: subscribe.filter(|_| rng.gen_bool(0.9)),
                files,
                script,
                warning_handlers,
            }
        })
        .collect();
    Scenario {
        schema_version: SCHEMA_VERSION,
        capacity,
        sanctions,
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::scenario::validate_scenario;

    #[test]
    fn generated_scenarios_validate() {
        for seed in 0..200 {
            let s = random_scenario(seed);
            validate_scenario(&s).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            let text = serde_json::to_string(&s).unwrap();
            assert_eq!(crate::host::parse_scenario(&text).unwrap(), s);
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(random_scenario(7), random_scenario(7));
        assert_ne!(random_scenario(7), random_scenario(8));
    }
}
