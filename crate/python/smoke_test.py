"""Smoke test for the jamus Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/py
then run:
    python3 python/smoke_test.py
"""

import json
import pathlib

import jamus

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "crates" / "core" / "scenarios"
KO = 1024
MO = 1024 * KO


def file_profile(pid, prefix, read, write, policy="best_effort"):
    return {
        "id": pid,
        "pattern": {"kind": "file", "path_prefix": prefix},
        "permission": {"kind": "file", "read": True, "write": True},
        "quota": {"kind": "file", "read_bytes": read, "write_bytes": write},
        "policy": policy,
    }


def memory_profile(pid, size):
    return {
        "id": pid,
        "pattern": {"kind": "memory"},
        "permission": {"kind": "memory", "allocate": True},
        "quota": {"kind": "memory", "bytes": size},
        "policy": "reservation",
    }


def test_jmailer_run():
    text = (SCENARIOS / "jmailer.json").read_text()
    result = jamus.run_scenario(text)
    assert result.exit_code == 0
    report = json.loads(result.report)
    comp = report["components"][0]
    assert {p["id"] for p in comp["contract_in_force"]["profiles"]} == {"r1", "r3", "r5"}
    assert comp["violations"] == []
    assert jamus.verify_trace(result.trace, text) == []

    edited = result.trace.replace("\tallow\n", "\treject:quota\n", 1)
    assert jamus.verify_trace(edited, text) != []


def test_check():
    check_dir = SCENARIOS / "check"
    code, report = jamus.check(
        (check_dir / "contract1.json").read_text(),
        (check_dir / "capacity-1Mo-memory.json").read_text(),
    )
    assert code == 1
    clauses = json.loads(report)["conflicting_clauses"]
    assert [(c["profile_id"], c["reason"]) for c in clauses] == [("r4", "quota_exceeded")]


def test_broker():
    capacity = {
        "entries": [
            {
                "pattern": {"kind": "memory"},
                "permission": {"kind": "memory", "allocate": True},
                "quota": {"kind": "memory", "bytes": 2 * MO},
            }
        ]
    }
    broker = jamus.Broker(json.dumps(capacity))
    a = {"id": "a", "profiles": [memory_profile("m", MO)]}
    b = {"id": "b", "profiles": [memory_profile("m", 2 * MO)]}
    rid, _ = broker.subscribe("c1", json.dumps(a))
    assert rid is not None
    rejected, report = broker.subscribe("c2", json.dumps(b))
    assert rejected is None
    assert json.loads(report)["conflicting_clauses"][0]["available"]["bytes"] == MO
    assert broker.is_conserved()
    broker.release(rid)
    remaining = json.loads(broker.capacity())["entries"][0]["remaining_quota"]["bytes"]
    assert remaining == 2 * MO


def test_container_quota_and_lock():
    contract = {
        "id": "mail",
        "profiles": [
            file_profile("r1", "~/.jmailer", 500 * KO, 500 * KO),
            {
                "id": "net",
                "pattern": {"kind": "socket", "host_glob": "*", "port": 80},
                "permission": {"kind": "socket", "connect": True, "accept": False},
                "quota": {"kind": "socket", "sent_bytes": KO, "received_bytes": KO},
                "policy": "best_effort",
            },
        ],
    }
    sanctions = [
        {
            "kind": "immediate",
            "pattern": {"kind": "socket", "host_glob": "*", "port": 80},
            "action": "lock",
        }
    ]
    c = jamus.Container("jmailer")
    c.configure(json.dumps(contract), json.dumps(sanctions))
    h = c.open_file("~/.jmailer/mbox", "rw")
    assert c.access(h, "write", 400 * KO) == "allow"
    assert c.access(h, "write", 200 * KO) == "reject:quota"
    assert len(json.loads(c.violations())) == 1

    s = c.open_socket("mail.example", 80)
    assert c.access(s, "send", 2 * KO) == "lock:quota"
    assert c.handle_state(s) == "locked"
    try:
        c.access(s, "send", 1)
    except PermissionError:
        pass
    else:
        raise AssertionError("send on a locked handle should fail")
    assert len(json.loads(c.violations())) == 2

    try:
        c.open_file("~/.elsewhere/x", "w")
    except PermissionError:
        pass
    else:
        raise AssertionError("unmatched resource should be vetoed")


def test_random_scenarios_verify():
    for seed in range(20):
        text = jamus.random_scenario(seed)
        result = jamus.run_scenario(text, seed=seed)
        assert jamus.verify_trace(result.trace, text) == [], seed


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok  {t.__name__}")
    print(f"{len(tests)} smoke tests passed")
