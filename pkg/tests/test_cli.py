"""End-to-end tests of the command line."""

import json
from pathlib import Path

from amp.cli import main

ROOT = Path(__file__).resolve().parent.parent
PROTOCOLS = ROOT / "protocols"


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out


def test_validate_reports_tame(capsys):
    code, out = run(capsys, "validate", str(PROTOCOLS / "kle.psm.json"),
                    "--json")
    assert code == 0
    report = json.loads(out)
    assert report["tame"] is True
    assert report["perChannelBounds"] == {"e>o": 1, "o>e": 1}
    assert report["choiceClass"] == "sender-driven"
    assert report["sinkFinal"] is True


def test_validate_empty_protocol_trivially_ok(tmp_path, capsys):
    empty = tmp_path / "empty.psm.json"
    empty.write_text(json.dumps({
        "states": ["a"], "initial": "a", "finals": ["a"], "transitions": []}))
    code, out = run(capsys, "validate", str(empty), "--json")
    assert code == 0
    report = json.loads(out)
    assert report["bound"] == 0 and report["tame"] is True


def test_validate_rejects_garbage(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "states": ["a"], "initial": "a", "finals": [],
        "transitions": [{"from": "a", "to": "a",
                         "event": {"kind": "send", "sender": "p",
                                   "receiver": "q", "label": "m",
                                   "payload": None}}]}))
    code, _ = run(capsys, "validate", str(bad))
    assert code == 1


def test_bounds_subcommand(capsys):
    code, out = run(capsys, "bounds", str(PROTOCOLS / "kle.psm.json"),
                    "--json")
    assert code == 0
    assert json.loads(out)["perChannelBounds"] == {"e>o": 1, "o>e": 1}


def test_project_writes_csm(tmp_path, capsys):
    out_file = tmp_path / "out.csm.json"
    code, _ = run(capsys, "project", str(PROTOCOLS / "kle.psm.json"),
                  "-o", str(out_file))
    assert code == 0
    data = json.loads(out_file.read_text())
    assert set(data) == {"e", "o"}


def test_project_from_global_type(capsys):
    code, out = run(capsys, "project",
                    str(PROTOCOLS / "three_party_choice.gt"), "--json")
    assert code == 0
    assert json.loads(out)["result"] == "ok"


def test_project_rejects_lose_protocol(capsys):
    code, out = run(capsys, "project",
                    str(PROTOCOLS / "leader_election_lose.gt"), "--json")
    assert code == 1
    assert json.loads(out)["result"] == "NotProjectable"


def test_project_rejects_mixed_choice_as_not_tame(capsys):
    code, out = run(capsys, "project",
                    str(PROTOCOLS / "mixed_choice_toy.gt"), "--json")
    assert code == 1
    assert json.loads(out)["result"] == "NotTame"


def test_project_strong_flag(capsys):
    code, out = run(capsys, "project", str(PROTOCOLS / "nonsink_choice.gt"),
                    "--strong", "--json")
    assert code == 1
    report = json.loads(out)
    assert report["strong"] is False and report["witnesses"]
    code, out = run(capsys, "project", str(PROTOCOLS / "kle.psm.json"),
                    "--strong", "--json")
    assert code == 0
    assert json.loads(out)["strong"] is True


def test_encode_and_decode_fsm_roundtrip(tmp_path, capsys):
    """Encode the game, project one participant, decode its machine."""
    encoded_file = tmp_path / "enc.json"
    code, _ = run(capsys, "encode", str(PROTOCOLS / "kle.psm.json"),
                  "--bounds", "auto", "-o", str(encoded_file))
    assert code == 0
    data = json.loads(encoded_file.read_text())
    assert any("(e,o)0" in s.get("event", {}).get("receiver", "")
               for s in data["transitions"])

    from amp.core import dump_machine, load_machine
    from amp.projection import minimize, subset_construction
    local_file = tmp_path / "e_local.json"
    encoded = load_machine(encoded_file.read_text())
    local_file.write_text(dump_machine(
        minimize(subset_construction(encoded, "e"))))
    code, out = run(capsys, "decode-fsm", str(local_file))
    assert code == 0
    decoded = json.loads(out)
    events = [t["event"] for t in decoded["transitions"]
              if t["event"]["kind"] != "eps"]
    participants = ({e["sender"] for e in events}
                    | {e["receiver"] for e in events})
    assert participants == {"e", "o"}


def test_encode_with_bounds_file(tmp_path, capsys):
    bounds_file = tmp_path / "bounds.json"
    bounds_file.write_text(json.dumps({"e>o": 1, "o>e": 1}))
    code, out = run(capsys, "encode", str(PROTOCOLS / "kle.psm.json"),
                    "--bounds", str(bounds_file))
    assert code == 0 and "(e,o)0" in out


def test_check_csm_and_against(capsys):
    code, out = run(capsys, "check-csm", str(PROTOCOLS / "kle.csm.json"),
                    "--queue-cap", "2", "--against",
                    str(PROTOCOLS / "kle.psm.json"), "--json")
    assert code == 0
    report = json.loads(out)
    assert report["deadlocks"] == 0
    assert report["projection"]["passed"] is True


def test_simulate_deterministic(capsys):
    code, first = run(capsys, "simulate", str(PROTOCOLS / "kle.csm.json"),
                      "--seed", "3")
    assert code == 0
    _, second = run(capsys, "simulate", str(PROTOCOLS / "kle.csm.json"),
                    "--seed", "3")
    assert first == second and first.strip()


def test_to_global_and_back(tmp_path, capsys):
    out_file = tmp_path / "roundtrip.gt"
    code, out = run(capsys, "to-global",
                    str(PROTOCOLS / "three_party_choice.psm.json"),
                    "-o", str(out_file))
    assert code == 0
    code, _ = run(capsys, "from-global", str(out_file),
                  "-o", str(tmp_path / "back.json"))
    assert code == 0
    from amp.core import languages_equal_upto, load_machine
    back = load_machine((tmp_path / "back.json").read_text())
    original = load_machine(
        (PROTOCOLS / "three_party_choice.psm.json").read_text())
    assert languages_equal_upto(back, original, 8)


def test_to_local(capsys):
    code, out = run(capsys, "to-local", str(PROTOCOLS / "one_buyer.gt"),
                    "--participant", "s", "--json")
    assert code == 0
    assert "query" in json.loads(out)["local"]


def test_typecheck_program(capsys):
    code, out = run(capsys, "typecheck",
                    str(PROTOCOLS / "programs" / "delegation.amp"),
                    "--harness", "--steps", "10", "--seeds", "2", "--json")
    assert code == 0
    report = json.loads(out)
    assert report["result"] == "ok"
    assert report["harness"]["failures"] == []


def test_typecheck_rejects_bad_program(tmp_path, capsys):
    bad = tmp_path / "bad.amp"
    bad.write_text("csm Ping = %s\nmain = new s : Ping in 0\n"
                   % (PROTOCOLS / "ping.csm.json"))
    code, out = run(capsys, "typecheck", str(bad), "--json")
    assert code == 1
    assert json.loads(out)["result"] == "ill-typed"


def test_dot_outputs(capsys):
    code, out = run(capsys, "dot", str(PROTOCOLS / "kle.psm.json"))
    assert code == 0 and out.startswith("digraph")
    code, out = run(capsys, "dot", str(PROTOCOLS / "kle.csm.json"))
    assert code == 0 and "cluster_e" in out


def test_usage_error_exit_code(capsys):
    assert main(["no-such-command"]) == 2
    assert main(["validate", "/nonexistent/file.json"]) == 2


def test_reports_are_byte_stable(capsys):
    _, first = run(capsys, "validate", str(PROTOCOLS / "kle.psm.json"),
                   "--json")
    _, second = run(capsys, "validate", str(PROTOCOLS / "kle.psm.json"),
                    "--json")
    assert first == second
