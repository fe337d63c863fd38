import csv
import io
import json
import subprocess
import sys

import pytest

from eaia.cli import main


@pytest.fixture
def state(tmp_path, monkeypatch):
    d = tmp_path / "state"
    monkeypatch.setenv("EAIA_STATE_DIR", str(d))
    assert main(["setup", "--backend", "toy", "--seed", "7"]) == 0
    for vin in ("V1", "V2"):
        assert main(["register", vin, "--seed", "7"]) == 0
    return d


def test_setup_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["setup", "--backend", "toy", "--seed", "7", "--state-dir",
                     str(tmp_path / name)]) == 0
    for f in ("master.key", "authority.log"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_setup_refuses_to_clobber(state, capsys):
    assert main(["setup", "--seed", "1"]) == 2
    assert "already holds" in capsys.readouterr().err
    assert main(["setup", "--seed", "1", "--force"]) == 0


def test_auth_demo(state, capsys):
    capsys.readouterr()
    assert main(["auth-demo", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "SK match: true" in out
    assert "ChallengeMsg (60 bytes)" in out


def test_auth_demo_tamper(state, capsys):
    assert main(["auth-demo", "--seed", "1", "--tamper", "sigma"]) == 3
    assert "SignatureInvalid" in capsys.readouterr().err
    assert main(["auth-demo", "--seed", "1", "--tamper", "eta", "--bit", "9"]) == 3
    assert "TagMismatch" in capsys.readouterr().err


def test_auth_demo_json_and_no_secrets(tmp_path, capsys):
    d = str(tmp_path / "p256")
    assert main(["setup", "--seed", "3", "--state-dir", d]) == 0
    for vin in ("V1", "V2"):
        assert main(["register", vin, "--seed", "3", "--state-dir", d]) == 0
    out = capsys.readouterr().out
    assert main(["auth-demo", "--seed", "1", "--format", "json", "--verbose", "--state-dir", d]) == 0
    out += capsys.readouterr().out
    data = json.loads(out[out.index('{\n  "challenger"'):])
    assert data["sk_match"] is True
    assert [m["message"] for m in data["transcript"]] == ["AuthRequest", "ChallengeMsg", "ResponseMsg"]
    assert all("frame_hex" in m for m in data["transcript"])
    secrets = [(tmp_path / "p256" / "master.key").read_text().strip()]
    for vin in ("V1", "V2"):
        keyfile = json.loads((tmp_path / "p256" / "vehicles" / f"{vin}.json").read_text())
        secrets += [keyfile["x"], keyfile["y"]]
    for secret in secrets:
        assert len(secret) > 40 and secret not in out


def test_auth_demo_needs_two_vehicles(tmp_path, capsys):
    d = str(tmp_path / "s")
    main(["setup", "--seed", "1", "--backend", "toy", "--state-dir", d])
    assert main(["auth-demo", "--state-dir", d]) == 2


def test_register_duplicate(state):
    assert main(["register", "V1", "--seed", "7"]) == 2


def test_missing_state_dir(monkeypatch, capsys):
    monkeypatch.delenv("EAIA_STATE_DIR", raising=False)
    assert main(["register", "V1"]) == 1
    assert "state directory" in capsys.readouterr().err


def test_cost_tables(capsys):
    assert main(["cost", "--table", "IV", "--format", "json"]) == 0
    rows = {r["scheme"]: r for r in json.loads(capsys.readouterr().out)}
    assert rows["EAIA"]["time_ms"] == 2.354 and rows["EAIA"]["matches_published"] is True
    assert main(["cost", "--table", "VII", "--format", "csv"]) == 0
    rows = {r["scheme"]: r for r in csv.DictReader(io.StringIO(capsys.readouterr().out))}
    assert rows["PPMA"]["transmit_mj"] == "1.459" and rows["PPMA"]["discrepancy_note"]
    assert main(["cost", "--table", "V"]) == 0
    assert "52.48" in capsys.readouterr().out


def test_attack_time(capsys):
    assert main(["attack-time", "--p", "0", "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 5 and all(r["avg_time_us"] == r["t_success_us"] for r in rows)
    assert main(["attack-time", "--p", "0.3,0.6", "--model", "montecarlo", "--trials", "2000",
                 "--seed", "1", "--format", "json"]) == 0
    first = capsys.readouterr().out
    main(["attack-time", "--p", "0.3,0.6", "--model", "montecarlo", "--trials", "2000",
          "--seed", "1", "--format", "json"])
    assert capsys.readouterr().out == first
    assert main(["attack-time", "--p", "1.0"]) == 1


def test_sim(tmp_path, capsys):
    assert main(["sim", "replay.json", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "[pass] action 0 (replay) outcome StaleTimestamp" in out
    report = json.loads((tmp_path / "replay.report.json").read_text())
    assert report["passed"]
    assert (tmp_path / "replay.summary.csv").exists()


def test_sim_assertion_failure_exit_4(tmp_path):
    sc = {"name": "wrong", "backend": "toy", "vehicles": ["A", "B"],
          "sessions": [{"at_ms": 0, "requester": "A", "challenger": "B"}],
          "expect": [{"session": 0, "outcome": "Timeout"}]}
    p = tmp_path / "wrong.json"
    p.write_text(json.dumps(sc))
    assert main(["sim", str(p), "--out", str(tmp_path / "r")]) == 4


def test_sim_corrupt_file_leaves_no_report(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    out = tmp_path / "reports"
    assert main(["sim", str(p), "--out", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_sim_seed_override(tmp_path, capsys):
    assert main(["sim", "honest.json", "--seed", "5", "--format", "json", "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"format": "json"}))
    assert main(["cost", "--table", "V", "--config", str(cfg)]) == 0
    json.loads(capsys.readouterr().out)
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["cost", "--table", "V", "--config", str(cfg)]) == 1


def test_output_file(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["cost", "--table", "IV", "--format", "csv", "--out", str(out)]) == 0
    assert out.read_text().startswith("scheme,formula,time_ms")


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["cost"]) == 1
    assert main(["cost", "--table", "IX"]) == 1
    assert main(["--window-ms", "0", "cost", "--table", "IV"]) == 1


def test_bench(capsys):
    assert main(["bench", "--backend", "toy", "--iterations", "2", "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["primitive"] for r in rows} >= {"hash", "sm", "pa", "bp"}


def test_help_and_entry_point():
    r = subprocess.run([sys.executable, "-m", "eaia.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "auth-demo" in r.stdout
    r = subprocess.run([sys.executable, "-m", "eaia.cli", "sim", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0
