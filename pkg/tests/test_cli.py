import csv
import json

from fastapi.testclient import TestClient

from rappor import cli
from rappor.client import parse_report
from rappor.params import Params
from rappor.service import create_app

CONFIG = cli.CONFIG_DIR / "exponential.json"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_shipped_configs_load():
    assert Params.load(CONFIG).to_dict() == {"k": 128, "h": 2, "f": 0.5, "p": 0.5, "q": 0.75,
                                             "m": 16, "mode": "standard"}
    assert Params.load(cli.CONFIG_DIR / "normal.json").mode == "basic_one_time"


def test_privacy(capsys):
    code, out, _ = run(capsys, "privacy", "--config", CONFIG)
    assert code == 0
    assert "0.6875" in out and "4.3944" in out and "1.0743" in out


def test_invalid_config_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"k": 8, "h": 1, "f": 0, "p": 0.9, "q": 0.5, "m": 1, "mode": "standard"}))
    code, _, err = run(capsys, "privacy", "--config", bad)
    assert code == 2 and "p < q violated" in err


def test_encode_memoizes_across_invocations(capsys, tmp_path):
    values = tmp_path / "values.txt"
    values.write_text("apple\nbanana\napple\n")
    memo = tmp_path / "memo.json"
    code, out, _ = run(capsys, "encode", "--config", CONFIG, "--cohort", 3, "--memo", memo,
                       "--value-file", values, "--seed", 1)
    assert code == 0
    params = Params.load(CONFIG)
    reports = [parse_report(line, params) for line in out.splitlines()]
    assert len(reports) == 3 and all(r.cohort == 3 for r in reports)
    assert len(json.loads(memo.read_text())) == 2
    run(capsys, "encode", "--config", CONFIG, "--cohort", 3, "--memo", memo, "--value-file", values)
    assert len(json.loads(memo.read_text())) == 2


def test_simulate_then_decode(capsys, tmp_path):
    out_dir = tmp_path / "sim"
    code, out, _ = run(capsys, "simulate", "--scenario", "exponential", "--n", 20000,
                       "--replicates", 1, "--seed", 3, "--out", out_dir)
    assert code == 0 and json.loads(out)["n"] == 20000
    cands = tmp_path / "cands.txt"
    with open(out_dir / "truth.csv") as fh:
        cands.write_text("\n".join(row["value"] for row in csv.DictReader(fh)) + "\n")
    dest = tmp_path / "dist.csv"
    code, _, _ = run(capsys, "decode", "--config", CONFIG, "--reports", out_dir / "reports.jsonl",
                     "--candidates", cands, "--out", dest)
    assert code == 0
    assert dest.read_text() == (out_dir / "decoded.csv").read_text()
    meta = json.loads((tmp_path / "dist.csv.meta.json").read_text())
    assert meta["M"] == 200 and meta["N"] == 20000


def test_decode_strict_aborts(capsys, tmp_path):
    reports = tmp_path / "r.jsonl"
    reports.write_text('{"cohort":0,"bits":"' + "00" * 16 + '"}\nbroken\n')
    cands = tmp_path / "c.txt"
    cands.write_text("a\nb\n")
    code, out, err = run(capsys, "decode", "--config", CONFIG, "--reports", reports, "--candidates", cands)
    assert code == 0 and out.startswith("candidate,") and "skipped 1" in err
    code, _, err = run(capsys, "decode", "--config", CONFIG, "--reports", reports,
                       "--candidates", cands, "--strict")
    assert code == 1 and "report 2" in err


def test_limits_and_sweep(capsys, tmp_path):
    code, out, _ = run(capsys, "limits", "--q", 0.75, "--N", 1e6, "--M", 100)
    assert "6581.1" in out and "3.2905" in out
    dest = tmp_path / "limits.csv"
    run(capsys, "limits", "--q", 0.75, "--N", 1e6, "--M", 100, "--sweep", "N=1e6:1e8:5", "--csv", dest)
    rows = list(csv.DictReader(open(dest)))
    assert len(rows) == 5 and float(rows[-1]["N"]) == 1e8


def test_attack(capsys, tmp_path):
    config = tmp_path / "p.json"
    config.write_text(json.dumps({"k": 16, "h": 2, "f": 0.0, "p": 0.5, "q": 0.75, "m": 1, "mode": "standard"}))
    code, out, _ = run(capsys, "attack", "--config", config, "--fv", 0.1, "--s", 2)
    assert "0.2000" in out and "0.8000" in out
    code, out, _ = run(capsys, "attack", "--config", config, "--sweep", "fv=0.001:0.5:100")
    lines = out.splitlines()
    assert lines[0] == "fv,s,posterior,fdr" and len(lines) == 101


def test_sweep(capsys, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "params": {"k": 64, "h": 2, "f": 0.5, "p": 0.5, "q": 0.75, "m": 4, "mode": "standard"},
        "h": [2, 4], "population": {"kind": "exponential_decay", "num_nonzero": 20, "num_zero": 5},
        "n": 3000, "replicates": 1}))
    dest = tmp_path / "out.csv"
    assert run(capsys, "sweep", "--grid", grid, "--out", dest)[0] == 0
    rows = list(csv.DictReader(open(dest)))
    assert [r["h"] for r in rows] == ["2", "4"]


def test_submit_and_remote_decode(capsys, tmp_path, monkeypatch):
    app = create_app()
    monkeypatch.setattr(cli, "_client", lambda server: TestClient(app))
    sim = tmp_path / "sim"
    run(capsys, "simulate", "--scenario", "exponential", "--n", 5000, "--replicates", 1, "--out", sim)
    cands = tmp_path / "c.txt"
    cands.write_text("\n".join(f"V_{i}" for i in range(1, 201)))
    code, out, _ = run(capsys, "submit", "--collection", "x", "--reports", sim / "reports.jsonl",
                       "--config", CONFIG, "--batch-size", 1000)
    assert code == 0 and "accepted 5000" in out
    dest = tmp_path / "remote.csv"
    run(capsys, "remote-decode", "--collection", "x", "--candidates", cands, "--out", dest)
    assert dest.read_text() == (sim / "decoded.csv").read_text()
