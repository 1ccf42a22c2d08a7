import csv
import io
import json

import pytest

from cfattest.bench import CSV_HEADER
from cfattest.cfg import AttestationRecord, Edge, deserialize
from cfattest.cli import EXIT_DETECTED, EXIT_OK, EXIT_USAGE, build_parser, main
from cfattest.ir import Site, instrument, layout
from cfattest.workload import builtin_source, load_program


@pytest.fixture
def dispatch_cfg(tmp_path):
    path = tmp_path / "dispatch.cfg"
    assert main(["learn", "builtin:dispatch", "--cfg", str(path)]) == EXIT_OK
    return path


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# -- learn ----------------------------------------------------------------------------------


def test_learn_dispatch_has_two_branch_edges_at_n2(dispatch_cfg, capsys):
    cfg = deserialize(dispatch_cfg.read_bytes())
    iprog = instrument(layout(load_program("builtin:dispatch")))
    n2_exit = next(p.id for p in iprog.points_at("n2") if p.site == Site.BLOCK_EXIT)
    assert len([e for e in cfg.edges if e.src == n2_exit]) == 2


def test_learn_is_byte_deterministic(tmp_path, capsys):
    inputs = _write(tmp_path, "in.txt", "4242\n1\n")
    a, b = tmp_path / "a.cfg", tmp_path / "b.cfg"
    assert main(["learn", "builtin:dispatch", "--inputs", inputs, "--cfg", str(a)]) == EXIT_OK
    assert main(["learn", "builtin:dispatch", "--inputs", inputs, "--cfg", str(b), "--batch-size", "3"]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    out = capsys.readouterr().out
    assert "nodes=" in out and "edges=" in out and "requests=2" in out


def test_one_branch_driver_then_other_branch_is_a_violation(tmp_path, capsys):
    cfg = tmp_path / "partial.cfg"
    assert main(["learn", "builtin:dispatch", "--inputs", _write(tmp_path, "d.txt", "4242\n"), "--cfg", str(cfg)]) == 0
    code = main(["run", "builtin:dispatch", "--cfg", str(cfg), "--inputs", _write(tmp_path, "w.txt", "1\n")])
    assert code == EXIT_DETECTED
    assert "verdict=violation" in capsys.readouterr().out


def test_learn_errors(tmp_path, capsys):
    prog = _write(tmp_path, "p.cfir", builtin_source("dispatch"))
    assert main(["learn", prog, "--cfg", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["learn", prog, "--inputs", _write(tmp_path, "e.txt", "# nothing\n"),
                 "--cfg", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["learn", _write(tmp_path, "bad.cfir", "func f:\n  ret\n"), "--inputs", prog,
                 "--cfg", str(tmp_path / "x")]) == EXIT_USAGE
    assert "malformed program" in capsys.readouterr().err


# -- run ------------------------------------------------------------------------------------


def test_run_clean_workload(dispatch_cfg, tmp_path, capsys):
    log = tmp_path / "att.log"
    assert main(["run", "builtin:dispatch", "--cfg", str(dispatch_cfg), "--log", str(log)]) == EXIT_OK
    lines = log.read_text().splitlines()
    assert len(lines) == 2 and all("verdict=valid" in l for l in lines)


def test_run_with_hijack_flags_one_violation(dispatch_cfg, tmp_path, capsys):
    inputs = _write(tmp_path, "w.txt", "1\n1\n4242\n")
    log = tmp_path / "att.log"
    code = main(["run", "builtin:dispatch", "--cfg", str(dispatch_cfg), "--inputs", inputs, "--log", str(log),
                 "--hijack", "1:0:0:n3"])
    assert code == EXIT_DETECTED
    records = [AttestationRecord.from_line(l) for l in log.read_text().splitlines()]
    assert [r.request for r in records if not r.valid] == [1]


def test_run_signing_with_keyfile(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "s.cfg"
    key = tmp_path / "key.bin"
    assert main(["keygen", str(key)]) == EXIT_OK
    assert len(key.read_bytes()) == 64
    monkeypatch.setenv("CFA_KEYFILE", str(key))
    assert main(["learn", "builtin:signing", "--cfg", str(cfg)]) == EXIT_OK
    assert main(["run", "builtin:signing", "--cfg", str(cfg), "--requests", "5", "--seed", "2"]) == EXIT_OK
    out = capsys.readouterr()
    assert out.out.count("verdict=valid") == 5 and "violations=0" in out.err


def test_bad_keyfile_is_a_usage_error(dispatch_cfg, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CFA_KEYFILE", _write(tmp_path, "short.bin", "abc"))
    assert main(["run", "builtin:dispatch", "--cfg", str(dispatch_cfg)]) == EXIT_USAGE
    assert "64 bytes" in capsys.readouterr().err


def test_run_rejects_a_corrupt_cfg(dispatch_cfg, capsys):
    data = bytearray(dispatch_cfg.read_bytes())
    data[-1] ^= 1
    dispatch_cfg.write_bytes(bytes(data))
    assert main(["run", "builtin:dispatch", "--cfg", str(dispatch_cfg)]) == EXIT_USAGE
    assert "bad CFG file" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--batch-size", "0"], ["--hijack", "1:2"], ["--hijack", "0:0:0:nowhere"]])
def test_run_usage_errors(dispatch_cfg, flags, capsys):
    assert main(["run", "builtin:dispatch", "--cfg", str(dispatch_cfg), *flags]) == EXIT_USAGE


def test_default_channel_flags():
    args = build_parser().parse_args(["run", "builtin:dispatch", "--cfg", "x"])
    assert args.batch_size == 10_000 and args.feedback_freq == 10


# -- attack ---------------------------------------------------------------------------------


def test_attack_suite_exits_zero(capsys):
    assert main(["attack"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "11/11 scenarios matched" in out and "MISMATCH" not in out


def test_wrong_expectation_exits_one(tmp_path, capsys):
    path = _write(tmp_path, "s.json", json.dumps(
        {"kind": "tamper-ciphertext", "expected": "digest-mismatch", "params": {"batch": 1}}))
    assert main(["attack", path]) == EXIT_DETECTED
    assert "MISMATCH" in capsys.readouterr().out


def test_drop_report_names_the_batch(tmp_path, capsys):
    path = _write(tmp_path, "s.json", json.dumps(
        {"name": "drop", "kind": "drop-batch", "expected": "aead-failure", "params": {"batch": 2}}))
    assert main(["attack", path, "-v"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "batch=3" in out and "authentication failed for batch 3" in out


def test_dump_suite_round_trips_through_attack(tmp_path, capsys):
    path = tmp_path / "suite.json"
    assert main(["attack", "--dump-suite", str(path)]) == EXIT_OK
    assert len(json.loads(path.read_text())["scenarios"]) == 11


def test_unknown_scenario_kind(tmp_path, capsys):
    path = _write(tmp_path, "s.json", json.dumps({"kind": "teleport"}))
    assert main(["attack", path]) == EXIT_USAGE
    assert "unknown scenario kind" in capsys.readouterr().err


# -- fetch-log ------------------------------------------------------------------------------


def _log(tmp_path, n=100, bad=(57,)):
    lines = []
    for i in range(n):
        rec = AttestationRecord(i, False, Edge(1, 2), 3) if i in bad else AttestationRecord(i, True)
        lines.append(rec.to_line())
    return _write(tmp_path, "att.log", "\n".join(lines) + "\n")


def test_fetch_log_violations_first(tmp_path, capsys):
    assert main(["fetch-log", _log(tmp_path), "--violations-first"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 100 and lines[0].startswith("request=57 verdict=violation")
    assert lines[1].startswith("request=0 ")


def test_fetch_log_filters(tmp_path, capsys):
    path = _log(tmp_path)
    assert main(["fetch-log", path, "--requests", "10:12"]) == EXIT_OK
    assert [AttestationRecord.from_line(l).request for l in capsys.readouterr().out.splitlines()] == [10, 11, 12]
    assert main(["fetch-log", path, "--violations-only"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == [AttestationRecord(57, False, Edge(1, 2), 3).to_line()]


def test_fetch_log_empty(tmp_path, capsys):
    assert main(["fetch-log", _write(tmp_path, "empty.log", "")]) == EXIT_OK
    assert capsys.readouterr().out == ""


def test_fetch_log_corrupt_line(tmp_path, capsys):
    path = _write(tmp_path, "att.log", "request=0 verdict=valid edge=- pos=-\nbroken\nrequest=1 verdict=valid edge=- pos=-\n")
    assert main(["fetch-log", path]) == EXIT_DETECTED
    out = capsys.readouterr()
    assert len(out.out.splitlines()) == 2 and "line 2" in out.err


def test_fetch_log_missing_file(tmp_path, capsys):
    assert main(["fetch-log", str(tmp_path / "nope.log")]) == EXIT_USAGE


# -- bench ----------------------------------------------------------------------------------


def test_bench_csv_schema_is_stable(tmp_path, capsys):
    shapes = []
    for k in range(2):
        out = tmp_path / f"b{k}.csv"
        chart = tmp_path / f"b{k}.svg"
        main(["bench", "--batch-sizes", "1,100", "--freqs", "1,10", "--repetitions", "1", "--requests", "3",
              "--csv", str(out), "--chart", str(chart)])
        rows = list(csv.reader(io.StringIO(out.read_text())))
        shapes.append((tuple(rows[0]), len(rows)))
        assert chart.stat().st_size > 0
    assert shapes[0] == shapes[1] == (CSV_HEADER, 6)
    text = capsys.readouterr().out
    assert "transfer-trend" in text and "overhead-trend" in text


def test_bench_rejects_bad_grid(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--batch-sizes", "0"])
    assert exc.value.code == EXIT_USAGE
