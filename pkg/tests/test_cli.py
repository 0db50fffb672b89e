import csv
import io
import json
import math

import pytest

from annulus_billiards import cli

TRANSPORT_FAST = ["--grid", "8,1,5,3", "--n-sub", "4", "--pairs", "16", "--n-zeta", "8", "--levels", "2",
                  "--picard", "1"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    lines = text.splitlines()
    assert lines[0].startswith("# config_sha256=") and len(lines[0]) == len("# config_sha256=") + 64
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def test_trace_radial_example(capsys):
    code, out, _ = run(capsys, "trace", "--x", "1.5,0,0", "--v", "1,0,0", "--t", "2.2", "--s", "0")
    assert code == 0
    r = rows(out)
    samples = [x for x in r if x["kind"] == "sample"]
    assert float(samples[0]["X1"]) == pytest.approx(1.3, abs=1e-14)
    assert samples[0]["k"] == "2" and samples[0]["case"] == "C1"
    bounces = [x for x in r if x["kind"] == "bounce"]
    assert [b["k"] for b in bounces] == ["1", "2"]


def test_trace_free_stream_row(capsys):
    code, out, _ = run(capsys, "trace", "--x", "1.5,0,0", "--v", "1,0,0", "--t", "0.3", "--s", "0")
    assert code == 0
    (row,) = rows(out)
    assert row["k"] == "0" and float(row["X1"]) == pytest.approx(1.2, abs=1e-15)


def test_trace_usage_errors(capsys):
    assert run(capsys, "trace", "--x", "1.5,0", "--v", "1,0,0", "--t", "1")[0] == 2
    assert run(capsys, "trace", "--x", "1.5,a,0", "--v", "1,0,0", "--t", "1")[0] == 2
    assert run(capsys, "trace", "--x", "0.5,0,0", "--v", "1,0,0", "--t", "1")[0] == 2
    assert run(capsys, "trace", "--x", "1.5,0,0", "--v", "1,0,0", "--t", "1", "--s", "2")[0] == 2
    assert run(capsys, "trace", "--x", "1.5,0,0", "--v", "1,0,0", "--t", "1", "--R", "0.5")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "bogus")[0] == 2


def test_floats_have_17_digits(capsys):
    _, out, _ = run(capsys, "trace", "--x", "0,1.9,0", "--v", "1,0,0", "--t", "1", "--s", "0")
    row = rows(out)[0]
    assert row["a"] == f"{float(row['a']):.17g}"
    assert float(row["a"]) == pytest.approx(math.asin(0.95), abs=1e-12)
    assert len(row["a"].replace(".", "").lstrip("0")) == 17


def test_verify_grazing_and_kernel(capsys):
    code, out, _ = run(capsys, "verify", "--lemma", "grazing-exponent,kernel-domination", "--N", "2000")
    assert code == 0
    g, k = rows(out)
    assert 0.45 <= float(g["exponent_fit"]) <= 0.55
    assert k["violations"] == "0" and k["passed"] == "true"


def test_verify_scan_row(capsys):
    code, out, _ = run(capsys, "verify", "--lemma", "4.4", "--N", "200")
    (r,) = rows(out)
    assert set(r) >= {"lemma_id", "N", "max_ratio", "refinement_ratio", "exponent_fit", "skipped"}
    assert r["lemma_id"] == "4.4" and math.isfinite(float(r["max_ratio"]))
    assert code == (0 if r["passed"] == "true" else 1)


def test_verify_usage(capsys):
    assert run(capsys, "verify", "--N", "0")[0] == 2
    assert run(capsys, "verify", "--lemma", "9.9", "--N", "100")[0] == 2


def test_integrate_beta_zero_sanity(capsys):
    code, out, _ = run(capsys, "integrate", "--beta", "0", "--no-indicator", "--v", "1", "--N", "1000",
                       "--c", "2")
    assert code == 0
    (r,) = rows(out)
    assert float(r["estimate"]) == pytest.approx(math.pi, rel=1e-12)


def test_integrate_growth_row(capsys):
    code, out, _ = run(capsys, "integrate", "--lemma", "5.6", "--N", "20000")
    assert code == 0
    r = rows(out)
    assert [float(x["speed"]) for x in r] == [0, 2, 4, 8]
    assert len({x["growth_exponent"] for x in r}) == 1
    assert float(r[0]["growth_exponent"]) <= 1.2


def test_integrate_beta_out_of_range(capsys):
    code, _, err = run(capsys, "integrate", "--lemma", "5.6", "--beta", "0.3", "--N", "100")
    assert code == 2 and "BetaOutOfRange" in err


def test_transport_collisionless_pullback(capsys, tmp_path):
    code, out, _ = run(capsys, "transport", "--init", "bump", "--collisionless", *TRANSPORT_FAST,
                       "--snap-dir", str(tmp_path))
    assert code == 0
    r = rows(out)
    assert [float(x["t"]) for x in r] == [0.0, 0.05]
    assert float(r[-1]["pullback_error"]) < 1e-12
    assert len(list(tmp_path.glob("*.agf"))) == 2


def test_transport_equilibrium(capsys):
    code, out, _ = run(capsys, "transport", "--init", "equilibrium", *TRANSPORT_FAST)
    r = rows(out)
    assert float(r[0]["equilibrium_drift"]) == 0.0
    assert float(r[0]["H_sp"]) < 1e-12


def test_transport_usage(capsys):
    assert run(capsys, "transport", "--grid", "8,1,5")[0] == 2
    assert run(capsys, "transport", "--varpi", "10")[0] == 2
    assert run(capsys, "transport", "--init", "nope")[0] == 2


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lemma": "kernel-domination", "N": 500, "seed": 3}))
    _, out, _ = run(capsys, "verify", "--config", str(cfg))
    assert rows(out)[0]["N"] == "500"
    _, out, _ = run(capsys, "verify", "--config", str(cfg), "--N", "700")
    assert rows(out)[0]["N"] == "700"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "verify", "--config", str(cfg))[0] == 2
    cfg.write_text("{not json")
    assert run(capsys, "verify", "--config", str(cfg))[0] == 2


def test_json_output(capsys):
    code, out, _ = run(capsys, "integrate", "--N", "1000", "--v", "0,2", "--format", "json")
    doc = json.loads(out)
    assert doc["columns"] == ["speed", "estimate", "stderr", "growth_exponent"]
    assert len(doc["rows"]) == 2 and len(doc["config_sha256"]) == 64
    assert doc["config"]["weight"] == "cos_a_4beta"


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "4")
    _, out, _ = run(capsys, "integrate", "--N", "100", "--v", "1", "--format", "json")
    assert json.loads(out)["config"]["threads"] == 4
    _, out, _ = run(capsys, "integrate", "--N", "100", "--v", "1", "--format", "json", "--threads", "2")
    assert json.loads(out)["config"]["threads"] == 2
    assert run(capsys, "integrate", "--threads", "0")[0] == 2


def test_hash_changes_with_config(capsys):
    _, a, _ = run(capsys, "integrate", "--N", "100", "--v", "1")
    _, b, _ = run(capsys, "integrate", "--N", "100", "--v", "1", "--seed", "1")
    assert a.splitlines()[0] != b.splitlines()[0]


@pytest.mark.parametrize("argv", [
    ["trace", "--x", "1.5,0.2,0.1", "--v", "0.3,1,0.2", "--t", "5"],
    ["verify", "--lemma", "5.2,averaging", "--N", "100"],
    ["integrate", "--lemma", "cor5.7", "--N", "2000"],
    ["transport", "--init", "bump", *TRANSPORT_FAST],
])
def test_byte_identical_outputs(tmp_path, argv):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.main(argv + ["--out", str(a)])
    cli.main(argv + ["--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert b"\r" not in a.read_bytes()
