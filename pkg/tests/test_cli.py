import csv
import json
import warnings
from pathlib import Path

import pytest

from mcf_renorm.cli import load_config, main, resolve_config

GOLDEN_APPROX = """
d = 2
[frequency]
named = "golden"
[schedule]
mode = "fixed-gap"
n_max = 10
"""

VF_SMALL = """
d = 2
permissive = true
[frequency]
named = "golden"
[schedule]
mode = "fixed-gap"
c = 2.0
phi = 1.0
[truncation]
K = 12
[renorm_vf]
steps = 3
grid_exp = 5
perturbation = [
  {{ k = [1, 0], component = 0, re = {amp} }},
  {{ k = [-1, 0], component = 0, re = {amp} }},
]
"""

HAM_SMALL = """
d = 2
permissive = true
[frequency]
named = "golden"
[schedule]
mode = "fixed-gap"
c = 2.0
phi = 1.0
[truncation]
K = 12
[renorm_ham]
steps = 2
grid_exp = 4
Q = {Q}
perturbation = [{{ k = [1, 0], re = 5e-5 }}, {{ k = [-1, 0], re = 5e-5 }}]
"""


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(*args):
    return main([str(a) for a in args])


def read_json(path):
    return json.loads(Path(path).read_text())


def test_approximate_writes_one_record_per_step(tmp_path):
    cfg = write(tmp_path, "golden.toml", GOLDEN_APPROX)
    assert run("approximate", "--config", cfg, "--out", tmp_path / "out") == 0
    lines = (tmp_path / "out" / "steps.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    # step 0 (the unreduced embedding) plus ten flow steps
    assert [r["n"] for r in recs] == list(range(11))
    assert all(r["det_P"] in (1, -1) for r in recs)
    diag = read_json(tmp_path / "out" / "diagnostics.json")
    assert float(diag["delta_floor"]) > 0 and len(diag["A"]) == 11


def test_rational_frequency_exits_with_numeric_error(tmp_path):
    cfg = write(tmp_path, "half.toml", 'd = 2\n[frequency]\nvalues = ["0.5"]\n')
    assert run("approximate", "--config", cfg, "--out", tmp_path / "out") == 3
    err = read_json(tmp_path / "out" / "error.json")
    assert err["error"] == "rational-frequency" and err["stage"] == "approximate" and err["kind"] == "numeric"
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_identical_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, "golden.toml", GOLDEN_APPROX)
    run("approximate", "--config", cfg, "--out", tmp_path / "a")
    run("approximate", "--config", cfg, "--out", tmp_path / "b")
    for name in ("steps.jsonl", "diagnostics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma, mb = read_json(tmp_path / "a" / "manifest.json"), read_json(tmp_path / "b" / "manifest.json")
    ma.pop("timings"), mb.pop("timings")
    assert ma == mb


@pytest.mark.parametrize(
    "text, fragment",
    [
        ('d = 2\nbogus = 1\n[frequency]\nnamed = "golden"\n', "bogus"),
        ('d = 2\n[frequency]\nnamed = "golden"\n[schedule]\nspeed = 3\n', "speed"),
        ('d = 2\n[frequency]\nnamed = "golden"\nvalues = ["0.3"]\n', "exactly one"),
        ('d = 1\n[frequency]\nnamed = "golden"\n', "d must"),
        ('d = 2\n[frequency]\nvalues = ["0.3", "0.4"]\n', "entries"),
        ('d = 2\n[frequency\n', "parse"),
    ],
)
def test_config_errors_exit_2(tmp_path, text, fragment):
    cfg = write(tmp_path, "bad.toml", text)
    assert run("approximate", "--config", cfg, "--out", tmp_path / "out") == 2
    err = read_json(tmp_path / "out" / "error.json")
    assert err["kind"] == "config" and fragment in err["message"]


def test_missing_frequency_uses_seed_variable(tmp_path, monkeypatch):
    cfg = write(tmp_path, "rand.toml", 'd = 3\n[schedule]\nmode = "fixed-gap"\nn_max = 3\n')
    monkeypatch.delenv("MCF_RENORM_SEED", raising=False)
    assert run("approximate", "--config", cfg, "--out", tmp_path / "none") == 2
    monkeypatch.setenv("MCF_RENORM_SEED", "11")
    assert run("approximate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("approximate", "--config", cfg, "--out", tmp_path / "b") == 0
    monkeypatch.setenv("MCF_RENORM_SEED", "12")
    assert run("approximate", "--config", cfg, "--out", tmp_path / "c") == 0
    fa, fb, fc = (read_json(tmp_path / s / "manifest.json")["config"]["frequency"] for s in "abc")
    assert fa == fb and fa["random_seed"] == 11 and fa["values"] != fc["values"]


def test_manifest_echo_revalidates(tmp_path):
    cfg = write(tmp_path, "golden.toml", GOLDEN_APPROX)
    run("approximate", "--config", cfg, "--out", tmp_path / "out", "--precision-bits", 320, "--permissive")
    echo = read_json(tmp_path / "out" / "manifest.json")["config"]
    assert echo["precision_bits"] == 320 and echo["permissive"] is True
    again = json.loads(json.dumps(resolve_config(echo)))
    assert again == echo
    (tmp_path / "echo.json").write_text(json.dumps(echo))
    assert resolve_config(load_config(tmp_path / "echo.json")) == again


def test_zero_perturbation_gives_identity_conjugacy(tmp_path):
    text = VF_SMALL.replace("perturbation = [\n  {{ k = [1, 0], component = 0, re = {amp} }},\n  {{ k = [-1, 0], component = 0, re = {amp} }},\n]", "")
    cfg = write(tmp_path, "vf0.toml", text)
    assert run("renorm-vf", "--config", cfg, "--out", tmp_path / "out") == 0
    body = read_json(tmp_path / "out" / "conjugacy.json")
    assert all(float(v) == 0.0 for term in body["h"]["terms"] for v in term["re"] + term["im"])


def test_vf_run_residuals_within_acceptance(tmp_path):
    cfg = write(tmp_path, "vf.toml", VF_SMALL.format(amp=5e-4))
    assert run("renorm-vf", "--config", cfg, "--out", tmp_path / "out") == 0
    out = tmp_path / "out"
    with open(out / "residuals.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 32**2 and list(rows[0]) == ["x1", "x2", "residual"]
    assert max(float(r["residual"]) for r in rows) <= 1e-6
    states = [json.loads(line) for line in (out / "states.jsonl").read_text().splitlines()]
    assert len(states) == 4
    assert json.loads(json.dumps(read_json(out / "conjugacy.json")))


def test_ham_run_and_degenerate_twist(tmp_path):
    good = write(tmp_path, "ham.toml", HAM_SMALL.format(Q="[[1.0, 0.0], [0.0, 1.0]]"))
    assert run("renorm-ham", "--config", good, "--out", tmp_path / "ok") == 0
    body = read_json(tmp_path / "ok" / "torus.json")
    assert float(body["residual"]["max"]) <= 1e-6
    with open(tmp_path / "ok" / "residuals.csv") as fh:
        assert next(csv.reader(fh)) == ["x1", "x2", "residual", "energy"]
    bad = write(tmp_path, "deg.toml", HAM_SMALL.format(Q="[[1.0, 1.0], [1.0, 1.0]]"))
    assert run("renorm-ham", "--config", bad, "--out", tmp_path / "deg") == 2
    assert read_json(tmp_path / "deg" / "error.json")["error"] == "nondegeneracy"


def test_report_of_completed_run(tmp_path, capsys):
    cfg = write(tmp_path, "vf.toml", VF_SMALL.format(amp=5e-4))
    run("renorm-vf", "--config", cfg, "--out", tmp_path / "out")
    assert run("report", "--out", tmp_path / "out") == 0
    rep = read_json(tmp_path / "out" / "report.json")
    (sec,) = rep["runs"].values()
    assert not rep["partial"] and sec["theta_monotone"]
    assert "renorm-vf" in capsys.readouterr().out


def test_report_of_empty_directory_is_partial(tmp_path):
    (tmp_path / "empty").mkdir()
    run("report", "--out", tmp_path / "empty")
    assert read_json(tmp_path / "empty" / "report.json")["partial"] is True


def test_sweep_runs_each_config_and_report_keys_by_hash(tmp_path):
    a = write(tmp_path, "golden.toml", GOLDEN_APPROX)
    b = write(tmp_path, "plastic.toml", 'd = 3\n[frequency]\nnamed = "plastic-cubic"\n[schedule]\nmode = "fixed-gap"\nn_max = 4\n')
    c = write(tmp_path, "half.toml", 'd = 2\n[frequency]\nvalues = ["0.5"]\n')
    sweep = tmp_path / "sweep"
    assert run("approximate", "--config", a, "--config", b, "--config", c, "--out", sweep, "--jobs", 2) == 3
    assert {p.name for p in sweep.iterdir()} == {"golden", "plastic", "half"}
    run("report", "--out", sweep)
    rep = read_json(sweep / "report.json")
    hashes = {read_json(sweep / s / "manifest.json")["config_hash"] for s in ("golden", "plastic")}
    assert hashes <= set(rep["runs"]) and rep["partial"] is True
