import json
from pathlib import Path

import pytest

from kpzlab.cli import main

SMOKE = {
    "kind": "wasep-height",
    "eps": 0.2,
    "rho": 0.5,
    "t_grid": [0.5, 1.0],
    "replicas": 48,
    "master_seed": 5,
    "workers": 1,
}


def write_cfg(tmp_path, name="cfg.json", **kw):
    raw = dict(SMOKE)
    raw.update(kw)
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def test_version(capsys):
    assert main(["version"]) == 0
    assert "kpzlab 0.1.0" in capsys.readouterr().out


def test_run_writes_outputs(tmp_path, capsys):
    cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "out"))
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "sweep.csv").exists()
    assert (out / "report.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tool_version"] == "0.1.0"
    names = {e["file"] for e in manifest["outputs"]}
    assert {"sweep.csv", "report.json"} <= names
    header = (out / "sweep.csv").read_text().splitlines()[0]
    assert header == "eps,rho,t_macro,n_replicas,estimator,value,stderr"


def test_zero_replicas_rejected_without_files(tmp_path):
    out = tmp_path / "never"
    cfg = write_cfg(tmp_path, replicas=0, output_dir=str(out))
    assert main(["run", str(cfg)]) == 2
    assert not out.exists()


def test_unknown_kind_rejected(tmp_path):
    cfg = write_cfg(tmp_path, kind="frobnicate")
    assert main(["run", str(cfg)]) == 2


def test_unknown_key_rejected(tmp_path):
    cfg = write_cfg(tmp_path, bogus_key=1)
    assert main(["run", str(cfg)]) == 2


def test_buffer_rule_violation_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, overrides={"half_width": 10},
                    output_dir=str(tmp_path / "o"))
    assert main(["run", str(cfg)]) == 3


def test_io_failure_exit_code(tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("i am a file")
    cfg = write_cfg(tmp_path, output_dir=str(blocker / "sub"))
    assert main(["run", str(cfg)]) == 4


def test_identity_suite_command_requires_kind(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["identity-suite", str(cfg)]) == 2


def test_identity_suite_smoke_power_gate(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path, kind="identity-suite", replicas=200, t_grid=[1.0],
        output_dir=str(tmp_path / "ident"),
        overrides={
            "ident_plain_replicas": 200, "ident_coupled_replicas": 200,
            "qspeed_replicas": 100, "jq_replicas": 100,
        },
    )
    assert main(["identity-suite", str(cfg)]) == 0
    report = json.loads((tmp_path / "ident" / "report.json").read_text())
    reasons = {s["reason"] for s in report["skipped"]}
    assert reasons == {"insufficient power"}
    assert report["pass"]  # pathwise conservation ran and passed
    assert any(c["check_name"] == "wasep_conservation_exact" for c in report["checks"])


def test_identity_suite_fault_injection_fails(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path, kind="identity-suite", replicas=100, t_grid=[1.0],
        output_dir=str(tmp_path / "fault"),
        overrides={
            "ident_plain_replicas": 100, "ident_coupled_replicas": 100,
            "qspeed_replicas": 100,
            "jq_replicas": 5000, "jq_t_micro": 20.0, "fault_injection": "jq",
        },
    )
    assert main(["identity-suite", str(cfg)]) == 1
    report = json.loads((tmp_path / "fault" / "report.json").read_text())
    bad = [c for c in report["checks"] if not c["pass"]]
    assert len(bad) == 1 and bad[0]["check_name"] == "current_variance_identity"
    assert abs(bad[0]["z_score"]) > report["tolerance_k"]


def test_worker_count_invariance_byte_identical(tmp_path):
    # identical config + seed with 1 vs 2 workers: byte-identical CSVs
    outs = {}
    for workers in (1, 2):
        out = tmp_path / f"w{workers}"
        cfg = write_cfg(tmp_path, name=f"c{workers}.json", kind="second-class",
                        replicas=64, workers=workers, t_grid=[0.5, 1.0],
                        output_dir=str(out))
        assert main(["run", str(cfg)]) == 0
        outs[workers] = out
    for name in ("sweep.csv", "histogram_t0.5.csv", "histogram_t1.csv", "report.json"):
        b1 = (outs[1] / name).read_bytes()
        b2 = (outs[2] / name).read_bytes()
        assert b1 == b2, f"{name} differs between worker counts"


def test_seed_and_workers_flags_override(tmp_path):
    out1 = tmp_path / "s1"
    out2 = tmp_path / "s2"
    cfg = write_cfg(tmp_path, output_dir=str(out1))
    assert main(["run", str(cfg), "--seed", "99"]) == 0
    cfg2 = write_cfg(tmp_path, name="c2.json", master_seed=99, output_dir=str(out2))
    assert main(["run", str(cfg2)]) == 0
    assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()


def test_env_var_default_output_dir(tmp_path, monkeypatch):
    target = tmp_path / "envout"
    monkeypatch.setenv("KPZLAB_OUTPUT_DIR", str(target))
    cfg = write_cfg(tmp_path)  # output_dir defaults to "."
    assert main(["run", str(cfg)]) == 0
    assert (target / "sweep.csv").exists()


def test_fit_command(tmp_path, capsys):
    sweep = tmp_path / "sweep.csv"
    rows = ["eps,rho,t_macro,n_replicas,estimator,value,stderr"]
    for t in (8.0, 16.0, 32.0, 64.0):
        rows.append(f"0.2,0.5,{t},100,var_h0,{7.0 * t ** (2 / 3)!r},0.1")
    sweep.write_text("\n".join(rows) + "\n")
    assert main(["fit", "--input", str(sweep), "--estimator", "var_h0"]) == 0
    out = capsys.readouterr().out
    assert "slope=0.666666666666666" in out
    assert main(["fit", "--input", str(sweep), "--estimator", "nope"]) == 2
    assert main(["fit", "--input", str(tmp_path / "missing.csv"), "--estimator", "x"]) == 4


def test_manifest_reproducibility(tmp_path):
    # same manifest inputs -> byte-identical result CSVs
    hashes = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg = write_cfg(tmp_path, name=f"{run}.json", output_dir=str(out))
        assert main(["run", str(cfg)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        hashes.append({e["file"]: e["sha256"] for e in manifest["outputs"]})
    assert hashes[0] == hashes[1]
