import json
import subprocess
import sys

import pytest

from cbflow.checkpoint import read
from cbflow.cli import (EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, MANIFEST_NAME, main,
                        read_csv)

WARPED = """
[grid]
sizes = 16, 16, 1, 1
[initial]
family = doubly_warped
amplitude = 0.05
active = 2
[flow]
s0 = -0.1
scheme = rk2
max_steps = 8
[projection]
tol = 1e-6
[diagnostics]
cadence = 2
m_max = 1
[output]
checkpoint_interval = 4
"""


def write_config(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("full")
    cfg = write_config(tmp, WARPED)
    assert main(["run", "--config", cfg, "--out", str(tmp / "out")]) == EXIT_OK
    return tmp / "out"


def test_run_writes_outputs(full_run):
    cols, rows = read_csv(full_run / "diagnostics.csv")
    assert cols[0] == "step" and [int(r[0]) for r in rows] == [0, 2, 4, 6, 8]
    manifest = json.loads((full_run / MANIFEST_NAME).read_text())
    assert manifest["reason"] == "max_steps" and manifest["error_type"] is None
    assert (full_run / "step00000004.chk").exists() and (full_run / "step00000008.chk").exists()


def test_resume_is_bit_identical(full_run, tmp_path):
    out = tmp_path / "resumed"
    code = main(["resume", "--resume", str(full_run / "step00000004.chk"), "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "diagnostics.csv").read_bytes() == (full_run / "diagnostics.csv").read_bytes()
    assert (out / "step00000008.chk").read_bytes() == (full_run / "step00000008.chk").read_bytes()


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["run"]) == EXIT_USAGE
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_bad_config_reports_line(tmp_path, capsys):
    cfg = write_config(tmp_path, "[flow]\ns0 = 0\nscheme = euler\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE
    assert "line 3: flow.scheme" in capsys.readouterr().err


def test_bad_threads(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "")
    assert main(["--threads", "0", "run", "--config", cfg]) == EXIT_USAGE
    monkeypatch.setenv("CBF_THREADS", "many")
    assert main(["run", "--config", cfg]) == EXIT_USAGE


def test_unreachable_projection_is_numeric_failure(tmp_path, capsys):
    cfg = write_config(tmp_path, "[flow]\ns0 = 1.0\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == EXIT_NUMERIC
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert manifest["error_type"] == "ProjectionDiverged"


def test_resume_rejects_corrupt_checkpoint(full_run, tmp_path):
    bad = tmp_path / "bad.chk"
    data = bytearray((full_run / "step00000004.chk").read_bytes())
    data[100] ^= 1
    bad.write_bytes(bytes(data))
    (tmp_path / "bad.chk.json").write_text((full_run / "step00000004.chk.json").read_text())
    assert main(["resume", "--resume", str(bad), "--config",
                 str(full_run / "config.ini")]) == EXIT_USAGE


def test_curvature_command(tmp_path, capsys):
    cfg = write_config(tmp_path, "[initial]\nfamily = conformally_flat\namplitude = 0.1\n"
                                 "[output]\ndump_fields = true\n")
    assert main(["curvature", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "curvature.json").read_text())
    assert report["W"]["sup"] < 1e-10 * report["Rm"]["sup"]
    assert report["residuals"]["bach_trace_rel"] < 0.05  # truncation level on 8 points
    ck, _ = read(tmp_path / "fields.chk")
    assert ck.variant == "curvature"


def test_project_command(tmp_path):
    cfg = write_config(tmp_path, WARPED)
    assert main(["project", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    ck, extra = read(tmp_path / "projected.chk")
    assert ck.s0 == -0.1 and ck.step == 0 and extra["has_pressure"]


def test_verify_selectors(capsys):
    assert main(["verify", "--suite", "nonsense"]) == EXIT_USAGE
    assert main(["verify", "--suite", ""]) == EXIT_USAGE
    assert main(["verify", "--suite", "configs"]) == EXIT_OK


def test_corrupted_stencil_fails_cotton_weyl(capsys):
    assert main(["verify", "--suite", "curvature", "--corrupt-stencil"]) == EXIT_VERIFY
    assert "Cotton-Weyl identity" in capsys.readouterr().out.split("FAILED:")[1]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cbflow", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
