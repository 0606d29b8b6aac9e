import os

import numpy as np
import pytest

from cardioem.cli import main
from cardioem.mesh import read_vtk_points_and_vectors
from cardioem.postio import read_csv

TINY_INI = """\
[simulation]
resolution = 9e-3
n_beats = 1
recover = false
v_cycle = false
geom_update_every = 50
edv_lv_ml = 118
edv_rv_ml = 40
"""

_STATE = {}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.ini").write_text(TINY_INI)
    return d


def run_simulate(workdir):
    """One cached 3-step pipeline run shared by the simulate tests."""
    if "sim" not in _STATE:
        rc = main(["simulate", "--config", str(workdir / "tiny.ini"),
                   "--out", str(workdir / "sim"), "--max-steps", "3"])
        _STATE["sim"] = rc
    return _STATE["sim"]


class TestFibers:
    def test_writes_vtk_with_vector_fields(self, workdir):
        out = workdir / "fib"
        rc = main(["fibers", "--config", str(workdir / "tiny.ini"),
                   "--rule", "d-rbm", "--out", str(out)])
        assert rc == 0
        pts, vecs = read_vtk_points_and_vectors(out / "fibers.vtk")
        assert {"FIBERS", "SHEETS", "NORMALS"} <= set(vecs)
        norms = np.linalg.norm(vecs["FIBERS"], axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_angle_override_file(self, workdir):
        out = workdir / "fib2"
        angles = workdir / "angles.ini"
        angles.write_text("alpha_epi_lv = -50\nalpha_endo_lv = 50\n")
        rc = main(["fibers", "--config", str(workdir / "tiny.ini"),
                   "--angles", str(angles), "--out", str(out)])
        assert rc == 0
        assert (out / "fibers.vtk").exists()


class TestCirculation:
    def test_csv_schema_and_content(self, workdir):
        out = workdir / "circ"
        rc = main(["circulation", "--beats", "1",
                   "--out", str(out)])
        assert rc == 0
        cols, data = read_csv(out / "circulation.csv")
        assert len(cols) == 1 + 12 + 4
        assert cols[0] == "t_s" and cols[1] == "V_LA"
        assert data.shape[0] == 1601
        assert (data[:, 1:5] > 0).all()  # chamber volumes stay positive


class TestMechanicsInflate:
    def test_inflation_snapshot(self, workdir, capsys):
        out = workdir / "mech"
        rc = main(["mechanics-inflate", "--config",
                   str(workdir / "tiny.ini"), "--p-lv", "200",
                   "--p-rv", "100", "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "V_LV" in text and "J in [" in text
        pts, vecs = read_vtk_points_and_vectors(out / "inflated.vtk")
        assert np.abs(vecs["d"]).max() > 0


class TestSimulate:
    def test_pipeline_outputs(self, workdir):
        assert run_simulate(workdir) == 0
        out = workdir / "sim"
        cols, data = read_csv(out / "log.csv")
        assert data.shape == (3, 7)
        assert (data[:, 6] < 1e-3).all()
        assert (out / "cell.npz").exists()
        assert (out / "ed.npz").exists()
        assert (out / "snap_start.vtk").exists()
        assert (out / "snap_final.vtk").exists()

    def test_resume_reuses_stages(self, workdir, capsys):
        assert run_simulate(workdir) == 0
        capsys.readouterr()
        rc = main(["simulate", "--config", str(workdir / "tiny.ini"),
                   "--out", str(workdir / "sim"), "--max-steps", "2",
                   "--resume"])
        assert rc == 0
        text = capsys.readouterr().out
        assert "single-cell pre-run: resumed" in text
        assert "ED inflation: resumed" in text


class TestPostprocess:
    def test_report_from_pipeline(self, workdir, capsys):
        assert run_simulate(workdir) == 0
        out = workdir / "sim"
        rc = main(["postprocess", "--config", str(workdir / "tiny.ini"),
                   "--log", str(out / "log.csv"),
                   "--snap-start", str(out / "snap_start.vtk"),
                   "--snap-es", str(out / "snap_end_systole.vtk"),
                   "--out", str(out)])
        assert rc == 0
        text = (out / "report.txt").read_text()
        for key in ("ef_lv", "ef_rv", "lfs", "wt", "config"):
            assert key in text

    def test_missing_snapshots_fail_cleanly(self, workdir, capsys):
        out = workdir / "sim"
        run_simulate(workdir)
        rc = main(["postprocess", "--config", str(workdir / "tiny.ini"),
                   "--log", str(out / "log.csv")])
        assert rc == 1
        assert "snapshot" in capsys.readouterr().err.lower()


class TestErrors:
    def test_bad_config_exits_nonzero(self, workdir, capsys):
        bad = workdir / "bad.ini"
        bad.write_text("[material]\nkappa = -5\n")
        rc = main(["fibers", "--config", str(bad),
                   "--out", str(workdir / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
