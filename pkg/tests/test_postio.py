import dataclasses

import numpy as np
import pytest

from cardioem import postio
from cardioem.fibers import D_RBM, compute_distance_fields, generate_fibers
from cardioem.mechanics import MaterialParams, MechanicsProblem
from cardioem.mesh import (
    GeometryKind, GeometrySpec, build_geometry, read_vtk_points_and_vectors,
)
from cardioem.postio import (
    Biomarkers, PostIOError, RunConfig, TimeSeriesCSV, axial_stresses,
    compute_biomarkers, config_hash, parse_config, read_csv,
    serialize_config, write_pv_csv, write_report, write_snapshot_vtk,
)

_CACHE = {}


def biv():
    if "biv" not in _CACHE:
        mesh = build_geometry(GeometrySpec(kind=GeometryKind.BIVENTRICLE,
                                           resolution=8e-3))
        fields = compute_distance_fields(mesh, rule=D_RBM)
        fib = generate_fibers(mesh, rule=D_RBM, fields=fields)
        _CACHE["biv"] = (mesh, fields, (fib.f0, fib.s0, fib.n0))
    return _CACHE["biv"]


def pv_series():
    t = np.linspace(0.0, 0.8, 101)
    v_lv = 48.0 + 89.0 * (0.5 + 0.5 * np.cos(2 * np.pi * t / 0.8))
    v_rv = 60.0 + 80.0 * (0.5 + 0.5 * np.cos(2 * np.pi * t / 0.8))
    p_lv = 10.0 + 110.0 * np.sin(np.pi * t / 0.8) ** 2
    p_rv = 5.0 + 25.0 * np.sin(np.pi * t / 0.8) ** 2
    return t, p_lv, p_rv, v_lv, v_rv


class TestBiomarkers:
    def test_paper_style_volumes(self):
        mesh, fields, _ = biv()
        t, p_lv, p_rv, v_lv, v_rv = pv_series()
        zero = np.zeros(3 * mesh.n_nodes)
        bm = compute_biomarkers(t, p_lv, p_rv, v_lv, v_rv,
                                snapshots=(mesh, fields, zero, zero))
        assert bm.edv_lv == pytest.approx(137.0)
        assert bm.esv_lv == pytest.approx(48.0)
        assert bm.ef_lv == pytest.approx((137 - 48) / 137 * 100, abs=1e-9)
        assert bm.sv_lv == pytest.approx(89.0)
        assert bm.p_lv_peak == pytest.approx(120.0)
        assert bm.edv_lv >= bm.esv_lv and bm.edv_rv >= bm.esv_rv

    def test_identical_snapshots_zero_shape_markers(self):
        mesh, fields, _ = biv()
        t, p_lv, p_rv, v_lv, v_rv = pv_series()
        zero = np.zeros(3 * mesh.n_nodes)
        bm = compute_biomarkers(t, p_lv, p_rv, v_lv, v_rv,
                                snapshots=(mesh, fields, zero, zero))
        assert bm.lfs == 0.0
        assert bm.wt == 0.0

    def test_shortening_and_thickening_signs(self):
        # shrink along the long axis and thicken radially by scaling
        mesh, fields, _ = biv()
        t, p_lv, p_rv, v_lv, v_rv = pv_series()
        zero = np.zeros(3 * mesh.n_nodes)
        d = (mesh.nodes * np.array([0.05, 0.05, -0.10])).ravel()
        bm = compute_biomarkers(t, p_lv, p_rv, v_lv, v_rv,
                                snapshots=(mesh, fields, zero, d))
        assert bm.lfs == pytest.approx(10.0, abs=1e-6)
        assert bm.wt == pytest.approx(5.0, abs=1e-6)

    def test_missing_snapshots_rejected(self):
        t, p_lv, p_rv, v_lv, v_rv = pv_series()
        with pytest.raises(PostIOError, match="snapshots"):
            compute_biomarkers(t, p_lv, p_rv, v_lv, v_rv)

    def test_empty_history_rejected(self):
        with pytest.raises(PostIOError):
            compute_biomarkers([], [], [], [], [], snapshots=(None,) * 4)


class TestAxialStresses:
    def problem(self, n_props=(1.0, 0.0, 0.0)):
        # uniform orthonormal fibers on a slab: the direct-substitution case
        mesh = build_geometry(GeometrySpec(kind=GeometryKind.SLAB,
                                           dimensions=(0.02, 0.02, 0.04),
                                           element_counts=(3, 3, 5)))
        ones = np.ones((mesh.n_nodes, 1))
        fib = (ones * [1.0, 0.0, 0.0], ones * [0.0, 1.0, 0.0],
               ones * [0.0, 0.0, 1.0])
        params = MaterialParams(n_f=n_props[0], n_s=n_props[1],
                                n_n=n_props[2])
        return MechanicsProblem(mesh, fib, np.ones(mesh.n_nodes),
                                params), mesh

    def test_reference_active_fiber_stress(self):
        # F = I, pure fiber tension: sigma_ff = T_a, others vanish
        prob, mesh = self.problem()
        Ta = np.full(mesh.n_nodes, 12e3)
        s_ff, s_ss, s_nn = axial_stresses(prob, np.zeros(prob.n_dofs), Ta)
        assert np.allclose(s_ff, 12e3, rtol=1e-12)
        assert np.abs(s_ss).max() < 1e-8
        assert np.abs(s_nn).max() < 1e-8

    def test_zero_state_all_zero(self):
        prob, mesh = self.problem()
        out = axial_stresses(prob, np.zeros(prob.n_dofs),
                             np.zeros(mesh.n_nodes))
        for s in out:
            assert np.abs(s).max() < 1e-10

    def test_proportions_split_tension(self):
        prob, mesh = self.problem((0.7, 0.0, 0.3))
        Ta = np.full(mesh.n_nodes, 10e3)
        s_ff, s_ss, s_nn = axial_stresses(prob, np.zeros(prob.n_dofs), Ta)
        assert np.allclose(s_ff, 7e3, rtol=1e-12)
        assert np.allclose(s_nn, 3e3, rtol=1e-12)
        assert np.abs(s_ss).max() < 1e-8


class TestCSV:
    def test_empty_run_header_only(self, tmp_path):
        path = tmp_path / "pv.csv"
        write_pv_csv(path, [], [], [], [], [], config_hash="abc")
        cols, data = read_csv(path)
        assert cols == list(postio.PV_COLUMNS)
        assert data.shape == (0, 5)

    def test_one_row_matches_schema(self, tmp_path):
        path = tmp_path / "pv.csv"
        write_pv_csv(path, [0.5], [8.0], [4.0], [120.0], [140.0])
        cols, data = read_csv(path)
        assert data.shape == (1, len(cols))
        assert data[0, 0] == pytest.approx(500.0)  # seconds in, ms out

    def test_row_width_enforced(self, tmp_path):
        w = TimeSeriesCSV(tmp_path / "x.csv", ("a", "b"))
        with pytest.raises(PostIOError):
            w.append([1.0])


class TestVTKRoundTrip:
    def test_displacement_bit_exact(self, tmp_path):
        mesh, _, fib = biv()
        rng = np.random.default_rng(3)
        d = rng.standard_normal((mesh.n_nodes, 3)) * 1e-3
        path = tmp_path / "snap.vtk"
        write_snapshot_vtk(path, mesh, point_data={"d": d, "f0": fib[0]},
                           config_hash="deadbeef0123")
        pts, vecs = read_vtk_points_and_vectors(path)
        assert np.array_equal(pts, mesh.nodes)
        assert np.array_equal(vecs["d"], d)
        assert "deadbeef0123" in open(path).read().splitlines()[1]


class TestConfig:
    def test_empty_file_gives_paper_defaults(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg.material.a == pytest.approx(0.88e3)
        assert cfg.material.kappa == pytest.approx(50e3)
        assert cfg.activation.T_max == pytest.approx(840e3)
        assert cfg.circulation.T_hb == pytest.approx(0.8)

    def test_override_and_sections(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[material]\nkappa = 25e3\n"
                        "[simulation]\nn_beats = 3\n")
        cfg = parse_config(path)
        assert cfg.material.kappa == pytest.approx(25e3)
        assert cfg.simulation.n_beats == 3

    def test_negative_bulk_modulus_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[material]\nkappa = -1\n")
        with pytest.raises(PostIOError):
            parse_config(path)

    def test_unknown_key_reports_line(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[material]\na = 880\nbogus_key = 1\n")
        with pytest.raises(PostIOError, match=":3:"):
            parse_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(PostIOError, match="unknown section"):
            parse_config(path)

    def test_cross_fiber_preset_iv(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[fibers]\ncross_fiber = iv\n")
        cfg = parse_config(path)
        assert cfg.fibers.proportions() == (0.7, 0.0, 0.3)
        assert (cfg.material.n_f, cfg.material.n_s,
                cfg.material.n_n) == (0.7, 0.0, 0.3)

    def test_round_trip_identity(self, tmp_path):
        p1 = tmp_path / "a.ini"
        p1.write_text("[material]\nkappa = 30e3\n"
                      "[fibers]\ncross_fiber = pure\n"
                      "[geometry]\nresolution = 0.008\n")
        cfg = parse_config(p1)
        p2 = tmp_path / "b.ini"
        p2.write_text(serialize_config(cfg))
        cfg2 = parse_config(p2)
        assert serialize_config(cfg) == serialize_config(cfg2)
        assert config_hash(cfg) == config_hash(cfg2)

    def test_hash_changes_with_content(self, tmp_path):
        c1, c2 = RunConfig(), RunConfig()
        c2.material = dataclasses.replace(c2.material, kappa=60e3)
        assert config_hash(c1) != config_hash(c2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PostIOError):
            parse_config(tmp_path / "absent.ini")


class TestReport:
    def test_report_contains_all_fields(self, tmp_path):
        bm = Biomarkers(edv_lv=137, esv_lv=48, ef_lv=65.0, sv_lv=89,
                        edv_rv=140, esv_rv=60, ef_rv=57.1, sv_rv=80,
                        p_lv_peak=120, p_rv_peak=30, lfs=21.0, wt=41.0,
                        activation_ms=120.0)
        path = tmp_path / "report.txt"
        write_report(path, bm, config_hash="cafe01")
        text = path.read_text()
        assert "config = cafe01" in text
        for key in bm.as_dict():
            assert key in text
