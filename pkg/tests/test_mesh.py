import numpy as np
import pytest

from cardioem import fem
from cardioem.mesh import (
    BoundaryTag, GeometryKind, GeometrySpec, MeshError,
    build_geometry, uniform_refine, interpolate_to_fine, restrict_to_coarse,
    mesh_volume, write_vtk, read_vtk_points_and_vectors,
)


def slab_spec(nx=4, ny=4, nz=3):
    return GeometrySpec(kind=GeometryKind.SLAB,
                        dimensions=(0.02, 0.02, 0.012),
                        element_counts=(nx, ny, nz))


def small_biv(res=3.2e-3):
    return GeometrySpec(kind=GeometryKind.BIVENTRICLE, resolution=res)


class TestSlab:
    def test_counts_and_volume(self):
        m = build_geometry(slab_spec())
        assert m.n_elems == 4 * 4 * 3
        assert m.n_nodes == 5 * 5 * 4
        assert mesh_volume(m) == pytest.approx(0.02 * 0.02 * 0.012, rel=1e-12)

    def test_tags_partition_boundary(self):
        m = build_geometry(slab_spec())
        m.check_tags_partition()
        # every boundary face carries exactly one tag from the enum
        assert set(np.unique(m.face_tags)) <= {t.value for t in BoundaryTag}

    def test_positive_jacobians(self):
        m = build_geometry(slab_spec())
        detJ = fem.geometry_factors(m)["detJ"]
        assert (detJ > 0).all()


class TestEllipsoids:
    def test_lv_tags_present(self):
        spec = GeometrySpec(kind=GeometryKind.LV_ELLIPSOID, resolution=4.0e-3)
        m = build_geometry(spec)
        m.check_tags_partition()
        for tag in (BoundaryTag.EPI, BoundaryTag.ENDO_LV, BoundaryTag.BASE):
            assert len(m.faces_with_tag(tag)) > 0
        assert len(m.faces_with_tag(BoundaryTag.ENDO_RV)) == 0

    def test_biventricle_all_tags(self):
        m = build_geometry(small_biv())
        m.check_tags_partition()
        for tag in BoundaryTag:
            assert len(m.faces_with_tag(tag)) > 0, tag

    def test_base_plane_is_flat(self):
        m = build_geometry(small_biv())
        base_nodes = m.nodes_with_tag(BoundaryTag.BASE)
        z = m.nodes[base_nodes, 2]
        assert np.ptp(z) < 1e-12
        # base faces have normals along +z (centerline)
        ff = fem.face_factors(m)
        sel = m.face_tags == BoundaryTag.BASE
        n = ff["normal"][sel]
        assert np.allclose(np.abs(n[..., 2]), 1.0, atol=1e-12)

    def test_invalid_spec_rejected(self):
        with pytest.raises((MeshError, ValueError)):
            GeometrySpec(kind=GeometryKind.BIVENTRICLE,
                         wall_thickness=-1.0).validate()


class TestRefinement:
    def test_parent_nodes_preserved(self):
        m = build_geometry(slab_spec(3, 3, 2))
        f = uniform_refine(m)
        assert f.n_elems == 8 * m.n_elems
        assert np.allclose(f.nodes[: m.n_nodes], m.nodes)

    def test_prolongation_reproduces_trilinear(self):
        m = build_geometry(slab_spec(3, 3, 2))
        f = uniform_refine(m)
        # an affine field is reproduced exactly by trilinear interpolation
        coef = np.array([0.3, -1.2, 2.0])
        vc = m.nodes @ coef + 0.7
        vf = interpolate_to_fine(f, vc)
        assert np.allclose(vf, f.nodes @ coef + 0.7, atol=1e-12)

    def test_restriction_is_left_inverse(self):
        m = build_geometry(slab_spec(3, 3, 2))
        f = uniform_refine(m)
        rng = np.random.default_rng(0)
        vc = rng.standard_normal(m.n_nodes)
        assert np.allclose(restrict_to_coarse(f, interpolate_to_fine(f, vc)), vc)

    def test_vector_fields_transfer(self):
        m = build_geometry(slab_spec(3, 3, 2))
        f = uniform_refine(m)
        vc = np.stack([m.nodes[:, 0], m.nodes[:, 1], m.nodes[:, 2]], axis=1)
        vf = interpolate_to_fine(f, vc)
        assert vf.shape == (f.n_nodes, 3)
        assert np.allclose(vf, f.nodes, atol=1e-12)

    def test_refined_tags_partition(self):
        m = build_geometry(small_biv(4.0e-3))
        f = uniform_refine(m)
        f.check_tags_partition()
        for tag in BoundaryTag:
            assert len(f.faces_with_tag(tag)) == 4 * len(m.faces_with_tag(tag))

    def test_volume_preserved(self):
        m = build_geometry(slab_spec(3, 3, 2))
        f = uniform_refine(m)
        assert mesh_volume(f) == pytest.approx(mesh_volume(m), rel=1e-12)


class TestVtk(object):
    def test_round_trip(self, tmp_path):
        m = build_geometry(slab_spec(2, 2, 2))
        rng = np.random.default_rng(1)
        s = rng.standard_normal(m.n_nodes)
        v = rng.standard_normal((m.n_nodes, 3))
        path = tmp_path / "out.vtk"
        write_vtk(str(path), m, point_data={"phi": s, "fib": v})
        pts, data = read_vtk_points_and_vectors(str(path))
        assert np.allclose(pts, m.nodes, atol=1e-9)
        assert np.allclose(data["phi"], s, atol=1e-9)
        assert np.allclose(data["fib"], v, atol=1e-9)
