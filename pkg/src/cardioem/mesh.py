"""Hexahedral computational geometries with tagged boundaries.

Meshes are voxel-based (axis-aligned trilinear Q1 hexahedra) generated from
implicit region descriptions: an idealized truncated-ellipsoid left ventricle,
a biventricle with two truncated-ellipsoid cavities sharing a septal wall, and
a rectangular slab for verification.  The basal plane is flat with normal
parallel to the centerline (+z).

Boundary faces carry exactly one tag out of {EPI, ENDO_LV, ENDO_RV, BASE};
the tags partition the boundary.  Uniform refinement produces a nested child
mesh (8x elements) containing all parent nodes (with identical indices), plus
a sparse prolongation operator for intergrid transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import scipy.sparse as sp


class BoundaryTag(IntEnum):
    EPI = 1
    ENDO_LV = 2
    ENDO_RV = 3
    BASE = 4


class GeometryKind(IntEnum):
    SLAB = 1
    LV_ELLIPSOID = 2
    BIVENTRICLE = 3


# VTK hexahedron local node ordering, reference coords in [-1, 1]^3.
HEX_LOCAL_COORDS = np.array(
    [
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, +1],
        [+1, -1, +1],
        [+1, +1, +1],
        [-1, +1, +1],
    ],
    dtype=float,
)

# Local faces, outward-oriented node loops: (-x, +x, -y, +y, -z, +z).
HEX_LOCAL_FACES = np.array(
    [
        [0, 4, 7, 3],
        [1, 2, 6, 5],
        [0, 1, 5, 4],
        [3, 7, 6, 2],
        [0, 3, 2, 1],
        [4, 5, 6, 7],
    ],
    dtype=int,
)

HEX_EDGES = np.array(
    [
        [0, 1], [1, 2], [2, 3], [3, 0],
        [4, 5], [5, 6], [6, 7], [7, 4],
        [0, 4], [1, 5], [2, 6], [3, 7],
    ],
    dtype=int,
)


class MeshError(Exception):
    """Invalid geometry specification or degenerate mesh."""


@dataclass
class GeometrySpec:
    """Parameters of an idealized computational domain (all lengths in meters).

    ``dimensions`` meaning per kind:
      SLAB          (Lx, Ly, Lz) box extents
      LV_ELLIPSOID  (a, b, c) outer semi-axes; ``wall_thickness`` gives the cavity
      BIVENTRICLE   (a, b, c) LV outer semi-axes; RV is an offset ellipsoid shell

    ``base_fraction`` is the truncation height of the basal plane measured
    from the apex as a fraction of the total long-axis extent.
    """

    kind: GeometryKind = GeometryKind.BIVENTRICLE
    dimensions: tuple = (0.035, 0.035, 0.070)
    element_counts: tuple = (10, 10, 4)  # used by SLAB only
    wall_thickness: float = 0.009
    rv_wall_thickness: float = 0.004
    rv_center: tuple = (0.015, 0.0, 0.010)
    rv_semiaxes: tuple = (0.050, 0.038, 0.068)
    base_fraction: float = 0.60
    resolution: float | None = None  # voxel size; default wall_thickness-based

    def validate(self):
        if any(d <= 0 for d in self.dimensions):
            raise MeshError("geometry dimensions must be positive")
        if self.kind != GeometryKind.SLAB:
            if self.wall_thickness <= 0:
                raise MeshError("wall thickness must be positive")
            if not 0.0 < self.base_fraction < 1.0:
                raise MeshError("base_fraction must lie in (0, 1)")
            a, b, c = self.dimensions
            if self.wall_thickness >= min(a, b, c):
                raise MeshError("wall thickness exceeds semi-axes")
        if self.kind == GeometryKind.SLAB:
            if any(n < 1 for n in self.element_counts):
                raise MeshError("element counts must be >= 1")


@dataclass
class Mesh:
    """Hexahedral Q1 mesh with tagged boundary faces.

    nodes       (N, 3) coordinates in meters
    elems       (E, 8) node indices, VTK ordering
    face_elems  (F,)   adjacent element per boundary face
    face_local  (F,)   local face id (0..5) within the adjacent element
    face_tags   (F,)   BoundaryTag value per boundary face
    """

    nodes: np.ndarray
    elems: np.ndarray
    face_elems: np.ndarray
    face_local: np.ndarray
    face_tags: np.ndarray
    parent: "Mesh | None" = None
    parent_elem: np.ndarray | None = None
    prolongation: sp.csr_matrix | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    @property
    def face_nodes(self) -> np.ndarray:
        """(F, 4) node loops of the boundary faces, outward oriented."""
        return self.elems[self.face_elems[:, None], HEX_LOCAL_FACES[self.face_local]]

    def faces_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        return np.nonzero(self.face_tags == int(tag))[0]

    def nodes_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        idx = self.faces_with_tag(tag)
        return np.unique(self.face_nodes[idx])

    def check_tags_partition(self):
        """Every boundary face of the mesh carries exactly one tag."""
        found = _boundary_face_set(self.elems)
        tagged = {}
        fn = self.face_nodes
        for i in range(fn.shape[0]):
            key = tuple(sorted(fn[i]))
            if key in tagged:
                raise MeshError("boundary face tagged twice")
            tagged[key] = int(self.face_tags[i])
        if set(tagged) != found:
            raise MeshError("boundary tags do not partition the boundary")


def _boundary_face_set(elems: np.ndarray) -> set:
    faces = elems[:, HEX_LOCAL_FACES].reshape(-1, 4)
    keys = np.sort(faces, axis=1)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    return {tuple(r) for r in uniq[counts == 1]}


# ---------------------------------------------------------------------------
# Voxel construction
# ---------------------------------------------------------------------------

REGION_OUT = 0
REGION_TISSUE = 1
REGION_CAV_LV = 2
REGION_CAV_RV = 3
REGION_ABOVE_BASE = 4

_REGION_TO_TAG = {
    REGION_OUT: BoundaryTag.EPI,
    REGION_CAV_LV: BoundaryTag.ENDO_LV,
    REGION_CAV_RV: BoundaryTag.ENDO_RV,
    REGION_ABOVE_BASE: BoundaryTag.BASE,
}

# voxel face direction (axis, sign) -> local face id of the hex
_DIR_TO_LOCAL_FACE = {
    (0, -1): 0, (0, +1): 1,
    (1, -1): 2, (1, +1): 3,
    (2, -1): 4, (2, +1): 5,
}


def mesh_from_regions(region: np.ndarray, h: float, origin: np.ndarray) -> Mesh:
    """Build a hex mesh from a 3D voxel region classification.

    ``region`` has shape (nx, ny, nz) with REGION_* codes; tissue voxels become
    elements and each tissue face adjacent to a non-tissue region is tagged
    according to that region.
    """
    nx, ny, nz = region.shape
    tissue = region == REGION_TISSUE
    if not tissue.any():
        raise MeshError("empty tissue region")

    # node grid and index map
    used = np.zeros((nx + 1, ny + 1, nz + 1), dtype=bool)
    ci, cj, ck = np.nonzero(tissue)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                used[ci + di, cj + dj, ck + dk] = True
    node_id = -np.ones(used.shape, dtype=int)
    node_id[used] = np.arange(used.sum())
    gi, gj, gk = np.nonzero(used)
    nodes = origin[None, :] + h * np.stack([gi, gj, gk], axis=1).astype(float)

    # elements, VTK corner offsets matching HEX_LOCAL_COORDS
    corner_off = ((HEX_LOCAL_COORDS + 1) / 2).astype(int)
    elems = np.stack(
        [node_id[ci + o[0], cj + o[1], ck + o[2]] for o in corner_off], axis=1
    )
    elem_id = -np.ones(region.shape, dtype=int)
    elem_id[tissue] = np.arange(tissue.sum())

    # boundary faces from region adjacency
    padded = np.full((nx + 2, ny + 2, nz + 2), REGION_OUT, dtype=region.dtype)
    padded[1:-1, 1:-1, 1:-1] = region
    face_elems, face_local, face_tags = [], [], []
    for axis in range(3):
        for sign in (-1, +1):
            shift = [slice(1, -1)] * 3
            shift[axis] = slice(2, None) if sign > 0 else slice(0, -2)
            neigh = padded[tuple(shift)]
            mask = tissue & (neigh != REGION_TISSUE)
            ids = elem_id[mask]
            face_elems.append(ids)
            face_local.append(np.full(ids.shape, _DIR_TO_LOCAL_FACE[(axis, sign)]))
            face_tags.append(
                np.array([_REGION_TO_TAG[r] for r in neigh[mask]], dtype=int)
            )
    mesh = Mesh(
        nodes=nodes,
        elems=elems,
        face_elems=np.concatenate(face_elems),
        face_local=np.concatenate(face_local),
        face_tags=np.concatenate(face_tags),
    )
    return mesh


def _inside_ellipsoid(pts, center, semiaxes):
    q = (pts - np.asarray(center)) / np.asarray(semiaxes)
    return np.einsum("...i,...i->...", q, q) < 1.0


def build_geometry(spec: GeometrySpec) -> Mesh:
    """Generate a tagged hexahedral mesh for the given idealized geometry."""
    spec.validate()
    if spec.kind == GeometryKind.SLAB:
        return _build_slab(spec)
    if spec.kind == GeometryKind.LV_ELLIPSOID:
        return _build_ellipsoidal(spec, with_rv=False)
    if spec.kind == GeometryKind.BIVENTRICLE:
        return _build_ellipsoidal(spec, with_rv=True)
    raise MeshError(f"unknown geometry kind {spec.kind}")


def _build_slab(spec: GeometrySpec) -> Mesh:
    """Rectangular slab with the testing tag map:

    -z face -> ENDO_LV, +z -> EPI, -x -> ENDO_RV, +x -> BASE, y faces -> EPI.
    The slab centerline is the +x axis (apex at x=0, base plane at x=Lx).
    """
    Lx, Ly, Lz = spec.dimensions
    nx, ny, nz = spec.element_counts
    region = np.full((nx, ny, nz), REGION_TISSUE, dtype=np.int8)
    # single-voxel padding shell encodes the tag map
    padded = np.full((nx + 2, ny + 2, nz + 2), REGION_OUT, dtype=np.int8)
    padded[1:-1, 1:-1, 1:-1] = region
    padded[1:-1, 1:-1, 0] = REGION_CAV_LV       # -z
    padded[0, 1:-1, 1:-1] = REGION_CAV_RV       # -x
    padded[-1, 1:-1, 1:-1] = REGION_ABOVE_BASE  # +x
    mesh = mesh_from_regions(
        padded[1:-1, 1:-1, 1:-1], h=1.0, origin=np.zeros(3)
    )
    # rebuild tags from the padded classification
    mesh = _retag_from_padded(mesh, padded)
    mesh.nodes = mesh.nodes * np.array([Lx / nx, Ly / ny, Lz / nz])
    mesh._cache.clear()
    return mesh


def _retag_from_padded(mesh: Mesh, padded: np.ndarray) -> Mesh:
    region = padded[1:-1, 1:-1, 1:-1]
    nx, ny, nz = region.shape
    tissue = region == REGION_TISSUE
    elem_id = -np.ones(region.shape, dtype=int)
    elem_id[tissue] = np.arange(tissue.sum())
    face_elems, face_local, face_tags = [], [], []
    for axis in range(3):
        for sign in (-1, +1):
            shift = [slice(1, -1)] * 3
            shift[axis] = slice(2, None) if sign > 0 else slice(0, -2)
            neigh = padded[tuple(shift)]
            mask = tissue & (neigh != REGION_TISSUE)
            ids = elem_id[mask]
            face_elems.append(ids)
            face_local.append(np.full(ids.shape, _DIR_TO_LOCAL_FACE[(axis, sign)]))
            face_tags.append(
                np.array([_REGION_TO_TAG[r] for r in neigh[mask]], dtype=int)
            )
    mesh.face_elems = np.concatenate(face_elems)
    mesh.face_local = np.concatenate(face_local)
    mesh.face_tags = np.concatenate(face_tags)
    return mesh


def _build_ellipsoidal(spec: GeometrySpec, with_rv: bool) -> Mesh:
    a, b, c = spec.dimensions
    t = spec.wall_thickness
    inner = (a - t, b - t, c - t)
    z_base = -c + spec.base_fraction * 2 * c

    if with_rv:
        rv_c = np.asarray(spec.rv_center)
        rv_out = np.asarray(spec.rv_semiaxes)
        t_rv = spec.rv_wall_thickness
        if t_rv <= 0 or t_rv >= min(rv_out):
            raise MeshError("invalid RV wall thickness")
        rv_in = rv_out - t_rv
        xmax = max(a, rv_c[0] + rv_out[0])
        ymax = max(b, abs(rv_c[1]) + rv_out[1])
        zmin = min(-c, rv_c[2] - rv_out[2])
    else:
        xmax, ymax, zmin = a, b, -c

    h = spec.resolution
    if h is None:
        h = spec.wall_thickness / 3 if not with_rv else spec.rv_wall_thickness / 2
    lo = np.array([-xmax, -ymax, zmin]) - h
    # one extra layer above the basal plane so basal faces see ABOVE_BASE
    hi = np.array([xmax, ymax, z_base + h])
    n = np.maximum(np.ceil((hi - lo) / h).astype(int), 1)
    # voxel centers
    idx = np.indices(tuple(n)).astype(float)
    centers = lo[None, None, None, :] + h * (idx.transpose(1, 2, 3, 0) + 0.5)

    region = np.full(tuple(n), REGION_OUT, dtype=np.int8)
    region[centers[..., 2] > z_base] = REGION_ABOVE_BASE
    in_lv_out = _inside_ellipsoid(centers, (0, 0, 0), (a, b, c))
    in_lv_in = _inside_ellipsoid(centers, (0, 0, 0), inner)
    below = centers[..., 2] <= z_base
    region[below & in_lv_out] = REGION_TISSUE
    if with_rv:
        in_rv_out = _inside_ellipsoid(centers, rv_c, rv_out)
        in_rv_in = _inside_ellipsoid(centers, rv_c, rv_in)
        region[below & in_rv_out & ~in_lv_out] = REGION_TISSUE
        region[below & in_rv_in & ~in_lv_out] = REGION_CAV_RV
    region[below & in_lv_in] = REGION_CAV_LV

    # drop cavity voxels not connected to the base plane (numerical debris)
    mesh = mesh_from_regions(region, h=h, origin=lo + 0.0)
    _check_positive_jacobians(mesh)
    if with_rv:
        if len(mesh.faces_with_tag(BoundaryTag.ENDO_LV)) == 0:
            raise MeshError("empty LV endocardium")
        if len(mesh.faces_with_tag(BoundaryTag.ENDO_RV)) == 0:
            raise MeshError("empty RV endocardium")
    else:
        if len(mesh.faces_with_tag(BoundaryTag.ENDO_LV)) == 0:
            raise MeshError("empty cavity")
    if len(mesh.faces_with_tag(BoundaryTag.BASE)) == 0:
        raise MeshError("empty base plane")
    return mesh


def _check_positive_jacobians(mesh: Mesh):
    from . import fem  # deferred; fem depends on mesh

    detj = fem.geometry_factors(mesh)["detJ"]
    if not (detj > 0).all():
        raise MeshError("element inversion in generated geometry")


# ---------------------------------------------------------------------------
# Uniform refinement and intergrid transfer
# ---------------------------------------------------------------------------

# lattice coordinates (0..2 per axis) of the VTK corners
_CORNER_LATTICE = ((HEX_LOCAL_COORDS + 1)).astype(int)


def uniform_refine(mesh: Mesh) -> Mesh:
    """Split every hexahedron into 8, keeping parent nodes with their indices.

    The child mesh stores the parent link, a per-child parent-element map and
    the sparse Q1 prolongation operator (exact on trilinear functions).
    """
    nodes = mesh.nodes
    elems = mesh.elems
    E = mesh.n_elems
    Nc = mesh.n_nodes

    new_coords = [nodes]
    rows, cols, vals = [], [], []
    rows.append(np.arange(Nc))
    cols.append(np.arange(Nc))
    vals.append(np.ones(Nc))
    next_id = Nc

    # edge midpoints
    edge_pairs = np.sort(elems[:, HEX_EDGES].reshape(-1, 2), axis=1)
    uniq_edges, edge_inv = np.unique(edge_pairs, axis=0, return_inverse=True)
    edge_ids = next_id + np.arange(len(uniq_edges))
    next_id += len(uniq_edges)
    new_coords.append(0.5 * (nodes[uniq_edges[:, 0]] + nodes[uniq_edges[:, 1]]))
    for k in range(2):
        rows.append(edge_ids)
        cols.append(uniq_edges[:, k])
        vals.append(np.full(len(uniq_edges), 0.5))

    # face midpoints
    face_quads = elems[:, HEX_LOCAL_FACES].reshape(-1, 4)
    face_keys = np.sort(face_quads, axis=1)
    uniq_faces, face_inv = np.unique(face_keys, axis=0, return_inverse=True)
    face_ids = next_id + np.arange(len(uniq_faces))
    next_id += len(uniq_faces)
    new_coords.append(nodes[uniq_faces].mean(axis=1))
    for k in range(4):
        rows.append(face_ids)
        cols.append(uniq_faces[:, k])
        vals.append(np.full(len(uniq_faces), 0.25))

    # element centers
    center_ids = next_id + np.arange(E)
    next_id += E
    new_coords.append(nodes[elems].mean(axis=1))
    for k in range(8):
        rows.append(center_ids)
        cols.append(elems[:, k])
        vals.append(np.full(E, 0.125))

    child_nodes = np.vstack(new_coords)
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(next_id, Nc),
    )

    # lattice (3x3x3) of global node ids per parent element
    lattice = np.empty((E, 3, 3, 3), dtype=int)
    for loc, (i, j, k) in enumerate(_CORNER_LATTICE):
        lattice[:, i, j, k] = elems[:, loc]
    for e_loc, (n0, n1) in enumerate(HEX_EDGES):
        li = (_CORNER_LATTICE[n0] + _CORNER_LATTICE[n1]) // 2
        lattice[:, li[0], li[1], li[2]] = edge_ids[
            edge_inv.reshape(E, 12)[:, e_loc]
        ]
    for f_loc in range(6):
        corners = _CORNER_LATTICE[HEX_LOCAL_FACES[f_loc]]
        li = corners.sum(axis=0) // 4
        lattice[:, li[0], li[1], li[2]] = face_ids[
            face_inv.reshape(E, 6)[:, f_loc]
        ]
    lattice[:, 1, 1, 1] = center_ids

    # eight children per parent
    child_elems = np.empty((E, 8, 8), dtype=int)
    for ci, (ox, oy, oz) in enumerate(
        [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
         (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
    ):
        for loc, (dx, dy, dz) in enumerate(((_CORNER_LATTICE + 0) // 2)):
            child_elems[:, ci, loc] = lattice[:, ox + dx, oy + dy, oz + dz]
    child_elems = child_elems.reshape(E * 8, 8)
    parent_elem = np.repeat(np.arange(E), 8)

    # child boundary faces: the 4 children touching each tagged parent face
    children_on_face = {
        0: [0, 3, 4, 7], 1: [1, 2, 5, 6],
        2: [0, 1, 4, 5], 3: [2, 3, 6, 7],
        4: [0, 1, 2, 3], 5: [4, 5, 6, 7],
    }
    fe, fl, ft = [], [], []
    for lf in range(6):
        sel = mesh.face_local == lf
        if not sel.any():
            continue
        parents = mesh.face_elems[sel]
        tags = mesh.face_tags[sel]
        for ci in children_on_face[lf]:
            fe.append(parents * 8 + ci)
            fl.append(np.full(parents.shape, lf))
            ft.append(tags)

    child = Mesh(
        nodes=child_nodes,
        elems=child_elems,
        face_elems=np.concatenate(fe),
        face_local=np.concatenate(fl),
        face_tags=np.concatenate(ft),
        parent=mesh,
        parent_elem=parent_elem,
        prolongation=P,
    )
    return child


def interpolate_to_fine(fine: Mesh, coarse_values: np.ndarray) -> np.ndarray:
    """Q1 interpolation of coarse nodal values onto the nested fine mesh."""
    if fine.prolongation is None or fine.parent is None:
        raise MeshError("mesh has no parent; meshes are not nested")
    if coarse_values.shape[0] != fine.parent.n_nodes:
        raise MeshError("coarse field length does not match parent mesh")
    flat = coarse_values.reshape(coarse_values.shape[0], -1)
    out = fine.prolongation @ flat
    return out.reshape((fine.n_nodes,) + coarse_values.shape[1:])


def restrict_to_coarse(fine: Mesh, fine_values: np.ndarray) -> np.ndarray:
    """Pointwise restriction: parent nodes keep their indices in the child."""
    if fine.parent is None:
        raise MeshError("mesh has no parent")
    return fine_values[: fine.parent.n_nodes]


# ---------------------------------------------------------------------------
# Derived geometric quantities
# ---------------------------------------------------------------------------

def mesh_volume(mesh: Mesh) -> float:
    from . import fem

    gf = fem.geometry_factors(mesh)
    return float((gf["detJ"] * fem.QUAD_WEIGHTS[None, :]).sum())


def apex_node(mesh: Mesh, among: np.ndarray | None = None) -> int:
    """Node minimizing the centerline (z) coordinate."""
    if among is None:
        among = np.arange(mesh.n_nodes)
    return int(among[np.argmin(mesh.nodes[among, 2])])


def base_height(mesh: Mesh) -> float:
    base_nodes = mesh.nodes_with_tag(BoundaryTag.BASE)
    return float(mesh.nodes[base_nodes, 2].max())


# ---------------------------------------------------------------------------
# VTK legacy ASCII export
# ---------------------------------------------------------------------------

def write_vtk(path, mesh: Mesh, point_data: dict | None = None,
              cell_data: dict | None = None, title="cardioem mesh"):
    """Write the volume mesh as legacy VTK (UNSTRUCTURED_GRID, cell type 12)."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_nodes} double")
    for p in mesh.nodes:
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    E = mesh.n_elems
    lines.append(f"CELLS {E} {E * 9}")
    for e in mesh.elems:
        lines.append("8 " + " ".join(str(int(i)) for i in e))
    lines.append(f"CELL_TYPES {E}")
    lines.extend(["12"] * E)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, arr in point_data.items():
            lines.extend(_vtk_data_lines(name, np.asarray(arr)))
    if cell_data:
        lines.append(f"CELL_DATA {E}")
        for name, arr in cell_data.items():
            lines.extend(_vtk_data_lines(name, np.asarray(arr)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_vtk_surface(path, mesh: Mesh, title="cardioem boundary"):
    """Companion surface file: boundary quads with their tag as cell data."""
    fn = mesh.face_nodes
    used = np.unique(fn)
    remap = -np.ones(mesh.n_nodes, dtype=int)
    remap[used] = np.arange(len(used))
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(used)} double")
    for p in mesh.nodes[used]:
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    F = fn.shape[0]
    lines.append(f"CELLS {F} {F * 5}")
    for q in remap[fn]:
        lines.append("4 " + " ".join(str(int(i)) for i in q))
    lines.append(f"CELL_TYPES {F}")
    lines.extend(["9"] * F)
    lines.append(f"CELL_DATA {F}")
    lines.extend(_vtk_data_lines("boundary_tag", mesh.face_tags.astype(float)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _vtk_data_lines(name, arr):
    lines = []
    if arr.ndim == 1:
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{v:.17g}" for v in arr)
    elif arr.ndim == 2 and arr.shape[1] == 3:
        lines.append(f"VECTORS {name} double")
        lines.extend(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in arr)
    else:
        raise ValueError(f"unsupported data shape {arr.shape} for {name}")
    return lines


def read_vtk_points_and_vectors(path):
    """Minimal legacy-VTK reader for round-trip checks (points + point data)."""
    with open(path) as f:
        tokens = f.read().split()
    data = {}
    points = None
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if t == "POINTS":
            n = int(tokens[i + 1])
            vals = np.array(tokens[i + 3: i + 3 + 3 * n], dtype=float)
            points = vals.reshape(n, 3)
            i += 3 + 3 * n
        elif t == "VECTORS":
            name = tokens[i + 1]
            n = points.shape[0]
            vals = np.array(tokens[i + 3: i + 3 + 3 * n], dtype=float)
            data[name] = vals.reshape(n, 3)
            i += 3 + 3 * n
        elif t == "SCALARS":
            name = tokens[i + 1]
            n = points.shape[0]
            # skip LOOKUP_TABLE default
            vals = np.array(tokens[i + 6: i + 6 + n], dtype=float)
            data[name] = vals
            i += 6 + n
        else:
            i += 1
    return points, data
