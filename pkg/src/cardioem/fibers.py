"""Rule-based myocardial fiber generation.

Harmonic distance fields (transmural, apico-basal, inter-ventricular and a
fast-layer marker) are combined into a local orthonormal frame per node,
which is then rotated by transmurally varying helical and sheetlet angles.
Two rules are available: D_RBM builds per-ventricle apico-basal fields,
R_RBM uses a single global one; both produce a discontinuity across the
septal midsurface on biventricular domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .mesh import Mesh, BoundaryTag

D_RBM = "D_RBM"
R_RBM = "R_RBM"

LV = "LV"
RV = "RV"

_MIN_FRAME_ANGLE_DEG = 1.0


class FiberError(Exception):
    """Degenerate frame or missing boundary data during fiber generation."""


@dataclass
class AngleSet:
    """Helical (alpha) and sheetlet (beta) angles in degrees, per side.

    Transmural variation is linear: theta(d) = theta_epi (1 - d) + theta_endo d
    with d = 0 on the epicardium and d = 1 on the endocardium.
    """

    alpha_epi_lv: float = -60.0
    alpha_endo_lv: float = 60.0
    alpha_epi_rv: float = -25.0
    alpha_endo_rv: float = 90.0
    beta_epi_lv: float = 20.0
    beta_endo_lv: float = -20.0
    beta_epi_rv: float = 20.0
    beta_endo_rv: float = 0.0

    def validate(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v):
                raise FiberError(f"non-finite angle {name}")
        return self


@dataclass
class DistanceFields:
    """Nodal harmonic distance fields and their projected gradients."""

    phi: np.ndarray        # transmural: 0 endocardium, 1 epicardium
    psi: np.ndarray        # apico-basal: 0 apex patch, 1 base
    xi: np.ndarray         # inter-ventricular: +1 ENDO_LV, -1 ENDO_RV
    xi_hat: np.ndarray     # (xi + 1) / 2
    phi_fast: np.ndarray   # 0 on endocardia, 1 on epicardium + base
    grad_phi: np.ndarray   # (N, 3)
    grad_psi: np.ndarray   # (N, 3)
    rule: str = D_RBM
    centerline: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))


@dataclass
class FiberField:
    """Per-node orthonormal fiber/sheet/sheet-normal unit vectors."""

    f0: np.ndarray
    s0: np.ndarray
    n0: np.ndarray
    rule: str
    angles: AngleSet


def mesh_centerline(mesh: Mesh) -> np.ndarray:
    """Unit centerline direction: mean outward normal of the basal plane."""
    ff = fem.face_factors(mesh)
    sel = mesh.face_tags == BoundaryTag.BASE
    if not sel.any():
        raise FiberError("mesh has no BASE faces")
    n = ff["normal"][sel].reshape(-1, 3).mean(axis=0)
    return n / np.linalg.norm(n)


def _min_edge_length(mesh: Mesh) -> float:
    from .mesh import HEX_EDGES

    X = mesh.nodes[mesh.elems[0]]
    return min(np.linalg.norm(X[a] - X[b]) for a, b in HEX_EDGES)


def _apex_patch(mesh: Mesh, centerline, among, radius):
    """Nodes of ``among`` within ``radius`` of the apical extreme plane.

    Defined through the centerline projection only, so the patch is stable
    under rigid rotation of the mesh (no node-id tie breaking).
    """
    proj = mesh.nodes[among] @ centerline
    return among[proj - proj.min() <= radius]


def compute_distance_fields(mesh: Mesh, rule: str = D_RBM,
                            apex_patch_radius: float | None = None) -> DistanceFields:
    """Solve the Laplace problems defining the distance fields.

    phi: 0 on both endocardia, 1 on the epicardium; psi: 0 on a small apical
    node patch, 1 on the base (per ventricle for D_RBM, global for R_RBM);
    xi: +1 on ENDO_LV, -1 on ENDO_RV (identically +1 without an RV);
    phi_fast: 0 on the endocardia, 1 on epicardium and base.
    """
    if rule not in (D_RBM, R_RBM):
        raise FiberError(f"unknown fiber rule {rule!r}")
    has_rv = len(mesh.faces_with_tag(BoundaryTag.ENDO_RV)) > 0
    centerline = mesh_centerline(mesh)
    if apex_patch_radius is None:
        # 1.9 element sizes: strictly between lattice plane distances, so the
        # patch never depends on floating-point ties
        apex_patch_radius = 1.9 * _min_edge_length(mesh)

    # endocardial data listed last: at the thin RV insertion line a node can
    # sit on both an endocardial and an epicardial face, and there the
    # endocardial value wins (keeps the fast layer contiguous)
    endo = {BoundaryTag.ENDO_LV: 0.0}
    if has_rv:
        endo[BoundaryTag.ENDO_RV] = 0.0
    phi = fem.solve_laplace(mesh, {BoundaryTag.EPI: 1.0, **endo})
    phi_fast = fem.solve_laplace(
        mesh, {BoundaryTag.EPI: 1.0, BoundaryTag.BASE: 1.0, **endo})

    if has_rv:
        xi = fem.solve_laplace(mesh, {BoundaryTag.ENDO_LV: 1.0,
                                      BoundaryTag.ENDO_RV: -1.0})
    else:
        xi = np.ones(mesh.n_nodes)
    xi_hat = (xi + 1.0) / 2.0

    all_nodes = np.arange(mesh.n_nodes)

    def psi_for(among):
        patch = _apex_patch(mesh, centerline, among, apex_patch_radius)
        p = fem.solve_laplace(mesh, {BoundaryTag.BASE: 1.0},
                              extra_dirichlet=(patch, 0.0))
        return p, fem.project_gradient(mesh, p)

    if rule == D_RBM and has_rv:
        side_lv = xi_hat >= 0.5
        psi_l, g_l = psi_for(all_nodes[side_lv])
        psi_r, g_r = psi_for(all_nodes[~side_lv])
        psi = np.where(side_lv, psi_l, psi_r)
        grad_psi = np.where(side_lv[:, None], g_l, g_r)
    else:
        psi, grad_psi = psi_for(all_nodes)

    grad_phi = fem.project_gradient(mesh, phi)
    return DistanceFields(phi=phi, psi=psi, xi=xi, xi_hat=xi_hat,
                          phi_fast=phi_fast, grad_phi=grad_phi,
                          grad_psi=grad_psi, rule=rule, centerline=centerline)


def local_frame(grad_phi: np.ndarray, grad_psi: np.ndarray):
    """Orthonormal local frame(s) from the two field gradients.

    e_t is the unit transmural direction, e_n the component of grad_psi
    orthogonal to it, and e_l = e_t x e_n completes the frame so that the
    rotated triplet (f0, s0, n0) has determinant +1.
    Raises FiberError (with node indices) where the gradients are within
    one degree of parallel.
    """
    gp = np.atleast_2d(np.asarray(grad_phi, dtype=float))
    gs = np.atleast_2d(np.asarray(grad_psi, dtype=float))
    np_phi = np.linalg.norm(gp, axis=1)
    if (np_phi == 0).any():
        bad = np.nonzero(np_phi == 0)[0]
        raise FiberError(f"vanishing transmural gradient at nodes {bad[:10]}")
    e_t = gp / np_phi[:, None]
    proj = np.einsum("na,na->n", gs, e_t)
    en_raw = gs - proj[:, None] * e_t
    ns = np.linalg.norm(gs, axis=1)
    nn = np.linalg.norm(en_raw, axis=1)
    sin_angle = np.where(ns > 0, nn / np.where(ns > 0, ns, 1.0), 0.0)
    bad = sin_angle < np.sin(np.deg2rad(_MIN_FRAME_ANGLE_DEG))
    if bad.any():
        ids = np.nonzero(bad)[0]
        raise FiberError(
            f"degenerate frame (gradients near parallel) at nodes {ids[:10]}"
            + ("..." if len(ids) > 10 else ""))
    e_n = en_raw / nn[:, None]
    e_l = np.cross(e_t, e_n)
    if grad_phi is not None and np.asarray(grad_phi).ndim == 1:
        return e_l[0], e_n[0], e_t[0]
    return e_l, e_n, e_t


def transmural_angles(d, side: str, angles: AngleSet):
    """Linear angle law: theta(d) = theta_epi (1 - d) + theta_endo d."""
    d = np.asarray(d, dtype=float)
    if (d < -1e-6).any() or (d > 1 + 1e-6).any():
        raise FiberError("transmural coordinate outside [0, 1]")
    d = np.clip(d, 0.0, 1.0)
    if side == LV:
        a0, a1 = angles.alpha_epi_lv, angles.alpha_endo_lv
        b0, b1 = angles.beta_epi_lv, angles.beta_endo_lv
    elif side == RV:
        a0, a1 = angles.alpha_epi_rv, angles.alpha_endo_rv
        b0, b1 = angles.beta_epi_rv, angles.beta_endo_rv
    else:
        raise FiberError(f"unknown side {side!r}")
    return a0 * (1 - d) + a1 * d, b0 * (1 - d) + b1 * d


def rotate_frame(frame, alpha, beta):
    """Rotate (e_l, e_n, e_t) into (f0, s0, n0).

    f0 is e_l rotated by alpha about e_t (counterclockwise toward e_n),
    then the sheet pair is rotated by beta about f0. Angles in degrees;
    accepts single vectors or (N, 3) stacks.
    """
    e_l, e_n, e_t = (np.atleast_2d(np.asarray(v, dtype=float)) for v in frame)
    a = np.deg2rad(np.broadcast_to(np.asarray(alpha, dtype=float),
                                   (e_l.shape[0],)))
    b = np.deg2rad(np.broadcast_to(np.asarray(beta, dtype=float),
                                   (e_l.shape[0],)))
    ca, sa = np.cos(a)[:, None], np.sin(a)[:, None]
    f0 = ca * e_l + sa * e_n
    n1 = -sa * e_l + ca * e_n
    s1 = e_t
    cb, sb = np.cos(b)[:, None], np.sin(b)[:, None]
    s0 = cb * s1 + sb * np.cross(f0, s1)
    n0 = cb * n1 + sb * np.cross(f0, n1)
    if np.asarray(frame[0]).ndim == 1:
        return f0[0], s0[0], n0[0]
    return f0, s0, n0


def _regularize_apical_gradients(mesh: Mesh, fields: DistanceFields):
    """Replace grad_psi where it is near parallel to grad_phi.

    Near the apex the apico-basal and transmural gradients align and the
    frame degenerates; there the apico-basal direction is substituted with
    the centerline (or a circumferential direction if the centerline itself
    aligns with the transmural direction). Both substitutes transform with
    rigid rotations of the mesh, so equivariance of the fibers is kept.
    """
    gp = fields.grad_phi
    gs = fields.grad_psi.copy()
    e_t = gp / np.linalg.norm(gp, axis=1)[:, None]
    sin_min = np.sin(np.deg2rad(_MIN_FRAME_ANGLE_DEG))

    def degenerate(v):
        n = np.linalg.norm(v, axis=1)
        perp = v - np.einsum("na,na->n", v, e_t)[:, None] * e_t
        return np.linalg.norm(perp, axis=1) <= sin_min * np.maximum(n, 1e-300)

    bad = degenerate(gs)
    if bad.any():
        gs[bad] = fields.centerline
        still = degenerate(gs) & bad
        if still.any():
            centroid = mesh.nodes.mean(axis=0)
            circ = np.cross(fields.centerline, mesh.nodes[still] - centroid)
            gs[still] = circ
    return gs


def generate_fibers(mesh: Mesh, rule: str = D_RBM,
                    angles: AngleSet | None = None,
                    fields: DistanceFields | None = None) -> FiberField:
    """Generate the nodal fiber/sheet/normal field for the given rule."""
    if angles is None:
        angles = AngleSet()
    angles.validate()
    if fields is None:
        fields = compute_distance_fields(mesh, rule=rule)
    elif fields.rule != rule:
        raise FiberError(f"fields were built for rule {fields.rule}, not {rule}")

    grad_psi = _regularize_apical_gradients(mesh, fields)
    e_l, e_n, e_t = local_frame(fields.grad_phi, grad_psi)
    d = np.clip(1.0 - fields.phi, 0.0, 1.0)
    a_lv, b_lv = transmural_angles(d, LV, angles)
    a_rv, b_rv = transmural_angles(d, RV, angles)
    is_lv = fields.xi_hat >= 0.5
    alpha = np.where(is_lv, a_lv, a_rv)
    beta = np.where(is_lv, b_lv, b_rv)
    f0, s0, n0 = rotate_frame((e_l, e_n, e_t), alpha, beta)
    return FiberField(f0=f0, s0=s0, n0=n0, rule=rule, angles=angles)


def fast_layer_mask(fields: DistanceFields, eps: float = 0.01) -> np.ndarray:
    """Boolean nodal mask of the fast endocardial conduction layer."""
    if eps <= 0:
        raise FiberError("fast-layer threshold must be positive")
    return fields.phi_fast <= eps


def write_fibers_vtk(path, mesh: Mesh, fib: FiberField):
    """Export fibers as VTK point-data vectors (FIBERS, SHEETS, NORMALS)."""
    from .mesh import write_vtk

    write_vtk(path, mesh, point_data={"FIBERS": fib.f0, "SHEETS": fib.s0,
                                      "NORMALS": fib.n0})
