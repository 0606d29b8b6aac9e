"""Q1 finite-element kernels on hexahedral meshes.

Provides trilinear shape functions with 2x2x2 Gauss quadrature (2x2 on faces),
sparse mass/stiffness assembly, Dirichlet elimination with symmetric
correction, Krylov solvers with Jacobi preconditioning, scalar Laplace solves
and the L2 gradient projection used by the intergrid transfer.

Geometry factors are cached on the mesh object; meshes are immutable after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, BoundaryTag, HEX_LOCAL_COORDS, HEX_LOCAL_FACES

_G = 1.0 / np.sqrt(3.0)
QUAD_POINTS = np.array(
    [[sx * _G, sy * _G, sz * _G]
     for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)]
)
QUAD_WEIGHTS = np.ones(8)

# face parametrization: local face id -> (fixed axis, fixed value, param axes)
_FACE_AXES = {
    0: (0, -1.0, (1, 2)),
    1: (0, +1.0, (1, 2)),
    2: (1, -1.0, (0, 2)),
    3: (1, +1.0, (0, 2)),
    4: (2, -1.0, (0, 1)),
    5: (2, +1.0, (0, 1)),
}


class SolverError(Exception):
    """Linear solver breakdown or non-convergence."""


def shape_functions(xi: np.ndarray):
    """Trilinear shapes and local gradients at points xi (q, 3) in [-1,1]^3."""
    xi = np.atleast_2d(xi)
    q = xi.shape[0]
    N = np.empty((q, 8))
    dN = np.empty((q, 8, 3))
    for i, c in enumerate(HEX_LOCAL_COORDS):
        f = [(1 + c[d] * xi[:, d]) / 2 for d in range(3)]
        N[:, i] = f[0] * f[1] * f[2]
        dN[:, i, 0] = c[0] / 2 * f[1] * f[2]
        dN[:, i, 1] = c[1] / 2 * f[0] * f[2]
        dN[:, i, 2] = c[2] / 2 * f[0] * f[1]
    return N, dN


def geometry_factors(mesh: Mesh) -> dict:
    """Physical shape gradients and Jacobian determinants at volume qp.

    Returns dict with 'detJ' (E, q) and 'gradN' (E, q, 8, 3); cached.
    """
    if "geom" in mesh._cache:
        return mesh._cache["geom"]
    _, dN = shape_functions(QUAD_POINTS)  # (q,8,3)
    X = mesh.nodes[mesh.elems]  # (E,8,3)
    # J[e,q,a,b] = dx_a/dxi_b
    J = np.einsum("eia,qib->eqab", X, dN)
    detJ = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    gradN = np.einsum("qib,eqba->eqia", dN, Jinv)
    mesh._cache["geom"] = {"detJ": detJ, "gradN": gradN}
    return mesh._cache["geom"]


def face_factors(mesh: Mesh) -> dict:
    """Element shape data and reference normals at boundary-face qp.

    Returns dict with, per boundary face (F) and face qp (q=4):
      'N'        (F, q, 8)    element shape values
      'gradN'    (F, q, 8, 3) physical element shape gradients
      'normal'   (F, q, 3)    unit outward reference normal
      'area_w'   (F, q)       reference area weight (quad weight included)
      'xq'       (F, q, 3)    reference positions of the face qp
    """
    if "face" in mesh._cache:
        return mesh._cache["face"]
    F = mesh.face_elems.shape[0]
    Nf = np.empty((F, 4, 8))
    gradNf = np.empty((F, 4, 8, 3))
    normal = np.empty((F, 4, 3))
    area_w = np.empty((F, 4))
    xq = np.empty((F, 4, 3))
    gp2 = np.array([(-_G, -_G), (+_G, -_G), (-_G, +_G), (+_G, +_G)])

    for lf in range(6):
        sel = np.nonzero(mesh.face_local == lf)[0]
        if len(sel) == 0:
            continue
        fixed_axis, fixed_val, (pa, pb) = _FACE_AXES[lf]
        xi = np.zeros((4, 3))
        xi[:, fixed_axis] = fixed_val
        xi[:, pa] = gp2[:, 0]
        xi[:, pb] = gp2[:, 1]
        N, dN = shape_functions(xi)  # (4,8), (4,8,3)
        X = mesh.nodes[mesh.elems[mesh.face_elems[sel]]]  # (f,8,3)
        Jf = np.einsum("fia,qib->fqab", X, dN)
        detJ = np.linalg.det(Jf)
        Jinv = np.linalg.inv(Jf)
        gN = np.einsum("qib,fqba->fqia", dN, Jinv)
        # reference tangents along the two parametric axes
        ta = Jf[..., pa]  # (f,q,3) = dX/dxi_pa
        tb = Jf[..., pb]
        cr = np.cross(ta, tb)
        # orient outward: outward direction is sign of fixed_val along axis,
        # measured in the element's local frame via J
        out_local = np.zeros(3)
        out_local[fixed_axis] = fixed_val
        out_phys = np.einsum("fqab,b->fqa", Jf, out_local)
        sgn = np.sign(np.einsum("fqa,fqa->fq", cr, out_phys))
        cr = cr * sgn[..., None]
        nrm = np.linalg.norm(cr, axis=-1)
        Nf[sel] = N[None]
        gradNf[sel] = gN
        normal[sel] = cr / nrm[..., None]
        area_w[sel] = nrm  # quad weight 1 on each of the 4 points
        xq[sel] = np.einsum("qi,fia->fqa", N, X)
        del detJ
    mesh._cache["face"] = {
        "N": Nf, "gradN": gradNf, "normal": normal, "area_w": area_w, "xq": xq
    }
    return mesh._cache["face"]


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble_stiffness(mesh: Mesh, tensor=None) -> sp.csr_matrix:
    """Assemble the scalar stiffness matrix int grad(phi_i) . A grad(phi_j).

    ``tensor`` is None (identity), a scalar, or an (E, q, 3, 3) field.
    """
    gf = geometry_factors(mesh)
    gradN, detJ = gf["gradN"], gf["detJ"]
    w = QUAD_WEIGHTS[None, :] * detJ  # (E,q)
    if tensor is None:
        ke = np.einsum("eq,eqia,eqja->eij", w, gradN, gradN)
    elif np.isscalar(tensor):
        ke = tensor * np.einsum("eq,eqia,eqja->eij", w, gradN, gradN)
    else:
        ke = np.einsum("eq,eqia,eqab,eqjb->eij", w, gradN, tensor, gradN)
    return _assemble_from_element_matrices(mesh, ke)


def assemble_mass(mesh: Mesh, lumped: bool = False):
    """Scalar mass matrix; lumped variant returns the diagonal vector."""
    gf = geometry_factors(mesh)
    detJ = gf["detJ"]
    N, _ = shape_functions(QUAD_POINTS)
    w = QUAD_WEIGHTS[None, :] * detJ
    me = np.einsum("eq,qi,qj->eij", w, N, N)
    if lumped:
        diag = np.zeros(mesh.n_nodes)
        np.add.at(diag, mesh.elems, me.sum(axis=2))
        return diag
    return _assemble_from_element_matrices(mesh, me)


def _assemble_from_element_matrices(mesh: Mesh, ke: np.ndarray) -> sp.csr_matrix:
    E = mesh.n_elems
    rows = np.repeat(mesh.elems, 8, axis=1).ravel()
    cols = np.tile(mesh.elems, (1, 8)).ravel()
    K = sp.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    )
    return K.tocsr()


@dataclass
class LinearSystem:
    """Sparse system with optional Dirichlet constraints.

    After :meth:`constrain`, constrained rows/columns are eliminated with the
    symmetric correction (identity rows, rhs moved), so SPD structure is kept.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_nodes: np.ndarray | None = None
    dirichlet_values: np.ndarray | None = None
    _constrained: bool = field(default=False, repr=False)

    def constrain(self) -> "LinearSystem":
        if self._constrained or self.dirichlet_nodes is None:
            self._constrained = True
            return self
        n = self.matrix.shape[0]
        c = np.asarray(self.dirichlet_nodes, dtype=int)
        vals = np.asarray(self.dirichlet_values, dtype=float)
        if len(c) != len(vals):
            raise ValueError("dirichlet node/value length mismatch")
        keep = np.ones(n, dtype=bool)
        keep[c] = False
        A = self.matrix.tocsc()
        # move known columns to the rhs
        self.rhs = self.rhs - A[:, c] @ vals
        # zero rows/cols, identity on the diagonal
        D = sp.diags(keep.astype(float))
        A = (D @ A @ D).tolil()
        A[c, c] = 1.0
        self.matrix = A.tocsr()
        self.rhs[c] = vals
        self._constrained = True
        return self


def iterative_solve(system: LinearSystem, kind: str = "SPD",
                    tol: float = 1e-10, max_iter: int = 5000) -> np.ndarray:
    """Krylov solve: CG for SPD systems, GMRES otherwise; Jacobi preconditioner.

    Converges on relative residual <= tol (absolute if rhs is zero); raises
    SolverError with the final residual on breakdown or max_iter.
    """
    system.constrain()
    A, b = system.matrix, system.rhs
    diag = A.diagonal()
    if (diag == 0).any():
        raise SolverError("zero diagonal entry: system is singular "
                          "(missing Dirichlet data?)")
    M = sp.diags(1.0 / diag)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    if kind == "SPD":
        x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=max_iter, M=M)
    else:
        x, info = spla.gmres(A, b, rtol=tol, atol=0.0, maxiter=max_iter,
                             M=M, restart=200)
    res = np.linalg.norm(b - A @ x) / bnorm
    if info != 0 or not np.isfinite(res) or res > 10 * tol:
        raise SolverError(f"Krylov solver failed: info={info}, "
                          f"relative residual={res:.3e}")
    return x


def solve_laplace(mesh: Mesh, dirichlet: dict, neumann_tags=None,
                  extra_dirichlet=None, tol: float = 1e-10) -> np.ndarray:
    """Solve -Laplace(chi)=0 with Dirichlet data per boundary tag.

    ``dirichlet`` maps BoundaryTag -> value; remaining tags get homogeneous
    Neumann conditions.  ``extra_dirichlet`` is an optional (nodes, values)
    pair for point constraints (e.g. an apical patch).
    The discrete solution satisfies the maximum principle up to solver
    tolerance on the generated meshes.
    """
    if not dirichlet and extra_dirichlet is None:
        raise SolverError("Laplace problem needs Dirichlet data")
    K = assemble_stiffness(mesh)
    nodes, vals = [], []
    for tag, value in dirichlet.items():
        tag_nodes = mesh.nodes_with_tag(BoundaryTag(tag))
        if len(tag_nodes) == 0:
            raise SolverError(f"no boundary faces with tag {tag}")
        nodes.append(tag_nodes)
        vals.append(np.full(len(tag_nodes), float(value)))
    if extra_dirichlet is not None:
        en, ev = extra_dirichlet
        nodes.append(np.asarray(en, dtype=int))
        vals.append(np.broadcast_to(np.asarray(ev, dtype=float),
                                    (len(np.atleast_1d(en)),)).copy())
    nodes = np.concatenate(nodes)
    vals = np.concatenate(vals)
    # later entries win on duplicates; tag sets can share edge nodes
    _, first = np.unique(nodes[::-1], return_index=True)
    keep = len(nodes) - 1 - first
    system = LinearSystem(K, np.zeros(mesh.n_nodes),
                          dirichlet_nodes=nodes[keep],
                          dirichlet_values=vals[keep])
    return iterative_solve(system, kind="SPD", tol=tol)


# ---------------------------------------------------------------------------
# Gradient recovery
# ---------------------------------------------------------------------------

def _mass_factorization(mesh: Mesh):
    if "mass_lu" not in mesh._cache:
        M = assemble_mass(mesh).tocsc()
        mesh._cache["mass_lu"] = spla.splu(M)
    return mesh._cache["mass_lu"]


def elementwise_gradient(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Gradient of a nodal field at volume qp.

    For scalar input (N,): returns (E, q, 3).
    For vector input (N, 3): returns (E, q, 3, 3) with g[..., a, b] = d v_a/d x_b.
    """
    gf = geometry_factors(mesh)
    vi = values[mesh.elems]  # (E,8) or (E,8,3)
    if values.ndim == 1:
        return np.einsum("eqib,ei->eqb", gf["gradN"], vi)
    return np.einsum("eqib,eia->eqab", gf["gradN"], vi)


def project_gradient(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """L2 projection of the elementwise gradient onto the Q1 nodal space.

    Exact for fields with constant gradient; the result can be interpolated
    to a nested fine mesh.
    """
    gf = geometry_factors(mesh)
    N, _ = shape_functions(QUAD_POINTS)
    w = QUAD_WEIGHTS[None, :] * gf["detJ"]  # (E,q)
    g = elementwise_gradient(mesh, values)
    comp_shape = g.shape[2:]
    gflat = g.reshape(g.shape[0], g.shape[1], -1)
    rhs = np.zeros((mesh.n_nodes, gflat.shape[2]))
    contrib = np.einsum("eq,qi,eqc->eic", w, N, gflat)
    np.add.at(rhs, mesh.elems, contrib)
    lu = _mass_factorization(mesh)
    out = lu.solve(rhs)
    return out.reshape((mesh.n_nodes,) + comp_shape)


def nodal_volumes(mesh: Mesh) -> np.ndarray:
    """Lumped nodal volumes (row sums of the mass matrix)."""
    return assemble_mass(mesh, lumped=True)
