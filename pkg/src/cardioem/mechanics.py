"""Hyperelastic mechanics of the ventricular wall.

Passive orthotropic exponential (Guccione-type) material with a volumetric
penalty, orthotropic active stress, generalized Robin conditions on the
epicardium, pressure follower loads on the endocardia and an
energy-consistent traction on the basal plane (three variants). Quasi-static
and BDF1 dynamic residuals share one assembly path.

Jacobians are exact: element tangents are obtained by complex-step
differentiation of the (holomorphic) integrands, which is accurate to
machine precision, and the nonlocal base-traction coupling is carried as an
explicit low-rank correction. A finite-difference fallback is kept for
verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .mesh import Mesh, BoundaryTag

UNIFORM = "UNIFORM"
PER_BASE = "PER_BASE"
WEIGHTED = "WEIGHTED"

QUASISTATIC = "QUASISTATIC"
DYNAMIC = "DYNAMIC"

_CS_H = 1e-30  # complex-step size; no subtractive cancellation occurs


class MechanicsError(Exception):
    pass


@dataclass
class MaterialParams:
    a: float = 0.88e3       # Pa, material stiffness
    kappa: float = 50e3     # Pa, bulk modulus (volumetric penalty)
    b_ff: float = 8.0
    b_ss: float = 6.0
    b_nn: float = 3.0
    b_fs: float = 12.0
    b_fn: float = 3.0
    b_sn: float = 3.0
    rho_s: float = 1e3      # kg/m^3
    n_f: float = 0.7        # active-stress proportions
    n_s: float = 0.0
    n_n: float = 0.3
    # Robin epicardium; the source table swaps the normal/tangential labels,
    # the values here follow the physical convention (stiffer normally)
    k_perp: float = 2e5     # Pa/m
    k_par: float = 2e4      # Pa/m
    c_perp: float = 2e4     # Pa s/m
    c_par: float = 2e3      # Pa s/m

    def validate(self):
        if self.a <= 0 or self.kappa <= 0:
            raise MechanicsError("a and kappa must be positive")
        for name in ("b_ff", "b_ss", "b_nn", "b_fs", "b_fn", "b_sn"):
            if getattr(self, name) < 0:
                raise MechanicsError(f"{name} must be nonnegative")
        if min(self.n_f, self.n_s, self.n_n) < 0:
            raise MechanicsError("active proportions must be nonnegative")
        return self

    def b_matrix(self):
        return np.array([[self.b_ff, self.b_fs, self.b_fn],
                         [self.b_fs, self.b_ss, self.b_sn],
                         [self.b_fn, self.b_sn, self.b_nn]])


def _mT(A):
    return np.swapaxes(A, -1, -2)


def _fiber_basis(fibers):
    """Stack (f0, s0, n0) as columns of a rotation: Qm[..., :, k] = k0."""
    f0, s0, n0 = (np.asarray(v, dtype=float) for v in fibers)
    return np.stack([f0, s0, n0], axis=-1)


def green_lagrange(F):
    F = np.asarray(F)
    return 0.5 * (_mT(F) @ F - np.eye(3))


def strain_energy(F, fibers, params: MaterialParams):
    """W = kappa/2 (J-1) log J + a/2 (exp(Q) - 1), Q quadratic in E."""
    F = np.asarray(F)
    Qm = _fiber_basis(fibers)
    E = green_lagrange(F)
    Ef = _mT(Qm) @ E @ Qm
    B = params.b_matrix()
    Q = np.einsum("ij,...ij,...ij->...", B, Ef, Ef)
    J = np.linalg.det(F)
    if not np.iscomplexobj(F) and (np.real(J) <= 0).any():
        raise MechanicsError("inverted element (J <= 0)")
    return (params.kappa / 2) * (J - 1) * np.log(J) \
        + (params.a / 2) * (np.exp(Q) - 1)


def passive_piola(F, fibers, params: MaterialParams):
    """First Piola stress of the passive law, P = F S + P_vol (Pa)."""
    F = np.asarray(F)
    Qm = _fiber_basis(fibers)
    E = green_lagrange(F)
    Ef = _mT(Qm) @ E @ Qm
    B = params.b_matrix()
    Q = np.einsum("ij,...ij,...ij->...", B, Ef, Ef)
    S = params.a * np.exp(Q)[..., None, None] * (Qm @ (B * Ef) @ _mT(Qm))
    J = np.linalg.det(F)
    if not np.iscomplexobj(F) and (np.real(J) <= 0).any():
        raise MechanicsError("inverted element (J <= 0)")
    dUdJ = (params.kappa / 2) * (np.log(J) + 1.0 - 1.0 / J)
    FinvT = _mT(np.linalg.inv(F))
    return F @ S + (dUdJ * J)[..., None, None] * FinvT


def active_piola(F, fibers, T_a, n_props=(0.7, 0.0, 0.3)):
    """Active stress T_a sum_k n_k (F k0 x k0)/sqrt(I4k) (Pa)."""
    F = np.asarray(F)
    T_a = np.asarray(T_a)
    out = np.zeros(np.broadcast_shapes(F.shape, T_a.shape + (1, 1)),
                   dtype=F.dtype)
    for nk, k0 in zip(n_props, fibers):
        if nk == 0.0:
            continue
        k0 = np.asarray(k0)
        v = np.einsum("...ab,...b->...a", F, k0)
        i4 = np.einsum("...a,...a->...", v, v)  # no conjugation: holomorphic
        out = out + (nk * T_a / np.sqrt(i4))[..., None, None] \
            * np.einsum("...a,...b->...ab", v, k0)
    return out


def _csqnorm(v):
    """Holomorphic |v|: sqrt(sum v_k^2), equals the norm for real input."""
    return np.sqrt(np.einsum("...a,...a->...", v, v))


def _nanson(F, N):
    """Deformed area vector J F^{-T} N per unit reference area."""
    J = np.linalg.det(F)
    FinvT = _mT(np.linalg.inv(F))
    return J[..., None] * np.einsum("...ab,...b->...a", FinvT, N)


class MechanicsProblem:
    """Assembled-state holder for one mesh + fiber field + material.

    Displacements are nodal (N, 3); the flat dof ordering is
    (node, component). xi_hat is the nodal inter-ventricular coordinate used
    for the base-traction weights.
    """

    def __init__(self, mesh: Mesh, fibers, xi_hat, params: MaterialParams,
                 base_variant: str = WEIGHTED):
        if base_variant not in (UNIFORM, PER_BASE, WEIGHTED):
            raise MechanicsError(f"unknown base variant {base_variant!r}")
        self.mesh = mesh
        self.params = params.validate()
        self.base_variant = base_variant
        self.xi_hat = np.asarray(xi_hat, dtype=float)

        gf = fem.geometry_factors(mesh)
        self.gradN = gf["gradN"]                       # (E, q, 8, 3)
        self.wdet = fem.QUAD_WEIGHTS[None, :] * gf["detJ"]  # (E, q)
        N8, _ = fem.shape_functions(fem.QUAD_POINTS)
        self.N8 = N8                                    # (q, 8)

        def at_qp(nodal):
            return np.einsum("qi,ei...->eq...", N8, nodal[mesh.elems])

        dirs = []
        for k0 in fibers:
            v = at_qp(np.asarray(k0, dtype=float))
            dirs.append(v / np.linalg.norm(v, axis=-1)[..., None])
        self.dirs = tuple(dirs)                         # each (E, q, 3)
        self.Qm = _fiber_basis(self.dirs)               # (E, q, 3, 3)

        self.edofs = (3 * mesh.elems[:, :, None]
                      + np.arange(3)).reshape(mesh.n_elems, 24)

        ff = fem.face_factors(mesh)
        self.ff = ff
        tags = mesh.face_tags
        self.epi_faces = np.nonzero(tags == BoundaryTag.EPI)[0]
        self.endo_faces = {
            "LV": np.nonzero(tags == BoundaryTag.ENDO_LV)[0],
            "RV": np.nonzero(tags == BoundaryTag.ENDO_RV)[0],
        }
        self.base_faces = np.nonzero(tags == BoundaryTag.BASE)[0]
        if len(self.base_faces) == 0:
            raise MechanicsError("mesh has no basal faces")
        self.fdofs = (3 * mesh.elems[mesh.face_elems][:, :, None]
                      + np.arange(3)).reshape(len(tags), 24)

        # base weights at face quadrature points
        xi_qp = np.einsum("fqi,fi->fq", ff["N"][self.base_faces],
                          self.xi_hat[mesh.elems[
                              mesh.face_elems[self.base_faces]]])
        if base_variant == WEIGHTED:
            self.w_base = {"LV": xi_qp, "RV": 1.0 - xi_qp}
        elif base_variant == PER_BASE:
            ind = (xi_qp >= 0.5).astype(float)
            self.w_base = {"LV": ind, "RV": 1.0 - ind}
        else:
            half = np.full_like(xi_qp, 0.5)
            self.w_base = {"LV": half, "RV": half}

        self._robin_K = self._assemble_robin(params.k_perp, params.k_par)
        self._robin_C = self._assemble_robin(params.c_perp, params.c_par)
        self._mass = self._assemble_vector_mass()
        self.n_dofs = 3 * mesh.n_nodes

    # -- constant matrices --------------------------------------------------

    def _assemble_robin(self, perp, par):
        ff, sel = self.ff, self.epi_faces
        if len(sel) == 0:
            return sp.csr_matrix((3 * self.mesh.n_nodes,) * 2)
        Nv = ff["N"][sel]            # (f, q, 8)
        aw = ff["area_w"][sel]       # (f, q)
        nrm = ff["normal"][sel]      # (f, q, 3)
        Kmat = perp * np.einsum("fqa,fqb->fqab", nrm, nrm) \
            + par * (np.eye(3) - np.einsum("fqa,fqb->fqab", nrm, nrm))
        ke = np.einsum("fq,fqi,fqj,fqab->fiajb", aw, Nv, Nv, Kmat)
        ke = ke.reshape(len(sel), 24, 24)
        return self._scatter_face_matrix(ke, sel)

    def _assemble_vector_mass(self):
        me = np.einsum("eq,qi,qj->eij", self.wdet, self.N8, self.N8)
        ke = np.einsum("eij,ab->eiajb", me, np.eye(3)).reshape(-1, 24, 24)
        rows = np.repeat(self.edofs, 24, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 24)).ravel()
        n = 3 * self.mesh.n_nodes
        return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    def _scatter_face_matrix(self, ke, faces):
        dofs = self.fdofs[faces]
        rows = np.repeat(dofs, 24, axis=1).ravel()
        cols = np.tile(dofs, (1, 24)).ravel()
        n = 3 * self.mesh.n_nodes
        return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    # -- kinematics ----------------------------------------------------------

    def deformation_gradient(self, d):
        """F = I + grad d at volume quadrature points; d nodal (N, 3)."""
        de = d[self.mesh.elems]
        return np.eye(3) + np.einsum("eqib,eia->eqab", self.gradN, de)

    def face_deformation_gradient(self, d, faces):
        de = d[self.mesh.elems[self.mesh.face_elems[faces]]]
        return np.eye(3) + np.einsum(
            "fqib,fia->fqab", self.ff["gradN"][faces], de)

    def ta_at_qp(self, Ta):
        return np.einsum("qi,ei->eq", self.N8, np.asarray(Ta)[self.mesh.elems])

    # -- residual pieces -----------------------------------------------------

    def _volume_contrib(self, F, Ta_qp):
        P = passive_piola(F, self.dirs, self.params)
        p = self.params
        P = P + active_piola(F, self.dirs, Ta_qp, (p.n_f, p.n_s, p.n_n))
        return np.einsum("eq,eqab,eqib->eia", self.wdet, P, self.gradN)

    def _endo_contrib(self, F, faces, pressure):
        """+ p * integral (J F^-T N) . phi over the given endocardial faces."""
        jfn = _nanson(F, self.ff["normal"][faces])
        aw = self.ff["area_w"][faces]
        return pressure * np.einsum("fq,fqa,fqi->fia", aw, jfn,
                                    self.ff["N"][faces])

    def base_integrals(self, d):
        """Per-side deformed endocardial area vectors I and base denominators D."""
        out = {}
        for side in ("LV", "RV"):
            faces = self.endo_faces[side]
            if len(faces) == 0:
                out[side] = (np.zeros(3), 1.0)
                continue
            F = self.face_deformation_gradient(d, faces)
            jfn = _nanson(F, self.ff["normal"][faces])
            I = np.einsum("fq,fqa->a", self.ff["area_w"][faces], jfn)
            Fb = self.face_deformation_gradient(d, self.base_faces)
            jfn_b = _csqnorm(_nanson(Fb, self.ff["normal"][self.base_faces]))
            D = np.einsum("fq,fq->", self.ff["area_w"][self.base_faces],
                          self.w_base[side] * jfn_b)
            if abs(D) < 1e-300:
                raise MechanicsError(
                    f"zero base weight integral for side {side}")
            out[side] = (I, D)
        return out

    def base_traction_qp(self, d, p_lv, p_rv, integrals=None):
        """Traction on the base at face qp (per unit reference area)."""
        if integrals is None:
            integrals = self.base_integrals(d)
        Fb = self.face_deformation_gradient(d, self.base_faces)
        mag = _csqnorm(_nanson(Fb, self.ff["normal"][self.base_faces]))
        c = np.zeros(mag.shape + (3,), dtype=mag.dtype)
        for side, p in (("LV", p_lv), ("RV", p_rv)):
            I, D = integrals[side]
            c = c + (p * self.w_base[side])[..., None] * I / D
        return mag[..., None] * c

    def _base_contrib(self, d, p_lv, p_rv, integrals=None):
        t = self.base_traction_qp(d, p_lv, p_rv, integrals)
        aw = self.ff["area_w"][self.base_faces]
        return -np.einsum("fq,fqa,fqi->fia", aw, t,
                          self.ff["N"][self.base_faces])

    # -- residual ------------------------------------------------------------

    def residual(self, d, p_lv, p_rv, Ta, mode=QUASISTATIC,
                 d_prev=None, d_prev2=None, dt=None):
        """Nonlinear residual (flat, 3N); zero at equilibrium."""
        d = np.asarray(d, dtype=float).reshape(self.mesh.n_nodes, 3)
        r = np.zeros(self.n_dofs)
        F = self.deformation_gradient(d)
        contrib = self._volume_contrib(F, self.ta_at_qp(Ta))
        np.add.at(r, self.edofs, contrib.reshape(-1, 24))

        for side, p in (("LV", p_lv), ("RV", p_rv)):
            faces = self.endo_faces[side]
            if len(faces) == 0 or p == 0.0:
                continue
            Ff = self.face_deformation_gradient(d, faces)
            np.add.at(r, self.fdofs[faces],
                      self._endo_contrib(Ff, faces, p).reshape(-1, 24))

        base = self._base_contrib(d, p_lv, p_rv)
        np.add.at(r, self.fdofs[self.base_faces], base.reshape(-1, 24))

        r += self._robin_K @ d.ravel()
        if mode == DYNAMIC:
            if dt is None or d_prev is None or d_prev2 is None:
                raise MechanicsError("dynamic mode needs history and dt")
            dp = np.asarray(d_prev).ravel()
            dpp = np.asarray(d_prev2).ravel()
            r += (self.params.rho_s / dt ** 2) \
                * (self._mass @ (d.ravel() - 2 * dp + dpp))
            r += self._robin_C @ ((d.ravel() - dp) / dt)
        elif mode != QUASISTATIC:
            raise MechanicsError(f"unknown mode {mode!r}")
        return r

    def follower_vectors(self, d):
        """dr/dp for each cavity pressure at the current displacement.

        The residual is affine in the pressures; these vectors collect the
        endocardial follower load and the base-traction load of a unit
        pressure on each side.
        """
        d = np.asarray(d, dtype=float).reshape(self.mesh.n_nodes, 3)
        integrals = self.base_integrals(d)
        out = {}
        for side in ("LV", "RV"):
            v = np.zeros(self.n_dofs)
            faces = self.endo_faces[side]
            if len(faces) > 0:
                Ff = self.face_deformation_gradient(d, faces)
                np.add.at(v, self.fdofs[faces],
                          self._endo_contrib(Ff, faces, 1.0).reshape(-1, 24))
            base = self._base_contrib(
                d, 1.0 if side == "LV" else 0.0,
                1.0 if side == "RV" else 0.0, integrals)
            np.add.at(v, self.fdofs[self.base_faces], base.reshape(-1, 24))
            out[side] = v
        return out["LV"], out["RV"]

    # -- exact Jacobian -------------------------------------------------------

    def _volume_tangent(self, d, Ta):
        F = self.deformation_gradient(d).astype(complex)
        Ta_qp = self.ta_at_qp(Ta)
        E = self.mesh.n_elems
        ke = np.empty((E, 24, 24))
        for j in range(24):
            i0, a0 = divmod(j, 3)
            dF = np.zeros_like(F)
            dF[:, :, a0, :] = self.gradN[:, :, i0, :]
            col = self._volume_contrib(F + 1j * _CS_H * dF, Ta_qp)
            ke[:, :, j] = col.reshape(E, 24).imag / _CS_H
        rows = np.repeat(self.edofs, 24, axis=1).ravel()
        cols = np.tile(self.edofs, (1, 24)).ravel()
        n = self.n_dofs
        return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    def _face_tangent(self, d, faces, integrand):
        """Complex-step tangent of a per-face residual integrand(F)->(f,8,3)."""
        if len(faces) == 0:
            return sp.csr_matrix((self.n_dofs, self.n_dofs))
        F = self.face_deformation_gradient(d, faces).astype(complex)
        gN = self.ff["gradN"][faces]
        ke = np.empty((len(faces), 24, 24))
        for j in range(24):
            i0, a0 = divmod(j, 3)
            dF = np.zeros_like(F)
            dF[:, :, a0, :] = gN[:, :, i0, :]
            col = integrand(F + 1j * _CS_H * dF)
            ke[:, :, j] = col.reshape(len(faces), 24).imag / _CS_H
        return self._scatter_face_matrix(ke, faces)

    def _base_local_tangent(self, d, p_lv, p_rv, integrals):
        """Base-traction tangent with the global integrals held frozen."""
        aw = self.ff["area_w"][self.base_faces]
        Nv = self.ff["N"][self.base_faces]
        nrm = self.ff["normal"][self.base_faces]
        c = np.zeros(aw.shape + (3,))
        for side, p in (("LV", p_lv), ("RV", p_rv)):
            I, D = integrals[side]
            c += (p * self.w_base[side])[..., None] * I / D

        def integrand(F):
            mag = _csqnorm(_nanson(F, nrm))
            return -np.einsum("fq,fq,fqa,fqi->fia", aw, mag, c, Nv)

        return self._face_tangent(d, self.base_faces, integrand)

    def _base_lowrank(self, d, p_lv, p_rv, integrals):
        """Rank-8 coupling through the global surface integrals I and D."""
        aw = self.ff["area_w"][self.base_faces]
        Nv = self.ff["N"][self.base_faces]
        Fb = self.face_deformation_gradient(d, self.base_faces)
        nrm_b = self.ff["normal"][self.base_faces]
        mag = _csqnorm(_nanson(Fb, nrm_b)).real
        Ucols, Vcols = [], []
        for side, p in (("LV", p_lv), ("RV", p_rv)):
            faces = self.endo_faces[side]
            I, D = integrals[side]
            w = self.w_base[side]
            # dI/dd rows (3) by complex step over the endocardial faces
            dI = np.zeros((3, self.n_dofs))
            if len(faces) > 0:
                Fe = self.face_deformation_gradient(d, faces).astype(complex)
                gN = self.ff["gradN"][faces]
                awe = self.ff["area_w"][faces]
                nrm_e = self.ff["normal"][faces]
                for j in range(24):
                    i0, a0 = divmod(j, 3)
                    dF = np.zeros_like(Fe)
                    dF[:, :, a0, :] = gN[:, :, i0, :]
                    jfn = _nanson(Fe + 1j * _CS_H * dF, nrm_e)
                    val = np.einsum("fq,fqa->fa", awe, jfn).imag / _CS_H
                    np.add.at(dI.T, self.fdofs[faces][:, j], val)
            # dD/dd row by complex step over the base faces
            dD = np.zeros(self.n_dofs)
            Fbc = Fb.astype(complex)
            gNb = self.ff["gradN"][self.base_faces]
            for j in range(24):
                i0, a0 = divmod(j, 3)
                dF = np.zeros_like(Fbc)
                dF[:, :, a0, :] = gNb[:, :, i0, :]
                m = _csqnorm(_nanson(Fbc + 1j * _CS_H * dF, nrm_b))
                val = np.einsum("fq,fq->f", aw, w * m).imag / _CS_H
                np.add.at(dD, self.fdofs[self.base_faces][:, j], val)

            # dr/dI_c: -(p w / D) |jfn| phi_c on the base
            scal = np.einsum("fq,fq,fq->fq", aw, mag, p * w / D)
            for ccomp in range(3):
                u = np.zeros(self.n_dofs)
                contrib = -np.einsum("fq,fqi->fi", scal, Nv)
                dofs = 3 * self.mesh.elems[
                    self.mesh.face_elems[self.base_faces]] + ccomp
                np.add.at(u, dofs, contrib)
                Ucols.append(u)
                Vcols.append(dI[ccomp])
            # dr/dD: +(p w I / D^2) |jfn| phi
            uD = np.zeros(self.n_dofs)
            contribD = np.einsum("fq,fqi,a->fia", scal / D, Nv, I)
            np.add.at(uD, self.fdofs[self.base_faces],
                      contribD.reshape(-1, 24))
            Ucols.append(uD)
            Vcols.append(dD)
        U = np.stack(Ucols, axis=1)
        V = np.stack(Vcols, axis=1)
        return U, V

    def jacobian(self, d, p_lv, p_rv, Ta, mode=QUASISTATIC, dt=None):
        """Exact residual Jacobian as sparse + rank-8 (MechJacobian)."""
        d = np.asarray(d, dtype=float).reshape(self.mesh.n_nodes, 3)
        integrals = self.base_integrals(d)
        A = self._volume_tangent(d, Ta) + self._robin_K
        for side, p in (("LV", p_lv), ("RV", p_rv)):
            faces = self.endo_faces[side]
            if len(faces) == 0 or p == 0.0:
                continue
            nrm = self.ff["normal"][faces]
            aw = self.ff["area_w"][faces]
            Nv = self.ff["N"][faces]

            def integrand(F, nrm=nrm, aw=aw, Nv=Nv, p=p):
                jfn = _nanson(F, nrm)
                return p * np.einsum("fq,fqa,fqi->fia", aw, jfn, Nv)

            A = A + self._face_tangent(d, faces, integrand)
        A = A + self._base_local_tangent(d, p_lv, p_rv, integrals)
        if mode == DYNAMIC:
            A = A + (self.params.rho_s / dt ** 2) * self._mass \
                + self._robin_C / dt
        U, V = self._base_lowrank(d, p_lv, p_rv, integrals)
        return MechJacobian(A.tocsc(), U, V)

    def fd_jacobian_action(self, d, v, p_lv, p_rv, Ta, mode=QUASISTATIC,
                           d_prev=None, d_prev2=None, dt=None,
                           step=1e-7):
        """Directional finite difference of the residual (verification aid)."""
        d = np.asarray(d, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()
        scale = step * max(1.0, np.linalg.norm(d)) / max(np.linalg.norm(v),
                                                         1e-300)
        rp = self.residual(d + scale * v, p_lv, p_rv, Ta, mode,
                           d_prev, d_prev2, dt)
        rm = self.residual(d - scale * v, p_lv, p_rv, Ta, mode,
                           d_prev, d_prev2, dt)
        return (rp - rm) / (2 * scale)


class MechJacobian:
    """J = A + U V^T with sparse A and a thin low-rank correction."""

    def __init__(self, A, U, V):
        self.A = A
        self.U = U
        self.V = V
        self._lu = None
        self._core = None

    def matvec(self, x):
        return self.A @ x + self.U @ (self.V.T @ x)

    def dense(self):
        return self.A.toarray() + self.U @ self.V.T

    def factorize(self):
        self._lu = spla.splu(self.A)
        AiU = self._lu.solve(self.U)
        self._core = np.linalg.inv(np.eye(self.U.shape[1])
                                   + self.V.T @ AiU)
        self._AiU = AiU
        return self

    def solve(self, b):
        if self._lu is None:
            self.factorize()
        y = self._lu.solve(np.asarray(b, dtype=float))
        return y - self._AiU @ (self._core @ (self.V.T @ y))


# ---------------------------------------------------------------------------
# Newton with pressure continuation
# ---------------------------------------------------------------------------

def newton_solve(problem: MechanicsProblem, d0, p_lv, p_rv, Ta,
                 mode=QUASISTATIC, d_prev=None, d_prev2=None, dt=None,
                 rel_tol=1e-8, abs_tol=1e-6, max_iter=20, callback=None):
    """Newton iteration with backtracking; returns (d, info dict).

    ``callback(d, p_lv, p_rv)`` is invoked at every accepted iterate.
    """
    d = np.asarray(d0, dtype=float).ravel().copy()
    r = problem.residual(d, p_lv, p_rv, Ta, mode, d_prev, d_prev2, dt)
    rnorm = np.linalg.norm(r)
    if callback is not None:
        callback(d, p_lv, p_rv)
    history = [rnorm]
    for it in range(max_iter):
        if rnorm < abs_tol:
            return d, {"iterations": it, "residual": rnorm, "converged": True}
        J = problem.jacobian(d, p_lv, p_rv, Ta, mode, dt).factorize()
        delta = -J.solve(r)
        # non-monotone backtracking: compare against the recent maximum so
        # the iteration can escape local minima of the residual norm
        ref = max(history[-5:])
        alpha = 1.0
        for _ in range(8):
            d_try = d + alpha * delta
            try:
                r_try = problem.residual(d_try, p_lv, p_rv, Ta, mode,
                                         d_prev, d_prev2, dt)
            except MechanicsError:
                alpha *= 0.5
                continue
            if np.linalg.norm(r_try) < (1 - 1e-4 * alpha) * ref:
                break
            alpha *= 0.5
        else:
            return d, {"iterations": it + 1, "residual": rnorm,
                       "converged": False}
        history.append(np.linalg.norm(r_try))
        rel = np.linalg.norm(alpha * delta) / max(np.linalg.norm(d_try), 1e-300)
        d, r, rnorm = d_try, r_try, np.linalg.norm(r_try)
        if callback is not None:
            callback(d, p_lv, p_rv)
        if rel < rel_tol or rnorm < abs_tol:
            return d, {"iterations": it + 1, "residual": rnorm,
                       "converged": True}
    return d, {"iterations": max_iter, "residual": rnorm, "converged": False}


def solve_quasistatic(problem: MechanicsProblem, p_lv, p_rv, Ta,
                      d0=None, n_ramp=10, max_halvings=3, **newton_kw):
    """Quasi-static solve with pressure/tension continuation.

    Loads are ramped in ``n_ramp`` uniform increments; a diverged increment
    is retried with a halved step (up to ``max_halvings`` times).
    """
    d = (np.zeros(problem.n_dofs) if d0 is None
         else np.asarray(d0, dtype=float).ravel().copy())
    Ta = np.asarray(Ta, dtype=float)
    s = 0.0
    step = 1.0 / n_ramp
    halvings = 0
    while s < 1.0 - 1e-12:
        target = min(1.0, s + step)
        d_new, info = newton_solve(problem, d, target * p_lv, target * p_rv,
                                   target * Ta, **newton_kw)
        if info["converged"]:
            d, s = d_new, target
        else:
            halvings += 1
            if halvings > max_halvings:
                raise MechanicsError(
                    f"continuation diverged at load fraction {s:.3f}, "
                    f"residual {info['residual']:.3e}")
            step *= 0.5
    return d
