"""3D-0D coupling: cavity volumes, saddle-point Newton, SIS stepping.

The 3D mechanics and the 0D circulation are tied together by volume
consistency: the ventricular pressures act as Lagrange multipliers that force
the surface-integral cavity volumes of the deformed mesh to match the chamber
volumes of the circulation state. Each time step solves the resulting
saddle-point system by Newton iterations with a two-pressure Schur
complement; a dense monolithic solve of the same linearized system is kept as
a small-instance oracle.

Time advancement is segregated and staggered: monodomain substeps on the
fine mesh (with the displacement gradient interpolated up), one explicit
force-state update, the implicit mechanics/pressure solve, then an explicit
RK4 circulation step with the new pressures.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .activation import (
    ActivationParams, ForceState, active_tension, initial_force_state,
    sarcomere_length, step_force,
)
from .circulation import (
    COUPLED, CircState, CircuitParams, MMHG_TO_PA, step_rk4,
)
from .ep import (
    EPParams, EPState, MonodomainOperator, StimulusProtocol,
    conductivity_field, initial_state as ep_initial_state, step_monodomain,
)
from .fibers import mesh_centerline
from .mechanics import DYNAMIC, MechanicsProblem, QUASISTATIC
from .mesh import BoundaryTag, Mesh, interpolate_to_fine, restrict_to_coarse

_CS_H = 1e-30

CHECKPOINT_VERSION = 1


class CouplingError(Exception):
    pass


# ---------------------------------------------------------------------------
# Cavity volume functionals
# ---------------------------------------------------------------------------

def cavity_directions(mesh: Mesh):
    """(h, b_LV, b_RV): in-plane unit direction and interior cavity points.

    h is a unit vector orthogonal to the centerline, fixed to the projected
    septum direction (LV to RV endocardial centroids); b_i is the centroid of
    endocardial surface i. Both are computed once on the reference geometry.
    """
    cl = mesh_centerline(mesh)
    lv = mesh.nodes_with_tag(BoundaryTag.ENDO_LV)
    rv = mesh.nodes_with_tag(BoundaryTag.ENDO_RV)
    if len(lv) == 0:
        raise CouplingError("mesh has no left endocardium")
    b_lv = mesh.nodes[lv].mean(axis=0)
    if len(rv) > 0:
        b_rv = mesh.nodes[rv].mean(axis=0)
        h = b_rv - b_lv
    else:
        b_rv = b_lv
        h = np.array([1.0, 0.0, 0.0])
        if abs(h @ cl) > 0.9:
            h = np.array([0.0, 1.0, 0.0])
    h = h - (h @ cl) * cl
    nh = np.linalg.norm(h)
    if nh < 1e-12:
        raise CouplingError("degenerate in-plane direction h")
    return h / nh, b_lv, b_rv


def _cavity_faces(mesh: Mesh, side: str):
    tag = BoundaryTag.ENDO_LV if side == "LV" else BoundaryTag.ENDO_RV
    return np.nonzero(mesh.face_tags == tag)[0]


def _face_volume_integrand(mesh, ff, faces, d_nodal, h, b):
    """Per-face-qp integrand of the cavity volume formula (complex-safe)."""
    de = d_nodal[mesh.elems[mesh.face_elems[faces]]]
    F = np.eye(3) + np.einsum("fqib,fia->fqab", ff["gradN"][faces], de)
    J = np.linalg.det(F)
    FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
    jfn = J[..., None] * np.einsum("fqab,fqb->fqa", FinvT,
                                   ff["normal"][faces])
    x = ff["xq"][faces] + np.einsum("fqi,fia->fqa", ff["N"][faces], de)
    v = h[None, None, :] * np.einsum("a,fqa->fq", h, x - b)[..., None]
    return np.einsum("fqa,fqa->fq", v, jfn)


def cavity_volume(mesh: Mesh, d, side_or_faces, h, b,
                  orientation: float = -1.0) -> float:
    """Cavity volume from the endocardial surface integral (m^3).

    The integrand (h x h)(x + d - b) has unit divergence, so the flux through
    the closed cavity boundary equals the volume; the basal opening is
    orthogonal to h and contributes nothing. The default orientation flips
    the tissue-outward face normals to cavity-outward ones.
    """
    h = np.asarray(h, dtype=float)
    if abs(np.linalg.norm(h) - 1.0) > 1e-10:
        raise CouplingError("h must be a unit vector")
    faces = (_cavity_faces(mesh, side_or_faces)
             if isinstance(side_or_faces, str) else np.asarray(side_or_faces))
    if len(faces) == 0:
        raise CouplingError("cavity surface has no faces")
    ff = fem.face_factors(mesh)
    d_nodal = np.asarray(d, dtype=float).reshape(mesh.n_nodes, 3)
    integ = _face_volume_integrand(mesh, ff, faces, d_nodal, h,
                                   np.asarray(b, dtype=float))
    return float(orientation * np.einsum("fq,fq->", ff["area_w"][faces],
                                         integ))


def cavity_volume_gradient(mesh: Mesh, d, side_or_faces, h, b,
                           orientation: float = -1.0) -> np.ndarray:
    """dV/dd as a flat (3N,) vector, by complex-step on the face elements."""
    h = np.asarray(h, dtype=float)
    b = np.asarray(b, dtype=float)
    faces = (_cavity_faces(mesh, side_or_faces)
             if isinstance(side_or_faces, str) else np.asarray(side_or_faces))
    ff = fem.face_factors(mesh)
    d_nodal = np.asarray(d, dtype=float).reshape(mesh.n_nodes, 3)
    aw = ff["area_w"][faces]
    fdofs = (3 * mesh.elems[mesh.face_elems[faces]][:, :, None]
             + np.arange(3)).reshape(len(faces), 24)
    grad = np.zeros(3 * mesh.n_nodes)
    dc = d_nodal.astype(complex)
    for j in range(24):
        i0, a0 = divmod(j, 3)
        # evaluate the integrand with the j-th local dof of every face
        # element perturbed along the imaginary axis
        de = dc[mesh.elems[mesh.face_elems[faces]]].copy()
        de[:, i0, a0] += 1j * _CS_H
        F = np.eye(3) + np.einsum("fqib,fia->fqab", ff["gradN"][faces], de)
        J = np.linalg.det(F)
        FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
        jfn = J[..., None] * np.einsum("fqab,fqb->fqa", FinvT,
                                       ff["normal"][faces])
        x = ff["xq"][faces] + np.einsum("fqi,fia->fqa", ff["N"][faces], de)
        v = h[None, None, :] * np.einsum("a,fqa->fq", h, x - b)[..., None]
        integ = np.einsum("fqa,fqa->fq", v, jfn)
        val = orientation * np.einsum("fq,fq->f", aw, integ).imag / _CS_H
        np.add.at(grad, fdofs[:, j], val)
    return grad


# ---------------------------------------------------------------------------
# Saddle-point Newton with two-pressure Schur complement
# ---------------------------------------------------------------------------

@dataclass
class CouplingState:
    """Pressures (Pa), fixed coupling geometry and Newton diagnostics."""

    p_lv: float
    p_rv: float
    h: np.ndarray
    b_lv: np.ndarray
    b_rv: np.ndarray
    iterations: int = 0
    residual_d: float = 0.0
    residual_vol: float = 0.0


def constant_targets(v_lv, v_rv):
    """Target closure for fixed cavity volumes (m^3)."""

    def targets(p_lv, p_rv):
        return v_lv, v_rv

    return targets


def _target_sensitivity(targets, p_lv, p_rv, dp=0.5):
    """beta_ij = d r_p_i / d p_j = -dV_target_i/dp_j by central differences."""
    beta = np.zeros((2, 2))
    for j, (dl, dr) in enumerate(((dp, 0.0), (0.0, dp))):
        vp = np.asarray(targets(p_lv + dl, p_rv + dr))
        vm = np.asarray(targets(p_lv - dl, p_rv - dr))
        beta[:, j] = -(vp - vm) / (2 * dp)
    return beta


def schur_step(mech: MechanicsProblem, J, r_d, P_L, P_R, a_L, a_R,
               r_pL, r_pR, beta):
    """One linearized saddle step via the two-pressure Schur complement.

    Returns (delta_d, delta_p_lv, delta_p_rv). J must be factorized.
    """
    w_L = J.solve(P_L)
    w_R = J.solve(P_R)
    v = J.solve(-r_d)
    alpha = np.array([[a_L @ w_L, a_L @ w_R],
                      [a_R @ w_L, a_R @ w_R]]) - beta
    rhs = np.array([a_L @ v + r_pL, a_R @ v + r_pR])
    det = alpha[0, 0] * alpha[1, 1] - alpha[0, 1] * alpha[1, 0]
    scale = max(np.abs(alpha).max(), 1e-300)
    if abs(det) <= 1e-14 * scale ** 2:
        raise CouplingError("singular 2x2 pressure Schur complement")
    dp = np.linalg.solve(alpha, rhs)
    delta_d = v - w_L * dp[0] - w_R * dp[1]
    return delta_d, dp[0], dp[1]


def monolithic_step(mech: MechanicsProblem, J, r_d, P_L, P_R, a_L, a_R,
                    r_pL, r_pR, beta):
    """Dense solve of the full (N+2) linearized saddle system (oracle)."""
    n = len(r_d)
    A = np.zeros((n + 2, n + 2))
    A[:n, :n] = J.dense()
    A[:n, n] = P_L
    A[:n, n + 1] = P_R
    A[n, :n] = a_L
    A[n + 1, :n] = a_R
    A[n:, n:] = beta
    rhs = -np.concatenate([r_d, [r_pL, r_pR]])
    sol = np.linalg.solve(A, rhs)
    return sol[:n], sol[n], sol[n + 1]


def saddle_newton_solve(mech: MechanicsProblem, coup: CouplingState,
                        d0, Ta, targets, mode=DYNAMIC,
                        d_prev=None, d_prev2=None, dt=None,
                        rel_tol=1e-8, max_iter=20, use_monolithic=False):
    """Solve for (d, p_LV, p_RV) enforcing both cavity-volume constraints.

    ``targets(p_lv, p_rv) -> (V_LV, V_RV)`` gives the 0D chamber volumes in
    m^3 for candidate pressures (Pa); for fixed targets its beta block is
    zero. Convergence is on the relative increment norm. Returns
    (d, updated CouplingState).
    """
    mesh = mech.mesh
    d = np.asarray(d0, dtype=float).ravel().copy()
    p_lv, p_rv = coup.p_lv, coup.p_rv
    has_rv = len(_cavity_faces(mesh, "RV")) > 0

    def residuals(d_, pl_, pr_):
        r_d = mech.residual(d_, pl_, pr_, Ta, mode, d_prev, d_prev2, dt)
        V_L = cavity_volume(mesh, d_, "LV", coup.h, coup.b_lv)
        V_R = (cavity_volume(mesh, d_, "RV", coup.h, coup.b_rv)
               if has_rv else 0.0)
        Vt_L, Vt_R = targets(pl_, pr_)
        r_pL = V_L - Vt_L
        r_pR = V_R - Vt_R if has_rv else 0.0
        return r_d, r_pL, r_pR, max(abs(Vt_L), abs(Vt_R), 1e-9)

    r_d, r_pL, r_pR, v_scale = residuals(d, p_lv, p_rv)

    def merit(r_d_, r_pL_, r_pR_):
        return np.linalg.norm(r_d_) + 1e4 * (abs(r_pL_) + abs(r_pR_)) \
            / v_scale

    def converged(r_d_, r_pL_, r_pR_):
        return (np.linalg.norm(r_d_) < 1e-6
                and abs(r_pL_) + abs(r_pR_) < 1e-10)

    history = [merit(r_d, r_pL, r_pR)]
    info_it = 0
    for it in range(max_iter):
        if converged(r_d, r_pL, r_pR):
            break
        info_it = it + 1
        beta = _target_sensitivity(targets, p_lv, p_rv)
        if not has_rv:
            # keep the 2x2 system regular for LV-only meshes
            beta = beta.copy()
            beta[1, 1] = max(abs(beta[1, 1]), 1.0e-12)
        J = mech.jacobian(d, p_lv, p_rv, Ta, mode, dt).factorize()
        P_L, P_R = mech.follower_vectors(d)
        a_L = cavity_volume_gradient(mesh, d, "LV", coup.h, coup.b_lv)
        a_R = (cavity_volume_gradient(mesh, d, "RV", coup.h, coup.b_rv)
               if has_rv else np.zeros_like(a_L))
        step = monolithic_step if use_monolithic else schur_step
        dd, dpl, dpr = step(mech, J, r_d, P_L, P_R, a_L, a_R,
                            r_pL, r_pR, beta)
        # non-monotone backtracking on a combined merit of the momentum
        # residual and the (nondimensionalized) volume constraint residuals
        ref = max(history[-5:])
        alpha = 1.0
        accepted = False
        for _ in range(10):
            try:
                trial = residuals(d + alpha * dd, p_lv + alpha * dpl,
                                  p_rv + alpha * dpr)
            except Exception:
                alpha *= 0.5
                continue
            if merit(*trial[:3]) < (1 - 1e-4 * alpha) * ref:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise CouplingError(
                f"saddle Newton stalled at iteration {it + 1} "
                f"(merit {history[-1]:.3e})")
        d = d + alpha * dd
        p_lv = p_lv + alpha * dpl
        p_rv = p_rv + alpha * dpr
        r_d, r_pL, r_pR, v_scale = trial
        history.append(merit(r_d, r_pL, r_pR))
        rel_d = alpha * np.linalg.norm(dd) / max(np.linalg.norm(d), 1e-12)
        rel_p = alpha * (abs(dpl) + abs(dpr)) / max(abs(p_lv) + abs(p_rv),
                                                    1.0)
        if max(rel_d, rel_p) < rel_tol or converged(r_d, r_pL, r_pR):
            break
    else:
        raise CouplingError(
            f"saddle Newton did not converge in {max_iter} iterations "
            f"(|r_d| = {np.linalg.norm(r_d):.3e})")
    V_L = cavity_volume(mesh, d, "LV", coup.h, coup.b_lv)
    V_R = cavity_volume(mesh, d, "RV", coup.h, coup.b_rv) if has_rv else 0.0
    Vt_L, Vt_R = targets(p_lv, p_rv)
    out = CouplingState(p_lv=p_lv, p_rv=p_rv, h=coup.h,
                        b_lv=coup.b_lv, b_rv=coup.b_rv,
                        iterations=info_it,
                        residual_d=float(np.linalg.norm(
                            mech.residual(d, p_lv, p_rv, Ta, mode,
                                          d_prev, d_prev2, dt))),
                        residual_vol=float(max(abs(V_L - Vt_L),
                                               abs(V_R - Vt_R))))
    return d, out


# ---------------------------------------------------------------------------
# SIS time advancement
# ---------------------------------------------------------------------------

@dataclass
class SimState:
    """Full simulation state at one macro time step."""

    t: float
    n: int
    d: np.ndarray          # (3N,) coarse displacement
    d_prev: np.ndarray     # (3N,)
    force_s: np.ndarray    # (N, 2) force-state variables
    u: np.ndarray          # fine-mesh transmembrane potential
    u_prev: np.ndarray
    w: np.ndarray          # (N_fine, 2) ionic state
    ep_steps: int
    circ: np.ndarray       # (12,) 0D state, mmHg/mL/s
    p_lv: float            # Pa
    p_rv: float            # Pa
    diagnostics: dict = field(default_factory=dict)

    def copy(self):
        return SimState(self.t, self.n, self.d.copy(), self.d_prev.copy(),
                        self.force_s.copy(), self.u.copy(),
                        self.u_prev.copy(), self.w.copy(), self.ep_steps,
                        self.circ.copy(), self.p_lv, self.p_rv,
                        dict(self.diagnostics))


def save_checkpoint(path, state: SimState):
    np.savez(path, version=CHECKPOINT_VERSION, t=state.t, n=state.n,
             d=state.d, d_prev=state.d_prev, force_s=state.force_s,
             u=state.u, u_prev=state.u_prev, w=state.w,
             ep_steps=state.ep_steps, circ=state.circ,
             p_lv=state.p_lv, p_rv=state.p_rv)


def load_checkpoint(path) -> SimState:
    z = np.load(path)
    if int(z["version"]) != CHECKPOINT_VERSION:
        raise CouplingError(
            f"checkpoint version {int(z['version'])} not supported")
    return SimState(t=float(z["t"]), n=int(z["n"]), d=z["d"],
                    d_prev=z["d_prev"], force_s=z["force_s"], u=z["u"],
                    u_prev=z["u_prev"], w=z["w"],
                    ep_steps=int(z["ep_steps"]), circ=z["circ"],
                    p_lv=float(z["p_lv"]), p_rv=float(z["p_rv"]))


class CoupledSimulation:
    """Orchestrates EP (fine mesh), activation, mechanics and circulation.

    The electrophysiology runs on a refinement of the mechanics mesh; the
    displacement gradient is projected on the coarse mesh and interpolated
    up, the calcium proxy is restricted back down.
    """

    def __init__(self, mesh: Mesh, fields, fib, ep_mesh: Mesh, ep_fields,
                 ep_fib, ep_params: EPParams, act_params: ActivationParams,
                 mech_problem: MechanicsProblem,
                 circ_params: CircuitParams,
                 protocol: StimulusProtocol | None,
                 dt: float = 5e-4, n_sub: int = 10,
                 geom_update_every: int = 1):
        if ep_mesh.parent is None or ep_mesh.parent.n_nodes != mesh.n_nodes:
            raise CouplingError("EP mesh must be a refinement of the "
                                "mechanics mesh")
        if abs(n_sub * ep_params.tau - dt) > 1e-12:
            raise CouplingError("need n_sub * tau == dt")
        self.mesh = mesh
        self.fields = fields
        self.fib = fib
        self.ep_mesh = ep_mesh
        self.ep_fib = ep_fib
        self.ep_params = ep_params
        self.act_params = act_params
        self.mech = mech_problem
        self.circ_params = circ_params.validate()
        self.protocol = protocol
        self.dt = dt
        self.n_sub = n_sub
        self.geom_update_every = max(1, int(geom_update_every))
        self.sigma_fine = conductivity_field(ep_fields, ep_params)
        h, b_lv, b_rv = cavity_directions(mesh)
        self.h, self.b_lv, self.b_rv = h, b_lv, b_rv
        self._ep_op = None
        self._ep_op_step = -1

    def initial_sim_state(self, circ: CircState | None = None) -> SimState:
        """Rest state; 0D ventricular volumes matched to the 3D cavities."""
        n = self.mesh.n_nodes
        zero = np.zeros(3 * n)
        if circ is None:
            from .circulation import default_initial_state

            circ = default_initial_state()
        c = circ.c.copy()
        c[1] = 1e6 * cavity_volume(self.mesh, zero, "LV", self.h, self.b_lv)
        c[3] = 1e6 * cavity_volume(self.mesh, zero, "RV", self.h, self.b_rv)
        eps = ep_initial_state(self.ep_mesh.n_nodes)
        return SimState(t=0.0, n=0, d=zero.copy(), d_prev=zero.copy(),
                        force_s=initial_force_state(n).s,
                        u=eps.u, u_prev=eps.u_prev, w=eps.w, ep_steps=0,
                        circ=c, p_lv=0.0, p_rv=0.0)

    # -- stages ---------------------------------------------------------------

    def _fine_grad_d(self, d):
        g = fem.project_gradient(self.mesh, d.reshape(-1, 3))
        gf = interpolate_to_fine(self.ep_mesh, g.reshape(-1, 9))
        return gf.reshape(-1, 3, 3)

    def _ep_operator(self, state: SimState):
        if (self._ep_op is None
                or state.n - self._ep_op_step >= self.geom_update_every):
            grad_d = self._fine_grad_d(state.d)
            self._ep_op = MonodomainOperator(self.ep_mesh, self.ep_fib,
                                             self.sigma_fine, self.ep_params,
                                             grad_d=grad_d)
            self._ep_op_step = state.n
        return self._ep_op

    def _targets(self, state: SimState):
        """0D volume targets (m^3) as a function of candidate pressures."""
        c0 = CircState(state.circ.copy())
        t, dt, params = state.t, self.dt, self.circ_params

        def targets(p_lv, p_rv):
            cn = step_rk4(c0, t, dt, params, mode=COUPLED,
                          p_LV=p_lv / MMHG_TO_PA, p_RV=p_rv / MMHG_TO_PA)
            return 1e-6 * cn.V_LV, 1e-6 * cn.V_RV

        return targets

    def advance(self, state: SimState) -> SimState:
        """One SIS macro step from t^n to t^n + dt."""
        # 1) electrophysiology substeps on the fine mesh
        op = self._ep_operator(state)
        eps = EPState(u=state.u, u_prev=state.u_prev, w=state.w,
                      n_steps=state.ep_steps)
        for k in range(self.n_sub):
            eps = step_monodomain(op, eps, state.t + k * self.ep_params.tau,
                                  self.protocol)
        ca_fine = eps.Ca
        ca = restrict_to_coarse(self.ep_mesh, ca_fine)

        # 2) explicit force-state update with the current fiber stretch
        g = fem.project_gradient(self.mesh, state.d.reshape(-1, 3))
        F_nodal = np.eye(3) + g
        sl = sarcomere_length(F_nodal, self.fib.f0, self.act_params.SL0)
        fs = step_force(ForceState(s=state.force_s.copy()), ca, sl,
                        self.dt, self.act_params)
        Ta = active_tension(fs, self.fields.xi_hat, self.act_params)

        # 3) implicit mechanics with the volume constraints
        coup = CouplingState(p_lv=state.p_lv, p_rv=state.p_rv, h=self.h,
                             b_lv=self.b_lv, b_rv=self.b_rv)
        d_new, coup = saddle_newton_solve(
            self.mech, coup, state.d, Ta, self._targets(state),
            mode=DYNAMIC, d_prev=state.d, d_prev2=state.d_prev, dt=self.dt)

        # 4) explicit circulation step with the accepted pressures
        circ_new = step_rk4(CircState(state.circ.copy()), state.t, self.dt,
                            self.circ_params, mode=COUPLED,
                            p_LV=coup.p_lv / MMHG_TO_PA,
                            p_RV=coup.p_rv / MMHG_TO_PA)

        v_lv = cavity_volume(self.mesh, d_new, "LV", self.h, self.b_lv)
        v_rv = cavity_volume(self.mesh, d_new, "RV", self.h, self.b_rv)
        diag = {
            "newton_iterations": coup.iterations,
            "constraint_residual_ml": 1e6 * max(
                abs(v_lv - 1e-6 * circ_new.V_LV),
                abs(v_rv - 1e-6 * circ_new.V_RV)),
            "V_LV_ml": 1e6 * v_lv,
            "V_RV_ml": 1e6 * v_rv,
        }
        return SimState(t=state.t + self.dt, n=state.n + 1, d=d_new,
                        d_prev=state.d.copy(), force_s=fs.s,
                        u=eps.u, u_prev=eps.u_prev, w=eps.w,
                        ep_steps=eps.n_steps, circ=circ_new.c,
                        p_lv=coup.p_lv, p_rv=coup.p_rv, diagnostics=diag)

    def run(self, state: SimState, n_steps: int, log_path=None,
            checkpoint_every: int = 0, checkpoint_prefix=None,
            progress=None, log_append=False):
        """Advance n_steps; optional CSV log and periodic checkpoints.

        The CSV columns are t (s), p_LV and p_RV (mmHg), V_LV and V_RV (mL),
        the saddle Newton iteration count and the volume-constraint residual
        (mL). With ``log_append`` the file is extended and the header is
        written only if the file is new.
        """
        log = None
        if log_path is not None:
            fresh = not (log_append and os.path.exists(log_path)
                         and os.path.getsize(log_path) > 0)
            log = open(log_path, "a" if log_append else "w")
            if fresh:
                log.write("t,p_LV_mmHg,p_RV_mmHg,V_LV_mL,V_RV_mL,"
                          "newton_iterations,constraint_residual_mL\n")
        try:
            for _ in range(n_steps):
                state = self.advance(state)
                if log is not None:
                    dg = state.diagnostics
                    log.write(f"{state.t:.6f},"
                              f"{state.p_lv / MMHG_TO_PA:.6f},"
                              f"{state.p_rv / MMHG_TO_PA:.6f},"
                              f"{dg['V_LV_ml']:.6f},{dg['V_RV_ml']:.6f},"
                              f"{dg['newton_iterations']},"
                              f"{dg['constraint_residual_ml']:.3e}\n")
                if checkpoint_every and state.n % checkpoint_every == 0:
                    save_checkpoint(f"{checkpoint_prefix}_{state.n:06d}.npz",
                                    state)
                if progress is not None:
                    progress(state)
        finally:
            if log is not None:
                log.close()
        return state
