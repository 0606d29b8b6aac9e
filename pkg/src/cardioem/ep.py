"""Monodomain electrophysiology on the fine mesh.

Reaction-diffusion for the transmembrane potential with a two-variable
excitation model plus a calcium proxy, deformation-dependent orthotropic
diffusion pulled back to the reference configuration, a fast endocardial
conduction layer, spherical pacing stimuli and BDF2-IMEX time stepping
(implicit diffusion, explicit reaction at the extrapolated potential).

The potential u is evolved in model units (0 at rest, ~1 at peak) and mapped
affinely to millivolts for output. Conductivities are stated in mS/cm as in
the parameter tables and converted to S/m internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .mesh import Mesh

MS_PER_CM_TO_S_PER_M = 0.1


class EPError(Exception):
    """Monodomain solve failure or state corruption."""


@dataclass
class EPParams:
    """Monodomain and ionic-model constants.

    chi_m is the surface-to-volume ratio (1/m) and C_m the membrane
    capacitance per area (F/m^2); the source table lists the two values with
    their labels exchanged, which the defaults here undo.
    """

    chi_m: float = 1.4e5            # 1/m (1400 cm^-1)
    C_m: float = 0.01               # F/m^2 (1 uF/cm^2)
    sigma_fast: tuple = (4.28, 1.96, 0.64)   # mS/cm, (fiber, transverse, normal)
    sigma_myo: tuple = (1.07, 0.49, 0.16)    # mS/cm
    eps_fast: float = 0.01          # fast-layer threshold on phi_fast
    tau: float = 50e-6              # s, monodomain substep

    # two-variable excitation model (substitute for a full ionic model)
    K: float = 8.0
    a: float = 0.1
    eps0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    t_scale: float = 2e-3           # s per model time unit

    # calcium proxy
    u_gate: float = 0.05
    tau_g_rise: float = 20e-3       # s
    tau_g_decay: float = 200e-3     # s
    ca_base: float = 0.1            # uM
    ca_amp: float = 0.9             # uM

    # output mapping and activation threshold
    v_rest: float = -84.0           # mV
    v_amp: float = 120.0            # mV
    act_threshold: float = 0.2      # fraction of amplitude

    def validate(self):
        for s_fast, s_myo in zip(self.sigma_fast, self.sigma_myo):
            if s_myo <= 0 or s_fast < s_myo:
                raise EPError("conductivities must be positive with "
                              "fast >= myocardial componentwise")
        if self.tau <= 0:
            raise EPError("substep must be positive")
        return self


@dataclass
class EPState:
    """Transmembrane potential (model units) and ionic state per node."""

    u: np.ndarray
    u_prev: np.ndarray
    w: np.ndarray           # (N, 2): recovery r, calcium gate g
    n_steps: int = 0

    @property
    def Ca(self):
        """Intracellular calcium (uM) derived from the gate variable."""
        return 0.1 + 0.9 * self.w[:, 1]

    def u_mV(self, params: EPParams):
        return params.v_rest + params.v_amp * self.u


def initial_state(n_nodes: int) -> EPState:
    return EPState(u=np.zeros(n_nodes), u_prev=np.zeros(n_nodes),
                   w=np.zeros((n_nodes, 2)))


@dataclass
class Stimulus:
    center: np.ndarray
    radius: float = 2.5e-3        # m
    start: float = 0.0            # s
    duration: float = 3e-3        # s
    amplitude: float = 50e3      # uA/cm^3 (numerically equal to A/m^3)

    def validate(self):
        if self.radius <= 0 or self.duration <= 0 or self.amplitude <= 0:
            raise EPError("stimulus radius, duration, amplitude must be > 0")
        return self


@dataclass
class StimulusProtocol:
    stimuli: list = field(default_factory=list)

    def validate(self):
        for s in self.stimuli:
            s.validate()
        return self


def apply_stimuli(protocol: StimulusProtocol, t: float,
                  coords: np.ndarray) -> np.ndarray:
    """Applied current field (uA/cm^3) at time t over the given nodes."""
    out = np.zeros(coords.shape[0])
    for s in protocol.stimuli:
        if s.start <= t < s.start + s.duration:
            d2 = ((coords - np.asarray(s.center)) ** 2).sum(axis=1)
            out[d2 <= s.radius ** 2] = s.amplitude
    return out


def default_stimulus_protocol(mesh: Mesh, fields,
                              rv_delay: float = 5e-3) -> StimulusProtocol:
    """Five endocardial pacing spheres on the idealized biventricle.

    Left sites: anterior para-septal, septal, postero-basal; right sites:
    septal and free wall, both delayed by ``rv_delay``. Site positions are
    picked from the endocardial node sets by angular sector and apico-basal
    coordinate; the protocol is fully overridable through configuration.
    """
    from .mesh import BoundaryTag

    def pick(nodes, theta0, psi0):
        x = mesh.nodes[nodes]
        theta = np.arctan2(x[:, 1], x[:, 0])
        dth = np.angle(np.exp(1j * (theta - theta0)))
        score = dth ** 2 + 4.0 * (fields.psi[nodes] - psi0) ** 2
        return mesh.nodes[nodes[np.argmin(score)]]

    lv = mesh.nodes_with_tag(BoundaryTag.ENDO_LV)
    rv = mesh.nodes_with_tag(BoundaryTag.ENDO_RV)
    sites = [
        Stimulus(center=pick(lv, np.deg2rad(60.0), 0.4)),
        Stimulus(center=pick(lv, 0.0, 0.4)),
        Stimulus(center=pick(lv, np.deg2rad(-120.0), 0.7)),
    ]
    if len(rv) > 0:
        # the right cavity sits on the +x side; its septal surface faces -x
        xc = mesh.nodes[rv].mean(axis=0)
        d = mesh.nodes[rv] - xc
        septal = rv[np.argmin(d[:, 0] + 2.0 * np.abs(fields.psi[rv] - 0.4))]
        free = rv[np.argmax(d[:, 0] - 2.0 * np.abs(fields.psi[rv] - 0.4))]
        sites += [Stimulus(center=mesh.nodes[septal], start=rv_delay),
                  Stimulus(center=mesh.nodes[free], start=rv_delay)]
    return StimulusProtocol(stimuli=sites).validate()


# ---------------------------------------------------------------------------
# Ionic model
# ---------------------------------------------------------------------------

def step_ionic(u: np.ndarray, w: np.ndarray, tau: float,
               params: EPParams) -> tuple:
    """Explicit update of the ionic state; returns (I_ion, w_next, Ca).

    I_ion is the outward reaction current in model units per second, so the
    potential obeys du/dt = diffusion - I_ion + I_app.
    """
    p = params
    r, g = w[:, 0], w[:, 1]
    reaction = p.K * u * (u - p.a) * (1.0 - u) - u * r
    I_ion = -reaction / p.t_scale
    if tau > 0:
        dr = ((p.eps0 + p.mu1 * r / (p.mu2 + u))
              * (-r - p.K * u * (u - p.a - 1.0))) / p.t_scale
        h = (u >= p.u_gate).astype(float)
        tau_g = np.where(h > g, p.tau_g_rise, p.tau_g_decay)
        dg = (h - g) / tau_g
        w_next = np.stack([r + tau * dr, np.clip(g + tau * dg, 0.0, 1.0)],
                          axis=1)
    else:
        w_next = w.copy()
    ca = p.ca_base + p.ca_amp * w_next[:, 1]
    return I_ion, w_next, ca


# ---------------------------------------------------------------------------
# Diffusion operator
# ---------------------------------------------------------------------------

def diffusion_tensor(F, fibers, sigma):
    """Orthotropic conductivity sum_k sigma_k (F k0 x F k0)/|F k0|^2.

    Accepts single 3x3/vector arguments or leading batch dimensions; sigma
    is the (fiber, transverse, normal) triple, any units (carried through).
    """
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    Fb = F[None] if single else F
    out = np.zeros_like(Fb)
    sigma = np.asarray(sigma, dtype=float)
    for k, k0 in enumerate(fibers):
        k0 = np.asarray(k0, dtype=float)
        k0b = k0[None] if k0.ndim == 1 else k0
        v = np.einsum("...ab,...b->...a", Fb, k0b)
        n2 = np.einsum("...a,...a->...", v, v)
        if (n2 <= 0).any():
            raise EPError("non-invertible deformation in diffusion tensor")
        sk = np.asarray(sigma[..., k])
        out += sk[..., None, None] * np.einsum("...a,...b->...ab", v, v) \
            / n2[..., None, None]
    return out[0] if single else out


class MonodomainOperator:
    """Assembled and factorized implicit systems for one mechanical step.

    Holds the lumped mass, the pulled-back diffusion stiffness and LU
    factorizations of the BDF1/BDF2 system matrices; reused across all
    monodomain substeps between two mechanics solves.
    """

    def __init__(self, mesh: Mesh, fib, sigma_nodal, params: EPParams,
                 grad_d=None):
        self.mesh = mesh
        self.params = params
        gf = fem.geometry_factors(mesh)
        N, _ = fem.shape_functions(fem.QUAD_POINTS)

        def at_qp(nodal):
            return np.einsum("qi,ei...->eq...", N, nodal[mesh.elems])

        # deformation gradient at quadrature points
        if grad_d is None:
            F = np.broadcast_to(np.eye(3), gf["detJ"].shape + (3, 3)).copy()
        else:
            F = np.eye(3) + at_qp(grad_d)
        J = np.linalg.det(F)
        if (J <= 0).any():
            raise EPError("inverted element in EP operator assembly")
        Finv = np.linalg.inv(F)

        # fibers and conductivities interpolated to quadrature points
        dirs = []
        for k0 in (fib.f0, fib.s0, fib.n0):
            v = at_qp(k0)
            dirs.append(v / np.linalg.norm(v, axis=-1)[..., None])
        sigma_qp = at_qp(sigma_nodal) * MS_PER_CM_TO_S_PER_M  # S/m
        D = diffusion_tensor(F, dirs, sigma_qp)
        # pull back to the reference configuration and rescale to an
        # effective diffusivity (m^2/s) for the model-unit potential
        Dref = J[..., None, None] * np.einsum(
            "eqab,eqbc,eqdc->eqad", Finv, D, Finv)
        Dref /= params.chi_m * params.C_m

        self.K = fem.assemble_stiffness(mesh, tensor=Dref)
        # consistent mass: markedly better front propagation than lumping
        # on the coarse meshes this runs at (lumping can block the wave)
        self.M = fem.assemble_mass(mesh)
        tau = params.tau
        self._lu_bdf1 = spla.splu((self.M / tau + self.K).tocsc())
        self._lu_bdf2 = spla.splu((1.5 * self.M / tau + self.K).tocsc())

    def solve_bdf1(self, rhs):
        return self._lu_bdf1.solve(rhs)

    def solve_bdf2(self, rhs):
        return self._lu_bdf2.solve(rhs)


def conductivity_field(fields, params: EPParams) -> np.ndarray:
    """Nodal (fiber, transverse, normal) conductivities (mS/cm).

    Fast-layer values where phi_fast <= eps, myocardial elsewhere.
    """
    from .fibers import fast_layer_mask

    mask = fast_layer_mask(fields, params.eps_fast)
    out = np.where(mask[:, None], np.asarray(params.sigma_fast),
                   np.asarray(params.sigma_myo))
    return out


def step_monodomain(op: MonodomainOperator, state: EPState, t: float,
                    protocol: StimulusProtocol | None = None,
                    reaction: bool = True) -> EPState:
    """One BDF2-IMEX substep (BDF1 on the very first step).

    Diffusion implicit; reaction, stimulus and ionic update explicit at the
    extrapolated potential u* = 2 u^n - u^(n-1).
    """
    p = op.params
    tau = p.tau
    if state.n_steps == 0:
        u_star = state.u
    else:
        u_star = 2.0 * state.u - state.u_prev

    if reaction:
        I_ion, w_next, _ = step_ionic(u_star, state.w, tau, p)
    else:
        I_ion, w_next = 0.0, state.w.copy()
    i_app = 0.0
    if protocol is not None:
        # uA/cm^3 == A/m^3; convert to model potential units per second
        i_app = apply_stimuli(protocol, t, op.mesh.nodes) \
            / (p.chi_m * p.C_m * (p.v_amp * 1e-3))

    f = -I_ion + i_app
    if state.n_steps == 0:
        rhs = op.M @ (state.u / tau + f)
        u_new = op.solve_bdf1(rhs)
    else:
        rhs = op.M @ ((2.0 * state.u - 0.5 * state.u_prev) / tau + f)
        u_new = op.solve_bdf2(rhs)
    if not np.isfinite(u_new).all():
        raise EPError(f"non-finite potential at t = {t:.6f} s")
    return EPState(u=u_new, u_prev=state.u, w=w_next,
                   n_steps=state.n_steps + 1)


# ---------------------------------------------------------------------------
# Activation maps
# ---------------------------------------------------------------------------

class ActivationRecorder:
    """Tracks the first threshold crossing per node during a run."""

    def __init__(self, n_nodes: int, params: EPParams):
        self.threshold = params.act_threshold
        self.times = np.full(n_nodes, np.nan)

    def update(self, state: EPState, t: float):
        newly = np.isnan(self.times) & (state.u >= self.threshold)
        self.times[newly] = t

    @property
    def total_activation_time(self):
        if np.isnan(self.times).any():
            return np.inf
        return np.nanmax(self.times) - np.nanmin(self.times)


def activation_map(u_history: np.ndarray, times: np.ndarray,
                   params: EPParams) -> np.ndarray:
    """First-crossing times (same units as ``times``) from a stored history.

    ``u_history`` has shape (n_times, n_nodes); unactivated nodes are NaN.
    """
    above = u_history >= params.act_threshold
    first = np.argmax(above, axis=0).astype(float)
    never = ~above.any(axis=0)
    out = np.asarray(times, dtype=float)[first.astype(int)]
    out[never] = np.nan
    return out


def run_ep(mesh: Mesh, fib, fields, params: EPParams,
           protocol: StimulusProtocol, t_end: float,
           record_every: int = 0):
    """Standalone electrophysiology on a fixed geometry (d = 0).

    Returns (final state, ActivationRecorder, optional (times, u history)).
    """
    params.validate()
    sigma = conductivity_field(fields, params)
    op = MonodomainOperator(mesh, fib, sigma, params)
    state = initial_state(mesh.n_nodes)
    rec = ActivationRecorder(mesh.n_nodes, params)
    hist_t, hist_u = [], []
    n = int(round(t_end / params.tau))
    for k in range(n):
        t = k * params.tau
        state = step_monodomain(op, state, t, protocol)
        rec.update(state, t + params.tau)
        if record_every and (k + 1) % record_every == 0:
            hist_t.append(t + params.tau)
            hist_u.append(state.u.copy())
    history = (np.array(hist_t), np.array(hist_u)) if record_every else None
    return state, rec, history
