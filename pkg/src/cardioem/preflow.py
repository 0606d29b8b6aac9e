"""Simulation initialization pipeline.

Four independent stages prepare a coupled run: recovery of the unloaded
reference configuration from the imaged (loaded) geometry, inflation of the
reference to end-diastolic volume targets, a long single-cell pre-run that
provides periodic ionic and force initial states, and a limit-cycle
acceleration step that replaces the 3D ventricles with fitted elastance
emulators to converge the 0D circulation cheaply between coupled beats.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .activation import ActivationParams, steady_permissivity
from .circulation import (
    COUPLED, CircState, CircuitParams, rk4_step, circulation_rhs,
)
from .coupling import cavity_directions, cavity_volume
from .ep import EPParams
from .mechanics import MaterialParams, MechanicsProblem, solve_quasistatic
from .mesh import Mesh


class PreflowError(Exception):
    pass


@dataclass
class InitialStateBundle:
    """Everything needed to start a coupled simulation."""

    reference_nodes: np.ndarray      # (N, 3) recovered reference coordinates
    d0: np.ndarray                   # (3N,) end-diastolic displacement
    p_lv_ed: float                   # Pa
    p_rv_ed: float                   # Pa
    w0: np.ndarray                   # (2,) periodic ionic state (r, g)
    s0: np.ndarray                   # (2,) relaxed force state
    c0: CircState                    # periodic circulation state


# ---------------------------------------------------------------------------
# Reference configuration recovery
# ---------------------------------------------------------------------------

@dataclass
class ReferenceRecovery:
    """Recovered reference geometry plus the fiber data used to find it."""

    mesh: Mesh
    history: list               # max nodal mismatch per iteration (m)
    fibers: tuple               # (f0, s0, n0) nodal vectors
    xi_hat: np.ndarray


def reinflate(rec: ReferenceRecovery, p_lv, p_rv, Ta_mag,
              params: MaterialParams | None = None,
              base_variant="WEIGHTED"):
    """Inflate a recovered reference with its own fiber field; returns (N, 3)
    displacements. Used to verify the fixed point by re-inflation."""
    params = params or MaterialParams()
    d, _ = _inflate(rec.mesh, rec.fibers, rec.xi_hat, params, base_variant,
                    p_lv, p_rv, Ta_mag)
    return d


def _inflate(mesh, fibers, xi_hat, params, variant, p_lv, p_rv, Ta_mag,
             d0=None, n_ramp=10):
    prob = MechanicsProblem(mesh, fibers, xi_hat, params,
                            base_variant=variant)
    Ta = np.full(mesh.n_nodes, Ta_mag)
    d = solve_quasistatic(prob, p_lv, p_rv, Ta, d0=d0, n_ramp=n_ramp)
    return d.reshape(-1, 3), prob


def recover_reference(mesh: Mesh, fiber_rule, p_lv=600.0, p_rv=400.0,
                      Ta_resid=350e3, params: MaterialParams | None = None,
                      base_variant="WEIGHTED", tol=1e-4, omega=1.0,
                      max_iter=50, angles=None):
    """Find the unloaded reference whose inflation matches the input mesh.

    Fixed-point iteration on the node coordinates: each iterate inflates the
    candidate reference with the residual loads (p_lv, p_rv, uniform active
    tension Ta_resid applied without the right-ventricular reduction) and
    moves the candidate by the mismatch. The fiber field is generated once
    on the input geometry and carried across iterates (node for node), which
    keeps the fixed-point map smooth. Returns a ReferenceRecovery bundle.
    """
    from .fibers import compute_distance_fields, generate_fibers

    params = params or MaterialParams()
    target = mesh.nodes.copy()
    fields = compute_distance_fields(mesh, rule=fiber_rule)
    fib = generate_fibers(mesh, rule=fiber_rule, angles=angles,
                          fields=fields)
    ref = dataclasses.replace(mesh, nodes=target.copy(), _cache={})
    history = []
    d_warm = None
    from .mechanics import MechanicsError
    for it in range(max_iter):
        try:
            d, _ = _inflate(ref, (fib.f0, fib.s0, fib.n0), fields.xi_hat,
                            params, base_variant, p_lv, p_rv, Ta_resid,
                            d0=d_warm, n_ramp=10 if d_warm is None else 1)
        except (MechanicsError, RuntimeError):
            if d_warm is None:
                raise
            # warm start failed on the updated geometry; retry cold
            d_warm = None
            d, _ = _inflate(ref, (fib.f0, fib.s0, fib.n0), fields.xi_hat,
                            params, base_variant, p_lv, p_rv, Ta_resid)
        d_warm = d.ravel().copy()
        mismatch = ref.nodes + d - target
        err = np.linalg.norm(mismatch, axis=1).max()
        history.append(err)
        if err < tol:
            return ReferenceRecovery(mesh=ref, history=history,
                                     fibers=(fib.f0, fib.s0, fib.n0),
                                     xi_hat=fields.xi_hat)
        # damp the update if it would invert an element of the candidate
        from .mesh import MeshError, _check_positive_jacobians
        w = omega
        for _ in range(6):
            trial = dataclasses.replace(ref, nodes=ref.nodes - w * mismatch,
                                        _cache={})
            try:
                _check_positive_jacobians(trial)
                break
            except MeshError:
                w *= 0.5
        else:
            raise PreflowError("reference update inverts elements even "
                               "after step damping")
        ref = trial
    raise PreflowError(
        f"reference recovery did not converge in {max_iter} iterations; "
        f"mismatch history (m): {np.array2string(np.asarray(history), precision=3)}")


# ---------------------------------------------------------------------------
# End-diastolic inflation
# ---------------------------------------------------------------------------

def inflate_to_ED(mesh: Mesh, fibers, xi_hat, v_lv_target, v_rv_target,
                  params: MaterialParams | None = None,
                  base_variant="WEIGHTED", tol_ml=0.5, p_cap=10e3,
                  max_iter=30):
    """Find (d0, p_LV, p_RV) bringing both cavities to target volumes (m^3).

    Secant (Broyden) iteration on the two pressures; each evaluation is a
    quasi-static inflation warm-started from the previous displacement.
    """
    params = params or MaterialParams()
    prob = MechanicsProblem(mesh, fibers, xi_hat, params,
                            base_variant=base_variant)
    h, b_lv, b_rv = cavity_directions(mesh)
    v0_l = cavity_volume(mesh, np.zeros(prob.n_dofs), "LV", h, b_lv)
    v0_r = cavity_volume(mesh, np.zeros(prob.n_dofs), "RV", h, b_rv)
    if v_lv_target < v0_l - 1e-12 or v_rv_target < v0_r - 1e-12:
        raise PreflowError("ED targets below reference cavity volumes")
    Ta = np.zeros(mesh.n_nodes)
    state = {"d": np.zeros(prob.n_dofs)}

    def volumes(p):
        if p.min() < 0 or p.max() > p_cap:
            raise PreflowError(
                f"pressure out of range during ED inflation: {p}")
        from .mechanics import MechanicsError
        try:
            d = solve_quasistatic(prob, p[0], p[1], Ta, d0=state["d"],
                                  n_ramp=1, max_halvings=5)
        except (MechanicsError, RuntimeError):
            d = solve_quasistatic(prob, p[0], p[1], Ta, n_ramp=10,
                                  max_halvings=5)
        state["d"] = d
        return np.array([cavity_volume(mesh, d, "LV", h, b_lv),
                         cavity_volume(mesh, d, "RV", h, b_rv)])

    target = np.array([v_lv_target, v_rv_target])
    if np.abs(np.array([v0_l, v0_r]) - target).max() < tol_ml * 1e-6:
        return np.zeros(prob.n_dofs), 0.0, 0.0

    def fd_jacobian(p, r, dp=25.0):
        B = np.zeros((2, 2))
        for j in range(2):
            pp = p.copy()
            pp[j] += dp
            B[:, j] = (volumes(pp) - target - r) / dp
        return B

    p = np.array([100.0, 50.0])
    r = volumes(p) - target
    B = fd_jacobian(p, r)
    for it in range(max_iter):
        if np.abs(r).max() < tol_ml * 1e-6:
            return state["d"], float(p[0]), float(p[1])
        step = np.linalg.solve(B, -r)
        # keep pressures in the admissible box
        p_new = np.clip(p + step, 1.0, p_cap)
        r_new = volumes(p_new) - target
        s = p_new - p
        if np.linalg.norm(s) < 1e-12:
            break
        if np.abs(r_new).max() > 0.9 * np.abs(r).max():
            # Broyden model has drifted; rebuild it by finite differences
            B = fd_jacobian(p_new, r_new)
        else:
            y = r_new - r
            B = B + np.outer(y - B @ s, s) / (s @ s)
        p, r = p_new, r_new
    if np.abs(r).max() < tol_ml * 1e-6:
        return state["d"], float(p[0]), float(p[1])
    raise PreflowError(
        f"ED inflation missed targets by {1e6 * np.abs(r).max():.3f} mL")


# ---------------------------------------------------------------------------
# Single-cell pre-run
# ---------------------------------------------------------------------------

def single_cell_prerun(ep_params: EPParams | None = None,
                       act_params: ActivationParams | None = None,
                       n_cycles=1000, T_hb=0.8, dt=1e-4, sl=2.2,
                       stim_amplitude=None, stim_duration=3e-3,
                       paced=True):
    """Periodic single-cell states (w0, s0) after long paced pre-pacing.

    The ionic model is driven once per cycle with the standard stimulus and
    advanced explicitly; the force state is relaxed afterwards under the
    final diastolic calcium at the given sarcomere length. Returns
    (w0, s0, cycle_diff) where cycle_diff is the state change between the
    two last cycles.
    """
    p = ep_params or EPParams()
    ap = act_params or ActivationParams()
    if stim_amplitude is None:
        stim_amplitude = 50e3 / (p.chi_m * p.C_m * (p.v_amp * 1e-3))
    n_per = int(round(T_hb / dt))
    n_stim = int(round(stim_duration / dt))
    # plain-float inner loop: the model is tiny and the horizon is long
    K, a, eps0, mu1, mu2, ts = p.K, p.a, p.eps0, p.mu1, p.mu2, p.t_scale
    ug, tr, td = p.u_gate, p.tau_g_rise, p.tau_g_decay
    u = r = g = 0.0
    prev_end = None
    cycle_diff = np.inf
    for cyc in range(n_cycles):
        for k in range(n_per):
            du = (K * u * (u - a) * (1.0 - u) - u * r) / ts
            if paced and k < n_stim:
                du += stim_amplitude
            dr = ((eps0 + mu1 * r / (mu2 + u))
                  * (-r - K * u * (u - a - 1.0))) / ts
            gate = 1.0 if u >= ug else 0.0
            tau_g = tr if gate > g else td
            dg = (gate - g) / tau_g
            u += dt * du
            r += dt * dr
            g = min(max(g + dt * dg, 0.0), 1.0)
        end = np.array([u, r, g])
        if prev_end is not None:
            cycle_diff = np.abs(end - prev_end).max()
        prev_end = end
    ca_dia = p.ca_base + p.ca_amp * g
    # relax the force relay to its steady state at the diastolic calcium
    p_inf = float(steady_permissivity(ca_dia, sl, ap))
    s0 = np.array([p_inf, p_inf])
    w0 = np.array([r, g])
    return w0, s0, cycle_diff


# ---------------------------------------------------------------------------
# Limit-cycle acceleration (V-cycle)
# ---------------------------------------------------------------------------

def fit_elastance(times, pressures, volumes, v_rest, T_hb, n_bins=40):
    """Phase-binned least-squares fit of E(t) = p(t)/(V(t) - V0).

    Returns (phase centers, E values) over one period; raises on degenerate
    data where the volume stays too close to the resting volume.
    """
    times = np.asarray(times, dtype=float)
    p = np.asarray(pressures, dtype=float)
    dv = np.asarray(volumes, dtype=float) - v_rest
    if np.abs(dv).min() < 1.0:
        raise PreflowError("degenerate elastance fit: V approaches V0")
    phase = np.mod(times, T_hb) / T_hb
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(phase, edges) - 1, 0, n_bins - 1)
    E = np.full(n_bins, np.nan)
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            E[b] = (p[sel] * dv[sel]).sum() / (dv[sel] ** 2).sum()
    centers = (edges[:-1] + edges[1:]) / 2
    good = np.isfinite(E)
    if good.sum() < n_bins:
        E = np.interp(centers, centers[good], E[good], period=1.0)
    return centers, np.maximum(E, 1e-6)


def run_emulated_loop(circ_params: CircuitParams, e_lv, e_rv,
                      c_init: CircState, dt=5e-4, max_beats=200,
                      rel_tol=1e-3, raise_on_max=True):
    """Advance the 0D loop with fitted ventricular elastance emulators.

    e_lv and e_rv are (phase centers, E values) pairs. Stops when the
    beat-to-beat state change falls below rel_tol; returns (CircState,
    number of beats run).
    """
    par = circ_params
    per = int(round(par.T_hb / dt))

    def E_of(tab, t):
        ph = np.mod(t, par.T_hb) / par.T_hb
        return np.interp(ph, tab[0], tab[1], period=1.0)

    def f(t, c):
        p_lv = E_of(e_lv, t) * (c[1] - par.V0_LV)
        p_rv = E_of(e_rv, t) * (c[3] - par.V0_RV)
        return circulation_rhs(t, c, par, mode=COUPLED,
                               p_LV=p_lv, p_RV=p_rv)

    c = c_init.c.copy()
    t = 0.0
    prev = c.copy()
    for beat in range(max_beats):
        for _ in range(per):
            c = rk4_step(f, t, c, dt)
            t += dt
        scale = np.maximum(np.abs(prev), 1.0)
        if (np.abs(c - prev) / scale).max() < rel_tol:
            return CircState(c), beat + 1
        prev = c.copy()
    if raise_on_max:
        raise PreflowError(
            f"emulated loop not periodic after {max_beats} beats")
    return CircState(c), max_beats


def limit_cycle_accelerate(times, p_lv, v_lv, p_rv, v_rv,
                           circ_params: CircuitParams, c_current: CircState,
                           dt=5e-4, rel_tol=1e-3):
    """Periodic circulation state from a short coupled PV history.

    Fits ventricular elastance emulators to the sampled pressure-volume
    loops (pressures mmHg, volumes mL), runs the all-0D loop to periodicity
    and returns the resulting circulation state for restarting the coupled
    model. Only the 0D state is replaced; the 3D state is left untouched.
    """
    par = circ_params
    e_lv = fit_elastance(times, p_lv, v_lv, par.V0_LV, par.T_hb)
    e_rv = fit_elastance(times, p_rv, v_rv, par.V0_RV, par.T_hb)
    c0, _ = run_emulated_loop(par, e_lv, e_rv, c_current, dt=dt,
                              rel_tol=rel_tol)
    return c0
