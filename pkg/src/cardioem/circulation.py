"""Closed-loop lumped-parameter (0D) circulation model.

Four heart chambers as time-varying elastance elements, four heart valves as
non-ideal diodes and the systemic/pulmonary arterial and venous compartments
as RLC circuits. Units are mmHg, mL and s throughout this module; unit
conversion to SI happens exactly once at the 3D coupling interface.

The model runs standalone (both ventricles are elastance chambers) or
coupled (ventricular pressures are supplied externally and the ventricular
volume balance is driven by the 3D model through those pressures).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

MMHG_TO_PA = 133.322

STANDALONE = "STANDALONE"
COUPLED = "COUPLED"

# state vector layout
STATE_NAMES = (
    "V_LA", "V_LV", "V_RA", "V_RV",
    "p_ar_sys", "p_ven_sys", "p_ar_pul", "p_ven_pul",
    "Q_ar_sys", "Q_ven_sys", "Q_ar_pul", "Q_ven_pul",
)
N_STATE = len(STATE_NAMES)


class CirculationError(Exception):
    pass


@dataclass
class CircuitParams:
    """Closed-loop model constants (mmHg, mL, s)."""

    # RLC compartments: systemic/pulmonary arteries and veins
    R_ar_sys: float = 0.416
    R_ven_sys: float = 0.260
    R_ar_pul: float = 0.048
    R_ven_pul: float = 0.036
    C_ar_sys: float = 1.62
    C_ven_sys: float = 60.0
    C_ar_pul: float = 5.0
    C_ven_pul: float = 16.0
    L_ar_sys: float = 5e-3
    L_ven_sys: float = 5e-4
    L_ar_pul: float = 5e-4
    L_ven_pul: float = 5e-4
    # atria (time-varying elastance)
    E_p_LA: float = 0.09
    E_p_RA: float = 0.06
    E_a_LA: float = 0.07
    E_a_RA: float = 0.07
    T_ac_atria: float = 0.17    # contraction duration, fraction of T_hb
    T_ar_atria: float = 0.17    # relaxation duration, fraction of T_hb
    t_ac_atria: float = 0.80    # contraction onset, fraction of T_hb
    V0_LA: float = 4.0
    V0_RA: float = 4.0
    # valves
    R_min: float = 75e-4
    R_max: float = 75e3
    # heartbeat
    T_hb: float = 0.8
    # standalone ventricular elastances (calibration values; in coupled runs
    # the ventricles are replaced by the 3D model)
    E_p_LV: float = 2.75
    E_p_RV: float = 0.55
    E_a_LV: float = 0.08
    E_a_RV: float = 0.05
    T_ac_vent: float = 0.375
    T_ar_vent: float = 0.25
    t_ac_vent: float = 0.0
    V0_LV: float = 16.0
    V0_RV: float = 16.0

    def validate(self):
        for f in dc_fields(self):
            if f.name.startswith(("R_", "C_", "L_")) and f.name not in (
                    "R_min", "R_max"):
                if getattr(self, f.name) <= 0:
                    raise CirculationError(f"{f.name} must be positive")
        if not 0 < self.R_min < self.R_max:
            raise CirculationError("need 0 < R_min < R_max")
        for name in ("T_ac_atria", "T_ar_atria", "t_ac_atria",
                     "T_ac_vent", "T_ar_vent", "t_ac_vent"):
            if not 0 <= getattr(self, name) <= 1:
                raise CirculationError(f"{name} must be in [0, 1]")
        if self.T_hb <= 0:
            raise CirculationError("T_hb must be positive")
        return self


@dataclass
class CircState:
    """12-entry circulation state; volumes mL, pressures mmHg, flows mL/s."""

    c: np.ndarray = field(default_factory=lambda: np.zeros(N_STATE))

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if self.c.shape != (N_STATE,):
            raise CirculationError(f"state must have {N_STATE} entries")

    def __getattr__(self, name):
        try:
            return self.c[STATE_NAMES.index(name)]
        except ValueError:
            raise AttributeError(name) from None

    def copy(self):
        return CircState(self.c.copy())

    def validate(self):
        if not np.isfinite(self.c).all():
            raise CirculationError("circulation state is not finite")
        if (self.c[:4] <= 0).any():
            raise CirculationError("chamber volumes must be positive")
        return self


def default_initial_state() -> CircState:
    """A physiologically plausible diastolic starting point."""
    return CircState(np.array([
        65.0, 120.0, 65.0, 145.0,     # V_LA, V_LV, V_RA, V_RV (mL)
        80.0, 32.0, 20.0, 16.0,       # p_ar/ven sys, p_ar/ven pul (mmHg)
        0.0, 0.0, 0.0, 0.0,           # flows (mL/s)
    ]))


def elastance(t, E_a, E_p, t_ac, T_ac, T_ar, T_hb):
    """Periodic time-varying elastance E_a + E_p e(t), e in [0, 1].

    e ramps up with a half-cosine over T_ac*T_hb starting at t_ac*T_hb,
    ramps down over T_ar*T_hb and is zero elsewhere.
    """
    tm = np.mod(np.asarray(t, dtype=float) - t_ac * T_hb, T_hb)
    up = T_ac * T_hb
    down = T_ar * T_hb
    e = np.where(
        tm < up,
        0.5 * (1 - np.cos(np.pi * tm / max(up, 1e-300))),
        np.where(tm < up + down,
                 0.5 * (1 + np.cos(np.pi * (tm - up) / max(down, 1e-300))),
                 0.0))
    return E_a + E_p * e


def valve_flow(p_up, p_down, R_min=75e-4, R_max=75e3):
    """Non-ideal diode: forward resistance R_min, backward R_max (mL/s)."""
    dp = np.asarray(p_up, dtype=float) - np.asarray(p_down, dtype=float)
    R = np.where(dp > 0, R_min, R_max)
    return dp / R


def chamber_pressures(t, state: CircState, params: CircuitParams,
                      mode=STANDALONE, p_LV=None, p_RV=None):
    """(p_LA, p_LV, p_RA, p_RV) in mmHg at time t."""
    p = params
    p_LA = elastance(t, p.E_a_LA, p.E_p_LA, p.t_ac_atria, p.T_ac_atria,
                     p.T_ar_atria, p.T_hb) * (state.V_LA - p.V0_LA)
    p_RA = elastance(t, p.E_a_RA, p.E_p_RA, p.t_ac_atria, p.T_ac_atria,
                     p.T_ar_atria, p.T_hb) * (state.V_RA - p.V0_RA)
    if mode == STANDALONE:
        p_LV = elastance(t, p.E_a_LV, p.E_p_LV, p.t_ac_vent, p.T_ac_vent,
                         p.T_ar_vent, p.T_hb) * (state.V_LV - p.V0_LV)
        p_RV = elastance(t, p.E_a_RV, p.E_p_RV, p.t_ac_vent, p.T_ac_vent,
                         p.T_ar_vent, p.T_hb) * (state.V_RV - p.V0_RV)
    elif mode == COUPLED:
        if p_LV is None or p_RV is None:
            raise CirculationError("coupled mode needs external pressures")
    else:
        raise CirculationError(f"unknown mode {mode!r}")
    return p_LA, float(p_LV), p_RA, float(p_RV)


def circulation_rhs(t, c, params: CircuitParams, mode=STANDALONE,
                    p_LV=None, p_RV=None):
    """dc/dt of the closed loop; c is the raw 12-vector."""
    s = CircState(np.asarray(c, dtype=float))
    p = params
    p_LA, pLV, p_RA, pRV = chamber_pressures(t, s, p, mode, p_LV, p_RV)

    Q_MV = valve_flow(p_LA, pLV, p.R_min, p.R_max)
    Q_AV = valve_flow(pLV, s.p_ar_sys, p.R_min, p.R_max)
    Q_TV = valve_flow(p_RA, pRV, p.R_min, p.R_max)
    Q_PV = valve_flow(pRV, s.p_ar_pul, p.R_min, p.R_max)

    dc = np.empty(N_STATE)
    dc[0] = s.Q_ven_pul - Q_MV                        # V_LA
    dc[1] = Q_MV - Q_AV                               # V_LV
    dc[2] = s.Q_ven_sys - Q_TV                        # V_RA
    dc[3] = Q_TV - Q_PV                               # V_RV
    dc[4] = (Q_AV - s.Q_ar_sys) / p.C_ar_sys          # p_ar_sys
    dc[5] = (s.Q_ar_sys - s.Q_ven_sys) / p.C_ven_sys  # p_ven_sys
    dc[6] = (Q_PV - s.Q_ar_pul) / p.C_ar_pul          # p_ar_pul
    dc[7] = (s.Q_ar_pul - s.Q_ven_pul) / p.C_ven_pul  # p_ven_pul
    dc[8] = (-p.R_ar_sys * s.Q_ar_sys
             + s.p_ar_sys - s.p_ven_sys) / p.L_ar_sys
    dc[9] = (-p.R_ven_sys * s.Q_ven_sys
             + s.p_ven_sys - p_RA) / p.L_ven_sys
    dc[10] = (-p.R_ar_pul * s.Q_ar_pul
              + s.p_ar_pul - s.p_ven_pul) / p.L_ar_pul
    dc[11] = (-p.R_ven_pul * s.Q_ven_pul
              + s.p_ven_pul - p_LA) / p.L_ven_pul
    return dc


def valve_flows(t, state: CircState, params: CircuitParams,
                mode=STANDALONE, p_LV=None, p_RV=None):
    """(Q_MV, Q_AV, Q_TV, Q_PV) in mL/s at the given state."""
    p = params
    p_LA, pLV, p_RA, pRV = chamber_pressures(t, state, p, mode, p_LV, p_RV)
    return (valve_flow(p_LA, pLV, p.R_min, p.R_max),
            valve_flow(pLV, state.p_ar_sys, p.R_min, p.R_max),
            valve_flow(p_RA, pRV, p.R_min, p.R_max),
            valve_flow(pRV, state.p_ar_pul, p.R_min, p.R_max))


def total_blood_volume(c, params: CircuitParams):
    """Chamber volumes plus stored compartment volumes C_i p_i (mL)."""
    c = np.asarray(c, dtype=float)
    caps = np.array([params.C_ar_sys, params.C_ven_sys,
                     params.C_ar_pul, params.C_ven_pul])
    return c[..., :4].sum(axis=-1) + (c[..., 4:8] * caps).sum(axis=-1)


def rk4_step(f, t, y, dt):
    """One classical 4th-order Runge-Kutta step of y' = f(t, y)."""
    k1 = f(t, y)
    k2 = f(t + dt / 2, y + dt / 2 * k1)
    k3 = f(t + dt / 2, y + dt / 2 * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_rk4(state: CircState, t, dt, params: CircuitParams,
             mode=STANDALONE, p_LV=None, p_RV=None) -> CircState:
    """Classical 4th-order Runge-Kutta step of the circulation ODEs."""
    if dt <= 0:
        raise CirculationError("time step must be positive")

    def f(ti, ci):
        return circulation_rhs(ti, ci, params, mode, p_LV, p_RV)

    cn = rk4_step(f, t, state.c, dt)
    if not np.isfinite(cn).all():
        raise CirculationError(f"non-finite circulation state at t={t:.6f} s")
    return CircState(cn)


def run_standalone(params: CircuitParams, n_beats, dt=5e-4,
                   state: CircState | None = None, record=True):
    """Advance the standalone loop for n_beats; optionally record history.

    Returns (state, times, history, pressures) where history is
    (n_steps+1, 12) and pressures is (n_steps+1, 4) with the chamber
    pressures (p_LA, p_LV, p_RA, p_RV).
    """
    params.validate()
    s = (default_initial_state() if state is None else state.copy())
    n_steps = int(round(n_beats * params.T_hb / dt))
    times = np.arange(n_steps + 1) * dt
    hist = np.empty((n_steps + 1, N_STATE)) if record else None
    pres = np.empty((n_steps + 1, 4)) if record else None
    for k in range(n_steps + 1):
        t = times[k]
        if record:
            hist[k] = s.c
            pres[k] = chamber_pressures(t, s, params)
        if k < n_steps:
            s = step_rk4(s, t, dt, params)
    return s, times, hist, pres
