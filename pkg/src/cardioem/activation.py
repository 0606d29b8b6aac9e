"""Active force generation state dynamics.

A two-state relay with Hill-type calcium sensitivity and sarcomere-length
feedback produces the permissivity (fraction of force-generating contractile
units), which scales the maximum active tension. The right ventricle is
scaled down by the contractility ratio through the inter-ventricular
coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ActivationError(Exception):
    pass


@dataclass
class ActivationParams:
    T_max: float = 840e3        # Pa, maximum active tension
    C_r: float = 0.60           # RV/LV contractility ratio
    SL0: float = 2.0            # um, reference sarcomere length
    sl_min: float = 1.6         # um, feedback clamp (configurable)
    sl_max: float = 2.6         # um
    tau_a: float = 30e-3        # s, activation time constant
    tau_f: float = 50e-3        # s, force development time constant
    hill: float = 4.0
    ca50_base: float = 0.5      # uM at SL = SL0
    ca50_slope: float = 0.3     # uM per um of sarcomere stretch

    def validate(self):
        if self.T_max <= 0:
            raise ActivationError("T_max must be positive")
        if not 0 < self.C_r <= 1:
            raise ActivationError("contractility ratio must be in (0, 1]")
        return self


@dataclass
class ForceState:
    """s1 drives toward the steady permissivity, s2 relaxes toward s1."""

    s: np.ndarray  # (N, 2)

    @property
    def permissivity(self):
        return self.s[:, 1]


def initial_force_state(n_nodes: int) -> ForceState:
    return ForceState(s=np.zeros((n_nodes, 2)))


def sarcomere_length(F, f0, SL0: float = 2.0):
    """SL = SL0 * |F f0| (square root of the fiber invariant I4f)."""
    v = np.einsum("...ab,...b->...a", np.asarray(F, dtype=float),
                  np.asarray(f0, dtype=float))
    return SL0 * np.sqrt(np.einsum("...a,...a->...", v, v))


def steady_permissivity(ca, sl, params: ActivationParams):
    """Hill saturation with length-dependent calcium sensitivity."""
    sl = np.clip(sl, params.sl_min, params.sl_max)
    ca50 = params.ca50_base - params.ca50_slope * (sl - params.SL0)
    ca50 = np.maximum(ca50, 1e-3)
    cah = np.asarray(ca, dtype=float) ** params.hill
    return cah / (cah + ca50 ** params.hill)


def step_force(state: ForceState, ca, sl, dt: float,
               params: ActivationParams) -> ForceState:
    """Explicit first-order update of the force state; states stay in [0,1]."""
    if dt <= 0:
        raise ActivationError("time step must be positive")
    p_inf = steady_permissivity(ca, sl, params)
    s1, s2 = state.s[:, 0], state.s[:, 1]
    s1n = s1 + dt * (p_inf - s1) / params.tau_a
    s2n = s2 + dt * (s1 - s2) / params.tau_f
    return ForceState(s=np.clip(np.stack([s1n, s2n], axis=1), 0.0, 1.0))


def active_tension(state: ForceState, xi_hat, params: ActivationParams):
    """T_a = T_max * s2 * [xi_hat + C_r (1 - xi_hat)] (Pa, nonnegative)."""
    scale = np.asarray(xi_hat) + params.C_r * (1.0 - np.asarray(xi_hat))
    return params.T_max * state.permissivity * scale
