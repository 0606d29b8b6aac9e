"""A short segment of the fully coupled 3D-0D heartbeat.

Assembles the electromechanics simulation (fine-mesh electrophysiology,
activation, constrained mechanics, 0D circulation) on a coarse geometry,
inflates to end-diastole and advances a fraction of a beat, printing the
pressure/volume trace. A full beat takes tens of minutes; extend N_STEPS
(1600 steps = one beat at dt = 0.5 ms) to reproduce a complete PV loop.
"""

import numpy as np

from cardioem.cli import build_simulation
from cardioem.coupling import cavity_volume
from cardioem.fibers import compute_distance_fields, generate_fibers
from cardioem.mesh import build_geometry
from cardioem.postio import RunConfig
from cardioem import preflow

N_STEPS = 60

cfg = RunConfig()
cfg.simulation.resolution = 8e-3
cfg.simulation.geom_update_every = 10
cfg.validate()

mesh = build_geometry(type(cfg.geometry)(kind=cfg.geometry.kind,
                                         resolution=8e-3))
fields = compute_distance_fields(mesh, rule=cfg.fibers.rule)
fib = generate_fibers(mesh, rule=cfg.fibers.rule, fields=fields)

# inflate to end-diastole
d0, p_lv0, p_rv0 = preflow.inflate_to_ED(
    mesh, (fib.f0, fib.s0, fib.n0), fields.xi_hat, 135e-6, 60e-6,
    params=cfg.material)
print(f"end-diastole: p_LV = {p_lv0:.0f} Pa, p_RV = {p_rv0:.0f} Pa")

sim = build_simulation(cfg, mesh, fields, fib)
state = sim.initial_sim_state()
state.d = d0.copy()
state.d_prev = d0.copy()
state.p_lv, state.p_rv = p_lv0, p_rv0
state.circ[1] = 1e6 * cavity_volume(mesh, d0, "LV", sim.h, sim.b_lv)
state.circ[3] = 1e6 * cavity_volume(mesh, d0, "RV", sim.h, sim.b_rv)

print(f"{'t (s)':>8} {'p_LV':>7} {'p_RV':>7} {'V_LV':>8} {'V_RV':>8} "
      f"{'res (mL)':>9}")
for k in range(N_STEPS):
    state = sim.advance(state)
    if state.n % 10 == 0:
        dg = state.diagnostics
        print(f"{state.t:8.4f} {state.p_lv / 133.322:7.2f} "
              f"{state.p_rv / 133.322:7.2f} {dg['V_LV_ml']:8.2f} "
              f"{dg['V_RV_ml']:8.2f} {dg['constraint_residual_ml']:9.1e}")
