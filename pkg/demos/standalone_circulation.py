"""Ten heartbeats of the closed-loop 0D circulation.

The four chambers are time-varying elastances, the four valves are
non-ideal diodes and the systemic/pulmonary circuits are RLC stages. The
script reports blood-volume conservation, periodicity and the pressure
ranges of the converged beat.
"""

import numpy as np

from cardioem.circulation import (
    CircuitParams, run_standalone, total_blood_volume,
)

params = CircuitParams()
state, times, hist, pres = run_standalone(params, n_beats=10, dt=5e-4)

vol = total_blood_volume(hist, params)
print(f"total blood volume: {vol[0]:.2f} mL, drift over 10 beats "
      f"{np.abs(vol - vol[0]).max():.2e} mL")

per = int(round(params.T_hb / 5e-4))
last = slice(9 * per, 10 * per)
prev = slice(8 * per, 9 * per)
change = abs(hist[last, 1].max() - hist[prev, 1].max()) / hist[prev, 1].max()
print(f"beat-to-beat EDV change at beat 10: {100 * change:.2f} %")

v_lv, p_lv = hist[last, 1], pres[last, 1]
print(f"LV: EDV {v_lv.max():.1f} mL, ESV {v_lv.min():.1f} mL, "
      f"EF {(v_lv.max() - v_lv.min()) / v_lv.max() * 100:.1f} %")
print(f"LV pressure peak {p_lv.max():.1f} mmHg; systemic arterial "
      f"range [{hist[last, 4].min():.1f}, {hist[last, 4].max():.1f}] mmHg")
