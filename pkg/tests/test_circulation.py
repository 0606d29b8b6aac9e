import numpy as np
import pytest
from scipy.linalg import expm

from cardioem import circulation as circ
from cardioem.circulation import (
    CircState, CircuitParams, CirculationError, N_STATE, STANDALONE, COUPLED,
    chamber_pressures, circulation_rhs, default_initial_state, elastance,
    rk4_step, run_standalone, step_rk4, total_blood_volume, valve_flow,
)

DT = 5e-4

_RUN = {}


def ten_beat_run():
    if "run" not in _RUN:
        _RUN["run"] = run_standalone(CircuitParams(), 10, dt=DT)
    return _RUN["run"]


class TestElastance:
    def test_baseline_mid_relaxed(self):
        p = CircuitParams()
        # well inside the relaxed window of the atrial waveform
        E = elastance(0.4 * p.T_hb, p.E_a_LA, p.E_p_LA, p.t_ac_atria,
                      p.T_ac_atria, p.T_ar_atria, p.T_hb)
        assert E == pytest.approx(0.07, abs=1e-12)

    def test_contraction_peak(self):
        p = CircuitParams()
        t_peak = (p.t_ac_atria + p.T_ac_atria) * p.T_hb
        E = elastance(t_peak, p.E_a_LA, p.E_p_LA, p.t_ac_atria,
                      p.T_ac_atria, p.T_ar_atria, p.T_hb)
        assert E == pytest.approx(0.16, abs=1e-12)

    def test_zero_amplitude_constant(self):
        p = CircuitParams()
        t = np.linspace(0, 3 * p.T_hb, 200)
        E = elastance(t, 0.05, 0.0, 0.8, 0.17, 0.17, p.T_hb)
        assert np.allclose(E, 0.05)

    def test_bounded_and_periodic(self):
        p = CircuitParams()
        t = np.linspace(0, p.T_hb, 1000, endpoint=False)
        E = elastance(t, p.E_a_RA, p.E_p_RA, p.t_ac_atria, p.T_ac_atria,
                      p.T_ar_atria, p.T_hb)
        assert (E >= p.E_a_RA - 1e-12).all()
        assert (E <= p.E_a_RA + p.E_p_RA + 1e-12).all()
        E2 = elastance(t + 5 * p.T_hb, p.E_a_RA, p.E_p_RA, p.t_ac_atria,
                       p.T_ac_atria, p.T_ar_atria, p.T_hb)
        assert np.allclose(E, E2)


class TestValveFlow:
    def test_forward(self):
        assert valve_flow(20.0, 10.0) == pytest.approx(10.0 / 75e-4)

    def test_backward_leak(self):
        assert valve_flow(10.0, 20.0) == pytest.approx(-10.0 / 75e3)

    def test_zero(self):
        assert valve_flow(5.0, 5.0) == 0.0


def equilibrium_setup(P=10.0):
    """Frozen elastances and a uniform-pressure state: exact fixed point."""
    p = CircuitParams(E_p_LA=0.0, E_p_RA=0.0, E_p_LV=0.0, E_p_RV=0.0)
    c = np.zeros(N_STATE)
    c[0] = P / p.E_a_LA + p.V0_LA
    c[1] = P / p.E_a_LV + p.V0_LV
    c[2] = P / p.E_a_RA + p.V0_RA
    c[3] = P / p.E_a_RV + p.V0_RV
    c[4:8] = P
    return p, CircState(c)


class TestRHS:
    def test_equilibrium(self):
        p, s = equilibrium_setup()
        dc = circulation_rhs(0.3, s.c, p)
        assert np.abs(dc).max() < 1e-12

    def test_total_volume_invariant_of_rhs(self):
        # chamber balances plus C dp/dt terms telescope to zero
        p = CircuitParams()
        rng = np.random.default_rng(0)
        caps = np.array([p.C_ar_sys, p.C_ven_sys, p.C_ar_pul, p.C_ven_pul])
        for _ in range(10):
            c = np.concatenate([rng.uniform(20, 150, 4),
                                rng.uniform(5, 100, 4),
                                rng.uniform(-50, 300, 4)])
            dc = circulation_rhs(rng.uniform(0, 0.8), c, p)
            dv = dc[:4].sum() + (caps * dc[4:8]).sum()
            assert abs(dv) < 1e-10 * np.abs(dc).max()

    def test_coupled_needs_pressures(self):
        p = CircuitParams()
        with pytest.raises(CirculationError):
            circulation_rhs(0.0, default_initial_state().c, p, mode=COUPLED)

    def test_coupled_uses_external_pressures(self):
        p = CircuitParams()
        s = default_initial_state()
        _, pLV, _, pRV = chamber_pressures(0.1, s, p, mode=COUPLED,
                                           p_LV=42.0, p_RV=17.0)
        assert pLV == 42.0 and pRV == 17.0


class TestRK4:
    def test_fixed_point_step(self):
        p, s = equilibrium_setup()
        s2 = step_rk4(s, 0.0, DT, p)
        assert np.allclose(s2.c, s.c, atol=1e-12)

    def test_order_on_linear_system(self):
        # y' = Ay against the exact exponential: halving dt divides the
        # one-step (local) error by ~2^5 (ratio in [24, 40])
        rng = np.random.default_rng(1)
        A = rng.standard_normal((6, 6)) * 0.8
        y0 = rng.standard_normal(6)

        def local_error(dt):
            y = rk4_step(lambda t_, y_: A @ y_, 0.0, y0.copy(), dt)
            return np.linalg.norm(y - expm(A * dt) @ y0)

        e1 = local_error(0.02)
        e2 = local_error(0.01)
        assert 24 < e1 / e2 < 40

    def test_global_order_on_linear_system(self):
        # accumulated error over a fixed horizon scales as dt^4
        rng = np.random.default_rng(2)
        A = rng.standard_normal((6, 6)) * 0.8
        y0 = rng.standard_normal(6)
        T = 1.0
        exact = expm(A * T) @ y0

        def integrate(dt):
            y, t = y0.copy(), 0.0
            for _ in range(int(round(T / dt))):
                y = rk4_step(lambda t_, y_: A @ y_, t, y, dt)
                t += dt
            return np.linalg.norm(y - exact)

        ratio = integrate(0.02) / integrate(0.01)
        assert 12 < ratio < 20

    def test_bad_dt(self):
        with pytest.raises(CirculationError):
            step_rk4(default_initial_state(), 0.0, 0.0, CircuitParams())

    def test_nan_detection(self):
        s = default_initial_state()
        s.c[4] = 1e308
        with pytest.raises(CirculationError):
            step_rk4(s, 0.0, 1e3, CircuitParams())


class TestClosedLoop:
    def test_volume_conservation_ten_beats(self):
        p = CircuitParams()
        _, _, hist, _ = ten_beat_run()
        v = total_blood_volume(hist, p)
        assert np.abs(v - v[0]).max() < 0.01

    def test_periodic_regime_by_beat_ten(self):
        p = CircuitParams()
        _, _, hist, _ = ten_beat_run()
        per = int(round(p.T_hb / DT))
        m_prev = hist[8 * per:9 * per, 4].max()
        m_last = hist[9 * per:10 * per, 4].max()
        assert abs(m_last - m_prev) / m_prev < 0.01

    def test_arterial_pressure_positive_band(self):
        _, _, hist, pres = ten_beat_run()
        assert hist[:, 4].min() > 40.0
        assert hist[:, 4].max() < 160.0
        assert 80.0 < pres[:, 1].max() < 140.0  # LV systolic peak

    def test_valve_rectification(self):
        p = CircuitParams()
        _, times, hist, pres = ten_beat_run()
        per = int(round(p.T_hb / DT))
        sel = slice(9 * per, 10 * per)
        q_av = valve_flow(pres[sel, 1], hist[sel, 4], p.R_min, p.R_max)
        fwd = q_av[q_av > 0].mean()
        bwd = np.abs(q_av[q_av < 0]).mean()
        # the diode rectifies strongly: regurgitation is negligible even
        # though the closed-valve pressure gradient exceeds the open one
        assert bwd < 1e-4 * fwd

    def test_volumes_stay_positive(self):
        _, _, hist, _ = ten_beat_run()
        assert hist[:, :4].min() > 0


class TestValidation:
    def test_bad_params(self):
        with pytest.raises(CirculationError):
            CircuitParams(R_ar_sys=-1.0).validate()
        with pytest.raises(CirculationError):
            CircuitParams(R_min=1.0, R_max=0.5).validate()
        with pytest.raises(CirculationError):
            CircuitParams(t_ac_atria=1.5).validate()

    def test_bad_state(self):
        with pytest.raises(CirculationError):
            CircState(np.zeros(5))
        s = default_initial_state()
        s.c[0] = -1.0
        with pytest.raises(CirculationError):
            s.validate()

    def test_state_attribute_access(self):
        s = default_initial_state()
        assert s.V_LV == s.c[1]
        assert s.Q_ven_pul == s.c[11]
        with pytest.raises(AttributeError):
            s.nonexistent
