import numpy as np
import pytest

from cardioem.activation import (
    ActivationError, ActivationParams, ForceState, active_tension,
    initial_force_state, sarcomere_length, steady_permissivity, step_force,
)


class TestSarcomereLength:
    def test_identity(self):
        assert sarcomere_length(np.eye(3), [1, 0, 0]) == pytest.approx(2.0)

    def test_stretch(self):
        F = np.diag([1.1, 1.0, 1.0])
        assert sarcomere_length(F, [1, 0, 0]) == pytest.approx(2.2)

    def test_rotation_isometric(self):
        th = 0.4
        Q = np.array([[np.cos(th), -np.sin(th), 0],
                      [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
        assert sarcomere_length(Q, [1, 0, 0]) == pytest.approx(2.0)

    def test_batched(self):
        F = np.stack([np.eye(3), np.diag([1.2, 1, 1])])
        f0 = np.tile([1.0, 0, 0], (2, 1))
        sl = sarcomere_length(F, f0)
        assert np.allclose(sl, [2.0, 2.4])


class TestStepForce:
    def test_diastolic_fixed_point(self):
        p = ActivationParams()
        s = initial_force_state(4)
        ca = np.full(4, 0.1)   # P_inf(0.1 uM) ~ (0.1/0.5)^4 tiny
        sl = np.full(4, 2.0)
        for _ in range(100):
            s = step_force(s, ca, sl, 1e-3, p)
        assert s.s.max() < 2e-3

    def test_saturating_calcium(self):
        p = ActivationParams()
        s = initial_force_state(1)
        ca = np.array([10.0])
        sl = np.array([2.2])
        t, dt = 0.0, 5e-4
        while t < 10 * (p.tau_a + p.tau_f):
            s = step_force(s, ca, sl, dt, p)
            t += dt
        assert s.permissivity[0] > 0.99

    def test_monotone_rise(self):
        p = ActivationParams()
        s = initial_force_state(1)
        prev = 0.0
        for _ in range(400):
            s = step_force(s, np.array([5.0]), np.array([2.0]), 1e-3, p)
            assert s.permissivity[0] >= prev - 1e-12
            prev = s.permissivity[0]

    def test_length_dependence(self):
        p = ActivationParams()
        lo = steady_permissivity(0.5, 1.8, p)
        hi = steady_permissivity(0.5, 2.2, p)
        assert hi > lo

    def test_bad_dt(self):
        with pytest.raises(ActivationError):
            step_force(initial_force_state(1), np.array([1.0]),
                       np.array([2.0]), 0.0, ActivationParams())

    def test_states_stay_in_unit_interval(self):
        p = ActivationParams()
        rng = np.random.default_rng(11)
        s = initial_force_state(50)
        for _ in range(200):
            ca = rng.uniform(0.05, 20.0, 50)
            sl = rng.uniform(1.0, 3.0, 50)
            s = step_force(s, ca, sl, rng.uniform(1e-4, 2e-3), p)
            assert (s.s >= 0).all() and (s.s <= 1).all()


class TestActiveTension:
    def test_lv_max(self):
        p = ActivationParams()
        s = ForceState(s=np.array([[1.0, 1.0]]))
        assert active_tension(s, 1.0, p)[0] == pytest.approx(840e3)

    def test_rv_scaled(self):
        p = ActivationParams()
        s = ForceState(s=np.array([[1.0, 1.0]]))
        assert active_tension(s, 0.0, p)[0] == pytest.approx(0.60 * 840e3)

    def test_zero_state(self):
        p = ActivationParams()
        s = ForceState(s=np.zeros((3, 2)))
        assert (active_tension(s, np.array([0.0, 0.5, 1.0]), p) == 0).all()

    def test_bounds_and_ratio(self):
        p = ActivationParams()
        rng = np.random.default_rng(3)
        s = ForceState(s=rng.uniform(0, 1, (20, 2)))
        xi = rng.uniform(0, 1, 20)
        ta = active_tension(s, xi, p)
        assert (ta >= 0).all() and (ta <= p.T_max).all()
        s1 = ForceState(s=np.array([[0.5, 0.7]]))
        r = active_tension(s1, 0.0, p)[0] / active_tension(s1, 1.0, p)[0]
        assert r == pytest.approx(p.C_r)

    def test_param_validation(self):
        with pytest.raises(ActivationError):
            ActivationParams(C_r=0.0).validate()
        with pytest.raises(ActivationError):
            ActivationParams(T_max=-1.0).validate()
