import numpy as np
import pytest

from residiff.dynamics import (
    CAUCHY_CLIP,
    DisturbanceProcess,
    DisturbanceSpec,
    PlantState,
    QuadrotorParams,
    ToyParams,
    mechanical_energy,
    sample_disturbance,
    step_quadrotor,
    step_toy,
    true_residual,
)

G = 9.81


def test_hover_force_balances_gravity():
    params = QuadrotorParams(mass=1.4)
    s = PlantState.at([0, 0, 1.0])
    s1 = step_quadrotor(s, [0, 0, 1.4 * G], params, None, 0.01)
    assert np.allclose(s1.a_last, 0.0, atol=1e-12)
    assert np.allclose(s1.p, s.p) and np.allclose(s1.v, 0.0)


def test_free_fall_one_step():
    s1 = step_quadrotor(PlantState.at([0, 0, 5.0]), np.zeros(3), QuadrotorParams(), None, 0.01)
    assert np.allclose(s1.v, [0, 0, -G * 0.01])
    # semi-implicit: position uses the updated velocity
    assert np.isclose(s1.p[2], 5.0 - G * 0.01 ** 2)


def test_linear_drag_deceleration():
    params = QuadrotorParams(mass=1.4, drag_coeffs=(0.1, 0.0, 0.0))
    s = PlantState.at([0, 0, 1], v=[1, 0, 0])
    s1 = step_quadrotor(s, [0, 0, 1.4 * G], params, None, 0.01)
    assert s1.a_last[0] == pytest.approx(-0.1 / 1.4, rel=1e-12)
    assert s1.a_last[0] == pytest.approx(-0.0714285714, abs=1e-9)


def test_payload_adds_to_mass():
    params = QuadrotorParams(mass=1.4, payload_mass=0.6)
    assert params.total_mass == pytest.approx(2.0)
    s1 = step_quadrotor(PlantState.at([0, 0, 1]), [0, 0, 2.0 * G], params, None, 0.01)
    assert np.allclose(s1.a_last, 0.0, atol=1e-12)


def test_actuator_lag_first_order_response():
    tau, dt = 0.05, 0.001
    params = QuadrotorParams(mass=1.0, actuator_lag_tau=tau)
    s = PlantState.at([0, 0, 100.0])
    for _ in range(int(round(tau / dt))):
        s = step_quadrotor(s, [1.0, 0, 0], params, None, dt)
    # exact discretization: one time constant reaches 1 - 1/e of the command
    assert s.lagged_force[0] == pytest.approx(1 - np.exp(-1), rel=1e-9)


def test_f_a_last_includes_lag_gap():
    params = QuadrotorParams(mass=1.0, drag_coeffs=0.2, actuator_lag_tau=0.1)
    s = PlantState.at([0, 0, 1], v=[0.5, 0, 0])
    u = np.array([1.0, 0.0, G])
    s1 = step_quadrotor(s, u, params, None, 0.01)
    # m a = m g_v + u + f_a must hold with f_a reported by the plant
    assert np.allclose(params.total_mass * s1.a_last, params.total_mass * params.gravity_vector + u + s1.f_a_last)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0], [1, 2]])
def test_rejects_bad_force(bad):
    with pytest.raises(ValueError):
        step_quadrotor(PlantState.at([0, 0, 1]), bad, QuadrotorParams(), None, 0.01)


def test_rejects_bad_dt_and_state():
    with pytest.raises(ValueError):
        step_quadrotor(PlantState.at([0, 0, 1]), np.zeros(3), QuadrotorParams(), None, 0.0)
    with pytest.raises(ValueError):
        step_quadrotor(PlantState.at([0, np.nan, 1]), np.zeros(3), QuadrotorParams(), None, 0.01)


@pytest.mark.parametrize("kw", [dict(mass=0), dict(gravity=-1), dict(drag_coeffs=(-0.1, 0, 0)),
                                dict(payload_mass=-0.2), dict(actuator_lag_tau=-1)])
def test_params_invariants(kw):
    with pytest.raises(ValueError):
        QuadrotorParams(**kw)


def test_energy_drift_free_flight():
    params = QuadrotorParams(mass=1.4)
    s = PlantState.at([0, 0, 1000.0], v=[1.0, -0.5, 3.0])
    e0 = mechanical_energy(s, params)
    for _ in range(10_000):
        s = step_quadrotor(s, np.zeros(3), params, None, 0.002)
    assert abs(mechanical_energy(s, params) - e0) / abs(e0) < 0.01


# -- disturbances -----------------------------------------------------------------

def test_disturbance_none_and_bias():
    assert np.all(sample_disturbance(DisturbanceProcess(DisturbanceSpec()), 0.0, 0.01) == 0)
    proc = DisturbanceProcess(DisturbanceSpec("constant_bias", {"bias": (0.5, 0, 0)}))
    for t in (0.0, 1.0, 7.3):
        assert np.array_equal(proc.sample(t, 0.01), [0.5, 0, 0])


def test_ou_stationary_std():
    proc = DisturbanceProcess(DisturbanceSpec("ou_wind", {"rate": 1.0, "volatility": 0.3}, seed=3))
    x = np.array([proc.sample(i * 0.05, 0.05) for i in range(100_000)])
    assert np.allclose(x.std(axis=0), 0.3 / np.sqrt(2), rtol=0.05)
    assert np.allclose(x.mean(axis=0), 0.0, atol=0.03)


def test_cauchy_median_abs_equals_scale():
    proc = DisturbanceProcess(DisturbanceSpec("cauchy", {"scale": 0.1}, seed=0, dim=1))
    d = np.array([proc.sample(0.0, 0.01)[0] for _ in range(100_000)])
    # median |d| of a Cauchy(0, c) is c * tan(pi / 4) = c
    assert np.median(np.abs(d)) == pytest.approx(0.1 * np.tan(np.pi / 4), rel=0.02)
    assert np.max(np.abs(d)) <= CAUCHY_CLIP * 0.1
    assert proc.n_clipped > 0


def test_gaussian_std():
    proc = DisturbanceProcess(DisturbanceSpec("gaussian", {"std": 0.2}, seed=1, dim=1))
    d = np.array([proc.sample(0.0, 0.01)[0] for _ in range(50_000)])
    assert d.std() == pytest.approx(0.2, rel=0.02)


@pytest.mark.parametrize("kind,params", [("ou_wind", {"rate": 0.0, "volatility": 1}),
                                         ("ou_wind", {"rate": 1.0, "volatility": -1}),
                                         ("gaussian", {"std": -1}), ("cauchy", {"scale": -1}),
                                         ("tornado", {})])
def test_disturbance_spec_invariants(kind, params):
    with pytest.raises(ValueError):
        DisturbanceSpec(kind, params)


def test_disturbance_determinism():
    spec = DisturbanceSpec("ou_wind", {"rate": 0.5, "volatility": 0.4}, seed=11)
    a = [DisturbanceProcess(spec).sample(0, 0.01) for _ in range(3)]
    p1, p2 = DisturbanceProcess(spec), DisturbanceProcess(spec)
    s1 = np.array([p1.sample(i * 0.01, 0.01) for i in range(500)])
    s2 = np.array([p2.sample(i * 0.01, 0.01) for i in range(500)])
    assert np.array_equal(s1, s2)
    assert all(np.array_equal(a[0], x) for x in a)


def test_quadrotor_trajectory_bit_identical():
    params = QuadrotorParams(mass=1.4, drag_coeffs=(0.3, 0.3, 0.2), actuator_lag_tau=0.05)
    spec = DisturbanceSpec("ou_wind", {"rate": 0.5, "volatility": 0.3}, seed=4)

    def run():
        s, proc = PlantState.at([0, 0, 1]), DisturbanceProcess(spec)
        for i in range(300):
            s = step_quadrotor(s, [0.1, -0.2, 14.0], params, proc, 0.01, i * 0.01)
        return s.p

    assert np.array_equal(run(), run())


# -- residual definition ------------------------------------------------------------

def test_true_residual_hover():
    params = QuadrotorParams(mass=1.4)
    h = true_residual(np.zeros(3), np.zeros(3), np.zeros(3), params, 1.0)
    assert np.allclose(h, [0, 0, 1.4 * G])
    assert h[2] == pytest.approx(13.734)


# -- toy system ------------------------------------------------------------------

def test_toy_exact_cancellation_matches_closed_form():
    p = ToyParams(a=1.0, k_gain=2.0, dt=0.01)
    proc = DisturbanceProcess(DisturbanceSpec("gaussian", {"std": 0.5}, seed=2, dim=1))
    x, x0 = 1.0, 1.0
    n = 100
    for i in range(n):
        d = float(proc.sample(i * p.dt, p.dt)[0])
        x = step_toy(x, -p.k_gain * x - d, p, d)
    expected = x0 * (1 - p.dt * (p.k_gain - p.a)) ** n
    assert x == pytest.approx(expected, rel=1e-12, abs=0)
    assert abs(x - x0 * np.exp(-1.0)) / (x0 * np.exp(-1.0)) < 0.01


def test_toy_open_loop_growth():
    p = ToyParams()
    x = 1.0
    for _ in range(50):
        x = step_toy(x, 0.0, p, 0.0)
    assert x == pytest.approx((1 + p.dt) ** 50, rel=1e-13)


def test_toy_rejects_non_finite():
    with pytest.raises(ValueError):
        step_toy(np.nan, 0.0, ToyParams(), 0.0)
    with pytest.raises(ValueError):
        ToyParams(dt=0)
