import numpy as np
import pytest
import scipy.linalg as sla

from safempc import models, reference
from safempc.models import (
    ControlInput,
    ErrorState,
    FrenetSingularError,
    VehicleParams,
    error_dynamics,
    error_rhs,
    known_constraints,
    rk4_sensitivities,
    rk4_step,
    rk4_step_array,
    steering_limit_bound,
)

P = VehicleParams()


@pytest.fixture(scope="module")
def straight():
    return reference.from_straight(200.0, 10.0, P)


@pytest.fixture(scope="module")
def curved():
    # constant curvature 0.05 at fine spacing so geometry error is negligible
    return reference.from_curvature_profile(
        [(60.0, 0.05, 0.05)], [[0.0, 10.0], [60.0, 10.0]], P, spacing=0.005)


class TestErrorDynamics:
    def test_equilibrium_on_reference(self, straight):
        x = ErrorState(s=5.0, v=10.0)
        u = ControlInput(0.0, 0.0)
        f = error_dynamics(x, u, straight, P)
        assert f[0] == pytest.approx(10.0, abs=1e-12)
        np.testing.assert_allclose(f[1:], 0.0, atol=1e-12)

    def test_lateral_error_rate(self, straight):
        x = ErrorState(s=5.0, e_psi=0.1, v=10.0)
        f = error_dynamics(x, ControlInput(), straight, P)
        assert f[1] == pytest.approx(10.0 * np.sin(0.1), abs=1e-12)

    def test_progress_rate_with_curvature(self, curved):
        x = ErrorState(s=10.0, e_y=0.4, v=10.0)
        f = error_dynamics(x, ControlInput(), curved, P)
        assert f[0] == pytest.approx(10.0 / (1.0 - 0.05 * 0.4), rel=1e-9)

    def test_frenet_singularity(self, curved):
        x = ErrorState(s=10.0, e_y=20.0, v=5.0)
        with pytest.raises(FrenetSingularError):
            error_dynamics(x, ControlInput(), curved, P)

    def test_jacobians_match_finite_differences(self, curved):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = np.array([rng.uniform(5, 40), rng.uniform(-0.3, 0.3),
                          rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                          rng.uniform(-0.2, 0.2), rng.uniform(2, 12),
                          rng.uniform(-1, 1)])
            u = rng.uniform(-1, 1, size=2)
            f0, jx, ju = error_rhs(x, u, curved, P, with_jacobian=True)
            eps = 1e-6
            for k in range(7):
                dx = np.zeros(7)
                dx[k] = eps
                fd = (error_rhs(x + dx, u, curved, P)
                      - error_rhs(x - dx, u, curved, P)) / (2 * eps)
                np.testing.assert_allclose(jx[:, k], fd, atol=5e-5)
            for k in range(2):
                du = np.zeros(2)
                du[k] = eps
                fd = (error_rhs(x, u + du, curved, P)
                      - error_rhs(x, u - du, curved, P)) / (2 * eps)
                np.testing.assert_allclose(ju[:, k], fd, atol=5e-5)


class TestRk4Step:
    def test_rest_is_fixed_point(self, straight):
        x = ErrorState(s=1.0)
        out = rk4_step(x, ControlInput(), 0.05, 5, straight, P)
        np.testing.assert_allclose(out.as_array(), x.as_array(), atol=1e-14)

    def test_longitudinal_matches_matrix_exponential(self, straight):
        # (v, a) is linear; the exact step comes from the augmented exponential
        x = ErrorState(s=1.0, v=5.0, a=0.5)
        u = ControlInput(a_req=2.0)
        out = rk4_step(x, u, 0.05, 5, straight, P)
        m = np.array([[0.0, 1.0, 0.0],
                      [0.0, -P.t_acc, P.t_acc],
                      [0.0, 0.0, 0.0]])
        exact = sla.expm(m * 0.05) @ np.array([5.0, 0.5, 2.0])
        assert out.v == pytest.approx(exact[0], abs=1e-9)
        assert out.a == pytest.approx(exact[1], abs=1e-9)

    def test_fourth_order_convergence(self, curved):
        # steering chain held at equilibrium so the smooth kinematic modes
        # dominate and the h^4 error scaling is clean
        x = np.array([5.0, 0.2, 0.1, 0.05, 0.0, 9.0, 0.4])
        u = np.array([0.8, 0.05])
        ref640 = rk4_step_array(x, u, 0.05, 640, curved, P, clamp=False)
        e1 = np.linalg.norm(rk4_step_array(x, u, 0.05, 1, curved, P, clamp=False) - ref640)
        e2 = np.linalg.norm(rk4_step_array(x, u, 0.05, 2, curved, P, clamp=False) - ref640)
        assert 14.0 <= e1 / e2 <= 18.0

    def test_sensitivities_match_finite_differences(self, curved):
        x = np.array([8.0, 0.1, -0.05, 0.03, 0.01, 7.0, 0.2])
        u = np.array([0.5, 0.05])
        xn, a_mat, b_mat = rk4_sensitivities(x, u, 0.05, 5, curved, P)
        np.testing.assert_allclose(
            xn[0], rk4_step_array(x, u, 0.05, 5, curved, P, clamp=False), atol=1e-12)
        eps = 1e-6
        for k in range(7):
            dx = np.zeros(7)
            dx[k] = eps
            fd = (rk4_step_array(x + dx, u, 0.05, 5, curved, P, clamp=False)
                  - rk4_step_array(x - dx, u, 0.05, 5, curved, P, clamp=False)) / (2 * eps)
            np.testing.assert_allclose(a_mat[0][:, k], fd, atol=1e-6)
        for k in range(2):
            du = np.zeros(2)
            du[k] = eps
            fd = (rk4_step_array(x, u + du, 0.05, 5, curved, P, clamp=False)
                  - rk4_step_array(x, u - du, 0.05, 5, curved, P, clamp=False)) / (2 * eps)
            np.testing.assert_allclose(b_mat[0][:, k], fd, atol=1e-6)

    def test_braking_clamp_keeps_v_nonnegative(self, straight):
        x = ErrorState(s=1.0, v=0.05, a=-3.0)
        u = ControlInput(a_req=-5.0)
        for _ in range(40):
            x = rk4_step(x, u, 0.05, 5, straight, P)
        assert x.v >= 0.0
        assert x.a >= 0.0

    def test_deterministic(self, curved):
        x = ErrorState(s=5.0, e_y=0.1, v=8.0)
        u = ControlInput(0.5, 0.02)
        a = rk4_step(x, u, 0.05, 5, curved, P).as_array()
        b = rk4_step(x, u, 0.05, 5, curved, P).as_array()
        np.testing.assert_array_equal(a, b)


class TestKnownConstraints:
    def test_interior_point(self):
        res = known_constraints(ErrorState(s=0.0), ControlInput(), P)
        assert res.shape == (16,)
        assert (res <= 0.0).all()

    def test_velocity_violation(self):
        res = known_constraints(ErrorState(s=0.0, v=15.5), ControlInput(), P)
        i = models.KNOWN_CONSTRAINT_NAMES.index("v_upper")
        assert res[i] == pytest.approx(0.22, abs=1e-12)

    def test_steering_limit_effectively_open_at_rest(self):
        bound = steering_limit_bound(0.0)
        assert bound == pytest.approx((1e4 / 2 + 40) * 16.8 * np.pi / 180, rel=1e-12)
        assert bound > 100 * P.delta_max
        res = known_constraints(ErrorState(s=0.0, delta=0.5), ControlInput(), P,
                                steering_limit=True)
        assert res.shape == (18,)
        assert res[16] < 0 and res[17] < 0


class TestChartConsistency:
    @pytest.mark.parametrize("path_fixture", ["straight", "curved"])
    def test_global_and_error_charts_agree(self, path_fixture, request):
        path = request.getfixturevalue(path_fixture)
        err = ErrorState(s=2.0, e_y=0.1, e_psi=0.05, delta=0.02, alpha=0.0,
                         v=8.0, a=0.3)
        glob = reference.frenet_to_global(path, err)
        xg = glob.as_array()
        xe = err.as_array()
        u = np.array([0.3, 0.05])
        for _ in range(100):
            xg = models.rk4_global(xg, u, 0.05, 5, P)
            xe = rk4_step_array(xe, u, 0.05, 5, path, P)
            mapped = reference.frenet_to_global(
                path, ErrorState.from_array(xe)).as_array()
            assert np.hypot(mapped[0] - xg[0], mapped[1] - xg[1]) < 1e-6
