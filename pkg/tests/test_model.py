"""System class, simulation, and segment-averaged Jacobians."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointmhe.errors import DimensionError, NumericOverflowError
from jointmhe.model import (
    Box,
    as_sequence,
    chua_model,
    mean_value_A,
    mean_value_G,
    simulate,
)

from conftest import make_scalar_model

NO_U = np.zeros(0)


class TestBox:
    def test_contains_and_clip(self):
        box = Box([-1.0, 0.0], [1.0, 2.0])
        assert box.contains([0.5, 1.0])
        assert not box.contains([1.5, 1.0])
        np.testing.assert_allclose(box.clip([5.0, -3.0]), [1.0, 0.0])

    def test_empty_box_rejected(self):
        with pytest.raises(ValueError):
            Box([1.0], [0.0])

    def test_mismatched_bounds_rejected(self):
        with pytest.raises(DimensionError):
            Box([0.0, 1.0], [1.0])

    def test_grid_covers_corners(self):
        box = Box([-1.0], [1.0])
        grid = box.grid(3)
        np.testing.assert_allclose(sorted(grid.ravel()), [-1.0, 0.0, 1.0])


class TestSimulate:
    def test_chua_single_euler_step(self, chua):
        # hand evaluation of one step from the known initial condition
        tr = simulate(chua, [2.0, 0.1, -2.0], [0.45], np.zeros((1, 0)), np.zeros((1, 4)))
        np.testing.assert_allclose(tr.x_seq[1], [1.9616, 0.099, -2.0191], atol=1e-12)

    def test_chua_fields_split(self, chua):
        # drift and parameter channel evaluated separately must recompose
        x = np.array([2.0, 0.1, -2.0])
        drift = chua.f(x, NO_U)[0]
        assert drift == pytest.approx(2.4224, abs=1e-12)
        par = (chua.G(x, NO_U) @ np.array([0.45]))[0]
        assert par == pytest.approx(-0.4608, abs=1e-12)
        assert drift + par == pytest.approx(1.9616, abs=1e-12)

    def test_chua_dimensions(self, chua):
        assert (chua.n, chua.m, chua.q, chua.p, chua.o) == (3, 0, 4, 1, 1)
        np.testing.assert_allclose(chua.Theta.lower, [0.2])
        np.testing.assert_allclose(chua.Theta.upper, [0.8])

    def test_zero_length_run(self, chua):
        tr = simulate(chua, [2.0, 0.1, -2.0], [0.45], np.zeros((0, 0)), np.zeros((0, 4)))
        assert tr.x_seq.shape == (1, 3)
        assert tr.y_seq.shape == (0, 1)
        assert tr.u_seq.shape == (0, 0)

    def test_linear_geometric_decay(self):
        model = make_scalar_model(a=0.5)
        tr = simulate(model, [1.0], [0.0], np.zeros((2, 0)), np.zeros((2, 1)))
        np.testing.assert_allclose(tr.x_seq.ravel(), [1.0, 0.5, 0.25], atol=1e-14)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflow_raises_with_time_index(self):
        model = make_scalar_model(a=10.0, x_bound=1e300)
        with pytest.raises(NumericOverflowError):
            simulate(model, [1.0], [0.0], np.zeros((500, 0)), np.zeros((500, 1)))

    def test_box_departure_logged_not_fatal(self):
        model = make_scalar_model(a=2.0, x_bound=1.5)
        tr = simulate(model, [1.0], [0.0], np.zeros((2, 0)), np.zeros((2, 1)))
        assert tr.left_X  # state exits X but the run completes
        np.testing.assert_allclose(tr.x_seq.ravel(), [1.0, 2.0, 4.0])

    def test_determinism(self, chua):
        rng = np.random.Generator(np.random.Philox(7))
        d = rng.uniform(-1e-3, 1e-3, (50, 4))
        a = simulate(chua, [2.0, 0.1, -2.0], [0.45], np.zeros((50, 0)), d)
        b = simulate(chua, [2.0, 0.1, -2.0], [0.45], np.zeros((50, 0)), d)
        np.testing.assert_array_equal(a.x_seq, b.x_seq)
        np.testing.assert_array_equal(a.y_seq, b.y_seq)


class TestAsSequence:
    def test_zero_width(self):
        out = as_sequence([np.zeros(0)] * 3, 0, length=3)
        assert out.shape == (3, 0)

    def test_regular(self):
        out = as_sequence([[1.0], [2.0]], 1)
        assert out.shape == (2, 1)


class TestMeanValueJacobians:
    def test_linear_dynamics_constant_A(self):
        model = make_scalar_model(a=0.7)
        A = mean_value_A(model, [3.0], [-2.0], NO_U)
        np.testing.assert_allclose(A, [[0.7]], atol=1e-14)

    def test_quadratic_closed_form(self):
        # f(x) = x^2 has averaged slope x + x_tilde
        model = make_scalar_model(f=lambda x: x**2, fx=lambda x: 2 * x)
        A = mean_value_A(model, [1.0], [0.0], NO_U)
        np.testing.assert_allclose(A, [[1.0]], atol=1e-14)
        # exactness: f(1) - f(0) = A (1 - 0)
        assert (1.0 - 0.0) * A[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_degenerate_segment_is_pointwise_jacobian(self, chua):
        x = np.array([1.0, 0.2, -1.0])
        A = mean_value_A(chua, x, x, NO_U)
        np.testing.assert_allclose(
            A, chua.fx_jac(x, NO_U) + chua.Gx_jac(x, NO_U, np.zeros(1)), atol=1e-12
        )

    def test_cubic_parameter_channel(self):
        model = make_scalar_model(a=0.0, g=lambda x: x**3)
        Gm = mean_value_G(model, [1.0], [0.0], NO_U, [2.0])
        np.testing.assert_allclose(Gm, [[2.0]], atol=1e-12)

    def test_constant_G_gives_zero(self):
        model = make_scalar_model(a=0.0, g=lambda x: 1.0)
        Gm = mean_value_G(model, [3.0], [-1.0], NO_U, [5.0])
        np.testing.assert_allclose(Gm, [[0.0]], atol=1e-10)

    def test_zero_theta_gives_zero(self):
        model = make_scalar_model(a=0.0, g=lambda x: x**3)
        Gm = mean_value_G(model, [1.0], [-1.0], NO_U, [0.0])
        np.testing.assert_allclose(Gm, [[0.0]], atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_mean_value_identities_random(self, seed):
        # both factorizations must be exact on the polynomial circuit model
        chua = chua_model()
        rng = np.random.Generator(np.random.Philox(seed))
        x = chua.X.sample(rng)
        xt = chua.X.sample(rng)
        th = chua.Theta.sample(rng)
        A = mean_value_A(chua, x, xt, NO_U)
        lhs = chua.f(x, NO_U) - chua.f(xt, NO_U)
        np.testing.assert_allclose(A @ (x - xt), lhs, rtol=1e-10, atol=1e-12)
        Gm = mean_value_G(chua, x, xt, NO_U, th)
        np.testing.assert_allclose(
            Gm @ (x - xt),
            (chua.G(x, NO_U) - chua.G(xt, NO_U)) @ th,
            rtol=1e-10,
            atol=1e-12,
        )
