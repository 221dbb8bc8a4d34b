"""Shared fixtures: the built-in chaotic-circuit model and its certificate.

The certificate synthesis takes ~10 s, so it runs once per session and is
shared by every test that needs realistic weights.
"""

import numpy as np
import pytest

_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    """Collect a one-line verdict to echo in the terminal summary."""
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)

from jointmhe.certificate import build_certificate
from jointmhe.model import Box, SystemModel, chua_model


@pytest.fixture(scope="session")
def chua():
    return chua_model()


@pytest.fixture(scope="session")
def chua_cert(chua):
    return build_certificate(
        chua, target_mu=0.9, eta=0.911, eps1=1e-3, eps2=1e-3, grid_density=5
    )


def make_scalar_model(
    a: float = 0.5,
    g=None,
    f=None,
    fx=None,
    E=1.0,
    C=1.0,
    F=0.0,
    x_bound: float = 10.0,
    d_bound: float = 10.0,
    theta_box=(-10.0, 10.0),
    name: str = "scalar",
) -> SystemModel:
    """One-state, one-parameter test system x+ = f(x) + g(x) theta + E d.

    Defaults to the linear drift f(x) = a x; pass ``f``/``fx`` (scalar
    callables) for nonlinear drifts.
    """
    if g is None:
        g = lambda x: 0.0  # noqa: E731
    if f is None:
        f = lambda x: a * x  # noqa: E731
        fx = lambda x: a  # noqa: E731
    q = np.atleast_2d(np.asarray(E, dtype=float)).shape[1]
    return SystemModel(
        n=1,
        m=0,
        q=q,
        p=1,
        o=1,
        f=lambda x, u: np.array([float(f(x[0]))]),
        G=lambda x, u: np.array([[float(g(x[0]))]]),
        fx_jac=lambda x, u: np.array([[float(fx(x[0]))]]),
        Gx_jac=lambda x, u, th: np.array(
            [[(g(x[0] + 1e-6) - g(x[0] - 1e-6)) / 2e-6 * th[0]]]
        ),
        E=np.atleast_2d(E),
        C=np.atleast_2d(C),
        F=np.atleast_2d(F),
        X=Box([-x_bound], [x_bound]),
        U=Box(np.zeros(0), np.zeros(0)),
        D=Box([-d_bound] * q, [d_bound] * q),
        Theta=Box([theta_box[0]], [theta_box[1]]),
        name=name,
    )
