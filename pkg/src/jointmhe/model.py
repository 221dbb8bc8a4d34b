"""Parameter-affine discrete-time system models.

The system class handled throughout the package is

    x[t+1] = f(x[t], u[t]) + G(x[t], u[t]) @ theta + E @ d[t]
    y[t]   = C @ x[t] + F @ d[t]

with a constant unknown parameter vector ``theta`` confined to a box.
Besides simulation, this module provides the segment-averaged Jacobians
that turn differences of two trajectories into exact linear factors
(mean value theorem applied along the straight segment between the two
states), which the detectability machinery relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericOverflowError

__all__ = [
    "Box",
    "SystemModel",
    "Trajectory",
    "simulate",
    "chua_model",
    "mean_value_A",
    "mean_value_G",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by componentwise lower/upper bounds."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError("box bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("empty box: lower > upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, v, atol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - atol) and np.all(v <= self.upper + atol))

    def clip(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if size is None:
            return rng.uniform(self.lower, self.upper)
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))

    def axis_grids(self, density: int) -> list[np.ndarray]:
        """Per-axis uniform grids with ``density`` points (incl. endpoints)."""
        if self.dim == 0:
            return []
        return [np.linspace(lo, hi, density) for lo, hi in zip(self.lower, self.upper)]

    def grid(self, density: int) -> np.ndarray:
        """All grid points of the box as rows; a single zero-width row if dim 0."""
        axes = self.axis_grids(density)
        if not axes:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class SystemModel:
    """Parameter-affine system with linear output map.

    ``f`` and ``G`` carry the nonlinear dynamics; ``fx_jac`` and ``Gx_jac``
    are their analytic state Jacobians (``Gx_jac`` differentiates
    ``G(x, u) @ theta`` for a fixed ``theta``). Input-free systems use
    ``m = 0`` with zero-length input vectors.
    """

    n: int
    m: int
    q: int
    p: int
    o: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    G: Callable[[np.ndarray, np.ndarray], np.ndarray]
    fx_jac: Callable[[np.ndarray, np.ndarray], np.ndarray]
    Gx_jac: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    E: np.ndarray
    C: np.ndarray
    F: np.ndarray
    X: Box
    U: Box
    D: Box
    Theta: Box
    name: str = "custom"

    def __post_init__(self):
        E = np.atleast_2d(np.asarray(self.E, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "F", F)
        if E.shape != (self.n, self.q):
            raise DimensionError(f"E must be {self.n}x{self.q}, got {E.shape}")
        if C.shape != (self.p, self.n):
            raise DimensionError(f"C must be {self.p}x{self.n}, got {C.shape}")
        if F.shape != (self.p, self.q):
            raise DimensionError(f"F must be {self.p}x{self.q}, got {F.shape}")
        for box, dim, label in (
            (self.X, self.n, "X"),
            (self.U, self.m, "U"),
            (self.D, self.q, "D"),
            (self.Theta, self.o, "Theta"),
        ):
            if box.dim != dim:
                raise DimensionError(f"box {label} has dim {box.dim}, expected {dim}")
        if not np.all(np.isfinite(self.Theta.lower)) or not np.all(
            np.isfinite(self.Theta.upper)
        ):
            raise ValueError("Theta must be bounded")

    def dynamics(self, x, u, theta, d) -> np.ndarray:
        """One transition: f + G theta + E d."""
        x = np.asarray(x, dtype=float)
        step = self.f(x, u) + self.G(x, u) @ np.atleast_1d(theta)
        if self.q:
            step = step + self.E @ np.asarray(d, dtype=float)
        return step

    def output(self, x, d) -> np.ndarray:
        y = self.C @ np.asarray(x, dtype=float)
        if self.q:
            y = y + self.F @ np.asarray(d, dtype=float)
        return y


@dataclass(frozen=True)
class Trajectory:
    """A simulated run: K transitions, K+1 states."""

    x_seq: np.ndarray  # (K+1, n)
    u_seq: np.ndarray  # (K, m)
    d_seq: np.ndarray  # (K, q)
    y_seq: np.ndarray  # (K, p)
    theta: np.ndarray  # (o,)
    left_X: tuple[int, ...] = field(default=())  # times at which the state left X

    @property
    def K(self) -> int:
        return self.x_seq.shape[0] - 1


def as_sequence(seq, width: int, length: int | None = None) -> np.ndarray:
    """Coerce a sequence of vectors to shape (K, width); handles width 0."""
    a = np.asarray(seq, dtype=float)
    if width == 0:
        if length is None:
            length = a.shape[0] if a.ndim >= 1 else 0
        return np.zeros((length, 0))
    return a.reshape(-1, width)


def simulate(model: SystemModel, x0, theta, u_seq, d_seq) -> Trajectory:
    """Simulate ``K = len(u_seq)`` transitions of the model.

    States leaving the box X are recorded in ``left_X`` but not corrected.
    Raises :class:`NumericOverflowError` if a non-finite state appears.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d_seq = as_sequence(d_seq, model.q)
    u_seq = as_sequence(u_seq, model.m, length=d_seq.shape[0])
    if x0.shape != (model.n,):
        raise DimensionError(f"x0 must have length {model.n}")
    if theta.shape != (model.o,):
        raise DimensionError(f"theta must have length {model.o}")
    if u_seq.shape[0] != d_seq.shape[0]:
        raise DimensionError("u_seq and d_seq must have equal length")
    K = u_seq.shape[0]

    x_seq = np.empty((K + 1, model.n))
    y_seq = np.empty((K, model.p))
    x_seq[0] = x0
    left = []
    for t in range(K):
        y_seq[t] = model.output(x_seq[t], d_seq[t])
        x_next = model.dynamics(x_seq[t], u_seq[t], theta, d_seq[t])
        if not np.all(np.isfinite(x_next)):
            raise NumericOverflowError(t)
        if not model.X.contains(x_next):
            left.append(t + 1)
        x_seq[t + 1] = x_next
    return Trajectory(
        x_seq=x_seq,
        u_seq=u_seq,
        d_seq=d_seq,
        y_seq=y_seq,
        theta=theta,
        left_X=tuple(left),
    )


def chua_model() -> SystemModel:
    """Euler-discretized modified Chua circuit with the cubic coefficient unknown.

    Step size 0.01; the scalar parameter multiplies the cubic term of the
    first state. Only the first state is measured; the first three
    disturbance components act on the states and the fourth on the output.
    """
    t_delta = 0.01
    b1, b2 = 12.8, 19.1
    a1, a2 = 0.6, -1.1

    def f(x, u):
        x1, x2, x3 = x
        return np.array(
            [
                x1 + t_delta * b1 * (x2 - a1 * x1 - a2 * x1 * x1),
                x2 + t_delta * (x1 - x2 + x3),
                x3 - t_delta * b2 * x2,
            ]
        )

    def G(x, u):
        return np.array([[-t_delta * b1 * x[0] ** 3], [0.0], [0.0]])

    def fx_jac(x, u):
        return np.array(
            [
                [1.0 + t_delta * b1 * (-a1 - 2.0 * a2 * x[0]), t_delta * b1, 0.0],
                [t_delta, 1.0 - t_delta, t_delta],
                [0.0, -t_delta * b2, 1.0],
            ]
        )

    def Gx_jac(x, u, theta):
        j = np.zeros((3, 3))
        j[0, 0] = -3.0 * t_delta * b1 * float(np.atleast_1d(theta)[0]) * x[0] ** 2
        return j

    return SystemModel(
        n=3,
        m=0,
        q=4,
        p=1,
        o=1,
        f=f,
        G=G,
        fx_jac=fx_jac,
        Gx_jac=Gx_jac,
        E=np.hstack([np.eye(3), np.zeros((3, 1))]),
        C=np.array([[1.0, 0.0, 0.0]]),
        F=np.array([[0.0, 0.0, 0.0, 1.0]]),
        X=Box(np.array([-5.0, -1.0, -3.0]), np.array([5.0, 1.0, 3.0])),
        U=Box(np.zeros(0), np.zeros(0)),
        D=Box(
            np.array([-1e-3, -1e-3, -1e-3, -0.1]),
            np.array([1e-3, 1e-3, 1e-3, 0.1]),
        ),
        Theta=Box(np.array([0.2]), np.array([0.8])),
        name="chua",
    )


def _gauss_legendre_01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights transplanted to [0, 1]."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def mean_value_A(model: SystemModel, x, x_tilde, u, order: int = 3) -> np.ndarray:
    """Segment-averaged state Jacobian of ``f`` between ``x_tilde`` and ``x``.

    Satisfies f(x,u) - f(x_tilde,u) = A @ (x - x_tilde) exactly for
    polynomial dynamics of sufficiently low degree (order-3 quadrature is
    exact up to integrand degree 5).
    """
    x = np.asarray(x, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    if x.shape != (model.n,) or x_tilde.shape != (model.n,):
        raise DimensionError(f"states must have length {model.n}")
    nodes, weights = _gauss_legendre_01(order)
    A = np.zeros((model.n, model.n))
    for s, w in zip(nodes, weights):
        A += w * model.fx_jac(x_tilde + s * (x - x_tilde), u)
    return A


def mean_value_G(
    model: SystemModel, x, x_tilde, u, theta, order: int = 3
) -> np.ndarray:
    """Segment-averaged state Jacobian of ``G(x,u) @ theta``.

    Satisfies (G(x,u) - G(x_tilde,u)) @ theta = Gm @ (x - x_tilde) to
    quadrature accuracy.
    """
    x = np.asarray(x, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    if x.shape != (model.n,) or x_tilde.shape != (model.n,):
        raise DimensionError(f"states must have length {model.n}")
    nodes, weights = _gauss_legendre_01(order)
    Gm = np.zeros((model.n, model.n))
    for s, w in zip(nodes, weights):
        Gm += w * model.Gx_jac(x_tilde + s * (x - x_tilde), u, theta)
    return Gm
