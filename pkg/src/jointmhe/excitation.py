"""Excitation recursions and the time-varying joint Lyapunov value.

The Y recursion propagates the parameter-sensitivity matrix along a
trajectory pair; the S recursion accumulates its output energy with a
forgetting factor. Together with the certificate they define the
(n+o)x(n+o) block matrix M_t whose quadratic form is the joint
state/parameter Lyapunov value. Window checks on the accumulated output
Gram sum and on the generalized-eigenvalue ratio of M matrices provide
the runtime substitutes for a-priori excitation constants.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .certificate import DetectabilityCertificate, phi
from .errors import (
    ContractViolationError,
    DimensionError,
    InsufficientHistoryError,
    InvalidCertificateError,
)
from .model import SystemModel

__all__ = [
    "PeConfig",
    "ExcitationState",
    "step_Y",
    "step_S",
    "m_matrix",
    "lyapunov_value",
    "pe_window_check",
    "kappa_check",
    "sigma_bounds",
]


@dataclass(frozen=True)
class PeConfig:
    """Initial data and window parameters for the excitation recursions."""

    Y0: np.ndarray  # (n, o)
    S0: np.ndarray  # (o, o), symmetric, S0 > alpha I
    eta: float
    alpha: float
    T: int

    def __post_init__(self):
        Y0 = np.atleast_2d(np.asarray(self.Y0, dtype=float))
        S0 = np.atleast_2d(np.asarray(self.S0, dtype=float))
        object.__setattr__(self, "Y0", Y0)
        object.__setattr__(self, "S0", S0)
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie strictly in (0, 1)")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.T < 1:
            raise ValueError("T must be a positive integer")
        if not np.allclose(S0, S0.T, atol=1e-12):
            raise ValueError("S0 must be symmetric")
        if np.linalg.eigvalsh(S0)[0] <= self.alpha:
            raise ValueError("S0 must exceed alpha * I in the definite order")


class ExcitationState:
    """Single-owner mutable recursion state.

    Holds Y_t and S_t at a common time index plus a ring of the last T
    output-sensitivity products C Y_j (pre-update values, as the S
    recursion consumes them). ``step_S`` may lag ``step_Y`` by at most one
    index and never lead it.
    """

    def __init__(self, config: PeConfig):
        self.config = config
        self.Y = config.Y0.copy()
        self.S = config.S0.copy()
        self.t_y = 0
        self.t_s = 0
        self._pending_CY: np.ndarray | None = None
        self.window: deque[np.ndarray] = deque(maxlen=config.T)

    @property
    def t(self) -> int:
        return min(self.t_y, self.t_s)


def step_Y(
    state: ExcitationState,
    cert: DetectabilityCertificate,
    model: SystemModel,
    x,
    x_tilde,
    u,
) -> ExcitationState:
    """Advance Y one step: Y <- Phi(x, xt, u) Y + G(xt, u).

    Stashes C Y_t so the S recursion can consume the pre-update value.
    """
    if state.t_y != state.t_s:
        raise ContractViolationError("step_S must catch up before the next step_Y")
    Phi = phi(cert, model, x, x_tilde, u)
    state._pending_CY = model.C @ state.Y
    state.Y = Phi @ state.Y + model.G(np.asarray(x_tilde, dtype=float), u)
    state.t_y += 1
    return state


def step_S(state: ExcitationState) -> ExcitationState:
    """Advance S one step: S <- eta S + Y_t^T C^T C Y_t (pre-update Y)."""
    if state.t_s >= state.t_y or state._pending_CY is None:
        raise ContractViolationError("step_Y must run before step_S at each index")
    CY = state._pending_CY
    state.S = state.config.eta * state.S + CY.T @ CY
    state.window.append(CY)
    state._pending_CY = None
    state.t_s += 1
    return state


def step(state, cert, model, x, x_tilde, u) -> ExcitationState:
    """Convenience: one full (Y, S) update."""
    step_Y(state, cert, model, x, x_tilde, u)
    return step_S(state)


def m_matrix(state: ExcitationState, cert: DetectabilityCertificate) -> np.ndarray:
    """Block matrix [[P, -P Y], [-Y^T P, Y^T P Y + a S]] at the current index."""
    return m_matrix_from(cert.P, state.Y, cert.a, state.S)


def m_matrix_from(P: np.ndarray, Y: np.ndarray, a: float, S: np.ndarray) -> np.ndarray:
    PY = P @ Y
    return np.block([[P, -PY], [-PY.T, Y.T @ PY + a * S]])


def lyapunov_value(
    state: ExcitationState,
    cert: DetectabilityCertificate,
    x,
    x_tilde,
    theta,
    theta_tilde,
) -> float:
    """Joint quadratic value of the state/parameter difference.

    Computed both through the block matrix M_t and through the filtered
    coordinates z = x - Y theta; the two must agree to 1e-9 relative.
    """
    dx = np.asarray(x, dtype=float) - np.asarray(x_tilde, dtype=float)
    dth = np.atleast_1d(np.asarray(theta, dtype=float)) - np.atleast_1d(
        np.asarray(theta_tilde, dtype=float)
    )
    if dx.shape[0] != state.Y.shape[0] or dth.shape[0] != state.Y.shape[1]:
        raise DimensionError("state/parameter dimensions inconsistent with Y")
    e = np.concatenate([dx, dth])
    M = m_matrix(state, cert)
    u_block = float(e @ M @ e)
    dz = dx - state.Y @ dth
    u_z = float(dz @ cert.P @ dz + cert.a * dth @ state.S @ dth)
    if abs(u_block - u_z) > 1e-9 * max(1.0, abs(u_z)):
        raise AssertionError(
            f"block/transformed Lyapunov values disagree: {u_block} vs {u_z}"
        )
    return max(u_z, 0.0)


def pe_window_check(state: ExcitationState, alpha: float) -> tuple[bool, float]:
    """Smallest eigenvalue of the windowed output Gram sum vs alpha."""
    T = state.config.T
    if len(state.window) < T:
        raise InsufficientHistoryError(
            f"need {T} recorded steps, have {len(state.window)}"
        )
    o = state.Y.shape[1]
    gram = np.zeros((o, o))
    for CY in state.window:
        gram += CY.T @ CY
    lam_min = float(np.linalg.eigvalsh(gram)[0])
    return lam_min >= alpha, lam_min


def kappa_check(M0: np.ndarray, M_end: np.ndarray, kappa: float) -> tuple[bool, float]:
    """Maximum generalized eigenvalue of the (M0, M_end) pencil vs kappa."""
    for name, M in (("M0", M0), ("M_end", M_end)):
        M = np.asarray(M, dtype=float)
        try:
            np.linalg.cholesky(0.5 * (M + M.T))
        except np.linalg.LinAlgError:
            raise InvalidCertificateError(f"{name} is not positive definite")
    val = float(sla.eigh(M0, M_end, eigvals_only=True)[-1])
    return val <= kappa, val


def sigma_bounds(pe: PeConfig, beta: float) -> tuple[float, float]:
    """Uniform eigenvalue bounds for S_t under the window condition.

    ``beta`` must upper-bound the output-sensitivity norm along the run
    (callers typically pass the inflated empirical maximum of ||C Y_t||).
    """
    sigma1 = pe.eta ** (pe.T - 1) * pe.alpha
    sigma2 = float(np.linalg.norm(pe.S0, 2)) + pe.eta / (1.0 - pe.eta) * beta**2
    return sigma1, sigma2
