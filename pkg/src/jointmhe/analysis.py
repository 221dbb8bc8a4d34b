"""Post-run diagnostics: error metrics, envelope constants, decrease checks.

Everything here is a pure function of stored run logs, so re-running on
the same data reproduces identical verdicts.

A note on contraction readings: the N-step decrease bound can be read
with per-block factor rho (consistent with the per-step rates rho1 =
sqrt(rho), rho2 = rho**(1/4) interpreted per horizon block) or with the
much stronger factor rho**N. Both are computed; callers gate on the
weaker one. The error envelope correspondingly supports a "per-block"
exponent t/N (the reading consistent with the N-step bound) and the
"literal" per-step exponent t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .certificate import DetectabilityCertificate
from .errors import DimensionError, InsufficientHistoryError
from .excitation import PeConfig, m_matrix_from
from .model import SystemModel, Trajectory

__all__ = [
    "ErrorReport",
    "RgesConstants",
    "error_series",
    "rges_constants",
    "rges_envelope_check",
    "nstep_decrease_check",
    "replay_excitation",
]


@dataclass
class ErrorReport:
    """Per-time combined estimation error with optional normalization data."""

    e_x: np.ndarray  # (K+1, n)
    e_theta: np.ndarray  # (K+1, o)
    e_norm: np.ndarray  # (K+1,)

    @property
    def e_combined(self) -> np.ndarray:
        return np.hstack([self.e_x, self.e_theta])

    def normalized(self) -> np.ndarray:
        """Component errors scaled to unity at time zero (zero stays zero)."""
        e = self.e_combined
        scale = np.abs(e[0])
        scale[scale == 0] = 1.0
        return e / scale


@dataclass(frozen=True)
class RgesConstants:
    rho: float
    rho1: float
    rho2: float
    c1: float
    c2: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")


def error_series(truth: Trajectory, x_hats, theta_hats) -> ErrorReport:
    """Componentwise differences between the true run and the estimates."""
    x_hats = np.asarray(x_hats, dtype=float)
    theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=float))
    if x_hats.shape != truth.x_seq.shape:
        raise DimensionError("estimate series misaligned with truth states")
    if theta_hats.shape[0] != truth.x_seq.shape[0]:
        raise DimensionError("parameter estimate series misaligned with truth")
    e_x = truth.x_seq - x_hats
    e_th = truth.theta[None, :] - theta_hats
    e_norm = np.sqrt(np.sum(e_x**2, axis=1) + np.sum(e_th**2, axis=1))
    return ErrorReport(e_x=e_x, e_theta=e_th, e_norm=e_norm)


def rges_constants(
    Mbar: np.ndarray,
    Munder: np.ndarray,
    Q: np.ndarray,
    lam: float,
    N: int,
    kappa: float | None = None,
) -> RgesConstants:
    """Envelope constants from the weight extremes and the horizon.

    ``kappa`` (online mode) replaces the generalized eigenvalue of the
    (Mbar, Munder) pencil inside rho.
    """
    Mbar = np.atleast_2d(np.asarray(Mbar, dtype=float))
    Munder = np.atleast_2d(np.asarray(Munder, dtype=float))
    if kappa is not None:
        gev = float(kappa)
    else:
        gev = float(sla.eigh(Mbar, Munder, eigvals_only=True)[-1])
    rho = 4.0 * gev * lam**N
    if rho >= 1.0:
        raise ValueError(f"horizon too short: rho = {rho:.4f} >= 1")
    lmin_under = float(np.linalg.eigvalsh(Munder)[0])
    lmax_bar = float(np.linalg.eigvalsh(Mbar)[-1])
    lmax_Q = float(np.linalg.eigvalsh(np.atleast_2d(np.asarray(Q, dtype=float)))[-1])
    c1 = 4.0 * np.sqrt(lmax_bar / lmin_under)
    c2 = 4.0 / (1.0 - rho**0.25) * np.sqrt(lmax_Q / lmin_under)
    return RgesConstants(
        rho=rho, rho1=np.sqrt(rho), rho2=rho**0.25, c1=c1, c2=c2
    )


def rges_envelope_check(
    e_norm: np.ndarray,
    constants: RgesConstants,
    d_seq: np.ndarray,
    N: int | None = None,
    rate_mode: str = "per-block",
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the exponential-decay/fading-memory envelope at every time.

    Returns (envelope values, pass flags). ``per-block`` scales the decay
    exponents by 1/N; ``literal`` uses the per-step exponents as printed.
    """
    if rate_mode not in ("per-block", "literal"):
        raise ValueError("rate_mode must be per-block or literal")
    if rate_mode == "per-block" and not N:
        raise ValueError("per-block mode needs the horizon length N")
    scale = 1.0 / N if rate_mode == "per-block" else 1.0
    e_norm = np.asarray(e_norm, dtype=float)
    d_norm = np.linalg.norm(np.atleast_2d(np.asarray(d_seq, dtype=float)), axis=1)
    K = e_norm.size - 1
    env = np.empty(K + 1)
    env[0] = constants.c1 * e_norm[0]
    for t in range(1, K + 1):
        decay = constants.c1 * constants.rho1 ** (t * scale) * e_norm[0]
        j = np.arange(1, t + 1)
        dist = constants.c2 * constants.rho2 ** ((j - 1) * scale) * d_norm[t - j]
        env[t] = max(decay, dist.max(initial=0.0))
    return env, e_norm <= env + 1e-12


def replay_excitation(
    model: SystemModel,
    cert: DetectabilityCertificate,
    pe: PeConfig,
    x_seq: np.ndarray,
    x_tilde_seq: np.ndarray,
    u_seq: np.ndarray,
    steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the Y/S recursions for ``steps`` steps along a trajectory pair.

    Returns the final (Y, S). Uses the certificate gain pointwise, so it
    works for constant and state-dependent Phi alike.
    """
    from .certificate import phi as phi_fn

    Y = pe.Y0.copy()
    S = pe.S0.copy()
    for j in range(steps):
        CY = model.C @ Y
        S = pe.eta * S + CY.T @ CY
        Phi = phi_fn(cert, model, x_seq[j], x_tilde_seq[j], u_seq[j])
        Y = Phi @ Y + model.G(np.asarray(x_tilde_seq[j], dtype=float), u_seq[j])
    return Y, S


@dataclass
class DecreaseRow:
    t: int
    lhs: float
    rhs_block: float  # per-block factor rho
    rhs_printed: float  # factor rho**N
    disturbance_term: float
    pass_block: bool = field(init=False)
    pass_printed: bool = field(init=False)

    def __post_init__(self):
        tol = 1e-9 * max(1.0, abs(self.rhs_block))
        self.pass_block = self.lhs <= self.rhs_block + tol
        self.pass_printed = self.lhs <= self.rhs_printed + tol


def nstep_decrease_check(
    model: SystemModel,
    truth: Trajectory,
    x_hats: np.ndarray,
    theta_hats: np.ndarray,
    cert: DetectabilityCertificate,
    pe: PeConfig,
    constants: RgesConstants,
    N: int,
) -> list[DecreaseRow]:
    """Two-sided evaluation of the N-step Lyapunov decrease on a finished run.

    For each t >= 2N the horizon-end value of the joint quadratic form is
    reconstructed by replaying the excitation recursions over the window
    [t - N, t) along the true-vs-estimated pair, and compared against the
    decayed value one horizon earlier plus the discounted disturbance sum.
    """
    x_hats = np.asarray(x_hats, dtype=float)
    theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=float))
    K = truth.x_seq.shape[0] - 1
    if K < 2 * N:
        raise InsufficientHistoryError(f"run must cover at least {2 * N} steps")
    lam = cert.lam
    Q = cert.Q

    def w_value(t: int) -> float:
        Y, S = replay_excitation(
            model=model,
            cert=cert,
            pe=pe,
            x_seq=truth.x_seq[t - N : t],
            x_tilde_seq=x_hats[t - N : t],
            u_seq=truth.u_seq[t - N : t],
            steps=N,
        )
        M = m_matrix_from(cert.P, Y, cert.a, S)
        e = np.concatenate(
            [truth.x_seq[t] - x_hats[t], truth.theta - theta_hats[t]]
        )
        return float(e @ M @ e)

    rows = []
    for t in range(2 * N, K + 1):
        lhs = w_value(t)
        w_prev = w_value(t - N)
        j = np.arange(1, N + 1)
        d_terms = np.einsum(
            "ji,ik,jk->j", truth.d_seq[t - N : t][::-1], Q, truth.d_seq[t - N : t][::-1]
        )
        dist = 4.0 * float(np.sum(lam ** (j - 1) * d_terms))
        rows.append(
            DecreaseRow(
                t=t,
                lhs=lhs,
                rhs_block=constants.rho * w_prev + dist,
                rhs_printed=constants.rho**N * w_prev + dist,
                disturbance_term=dist,
            )
        )
    return rows
