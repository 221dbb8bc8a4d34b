"""Moving-horizon joint state/parameter estimation.

At each time t the estimator solves a box-constrained nonlinear least
squares problem over the initial window state, the parameter vector, and
the disturbance sequence, with a discounted stage cost and a prior term
anchored at the estimate made one horizon ago. The solver is a projected
Levenberg-Marquardt iteration on the square-root-weighted residual, with
analytic Jacobians obtained by forward sensitivity propagation along the
single-shooting rollout.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .certificate import DetectabilityCertificate, phi
from .errors import ContractViolationError, DimensionError, NotApplicableError
from .excitation import PeConfig, kappa_check, m_matrix_from
from .model import SystemModel, as_sequence

__all__ = [
    "SolverConfig",
    "MheConfig",
    "SolveDiagnostics",
    "StepRecord",
    "MheEstimator",
    "cost",
    "solve",
]


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-14
    cost_tolerance: float = 1e-3
    damping_init: float = 1e-3
    derivative_mode: str = "analytic"  # or "finite-difference"

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0 or self.cost_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.derivative_mode not in ("analytic", "finite-difference"):
            raise ValueError("derivative_mode must be analytic or finite-difference")


@dataclass(frozen=True)
class MheConfig:
    """Horizon, weights, and mode selection for the estimator."""

    N: int
    lam: float
    Q: np.ndarray
    R: np.ndarray
    kappa: float | None = None
    alpha: float | None = None
    gamma_mode: str = "online-M0"  # or "fixed-Mbar"
    Mbar: np.ndarray | None = None
    Munder: np.ndarray | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    penalty_weight: float | None = None
    n_starts: int = 0
    # hold the parameter estimate whenever the last windowed excitation
    # measure fell below this level (None disables the guard)
    theta_freeze_threshold: float | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be positive")
        if self.theta_freeze_threshold is not None and self.theta_freeze_threshold <= 0:
            raise ValueError("theta_freeze_threshold must be positive")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")
        if self.gamma_mode not in ("online-M0", "fixed-Mbar"):
            raise ValueError("gamma_mode must be online-M0 or fixed-Mbar")
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        if self.gamma_mode == "online-M0":
            if self.kappa is None:
                raise ValueError("online-M0 mode requires kappa")
            if 4.0 * self.kappa * self.lam**self.N >= 1.0:
                raise ValueError(
                    "horizon too short: 4 kappa lam^N must be below one"
                )
        else:
            if self.Mbar is None:
                raise ValueError("fixed-Mbar mode requires Mbar")
            if self.Munder is not None:
                rho = (
                    4.0
                    * float(sla.eigh(self.Mbar, self.Munder, eigvals_only=True)[-1])
                    * self.lam**self.N
                )
                if rho >= 1.0:
                    raise ValueError("horizon too short: 4 lmax(Mbar,Munder) lam^N >= 1")

    def resolved_penalty_weight(self) -> float:
        if self.penalty_weight is not None:
            return self.penalty_weight
        return 1e3 * float(np.linalg.eigvalsh(self.R)[-1])


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    cost: float = np.inf
    grad_norm: float = np.inf
    converged: bool = False
    constraint_violation: float = 0.0
    multistart_improved: bool = False
    note: str = ""


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


class _WindowProblem:
    """Residual/Jacobian assembly for one horizon window."""

    def __init__(
        self,
        model: SystemModel,
        config: MheConfig,
        prior: tuple[np.ndarray, np.ndarray],
        u_win: np.ndarray,
        y_win: np.ndarray,
        Gamma: np.ndarray,
    ):
        self.model = model
        self.config = config
        n, o, q, p = model.n, model.o, model.q, model.p
        self.Nt = u_win.shape[0]
        if y_win.shape[0] != self.Nt:
            raise DimensionError("input and output windows must have equal length")
        self.u_win = u_win
        self.y_win = y_win
        self.prior = np.concatenate(
            [np.asarray(prior[0], dtype=float), np.atleast_1d(np.asarray(prior[1], dtype=float))]
        )
        self.nv = n + o + self.Nt * q
        # discount per window position i (absolute time t - Nt + i): lam^(Nt-1-i)
        self.disc = config.lam ** np.arange(self.Nt - 1, -1, -1, dtype=float)
        self.sqrtQ = _psd_sqrt(config.Q)
        self.sqrtR = _psd_sqrt(config.R)
        self.sqrtGamma = _psd_sqrt(Gamma)
        self.prior_scale = np.sqrt(2.0 * config.lam**self.Nt)
        self.pen_w = np.sqrt(config.resolved_penalty_weight())
        self.lb = np.concatenate(
            [model.X.lower, model.Theta.lower, np.tile(model.D.lower, self.Nt)]
        )
        self.ub = np.concatenate(
            [model.X.upper, model.Theta.upper, np.tile(model.D.upper, self.Nt)]
        )

    def split(self, v: np.ndarray):
        n, o, q = self.model.n, self.model.o, self.model.q
        return (
            v[:n],
            v[n : n + o],
            v[n + o :].reshape(self.Nt, q),
        )

    def rollout(self, v: np.ndarray) -> np.ndarray:
        m = self.model
        x0, th, d = self.split(v)
        xs = np.empty((self.Nt + 1, m.n))
        xs[0] = x0
        for i in range(self.Nt):
            xs[i + 1] = m.f(xs[i], self.u_win[i]) + m.G(xs[i], self.u_win[i]) @ th
            if m.q:
                xs[i + 1] += m.E @ d[i]
        return xs

    def residual(self, v: np.ndarray, xs: np.ndarray | None = None) -> np.ndarray:
        m = self.model
        x0, th, d = self.split(v)
        if xs is None:
            xs = self.rollout(v)
        r_prior = self.prior_scale * (self.sqrtGamma @ (v[: m.n + m.o] - self.prior))
        if self.Nt == 0:
            return r_prior
        y_hat = xs[:-1] @ m.C.T + d @ m.F.T
        r_y = (np.sqrt(self.disc)[:, None] * ((y_hat - self.y_win) @ self.sqrtR.T)).ravel()
        r_d = (np.sqrt(2.0 * self.disc)[:, None] * (d @ self.sqrtQ.T)).ravel()
        # soft box penalty on intermediate states (x0 is hard-bounded)
        xi = xs[1:]
        viol = np.clip(xi - m.X.upper, 0.0, None) + np.clip(xi - m.X.lower, None, 0.0)
        r_pen = self.pen_w * viol.ravel()
        return np.concatenate([r_prior, r_d, r_y, r_pen])

    def residual_and_jacobian(self, v: np.ndarray):
        if self.config.solver.derivative_mode == "finite-difference":
            r = self.residual(v)
            J = self._fd_jacobian(v, r)
            return r, J
        m = self.model
        n, o, q, p = m.n, m.o, m.q, m.p
        x0, th, d = self.split(v)
        Nt, nv = self.Nt, self.nv

        xs = np.empty((Nt + 1, n))
        xs[0] = x0
        # forward sensitivities of each rolled state w.r.t. all decisions
        S = np.zeros((Nt + 1, n, nv))
        S[0, :, :n] = np.eye(n)
        for i in range(Nt):
            u = self.u_win[i]
            Gi = m.G(xs[i], u)
            xs[i + 1] = m.f(xs[i], u) + Gi @ th
            if q:
                xs[i + 1] += m.E @ d[i]
            Ai = m.fx_jac(xs[i], u) + m.Gx_jac(xs[i], u, th)
            S[i + 1] = Ai @ S[i]
            S[i + 1][:, n : n + o] += Gi
            if q:
                S[i + 1][:, n + o + i * q : n + o + (i + 1) * q] += m.E

        r = self.residual(v, xs=xs)
        nr = r.size
        J = np.zeros((nr, nv))
        row = 0
        J[row : row + n + o, : n + o] = self.prior_scale * self.sqrtGamma
        row += n + o
        if Nt:
            wq = np.sqrt(2.0 * self.disc)
            for i in range(Nt):
                J[row : row + q, n + o + i * q : n + o + (i + 1) * q] = (
                    wq[i] * self.sqrtQ
                )
                row += q
            wr = np.sqrt(self.disc)
            CS = np.einsum("pk,ikv->ipv", m.C, S[:-1])
            for i in range(Nt):
                block = self.sqrtR @ CS[i]
                block[:, n + o + i * q : n + o + (i + 1) * q] += self.sqrtR @ m.F
                J[row : row + p] = wr[i] * block
                row += p
            xi = xs[1:]
            active = (xi > m.X.upper) | (xi < m.X.lower)
            for i in range(Nt):
                for k in range(n):
                    if active[i, k]:
                        J[row + i * n + k] = self.pen_w * S[i + 1, k]
            row += Nt * n
        return r, J

    def _fd_jacobian(self, v: np.ndarray, r0: np.ndarray) -> np.ndarray:
        J = np.empty((r0.size, v.size))
        h = 1e-7
        for j in range(v.size):
            step = h * max(1.0, abs(v[j]))
            vp = v.copy()
            vp[j] += step
            vm = v.copy()
            vm[j] -= step
            J[:, j] = (self.residual(vp) - self.residual(vm)) / (2.0 * step)
        return J

    def clip(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lb, self.ub)

    def constraint_violation(self, v: np.ndarray) -> float:
        xs = self.rollout(v)
        xi = xs[1:]
        if xi.size == 0:
            return 0.0
        over = np.clip(xi - self.model.X.upper, 0.0, None)
        under = np.clip(self.model.X.lower - xi, 0.0, None)
        return float(max(over.max(initial=0.0), under.max(initial=0.0)))


def cost(
    model: SystemModel,
    config: MheConfig,
    prior: tuple[np.ndarray, np.ndarray],
    window: tuple[np.ndarray, np.ndarray],
    decision: tuple[np.ndarray, np.ndarray, np.ndarray],
    Gamma: np.ndarray | None = None,
) -> float:
    """Discounted horizon cost of a decision (prior + stage terms).

    The soft state-box penalty is not part of the cost; it only steers the
    solver. ``Gamma`` defaults to ``config.Mbar`` in fixed mode and must be
    passed explicitly otherwise.
    """
    Gamma = _resolve_gamma_static(config, Gamma, model)
    y_win = np.asarray(window[1], dtype=float).reshape(-1, model.p)
    u_win = as_sequence(window[0], model.m, length=y_win.shape[0])
    prob = _WindowProblem(model, config, prior, u_win, y_win, Gamma)
    x0, th, d = decision
    d = as_sequence(d, model.q, length=prob.Nt)
    if d.shape[0] != prob.Nt:
        raise DimensionError("disturbance decision length must match the window")
    v = np.concatenate([np.asarray(x0, dtype=float), np.atleast_1d(th), d.ravel()])
    r = prob.residual(v)
    n_pen = prob.Nt * model.n
    r_cost = r[: r.size - n_pen] if n_pen else r
    return float(r_cost @ r_cost)


def _resolve_gamma_static(config, Gamma, model):
    if Gamma is not None:
        return np.atleast_2d(np.asarray(Gamma, dtype=float))
    if config.Mbar is not None:
        return np.atleast_2d(np.asarray(config.Mbar, dtype=float))
    raise ValueError("Gamma must be provided (online mode resolves it from M0)")


def _damped_step(prob: _WindowProblem, J: np.ndarray, g: np.ndarray, damping: np.ndarray):
    """Solve (J'J + diag(damping)) delta = -g.

    The Jacobian rows split into a block-diagonal part (prior rows touch
    only the (x0, theta) block, each disturbance row only its own stage)
    plus a thin dense slab of output/penalty rows, so for long windows the
    normal matrix is B + U'U with small blocks in B and few rows in U;
    the Woodbury identity then replaces one O(nv^3) factorization with an
    O(k^3) one (k = number of dense rows). Short windows fall back to the
    direct dense solve. Raises LinAlgError when the damped system is not
    positive definite (caller increases the damping).
    """
    m = prob.model
    no = m.n + m.o
    nv, Nt, q = prob.nv, prob.Nt, m.q
    U = J[no + Nt * q :]
    U = U[np.any(U, axis=1)]
    k = U.shape[0]
    if Nt == 0 or q == 0 or k == 0 or k >= nv // 2:
        cf = sla.cho_factor(
            J.T @ J + np.diag(damping), lower=True, check_finite=False
        )
        return sla.cho_solve(cf, -g, check_finite=False)
    B0 = (prob.prior_scale**2) * (prob.sqrtGamma.T @ prob.sqrtGamma)
    B0 = B0 + np.diag(damping[:no])
    Qd = prob.sqrtQ.T @ prob.sqrtQ
    blocks = 2.0 * prob.disc[:, None, None] * Qd[None]
    di = np.arange(q)
    blocks[:, di, di] += damping[no:].reshape(Nt, q)
    B0_inv = np.linalg.inv(B0)
    blocks_inv = np.linalg.inv(blocks)

    def bsolve(Z):
        out = np.empty_like(Z)
        out[:no] = B0_inv @ Z[:no]
        tail = Z[no:].reshape(Nt, q, -1)
        out[no:] = np.einsum("nij,njk->nik", blocks_inv, tail).reshape(Nt * q, -1)
        return out

    rhs = np.column_stack([-g[:, None], U.T])
    sol = bsolve(rhs)
    Bg, V = sol[:, :1], sol[:, 1:]
    W = U @ V
    W = 0.5 * (W + W.T)
    W[np.arange(k), np.arange(k)] += 1.0
    cf = sla.cho_factor(W, lower=True, check_finite=False)
    corr = V @ sla.cho_solve(cf, U @ Bg, check_finite=False)
    return (Bg - corr).ravel()


def _lm_minimize(prob: _WindowProblem, v0: np.ndarray, solver: SolverConfig):
    """Projected Levenberg-Marquardt with Marquardt (diagonal) damping.

    The residual weights span many orders of magnitude, so the normal
    equations are regularized with nu * diag(J'J) (More-style scaling with a
    running floor) rather than a scalar multiple of the identity; the latter
    effectively freezes the poorly scaled coordinates.
    """
    v = prob.clip(v0.copy())
    r = prob.residual(v)
    cost_v = float(r @ r)
    nu = solver.damping_init
    scale = None
    diag = SolveDiagnostics(cost=cost_v)
    for it in range(solver.max_iterations):
        r, J = prob.residual_and_jacobian(v)
        cost_v = float(r @ r)
        g = J.T @ r
        proj_grad = float(np.linalg.norm(v - prob.clip(v - g)))
        diag.iterations = it
        diag.grad_norm = proj_grad
        diag.cost = cost_v
        if proj_grad <= solver.gradient_tolerance:
            diag.converged = True
            break
        d = np.einsum("ij,ij->j", J, J)
        scale = d if scale is None else np.maximum(scale, d)
        D = np.maximum(scale, 1e-12 * max(float(scale.max()), 1.0))
        accepted = False
        for _ in range(40):
            try:
                delta = _damped_step(prob, J, g, nu * D)
            except np.linalg.LinAlgError:
                nu *= 10.0
                continue
            v_new = prob.clip(v + delta)
            r_new = prob.residual(v_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost_v:
                step_norm = float(np.linalg.norm(v_new - v))
                drop = cost_v - cost_new
                v = v_new
                cost_v = cost_new
                nu = max(nu / 3.0, 1e-14)
                accepted = True
                if step_norm <= solver.step_tolerance * (1.0 + np.linalg.norm(v)):
                    diag.converged = True
                if drop <= solver.cost_tolerance * max(cost_v, 1.0):
                    diag.converged = True
                break
            nu *= 4.0
            if nu > 1e16:
                break
        if not accepted or diag.converged:
            if not accepted:
                # damping exhausted: projected stationarity within float noise
                diag.converged = True
                diag.note = "damping exhausted at stationary point"
            break
    else:
        diag.iterations = solver.max_iterations
        diag.note = "max iterations reached"
    diag.cost = cost_v
    return v, diag


def solve(
    model: SystemModel,
    config: MheConfig,
    prior: tuple[np.ndarray, np.ndarray],
    window: tuple[np.ndarray, np.ndarray],
    warm_start: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    Gamma: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    theta_fix=None,
):
    """Minimize the horizon cost over (x0, theta, d-sequence) in their boxes.

    Returns (x0*, theta*, d*, rolled states, diagnostics). Non-convergence
    within the iteration budget returns the best iterate with the flag
    cleared rather than raising. ``theta_fix`` pins the parameter decision
    to the given value (the optimization then runs over x0 and d only).
    """
    Gamma = _resolve_gamma_static(config, Gamma, model)
    y_win = np.asarray(window[1], dtype=float).reshape(-1, model.p)
    u_win = as_sequence(window[0], model.m, length=y_win.shape[0])
    prob = _WindowProblem(model, config, prior, u_win, y_win, Gamma)
    if theta_fix is not None:
        tf = model.Theta.clip(np.atleast_1d(np.asarray(theta_fix, dtype=float)))
        prob.lb[model.n : model.n + model.o] = tf
        prob.ub[model.n : model.n + model.o] = tf

    if warm_start is None:
        v0 = np.concatenate(
            [
                model.X.clip(prior[0]),
                model.Theta.clip(np.atleast_1d(prior[1])),
                np.zeros(prob.Nt * model.q),
            ]
        )
    else:
        x0w, thw, dw = warm_start
        dw = as_sequence(dw, model.q, length=prob.Nt)
        if dw.shape[0] != prob.Nt:
            raise DimensionError("warm start disturbance length must match window")
        v0 = np.concatenate(
            [np.asarray(x0w, dtype=float), np.atleast_1d(thw), dw.ravel()]
        )

    v_best, diag = _lm_minimize(prob, v0, config.solver)
    if config.n_starts > 0:
        rng = rng or np.random.default_rng(0)
        for _ in range(config.n_starts):
            v_rand = np.concatenate(
                [
                    model.X.sample(rng),
                    model.Theta.sample(rng),
                    prob.lb[model.n + model.o :]
                    + rng.random(prob.Nt * model.q)
                    * (prob.ub - prob.lb)[model.n + model.o :],
                ]
            )
            v_alt, diag_alt = _lm_minimize(prob, v_rand, config.solver)
            if diag_alt.cost < diag.cost:
                v_best, diag = v_alt, diag_alt
                diag.multistart_improved = True

    diag.constraint_violation = prob.constraint_violation(v_best)
    x0, th, d = prob.split(v_best)
    xs = prob.rollout(v_best)
    return x0.copy(), th.copy(), d.copy(), xs, diag


@dataclass
class StepRecord:
    """Per-step log entry (flattened into the run CSV by the CLI)."""

    t: int
    x_hat: np.ndarray
    theta_hat: np.ndarray
    cost: float
    iterations: int
    converged: bool
    constraint_violation: float
    cond_kappa_value: float | None = None
    cond_kappa_pass: bool | None = None
    cond_pe_value: float | None = None
    cond_pe_pass: bool | None = None
    theta_frozen: bool = False


class MheEstimator:
    """Stateful estimator: call :meth:`step` once per sample.

    The first call (no data) returns the initial guesses. Every later call
    supplies the input applied and the output measured at the previous time
    index. In online mode the prior weight is the initial excitation block
    matrix M0 and the two runtime convergence conditions are evaluated
    after every solve.
    """

    def __init__(
        self,
        model: SystemModel,
        cert: DetectabilityCertificate,
        config: MheConfig,
        x0_hat,
        theta0_hat,
        pe_config: PeConfig | None = None,
    ):
        self.model = model
        self.cert = cert
        self.config = config
        self.t = 0
        self._u: deque[np.ndarray] = deque(maxlen=config.N)
        self._y: deque[np.ndarray] = deque(maxlen=config.N)
        x0_hat = np.asarray(x0_hat, dtype=float)
        theta0_hat = np.atleast_1d(np.asarray(theta0_hat, dtype=float))
        self._est: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=config.N + 1)
        self._est.append((x0_hat, theta0_hat))
        self._est_first_t = 0
        self._last_solution = None  # (x0*, th*, d*, xs)
        self.history: list[StepRecord] = []

        if config.gamma_mode == "online-M0":
            if pe_config is None:
                raise ValueError("online-M0 mode requires a PeConfig")
            if not cert.constant_phi:
                raise NotApplicableError(
                    "online conditions need a constant-Phi certificate"
                )
            self.pe_config = pe_config
            self._M0 = m_matrix_from(cert.P, pe_config.Y0, cert.a, pe_config.S0)
            self._Gamma = self._M0
            xc = (model.X.lower + model.X.upper) / 2.0
            uc = (model.U.lower + model.U.upper) / 2.0 if model.m else np.zeros(0)
            self._phi0 = phi(cert, model, xc, xc, uc)
        else:
            self.pe_config = pe_config
            self._M0 = None
            self._Gamma = np.asarray(config.Mbar, dtype=float)
            self._phi0 = None

    # -- bookkeeping -------------------------------------------------------

    def _prior(self, Nt: int) -> tuple[np.ndarray, np.ndarray]:
        prior_t = self.t - Nt
        idx = prior_t - self._est_first_t
        return self._est[idx]

    def _push_estimate(self, x_hat, theta_hat):
        if len(self._est) == self._est.maxlen:
            self._est_first_t += 1
        self._est.append((x_hat, theta_hat))

    def _warm_start(self, Nt: int):
        if self._last_solution is None:
            return None
        x0p, thp, dp, xsp = self._last_solution
        prev_Nt = dp.shape[0]
        if Nt == prev_Nt + 1 and Nt <= self.config.N:
            # ramp-up: window start stays at time zero
            d_ws = np.vstack([dp, np.zeros((1, self.model.q))])
            return x0p, thp, d_ws
        if Nt == prev_Nt == self.config.N:
            d_ws = np.vstack([dp[1:], np.zeros((1, self.model.q))])
            return xsp[1], thp, d_ws
        return None

    # -- main API ----------------------------------------------------------

    def step(self, u_prev=None, y_prev=None) -> tuple[np.ndarray, np.ndarray]:
        if self.t == 0:
            if y_prev is not None or u_prev is not None:
                raise ContractViolationError("no data is consumed at time zero")
            x_hat, theta_hat = self._est[0]
            self.history.append(
                StepRecord(
                    t=0,
                    x_hat=x_hat.copy(),
                    theta_hat=theta_hat.copy(),
                    cost=0.0,
                    iterations=0,
                    converged=True,
                    constraint_violation=0.0,
                )
            )
            self.t = 1
            return x_hat, theta_hat

        if y_prev is None:
            raise ContractViolationError("y_prev is required for t >= 1")
        if self.model.m and u_prev is None:
            raise ContractViolationError("u_prev is required for systems with inputs")
        self._u.append(
            np.zeros(0) if not self.model.m else np.asarray(u_prev, dtype=float)
        )
        self._y.append(np.atleast_1d(np.asarray(y_prev, dtype=float)))

        Nt = min(self.t, self.config.N)
        u_win = as_sequence(list(self._u), self.model.m, length=len(self._u))[-Nt:]
        y_win = np.array(self._y, dtype=float).reshape(-1, self.model.p)[-Nt:]
        prior = self._prior(Nt)
        warm = self._warm_start(Nt)
        theta_fix = None
        thr = self.config.theta_freeze_threshold
        if thr is not None and self.history:
            last_pe = self.history[-1].cond_pe_value
            if last_pe is not None and last_pe < thr:
                theta_fix = self._est[-1][1]
        x0s, ths, ds, xs, diag = solve(
            self.model,
            self.config,
            prior,
            (u_win, y_win),
            warm_start=warm,
            Gamma=self._Gamma,
            theta_fix=theta_fix,
        )
        self._last_solution = (x0s, ths, ds, xs)
        x_hat, theta_hat = xs[-1].copy(), ths.copy()

        record = StepRecord(
            t=self.t,
            x_hat=x_hat,
            theta_hat=theta_hat,
            cost=diag.cost,
            iterations=diag.iterations,
            converged=diag.converged,
            constraint_violation=diag.constraint_violation,
            theta_frozen=theta_fix is not None,
        )
        if self.config.gamma_mode == "online-M0":
            self._monitor(record, xs, u_win, Nt)
        self.history.append(record)
        self._push_estimate(x_hat, theta_hat)
        self.t += 1
        return x_hat, theta_hat

    # -- online conditions -------------------------------------------------

    def _monitor(self, record: StepRecord, xs: np.ndarray, u_win: np.ndarray, Nt: int):
        """Replay the excitation recursions along the estimated window."""
        pe = self.pe_config
        Y = pe.Y0.copy()
        S = pe.S0.copy()
        gram = np.zeros((self.model.o, self.model.o))
        for j in range(Nt):
            CY = self.model.C @ Y
            gram += CY.T @ CY
            S = pe.eta * S + CY.T @ CY
            Y = self._phi0 @ Y + self.model.G(xs[j], u_win[j])
        M_end = m_matrix_from(self.cert.P, Y, self.cert.a, S)
        ok26, val26 = kappa_check(self._M0, M_end, self.config.kappa)
        record.cond_kappa_value = val26
        record.cond_kappa_pass = ok26
        if Nt >= self.config.N:
            lam_min = float(np.linalg.eigvalsh(gram)[0])
            alpha = self.config.alpha if self.config.alpha is not None else pe.alpha
            record.cond_pe_value = lam_min
            record.cond_pe_pass = lam_min > alpha

    def online_condition_monitor(self) -> StepRecord:
        """Flags computed after the most recent solve."""
        if self.config.gamma_mode != "online-M0":
            raise NotApplicableError("online conditions require online-M0 mode")
        if not self.history:
            raise ContractViolationError("no step has been taken yet")
        return self.history[-1]
