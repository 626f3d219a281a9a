"""Synchronous simulation of the accelerated distributed dual method.

Every agent ``i`` keeps ``y_i, yhat_i, ytilde_i, lambda_i`` (multiplier
blocks of length ``d+m``) and its primal ``x_i``. With horizon ``N`` and
penalty ``rho`` one round ``k = 1..N`` is

    ytilde  = (1 - a_k) yhat + a_k y
    x_i     = argmin F_i(x) + <[B_i x - b_i; h_i(x)], ytilde_i>
    y'      = P_Y(y - (grad G(ytilde) - lambda + theta_k W y) / eta_k)
    yhat'   = (1 - a_k) yhat + a_k y'
    lambda' = lambda - beta_k W y'

with ``a_k = 2/(k+1)``, ``theta_k = rho N/k``, ``beta_k = rho k/N`` and
``eta_k = (2 l_g + rho N |W|)/k``. The primal answer is recovered from
``yhat_{N+1}``. ``W y`` is one neighbour exchange (:func:`graph.apply_laplacian`).

The consensus penalty enters the ``y`` step with a plus sign: the step is the
minimizer of ``<grad G - lambda, y> + theta <W y_k, y> + eta/2 |y - y_k|^2``,
whose penalty gradient pulls neighbours together. The opposite sign drives the
copies apart and diverges.

A dual subgradient method with Metropolis mixing is provided as a baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import Network, apply_laplacian, spectral
from .local_solver import DualPoint, InnerSolveError, LocalOracle, dual_gradient
from .metrics import TraceRecord, consensus_error, feasibility_residual
from .problem import ProblemInstance


class InvariantViolation(AssertionError):
    pass


class EngineError(RuntimeError):
    """Failure inside a run; carries the partial trace."""

    def __init__(self, message, trace=None, k=None, agents=None):
        super().__init__(message)
        self.trace = trace or []
        self.k = k
        self.agents = agents


@dataclass(frozen=True)
class Schedule:
    rho: float
    N: int
    l_g: float
    norm_W: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.N < 1:
            raise ValueError(f"N must be at least 1, got {self.N}")
        if not np.isclose(self.theta(1) * self.beta(1), self.rho**2, rtol=1e-12, atol=0):
            raise InvariantViolation("theta_k * beta_k != rho^2")
        if self.alpha(1) != 1.0:
            raise InvariantViolation("alpha_1 != 1")

    def alpha(self, k: int) -> float:
        return 2.0 / (k + 1)

    def theta(self, k: int) -> float:
        return self.rho * self.N / k

    def beta(self, k: int) -> float:
        return self.rho * k / self.N

    def eta(self, k: int) -> float:
        return (2.0 * self.l_g + self.rho * self.N * self.norm_W) / k

    def check(self, k: int) -> None:
        if not 1 <= k <= self.N:
            raise ValueError(f"iteration {k} outside schedule horizon 1..{self.N}")
        tb = self.theta(k) * self.beta(k)
        if abs(tb - self.rho**2) > 1e-12 * self.rho**2:
            raise InvariantViolation(f"k={k}: theta*beta={tb!r} != rho^2={self.rho**2!r}")
        if abs(self.alpha(k) * (k + 1) - 2.0) > 1e-14:
            raise InvariantViolation(f"k={k}: alpha*(k+1) != 2")


def default_rho(norm_W: float, N: int) -> float:
    """Horizon-scaled penalty ``1/(|W| N)``, used when nothing else is known."""
    return 1.0 / (norm_W * N)


def bound_optimal_rho(dist: float, norm_W: float, lambda2_W: float) -> float:
    """Penalty minimizing the feasibility bound for large ``N``.

    The bound behaves like ``(rho |W| D^2 + 1/(rho lambda_2)) / N`` with
    ``D = |y_1 - y*|``, minimized at ``1/(D sqrt(|W| lambda_2))``.
    """
    if not dist > 0:
        raise ValueError("distance to the optimal multiplier must be positive")
    return 1.0 / (dist * np.sqrt(norm_W * lambda2_W))


def default_step_c(inst: ProblemInstance) -> float:
    """Baseline step constant ``1/l_g``."""
    return 1.0 / inst.l_g if inst.l_g > 0 else 1.0


def inner_tolerance(k: int) -> float:
    """Inner-solve accuracy for outer round ``k``; summable so inexactness stays negligible."""
    return min(1e-8, 1e-4 / k**2)


@dataclass
class RunState:
    """All agents' iterates; rows are agents."""

    y: np.ndarray
    yhat: np.ndarray
    ytilde: np.ndarray
    lam: np.ndarray
    x: np.ndarray
    k: int = 1

    @classmethod
    def initial(cls, inst: ProblemInstance, y1=None) -> "RunState":
        n, q = inst.n, inst.q
        y = np.zeros((n, q)) if y1 is None else project_Y(np.array(y1, dtype=float).reshape(n, q), inst.d)
        return cls(y=y.copy(), yhat=y.copy(), ytilde=y.copy(), lam=np.zeros((n, q)), x=np.zeros((n, inst.p)))

    def dual_point(self, i: int, d: int, which: str = "y") -> DualPoint:
        return DualPoint.from_vector(getattr(self, which)[i], d)


def project_Y(v, d: int) -> np.ndarray:
    """Keep the equality block, clamp the inequality block at zero (last axis)."""
    out = np.array(v, dtype=float, copy=True)
    out[..., d:] = np.maximum(out[..., d:], 0.0)
    return out


def check_invariants(state: RunState, d: int) -> None:
    scale = 1.0 + float(np.abs(state.lam).sum(axis=1).max(initial=0.0))
    drift = float(np.linalg.norm(state.lam.sum(axis=0)))
    if drift > 1e-9 * scale:
        raise InvariantViolation(f"k={state.k}: multipliers do not sum to zero (|sum|={drift:.3e})")
    if np.any(state.y[:, d:] < 0) or np.any(state.yhat[:, d:] < 0):
        raise InvariantViolation(f"k={state.k}: negative inequality multiplier")


def step(state: RunState, schedule: Schedule, inst: ProblemInstance, net: Network,
         oracle: LocalOracle, literal_lambda: bool = False, inner_tol: float | None = None) -> RunState:
    """Advance all agents by one synchronous round."""
    k = state.k
    schedule.check(k)
    a = schedule.alpha(k)
    ytilde = (1.0 - a) * state.yhat + a * state.y
    tol = inner_tolerance(k) if inner_tol is None else inner_tol
    x = oracle.solve(ytilde, tol, channel="primal")
    grad = dual_gradient(inst, x)
    t_k = apply_laplacian(net, state.y)  # exchange 1: y_k
    y_new = project_Y(state.y - (grad - state.lam + schedule.theta(k) * t_k) / schedule.eta(k), inst.d)
    yhat_new = (1.0 - a) * state.yhat + a * y_new
    t_next = t_k if literal_lambda else apply_laplacian(net, y_new)  # exchange 2: y_{k+1}
    lam_new = state.lam - schedule.beta(k) * t_next
    return RunState(y=y_new, yhat=yhat_new, ytilde=ytilde, lam=lam_new, x=x, k=k + 1)


@dataclass
class RunResult:
    x_final: np.ndarray
    trace: list
    state: RunState | None = None
    schedule: Schedule | None = None
    extras: dict = field(default_factory=dict)


class _Tracer:
    """Turns per-round primal estimates into :class:`TraceRecord` rows."""

    def __init__(self, inst, f_star, f_first, timing, debug):
        self.inst, self.f_star, self.f_first = inst, f_star, f_first
        self.timing, self.debug = timing, debug
        self.t0 = time.perf_counter_ns()
        self.rows: list[TraceRecord] = []

    def record(self, k, x, y, oracle=None):
        if self.f_star is None:
            rel = float("nan")
        else:
            denom = (self.f_first - self.f_star) ** 2
            num = (self.inst.objective_value(x) - self.f_star) ** 2
            rel = num / denom if denom > 0 else (0.0 if num == 0 else float("inf"))
        extra = {}
        if self.debug and oracle is not None:
            extra = {"inner_iterations": int(oracle.last_iterations.max()),
                     "inner_residual": float(oracle.last_residual.max())}
        self.rows.append(TraceRecord(
            k=k,
            rel_primal_error=rel,
            feas_residual=feasibility_residual(self.inst, x),
            consensus_error=consensus_error(y),
            wall_ns=time.perf_counter_ns() - self.t0 if self.timing else 0,
            extra=extra,
        ))


def initial_primal(inst: ProblemInstance, oracle: LocalOracle) -> np.ndarray:
    """Primal response to zero multipliers; the common starting point ``x_1`` of every method."""
    return oracle.solve(np.zeros((inst.n, inst.q)), 1e-10)


def run(inst: ProblemInstance, net: Network, rho: float, N: int, *, f_star: float | None = None,
        y1=None, workers: int = 1, literal_lambda: bool = False, inner_tol: float | None = None,
        callback: Callable | None = None, timing: bool = False, debug: bool = False,
        check: bool = True) -> RunResult:
    """Run ``N`` rounds and recover ``x_{N+1}`` from ``yhat_{N+1}``.

    Trace row ``k`` describes the primal the method would return if stopped
    after round ``k`` (the response to ``yhat_{k+1}``), so row ``N`` is the
    final answer. The relative error is normalized by the response to the
    initial multipliers ``y_1``. ``f_star`` enables the relative error column
    (NaN otherwise).
    """
    if net.n != inst.n:
        raise ValueError(f"network has {net.n} nodes but the problem has {inst.n} agents")
    spec = spectral(net)
    schedule = Schedule(rho=float(rho), N=int(N), l_g=inst.l_g, norm_W=spec.norm_W)
    state = RunState.initial(inst, y1)
    with LocalOracle(inst, workers=workers) as oracle:
        x_first = oracle.solve(state.yhat, 1e-10, channel="recover")
        tracer = _Tracer(inst, f_star, inst.objective_value(x_first), timing, debug)
        for k in range(1, N + 1):
            try:
                state = step(state, schedule, inst, net, oracle, literal_lambda=literal_lambda,
                             inner_tol=inner_tol)
                tol = inner_tolerance(k) if inner_tol is None else inner_tol
                x_rec = oracle.solve(state.yhat, tol, channel="recover")
            except InnerSolveError as exc:
                raise EngineError(f"round {k}: {exc}", trace=tracer.rows, k=k, agents=exc.agents) from exc
            if check:
                check_invariants(state, inst.d)
            tracer.record(k, x_rec, state.y, oracle)
            if callback is not None:
                callback(k, state, tracer.rows[-1])
    return RunResult(x_final=x_rec.reshape(-1).copy(), trace=tracer.rows, state=state, schedule=schedule,
                     extras={"norm_W": spec.norm_W, "lambda2_W": spec.lambda2_W, "x_first": x_first})


def run_subgradient_baseline(inst: ProblemInstance, net: Network, step_c: float, N: int, *,
                             f_star: float | None = None, y1=None, workers: int = 1,
                             inner_tol: float = 1e-10, callback: Callable | None = None,
                             timing: bool = False, debug: bool = False) -> RunResult:
    """Distributed projected dual subgradient with Metropolis mixing.

    ``y_i <- P_Y(sum_j A_ij y_j - (c/sqrt(k)) grad g_i(y_i))``; the primal
    estimate is the running average of the inner responses.
    """
    if not step_c > 0:
        raise ValueError(f"step_c must be positive, got {step_c}")
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    mix = net.metropolis_weights()
    n, q = inst.n, inst.q
    y = np.zeros((n, q)) if y1 is None else project_Y(np.array(y1, dtype=float).reshape(n, q), inst.d)
    x_avg = np.zeros((n, inst.p))
    with LocalOracle(inst, workers=workers) as oracle:
        x_first = oracle.solve(y, 1e-10)
        tracer = _Tracer(inst, f_star, inst.objective_value(x_first), timing, debug)
        for k in range(1, N + 1):
            try:
                x = oracle.solve(y, inner_tol, channel="primal")
            except InnerSolveError as exc:
                raise EngineError(f"round {k}: {exc}", trace=tracer.rows, k=k, agents=exc.agents) from exc
            grad = dual_gradient(inst, x)
            y = project_Y(mix @ y - (step_c / np.sqrt(k)) * grad, inst.d)
            x_avg += (x - x_avg) / k
            tracer.record(k, x_avg, y, oracle)
            if callback is not None:
                callback(k, y, tracer.rows[-1])
    return RunResult(x_final=x_avg.reshape(-1).copy(), trace=tracer.rows,
                     extras={"x_first": x_first, "y": y})
