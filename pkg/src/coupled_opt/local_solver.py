"""Per-agent dual oracle.

For a multiplier block ``y = [mu; delta]`` agent ``i`` solves

    x_i(y) = argmin_{x in box} x'A x + c'x + w||x||_1 + <mu, B x - b> + <delta, h(x)>

and reports ``grad g_i(y) = -[B x_i - b; h(x_i)]`` together with the dual
value ``g_i(y) = -L_i(x_i(y), y)``.

The inner problem is solved by FISTA with a function-value restart. The
smooth part is the quadratic plus every linear term (affine inequalities are
folded in), the nonsmooth part ``w|z| + delta|z - r| + box`` is separable and
handled exactly by a closed-form prox (:func:`scalar_prox` is the vectorized
form). Each agent is solved by its own compiled kernel call that touches only
that agent's data, so any partition of the agents across threads gives
bit-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .problem import InequalityKind, ProblemInstance


class InnerSolveError(RuntimeError):
    def __init__(self, message, agents=None, residual=None):
        super().__init__(message)
        self.agents = agents
        self.residual = residual


@dataclass(frozen=True)
class DualPoint:
    mu: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if np.any(delta < 0):
            raise ValueError("inequality multipliers must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "delta", delta)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.delta])

    @classmethod
    def from_vector(cls, v, d: int) -> "DualPoint":
        v = np.asarray(v, dtype=float)
        return cls(v[:d], v[d:])


@dataclass(frozen=True)
class InnerSolveReport:
    x: np.ndarray
    residual: float
    iterations: int


def scalar_prox(v, t, w1, w2, r, lo, hi):
    """Exact minimizer of ``(z - v)^2/(2t) + w1|z| + w2|z - r|`` over ``[lo, hi]``.

    Works elementwise on broadcastable arrays. The map ``z -> z + t*dphi(z)``
    is monotone, so the unconstrained minimizer is found by locating ``v``
    among the images of the kinks ``min(0, r)`` and ``max(0, r)``; clipping to
    the box then gives the constrained one (one-dimensional convexity).
    """
    v, t, w1, w2, r = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (v, t, w1, w2, r)))
    left_is_zero = r >= 0
    a = np.where(left_is_zero, 0.0, r)
    b = np.where(left_is_zero, r, 0.0)
    wa = np.where(left_is_zero, w1, w2)
    wb = np.where(left_is_zero, w2, w1)
    total = t * (wa + wb)
    mid = t * (wa - wb)
    z = np.select(
        [v < a - total, v <= a + mid, v < b + mid, v <= b + total],
        [v + total, a, v - mid, b],
        v - total,
    )
    z = np.clip(z, lo, hi)
    return float(z) if z.ndim == 0 else z


@njit(cache=True, nogil=True)
def _prox1(v, t, w1, w2, r, lo, hi):
    if r >= 0.0:
        a, b, wa, wb = 0.0, r, w1, w2
    else:
        a, b, wa, wb = r, 0.0, w2, w1
    total = t * (wa + wb)
    mid = t * (wa - wb)
    if v < a - total:
        z = v + total
    elif v <= a + mid:
        z = a
    elif v < b + mid:
        z = v - mid
    elif v <= b + total:
        z = b
    else:
        z = v - total
    return min(max(z, lo), hi)


@njit(cache=True, nogil=True)
def _objective(A, lin, w1, w2, r, z):
    p = z.shape[0]
    val = 0.0
    for i in range(p):
        s = lin[i]
        for j in range(p):
            s += A[i, j] * z[j]
        val += z[i] * s + w1 * abs(z[i]) + w2 * abs(z[i] - r[i])
    return val


@njit(cache=True, nogil=True)
def _prox_grad(A, lin, w1, w2, r, lo, hi, step, z, out):
    p = z.shape[0]
    for i in range(p):
        g = lin[i]
        for j in range(p):
            g += 2.0 * A[i, j] * z[j]
        out[i] = _prox1(z[i] - step * g, step, w1, w2, r[i], lo[i], hi[i])


@njit(cache=True, nogil=True)
def _fista(A, lin, w1, w2, r, lo, hi, step, x0, tol, max_iter):
    """FISTA with function-value restart for one agent.

    Returns ``(x, residual, iterations)`` where the residual is the norm of
    the gradient mapping at the point the last step was taken from.
    """
    p = x0.shape[0]
    x = np.empty(p)
    for i in range(p):
        x[i] = min(max(x0[i], lo[i]), hi[i])
    z = x.copy()
    xn = np.empty(p)
    fx = _objective(A, lin, w1, w2, r, x)
    tk = 1.0
    res = np.inf
    it = 0
    while it < max_iter:
        it += 1
        _prox_grad(A, lin, w1, w2, r, lo, hi, step, z, xn)
        fn = _objective(A, lin, w1, w2, r, xn)
        if fn > fx:
            # plain proximal-gradient step from the accepted iterate
            for i in range(p):
                z[i] = x[i]
            _prox_grad(A, lin, w1, w2, r, lo, hi, step, z, xn)
            fn = _objective(A, lin, w1, w2, r, xn)
            tk = 1.0
        acc = 0.0
        for i in range(p):
            acc += (xn[i] - z[i]) ** 2
        res = np.sqrt(acc) / step
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        mom = (tk - 1.0) / tn
        for i in range(p):
            z[i] = xn[i] + mom * (xn[i] - x[i])
            x[i] = xn[i]
        fx, tk = fn, tn
        if res <= tol:
            break
    return x, res, it


@njit(cache=True, nogil=True)
def _solve_one(A, c, K, coef, w1, w2, r, lo, hi, step, x0, tol, max_iter):
    p = c.shape[0]
    lin = c.copy()
    for l in range(K.shape[0]):
        for j in range(p):
            lin[j] += K[l, j] * coef[l]
    return _fista(A, lin, w1, w2, r, lo, hi, step, x0, tol, max_iter)


def _split_multipliers(inst: ProblemInstance, Y):
    """Coefficients entering the smooth linear term and the l1-shift weight."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != inst.q:
        raise ValueError(f"multiplier blocks must have length {inst.q}, got {Y.shape[1]}")
    delta = Y[:, inst.d:]
    if np.any(delta < 0):
        raise ValueError("inequality multipliers must be nonnegative")
    if inst.kind is InequalityKind.SHIFTED_L1:
        return np.ascontiguousarray(Y[:, :inst.d]), delta[:, 0].copy()
    return np.ascontiguousarray(Y), np.zeros(Y.shape[0])


def solve_agents(inst: ProblemInstance, Y, tol: float, x0=None, agents=None,
                 max_iter: int = 200_000, check: bool = True):
    """Solve the inner problem for a batch of agents.

    ``Y`` is ``(k, d+m)``, one multiplier block per entry of ``agents``
    (default: all agents in order). Returns ``(x, residual, iterations)``.
    """
    agents = np.arange(inst.n) if agents is None else np.asarray(agents, dtype=int)
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    coef, w2 = _split_multipliers(inst, Y)
    K = inst.linear_maps
    r = inst.r if inst.kind is InequalityKind.SHIFTED_L1 else np.zeros((inst.n, inst.p))
    x0 = np.zeros((len(agents), inst.p)) if x0 is None else np.asarray(x0, dtype=float)
    x = np.empty((len(agents), inst.p))
    res = np.empty(len(agents))
    its = np.empty(len(agents), dtype=int)
    for k, i in enumerate(agents):
        x[k], res[k], its[k] = _solve_one(
            inst.A[i], inst.c[i], K[i], coef[k], float(inst.w[i]), float(w2[k]), r[i], inst.lo[i], inst.hi[i],
            0.5 / float(inst.norm_A[i]), np.ascontiguousarray(x0[k]), float(tol), int(max_iter))
    if check and np.any(res > tol):
        bad = agents[res > tol]
        raise InnerSolveError(
            f"inner solve did not reach tol={tol:.1e} within {max_iter} iterations for agents "
            f"{bad.tolist()} (worst residual {res.max():.3e})", agents=bad.tolist(), residual=float(res.max()))
    return x, res, its


def solve_local(inst: ProblemInstance, i: int, y_tilde, tol: float, x0=None, max_iter: int = 200_000) -> InnerSolveReport:
    """Single-agent convenience wrapper around :func:`solve_agents`."""
    y = y_tilde.vector if isinstance(y_tilde, DualPoint) else np.asarray(y_tilde, dtype=float)
    x0 = None if x0 is None else np.asarray(x0, dtype=float)[None, :]
    x, res, its = solve_agents(inst, y[None, :], tol, x0=x0, agents=[i], max_iter=max_iter)
    return InnerSolveReport(x[0], float(res[0]), int(its[0]))


def dual_gradient(inst: ProblemInstance, x, agents=None) -> np.ndarray:
    """``-[B_i x_i - b_i; h_i(x_i)]`` for each agent, shape ``(k, d+m)``."""
    agents = np.arange(inst.n) if agents is None else np.asarray(agents, dtype=int)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eq = np.einsum("kij,kj->ki", inst.B[agents], x) - inst.b[agents]
    if inst.kind is InequalityKind.SHIFTED_L1:
        h = (np.abs(x - inst.r[agents]).sum(axis=1) - inst.dvec[agents])[:, None]
    elif inst.kind is InequalityKind.AFFINE:
        h = np.einsum("kij,kj->ki", inst.G[agents], x) - inst.g[agents]
    else:
        h = np.zeros((len(agents), 0))
    return -np.hstack([eq, h])


def lagrangian_terms(inst: ProblemInstance, x, Y, agents=None) -> np.ndarray:
    """Per-agent ``L_i(x_i, y_i)``."""
    agents = np.arange(inst.n) if agents is None else np.asarray(agents, dtype=int)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    A = inst.A[agents]
    f = (np.einsum("ki,kij,kj->k", x, A, x) + np.einsum("ki,ki->k", inst.c[agents], x)
         + inst.w[agents] * np.abs(x).sum(axis=1))
    return f - np.einsum("ki,ki->k", dual_gradient(inst, x, agents), Y)


def dual_value(inst: ProblemInstance, i: int, y, tol: float = 1e-10, x0=None) -> float:
    """``g_i(y) = -min_x L_i(x, y)``."""
    y = y.vector if isinstance(y, DualPoint) else np.asarray(y, dtype=float)
    rep = solve_local(inst, i, y, tol, x0=x0)
    return float(-lagrangian_terms(inst, rep.x[None, :], y[None, :], [i])[0])


class LocalOracle:
    """Evaluates all agents' inner problems, optionally across a thread pool.

    Agents are split into ``workers`` contiguous chunks; each chunk is one
    batched solve touching only its own rows. Keeps one warm-start array per
    named channel.
    """

    def __init__(self, inst: ProblemInstance, workers: int = 1, max_iter: int = 200_000):
        self.inst = inst
        self.workers = max(1, min(int(workers), inst.n))
        self.max_iter = max_iter
        self.chunks = [c for c in np.array_split(np.arange(inst.n), self.workers) if len(c)]
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self.warm: dict[str, np.ndarray] = {}
        self.last_residual = np.zeros(inst.n)
        self.last_iterations = np.zeros(inst.n, dtype=int)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def solve(self, Y, tol: float, channel: str | None = None) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        x0 = self.warm.get(channel) if channel is not None else None
        if x0 is None:
            x0 = np.zeros((self.inst.n, self.inst.p))
        out = np.empty((self.inst.n, self.inst.p))
        res = np.empty(self.inst.n)
        its = np.empty(self.inst.n, dtype=int)

        def work(chunk):
            xc, rc, ic = solve_agents(self.inst, Y[chunk], tol, x0=x0[chunk], agents=chunk,
                                      max_iter=self.max_iter, check=False)
            out[chunk], res[chunk], its[chunk] = xc, rc, ic

        if self._pool is None:
            for chunk in self.chunks:
                work(chunk)
        else:
            list(self._pool.map(work, self.chunks))
        self.last_residual, self.last_iterations = res, its
        if np.any(res > tol):
            bad = np.flatnonzero(res > tol)
            raise InnerSolveError(
                f"inner solve did not reach tol={tol:.1e} for agents {bad.tolist()} "
                f"(worst residual {res.max():.3e})", agents=bad.tolist(), residual=float(res.max()))
        if channel is not None:
            self.warm[channel] = out.copy()
        return out

    def gradient(self, x) -> np.ndarray:
        return dual_gradient(self.inst, x)
