"""Error measures, convergence-bound evaluation and rate fitting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Network, spectral
from .local_solver import dual_gradient
from .problem import ProblemInstance

TRACE_COLUMNS = ("k", "rel_primal_error", "feas_residual", "consensus_error", "wall_ns")


@dataclass(frozen=True)
class TraceRecord:
    k: int
    rel_primal_error: float
    feas_residual: float
    consensus_error: float
    wall_ns: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def row(self) -> list:
        return [self.k, repr(float(self.rel_primal_error)), repr(float(self.feas_residual)),
                repr(float(self.consensus_error)), self.wall_ns] + [
                    repr(v) if isinstance(v, float) else v for v in self.extra.values()]


def write_trace(records, path_or_file) -> None:
    """CSV with the fixed column order; debug extras are appended after it."""
    extra_cols = list(records[0].extra) if records else []
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TRACE_COLUMNS) + extra_cols)
        for rec in records:
            w.writerow(rec.row())
    finally:
        if own:
            fh.close()


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("k", "wall_ns") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def trace_to_csv(records) -> str:
    buf = io.StringIO()
    write_trace(records, buf)
    return buf.getvalue()


def feasibility_residual(inst: ProblemInstance, x) -> float:
    """``|sum_i (B_i x_i - b_i)| + |[sum_i h_i(x_i)]_+|``."""
    eq = inst.eq_residuals(x).sum(axis=0)
    ineq = np.maximum(inst.h(x).sum(axis=0), 0.0)
    return float(np.linalg.norm(eq) + np.linalg.norm(ineq))


def consensus_error(y) -> float:
    """Largest distance of an agent's multiplier block from the network average."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(y - y.mean(axis=0), axis=1).max())


def relative_primal_error(f_value: float, f_first: float, f_star: float) -> float:
    return (f_value - f_star) ** 2 / (f_first - f_star) ** 2


def weighted_seminorm_sq(pinv_H: np.ndarray, blocks) -> float:
    """``|v|^2`` in the ``(H kron I)^+`` seminorm for ``v`` given as ``(n, q)`` node blocks."""
    V = np.asarray(blocks, dtype=float)
    return float(np.einsum("iq,ij,jq->", V, pinv_H, V))


@dataclass(frozen=True)
class BoundReport:
    eps_c: float
    eps_p_lower: float
    eps_p_upper: float
    xi: float
    inputs: dict

    def to_dict(self) -> dict:
        return asdict(self)


def bound_terms(l_g, norm_W, lambda2_W, rho, N, dist_sq, grad_norm, grad_seminorm_sq, y_star_norm):
    """Closed-form feasibility bound and the two primal-gap bounds.

    Returns ``(eps_c, eps_p_lower, eps_p_upper)``.
    """
    lead = (2.0 * l_g / (N * (N + 1)) + rho * norm_W / (N + 1)) * dist_sq
    eps_c = lead + 1.0 / (rho * (N + 1) * lambda2_W)
    eps_lower = lead + grad_seminorm_sq / (rho * (N + 1)) + y_star_norm * eps_c
    eps_upper = ((grad_norm + l_g * y_star_norm) * eps_c + eps_c**2) / l_g
    return eps_c, eps_lower, eps_upper


def evaluate_bounds(inst: ProblemInstance, net: Network, reference, rho: float, N: int, y1=None) -> BoundReport:
    """Evaluate the non-ergodic guarantees for a horizon-``N`` run.

    The optimal multiplier is replicated on every node to form the stacked
    ``y*``; ``y1`` defaults to all zeros. The pseudoinverse-weighted norm is a
    seminorm: the consensus component of the stacked gradient is discarded.
    """
    spec = spectral(net)
    if spec.lambda2_W <= 0:
        raise ValueError("bounds need a connected graph with lambda_2 > 0")
    n, q = inst.n, inst.q
    y_star = np.broadcast_to(np.asarray(reference.y_star, dtype=float), (n, q))
    y1 = np.zeros((n, q)) if y1 is None else np.asarray(y1, dtype=float).reshape(n, q)
    grad_star = dual_gradient(inst, inst.blocks(reference.x_star))
    grad_norm = float(np.linalg.norm(grad_star))
    grad_semi = weighted_seminorm_sq(spec.pinv_H, grad_star)
    dist_sq = float(np.sum((y1 - y_star) ** 2))
    y_norm = float(np.linalg.norm(y_star))
    eps_c, lo, hi = bound_terms(inst.l_g, spec.norm_W, spec.lambda2_W, rho, N, dist_sq, grad_norm, grad_semi, y_norm)
    inputs = {
        "dist_y1_ystar": math.sqrt(dist_sq),
        "grad_norm_at_optimum": grad_norm,
        "grad_seminorm_at_optimum": math.sqrt(max(grad_semi, 0.0)),
        "lambda2_W": spec.lambda2_W,
        "norm_W": spec.norm_W,
        "rho": float(rho),
        "N": int(N),
        "l_g": inst.l_g,
        "y_star_norm": y_norm,
    }
    return BoundReport(eps_c=eps_c, eps_p_lower=lo, eps_p_upper=hi, xi=2.0 * grad_norm, inputs=inputs)


def fit_rate(points) -> float:
    """Least-squares slope of ``log(value)`` against ``log(N)``."""
    pts = list(points)
    if len(pts) < 3:
        raise ValueError("need at least three (N, value) points")
    N = np.array([p[0] for p in pts], dtype=float)
    v = np.array([p[1] for p in pts], dtype=float)
    if np.any(v <= 0) or np.any(N <= 0):
        raise ValueError("rate fitting needs strictly positive N and values")
    slope, _ = np.polyfit(np.log(N), np.log(v), 1)
    return float(slope)
