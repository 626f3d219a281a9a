"""Coupled-constraint convex programs over a network of agents.

Agent ``i`` owns ``x_i`` in a box and the cost

    f_i(x) = x' A_i x + c_i' x + w_i ||x||_1

Agents are linked by ``sum_i B_i x_i = sum_i b_i`` and ``sum_i h_i(x_i) <= 0``
where ``h_i`` is either a shifted l1 ball ``||x - r_i||_1 - d_i`` (one row) or
affine ``G_i x - g_i``.

Per-agent data are stored stacked along a leading agent axis so the solvers
can work on whole batches of agents at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np


class InstanceError(ValueError):
    """Problem data violating the modelling assumptions."""


class InequalityKind(str, Enum):
    SHIFTED_L1 = "ShiftedL1"
    AFFINE = "Affine"
    NONE = "None"


@dataclass(frozen=True)
class LocalObjective:
    quad_matrix: np.ndarray
    linear_coeff: np.ndarray
    l1_weight: float
    box_lower: np.ndarray
    box_upper: np.ndarray


@dataclass(frozen=True)
class InequalitySpec:
    kind: InequalityKind
    reference: np.ndarray | None = None
    offset: float | None = None
    matrix: np.ndarray | None = None
    vector: np.ndarray | None = None

    @classmethod
    def shifted_l1(cls, reference, offset):
        return cls(InequalityKind.SHIFTED_L1, reference=np.asarray(reference, float), offset=float(offset))

    @classmethod
    def affine(cls, matrix, vector):
        return cls(InequalityKind.AFFINE, matrix=np.atleast_2d(np.asarray(matrix, float)),
                   vector=np.atleast_1d(np.asarray(vector, float)))

    @classmethod
    def none(cls):
        return cls(InequalityKind.NONE)


@dataclass(frozen=True)
class CouplingSpec:
    eq_matrix: np.ndarray
    eq_offset: np.ndarray


@dataclass(frozen=True)
class ProblemInstance:
    """Immutable, validated coupled problem with stacked per-agent arrays.

    Shapes: ``A (n,p,p)``, ``c, lo, hi (n,p)``, ``w (n,)``, ``B (n,d,p)``,
    ``b (n,d)``. Inequality data: ``r (n,p)`` and ``dvec (n,)`` for the
    shifted l1 family, ``G (n,m,p)`` and ``g (n,m)`` for the affine one.
    """

    A: np.ndarray
    c: np.ndarray
    w: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    B: np.ndarray
    b: np.ndarray
    kind: InequalityKind
    r: np.ndarray | None = None
    dvec: np.ndarray | None = None
    G: np.ndarray | None = None
    g: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)
    mu_f: float = field(init=False)
    l_h: float = field(init=False)
    l_g: float = field(init=False)
    norm_A: np.ndarray = field(init=False, repr=False)
    linear_maps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("A", "c", "w", "lo", "hi", "B", "b", "r", "dvec", "G", "g"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        object.__setattr__(self, "kind", InequalityKind(self.kind))
        self._validate()
        mu_f, l_h, l_g = derive_constants(self)
        object.__setattr__(self, "mu_f", mu_f)
        object.__setattr__(self, "l_h", l_h)
        object.__setattr__(self, "l_g", l_g)
        normA = np.linalg.eigvalsh(self.A)[:, -1]
        normA.setflags(write=False)
        object.__setattr__(self, "norm_A", normA)
        # rows multiplying the dual block inside the inner problem's linear term
        K = self.B if self.kind is not InequalityKind.AFFINE else np.concatenate([self.B, self.G], axis=1)
        K = np.ascontiguousarray(K)
        K.setflags(write=False)
        object.__setattr__(self, "linear_maps", K)

    def _validate(self):
        A, n = self.A, self.A.shape[0]
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise InstanceError(f"quad matrices must be (n, p, p), got {A.shape}")
        p = A.shape[1]
        for name, shape in (("c", (n, p)), ("lo", (n, p)), ("hi", (n, p)), ("w", (n,))):
            if getattr(self, name).shape != shape:
                raise InstanceError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if self.B.ndim != 3 or self.B.shape[0] != n or self.B.shape[2] != p:
            raise InstanceError(f"coupling matrices must be (n, d, p), got {self.B.shape}")
        if self.b.shape != (n, self.B.shape[1]):
            raise InstanceError(f"coupling offsets must be (n, d), got {self.b.shape}")
        asym = np.abs(A - A.transpose(0, 2, 1)).max(axis=(1, 2))
        scale = np.maximum(np.abs(A).max(axis=(1, 2)), 1.0)
        if np.any(asym > 1e-12 * scale):
            raise InstanceError(f"quad matrix of agent {int(np.argmax(asym > 1e-12 * scale))} is not symmetric")
        if np.any(self.w < 0):
            raise InstanceError("l1 weights must be nonnegative")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise InstanceError("box bounds must be finite")
        if np.any(self.lo > self.hi):
            raise InstanceError("box lower bound exceeds upper bound")
        if self.kind is InequalityKind.SHIFTED_L1:
            if self.r is None or self.dvec is None:
                raise InstanceError("shifted l1 inequality needs reference and offset")
            if self.r.shape != (n, p) or self.dvec.shape != (n,):
                raise InstanceError("shifted l1 data must be r (n, p) and offsets (n,)")
            if np.any(self.dvec <= 0):
                raise InstanceError("shifted l1 offsets must be positive")
        elif self.kind is InequalityKind.AFFINE:
            if self.G is None or self.g is None:
                raise InstanceError("affine inequality needs matrix and vector")
            if self.G.ndim != 3 or self.G.shape[0] != n or self.G.shape[2] != p:
                raise InstanceError(f"affine inequality matrices must be (n, m, p), got {self.G.shape}")
            if self.g.shape != self.G.shape[:2]:
                raise InstanceError("affine inequality vectors must be (n, m)")

    # dimensions -----------------------------------------------------------

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        if self.kind is InequalityKind.SHIFTED_L1:
            return 1
        if self.kind is InequalityKind.AFFINE:
            return self.G.shape[1]
        return 0

    @property
    def q(self) -> int:
        """Length of one agent's multiplier block ``[mu; delta]``."""
        return self.d + self.m

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.n, self.p, self.d, self.m

    # per-agent views ------------------------------------------------------

    def objective(self, i: int) -> LocalObjective:
        return LocalObjective(self.A[i], self.c[i], float(self.w[i]), self.lo[i], self.hi[i])

    def inequality(self, i: int) -> InequalitySpec:
        if self.kind is InequalityKind.SHIFTED_L1:
            return InequalitySpec.shifted_l1(self.r[i], self.dvec[i])
        if self.kind is InequalityKind.AFFINE:
            return InequalitySpec.affine(self.G[i], self.g[i])
        return InequalitySpec.none()

    def coupling(self, i: int) -> CouplingSpec:
        return CouplingSpec(self.B[i], self.b[i])

    @property
    def agents(self) -> list[tuple[LocalObjective, InequalitySpec, CouplingSpec]]:
        return [(self.objective(i), self.inequality(i), self.coupling(i)) for i in range(self.n)]

    @classmethod
    def from_agents(cls, agents: Sequence[tuple[LocalObjective, InequalitySpec, CouplingSpec]], meta=None):
        if not agents:
            raise InstanceError("at least one agent is required")
        objs, ineqs, coups = zip(*agents)
        kinds = {InequalityKind(s.kind) for s in ineqs}
        if len(kinds) != 1:
            raise InstanceError(f"all agents must share one inequality family, got {sorted(k.value for k in kinds)}")
        kind = kinds.pop()
        ds = {np.atleast_2d(cp.eq_matrix).shape[0] for cp in coups}
        if len(ds) != 1:
            raise InstanceError(f"equality coupling dimension differs across agents: {sorted(ds)}")
        kw = {}
        if kind is InequalityKind.SHIFTED_L1:
            kw = dict(r=[s.reference for s in ineqs], dvec=[s.offset for s in ineqs])
        elif kind is InequalityKind.AFFINE:
            ms = {s.matrix.shape[0] for s in ineqs}
            if len(ms) != 1:
                raise InstanceError(f"affine inequality rows differ across agents: {sorted(ms)}")
            kw = dict(G=[s.matrix for s in ineqs], g=[s.vector for s in ineqs])
        return cls(
            A=[np.atleast_2d(o.quad_matrix) for o in objs],
            c=[np.atleast_1d(o.linear_coeff) for o in objs],
            w=[o.l1_weight for o in objs],
            lo=[np.atleast_1d(o.box_lower) for o in objs],
            hi=[np.atleast_1d(o.box_upper) for o in objs],
            B=[np.atleast_2d(cp.eq_matrix) for cp in coups],
            b=[np.atleast_1d(cp.eq_offset) for cp in coups],
            kind=kind,
            meta=dict(meta or {}),
            **kw,
        )

    # evaluation -----------------------------------------------------------

    def blocks(self, x) -> np.ndarray:
        """Reshape a stacked ``(n*p,)`` vector (or ``(n, p)`` array) to ``(n, p)``."""
        x = np.asarray(x, dtype=float)
        if x.shape == (self.n, self.p):
            return x
        if x.shape == (self.n * self.p,):
            return x.reshape(self.n, self.p)
        raise ValueError(f"expected {self.n} blocks of dimension {self.p}, got shape {x.shape}")

    def local_costs(self, x) -> np.ndarray:
        x = self.blocks(x)
        quad = np.einsum("ki,kij,kj->k", x, self.A, x)
        return quad + np.einsum("ki,ki->k", self.c, x) + self.w * np.abs(x).sum(axis=1)

    def objective_value(self, x) -> float:
        return float(self.local_costs(x).sum())

    def h(self, x) -> np.ndarray:
        """Per-agent inequality values, shape ``(n, m)``."""
        x = self.blocks(x)
        if self.kind is InequalityKind.SHIFTED_L1:
            return (np.abs(x - self.r).sum(axis=1) - self.dvec)[:, None]
        if self.kind is InequalityKind.AFFINE:
            return np.einsum("kij,kj->ki", self.G, x) - self.g
        return np.zeros((x.shape[0], 0))

    def eq_residuals(self, x) -> np.ndarray:
        """Per-agent ``B_i x_i - b_i``, shape ``(n, d)``."""
        x = self.blocks(x)
        return np.einsum("kij,kj->ki", self.B, x) - self.b

    def in_box(self, x) -> bool:
        x = self.blocks(x)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        agents = []
        for i in range(self.n):
            ag = {
                "quad_matrix": self.A[i].tolist(),
                "linear_coeff": self.c[i].tolist(),
                "l1_weight": float(self.w[i]),
                "box_lower": self.lo[i].tolist(),
                "box_upper": self.hi[i].tolist(),
                "eq_matrix": self.B[i].tolist(),
                "eq_offset": self.b[i].tolist(),
            }
            if self.kind is InequalityKind.SHIFTED_L1:
                ag["inequality"] = {"kind": self.kind.value, "reference": self.r[i].tolist(),
                                    "offset": float(self.dvec[i])}
            elif self.kind is InequalityKind.AFFINE:
                ag["inequality"] = {"kind": self.kind.value, "matrix": self.G[i].tolist(),
                                    "vector": self.g[i].tolist()}
            else:
                ag["inequality"] = {"kind": self.kind.value}
            agents.append(ag)
        n, p, d, m = self.dims
        return {
            "format": "coupled-opt-instance/1",
            "dims": {"n": n, "p": p, "d": d, "m": m},
            "constants": {"mu_f": self.mu_f, "l_h": self.l_h, "l_g": self.l_g},
            "meta": self.meta,
            "agents": agents,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        agents = []
        for k, ag in enumerate(data["agents"]):
            try:
                ineq = ag.get("inequality", {"kind": "None"})
                kind = InequalityKind(ineq["kind"])
                if kind is InequalityKind.SHIFTED_L1:
                    spec = InequalitySpec.shifted_l1(ineq["reference"], ineq["offset"])
                elif kind is InequalityKind.AFFINE:
                    spec = InequalitySpec.affine(ineq["matrix"], ineq["vector"])
                else:
                    spec = InequalitySpec.none()
                agents.append((
                    LocalObjective(np.array(ag["quad_matrix"], float), np.array(ag["linear_coeff"], float),
                                   float(ag.get("l1_weight", 0.0)), np.array(ag["box_lower"], float),
                                   np.array(ag["box_upper"], float)),
                    spec,
                    CouplingSpec(np.array(ag["eq_matrix"], float), np.array(ag["eq_offset"], float)),
                ))
            except KeyError as exc:
                raise InstanceError(f"agent {k}: missing field {exc.args[0]!r}") from None
        return cls.from_agents(agents, meta=data.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ProblemInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_constants(instance) -> tuple[float, float, float]:
    """Strong convexity modulus, inequality Lipschitz modulus and dual smoothness bound.

    ``mu_f`` is the smallest ``2 lambda_min(A_i)`` over agents (the Hessian of
    ``x' A x`` is ``2A``). The dual smoothness bound uses the largest coupling
    norm over agents::

        l_g = sqrt(2/mu_f^2 * (|B|^2 + l_h^2) * max(|B|^2, l_h^2))
    """
    A = np.asarray(instance.A, dtype=float)
    lam_min = np.linalg.eigvalsh(A)[:, 0]
    if np.any(lam_min <= 0):
        bad = int(np.argmin(lam_min))
        raise InstanceError(f"quad matrix of agent {bad} is not positive definite (min eigenvalue {lam_min[bad]:.3e})")
    mu_f = float(2.0 * lam_min.min())
    p = A.shape[1]
    kind = InequalityKind(instance.kind)
    if kind is InequalityKind.SHIFTED_L1:
        l_h = float(np.sqrt(p))
    elif kind is InequalityKind.AFFINE:
        l_h = float(max(np.linalg.norm(G, 2) for G in np.asarray(instance.G, float)))
    else:
        l_h = 0.0
    B = np.asarray(instance.B, dtype=float)
    normB = float(max(np.linalg.norm(Bi, 2) for Bi in B)) if B.shape[1] > 0 else 0.0
    sB, sh = normB**2, l_h**2
    l_g = float(np.sqrt(2.0 / mu_f**2 * (sB + sh) * max(sB, sh)))
    return mu_f, l_h, l_g


def _agent_rng(seed: int, agent: int, attempt: int) -> np.random.Generator:
    # counter-based stream keyed on (seed, agent, attempt): agents never share state
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, agent, attempt])))


def _random_orthogonal(rng, p):
    Q, R = np.linalg.qr(rng.standard_normal((p, p)))
    return Q * np.sign(np.diag(R))


def generate_instance(seed: int, n: int = 20, p: int = 5, kappa: float = 100.0,
                      max_attempts: int = 16) -> ProblemInstance:
    """Random nonsmooth instance with box sets, a full-rank equality coupling and
    a shifted l1 inequality coupling.

    ``A_i = U diag(linspace(1, kappa, p)) U'`` with ``U`` Haar-orthogonal; box
    bounds from ``U[-10,-9]`` and ``U[9,10]``; coupling matrices, linear terms
    and references standard Gaussian; offsets ``d_i ~ U(1, 6)``; equality
    right-hand side zero.
    """
    if n < 2:
        raise InstanceError(f"n must be at least 2, got {n}")
    if p < 1:
        raise InstanceError(f"p must be at least 1, got {p}")
    if kappa < 1:
        raise InstanceError(f"kappa must be at least 1, got {kappa}")
    spectrum = np.linspace(1.0, kappa, p)
    A, c, lo, hi, B, r, dvec = [], [], [], [], [], [], []
    for i in range(n):
        for attempt in range(max_attempts):
            rng = _agent_rng(seed, i, attempt)
            U = _random_orthogonal(rng, p)
            Ai = (U * spectrum) @ U.T
            Ai = 0.5 * (Ai + Ai.T)
            lo_i = rng.uniform(-10.0, -9.0, p)
            hi_i = rng.uniform(9.0, 10.0, p)
            Bi = rng.standard_normal((p, p))
            ci = rng.standard_normal(p)
            ri = rng.standard_normal(p)
            di = rng.uniform(1.0, 6.0)
            if np.linalg.cond(Bi) < 1e8:
                break
        else:
            raise InstanceError(f"agent {i}: no well-conditioned coupling matrix after {max_attempts} draws")
        A.append(Ai); c.append(ci); lo.append(lo_i); hi.append(hi_i)
        B.append(Bi); r.append(ri); dvec.append(di)
    return ProblemInstance(
        A=A, c=c, w=np.ones(n), lo=lo, hi=hi, B=B, b=np.zeros((n, p)),
        kind=InequalityKind.SHIFTED_L1, r=r, dvec=dvec,
        meta={"generator": "gaussian-box", "seed": int(seed), "n": int(n), "p": int(p), "kappa": float(kappa)},
    )
