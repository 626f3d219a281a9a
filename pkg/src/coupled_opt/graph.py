"""Communication topology, weighted Laplacian and its spectral data.

The stacked Laplacian ``W = H kron I`` is never formed: every product acts on
an ``(n, q)`` array whose rows are the per-node blocks, so ``W y`` is simply
``H @ Y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph


class TopologyError(ValueError):
    """Invalid or disconnected communication graph."""


@dataclass(frozen=True)
class SpectralData:
    norm_W: float
    lambda2_W: float
    pinv_H: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Network:
    """Weighted undirected graph on nodes ``0..n-1``.

    ``edges`` holds ``(i, j, weight)`` triples with ``i < j`` and positive
    weight.
    """

    n: int
    edges: tuple[tuple[int, int, float], ...]
    laplacian: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise TopologyError("a network needs at least one node")
        seen = set()
        H = np.zeros((self.n, self.n))
        for i, j, w in self.edges:
            if not (0 <= i < j < self.n):
                raise TopologyError(f"edge ({i}, {j}) must satisfy 0 <= i < j < n={self.n}")
            if not w > 0:
                raise TopologyError(f"edge ({i}, {j}) has nonpositive weight {w}")
            if (i, j) in seen:
                raise TopologyError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
            H[i, j] -= w
            H[j, i] -= w
            H[i, i] += w
            H[j, j] += w
        H.setflags(write=False)
        object.__setattr__(self, "laplacian", H)

    @classmethod
    def from_edges(cls, n, edges):
        norm = []
        for e in edges:
            i, j = int(e[0]), int(e[1])
            w = float(e[2]) if len(e) > 2 else 1.0
            if i > j:
                i, j = j, i
            norm.append((i, j, w))
        return cls(n, tuple(sorted(norm)))

    @cached_property
    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for i, j, _ in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(a) for a in nbrs]

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.neighbors])

    def components(self) -> list[list[int]]:
        adj = scipy.sparse.csr_matrix(
            (np.ones(len(self.edges)), ([e[0] for e in self.edges], [e[1] for e in self.edges])),
            shape=(self.n, self.n),
        )
        ncomp, labels = scipy.sparse.csgraph.connected_components(adj, directed=False)
        return [np.flatnonzero(labels == c).tolist() for c in range(ncomp)]

    def metropolis_weights(self) -> np.ndarray:
        """Doubly-stochastic mixing matrix with Metropolis-Hastings weights."""
        A = np.zeros((self.n, self.n))
        deg = self.degrees
        for i, j, _ in self.edges:
            A[i, j] = A[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
        A[np.diag_indices(self.n)] = 1.0 - A.sum(axis=1)
        return A

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": [[i, j, w] for i, j, w in self.edges]}


def build_ring_plus(n: int) -> Network:
    """Cycle ``(i, i+1)`` for consecutive nodes closed by the edge ``(0, n-1)``."""
    if n < 3:
        raise TopologyError(f"ring topology needs n >= 3, got n={n}")
    return Network.from_edges(n, [(i, i + 1) for i in range(n - 1)] + [(0, n - 1)])


def build_path(n: int) -> Network:
    if n < 2:
        raise TopologyError(f"path topology needs n >= 2, got n={n}")
    return Network.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def build_complete(n: int) -> Network:
    return Network.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


TOPOLOGIES = {
    "ring_plus": build_ring_plus,
    "path": build_path,
    "complete": build_complete,
}


def build_topology(spec, n: int) -> Network:
    """Build a network from a generator name or an explicit weighted edge list."""
    if isinstance(spec, str):
        try:
            return TOPOLOGIES[spec](n)
        except KeyError:
            raise TopologyError(
                f"unknown topology {spec!r}; expected one of {sorted(TOPOLOGIES)}"
            ) from None
    if isinstance(spec, dict):
        net = Network.from_edges(int(spec.get("n", n)), spec["edges"])
    else:
        net = Network.from_edges(n, spec)
    if net.n != n:
        raise TopologyError(f"edge list describes {net.n} nodes but the problem has {n} agents")
    return net


def apply_laplacian(net: Network, y: np.ndarray) -> np.ndarray:
    """Return ``t`` with ``t_i = sum_j H_ij (y_i - y_j)`` for every node block.

    ``y`` is ``(n,)`` or ``(n, q)``; rows are node blocks.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] != net.n:
        raise ValueError(f"expected {net.n} node blocks, got {y.shape[0]}")
    return net.laplacian @ y


def spectral(net: Network) -> SpectralData:
    """Eigen-decompose the Laplacian and extract norm, algebraic connectivity and pseudoinverse."""
    H = net.laplacian
    evals, evecs = np.linalg.eigh(H)
    norm = float(evals[-1])
    if net.n == 1:
        return SpectralData(norm_W=0.0, lambda2_W=0.0, pinv_H=np.zeros((1, 1)), eigenvalues=evals)
    thresh = 1e-9 * norm
    nonzero = evals > thresh
    if norm <= 0 or np.count_nonzero(nonzero) < net.n - 1:
        comps = net.components()
        raise TopologyError(f"graph is disconnected; components: {comps}")
    lam2 = float(evals[nonzero][0])
    inv = np.where(nonzero, 1.0 / np.where(nonzero, evals, 1.0), 0.0)
    pinv = (evecs * inv) @ evecs.T
    pinv = 0.5 * (pinv + pinv.T)
    return SpectralData(norm_W=norm, lambda2_W=lam2, pinv_H=pinv, eigenvalues=evals)
