"""Chunk-level KNN graph, PageRank centrality and core-chunk selection."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import Chunk, KeywordVocabulary
from .embedding import EmbeddingStore
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

LEXICAL = "lexical"
SEMANTIC = "semantic"


@dataclass(frozen=True)
class KnnConfig:
    """``k`` neighbours per node (half lexical, half semantic) and the
    PageRank teleport probability ``alpha``."""

    k: int = 2
    alpha: float = 0.15

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 2 or self.k % 2:
            raise ConfigError(f"k must be an even positive integer, got {self.k!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha!r}")


@dataclass
class KnnGraph:
    nodes: list[int]
    # node -> ((neighbour, provenance), ...) in proposal order
    proposals: dict[int, tuple] = field(default_factory=dict)
    # node -> sorted neighbours of the symmetrized graph
    adjacency: dict[int, tuple] = field(default_factory=dict)

    @classmethod
    def from_edges(cls, nodes: Sequence[int], edges) -> "KnnGraph":
        """Build an undirected graph directly from ``(u, v)`` pairs."""
        adj: dict[int, set] = {v: set() for v in nodes}
        props: dict[int, list] = {v: [] for v in nodes}
        for u, v in edges:
            if u == v:
                continue
            adj[u].add(v)
            adj[v].add(u)
            props[u].append((v, SEMANTIC))
        return cls(
            nodes=list(nodes),
            proposals={u: tuple(p) for u, p in props.items()},
            adjacency={u: tuple(sorted(a)) for u, a in adj.items()},
        )

    def __len__(self):
        return len(self.nodes)

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def edges(self) -> list[tuple[int, int]]:
        return sorted((u, v) for u, nbrs in self.adjacency.items() for v in nbrs if u < v)


def _top(scores: np.ndarray, ids: np.ndarray, allowed: np.ndarray, k: int) -> list[int]:
    """Positions of the ``k`` best allowed entries by (score desc, id asc)."""
    cand = np.flatnonzero(allowed)
    if k <= 0 or cand.size == 0:
        return []
    order = np.lexsort((ids[cand], -scores[cand]))
    return [int(cand[j]) for j in order[:k]]


def build_knn_graph(
    chunks: Sequence[Chunk],
    vocabulary: KeywordVocabulary,
    store: EmbeddingStore,
    cfg: KnnConfig,
    key_prefix: str = "chunk:",
) -> KnnGraph:
    """Link each chunk to its top-k/2 lexical and top-k/2 semantic neighbours.

    Lexical similarity counts shared keywords; semantic similarity is the
    cosine of the chunk embeddings. Semantic picks exclude the lexical ones.
    Ties are broken by ascending chunk id, and zero-overlap candidates still
    fill the lexical quota.
    """
    ids = np.array([c.chunk_id for c in chunks], dtype=np.int64)
    n = len(ids)
    half = cfg.k // 2
    graph = KnnGraph(nodes=[int(i) for i in ids])
    if n == 0:
        return graph

    chunk_kw = vocabulary.chunk_keywords()
    kw_index = {kw: j for j, kw in enumerate(sorted(vocabulary.keywords))}
    rows, cols = [], []
    for r, cid in enumerate(ids):
        for kw in chunk_kw.get(int(cid), ()):
            rows.append(r)
            cols.append(kw_index[kw])
    incidence = sp.csr_matrix(
        (np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n, max(len(kw_index), 1))
    )
    inc_t = incidence.T.tocsr()

    emb = store.matrix([f"{key_prefix}{int(c)}" for c in ids]).astype(float)
    norms = np.linalg.norm(emb, axis=1)
    norms[norms == 0] = 1.0
    emb = emb / norms[:, None]

    adj: dict[int, set] = {int(c): set() for c in ids}
    for i in range(n):
        lexical = np.asarray((incidence[i] @ inc_t).todense()).ravel().astype(float)
        allowed = np.ones(n, dtype=bool)
        allowed[i] = False
        s1 = _top(lexical, ids, allowed, half)
        allowed[s1] = False
        s2 = _top(emb @ emb[i], ids, allowed, half)
        u = int(ids[i])
        graph.proposals[u] = tuple([(int(ids[j]), LEXICAL) for j in s1] + [(int(ids[j]), SEMANTIC) for j in s2])
        for j in s1 + s2:
            adj[u].add(int(ids[j]))
            adj[int(ids[j])].add(u)
    graph.adjacency = {u: tuple(sorted(a)) for u, a in adj.items()}
    return graph


@dataclass
class PageRankScores:
    scores: dict[int, float]
    iterations: int
    residual: float
    converged: bool

    def as_array(self, nodes: Sequence[int]) -> np.ndarray:
        return np.array([self.scores[v] for v in nodes])


def pagerank(
    graph: KnnGraph,
    cfg: KnnConfig | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> PageRankScores:
    """Power iteration for ``pi = alpha/n + (1 - alpha) * pi P``.

    ``P`` is the row-stochastic transition matrix of the symmetrized graph
    (``P[i, j] = 1/deg(i)``); an isolated node links uniformly to every node.
    Stops once the L1 change between iterates drops below ``tol``.
    """
    cfg = cfg or KnnConfig()
    if tol <= 0:
        raise ConfigError("tol must be positive")
    nodes = graph.nodes
    n = len(nodes)
    if n == 0:
        raise ConfigError("pagerank of an empty graph")
    pos = {v: i for i, v in enumerate(nodes)}
    rows, cols = [], []
    for u in nodes:
        for v in graph.adjacency.get(u, ()):
            rows.append(pos[u])
            cols.append(pos[v])
    deg = np.bincount(rows, minlength=n).astype(float)
    weights = np.array([1.0 / deg[r] for r in rows])
    # transposed so that (pi P) = P^T pi
    pt = sp.csr_matrix((weights, (cols, rows)), shape=(n, n))
    dangling = deg == 0
    alpha = cfg.alpha

    pi = np.full(n, 1.0 / n)
    residual = float("inf")
    it = 0
    while it < max_iter:
        it += 1
        walk = pt @ pi + pi[dangling].sum() / n
        new = alpha / n + (1.0 - alpha) * walk
        residual = float(np.abs(new - pi).sum())
        pi = new
        if residual < tol:
            break
    converged = residual < tol
    if not converged:
        logger.warning("pagerank did not converge in %d iterations (residual %.3g)", max_iter, residual)
    return PageRankScores(
        scores={v: float(pi[i]) for i, v in enumerate(nodes)},
        iterations=it,
        residual=residual,
        converged=converged,
    )


def core_count(beta: float, n: int) -> int:
    """``ceil(beta * n)``, guarded against float noise such as 0.1 * 30."""
    return min(n, math.ceil(round(beta * n, 9)))


def select_core_chunks(
    scores: PageRankScores,
    beta: float,
    mode: str = "pagerank",
    seed: int = 0,
) -> list[int]:
    """Pick ``ceil(beta * n)`` core chunk ids.

    ``pagerank`` mode returns the highest-scoring ids (score desc, id asc);
    scores are compared at 12 decimals so float noise cannot split a tie.
    ``uniform`` mode returns a seeded sample without replacement.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta!r}")
    nodes = sorted(scores.scores)
    k = core_count(beta, len(nodes))
    if k == 0:
        return []
    if mode == "pagerank":
        return sorted(nodes, key=lambda v: (-round(scores.scores[v], 12), v))[:k]
    if mode == "uniform":
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(nodes), size=k, replace=False)
        return [nodes[int(i)] for i in picks]
    raise ConfigError(f"unknown core selection mode {mode!r}")


def degree_histogram(graph: KnnGraph) -> dict[int, int]:
    """Degree -> node count over the symmetrized graph."""
    counts = Counter(len(graph.adjacency.get(v, ())) for v in graph.nodes)
    return dict(sorted(counts.items()))
