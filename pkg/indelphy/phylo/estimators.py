"""
Correlation and distance estimators.

Shallow estimates correlate two leaf signature vectors over the odd blocks.
Deep estimates rebuild signatures of internal nodes from their leaves
(weights e^{d(x,a)}), correlate 2^h matched descendant pairs and keep the
entry with the smallest 2/3-radius. Non-positive correlations are never
errors here: they become +inf distances.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .errors import EstimatorError
from .signatures import PSEUDO_BLOCK, RECONSTRUCTED, SignatureVector


TRUE_SIG = "true-sig"
PSEUDO_SIG = "leaf-pseudo-sig"
RECONSTRUCTED_SIG = "reconstructed-sig"

_SOURCE_OF_MODE = {PSEUDO_BLOCK: PSEUDO_SIG, RECONSTRUCTED: RECONSTRUCTED_SIG}


class Forest(Protocol):
    def descendants_at(self, node: int, offset: int) -> List[int]: ...

    def leaves_under(self, node: int) -> List[int]: ...


@dataclass(frozen=True)
class CorrelationEstimate:
    value: float
    source: str
    pair: Tuple[int, int]


def _check_compatible(sa: SignatureVector, sb: SignatureVector):
    if sa.L != sb.L:
        raise EstimatorError(f"block count mismatch: node {sa.node} has {sa.L}, node {sb.node} has {sb.L}")
    if sa.L % 2:
        raise EstimatorError(f"odd block count {sa.L}")


def _odd_product_mean(a: np.ndarray, b: np.ndarray, L: int) -> float:
    return float((2.0 / L) * np.sum(a[0::2] * b[0::2]))


def shallow_correlation(sa: SignatureVector, sb: SignatureVector) -> CorrelationEstimate:
    """(2/L) * sum over odd blocks of sa[i] * sb[i]."""
    _check_compatible(sa, sb)
    source = _SOURCE_OF_MODE.get(sa.mode, TRUE_SIG)
    return CorrelationEstimate(_odd_product_mean(sa.values, sb.values, sa.L), source, (sa.node, sb.node))


def deep_correlation(sa_hat: SignatureVector, sb_hat: SignatureVector) -> CorrelationEstimate:
    _check_compatible(sa_hat, sb_hat)
    return CorrelationEstimate(
        _odd_product_mean(sa_hat.values, sb_hat.values, sa_hat.L), RECONSTRUCTED_SIG, (sa_hat.node, sb_hat.node)
    )


def correlation_to_distance(value: float) -> float:
    if value <= 0 or not math.isfinite(value):
        return math.inf
    return -math.log(4.0 * value)


def shallow_distance(c: CorrelationEstimate) -> float:
    """-ln(4 C); +inf for an out-of-range (non-positive) correlation."""
    return correlation_to_distance(c.value)


def correlation_matrix(vectors: Sequence[SignatureVector]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, 0))
    L = vectors[0].L
    for vec in vectors[1:]:
        _check_compatible(vectors[0], vec)
    odd = np.stack([v.odd for v in vectors])
    corr = (2.0 / L) * (odd @ odd.T)
    upper = np.triu(corr)
    return upper + np.triu(corr, 1).T


def distance_matrix_from_correlations(corr: np.ndarray) -> np.ndarray:
    out = np.full(corr.shape, math.inf)
    positive = corr > 0
    out[positive] = -np.log(4.0 * corr[positive])
    return out


# ---------------------------------------------------------------------------
# Known (reconstructed) distances
# ---------------------------------------------------------------------------

class KnownDistances:
    """d(a, x) for x in the subtree of a, as fixed by the three-point rule."""

    def __init__(self):
        self._table: Dict[Tuple[int, int], float] = {}

    def set(self, ancestor: int, node: int, value: float):
        if value < 0:
            raise EstimatorError(f"negative known distance d({ancestor},{node})={value!r}")
        self._table[(ancestor, node)] = value

    def get(self, ancestor: int, node: int) -> float:
        if ancestor == node:
            return 0.0
        try:
            return self._table[(ancestor, node)]
        except KeyError:
            raise EstimatorError(f"no known distance between {ancestor} and {node}") from None

    def __contains__(self, key) -> bool:
        a, x = key
        return a == x or (a, x) in self._table

    def __len__(self) -> int:
        return len(self._table)


def reconstruct_signature(
    leaf_sigs: Mapping[int, SignatureVector],
    A: Sequence[int],
    dists: KnownDistances,
    a: int,
) -> SignatureVector:
    """s_hat_a = (1/|A|) sum_x e^{d(x,a)} s_x."""
    if not A:
        raise EstimatorError(f"empty leaf set under node {a}")
    try:
        stack = np.stack([leaf_sigs[x].values for x in A])
    except KeyError as e:
        raise EstimatorError(f"no signature for leaf {e.args[0]}") from None
    weights = np.exp([dists.get(a, x) for x in A])
    values = (weights[:, None] * stack).sum(axis=0) / len(A)
    return SignatureVector(a, values, 0, RECONSTRUCTED)


def pair_estimate(chat: Union[CorrelationEstimate, float], d_aj_a: float, d_bj_b: float) -> float:
    """-(d_aj_a + d_bj_b) - ln(4 C_hat); +inf when C_hat <= 0."""
    value = chat.value if isinstance(chat, CorrelationEstimate) else float(chat)
    if value <= 0 or not math.isfinite(value):
        return math.inf
    return -(d_aj_a + d_bj_b) - math.log(4.0 * value)


@dataclass(frozen=True)
class DeepAggregate:
    winner: int
    value: float
    radii: Tuple[float, ...]


def radius_threshold(m: int) -> int:
    """Number of other points an interval must capture: ceil(2m/3), capped at m-1."""
    return min(-(-2 * m // 3), m - 1)


def aggregate_deep(entries: Sequence[float]) -> DeepAggregate:
    """Entry with the smallest radius capturing ceil(2m/3) of the other entries."""
    e = np.asarray(entries, dtype=float)
    m = e.size
    if m == 0:
        raise EstimatorError("no deep estimates to aggregate")
    if not np.isfinite(e).any():
        raise EstimatorError("all deep estimates are infinite")
    need = radius_threshold(m)
    if need == 0:
        return DeepAggregate(0, float(e[0]), (0.0,))
    with np.errstate(invalid="ignore"):
        gaps = np.abs(e[:, None] - e[None, :])
    gaps[np.isnan(gaps)] = math.inf
    np.fill_diagonal(gaps, math.inf)
    gaps.sort(axis=1)
    radii = gaps[:, need - 1]
    # argmin keeps the first (lowest) index among ties
    winner = int(np.argmin(radii))
    return DeepAggregate(winner, float(e[winner]), tuple(float(r) for r in radii))


def diameter_test(entries: Sequence[float], r: float) -> int:
    """1 iff at least ceil(m/2) entries satisfy |e| <= r."""
    e = np.asarray(entries, dtype=float)
    if e.size == 0:
        raise EstimatorError("diameter test needs at least one entry")
    inside = int(np.count_nonzero(np.abs(e) <= r))
    return int(inside >= -(-e.size // 2))


@dataclass(frozen=True)
class DeepEstimateSet:
    pair: Tuple[int, int]
    height_offset: int
    entries: Tuple[float, ...]
    radii: Tuple[float, ...]
    winner: int
    value: float

    def passes(self, r: float) -> bool:
        return diameter_test(self.entries, r) == 1


def deep_distance(
    pair: Tuple[int, int],
    h: int,
    leaf_sigs: Mapping[int, SignatureVector],
    dists: KnownDistances,
    forest: Forest,
    correlate: Optional[Callable[[int, int], float]] = None,
    cache: Optional[Dict[int, SignatureVector]] = None,
) -> DeepEstimateSet:
    """d_hat(a, b) from the 2^h descendant pairs h levels below a and b (BFS order)."""
    a, b = pair
    a_nodes = forest.descendants_at(a, h)
    b_nodes = forest.descendants_at(b, h)
    width = 2 ** h
    if len(a_nodes) != width or len(b_nodes) != width:
        raise EstimatorError(f"pair ({a},{b}) lacks {width} descendants at offset {h}")

    if correlate is None:
        cache = {} if cache is None else cache

        def hat(node: int) -> SignatureVector:
            if node not in cache:
                cache[node] = reconstruct_signature(leaf_sigs, forest.leaves_under(node), dists, node)
            return cache[node]

        def correlate(x: int, y: int) -> float:
            return deep_correlation(hat(x), hat(y)).value

    entries = tuple(
        pair_estimate(correlate(aj, bj), dists.get(a, aj), dists.get(b, bj))
        for aj, bj in zip(a_nodes, b_nodes)
    )
    if not any(math.isfinite(x) for x in entries):
        return DeepEstimateSet(pair, h, entries, tuple(math.inf for _ in entries), 0, math.inf)
    agg = aggregate_deep(entries)
    return DeepEstimateSet(pair, h, entries, agg.radii, agg.winner, agg.value)


# ---------------------------------------------------------------------------
# Distance tables and sources
# ---------------------------------------------------------------------------

SHALLOW = "shallow"
DEEP = "deep"
DERIVED = "derived"
ROUNDED = "rounded"
ORACLE = "oracle"


class DistanceTable:
    """Pairwise estimates keyed by node name, each with its provenance."""

    def __init__(self):
        self._rows: Dict[Tuple[str, str], Tuple[float, str]] = {}

    @staticmethod
    def _key(a: str, b: str) -> Tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def set(self, a: str, b: str, value: float, source: str):
        self._rows[self._key(a, b)] = (float(value), source)

    def get(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self._rows[self._key(a, b)][0]

    def source(self, a: str, b: str) -> str:
        return self._rows[self._key(a, b)][1]

    def __len__(self) -> int:
        return len(self._rows)

    def to_tsv(self) -> str:
        lines = []
        for (a, b), (value, source) in sorted(self._rows.items()):
            text = repr(value) if math.isfinite(value) else "inf"
            lines.append(f"{a}\t{b}\t{text}\t{source}")
        return "\n".join(lines) + ("\n" if lines else "")


class DistanceSource(ABC):
    """Leaf-level distance information fed to tree reconstruction."""

    provenance = SHALLOW

    @property
    @abstractmethod
    def n_leaves(self) -> int:
        ...

    @abstractmethod
    def leaf_matrix(self) -> np.ndarray:
        """n x n matrix of leaf dissimilarities (+inf where undefined)."""

    @property
    def supports_deep(self) -> bool:
        return False

    def deep_estimate(
        self,
        pair: Tuple[int, int],
        h: int,
        dists: KnownDistances,
        forest: Forest,
        cache: Optional[Dict[int, SignatureVector]] = None,
    ) -> DeepEstimateSet:
        """d_hat for a pair of roots; ``cache`` holds reconstructed signatures for one forest only."""
        raise NotImplementedError(f"{type(self).__name__} has no deep estimator")

    def signature_vectors(self) -> List[SignatureVector]:
        return []


class SignatureDistances(DistanceSource):
    """Shallow -ln 4C and deep d_hat from leaf signature vectors keyed 0..n-1."""

    def __init__(self, vectors: Mapping[int, SignatureVector]):
        self.vectors = dict(vectors)
        self._matrix: Optional[np.ndarray] = None

    @property
    def n_leaves(self) -> int:
        return len(self.vectors)

    def leaf_matrix(self) -> np.ndarray:
        if self._matrix is None:
            ordered = [self.vectors[i] for i in range(self.n_leaves)]
            self._matrix = distance_matrix_from_correlations(correlation_matrix(ordered))
            np.fill_diagonal(self._matrix, 0.0)
        return self._matrix

    @property
    def supports_deep(self) -> bool:
        return True

    def deep_estimate(self, pair, h, dists, forest, cache=None) -> DeepEstimateSet:
        return deep_distance(pair, h, self.vectors, dists, forest, cache=cache)

    def signature_vectors(self) -> List[SignatureVector]:
        return [self.vectors[i] for i in sorted(self.vectors)]


class OracleDistances(DistanceSource):
    """Exact leaf distances; reconstruction derives every internal distance from them."""

    provenance = ORACLE

    def __init__(self, matrix):
        self.matrix = np.array(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise EstimatorError("oracle distance matrix must be square")
        if not np.allclose(self.matrix, self.matrix.T):
            raise EstimatorError("oracle distance matrix must be symmetric")

    @property
    def n_leaves(self) -> int:
        return self.matrix.shape[0]

    def leaf_matrix(self) -> np.ndarray:
        return self.matrix
