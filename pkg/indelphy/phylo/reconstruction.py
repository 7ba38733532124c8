"""
Tree reconstruction from leaf data.

Level by level, the current subtree roots are compared pairwise, quartets whose
pairwise distances are all short are resolved with the Four Point Method, and
pairs never separated by a resolved quartet are merged as cherries. A short
quartet counts as resolved only when its FPM margin reaches resolve_margin
multiples of lambda_min; on an additive grid tree every margin is at least
2 lambda_min. Edge lengths come from the three-point rule rounded onto the
lambda_min grid, which also fixes the known distances used by the deep
estimators of later levels.

Below the cutoff height distances between roots are derived from the leaf
matrix; above it (signature sources only) they come from deep estimates and
shortness is decided by the diameter test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import dendropy
import numpy as np
from dendropy.calculate import treecompare

from .errors import (
    DegenerateSequencesError,
    EstimatorError,
    InsufficientLeavesError,
    LeafSetMismatchError,
    ReconstructionStall,
    SequenceFormatError,
)
from .estimators import (
    DEEP,
    DERIVED,
    ROUNDED,
    DeepEstimateSet,
    DistanceSource,
    DistanceTable,
    KnownDistances,
    OracleDistances,
    SignatureDistances,
    diameter_test,
)
from .indel_sim import Bitstring
from .newick import NewickNode, format_newick, parse_newick
from .signatures import SignatureVector, block_scheme, leaf_signature_vectors
from .tree_model import ModelTree


SPLITS = ("ab|cd", "ac|bd", "ad|bc")
# column pairs kept together / separated by each split
_TOGETHER = (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2)))
_SEPARATED = tuple(
    tuple(p for p in itertools.combinations(range(4), 2) if p not in together) for together in _TOGETHER
)
_PAIR_COLUMNS = tuple(itertools.combinations(range(4), 2))
_CHUNK = 200_000
GRID_TOLERANCE = 1e-9


# ---------------------------------------------------------------------------
# Quartet primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuartetSplit:
    taxa: Tuple[int, int, int, int]
    split: str
    margin: float

    def sides(self) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        (i, j), (k, l) = _TOGETHER[SPLITS.index(self.split)]
        t = self.taxa
        return (t[i], t[j]), (t[k], t[l])

    def separates(self, a: int, b: int) -> bool:
        left, right = self.sides()
        return (a in left and b in right) or (a in right and b in left)

    def joins(self, a: int, b: int) -> bool:
        return {a, b} in ({*s} for s in self.sides())


def four_point_method(D, taxa: Sequence[int] = (0, 1, 2, 3)) -> QuartetSplit:
    """Split with the smallest within-pair sum; ties prefer ab|cd, then ac|bd."""
    D = np.asarray(D, dtype=float)
    if D.shape != (4, 4):
        raise EstimatorError(f"four point method needs a 4x4 matrix, got {D.shape}")
    if not np.isfinite(D).all():
        raise EstimatorError("four point method needs finite dissimilarities")
    sums = [D[0, 1] + D[2, 3], D[0, 2] + D[1, 3], D[0, 3] + D[1, 2]]
    best = int(np.argmin(sums))
    ordered = sorted(sums)
    return QuartetSplit(tuple(int(t) for t in taxa), SPLITS[best], float(ordered[1] - ordered[0]))


def three_point(D_ab: float, D_ac: float, D_bc: float) -> float:
    """Distance from a to the meeting point of a, b and c."""
    return 0.5 * (D_ab + D_ac - D_bc)


def grid_steps(x: float, lambda_min: float) -> int:
    if lambda_min <= 0:
        raise ValueError(f"lambda_min must be positive, got {lambda_min!r}")
    if not math.isfinite(x):
        raise ValueError(f"cannot round non-finite value {x!r}")
    return max(1, int(math.floor(x / lambda_min + 0.5 + GRID_TOLERANCE)))


def round_to_grid(x: float, lambda_min: float) -> float:
    """Nearest positive multiple of lambda_min; halves round up."""
    return grid_steps(x, lambda_min) * lambda_min


class LevelDistances:
    """Dissimilarities between the roots of one level.

    ``deep`` holds the deep estimate sets by index pair when the level uses
    deep estimates; shortness is then decided by the diameter test.
    """

    def __init__(self, nodes: Sequence[int], matrix: np.ndarray, deep: Optional[Dict[Tuple[int, int], DeepEstimateSet]] = None):
        self.nodes = list(nodes)
        self.index = {v: i for i, v in enumerate(self.nodes)}
        self.D = matrix
        self.deep = deep

    def distance(self, a: int, b: int) -> float:
        return float(self.D[self.index[a], self.index[b]])

    def pair_is_short(self, a: int, b: int, r: float, h: int = 1) -> bool:
        i, j = sorted((self.index[a], self.index[b]))
        if self.deep is None or h == 0:
            return bool(self.D[i, j] <= r)
        return diameter_test(self.deep[(i, j)].entries, r) == 1

    def short_matrix(self, r: float) -> np.ndarray:
        m = len(self.nodes)
        if self.deep is None:
            short = self.D <= r
        else:
            short = np.zeros((m, m), dtype=bool)
            for (i, j), est in self.deep.items():
                short[i, j] = short[j, i] = diameter_test(est.entries, r) == 1
        np.fill_diagonal(short, True)
        return short


def is_short_quartet(Q: Sequence[int], h: int, r: float, estimates: LevelDistances) -> bool:
    """All six pairs within r (h = 0 or derived levels) or passing the diameter test (deep levels)."""
    return all(estimates.pair_is_short(a, b, r, h) for a, b in itertools.combinations(Q, 2))


def _greedy_pairs(candidates: Iterable[Tuple[float, int, int]]) -> List[Tuple[int, int]]:
    used: Set[int] = set()
    pairs = []
    for _, a, b in sorted(candidates):
        if a not in used and b not in used:
            pairs.append((a, b))
            used.update((a, b))
    return pairs


@dataclass
class QuartetTally:
    """Per-pair counts over resolved quartets, indexed like ``nodes`` (upper triangle)."""
    nodes: List[int]
    together: np.ndarray
    separated: np.ndarray

    @classmethod
    def empty(cls, nodes: Sequence[int]) -> "QuartetTally":
        m = len(nodes)
        return cls(list(nodes), np.zeros((m, m), dtype=np.int64), np.zeros((m, m), dtype=np.int64))

    @classmethod
    def from_splits(cls, nodes: Sequence[int], splits: Iterable[QuartetSplit], min_margin: float = 0.0) -> "QuartetTally":
        tally = cls.empty(nodes)
        index = {v: i for i, v in enumerate(tally.nodes)}

        def bump(counts: np.ndarray, a: int, b: int):
            i, j = sorted((index[a], index[b]))
            counts[i, j] += 1

        for q in splits:
            if q.margin < min_margin:
                continue
            left, right = q.sides()
            for a, b in (left, right):
                bump(tally.together, a, b)
            for a in left:
                for b in right:
                    bump(tally.separated, a, b)
        return tally

    def candidate_pairs(self) -> List[Tuple[int, int]]:
        """Index pairs joined at least once and never separated."""
        ok = np.triu((self.together > 0) & (self.separated == 0), 1)
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(ok))]


def pick_cherries(
    nodes: Sequence[int],
    splits: Union[QuartetTally, Iterable[QuartetSplit]],
    distances: Optional[LevelDistances] = None,
    level: int = 0,
    min_margin: float = 0.0,
) -> List[Tuple[int, int]]:
    """Pairs never separated by a resolved quartet split and joined by at least one.

    Splits with a margin below ``min_margin`` are ignored. Pairing is greedy
    and disjoint, ordered by (distance, a, b).
    """
    tally = splits if isinstance(splits, QuartetTally) else QuartetTally.from_splits(nodes, splits, min_margin)
    candidates = []
    for i, j in tally.candidate_pairs():
        a, b = tally.nodes[i], tally.nodes[j]
        d = distances.distance(a, b) if distances is not None else 0.0
        candidates.append((d, a, b))
    pairs = _greedy_pairs(candidates)
    if not pairs and len(nodes) > 2:
        raise ReconstructionStall(level, len(nodes))
    return pairs


# ---------------------------------------------------------------------------
# Partial forest
# ---------------------------------------------------------------------------

class PartialForest:
    """Disjoint rooted subtrees built so far, with integer grid edge lengths."""

    def __init__(self, n_leaves: int, lambda_min: float):
        self.n_leaves = n_leaves
        self.lambda_min = lambda_min
        self.children: Dict[int, Tuple[int, int]] = {}
        self.steps: Dict[int, int] = {}
        self.roots: List[int] = list(range(n_leaves))
        self.level = 0
        self.known = KnownDistances()
        self._below: Dict[int, Dict[int, int]] = {v: {v: 0} for v in range(n_leaves)}
        self._next_id = n_leaves

    def is_leaf(self, node: int) -> bool:
        return node < self.n_leaves

    def descendants_at(self, node: int, offset: int) -> List[int]:
        frontier = [node]
        for _ in range(offset):
            frontier = [c for v in frontier for c in self.children.get(v, ())]
        return frontier

    def leaves_under(self, node: int) -> List[int]:
        return sorted(v for v in self._below[node] if self.is_leaf(v))

    def min_depth(self, node: int) -> int:
        depth = 0
        frontier = [node]
        while all(v in self.children for v in frontier):
            frontier = [c for v in frontier for c in self.children[v]]
            depth += 1
        return depth

    def steps_between(self, ancestor: int, node: int) -> int:
        return self._below[ancestor][node]

    def merge(self, a: int, b: int, steps_a: int, steps_b: int) -> int:
        w = self._next_id
        self._next_id += 1
        self.children[w] = (a, b)
        self.steps[a] = steps_a
        self.steps[b] = steps_b
        below = {w: 0}
        for child, edge in ((a, steps_a), (b, steps_b)):
            for x, s in self._below[child].items():
                below[x] = s + edge
                self.known.set(w, x, (s + edge) * self.lambda_min)
        self._below[w] = below
        self.roots = sorted([v for v in self.roots if v not in (a, b)] + [w])
        return w

    def adjacency(self) -> Dict[int, Set[int]]:
        adj: Dict[int, Set[int]] = {v: set() for v in range(self._next_id)}
        for w, (a, b) in self.children.items():
            adj[w].update((a, b))
            adj[a].add(w)
            adj[b].add(w)
        return adj

    def new_node(self) -> int:
        w = self._next_id
        self._next_id += 1
        return w


# ---------------------------------------------------------------------------
# Reconstructed (unrooted) trees
# ---------------------------------------------------------------------------

Edge = FrozenSet[int]


@dataclass
class ReconstructedTree:
    """Unrooted binary tree over leaf labels."""
    labels: Dict[int, str]
    adjacency: Dict[int, Tuple[int, ...]]
    edge_lengths: Dict[Edge, float]
    lambda_min: Optional[float] = None
    edge_tau: Optional[Dict[Edge, int]] = None
    decision_log: List[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    distance_table: Optional[DistanceTable] = field(default=None, repr=False, compare=False)
    signature_vectors: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_leaves(self) -> int:
        return len(self.labels)

    def leaf_set(self) -> FrozenSet[str]:
        return frozenset(self.labels.values())

    def validate(self):
        for v, nbrs in self.adjacency.items():
            expected = 1 if v in self.labels else 3
            if len(nbrs) != expected:
                raise SequenceFormatError("<tree>", None, f"node {v} has degree {len(nbrs)}, expected {expected}")

    def _edge_sides(self) -> Iterator[Tuple[Edge, FrozenSet[str]]]:
        """(edge, labels on the side not holding the smallest label)."""
        everything = self.leaf_set()
        ref = min(everything)
        start = next(iter(self.adjacency))
        order = []
        parent = {start: None}
        stack = [start]
        while stack:
            v = stack.pop()
            order.append(v)
            for u in self.adjacency[v]:
                if u not in parent:
                    parent[u] = v
                    stack.append(u)
        under: Dict[int, FrozenSet[str]] = {}
        for v in reversed(order):
            below = {self.labels[v]} if v in self.labels else set()
            for u in self.adjacency[v]:
                if parent.get(u) == v:
                    below |= under[u]
            under[v] = frozenset(below)
            if parent[v] is not None:
                side = under[v] if ref not in under[v] else everything - under[v]
                yield frozenset((v, parent[v])), side

    def splits(self) -> Set[FrozenSet[str]]:
        """Nontrivial bipartitions, each named by the side without the smallest label."""
        n = self.n_leaves
        return {side for _, side in self._edge_sides() if 2 <= len(side) <= n - 2}

    def split_lengths(self) -> Dict[FrozenSet[str], float]:
        return {side: self.edge_lengths[edge] for edge, side in self._edge_sides()}

    def split_taus(self) -> Dict[FrozenSet[str], int]:
        if self.edge_tau is None:
            raise ValueError("tree carries no grid multiples")
        return {side: self.edge_tau[edge] for edge, side in self._edge_sides()}

    def to_node(self) -> NewickNode:
        ref_leaf = min(self.labels, key=lambda v: self.labels[v])
        top = next(iter(self.adjacency[ref_leaf]))

        def build(v: int, parent: Optional[int]) -> NewickNode:
            length = self.edge_lengths[frozenset((v, parent))] if parent is not None else None
            if v in self.labels:
                return NewickNode(label=self.labels[v], length=length)
            kids = [build(u, v) for u in self.adjacency[v] if u != parent]
            return NewickNode(length=length, children=kids)

        return build(top, None)

    def to_newick(self) -> str:
        return format_newick(self.to_node())

    @classmethod
    def from_adjacency(cls, labels, adjacency, lengths, lambda_min=None, taus=None, **extra) -> "ReconstructedTree":
        adj = {v: set(n) for v, n in adjacency.items()}
        lengths = dict(lengths)
        taus = dict(taus) if taus is not None else None
        # suppress degree-2 nodes (e.g. a root)
        for v in [v for v, n in adj.items() if len(n) == 2 and v not in labels]:
            u, w = sorted(adj[v])
            e1, e2 = frozenset((u, v)), frozenset((v, w))
            lengths[frozenset((u, w))] = lengths.pop(e1) + lengths.pop(e2)
            if taus is not None:
                taus[frozenset((u, w))] = taus.pop(e1) + taus.pop(e2)
            adj[u].discard(v)
            adj[w].discard(v)
            adj[u].add(w)
            adj[w].add(u)
            del adj[v]
        tree = cls(
            labels=dict(labels),
            adjacency={v: tuple(sorted(n)) for v, n in sorted(adj.items())},
            edge_lengths=lengths,
            lambda_min=lambda_min,
            edge_tau=taus,
            **extra,
        )
        tree.validate()
        return tree

    @classmethod
    def from_model_tree(cls, tree: ModelTree) -> "ReconstructedTree":
        """Unrooted view of a model tree (root suppressed)."""
        adjacency: Dict[int, Set[int]] = {v: set() for v in range(tree.n_nodes)}
        lengths: Dict[Edge, float] = {}
        taus: Dict[Edge, int] = {}
        for child, parent, _ in tree.edges():
            adjacency[child].add(parent)
            adjacency[parent].add(child)
            lengths[frozenset((child, parent))] = tree.edge_lambda(child)
            taus[frozenset((child, parent))] = tree.tau(child)
        return cls.from_adjacency(tree.labels, adjacency, lengths, tree.lambda_min, taus)

    @classmethod
    def from_newick(cls, text: str, lambda_min: Optional[float] = None, source: str = "<string>") -> "ReconstructedTree":
        root = parse_newick(text, source)
        labels: Dict[int, str] = {}
        adjacency: Dict[int, Set[int]] = {}
        lengths: Dict[Edge, float] = {}
        counter = itertools.count()

        def walk(node: NewickNode, parent: Optional[int]):
            me = next(counter)
            adjacency[me] = set()
            if node.is_leaf:
                labels[me] = node.label
            if parent is not None:
                adjacency[me].add(parent)
                adjacency[parent].add(me)
                lengths[frozenset((me, parent))] = node.length if node.length is not None else 0.0
            for child in node.children:
                walk(child, me)

        walk(root, None)
        if len(labels) < 3:
            raise SequenceFormatError(source, None, "tree needs at least three leaves")
        taus = None
        if lambda_min:
            taus = {e: grid_steps(x, lambda_min) for e, x in lengths.items()}
        try:
            return cls.from_adjacency(labels, adjacency, lengths, lambda_min, taus)
        except KeyError as e:
            raise SequenceFormatError(source, None, f"malformed tree near node {e}") from e


def _dendropy_tree(tree: ReconstructedTree, taxa: dendropy.TaxonNamespace) -> dendropy.Tree:
    return dendropy.Tree.get(
        data=tree.to_newick(),
        schema="newick",
        taxon_namespace=taxa,
        preserve_underscores=True,
        rooting="force-unrooted",
    )


def rf_distance(t1: ReconstructedTree, t2: ReconstructedTree) -> int:
    """Unweighted Robinson-Foulds distance over a shared taxon namespace."""
    if t1.leaf_set() != t2.leaf_set():
        missing = sorted(t1.leaf_set() ^ t2.leaf_set())
        raise LeafSetMismatchError(f"leaf sets differ: {', '.join(missing[:5])}")
    taxa = dendropy.TaxonNamespace()
    first, second = _dendropy_tree(t1, taxa), _dendropy_tree(t2, taxa)
    return int(treecompare.unweighted_robinson_foulds_distance(first, second))


# ---------------------------------------------------------------------------
# TreeReconstruct
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconstructionSettings:
    lambda_min: float
    k: int = 10000
    zeta: float = 0.01
    delta: float = 1.0
    r: float = 0.0
    deep_h: int = 2
    mode: str = "sym"
    log_quartet_limit: int = 20000
    resolve_margin: float = 1.0

    @property
    def min_margin(self) -> float:
        """Smallest FPM margin that counts as a resolved quartet."""
        return self.resolve_margin * self.lambda_min * (1.0 - GRID_TOLERANCE)

    def radius(self, n: int) -> float:
        """Configured r, or 2 delta log2 log2 n when unset."""
        if self.r > 0:
            return self.r
        return 2.0 * self.delta * math.log2(math.log2(n))

    def cutoff_height(self, n: int) -> int:
        return int(math.ceil(self.delta * math.log2(math.log2(n))))


class _DecisionLog:
    def __init__(self, quartet_limit: int):
        self.lines: List[str] = []
        self.quartet_limit = quartet_limit
        self.quartets_logged = 0
        self.quartets_omitted = 0

    def add(self, line: str):
        self.lines.append(line)

    def quartet(self, h: int, taxa, split: Optional[str], short: bool):
        if self.quartets_logged >= self.quartet_limit:
            self.quartets_omitted += 1
            return
        self.quartets_logged += 1
        a, b, c, d = taxa
        if split is None:
            text = "none"
        else:
            (i, j), (k, l) = _TOGETHER[SPLITS.index(split)]
            text = f"{taxa[i]},{taxa[j]}|{taxa[k]},{taxa[l]}"
        self.lines.append(f"h={h} quartet={a},{b},{c},{d} split={text} short={int(short)}")


def _quartet_chunks(m: int) -> Iterator[np.ndarray]:
    combos = itertools.combinations(range(m), 4)
    while True:
        chunk = list(itertools.islice(combos, _CHUNK))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.int64)


@dataclass
class _LevelQuartets:
    tally: QuartetTally
    short_count: int
    resolved: np.ndarray
    choice: np.ndarray


def _resolve_level(h: int, level: LevelDistances, r: float, min_margin: float, log: _DecisionLog) -> _LevelQuartets:
    """FPM on every short quartet of the level; only margins >= min_margin are tallied."""
    m = len(level.nodes)
    short_pair = level.short_matrix(r)
    D = level.D
    tally = QuartetTally.empty(level.nodes)
    short_count = 0
    kept_q, kept_c = [], []
    nodes = np.asarray(level.nodes)
    for q in _quartet_chunks(m):
        short = np.ones(len(q), dtype=bool)
        for i, j in _PAIR_COLUMNS:
            short &= short_pair[q[:, i], q[:, j]]
        sums = np.stack([D[q[:, a], q[:, b]] + D[q[:, c], q[:, d]] for (a, b), (c, d) in _TOGETHER], axis=1)
        finite = np.isfinite(sums).all(axis=1)
        choice = np.argmin(sums, axis=1)
        ordered = np.sort(np.where(finite[:, None], sums, 0.0), axis=1)
        short &= finite
        resolved = short & (ordered[:, 1] - ordered[:, 0] >= min_margin)
        short_count += int(short.sum())

        if log.quartets_logged < log.quartet_limit:
            budget = log.quartet_limit - log.quartets_logged
            for row in range(min(budget, len(q))):
                split = SPLITS[choice[row]] if finite[row] and (resolved[row] or not short[row]) else None
                log.quartet(h, tuple(int(x) for x in nodes[q[row]]), split, bool(short[row]))
            log.quartets_omitted += max(len(q) - budget, 0)
        else:
            log.quartets_omitted += len(q)

        for c in range(3):
            sel = q[resolved & (choice == c)]
            if not len(sel):
                continue
            for i, j in _TOGETHER[c]:
                np.add.at(tally.together, (sel[:, i], sel[:, j]), 1)
            for i, j in _SEPARATED[c]:
                np.add.at(tally.separated, (sel[:, i], sel[:, j]), 1)
        kept_q.append(q[resolved])
        kept_c.append(choice[resolved])

    resolved_q = np.concatenate(kept_q) if kept_q else np.zeros((0, 4), dtype=np.int64)
    resolved_c = np.concatenate(kept_c) if kept_c else np.zeros(0, dtype=np.int64)
    return _LevelQuartets(tally, short_count, resolved_q, resolved_c)


def _witness_partners(quartets: _LevelQuartets, i: int, j: int) -> List[int]:
    """Level indices sharing a resolved quartet in which i and j sit together."""
    partners: Set[int] = set()
    q, choice = quartets.resolved, quartets.choice
    for c in range(3):
        rows = q[choice == c]
        for (a, b), (x, y) in (_TOGETHER[c], _TOGETHER[c][::-1]):
            hit = rows[(rows[:, a] == i) & (rows[:, b] == j)]
            partners.update(hit[:, x].tolist())
            partners.update(hit[:, y].tolist())
    return sorted(partners)


def _median_steps(values: List[float], lambda_min: float) -> int:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        raise EstimatorError("no finite three-point estimate")
    return grid_steps(float(np.median(finite)), lambda_min)


class _Reconstructor:
    def __init__(self, source: DistanceSource, labels: Sequence[str], settings: ReconstructionSettings):
        self.source = source
        self.labels = list(labels)
        self.settings = settings
        self.n = len(self.labels)
        self.r = settings.radius(self.n)
        self.cutoff = settings.cutoff_height(self.n)
        self.forest = PartialForest(self.n, settings.lambda_min)
        self.log = _DecisionLog(settings.log_quartet_limit)
        self.leaf_D = source.leaf_matrix()
        self.table = DistanceTable()
        self.signature_cache: Dict[int, SignatureVector] = {}
        self.stats = {"levels": 0, "deep_levels": 0, "short_quartets": 0, "resolved_quartets": 0, "cherries": 0}
        self._record_leaf_table()

    def _record_leaf_table(self):
        for i in range(self.n):
            for j in range(i + 1, self.n):
                self.table.set(self.labels[i], self.labels[j], float(self.leaf_D[i, j]), self.source.provenance)

    def _derived(self, roots: Sequence[int]) -> np.ndarray:
        """Mean over finite leaf pairs of D(x,y) - d(x,u) - d(y,v)."""
        members, groups, offsets = [], [], []
        for g, u in enumerate(roots):
            for x in self.forest.leaves_under(u):
                members.append(x)
                groups.append(g)
                offsets.append(self.forest.known.get(u, x))
        members = np.asarray(members)
        offsets = np.asarray(offsets)
        sub = self.leaf_D[np.ix_(members, members)]
        finite = np.isfinite(sub)
        adjusted = np.where(finite, sub - offsets[:, None] - offsets[None, :], 0.0)
        onehot = np.zeros((len(roots), len(members)))
        onehot[groups, np.arange(len(members))] = 1.0
        sums = onehot @ adjusted @ onehot.T
        counts = onehot @ finite.astype(float) @ onehot.T
        D = np.full((len(roots), len(roots)), math.inf)
        np.divide(sums, counts, out=D, where=counts > 0)
        np.fill_diagonal(D, 0.0)
        return D

    def name(self, node: int) -> str:
        return self.labels[node] if self.forest.is_leaf(node) else f"n{node}"

    def _record_level(self, level: LevelDistances, provenance: str):
        nodes = level.nodes
        for i in range(len(nodes)):
            for j in range(i + 1, len(nodes)):
                if self.forest.is_leaf(nodes[i]) and self.forest.is_leaf(nodes[j]):
                    continue
                self.table.set(self.name(nodes[i]), self.name(nodes[j]), float(level.D[i, j]), provenance)

    def level_distances(self, h: int) -> LevelDistances:
        roots = self.forest.roots
        if not (self.source.supports_deep and h >= self.cutoff):
            level = LevelDistances(roots, self._derived(roots))
            self._record_level(level, DERIVED)
            return level
        m = len(roots)
        D = np.full((m, m), math.inf)
        np.fill_diagonal(D, 0.0)
        deep: Dict[Tuple[int, int], DeepEstimateSet] = {}
        depths = {u: self.forest.min_depth(u) for u in roots}
        for i in range(m):
            for j in range(i + 1, m):
                u, v = roots[i], roots[j]
                offset = min(self.settings.deep_h, depths[u], depths[v])
                est = self.source.deep_estimate((u, v), offset, self.forest.known, self.forest, self.signature_cache)
                deep[(i, j)] = est
                D[i, j] = D[j, i] = est.value
        self.stats["deep_levels"] += 1
        level = LevelDistances(roots, D, deep)
        self._record_level(level, DEEP)
        return level

    def _cherry_steps(self, level: LevelDistances, quartets: _LevelQuartets, i: int, j: int) -> Tuple[int, int]:
        D = level.D
        partners = _witness_partners(quartets, i, j)
        to_i = [three_point(D[i, j], D[i, c], D[j, c]) for c in partners]
        to_j = [three_point(D[i, j], D[j, c], D[i, c]) for c in partners]
        lam = self.settings.lambda_min
        return _median_steps(to_i, lam), _median_steps(to_j, lam)

    def run(self) -> ReconstructedTree:
        h = 0
        while len(self.forest.roots) > 3:
            level = self.level_distances(h)
            mode = DEEP if level.deep is not None else DERIVED
            self.log.add(f"h={h} roots={len(level.nodes)} distances={mode} r={self.r!r}")
            quartets = _resolve_level(h, level, self.r, self.settings.min_margin, self.log)
            self.stats["levels"] += 1
            self.stats["short_quartets"] += quartets.short_count
            self.stats["resolved_quartets"] += int(len(quartets.resolved))

            try:
                pairs = pick_cherries(level.nodes, quartets.tally, level, level=h)
            except ReconstructionStall as stall:
                self.log.add(f"h={h} stall=no cherry remaining={stall.remaining}")
                raise ReconstructionStall(h, stall.remaining, decision_log=self.log.lines) from None

            for a, b in pairs:
                i, j = level.index[a], level.index[b]
                steps_i, steps_j = self._cherry_steps(level, quartets, i, j)
                w = self.forest.merge(a, b, steps_i, steps_j)
                self.table.set(self.name(w), self.name(a), steps_i * self.settings.lambda_min, ROUNDED)
                self.table.set(self.name(w), self.name(b), steps_j * self.settings.lambda_min, ROUNDED)
                self.log.add(f"h={h} cherry={a},{b} parent={w} tau={steps_i},{steps_j}")
                self.stats["cherries"] += 1
            h += 1
            self.forest.level = h

        return self._finish(h)

    def _finish(self, h: int) -> ReconstructedTree:
        level = self.level_distances(h)
        roots = level.nodes
        lam = self.settings.lambda_min
        adjacency = self.forest.adjacency()
        taus: Dict[Edge, int] = {frozenset((c, p)): self.forest.steps[c] for p, kids in self.forest.children.items() for c in kids}
        D = level.D
        if not np.isfinite(D).all():
            self.log.add(f"h={h} stall=infinite distance among final roots")
            raise ReconstructionStall(h, len(roots), "infinite distance among final roots", self.log.lines)
        if len(roots) == 2:
            u, v = roots
            taus[frozenset((u, v))] = grid_steps(D[0, 1], lam)
            adjacency[u].add(v)
            adjacency[v].add(u)
            self.log.add(f"h={h} join={u},{v} tau={taus[frozenset((u, v))]}")
        else:
            centre = self.forest.new_node()
            adjacency[centre] = set()
            for i, u in enumerate(roots):
                j, k = [x for x in range(3) if x != i]
                steps = grid_steps(three_point(D[i, j], D[i, k], D[j, k]), lam)
                taus[frozenset((u, centre))] = steps
                adjacency[u].add(centre)
                adjacency[centre].add(u)
            self.log.add(f"h={h} join={','.join(map(str, roots))} centre={centre}")
        if self.log.quartets_omitted:
            self.log.add(f"quartets_omitted={self.log.quartets_omitted}")

        lengths = {e: t * lam for e, t in taus.items()}
        labels = {i: self.labels[i] for i in range(self.n)}
        return ReconstructedTree.from_adjacency(
            labels, adjacency, lengths, lam, taus,
            decision_log=self.log.lines,
            stats=dict(self.stats, levels_total=h + 1),
        )


def sequences_source(
    sequences: Mapping[str, Bitstring], settings: ReconstructionSettings
) -> Tuple[SignatureDistances, List[str]]:
    labels = sorted(sequences)
    scheme = block_scheme(settings.k, settings.zeta)
    vectors, degenerate = leaf_signature_vectors(
        {i: sequences[label] for i, label in enumerate(labels)}, scheme, settings.mode
    )
    if degenerate:
        raise DegenerateSequencesError(labels[i] for i in degenerate)
    return SignatureDistances(vectors), labels


def oracle_source(tree: ModelTree) -> Tuple[OracleDistances, List[str]]:
    """Exact leaf path distances of a model tree, in sorted label order."""
    by_label = sorted(tree.leaf_labels, key=lambda item: item[1])
    nodes = [v for v, _ in by_label]
    return OracleDistances(tree.distance_matrix(nodes)), [label for _, label in by_label]


def tree_reconstruct(
    data: Union[Mapping[str, Bitstring], DistanceSource],
    settings: ReconstructionSettings,
    labels: Optional[Sequence[str]] = None,
) -> ReconstructedTree:
    """Rebuild the unrooted tree from leaf sequences or a leaf distance source."""
    if isinstance(data, DistanceSource):
        source = data
        labels = list(labels) if labels is not None else [f"t{i + 1}" for i in range(source.n_leaves)]
        if len(labels) != source.n_leaves:
            raise ValueError("label count does not match the distance source")
    else:
        if len(data) < 4:
            raise InsufficientLeavesError(f"need at least 4 leaves, got {len(data)}")
        source, labels = sequences_source(data, settings)
    if len(labels) < 4:
        raise InsufficientLeavesError(f"need at least 4 leaves, got {len(labels)}")
    worker = _Reconstructor(source, labels, settings)
    tree = worker.run()
    tree.distance_table = worker.table
    tree.signature_vectors = source.signature_vectors()
    return tree
