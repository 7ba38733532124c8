"""
Model trees for the CFN-Indel process.

A ModelTree is the ground truth of every experiment: a rooted binary tree whose
edges carry substitution / deletion / insertion probabilities. Edge lengths
lambda(e) are derived from those probabilities and must sit on the
Delta-branch grid (integer multiples of lambda_min).

Node ids are dense integers in BFS order from the root (root = 0); the edge
into a node is identified by the node id itself.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterDomainError, UnknownNodeError


# ln(sqrt(2)): edge lengths below it keep e^{2 lambda} < 2.
KS_THRESHOLD = 0.5 * math.log(2.0)
KS_TOLERANCE = 1e-12
DELTA_BRANCH_TOLERANCE = 1e-9


@dataclass(frozen=True)
class EdgeParams:
    """Per-edge mutation probabilities."""
    p_sub: float = 0.0
    p_del: float = 0.0
    p_ins: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_sub < 0.5:
            raise ParameterDomainError(f"p_sub={self.p_sub!r} outside [0, 1/2)")
        if not 0.0 <= self.p_del < 1.0:
            raise ParameterDomainError(f"p_del={self.p_del!r} outside [0, 1)")
        if not 0.0 <= self.p_ins < 1.0:
            raise ParameterDomainError(f"p_ins={self.p_ins!r} outside [0, 1)")
        if 1.0 + self.p_ins - self.p_del <= 0.0:
            raise ParameterDomainError("1 + p_ins - p_del must be positive")

    @property
    def drift(self) -> float:
        """Expected length multiplier across the edge."""
        return 1.0 + self.p_ins - self.p_del

    @property
    def length(self) -> float:
        return edge_length(self)

    @property
    def is_symmetric(self) -> bool:
        return self.p_ins == self.p_del

    @classmethod
    def substitution_only(cls, length: float) -> "EdgeParams":
        """Params realising ``length`` with substitutions alone."""
        if length < 0:
            raise ParameterDomainError(f"negative edge length {length!r}")
        return cls(p_sub=(1.0 - math.exp(-length)) / 2.0)

    def to_dict(self) -> dict:
        return {"p_sub": self.p_sub, "p_del": self.p_del, "p_ins": self.p_ins}


def edge_length(params: EdgeParams) -> float:
    """lambda(e) = -[ln(1 - 2 p_sub) + ln(1 - p_del) - 1/2 ln(1 + p_ins - p_del)]."""
    sub_term = 1.0 - 2.0 * params.p_sub
    del_term = 1.0 - params.p_del
    drift = 1.0 + params.p_ins - params.p_del
    if sub_term <= 0 or del_term <= 0 or drift <= 0:
        raise ParameterDomainError(f"edge length undefined for {params}")
    value = -(math.log(sub_term) + math.log(del_term) - 0.5 * math.log(drift))
    # -0.0 and rounding noise around zero
    return max(value, 0.0)


def indel_length(p_del: float, p_ins: float) -> float:
    """The part of lambda(e) contributed by insertions and deletions."""
    return -math.log(1.0 - p_del) + 0.5 * math.log(1.0 + p_ins - p_del)


@dataclass(frozen=True)
class RegimeReport:
    lambda_max: float
    ks_ok: bool
    symmetric: bool
    asym_bound_ok: bool
    max_asymmetry: float = 0.0
    asym_bound: float = 0.0

    def to_dict(self) -> dict:
        return {
            "lambda_max": self.lambda_max,
            "ks_ok": self.ks_ok,
            "symmetric": self.symmetric,
            "asym_bound_ok": self.asym_bound_ok,
            "max_asymmetry": self.max_asymmetry,
            "asym_bound": self.asym_bound,
        }


@dataclass(frozen=True)
class ModelTree:
    """Immutable rooted binary model tree.

    ``parents[v]`` is the parent of node v (-1 for the root), ``edge_params[v]``
    the parameters of the edge into v (None for the root).
    """
    parents: Tuple[int, ...]
    children: Tuple[Tuple[int, ...], ...]
    edge_params: Tuple[Optional[EdgeParams], ...]
    leaf_labels: Tuple[Tuple[int, str], ...]
    lambda_min: float
    balanced: bool = False
    _lengths: Tuple[float, ...] = field(default=(), repr=False, compare=False)
    _depths: Tuple[int, ...] = field(default=(), repr=False, compare=False)

    # ---------- construction ----------

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[Tuple[int, int, EdgeParams]],
        lambda_min: float,
        labels: Optional[Dict[int, str]] = None,
        balanced: bool = False,
    ) -> "ModelTree":
        """Build from (child, parent, params) triples with arbitrary ids.

        Ids are renumbered to BFS order (children ordered by original id);
        ``labels`` maps original leaf ids to labels.
        """
        edges = list(edges)
        parent_of: Dict[int, int] = {}
        params_of: Dict[int, EdgeParams] = {}
        kids: Dict[int, List[int]] = {}
        for child, parent, params in edges:
            if child in parent_of:
                raise ParameterDomainError(f"node {child} has two parents")
            parent_of[child] = parent
            params_of[child] = params
            kids.setdefault(parent, []).append(child)

        nodes = set(parent_of) | set(kids)
        roots = [v for v in nodes if v not in parent_of]
        if len(roots) != 1:
            raise ParameterDomainError(f"expected exactly one root, found {len(roots)}")

        order: List[int] = []
        queue = deque([roots[0]])
        while queue:
            v = queue.popleft()
            order.append(v)
            queue.extend(sorted(kids.get(v, [])))
        if len(order) != len(nodes):
            raise ParameterDomainError("edge list does not form a tree")

        new_id = {old: i for i, old in enumerate(order)}
        parents = [-1] * len(order)
        params: List[Optional[EdgeParams]] = [None] * len(order)
        children: List[List[int]] = [[] for _ in order]
        for old in order[1:]:
            v = new_id[old]
            p = new_id[parent_of[old]]
            parents[v] = p
            params[v] = params_of[old]
            children[p].append(v)

        leaf_ids = [v for v in range(len(order)) if not children[v]]
        width = len(str(len(leaf_ids)))
        leaf_labels = []
        for index, v in enumerate(leaf_ids):
            old = order[v]
            if labels and old in labels:
                leaf_labels.append((v, str(labels[old])))
            else:
                leaf_labels.append((v, f"t{index + 1:0{width}d}"))

        return cls.create(parents, children, params, leaf_labels, lambda_min, balanced)

    @classmethod
    def create(cls, parents, children, edge_params, leaf_labels, lambda_min, balanced=False) -> "ModelTree":
        tree = cls(
            parents=tuple(parents),
            children=tuple(tuple(c) for c in children),
            edge_params=tuple(edge_params),
            leaf_labels=tuple((int(v), str(label)) for v, label in leaf_labels),
            lambda_min=float(lambda_min),
            balanced=balanced,
        )
        lengths = [0.0] + [edge_length(p) for p in tree.edge_params[1:]]
        depths = [0] * len(tree.parents)
        for v in range(1, len(tree.parents)):
            depths[v] = depths[tree.parents[v]] + 1
        object.__setattr__(tree, "_lengths", tuple(lengths))
        object.__setattr__(tree, "_depths", tuple(depths))
        tree.validate()
        return tree

    def validate(self):
        if self.lambda_min <= 0:
            raise ParameterDomainError(f"lambda_min must be positive, got {self.lambda_min!r}")
        if self.parents[0] != -1:
            raise ParameterDomainError("node 0 must be the root")
        for v, kids in enumerate(self.children):
            if kids and len(kids) != 2:
                raise ParameterDomainError(f"node {v} has {len(kids)} children; trees must be binary")
        for v in range(1, len(self.parents)):
            lam = self._lengths[v]
            if lam <= 0:
                raise ParameterDomainError(f"edge into node {v} has non-positive length {lam!r}")
            tau = lam / self.lambda_min
            if abs(tau - round(tau)) > DELTA_BRANCH_TOLERANCE or round(tau) < 1:
                raise ParameterDomainError(
                    f"edge into node {v}: lambda={lam!r} is not a positive multiple of lambda_min={self.lambda_min!r}"
                )
        if self.balanced:
            leaf_depths = {self._depths[v] for v, _ in self.leaf_labels}
            if len(leaf_depths) != 1:
                raise ParameterDomainError("balanced tree has leaves at different depths")

    # ---------- structure ----------

    @property
    def root(self) -> int:
        return 0

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def leaves(self) -> Tuple[int, ...]:
        return tuple(v for v, _ in self.leaf_labels)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_labels)

    @property
    def labels(self) -> Dict[int, str]:
        return dict(self.leaf_labels)

    @property
    def depth_max(self) -> int:
        return max(self._depths)

    def _check(self, node: int):
        if not isinstance(node, (int, np.integer)) or not 0 <= node < len(self.parents):
            raise UnknownNodeError(node)

    def label(self, node: int) -> str:
        self._check(node)
        return self.labels[node]

    def node_of_label(self, label: str) -> int:
        for v, name in self.leaf_labels:
            if name == label:
                return v
        raise UnknownNodeError(label)

    def depth(self, node: int) -> int:
        self._check(node)
        return self._depths[node]

    def is_leaf(self, node: int) -> bool:
        self._check(node)
        return not self.children[node]

    def edge_lambda(self, node: int) -> float:
        """lambda of the edge into ``node`` (0 for the root)."""
        self._check(node)
        return self._lengths[node]

    def tau(self, node: int) -> int:
        """Grid multiple of the edge into ``node``."""
        return int(round(self.edge_lambda(node) / self.lambda_min))

    def edges(self) -> List[Tuple[int, int, EdgeParams]]:
        return [(v, self.parents[v], self.edge_params[v]) for v in range(1, self.n_nodes)]

    def ancestors(self, node: int) -> List[int]:
        """Path from ``node`` up to the root, inclusive."""
        self._check(node)
        path = [node]
        while path[-1] != 0:
            path.append(self.parents[path[-1]])
        return path

    def lca(self, a: int, b: int) -> int:
        self._check(a)
        self._check(b)
        while self._depths[a] > self._depths[b]:
            a = self.parents[a]
        while self._depths[b] > self._depths[a]:
            b = self.parents[b]
        while a != b:
            a = self.parents[a]
            b = self.parents[b]
        return a

    def height(self, node: int) -> int:
        """Edges from ``node`` down to its shallowest leaf."""
        self._check(node)
        h = 0
        frontier = [node]
        while all(self.children[v] for v in frontier):
            frontier = [c for v in frontier for c in self.children[v]]
            h += 1
        return h

    def descendants_at(self, node: int, offset: int) -> List[int]:
        """Descendants exactly ``offset`` edges below ``node``, BFS order."""
        self._check(node)
        frontier = [node]
        for _ in range(offset):
            frontier = [c for v in frontier for c in self.children[v]]
        return frontier

    def leaves_under(self, node: int) -> List[int]:
        self._check(node)
        out = []
        stack = [node]
        while stack:
            v = stack.pop()
            if self.children[v]:
                stack.extend(reversed(self.children[v]))
            else:
                out.append(v)
        return out

    def levels(self) -> List[List[int]]:
        """Nodes grouped by height above the leaves (balanced trees)."""
        by_height: Dict[int, List[int]] = {}
        for v in range(self.n_nodes):
            by_height.setdefault(self.height(v), []).append(v)
        return [by_height[h] for h in sorted(by_height)]

    def root_distance(self, node: int) -> float:
        return sum(self._lengths[v] for v in self.ancestors(node))

    def is_contemporaneous(self, tol: float = 1e-9) -> bool:
        dists = [self.root_distance(v) for v in self.leaves]
        return max(dists) - min(dists) <= tol

    def distance_matrix(self, nodes: Optional[Sequence[int]] = None) -> np.ndarray:
        nodes = list(self.leaves if nodes is None else nodes)
        out = np.zeros((len(nodes), len(nodes)))
        for i, a in enumerate(nodes):
            for j in range(i + 1, len(nodes)):
                out[i, j] = out[j, i] = path_distance(self, a, nodes[j])
        return out

    def describe(self) -> dict:
        return {
            "n_leaves": self.n_leaves,
            "n_nodes": self.n_nodes,
            "depth_max": self.depth_max,
            "lambda_min": self.lambda_min,
            "balanced": self.balanced,
        }


def path_distance(tree: ModelTree, a: int, b: int) -> float:
    """d(a, b): sum of edge lengths on the unique a-b path."""
    if a == b:
        tree._check(a)
        return 0.0
    top = tree.lca(a, b)
    total = 0.0
    for end in (a, b):
        v = end
        while v != top:
            total += tree._lengths[v]
            v = tree.parents[v]
    return total


def eta(tree: ModelTree, a: int) -> float:
    """Product of (1 + p_ins - p_del) over the root-to-a path."""
    value = 1.0
    for v in tree.ancestors(a):
        if v != 0:
            value *= tree.edge_params[v].drift
    return value


def default_asym_bound(tree: ModelTree, beta: float = 1.0) -> float:
    """beta * log2 log2 n / D_max."""
    n = tree.n_leaves
    if n < 4 or tree.depth_max == 0:
        return 0.0
    return beta * math.log2(math.log2(n)) / tree.depth_max


def check_regime(tree: ModelTree, asym_bound: float) -> RegimeReport:
    params = [p for p in tree.edge_params[1:]]
    lambda_max = max(tree._lengths[1:]) if len(tree._lengths) > 1 else 0.0
    max_asym = max((abs(p.p_ins - p.p_del) for p in params), default=0.0)
    return RegimeReport(
        lambda_max=lambda_max,
        ks_ok=lambda_max < KS_THRESHOLD - KS_TOLERANCE,
        symmetric=all(p.is_symmetric for p in params),
        asym_bound_ok=max_asym <= asym_bound,
        max_asymmetry=max_asym,
        asym_bound=asym_bound,
    )


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _balanced_skeleton(depth: int):
    n_nodes = 2 ** (depth + 1) - 1
    parents = [-1] + [(v - 1) // 2 for v in range(1, n_nodes)]
    children = [[2 * v + 1, 2 * v + 2] if 2 * v + 2 < n_nodes else [] for v in range(n_nodes)]
    first_leaf = 2 ** depth - 1
    width = len(str(2 ** depth))
    leaf_labels = [(v, f"t{v - first_leaf + 1:0{width}d}") for v in range(first_leaf, n_nodes)]
    return parents, children, leaf_labels


def balanced(depth: int, params: EdgeParams, lambda_min: Optional[float] = None) -> ModelTree:
    """Perfect binary tree with identical params on every edge."""
    if depth < 1:
        raise ParameterDomainError(f"depth must be >= 1, got {depth}")
    parents, children, leaf_labels = _balanced_skeleton(depth)
    edge_params = [None] + [params] * (len(parents) - 1)
    return ModelTree.create(
        parents, children, edge_params, leaf_labels,
        lambda_min=params.length if lambda_min is None else lambda_min,
        balanced=True,
    )


def scaled_params(base: EdgeParams, tau: int, lambda_min: float) -> EdgeParams:
    """Scale p_sub only so that lambda(e) == tau * lambda_min."""
    target = tau * lambda_min - indel_length(base.p_del, base.p_ins)
    if target < 0:
        raise ParameterDomainError(
            f"indel rates alone exceed tau*lambda_min={tau * lambda_min!r}"
        )
    return EdgeParams(p_sub=(1.0 - math.exp(-target)) / 2.0, p_del=base.p_del, p_ins=base.p_ins)


def balanced_jitter(
    depth: int,
    params: EdgeParams,
    tau_max: int,
    rng: np.random.Generator,
    lambda_min: Optional[float] = None,
    contemporaneous: bool = False,
) -> ModelTree:
    """Perfect binary tree with per-edge lengths tau_e * lambda_min, tau_e ~ U{1..tau_max}.

    With ``contemporaneous`` the multiple is drawn once per depth so every
    leaf sits at the same distance from the root.
    """
    if tau_max < 1:
        raise ParameterDomainError(f"tau_max must be >= 1, got {tau_max}")
    lam_min = params.length if lambda_min is None else lambda_min
    parents, children, leaf_labels = _balanced_skeleton(depth)
    per_depth = rng.integers(1, tau_max + 1, size=depth + 1)
    edge_params: List[Optional[EdgeParams]] = [None]
    for v in range(1, len(parents)):
        if contemporaneous:
            tau = int(per_depth[int(math.log2(v + 1))])
        else:
            tau = int(rng.integers(1, tau_max + 1))
        edge_params.append(scaled_params(params, tau, lam_min))
    return ModelTree.create(parents, children, edge_params, leaf_labels, lambda_min=lam_min, balanced=True)


def balanced_contemporaneous(
    depth: int,
    params: EdgeParams,
    tau_max: int,
    rng: np.random.Generator,
    lambda_min: Optional[float] = None,
) -> ModelTree:
    return balanced_jitter(depth, params, tau_max, rng, lambda_min=lambda_min, contemporaneous=True)
