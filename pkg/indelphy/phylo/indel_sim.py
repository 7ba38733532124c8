"""
CFN-Indel simulation.

A uniformly random root bitstring is evolved down a ModelTree. On every edge
each parent bit independently draws flip / delete / insert against its
original value; a deleted bit still makes its insertion draw, and inserted
bits are placed to its right without being mutated again on the same edge.

Randomness comes from counter-based Philox streams keyed by (trial, edge) so
trials reproduce bit-for-bit regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LineageMissingError
from .tree_model import EdgeParams, ModelTree, eta


ROOT_STREAM = 0
_EDGE_BITS = 32


# ---------------------------------------------------------------------------
# Bitstrings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bitstring:
    """Packed 0/1 sequence. ``packed`` holds np.packbits output."""
    packed: bytes
    length: int
    _bits: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_array(cls, bits) -> "Bitstring":
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.size and arr.max() > 1:
            raise ValueError("bitstring values must be 0 or 1")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        return cls(packed=np.packbits(arr).tobytes(), length=int(arr.size), _bits=arr)

    @classmethod
    def from_string(cls, text: str) -> "Bitstring":
        raw = np.frombuffer(text.encode("ascii"), dtype=np.uint8)
        if raw.size and not np.isin(raw, (48, 49)).all():
            raise ValueError("bitstring text may only contain '0' and '1'")
        return cls.from_array(raw - 48)

    @classmethod
    def zeros(cls, length: int) -> "Bitstring":
        return cls.from_array(np.zeros(length, dtype=np.uint8))

    @property
    def bits(self) -> np.ndarray:
        """Unpacked read-only uint8 array."""
        if self._bits is None:
            arr = np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8), count=self.length)
            arr.setflags(write=False)
            object.__setattr__(self, "_bits", arr)
        return self._bits

    def __len__(self) -> int:
        return self.length

    def to_string(self) -> str:
        return (self.bits + 48).tobytes().decode("ascii")

    def count_zeros(self, start: int, stop: int) -> int:
        window = self.bits[start:stop]
        return int(window.size - int(window.sum()))


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream_id < 0:
            raise ValueError(f"stream_id must be non-negative, got {self.stream_id}")

    @classmethod
    def for_edge(cls, seed: int, trial: int, edge: int) -> "RngStream":
        """Stream for ``edge`` (child node id; 0 is the root draw) of ``trial``."""
        return cls(seed=seed, stream_id=(trial << _EDGE_BITS) | edge)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))))


class IdCounter:
    """Hands out fresh lineage ids for one trial."""

    def __init__(self, start: int):
        self.next_id = start

    def take(self, count: int) -> np.ndarray:
        ids = np.arange(self.next_id, self.next_id + count, dtype=np.int64)
        self.next_id += count
        return ids


# ---------------------------------------------------------------------------
# Mutation kernel
# ---------------------------------------------------------------------------

def _mutate(
    bits: np.ndarray,
    params: EdgeParams,
    gen: np.random.Generator,
    lineage: Optional[np.ndarray] = None,
    counter: Optional[IdCounter] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    m = bits.size
    flip = gen.random(m) < params.p_sub
    delete = gen.random(m) < params.p_del
    insert = gen.random(m) < params.p_ins
    fresh = gen.integers(0, 2, size=int(insert.sum()), dtype=np.uint8)

    # slot 2i holds parent bit i, slot 2i+1 the bit inserted to its right
    slots = np.zeros(2 * m, dtype=np.uint8)
    slots[0::2] = bits ^ flip
    slots[1::2][insert] = fresh
    keep = np.empty(2 * m, dtype=bool)
    keep[0::2] = ~delete
    keep[1::2] = insert
    child = slots[keep]

    child_lineage = None
    if lineage is not None:
        id_slots = np.zeros(2 * m, dtype=np.int64)
        id_slots[0::2] = lineage
        id_slots[1::2][insert] = counter.take(fresh.size)
        child_lineage = id_slots[keep]
    return child, child_lineage


def mutate_edge(parent: Bitstring, params: EdgeParams, rng: RngStream) -> Bitstring:
    child, _ = _mutate(parent.bits, params, rng.generator())
    return Bitstring.from_array(child)


def mutate_with_lineage(
    parent: Bitstring,
    lineage: np.ndarray,
    params: EdgeParams,
    rng: RngStream,
    counter: IdCounter,
) -> Tuple[Bitstring, np.ndarray]:
    """mutate_edge that also carries per-bit lineage ids."""
    child, child_lineage = _mutate(parent.bits, params, rng.generator(), np.asarray(lineage, dtype=np.int64), counter)
    return Bitstring.from_array(child), child_lineage


# ---------------------------------------------------------------------------
# Whole-tree simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceAssignment:
    """Bitstrings for every node of a tree (indexed by node id)."""
    tree: ModelTree
    sequences: Tuple[Bitstring, ...]
    root_length: int
    lineage: Optional[Tuple[np.ndarray, ...]] = field(default=None, compare=False)

    @property
    def has_lineage(self) -> bool:
        return self.lineage is not None

    def bits(self, node: int) -> Bitstring:
        self.tree._check(node)
        return self.sequences[node]

    def length(self, node: int) -> int:
        return self.bits(node).length

    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.sequences], dtype=np.int64)

    def lineage_of(self, node: int) -> np.ndarray:
        if self.lineage is None:
            raise LineageMissingError("assignment was simulated without lineage tracking")
        self.tree._check(node)
        return self.lineage[node]

    def leaf_sequences(self) -> Dict[str, Bitstring]:
        return {label: self.sequences[v] for v, label in self.tree.leaf_labels}

    def leaf_lineage(self) -> Dict[str, np.ndarray]:
        return {label: self.lineage_of(v) for v, label in self.tree.leaf_labels}


def evolve_tree(
    tree: ModelTree,
    k_root: int,
    rng: RngStream,
    track_lineage: bool = False,
    root: Optional[Bitstring] = None,
) -> SequenceAssignment:
    """Simulate one trial; ``rng.stream_id`` is the trial number.

    ``root`` pins the root bitstring instead of drawing it.
    """
    if k_root < 1:
        raise ValueError(f"k_root must be >= 1, got {k_root}")
    trial = rng.stream_id
    if root is None:
        gen = RngStream.for_edge(rng.seed, trial, ROOT_STREAM).generator()
        root_bits = gen.integers(0, 2, size=k_root, dtype=np.uint8)
    else:
        root_bits = root.bits
        k_root = root.length

    arrays: List[Optional[np.ndarray]] = [None] * tree.n_nodes
    lineages: List[Optional[np.ndarray]] = [None] * tree.n_nodes
    arrays[0] = root_bits
    counter = None
    if track_lineage:
        lineages[0] = np.arange(1, k_root + 1, dtype=np.int64)
        counter = IdCounter(k_root + 1)

    # BFS ids: every parent precedes its children
    for v in range(1, tree.n_nodes):
        p = tree.parents[v]
        gen = RngStream.for_edge(rng.seed, trial, v).generator()
        arrays[v], lineages[v] = _mutate(arrays[p], tree.edge_params[v], gen, lineages[p], counter)

    return SequenceAssignment(
        tree=tree,
        sequences=tuple(Bitstring.from_array(a) for a in arrays),
        root_length=k_root,
        lineage=tuple(lineages) if track_lineage else None,
    )


# ---------------------------------------------------------------------------
# Shared bits
# ---------------------------------------------------------------------------

def shared_positions(assign: SequenceAssignment, a: int, b: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, positions in a, positions in b) of bits a and b inherit from their LCA."""
    lin_a = assign.lineage_of(a)
    lin_b = assign.lineage_of(b)
    lin_c = assign.lineage_of(assign.tree.lca(a, b))
    common, pos_a, pos_b = np.intersect1d(lin_a, lin_b, assume_unique=True, return_indices=True)
    mask = np.isin(common, lin_c)
    return common[mask], pos_a[mask], pos_b[mask]


def shared_bits(assign: SequenceAssignment, a: int, b: int) -> List[Tuple[int, int]]:
    """0-based (pos_in_a, pos_in_b) pairs of shared bits, ordered by lineage id."""
    _, pos_a, pos_b = shared_positions(assign, a, b)
    return list(zip(pos_a.tolist(), pos_b.tolist()))


def normalized_shift_max(assign: SequenceAssignment, a: int, b: int) -> float:
    """max |j'/eta(b) - j/eta(a)| over shared bits (1-based positions)."""
    _, pos_a, pos_b = shared_positions(assign, a, b)
    if pos_a.size == 0:
        return 0.0
    eta_a = eta(assign.tree, a)
    eta_b = eta(assign.tree, b)
    shift = np.abs((pos_b + 1) / eta_b - (pos_a + 1) / eta_a)
    return float(shift.max())


def raw_shift_max(assign: SequenceAssignment, a: int, b: int) -> int:
    _, pos_a, pos_b = shared_positions(assign, a, b)
    if pos_a.size == 0:
        return 0
    return int(np.abs(pos_b - pos_a).max())


def root_descended_in_order(assign: SequenceAssignment, node: int) -> bool:
    """True when ids inherited from the root appear in increasing order."""
    lin = assign.lineage_of(node)
    inherited = lin[lin <= assign.root_length]
    return bool(np.all(np.diff(inherited) > 0))


def with_sequences(tree: ModelTree, sequences: Sequence[Bitstring], root_length: Optional[int] = None) -> SequenceAssignment:
    """Wrap externally built bitstrings as an assignment (validator self-tests)."""
    if len(sequences) != tree.n_nodes:
        raise ValueError(f"expected {tree.n_nodes} sequences, got {len(sequences)}")
    return SequenceAssignment(
        tree=tree,
        sequences=tuple(sequences),
        root_length=sequences[0].length if root_length is None else root_length,
    )
