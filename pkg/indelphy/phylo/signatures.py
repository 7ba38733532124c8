"""
Block signatures.

Bitstrings are cut into L disjoint blocks and each block is summarised by its
normalised excess of zeros, s = (zeros - l/2) / sqrt(l). Block indices in the
public functions are 1-based; SignatureVector.values is a 0-based array, so the
odd blocks 1, 3, ..., L-1 are values[0::2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Tuple

import numpy as np

from .errors import BlockSchemeError, InsufficientLengthError
from .indel_sim import Bitstring


TRUE_BLOCK = "true-block"
SCALED_BLOCK = "scaled-block"
PSEUDO_BLOCK = "pseudo-block"
RECONSTRUCTED = "reconstructed"
MODES = (TRUE_BLOCK, SCALED_BLOCK, PSEUDO_BLOCK, RECONSTRUCTED)


def _floor(x: float) -> int:
    # absorbs pow/product rounding just below an integer
    return int(math.floor(x * (1.0 + 1e-12)))


@dataclass(frozen=True)
class BlockScheme:
    k: int
    zeta: float
    l: int
    L: int

    @property
    def used_length(self) -> int:
        return self.l * self.L

    def to_dict(self) -> dict:
        return {"k": self.k, "zeta": self.zeta, "l": self.l, "L": self.L}


def block_scheme(k: int, zeta: float) -> BlockScheme:
    """l = floor(k^(1/2+zeta)), L = floor(k/l) rounded down to even."""
    if not 0.0 < zeta < 0.5:
        raise BlockSchemeError(f"zeta must lie in (0, 1/2), got {zeta!r}")
    if k < 4:
        raise BlockSchemeError(f"k must be >= 4, got {k}")
    l = max(_floor(k ** (0.5 + zeta)), 1)
    L = k // l
    L -= L % 2
    if L < 2:
        raise BlockSchemeError(f"k={k}, zeta={zeta} yields fewer than two blocks (l={l})")
    return BlockScheme(k=k, zeta=zeta, l=l, L=L)


@dataclass(frozen=True)
class SignatureVector:
    node: int
    values: np.ndarray = field(compare=False)
    block_len: float
    mode: str = TRUE_BLOCK

    @property
    def L(self) -> int:
        return int(self.values.size)

    @property
    def odd(self) -> np.ndarray:
        """Blocks 1, 3, ..., L-1."""
        return self.values[0::2]

    def to_dump_line(self) -> str:
        return f"{self.node}\t{self.mode}\t" + ",".join(repr(float(v)) for v in self.values)


def _block_values(bits: np.ndarray, block_len: int, L: int) -> np.ndarray:
    blocks = bits[: block_len * L].reshape(L, block_len)
    zeros = block_len - blocks.sum(axis=1, dtype=np.int64)
    return (zeros - block_len / 2.0) / math.sqrt(block_len)


def _single_block(bits: Bitstring, block_len: int, i: int) -> float:
    if i < 1:
        raise IndexError(f"block index is 1-based, got {i}")
    stop = i * block_len
    if bits.length < stop:
        raise InsufficientLengthError(f"block {i} of length {block_len} needs {stop} bits", stop - bits.length)
    zeros = bits.count_zeros(stop - block_len, stop)
    return (zeros - block_len / 2.0) / math.sqrt(block_len)


def signature(bits: Bitstring, scheme: BlockScheme, i: int) -> float:
    return _single_block(bits, scheme.l, i)


def pseudo_block_length(length: int, L: int) -> int:
    return length // L


def leaf_pseudo_signature(bits: Bitstring, L: int, i: int) -> float:
    """Pseudo-block signature with l' = floor(len(bits) / L)."""
    if L > bits.length:
        raise InsufficientLengthError(f"{L} pseudo-blocks need at least {L} bits", L - bits.length)
    return _single_block(bits, pseudo_block_length(bits.length, L), i)


def internal_block_signature(bits: Bitstring, l_a: int, i: int) -> float:
    if l_a < 1:
        raise InsufficientLengthError(f"block length {l_a} is empty", 1)
    return _single_block(bits, l_a, i)


def root_block_length(k_root: int, L: int) -> int:
    """l_r = floor(k_r / L)."""
    return k_root // L


def node_block_length(l_root: int, eta_a: float) -> int:
    """l_a = floor(l_r * eta(a))."""
    return _floor(l_root * eta_a)


# ---------------------------------------------------------------------------
# Whole-vector helpers
# ---------------------------------------------------------------------------

def signature_vector(bits: Bitstring, scheme: BlockScheme, node: int = 0) -> SignatureVector:
    if bits.length < scheme.used_length:
        raise InsufficientLengthError(
            f"node {node} has {bits.length} bits, scheme uses {scheme.used_length}",
            scheme.used_length - bits.length,
        )
    return SignatureVector(node, _block_values(bits.bits, scheme.l, scheme.L), scheme.l, TRUE_BLOCK)


def scaled_signature_vector(bits: Bitstring, l_a: int, L: int, node: int = 0) -> SignatureVector:
    need = l_a * L
    if l_a < 1 or bits.length < need:
        raise InsufficientLengthError(f"node {node} has {bits.length} bits, blocks use {need}", max(need - bits.length, 1))
    return SignatureVector(node, _block_values(bits.bits, l_a, L), l_a, SCALED_BLOCK)


def pseudo_signature_vector(bits: Bitstring, L: int, node: int = 0) -> SignatureVector:
    l_prime = pseudo_block_length(bits.length, L)
    if l_prime < 1:
        raise InsufficientLengthError(f"node {node} has {bits.length} bits for {L} pseudo-blocks", L - bits.length)
    return SignatureVector(node, _block_values(bits.bits, l_prime, L), l_prime, PSEUDO_BLOCK)


def leaf_signature_vectors(
    sequences: Mapping[int, Bitstring],
    scheme: BlockScheme,
    mode: str = "sym",
) -> Tuple[Dict[int, SignatureVector], List[int]]:
    """Signatures for every leaf; leaves too short for the scheme are returned separately."""
    vectors: Dict[int, SignatureVector] = {}
    degenerate: List[int] = []
    for node, bits in sequences.items():
        try:
            if mode == "asym":
                vectors[node] = pseudo_signature_vector(bits, scheme.L, node)
            else:
                vectors[node] = signature_vector(bits, scheme, node)
        except InsufficientLengthError:
            degenerate.append(node)
    return vectors, degenerate


def format_signature_dump(vectors: Iterable[SignatureVector]) -> str:
    lines = [vec.to_dump_line() for vec in sorted(vectors, key=lambda v: v.node)]
    return "\n".join(lines) + ("\n" if lines else "")
