"""
Text formats read and written by the CLI.

  leaf sequences   label<TAB>bitstring            (one leaf per line)
  lineage sidecar  label<TAB>id,id,...
  tree parameters  child_id parent_id p_sub p_del p_ins [label]
  tables           TSV with a header row
"""

import os
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from phylo.errors import ParameterDomainError, SequenceFormatError
from phylo.indel_sim import Bitstring
from phylo.newick import model_tree_from_newick
from phylo.tree_model import EdgeParams, ModelTree


NEWICK_SUFFIXES = (".nwk", ".newick", ".tre", ".tree")


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _read_lines(path: str) -> Iterator[Tuple[int, str]]:
    """(line number, stripped line) for every non-blank, non-comment line."""
    if not os.path.exists(path):
        raise SequenceFormatError(path, None, "file not found")
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            stripped = line.rstrip("\r\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            yield line_no, stripped


def _stamp(lines: List[str], config_hash: Optional[str]) -> List[str]:
    if config_hash:
        return [f"# config_hash={config_hash}"] + lines
    return lines


def write_text(path: str, text: str):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def read_stamp(path: str) -> Optional[str]:
    """config_hash recorded on the first line of an output file, if any."""
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline().strip()
    if first.startswith("# config_hash="):
        return first.split("=", 1)[1].strip()
    return None


def read_text(path: str) -> str:
    if not os.path.exists(path):
        raise SequenceFormatError(path, None, "file not found")
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read()


# ---------------------------------------------------------------------------
# Leaf sequences and lineage
# ---------------------------------------------------------------------------

def write_leaf_sequences(path: str, sequences: Mapping[str, Bitstring], config_hash: Optional[str] = None):
    lines = _stamp([f"{label}\t{sequences[label].to_string()}" for label in sorted(sequences)], config_hash)
    write_text(path, "\n".join(lines) + "\n")


def read_leaf_sequences(path: str) -> Dict[str, Bitstring]:
    sequences: Dict[str, Bitstring] = {}
    for line_no, line in _read_lines(path):
        if "\t" not in line:
            raise SequenceFormatError(path, line_no, "expected 'label<TAB>bitstring'")
        label, bits = line.split("\t", 1)
        label = label.strip()
        bits = bits.strip()
        if not label:
            raise SequenceFormatError(path, line_no, "empty leaf label")
        if label in sequences:
            raise SequenceFormatError(path, line_no, f"duplicate leaf label {label!r}")
        try:
            sequences[label] = Bitstring.from_string(bits)
        except (ValueError, UnicodeEncodeError):
            raise SequenceFormatError(path, line_no, f"leaf {label!r}: bitstring may only contain 0 and 1") from None
    if not sequences:
        raise SequenceFormatError(path, None, "no sequences found")
    return sequences


def write_lineage(path: str, lineage: Mapping[str, np.ndarray], config_hash: Optional[str] = None):
    lines = _stamp([f"{label}\t" + ",".join(str(int(i)) for i in lineage[label]) for label in sorted(lineage)], config_hash)
    write_text(path, "\n".join(lines) + "\n")


def read_lineage(path: str) -> Dict[str, np.ndarray]:
    lineage: Dict[str, np.ndarray] = {}
    for line_no, line in _read_lines(path):
        label, _, ids = line.partition("\t")
        if not _:
            raise SequenceFormatError(path, line_no, "expected 'label<TAB>ids'")
        try:
            lineage[label.strip()] = np.array([int(x) for x in ids.split(",") if x.strip()], dtype=np.int64)
        except ValueError:
            raise SequenceFormatError(path, line_no, "lineage ids must be integers") from None
    return lineage


# ---------------------------------------------------------------------------
# Model trees
# ---------------------------------------------------------------------------

def write_tree_params(path: str, tree: ModelTree, config_hash: Optional[str] = None):
    labels = tree.labels
    lines = ["# child_id parent_id p_sub p_del p_ins [label]"]
    for child, parent, params in tree.edges():
        row = f"{child} {parent} {params.p_sub!r} {params.p_del!r} {params.p_ins!r}"
        if child in labels:
            row += f" {labels[child]}"
        lines.append(row)
    write_text(path, "\n".join(_stamp(lines, config_hash)) + "\n")


def read_tree_params(path: str, lambda_min: float = 0.0) -> ModelTree:
    """Parse the tree-parameter format; lambda_min 0 means the smallest edge length."""
    edges: List[Tuple[int, int, EdgeParams]] = []
    labels: Dict[int, str] = {}
    for line_no, line in _read_lines(path):
        parts = line.split()
        if len(parts) not in (5, 6):
            raise SequenceFormatError(path, line_no, "expected 'child_id parent_id p_sub p_del p_ins [label]'")
        try:
            child, parent = int(parts[0]), int(parts[1])
            params = EdgeParams(float(parts[2]), float(parts[3]), float(parts[4]))
        except ValueError as exc:
            raise SequenceFormatError(path, line_no, str(exc)) from None
        edges.append((child, parent, params))
        if len(parts) == 6:
            labels[child] = parts[5]
    if not edges:
        raise SequenceFormatError(path, None, "no edges found")
    lam = lambda_min if lambda_min > 0 else min(p.length for _, _, p in edges)
    try:
        return ModelTree.from_edges(edges, lambda_min=lam, labels=labels)
    except ParameterDomainError as exc:
        raise SequenceFormatError(path, None, str(exc)) from None


def load_model_tree(path: str, lambda_min: float = 0.0) -> ModelTree:
    """Newick (by suffix or leading '(') or the tree-parameter format."""
    text = read_text(path)
    if path.lower().endswith(NEWICK_SUFFIXES) or text.lstrip().startswith("("):
        return model_tree_from_newick(text, lambda_min or None, source=path)
    return read_tree_params(path, lambda_min)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".6g")
    if value is None:
        return ""
    return str(value)


def format_tsv(header: Sequence[str], rows: Iterable[Sequence], config_hash: Optional[str] = None) -> str:
    lines = _stamp(["\t".join(header)], config_hash)
    lines.extend("\t".join(format_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_tsv(path: str, header: Sequence[str], rows: Iterable[Sequence], config_hash: Optional[str] = None):
    write_text(path, format_tsv(header, rows, config_hash))


def read_tsv(path: str) -> List[Dict[str, str]]:
    lines = list(_read_lines(path))
    if not lines:
        return []
    header = lines[0][1].split("\t")
    return [dict(zip(header, line.split("\t"))) for _, line in lines[1:]]


def output_path(out_dir: str, name: str, sweep_key: Optional[str] = None) -> str:
    if sweep_key:
        return os.path.join(out_dir, sweep_key, name)
    return os.path.join(out_dir, name)
