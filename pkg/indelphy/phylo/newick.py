"""
Newick input/output.

Output is canonical: children are ordered by their smallest leaf label and
branch lengths are printed with 12 significant digits, so emit -> parse -> emit
is byte-identical. Parsing goes through dendropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import dendropy

from .errors import ParameterDomainError, SequenceFormatError
from .tree_model import EdgeParams, ModelTree


@dataclass
class NewickNode:
    label: Optional[str] = None
    length: Optional[float] = None
    children: List["NewickNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def min_label(self) -> str:
        if self.is_leaf:
            return self.label or ""
        return min(child.min_label() for child in self.children)

    def leaf_labels(self) -> List[str]:
        if self.is_leaf:
            return [self.label or ""]
        return [label for child in self.children for label in child.leaf_labels()]


def format_length(value: float) -> str:
    return format(value, ".12g")


def _emit(node: NewickNode) -> str:
    if node.is_leaf:
        text = node.label or ""
    else:
        ordered = sorted(node.children, key=lambda c: c.min_label())
        text = "(" + ",".join(_emit(c) for c in ordered) + ")"
    if node.length is not None:
        text += ":" + format_length(node.length)
    return text


def format_newick(root: NewickNode) -> str:
    """Canonical Newick string (root length is never printed)."""
    saved = root.length
    root.length = None
    try:
        return _emit(root) + ";"
    finally:
        root.length = saved


def parse_newick(text: str, source: str = "<string>") -> NewickNode:
    try:
        tree = dendropy.Tree.get(
            data=text,
            schema="newick",
            preserve_underscores=True,
            rooting="force-rooted",
            suppress_internal_node_taxa=True,
        )
    except Exception as e:
        raise SequenceFormatError(source, None, f"invalid Newick: {e}") from e

    def convert(dnode) -> NewickNode:
        kids = [convert(c) for c in dnode.child_node_iter()]
        label = None
        if not kids:
            if dnode.taxon is None or not dnode.taxon.label:
                raise SequenceFormatError(source, None, "unlabelled leaf in Newick tree")
            label = dnode.taxon.label
        length = dnode.edge.length if dnode.edge is not None else None
        return NewickNode(label=label, length=None if length is None else float(length), children=kids)

    root = convert(tree.seed_node)
    labels = root.leaf_labels()
    if len(set(labels)) != len(labels):
        raise SequenceFormatError(source, None, "duplicate leaf labels in Newick tree")
    return root


# ---------------------------------------------------------------------------
# ModelTree <-> Newick
# ---------------------------------------------------------------------------

def model_tree_to_node(tree: ModelTree) -> NewickNode:
    labels = tree.labels

    def build(v: int) -> NewickNode:
        length = tree.edge_lambda(v) if v != tree.root else None
        if tree.is_leaf(v):
            return NewickNode(label=labels[v], length=length)
        return NewickNode(length=length, children=[build(c) for c in tree.children[v]])

    return build(tree.root)


def model_tree_to_newick(tree: ModelTree) -> str:
    """Rooted Newick with branch lengths lambda(e)."""
    return format_newick(model_tree_to_node(tree))


def model_tree_from_newick(text: str, lambda_min: Optional[float] = None, source: str = "<string>") -> ModelTree:
    """Build a ModelTree whose edges realise the Newick lengths by substitution alone.

    ``lambda_min`` defaults to the smallest branch length in the file.
    """
    root = parse_newick(text, source)
    edges: List[Tuple[int, int, EdgeParams]] = []
    labels: Dict[int, str] = {}
    lengths: List[float] = []
    counter = [0]

    def walk(node: NewickNode, parent: Optional[int]):
        me = counter[0]
        counter[0] += 1
        if parent is not None:
            if node.length is None or node.length <= 0:
                raise SequenceFormatError(source, None, f"edge above node {me} needs a positive length")
            lengths.append(node.length)
            edges.append((me, parent, EdgeParams.substitution_only(node.length)))
        if node.is_leaf:
            labels[me] = node.label
        for child in node.children:
            walk(child, me)

    walk(root, None)
    if not edges:
        raise SequenceFormatError(source, None, "tree has no edges")
    try:
        return ModelTree.from_edges(edges, lambda_min=lambda_min or min(lengths), labels=labels)
    except ParameterDomainError as e:
        raise SequenceFormatError(source, None, str(e)) from e
