"""Textualization of nodes and metapath instances.

Converts graph neighborhoods into the space-joined text sequences the
language model consumes, under three information modes: attribute-only,
structure-only (nodes anonymized by id) and both.
"""

from __future__ import annotations

from enum import Enum

from .graph import HeteroGraph, Metapath, MetapathInstance, derive_seed, sample_instances

SEQ_SEP = "</s>"


class TextMode(str, Enum):
    ATTRIBUTE_ONLY = "attr"
    STRUCTURE_ONLY = "struct"
    BOTH = "both"


def textualize_node(graph: HeteroGraph, v: int, mode: TextMode = TextMode.BOTH) -> str:
    """Render a single node as text.

    both: `<type-name> <attribute>`; attribute-only: the attribute alone;
    structure-only: `<type-name> <node-id>` (anonymized). An empty
    attribute degrades to the type name (both) or the node id (attribute
    mode) so the result is never empty.
    """
    type_name = graph.node_type_names[graph.node_type(v)]
    attr = graph.node_text(v).strip()
    mode = TextMode(mode)
    if mode is TextMode.STRUCTURE_ONLY:
        return f"{type_name} {v}"
    if mode is TextMode.ATTRIBUTE_ONLY:
        return attr if attr else str(v)
    return f"{type_name} {attr}".strip()


def textualize_instance(graph: HeteroGraph, inst: MetapathInstance, mode: TextMode = TextMode.BOTH) -> str:
    """Space-joined alternation of node texts and edge-type names."""
    parts = [textualize_node(graph, inst.nodes[0], mode)]
    for et, v in zip(inst.edge_types, inst.nodes[1:]):
        parts.append(graph.edge_type_names[et])
        parts.append(textualize_node(graph, v, mode))
    return " ".join(parts)


def build_node_sequence(
    graph: HeteroGraph,
    v: int,
    metapaths: list[Metapath],
    k: int,
    seed: int,
    mode: TextMode = TextMode.BOTH,
) -> str:
    """The metapath-based text sequence anchored at node v.

    Iterates the catalog in order, skipping metapaths that do not start at
    v's type; samples up to k instances per metapath with a per-(node,
    metapath) derived seed; joins instance texts with ` </s> ` and
    terminates with ` </s>`. A node with zero instances over all metapaths
    yields its own text followed by ` </s>`.
    """
    texts = []
    vtype = graph.node_type(v)
    for idx, p in enumerate(metapaths):
        if p.node_types[0] != vtype:
            continue
        sub = derive_seed(seed, v, idx)
        for inst in sample_instances(graph, v, p, k, sub):
            texts.append(textualize_instance(graph, inst, mode))
    if not texts:
        return f"{textualize_node(graph, v, mode)} {SEQ_SEP}"
    return f" {SEQ_SEP} ".join(texts) + f" {SEQ_SEP}"
