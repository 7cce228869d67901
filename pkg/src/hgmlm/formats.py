"""GML and GraphML parsing into a flat node/edge description.

Supports the element subset used by the graph-to-text comparison:
GML key-value lists with node/edge blocks, and GraphML graph/node/edge
elements with key/data attributes. Both parse into the same
FlatGraphDescription so their flattened text forms can be compared.
Parsers are pure functions, safe to run per-file in parallel.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from .errors import DataError, ParseError


@dataclass
class FlatNode:
    id: object
    attrs: dict = field(default_factory=dict)


@dataclass
class FlatEdge:
    source: object
    target: object
    attrs: dict = field(default_factory=dict)


@dataclass
class FlatGraphDescription:
    nodes: list[FlatNode] = field(default_factory=list)
    edges: list[FlatEdge] = field(default_factory=list)

    def canonical(self):
        """Order-insensitive comparable form: nodes relabeled 0..N-1 by
        declaration order, edges remapped and sorted."""
        index = {n.id: i for i, n in enumerate(self.nodes)}
        nodes = tuple((i, tuple(sorted(n.attrs.items()))) for i, n in enumerate(self.nodes))
        edges = tuple(
            sorted(
                (index[e.source], index[e.target], tuple(sorted(e.attrs.items())))
                for e in self.edges
            )
        )
        return nodes, edges


# --- GML -------------------------------------------------------------------


def _lex_gml(text):
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch.isspace():
            col += 1
            i += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in "[]":
            tokens.append((ch, ch, line, col))
            col += 1
            i += 1
            continue
        if ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\n":
                    raise ParseError("unterminated string", line=line, column=col)
                j += 1
            if j >= n:
                raise ParseError("unterminated string", line=line, column=col)
            tokens.append(("str", text[i + 1 : j], line, col))
            col += j - i + 1
            i = j + 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] not in "[]":
            j += 1
        word = text[i:j]
        tokens.append(("word", word, line, col))
        col += j - i
        i = j
    return tokens


def _parse_gml_list(tokens, pos):
    """Parse a key-value list until ']' or end; returns (list of pairs, next pos)."""
    items = []
    while pos < len(tokens):
        kind, value, line, col = tokens[pos]
        if kind == "]":
            return items, pos + 1
        if kind != "word":
            raise ParseError(f"expected a key, got {value!r}", line=line, column=col)
        key = value
        pos += 1
        if pos >= len(tokens):
            raise ParseError(f"key {key!r} has no value", line=line, column=col)
        vkind, vval, vline, vcol = tokens[pos]
        if vkind == "[":
            sub, pos = _parse_gml_list(tokens, pos + 1)
            items.append((key, sub))
        elif vkind == "str":
            items.append((key, vval))
            pos += 1
        elif vkind == "word":
            items.append((key, _coerce(vval)))
            pos += 1
        else:
            raise ParseError(f"unexpected {vval!r} as value", line=vline, column=vcol)
    return items, pos


def _coerce(word):
    try:
        return int(word)
    except ValueError:
        pass
    try:
        return float(word)
    except ValueError:
        return word


def parse_gml(text: str) -> FlatGraphDescription:
    """Parse a GML document into flat node and edge records."""
    tokens = _lex_gml(text)
    items, pos = _parse_gml_list(tokens, 0)
    if pos < len(tokens):
        _, value, line, col = tokens[pos]
        raise ParseError(f"unbalanced ']' near {value!r}", line=line, column=col)
    graph_block = None
    for key, value in items:
        if key == "graph":
            if not isinstance(value, list):
                raise ParseError("graph key must open a list")
            graph_block = value
            break
    if graph_block is None:
        raise ParseError("no graph block found")
    flat = FlatGraphDescription()
    for key, value in graph_block:
        if key == "node":
            attrs = dict(v for v in value if v[0] != "id")
            ids = [v[1] for v in value if v[0] == "id"]
            if len(ids) != 1:
                raise ParseError("node block needs exactly one id")
            flat.nodes.append(FlatNode(ids[0], attrs))
        elif key == "edge":
            pairs = dict(value)
            if "source" not in pairs or "target" not in pairs:
                raise ParseError("edge block needs source and target")
            attrs = {k: v for k, v in pairs.items() if k not in ("source", "target")}
            flat.edges.append(FlatEdge(pairs["source"], pairs["target"], attrs))
    _check_edges(flat)
    return flat


# --- GraphML ---------------------------------------------------------------


def _strip_ns(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_graphml(text: str) -> FlatGraphDescription:
    """Parse the graph/node/edge + key/data subset of GraphML."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        line, col = e.position
        raise ParseError(f"malformed XML: {e.msg if hasattr(e, 'msg') else e}", line=line, column=col) from e
    keys = {}
    for el in root.iter():
        if _strip_ns(el.tag) == "key":
            keys[el.get("id")] = el.get("attr.name", el.get("id"))
    graph = None
    for el in root.iter():
        if _strip_ns(el.tag) == "graph":
            graph = el
            break
    if graph is None:
        raise ParseError("no <graph> element found")
    flat = FlatGraphDescription()
    for el in graph:
        tag = _strip_ns(el.tag)
        if tag == "node":
            flat.nodes.append(FlatNode(_node_id(el.get("id")), _data_attrs(el, keys)))
        elif tag == "edge":
            flat.edges.append(
                FlatEdge(_node_id(el.get("source")), _node_id(el.get("target")), _data_attrs(el, keys))
            )
    _check_edges(flat)
    return flat


def _node_id(raw):
    if raw is None:
        raise ParseError("element missing its id attribute")
    try:
        return int(raw)
    except ValueError:
        return raw


def _data_attrs(el, keys):
    attrs = {}
    for child in el:
        if _strip_ns(child.tag) == "data":
            name = keys.get(child.get("key"), child.get("key"))
            attrs[name] = _coerce((child.text or "").strip())
    return attrs


def _check_edges(flat: FlatGraphDescription):
    known = {n.id for n in flat.nodes}
    for e in flat.edges:
        if e.source not in known or e.target not in known:
            raise ParseError(f"edge ({e.source}, {e.target}) references an unknown node")


def hetero_to_flat(graph) -> FlatGraphDescription:
    """View a HeteroGraph as flat node/edge records (for flattened prefixes)."""
    flat = FlatGraphDescription()
    for v in range(graph.n_nodes):
        flat.nodes.append(
            FlatNode(v, {"type": graph.node_type_names[graph.node_type(v)], "label": graph.node_text(v)})
        )
    for s, d, t in graph.edges:
        flat.edges.append(FlatEdge(s, d, {"label": graph.edge_type_names[t]}))
    return flat


# --- flattened text --------------------------------------------------------


def flatten_to_text(flat: FlatGraphDescription, v) -> str:
    """Plain-text record of node v and its incident edges.

    One `node` line followed by `edge` lines sorted by (neighbor id, edge
    attributes); attribute key-value pairs are emitted in key order. This
    is the metapath-free replacement prefix for the graph-to-text
    comparison.
    """
    by_id = {n.id: n for n in flat.nodes}
    if v not in by_id:
        raise DataError(f"unknown node {v!r}")
    node = by_id[v]
    lines = ["node " + _render_fields(node.id, node.attrs)]
    incident = []
    for e in flat.edges:
        if e.source == v or e.target == v:
            neighbor = e.target if e.source == v else e.source
            incident.append((str(neighbor), tuple(sorted(e.attrs.items())), e))
    incident.sort(key=lambda t: (t[0], t[1]))
    for _, _, e in incident:
        lines.append(f"edge {e.source} {e.target}" + _render_attrs(e.attrs))
    return "\n".join(lines)


def _render_fields(node_id, attrs):
    return f"{node_id}" + _render_attrs(attrs)


def _render_attrs(attrs):
    parts = []
    for key in sorted(attrs):
        parts.append(f" {key} {attrs[key]}")
    return "".join(parts)
