"""In-memory heterogeneous graph with typed nodes/edges and metapath sampling.

A heterogeneous graph holds dense-id nodes (each with a type and a textual
attribute) and typed directed edges. Inverse relations, where present, are
explicit edges in the input; nothing here reverses edges implicitly.

Graphs are immutable after construction and all operations are read-only,
so concurrent callers are safe. Sampling carries its own seeded generator.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from .errors import DataError, ParseError

# Attribute text is embedded verbatim into bracket-structured corpus lines,
# so these substrings would corrupt downstream parsing.
_FORBIDDEN_IN_ATTRS = ("\t", "\n", "</s>", "[", "]")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from heterogeneous parts (ints/strings).

    Platform- and process-independent, unlike builtin hash(). Used to give
    every (node, metapath) pair its own generator so parallel corpus
    construction is schedule-independent.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Metapath:
    """Type-level path template: alternating node types and edge types.

    node_types has one more element than edge_types, and the path must be
    symmetric (same start and end node type).
    """

    node_types: tuple[int, ...]
    edge_types: tuple[int, ...]

    def __post_init__(self):
        if len(self.node_types) != len(self.edge_types) + 1:
            raise DataError("metapath node/edge type counts inconsistent")
        if len(self.edge_types) < 1:
            raise DataError("metapath must have at least one edge")
        if self.node_types[0] != self.node_types[-1]:
            raise DataError("metapath must be symmetric (start type == end type)")

    @property
    def length(self) -> int:
        return len(self.edge_types)


@dataclass(frozen=True)
class MetapathInstance:
    """A concrete node path conforming to a metapath.

    edge_types are aligned between consecutive nodes.
    """

    nodes: tuple[int, ...]
    edge_types: tuple[int, ...]


class HeteroGraph:
    """Typed directed graph with textual node attributes.

    Node ids are dense integers 0..N-1 (the index into the constructor
    lists). Adjacency is indexed per (node, edge type), neighbor lists
    sorted ascending.
    """

    def __init__(self, node_types, node_texts, edges, node_type_names, edge_type_names):
        if len(node_types) != len(node_texts):
            raise DataError("node_types and node_texts length mismatch")
        self.node_types = list(node_types)
        self.node_texts = list(node_texts)
        self.edges = [(int(s), int(d), int(t)) for s, d, t in edges]
        self.node_type_names = dict(node_type_names)
        self.edge_type_names = dict(edge_type_names)
        self._validate()

        self._adj: dict[tuple[int, int], tuple[int, ...]] = {}
        adj: dict[tuple[int, int], list[int]] = {}
        for s, d, t in self.edges:
            adj.setdefault((s, t), []).append(d)
        for key, nbrs in adj.items():
            self._adj[key] = tuple(sorted(nbrs))
        self._edge_pairs = frozenset((s, d) for s, d, _ in self.edges)
        self._schema = frozenset(
            (self.node_types[s], t, self.node_types[d]) for s, d, t in self.edges
        )
        self._nodes_by_type: dict[int, tuple[int, ...]] = {}
        by_type: dict[int, list[int]] = {}
        for v, tp in enumerate(self.node_types):
            by_type.setdefault(tp, []).append(v)
        for tp, vs in by_type.items():
            self._nodes_by_type[tp] = tuple(vs)

    def _validate(self):
        n = len(self.node_types)
        for v, tp in enumerate(self.node_types):
            if tp not in self.node_type_names:
                raise DataError(f"node {v} has unknown type id {tp}")
        for v, text in enumerate(self.node_texts):
            for bad in _FORBIDDEN_IN_ATTRS:
                if bad in text:
                    raise DataError(f"node {v} attribute contains forbidden {bad!r}")
        for s, d, t in self.edges:
            if not (0 <= s < n and 0 <= d < n):
                raise DataError(f"edge ({s},{d}) references a missing node")
            if t not in self.edge_type_names:
                raise DataError(f"edge ({s},{d}) has unknown edge type id {t}")
        if len(self.node_type_names) + len(self.edge_type_names) <= 2:
            raise DataError("graph is not heterogeneous: |node types| + |edge types| must exceed 2")

    @property
    def n_nodes(self) -> int:
        return len(self.node_types)

    def node_type(self, v: int) -> int:
        return self.node_types[v]

    def node_text(self, v: int) -> str:
        return self.node_texts[v]

    def neighbors(self, v: int, edge_type: int) -> tuple[int, ...]:
        return self._adj.get((v, edge_type), ())

    def nodes_of_type(self, type_id: int) -> tuple[int, ...]:
        return self._nodes_by_type.get(type_id, ())

    def has_edge(self, src: int, dst: int) -> bool:
        """True if any edge of any type connects src to dst."""
        return (src, dst) in self._edge_pairs

    def schema_triples(self) -> frozenset[tuple[int, int, int]]:
        """Set of (src type, edge type, dst type) triples present in the graph."""
        return self._schema

    def node_type_id(self, name: str) -> int:
        for tid, nm in self.node_type_names.items():
            if nm == name:
                return tid
        raise DataError(f"unknown node type name {name!r}")

    def edge_type_id(self, name: str) -> int:
        for tid, nm in self.edge_type_names.items():
            if nm == name:
                return tid
        raise DataError(f"unknown edge type name {name!r}")


def enumerate_metapaths(graph: HeteroGraph, max_edges: int, start_type: int | None = None) -> list[Metapath]:
    """All symmetric type-level paths of length <= max_edges over the schema.

    Deduplicated and sorted by (length, node type ids, edge type ids).
    A user-supplied whitelist (parse_metapath_file) overrides enumeration.
    """
    if max_edges < 1:
        raise DataError("max_edges must be >= 1")
    triples = graph.schema_triples()
    if not triples:
        raise DataError("no edge types")
    out_by_type: dict[int, list[tuple[int, int]]] = {}
    for a, r, b in triples:
        out_by_type.setdefault(a, []).append((r, b))
    starts = [start_type] if start_type is not None else sorted(out_by_type)
    found: set[Metapath] = set()

    def walk(origin, current, ntypes, etypes):
        if len(etypes) >= 1 and current == origin:
            found.add(Metapath(tuple(ntypes), tuple(etypes)))
        if len(etypes) == max_edges:
            return
        for r, b in sorted(out_by_type.get(current, ())):
            walk(origin, b, ntypes + [b], etypes + [r])

    for a in starts:
        walk(a, a, [a], [])
    return sorted(found, key=lambda p: (p.length, p.node_types, p.edge_types))


_MAX_RESTARTS = 50


def sample_instances(graph: HeteroGraph, v: int, p: Metapath, k: int, seed: int) -> list[MetapathInstance]:
    """Sample up to k distinct metapath instances anchored at v.

    Seeded uniform random walk constrained to p's type/edge pattern; dead
    ends are rejected and retried, at most 50 restarts per requested
    instance. Deterministic for fixed (seed, v, p). Returns fewer than k
    when fewer distinct instances exist (or the retry budget runs out).
    """
    if k < 1:
        raise DataError("k must be >= 1")
    if graph.node_type(v) != p.node_types[0]:
        raise DataError(
            f"node {v} has type {graph.node_type(v)}, metapath starts at type {p.node_types[0]}"
        )
    rng = random.Random(seed)
    seen: set[tuple[int, ...]] = set()
    out: list[MetapathInstance] = []
    for _ in range(k):
        got_new = False
        for _attempt in range(_MAX_RESTARTS):
            path = _walk_once(graph, v, p, rng)
            if path is None:
                continue
            if path in seen:
                continue
            seen.add(path)
            out.append(MetapathInstance(path, p.edge_types))
            got_new = True
            break
        if not got_new:
            break
    return out


def _walk_once(graph, v, p, rng):
    path = [v]
    cur = v
    for i, et in enumerate(p.edge_types):
        want = p.node_types[i + 1]
        cands = [u for u in graph.neighbors(cur, et) if graph.node_type(u) == want]
        if not cands:
            return None
        cur = cands[rng.randrange(len(cands))]
        path.append(cur)
    return tuple(path)


def instance_is_valid(graph: HeteroGraph, inst: MetapathInstance, p: Metapath) -> bool:
    """Check an instance against the graph adjacency and the metapath pattern."""
    if inst.edge_types != p.edge_types or len(inst.nodes) != len(p.node_types):
        return False
    for v, want in zip(inst.nodes, p.node_types):
        if graph.node_type(v) != want:
            return False
    for (a, b), et in zip(zip(inst.nodes, inst.nodes[1:]), inst.edge_types):
        if b not in graph.neighbors(a, et):
            return False
    return True


def parse_metapath_file(text: str, graph: HeteroGraph) -> list[Metapath]:
    """Parse a metapath whitelist: one metapath per line.

    Line format: `NodeType edgeType NodeType edgeType ... NodeType`,
    whitespace-separated; `#` starts a comment. Type and edge names may
    contain spaces; segmentation is resolved greedily (longest match)
    against the graph schema names.
    """
    node_names = {name: tid for tid, name in graph.node_type_names.items()}
    edge_names = {name: tid for tid, name in graph.edge_type_names.items()}
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        out.append(_parse_metapath_line(line, node_names, edge_names, graph, lineno))
    return out


def _parse_metapath_line(line, node_names, edge_names, graph, lineno):
    tokens = line.split()
    ntypes, etypes = [], []
    pos = 0
    expect_node = True
    while pos < len(tokens):
        table = node_names if expect_node else edge_names
        match = None
        for take in range(len(tokens) - pos, 0, -1):
            cand = " ".join(tokens[pos : pos + take])
            if cand in table:
                match = (table[cand], take)
                break
        if match is None:
            kind = "node type" if expect_node else "edge type"
            raise ParseError(f"no {kind} name matches at token {tokens[pos]!r}", line=lineno)
        tid, take = match
        (ntypes if expect_node else etypes).append(tid)
        pos += take
        expect_node = not expect_node
    if expect_node or len(ntypes) < 2:
        raise ParseError("metapath line must end with a node type", line=lineno)
    try:
        p = Metapath(tuple(ntypes), tuple(etypes))
    except DataError as e:
        raise ParseError(str(e), line=lineno) from e
    schema = graph.schema_triples()
    for i, et in enumerate(p.edge_types):
        triple = (p.node_types[i], et, p.node_types[i + 1])
        if triple not in schema:
            names = (
                graph.node_type_names[triple[0]],
                graph.edge_type_names[triple[1]],
                graph.node_type_names[triple[2]],
            )
            raise ParseError(f"schema has no triple {names}", line=lineno)
    return p


def format_metapath(graph: HeteroGraph, p: Metapath) -> str:
    """Inverse of parse_metapath_file for a single metapath."""
    parts = []
    for i, nt in enumerate(p.node_types):
        parts.append(graph.node_type_names[nt])
        if i < len(p.edge_types):
            parts.append(graph.edge_type_names[p.edge_types[i]])
    return " ".join(parts)
