"""Dataset bundles: TSV graph files plus a bundle.toml manifest.

Native layout of a bundle directory:

    nodes.tsv      node_id<TAB>node_type<TAB>attribute_text
    edges.tsv      src_id<TAB>dst_id<TAB>edge_type_name
    labels.tsv     node_id<TAB>category_string
    metapaths.txt  one metapath per line (see graph.parse_metapath_file)
    bundle.toml    dataset name, target node type, categories, file paths

Attribute text may contain spaces but no tabs, newlines, `</s>`, `[` or
`]`. Node ids must be dense 0..N-1 in any row order. When bundle.toml
declares node_types/edge_types the declaration order fixes type ids and
undeclared names are parse errors; otherwise ids follow first appearance.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import _toml
from .errors import DataError, ParseError
from .graph import HeteroGraph, Metapath, format_metapath, parse_metapath_file

_GRAPH_MAGIC = b"HGGRAPH1"


@dataclass
class DatasetBundle:
    dataset_name: str
    target_node_type: str
    category_labels: list[str]
    nodes_file: Path
    edges_file: Path
    labels_file: Path
    metapaths_file: Path
    node_types: list[str] | None = None
    edge_types: list[str] | None = None

    def __post_init__(self):
        if not self.category_labels:
            raise DataError("category label list is empty")
        if len(set(self.category_labels)) != len(self.category_labels):
            raise DataError("category labels contain duplicates")


def read_bundle_manifest(path) -> DatasetBundle:
    """Parse bundle.toml; `path` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.toml"
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    base = path.parent
    try:
        return DatasetBundle(
            dataset_name=data["dataset_name"],
            target_node_type=data["target_node_type"],
            category_labels=list(data["categories"]),
            nodes_file=base / data.get("nodes_file", "nodes.tsv"),
            edges_file=base / data.get("edges_file", "edges.tsv"),
            labels_file=base / data.get("labels_file", "labels.tsv"),
            metapaths_file=base / data.get("metapaths_file", "metapaths.txt"),
            node_types=list(data["node_types"]) if "node_types" in data else None,
            edge_types=list(data["edge_types"]) if "edge_types" in data else None,
        )
    except KeyError as e:
        raise ParseError(f"{path}: bundle.toml missing key {e}") from e


class _TypeTable:
    def __init__(self, declared):
        self.ids: dict[str, int] = {}
        self.declared = declared is not None
        if declared:
            for i, name in enumerate(declared):
                self.ids[name] = i

    def get(self, name, file, lineno):
        if name in self.ids:
            return self.ids[name]
        if self.declared:
            raise ParseError(f"{file}: unknown type name {name!r}", line=lineno)
        self.ids[name] = len(self.ids)
        return self.ids[name]

    def names(self):
        return {i: n for n, i in self.ids.items()}


def load_bundle(bundle) -> tuple[HeteroGraph, dict[int, str], list[Metapath], DatasetBundle]:
    """Load a bundle into (graph, label map, metapath catalog, manifest)."""
    if not isinstance(bundle, DatasetBundle):
        bundle = read_bundle_manifest(bundle)
    node_types = _TypeTable(bundle.node_types)
    edge_types = _TypeTable(bundle.edge_types)

    rows: dict[int, tuple[int, str]] = {}
    for lineno, parts in _tsv_rows(bundle.nodes_file, 3):
        try:
            nid = int(parts[0])
        except ValueError:
            raise ParseError(f"{bundle.nodes_file}: bad node id {parts[0]!r}", line=lineno)
        if nid in rows:
            raise ParseError(f"{bundle.nodes_file}: duplicate node id {nid}", line=lineno)
        rows[nid] = (node_types.get(parts[1], bundle.nodes_file, lineno), parts[2])
    if not rows:
        raise ParseError(f"{bundle.nodes_file}: no nodes")
    if set(rows) != set(range(len(rows))):
        raise ParseError(f"{bundle.nodes_file}: node ids must be dense 0..{len(rows) - 1}")
    ntypes = [rows[i][0] for i in range(len(rows))]
    ntexts = [rows[i][1] for i in range(len(rows))]

    edges = []
    for lineno, parts in _tsv_rows(bundle.edges_file, 3):
        try:
            s, d = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"{bundle.edges_file}: bad endpoint id", line=lineno)
        if s not in rows or d not in rows:
            raise ParseError(f"{bundle.edges_file}: dangling endpoint ({s},{d})", line=lineno)
        edges.append((s, d, edge_types.get(parts[2], bundle.edges_file, lineno)))

    try:
        graph = HeteroGraph(ntypes, ntexts, edges, node_types.names(), edge_types.names())
    except DataError as e:
        raise ParseError(f"{bundle.nodes_file}: {e}") from e

    target_tid = node_types.ids.get(bundle.target_node_type)
    if target_tid is None:
        raise ParseError(f"target node type {bundle.target_node_type!r} not present in the graph")
    labels: dict[int, str] = {}
    for lineno, parts in _tsv_rows(bundle.labels_file, 2):
        try:
            nid = int(parts[0])
        except ValueError:
            raise ParseError(f"{bundle.labels_file}: bad node id {parts[0]!r}", line=lineno)
        if nid not in rows:
            raise ParseError(f"{bundle.labels_file}: unknown node id {nid}", line=lineno)
        if graph.node_type(nid) != target_tid:
            raise ParseError(
                f"{bundle.labels_file}: node {nid} is not of target type "
                f"{bundle.target_node_type!r}",
                line=lineno,
            )
        if parts[1] not in bundle.category_labels:
            raise ParseError(f"{bundle.labels_file}: unknown category {parts[1]!r}", line=lineno)
        labels[nid] = parts[1]

    metapaths = parse_metapath_file(Path(bundle.metapaths_file).read_text(encoding="utf-8"), graph)
    return graph, labels, metapaths, bundle


def _tsv_rows(path, n_fields):
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file not found")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t", n_fields - 1)
            if len(parts) != n_fields:
                raise ParseError(f"{path}: expected {n_fields} tab-separated fields", line=lineno)
            yield lineno, parts


def save_bundle(directory, graph: HeteroGraph, labels: dict[int, str], metapaths, manifest: DatasetBundle):
    """Write a graph back to the TSV bundle layout (round-trip counterpart)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for v in range(graph.n_nodes):
            tname = graph.node_type_names[graph.node_type(v)]
            fh.write(f"{v}\t{tname}\t{graph.node_text(v)}\n")
    with open(directory / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for s, d, t in graph.edges:
            fh.write(f"{s}\t{d}\t{graph.edge_type_names[t]}\n")
    with open(directory / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for v in sorted(labels):
            fh.write(f"{v}\t{labels[v]}\n")
    with open(directory / "metapaths.txt", "w", encoding="utf-8", newline="\n") as fh:
        for p in metapaths:
            fh.write(format_metapath(graph, p) + "\n")
    node_type_order = [graph.node_type_names[i] for i in sorted(graph.node_type_names)]
    edge_type_order = [graph.edge_type_names[i] for i in sorted(graph.edge_type_names)]
    with open(directory / "bundle.toml", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            _toml.dumps(
                {
                    "dataset_name": manifest.dataset_name,
                    "target_node_type": manifest.target_node_type,
                    "categories": list(manifest.category_labels),
                    "node_types": node_type_order,
                    "edge_types": edge_type_order,
                }
            )
        )


def canonical_form(graph: HeteroGraph):
    """Comparable snapshot used by round-trip tests."""
    return (
        tuple(graph.node_types),
        tuple(graph.node_texts),
        tuple(sorted(graph.edges)),
        tuple(sorted(graph.node_type_names.items())),
        tuple(sorted(graph.edge_type_names.items())),
    )


# --- binary graph container (CLI `ingest` output) --------------------------


def write_graph_file(path, graph: HeteroGraph, labels, metapaths, manifest: DatasetBundle):
    """Single-file binary form of a loaded bundle: magic + JSON payload."""
    nt_index = {tid: i for i, tid in enumerate(sorted(graph.node_type_names))}
    et_index = {tid: i for i, tid in enumerate(sorted(graph.edge_type_names))}
    payload = {
        "dataset_name": manifest.dataset_name,
        "target_node_type": manifest.target_node_type,
        "categories": list(manifest.category_labels),
        "node_types": [graph.node_type_names[i] for i in sorted(graph.node_type_names)],
        "edge_types": [graph.edge_type_names[i] for i in sorted(graph.edge_type_names)],
        "nodes": [[nt_index[graph.node_type(v)], graph.node_text(v)] for v in range(graph.n_nodes)],
        "edges": [[s, d, et_index[t]] for s, d, t in graph.edges],
        "labels": {str(k): v for k, v in sorted(labels.items())},
        "metapaths": [format_metapath(graph, p) for p in metapaths],
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_GRAPH_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)


def read_graph_file(path):
    """Inverse of write_graph_file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_GRAPH_MAGIC))
        if magic != _GRAPH_MAGIC:
            raise DataError(f"{path}: not a graph file (bad magic {magic!r})")
        n = int.from_bytes(fh.read(8), "little")
        payload = json.loads(fh.read(n).decode("utf-8"))
    node_type_names = {i: n for i, n in enumerate(payload["node_types"])}
    edge_type_names = {i: n for i, n in enumerate(payload["edge_types"])}
    graph = HeteroGraph(
        [t for t, _ in payload["nodes"]],
        [x for _, x in payload["nodes"]],
        [tuple(e) for e in payload["edges"]],
        node_type_names,
        edge_type_names,
    )
    labels = {int(k): v for k, v in payload["labels"].items()}
    metapaths = parse_metapath_file("\n".join(payload["metapaths"]), graph)
    manifest = DatasetBundle(
        dataset_name=payload["dataset_name"],
        target_node_type=payload["target_node_type"],
        category_labels=list(payload["categories"]),
        nodes_file=Path("-"),
        edges_file=Path("-"),
        labels_file=Path("-"),
        metapaths_file=Path("-"),
    )
    return graph, labels, metapaths, manifest
