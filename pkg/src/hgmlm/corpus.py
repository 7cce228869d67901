"""Corpus entries: task templates, assembly, masking and JSONL storage.

Each entry is a bracketed prefix of metapath-based sequences followed by a
templated task clause holding a single `<target>` placeholder. Masked
entries replace the placeholder with the literal `<mask>` token and carry
the target label plus its constrained vocabulary alongside.

Label strings are stored in angle brackets exactly as they appear in the
rendered text (e.g. `<comedy>`, `<was acted by>`, `<no relation>`).
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field

from .errors import DataError
from .graph import HeteroGraph, Metapath
from .textualize import SEQ_SEP, TextMode, build_node_sequence, textualize_node

TARGET_PLACEHOLDER = "<target>"
MASK = "<mask>"
NO_EDGE_LABEL = "no relation"

TASK_NC = "nc"
TASK_LP = "lp"


def bracket_label(name: str) -> str:
    """Canonical in-text form of a label: the raw name in angle brackets."""
    return f"<{name}>"


@dataclass
class TaskSpec:
    """A task's dataset name and constrained label set.

    For link prediction the label set is the edge-type names plus the
    no-edge label.
    """

    kind: str
    dataset: str
    labels: list[str]
    negative_ratio: float = 1.0
    no_edge_label: str = NO_EDGE_LABEL

    def __post_init__(self):
        if self.kind not in (TASK_NC, TASK_LP):
            raise DataError(f"unknown task kind {self.kind!r}")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("label set contains duplicates")
        if not self.labels:
            raise DataError("label set is empty")
        if self.kind == TASK_LP and self.no_edge_label not in self.labels:
            raise DataError("link-prediction label set must include the no-edge label")

    @property
    def vocab(self) -> list[str]:
        return [bracket_label(name) for name in self.labels]


def render_nc_task(object_text: str, label: str, label_set) -> str:
    """Node-classification clause with the `<target>` placeholder in place."""
    if not object_text.strip():
        raise DataError("empty object text")
    if label not in label_set:
        raise DataError(f"label {label!r} not in the dataset label set")
    return f"You can deduce the category of {object_text} as {TARGET_PLACEHOLDER}."


def render_lp_task(src_text: str, dst_text: str, label: str, label_set) -> str:
    """Link-prediction clause with the `<target>` placeholder in place."""
    if not src_text.strip() or not dst_text.strip():
        raise DataError("empty endpoint text")
    if label not in label_set:
        raise DataError(f"label {label!r} not in the link-prediction label set")
    return f"You can deduce {src_text} {TARGET_PLACEHOLDER} {dst_text}."


@dataclass
class CorpusEntry:
    entry_id: str
    task: str
    dataset: str
    prefixes: list[str]
    task_text: str
    target: str
    vocab: list[str]

    def display_text(self) -> str:
        """Unmasked full text, target label visible (golden/debug form)."""
        return _join_full(self.prefixes, self.task_text.replace(TARGET_PLACEHOLDER, self.target))

    def masked_text(self) -> str:
        return _join_full(self.prefixes, self.task_text.replace(TARGET_PLACEHOLDER, MASK))


@dataclass
class MaskedEntry:
    """A corpus entry ready for tokenization: one `<mask>`, target on the side."""

    entry_id: str
    task: str
    dataset: str
    text: str
    target: str
    vocab: list[str]


def _join_full(prefixes, task_text):
    leading = " ".join(f"[{p}]" for p in prefixes)
    return f"{leading} {task_text}" if leading else task_text


def assemble_entry(prefixes, task_text, target, vocab, task, dataset) -> CorpusEntry:
    """Build a validated entry; the id is a 64-bit content hash of the full text."""
    want_m = 1 if task == TASK_NC else 2
    if len(prefixes) != want_m:
        raise DataError(f"{task} entries need {want_m} prefix sequence(s), got {len(prefixes)}")
    if task_text.count(TARGET_PLACEHOLDER) != 1:
        raise DataError("task text must contain exactly one <target> placeholder")
    if target not in vocab:
        raise DataError(f"target {target!r} not in entry vocabulary")
    entry = CorpusEntry("", task, dataset, list(prefixes), task_text, target, list(vocab))
    digest = hashlib.blake2b(entry.display_text().encode("utf-8"), digest_size=8)
    entry.entry_id = digest.hexdigest()
    return entry


def mask_entry(entry: CorpusEntry) -> MaskedEntry:
    """Replace the single placeholder with the literal `<mask>`."""
    text = entry.masked_text()
    if text.count(MASK) != 1:
        raise DataError(f"entry {entry.entry_id}: expected exactly one {MASK}, got {text.count(MASK)}")
    return MaskedEntry(entry.entry_id, entry.task, entry.dataset, text, entry.target, list(entry.vocab))


def unmask(masked: MaskedEntry) -> str:
    """Reconstruct the unmasked full text."""
    return masked.text.replace(MASK, masked.target)


_NEGATIVE_RETRY_FACTOR = 50


def generate_lp_examples(
    graph: HeteroGraph,
    edge_type_filter=None,
    negative_ratio: float = 1.0,
    seed: int = 0,
) -> list[tuple[int, int, str]]:
    """Positive edges plus sampled non-edges for link prediction.

    Positives keep their edge-type name as label (optionally filtered by
    type name). Negatives are uniform over type-compatible non-adjacent
    ordered pairs, labeled with the no-edge label, duplicate-free, with
    count = round(ratio * positives). Raises when the graph is too dense
    to find that many negatives within a bounded number of retries.
    """
    if negative_ratio < 0:
        raise DataError("negative_ratio must be >= 0")
    positives = []
    for s, d, t in graph.edges:
        name = graph.edge_type_names[t]
        if edge_type_filter is not None and name not in edge_type_filter:
            continue
        positives.append((s, d, name))
    n_neg = int(round(negative_ratio * len(positives)))
    if n_neg == 0:
        return positives
    type_pairs = sorted({(graph.node_type(s), graph.node_type(d)) for s, d, _ in positives})
    rng = random.Random(seed)
    chosen: set[tuple[int, int]] = set()
    negatives = []
    budget = _NEGATIVE_RETRY_FACTOR * n_neg
    while len(negatives) < n_neg:
        if budget <= 0:
            raise DataError(
                f"could not sample {n_neg} negative pairs after bounded retries "
                f"({len(negatives)} found); graph too dense"
            )
        budget -= 1
        st, dt = type_pairs[rng.randrange(len(type_pairs))]
        src_pool = graph.nodes_of_type(st)
        dst_pool = graph.nodes_of_type(dt)
        s = src_pool[rng.randrange(len(src_pool))]
        d = dst_pool[rng.randrange(len(dst_pool))]
        if s == d or (s, d) in chosen or graph.has_edge(s, d):
            continue
        chosen.add((s, d))
        negatives.append((s, d, None))
    return positives + negatives


def build_nc_entries(
    graph: HeteroGraph,
    labels: dict[int, str],
    spec: TaskSpec,
    metapaths: list[Metapath],
    k: int,
    seed: int,
    mode: TextMode = TextMode.BOTH,
    prefix_fn=None,
    no_metapath: bool = False,
) -> list[CorpusEntry]:
    """One classification entry per labeled node, in node-id order.

    prefix_fn, when given, replaces the metapath-based sequence builder
    (used for the flat graph-to-text comparison). no_metapath swaps each
    sequence for the node's own attribute text.
    """
    entries = []
    for v in sorted(labels):
        ms = _prefix_for(graph, v, metapaths, k, seed, mode, prefix_fn, no_metapath)
        obj = textualize_node(graph, v, mode)
        task_text = render_nc_task(obj, labels[v], spec.labels)
        entries.append(
            assemble_entry([ms], task_text, bracket_label(labels[v]), spec.vocab, TASK_NC, spec.dataset)
        )
    return entries


def build_lp_entries(
    graph: HeteroGraph,
    spec: TaskSpec,
    metapaths: list[Metapath],
    k: int,
    seed: int,
    mode: TextMode = TextMode.BOTH,
    edge_type_filter=None,
    prefix_fn=None,
    no_metapath: bool = False,
) -> list[CorpusEntry]:
    """Link-prediction entries: all (filtered) positive edges plus negatives."""
    examples = generate_lp_examples(graph, edge_type_filter, spec.negative_ratio, seed)
    entries = []
    for s, d, label in examples:
        name = label if label is not None else spec.no_edge_label
        ms_s = _prefix_for(graph, s, metapaths, k, seed, mode, prefix_fn, no_metapath)
        ms_d = _prefix_for(graph, d, metapaths, k, seed, mode, prefix_fn, no_metapath)
        task_text = render_lp_task(
            textualize_node(graph, s, mode), textualize_node(graph, d, mode), name, spec.labels
        )
        entries.append(
            assemble_entry([ms_s, ms_d], task_text, bracket_label(name), spec.vocab, TASK_LP, spec.dataset)
        )
    return entries


def _prefix_for(graph, v, metapaths, k, seed, mode, prefix_fn, no_metapath):
    if prefix_fn is not None:
        return prefix_fn(graph, v)
    if no_metapath:
        attr_mode = mode if mode is TextMode.STRUCTURE_ONLY else TextMode.ATTRIBUTE_ONLY
        return f"{textualize_node(graph, v, attr_mode)} {SEQ_SEP}"
    return build_node_sequence(graph, v, metapaths, k, seed, mode)


# --- bracket-structured text layout -------------------------------------
#
# Full entry text: `[inst </s> inst </s>] [inst </s>] task clause`.
# The tokenizer's truncation needs to re-parse this layout to drop whole
# instances, so parsing/rendering lives here next to the assembly rules.


def parse_entry_text(text: str) -> tuple[list[list[str]], str]:
    """Split a full entry text into per-bracket instance lists and the task clause."""
    brackets = []
    rest = text
    while rest.startswith("["):
        end = rest.find("]")
        if end < 0:
            raise DataError("unbalanced '[' in entry text")
        content = rest[1:end]
        sep = f" {SEQ_SEP}"
        if content.endswith(sep):
            body = content[: -len(sep)]
            brackets.append(body.split(f" {SEQ_SEP} ") if body else [])
        elif content == "":
            brackets.append([])
        else:
            raise DataError("bracket content does not end with the sequence separator")
        rest = rest[end + 1 :].lstrip(" ")
    return brackets, rest


def render_entry_text(brackets: list[list[str]], task_text: str) -> str:
    """Inverse of parse_entry_text."""
    parts = []
    for insts in brackets:
        if insts:
            parts.append("[" + f" {SEQ_SEP} ".join(insts) + f" {SEQ_SEP}]")
        else:
            parts.append("[]")
    parts.append(task_text)
    return " ".join(parts)


# --- JSONL corpus files ---------------------------------------------------

_FIELDS = ("entry_id", "task", "dataset", "text", "target", "vocab")


def write_corpus(path, entries: list[MaskedEntry]):
    """One JSON object per line, UTF-8, `\\n` endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            rec = {
                "entry_id": e.entry_id,
                "task": e.task,
                "dataset": e.dataset,
                "text": e.text,
                "target": e.target,
                "vocab": e.vocab,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_corpus(path) -> list[MaskedEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: bad JSON on line {lineno}: {e}") from e
            missing = [f for f in _FIELDS if f not in rec]
            if missing:
                raise DataError(f"{path}: line {lineno} missing fields {missing}")
            entries.append(
                MaskedEntry(
                    rec["entry_id"], rec["task"], rec["dataset"], rec["text"], rec["target"], list(rec["vocab"])
                )
            )
    return entries
