"""Word-level vocabulary and fixed-length encoding of masked entries.

Labels are registered as single atomic tokens (`<glandular disease>` is one
token), so masked-token prediction is always a single-token decision.
Tokenization splits out atomic tokens first (longest match), then splits
the remaining segments on whitespace, peeling `[`/`]` off word boundaries.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import MASK, MaskedEntry, parse_entry_text, render_entry_text
from .errors import DataError
from .textualize import SEQ_SEP

PAD, UNK = "<pad>", "<unk>"
RESERVED = (PAD, UNK, MASK, SEQ_SEP)
PAD_ID, UNK_ID, MASK_ID, SEP_ID = 0, 1, 2, 3

_FLAG_RESERVED = "reserved"
_FLAG_LABEL = "label"
_FLAG_WORD = "word"


def _atomic_pattern(atomic_tokens) -> re.Pattern:
    ordered = sorted(set(atomic_tokens), key=lambda t: (-len(t), t))
    return re.compile("|".join(re.escape(t) for t in ordered))


def tokenize(text: str, atomic: re.Pattern) -> list[str]:
    """Deterministic word tokenization with atomic-token recognition."""
    out = []
    pos = 0
    for m in atomic.finditer(text):
        _split_words(text[pos : m.start()], out)
        out.append(m.group(0))
        pos = m.end()
    _split_words(text[pos:], out)
    return out


def _split_words(segment: str, out: list[str]):
    for word in segment.split():
        while word.startswith("["):
            out.append("[")
            word = word[1:]
        closers = 0
        while word.endswith("]"):
            closers += 1
            word = word[:-1]
        if word:
            out.append(word)
        out.extend("]" * closers)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    label_ids: frozenset[int]
    _pattern: re.Pattern = field(repr=False, default=None)

    def __post_init__(self):
        if self._pattern is None:
            labels = [self.id_to_token[i] for i in sorted(self.label_ids)]
            self._pattern = _atomic_pattern(labels + [MASK, SEQ_SEP])

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def label_tokens(self) -> list[str]:
        return [self.id_to_token[i] for i in sorted(self.label_ids)]

    def tokenize(self, text: str) -> list[str]:
        return tokenize(text, self._pattern)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save_tsv(self, path):
        """`token<TAB>id<TAB>flags`, one token per line, id order."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.id_to_token):
                if tok in RESERVED:
                    flag = _FLAG_RESERVED
                elif i in self.label_ids:
                    flag = _FLAG_LABEL
                else:
                    flag = _FLAG_WORD
                fh.write(f"{tok}\t{i}\t{flag}\n")

    @classmethod
    def load_tsv(cls, path) -> "Vocab":
        id_to_token, label_ids = [], set()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields")
                tok, idx, flag = parts
                if int(idx) != len(id_to_token):
                    raise DataError(f"{path}: line {lineno}: ids must be dense and ordered")
                if flag == _FLAG_LABEL:
                    label_ids.add(int(idx))
                id_to_token.append(tok)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token, frozenset(label_ids))


def build_vocab(texts, label_tokens, min_count: int = 1) -> Vocab:
    """Deterministic vocabulary: reserved ids, then sorted labels, then sorted words.

    label_tokens are the bracketed label strings of every registered task;
    each becomes one atomic token. Whitespace words below min_count fall to
    `<unk>` at encode time.
    """
    labels = sorted(set(label_tokens))
    for lab in labels:
        if lab in RESERVED:
            raise DataError(f"label {lab!r} collides with a reserved token")
    pattern = _atomic_pattern(labels + [MASK, SEQ_SEP])
    counts: dict[str, int] = {}
    seen_any = False
    for text in texts:
        seen_any = True
        for tok in tokenize(text, pattern):
            counts[tok] = counts.get(tok, 0) + 1
    if not seen_any:
        raise DataError("no corpus texts given")
    skip = set(RESERVED) | set(labels)
    words = sorted(t for t, c in counts.items() if c >= min_count and t not in skip)
    id_to_token = list(RESERVED) + labels + words
    label_ids = frozenset(range(len(RESERVED), len(RESERVED) + len(labels)))
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token, label_ids, pattern)


@dataclass
class TokenizedEntry:
    """Fixed-length id sequence with one mask position and a constrained id set."""

    ids: np.ndarray
    mask_position: int
    target_id: int
    constrained_ids: tuple[int, ...]
    length: int
    entry_id: str = ""
    task: str = ""

    def __post_init__(self):
        if self.ids[self.mask_position] != MASK_ID:
            raise DataError("mask position does not hold the mask id")
        if self.target_id not in self.constrained_ids:
            raise DataError("target id missing from the constrained id set")


def encode(entry: MaskedEntry, vocab: Vocab, max_length: int = 512) -> TokenizedEntry:
    """Encode a masked entry to exactly max_length ids.

    Over-long entries drop whole metapath instances from the end of the
    prefix (last bracket first) until they fit; the task clause and the
    mask always survive. A task clause alone exceeding max_length is an
    error. Empty brackets render as `[]`.
    """
    if entry.target not in vocab.token_to_id:
        raise DataError(f"target {entry.target!r} is not a registered label token")
    constrained = []
    for lab in entry.vocab:
        if lab not in vocab.token_to_id:
            raise DataError(f"vocabulary label {lab!r} is not registered")
        constrained.append(vocab.token_to_id[lab])
    tokens = vocab.tokenize(entry.text)
    if len(tokens) > max_length:
        brackets, task_text = parse_entry_text(entry.text)
        while len(tokens) > max_length:
            dropped = False
            for insts in reversed(brackets):
                if insts:
                    insts.pop()
                    dropped = True
                    break
            if not dropped:
                raise DataError(
                    f"entry {entry.entry_id}: task text alone exceeds max_length={max_length}"
                )
            tokens = vocab.tokenize(render_entry_text(brackets, task_text))
    ids = np.full(max_length, PAD_ID, dtype=np.int64)
    for i, tok in enumerate(tokens):
        ids[i] = vocab.id_of(tok)
    mask_positions = [i for i, tok in enumerate(tokens) if tok == MASK]
    if len(mask_positions) != 1:
        raise DataError(f"entry {entry.entry_id}: expected exactly one {MASK} token")
    return TokenizedEntry(
        ids=ids,
        mask_position=mask_positions[0],
        target_id=vocab.token_to_id[entry.target],
        constrained_ids=tuple(constrained),
        length=len(tokens),
        entry_id=entry.entry_id,
        task=entry.task,
    )


def decode(ids, vocab: Vocab) -> str:
    """Inverse of encode on in-vocab, non-truncated text; pads stripped."""
    out = []
    for i in np.asarray(ids).tolist():
        if not 0 <= i < vocab.size:
            raise DataError(f"unknown token id {i}")
        if i == PAD_ID:
            continue
        out.append(vocab.id_to_token[i])
    return " ".join(out)
