"""Visual-word corpora: data model, optical-flow quantisation and file formats.

Corpus files are plain text::

    #vocab_size=25
    0<TAB>3 3 17
    1<TAB>
    2<TAB>4 9

Flow files are CSV with header ``frame,cell_x,cell_y,u,v``; labels are
``doc_id,label``; scores are ``doc_id,score,n_tokens``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UP, RIGHT, DOWN, LEFT = 0, 1, 2, 3
DIRECTIONS = 4
DIRECTION_NAMES = ("up", "right", "down", "left")


class CorpusFormatError(ValueError):
    """A corpus, flow, label or score file could not be parsed."""


@dataclass(frozen=True)
class Vocabulary:
    size: int
    cells_x: int | None = None
    cells_y: int | None = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocabulary size must be positive, got {self.size}")
        if (self.cells_x is None) != (self.cells_y is None):
            raise ValueError("cells_x and cells_y must be given together")
        if self.cells_x is not None and self.size != self.cells_x * self.cells_y * DIRECTIONS:
            raise ValueError(
                f"grid {self.cells_x}x{self.cells_y} implies V={self.cells_x * self.cells_y * DIRECTIONS}, "
                f"got {self.size}"
            )

    @classmethod
    def for_grid(cls, cells_x: int, cells_y: int) -> "Vocabulary":
        return cls(cells_x * cells_y * DIRECTIONS, cells_x, cells_y)


@dataclass
class Document:
    index: int
    tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, Document):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.tokens, other.tokens)


@dataclass
class Corpus:
    """Ordered sequence of documents over a shared vocabulary.

    Order matters: under the dynamic model document ``j`` depends on ``j - 1``.
    """

    vocabulary: Vocabulary
    documents: list[Document] = field(default_factory=list)

    def __post_init__(self):
        V = self.vocabulary.size
        for pos, doc in enumerate(self.documents):
            if doc.index != pos:
                raise ValueError(f"document indices must be consecutive from 0; position {pos} has {doc.index}")
            if len(doc.tokens) and (doc.tokens.min() < 0 or doc.tokens.max() >= V):
                raise ValueError(f"word id out of range in document {pos} (V={V})")
        empty = sum(1 for d in self.documents if len(d) == 0)
        if empty:
            logger.debug("corpus has %d empty documents", empty)

    @classmethod
    def from_token_lists(cls, token_lists: Iterable[Sequence[int]], vocab_size: int) -> "Corpus":
        docs = [Document(j, np.asarray(toks, dtype=np.int64)) for j, toks in enumerate(token_lists)]
        return cls(Vocabulary(vocab_size), docs)

    @property
    def vocab_size(self) -> int:
        return self.vocabulary.size

    @property
    def num_tokens(self) -> int:
        return sum(len(d) for d in self.documents)

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def __getitem__(self, j):
        return self.documents[j]

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.vocabulary.size == other.vocabulary.size and self.documents == other.documents

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated word ids and document offsets (``len(self) + 1`` entries)."""
        lengths = np.array([len(d) for d in self.documents], dtype=np.int64)
        ptr = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(lengths, out=ptr[1:])
        if len(self.documents):
            words = np.concatenate([d.tokens for d in self.documents]).astype(np.int64)
        else:
            words = np.zeros(0, dtype=np.int64)
        return words, ptr


# ---------------------------------------------------------------- visual words

def quantize_direction(u: float, v: float) -> int:
    """Map a flow vector in image coordinates (y pointing down) to up/right/down/left.

    Bins are quarter-planes centred on the axes, half-open so that a vector at
    exactly 45 degrees counts as ``DOWN``.
    """
    if u == 0 and v == 0:
        raise ValueError("no motion direction for a zero flow vector")
    theta = math.degrees(math.atan2(v, u))
    if -45.0 <= theta < 45.0:
        return RIGHT
    if 45.0 <= theta < 135.0:
        return DOWN
    if -135.0 <= theta < -45.0:
        return UP
    return LEFT


def word_id(cell_x: int, cell_y: int, direction: int, cells_x: int, cells_y: int | None = None) -> int:
    if not 0 <= cell_x < cells_x or cell_y < 0 or (cells_y is not None and cell_y >= cells_y):
        raise ValueError(f"cell ({cell_x}, {cell_y}) outside the grid")
    if not 0 <= direction < DIRECTIONS:
        raise ValueError(f"direction must be in [0, 4), got {direction}")
    return (cell_y * cells_x + cell_x) * DIRECTIONS + direction


def unpack_word_id(word: int, cells_x: int) -> tuple[int, int, int]:
    """Inverse of :func:`word_id`: returns ``(cell_x, cell_y, direction)``."""
    cell, direction = divmod(int(word), DIRECTIONS)
    cell_y, cell_x = divmod(cell, cells_x)
    return cell_x, cell_y, direction


@dataclass(frozen=True)
class FlowRecord:
    frame: int
    cell_x: int
    cell_y: int
    u: float
    v: float


def extract_words(
    records: Iterable[FlowRecord],
    cells_x: int,
    cells_y: int,
    frames_per_clip: int,
    threshold: float = 0.5,
) -> Corpus:
    """Turn grid-averaged flow records into a corpus of clip documents.

    A record becomes a token when its flow magnitude is at least ``threshold``.
    Clips are ``frames_per_clip`` frames long and clips without any word are
    kept as empty documents.
    """
    if frames_per_clip < 1:
        raise ValueError("frames_per_clip must be >= 1")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    vocab = Vocabulary.for_grid(cells_x, cells_y)
    records = list(records)
    frames = [r.frame for r in records]
    if any(b < a for a, b in zip(frames, frames[1:])):
        logger.warning("flow records are not sorted by frame; sorting")
        records.sort(key=lambda r: r.frame)

    by_clip: dict[int, list[int]] = {}
    last_clip = -1
    for r in records:
        if r.frame < 0:
            raise ValueError(f"negative frame index {r.frame}")
        clip = r.frame // frames_per_clip
        last_clip = max(last_clip, clip)
        if math.hypot(r.u, r.v) < threshold or (r.u == 0 and r.v == 0):
            continue
        w = word_id(r.cell_x, r.cell_y, quantize_direction(r.u, r.v), cells_x, cells_y)
        by_clip.setdefault(clip, []).append(w)

    docs = [Document(j, np.array(by_clip.get(j, []), dtype=np.int64)) for j in range(last_clip + 1)]
    return Corpus(vocab, docs)


def read_flow(path: str | Path) -> list[FlowRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records
        if [h.strip() for h in header] != ["frame", "cell_x", "cell_y", "u", "v"]:
            raise CorpusFormatError(f"{path}: expected header frame,cell_x,cell_y,u,v, got {header}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            try:
                frame, cx, cy, u, v = row
                records.append(FlowRecord(int(frame), int(cx), int(cy), float(u), float(v)))
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{reader.line_num}: malformed flow record {row!r}") from exc
    return records


# ---------------------------------------------------------------- corpus files

def write_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#vocab_size={corpus.vocab_size}\n")
        for doc in corpus.documents:
            fh.write(f"{doc.index}\t{' '.join(map(str, doc.tokens.tolist()))}\n")


def read_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#vocab_size="):
        raise CorpusFormatError(f"{path}: missing '#vocab_size=<V>' header")
    try:
        V = int(lines[0].split("=", 1)[1])
    except ValueError as exc:
        raise CorpusFormatError(f"{path}: bad vocabulary header {lines[0]!r}") from exc

    docs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if "\t" in line:
            doc_id, _, body = line.partition("\t")
        elif line.strip() == "":
            # a bare empty line is an empty document
            doc_id, body = str(len(docs)), ""
        else:
            doc_id, body = line, ""
        try:
            j = int(doc_id)
            tokens = [int(t) for t in body.split()]
        except ValueError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: malformed document line") from exc
        if j != len(docs):
            raise CorpusFormatError(f"{path}:{lineno}: expected document id {len(docs)}, got {j}")
        bad = [t for t in tokens if not 0 <= t < V]
        if bad:
            raise CorpusFormatError(f"{path}:{lineno}: word id out of range: {bad[0]} (V={V})")
        docs.append(Document(j, np.array(tokens, dtype=np.int64)))
    return Corpus(Vocabulary(V), docs)


# ---------------------------------------------------------------- labels and scores

def write_labels(labels: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["doc_id", "label"])
        for j, lab in enumerate(labels):
            w.writerow([j, int(lab)])


def read_labels(path: str | Path) -> dict[int, int]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["doc_id", "label"]:
            raise CorpusFormatError(f"{path}: expected header doc_id,label")
        for row in reader:
            try:
                j, lab = int(row["doc_id"]), int(row["label"])
            except (TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{reader.line_num}: malformed label row") from exc
            if lab not in (0, 1):
                raise CorpusFormatError(f"{path}:{reader.line_num}: label must be 0 or 1, got {lab}")
            out[j] = lab
    return out


def write_scores(doc_ids: Sequence[int], scores: Sequence[float], n_tokens: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["doc_id", "score", "n_tokens"])
        for j, s, n in zip(doc_ids, scores, n_tokens):
            w.writerow([int(j), repr(float(s)), int(n)])


def read_scores(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, scores, ns = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["doc_id", "score", "n_tokens"]:
            raise CorpusFormatError(f"{path}: expected header doc_id,score,n_tokens")
        for row in reader:
            try:
                ids.append(int(row["doc_id"]))
                scores.append(float(row["score"]))
                ns.append(int(row["n_tokens"]))
            except (TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{reader.line_num}: malformed score row") from exc
    return np.array(ids, dtype=np.int64), np.array(scores, dtype=float), np.array(ns, dtype=np.int64)
