"""Chinese restaurant franchise seating state shared by the dynamic and plain HDP.

All counts live in flat numpy arrays bundled in :class:`CrfArrays` so the
numba kernels in :mod:`dynhdp.sampler` can mutate them in place.  Tables are
addressed by a slot within their document (a document of ``N`` tokens has at
most ``N`` live tables); topics by a column of the ``(V, K_cap)`` word-topic
matrix.  Freed slots and topic columns are recycled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.special import gammaln

from .corpus import Corpus

NEW = -1

# Kernels run without numba's reference counting: every helper call that takes
# the array bundle would otherwise pay an atomic incref/decref per array.  They
# therefore must not allocate; scratch buffers come from the caller.
kernel = njit(cache=True, nogil=True, _nrt=False)


class ContractError(RuntimeError):
    """A bookkeeping precondition was violated (double seat, unseated token, ...)."""


class ModelKind(str, Enum):
    DYNAMIC = "dhdp"
    PLAIN = "hdp"


@dataclass(frozen=True)
class Hyperparameters:
    """Concentrations ``alpha`` (tables) and ``gamma`` (topics), Dirichlet
    parameter ``eta`` and the dynamic model's global weight ``delta``."""

    alpha: float = 1.5
    gamma: float = 2.0
    eta: float = 0.2
    delta: float = 0.5
    model_kind: ModelKind = ModelKind.DYNAMIC

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        for name in ("alpha", "gamma", "eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")

    @property
    def dynamic(self) -> bool:
        return self.model_kind is ModelKind.DYNAMIC


class CrfArrays(NamedTuple):
    words: np.ndarray  # (T,) word id per token
    doc_ptr: np.ndarray  # (J+1,) token offsets
    tok_tab: np.ndarray  # (T,) table slot of each token within its doc, -1 if unseated
    tab_n: np.ndarray  # (T,) tokens at slot doc_ptr[j]+t
    tab_k: np.ndarray  # (T,) topic of slot, -1 when the slot is free
    l_wk: np.ndarray  # (V, K_cap) word-topic counts
    l_k: np.ndarray  # (K_cap,)
    m_jk: np.ndarray  # (J, K_cap) tables per document and topic
    m_k: np.ndarray  # (K_cap,) tables per topic, history included
    hist_cum: np.ndarray  # (K_cap,) tables per topic in documents preceding doc 0
    hist_prev: np.ndarray  # (K_cap,) tables per topic in the document just before doc 0


# ---------------------------------------------------------------- kernels

@kernel
def seat(a, j, g, slot, k):
    """Seat global token ``g`` of document ``j`` at ``slot``; ``k`` is used only
    when the slot is empty (opens a table serving topic ``k``)."""
    p = a.doc_ptr[j] + slot
    if a.tab_n[p] == 0:
        a.tab_k[p] = k
        a.m_jk[j, k] += 1
        a.m_k[k] += 1
    k = a.tab_k[p]
    a.tab_n[p] += 1
    a.tok_tab[g] = slot
    w = a.words[g]
    a.l_wk[w, k] += 1
    a.l_k[k] += 1


@kernel
def unseat(a, j, g):
    """Remove token ``g``; closes its table if it was the last occupant.
    Returns ``(slot, topic, closed)``."""
    slot = a.tok_tab[g]
    p = a.doc_ptr[j] + slot
    k = a.tab_k[p]
    w = a.words[g]
    a.l_wk[w, k] -= 1
    a.l_k[k] -= 1
    a.tab_n[p] -= 1
    a.tok_tab[g] = -1
    closed = a.tab_n[p] == 0
    if closed:
        a.tab_k[p] = -1
        a.m_jk[j, k] -= 1
        a.m_k[k] -= 1
    return slot, k, closed


@kernel
def free_slot(a, j):
    base = a.doc_ptr[j]
    for s in range(a.doc_ptr[j + 1] - base):
        if a.tab_n[base + s] == 0:
            return s
    return -1


@kernel
def free_topic(a):
    """Lowest topic column with no tables and no tokens, or -1 when full."""
    for k in range(a.m_k.shape[0]):
        if a.m_k[k] == 0 and a.l_k[k] == 0 and a.hist_cum[k] == 0 and a.hist_prev[k] == 0:
            return k
    return -1


@kernel
def word_prob(l_wk, l_k, w, k, eta, V):
    if k < 0:
        return 1.0 / V
    return (l_wk[w, k] + eta) / (l_k[k] + V * eta)


@kernel
def block_loglik(l_wk, l_k, k, bw, bc, nb, eta, V):
    """Dirichlet-multinomial log-likelihood of a block of words under topic ``k``
    (``k < 0`` is an unused topic).  The block is given as distinct words
    ``bw[:nb]`` with multiplicities ``bc[:nb]`` and must already be excluded
    from the counts."""
    tot = 0
    for q in range(nb):
        tot += bc[q]
    lk = 0.0 if k < 0 else float(l_k[k])
    if tot <= 30:
        # rising factorials as plain products: two logs instead of 2 * (nb + 1) lgammas
        num = 1.0
        for q in range(nb):
            base = eta if k < 0 else l_wk[bw[q], k] + eta
            for i in range(bc[q]):
                num *= base + i
        den = 1.0
        for i in range(tot):
            den *= lk + V * eta + i
        return math.log(num) - math.log(den)
    out = 0.0
    for q in range(nb):
        base = eta if k < 0 else l_wk[bw[q], k] + eta
        out += math.lgamma(base + bc[q]) - math.lgamma(base)
    out += math.lgamma(lk + V * eta) - math.lgamma(lk + tot + V * eta)
    return out


# ---------------------------------------------------------------- state object

def _empty_arrays(words, doc_ptr, V, k_cap):
    T = len(words)
    J = len(doc_ptr) - 1
    return CrfArrays(
        words=np.ascontiguousarray(words, dtype=np.int64),
        doc_ptr=np.ascontiguousarray(doc_ptr, dtype=np.int64),
        tok_tab=np.full(T, -1, dtype=np.int64),
        tab_n=np.zeros(T, dtype=np.int64),
        tab_k=np.full(T, -1, dtype=np.int64),
        l_wk=np.zeros((V, k_cap), dtype=np.int64),
        l_k=np.zeros(k_cap, dtype=np.int64),
        m_jk=np.zeros((J, k_cap), dtype=np.int64),
        m_k=np.zeros(k_cap, dtype=np.int64),
        hist_cum=np.zeros(k_cap, dtype=np.int64),
        hist_prev=np.zeros(k_cap, dtype=np.int64),
    )


class CrfState:
    """Seating state of one chain.

    ``base_l_wk`` holds word-topic counts contributed by documents that are not
    part of ``arrays`` (the frozen history during online inference); it is
    only used when recounting.
    """

    def __init__(self, arrays: CrfArrays, vocab_size: int, base_l_wk: np.ndarray | None = None):
        self.arrays = arrays
        self.vocab_size = vocab_size
        self.base_l_wk = base_l_wk

    @classmethod
    def empty(cls, corpus: Corpus, k_cap: int = 32) -> "CrfState":
        words, ptr = corpus.flat()
        return cls(_empty_arrays(words, ptr, corpus.vocab_size, k_cap), corpus.vocab_size)

    # -- shape ------------------------------------------------------------
    @property
    def num_docs(self) -> int:
        return len(self.arrays.doc_ptr) - 1

    @property
    def k_cap(self) -> int:
        return self.arrays.m_k.shape[0]

    def doc_len(self, j: int) -> int:
        return int(self.arrays.doc_ptr[j + 1] - self.arrays.doc_ptr[j])

    def active_topics(self) -> np.ndarray:
        return np.flatnonzero(self.arrays.m_k > 0)

    @property
    def num_topics(self) -> int:
        return int((self.arrays.m_k > 0).sum())

    def live_tables(self, j: int) -> np.ndarray:
        a = self.arrays
        return np.flatnonzero(a.tab_n[a.doc_ptr[j]:a.doc_ptr[j + 1]] > 0)

    def table_topic(self, j: int, t: int) -> int:
        return int(self.arrays.tab_k[self.arrays.doc_ptr[j] + t])

    def table_of(self, j: int, i: int) -> int:
        return int(self.arrays.tok_tab[self.arrays.doc_ptr[j] + i])

    def table_words(self, j: int, t: int) -> np.ndarray:
        a = self.arrays
        lo, hi = a.doc_ptr[j], a.doc_ptr[j + 1]
        return a.words[lo:hi][a.tok_tab[lo:hi] == t]

    def ensure_capacity(self, free_needed: int) -> None:
        """Grow the topic dimension so at least ``free_needed`` columns are free."""
        a = self.arrays
        in_use = int(((a.m_k > 0) | (a.l_k > 0) | (a.hist_cum > 0) | (a.hist_prev > 0)).sum())
        if self.k_cap - in_use >= free_needed:
            return
        new_cap = self.k_cap
        while new_cap - in_use < free_needed:
            new_cap *= 2
        pad = new_cap - self.k_cap

        def widen(x):
            width = [(0, 0)] * (x.ndim - 1) + [(0, pad)]
            return np.pad(x, width)

        self.arrays = a._replace(
            l_wk=widen(a.l_wk), l_k=widen(a.l_k), m_jk=widen(a.m_jk), m_k=widen(a.m_k),
            hist_cum=widen(a.hist_cum), hist_prev=widen(a.hist_prev),
        )
        if self.base_l_wk is not None:
            self.base_l_wk = widen(self.base_l_wk)

    def copy(self) -> "CrfState":
        base = None if self.base_l_wk is None else self.base_l_wk.copy()
        return CrfState(CrfArrays(*(x.copy() for x in self.arrays)), self.vocab_size, base)

    # -- bookkeeping --------------------------------------------------------
    def new_topic(self) -> int:
        k = free_topic(self.arrays)
        if k < 0:
            self.ensure_capacity(1)
            k = free_topic(self.arrays)
        return int(k)

    def seat_token(self, j: int, i: int, table: int = NEW, topic: int = NEW) -> int:
        """Seat token ``i`` of document ``j``.

        ``table=NEW`` opens a table in the lowest free slot serving ``topic``
        (``topic=NEW`` activates a fresh topic).  Returns the table slot.
        """
        a = self.arrays
        if not 0 <= i < self.doc_len(j):
            raise IndexError(f"token {i} out of range for document {j}")
        g = a.doc_ptr[j] + i
        if a.tok_tab[g] >= 0:
            raise ContractError(f"token ({j}, {i}) is already seated")
        if table == NEW:
            table = int(free_slot(a, j))
            if topic == NEW:
                topic = self.new_topic()
                a = self.arrays
            elif not 0 <= topic < self.k_cap:
                raise ContractError(f"unknown topic {topic}")
        elif a.tab_n[a.doc_ptr[j] + table] == 0:
            raise ContractError(f"table {table} of document {j} is not live")
        seat(a, j, g, table, topic)
        return table

    def unseat_token(self, j: int, i: int) -> tuple[int, int, bool]:
        a = self.arrays
        g = a.doc_ptr[j] + i
        if a.tok_tab[g] < 0:
            raise ContractError(f"token ({j}, {i}) is not seated")
        slot, k, closed = unseat(a, j, g)
        return int(slot), int(k), bool(closed)

    def assignments(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-token table slots and per-token topics (``-1`` when unseated)."""
        a = self.arrays
        topics = np.full(len(a.words), -1, dtype=np.int64)
        seated = a.tok_tab >= 0
        doc_of = np.repeat(np.arange(self.num_docs), np.diff(a.doc_ptr))
        topics[seated] = a.tab_k[a.doc_ptr[doc_of[seated]] + a.tok_tab[seated]]
        return a.tok_tab.copy(), topics

    def recount(self) -> dict[str, np.ndarray]:
        """Counts rebuilt from the raw table and topic assignments."""
        a = self.arrays
        V, K, J = self.vocab_size, self.k_cap, self.num_docs
        tab, topics = self.assignments()
        seated = tab >= 0
        doc_of = np.repeat(np.arange(J), np.diff(a.doc_ptr))
        tab_n = np.zeros_like(a.tab_n)
        np.add.at(tab_n, a.doc_ptr[doc_of[seated]] + tab[seated], 1)
        l_wk = np.zeros((V, K), dtype=np.int64) if self.base_l_wk is None else self.base_l_wk.copy()
        np.add.at(l_wk, (a.words[seated], topics[seated]), 1)
        live = tab_n > 0
        slot_doc = np.repeat(np.arange(J), np.diff(a.doc_ptr))
        m_jk = np.zeros((J, K), dtype=np.int64)
        np.add.at(m_jk, (slot_doc[live], a.tab_k[live]), 1)
        return {
            "tab_n": tab_n,
            "l_wk": l_wk,
            "l_k": l_wk.sum(axis=0),
            "m_jk": m_jk,
            "m_k": a.hist_cum + m_jk.sum(axis=0),
        }

    def check_counts(self) -> None:
        """Raise :class:`ContractError` if any cached count disagrees with a recount."""
        a = self.arrays
        fresh = self.recount()
        for name, value in fresh.items():
            cached = getattr(a, name)
            if not np.array_equal(cached, value):
                raise ContractError(f"cached {name} disagrees with recount")
        live = a.tab_n > 0
        if np.any(a.tab_k[live] < 0) or np.any(a.tab_k[~live] >= 0):
            raise ContractError("table topics inconsistent with occupancy")
        if np.any(a.m_k[a.tab_k[live]] <= 0):
            raise ContractError("live table serves an inactive topic")

    # -- likelihood primitives ---------------------------------------------
    def word_topic_predictive(self, w: int, k: int, eta: float) -> float:
        return float(word_prob(self.arrays.l_wk, self.arrays.l_k, w, k, eta, self.vocab_size))

    def table_block_log_likelihood(self, words, k: int, eta: float) -> float:
        """Log marginal likelihood of ``words`` joining topic ``k`` (``NEW`` for
        an unused topic).  The words must not be counted in the state."""
        bw, bc = np.unique(np.asarray(words, dtype=np.int64), return_counts=True)
        return float(block_loglik(self.arrays.l_wk, self.arrays.l_k, k, bw, bc.astype(np.int64), len(bw), eta,
                                  self.vocab_size))

    def topic_estimates(self, eta: float) -> dict[int, np.ndarray]:
        """Posterior-mean word distribution of every active topic."""
        a = self.arrays
        return {int(k): topic_estimate(a.l_wk[:, k], eta) for k in self.active_topics()}


def topic_estimate(word_counts: np.ndarray, eta: float) -> np.ndarray:
    word_counts = np.asarray(word_counts, dtype=float)
    return (word_counts + eta) / (word_counts.sum() + len(word_counts) * eta)


def dirichlet_multinomial_logpdf(counts: np.ndarray, eta: float) -> float:
    """Log probability of an ordered word sequence with the given per-word
    ``counts`` under a symmetric Dirichlet(``eta``) multinomial."""
    counts = np.asarray(counts, dtype=float)
    V = counts.shape[0]
    return float(gammaln(V * eta) - gammaln(counts.sum() + V * eta) + (gammaln(counts + eta) - gammaln(eta)).sum())


def corpus_log_likelihood(l_wk: np.ndarray, eta: float) -> float:
    """``log p(x | t, k)`` with topic distributions integrated out."""
    used = l_wk[:, l_wk.sum(axis=0) > 0]
    V = l_wk.shape[0]
    tot = used.sum(axis=0)
    return float(
        (gammaln(V * eta) - gammaln(tot + V * eta)).sum()
        + (gammaln(used + eta) - gammaln(eta)).sum()
    )


def log_predictive(l_wk: np.ndarray, l_k: np.ndarray, words: np.ndarray, topics: np.ndarray, eta: float) -> float:
    """``log p(x_j | t, k, x_{1:j-1})``: the words of one document given their
    topics, with ``l_wk``/``l_k`` the counts *before* the document was added.
    Topic ids beyond the count matrix are topics the document introduced."""
    words = np.asarray(words, dtype=np.int64)
    topics = np.asarray(topics, dtype=np.int64)
    if len(words) == 0:
        return 0.0
    V, K0 = l_wk.shape
    pairs, c = np.unique(np.stack([topics, words]), axis=1, return_counts=True)
    ks, ws = pairs
    known = ks < K0
    base = np.full(len(ks), float(eta))
    base[known] += l_wk[ws[known], ks[known]]
    out = (gammaln(base + c) - gammaln(base)).sum()
    uk, ck = np.unique(topics, return_counts=True)
    tot = np.full(len(uk), V * float(eta))
    tot[uk < K0] += l_k[uk[uk < K0]]
    out += (gammaln(tot) - gammaln(tot + ck)).sum()
    return float(out)
