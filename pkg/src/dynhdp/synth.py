"""Synthetic "bar" corpora drawn from the dynamic HDP with planted abnormal documents."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Document, Vocabulary

GRID = 5
N_BARS = 2 * GRID
BAR_VOCAB = GRID * GRID


def bar_topics(noise: float = 0.01) -> np.ndarray:
    """``(10, 25)`` topic-word matrix: rows 0-4 are horizontal bars of the 5x5
    word grid, rows 5-9 vertical bars, each mixed with ``noise`` of uniform."""
    if not 0 <= noise <= 1:
        raise ValueError("noise must be in [0, 1]")
    bars = np.zeros((N_BARS, BAR_VOCAB))
    grid = np.arange(BAR_VOCAB).reshape(GRID, GRID)
    for r in range(GRID):
        bars[r, grid[r, :]] = 1.0 / GRID
        bars[GRID + r, grid[:, r]] = 1.0 / GRID
    return (1 - noise) * bars + noise / BAR_VOCAB


@dataclass
class GroundTruth:
    abnormal: np.ndarray  # (J,) bool
    tables: list[np.ndarray]  # per doc, table index of each token
    table_topics: list[np.ndarray]  # per doc, topic of each table
    seed: int | None = None
    alpha: float = 1.5
    gamma: float = 2.0
    delta: float = 0.5
    noise: float = 0.01
    log_prior: np.ndarray = field(default=None)  # (J,) log prob of each doc's seating and topics

    def token_topics(self, j: int) -> np.ndarray:
        return self.table_topics[j][self.tables[j]]

    def save(self, path: str | Path) -> None:
        data = {
            "seed": self.seed,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "delta": self.delta,
            "noise": self.noise,
            "documents": [
                {
                    "abnormal": bool(self.abnormal[j]),
                    "tables": self.tables[j].tolist(),
                    "table_topics": self.table_topics[j].tolist(),
                    "log_prior": float(self.log_prior[j]),
                }
                for j in range(len(self.abnormal))
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        docs = data["documents"]
        return cls(
            abnormal=np.array([d["abnormal"] for d in docs], dtype=bool),
            tables=[np.array(d["tables"], dtype=np.int64) for d in docs],
            table_topics=[np.array(d["table_topics"], dtype=np.int64) for d in docs],
            seed=data["seed"], alpha=data["alpha"], gamma=data["gamma"], delta=data["delta"],
            noise=data["noise"],
            log_prior=np.array([d["log_prior"] for d in docs]),
        )


def generate_sequence(
    n_docs: int,
    words_per_doc: int,
    abnormal: set[int] | list[int] = (),
    *,
    alpha: float = 1.5,
    gamma: float = 2.0,
    delta: float = 0.5,
    noise: float = 0.01,
    rng: np.random.Generator | int | None = None,
    seed: int | None = None,
) -> tuple[Corpus, GroundTruth]:
    """Draw a document sequence from the dynamic HDP over the 10 bar topics.

    A new table picks an existing topic with weight
    ``m_jk + m_{j-1,k} + delta * m_{1:j,k}`` or a fresh bar with weight
    ``gamma`` (uniform over bars not used yet; dropped once all are used).
    Tables of documents listed in ``abnormal`` instead pick uniformly among the
    bars absent from the previous document.
    """
    abnormal = set(int(j) for j in abnormal)
    if 0 in abnormal:
        raise ValueError("document 0 cannot be abnormal: it has no previous document")
    if any(not 0 < j < n_docs for j in abnormal):
        raise ValueError("abnormal document index out of range")
    if rng is None or isinstance(rng, (int, np.integer)):
        seed = rng if seed is None else seed
        rng = np.random.default_rng(rng)
    phi = bar_topics(noise)
    cum = np.zeros(N_BARS)
    prev = np.zeros(N_BARS)
    used = np.zeros(N_BARS, dtype=bool)
    docs, tables, table_topics = [], [], []
    flags = np.zeros(n_docs, dtype=bool)
    log_prior = np.zeros(n_docs)
    for j in range(n_docs):
        is_abn = j in abnormal
        flags[j] = is_abn
        mj = np.zeros(N_BARS)
        tab_n: list[int] = []
        tab_k: list[int] = []
        toks = np.empty(words_per_doc, dtype=np.int64)
        tabs = np.empty(words_per_doc, dtype=np.int64)
        lp = 0.0
        for i in range(words_per_doc):
            w_tab = np.array(tab_n + [alpha], dtype=float)
            t = rng.choice(len(w_tab), p=w_tab / w_tab.sum())
            lp += np.log(w_tab[t] / w_tab.sum())
            if t == len(tab_n):
                if is_abn:
                    allowed = np.flatnonzero(prev == 0)
                    k = int(rng.choice(allowed))
                    lp -= np.log(len(allowed))
                else:
                    k, lpk = _draw_topic(mj, prev, cum, used, gamma, delta, rng)
                    lp += lpk
                used[k] = True
                mj[k] += 1
                cum[k] += 1
                tab_n.append(0)
                tab_k.append(k)
            tab_n[t] += 1
            tabs[i] = t
            toks[i] = rng.choice(BAR_VOCAB, p=phi[tab_k[t]])
        docs.append(Document(j, toks))
        tables.append(tabs)
        table_topics.append(np.array(tab_k, dtype=np.int64))
        log_prior[j] = lp
        prev = mj
    truth = GroundTruth(flags, tables, table_topics, seed, alpha, gamma, delta, noise, log_prior)
    return Corpus(Vocabulary(BAR_VOCAB), docs), truth


def _draw_topic(mj, prev, cum, used, gamma, delta, rng):
    w = np.where(used, mj + prev + delta * cum, 0.0)
    fresh = np.flatnonzero(~used)
    g = gamma if len(fresh) else 0.0
    tot = w.sum() + g
    x = rng.random() * tot
    if x < w.sum():
        k = int(np.searchsorted(np.cumsum(w), x, side="right"))
        return k, float(np.log(w[k] / tot))
    k = int(rng.choice(fresh))
    return k, float(np.log(g / tot / len(fresh)))


def true_model_score(words: np.ndarray, topics: np.ndarray, noise: float = 0.01) -> float:
    """Per-word log-likelihood of ``words`` given their true bar topics."""
    words = np.asarray(words, dtype=np.int64)
    if len(words) == 0:
        return float("nan")
    phi = bar_topics(noise)
    return float(np.log(phi[np.asarray(topics), words]).mean())
