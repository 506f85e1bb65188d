"""Predictive-likelihood abnormality scores for sequentially processed documents."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .corpus import Corpus
from .crf import log_predictive
from .sampler import ModelSnapshot, online_infer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreRecord:
    doc_index: int
    score: float  # nats per word; NaN for an empty document
    n_tokens: int
    chain_log_likelihoods: tuple[float, ...]


def per_sample_log_predictive(before_l_wk: np.ndarray, after_l_wk: np.ndarray, eta: float) -> float:
    """``log p(x_j | t^s, k^s, x_{1:j-1})`` from the word-topic counts of one
    posterior sample before and after document ``j`` was folded in."""
    before_l_wk = np.asarray(before_l_wk)
    after_l_wk = np.asarray(after_l_wk)
    V = after_l_wk.shape[0]
    if before_l_wk.shape[1] < after_l_wk.shape[1]:
        before_l_wk = np.pad(before_l_wk, [(0, 0), (0, after_l_wk.shape[1] - before_l_wk.shape[1])])
    delta = after_l_wk - before_l_wk
    if np.any(delta < 0):
        raise ValueError("counts after the document must dominate counts before it")
    cols = np.flatnonzero(delta.sum(axis=0))
    if len(cols) == 0:
        return 0.0
    b, a = before_l_wk[:, cols].astype(float), after_l_wk[:, cols].astype(float)
    return float(
        (gammaln(a + eta) - gammaln(b + eta)).sum()
        + (gammaln(b.sum(axis=0) + V * eta) - gammaln(a.sum(axis=0) + V * eta)).sum()
    )


def harmonic_mean_log(log_p) -> float:
    """Log of the harmonic mean of ``exp(log_p)``, computed in the log domain."""
    log_p = np.asarray(log_p, dtype=float)
    if log_p.size == 0:
        raise ValueError("need at least one sample")
    if np.any(np.isneginf(log_p)):
        return -math.inf
    # shift by the smallest term so every exponent is <= 0 and equal inputs map back exactly
    m = log_p.min()
    return float(m - math.log(np.mean(np.exp(m - log_p))))


def abnormality_score(doc_index: int, chain_log_likelihoods, n_tokens: int, literal: bool = False) -> ScoreRecord:
    """Per-word harmonic-mean log predictive likelihood; lower is more abnormal.

    With ``literal`` the score is ``p / N`` itself rather than ``log(p) / N``
    (it underflows to 0 for all but tiny documents).
    """
    lls = tuple(float(x) for x in chain_log_likelihoods)
    if n_tokens == 0:
        return ScoreRecord(doc_index, math.nan, 0, lls)
    hm = harmonic_mean_log(lls)
    score = math.exp(hm) / n_tokens if literal else hm / n_tokens
    return ScoreRecord(doc_index, score, n_tokens, lls)


def label(scores, threshold: float) -> np.ndarray:
    """1 (abnormal) where the score is below ``threshold``."""
    return (np.asarray(scores, dtype=float) < threshold).astype(int)


def _score_chain(snapshot: ModelSnapshot, corpus: Corpus, sweeps: int, seed) -> list[float]:
    rng = np.random.default_rng(seed)
    out = []
    for doc in corpus:
        sample, snapshot = online_infer(snapshot, doc, sweeps, rng, vocab_size=corpus.vocab_size)
        out.append(sample.log_predictive)
    return out


def score_corpus(snapshots: list[ModelSnapshot], corpus: Corpus, sweeps: int = 1000, seed=None,
                 n_jobs: int = 1, literal: bool = False) -> list[ScoreRecord]:
    """Score documents strictly in order, one chain per snapshot.

    Each chain folds every document into its own snapshot after scoring it,
    so later documents see the earlier ones as history.
    """
    for snap in snapshots:
        if snap.vocab_size != corpus.vocab_size:
            raise ValueError(f"vocabulary mismatch: model V={snap.vocab_size}, corpus V={corpus.vocab_size}")
    seeds = np.random.SeedSequence(seed).spawn(len(snapshots))
    if n_jobs == 1:
        per_chain = [_score_chain(s, corpus, sweeps, sd) for s, sd in zip(snapshots, seeds)]
    else:
        with ThreadPoolExecutor(n_jobs) as pool:
            per_chain = list(pool.map(lambda args: _score_chain(args[0], corpus, sweeps, args[1]),
                                      zip(snapshots, seeds)))
    lls = np.array(per_chain).T.reshape(len(corpus), len(snapshots))
    return [abnormality_score(j, lls[j], len(doc), literal) for j, doc in enumerate(corpus)]


__all__ = [
    "ScoreRecord",
    "abnormality_score",
    "harmonic_mean_log",
    "label",
    "log_predictive",
    "per_sample_log_predictive",
    "score_corpus",
]
