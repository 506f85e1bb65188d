"""Collapsed Gibbs samplers for the dynamic HDP and the plain HDP.

One sweep visits documents in their order; within a document every token's
table is resampled, then every live table's topic.  Batch sweeps of the
dynamic model look one document ahead: a table's topic also has to explain
the topics chosen by the next document's tables.  Online inference samples a
single new document against frozen global counts and folds it in afterwards.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Document
from .crf import (
    NEW,
    ContractError,
    CrfArrays,
    CrfState,
    Hyperparameters,
    block_loglik,
    kernel,
    corpus_log_likelihood,
    log_predictive,
    free_topic,
    seat,
    unseat,
    word_prob,
)

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT_VERSION = 1
LOOKAHEAD_MODES = ("approx", "exact")


@dataclass(frozen=True)
class SamplerConfig:
    """Run lengths and seeding.

    ``lookahead`` selects how batch sweeps of the dynamic model weigh the next
    document: ``"approx"`` keeps only the factors of topics already alive
    before it, ``"exact"`` also scores topics born there and the change in its
    normaliser, which makes the two-document conditional exact.
    """

    burn_in_sweeps: int = 1000
    chains: int = 5
    seed: int | None = None
    samples_per_chain: int = 1
    thin: int = 10
    online_sweeps: int = 1000
    lookahead: str = "exact"
    n_jobs: int = 1
    log_every: int = 100

    def __post_init__(self):
        for name in ("burn_in_sweeps", "chains", "samples_per_chain", "thin", "n_jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.online_sweeps < 0:
            raise ValueError("online_sweeps must be non-negative")
        if self.lookahead not in LOOKAHEAD_MODES:
            raise ValueError(f"lookahead must be one of {LOOKAHEAD_MODES}")

    def chain_seeds(self) -> list[np.random.SeedSequence]:
        return np.random.SeedSequence(self.seed).spawn(self.chains)


# ---------------------------------------------------------------- kernels

@kernel
def _prior_weights(a, j, prefix, dynamic, delta, khi, out):
    """Unnormalised prior weight of each existing topic for a table of doc ``j``
    given the current counts; returns their sum (the new-topic weight is gamma)."""
    tot = 0.0
    if dynamic:
        for k in range(khi):
            prev = a.m_jk[j - 1, k] if j > 0 else a.hist_prev[k]
            mj = a.m_jk[j, k]
            v = mj + prev + delta * (prefix[k] + mj)
            out[k] = v
            tot += v
    else:
        for k in range(khi):
            out[k] = a.m_k[k]
            tot += a.m_k[k]
    return tot


@kernel
def _next_doc_terms(a, j, prefix, delta, gamma, exact, khi, glog, born):
    """Log next-document factor for every candidate topic of one more table in doc ``j``.

    ``glog[k]`` is the log factor when that table serves ``k``; the return
    value ``base`` is the factor when it serves a topic unused by doc ``j+1``
    (e.g. a brand-new topic).  ``born[k]`` marks topics of doc ``j+1`` with no
    table in documents ``<= j``.  Also returns the log ratio of doc ``j+1``'s
    normaliser with one table fewer to the one with one table more in doc ``j``.
    """
    nxt = j + 1
    base_fin = 0.0
    n_inf = 0
    inf_s = -1
    m_tot = 0
    mj_tot = 0
    pre_tot = 0
    for s in range(khi):
        born[s] = False
        glog[s] = 0.0
        mj_tot += a.m_jk[j, s]
        pre_tot += prefix[s]
        M = a.m_jk[nxt, s]
        if M == 0:
            continue
        m_tot += M
        a0 = a.m_jk[j, s]
        b0 = prefix[s] + a0
        cand = 0.0
        for n in range(M):
            cand += math.log(a0 + 1 + n + delta * (b0 + 1 + n))
        if b0 == 0:
            born[s] = True
            if exact:
                base = math.log(gamma) + (M - 1) * math.log1p(delta) + math.lgamma(M)
            else:
                base = 0.0
        else:
            base = 0.0
            for n in range(M):
                term = a0 + n + delta * (b0 + n)
                if term <= 0.0:
                    base = -np.inf
                    break
                base += math.log(term)
        glog[s] = cand - base if base > -np.inf else cand
        if base > -np.inf:
            base_fin += base
        else:
            n_inf += 1
            inf_s = s
    for s in range(khi):
        if a.m_jk[nxt, s] == 0:
            glog[s] = base_fin if n_inf == 0 else -np.inf
        elif n_inf == 0:
            glog[s] += base_fin
        elif n_inf == 1 and s == inf_s:
            glog[s] += base_fin
        else:
            glog[s] = -np.inf
    base_all = base_fin if n_inf == 0 else -np.inf
    A = mj_tot
    B = pre_tot + mj_tot
    dden = 0.0
    for n in range(m_tot):
        dden += math.log(A + n + delta * (B + n) + gamma) - math.log(A + 1 + n + delta * (B + 1 + n) + gamma)
    return base_all, dden


@kernel
def _new_table_topics(a, j, prefix, dynamic, look, exact, gamma, delta, khi, pw, glog, born, qk):
    """Relative weights ``qk`` of each topic for a table opened now, plus the
    new-topic weight and the normaliser that turns them into probabilities."""
    ptot = _prior_weights(a, j, prefix, dynamic, delta, khi, pw)
    if not look:
        for k in range(khi):
            qk[k] = pw[k]
        return gamma, ptot + gamma
    base, dden = _next_doc_terms(a, j, prefix, delta, gamma, exact, khi, glog, born)
    if exact and base > -np.inf:
        for k in range(khi):
            if pw[k] > 0:
                qk[k] = pw[k] * math.exp(glog[k] - base)
            elif born[k]:
                qk[k] = gamma * math.exp(glog[k] - base)
            else:
                qk[k] = 0.0
        return gamma, (ptot + gamma) * math.exp(-dden)
    ref = base
    for k in range(khi):
        if pw[k] > 0 and glog[k] > ref:
            ref = glog[k]
    qtot = 0.0
    for k in range(khi):
        if pw[k] > 0 and glog[k] > -np.inf:
            qk[k] = pw[k] * math.exp(glog[k] - ref)
        else:
            qk[k] = 0.0
        qtot += qk[k]
    qnew = gamma * math.exp(base - ref) if base > -np.inf else 0.0
    return qnew, qtot + qnew


@kernel
def _new_table_likelihood(a, w, eta, V, khi, qk, qnew, qz, fk):
    """Word likelihood under a new table, mixing over its possible topics."""
    r = qnew / V
    for k in range(khi):
        if qk[k] > 0:
            fk[k] = word_prob(a.l_wk, a.l_k, w, k, eta, V)
            r += qk[k] * fk[k]
        else:
            fk[k] = 0.0
    return r / qz


@kernel
def _sample_token(a, j, g, prefix, dynamic, look, exact, alpha, gamma, eta, delta, V, u1, u2,
                  khi, pw, glog, born, qk, fk, tw):
    """Seat the (unseated) token ``g`` of doc ``j``; returns the updated topic bound."""
    w = a.words[g]
    qnew, qz = _new_table_topics(a, j, prefix, dynamic, look, exact, gamma, delta, khi, pw, glog, born, qk)
    r_new = _new_table_likelihood(a, w, eta, V, khi, qk, qnew, qz, fk)
    base = a.doc_ptr[j]
    N = a.doc_ptr[j + 1] - base
    tot = 0.0
    for s in range(N):
        n = a.tab_n[base + s]
        if n > 0:
            tot += n * word_prob(a.l_wk, a.l_k, w, a.tab_k[base + s], eta, V)
        tw[s] = tot
    p_new = alpha * r_new
    tot += p_new
    if not tot > 0.0:
        raise ContractError("table sampling distribution has no mass")
    x = u1 * tot
    chosen = -1
    for s in range(N):
        if x < tw[s]:
            chosen = s
            break
    if chosen >= 0:
        seat(a, j, g, chosen, -1)
        return khi
    # new table: draw its topic given the word
    ttot = qnew / V
    for k in range(khi):
        ttot += qk[k] * fk[k]
    x = u2 * ttot
    k_new = -1
    acc = 0.0
    for k in range(khi):
        acc += qk[k] * fk[k]
        if x < acc:
            k_new = k
            break
    if k_new < 0:
        k_new = free_topic(a)
        if k_new >= khi:
            khi = k_new + 1
    slot = -1
    for s in range(N):
        if a.tab_n[base + s] == 0:
            slot = s
            break
    seat(a, j, g, slot, k_new)
    return khi


@kernel
def _sample_table(a, j, slot, prefix, dynamic, look, exact, gamma, eta, delta, V, u,
                  khi, pw, glog, born, logw, cnt, bw, bc):
    """Resample the topic of live table ``slot`` in doc ``j``; returns the topic bound."""
    lo = a.doc_ptr[j]
    hi = a.doc_ptr[j + 1]
    p = lo + slot
    k_old = a.tab_k[p]
    n_tab = a.tab_n[p]
    nb = 0
    for g in range(lo, hi):
        if a.tok_tab[g] == slot:
            w = a.words[g]
            if cnt[w] == 0:
                bw[nb] = w
                nb += 1
            cnt[w] += 1
    for q in range(nb):
        bc[q] = cnt[bw[q]]
        cnt[bw[q]] = 0
        a.l_wk[bw[q], k_old] -= bc[q]
    a.l_k[k_old] -= n_tab
    a.m_jk[j, k_old] -= 1
    a.m_k[k_old] -= 1

    _prior_weights(a, j, prefix, dynamic, delta, khi, pw)
    base = 0.0
    if look:
        base, _ = _next_doc_terms(a, j, prefix, delta, gamma, exact, khi, glog, born)
    lmax = -np.inf
    for k in range(khi):
        if pw[k] > 0:
            lw = math.log(pw[k])
        elif look and exact and born[k]:
            lw = math.log(gamma)
        else:
            logw[k] = -np.inf
            continue
        if look:
            lw += glog[k]
        if lw > -np.inf:
            lw += block_loglik(a.l_wk, a.l_k, k, bw, bc, nb, eta, V)
        logw[k] = lw
        if lw > lmax:
            lmax = lw
    lnew = math.log(gamma) + base + block_loglik(a.l_wk, a.l_k, -1, bw, bc, nb, eta, V)
    if lnew > lmax:
        lmax = lnew
    if lmax == -np.inf:
        raise ContractError("topic sampling distribution has no mass")
    tot = 0.0
    for k in range(khi):
        if logw[k] > -np.inf:
            tot += math.exp(logw[k] - lmax)
        logw[k] = tot
    tot += math.exp(lnew - lmax)
    x = u * tot
    k_new = -1
    for k in range(khi):
        if x < logw[k]:
            k_new = k
            break
    if k_new < 0:
        k_new = free_topic(a)
        if k_new >= khi:
            khi = k_new + 1
    for q in range(nb):
        a.l_wk[bw[q], k_new] += bc[q]
    a.l_k[k_new] += n_tab
    a.m_jk[j, k_new] += 1
    a.m_k[k_new] += 1
    a.tab_k[p] = k_new
    return khi


@kernel
def _in_use(a, k):
    return a.m_k[k] > 0 or a.l_k[k] > 0 or a.hist_cum[k] > 0 or a.hist_prev[k] > 0


@kernel
def _sweep(a, j_start, init, dynamic, look, exact, alpha, gamma, eta, delta, unif, cursor, scratch):
    """Run one pass over docs ``j_start..J-1``.  With ``init`` the tokens are
    unseated and get seated sequentially; otherwise tables then topics are
    resampled.  Stops early (returning the doc index) when the topic capacity
    may not suffice for the next document."""
    J = a.doc_ptr.shape[0] - 1
    K = a.m_k.shape[0]
    V = a.l_wk.shape[0]
    prefix, pw, glog, born, qk, fk, logw, tw, cnt, bw, bc = scratch
    for k in range(K):
        prefix[k] = a.hist_cum[k]
    for jj in range(j_start):
        for k in range(K):
            prefix[k] += a.m_jk[jj, k]
    khi = 0
    for k in range(K):
        if _in_use(a, k):
            khi = k + 1
    for j in range(j_start, J):
        lo = a.doc_ptr[j]
        hi = a.doc_ptr[j + 1]
        N = hi - lo
        if N > 0:
            free = 0
            for k in range(K):
                if not _in_use(a, k):
                    free += 1
            if free < 2 * N + 1:
                return j, cursor
            lk = look and (not init) and j + 1 < J
            for g in range(lo, hi):
                if not init:
                    unseat(a, j, g)
                khi = _sample_token(a, j, g, prefix, dynamic, lk, exact, alpha, gamma, eta, delta, V,
                                    unif[cursor], unif[cursor + 1], khi, pw, glog, born, qk, fk, tw)
                cursor += 2
            if not init:
                for s in range(N):
                    if a.tab_n[lo + s] > 0:
                        khi = _sample_table(a, j, s, prefix, dynamic, lk, exact, gamma, eta, delta, V,
                                            unif[cursor], khi, pw, glog, born, logw, cnt, bw, bc)
                        cursor += 1
        for k in range(K):
            prefix[k] += a.m_jk[j, k]
    return J, cursor


@kernel
def _many_sweeps(a, n, s0, j0, dynamic, look, exact, alpha, gamma, eta, delta, unif, cursor, scratch):
    """Sweeps ``s0..n-1`` back to back, resuming sweep ``s0`` at doc ``j0``.
    Returns ``(sweep, doc, cursor)``; ``sweep < n`` means it stopped for capacity."""
    J = a.doc_ptr.shape[0] - 1
    s = s0
    j = j0
    while s < n:
        j, cursor = _sweep(a, j, False, dynamic, look, exact, alpha, gamma, eta, delta, unif, cursor, scratch)
        if j < J:
            return s, j, cursor
        j = 0
        s += 1
    return s, 0, cursor


# ---------------------------------------------------------------- python drivers

def _flags(hp: Hyperparameters, lookahead: str):
    return hp.dynamic, lookahead == "exact"


def _scratch(state: CrfState) -> tuple:
    """Work buffers for :func:`_sweep`, sized for the current topic capacity."""
    K = state.k_cap
    n_max = max(1, int(np.diff(state.arrays.doc_ptr).max(initial=0)))
    return (np.zeros(K, np.int64), np.zeros(K), np.zeros(K), np.zeros(K, np.bool_), np.zeros(K), np.zeros(K),
            np.zeros(K), np.zeros(n_max), np.zeros(state.vocab_size, np.int64), np.zeros(n_max, np.int64),
            np.zeros(n_max, np.int64))


def run_sweep(state: CrfState, hp: Hyperparameters, rng: np.random.Generator, *, init: bool = False,
              batch: bool = True, lookahead: str = "exact") -> None:
    """One full sweep (or the initial sequential seating when ``init``)."""
    a = state.arrays
    T = len(a.words)
    unif = rng.random(3 * T + 4)
    if init:
        a.tok_tab[:] = -1
    dynamic, exact = _flags(hp, lookahead)
    look = batch and dynamic
    j, cursor = 0, 0
    J = state.num_docs
    while True:
        j, cursor = _sweep(state.arrays, j, init, dynamic, look, exact, hp.alpha, hp.gamma, hp.eta, hp.delta,
                           unif, cursor, _scratch(state))
        if j >= J:
            break
        state.ensure_capacity(2 * state.doc_len(j) + 1)


def run_sweeps(state: CrfState, hp: Hyperparameters, rng: np.random.Generator, n: int, *, batch: bool = True,
               lookahead: str = "exact") -> None:
    """``n`` sweeps in one compiled call (no per-sweep Python overhead); meant
    for small states such as a single online document."""
    a = state.arrays
    unif = rng.random(n * 3 * len(a.words) + 4)
    dynamic, exact = _flags(hp, lookahead)
    look = batch and dynamic
    s, j, cursor = 0, 0, 0
    while s < n:
        s, j, cursor = _many_sweeps(state.arrays, n, s, j, dynamic, look, exact, hp.alpha, hp.gamma, hp.eta,
                                    hp.delta, unif, cursor, _scratch(state))
        if s < n:
            state.ensure_capacity(2 * state.doc_len(j) + 1)


def _prefix(state: CrfState, j: int) -> np.ndarray:
    a = state.arrays
    return a.hist_cum + a.m_jk[:j].sum(axis=0)


def _without_table(state: CrfState, j: int, t: int | None) -> CrfState:
    """Copy of ``state`` where table ``t`` of doc ``j`` no longer counts towards m."""
    st = state.copy()
    if t is not None:
        a = st.arrays
        k = a.tab_k[a.doc_ptr[j] + t]
        if k < 0:
            raise ContractError(f"table {t} of document {j} is not live")
        a.m_jk[j, k] -= 1
        a.m_k[k] -= 1
    return st


def _khi(state: CrfState) -> int:
    a = state.arrays
    used = np.flatnonzero((a.m_k > 0) | (a.l_k > 0) | (a.hist_cum > 0) | (a.hist_prev > 0))
    return int(used[-1] + 1) if len(used) else 0


def topic_prior(state: CrfState, hp: Hyperparameters, j: int, table: int | None = None) -> tuple[np.ndarray, float]:
    """Prior weights of existing topics (indexed by topic id) and of a new topic
    for a table of document ``j``, excluding ``table`` when given."""
    st = _without_table(state, j, table)
    pw = np.zeros(st.k_cap)
    _prior_weights(st.arrays, j, _prefix(st, j), hp.dynamic, hp.delta, st.k_cap, pw)
    return pw, hp.gamma


def next_doc_factor(state: CrfState, hp: Hyperparameters, j: int, table: int | None, k: int,
                    lookahead: str = "approx") -> float:
    """Factor by which document ``j+1``'s table topics favour ``table`` of doc
    ``j`` serving topic ``k`` (``NEW`` for a fresh topic).  Identically 1 for the
    last document and for the plain HDP."""
    if not hp.dynamic or j + 1 >= state.num_docs:
        return 1.0
    st = _without_table(state, j, table)
    glog = np.zeros(st.k_cap)
    born = np.zeros(st.k_cap, dtype=bool)
    base, _ = _next_doc_terms(st.arrays, j, _prefix(st, j), hp.delta, hp.gamma, lookahead == "exact", st.k_cap,
                              glog, born)
    return float(math.exp(base if k == NEW else glog[k]))


def new_table_word_likelihood(state: CrfState, hp: Hyperparameters, j: int, w: int, mode: str = "batch",
                              lookahead: str = "exact") -> float:
    """Probability of word ``w`` for a token opening a new table in doc ``j``."""
    a = state.arrays
    K = state.k_cap
    look = mode == "batch" and hp.dynamic and j + 1 < state.num_docs
    pw, glog, qk, fk = (np.zeros(K) for _ in range(4))
    born = np.zeros(K, dtype=bool)
    qnew, qz = _new_table_topics(a, j, _prefix(state, j), hp.dynamic, look, lookahead == "exact", hp.gamma,
                                 hp.delta, K, pw, glog, born, qk)
    return float(_new_table_likelihood(a, w, hp.eta, state.vocab_size, K, qk, qnew, qz, fk))


def sample_table_for_token(state: CrfState, hp: Hyperparameters, j: int, i: int, rng: np.random.Generator,
                           mode: str = "batch", lookahead: str = "exact") -> int:
    """Draw a table for the unseated token ``i`` of doc ``j`` and seat it there."""
    a = state.arrays
    g = a.doc_ptr[j] + i
    if a.tok_tab[g] >= 0:
        raise ContractError(f"token ({j}, {i}) must be unseated before sampling its table")
    state.ensure_capacity(2)
    a = state.arrays
    K, N = state.k_cap, state.doc_len(j)
    look = mode == "batch" and hp.dynamic and j + 1 < state.num_docs
    u1, u2 = rng.random(2)
    bufs = [np.zeros(K) for _ in range(4)]
    _sample_token(a, j, g, _prefix(state, j), hp.dynamic, look, lookahead == "exact", hp.alpha, hp.gamma, hp.eta,
                  hp.delta, state.vocab_size, u1, u2, K, bufs[0], bufs[1], np.zeros(K, dtype=bool), bufs[2],
                  bufs[3], np.zeros(max(N, 1)))
    return int(a.tok_tab[g])


def sample_topic_for_table(state: CrfState, hp: Hyperparameters, j: int, t: int, rng: np.random.Generator,
                           mode: str = "batch", lookahead: str = "exact") -> int:
    """Resample the topic of live table ``t`` in doc ``j``; returns the new topic id."""
    a = state.arrays
    if a.tab_n[a.doc_ptr[j] + t] <= 0:
        raise ContractError(f"table {t} of document {j} is not live")
    state.ensure_capacity(1)
    a = state.arrays
    K, N = state.k_cap, max(state.doc_len(j), 1)
    look = mode == "batch" and hp.dynamic and j + 1 < state.num_docs
    _sample_table(a, j, t, _prefix(state, j), hp.dynamic, look, lookahead == "exact", hp.gamma, hp.eta, hp.delta,
                  state.vocab_size, rng.random(), K, np.zeros(K), np.zeros(K), np.zeros(K, dtype=bool),
                  np.zeros(K), np.zeros(state.vocab_size, dtype=np.int64), np.zeros(N, dtype=np.int64),
                  np.zeros(N, dtype=np.int64))
    return int(a.tab_k[a.doc_ptr[j] + t])


# ---------------------------------------------------------------- snapshots

@dataclass
class ModelSnapshot:
    """Global counts of one chain: everything online inference needs.

    ``table_counts`` is m_k over all documents seen; for the dynamic model the
    cumulative count through the last document equals it.  ``prev_tables`` is
    the last document's per-topic table count.
    """

    hyperparameters: Hyperparameters
    word_topic: np.ndarray  # (V, K)
    table_counts: np.ndarray  # (K,)
    cum_table_counts: np.ndarray  # (K,)
    prev_tables: np.ndarray  # (K,)
    num_docs: int = 0
    topic_ids: np.ndarray | None = None

    @property
    def vocab_size(self) -> int:
        return self.word_topic.shape[0]

    @property
    def topic_totals(self) -> np.ndarray:
        return self.word_topic.sum(axis=0)

    def compact(self) -> "ModelSnapshot":
        """Drop unused topic columns, keeping the original ids in ``topic_ids``."""
        keep = np.flatnonzero((self.table_counts > 0) | (self.word_topic.sum(axis=0) > 0) | (self.prev_tables > 0))
        ids = keep if self.topic_ids is None else self.topic_ids[keep]
        return ModelSnapshot(self.hyperparameters, self.word_topic[:, keep].copy(), self.table_counts[keep].copy(),
                             self.cum_table_counts[keep].copy(), self.prev_tables[keep].copy(), self.num_docs,
                             np.asarray(ids, dtype=np.int64))

    @classmethod
    def from_state(cls, state: CrfState, hp: Hyperparameters) -> "ModelSnapshot":
        a = state.arrays
        prev = a.m_jk[-1].copy() if state.num_docs else a.hist_prev.copy()
        return cls(hp, a.l_wk.copy(), a.m_k.copy(), a.hist_cum + a.m_jk.sum(axis=0), prev,
                   state.num_docs).compact()

    def __eq__(self, other):
        if not isinstance(other, ModelSnapshot):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        snap = self.compact()
        V, K = snap.word_topic.shape
        w, k = np.nonzero(snap.word_topic)
        hp = asdict(snap.hyperparameters)
        hp["model_kind"] = snap.hyperparameters.model_kind.value
        return {
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "vocab_size": int(V),
            "hyperparameters": hp,
            "num_docs": int(snap.num_docs),
            "topic_ids": [int(x) for x in snap.topic_ids],
            "word_topic": [[int(a), int(b), int(c)] for a, b, c in zip(w, k, snap.word_topic[w, k])],
            "table_counts": snap.table_counts.tolist(),
            "cum_table_counts": snap.cum_table_counts.tolist(),
            "prev_tables": snap.prev_tables.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSnapshot":
        if d.get("format_version") != SNAPSHOT_FORMAT_VERSION:
            raise ValueError(f"unsupported snapshot format_version {d.get('format_version')!r}")
        K = len(d["topic_ids"])
        lwk = np.zeros((d["vocab_size"], K), dtype=np.int64)
        for w, k, c in d["word_topic"]:
            lwk[w, k] = c
        return cls(Hyperparameters(**d["hyperparameters"]), lwk,
                   np.array(d["table_counts"], dtype=np.int64).reshape(K),
                   np.array(d["cum_table_counts"], dtype=np.int64).reshape(K),
                   np.array(d["prev_tables"], dtype=np.int64).reshape(K),
                   int(d["num_docs"]), np.array(d["topic_ids"], dtype=np.int64).reshape(K))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelSnapshot":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- batch fitting

@dataclass
class PosteriorSample:
    chain: int
    state: CrfState
    sweeps: int

    def topics_per_token(self) -> np.ndarray:
        return self.state.assignments()[1]


@dataclass
class ChainResult:
    chain: int
    samples: list[PosteriorSample]
    snapshot: ModelSnapshot
    trace: list[tuple[int, int, float]] = field(default_factory=list)


def _fit_chain(corpus: Corpus, hp: Hyperparameters, cfg: SamplerConfig, chain: int,
               seed: np.random.SeedSequence) -> ChainResult:
    rng = np.random.default_rng(seed)
    state = CrfState.empty(corpus)
    run_sweep(state, hp, rng, init=True)
    trace = []
    samples = []
    total = cfg.burn_in_sweeps + (cfg.samples_per_chain - 1) * cfg.thin
    for sweep in range(1, total + 1):
        run_sweep(state, hp, rng, lookahead=cfg.lookahead)
        if sweep % cfg.log_every == 0 or sweep == total:
            ll = corpus_log_likelihood(state.arrays.l_wk, hp.eta)
            trace.append((sweep, state.num_topics, ll))
            logger.info("chain=%d sweep=%d K=%d loglik=%.4f", chain, sweep, state.num_topics, ll)
        if sweep >= cfg.burn_in_sweeps and (sweep - cfg.burn_in_sweeps) % cfg.thin == 0:
            samples.append(PosteriorSample(chain, state.copy(), sweep))
    return ChainResult(chain, samples, ModelSnapshot.from_state(state, hp), trace)


def batch_fit(corpus: Corpus, hp: Hyperparameters, cfg: SamplerConfig) -> list[ChainResult]:
    """Fit independent chains to ``corpus``; one result (samples + snapshot) per chain."""
    if len(corpus) == 0 or corpus.num_tokens == 0:
        raise ValueError("cannot fit an empty corpus")
    seeds = cfg.chain_seeds()
    if cfg.n_jobs == 1:
        return [_fit_chain(corpus, hp, cfg, c, s) for c, s in enumerate(seeds)]
    with ThreadPoolExecutor(cfg.n_jobs) as pool:
        futures = [pool.submit(_fit_chain, corpus, hp, cfg, c, s) for c, s in enumerate(seeds)]
        return [f.result() for f in futures]


# ---------------------------------------------------------------- online inference

@dataclass
class OnlineSample:
    tables: np.ndarray
    topics: np.ndarray
    log_predictive: float


def _online_state(snapshot: ModelSnapshot, tokens: np.ndarray) -> CrfState:
    V, K = snapshot.word_topic.shape
    words = np.asarray(tokens, dtype=np.int64)
    arrays = CrfArrays(
        words=words.copy(),
        doc_ptr=np.array([0, len(words)], dtype=np.int64),
        tok_tab=np.full(len(words), -1, dtype=np.int64),
        tab_n=np.zeros(len(words), dtype=np.int64),
        tab_k=np.full(len(words), -1, dtype=np.int64),
        l_wk=snapshot.word_topic.copy(),
        l_k=snapshot.word_topic.sum(axis=0),
        m_jk=np.zeros((1, K), dtype=np.int64),
        m_k=snapshot.table_counts.copy(),
        hist_cum=snapshot.cum_table_counts.copy(),
        hist_prev=snapshot.prev_tables.copy(),
    )
    state = CrfState(arrays, V, base_l_wk=snapshot.word_topic.copy())
    state.ensure_capacity(2 * len(words) + 1)
    return state


def online_infer(snapshot: ModelSnapshot, document: Document | np.ndarray, sweeps: int,
                 rng: np.random.Generator, vocab_size: int | None = None) -> tuple[OnlineSample, ModelSnapshot]:
    """Infer one new document against ``snapshot`` and fold it in.

    Only the document's own table and topic variables are sampled; the
    snapshot is never modified.  Returns the document's final assignments with
    its log predictive likelihood, and the updated snapshot.
    """
    tokens = document.tokens if isinstance(document, Document) else np.asarray(document, dtype=np.int64)
    V = snapshot.vocab_size
    if vocab_size is not None and vocab_size != V:
        raise ValueError(f"vocabulary mismatch: model has V={V}, document has V={vocab_size}")
    if len(tokens) and (tokens.min() < 0 or tokens.max() >= V):
        raise ValueError(f"vocabulary mismatch: word id {tokens.max()} outside model vocabulary V={V}")
    hp = snapshot.hyperparameters
    state = _online_state(snapshot, tokens)
    if len(tokens):
        run_sweep(state, hp, rng, init=True, batch=False)
        run_sweeps(state, hp, rng, sweeps, batch=False)
    a = state.arrays
    tables, topics = state.assignments()
    K0 = snapshot.word_topic.shape[1]
    logp = float(log_predictive(snapshot.word_topic, snapshot.topic_totals, a.words, topics, hp.eta))
    ids = None
    if snapshot.topic_ids is not None:
        start = int(snapshot.topic_ids.max()) + 1 if K0 else 0
        ids = np.concatenate([snapshot.topic_ids, start + np.arange(a.m_k.shape[0] - K0)])
    new = ModelSnapshot(hp, a.l_wk.copy(), a.m_k.copy(), a.hist_cum + a.m_jk[0], a.m_jk[0].copy(),
                        snapshot.num_docs + 1, ids)
    return OnlineSample(tables, topics, logp), new
