import math

import numpy as np
import pytest

from dynhdp.corpus import Corpus, Document
from dynhdp.crf import NEW, ContractError, CrfState, Hyperparameters, corpus_log_likelihood
from dynhdp.sampler import (
    ModelSnapshot,
    SamplerConfig,
    batch_fit,
    new_table_word_likelihood,
    next_doc_factor,
    online_infer,
    run_sweep,
    sample_table_for_token,
    sample_topic_for_table,
    topic_prior,
)

DYN = Hyperparameters(alpha=1.5, gamma=2.0, eta=0.5, delta=0.5)
PLAIN = Hyperparameters(alpha=1.5, gamma=2.0, eta=0.5, delta=0.5, model_kind="hdp")


def build(docs, V, seating):
    """``seating[j]`` lists tables of doc j as (token indices, topic label);
    labels are mapped to topic ids in order of first appearance."""
    s = CrfState.empty(Corpus.from_token_lists(docs, V))
    ids = {}
    for j, tables in enumerate(seating):
        for toks, label in tables:
            topic = ids.get(label, NEW)
            t = s.seat_token(j, toks[0], NEW, topic)
            ids.setdefault(label, s.table_topic(j, t))
            for i in toks[1:]:
                s.seat_token(j, i, t)
    return s, ids


def within_3sigma(counts, probs):
    n = counts.sum()
    freq = counts / n
    tol = 3 * np.sqrt(probs * (1 - probs) / n) + 1e-12
    return np.all(np.abs(freq - probs) <= tol), freq


class TestTopicPrior:
    def test_dynamic_example(self):
        # doc 0: two tables of A, one of B; doc 1: one table of A plus the table under study (B)
        s, ids = build([[0, 1, 2], [3, 4]], 5, [[([0], "A"), ([1], "A"), ([2], "B")], [([0], "A"), ([1], "B")]])
        pw, g = topic_prior(s, DYN, 1, table=1)
        np.testing.assert_allclose(pw[[ids["A"], ids["B"]]], [4.5, 1.5])
        assert g == 2.0

    def test_first_document_empty(self):
        s = CrfState.empty(Corpus.from_token_lists([[0, 1]], 3))
        pw, g = topic_prior(s, DYN, 0)
        assert pw.sum() == 0 and g == 2.0

    def test_plain_example(self):
        s, ids = build([[0, 1, 2], [3, 4]], 5, [[([0], "A"), ([1], "A"), ([2], "B")], [([0], "A"), ([1], "B")]])
        pw, g = topic_prior(s, PLAIN, 1, table=1)
        np.testing.assert_allclose(pw[[ids["A"], ids["B"]]], [3, 1])
        assert g == 2.0


class TestNextDocFactor:
    def setup_method(self):
        # doc 0: two tables of topic 1; doc j=1: one table of 1 and the table under study (2);
        # doc 2: two tables of 1
        self.s, self.ids = build(
            [[0, 1], [0, 1], [0, 1]], 3,
            [[([0], 1), ([1], 1)], [([0], 1), ([1], 2)], [([0], 1), ([1], 1)]],
        )

    def test_example(self):
        one, two = self.ids[1], self.ids[2]
        assert next_doc_factor(self.s, DYN, 1, 1, one) == pytest.approx(22.0)
        assert next_doc_factor(self.s, DYN, 1, 1, two) == pytest.approx(10.0)

    def test_last_document(self):
        assert next_doc_factor(self.s, DYN, 2, 0, self.ids[1]) == 1.0

    def test_plain_is_one(self):
        assert next_doc_factor(self.s, PLAIN, 1, 1, self.ids[1]) == 1.0

    def test_all_born(self):
        s, ids = build([[0], [1, 2]], 3, [[([0], "A")], [([0], "B"), ([1], "C")]])
        for k in (ids["A"], NEW):
            assert next_doc_factor(s, DYN, 0, 0, k) == 1.0


def joint_log_prior(table_topics, hp):
    """Log prior of per-document table topic labels under the sequential dynamic CRF."""
    cum, prev, out = {}, {}, 0.0
    for doc in table_topics:
        mj = {}
        for k in doc:
            w = {c: mj.get(c, 0) + prev.get(c, 0) + hp.delta * cum[c] for c in cum}
            tot = sum(w.values()) + hp.gamma
            out += math.log((w[k] if k in cum else hp.gamma) / tot)
            mj[k] = mj.get(k, 0) + 1
            cum[k] = cum.get(k, 0) + 1
        prev = mj
    return out


class TestSampleTopicForTable:
    n = 100_000

    def toy(self):
        docs = [[0, 0, 1, 2, 1], [0, 3, 3, 1]]
        seating = [[([0, 1], "A"), ([2], "B"), ([3], "A"), ([4], "D")],
                   [([0], "A"), ([1, 2], "C"), ([3], "B")]]
        return build(docs, 4, seating)

    def draws(self, s, j, t, hp, mode, lookahead, seed=0):
        rng = np.random.default_rng(seed)
        out = np.empty(self.n, dtype=np.int64)
        for r in range(self.n):
            out[r] = sample_topic_for_table(s, hp, j, t, rng, mode=mode, lookahead=lookahead)
        return out

    def test_exact_lookahead_matches_joint_oracle(self):
        s, ids = self.toy()
        j, t = 0, 1  # table of B, whose other table sits in doc 1
        labels = {v: k for k, v in ids.items()}
        words = s.table_words(j, t)
        config = [[labels[s.table_topic(jj, tt)] for tt in s.live_tables(jj)] for jj in range(2)]
        pos = list(s.live_tables(j)).index(t)
        probe = s.copy()
        for i in np.flatnonzero(probe.arrays.tok_tab[:5] == t):
            probe.unseat_token(j, int(i))
        cands = ["A", "B", "C", "D", "new"]
        logw = []
        for c in cands:
            cfg = [list(d) for d in config]
            cfg[j][pos] = c
            k = NEW if c == "new" else ids[c]
            logw.append(joint_log_prior(cfg, DYN) + probe.table_block_log_likelihood(words, k, DYN.eta))
        p = np.exp(np.array(logw) - max(logw))
        p /= p.sum()
        got = self.draws(s, j, t, DYN, "batch", "exact")
        known = {ids[c]: i for i, c in enumerate(cands[:-1])}
        counts = np.zeros(len(cands))
        for k in got:
            counts[known.get(int(k), len(cands) - 1)] += 1
        ok, freq = within_3sigma(counts, p)
        assert ok, (freq, p)

    def test_approx_lookahead_matches_formula(self):
        s, ids = self.toy()
        j, t = 0, 1
        words = s.table_words(j, t)
        probe = s.copy()
        for i in np.flatnonzero(probe.arrays.tok_tab[:5] == t):
            probe.unseat_token(j, int(i))
        a = probe.arrays
        d = DYN.delta
        # counts without the table: doc 0 holds A twice and D once; doc 1 holds A, C, B once each
        m0 = {"A": 2, "D": 1}
        m1 = {"A": 1, "C": 1, "B": 1}

        def g(cand):
            mj = dict(m0)
            if cand is not None:
                mj[cand] = mj.get(cand, 0) + 1
            out = 1.0
            for sname, M in m1.items():
                if mj.get(sname, 0) == 0:
                    continue  # born in doc 1
                for n in range(1, M + 1):
                    out *= mj[sname] + n - 1 + d * (mj[sname] + n - 1)
            return out

        w = {}
        for c in ("A", "D"):
            prior = m0[c] + d * m0[c]
            w[c] = prior * math.exp(probe.table_block_log_likelihood(words, ids[c], DYN.eta)) * g(c)
        w["new"] = DYN.gamma * math.exp(probe.table_block_log_likelihood(words, NEW, DYN.eta)) * g(None)
        p = np.array(list(w.values()))
        p /= p.sum()
        got = self.draws(s, j, t, DYN, "batch", "approx", seed=1)
        counts = np.array([(got == ids["A"]).sum(), (got == ids["D"]).sum(), 0.0])
        counts[2] = self.n - counts[:2].sum()
        ok, freq = within_3sigma(counts, p)
        assert ok, (freq, p)
        assert a.m_jk.sum() == 6

    def test_symmetric_topics(self):
        s, ids = build([[0, 0, 1, 1, 2]], 3, [[([0], "A"), ([1], "A"), ([2], "B"), ([3], "B"), ([4], "C")]])
        got = self.draws(s, 0, 4, PLAIN, "batch", "exact")
        assert abs((got == ids["A"]).mean() - (got == ids["B"]).mean()) < 0.01

    def test_gamma_to_zero(self):
        hp = Hyperparameters(gamma=1e-12, eta=0.5, model_kind="hdp")
        s, ids = build([[0, 1]], 3, [[([0], "A"), ([1], "A")]])
        rng = np.random.default_rng(0)
        assert all(sample_topic_for_table(s, hp, 0, 1, rng) == ids["A"] for _ in range(1000))

    def test_no_lookahead_on_last_document_equals_online(self):
        s, _ = self.toy()
        for seed in range(20):
            a, b = s.copy(), s.copy()
            ka = sample_topic_for_table(a, DYN, 1, 1, np.random.default_rng(seed), mode="batch")
            kb = sample_topic_for_table(b, DYN, 1, 1, np.random.default_rng(seed), mode="online")
            assert ka == kb

    def test_dead_table(self):
        s, _ = self.toy()
        with pytest.raises(ContractError):
            sample_topic_for_table(s, DYN, 0, 4, np.random.default_rng(0))


class TestNewTableLikelihood:
    def test_no_topics(self):
        s = CrfState.empty(Corpus.from_token_lists([[0, 1]], 7))
        assert new_table_word_likelihood(s, DYN, 0, 3) == pytest.approx(1 / 7)

    def test_two_term_mixture(self):
        s, ids = build([[0, 0, 1], [2]], 4, [[([0, 1, 2], "A")], []])
        k = ids["A"]
        phi = (s.arrays.l_wk[:, k] + PLAIN.eta) / (3 + 4 * PLAIN.eta)
        m = 1
        for w in range(4):
            want = (m * phi[w] + PLAIN.gamma / 4) / (m + PLAIN.gamma)
            assert new_table_word_likelihood(s, PLAIN, 1, w) == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("hp", [DYN, PLAIN])
    @pytest.mark.parametrize("lookahead", ["approx", "exact"])
    def test_sums_to_one(self, hp, lookahead):
        rng = np.random.default_rng(5)
        docs = [rng.integers(0, 6, 8).tolist() for _ in range(4)]
        s = CrfState.empty(Corpus.from_token_lists(docs, 6))
        run_sweep(s, hp, rng, init=True)
        for _ in range(3):
            run_sweep(s, hp, rng, lookahead=lookahead)
        for j in range(4):
            for mode in ("batch", "online"):
                if lookahead == "exact" and mode == "batch" and hp.dynamic and j < 3:
                    continue  # also carries the next document's probability change, not a mixture
                tot = sum(new_table_word_likelihood(s, hp, j, w, mode, lookahead) for w in range(6))
                assert tot == pytest.approx(1.0, abs=1e-12)


class TestSampleTableForToken:
    n = 100_000

    def frequencies(self, s, hp, j, i, mode="online", seed=0):
        rng = np.random.default_rng(seed)
        out = np.empty(self.n, dtype=np.int64)
        for r in range(self.n):
            t = sample_table_for_token(s, hp, j, i, rng, mode=mode)
            out[r] = t
            s.unseat_token(j, i)
        return out

    def test_matches_direct_normalisation(self):
        # token 4 (word 0) is left unseated
        s, ids = build([[0, 1, 1, 2, 0]], 3, [[([0], "A"), ([1, 2], "B"), ([3], "A")]])
        w = 0
        a = s.arrays
        V = 3
        f = lambda k: (a.l_wk[w, k] + DYN.eta) / (a.l_k[k] + V * DYN.eta)
        weights = [1 * f(ids["A"]), 2 * f(ids["B"]), 1 * f(ids["A"])]
        r_new = new_table_word_likelihood(s, DYN, 0, w, mode="online")
        pw = {"A": 2 + DYN.delta * 2, "B": 1 + DYN.delta * 1}
        want_r = (pw["A"] * f(ids["A"]) + pw["B"] * f(ids["B"]) + DYN.gamma / V) / (sum(pw.values()) + DYN.gamma)
        assert r_new == pytest.approx(want_r, abs=1e-12)
        p = np.array(weights + [DYN.alpha * r_new])
        p /= p.sum()
        got = self.frequencies(s, DYN, 0, 4)
        counts = np.array([(got == 0).sum(), (got == 1).sum(), (got == 2).sum(), (got >= 3).sum()], float)
        ok, freq = within_3sigma(counts, p)
        assert ok, (freq, p)

    def test_alpha_to_zero_single_table(self):
        hp = Hyperparameters(alpha=1e-12, eta=0.5)
        s, _ = build([[0, 2]], 3, [[([0], "A")]])
        rng = np.random.default_rng(0)
        for _ in range(1000):
            assert sample_table_for_token(s, hp, 0, 1, rng) == 0
            s.unseat_token(0, 1)

    def test_likelihoods_cancel(self):
        hp = Hyperparameters(alpha=1e-12, eta=0.5)
        s, _ = build([[1, 1, 1, 1]], 3, [[([0, 1], "A"), ([2], "A")]])
        got = np.array([0, 0])
        rng = np.random.default_rng(0)
        for _ in range(30_000):
            got[sample_table_for_token(s, hp, 0, 3, rng)] += 1
            s.unseat_token(0, 3)
        ok, freq = within_3sigma(got.astype(float), np.array([2 / 3, 1 / 3]))
        assert ok, freq

    def test_requires_unseated(self):
        s, _ = build([[0]], 3, [[([0], "A")]])
        with pytest.raises(ContractError):
            sample_table_for_token(s, DYN, 0, 0, np.random.default_rng(0))


class TestRunSweep:
    @pytest.mark.parametrize("hp", [DYN, PLAIN])
    @pytest.mark.parametrize("lookahead", ["approx", "exact"])
    def test_counts_consistent_after_every_sweep(self, hp, lookahead):
        rng = np.random.default_rng(3)
        docs = [rng.integers(0, 9, int(rng.integers(0, 12))).tolist() for _ in range(15)]
        s = CrfState.empty(Corpus.from_token_lists(docs, 9), k_cap=2)
        run_sweep(s, hp, rng, init=True)
        s.check_counts()
        for _ in range(20):
            run_sweep(s, hp, rng, lookahead=lookahead)
            s.check_counts()
        assert (s.arrays.tok_tab >= 0).all()


class TestBatchFit:
    def test_single_token(self):
        c = Corpus.from_token_lists([[2]], 4)
        res = batch_fit(c, DYN, SamplerConfig(burn_in_sweeps=25, chains=2, seed=0))
        for r in res:
            st = r.samples[-1].state
            assert st.num_topics == 1 and len(st.live_tables(0)) == 1
            assert r.snapshot.word_topic.sum() == 1 and r.snapshot.table_counts.tolist() == [1]

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        c = Corpus.from_token_lists([rng.integers(0, 10, 12).tolist() for _ in range(10)], 10)
        cfg = SamplerConfig(burn_in_sweeps=15, chains=2, seed=123)
        a, b = batch_fit(c, DYN, cfg), batch_fit(c, DYN, cfg)
        assert [r.snapshot for r in a] == [r.snapshot for r in b]
        assert a[0].snapshot != a[1].snapshot

    def test_threads_do_not_change_results(self):
        rng = np.random.default_rng(1)
        c = Corpus.from_token_lists([rng.integers(0, 10, 12).tolist() for _ in range(10)], 10)
        a = batch_fit(c, DYN, SamplerConfig(burn_in_sweeps=10, chains=3, seed=9))
        b = batch_fit(c, DYN, SamplerConfig(burn_in_sweeps=10, chains=3, seed=9, n_jobs=3))
        assert [r.snapshot for r in a] == [r.snapshot for r in b]

    def test_log_lines(self, caplog):
        caplog.set_level("INFO", logger="dynhdp.sampler")
        c = Corpus.from_token_lists([[0, 1, 2], [2, 1]], 3)
        batch_fit(c, DYN, SamplerConfig(burn_in_sweeps=4, chains=1, seed=0, log_every=2))
        lines = [r.getMessage() for r in caplog.records]
        assert lines[0].startswith("chain=0 sweep=2 K=") and "loglik=" in lines[0]

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            batch_fit(Corpus.from_token_lists([[]], 3), DYN, SamplerConfig(burn_in_sweeps=1, chains=1))

    def test_plain_hdp_order_exchangeable(self):
        rng = np.random.default_rng(0)
        docs = [rng.choice(5, 10).tolist() if j % 2 else (5 + rng.choice(5, 10)).tolist() for j in range(40)]
        perm = rng.permutation(40)
        per_word = {"orig": [], "shuffled": []}
        for seed in range(10):
            for name, order in (("orig", range(40)), ("shuffled", perm)):
                c = Corpus.from_token_lists([docs[i] for i in order], 10)
                res = batch_fit(c, PLAIN, SamplerConfig(burn_in_sweeps=30, chains=1, seed=seed))
                per_word[name].append(corpus_log_likelihood(res[0].snapshot.word_topic, PLAIN.eta) / 400)
        a, b = np.array(per_word["orig"]), np.array(per_word["shuffled"])
        se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
        assert abs(a.mean() - b.mean()) <= 2 * se + 1e-9


class TestSnapshot:
    def fitted(self):
        rng = np.random.default_rng(2)
        c = Corpus.from_token_lists([rng.integers(0, 6, 8).tolist() for _ in range(6)], 6)
        return batch_fit(c, DYN, SamplerConfig(burn_in_sweeps=10, chains=1, seed=1))[0].snapshot

    def test_round_trip(self, tmp_path):
        snap = self.fitted()
        snap.save(tmp_path / "s.json")
        back = ModelSnapshot.load(tmp_path / "s.json")
        assert back == snap
        np.testing.assert_array_equal(back.word_topic, snap.word_topic)
        assert back.hyperparameters == snap.hyperparameters

    def test_format_fields(self):
        d = self.fitted().to_dict()
        assert d["format_version"] == 1
        assert {"vocab_size", "hyperparameters", "topic_ids", "word_topic", "table_counts", "cum_table_counts",
                "prev_tables"} <= set(d)
        assert all(len(x) == 3 for x in d["word_topic"])

    def test_bad_version(self):
        d = self.fitted().to_dict()
        d["format_version"] = 2
        with pytest.raises(ValueError):
            ModelSnapshot.from_dict(d)


class TestOnlineInfer:
    def snapshot(self):
        lwk = np.zeros((5, 2), dtype=np.int64)
        lwk[0, 0] = 50
        lwk[1, 1] = 3
        return ModelSnapshot(DYN, lwk, np.array([10, 2]), np.array([10, 2]), np.array([1, 0]), 12,
                             np.array([0, 1]))

    def test_empty_document(self):
        snap = self.snapshot()
        sample, new = online_infer(snap, np.array([], dtype=np.int64), 10, np.random.default_rng(0))
        assert sample.log_predictive == 0.0
        np.testing.assert_array_equal(new.word_topic[:, :2], snap.word_topic)
        np.testing.assert_array_equal(new.table_counts[:2], snap.table_counts)
        assert new.prev_tables.sum() == 0 and new.num_docs == 13

    def test_single_token_modal_topic(self):
        snap = self.snapshot()
        hits = 0
        for seed in range(50):
            _, new = online_infer(snap, np.array([0]), 20, np.random.default_rng(seed))
            hits += int(new.word_topic[0, 0] == 51)
        assert hits > 25

    def test_totals_grow_by_document_lengths(self):
        snap = self.snapshot()
        rng = np.random.default_rng(1)
        _, s1 = online_infer(snap, Document(0, np.array([0, 1, 2])), 20, rng)
        _, s2 = online_infer(s1, np.array([4, 4]), 20, rng)
        assert s2.word_topic.sum() == snap.word_topic.sum() + 5
        assert s2.num_docs == snap.num_docs + 2

    def test_snapshot_not_mutated(self):
        snap = self.snapshot()
        before = snap.to_dict()
        online_infer(snap, np.array([0, 1, 3, 3]), 30, np.random.default_rng(0))
        assert snap.to_dict() == before

    def test_log_predictive_matches_fold_in(self):
        from dynhdp.abnormality import per_sample_log_predictive

        snap = self.snapshot()
        sample, new = online_infer(snap, np.array([0, 1, 3, 3, 0]), 30, np.random.default_rng(2))
        assert sample.log_predictive == pytest.approx(
            per_sample_log_predictive(snap.word_topic, new.word_topic, DYN.eta), abs=1e-12)

    def test_vocab_mismatch(self):
        with pytest.raises(ValueError, match="V=5"):
            online_infer(self.snapshot(), np.array([0]), 1, np.random.default_rng(0), vocab_size=7)

    def test_deterministic(self):
        snap = self.snapshot()
        a = online_infer(snap, np.array([0, 1, 3]), 20, np.random.default_rng(4))
        b = online_infer(snap, np.array([0, 1, 3]), 20, np.random.default_rng(4))
        assert a[1] == b[1]
        np.testing.assert_array_equal(a[0].topics, b[0].topics)
