"""Walk through the synthetic bars experiment at a small size.

Generates a bar-topic video sequence with injected abnormal clips, fits the
dynamic and the plain HDP, prints the recovered topics as 5x5 pictures and
compares abnormality rankings.  Run with ``python demos/bars_walkthrough.py``.
"""
import argparse

import numpy as np

from dynhdp.abnormality import score_corpus
from dynhdp.crf import Hyperparameters, topic_estimate
from dynhdp.evaluation import auc
from dynhdp.sampler import SamplerConfig, batch_fit
from dynhdp.synth import generate_sequence, true_model_score


def picture(phi):
    shades = " .:*#"
    img = phi.reshape(5, 5) / phi.max()
    return ["".join(shades[min(4, int(v * 4.999))] for v in row) for row in img]


def show_topics(snapshot, eta, top=10):
    counts = snapshot.word_topic
    order = np.argsort(-counts.sum(axis=0))[:top]
    pics = [picture(topic_estimate(counts[:, k], eta)) for k in order]
    for r in range(5):
        print("  ".join(p[r] for p in pics))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train-docs", type=int, default=400)
    p.add_argument("--test-docs", type=int, default=200)
    p.add_argument("--abnormal", type=int, default=60)
    p.add_argument("--burn-in", type=int, default=200)
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--online-sweeps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    train, _ = generate_sequence(args.train_docs, 20, rng=rng)
    abnormal = rng.choice(np.arange(1, args.test_docs), args.abnormal, replace=False)
    test, truth = generate_sequence(args.test_docs, 20, abnormal, rng=rng)
    y = truth.abnormal.astype(int)
    print(f"{len(train)} training clips, {len(test)} test clips, {y.sum()} abnormal")

    true_scores = [true_model_score(d.tokens, truth.token_topics(j)) for j, d in enumerate(test)]
    print(f"true topics, word likelihood only: AUC {auc(true_scores, y):.3f}")

    for kind in ("dhdp", "hdp"):
        hp = Hyperparameters(model_kind=kind)
        cfg = SamplerConfig(burn_in_sweeps=args.burn_in, chains=args.chains, seed=args.seed)
        chains = batch_fit(train, hp, cfg)
        snaps = [c.snapshot for c in chains]
        print(f"\n{kind}: topics per chain {[s.word_topic.shape[1] for s in snaps]}; largest topics of chain 0:")
        show_topics(snaps[0], hp.eta)
        records = score_corpus(snaps, test, args.online_sweeps, seed=args.seed + 1)
        print(f"{kind}: AUC {auc([r.score for r in records], y):.3f}")


if __name__ == "__main__":
    main()
