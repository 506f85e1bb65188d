"""Command-line pipelines: extract-words, generate-synthetic, train, score, evaluate, true-score.

Every command accepts ``--config FILE`` with ``key=value`` lines (``#``
comments); keys are option names with dashes or underscores and explicit
flags override them.  The fully resolved settings, seeds included, are
written to ``run.config`` in the output directory (``<out>.run.config`` for
commands whose output is a single file).

Exit codes: 0 on success, 2 on usage errors, 1 on data errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as cio
from .abnormality import score_corpus
from .crf import Hyperparameters, ModelKind
from .evaluation import roc, summary_line, write_roc
from .sampler import ModelSnapshot, SamplerConfig, batch_fit
from .synth import GroundTruth, generate_sequence, true_model_score

logger = logging.getLogger("dynhdp")

SNAPSHOT_GLOB = "chain_*.snapshot.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- config handling

def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def echo_config(args: argparse.Namespace, path: Path) -> None:
    skip = {"func", "config", "verbose"}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command={args.command}\n")
        for key, value in sorted(vars(args).items()):
            if key in skip or key == "command" or value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            fh.write(f"{key}={value}\n")


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _seed(args) -> int:
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**63))
        logger.info("no seed given; drew seed=%d", args.seed)
    return args.seed


def _hyper(args) -> Hyperparameters:
    try:
        return Hyperparameters(args.alpha, args.gamma, args.eta, args.delta, ModelKind(args.model))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_extract_words(args) -> int:
    _require(args, "flow", "cells_x", "cells_y", "out")
    records = cio.read_flow(args.flow)
    if not records:
        logger.warning("flow file %s has no records; writing an empty corpus", args.flow)
    corpus = cio.extract_words(records, args.cells_x, args.cells_y, args.frames_per_clip, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cio.write_corpus(corpus, out)
    echo_config(args, out.with_name(out.name + ".run.config"))
    empty = sum(1 for d in corpus if len(d) == 0)
    logger.info("wrote %d documents (%d empty), %d tokens, V=%d", len(corpus), empty, corpus.num_tokens,
                corpus.vocab_size)
    return 0


def cmd_generate_synthetic(args) -> int:
    _require(args, "out_dir")
    if args.test_docs < 2 or args.train_docs < 1:
        raise UsageError("need --train-docs >= 1 and --test-docs >= 2")
    if not 0 <= args.abnormal <= args.test_docs - 1:
        raise UsageError(f"--abnormal must be in [0, test_docs - 1] = [0, {args.test_docs - 1}]")
    seed = _seed(args)
    train_ss, test_ss, pick_ss = np.random.SeedSequence(seed).spawn(3)
    kw = dict(alpha=args.alpha, gamma=args.gamma, delta=args.delta, noise=args.noise)
    train, train_truth = generate_sequence(args.train_docs, args.words_per_doc, rng=np.random.default_rng(train_ss),
                                           seed=seed, **kw)
    abnormal = np.random.default_rng(pick_ss).choice(np.arange(1, args.test_docs), args.abnormal, replace=False)
    test, truth = generate_sequence(args.test_docs, args.words_per_doc, abnormal,
                                    rng=np.random.default_rng(test_ss), seed=seed, **kw)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cio.write_corpus(train, out / "train.corpus")
    cio.write_corpus(test, out / "test.corpus")
    cio.write_labels(truth.abnormal.astype(int), out / "test.labels")
    truth.save(out / "truth.json")
    train_truth.save(out / "train_truth.json")
    echo_config(args, out / "run.config")
    logger.info("wrote %d train and %d test documents (%d abnormal) to %s", len(train), len(test),
                int(truth.abnormal.sum()), out)
    return 0


def cmd_train(args) -> int:
    _require(args, "corpus", "out")
    hp = _hyper(args)
    if args.burn_in < 1 or args.chains < 1:
        raise UsageError("--burn-in and --chains must be positive")
    seed = _seed(args)
    corpus = cio.read_corpus(args.corpus)
    cfg = SamplerConfig(burn_in_sweeps=args.burn_in, chains=args.chains, seed=seed, lookahead=args.lookahead,
                        n_jobs=args.jobs, log_every=args.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob(SNAPSHOT_GLOB):
        old.unlink()
    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    slog = logging.getLogger("dynhdp.sampler")
    level = slog.level
    slog.addHandler(handler)
    slog.setLevel(logging.INFO)
    try:
        results = batch_fit(corpus, hp, cfg)
    finally:
        slog.removeHandler(handler)
        slog.setLevel(level)
        handler.close()
    for res in results:
        res.snapshot.save(out / f"chain_{res.chain}.snapshot.json")
    echo_config(args, out / "run.config")
    logger.info("model=%s chains=%d topics=%s", hp.model_kind.value, len(results),
                [res.snapshot.word_topic.shape[1] for res in results])
    return 0


def load_snapshots(model_dir: str | Path) -> list[ModelSnapshot]:
    paths = sorted(Path(model_dir).glob(SNAPSHOT_GLOB), key=lambda p: int(p.name.split("_")[1].split(".")[0]))
    if not paths:
        raise DataError(f"no snapshot files ({SNAPSHOT_GLOB}) in {model_dir}")
    return [ModelSnapshot.load(p) for p in paths]


def cmd_score(args) -> int:
    _require(args, "model_dir", "corpus", "out")
    if args.online_sweeps < 1:
        raise UsageError("--online-sweeps must be positive")
    seed = _seed(args)
    snapshots = load_snapshots(args.model_dir)
    corpus = cio.read_corpus(args.corpus)
    records = score_corpus(snapshots, corpus, args.online_sweeps, seed=seed, n_jobs=args.jobs,
                           literal=args.literal_likelihood)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cio.write_scores([r.doc_index for r in records], [r.score for r in records], [r.n_tokens for r in records], out)
    echo_config(args, out.with_name(out.name + ".run.config"))
    logger.info("scored %d documents with %d chains", len(records), len(snapshots))
    return 0


def _aligned(score_ids: np.ndarray, labels: dict[int, int]) -> np.ndarray:
    if set(score_ids.tolist()) != set(labels) or len(score_ids) != len(labels):
        raise DataError(f"document ids differ between scores ({len(score_ids)} rows) and labels ({len(labels)} rows)")
    return np.array([labels[int(j)] for j in score_ids])


def cmd_evaluate(args) -> int:
    _require(args, "scores", "labels")
    ids, scores, _ = cio.read_scores(args.scores)
    y = _aligned(ids, cio.read_labels(args.labels))
    line = summary_line(scores, y)
    if args.out_roc:
        out = Path(args.out_roc)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_roc(roc(scores, y), out)
        echo_config(args, out.with_name(out.name + ".run.config"))
    print(line)
    return 0


def cmd_true_score(args) -> int:
    _require(args, "corpus", "truth", "out")
    corpus = cio.read_corpus(args.corpus)
    if not Path(args.truth).exists():
        raise DataError(f"truth file not found: {args.truth}")
    truth = GroundTruth.load(args.truth)
    if len(truth.tables) != len(corpus):
        raise DataError(f"truth covers {len(truth.tables)} documents, corpus has {len(corpus)}")
    if args.noise is None:
        args.noise = truth.noise
    elif args.noise != truth.noise:
        logger.warning("--noise %g differs from the generator's noise %g", args.noise, truth.noise)
    scores = [true_model_score(doc.tokens, truth.token_topics(j), args.noise) for j, doc in enumerate(corpus)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cio.write_scores(range(len(corpus)), scores, [len(d) for d in corpus], out)
    echo_config(args, out.with_name(out.name + ".run.config"))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynhdp", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def command(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="key=value file; explicit flags take precedence")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    def hyper(p, model=True):
        if model:
            p.add_argument("--model", default="dhdp", choices=[m.value for m in ModelKind])
        p.add_argument("--alpha", type=float, default=1.5)
        p.add_argument("--gamma", type=float, default=2.0)
        if model:
            p.add_argument("--eta", type=float, default=0.2)
        p.add_argument("--delta", type=float, default=0.5)

    p = command("extract-words", cmd_extract_words, "quantise a flow CSV into a corpus of clip documents")
    p.add_argument("--flow")
    p.add_argument("--cells-x", type=int)
    p.add_argument("--cells-y", type=int)
    p.add_argument("--frames-per-clip", type=int, default=25)
    p.add_argument("--threshold", type=float, default=0.5, help="minimum flow magnitude (pixels/frame)")
    p.add_argument("--out")

    p = command("generate-synthetic", cmd_generate_synthetic, "draw bar-topic train/test corpora")
    p.add_argument("--train-docs", type=int, default=2000)
    p.add_argument("--test-docs", type=int, default=1000)
    p.add_argument("--abnormal", type=int, default=300)
    p.add_argument("--words-per-doc", type=int, default=20)
    hyper(p, model=False)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")

    p = command("train", cmd_train, "fit independent Gibbs chains and write one snapshot per chain")
    p.add_argument("--corpus")
    hyper(p)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--chains", type=int, default=5)
    p.add_argument("--lookahead", default="exact", choices=["exact", "approx"])
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--out")

    p = command("score", cmd_score, "score documents in order with online inference")
    p.add_argument("--model-dir")
    p.add_argument("--corpus")
    p.add_argument("--online-sweeps", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--literal-likelihood", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--out")

    p = command("evaluate", cmd_evaluate, "ROC curve and AUC of scores against labels")
    p.add_argument("--scores")
    p.add_argument("--labels")
    p.add_argument("--out-roc")

    p = command("true-score", cmd_true_score, "score documents with the generating bar topics")
    p.add_argument("--corpus")
    p.add_argument("--truth")
    p.add_argument("--noise", type=float)
    p.add_argument("--out")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a command is required")
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known - {"command"})
        if unknown:
            raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        cfg.pop("command", None)
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dynhdp: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dynhdp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"dynhdp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
