"""Command-line entry point: gen | train | transfer | eval | decode |
ngrams | stats | gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every run prints
its resolved configuration (including the seed) before doing work, so
experiments are replayable.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import gradcheck as gc
from . import models, synthgen, textcodec, trainkit
from .errors import StrLabError


def _print_config(args) -> None:
    pairs = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + " ".join(f"{k}={v}" for k, v in pairs.items()))


def _read_corpus(path):
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def cmd_gen(args):
    atlas = synthgen.get_script(args.script)
    cfg = synthgen.RenderConfig(seed=args.seed)
    lexicon = synthgen.builtin_lexicon(atlas, args.lexicon, seed=args.seed)
    manifests = synthgen.generate_dataset(lexicon, atlas, cfg, args.count, args.out, split=args.split)
    for name, rows in manifests.items():
        print(f"wrote {len(rows)} samples to {args.out}/{name}")
    return 0


def _load_split(data_dir, prefer):
    import os

    for name in prefer:
        if os.path.exists(os.path.join(data_dir, name)):
            return [(img, label) for img, label, _ in synthgen.load_manifest(data_dir, name)], name
    raise FileNotFoundError(f"no manifest ({'/'.join(prefer)}) in {data_dir}")


def cmd_train(args):
    train_set, used = _load_split(args.data, ("train.tsv", "manifest.tsv"))
    try:
        val_set, val_name = _load_split(args.data, ("test.tsv",))
    except FileNotFoundError:
        val_set, val_name = None, None
    print(f"training on {len(train_set)} samples from {used}" + (f", validating on {val_name}" if val_name else ""))

    if args.src is not None:
        src_model = models.load(args.src)
    else:
        src_model = None

    vocab = textcodec.build_vocab(label for _, label in train_set)
    if args.model == "crnn":
        model = models.build_crnn(models.CrnnConfig(), vocab, seed=args.seed)
    else:
        model = models.build_starnet(models.StarNetConfig(), vocab, seed=args.seed)
    if src_model is not None:
        report = models.transfer_weights(src_model, model)
        print(f"transferred {len(report.copied)} tensors, reinitialized {len(report.reinitialized)}")
    if args.correction:
        models.attach_correction_bilstm(model, seed=args.seed)
        print("correction BiLSTM attached")

    plan = trainkit.TrainPlan(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    result = trainkit.train(model, train_set, plan, val_set=val_set)
    with open(args.out, "wb") as f:
        f.write(result.best_checkpoint)
    print(f"wrote checkpoint {args.out} (best WRR {result.best_wrr:.2f})" if val_set else f"wrote checkpoint {args.out}")
    if args.curve:
        with open(args.curve, "w", newline="\n") as f:
            f.write(result.curve_tsv())
    return 0


def cmd_transfer(args):
    plan = trainkit.TrainPlan(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, wrr_threshold=args.threshold)
    sizes = trainkit.ExperimentSizes(src_train=args.src_count, dst_train=args.dst_count, dst_test=args.test_count)
    outcomes = trainkit.transfer_experiment(args.src_script, args.dst_script, sizes, plan, model_kind=args.model)
    print(trainkit.experiment_tsv(outcomes), end="")
    return 0


def cmd_eval(args):
    model = models.load(args.ckpt)
    data, used = _load_split(args.data, ("test.tsv", "manifest.tsv", "train.tsv"))
    report = trainkit.evaluate_model(model, data)
    if args.tsv:
        with open(args.tsv, "w", encoding="utf-8", newline="\n") as f:
            f.write(report.tsv())
    print(report.summary_line())
    return 0


def cmd_decode(args):
    model = models.load(args.ckpt)
    img = synthgen.read_pgm(args.image)
    h, w = model.config.input_hw
    batch = synthgen.resize_bilinear(img, h, w).astype(model.dtype)[None, None]
    print(trainkit.predict(model, batch)[0])
    return 0


def cmd_ngrams(args):
    table = textcodec.ngram_table(_read_corpus(args.corpus), args.n)
    for gram, count in textcodec.top_k(table, args.top):
        print(f"{gram}\t{count}")
    return 0


def cmd_stats(args):
    stats = textcodec.corpus_stats(_read_corpus(args.corpus))
    print(textcodec.stats_tsv(stats), end="")
    return 0


def cmd_gradcheck(args):
    results = gc.run_suite(args.seed)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name}\t{r.max_rel_err:.3e}\t{status}")
        failed += not r.passed
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen", cmd_gen, "render a synthetic word-image dataset")
    sp.add_argument("--script", required=True, choices=["A", "B", "C"])
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", type=float, default=None, help="train fraction; writes train.tsv/test.tsv")
    sp.add_argument("--lexicon", type=int, default=500, help="builtin lexicon size")

    sp = add("train", cmd_train, "train a recognizer")
    sp.add_argument("--model", choices=["crnn", "starnet"], default="crnn")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--from", dest="src", default=None, help="source checkpoint for transfer learning")
    sp.add_argument("--correction", action="store_true", help="attach the correction BiLSTM before training")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--curve", default=None, help="write step/loss TSV here")

    sp = add("transfer", cmd_transfer, "run the scratch-vs-transfer experiment")
    sp.add_argument("--src-script", required=True, choices=["A", "B", "C"])
    sp.add_argument("--dst-script", required=True, choices=["A", "B", "C"])
    sp.add_argument("--model", choices=["crnn", "starnet"], default="crnn")
    sp.add_argument("--src-count", type=int, default=2000)
    sp.add_argument("--dst-count", type=int, default=400)
    sp.add_argument("--test-count", type=int, default=200)
    sp.add_argument("--epochs", type=int, default=15)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--threshold", type=float, default=80.0)

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--tsv", default=None, help="write the per-sample report here")

    sp = add("decode", cmd_decode, "recognize a single PGM image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)

    sp = add("ngrams", cmd_ngrams, "character n-gram table of a corpus file")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--top", type=int, default=5)

    sp = add("stats", cmd_stats, "word-length statistics of a corpus file")
    sp.add_argument("--corpus", required=True)

    add("gradcheck", cmd_gradcheck, "run the finite-difference gradient suite")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _print_config(args)
    np.seterr(over="raise", invalid="raise")
    try:
        return args.func(args)
    except StrLabError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
