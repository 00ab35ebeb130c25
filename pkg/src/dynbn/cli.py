"""Command line entry point.  Every artifact is a BNAD container; reports are TSV."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import detector as det
from . import experiment as ex
from . import harness as H
from .basemodel import load_base, load_table, save_base, save_table
from .corruptions import CORRUPTIONS, CorruptionLabel
from .dataio import load_corpus, load_dataset, save_corpus, save_dataset
from .pipeline import MODES, AdaptivePipeline
from .spectrum import export_spectra, extract_features, load_spectrum, mean_corruption_spectrum, save_spectrum

DEFAULT_NAMES = {
    "train": "train.bnad", "test": "test.bnad",
    "train_corpus": "train_corrupted.bnad", "test_corpus": "test_corrupted.bnad",
    "eps": "eps.bnad", "base": "base.bnad", "detector": "detector.bnad", "table": "table.bnad",
}


def _path(args, key: str, flag: str | None = None) -> Path:
    given = getattr(args, flag or key, None)
    return Path(given) if given else Path(args.data) / DEFAULT_NAMES[key]


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _report(args, text: str) -> None:
    if args.report:
        _write_text(args.report, text)
    sys.stdout.write(text)


def _desk(args, **overrides) -> ex.DeskConfig:
    return ex.DeskConfig(seed=args.seed, **overrides)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    n_test = args.n_test if args.n_test is not None else args.n // 6
    train, test = ex.generate(args.n, n_test, args.seed)
    out = Path(args.out or args.data)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / DEFAULT_NAMES["train"], train)
    save_dataset(out / DEFAULT_NAMES["test"], test)
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


def cmd_corrupt(args) -> None:
    cfg = _desk(args, train_per_cell=args.per_cell, test_per_cell=args.test_per_cell)
    train = load_dataset(_path(args, "train"))
    test = load_dataset(_path(args, "test"))
    tr, te = ex.corrupt_splits(train, test, cfg)
    out = Path(args.out or args.data)
    save_corpus(out / DEFAULT_NAMES["train_corpus"], tr)
    save_corpus(out / DEFAULT_NAMES["test_corpus"], te)
    print(f"wrote {len(tr)} + {len(te)} corrupted records to {out}")


def cmd_eps(args) -> None:
    eps = ex.natural_spectrum(load_corpus(_path(args, "train_corpus")))
    out = Path(args.out) if args.out else _path(args, "eps")
    save_spectrum(out, eps)
    print(f"mean amplitude spectrum {eps.shape} over {eps.count} images -> {out}")


def cmd_train_base(args) -> None:
    cfg = _desk(args)
    cfg.base.epochs = args.epochs
    train = load_dataset(_path(args, "train"))
    print("epoch, lr, loss, acc")
    model = ex.fit_base(train, cfg, log=print)
    out = Path(args.out) if args.out else _path(args, "base")
    save_base(out, model)
    test_path = _path(args, "test")
    if test_path.exists():
        test = load_dataset(test_path)
        print(f"clean test accuracy\t{float((model.predict(test.images) == test.labels).mean())!r}")
    print(f"-> {out}")


def cmd_train_detector(args) -> None:
    cfg = _desk(args)
    cfg.detector.epochs = args.epochs
    corpus = load_corpus(_path(args, "train_corpus"))
    eps = load_spectrum(_path(args, "eps", "eps_path"))
    featurize = (lambda x: extract_features(x, eps)) if args.features == "spectrum" else ex.pixel_features
    print("epoch, lr, loss, acc")
    model, _ = ex.fit_detector(featurize(corpus.images), corpus.corruptions, cfg, log=print)
    out = Path(args.out) if args.out else _path(args, "detector")
    det.save_detector(out, model)
    val_path = _path(args, "test_corpus")
    if val_path.exists():
        val = load_corpus(val_path)
        acc, cm = det.evaluate(model, featurize(val.images), val.corruptions)
        names = [CorruptionLabel(c).slug for c in range(model.n_classes)]
        lines = ["true\\pred\t" + "\t".join(names)]
        lines += [names[i] + "\t" + "\t".join(str(v) for v in row) for i, row in enumerate(cm)]
        lines.append(f"accuracy\t{acc!r}")
        _report(args, "\n".join(lines) + "\n")
    print(f"-> {out}")


def cmd_collect_bn(args) -> None:
    base = load_base(_path(args, "base", "base_path"))
    table = ex.collect_table(base, load_corpus(_path(args, "train_corpus")), args.N, args.n)
    out = Path(args.out) if args.out else _path(args, "table")
    save_table(out, table)
    print(f"{len(table)} BN table entries -> {out}")


def _pipeline(args, base, table):
    eps = load_spectrum(_path(args, "eps", "eps_path"))
    return AdaptivePipeline(eps, det.load_detector(_path(args, "detector", "detector_path")),
                            base, table, args.mode)


def cmd_eval(args) -> None:
    base = load_base(_path(args, "base", "base_path"))
    corpus = load_corpus(_path(args, "test_corpus"))
    if args.model == "base":
        model = base
    else:
        model = _pipeline(args, base, load_table(_path(args, "table", "table_path")))
    _report(args, H.eval_per_corruption(model, corpus).to_tsv())


def cmd_gain_matrix(args) -> None:
    base = load_base(_path(args, "base", "base_path"))
    table = load_table(_path(args, "table", "table_path"))
    _report(args, H.gain_matrix(base, table, load_corpus(_path(args, "test_corpus"))).to_tsv())


def cmd_stream(args) -> None:
    base = load_base(_path(args, "base", "base_path"))
    table = load_table(_path(args, "table", "table_path"))
    cfg = H.StreamConfig(batch_size=args.batch_size, periods=args.periods, seed=args.seed,
                         policies=tuple(args.policies), window=args.window,
                         online_blend=args.blend, detect_mode=args.mode,
                         total_batches=args.total_batches)
    pipe = _pipeline(args, base, table) if "adaptive_lookup" in cfg.policies else None
    print(H.STREAM_HEADER)
    rows = H.stream_eval(cfg, base, table, pipe, load_corpus(_path(args, "test_corpus")), log=print)
    if args.report:
        _write_text(args.report, H.stream_tsv(rows))


def cmd_export_spectra(args) -> None:
    eps = load_spectrum(_path(args, "eps", "eps_path"))
    corpus = load_corpus(_path(args, "test_corpus"))
    grids = mean_corruption_spectrum(corpus, eps)
    names = {c: CorruptionLabel(c).slug for c in grids}
    for p in export_spectra(args.out or Path(args.data) / "spectra", grids, names):
        print(p)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from e
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--data", default="data", help="dataset and artifact directory")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--base", dest="base_path")
    models.add_argument("--table", dest="table_path")
    models.add_argument("--detector", dest="detector_path")
    models.add_argument("--eps", dest="eps_path")
    models.add_argument("--mode", choices=MODES, default="per_image")
    models.add_argument("--report", default=None, help="write the TSV table here too")

    p = argparse.ArgumentParser(prog="dynbn", description="Corruption-aware BN statistics swapping.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    s.add_argument("--n", type=int, default=6000)
    s.add_argument("--n-test", type=int, default=None)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("corrupt", parents=[common], help="build corrupted train/test corpora")
    s.add_argument("--per-cell", type=int, default=100)
    s.add_argument("--test-per-cell", type=int, default=100)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("eps", parents=[common], help="mean natural amplitude spectrum")
    s.set_defaults(func=cmd_eps)

    s = sub.add_parser("train-base", parents=[common], help="train the base classifier")
    s.add_argument("--epochs", type=int, default=8)
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("train-detector", parents=[common], help="train the corruption detector")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--eps", dest="eps_path")
    s.add_argument("--features", choices=("spectrum", "pixels"), default="spectrum")
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_train_detector)

    s = sub.add_parser("collect-bn", parents=[common], help="estimate the BN statistics table")
    s.add_argument("--base", dest="base_path")
    s.add_argument("--N", type=float, default=1.0, help="weight of the natural statistics")
    s.add_argument("--n", type=float, default=1.0, help="weight of the corrupted statistics")
    s.set_defaults(func=cmd_collect_bn)

    s = sub.add_parser("eval", parents=[common, models], help="per-corruption error table")
    s.add_argument("--model", choices=("pipeline", "base"), default="pipeline")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gain-matrix", parents=[common, models], help="cross-corruption gain matrix")
    s.set_defaults(func=cmd_gain_matrix)

    s = sub.add_parser("stream", parents=[common, models], help="streaming policy comparison")
    s.add_argument("--periods", type=_int_list, default=H.PERIODS)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--blend", type=float, default=0.0)
    s.add_argument("--total-batches", type=int, default=None)
    s.add_argument("--policies", type=lambda t: t.split(","), default=list(H.POLICIES))
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("export-spectra", parents=[common, models], help="write mean spectra as PGM")
    s.set_defaults(func=cmd_export_spectra)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    resolved = {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + json.dumps(resolved, default=str))
    print(f"seed: {args.seed}")
    try:
        np.seterr(all="ignore")
        args.func(args)
    except Exception as e:  # runtime failures map to exit code 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
