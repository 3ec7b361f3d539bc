"""Backward-compatible embedding training, feature extraction and retrieval evaluation.

Exit codes: 0 success, 2 config/usage error, 3 data/parse error, 4 numeric failure.
"""
import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import datagen, experiment, retrieval, trainer
from .config import load_config
from .exceptions import ConfigError, NumericError, ParseError, StructuralError, UsageError
from .losses import MODES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seeds(cfg, args):
    seeds = args.seeds or list(cfg.seeds)
    unknown = [s for s in seeds if s < 0]
    if unknown:
        raise ConfigError("--seeds", f"seeds must be non-negative, got {unknown}")
    return seeds


def _map(fn, seeds, jobs):
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


class _Bound:
    """Picklable ``fn(cfg, seed, ...)`` adaptor for process pools."""

    def __init__(self, fn, cfg, **kwargs):
        self.fn, self.cfg, self.kwargs = fn, cfg, kwargs

    def __call__(self, seed):
        return self.fn(self.cfg, seed, **self.kwargs)


def cmd_gen_data(args):
    cfg = load_config(args.config)
    for seed in _seeds(cfg, args):
        for path in experiment.gen_data(cfg, seed):
            print(f"{path}  sha256={experiment.sha256_file(path)}")


def cmd_train(args):
    cfg = load_config(args.config)
    mode = args.mode or cfg.train.mode
    seeds = _seeds(cfg, args)
    for seed in seeds:
        cfg.train_config(seed, mode=mode)
    fn = _Bound(experiment.train, cfg, role=args.role, mode=mode, config_path=args.config)
    for path in _map(fn, seeds, args.jobs):
        print(f"{path}  sha256={experiment.sha256_file(path)}")


def cmd_extract(args):
    bundle = trainer.load_bundle(args.checkpoint)
    data = datagen.load_dataset(args.data)
    tag = Path(args.checkpoint).stem
    store = trainer.extract_features(bundle, data, args.part, tag=tag)
    retrieval.save_store(store, args.out)
    print(f"{args.out}  dim={store.dim}  records={len(store)}  sha256={experiment.sha256_file(args.out)}")


def cmd_eval(args):
    q = retrieval.load_store(args.query, tag=Path(args.query).stem)
    g = retrieval.load_store(args.gallery, tag=Path(args.gallery).stem)
    pad = args.pad or "none"
    if q.dim != g.dim:
        if args.pad is None:
            raise UsageError(
                f"query dim {q.dim} != gallery dim {g.dim}; pass --pad zero or --pad truncate"
            )
        q, g = retrieval.equalize_dims(q, g, args.pad)
    report = retrieval.evaluate(q, g, not args.no_self_exclusion, args.k, pad).as_dict()
    report["cmc"] = {str(k): v for k, v in report["cmc"].items()}
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{report['query_model']}/{report['gallery_model']}  mAP@1.0={report['map_at_1']:.4f}  CMC-1={report['cmc_1']:.4f}")


def cmd_compat_report(args):
    cfg = load_config(args.config)
    mode = args.mode or cfg.train.mode
    reports = [
        experiment.compat_report(cfg, seed, mode, config_path=args.config) for seed in _seeds(cfg, args)
    ]
    summary = experiment.aggregate(cfg, reports, mode)
    print(experiment.format_summary(summary))


def cmd_run(args):
    cfg = load_config(args.config)
    mode = args.mode or cfg.train.mode
    seeds = _seeds(cfg, args)
    for seed in seeds:
        cfg.train_config(seed, mode=mode)
    fn = _Bound(experiment.run_all, cfg, mode=mode, config_path=args.config)
    reports = _map(fn, seeds, args.jobs)
    summary = experiment.aggregate(cfg, reports, mode)
    print(experiment.format_summary(summary))


def build_parser():
    parser = argparse.ArgumentParser(prog="ocacompat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, seeds=True):
        p.add_argument("--config", required=True)
        if seeds:
            p.add_argument("--seeds", type=_seed_list, help="comma-separated override of experiment.seeds")

    p = sub.add_parser("gen-data", help="write train/eval datasets")
    with_config(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the old model or a new model")
    with_config(p)
    p.add_argument("--role", choices=("old", "new"), required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write a feature store for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--part", choices=("full", "bct"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="mAP@1.0 / CMC of a query store against a gallery store")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--pad", choices=retrieval.PADDING_MODES)
    p.add_argument("--no-self-exclusion", action="store_true")
    p.add_argument("--k", type=_seed_list, default=[1, 5, 10], help="CMC ranks, comma-separated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compat-report", help="compatibility report over all seeds")
    with_config(p)
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_compat_report)

    p = sub.add_parser("run", help="gen-data, train old/new/independent and report, per seed")
    with_config(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, UsageError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
