"""File-backed pipeline behind the CLI: one directory per seed.

Layout under ``<output_dir>/seed_<s>/``::

    train.data  eval.data            datasets
    old.ckpt  prototypes.json        old model and its class means
    new_<mode>.ckpt                  updated models (independent included)
    stores/*.ocaf                    eval-set feature stores
    report_<mode>.json               per-seed compatibility report
"""
import hashlib
import json
from dataclasses import replace

import numpy as np

from . import datagen, retrieval, trainer
from .exceptions import UsageError

CASES = (
    # name, query model, gallery model, padding mode
    ("old/old", "old", "old", "none"),
    ("new/old", "new", "old", "zero"),
    ("new/old[truncate]", "new", "old", "truncate"),
    ("new/new", "new", "new", "none"),
    ("independent/old", "independent", "old", "zero"),
    ("independent/independent", "independent", "independent", "none"),
)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class SeedLayout:
    def __init__(self, cfg, seed):
        self.seed = seed
        self.root = cfg.seed_dir(seed)
        self.train_data = self.root / "train.data"
        self.eval_data = self.root / "eval.data"
        self.old_ckpt = self.root / "old.ckpt"
        self.prototypes = self.root / "prototypes.json"
        self.stores = self.root / "stores"

    def new_ckpt(self, mode):
        return self.root / f"new_{mode}.ckpt"

    def store(self, name):
        return self.stores / f"{name}.ocaf"

    def report(self, mode):
        return self.root / f"report_{mode}.json"


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def gen_data(cfg, seed):
    lay = SeedLayout(cfg, seed)
    d = cfg.data
    train, evaluation = datagen.gen_synthetic(
        d.num_classes, d.per_class_train, d.per_class_eval, d.input_dim,
        d.class_separation, d.noise_sigma, seed,
    )
    lay.root.mkdir(parents=True, exist_ok=True)
    datagen.save_dataset(train, lay.train_data)
    datagen.save_dataset(evaluation, lay.eval_data)
    return [lay.train_data, lay.eval_data]


def _require(paths):
    missing = [(p, hint) for p, hint in paths if not p.exists()]
    if missing:
        lines = "\n".join(f"  {p}  (run: {hint})" for p, hint in missing)
        raise UsageError(f"missing artifacts:\n{lines}")


def _manifest(cfg, seed, role, mode, bundle):
    run_id = f"{cfg.hash}-s{seed}-{role}-{mode}"
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    trainer.append_manifest(
        cfg.output_dir / "manifest.log", run_id, cfg.hash, seed, bundle.history[-1]
    )
    return run_id


def train(cfg, seed, role, mode=None, config_path="CONFIG"):
    """Train and checkpoint the old model or a new model; returns the checkpoint path."""
    lay = SeedLayout(cfg, seed)
    mode = mode or cfg.train.mode
    tcfg = cfg.train_config(seed, mode=mode)
    _require([(lay.train_data, f"ocacompat gen-data --config {config_path}")])
    train_set = datagen.load_dataset(lay.train_data)
    if role == "old":
        bundle = trainer.train_old(tcfg, datagen.restrict_classes(train_set, cfg.data.old_classes))
        trainer.save_bundle(bundle, lay.old_ckpt)
        _manifest(cfg, seed, "old", "independent", bundle)
        return lay.old_ckpt

    _require([(lay.old_ckpt, f"ocacompat train --config {config_path} --role old")])
    old = trainer.load_bundle(lay.old_ckpt)
    if lay.prototypes.exists():
        protos = trainer.load_prototypes(lay.prototypes)
    else:
        protos = trainer.compute_prototypes(old, train_set)
        trainer.save_prototypes(protos, lay.prototypes)
    bundle = trainer.train_new(tcfg, train_set, protos, old_bundle=old)
    path = lay.new_ckpt(mode)
    trainer.save_bundle(bundle, path)
    _manifest(cfg, seed, "new", mode, bundle)
    return path


def _model_part(bundle):
    return "full" if bundle.embedding_dim > bundle.d_old else "bct"


def compat_report(cfg, seed, mode=None, config_path="CONFIG"):
    """Evaluate the query/gallery cases for one seed and write ``report_<mode>.json``."""
    lay = SeedLayout(cfg, seed)
    mode = mode or cfg.train.mode
    _require([
        (lay.eval_data, f"ocacompat gen-data --config {config_path}"),
        (lay.old_ckpt, f"ocacompat train --config {config_path} --role old"),
        (lay.new_ckpt(mode), f"ocacompat train --config {config_path} --role new --mode {mode}"),
        (lay.new_ckpt("independent"),
         f"ocacompat train --config {config_path} --role new --mode independent"),
    ])
    evaluation = datagen.load_dataset(lay.eval_data)
    bundles = {
        "old": trainer.load_bundle(lay.old_ckpt),
        "new": trainer.load_bundle(lay.new_ckpt(mode)),
        "independent": trainer.load_bundle(lay.new_ckpt("independent")),
    }
    lay.stores.mkdir(parents=True, exist_ok=True)
    stores, parts = {}, {}
    for name, bundle in bundles.items():
        parts[name] = _model_part(bundle)
        file_name = "old" if name == "old" else f"new_{bundle.config.mode}"
        store = trainer.extract_features(bundle, evaluation, parts[name], tag=file_name)
        retrieval.save_store(store, lay.store(file_name))
        # Evaluate what was written, so reports derive from the stored float32 values.
        stores[name] = retrieval.load_store(lay.store(file_name), tag=file_name)

    ev = cfg.eval
    cases = {}
    for case, q_name, g_name, pad in CASES:
        q, g = stores[q_name], stores[g_name]
        if pad != "none":
            q, g = retrieval.equalize_dims(q, g, pad)
        rep = retrieval.evaluate(
            q, g, ev.self_exclusion, ev.cmc_k, pad, q.tag, g.tag
        ).as_dict()
        rep["cmc"] = {str(k): v for k, v in rep["cmc"].items()}
        rep["query_part"] = parts[q_name]
        rep["gallery_part"] = parts[g_name]
        cases[case] = rep

    primary = "new/old" if ev.padding_mode == "zero" else "new/old[truncate]"
    old_pad, new_pad = retrieval.equalize_dims(stores["old"], stores["new"], "zero")
    d1 = retrieval.def1_check(old_pad, new_pad, ev.def1_sample_cap, seed)
    m_self = cases["old/old"]["map_at_1"]
    report = {
        "config_hash": cfg.hash,
        "seed": seed,
        "mode": mode,
        "convention": "query/gallery",
        "cases": cases,
        "compat": {
            "metric": "map_at_1",
            "cross_case": primary,
            "m_cross": cases[primary]["map_at_1"],
            "m_self_old": m_self,
            "ecc_holds": retrieval.ecc_check(cases[primary]["map_at_1"], m_self),
            "ecc_holds_cmc_1": retrieval.ecc_check(
                cases[primary]["cmc_1"], cases["old/old"]["cmc_1"]
            ),
            "same_class_pairs_ok_fraction": d1.same_class_pairs_ok_fraction,
            "diff_class_pairs_ok_fraction": d1.diff_class_pairs_ok_fraction,
            "def1_same_class_pairs": d1.same_class_pairs,
            "def1_diff_class_pairs": d1.diff_class_pairs,
            "def1_sampled": d1.sampled,
        },
        "independent_compat": {
            "m_cross": cases["independent/old"]["map_at_1"],
            "m_self_old": m_self,
            "ecc_holds": retrieval.ecc_check(cases["independent/old"]["map_at_1"], m_self),
        },
    }
    _dump_json(report, lay.report(mode))
    return report


def aggregate(cfg, reports, mode=None):
    """Per-seed values and means over seeds; written to ``compat_report_<mode>.json``."""
    mode = mode or cfg.train.mode
    means = {}
    for case in reports[0]["cases"]:
        means[case] = {
            key: float(np.mean([r["cases"][case][key] for r in reports]))
            for key in ("map_at_1", "cmc_1")
        }
    summary = {
        "config_hash": cfg.hash,
        "mode": mode,
        "convention": "query/gallery",
        "seeds": [r["seed"] for r in reports],
        "mean": means,
        "ecc_holds_every_seed": all(r["compat"]["ecc_holds"] for r in reports),
        "independent_ecc_holds_any_seed": any(r["independent_compat"]["ecc_holds"] for r in reports),
        "per_seed": reports,
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(summary, cfg.output_dir / f"compat_report_{mode}.json")
    return summary


def format_summary(summary):
    lines = [f"mode={summary['mode']}  config={summary['config_hash']}  seeds={summary['seeds']}"]
    lines.append(f"{'case (query/gallery)':<28}{'mAP@1.0':>10}{'CMC-1':>10}")
    for case, vals in summary["mean"].items():
        lines.append(f"{case:<28}{vals['map_at_1']:>10.4f}{vals['cmc_1']:>10.4f}")
    for r in summary["per_seed"]:
        c = r["compat"]
        lines.append(
            f"seed {r['seed']}: ECC {'holds' if c['ecc_holds'] else 'fails'} "
            f"({c['m_cross']:.4f} vs {c['m_self_old']:.4f}); "
            f"Def.1 same={c['same_class_pairs_ok_fraction']:.3f} diff={c['diff_class_pairs_ok_fraction']:.3f}; "
            f"independent ECC {'holds' if r['independent_compat']['ecc_holds'] else 'fails'}"
        )
    return "\n".join(lines)


def run_all(cfg, seed, mode=None, config_path="CONFIG"):
    """gen-data, both trainings, the independent reference, then the report."""
    mode = mode or cfg.train.mode
    gen_data(cfg, seed)
    train(cfg, seed, "old", config_path=config_path)
    train(cfg, seed, "new", mode, config_path=config_path)
    if mode != "independent":
        train(cfg, seed, "new", "independent", config_path=config_path)
    return compat_report(cfg, seed, mode, config_path=config_path)


def with_train_overrides(cfg, **overrides):
    return replace(cfg, train=replace(cfg.train, **overrides))
