"""Command-line front end: generate | build-dicts | train | eval | ablate | ood.

Every command writes its artifact plus a ``<artifact>.manifest.json``
recording the resolved config, seed, and content hashes of its inputs, so
identical manifests imply byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import evaluate as ev
from .data import ScmConfig, generate_scm, load_dataset, save_dataset, split
from .dictionaries import load_confounder_dict  # noqa: F401  (re-export for scripts)
from .errors import ConfigError, DcanError, PrerequisiteError
from .model import (
    DictionaryBank,
    TrainConfig,
    build_dictionary_bank,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

log = logging.getLogger("dcan")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path, command, config: dict, seed: int, inputs: list):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    with open(str(out_path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _require(path, step: str):
    if path is None or not os.path.exists(path):
        raise PrerequisiteError(f"missing artifact {path!r}; run `dcan {step}` first")
    return path


def _seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in config:
        return int(config["seed"])
    raise ConfigError("a seed is required (--seed or `seed` in the config)")


def _train_config(config: dict, seed: int, **overrides) -> TrainConfig:
    fields = dict(config.get("train", {}))
    fields.update(overrides)
    fields["seed"] = seed
    return TrainConfig(**fields)


def _splits(ds, config: dict, seed: int):
    sec = config.get("split", {})
    strategy = sec.get("strategy", "random")
    fractions = tuple(sec.get("fractions", (0.8, 0.1, 0.1)))
    return split(ds, strategy, seed=seed, fractions=fractions)


def _dict_sizes(config: dict) -> dict:
    sec = config.get("dicts", {})
    allowed = {"m_size", "n_size", "beta", "k_text", "theta"}
    return {k: v for k, v in sec.items() if k in allowed}


def _bank_and_model(ds, config, seed, use_bacl=None, use_facl=None):
    train_ds, val_ds, test_ds = _splits(ds, config, seed)
    overrides = {}
    if use_bacl is not None:
        overrides["use_bacl"] = use_bacl
    if use_facl is not None:
        overrides["use_facl"] = use_facl
    cfg = _train_config(config, seed, **overrides)
    dims = {"v": ds.header.d_v, "a": ds.header.d_a, "t": ds.header.d_t}
    model = init_params(dims, ds.header.k_traits, cfg)
    bank = build_dictionary_bank(model, train_ds, seed=seed, **_dict_sizes(config))
    return (train_ds, val_ds, test_ds), cfg, model, bank


def cmd_generate(args):
    config = _load_config(args.config)
    seed = _seed(args, config)
    scm_fields = dict(config.get("scm", {}))
    scm_fields["seed"] = seed
    cfg = ScmConfig(**scm_fields)
    cfg.validate()
    ds = generate_scm(cfg)
    save_dataset(ds, args.out)
    _write_manifest(args.out, "generate", {"scm": cfg.__dict__}, seed, [args.config] if args.config else [])
    log.info("wrote %d samples to %s", len(ds), args.out)


def _save_bank(bank: DictionaryBank, path):
    rec = {
        "source": bank.source,
        "back": {
            m: {
                "modality": d.modality,
                "beta": d.beta,
                "index_map": [[list(k), v] for k, v in d.index_map.items()] if d.index_map else None,
                "prototypes": d.prototypes.tolist(),
                "counts": d.counts.tolist(),
            }
            for m, d in bank.back.items()
        },
        "front": {
            m: {"mediator": d.mediator.tolist(), "global": d.global_.tolist()}
            for m, d in bank.front.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)


def cmd_build_dicts(args):
    config = _load_config(args.config)
    seed = _seed(args, config)
    ds = load_dataset(_require(args.dataset, "generate"))
    _, _, _, bank = _bank_and_model(ds, config, seed)
    _save_bank(bank, args.out)
    _write_manifest(args.out, "build-dicts", config, seed, [p for p in (args.config, args.dataset) if p])
    log.info("wrote dictionary bank to %s", args.out)


def cmd_train(args):
    config = _load_config(args.config)
    seed = _seed(args, config)
    ds = load_dataset(_require(args.dataset, "generate"))
    if args.dicts:
        _require(args.dicts, "build-dicts")
    splits, cfg, model, bank = _bank_and_model(ds, config, seed)
    model, history = train(splits[0], splits[1], cfg, bank, model)
    save_checkpoint(model, cfg, bank, args.out, rng_state=history.pop("rng_state"), history=history)
    _write_manifest(args.out, "train", config, seed, [p for p in (args.config, args.dataset, args.dicts) if p])
    log.info("final train loss %.5f", history["train_loss"][-1])


def cmd_eval(args):
    config = _load_config(args.config)
    seed = _seed(args, config)
    ds = load_dataset(_require(args.dataset, "generate"))
    _require(args.checkpoint, "train")
    model, cfg, dict_source = load_checkpoint(args.checkpoint)
    splits, _, _, bank = _bank_and_model(ds, config, seed, model.use_bacl, model.use_facl)
    if bank.source != dict_source:
        raise PrerequisiteError("checkpoint was trained on a different training split")
    test_ds = splits[2]
    y_hat = predict(model, bank, test_ds)
    tau = config.get("eval", {}).get("tau", 0.5)
    report = ev.fairness_report(y_hat, test_ds, tau=tau)
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    csv_path = str(args.out) + ".groups.csv"
    with open(csv_path, "w") as fh:
        fh.write("attribute,group,size,mean_prediction\n")
        groups_written = []
        for attr, sizes in report.group_sizes.items():
            values = np.array([getattr(s.demo, attr) for s in test_ds.samples])
            for g, size in sizes.items():
                mean_pred = float(y_hat[values == g].mean())
                fh.write(f"{attr},{g},{size},{mean_pred!r}\n")
                groups_written.append((attr, g))
    print(report.to_text())
    _write_manifest(args.out, "eval", config, seed, [p for p in (args.config, args.dataset, args.checkpoint) if p])
    log.info("wrote report to %s and %s", args.out, csv_path)


def cmd_ablate(args):
    config = _load_config(args.config)
    seed = _seed(args, config)
    ds = load_dataset(_require(args.dataset, "generate"))
    splits = _splits(ds, config, seed)
    cfg = _train_config(config, seed)
    rows = ev.run_ablation(splits, cfg, tau=config.get("eval", {}).get("tau", 0.5), dict_sizes=_dict_sizes(config))
    with open(args.out, "w") as fh:
        json.dump(rows, fh, indent=2)
    _write_manifest(args.out, "ablate", config, seed, [p for p in (args.config, args.dataset) if p])
    for row in rows:
        log.info("%s: acc=%.4f dp=%.4f", row["variant"], row["acc"], row["dp_overall"] or float("nan"))


def cmd_ood(args):
    config = _load_config(args.config)
    seed = _seed(args, config)
    ds = load_dataset(_require(args.dataset, "generate"))
    cfg = _train_config(config, seed)
    result = ev.run_ood(ds, cfg, args.strategy, tau=config.get("eval", {}).get("tau", 0.5), dict_sizes=_dict_sizes(config))
    with open(args.out, "w") as fh:
        json.dump(result, fh, indent=2)
    _write_manifest(args.out, "ood", config, seed, [p for p in (args.config, args.dataset) if p])
    log.info("ood %s: overall acc %.4f", args.strategy, result["overall_acc"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, checkpoint=False, dicts=False):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output artifact path")
        if dataset:
            p.add_argument("--dataset", required=True, help="JSON-lines dataset")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint JSON from `dcan train`")
        if dicts:
            p.add_argument("--dicts", help="dictionary bank JSON from `dcan build-dicts`")

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    common(sub.add_parser("build-dicts", help="build confounder dictionaries"), dataset=True)
    common(sub.add_parser("train", help="train a model"), dataset=True, dicts=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"), dataset=True, checkpoint=True)
    common(sub.add_parser("ablate", help="run the four-variant ablation"), dataset=True)
    p_ood = sub.add_parser("ood", help="train/evaluate one OOD split")
    common(p_ood, dataset=True)
    p_ood.add_argument("--strategy", required=True, choices=["ood_gender", "ood_age", "ood_race"])
    return parser


HANDLERS = {
    "generate": cmd_generate,
    "build-dicts": cmd_build_dicts,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "ood": cmd_ood,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DCAN_LOG", "INFO").upper())
    args = build_parser().parse_args(argv)
    try:
        HANDLERS[args.command](args)
    except DcanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
