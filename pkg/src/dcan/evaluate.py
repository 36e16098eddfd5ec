"""Accuracy and fairness metrics plus the ablation and OOD harnesses.

Undefined metrics (zero variance, empty groups, no positives) raise
:class:`UndefinedMetricError` and are reported as explicit "n/a" entries
with a reason, never as silent zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, split
from .errors import UndefinedMetricError
from .model import (
    TrainConfig,
    build_dictionary_bank,
    evaluate_loss,
    init_params,
    predict,
    train,
)

ABLATION_VARIANTS = (
    ("full", True, True),
    ("no_bacl", False, True),
    ("no_facl", True, False),
    ("no_bacl_no_facl", False, False),
)


# ---------------------------------------------------------------------------
# Accuracy metrics


def acc(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Inverse mean absolute error: 1 - mean|error| over samples and traits."""
    y_hat, y = np.asarray(y_hat), np.asarray(y)
    if y_hat.size == 0:
        raise UndefinedMetricError("accuracy of an empty prediction set")
    return float(1.0 - np.abs(y_hat - y).mean())


def pcc(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    if a.size < 2:
        raise UndefinedMetricError("pcc needs at least 2 points")
    da, db = a - a.mean(), b - b.mean()
    va, vb = (da * da).sum(), (db * db).sum()
    if va == 0.0 or vb == 0.0:
        raise UndefinedMetricError("pcc undefined: zero variance")
    return float((da * db).sum() / np.sqrt(va * vb))


def ccc(a: np.ndarray, b: np.ndarray) -> float:
    """Concordance correlation with population (biased) variances."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    if a.size < 2:
        raise UndefinedMetricError("ccc needs at least 2 points")
    va, vb = a.var(), b.var()
    if va == 0.0 or vb == 0.0:
        raise UndefinedMetricError("ccc undefined: zero variance")
    cov = ((a - a.mean()) * (b - b.mean())).mean()
    return float(2.0 * cov / (va + vb + (a.mean() - b.mean()) ** 2))


def r2(y_hat: np.ndarray, y: np.ndarray) -> float:
    y_hat, y = np.asarray(y_hat, float).ravel(), np.asarray(y, float).ravel()
    sst = ((y - y.mean()) ** 2).sum()
    if sst == 0.0:
        raise UndefinedMetricError("r2 undefined: zero label variance")
    sse = ((y - y_hat) ** 2).sum()
    return float(1.0 - sse / sst)


# ---------------------------------------------------------------------------
# Fairness metrics


def _group_pairs(groups: np.ndarray, pair):
    values = sorted(set(int(g) for g in groups))
    if pair is not None:
        return [tuple(pair)]
    return [(a, b) for i, a in enumerate(values) for b in values[i + 1 :]]


def dp(y_hat: np.ndarray, groups: np.ndarray, pair=None) -> float:
    """Absolute mean-prediction gap between groups.

    Multi-trait predictions are averaged per trait then over traits; with
    more than two groups the maximum pairwise gap is reported.
    """
    y_hat = np.atleast_2d(np.asarray(y_hat, float).T).T  # (n,) -> (n, 1)
    groups = np.asarray(groups)
    worst = None
    for a, b in _group_pairs(groups, pair):
        mask_a, mask_b = groups == a, groups == b
        if not mask_a.any():
            raise UndefinedMetricError(f"dp undefined: group {a} is empty")
        if not mask_b.any():
            raise UndefinedMetricError(f"dp undefined: group {b} is empty")
        gap = float(np.mean(np.abs(y_hat[mask_a].mean(axis=0) - y_hat[mask_b].mean(axis=0))))
        worst = gap if worst is None else max(worst, gap)
    if worst is None:
        raise UndefinedMetricError("dp undefined: fewer than two groups present")
    return worst


def eo(y_hat: np.ndarray, y: np.ndarray, groups: np.ndarray, pair=None, tau: float = 0.5) -> float:
    """DP restricted to ground-truth positives (label >= tau), per trait."""
    y_hat = np.atleast_2d(np.asarray(y_hat, float).T).T
    y = np.atleast_2d(np.asarray(y, float).T).T
    groups = np.asarray(groups)
    worst = None
    for a, b in _group_pairs(groups, pair):
        trait_gaps = []
        for k in range(y.shape[1]):
            pos = y[:, k] >= tau
            sel_a = pos & (groups == a)
            sel_b = pos & (groups == b)
            if not sel_a.any():
                raise UndefinedMetricError(f"eo undefined: no positives in group {a} for trait {k}")
            if not sel_b.any():
                raise UndefinedMetricError(f"eo undefined: no positives in group {b} for trait {k}")
            trait_gaps.append(abs(y_hat[sel_a, k].mean() - y_hat[sel_b, k].mean()))
        gap = float(np.mean(trait_gaps))
        worst = gap if worst is None else max(worst, gap)
    if worst is None:
        raise UndefinedMetricError("eo undefined: fewer than two groups present")
    return worst


# ---------------------------------------------------------------------------
# Report


@dataclass
class FairnessReport:
    accuracy: dict  # {"acc": .., "pcc": .., "ccc": .., "r2": ..}
    per_trait: dict  # trait index -> accuracy dict
    fairness: dict  # attribute -> {"dp": value|None, "eo": ..., "reason": ...}
    overall: dict  # {"dp": mean over defined attributes, "eo": ...}
    group_sizes: dict  # attribute -> {group: count}
    meta: dict

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_trait": self.per_trait,
            "fairness": self.fairness,
            "overall": self.overall,
            "group_sizes": self.group_sizes,
            "meta": self.meta,
        }

    def to_text(self) -> str:
        lines = ["metric        value", "------------  ------"]
        for k, v in self.accuracy.items():
            lines.append(f"{k:<12}  {v:.4f}" if v is not None else f"{k:<12}  n/a")
        for attr, rec in self.fairness.items():
            for m in ("dp", "eo"):
                v = rec.get(m)
                label = f"{m}[{attr}]"
                if v is None:
                    lines.append(f"{label:<12}  n/a ({rec.get(m + '_reason', '')})")
                else:
                    lines.append(f"{label:<12}  {v:.4f}")
        for m in ("dp", "eo"):
            v = self.overall.get(m)
            lines.append(f"{m}[overall]   {v:.4f}" if v is not None else f"{m}[overall]   n/a")
        return "\n".join(lines)


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw), None
    except UndefinedMetricError as exc:
        return None, str(exc)


def fairness_report(y_hat: np.ndarray, ds: Dataset, tau: float = 0.5) -> FairnessReport:
    """Full accuracy + fairness block for predictions on a dataset.

    DP/EO are computed per trait then averaged, and per attribute reduced
    by maximum pairwise disparity; both conventions are flagged in meta.
    """
    y = ds.labels()
    attrs = ["gender", "age"] + (["race"] if ds.header.has_race() else [])
    accuracy = {}
    for name, fn, args in (
        ("acc", acc, (y_hat, y)),
        ("pcc", pcc, (y_hat, y)),
        ("ccc", ccc, (y_hat, y)),
        ("r2", r2, (y_hat, y)),
    ):
        accuracy[name], _ = _safe(fn, *args)
    per_trait = {}
    for k in range(ds.header.k_traits):
        per_trait[k] = {
            "acc": _safe(acc, y_hat[:, k], y[:, k])[0],
            "pcc": _safe(pcc, y_hat[:, k], y[:, k])[0],
        }
    fairness = {}
    group_sizes = {}
    for attr in attrs:
        groups = np.array([getattr(s.demo, attr) for s in ds.samples])
        vals, counts = np.unique(groups, return_counts=True)
        group_sizes[attr] = {int(v): int(c) for v, c in zip(vals, counts)}
        dp_val, dp_reason = _safe(dp, y_hat, groups)
        eo_val, eo_reason = _safe(eo, y_hat, y, groups, tau=tau)
        rec = {"dp": dp_val, "eo": eo_val}
        if dp_reason:
            rec["dp_reason"] = dp_reason
        if eo_reason:
            rec["eo_reason"] = eo_reason
        fairness[attr] = rec
    overall = {}
    for m in ("dp", "eo"):
        defined = [rec[m] for rec in fairness.values() if rec[m] is not None]
        overall[m] = float(np.mean(defined)) if defined else None
    meta = {"tau": tau, "dp_eo_reduction": "per-trait mean, max over group pairs"}
    return FairnessReport(accuracy, per_trait, fairness, overall, group_sizes, meta)


# ---------------------------------------------------------------------------
# Harnesses


def _train_variant(splits, cfg: TrainConfig, use_bacl: bool, use_facl: bool, dict_sizes=None):
    train_ds, val_ds, test_ds = splits
    vcfg = TrainConfig(**{**cfg.__dict__, "use_bacl": use_bacl, "use_facl": use_facl})
    dims = {"v": train_ds.header.d_v, "a": train_ds.header.d_a, "t": train_ds.header.d_t}
    model = init_params(dims, train_ds.header.k_traits, vcfg)
    sizes = dict_sizes or {}
    bank = build_dictionary_bank(model, train_ds, seed=vcfg.seed, **sizes)
    model, history = train(train_ds, val_ds, vcfg, bank, model)
    return model, bank, history


def run_ablation(splits, cfg: TrainConfig, tau: float = 0.5, dict_sizes=None) -> list[dict]:
    """Train the four causal-module variants under identical seeds.

    Returns one row per variant with accuracy, fairness, and test MSE.
    """
    _, _, test_ds = splits
    rows = []
    for name, use_bacl, use_facl in ABLATION_VARIANTS:
        model, bank, history = _train_variant(splits, cfg, use_bacl, use_facl, dict_sizes)
        y_hat = predict(model, bank, test_ds)
        report = fairness_report(y_hat, test_ds, tau=tau)
        rows.append(
            {
                "variant": name,
                "use_bacl": use_bacl,
                "use_facl": use_facl,
                "test_mse": evaluate_loss(model, bank, test_ds),
                "final_train_loss": history["train_loss"][-1],
                **report.accuracy,
                "dp_overall": report.overall["dp"],
                "eo_overall": report.overall["eo"],
            }
        )
    return rows


def run_ood(ds: Dataset, cfg: TrainConfig, strategy: str, tau: float = 0.5, dict_sizes=None) -> dict:
    """Train on the majority group, evaluate per-trait accuracy on the
    held-out group."""
    splits = split(ds, strategy, seed=cfg.seed)
    model, bank, _ = _train_variant(splits, cfg, cfg.use_bacl, cfg.use_facl, dict_sizes)
    test_ds = splits[2]
    y_hat = predict(model, bank, test_ds)
    report = fairness_report(y_hat, test_ds, tau=tau)
    return {
        "strategy": strategy,
        "split_sizes": {"train": len(splits[0]), "val": len(splits[1]), "test": len(test_ds)},
        "per_trait_acc": {k: rec["acc"] for k, rec in report.per_trait.items()},
        "overall_acc": report.accuracy["acc"],
    }
