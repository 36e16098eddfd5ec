"""Dataset representation, JSON-lines ingestion, synthetic generator, splits.

The synthetic generator draws samples from a structural causal model with
known ground-truth confounding: an observable demographic confounder feeds
both the modality features and the labels (weight ``rho_obs``), and a
latent per-sample scalar feeds both the features and the labels (weight
``rho_lat``). The true trait signal drives both features and labels, so a
model can succeed without either confounding shortcut.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError, FormatError

OOD_STRATEGIES = ("ood_gender", "ood_age", "ood_race")


@dataclass(frozen=True)
class Demographics:
    gender: int
    age: int
    race: int | None = None

    def key(self) -> tuple:
        return (self.gender, self.age, self.race)


@dataclass(eq=False)
class Sample:
    id: str
    feat_v: np.ndarray
    feat_a: np.ndarray
    feat_t: np.ndarray
    label: np.ndarray
    demo: Demographics
    tokens: list[str] | None = None


@dataclass
class Header:
    d_v: int
    d_a: int
    d_t: int
    k_traits: int
    cards: dict  # {"gender": n, "age": n, "race": n?}; race absent if unannotated

    def has_race(self) -> bool:
        return "race" in self.cards


@dataclass(eq=False)
class Dataset:
    header: Header
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.header, [self.samples[i] for i in indices])

    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples])

    def features(self, modality: str) -> np.ndarray:
        attr = {"v": "feat_v", "a": "feat_a", "t": "feat_t"}[modality]
        return np.stack([getattr(s, attr) for s in self.samples])


@dataclass
class ScmConfig:
    n_samples: int
    d_v: int = 16
    d_a: int = 12
    d_t: int = 16
    k_traits: int = 4
    n_gender: int = 2
    n_age: int = 3
    n_race: int | None = None
    rho_obs: float = 0.5
    rho_lat: float = 0.0
    seed: int = 0
    anti_correlate_test: bool = False
    test_fraction: float = 0.2

    def validate(self):
        if self.n_samples <= 0:
            raise ConfigError("n_samples must be positive")
        if not (0.0 <= self.rho_obs <= 1.0 and 0.0 <= self.rho_lat <= 1.0):
            raise ConfigError("confound strengths must lie in [0, 1]")
        if not (0.0 < self.test_fraction < 1.0):
            raise ConfigError("test_fraction must lie in (0, 1)")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def generate_scm(cfg: ScmConfig) -> Dataset:
    """Draw a dataset from the structural causal model described above.

    Deterministic given ``cfg.seed``. With ``anti_correlate_test``, the
    confounder-to-label coefficients (demographic and latent) are
    sign-flipped for the trailing ``test_fraction`` of samples, so a model
    that learned either shortcut fails on a tail split while a
    deconfounded one does not.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d_sig = 8
    K = cfg.k_traits
    dims = {"v": cfg.d_v, "a": cfg.d_a, "t": cfg.d_t}
    cards = {"gender": cfg.n_gender, "age": cfg.n_age}
    if cfg.n_race:
        cards["race"] = cfg.n_race

    # Fixed structural coefficients, drawn once per seed.
    mix = {m: rng.standard_normal((d, d_sig)) / np.sqrt(d_sig) for m, d in dims.items()}
    demo_emb = {
        m: {a: rng.standard_normal((n, d)) for a, n in cards.items()}
        for m, d in dims.items()
    }
    lat_dir = {m: rng.standard_normal(d) for m, d in dims.items()}
    w_label = rng.standard_normal((K, d_sig)) / np.sqrt(d_sig)
    # Gender carries a deliberately strong, sign-consistent label bias; the
    # other attributes get milder random ones.
    b_gender = np.repeat((np.arange(cfg.n_gender)[:, None] - (cfg.n_gender - 1) / 2) * 3.0, K, axis=1)
    b_age = rng.standard_normal((cfg.n_age, K)) * 0.5
    b_race = rng.standard_normal((cards["race"], K)) * 0.5 if cfg.n_race else None
    # The latent scalar is a confounder too: it shifts every trait's label
    # with a strong, sign-consistent coefficient.
    g_lat = np.full(K, 2.0)

    vocab_neutral = [f"w{i}" for i in range(40)]
    vocab_gender = {g: [f"g{g}w{j}" for j in range(5)] for g in range(cfg.n_gender)}

    n_flip = int(round(cfg.n_samples * cfg.test_fraction)) if cfg.anti_correlate_test else 0
    flip_start = cfg.n_samples - n_flip

    samples = []
    for i in range(cfg.n_samples):
        demo = Demographics(
            gender=int(rng.integers(cfg.n_gender)),
            age=int(rng.integers(cfg.n_age)),
            race=int(rng.integers(cfg.n_race)) if cfg.n_race else None,
        )
        s = rng.standard_normal(d_sig)
        c_u = rng.standard_normal()
        feats = {}
        for m, d in dims.items():
            e_o = demo_emb[m]["gender"][demo.gender] + demo_emb[m]["age"][demo.age]
            if cfg.n_race:
                e_o = e_o + demo_emb[m]["race"][demo.race]
            feats[m] = (
                mix[m] @ s
                + cfg.rho_obs * e_o
                + cfg.rho_lat * c_u * lat_dir[m]
                + 0.1 * rng.standard_normal(d)
            )
        b = b_gender[demo.gender] + b_age[demo.age]
        if b_race is not None:
            b = b + b_race[demo.race]
        g = g_lat
        if i >= flip_start:
            b, g = -b, -g
        label = _sigmoid(
            w_label @ s
            + cfg.rho_obs * b
            + cfg.rho_lat * c_u * g
            + 0.1 * rng.standard_normal(K)
        )
        label = np.clip(label, 0.0, 1.0)

        tokens = list(rng.choice(vocab_neutral, size=6))
        if rng.random() < 0.3 + 0.6 * cfg.rho_obs:
            tokens.append(str(rng.choice(vocab_gender[demo.gender])))
        samples.append(
            Sample(
                id=f"s{i:05d}",
                feat_v=feats["v"],
                feat_a=feats["a"],
                feat_t=feats["t"],
                label=label,
                demo=demo,
                tokens=[str(t) for t in tokens],
            )
        )

    header = Header(cfg.d_v, cfg.d_a, cfg.d_t, K, cards)
    return Dataset(header, samples)


# ---------------------------------------------------------------------------
# JSON-lines serialization


def save_dataset(ds: Dataset, path):
    with open(path, "w") as fh:
        head = {
            "dims": {"v": ds.header.d_v, "a": ds.header.d_a, "t": ds.header.d_t},
            "k_traits": ds.header.k_traits,
            "cards": ds.header.cards,
        }
        fh.write(json.dumps(head) + "\n")
        for s in ds.samples:
            demo = {"gender": s.demo.gender, "age": s.demo.age}
            if s.demo.race is not None:
                demo["race"] = s.demo.race
            rec = {
                "id": s.id,
                "v": s.feat_v.tolist(),
                "a": s.feat_a.tolist(),
                "t": s.feat_t.tolist(),
                "label": s.label.tolist(),
                "demo": demo,
            }
            if s.tokens is not None:
                rec["tokens"] = s.tokens
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    """Parse and validate a JSON-lines dataset; abort with the offending line."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        head = json.loads(lines[0])
        header = Header(
            d_v=int(head["dims"]["v"]),
            d_a=int(head["dims"]["a"]),
            d_t=int(head["dims"]["t"]),
            k_traits=int(head["k_traits"]),
            cards={k: int(v) for k, v in head["cards"].items()},
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}:1: bad header: {exc}") from exc

    samples = []
    ids = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            demo_rec = rec["demo"]
            demo = Demographics(
                gender=int(demo_rec["gender"]),
                age=int(demo_rec["age"]),
                race=int(demo_rec["race"]) if "race" in demo_rec else None,
            )
            sample = Sample(
                id=str(rec["id"]),
                feat_v=np.asarray(rec["v"], dtype=np.float64),
                feat_a=np.asarray(rec["a"], dtype=np.float64),
                feat_t=np.asarray(rec["t"], dtype=np.float64),
                label=np.asarray(rec["label"], dtype=np.float64),
                demo=demo,
                tokens=[str(t) for t in rec["tokens"]] if "tokens" in rec else None,
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed sample: {exc}") from exc

        _validate_sample(sample, header, f"{path}:{lineno}")
        if sample.id in ids:
            raise FormatError(f"{path}:{lineno}: duplicate id {sample.id!r}")
        ids.add(sample.id)
        samples.append(sample)
    return Dataset(header, samples)


def _validate_sample(s: Sample, header: Header, where: str):
    for name, arr, want in (
        ("v", s.feat_v, header.d_v),
        ("a", s.feat_a, header.d_a),
        ("t", s.feat_t, header.d_t),
        ("label", s.label, header.k_traits),
    ):
        if arr.shape != (want,):
            raise FormatError(f"{where}: field {name!r} has shape {arr.shape}, expected ({want},)")
    if np.any(s.label < 0.0) or np.any(s.label > 1.0):
        raise FormatError(f"{where}: label values outside [0, 1]")
    for attr in ("gender", "age"):
        idx = getattr(s.demo, attr)
        if not 0 <= idx < header.cards[attr]:
            raise FormatError(f"{where}: {attr} index {idx} outside cardinality {header.cards[attr]}")
    if s.demo.race is not None:
        if "race" not in header.cards:
            raise FormatError(f"{where}: race annotated but header declares no race cardinality")
        if not 0 <= s.demo.race < header.cards["race"]:
            raise FormatError(f"{where}: race index {s.demo.race} outside cardinality {header.cards['race']}")


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.header != b.header or len(a) != len(b):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.id != sb.id or sa.demo != sb.demo or sa.tokens != sb.tokens:
            return False
        for fa, fb in ((sa.feat_v, sb.feat_v), (sa.feat_a, sb.feat_a), (sa.feat_t, sb.feat_t), (sa.label, sb.label)):
            if not np.array_equal(fa, fb):
                return False
    return True


# ---------------------------------------------------------------------------
# Splits


def split(ds: Dataset, strategy: str, seed: int = 0, fractions=(0.8, 0.1, 0.1)):
    """Partition into (train, val, test).

    Strategies: ``random`` (seeded shuffle by ``fractions``), ``tail``
    (ordered; trailing ``fractions[2]`` share becomes test, for datasets
    generated with an anti-correlated tail), and ``ood_gender`` /
    ``ood_age`` / ``ood_race`` (the smallest group of the attribute is
    held out entirely as test; the rest splits 90/10 into train/val).
    """
    n = len(ds)
    if strategy == "random":
        order = np.random.default_rng(seed).permutation(n)
        n_train = int(round(n * fractions[0]))
        n_val = int(round(n * fractions[1]))
        return (
            ds.subset(order[:n_train]),
            ds.subset(order[n_train : n_train + n_val]),
            ds.subset(order[n_train + n_val :]),
        )
    if strategy == "tail":
        n_test = int(round(n * fractions[2]))
        head = np.arange(n - n_test)
        order = np.random.default_rng(seed).permutation(head)
        n_val = int(round(n * fractions[1]))
        return (
            ds.subset(order[: len(head) - n_val]),
            ds.subset(order[len(head) - n_val :]),
            ds.subset(np.arange(n - n_test, n)),
        )
    if strategy in OOD_STRATEGIES:
        attr = strategy.split("_", 1)[1]
        if attr == "race" and not ds.header.has_race():
            raise CapabilityError("ood_race requires race annotations")
        values = np.array([getattr(s.demo, attr) for s in ds.samples])
        counts = np.bincount(values, minlength=ds.header.cards[attr])
        present = np.flatnonzero(counts)
        held_out = present[np.argmin(counts[present])]
        test_idx = np.flatnonzero(values == held_out)
        rest = np.flatnonzero(values != held_out)
        order = np.random.default_rng(seed).permutation(rest)
        n_val = max(1, int(round(len(rest) * 0.1))) if len(rest) > 1 else 0
        return (
            ds.subset(order[: len(rest) - n_val]),
            ds.subset(order[len(rest) - n_val :]),
            ds.subset(test_idx),
        )
    raise ConfigError(f"unknown split strategy {strategy!r}")
