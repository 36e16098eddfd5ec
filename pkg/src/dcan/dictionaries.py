"""Confounder dictionary construction.

Three kinds of prototype dictionaries back the causal adjustment modules:
a text dictionary of bias-scored word embeddings, per-modality demographic
prototype dictionaries maintained by exponential moving average, and the
mediator/global dictionaries built by k-means over training features.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyDictionaryError, ShapeError

EPS_COUNT = 1e-8


def fingerprint_ids(ids) -> str:
    """Order-insensitive content hash of a collection of sample ids."""
    h = hashlib.sha256()
    for i in sorted(ids):
        h.update(i.encode())
        h.update(b"\0")
    return h.hexdigest()


@dataclass(eq=False)
class ConfounderDictionary:
    modality: str  # "v" | "a" | "t"
    prototypes: np.ndarray  # (K, d)
    beta: float = 0.99
    index_map: dict | None = None  # demographic key tuple -> row (v/a only)
    counts: np.ndarray = None  # per-row update counts
    source: str | None = None  # fingerprint of the ids the dict was built from

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(len(self.prototypes), dtype=np.int64)

    @property
    def initialized(self) -> np.ndarray:
        return self.counts > 0

    def ema_update(self, key, batch_proto: np.ndarray):
        """Momentum update of one demographic row; first update copies."""
        if self.index_map is None or key not in self.index_map:
            raise KeyError(f"unknown demographic index {key!r}")
        row = self.index_map[key]
        if self.counts[row] == 0:
            self.prototypes[row] = batch_proto
        else:
            self.prototypes[row] = self.beta * self.prototypes[row] + (1.0 - self.beta) * batch_proto
        self.counts[row] += 1


@dataclass(eq=False)
class FrontDoorDictionaries:
    mediator: np.ndarray  # (M, d)
    global_: np.ndarray  # (N, d)
    source: str | None = None


@dataclass(eq=False)
class BiasLexicon:
    entries: list  # (word, bias_score, embedding)
    threshold: float


def demographic_keys(cards: dict) -> list[tuple]:
    """All (gender, age, race) triplets declared by a dataset header."""
    races = range(cards["race"]) if "race" in cards else [None]
    return [
        (g, a, r)
        for g in range(cards["gender"])
        for a in range(cards["age"])
        for r in races
    ]


def make_demographic_dictionary(modality: str, cards: dict, d: int, beta: float = 0.99) -> ConfounderDictionary:
    keys = demographic_keys(cards)
    return ConfounderDictionary(
        modality=modality,
        prototypes=np.zeros((len(keys), d)),
        beta=beta,
        index_map={k: i for i, k in enumerate(keys)},
    )


# ---------------------------------------------------------------------------
# Text bias dictionary


def word_cond_prob(corpus, w: str, l) -> float:
    """Fraction of texts with group label ``l`` that contain word ``w``."""
    n_l = sum(1 for tokens, label in corpus if label == l)
    n_wl = sum(1 for tokens, label in corpus if label == l and w in tokens)
    return n_wl / (n_l + EPS_COUNT)


def bias_score(corpus, w: str, labels) -> float:
    """Spread of a word's conditional probability across group labels."""
    probs = [word_cond_prob(corpus, w, l) for l in labels]
    return max(probs) - min(probs)


def build_text_dictionary(corpus, embeddings, theta: float, k_max: int, beta: float = 0.99) -> ConfounderDictionary:
    """Retain the most group-discriminative words as prototype rows.

    Words scoring at least ``theta`` are kept, sorted by descending score
    (ties broken alphabetically for determinism) and truncated to
    ``k_max``. Prototype rows are the retained words' embeddings.
    """
    labels = sorted({label for _, label in corpus})
    vocab = sorted({w for tokens, _ in corpus for w in tokens})
    scored = [(w, bias_score(corpus, w, labels)) for w in vocab]
    kept = sorted(
        (ws for ws in scored if ws[1] >= theta),
        key=lambda ws: (-ws[1], ws[0]),
    )[:k_max]
    if not kept:
        raise EmptyDictionaryError(f"no word reaches bias-score threshold {theta}")
    missing = [w for w, _ in kept if w not in embeddings]
    if missing:
        raise ConfigError(f"embeddings missing for retained words: {missing[:5]}")
    protos = np.stack([np.asarray(embeddings[w], dtype=np.float64) for w, _ in kept])
    d = ConfounderDictionary(modality="t", prototypes=protos, beta=beta)
    d.counts[:] = 1  # text rows are fixed at build time
    return d


def hash_embeddings(words, d: int, seed: int = 0) -> dict:
    """Deterministic word -> unit vector table for desk-scale corpora."""
    table = {}
    for w in sorted(set(words)):
        digest = hashlib.sha256(f"{seed}:{w}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(d)
        table[w] = v / np.linalg.norm(v)
    return table


# ---------------------------------------------------------------------------
# Batch prototypes and pooling


def batch_prototype(feats: np.ndarray, demo_keys) -> dict:
    """Mean feature per demographic group present in the batch."""
    if len(feats) == 0:
        return {}
    groups = {}
    for x, key in zip(feats, demo_keys):
        groups.setdefault(key, []).append(x)
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


def audio_pool(seq: np.ndarray, w_attn: np.ndarray) -> np.ndarray:
    """Attention-weighted pooling of a (L, d) sequence to one d-vector."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"audio_pool expects a non-empty (L, d) sequence, got {seq.shape}")
    logits = seq @ np.asarray(w_attn, dtype=np.float64)
    logits -= logits.max()
    alpha = np.exp(logits)
    alpha /= alpha.sum()
    return alpha @ seq


# ---------------------------------------------------------------------------
# K-means and front-door dictionaries


def _kmeans_pp_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centroids], axis=0
        )
        total = d2.sum()
        if total == 0.0:
            centroids.append(points[rng.integers(len(points))])
            continue
        centroids.append(points[rng.choice(len(points), p=d2 / total)])
    return np.stack(centroids)


def kmeans(points: np.ndarray, k: int, seed=0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns (k, d) centroids.

    Runs until the assignment reaches a fixpoint or ``max_iter``. The
    within-cluster sum of squares is asserted non-increasing every
    iteration; empty clusters are re-seeded on the current worst point.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"kmeans expects (P, d) points, got {points.shape}")
    if k < 1 or len(points) < k:
        raise ConfigError(f"need at least k={k} points, got {len(points)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    prev_assign = None
    prev_obj = np.inf
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(len(points)), assign].sum())
        assert obj <= prev_obj + 1e-9, "k-means objective increased"
        prev_obj = obj
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                worst = np.argmax(d2[np.arange(len(points)), assign])
                centroids[j] = points[worst]
    return centroids


def build_frontdoor_dicts(train_feats: np.ndarray, m_size: int, n_size: int, seed: int = 0, source: str | None = None) -> FrontDoorDictionaries:
    """Mediator and global dictionaries as k-means centroids of train features."""
    if len(train_feats) < max(m_size, n_size):
        raise ConfigError(
            f"need at least {max(m_size, n_size)} feature rows, got {len(train_feats)}"
        )
    s_med, s_glob = np.random.SeedSequence(seed).spawn(2)
    return FrontDoorDictionaries(
        mediator=kmeans(train_feats, m_size, seed=s_med),
        global_=kmeans(train_feats, n_size, seed=s_glob),
        source=source,
    )


# ---------------------------------------------------------------------------
# Serialization


def save_confounder_dict(d: ConfounderDictionary, path):
    rec = {
        "modality": d.modality,
        "beta": d.beta,
        "index_map": [[list(k), v] for k, v in d.index_map.items()] if d.index_map else None,
        "prototypes": d.prototypes.tolist(),
        "counts": d.counts.tolist(),
        "source": d.source,
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_confounder_dict(path) -> ConfounderDictionary:
    with open(path) as fh:
        rec = json.load(fh)
    index_map = None
    if rec["index_map"] is not None:
        index_map = {tuple(k): v for k, v in rec["index_map"]}
    d = ConfounderDictionary(
        modality=rec["modality"],
        prototypes=np.asarray(rec["prototypes"], dtype=np.float64),
        beta=rec["beta"],
        index_map=index_map,
        counts=np.asarray(rec["counts"], dtype=np.int64),
        source=rec.get("source"),
    )
    return d


def save_frontdoor_dicts(d: FrontDoorDictionaries, path):
    rec = {"mediator": d.mediator.tolist(), "global": d.global_.tolist(), "source": d.source}
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_frontdoor_dicts(path) -> FrontDoorDictionaries:
    with open(path) as fh:
        rec = json.load(fh)
    return FrontDoorDictionaries(
        mediator=np.asarray(rec["mediator"], dtype=np.float64),
        global_=np.asarray(rec["global"], dtype=np.float64),
        source=rec.get("source"),
    )
