"""End-to-end network: projection, per-modality BACL -> FACL, cross-modal
fusion, loss, AdamW with cosine annealing, and the training loop.

Forward passes are batched: every intermediate is (B, d) on the tape, so
one tape covers a whole minibatch. Ablation flags replace either causal
module with the identity map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .bacl import MASK_LOGIT, backdoor_adjust
from .data import Dataset
from .dictionaries import (
    ConfounderDictionary,
    batch_prototype,
    build_frontdoor_dicts,
    build_text_dictionary,
    hash_embeddings,
    make_demographic_dictionary,
)
from .errors import ConfigError, EmptyDictionaryError, LeakageError, ShapeError
from .facl import frontdoor_adjust

MODALITIES = ("v", "a", "t")


def dataset_fingerprint(ds: "Dataset") -> str:
    """Order-insensitive content hash of a dataset's ids, features and labels.

    Used as the leakage guard between dictionary construction and training:
    dictionaries record the fingerprint of the split they were built from,
    and :func:`train` refuses anything else.
    """
    h = hashlib.sha256()
    for s in sorted(ds.samples, key=lambda s: s.id):
        h.update(s.id.encode())
        for arr in (s.feat_v, s.feat_a, s.feat_t, s.label):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4  # L2 coefficient in the loss
    seed: int = 0
    d: int = 32
    heads: int = 4
    use_bacl: bool = True
    use_facl: bool = True
    facl_residual: bool = False
    # Back-door adjustment starts active: attention keys/queries are scaled
    # identities (sharp stratum retrieval) and gamma = -1 subtracts the
    # retrieved stratum context. Training may move all of these.
    bacl_attn_scale: float = 2.0
    bacl_gamma_init: float = -1.0
    # Front-door adjustment starts as a near-identity vector quantizer:
    # sharp attention snaps each feature to its closest global prototype
    # and W_g = I passes it through, so the module begins by preserving
    # the deconfounded representation instead of scrambling it.
    facl_attn_scale: float = 2.0

    def validate(self):
        if min(self.epochs, self.batch_size, self.d, self.heads) <= 0:
            raise ConfigError("epochs, batch_size, d and heads must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.d % self.heads:
            raise ConfigError(f"head count {self.heads} must divide d={self.d}")


@dataclass(eq=False)
class ModelParams:
    params: dict  # name -> ndarray
    dims: dict  # {"v": d_v, "a": d_a, "t": d_t}
    d: int
    k_traits: int
    heads: int
    use_bacl: bool = True
    use_facl: bool = True
    facl_residual: bool = False

    def copy(self) -> "ModelParams":
        return ModelParams(
            params={k: v.copy() for k, v in self.params.items()},
            dims=dict(self.dims),
            d=self.d,
            k_traits=self.k_traits,
            heads=self.heads,
            use_bacl=self.use_bacl,
            use_facl=self.use_facl,
            facl_residual=self.facl_residual,
        )


@dataclass(eq=False)
class DictionaryBank:
    back: dict  # modality -> ConfounderDictionary
    front: dict  # modality -> FrontDoorDictionaries
    source: str  # fingerprint of the train-split sample ids


def init_params(dims: dict, k_traits: int, cfg: TrainConfig) -> ModelParams:
    """Seeded parameter initialization; the back-door attention starts as a
    sharp stratum lookup (scaled-identity queries/keys, negative gamma)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, h = cfg.d, cfg.heads
    d_h = d // h
    p = {}

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)

    for m in MODALITIES:
        p[f"proj_{m}"] = mat(dims[m], d)
        p[f"bacl_{m}_wq"] = cfg.bacl_attn_scale * np.eye(d)
        p[f"bacl_{m}_wk"] = cfg.bacl_attn_scale * np.eye(d)
        p[f"bacl_{m}_gamma"] = np.asarray(float(cfg.bacl_gamma_init))
        for name in ("wqg", "wkg", "wqd", "wkd"):
            p[f"facl_{m}_{name}"] = cfg.facl_attn_scale * np.eye(d)
        p[f"facl_{m}_wg"] = np.eye(d)
        p[f"facl_{m}_wd"] = np.zeros((d, d))
    p["audio_attn"] = rng.standard_normal(d) / np.sqrt(d)
    for i in range(h):
        p[f"fus_h{i}_wq"] = mat(d, d_h)
        p[f"fus_h{i}_wk"] = mat(d, d_h)
        p[f"fus_h{i}_wv"] = mat(d, d_h)
    p["fus_wo"] = mat(d, d)
    p["mlp_w1"] = mat(d, d)
    p["mlp_b1"] = np.zeros(d)
    p["mlp_w2"] = mat(d, k_traits)
    p["mlp_b2"] = np.zeros(k_traits)
    return ModelParams(
        params=p,
        dims=dict(dims),
        d=d,
        k_traits=k_traits,
        heads=h,
        use_bacl=cfg.use_bacl,
        use_facl=cfg.use_facl,
        facl_residual=cfg.facl_residual,
    )


# ---------------------------------------------------------------------------
# Dictionary bank construction


def _backdoor_numpy(x: np.ndarray, cdict: ConfounderDictionary, wq: np.ndarray, wk: np.ndarray, gamma: float) -> np.ndarray:
    """Tape-free back-door adjustment, used when building frozen dictionaries."""
    init = cdict.initialized
    if not init.any():
        return x
    d = x.shape[-1]
    logits = (x @ wq) @ (cdict.prototypes @ wk).T / np.sqrt(d)
    logits = logits + np.where(init, 0.0, MASK_LOGIT)
    logits -= logits.max(axis=-1, keepdims=True)
    alpha = np.exp(logits)
    alpha /= alpha.sum(axis=-1, keepdims=True)
    return x + gamma * (alpha @ cdict.prototypes)


def _warm_demographic_dicts(model: "ModelParams", bank_back: dict, train_ds: Dataset, batch_size: int = 32):
    """One EMA pass over the training split so every observed stratum row
    is populated before the front-door dictionaries are clustered."""
    for lo in range(0, len(train_ds), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(train_ds))))
        keys = [train_ds.samples[i].demo.key() for i in idx]
        for m in MODALITIES:
            cd = bank_back[m]
            if cd.index_map is None:
                continue
            feats = train_ds.features(m)[idx] @ model.params[f"proj_{m}"]
            for key, proto in sorted(batch_prototype(feats, keys).items(), key=str):
                cd.ema_update(key, proto)


def build_dictionary_bank(
    model: ModelParams,
    train_ds: Dataset,
    m_size: int = 8,
    n_size: int = 8,
    beta: float = 0.99,
    k_text: int = 32,
    theta: float = 0.0,
    seed: int = 0,
) -> DictionaryBank:
    """Build all dictionaries from the training split only.

    The demographic EMA dictionaries get one warm pass over the training
    split so every observed stratum row is populated. Front-door
    dictionaries are k-means centroids over the projected features --
    back-door-adjusted first when that module is active, so their
    clusters describe content rather than demographic strata -- and stay
    frozen. The text back-door dictionary holds bias-scored word
    embeddings when token lists are available, otherwise it falls back
    to a demographic EMA dictionary like v/a.
    """
    source = dataset_fingerprint(train_ds)
    cards = train_ds.header.cards
    d = model.d
    back = {
        "v": make_demographic_dictionary("v", cards, d, beta),
        "a": make_demographic_dictionary("a", cards, d, beta),
    }
    corpus = [(s.tokens, s.demo.gender) for s in train_ds.samples if s.tokens]
    if len(corpus) == len(train_ds):
        vocab = {w for tokens, _ in corpus for w in tokens}
        raw = hash_embeddings(vocab, train_ds.header.d_t, seed=seed)
        projected = {w: v @ model.params["proj_t"] for w, v in raw.items()}
        try:
            back["t"] = build_text_dictionary(corpus, projected, theta, k_text, beta)
        except EmptyDictionaryError:
            back["t"] = make_demographic_dictionary("t", cards, d, beta)
    else:
        back["t"] = make_demographic_dictionary("t", cards, d, beta)
    for cd in back.values():
        cd.source = source
    _warm_demographic_dicts(model, back, train_ds)

    front = {}
    ss = np.random.SeedSequence(seed).spawn(len(MODALITIES))
    for m, child in zip(MODALITIES, ss):
        feats = train_ds.features(m) @ model.params[f"proj_{m}"]
        if model.use_bacl:
            feats = _backdoor_numpy(
                feats,
                back[m],
                model.params[f"bacl_{m}_wq"],
                model.params[f"bacl_{m}_wk"],
                float(model.params[f"bacl_{m}_gamma"]),
            )
        front[m] = build_frontdoor_dicts(
            feats, m_size, n_size, seed=int(child.generate_state(1)[0]), source=source
        )
    return DictionaryBank(back=back, front=front, source=source)


# ---------------------------------------------------------------------------
# Forward pass


def _leaves(tape: nc.Tape, model: ModelParams) -> dict:
    return {name: tape.leaf(arr) for name, arr in model.params.items()}


def _onehot_rows(tape, b, j, n=3):
    e = np.zeros(n)
    e[j] = 1.0
    return tape.constant(np.tile(e, (b, 1)))


def _fuse(tape, lv, model, u_v, u_a, u_t, trace):
    """Similarity-gated tokens + one multi-head self-attention layer."""
    b = u_v.value.shape[0]
    d_h = model.d // model.heads
    s_vt = nc.reshape(nc.cosine_rows(u_v, u_t), (b, 1)) * u_t
    s_va = nc.reshape(nc.cosine_rows(u_v, u_a), (b, 1)) * u_a
    tokens = [u_v, s_vt, s_va]
    trace.append("fuse:tokens")

    head_outs = [[] for _ in tokens]
    for h in range(model.heads):
        q = [nc.matmul(t, lv[f"fus_h{h}_wq"]) for t in tokens]
        k = [nc.matmul(t, lv[f"fus_h{h}_wk"]) for t in tokens]
        v = [nc.matmul(t, lv[f"fus_h{h}_wv"]) for t in tokens]
        for i in range(3):
            scores = nc.concat(
                [nc.reshape(nc.rows_dot(q[i], k[j]) * (1.0 / np.sqrt(d_h)), (b, 1)) for j in range(3)],
                axis=1,
            )
            attn = nc.softmax(scores, axis=-1)
            out = None
            for j in range(3):
                a_ij = nc.reshape(nc.rows_dot(attn, _onehot_rows(tape, b, j)), (b, 1))
                term = a_ij * v[j]
                out = term if out is None else out + term
            head_outs[i].append(out)
    fused = []
    for i in range(3):
        concat_heads = nc.concat(head_outs[i], axis=1)
        fused.append(tokens[i] + nc.matmul(concat_heads, lv["fus_wo"]))
    trace.append("fuse:mha")
    pooled = (fused[0] + fused[1] + fused[2]) * (1.0 / 3.0)
    return pooled


def forward(tape: nc.Tape, lv: dict, model: ModelParams, feats: dict, bank: DictionaryBank):
    """Batched forward pass; returns (predictions (B, K), stage trace)."""
    trace = []
    adjusted = {}
    for m in MODALITIES:
        fm = feats[m]
        if fm.shape[-1] != model.dims[m]:
            raise ShapeError(f"modality {m!r} features have dim {fm.shape[-1]}, expected {model.dims[m]}")
        x = nc.matmul(tape.constant(fm), lv[f"proj_{m}"])
        trace.append(f"project:{m}")
        if model.use_bacl:
            x = backdoor_adjust(
                x, bank.back[m], lv[f"bacl_{m}_wq"], lv[f"bacl_{m}_wk"], lv[f"bacl_{m}_gamma"]
            )
            trace.append(f"bacl:{m}")
        if model.use_facl:
            x = frontdoor_adjust(
                x,
                bank.front[m],
                lv[f"facl_{m}_wqg"],
                lv[f"facl_{m}_wkg"],
                lv[f"facl_{m}_wqd"],
                lv[f"facl_{m}_wkd"],
                lv[f"facl_{m}_wg"],
                lv[f"facl_{m}_wd"],
                residual=model.facl_residual,
            )
            trace.append(f"facl:{m}")
        adjusted[m] = x

    pooled = _fuse(tape, lv, model, adjusted["v"], adjusted["a"], adjusted["t"], trace)
    hidden = nc.relu(nc.matmul(pooled, lv["mlp_w1"]) + lv["mlp_b1"])
    pred = nc.sigmoid(nc.matmul(hidden, lv["mlp_w2"]) + lv["mlp_b2"])
    trace.append("predict")
    return pred, trace


def batch_loss(tape: nc.Tape, lv: dict, model: ModelParams, feats: dict, labels: np.ndarray, bank: DictionaryBank, lam: float):
    """Mean squared error over the batch plus L2 over all learnable tensors."""
    pred, _ = forward(tape, lv, model, feats, bank)
    if pred.value.shape != labels.shape:
        raise ShapeError(f"prediction shape {pred.value.shape} vs labels {labels.shape}")
    err = pred - tape.constant(labels)
    loss = nc.sum_all(err * err) * (1.0 / labels.shape[0])
    if lam:
        reg = None
        for name in sorted(lv):
            term = nc.sumsq(lv[name])
            reg = term if reg is None else reg + term
        loss = loss + lam * reg
    return loss, pred


def _batch_feats(ds: Dataset, idx) -> dict:
    sub = [ds.samples[i] for i in idx]
    return {
        "v": np.stack([s.feat_v for s in sub]),
        "a": np.stack([s.feat_a for s in sub]),
        "t": np.stack([s.feat_t for s in sub]),
    }


def predict(model: ModelParams, bank: DictionaryBank, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    """Forward the whole dataset in eval mode; returns (n, K) predictions."""
    preds = []
    for lo in range(0, len(ds), batch_size):
        idx = range(lo, min(lo + batch_size, len(ds)))
        tape = nc.Tape()
        lv = _leaves(tape, model)
        pred, _ = forward(tape, lv, model, _batch_feats(ds, idx), bank)
        preds.append(pred.value)
    return np.concatenate(preds, axis=0)


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass(eq=False)
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place AdamW update: decoupled decay, then bias-corrected Adam."""
    state.t += 1
    t = state.t
    for name in sorted(params):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        if weight_decay:
            params[name] -= lr * weight_decay * params[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1**t)
        v_hat = state.v[name] / (1 - beta2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 to 0; steps past the end clamp to 0."""
    if step >= total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Training loop


def _update_ema_dicts(model: ModelParams, bank: DictionaryBank, feats: dict, demo_keys):
    for m in MODALITIES:
        cd = bank.back[m]
        if cd.index_map is None:
            continue  # word-based text dictionary is static
        projected = feats[m] @ model.params[f"proj_{m}"]
        for key, proto in sorted(batch_prototype(projected, demo_keys).items(), key=str):
            cd.ema_update(key, proto)


def train(train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, bank: DictionaryBank, model: ModelParams | None = None):
    """Deterministic minibatch training; returns (best-val params, history).

    Dictionaries must have been built from exactly this training split;
    anything else raises :class:`LeakageError`.
    """
    cfg.validate()
    expected = dataset_fingerprint(train_ds)
    if bank.source != expected:
        raise LeakageError("dictionary bank was not built from this training split")
    if model is None:
        dims = {"v": train_ds.header.d_v, "a": train_ds.header.d_a, "t": train_ds.header.d_t}
        model = init_params(dims, train_ds.header.k_traits, cfg)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    n = len(train_ds)
    n_batches = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history = {"train_loss": [], "val_loss": []}
    best_val = np.inf
    best = model.copy()
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            feats = _batch_feats(train_ds, idx)
            labels = np.stack([train_ds.samples[i].label for i in idx])
            if model.use_bacl:
                keys = [train_ds.samples[i].demo.key() for i in idx]
                _update_ema_dicts(model, bank, feats, keys)
            tape = nc.Tape()
            lv = _leaves(tape, model)
            loss, _ = batch_loss(tape, lv, model, feats, labels, bank, cfg.weight_decay)
            tape.backward(loss)
            grads = {name: node.grad for name, node in lv.items()}
            adamw_step(model.params, grads, state, cosine_lr(step, total_steps, cfg.lr))
            epoch_losses.append(float(loss.value))
            step += 1
        history["train_loss"].append(float(np.mean(epoch_losses)))
        val = evaluate_loss(model, bank, val_ds, cfg.weight_decay) if len(val_ds) else history["train_loss"][-1]
        history["val_loss"].append(val)
        if val < best_val:
            best_val = val
            best = model.copy()
    history["rng_state"] = rng.bit_generator.state
    return best, history


def evaluate_loss(model: ModelParams, bank: DictionaryBank, ds: Dataset, lam: float = 0.0, batch_size: int = 64) -> float:
    """Mean per-sample squared error (plus optional L2 term) on a dataset."""
    total = 0.0
    for lo in range(0, len(ds), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(ds))))
        tape = nc.Tape()
        lv = _leaves(tape, model)
        labels = np.stack([ds.samples[i].label for i in idx])
        loss, _ = batch_loss(tape, lv, model, _batch_feats(ds, idx), labels, bank, 0.0)
        total += float(loss.value) * len(idx)
    mse = total / len(ds)
    if lam:
        mse += lam * sum(float((w * w).sum()) for w in model.params.values())
    return mse


# ---------------------------------------------------------------------------
# Checkpointing


def save_checkpoint(model: ModelParams, cfg: TrainConfig, bank: DictionaryBank, path, rng_state=None, history=None):
    rec = {
        "config": asdict(cfg),
        "dims": model.dims,
        "k_traits": model.k_traits,
        "flags": {
            "use_bacl": model.use_bacl,
            "use_facl": model.use_facl,
            "facl_residual": model.facl_residual,
        },
        "params": {name: arr.tolist() for name, arr in sorted(model.params.items())},
        "dict_source": bank.source,
        "rng_state": rng_state,
        "history": history,
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path):
    """Returns (ModelParams, TrainConfig, dict_source)."""
    with open(path) as fh:
        rec = json.load(fh)
    cfg = TrainConfig(**rec["config"])
    params = {name: np.asarray(v, dtype=np.float64) for name, v in rec["params"].items()}
    model = ModelParams(
        params=params,
        dims=rec["dims"],
        d=cfg.d,
        k_traits=rec["k_traits"],
        heads=cfg.heads,
        **rec["flags"],
    )
    return model, cfg, rec["dict_source"]
