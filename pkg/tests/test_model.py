"""End-to-end model: forward traces, optimizer, schedule, training, checkpoints."""

import numpy as np
import pytest

from dcan import numcore as nc
from dcan.data import ScmConfig, generate_scm, split
from dcan.errors import ConfigError, LeakageError, ShapeError
from dcan.model import (
    AdamState,
    TrainConfig,
    _backdoor_numpy,
    _batch_feats,
    _leaves,
    adamw_step,
    batch_loss,
    build_dictionary_bank,
    cosine_lr,
    evaluate_loss,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

DIMS = {"v": 16, "a": 12, "t": 16}


def tiny_setup(seed=0, n=24, **cfg_kw):
    ds = generate_scm(ScmConfig(n_samples=n, seed=seed))
    cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=seed, d=16, heads=2, **cfg_kw)
    model = init_params(DIMS, ds.header.k_traits, cfg)
    bank = build_dictionary_bank(model, ds, m_size=4, n_size=4, seed=seed)
    return ds, cfg, model, bank


# ---------------------------------------------------------------------------
# Config and initialization


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(d=10, heads=3).validate()


def test_init_params_shapes_and_determinism():
    cfg = TrainConfig(seed=1, d=16, heads=4)
    m1 = init_params(DIMS, 4, cfg)
    m2 = init_params(DIMS, 4, cfg)
    assert m1.params["proj_v"].shape == (16, 16)
    assert m1.params["mlp_w2"].shape == (16, 4)
    assert m1.params["bacl_v_gamma"].shape == ()
    np.testing.assert_array_equal(m1.params["proj_a"], m2.params["proj_a"])
    np.testing.assert_array_equal(m1.params["bacl_v_wq"], cfg.bacl_attn_scale * np.eye(16))
    np.testing.assert_array_equal(m1.params["facl_v_wg"], np.eye(16))
    np.testing.assert_array_equal(m1.params["facl_v_wd"], np.zeros((16, 16)))


def test_model_copy_is_deep():
    _, _, model, _ = tiny_setup()
    clone = model.copy()
    clone.params["proj_v"][0, 0] += 1.0
    assert model.params["proj_v"][0, 0] != clone.params["proj_v"][0, 0]


# ---------------------------------------------------------------------------
# Forward pass and ablation traces


def run_forward(model, bank, ds, idx=(0, 1, 2, 3)):
    tape = nc.Tape()
    lv = _leaves(tape, model)
    return forward(tape, lv, model, _batch_feats(ds, list(idx)), bank)


def test_forward_trace_full_model():
    ds, _, model, bank = tiny_setup()
    _, trace = run_forward(model, bank, ds)
    for m in ("v", "a", "t"):
        assert f"project:{m}" in trace
        assert f"bacl:{m}" in trace
        assert f"facl:{m}" in trace
    assert trace[-1] == "predict"


def test_forward_trace_ablations():
    ds, _, _, _ = tiny_setup()
    traces = {}
    for use_bacl, use_facl in ((True, True), (False, True), (True, False), (False, False)):
        cfg = TrainConfig(seed=0, d=16, heads=2, use_bacl=use_bacl, use_facl=use_facl)
        model = init_params(DIMS, 4, cfg)
        bank = build_dictionary_bank(model, ds, m_size=4, n_size=4, seed=0)
        _, trace = run_forward(model, bank, ds)
        traces[(use_bacl, use_facl)] = trace
    assert all("bacl:v" not in traces[k] for k in ((False, True), (False, False)))
    assert all("facl:v" not in traces[k] for k in ((True, False), (False, False)))
    expected_bare = [f"project:{m}" for m in "vat"] + ["fuse:tokens", "fuse:mha", "predict"]
    assert traces[(False, False)] == expected_bare


def test_predictions_strictly_in_unit_interval():
    ds, _, model, bank = tiny_setup()
    y = predict(model, bank, ds)
    assert y.shape == (len(ds), 4)
    assert np.all((y > 0.0) & (y < 1.0))


def test_forward_rejects_wrong_feature_width():
    ds, _, model, bank = tiny_setup()
    feats = _batch_feats(ds, [0, 1])
    feats["v"] = feats["v"][:, :-1]
    tape = nc.Tape()
    with pytest.raises(ShapeError):
        forward(tape, _leaves(tape, model), model, feats, bank)


def test_loss_includes_l2_term():
    ds, _, model, bank = tiny_setup()
    feats = _batch_feats(ds, [0, 1, 2, 3])
    labels = np.stack([ds.samples[i].label for i in range(4)])

    def loss_at(lam):
        tape = nc.Tape()
        l, _ = batch_loss(tape, _leaves(tape, model), model, feats, labels, bank, lam)
        return float(l.value)

    sq = sum(float((w * w).sum()) for w in model.params.values())
    assert loss_at(1e-3) - loss_at(0.0) == pytest.approx(1e-3 * sq, rel=1e-9)


def test_backdoor_numpy_matches_tape_module():
    ds, _, model, bank = tiny_setup()
    feats = ds.features("v")[:5] @ model.params["proj_v"]
    wq, wk = model.params["bacl_v_wq"], model.params["bacl_v_wk"]
    gamma = float(model.params["bacl_v_gamma"])
    out_np = _backdoor_numpy(feats, bank.back["v"], wq, wk, gamma)
    from dcan.bacl import backdoor_adjust

    tape = nc.Tape()
    out_tape = backdoor_adjust(
        tape.leaf(feats), bank.back["v"], tape.leaf(wq), tape.leaf(wk), tape.leaf(gamma)
    )
    np.testing.assert_allclose(out_np, out_tape.value, atol=1e-12)


# ---------------------------------------------------------------------------
# Dictionary bank


def test_bank_warm_pass_initializes_observed_strata():
    ds, _, _, bank = tiny_setup(n=60)
    observed = {s.demo.key() for s in ds.samples}
    for m in ("v", "a"):
        cd = bank.back[m]
        for key in observed:
            assert cd.initialized[cd.index_map[key]]


def test_bank_fingerprint_is_content_sensitive():
    from dcan.model import dataset_fingerprint

    ds, _, _, bank = tiny_setup()
    assert bank.source == dataset_fingerprint(ds)
    # same ids, different content: must not collide
    other = generate_scm(ScmConfig(n_samples=len(ds), seed=17))
    assert [s.id for s in other.samples] == [s.id for s in ds.samples]
    assert dataset_fingerprint(other) != bank.source
    # order-insensitive over samples
    shuffled = ds.subset(list(range(len(ds)))[::-1])
    assert dataset_fingerprint(shuffled) == bank.source


def test_bank_text_dictionary_uses_tokens():
    ds, _, _, bank = tiny_setup(n=60)
    # generated samples all carry tokens, so the text dictionary is word-based
    assert bank.back["t"].index_map is None
    assert len(bank.back["t"].prototypes) >= 1


def test_front_dicts_depend_on_backdoor_adjustment():
    ds = generate_scm(ScmConfig(n_samples=40, seed=0, rho_obs=1.0))
    cfg_on = TrainConfig(seed=0, d=16, heads=2, use_bacl=True)
    cfg_off = TrainConfig(seed=0, d=16, heads=2, use_bacl=False)
    bank_on = build_dictionary_bank(init_params(DIMS, 4, cfg_on), ds, m_size=4, n_size=4, seed=0)
    bank_off = build_dictionary_bank(init_params(DIMS, 4, cfg_off), ds, m_size=4, n_size=4, seed=0)
    assert not np.allclose(bank_on.front["v"].mediator, bank_off.front["v"].mediator)


# ---------------------------------------------------------------------------
# Optimizer and schedule


def test_adamw_matches_hand_oracle():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.5])}
    state = AdamState()
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    adamw_step(p, g, state, lr, weight_decay=0.0, beta1=b1, beta2=b2, eps=eps)
    m = (1 - b1) * g["w"]
    v = (1 - b2) * g["w"] ** 2
    expect = np.array([1.0, -2.0]) - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    np.testing.assert_allclose(p["w"], expect, atol=1e-12)


def test_adamw_decoupled_weight_decay():
    p = {"w": np.array([10.0])}
    state = AdamState()
    adamw_step(p, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.5)
    # decay shrinks by lr*wd*w; zero gradient contributes nothing further
    np.testing.assert_allclose(p["w"], [10.0 - 0.1 * 0.5 * 10.0], atol=1e-12)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert cosine_lr(150, 100, 1e-3) == 0.0


def test_cosine_schedule_monotone():
    lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------------------
# Training loop


def test_train_smoke_and_history():
    ds, cfg, model, bank = tiny_setup()
    tr, va, _ = split(ds, "random", seed=0, fractions=(0.6, 0.2, 0.2))
    bank = build_dictionary_bank(model, tr, m_size=4, n_size=4, seed=0)
    best, history = train(tr, va, cfg, bank, model)
    assert len(history["train_loss"]) == cfg.epochs
    assert len(history["val_loss"]) == cfg.epochs
    assert all(np.isfinite(history["train_loss"]))


def test_train_deterministic_under_seed():
    losses = []
    for _ in range(2):
        ds, cfg, model, bank = tiny_setup(seed=3)
        _, history = train(ds, ds.subset([]), cfg, bank, model)
        losses.append(history["train_loss"])
    assert losses[0] == losses[1]


def test_leakage_guard():
    ds, cfg, model, bank = tiny_setup()
    other = generate_scm(ScmConfig(n_samples=10, seed=99))
    with pytest.raises(LeakageError):
        train(other, other.subset([]), cfg, bank, model)


def test_memorizes_small_dataset():
    ds = generate_scm(ScmConfig(n_samples=32, seed=0))
    cfg = TrainConfig(epochs=80, batch_size=32, lr=3e-3, weight_decay=0.0, seed=0, d=32, heads=4)
    model = init_params(DIMS, 4, cfg)
    bank = build_dictionary_bank(model, ds, m_size=8, n_size=8, seed=0)
    _, history = train(ds, ds.subset([]), cfg, bank, model)
    assert min(history["train_loss"]) < 0.01


def test_evaluate_loss_matches_batch_loss():
    ds, _, model, bank = tiny_setup(n=8)
    feats = _batch_feats(ds, list(range(8)))
    labels = ds.labels()
    tape = nc.Tape()
    l, _ = batch_loss(tape, _leaves(tape, model), model, feats, labels, bank, 0.0)
    assert evaluate_loss(model, bank, ds) == pytest.approx(float(l.value), rel=1e-12)


# ---------------------------------------------------------------------------
# Checkpointing


def test_checkpoint_round_trip_bit_identical(tmp_path):
    ds, cfg, model, bank = tiny_setup()
    y_before = predict(model, bank, ds)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, cfg, bank, path)
    model2, cfg2, source = load_checkpoint(path)
    assert source == bank.source
    assert cfg2 == cfg
    y_after = predict(model2, bank, ds)
    np.testing.assert_array_equal(y_before, y_after)


def test_checkpoint_preserves_flags(tmp_path):
    ds, cfg, _, bank = tiny_setup(use_bacl=False, facl_residual=True)
    model = init_params(DIMS, 4, cfg)
    bank = build_dictionary_bank(model, ds, m_size=4, n_size=4, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, cfg, bank, path)
    model2, _, _ = load_checkpoint(path)
    assert model2.use_bacl is False
    assert model2.facl_residual is True
