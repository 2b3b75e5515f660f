import csv

import numpy as np
import pytest

from stylefusion.autodiff import init_style_params, model_forward
from stylefusion.fusion import FusionConfig, ProjectionSet
from stylefusion.synth import make_dataset
from stylefusion.tensor_core import DomainError, FeatureMap, ShapeError
from stylefusion.trainer import (
    TrainConfig,
    TrainState,
    cfg_combine,
    checksum,
    content_projections,
    freeze_check,
    infer,
    load_checkpoint,
    loss_sidecar,
    save_checkpoint,
    train_style_path,
)


@pytest.fixture(scope="module")
def tiny():
    return make_dataset(n_identities=3, n_styles=2, n_views=4, n_samples=6, seed=1)


def tiny_cfg(**kw):
    base = dict(steps=6, views_per_batch=4, probe_samples=2, learning_rate=1e-5)
    base.update(kw)
    return TrainConfig(**base)


# -- cfg ------------------------------------------------------------------------------


def test_cfg_combine_arithmetic():
    assert cfg_combine(np.array([1.0]), np.array([2.0]), 3.0).tolist() == [4.0]


@pytest.mark.parametrize("w", [0.0, 1.0])
def test_cfg_combine_endpoints_exact(w):
    rng = np.random.default_rng(0)
    u, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert np.array_equal(cfg_combine(u, c, w), u if w == 0 else c)


def test_cfg_combine_keeps_feature_maps():
    f = FeatureMap(np.ones((1, 1, 1, 1, 2)))
    assert isinstance(cfg_combine(f, f, 3.0), FeatureMap)
    with pytest.raises(ShapeError):
        cfg_combine(np.zeros(2), np.zeros(3), 1.0)


# -- config ---------------------------------------------------------------------------


def test_default_config():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.steps, cfg.cfg_weight, cfg.views_per_batch, cfg.cfg_dropout_prob) == (
        1e-5, 800, 3.0, 16, 0.1)
    assert cfg.fusion().tau == 1.0


@pytest.mark.parametrize("kw", [{"learning_rate": -1.0}, {"steps": -1}, {"cfg_weight": 0.0},
                                {"views_per_batch": 0}, {"cfg_dropout_prob": 1.5}])
def test_config_validation(kw):
    with pytest.raises(DomainError):
        TrainConfig(**kw)


# -- training ---------------------------------------------------------------------------


def test_zero_learning_rate_keeps_params(tiny):
    st = train_style_path(tiny, tiny_cfg(learning_rate=0.0))
    init = init_style_params(st.content)
    assert st.params.flat.tobytes() == init.flat.tobytes()
    assert st.step == 6


def test_training_deterministic(tiny):
    a = train_style_path(tiny, tiny_cfg())
    b = train_style_path(tiny, tiny_cfg())
    assert a.loss_history == b.loss_history
    assert a.params.flat.tobytes() == b.params.flat.tobytes()


def test_history_finite_and_frozen(tiny):
    st = train_style_path(tiny, tiny_cfg(cfg_dropout_prob=0.5))
    assert len(st.loss_history) == 6
    assert all(np.isfinite(st.loss_history))
    assert all(st.frozen_ok)
    assert freeze_check(st)
    assert st.dropped == train_style_path(tiny, tiny_cfg(cfg_dropout_prob=0.5)).dropped
    assert all(train_style_path(tiny, tiny_cfg(cfg_dropout_prob=1.0, steps=2)).dropped)
    assert not any(train_style_path(tiny, tiny_cfg(cfg_dropout_prob=0.0, steps=2)).dropped)


def test_training_touches_only_style_path(tiny):
    content = content_projections(tiny.channels)
    before = checksum(content)
    st = train_style_path(tiny, tiny_cfg(), content)
    assert checksum(st.content) == before
    assert st.params.flat.tobytes() != init_style_params(content).flat.tobytes()


def test_freeze_check_detects_perturbation(tiny):
    content = content_projections(tiny.channels)
    st = TrainState(init_style_params(content), content, checksum(content))
    assert freeze_check(st)
    w_k = content.w_k.copy()
    w_k[0, 0] += 1e-12
    st.content = ProjectionSet(content.w_q, w_k, content.w_v, content.heads)
    assert not freeze_check(st)


def test_empty_dataset_rejected(tiny):
    with pytest.raises(DomainError):
        train_style_path([], tiny_cfg())


def test_too_many_views_rejected(tiny):
    with pytest.raises(ShapeError):
        train_style_path(tiny, tiny_cfg(views_per_batch=5))


# -- inference ------------------------------------------------------------------------------


def test_infer_unit_weight_is_conditional(tiny):
    st = train_style_path(tiny, tiny_cfg(cfg_dropout_prob=0.0))
    s = tiny[0]
    fusion = FusionConfig(tau=1.05)
    out, _ = infer(st.params, st.content, s, fusion, cfg_weight=1.0)
    cond = model_forward(st.params, st.content, s.content_views, s.style_views, fusion).features
    assert out == cond


def test_infer_guidance_matches_manual_combination(tiny):
    content = content_projections(tiny.channels)
    p = init_style_params(content)
    s = tiny[1]
    fusion = FusionConfig(tau=1.05)
    out, _ = infer(p, content, s, fusion, cfg_weight=3.0)
    cond = model_forward(p, content, s.content_views, s.style_views, fusion).features.data
    uncond = model_forward(p, content, s.content_views, s.style_views, fusion, drop_style=True).features.data
    assert np.array_equal(out.data, -2.0 * uncond + 3.0 * cond)


# -- checkpoints ------------------------------------------------------------------------------


def test_checkpoint_round_trip(tiny, tmp_path):
    cfg = tiny_cfg()
    st = train_style_path(tiny, cfg)
    path = save_checkpoint(tmp_path / "ck.sft", st, cfg, {"note": "x"})
    assert path.read_bytes()[:4] == b"SFT1"
    params, content, header = load_checkpoint(path)
    assert params.flat.tobytes() == st.params.flat.tobytes()
    assert params.names == st.params.names
    assert checksum(content) == st.frozen_checksum
    assert header["config"]["steps"] == 6
    assert header["note"] == "x"
    with open(loss_sidecar(path), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "style_dropped", "frozen_ok"]
    assert [float(r[1]) for r in rows[1:]] == st.loss_history


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_checkpoint_detects_tampered_content(tiny, tmp_path):
    cfg = tiny_cfg(steps=1)
    path = save_checkpoint(tmp_path / "ck.sft", train_style_path(tiny, cfg), cfg)
    buf = bytearray(path.read_bytes())
    buf[-1] ^= 0x01
    path.write_bytes(bytes(buf))
    with pytest.raises(ValueError):
        load_checkpoint(path)
