import csv

import numpy as np
import pytest

from stylefusion.autodiff import (
    STYLE_PARAMS,
    ParamVector,
    central_difference,
    finite_diff_grad,
    grad_check,
    init_style_params,
    loss_and_grad,
    loss_backward,
    loss_forward,
    micro_instance,
    model_forward,
    relative_error,
)
from stylefusion.fusion import FusionConfig, ProjectionSet, fused_attention
from stylefusion.synth import StylePairSample
from stylefusion.tensor_core import DomainError, FeatureMap, ShapeError, normal_array


def with_target(batch, front):
    back = batch.target_views.data[1:]
    target = FeatureMap(np.concatenate([np.asarray(front), back]))
    return StylePairSample(batch.content_views, batch.style_views, target, None, None)


# -- ParamVector --------------------------------------------------------------------


def test_param_vector_round_trip():
    arrays = {"a": normal_array((3, 2), 0), "b": normal_array((4,), 1), "c": np.array(2.5)}
    p = ParamVector(arrays)
    assert len(p) == 11
    for k, v in arrays.items():
        assert p[k].tobytes() == np.asarray(v).tobytes()
    assert p.index == {"a": (0, 6), "b": (6, 4), "c": (10, 1)}
    again = p.with_flat(p.flat)
    assert again == p
    assert again.arrays()["a"].tobytes() == arrays["a"].tobytes()
    assert p.coordinate_names()[:2] == ["a[0,0]", "a[0,1]"]
    assert p.coordinate_names()[-1] == "c"
    with pytest.raises(ShapeError):
        p.with_flat(np.zeros(3))


def test_param_vector_is_read_only():
    p = ParamVector({"a": np.zeros(3)})
    with pytest.raises(ValueError):
        p.flat[0] = 1.0


def test_init_copies_content_projections():
    content = ProjectionSet.random(4, 2, 3)
    p = init_style_params(content)
    assert p.names == STYLE_PARAMS
    assert np.array_equal(p["style.w_k"], content.w_k)
    assert np.array_equal(p["style.w_v"], content.w_v)
    assert np.array_equal(p["style.encoder"], np.eye(4))
    assert not p["style.encoder_bias"].any()
    with pytest.raises(DomainError):
        init_style_params(content, ("style.w_q",))


def test_initial_model_is_plain_fusion():
    # identity encoder plus copied projections: the model reduces to the fusion layer with f_l = front content
    m = micro_instance(0)
    p = init_style_params(m.content)
    cv, sv = m.batch.content_views, m.batch.style_views
    got = model_forward(p, m.content, cv, sv, FusionConfig(tau=1.2)).features
    want = fused_attention(cv.stream(0), cv, sv, m.content, FusionConfig(tau=1.2)).features
    assert got == want


# -- loss ----------------------------------------------------------------------------------


def test_loss_zero_at_target():
    m = micro_instance(1)
    out = model_forward(m.params, m.content, m.batch.content_views, m.batch.style_views, m.cfg).features
    batch = with_target(m.batch, out.data)
    assert loss_forward(m.params, batch, m.cfg, m.content) == 0.0


def test_loss_unit_offset():
    m = micro_instance(1)
    out = model_forward(m.params, m.content, m.batch.content_views, m.batch.style_views, m.cfg).features
    batch = with_target(m.batch, out.data + 1.0)
    assert loss_forward(m.params, batch, m.cfg, m.content) == pytest.approx(1.0, abs=1e-12)


def test_loss_matches_direct_sum():
    m = micro_instance(2)
    out = model_forward(m.params, m.content, m.batch.content_views, m.batch.style_views, m.cfg).features.data
    target = m.batch.target_views.data[0]
    total, count = 0.0, 0
    for x, t in zip(out.reshape(-1), target.reshape(-1)):
        total += (x - t) ** 2
        count += 1
    assert loss_forward(m.params, m.batch, m.cfg, m.content) == pytest.approx(total / count, abs=1e-12)


def test_loss_shape_mismatch():
    m = micro_instance(2)
    bad = StylePairSample(m.batch.content_views, FeatureMap(m.batch.style_views.data[:, :, :, :1]),
                          m.batch.target_views, None, None)
    with pytest.raises(ShapeError):
        loss_forward(m.params, bad, m.cfg, m.content)


# -- gradients --------------------------------------------------------------------------------


def test_zero_residual_gives_zero_gradient():
    m = micro_instance(3)
    out = model_forward(m.params, m.content, m.batch.content_views, m.batch.style_views, m.cfg).features
    g = loss_backward(m.params, with_target(m.batch, out.data), m.cfg, m.content)
    assert np.abs(g.flat).max() <= 1e-12


def test_content_path_untouched_by_backward():
    m = micro_instance(4)
    before = [w.tobytes() for w in (m.content.w_q, m.content.w_k, m.content.w_v)]
    loss_backward(m.params, m.batch, m.cfg, m.content)
    assert [w.tobytes() for w in (m.content.w_q, m.content.w_k, m.content.w_v)] == before
    assert not any(name.startswith("content") for name in m.params.names)


def test_six_parameter_instance():
    m = micro_instance(5, channels=6, heads=3)
    p = ParamVector({"style.encoder_bias": m.params["style.encoder_bias"]})
    assert len(p) == 6
    a = loss_backward(p, m.batch, m.cfg, m.content)
    n = finite_diff_grad(p, m.batch, m.cfg, 1e-5, m.content)
    assert grad_check(a, n, 1e-5).passed


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    assert micro_instance(seed).check(h=1e-5, tol=1e-4).passed


@pytest.mark.parametrize("kw", [
    {"mask_mode": "exclusion"},
    {"mask_mode": "paper_literal"},
    {"pairing_mode": "aligned"},
    {"alpha": 0.35},
    {"tau": 1.0},
    {"channels": 8, "heads": 4},
])
def test_gradient_variants(kw):
    for seed in range(3):
        report = micro_instance(seed, **kw).check()
        assert report.max_rel_err <= 1e-4, report.max_rel_err


def test_gradient_with_dropped_style():
    m = micro_instance(6)
    a = loss_backward(m.params, m.batch, m.cfg, m.content, drop_style=True)
    n = finite_diff_grad(m.params, m.batch, m.cfg, 1e-5, m.content, drop_style=True)
    assert grad_check(a, n).passed


def test_backward_deterministic():
    m = micro_instance(7)
    a = loss_and_grad(m.params, m.batch, m.cfg, m.content)
    b = loss_and_grad(m.params, m.batch, m.cfg, m.content)
    assert a[0] == b[0]
    assert a[1].flat.tobytes() == b[1].flat.tobytes()


# -- finite differences and reports -----------------------------------------------------------


def test_central_difference_quadratic():
    g = central_difference(lambda t: float(t[0] ** 2), [3.0], h=1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


@pytest.mark.parametrize("h", [1e-6, 1e-3, 0.5])
def test_central_difference_linear(h):
    g = central_difference(lambda t: float(-2.5 * t[0] + 4.0), [1.0], h=h)
    assert g[0] == pytest.approx(-2.5, abs=1e-9)


def test_central_difference_rejects_bad_step():
    with pytest.raises(DomainError):
        central_difference(lambda t: 0.0, [0.0], h=0.0)


def test_grad_check_identical():
    r = grad_check([1.0, -2.0, 0.0], [1.0, -2.0, 0.0])
    assert r.max_rel_err == 0.0
    assert r.passed


def test_grad_check_small_error_passes():
    r = grad_check([1.0], [1.0 + 5e-5], tol=1e-4)
    assert r.passed
    assert r.max_rel_err == pytest.approx(5e-5 / (2 + 5e-5), rel=1e-12)


def test_grad_check_large_error_fails():
    r = grad_check([1.0], [2.0], tol=1e-4)
    assert not r.passed
    assert r.max_rel_err == pytest.approx(1 / 3, abs=1e-15)


def test_relative_error_floor():
    assert relative_error([0.0], [0.0])[0] == 0.0
    assert relative_error([1e-12], [0.0])[0] == pytest.approx(1e-4)


def test_grad_check_length_mismatch():
    with pytest.raises(ShapeError):
        grad_check([1.0, 2.0], [1.0])


def test_grad_report_csv(tmp_path):
    r = micro_instance(0).check()
    r.to_csv(tmp_path / "g.csv")
    with open(tmp_path / "g.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["name", "analytic", "numeric", "rel_err"]
    assert len(rows) == len(r.names) + 1
    assert rows[1][0] == "style.encoder[0,0]"
    assert float(rows[1][1]) == r.analytic[0]
