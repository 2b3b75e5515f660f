import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylefusion.metrics import (
    DepthProbe,
    MetricReport,
    content_error,
    cycle_consistency,
    depth_delta,
    style_alignment,
    write_reports,
)
from stylefusion.synth import IdentityParams, render_views
from stylefusion.tensor_core import DomainError, FeatureMap, ShapeError, normal_array, seeded_normal


def two_loop_cycle(stack):
    """Views-first stack; explicit loops over pairs and entries."""
    n = stack.shape[0]
    total = 0.0
    for i in range(n):
        a = stack[i].reshape(-1)
        b = stack[(i + 1) % n].reshape(-1)
        acc = 0.0
        for x, y in zip(a, b):
            acc += (float(x) - float(y)) ** 2
        total += math.sqrt(acc / len(a))
    return 100.0 * total / n


# -- cycle consistency -------------------------------------------------------------


def test_cycle_identical_views_is_zero():
    one = normal_array((1, 1, 3, 3, 2), 0)
    r = cycle_consistency(FeatureMap(np.repeat(one, 5, axis=1)))
    assert r.aggregate == 0.0
    assert r.per_view == [0.0] * 5


def test_cycle_constant_offset_two_views():
    v = np.zeros((2, 4, 4, 3))
    v[1] += 1.0
    r = cycle_consistency(v)
    assert r.per_view == [1.0, 1.0]
    assert r.aggregate == 100.0
    assert r.metadata["pairs"] == [[0, 1], [1, 0]]


def test_cycle_includes_wrap_pair():
    v = np.zeros((3, 1, 1, 1))
    v[2] = 2.0
    r = cycle_consistency(v)
    # pairs (0,1), (1,2), (2,0)
    assert r.per_view == [0.0, 2.0, 2.0]


def test_cycle_matches_two_loop_on_rendered_heads():
    for i in range(3):
        f = render_views(IdentityParams.from_seed(50 + i, i), 16)[0]
        got = cycle_consistency(f.stream(0)).aggregate
        want = two_loop_cycle(f.data[0])
        assert got == pytest.approx(want, abs=1e-10)


@pytest.mark.parametrize("seed", range(50))
def test_cycle_matches_two_loop_on_random_stacks(seed):
    n = 2 + seed % 7
    x = normal_array((n, 2, 3, 2), seed)
    assert cycle_consistency(x).aggregate == pytest.approx(two_loop_cycle(x), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(0, 50), st.integers(0, 2**32 - 1))
def test_cycle_rotation_invariant(n, shift, seed):
    x = normal_array((n, 2, 2, 3), seed)
    rolled = np.roll(x, shift, axis=0)
    assert abs(cycle_consistency(rolled).aggregate - cycle_consistency(x).aggregate) <= 1e-12


def test_cycle_needs_two_views():
    with pytest.raises(DomainError):
        cycle_consistency(np.zeros((1, 2, 2, 1)))


def test_cycle_reads_feature_map_view_axis():
    f = seeded_normal((1, 4, 2, 2, 3), 9)
    assert cycle_consistency(f).aggregate == cycle_consistency(np.moveaxis(f.data, 1, 0)).aggregate


# -- depth delta ------------------------------------------------------------------


def test_depth_identical_is_zero():
    d = np.abs(normal_array((4, 3, 3, 1), 2)) + 1
    assert depth_delta(d, d).aggregate == 0.0


def test_depth_constant_offset():
    d = np.abs(normal_array((4, 3, 3, 1), 2)) + 1
    r = depth_delta(d + 0.5, d)
    assert r.per_view == pytest.approx([0.5] * 4, abs=1e-15)
    assert r.aggregate == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_depth_matches_summation_oracle(seed):
    g = normal_array((3, 4, 4, 1), seed)
    r = normal_array((3, 4, 4, 1), seed + 10)
    per = []
    for v in range(3):
        acc = 0.0
        for a, b in zip(g[v].reshape(-1), r[v].reshape(-1)):
            acc += (a - b) ** 2
        per.append(math.sqrt(acc / 16))
    assert depth_delta(g, r).aggregate == pytest.approx(sum(per) / 3, abs=1e-12)


def test_depth_shape_mismatch():
    with pytest.raises(ShapeError):
        depth_delta(np.zeros((2, 2, 2, 1)), np.zeros((3, 2, 2, 1)))


# -- style alignment ------------------------------------------------------------------


def test_style_identical_is_one():
    x = seeded_normal((1, 4, 3, 3, 5), 1)
    r = style_alignment(x, x)
    assert r.aggregate == 1.0


def test_style_same_stats_other_layout_is_one():
    x = normal_array((1, 6, 6, 3), 3)
    shuffled = x.reshape(-1, 3)[np.random.default_rng(0).permutation(36)].reshape(x.shape)
    assert style_alignment(shuffled, x).aggregate == pytest.approx(1.0, abs=1e-15)


def test_style_closed_form():
    # one channel; means differ by 3, stds by 4: d = sqrt(9 + 16) = 5
    a = np.array([[[[-1.0]], [[1.0]]]])
    b = 3.0 + 5.0 * a
    assert style_alignment(a, b).aggregate == pytest.approx(1.0 / 6.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_style_symmetric_and_bounded(seed):
    a = normal_array((3, 2, 2, 4), seed)
    b = normal_array((3, 2, 2, 4), seed + 1) * 2 + 1
    ab = style_alignment(a, b).aggregate
    assert ab == style_alignment(b, a).aggregate
    assert 0.0 < ab < 1.0


def test_style_pooled_when_view_counts_differ():
    r = style_alignment(normal_array((3, 2, 2, 2), 0), normal_array((5, 2, 2, 2), 1))
    assert len(r.per_view) == 1
    assert r.metadata["pooled"]


def test_style_channel_mismatch():
    with pytest.raises(ShapeError):
        style_alignment(np.zeros((1, 1, 1, 2)), np.zeros((1, 1, 1, 3)))


def test_content_error():
    x = normal_array((2, 2, 2, 2), 4)
    assert content_error(x + 2.0, x).aggregate == pytest.approx(4.0, abs=1e-12)


# -- reports ----------------------------------------------------------------------


@pytest.mark.parametrize("fn,args", [
    (cycle_consistency, (normal_array((5, 2, 2, 2), 7),)),
    (depth_delta, (normal_array((5, 2, 2, 1), 7), normal_array((5, 2, 2, 1), 8))),
    (style_alignment, (normal_array((5, 2, 2, 2), 7), normal_array((5, 2, 2, 2), 8))),
])
def test_aggregate_is_scaled_mean(fn, args):
    r = fn(*args)
    assert isinstance(r, MetricReport)
    assert abs(r.aggregate - r.scale * sum(r.per_view) / len(r.per_view)) <= 1e-12
    assert r.metadata["n_views"] == len(r.per_view)
    assert "note" in r.metadata
    assert all(v >= 0 for v in r.per_view)


def test_write_reports(tmp_path):
    reports = [cycle_consistency(normal_array((3, 1, 1, 2), 0)), depth_delta(np.ones((3, 1, 1, 1)), np.zeros((3, 1, 1, 1)))]
    write_reports(reports, tmp_path / "m.csv", tmp_path / "m.json")
    with open(tmp_path / "m.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["name", "aggregate", "view_index", "value"]
    assert len(rows) == 1 + 3 + 3
    assert float(rows[1][3]) == reports[0].per_view[0]
    summary = json.loads((tmp_path / "m.json").read_text())
    assert summary["depth_delta"]["aggregate"] == 1.0
    assert summary["cycle_consistency"]["scale"] == 100.0


# -- depth probe ---------------------------------------------------------------------


def test_depth_probe_recovers_linear_map():
    f = normal_array((1, 2, 4, 4, 3), 5)
    w = np.array([0.5, -1.0, 2.0])
    d = f @ w + 3.0
    probe = DepthProbe.fit([f], [d])
    assert np.allclose(probe.weight, w, atol=1e-12)
    assert probe.bias == pytest.approx(3.0, abs=1e-12)
    out = probe(f)
    assert out.shape == (1, 2, 4, 4, 1)
    assert np.allclose(out.data[..., 0], d, atol=1e-12)
