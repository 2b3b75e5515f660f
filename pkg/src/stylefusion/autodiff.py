"""Style-path model, its reverse-mode gradient, and a central-difference oracle.

The model wires the fusion layer the way the fine-tuning setup does:

* latent features are the front content stream,
* content appearance features pass through a frozen identity encoder and the
  frozen projections ``content.w_q/w_k/w_v``,
* style appearance features pass through a trainable affine encoder
  (``style.encoder``, ``style.encoder_bias``) and trainable key/value
  projections (``style.w_k``, ``style.w_v``).

The training loss is the mean squared error between the fused output and the
front stream of the stylized target views.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import (
    FusedOutput,
    FusionConfig,
    ProjectionSet,
    StyleMask,
    _summary,
    _mask_weights,
    _project_full,
    appearance_tokens,
    baseline_projected,
    fuse_projected,
    fuse_projected_backward,
    latent_tokens,
    logits_projected,
)
from .tensor_core import DomainError, FeatureMap, NumericError, ShapeError, as_array, derive_seed, matmul, normal_array

STYLE_PARAMS = ("style.encoder", "style.encoder_bias", "style.w_k", "style.w_v")


class ParamVector:
    """Flat float64 vector with a name -> (offset, shape) index."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.names = tuple(arrays)
        self.shapes = {k: tuple(np.shape(v)) for k, v in arrays.items()}
        self.index = {}
        off = 0
        for k in self.names:
            n = int(np.prod(self.shapes[k]))
            self.index[k] = (off, n)
            off += n
        flat = np.empty(off)
        for k, v in arrays.items():
            o, n = self.index[k]
            flat[o : o + n] = np.asarray(v, dtype=np.float64).reshape(-1)
        flat.setflags(write=False)
        self.flat = flat

    def __len__(self):
        return len(self.flat)

    def __getitem__(self, name: str) -> np.ndarray:
        o, n = self.index[name]
        return self.flat[o : o + n].reshape(self.shapes[name])

    def __contains__(self, name):
        return name in self.index

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self[k].copy() for k in self.names}

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.flat.shape:
            raise ShapeError(f"flat vector has {flat.shape}, expected {self.flat.shape}")
        out = ParamVector.__new__(ParamVector)
        out.names, out.shapes, out.index = self.names, self.shapes, self.index
        out.flat = flat.copy()
        out.flat.setflags(write=False)
        return out

    def coordinate_names(self) -> list[str]:
        out = []
        for k in self.names:
            shape = self.shapes[k]
            for idx in np.ndindex(*shape) if shape else [()]:
                out.append(f"{k}[{','.join(map(str, idx))}]" if idx else k)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, ParamVector)
            and self.names == other.names
            and self.shapes == other.shapes
            and self.flat.tobytes() == other.flat.tobytes()
        )


def init_style_params(content: ProjectionSet, names=STYLE_PARAMS) -> ParamVector:
    """Style path initialized as a copy of the frozen content path (identity encoder)."""
    c = content.channels
    full = {
        "style.encoder": np.eye(c),
        "style.encoder_bias": np.zeros(c),
        "style.w_k": content.w_k.copy(),
        "style.w_v": content.w_v.copy(),
    }
    unknown = set(names) - set(full)
    if unknown:
        raise DomainError(f"unknown trainable parameters {sorted(unknown)}")
    return ParamVector({k: full[k] for k in names})


def _param(params: ParamVector, content: ProjectionSet, name: str) -> np.ndarray:
    if name in params:
        return params[name]
    c = content.channels
    return {
        "style.encoder": np.eye(c),
        "style.encoder_bias": np.zeros(c),
        "style.w_k": content.w_k,
        "style.w_v": content.w_v,
    }[name]


@dataclass
class _Forward:
    out: np.ndarray
    mass: np.ndarray
    cache: object
    raw: list
    feats: list
    weights: list


def _encode(params, content, raw):
    e = _param(params, content, "style.encoder")
    b = _param(params, content, "style.encoder_bias")
    return _project_full(raw, e) + b


def _forward(params: ParamVector, content: ProjectionSet, content_views, style_views, cfg: FusionConfig,
             style_views_2=None, drop_style: bool = False, baseline: bool = False) -> _Forward:
    cv = as_array(content_views)
    sv = as_array(style_views)
    if cv.shape != sv.shape or cv.ndim != 5 or cv.shape[-1] != content.channels:
        raise ShapeError(f"content {cv.shape} and style {sv.shape} views must match with C={content.channels}")
    lat = latent_tokens(cv[0:1])
    con = appearance_tokens(cv)

    raws = [appearance_tokens(sv)]
    weights = [1.0]
    if cfg.alpha is not None:
        if style_views_2 is None:
            raise DomainError("alpha is set but no second style was given")
        sv2 = as_array(style_views_2)
        if sv2.shape != sv.shape:
            raise ShapeError(f"second style {sv2.shape} must match first {sv.shape}")
        raws.append(appearance_tokens(sv2))
        weights = [1.0 - cfg.alpha, cfg.alpha]
    if drop_style:
        raws = [np.zeros_like(r) for r in raws]

    w_k = _param(params, content, "style.w_k")
    w_v = _param(params, content, "style.w_v")
    feats = [_encode(params, content, r) for r in raws]
    if len(feats) == 1:
        k_s = _project_full(feats[0], w_k)
        v_s = _project_full(feats[0], w_v)
    else:
        k_s = weights[0] * _project_full(feats[0], w_k) + weights[1] * _project_full(feats[1], w_k)
        v_s = weights[0] * _project_full(feats[0], w_v) + weights[1] * _project_full(feats[1], w_v)

    frozen = (
        _project_full(lat, content.w_q),
        _project_full(lat, content.w_k),
        _project_full(lat, content.w_v),
        _project_full(con, content.w_k),
        _project_full(con, content.w_v),
    )
    if baseline:
        out, mass = baseline_projected(*frozen, k_s, v_s, content.heads, cfg.eps, cfg.pairing_mode)
        cache = None
    else:
        out, mass, cache = fuse_projected(*frozen, k_s, v_s, content.heads, cfg,
                                          _mask_weights(cfg.mask, cv.shape))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite value in fused attention output")
    return _Forward(out, mass, cache, raws, feats, weights)


def model_forward(params: ParamVector, content: ProjectionSet, content_views, style_views,
                  cfg: FusionConfig | None = None, style_views_2=None, drop_style: bool = False,
                  baseline: bool = False) -> FusedOutput:
    """Fused output for one sample's views through the (trained) style path.

    ``baseline=True`` runs the unmodified path (tau, mask and interpolation ignored
    apart from the style blend).
    """
    cfg = cfg or FusionConfig()
    fw = _forward(params, content, content_views, style_views, cfg, style_views_2, drop_style, baseline)
    _, n, h, w, c = as_array(content_views).shape
    return FusedOutput(FeatureMap(fw.out.reshape(1, n, h, w, c)), fw.mass, _summary(fw.mass))


def model_logits(params: ParamVector, content: ProjectionSet, content_views, style_views,
                 cfg: FusionConfig | None = None) -> np.ndarray:
    """Unmasked attention logits (N, h, P, P + 2A) of the model for one sample."""
    cfg = cfg or FusionConfig()
    cv = as_array(content_views)
    lat = latent_tokens(cv[0:1])
    f_s = _encode(params, content, appearance_tokens(style_views))
    return logits_projected(
        _project_full(lat, content.w_q),
        _project_full(lat, content.w_k),
        _project_full(appearance_tokens(cv), content.w_k),
        _project_full(f_s, _param(params, content, "style.w_k")),
        content.heads,
        cfg,
    )


def _target_tokens(batch) -> np.ndarray:
    return latent_tokens(as_array(batch.target_views)[0:1])


def loss_forward(params: ParamVector, batch, cfg: FusionConfig, content: ProjectionSet, *,
                 style_views_2=None, drop_style: bool = False) -> float:
    """Mean squared error of the fused output against the front target stream."""
    fw = _forward(params, content, batch.content_views, batch.style_views, cfg, style_views_2, drop_style)
    target = _target_tokens(batch)
    if target.shape != fw.out.shape:
        raise ShapeError(f"target {target.shape} does not match output {fw.out.shape}")
    return float(np.mean((fw.out - target) ** 2))


def loss_and_grad(params: ParamVector, batch, cfg: FusionConfig, content: ProjectionSet, *,
                  style_views_2=None, drop_style: bool = False) -> tuple[float, ParamVector]:
    fw = _forward(params, content, batch.content_views, batch.style_views, cfg, style_views_2, drop_style)
    target = _target_tokens(batch)
    if target.shape != fw.out.shape:
        raise ShapeError(f"target {target.shape} does not match output {fw.out.shape}")
    resid = fw.out - target
    loss = float(np.mean(resid**2))
    d_out = 2.0 * resid / resid.size

    d_k_s, d_v_s = fuse_projected_backward(fw.cache, d_out)
    if not (np.all(np.isfinite(d_k_s)) and np.all(np.isfinite(d_v_s))):
        raise NumericError("non-finite gradient in attention backward")

    c = content.channels
    w_k = _param(params, content, "style.w_k")
    w_v = _param(params, content, "style.w_v")
    dk = d_k_s.reshape(-1, c)
    dv = d_v_s.reshape(-1, c)
    grads = {name: np.zeros(params.shapes[name]) for name in params.names}
    for feat, raw, wt in zip(fw.feats, fw.raw, fw.weights):
        f = feat.reshape(-1, c)
        r = raw.reshape(-1, c)
        dk_i = dk * wt
        dv_i = dv * wt
        f_t = np.ascontiguousarray(f.T)
        if "style.w_k" in grads:
            grads["style.w_k"] += matmul(f_t, dk_i)
        if "style.w_v" in grads:
            grads["style.w_v"] += matmul(f_t, dv_i)
        d_feat = matmul(dk_i, np.ascontiguousarray(w_k.T)) + matmul(dv_i, np.ascontiguousarray(w_v.T))
        if "style.encoder" in grads:
            grads["style.encoder"] += matmul(np.ascontiguousarray(r.T), d_feat)
        if "style.encoder_bias" in grads:
            grads["style.encoder_bias"] += d_feat.sum(axis=0)
    flat = np.concatenate([grads[k].reshape(-1) for k in params.names])
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite parameter gradient")
    return loss, params.with_flat(flat)


def loss_backward(params: ParamVector, batch, cfg: FusionConfig, content: ProjectionSet, **kw) -> ParamVector:
    """Gradient of :func:`loss_forward` w.r.t. every entry of ``params``."""
    return loss_and_grad(params, batch, cfg, content, **kw)[1]


def central_difference(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """(f(theta + h e_i) - f(theta - h e_i)) / (2h) for every coordinate i."""
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h}")
    theta = np.array(theta, dtype=np.float64, ndmin=1)
    g = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2.0 * h)
    return g


def finite_diff_grad(params: ParamVector, batch, cfg: FusionConfig, h: float, content: ProjectionSet,
                     **kw) -> ParamVector:
    def f(flat):
        return loss_forward(params.with_flat(flat), batch, cfg, content, **kw)

    return params.with_flat(central_difference(f, params.flat, h))


@dataclass
class GradReport:
    names: list[str]
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "analytic", "numeric", "rel_err"])
            for row in zip(self.names, self.analytic, self.numeric, self.rel_err):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(analytic, numeric, tol: float = 1e-4, names=None) -> GradReport:
    if isinstance(analytic, ParamVector) and names is None:
        names = analytic.coordinate_names()
    a = analytic.flat if isinstance(analytic, ParamVector) else np.asarray(analytic, dtype=np.float64)
    n = numeric.flat if isinstance(numeric, ParamVector) else np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient lengths differ: {a.shape} vs {n.shape}")
    names = list(names) if names is not None else [f"p{i}" for i in range(a.size)]
    return GradReport(names, a.copy(), n.copy(), relative_error(a, n), tol)


@dataclass(frozen=True)
class MicroInstance:
    params: ParamVector
    batch: object
    cfg: FusionConfig
    content: ProjectionSet
    style_views_2: FeatureMap | None = None

    def check(self, h: float = 1e-5, tol: float = 1e-4) -> GradReport:
        kw = {"style_views_2": self.style_views_2}
        analytic = loss_backward(self.params, self.batch, self.cfg, self.content, **kw)
        numeric = finite_diff_grad(self.params, self.batch, self.cfg, h, self.content, **kw)
        return grad_check(analytic, numeric, tol)


def micro_instance(seed: int, channels: int = 4, heads: int = 2, tau: float = 1.3, mask_mode: str | None = None,
                   pairing_mode: str = "as_written", alpha: float | None = None) -> MicroInstance:
    """Seeded gradient-check problem: one view, a 1x2 grid, so 2 latent and 4 appearance tokens.

    ``mask_mode`` switches on a half mask (left cell stylized) in that mode.
    """
    from .synth import StylePairSample

    shape = (2, 1, 1, 2, channels)

    def r(k, sh):
        return normal_array(sh, derive_seed(seed, k))

    c = channels
    g = 1.0 / math.sqrt(c)  # keeps logits O(1) so no softmax row saturates
    content = ProjectionSet(g * r(1, (c, c)), g * r(2, (c, c)), r(3, (c, c)), heads)
    batch = StylePairSample(FeatureMap(r(4, shape)), FeatureMap(r(5, shape)), FeatureMap(r(6, shape)), None, None)
    params = ParamVector({
        "style.encoder": np.eye(c) + 0.3 * r(7, (c, c)),
        "style.encoder_bias": 0.3 * r(8, (c,)),
        "style.w_k": g * r(9, (c, c)),
        "style.w_v": r(10, (c, c)),
    })
    mask = StyleMask(np.array([[1.0, 0.0]])) if mask_mode else None
    cfg = FusionConfig(tau=tau, mask=mask, mask_mode=mask_mode or "exclusion", pairing_mode=pairing_mode,
                       alpha=alpha)
    second = FeatureMap(r(11, shape)) if alpha is not None else None
    return MicroInstance(params, batch, cfg, content, second)
