"""Style fusion attention.

Latent queries attend, per view, over three key blocks:

* ``K_l``: latent keys of the same view,
* the normalized-style block: content keys re-normalized to the style key
  statistics (optionally swapped back to raw content keys outside a mask),
* the scaled-style block: raw style keys multiplied by ``tau``.

Values are paired with those blocks either as written in the method
description (``[V_l, V_s, V_c]``) or in the "aligned" order
(``[V_l, V_c, V_s]``), see :data:`PAIRINGS`.

Appearance feature maps (content and style) have shape (S, N, H, W, C) with
stream 0 the front reference and stream 1 the back view. Within a view,
appearance tokens are ordered stream-major, then row, then column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pgm
from .adain import DEFAULT_EPS, adain_array, adain_backward
from .tensor_core import (
    DomainError,
    FeatureMap,
    ShapeError,
    TokenMatrix,
    as_array,
    matmul,
    normal_array,
    softmax_rows,
)

PAIRINGS = ("as_written", "aligned")
MASK_MODES = ("paper_literal", "exclusion")
BLOCKS = ("latent", "normalized_style", "scaled_style")
EXCLUSION_BIAS = -1e9
DEFAULT_TAU = 1.05


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    heads: int = 1

    def __post_init__(self):
        mats = []
        for name in ("w_q", "w_k", "w_v"):
            m = np.array(getattr(self, name), dtype=np.float64)
            m.setflags(write=False)
            mats.append(m)
            object.__setattr__(self, name, m)
        c = mats[0].shape[0] if mats[0].ndim == 2 else -1
        for m in mats:
            if m.shape != (c, c):
                raise ShapeError(f"projection matrices must all be C x C, got {[x.shape for x in mats]}")
        if self.heads < 1 or c % self.heads:
            raise ShapeError(f"heads={self.heads} must divide channel count {c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @classmethod
    def identity(cls, channels: int, heads: int = 1) -> "ProjectionSet":
        eye = np.eye(channels)
        return cls(eye, eye, eye, heads)

    @classmethod
    def random(cls, channels: int, heads: int, seed: int, qk_scale: float = 1.0, v_noise: float = 0.0):
        """Seeded projections: Gaussian Q/K with std ``qk_scale/sqrt(C)``, V = I + noise."""
        w = normal_array((3, channels, channels), seed)
        s = qk_scale / math.sqrt(channels)
        return cls(w[0] * s, w[1] * s, np.eye(channels) + v_noise * w[2], heads)


@dataclass(frozen=True, eq=False)
class StyleMask:
    """Binary region mask; 1 marks regions to stylize."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2 or 0 in g.shape:
            raise ShapeError(f"mask grid must be a non-empty 2-D array, got {g.shape}")
        g = (g >= 0.5).astype(np.float64)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @classmethod
    def full(cls, height: int, width: int, value: float = 1.0) -> "StyleMask":
        return cls(np.full((height, width), value))

    @classmethod
    def from_pgm(cls, path) -> "StyleMask":
        # 8-bit pixels >= 128 are on, which is the same cut as value/255 >= 0.5
        return cls(pgm.read_pgm(path) / 255.0)

    def resized(self, height: int, width: int) -> np.ndarray:
        """Nearest-neighbour resample: target cell i reads source floor((i + 0.5) * src / dst)."""
        hm, wm = self.grid.shape
        rows = np.minimum(((np.arange(height) + 0.5) * hm / height).astype(int), hm - 1)
        cols = np.minimum(((np.arange(width) + 0.5) * wm / width).astype(int), wm - 1)
        return self.grid[np.ix_(rows, cols)]

    def token_weights(self, streams: int, height: int, width: int) -> np.ndarray:
        """Per-token weights for one view's appearance tokens (same grid on every stream)."""
        return np.tile(self.resized(height, width).reshape(-1), streams)


@dataclass(frozen=True)
class FusionConfig:
    tau: float = DEFAULT_TAU
    alpha: float | None = None
    mask: StyleMask | None = None
    mask_mode: str = "exclusion"
    pairing_mode: str = "as_written"
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise DomainError(f"tau must be positive and finite, got {self.tau}")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mask_mode not in MASK_MODES:
            raise DomainError(f"unknown mask_mode {self.mask_mode!r}; expected one of {MASK_MODES}")
        if self.pairing_mode not in PAIRINGS:
            raise DomainError(f"unknown pairing_mode {self.pairing_mode!r}; expected one of {PAIRINGS}")
        if not self.eps > 0:
            raise DomainError(f"eps must be positive, got {self.eps}")

    def with_(self, **kw) -> "FusionConfig":
        return replace(self, **kw)


def load_config(path) -> tuple[FusionConfig, dict]:
    """Read a JSON fusion config.

    Recognized keys: tau, alpha, mask_path, mask_mode, pairing_mode, heads, eps.
    Returns the config and a dict of the extra keys (``heads``, ``mask_path``).
    """
    doc = json.loads(Path(path).read_text())
    known = {"tau", "alpha", "mask_path", "mask_mode", "pairing_mode", "heads", "eps"}
    unknown = set(doc) - known
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    kw = {k: doc[k] for k in ("tau", "alpha", "mask_mode", "pairing_mode", "eps") if k in doc}
    if doc.get("mask_path"):
        mask_path = Path(doc["mask_path"])
        if not mask_path.is_absolute():
            mask_path = Path(path).parent / mask_path
        kw["mask"] = StyleMask.from_pgm(mask_path)
    extras = {k: doc[k] for k in ("heads", "mask_path") if k in doc}
    return FusionConfig(**kw), extras


@dataclass(frozen=True, eq=False)
class FusedOutput:
    features: FeatureMap
    block_mass: np.ndarray  # (views, heads, queries, 3)
    attention_summary: dict[str, float] = field(default_factory=dict)


# -- elementary operations --------------------------------------------------


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(..., T, C) -> (..., h, T, d) with head i owning channels [i*d, (i+1)*d)."""
    *lead, t, c = x.shape
    if c % heads:
        raise ShapeError(f"{heads} heads do not divide {c} channels")
    y = x.reshape(*lead, t, heads, c // heads)
    return np.ascontiguousarray(np.moveaxis(y, -2, -3))


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, t, d = x.shape
    return np.ascontiguousarray(np.moveaxis(x, -3, -2)).reshape(*lead, t, h * d)


def project(tokens, w, heads: int = 1) -> np.ndarray:
    """Token projection ``tokens @ w`` split into ``heads`` channel blocks, shape (h, T, d)."""
    x = as_array(tokens)
    w = as_array(w)
    if x.ndim != 2 or w.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"cannot project tokens {x.shape} with matrix {w.shape}")
    return split_heads(matmul(x, w), heads)


def _project_full(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Project a stack (..., T, C) through C x C ``w`` as one token matrix."""
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return matmul(flat, w).reshape(x.shape[:-1] + (w.shape[1],))


def key_scale(k_s, tau: float) -> np.ndarray:
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    return as_array(k_s) * tau


def selective_style_keys(k_c, k_hat_s, weights) -> np.ndarray:
    """Row-wise source choice: normalized style keys where the mask is 1, content keys where 0."""
    k_c = as_array(k_c)
    k_hat_s = as_array(k_hat_s)
    m = np.asarray(weights, dtype=np.float64)
    if k_c.shape != k_hat_s.shape or m.shape != k_c.shape[:-1][-m.ndim :]:
        raise ShapeError(
            f"selective keys need aligned tokens: k_c {k_c.shape}, k_hat_s {k_hat_s.shape}, mask {m.shape}"
        )
    return np.where(m[..., None] >= 0.5, k_hat_s, k_c)


def apply_style_mask(k_s, weights, mode: str = "exclusion") -> tuple[np.ndarray, np.ndarray]:
    """Mask the style key block.

    ``paper_literal`` multiplies each key row by its mask value; ``exclusion``
    leaves keys alone and returns a -1e9 logit bias on masked-out tokens.
    """
    k_s = as_array(k_s)
    m = np.asarray(weights, dtype=np.float64)
    if m.shape != k_s.shape[:-1][-m.ndim :]:
        raise ShapeError(f"mask of shape {m.shape} does not match key tokens {k_s.shape}")
    if mode == "paper_literal":
        return k_s * m[..., None], np.zeros(m.shape)
    if mode == "exclusion":
        return k_s, np.where(m >= 0.5, 0.0, EXCLUSION_BIAS)
    raise DomainError(f"unknown mask mode {mode!r}")


def interpolate_style(f_s1, f_s2, alpha: float, w_k, w_v) -> tuple[np.ndarray, np.ndarray]:
    """Blend two style feature sets after projection.

    Inputs are token matrices or feature maps (channels last); outputs are
    ``(K_s, V_s)`` with the same leading shape.
    """
    a = as_array(f_s1)
    b = as_array(f_s2)
    if a.shape != b.shape:
        raise ShapeError(f"style feature shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    w_k = as_array(w_k)
    w_v = as_array(w_v)
    k = (1.0 - alpha) * _project_full(a, w_k) + alpha * _project_full(b, w_k)
    v = (1.0 - alpha) * _project_full(a, w_v) + alpha * _project_full(b, w_v)
    return k, v


# -- token layout -------------------------------------------------------------


def latent_tokens(f) -> np.ndarray:
    """(1, N, H, W, C) -> (N, H*W, C)."""
    x = as_array(f)
    if x.ndim != 5 or x.shape[0] != 1:
        raise ShapeError(f"latent features must have shape (1, N, H, W, C), got {x.shape}")
    _, n, h, w, c = x.shape
    return np.ascontiguousarray(x.reshape(n, h * w, c))


def appearance_tokens(f) -> np.ndarray:
    """(S, N, H, W, C) -> (N, S*H*W, C), stream-major within each view."""
    x = as_array(f)
    if x.ndim != 5:
        raise ShapeError(f"appearance features must be rank 5, got {x.shape}")
    s, n, h, w, c = x.shape
    return np.ascontiguousarray(np.moveaxis(x, 0, 1).reshape(n, s * h * w, c))


def appearance_from_tokens(t: np.ndarray, shape) -> np.ndarray:
    s, n, h, w, c = shape
    return np.ascontiguousarray(np.moveaxis(t.reshape(n, s, h, w, c), 1, 0))


# -- attention core -----------------------------------------------------------


@dataclass
class _AttnCache:
    heads: int
    pairing: str
    tau: float
    mask_w: np.ndarray | None
    literal: bool
    eps: float
    k_c: np.ndarray
    k_s: np.ndarray
    q: np.ndarray  # (N, h, P, d)
    keys: np.ndarray  # (N, h, P + 2A, d)
    values: np.ndarray
    probs: np.ndarray
    sizes: tuple[int, int, int]


def _attend(q, k_l, v_l, k_hat_blk, k_s_blk, v_s, v_c, bias, heads: int, pairing: str):
    """Scaled dot-product attention over [latent, normalized-style, scaled-style] key blocks.

    Inputs are full-width per-view stacks (N, T, C). Returns merged output
    (N, P, C), per-query block masses (N, h, P, 3) and the split arrays.
    """
    if pairing == "as_written":
        v_blocks = (v_l, v_s, v_c)
    elif pairing == "aligned":
        v_blocks = (v_l, v_c, v_s)
    else:
        raise DomainError(f"unknown pairing_mode {pairing!r}")
    keys = split_heads(np.concatenate([k_l, k_hat_blk, k_s_blk], axis=1), heads)
    values = split_heads(np.concatenate(v_blocks, axis=1), heads)
    qh = split_heads(q, heads)
    d = qh.shape[-1]
    logits = matmul(qh, np.ascontiguousarray(np.swapaxes(keys, -1, -2))) / math.sqrt(d)
    if bias is not None:
        full_bias = np.concatenate(
            [np.zeros(k_l.shape[:2]), np.zeros(k_hat_blk.shape[:2]), np.broadcast_to(bias, k_s_blk.shape[:2])],
            axis=1,
        )
        probs = softmax_rows(logits, full_bias[:, None, None, :])
    else:
        probs = softmax_rows(logits)
    out = matmul(probs, values)
    sizes = (k_l.shape[1], k_hat_blk.shape[1], k_s_blk.shape[1])
    edges = np.cumsum((0,) + sizes)
    mass = np.stack([probs[..., edges[i] : edges[i + 1]].sum(axis=-1) for i in range(3)], axis=-1)
    return merge_heads(out), mass, qh, keys, values, probs, sizes


def _summary(mass: np.ndarray) -> dict[str, float]:
    return {name: float(mass[..., i].mean()) for i, name in enumerate(BLOCKS)}


def fuse_projected(q, k_l, v_l, k_c, v_c, k_s, v_s, heads: int, cfg: FusionConfig, mask_w=None):
    """Run the fusion given already-projected full-width token stacks.

    ``q, k_l, v_l`` are (N, P, C); ``k_c, v_c, k_s, v_s`` are (N, A, C) with A
    appearance tokens per view. ``mask_w`` is an (A,) or (N, A) 0/1 array.
    Returns merged output (N, P, C), block masses, and a cache for
    :func:`fuse_projected_backward`.
    """
    if k_c.shape != k_s.shape:
        raise ShapeError(f"content and style keys must be token aligned: {k_c.shape} vs {k_s.shape}")
    k_hat_s = adain_array(k_c, k_s, cfg.eps)
    k_s_blk = key_scale(k_s, cfg.tau)
    bias = None
    literal = False
    if mask_w is not None and not np.all(np.asarray(mask_w) >= 0.5):
        mask_w = np.broadcast_to(np.asarray(mask_w, dtype=np.float64), k_c.shape[:2])
        k_hat_blk = selective_style_keys(k_c, k_hat_s, mask_w)
        k_s_blk, b = apply_style_mask(k_s_blk, mask_w, cfg.mask_mode)
        literal = cfg.mask_mode == "paper_literal"
        if cfg.mask_mode == "exclusion":
            bias = b
    else:
        mask_w = None
        k_hat_blk = k_hat_s
    out, mass, qh, keys, values, probs, sizes = _attend(
        q, k_l, v_l, k_hat_blk, k_s_blk, v_s, v_c, bias, heads, cfg.pairing_mode
    )
    cache = _AttnCache(
        heads=heads, pairing=cfg.pairing_mode, tau=cfg.tau, mask_w=mask_w, literal=literal,
        eps=cfg.eps, k_c=k_c, k_s=k_s, q=qh, keys=keys, values=values, probs=probs, sizes=sizes,
    )
    return out, mass, cache


def fuse_projected_backward(cache: _AttnCache, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the raw style keys and style values given d(loss)/d(output).

    Query, latent and content tensors belong to the frozen path; their
    gradients are not formed.
    """
    d = cache.q.shape[-1]
    do = split_heads(d_out, cache.heads)
    d_probs = matmul(do, np.ascontiguousarray(np.swapaxes(cache.values, -1, -2)))
    d_values = matmul(np.ascontiguousarray(np.swapaxes(cache.probs, -1, -2)), do)
    p = cache.probs
    d_logits = p * (d_probs - (p * d_probs).sum(axis=-1, keepdims=True))
    d_keys = matmul(np.ascontiguousarray(np.swapaxes(d_logits, -1, -2)), cache.q) / math.sqrt(d)

    n_l, n_hat, n_s = cache.sizes
    d_keys = merge_heads(d_keys)
    d_values = merge_heads(d_values)
    d_hat_blk = d_keys[:, n_l : n_l + n_hat]
    d_s_blk = d_keys[:, n_l + n_hat :]
    # value block carrying V_s
    if cache.pairing == "as_written":
        d_v_s = d_values[:, n_l : n_l + n_hat]
    else:
        d_v_s = d_values[:, n_l + n_hat :]

    d_k_s = d_s_blk * cache.tau
    if cache.mask_w is not None:
        m = cache.mask_w[..., None]
        if cache.literal:
            d_k_s = d_k_s * m
        d_hat_s = np.where(m >= 0.5, d_hat_blk, 0.0)
    else:
        d_hat_s = d_hat_blk
    _, d_from_adain = adain_backward(cache.k_c, cache.k_s, d_hat_s, cache.eps)
    return d_k_s + d_from_adain, np.ascontiguousarray(d_v_s)


# -- public entry points ------------------------------------------------------


def _check_inputs(f_l, f_c, f_s, proj: ProjectionSet):
    fl, fc, fs = as_array(f_l), as_array(f_c), as_array(f_s)
    if fl.ndim != 5 or fl.shape[0] != 1:
        raise ShapeError(f"f_l must have one stream, got shape {fl.shape}")
    if fc.shape != fs.shape:
        raise ShapeError(f"f_c {fc.shape} and f_s {fs.shape} must share a shape")
    if fc.ndim != 5 or fc.shape[1:] != fl.shape[1:]:
        raise ShapeError(f"appearance maps {fc.shape} must match latent views/grid/channels {fl.shape}")
    if fl.shape[-1] != proj.channels:
        raise ShapeError(f"features have {fl.shape[-1]} channels, projections expect {proj.channels}")
    return fl, fc, fs


def _mask_weights(mask: StyleMask | None, shape):
    if mask is None:
        return None
    s, _, h, w, _ = shape
    return mask.token_weights(s, h, w)


def fused_attention(f_l, f_c, f_s, proj: ProjectionSet, cfg: FusionConfig | None = None,
                    f_s2=None) -> FusedOutput:
    """Style fusion attention for latent ``f_l`` (1,N,H,W,C) and appearance maps (S,N,H,W,C).

    When ``cfg.alpha`` is set, ``f_s2`` supplies the second style and the
    style keys/values are the projected blend of both.
    """
    cfg = cfg or FusionConfig()
    fl, fc, fs = _check_inputs(f_l, f_c, f_s, proj)
    lat = latent_tokens(fl)
    con = appearance_tokens(fc)
    sty = appearance_tokens(fs)

    q = _project_full(lat, proj.w_q)
    k_l = _project_full(lat, proj.w_k)
    v_l = _project_full(lat, proj.w_v)
    k_c = _project_full(con, proj.w_k)
    v_c = _project_full(con, proj.w_v)
    if cfg.alpha is not None:
        if f_s2 is None:
            raise DomainError("alpha is set but no second style was given")
        fs2 = as_array(f_s2)
        if fs2.shape != fs.shape:
            raise ShapeError(f"second style {fs2.shape} must match first {fs.shape}")
        k_s, v_s = interpolate_style(sty, appearance_tokens(fs2), cfg.alpha, proj.w_k, proj.w_v)
    else:
        k_s = _project_full(sty, proj.w_k)
        v_s = _project_full(sty, proj.w_v)

    out, mass, _ = fuse_projected(
        q, k_l, v_l, k_c, v_c, k_s, v_s, proj.heads, cfg, _mask_weights(cfg.mask, fc.shape)
    )
    return FusedOutput(FeatureMap(out.reshape(fl.shape)), mass, _summary(mass))


def fused_attention_regions(f_l, f_c, styles, masks, proj: ProjectionSet,
                            cfg: FusionConfig | None = None) -> FusedOutput:
    """Several styles, each confined to its own region mask.

    Style keys/values are the mask-weighted sum of each region's projections;
    the normalized-style block takes AdaIN(K_c, K_s^r) inside region r and
    raw content keys outside every region. Masks must be pairwise disjoint.
    """
    cfg = cfg or FusionConfig()
    if len(styles) != len(masks) or not styles:
        raise ShapeError("need one mask per style and at least one style")
    fl, fc, _ = _check_inputs(f_l, f_c, styles[0], proj)
    lat = latent_tokens(fl)
    con = appearance_tokens(fc)
    weights = [_mask_weights(m, fc.shape) for m in masks]
    coverage = np.sum(weights, axis=0)
    if np.any(coverage > 1):
        raise DomainError("region masks overlap")

    q = _project_full(lat, proj.w_q)
    k_l = _project_full(lat, proj.w_k)
    v_l = _project_full(lat, proj.w_v)
    k_c = _project_full(con, proj.w_k)
    v_c = _project_full(con, proj.w_v)
    k_s = np.zeros_like(k_c)
    v_s = np.zeros_like(v_c)
    k_hat_blk = k_c.copy()
    for f_s, w in zip(styles, weights):
        _check_inputs(f_l, f_c, f_s, proj)
        sty = appearance_tokens(f_s)
        ks = _project_full(sty, proj.w_k)
        vs = _project_full(sty, proj.w_v)
        k_s += ks * w[:, None]
        v_s += vs * w[:, None]
        k_hat_blk = np.where(w[:, None] >= 0.5, adain_array(k_c, ks, cfg.eps), k_hat_blk)

    k_s_blk = key_scale(k_s, cfg.tau)
    k_s_blk, b = apply_style_mask(k_s_blk, np.broadcast_to(coverage, k_c.shape[:2]), cfg.mask_mode)
    bias = b if cfg.mask_mode == "exclusion" else None
    out, mass, *_ = _attend(q, k_l, v_l, k_hat_blk, k_s_blk, v_s, v_c, bias, proj.heads, cfg.pairing_mode)
    return FusedOutput(FeatureMap(out.reshape(fl.shape)), mass, _summary(mass))


def baseline_projected(q, k_l, v_l, k_c, v_c, k_s, v_s, heads: int, eps: float = DEFAULT_EPS,
                       pairing_mode: str = "as_written"):
    """Unmodified fusion on projected stacks: K = [K_l, AdaIN(K_c, K_s), K_s]; returns (out, mass)."""
    out, mass, *_ = _attend(q, k_l, v_l, adain_array(k_c, k_s, eps), k_s, v_s, v_c, None, heads, pairing_mode)
    return out, mass


def baseline_attention(f_l, f_c, f_s, proj: ProjectionSet, eps: float = DEFAULT_EPS,
                       pairing_mode: str = "as_written") -> FeatureMap:
    """Unmodified fusion path: no key scaling, masks or blending."""
    fl, fc, fs = _check_inputs(f_l, f_c, f_s, proj)
    lat = latent_tokens(fl)
    con = appearance_tokens(fc)
    sty = appearance_tokens(fs)
    out, _ = baseline_projected(
        _project_full(lat, proj.w_q),
        _project_full(lat, proj.w_k),
        _project_full(lat, proj.w_v),
        _project_full(con, proj.w_k),
        _project_full(con, proj.w_v),
        _project_full(sty, proj.w_k),
        _project_full(sty, proj.w_v),
        proj.heads,
        eps,
        pairing_mode,
    )
    return FeatureMap(out.reshape(fl.shape))


def logits_projected(q, k_l, k_c, k_s, heads: int, cfg: FusionConfig) -> np.ndarray:
    """Unmasked pre-softmax logits (N, h, P, P + 2A) over [K_l, AdaIN(K_c, K_s), tau*K_s]."""
    keys = np.concatenate([k_l, adain_array(k_c, k_s, cfg.eps), key_scale(k_s, cfg.tau)], axis=1)
    qh = split_heads(q, heads)
    kh = split_heads(keys, heads)
    return matmul(qh, np.ascontiguousarray(np.swapaxes(kh, -1, -2))) / math.sqrt(qh.shape[-1])


def attention_logits(f_l, f_c, f_s, proj: ProjectionSet, cfg: FusionConfig | None = None) -> np.ndarray:
    """Pre-softmax logits, used for probing which block a query prefers."""
    cfg = cfg or FusionConfig()
    fl, fc, fs = _check_inputs(f_l, f_c, f_s, proj)
    lat = latent_tokens(fl)
    return logits_projected(
        _project_full(lat, proj.w_q),
        _project_full(lat, proj.w_k),
        _project_full(appearance_tokens(fc), proj.w_k),
        _project_full(appearance_tokens(fs), proj.w_k),
        proj.heads,
        cfg,
    )
