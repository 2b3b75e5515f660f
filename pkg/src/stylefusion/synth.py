"""Procedural multiview feature data with an analytic, view-consistent stylizer.

A head is a cylinder seen by a camera orbiting at angle ``theta``. Pixel
column ``x`` sees azimuth ``theta + x_off * FOV`` where ``x_off`` runs over
pixel centres in [-1/2, 1/2]; ``y_off`` is the same for rows. Channels come
in (cos, sin) pairs of a smooth phase field. For pair p::

    psi_p = PHASE_GAIN * (sum_k (A[p,k] cos(k*phi) + B[p,k] sin(k*phi)) * (1 + D[p]*y_off) + E[p]*y_off)
    f_2p, f_2p+1 = scale * cos(psi_p), scale * sin(psi_p)

with A, B, D, E a shared head template plus ``IDENTITY_SPREAD`` times a
linear function of the identity latent (fixed "world" mixing matrices), so
two identities seen from the same camera share their coarse layout. Every pair has norm ``scale``, so plain dot-product attention on
these features peaks on the token itself. The back stream is rendered at
``theta + pi``. Depth is the distance to a bumpy cylinder of radius
``1 + 0.1*tanh(g(phi, y))``.

Everything is smooth and 2*pi-periodic in ``theta``, so adjacent-view
differences are bounded by :func:`lipschitz_bound` times the angle step.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor_core import (
    DomainError,
    FeatureMap,
    SeededRng,
    derive_seed,
    normal_array,
    read_feature_map,
    write_feature_map,
)

LATENT_DIM = 8
HARMONICS = 3
FOV = math.pi / 2
CAMERA_DISTANCE = 3.0
WORLD_SEED = 20251
PHASE_GAIN = 1.5
DEFAULT_SCALE = 30.0
IDENTITY_SPREAD = 0.15
STYLE_BIAS = 0.5


@dataclass(frozen=True, eq=False)
class IdentityParams:
    latent: np.ndarray
    index: int = -1

    @classmethod
    def from_seed(cls, seed: int, index: int = -1) -> "IdentityParams":
        return cls(normal_array((LATENT_DIM,), seed), index)


@dataclass(frozen=True, eq=False)
class StyleParams:
    gain: np.ndarray
    bias: np.ndarray
    strength: float = 0.0
    warp_scale: float = 1.0
    index: int = -1

    def __post_init__(self):
        if np.any(np.asarray(self.gain) <= 0):
            raise DomainError("style gains must be positive")
        if not 0.0 <= self.strength <= 1.0:
            raise DomainError(f"style strength must lie in [0, 1], got {self.strength}")
        if not self.warp_scale > 0:
            raise DomainError("warp_scale must be positive")

    @classmethod
    def domain(cls, seed: int, index: int, channels: int, scale: float = DEFAULT_SCALE) -> "StyleParams":
        """Style domain ``index``: log-normal gains, biases of ``STYLE_BIAS * scale``, strength in [0, 0.7)."""
        rng = SeededRng(derive_seed(seed, 2, index))
        z = rng.normal(2 * channels)
        strength = float(0.7 * rng.uniform(1)[0])
        return cls(
            gain=np.exp(0.3 * z[:channels]),
            bias=STYLE_BIAS * scale * z[channels:],
            strength=strength,
            warp_scale=scale,
            index=index,
        )


@dataclass(frozen=True, eq=False)
class StylePairSample:
    content_views: FeatureMap  # (2, N, H, W, C)
    style_views: FeatureMap  # (2, N, H, W, C), other identity, stylized
    target_views: FeatureMap  # stylized content_views
    depth_views: FeatureMap  # (1, N, H, W, 1)
    view_angles: np.ndarray
    content_identity: int = -1
    style_identity: int = -1
    style_domain: int = -1


@lru_cache(maxsize=8)
def _world(channels: int, world_seed: int) -> np.ndarray:
    rows = 2 * channels * HARMONICS + 2 * channels + 2 * HARMONICS + 1
    return normal_array((rows, LATENT_DIM), world_seed) / math.sqrt(LATENT_DIM)


@lru_cache(maxsize=8)
def _template(channels: int, world_seed: int) -> np.ndarray:
    return normal_array((_world(channels, world_seed).shape[0],), derive_seed(world_seed, 99))


def _coefficients(identity: IdentityParams, channels: int, world_seed: int):
    m = _template(channels, world_seed) + IDENTITY_SPREAD * (_world(channels, world_seed) @ identity.latent)
    k = np.arange(1, HARMONICS + 1)
    parts = np.split(m, np.cumsum([channels * HARMONICS, channels * HARMONICS, channels, channels,
                                   HARMONICS, HARMONICS]))
    a = parts[0].reshape(channels, HARMONICS) / k
    b = parts[1].reshape(channels, HARMONICS) / k
    d = 0.5 * np.tanh(parts[2])
    e = 0.5 * parts[3]
    depth_a = 0.5 * parts[4] / k
    depth_b = 0.5 * parts[5] / k
    depth_c = float(parts[6][0])
    return a, b, d, e, depth_a, depth_b, depth_c


def _offsets(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n - 0.5


def view_angles(n_views: int) -> np.ndarray:
    return 2.0 * math.pi * np.arange(n_views) / n_views


def _phase(identity, thetas, resolution, pairs, world_seed):
    a, b, d, e, *_ = _coefficients(identity, pairs, world_seed)
    y = _offsets(resolution)
    x = _offsets(resolution)
    phi = thetas[:, None] + x[None, :] * FOV  # (N, W)
    k = np.arange(1, HARMONICS + 1)
    cos = np.cos(k[None, None, :] * phi[..., None])  # (N, W, K)
    sin = np.sin(k[None, None, :] * phi[..., None])
    ring = cos @ a.T + sin @ b.T  # (N, W, P)
    rows = 1.0 + d[None, :] * y[:, None]  # (H, P)
    psi = ring[:, None, :, :] * rows[None, :, None, :] + (e[None, :] * y[:, None])[None, :, None, :]
    return PHASE_GAIN * psi


def _field(identity, thetas, resolution, channels, scale, world_seed):
    psi = _phase(identity, thetas, resolution, (channels + 1) // 2, world_seed)
    f = np.stack([np.cos(psi), np.sin(psi)], axis=-1).reshape(psi.shape[:-1] + (-1,))
    return scale * f[..., :channels]


def _depth(identity, thetas, resolution, channels, world_seed):
    *_, da, db, dc = _coefficients(identity, channels, world_seed)
    y = _offsets(resolution)
    x = _offsets(resolution)
    phi = thetas[:, None] + x[None, :] * FOV
    k = np.arange(1, HARMONICS + 1)
    g = np.cos(k * phi[..., None]) @ da + np.sin(k * phi[..., None]) @ db  # (N, W)
    g = g[:, None, :] + dc * y[None, :, None]
    radius = 1.0 + 0.1 * np.tanh(g)
    return CAMERA_DISTANCE - radius * np.cos(x * FOV)[None, None, :]


def lipschitz_bound(identity: IdentityParams, channels: int = 8, scale: float = DEFAULT_SCALE,
                    world_seed: int = WORLD_SEED) -> float:
    """Upper bound on |d feature / d theta| over every pixel, channel and stream."""
    a, b, d, *_ = _coefficients(identity, (channels + 1) // 2, world_seed)
    k = np.arange(1, HARMONICS + 1)
    per_pair = (k * (np.abs(a) + np.abs(b))).sum(axis=1) * (1.0 + 0.5 * np.abs(d))
    return float(scale * PHASE_GAIN * per_pair.max())


def depth_lipschitz_bound(identity: IdentityParams, channels: int = 8, world_seed: int = WORLD_SEED) -> float:
    *_, da, db, _ = _coefficients(identity, channels, world_seed)
    k = np.arange(1, HARMONICS + 1)
    return float(0.1 * (k * (np.abs(da) + np.abs(db))).sum())


def render_views(identity: IdentityParams, n_views: int = 16, resolution: int = 8, seed: int = WORLD_SEED,
                 channels: int = 8, scale: float = DEFAULT_SCALE):
    """Render front/back feature streams, front depth and the view angles.

    ``seed`` picks the world mixing matrices shared by every identity.
    Returns ``(FeatureMap (2,N,R,R,C), FeatureMap (1,N,R,R,1), angles)``.
    """
    if n_views < 2:
        raise DomainError(f"need at least 2 views, got {n_views}")
    if resolution < 1 or channels < 1:
        raise DomainError("resolution and channels must be positive")
    angles = view_angles(n_views)
    front = _field(identity, angles, resolution, channels, scale, seed)
    back = _field(identity, angles + math.pi, resolution, channels, scale, seed)
    depth = _depth(identity, angles, resolution, channels, seed)
    return FeatureMap(np.stack([front, back])), FeatureMap(depth[None, ..., None]), angles


def warp(x: np.ndarray, strength: float, width: float) -> np.ndarray:
    """Strictly increasing bounded blend ``(1-s)*x + s*width*tanh(x/width)``."""
    if strength == 0.0:
        return x
    return (1.0 - strength) * x + strength * width * np.tanh(x / width)


def apply_style_operator(views: FeatureMap, style: StyleParams) -> FeatureMap:
    x = views.data if isinstance(views, FeatureMap) else np.asarray(views, dtype=np.float64)
    if x.shape[-1] != len(style.gain):
        raise DomainError(f"style has {len(style.gain)} channels, views have {x.shape[-1]}")
    return FeatureMap(style.gain * warp(x, style.strength, style.warp_scale) + style.bias)


class SynthDataset(Sequence):
    """Lazily materialized list of :class:`StylePairSample`.

    Sample ``k`` uses style domain ``k % n_styles`` and content identity
    ``(k // n_styles) % n_identities``; its style reference identity is drawn
    from the other identities with a per-sample seed.
    """

    def __init__(self, n_identities: int = 150, n_styles: int = 6, n_views: int = 16, seed: int = 0,
                 n_samples: int | None = None, resolution: int = 8, channels: int = 8,
                 scale: float = DEFAULT_SCALE, world_seed: int = WORLD_SEED):
        if n_identities < 2:
            raise DomainError("cross-identity pairing needs at least 2 identities")
        if n_styles < 1:
            raise DomainError("need at least one style domain")
        if n_views < 2:
            raise DomainError(f"need at least 2 views, got {n_views}")
        self.n_identities = n_identities
        self.n_styles = n_styles
        self.n_views = n_views
        self.seed = seed
        self.n_samples = n_identities * n_styles if n_samples is None else n_samples
        self.resolution = resolution
        self.channels = channels
        self.scale = scale
        self.world_seed = world_seed
        self.styles = [StyleParams.domain(seed, s, channels, scale) for s in range(n_styles)]
        self._renders: dict[int, tuple] = {}

    def __len__(self):
        return self.n_samples

    def identity(self, index: int) -> IdentityParams:
        return IdentityParams.from_seed(derive_seed(self.seed, 1, index), index)

    def render(self, index: int):
        if index not in self._renders:
            self._renders[index] = render_views(
                self.identity(index), self.n_views, self.resolution, self.world_seed, self.channels, self.scale
            )
        return self._renders[index]

    def style_partner(self, k: int, content_id: int) -> int:
        r = int(SeededRng(derive_seed(self.seed, 3, k)).integers(self.n_identities - 1, 1)[0])
        return r if r < content_id else r + 1

    def assignment(self, k: int) -> tuple[int, int, int]:
        """(content identity, style identity, style domain) for sample ``k``."""
        domain = k % self.n_styles
        content = (k // self.n_styles) % self.n_identities
        return content, self.style_partner(k, content), domain

    def make_sample(self, content_id: int, style_id: int, domain: int) -> StylePairSample:
        if content_id == style_id:
            raise DomainError("style reference must depict a different identity")
        style = self.styles[domain]
        content, depth, angles = self.render(content_id)
        other, _, _ = self.render(style_id)
        return StylePairSample(
            content_views=content,
            style_views=apply_style_operator(other, style),
            target_views=apply_style_operator(content, style),
            depth_views=depth,
            view_angles=angles,
            content_identity=content_id,
            style_identity=style_id,
            style_domain=domain,
        )

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        if k < 0:
            k += len(self)
        if not 0 <= k < len(self):
            raise IndexError(k)
        return self.make_sample(*self.assignment(k))

    def heldout(self, domain: int, offset: int = 0) -> StylePairSample:
        """Sample whose content identity was never used in training."""
        content = self.n_identities + offset
        # any training identity differs from a held-out one
        style = int(SeededRng(derive_seed(self.seed, 4, offset)).integers(self.n_identities, 1)[0])
        return self.make_sample(content, style, domain)

    def manifest(self) -> dict:
        return {
            "format": "stylefusion-dataset/1",
            "n_identities": self.n_identities,
            "n_styles": self.n_styles,
            "n_views": self.n_views,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "resolution": self.resolution,
            "channels": self.channels,
            "scale": self.scale,
            "world_seed": self.world_seed,
            "styles": [
                {"index": s.index, "gain": s.gain.tolist(), "bias": s.bias.tolist(), "strength": s.strength}
                for s in self.styles
            ],
            "samples": [],
        }


def make_dataset(n_identities: int = 150, n_styles: int = 6, n_views: int = 16, seed: int = 0,
                 **kw) -> SynthDataset:
    return SynthDataset(n_identities, n_styles, n_views, seed, **kw)


ROLES = ("content", "style", "target", "depth")


def write_dataset(ds: SynthDataset, root) -> Path:
    """One FeatureMap file per role per sample plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    man = ds.manifest()
    angles = view_angles(ds.n_views).tolist()
    for k in range(len(ds)):
        c, s, d = ds.assignment(k)
        sample = ds.make_sample(c, s, d)
        files = {}
        for role, fm in zip(ROLES, (sample.content_views, sample.style_views, sample.target_views,
                                    sample.depth_views)):
            name = f"{k:05d}_{role}.sfa"
            write_feature_map(root / name, fm)
            files[role] = name
        man["samples"].append({
            "index": k, "content_identity": c, "style_identity": s, "style_domain": d,
            "seed": derive_seed(ds.seed, 3, k), "angles": angles, "files": files,
        })
    (root / "manifest.json").write_text(json.dumps(man, indent=1))
    return root


class DiskDataset(Sequence):
    """Read-only view of a dataset directory written by :func:`write_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        self.n_views = self.manifest["n_views"]
        self.channels = self.manifest["channels"]

    def __len__(self):
        return len(self.manifest["samples"])

    def __getitem__(self, k):
        if k < 0:
            k += len(self)
        entry = self.manifest["samples"][k]
        maps = [read_feature_map(self.root / entry["files"][r]) for r in ROLES]
        return StylePairSample(*maps, view_angles=np.array(entry["angles"]),
                               content_identity=entry["content_identity"],
                               style_identity=entry["style_identity"],
                               style_domain=entry["style_domain"])

    def synthetic(self) -> SynthDataset:
        """Rebuild the generator this directory came from (for held-out identities)."""
        m = self.manifest
        return SynthDataset(m["n_identities"], m["n_styles"], m["n_views"], m["seed"], m["n_samples"],
                            m["resolution"], m["channels"], m["scale"], m["world_seed"])
