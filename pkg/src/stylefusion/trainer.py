"""Fine-tuning of the style path with the content path frozen.

Plain gradient descent on the fused-output MSE, one sample (all of its
views) per step. With probability ``cfg_dropout_prob`` a step sees zeroed
style views, which trains the unconditional branch that
:func:`cfg_combine` extrapolates from at inference time.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamVector, init_style_params, loss_and_grad, loss_forward, model_forward
from .fusion import FusionConfig, ProjectionSet
from .synth import DEFAULT_SCALE, WORLD_SEED, StylePairSample
from .tensor_core import (
    DomainError,
    FeatureMap,
    NumericError,
    SeededRng,
    ShapeError,
    as_array,
    derive_seed,
    normal_array,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SFT1"
# logit of a token against itself is QK_GAIN**2 per head
QK_GAIN = 3.0
V_NOISE = 0.05


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    steps: int = 800
    cfg_weight: float = 3.0
    views_per_batch: int = 16
    cfg_dropout_prob: float = 0.1
    seed: int = 0
    pairing_mode: str = "as_written"
    probe_samples: int = 24

    def __post_init__(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise DomainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        if not self.cfg_weight > 0:
            raise DomainError(f"cfg_weight must be positive, got {self.cfg_weight}")
        if self.views_per_batch < 1:
            raise DomainError(f"views_per_batch must be positive, got {self.views_per_batch}")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise DomainError(f"cfg_dropout_prob must lie in [0, 1], got {self.cfg_dropout_prob}")
        if self.probe_samples < 1:
            raise DomainError("probe_samples must be positive")

    def fusion(self) -> FusionConfig:
        # key scaling is an inference-time control; training runs the unscaled path
        return FusionConfig(tau=1.0, pairing_mode=self.pairing_mode)


def content_projections(channels: int = 8, heads: int = 2, seed: int = WORLD_SEED,
                        scale: float = DEFAULT_SCALE) -> ProjectionSet:
    """The frozen content path: similarity attention ``W_Q = W_K = (QK_GAIN/scale) I`` and ``W_V = I + noise``."""
    w = normal_array((channels, channels), derive_seed(seed, 7))
    qk = (QK_GAIN / scale) * np.eye(channels)
    return ProjectionSet(qk, qk.copy(), np.eye(channels) + V_NOISE * w, heads)


def checksum(content: ProjectionSet) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<I", content.heads))
    for m in (content.w_q, content.w_k, content.w_v):
        h.update(m.astype("<f8").tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    params: ParamVector
    content: ProjectionSet
    frozen_checksum: str
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    dropped: list[bool] = field(default_factory=list)
    frozen_ok: list[bool] = field(default_factory=list)
    probe_initial: float = float("nan")
    probe_final: float = float("nan")


def freeze_check(state: TrainState) -> bool:
    return checksum(state.content) == state.frozen_checksum


def cfg_combine(uncond, cond, w: float):
    """Guided output ``uncond + w*(cond - uncond)``, evaluated as ``(1-w)*uncond + w*cond``.

    The second form returns ``uncond`` exactly at w=0 and ``cond`` exactly at w=1.
    """
    u = as_array(uncond)
    c = as_array(cond)
    if u.shape != c.shape:
        raise ShapeError(f"cfg_combine shape mismatch: {u.shape} vs {c.shape}")
    out = (1.0 - w) * u + w * c
    return FeatureMap(out) if isinstance(cond, FeatureMap) else out


def _view_batch(sample: StylePairSample, views: int, start: int) -> StylePairSample:
    n = sample.content_views.views
    if views > n:
        raise ShapeError(f"views_per_batch={views} exceeds the {n} views of a sample")
    if views == n:
        return sample
    idx = (start + np.arange(views)) % n
    pick = lambda f: FeatureMap(f.data[:, idx])  # noqa: E731
    return StylePairSample(pick(sample.content_views), pick(sample.style_views), pick(sample.target_views),
                           pick(sample.depth_views), sample.view_angles[idx], sample.content_identity,
                           sample.style_identity, sample.style_domain)


def probe_indices(n_samples: int, count: int) -> list[int]:
    """``count`` indices spread evenly over the dataset, so every style domain and many identities appear."""
    count = min(count, n_samples)
    return [(i * n_samples) // count for i in range(count)]


def probe_loss(params, dataset, content, cfg: TrainConfig) -> float:
    """Mean conditional loss over a fixed, evenly spread probe set."""
    fusion = cfg.fusion()
    return float(np.mean([
        loss_forward(params, _view_batch(dataset[i], cfg.views_per_batch, 0), fusion, content)
        for i in probe_indices(len(dataset), cfg.probe_samples)
    ]))


def train_style_path(dataset, cfg: TrainConfig | None = None, content: ProjectionSet | None = None,
                     params: ParamVector | None = None) -> TrainState:
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    first = dataset[0]
    if content is None:
        content = content_projections(first.content_views.channels)
    params = params or init_style_params(content)
    state = TrainState(params=params, content=content, frozen_checksum=checksum(content))
    fusion = cfg.fusion()

    order = np.argsort(SeededRng(derive_seed(cfg.seed, 11)).uniform(len(dataset)), kind="stable")
    drops = SeededRng(derive_seed(cfg.seed, 12)).uniform(max(cfg.steps, 1)) < cfg.cfg_dropout_prob
    starts = SeededRng(derive_seed(cfg.seed, 13)).integers(first.content_views.views, max(cfg.steps, 1))

    state.probe_initial = probe_loss(state.params, dataset, content, cfg)
    for t in range(cfg.steps):
        batch = _view_batch(dataset[int(order[t % len(dataset)])], cfg.views_per_batch, int(starts[t]))
        loss, grad = loss_and_grad(state.params, batch, fusion, content, drop_style=bool(drops[t]))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {t}")
        if cfg.learning_rate:
            state.params = state.params.with_flat(state.params.flat - cfg.learning_rate * grad.flat)
        state.step = t + 1
        state.loss_history.append(loss)
        state.dropped.append(bool(drops[t]))
        state.frozen_ok.append(freeze_check(state))
        if not state.frozen_ok[-1]:
            raise RuntimeError(f"content path changed at step {t}")
        if t % 100 == 0:
            log.info("step %d loss %.6g", t, loss)
    state.probe_final = probe_loss(state.params, dataset, content, cfg)
    return state


def infer(params: ParamVector, content: ProjectionSet, sample: StylePairSample, fusion: FusionConfig,
          cfg_weight: float = 1.0, style_views_2=None):
    """Guided fused output for a sample; returns ``(FeatureMap, FusedOutput of the conditional pass)``."""
    cond = model_forward(params, content, sample.content_views, sample.style_views, fusion, style_views_2)
    if cfg_weight == 1.0:
        return cond.features, cond
    uncond = model_forward(params, content, sample.content_views, sample.style_views, fusion, style_views_2,
                           drop_style=True)
    return cfg_combine(uncond.features, cond.features, cfg_weight), cond


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> Path:
    """``SFT1`` | u32 header length | JSON header | trainable f64 LE | frozen f64 LE.

    The loss history goes to a ``.loss.csv`` sidecar next to ``path``.
    """
    path = Path(path)
    header = {
        "config": asdict(cfg),
        "params": [{"name": n, "shape": list(state.params.shapes[n])} for n in state.params.names],
        "channels": state.content.channels,
        "heads": state.content.heads,
        "frozen_checksum": state.frozen_checksum,
        "step": state.step,
        "probe_initial": state.probe_initial,
        "probe_final": state.probe_final,
        **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    frozen = np.concatenate([m.reshape(-1) for m in (state.content.w_q, state.content.w_k, state.content.w_v)])
    path.write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob
        + state.params.flat.astype("<f8").tobytes() + frozen.astype("<f8").tobytes()
    )
    with open(loss_sidecar(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "style_dropped", "frozen_ok"])
        for i, (loss, dropped, ok) in enumerate(zip(state.loss_history, state.dropped, state.frozen_ok)):
            w.writerow([i, repr(loss), int(dropped), int(ok)])
    return path


def loss_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".loss.csv")


def load_checkpoint(path) -> tuple[ParamVector, ProjectionSet, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8 : 8 + n])
    body = np.frombuffer(buf[8 + n :], dtype="<f8")
    c = header["channels"]
    sizes = [int(np.prod(p["shape"])) for p in header["params"]]
    total = sum(sizes)
    if body.size != total + 3 * c * c:
        raise ShapeError(f"{path}: payload has {body.size} floats, expected {total + 3 * c * c}")
    arrays, off = {}, 0
    for p, size in zip(header["params"], sizes):
        arrays[p["name"]] = body[off : off + size].reshape(p["shape"])
        off += size
    w = body[total:].reshape(3, c, c)
    content = ProjectionSet(w[0], w[1], w[2], header["heads"])
    if checksum(content) != header["frozen_checksum"]:
        raise ValueError(f"{path}: frozen projections do not match their checksum")
    return ParamVector(arrays), content, header
