"""Per-channel statistics and adaptive instance normalization of token sets.

Statistics pool every token of the matrix (all streams and views of a feature
set together), one value per channel. Variance is the population variance;
``eps`` sits inside the square root so a single token is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import DomainError, ShapeError, TokenMatrix, as_array

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray


def channel_stats(t, eps: float = DEFAULT_EPS) -> ChannelStats:
    x = as_array(t)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"channel_stats needs a non-empty T x C matrix, got {x.shape}")
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    return ChannelStats(mu=mu, sigma=np.sqrt(var + eps))


def adain_array(content: np.ndarray, style: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Array-level AdaIN; channels are the last axis, statistics pool all leading axes."""
    if content.shape[-1] != style.shape[-1]:
        raise ShapeError(
            f"adain channel mismatch: content {content.shape} vs style {style.shape}"
        )
    c = channel_stats(content.reshape(-1, content.shape[-1]), eps)
    s = channel_stats(style.reshape(-1, style.shape[-1]), eps)
    return s.sigma * ((content - c.mu) / c.sigma) + s.mu


def adain(content, style, eps: float = DEFAULT_EPS) -> TokenMatrix:
    """Re-normalize ``content`` tokens to the per-channel mean/std of ``style``.

    Token counts may differ; only the statistics of ``style`` matter.
    """
    c = as_array(content)
    s = as_array(style)
    if c.ndim != 2 or s.ndim != 2:
        raise ShapeError(f"adain expects token matrices, got {c.shape} and {s.shape}")
    src = content.source_shape if isinstance(content, TokenMatrix) else None
    return TokenMatrix(adain_array(c, s, eps), source_shape=src)


def adain_backward(content: np.ndarray, style: np.ndarray, grad_out: np.ndarray, eps: float = DEFAULT_EPS):
    """Gradients of ``sum(grad_out * adain(content, style))`` w.r.t. both inputs.

    Exact through the mean and standard deviation of each argument.
    """
    ch = content.shape[-1]
    xc = content.reshape(-1, ch)
    xs = style.reshape(-1, ch)
    g = grad_out.reshape(-1, ch)
    cs = channel_stats(xc, eps)
    ss = channel_stats(xs, eps)
    n_c = xc.shape[0]
    n_s = xs.shape[0]
    xhat = (xc - cs.mu) / cs.sigma

    # style side: out = sigma_s * xhat + mu_s
    d_sigma_s = (g * xhat).sum(axis=0)
    d_mu_s = g.sum(axis=0)
    d_style = d_mu_s / n_s + (d_sigma_s / ss.sigma) * (xs - ss.mu) / n_s

    # content side: standard normalization backward
    g_hat = g * ss.sigma
    d_content = (g_hat - g_hat.mean(axis=0) - xhat * (g_hat * xhat).mean(axis=0)) / cs.sigma
    return d_content.reshape(content.shape), d_style.reshape(style.shape)
