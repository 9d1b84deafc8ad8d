"""Background-suppressed adversarial feature alignment.

A per-position domain discriminator sits behind a gradient reversal layer.
Its binary cross-entropy map is weighted by a feature-richness map that keeps
only the top-k fraction of positions (or by a channel-attention map).
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

PROB_EPS = 1e-7
SUPPRESSION_MODES = ("frs_topk", "ca", "none")


def init_discriminator(channels: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xD15C]))
    hidden = max(1, channels // 2)
    p = {
        "disc1.w": rng.standard_normal((channels, hidden)) * math.sqrt(2.0 / channels),
        "disc1.b": np.zeros(hidden),
        "disc2.w": rng.standard_normal((hidden, 1)) * math.sqrt(1.0 / hidden),
        "disc2.b": np.zeros(1),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def discriminate(features: Tensor, params: dict[str, Tensor], lambda_g: float = 1.0,
                 reverse: bool = True) -> Tensor:
    """Source-probability map (N, H, W) for an (N, H, W, d) feature map."""
    x = ag.grl(features, lambda_g) if reverse else features
    x = ag.relu(ag.matmul(x, params["disc1.w"]) + params["disc1.b"])
    x = ag.sigmoid(ag.matmul(x, params["disc2.w"]) + params["disc2.b"])
    n, h, w, _ = x.shape
    return ag.reshape(x, (n, h, w))


def frs(cls_logits) -> np.ndarray:
    """Feature-richness score: per-position max sigmoid over anchor logits.

    Works on detached values; the map acts as a weight, not a variable.
    """
    logits = cls_logits.data if isinstance(cls_logits, Tensor) else np.asarray(cls_logits)
    m = logits.max(axis=-1)
    # sigmoid is monotone so max commutes with it
    e = np.exp(-np.abs(m))
    return np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def retained_count(k: float, n_positions: int) -> int:
    if not 0.0 < k <= 1.0:
        raise ValueError(f"suppression fraction k must be in (0, 1], got {k}")
    # guard against float noise such as 0.2 * 10 = 2.0000000000000004
    return min(n_positions, math.ceil(round(k * n_positions, 9)))


def region_partition(s: np.ndarray, k: float) -> np.ndarray:
    """Zero all but the top ceil(k * positions) entries of each map.

    ``s`` is one map (H, W) or a batch (N, H, W); ties at the cutoff go to the
    lower row-major index.
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 2
    batch = s[None] if single else s
    n = batch.shape[0]
    flat = batch.reshape(n, -1)
    keep = retained_count(k, flat.shape[1])
    out = np.zeros_like(flat)
    for i in range(n):
        order = np.argsort(-flat[i], kind="stable")[:keep]
        out[i, order] = flat[i, order]
    out = out.reshape(batch.shape)
    return out[0] if single else out


def support_mask(s: np.ndarray, k: float) -> np.ndarray:
    """Boolean mask of the positions retained by :func:`region_partition`."""
    s = np.asarray(s, dtype=np.float64)
    batch = s[None] if s.ndim == 2 else s
    flat = batch.reshape(batch.shape[0], -1)
    keep = retained_count(k, flat.shape[1])
    mask = np.zeros(flat.shape, dtype=bool)
    for i in range(flat.shape[0]):
        mask[i, np.argsort(-flat[i], kind="stable")[:keep]] = True
    mask = mask.reshape(batch.shape)
    return mask[0] if s.ndim == 2 else mask


def adv_loss(d_out, domain: str):
    """Per-position BCE: -log D for source, -log(1 - D) for target."""
    if domain not in ("source", "target", "S", "T"):
        raise ValueError(f"unknown domain {domain!r}")
    is_source = domain in ("source", "S")
    if isinstance(d_out, Tensor):
        p = ag.clip(d_out, PROB_EPS, 1.0 - PROB_EPS)
        return ag.mul(ag.log(p if is_source else 1.0 - p), -1.0)
    p = np.clip(np.asarray(d_out, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return -np.log(p if is_source else 1.0 - p)


def rs_loss(weights: np.ndarray, adv_map, n_retained=None, normalize: bool = True):
    """Weighted sum of the adversarial map, per sample then averaged over the batch.

    With ``normalize`` each sample's sum is divided by its retained-position
    count (``n_retained`` or the number of non-zero weights).
    """
    weights = np.asarray(weights, dtype=np.float64)
    shape = adv_map.shape
    if weights.shape != tuple(shape):
        raise ag.ShapeError(f"rs_loss: weight shape {weights.shape} vs loss shape {tuple(shape)}")
    single = len(shape) <= 2
    w = weights[None] if single else weights
    n = w.shape[0]
    if normalize:
        if n_retained is None:
            counts = (w.reshape(n, -1) != 0).sum(axis=1).astype(np.float64)
        else:
            counts = np.broadcast_to(np.asarray(n_retained, dtype=np.float64), (n,))
        scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0) / n
    else:
        scale = np.full(n, 1.0 / n)
    w = w * scale.reshape((n,) + (1,) * (w.ndim - 1))
    if single:
        w = w[0]
    if isinstance(adv_map, Tensor):
        return ag.reduce_sum(adv_map * w)
    return float(np.sum(np.asarray(adv_map) * w))


def ca_weight(features, beta: float) -> np.ndarray:
    """Channel-attention weight 1 + beta * mean_d |F| per position (detached)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    return 1.0 + beta * np.abs(f).mean(axis=-1)


def suppression_weights(mode: str, cls_logits, features, k: float = 0.2, beta: float = 2.0):
    """Per-position weights for the adversarial map under the configured mode."""
    if mode == "frs_topk":
        return region_partition(frs(cls_logits), k)
    if mode == "ca":
        return ca_weight(features, beta)
    if mode == "none":
        f = features.data if isinstance(features, Tensor) else np.asarray(features)
        return np.ones(f.shape[:-1])
    raise ValueError(f"unknown suppression mode {mode!r}; expected one of {SUPPRESSION_MODES}")


def domain_loss(features: Tensor, cls_logits, disc: dict[str, Tensor], domain: str,
                mode: str = "frs_topk", k: float = 0.2, beta: float = 2.0,
                lambda_g: float = 1.0, normalize: bool = True) -> Tensor:
    """Region-suppressed adversarial loss for one domain's batch."""
    d = discriminate(features, disc, lambda_g)
    weights = suppression_weights(mode, cls_logits, features, k, beta)
    n_hw = weights.shape[-2] * weights.shape[-1]
    # dense modes average over every position
    n_keep = retained_count(k, n_hw) if mode == "frs_topk" else n_hw
    return rs_loss(weights, adv_loss(d, domain), n_keep, normalize=normalize)
