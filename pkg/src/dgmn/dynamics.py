"""Joint prediction of per-position grouped filter weights and tap affinities.

A single dilated 3x3 convolution over the feature map emits K*G + K channels
per position: the first K*G are the dynamic grouped filter weights (tap-major,
group-minor: channel j*G + g is the weight of tap j for channel group g), the
last K are affinity logits in tap order. Affinities are normalized per site
with a softmax over the K taps.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Conv2dParams, conv2d, softmax_lastk, softmax_lastk_backward


class DynamicField:
    """Per-position dynamics: weights (n, K, G, h, w) or a shared (K, G) table,
    plus normalized affinities (n, K, h, w) summing to 1 over taps."""

    def __init__(self, weights: np.ndarray, affinities: np.ndarray):
        self.weights = weights
        self.affinities = affinities


def dyn_out_channels(taps: int, groups: int, with_weights: bool = True,
                     with_affinity: bool = True) -> int:
    return taps * groups * with_weights + taps * with_affinity


def predict_dynamic(
    feat: np.ndarray,
    dyn_conv: Conv2dParams,
    taps: int,
    groups: int,
    with_weights: bool = True,
    with_affinity: bool = True,
):
    """Run the joint predictor and split its channels.

    Returns (raw_weights, logits): raw_weights is (n, K, G, h, w) or None when
    the filter half is disabled; logits is (n, K, h, w) or None when the
    affinity half is disabled. With both halves enabled the predictor must
    output exactly K*G + K channels.
    """
    expected = dyn_out_channels(taps, groups, with_weights, with_affinity)
    if expected == 0:
        raise ConfigError("predict_dynamic: at least one of weights/affinity required")
    if dyn_conv.c_out != expected:
        raise ConfigError(
            f"dynamic predictor must output {expected} channels, has {dyn_conv.c_out}"
        )
    raw = conv2d(feat, dyn_conv)
    n, _, h, w = raw.shape
    weights = None
    logits = None
    if with_weights:
        weights = raw[:, : taps * groups].reshape(n, taps, groups, h, w)
    if with_affinity:
        logits = raw[:, taps * groups if with_weights else 0 :]
    return weights, logits


def normalize_affinity(logits: np.ndarray) -> np.ndarray:
    """Per-site softmax over the K tap logits (axis 1 of (n, K, h, w))."""
    return softmax_lastk(logits, axis=1)


def normalize_affinity_backward(affinities: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return softmax_lastk_backward(affinities, grad_out, axis=1)


def merge_dynamic_grads(
    grad_weights: np.ndarray | None, grad_logits: np.ndarray | None
) -> np.ndarray:
    """Reassemble predictor-output gradients in the forward channel order."""
    parts = []
    if grad_weights is not None:
        n, K, G, h, w = grad_weights.shape
        parts.append(grad_weights.reshape(n, K * G, h, w))
    if grad_logits is not None:
        parts.append(grad_logits)
    if not parts:
        raise ConfigError("merge_dynamic_grads: nothing to merge")
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
