"""One-vs-all open classifier on the content latent.

Each known class k owns a pair of logits (in_k, out_k).  The OOD score of an
instance is the out-probability of the pair belonging to its predicted class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, as_tensor, concat, no_grad
from .model import ModelParams, classify_class, encode_content, mlp

OOD_THRESHOLD = 0.5


@dataclass
class OvaLogits:
    in_logits: Tensor
    out_logits: Tensor

    @classmethod
    def from_pairs(cls, in_logits, out_logits) -> "OvaLogits":
        return cls(as_tensor(np.atleast_2d(in_logits)), as_tensor(np.atleast_2d(out_logits)))

    @property
    def num_classes(self) -> int:
        return self.in_logits.shape[-1]


def ova_features(c_mean) -> Tensor:
    """Linear and squared content coordinates; the squares let a ReLU head
    carve out a bounded "in" region instead of a half-space."""
    c = as_tensor(c_mean)
    return concat([c, c.square()], axis=-1)


def ova_logits(c_mean, params: ModelParams) -> OvaLogits:
    out = mlp(ova_features(c_mean), params.ova)
    k = out.shape[-1] // 2
    return OvaLogits(out[:, :k], out[:, k:])


def _log_sigmoid(z: Tensor) -> Tensor:
    return -(-z).softplus()


def ova_loss(logits: OvaLogits, y, is_unknown, all_heads: bool = False) -> Tensor:
    """Mean binary log-loss over the batch.

    Known rows push in > out at their own head and out > in everywhere else.
    Unknown rows push out > in at the head of their original label only, or
    at every head when ``all_heads`` is set.
    """
    k = logits.num_classes
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"class label out of range [0, {k})")
    unknown = np.broadcast_to(np.asarray(is_unknown, dtype=bool), y.shape)
    margin = logits.in_logits - logits.out_logits
    own = np.zeros((len(y), k), dtype=margin.dtype)
    own[np.arange(len(y)), y] = 1.0
    # +1: push in>out, -1: push out>in, 0: no supervision
    unknown_target = -np.ones_like(own) if all_heads else -own
    target = np.where(unknown[:, None], unknown_target, 2 * own - 1)
    per_pair = -_log_sigmoid(margin * target) * np.abs(target)
    return per_pair.sum() * (1.0 / len(y))


def ova_score_from_logits(logits: OvaLogits, k_star) -> np.ndarray:
    """Out-probability softmax(in, out)[out] at head ``k_star`` of each row."""
    rows = np.arange(len(k_star))
    m = logits.out_logits.data[rows, k_star] - logits.in_logits.data[rows, k_star]
    return 0.5 * (1.0 + np.tanh(0.5 * m))


def ova_score(x, params: ModelParams) -> np.ndarray:
    """OOD score in [0, 1] for each row of ``x`` using the content branch only."""
    with no_grad():
        mean = encode_content(np.atleast_2d(np.asarray(x)), params).mean
        k_star = classify_class(mean, params).data.argmax(axis=-1)
        return ova_score_from_logits(ova_logits(mean, params), k_star)


def is_ood(score) -> np.ndarray | bool:
    """True where the score reaches the threshold; a tie counts as OOD."""
    out = np.asarray(score) >= OOD_THRESHOLD
    return bool(out) if out.ndim == 0 else out
