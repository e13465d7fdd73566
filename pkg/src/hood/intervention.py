"""Adversarial interventions on content or style.

A positive intervention perturbs the style while holding content fixed and
yields benign samples; a negative one perturbs content while holding style
fixed and yields malign samples.  Perturbations are found by projected
gradient descent inside an epsilon-ball around the original input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NonFiniteError, Tensor, as_tensor, backprop, cross_entropy, no_grad
from .data import BENIGN, MALIGN
from .model import ModelParams, encode_content, encode_style, mlp

MODES = ("positive", "positive_targeted", "negative")


@dataclass
class InterventionConfig:
    epsilon: float = 0.03
    steps: int = 15
    step_size: float | None = None
    norm: str = "inf"
    mode: str = "positive"
    target_domain: int | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is None:
            self.step_size = self.epsilon / 4
        if self.epsilon > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.norm not in ("inf", "2"):
            raise ValueError("norm must be 'inf' or '2'")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "positive_targeted" and self.target_domain is None:
            raise ValueError("positive_targeted mode needs target_domain")


@dataclass
class AugmentedSample:
    """A batch of perturbed inputs with their provenance.

    ``label`` is always the class of the origin; malign rows are marked by
    ``kind`` and must be treated as unknown for that class.
    """

    x_aug: np.ndarray
    origin_index: np.ndarray
    label: np.ndarray
    domain: np.ndarray
    kind: np.ndarray

    def __len__(self):
        return len(self.x_aug)

    @classmethod
    def empty(cls, dim: int) -> "AugmentedSample":
        z = np.zeros(0, np.int64)
        return cls(np.zeros((0, dim), np.float32), z, z, z, z)

    @classmethod
    def concat(cls, parts) -> "AugmentedSample":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("x_aug", "origin_index", "label", "domain", "kind")))


def content_distance(p, q) -> Tensor:
    """Squared Euclidean distance between posterior means (per row for batches)."""
    a, b = p.mean, q.mean
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("latent dimensions differ")
    return (a - b).square().sum(axis=-1)


style_distance = content_distance


def _head_dim(layers: dict) -> int:
    n = sum(1 for k in layers if k.endswith(".w"))
    return layers[f"{n - 1}.w"].shape[1]


def _check_labels(labels, n_max, what):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_max:
        raise ValueError(f"{what} label out of range [0, {n_max})")
    return labels


def _prep(x, e):
    x = as_tensor(x)
    e = as_tensor(e, x.dtype)
    if x.shape != e.shape:
        raise ValueError("perturbation must have the shape of x")
    return x, e


def _squeeze(v: Tensor, x: Tensor) -> Tensor:
    return v.reshape(()) if x.ndim == 1 else v


def _batch(t: Tensor) -> Tensor:
    return t.reshape(1, -1) if t.ndim == 1 else t


def loss_pos(x, e, d, params: ModelParams, _content_ref=None) -> Tensor:
    """Content drift minus domain cross-entropy at ``x + e``.

    Minimising keeps content close while pushing the style away from ``d``.
    """
    return _pos(x, e, d, params, sign=-1.0, content_ref=_content_ref)


def loss_pos_targeted(x, e, d_prime, params: ModelParams, _content_ref=None) -> Tensor:
    """Content drift plus cross-entropy towards the target domain ``d_prime``."""
    return _pos(x, e, d_prime, params, sign=+1.0, content_ref=_content_ref)


def _pos(x, e, d, params, sign, content_ref=None):
    x, e = _prep(x, e)
    d = _check_labels(d, _head_dim(params.phi_s), "domain")
    xb, eb = _batch(x), _batch(e)
    ref = content_ref if content_ref is not None else _ref(encode_content, xb, params)
    xe = xb + eb
    drift = content_distance(ref, encode_content(xe, params))
    ce = cross_entropy(mlp(encode_style(xe, params).mean, params.phi_s), d)
    return _squeeze(drift + sign * ce, x)


def loss_neg(x, e, y, params: ModelParams, _style_ref=None) -> Tensor:
    """Style drift minus class cross-entropy at ``x + e``.

    Minimising keeps style close while pushing the content away from class ``y``.
    """
    x, e = _prep(x, e)
    y = _check_labels(y, _head_dim(params.phi_c), "class")
    xb, eb = _batch(x), _batch(e)
    ref = _style_ref if _style_ref is not None else _ref(encode_style, xb, params)
    xe = xb + eb
    drift = style_distance(ref, encode_style(xe, params))
    ce = cross_entropy(mlp(encode_content(xe, params).mean, params.phi_c), y)
    return _squeeze(drift - ce, x)


def _ref(encoder, x, params):
    with no_grad():
        post = encoder(x, params)
    return post


def objective(x, e, y, d, cfg: InterventionConfig, params: ModelParams, ref=None) -> Tensor:
    """Per-row intervention objective selected by ``cfg.mode``."""
    if cfg.mode == "positive":
        return loss_pos(x, e, d, params, _content_ref=ref)
    if cfg.mode == "positive_targeted":
        target = np.full(len(np.atleast_2d(np.asarray(x))), cfg.target_domain)
        return loss_pos_targeted(x, e, target, params, _content_ref=ref)
    return loss_neg(x, e, y, params, _style_ref=ref)


def _project(e, x, cfg, value_range):
    if cfg.norm == "inf":
        e = np.clip(e, -cfg.epsilon, cfg.epsilon)
    else:
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        e = e * np.minimum(1.0, cfg.epsilon / np.maximum(norms, 1e-12))
    lo, hi = value_range
    return np.clip(x + e, lo, hi) - x


def pgd_augment(x, y, d, cfg: InterventionConfig, params: ModelParams,
                value_range=(0.0, 1.0), origin_index=None) -> AugmentedSample:
    """Multi-step projected gradient descent on the selected objective.

    A single running perturbation is kept inside the epsilon-ball around the
    original ``x`` and inside ``value_range``.  The best iterate per row
    (including the unperturbed start) is returned, so the objective at the
    result never exceeds its value at ``e = 0``.
    """
    x = np.atleast_2d(np.asarray(x))
    n = len(x)
    y = np.broadcast_to(np.asarray(y), (n,)).astype(np.int64)
    d = np.broadcast_to(np.asarray(d), (n,)).astype(np.int64)
    origin = np.arange(n) if origin_index is None else np.asarray(origin_index)
    kind = np.full(n, MALIGN if cfg.mode == "negative" else BENIGN)
    domain = np.full(n, cfg.target_domain) if cfg.mode == "positive_targeted" else d.copy()
    if cfg.epsilon == 0:
        return AugmentedSample(x.copy(), origin, y.copy(), domain, kind)

    xt = Tensor(x)
    encoder = encode_style if cfg.mode == "negative" else encode_content
    ref = _ref(encoder, xt, params)
    e = np.zeros_like(x)
    best_e = e.copy()
    with no_grad():
        best_val = objective(xt, Tensor(e), y, d, cfg, params, ref).data.copy()
    for step in range(cfg.steps):
        et = Tensor(e, requires_grad=True)
        vals = objective(xt, et, y, d, cfg, params, ref)
        if step:
            improved = vals.data < best_val
            best_val = np.where(improved, vals.data, best_val)
            best_e[improved] = e[improved]
        try:
            (g,) = backprop(vals.sum(), [et])
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite intervention gradient at step {step}: {exc}") from exc
        if cfg.norm == "inf":
            direction = np.sign(g)
        else:
            direction = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        e = _project(e - cfg.step_size * direction, x, cfg, value_range).astype(x.dtype)
    with no_grad():
        final = objective(xt, Tensor(e), y, d, cfg, params, ref).data
    improved = final < best_val
    best_e[improved] = e[improved]
    x_aug = np.clip(x + best_e, *value_range).astype(x.dtype)
    return AugmentedSample(x_aug, origin, y.copy(), domain, kind)
