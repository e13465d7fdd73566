"""Style pool used to create domain labels, and held-out test corruptions.

The two tables are disjoint so that corrupted accuracy measures robustness to
styles never seen in training.
"""
from __future__ import annotations

import numpy as np

MAX_SEVERITY = 5


def _brightness(x):
    return x + 0.15


def _contrast(x):
    m = x.mean(axis=-1, keepdims=True)
    return m + 1.8 * (x - m)


def _roll(x):
    return np.roll(x, x.shape[-1] // 4, axis=-1)


def _sinusoid(x):
    i = np.arange(x.shape[-1])
    return x + 0.12 * np.sin(2 * np.pi * 4 * i / x.shape[-1])


def _invert(x):
    return 1.0 - x


def _tilt(x):
    return x + np.linspace(-0.15, 0.15, x.shape[-1])


# index 0 is the untouched original; pool sizes take a prefix of this list
STYLE_POOL = (
    ("brightness", _brightness),
    ("contrast", _contrast),
    ("roll", _roll),
    ("sinusoid", _sinusoid),
    ("invert", _invert),
    ("tilt", _tilt),
)
DEFAULT_NUM_AUGMENTATIONS = 4

CORRUPTIONS = ("gaussian_noise", "smoothing", "gamma")


def style_names(num_augmentations: int = DEFAULT_NUM_AUGMENTATIONS) -> list[str]:
    return ["identity"] + [name for name, _ in STYLE_POOL[:num_augmentations]]


def apply_style_pool(x, aug_id: int, num_augmentations: int = DEFAULT_NUM_AUGMENTATIONS,
                     value_range=(0.0, 1.0)):
    """Apply style ``aug_id`` (0 = identity) and return ``(x_styled, domain_label)``."""
    if not 1 <= num_augmentations <= len(STYLE_POOL):
        raise ValueError(f"pool size must be in [1, {len(STYLE_POOL)}]")
    if not 0 <= aug_id <= num_augmentations:
        raise ValueError(f"aug_id {aug_id} outside [0, {num_augmentations}]")
    x = np.asarray(x)
    if aug_id == 0:
        return x.copy(), 0
    out = STYLE_POOL[aug_id - 1][1](x)
    return np.clip(out, *value_range).astype(x.dtype, copy=False), aug_id


def apply_styles(x, aug_ids, num_augmentations=DEFAULT_NUM_AUGMENTATIONS, value_range=(0.0, 1.0)):
    """Row-wise :func:`apply_style_pool` for a batch with per-row style ids."""
    x = np.asarray(x)
    aug_ids = np.asarray(aug_ids)
    out = x.copy()
    for a in np.unique(aug_ids):
        rows = aug_ids == a
        out[rows] = apply_style_pool(x[rows], int(a), num_augmentations, value_range)[0]
    return out


def _smooth(x):
    k = np.array([0.25, 0.5, 0.25])
    padded = np.concatenate([x[..., :1], x, x[..., -1:]], axis=-1)
    return k[0] * padded[..., :-2] + k[1] * padded[..., 1:-1] + k[2] * padded[..., 2:]


def corrupt(x, kind: str, severity: int, seed: int = 0, value_range=(0.0, 1.0)):
    """Parametric corruption at severity 0 (identity) to 5.

    Each kind moves monotonically further from ``x`` as severity grows.
    """
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    if not 0 <= severity <= MAX_SEVERITY:
        raise ValueError(f"severity must be in [0, {MAX_SEVERITY}]")
    x = np.asarray(x)
    if severity == 0:
        return x.copy()
    if kind == "gaussian_noise":
        z = np.random.default_rng(seed).standard_normal(x.shape)
        out = x + 0.04 * severity * z
    elif kind == "smoothing":
        blurred = x
        for _ in range(3):
            blurred = _smooth(blurred)
        a = severity / MAX_SEVERITY
        out = (1 - a) * x + a * blurred
    else:
        lo, hi = value_range
        unit = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        out = lo + (hi - lo) * unit ** (1.0 + 0.3 * severity)
    return np.clip(out, *value_range).astype(x.dtype, copy=False)
