"""Synthetic datasets with known content and style factors, and their file format.

Each instance draws a content factor (class prototype plus within-class
spread) and an independent style factor (natural-domain prototype plus
spread) and renders ``x = offset + A @ content + B @ style + noise``.  The
class label depends on content only and the domain label on style only.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import binio

DATASET_MAGIC = b"HDAT"
DATASET_VERSION = 1

LABELED, UNLABELED, TEST = 0, 1, 2
SPLITS = {"labeled": LABELED, "unlabeled": UNLABELED, "test": TEST}

ORIGINAL, BENIGN, MALIGN = 0, 1, 2


@dataclass(frozen=True)
class FactorSpec:
    num_known_classes: int = 6
    num_unknown_classes: int = 4
    num_styles: int = 3
    factor_dim: int = 8
    input_dim: int = 64
    prototype_scale: float = 1.0
    within_class_spread: float = 0.15
    style_scale: float = 1.0
    style_spread: float = 0.15
    content_gain: float = 0.06
    style_gain: float = 0.04
    noise: float = 0.01
    value_range: tuple = (0.0, 1.0)
    num_labeled: int = 200
    num_unlabeled: int = 2000
    num_test: int = 1000
    unlabeled_unknown_fraction: float = 0.0
    test_unknown_fraction: float = 0.4
    source_styles: tuple | None = None
    target_styles: tuple | None = None

    @property
    def num_classes(self) -> int:
        return self.num_known_classes + self.num_unknown_classes

    def validate(self) -> None:
        if self.num_known_classes < 1:
            raise ValueError("need at least one known class")
        if self.num_unknown_classes < 0 or self.num_styles < 1:
            raise ValueError("invalid class/style counts")
        if self.input_dim < self.factor_dim:
            raise ValueError(f"input_dim {self.input_dim} too small to embed {self.factor_dim}-d factors")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError("empty value range")
        for styles in (self.source_styles, self.target_styles):
            if styles is not None and not all(0 <= s < self.num_styles for s in styles):
                raise ValueError("style index out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown FactorSpec fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("value_range", "source_styles", "target_styles"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class World:
    """Fixed random quantities shared by every instance drawn for one seed."""

    class_prototypes: np.ndarray
    style_prototypes: np.ndarray
    content_map: np.ndarray
    style_map: np.ndarray
    offset: float


@dataclass
class FactoredDataset:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    split: np.ndarray
    content_factors: np.ndarray
    style_factors: np.ndarray
    content_id: np.ndarray
    style_id: np.ndarray
    kind: np.ndarray
    origin: np.ndarray
    num_known_classes: int
    num_unknown_classes: int
    num_domains: int
    value_range: tuple = (0.0, 1.0)
    world: World | None = field(default=None, compare=False, repr=False)

    def __len__(self):
        return len(self.x)

    def subset(self, mask) -> "FactoredDataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        arrays = {k: getattr(self, k)[idx] for k in _ROW_FIELDS}
        return replace(self, **arrays)

    def part(self, split: str) -> "FactoredDataset":
        return self.subset(self.split == SPLITS[split])

    @property
    def is_known(self) -> np.ndarray:
        return self.y < self.num_known_classes

    def equals(self, other: "FactoredDataset") -> bool:
        """Bitwise equality of every stored column and header field."""
        if (self.num_known_classes, self.num_unknown_classes, self.num_domains) != (
                other.num_known_classes, other.num_unknown_classes, other.num_domains):
            return False
        if tuple(np.float32(v) for v in self.value_range) != tuple(np.float32(v) for v in other.value_range):
            return False
        return all(getattr(self, k).dtype == getattr(other, k).dtype
                   and getattr(self, k).tobytes() == getattr(other, k).tobytes() for k in _ROW_FIELDS)


_ROW_FIELDS = ("x", "y", "domain", "split", "content_factors", "style_factors",
               "content_id", "style_id", "kind", "origin")
_INT_FIELDS = ("y", "domain", "split", "content_id", "style_id", "kind", "origin")


def make_world(spec: FactorSpec, rng: np.random.Generator) -> World:
    k, f = spec.num_classes, spec.factor_dim
    # prototypes on a scaled sphere so every pair of classes is well separated
    protos = rng.standard_normal((k, f))
    protos *= spec.prototype_scale * np.sqrt(f) / np.linalg.norm(protos, axis=1, keepdims=True)
    styles = rng.standard_normal((spec.num_styles, f))
    styles *= spec.style_scale * np.sqrt(f) / np.linalg.norm(styles, axis=1, keepdims=True)
    a = rng.standard_normal((spec.input_dim, f)) * spec.content_gain
    b = rng.standard_normal((spec.input_dim, f)) * spec.style_gain
    lo, hi = spec.value_range
    return World(protos, styles, a, b, 0.5 * (lo + hi))


def render(world: World, content: np.ndarray, style: np.ndarray) -> np.ndarray:
    """Deterministic noise-free image of the given factor vectors."""
    return world.offset + content @ world.content_map.T + style @ world.style_map.T


def _balanced_ids(n, classes, styles, rng):
    """Class ids cycling evenly over ``classes`` with styles cycling evenly within each class."""
    classes, styles = np.asarray(classes), np.asarray(styles)
    cls = classes[np.arange(n) % len(classes)]
    sty = np.empty(n, dtype=np.int64)
    for c in classes:
        idx = np.flatnonzero(cls == c)
        start = rng.integers(len(styles))
        sty[idx] = styles[(start + np.arange(len(idx))) % len(styles)]
    return cls, sty


def generate_synthetic(spec: FactorSpec, seed: int = 0) -> FactoredDataset:
    """Draw labeled, unlabeled and test splits from one fixed world."""
    spec.validate()
    rng = np.random.default_rng(seed)
    world = make_world(spec, rng)
    known = np.arange(spec.num_known_classes)
    unknown = np.arange(spec.num_known_classes, spec.num_classes)
    all_styles = np.arange(spec.num_styles)
    src = np.asarray(spec.source_styles) if spec.source_styles is not None else all_styles
    tgt = np.asarray(spec.target_styles) if spec.target_styles is not None else all_styles

    parts = []
    plan = [
        (LABELED, spec.num_labeled, 0.0, src),
        (UNLABELED, spec.num_unlabeled, spec.unlabeled_unknown_fraction, tgt),
        (TEST, spec.num_test, spec.test_unknown_fraction, tgt),
    ]
    for split, n, unk_frac, styles in plan:
        n_unk = int(round(n * unk_frac)) if len(unknown) else 0
        cls_k, sty_k = _balanced_ids(n - n_unk, known, styles, rng)
        if n_unk:
            cls_u, sty_u = _balanced_ids(n_unk, unknown, styles, rng)
            cls_k, sty_k = np.concatenate([cls_k, cls_u]), np.concatenate([sty_k, sty_u])
        order = rng.permutation(len(cls_k))
        parts.append((np.full(n, split), cls_k[order], sty_k[order]))

    split = np.concatenate([p[0] for p in parts])
    cid = np.concatenate([p[1] for p in parts])
    sid = np.concatenate([p[2] for p in parts])
    n = len(cid)
    content = world.class_prototypes[cid] + spec.within_class_spread * rng.standard_normal((n, spec.factor_dim))
    style = world.style_prototypes[sid] + spec.style_spread * rng.standard_normal((n, spec.factor_dim))
    x = render(world, content, style) + spec.noise * rng.standard_normal((n, spec.input_dim))
    x = np.clip(x, *spec.value_range)
    return FactoredDataset(
        x=x.astype(np.float32),
        y=cid.astype(np.int32),
        domain=sid.astype(np.int32),
        split=split.astype(np.int32),
        content_factors=content.astype(np.float32),
        style_factors=style.astype(np.float32),
        content_id=cid.astype(np.int32),
        style_id=sid.astype(np.int32),
        kind=np.zeros(n, np.int32),
        origin=np.full(n, -1, np.int32),
        num_known_classes=spec.num_known_classes,
        num_unknown_classes=spec.num_unknown_classes,
        num_domains=spec.num_styles,
        value_range=tuple(float(v) for v in spec.value_range),
        world=world,
    )


# ---------------------------------------------------------------------------
# file format

def save_dataset(ds: FactoredDataset, path) -> None:
    n, dx = ds.x.shape
    dc, dsty = ds.content_factors.shape[1], ds.style_factors.shape[1]
    header = [DATASET_MAGIC,
              binio.pack_u32(DATASET_VERSION, n, dx, dc, dsty,
                             ds.num_known_classes, ds.num_unknown_classes, ds.num_domains),
              np.asarray(ds.value_range, dtype="<f4").tobytes()]
    row = np.dtype([("x", "<f4", (dx,)), ("content_factors", "<f4", (dc,)),
                    ("style_factors", "<f4", (dsty,))] + [(k, "<i4") for k in _INT_FIELDS])
    rows = np.empty(n, dtype=row)
    for k in _ROW_FIELDS:
        rows[k] = getattr(ds, k)
    Path(path).write_bytes(b"".join(header) + rows.tobytes())


def load_dataset(path) -> FactoredDataset:
    r = binio.Reader(Path(path).read_bytes())
    r.header(DATASET_MAGIC, DATASET_VERSION)
    n, dx, dc, dsty, nk, nu, nd = r.unpack("7I")
    lo, hi = r.array("<f4", 2)
    row = np.dtype([("x", "<f4", (dx,)), ("content_factors", "<f4", (dc,)),
                    ("style_factors", "<f4", (dsty,))] + [(k, "<i4") for k in _INT_FIELDS])
    rows = np.frombuffer(r.take(row.itemsize * n), dtype=row)
    r.done()
    cols = {k: np.ascontiguousarray(rows[k]).astype(np.float32 if k in ("x", "content_factors", "style_factors")
                                                     else np.int32) for k in _ROW_FIELDS}
    for k in _INT_FIELDS:
        if k in ("y", "content_id") and ((cols[k] < 0) | (cols[k] >= nk + nu)).any():
            raise binio.FileFormatError(f"column {k} has labels outside [0, {nk + nu})")
    return FactoredDataset(**cols, num_known_classes=nk, num_unknown_classes=nu, num_domains=nd,
                           value_range=(float(lo), float(hi)))
