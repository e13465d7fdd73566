"""End-to-end training: ELBO pre-training, pseudo-labelling, a one-shot
adversarial augmentation, then joint training on benign and malign samples.
"""
from __future__ import annotations

import csv
import logging
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import NonFiniteError, backprop, concat, no_grad
from .data import LABELED, MALIGN, ORIGINAL, TEST, UNLABELED, FactoredDataset
from .intervention import AugmentedSample, InterventionConfig, pgd_augment
from .model import (GROUPS, ModelConfig, ModelParams, classify_class, elbo_tilde, encode_content,
                    init_params)
from .optim import OptimizerState, sgd_momentum_step
from .ova import is_ood, ova_logits, ova_loss, ova_score
from .transforms import DEFAULT_NUM_AUGMENTATIONS, apply_styles

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "kl_content", "kl_style", "loglik_y_given_c", "loglik_d_given_c",
               "loglik_d_given_s", "loglik_y_given_s", "recon_loglik", "tilde_elbo", "loss",
               "ova_loss", "grad_norm", "heldout_tilde_elbo", "n_benign", "n_malign", "n_included", "n_excluded")


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; the offending batch was saved to ``path``."""

    def __init__(self, msg, path):
        super().__init__(f"{msg} (batch saved to {path})")
        self.path = path


@dataclass
class TrainConfig:
    max_iter: int = 1500
    augmentation_iter: int | None = None
    pseudo_threshold: float = 0.95
    batch_size: int = 32
    seed: int = 0
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    num_augmentations: int = DEFAULT_NUM_AUGMENTATIONS
    base_lr: float = 3e-2
    momentum: float = 0.9
    lr_horizon: int | None = None
    use_disentanglement: bool = True
    use_benign: bool = True
    use_malign: bool = True
    cross_floor: str = "chance"
    targeted_positive: bool = False
    filter_ood_unlabeled: bool = False
    ova_unknown_all_heads: bool = True
    ova_benign_labeled_only: bool = True
    augment_every: int = 0
    decoder_std: float = 0.1
    grad_clip: float | None = 1.0
    clip_mode: str = "group"
    heldout_every: int = 10
    latent_dim: int = 8
    hidden: int = 64
    heldout_size: int = 64
    crash_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.intervention, dict):
            self.intervention = InterventionConfig(**self.intervention)
        if self.augmentation_iter is None:
            self.augmentation_iter = max(1, self.max_iter // 5)
        self.validate()

    def validate(self) -> None:
        if self.max_iter < 2:
            raise ValueError("max_iter must be at least 2")
        if not 0 < self.augmentation_iter < self.max_iter:
            raise ValueError(f"augmentation_iter must lie in (0, max_iter={self.max_iter}), "
                             f"got {self.augmentation_iter}")
        if not 0 < self.pseudo_threshold <= 1:
            raise ValueError("pseudo_threshold must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")
        if self.lr_horizon is not None and self.lr_horizon < 1:
            raise ValueError("lr_horizon must be positive")
        if self.clip_mode not in ("global", "group"):
            raise ValueError("clip_mode must be 'global' or 'group'")
        if self.heldout_every < 1:
            raise ValueError("heldout_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DataPools:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    benign: AugmentedSample | None = None
    malign: AugmentedSample | None = None
    target_domain: int | None = None
    heldout_x: np.ndarray | None = None
    heldout_y: np.ndarray | None = None
    value_range: tuple = (0.0, 1.0)
    unlabeled_y: np.ndarray | None = None  # ground truth, only used for reporting

    def __post_init__(self):
        dim = self.labeled_x.shape[1]
        if self.benign is None:
            self.benign = AugmentedSample.empty(dim)
        if self.malign is None:
            self.malign = AugmentedSample.empty(dim)

    @classmethod
    def from_dataset(cls, ds: FactoredDataset, target_domain: int | None = None,
                     heldout_size: int = 64) -> "DataPools":
        lab = ds.split == LABELED
        unl = ds.split == UNLABELED
        test_known = np.flatnonzero((ds.split == TEST) & ds.is_known)[:heldout_size]
        return cls(labeled_x=ds.x[lab], labeled_y=ds.y[lab].astype(np.int64),
                   unlabeled_x=ds.x[unl], target_domain=target_domain,
                   heldout_x=ds.x[test_known], heldout_y=ds.y[test_known].astype(np.int64),
                   value_range=ds.value_range, unlabeled_y=ds.y[unl].astype(np.int64))


@dataclass
class PseudoLabels:
    label: np.ndarray
    confidence: np.ndarray
    included: np.ndarray

    def __len__(self):
        return len(self.label)


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    counters: dict
    pools: DataPools
    config: TrainConfig


def assign_pseudo_labels(params: ModelParams, unlabeled_x, tau: float) -> PseudoLabels:
    """Argmax class and its probability for each unlabeled row.

    Rows with confidence below ``tau`` are flagged as excluded from class
    supervision; they still train the domain branch.
    """
    x = np.asarray(unlabeled_x)
    if len(x) == 0:
        z = np.zeros(0)
        return PseudoLabels(z.astype(np.int64), z, z.astype(bool))
    with no_grad():
        mean = encode_content(np.atleast_2d(x), params).mean
        probs = np.exp(classify_class(mean, params).data.astype(np.float64))
    label = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    return PseudoLabels(label, conf, conf >= tau)


def model_config_for(cfg: TrainConfig, pools: DataPools) -> ModelConfig:
    num_classes = int(pools.labeled_y.max()) + 1
    num_domains = cfg.num_augmentations + 1 + (pools.target_domain is not None)
    return ModelConfig(input_dim=pools.labeled_x.shape[1], num_classes=num_classes,
                       num_domains=num_domains, content_dim=cfg.latent_dim, style_dim=cfg.latent_dim,
                       hidden=cfg.hidden, head_hidden=cfg.hidden, ova_hidden=cfg.hidden)


def _augment(params, cfg: TrainConfig, pools: DataPools, rng) -> tuple:
    """Fill the benign and malign pools from labeled plus confidently pseudo-labelled data."""
    pseudo = assign_pseudo_labels(params, pools.unlabeled_x, cfg.pseudo_threshold)
    keep = pseudo.included
    if cfg.filter_ood_unlabeled and len(keep):
        keep = keep & ~is_ood(ova_score(pools.unlabeled_x, params))
    xs = np.concatenate([pools.labeled_x, pools.unlabeled_x[keep]])
    ys = np.concatenate([pools.labeled_y, pseudo.label[keep]])
    aug = rng.integers(0, cfg.num_augmentations + 1, size=len(xs))
    d = aug.copy()
    n_lab = len(pools.labeled_x)
    if pools.target_domain is not None:
        d[n_lab:] = pools.target_domain
        aug[n_lab:] = 0
    xs = apply_styles(xs, aug, cfg.num_augmentations, pools.value_range)
    base = cfg.intervention
    pos_mode = "positive_targeted" if cfg.targeted_positive else "positive"
    pos = InterventionConfig(base.epsilon, base.steps, base.step_size, base.norm, pos_mode,
                             pools.target_domain if cfg.targeted_positive else None)
    neg = InterventionConfig(base.epsilon, base.steps, base.step_size, base.norm, "negative")
    origin = np.arange(len(xs))
    benign = pgd_augment(xs, ys, d, pos, params, pools.value_range, origin)
    malign = pgd_augment(xs, ys, d, neg, params, pools.value_range, origin)
    return benign, malign, ys


def _group_slices(params: ModelParams) -> list[slice]:
    """Index ranges of each parameter group inside ``params.tensors()``."""
    out, start = [], 0
    for g in GROUPS:
        n = len(params.group(g))
        out.append(slice(start, start + n))
        start += n
    return out


def _clip_by_group(grads, groups, limit):
    """Rescale each group's gradient to norm at most ``limit``.

    Clipping per group keeps the large reconstruction gradient from throttling
    the small heads.  Returns the clipped list and the global pre-clip norm.
    """
    sq = [float(np.vdot(g, g)) for g in grads]
    total = float(np.sqrt(sum(sq)))
    if limit is None:
        return grads, total
    out = list(grads)
    for sl in groups:
        norm = np.sqrt(sum(sq[sl]))
        if norm > limit:
            out[sl] = [g * (limit / norm) for g in grads[sl]]
    return out, total


def _save_batch(cfg: TrainConfig, it: int, **arrays) -> str:
    out_dir = Path(cfg.crash_dir or tempfile.gettempdir())
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"hood_failed_batch_seed{cfg.seed}_iter{it}.npz"
    np.savez(path, **arrays)
    return str(path)


def train_hood(cfg: TrainConfig, pools: DataPools) -> TrainResult:
    """Run the full training loop and return parameters, per-iteration log and counters."""
    cfg.validate()
    if len(pools.labeled_x) == 0:
        raise ValueError("need at least one labeled instance")
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    params = init_params(model_config_for(cfg, pools), seed=cfg.seed)
    # start the decoder at the data mean so early reconstruction gradients stay small
    last = max(k for k in params.psi if k.endswith(".b"))
    params.psi[last].data[...] = pools.labeled_x.mean(axis=0)
    tensors = params.tensors()
    groups = _group_slices(params)
    state = OptimizerState(base_lr=cfg.base_lr, momentum=cfg.momentum,
                           horizon=cfg.lr_horizon or cfg.max_iter)
    latent = cfg.latent_dim
    a = cfg.num_augmentations
    b = cfg.batch_size
    nl, nu = len(pools.labeled_x), len(pools.unlabeled_x)
    counters = dict(benign_class_supervised=0, benign_label_mismatch=0, malign_ova_unknown=0,
                    malign_in_elbo=0, augmentation_rounds=0)
    eligible_y = np.zeros(0, np.int64)

    heldout = None
    if pools.heldout_x is not None and len(pools.heldout_x):
        hx = pools.heldout_x
        hrng = np.random.default_rng([cfg.seed, 2])
        heldout = (hx, pools.heldout_y, np.zeros(len(hx), np.int64),
                   hrng.standard_normal((len(hx), latent)), hrng.standard_normal((len(hx), latent)))

    rows = []
    for it in range(1, cfg.max_iter + 1):
        due = it == cfg.augmentation_iter or (
            cfg.augment_every > 0 and it > cfg.augmentation_iter
            and (it - cfg.augmentation_iter) % cfg.augment_every == 0)
        if due and (cfg.use_benign or cfg.use_malign):
            try:
                benign, malign, eligible_y = _augment(params, cfg, pools, rng)
            except NonFiniteError as exc:
                path = _save_batch(cfg, it, x=pools.labeled_x, y=pools.labeled_y, unlabeled_x=pools.unlabeled_x)
                raise TrainingDiverged(f"augmentation at iteration {it}: {exc}", path) from exc
            pools.benign = benign if cfg.use_benign else AugmentedSample.empty(benign.x_aug.shape[1])
            pools.malign = malign if cfg.use_malign else AugmentedSample.empty(malign.x_aug.shape[1])
            counters["augmentation_rounds"] += 1
            log.debug("iter %d: %d benign, %d malign", it, len(pools.benign), len(pools.malign))
        ova_active = it > cfg.augmentation_iter

        li = rng.integers(nl, size=b)
        xl, yl = pools.labeled_x[li], pools.labeled_y[li]
        al = rng.integers(0, a + 1, size=b)
        xs, ys, ds, ws, kinds = [apply_styles(xl, al, a, pools.value_range)], [yl], [al], [np.ones(b)], [
            np.full(b, ORIGINAL)]
        n_inc = n_exc = 0
        if nu:
            ui = rng.integers(nu, size=b)
            xu = pools.unlabeled_x[ui]
            try:
                pseudo = assign_pseudo_labels(params, xu, cfg.pseudo_threshold)
                include = pseudo.included
                if cfg.filter_ood_unlabeled and ova_active:
                    include = include & ~is_ood(ova_score(xu, params))
            except NonFiniteError as exc:
                path = _save_batch(cfg, it, x=xu)
                raise TrainingDiverged(f"pseudo-labelling at iteration {it}: {exc}", path) from exc
            n_inc, n_exc = int(include.sum()), int((~include).sum())
            if pools.target_domain is not None:
                xs.append(xu)
                ds.append(np.full(b, pools.target_domain))
            else:
                au = rng.integers(0, a + 1, size=b)
                xs.append(apply_styles(xu, au, a, pools.value_range))
                ds.append(au)
            ys.append(pseudo.label)
            ws.append(include.astype(np.float64))
            kinds.append(np.full(b, ORIGINAL))
        use_b = len(pools.benign) > 0
        if use_b:
            bi = rng.integers(len(pools.benign), size=2 * b)
            xs.append(pools.benign.x_aug[bi])
            ys.append(pools.benign.label[bi])
            ds.append(pools.benign.domain[bi])
            ws.append(np.ones(2 * b))
            kinds.append(pools.benign.kind[bi])
            counters["benign_class_supervised"] += len(bi)
            counters["benign_label_mismatch"] += int(
                (pools.benign.label[bi] != eligible_y[pools.benign.origin_index[bi]]).sum())
        X = np.concatenate(xs).astype(pools.labeled_x.dtype)
        Y, D, W = np.concatenate(ys), np.concatenate(ds), np.concatenate(ws)
        K = np.concatenate(kinds)
        counters["malign_in_elbo"] += int((K == MALIGN).sum())
        nc = noise_rng.standard_normal((len(X), latent))
        ns = noise_rng.standard_normal((len(X), latent))

        try:
            terms, qc = elbo_tilde(X, Y, D, params, nc, ns, class_weight=W,
                                   cross_floor=cfg.cross_floor, return_content=True,
                                   decoder_std=cfg.decoder_std)
            objective = terms.tilde_elbo() if cfg.use_disentanglement else terms.elbo()
            loss = -objective
            # one-vs-all positives: the labeled rows and the benign rows (stored last)
            known_mean, known_y = qc.mean[:b], Y[:b]
            if use_b:
                start = len(X) - 2 * b
                # pseudo-labelled origins may be unknowns the untrained head could not filter
                pos = np.arange(start, len(X))
                if cfg.ova_benign_labeled_only:
                    pos = pos[pools.benign.origin_index[bi] < nl]
                known_mean = concat([known_mean, qc.mean[pos]])
                known_y = np.concatenate([known_y, Y[pos]])
            ova_l = ova_loss(ova_logits(known_mean, params), known_y, False)
            if len(pools.malign):
                mi = rng.integers(len(pools.malign), size=2 * b)
                m_mean = encode_content(pools.malign.x_aug[mi], params).mean
                ova_l = ova_l + ova_loss(ova_logits(m_mean, params), pools.malign.label[mi], True,
                                         all_heads=cfg.ova_unknown_all_heads)
                counters["malign_ova_unknown"] += len(mi)
            loss = loss + ova_l
            grads = backprop(loss, tensors)
        except NonFiniteError as exc:
            path = _save_batch(cfg, it, x=X, y=Y, d=D, w=W, noise_c=nc, noise_s=ns)
            raise TrainingDiverged(f"iteration {it}: {exc}", path) from exc

        grads, gnorm = _clip_by_group(grads, groups if cfg.clip_mode == "group" else [slice(None)],
                                      cfg.grad_clip)
        lr = state.lr()
        sgd_momentum_step(tensors, grads, state)

        row = {"iter": it, "lr": lr, **terms.as_dict(),
               "tilde_elbo": float(terms.tilde_elbo().data), "loss": float(loss.data), "grad_norm": gnorm,
               "ova_loss": float(ova_l.data), "heldout_tilde_elbo": float("nan"),
               "n_benign": len(pools.benign), "n_malign": len(pools.malign),
               "n_included": n_inc, "n_excluded": n_exc}
        if heldout is not None and (it % cfg.heldout_every == 0 or it == cfg.max_iter):
            hx, hy, hd, hnc, hns = heldout
            with no_grad():
                ht = elbo_tilde(hx, hy, hd, params, hnc, hns, cross_floor=cfg.cross_floor,
                                decoder_std=cfg.decoder_std)
            row["heldout_tilde_elbo"] = float(ht.tilde_elbo().data)
        rows.append(row)

    return TrainResult(params, rows, counters, pools, cfg)


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})
