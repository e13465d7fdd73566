"""The three open-set deployments, their metrics and the disentanglement probe."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .core import no_grad
from .data import TEST, FactoredDataset, FactorSpec, generate_synthetic
from .model import ModelParams, classify_class, classify_domain, encode_content, encode_style
from .ova import is_ood, ova_score
from .trainer import DataPools, TrainConfig, TrainResult, train_hood
from .transforms import CORRUPTIONS, MAX_SEVERITY, apply_styles, corrupt

TASK_KINDS = ("ood_detection", "open_set_ssl", "open_set_da")


@dataclass(frozen=True)
class TaskSpec:
    """Which deployment to run and how its data is drawn.

    ``target_domain`` is only used by open-set DA; ``None`` there means
    "one past the last style-pool label".
    """

    kind: str
    factors: FactorSpec = field(default_factory=FactorSpec)
    target_domain: int | None = None

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        f = self.factors
        f.validate()
        if self.kind == "ood_detection" and f.unlabeled_unknown_fraction > 0:
            raise ValueError("ood_detection keeps unknown classes out of the unlabeled set")
        if self.kind == "open_set_ssl":
            if f.source_styles != f.target_styles:
                raise ValueError("open_set_ssl needs the same styles in labeled and unlabeled data")
            if f.unlabeled_unknown_fraction <= 0 or f.num_unknown_classes == 0:
                raise ValueError("open_set_ssl needs unknown classes in the unlabeled set")
        if self.kind == "open_set_da":
            if f.source_styles is None or f.target_styles is None or \
                    set(f.source_styles) == set(f.target_styles):
                raise ValueError("open_set_da needs distinct source and target styles")
            if f.unlabeled_unknown_fraction <= 0 or f.num_unknown_classes == 0:
                raise ValueError("open_set_da needs unknown classes in the target set")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "factors": asdict(self.factors), "target_domain": self.target_domain}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        extra = set(d) - {"kind", "factors", "target_domain"}
        if extra:
            raise ValueError(f"unknown TaskSpec fields: {sorted(extra)}")
        return cls(d["kind"], FactorSpec.from_dict(d.get("factors", {})), d.get("target_domain"))


def ood_detection_task(**factors) -> TaskSpec:
    return TaskSpec("ood_detection", FactorSpec(**factors))


def open_set_ssl_task(**factors) -> TaskSpec:
    factors.setdefault("unlabeled_unknown_fraction", 0.3)
    return TaskSpec("open_set_ssl", FactorSpec(**factors))


def open_set_da_task(target_domain: int | None = None, **factors) -> TaskSpec:
    factors.setdefault("unlabeled_unknown_fraction", 0.3)
    factors.setdefault("source_styles", (0,))
    factors.setdefault("target_styles", (1, 2))
    return TaskSpec("open_set_da", FactorSpec(**factors), target_domain)


BUILDERS = {"ood_detection": ood_detection_task, "open_set_ssl": open_set_ssl_task,
            "open_set_da": open_set_da_task}


# ---------------------------------------------------------------------------
# metrics

def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score), ties counted one half.

    Mann-Whitney U from average ranks, so the result is exact.
    """
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs at least one ID and one OOD score")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("scores must be finite")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def harmonic_mean(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2 * a * b / (a + b)


@dataclass
class CrossPrediction:
    """Accuracies of the class and domain heads applied to both latents."""

    content_class: float
    content_domain: float
    style_class: float
    style_domain: float
    class_chance: float
    domain_chance: float

    def grid(self) -> list[list[float]]:
        """Rows: content, style latent; columns: class, domain head."""
        return [[self.content_class, self.content_domain], [self.style_class, self.style_domain]]

    @property
    def matched(self) -> tuple[float, float]:
        return self.content_class, self.style_domain

    @property
    def crossed_excess(self) -> tuple[float, float]:
        """How far each crossed cell sits above its chance level."""
        return self.content_domain - self.domain_chance, self.style_class - self.class_chance


@dataclass
class EvalReport:
    task: str
    closed_set_accuracy: float
    auroc: float | None = None
    corrupted_accuracy: float | None = None
    unknown_recall: float | None = None
    known_accuracy: float | None = None
    harmonic_mean: float | None = None
    per_class: list = field(default_factory=list)
    confusion: dict = field(default_factory=dict)
    cross_prediction: CrossPrediction | None = None

    def validate(self) -> None:
        for k, v in self._metrics().items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")

    def _metrics(self) -> dict:
        out = {k: getattr(self, k) for k in ("closed_set_accuracy", "auroc", "corrupted_accuracy",
                                              "unknown_recall", "known_accuracy", "harmonic_mean")}
        if self.cross_prediction is not None:
            cp = self.cross_prediction
            out.update(content_class=cp.content_class, content_domain=cp.content_domain,
                       style_class=cp.style_class, style_domain=cp.style_domain)
        return {k: v for k, v in out.items() if v is not None}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        if d.get("cross_prediction") is not None:
            d["cross_prediction"] = CrossPrediction(**d["cross_prediction"])
        return cls(**d)


@dataclass
class InstanceScores:
    instance_id: np.ndarray
    true_class: np.ndarray
    predicted_class: np.ndarray
    ova_score: np.ndarray

    @property
    def is_ood(self) -> np.ndarray:
        return is_ood(self.ova_score)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance_id", "true_class", "predicted_class", "ova_score", "is_ood"])
            for row in zip(self.instance_id, self.true_class, self.predicted_class,
                           self.ova_score, self.is_ood):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), f"{float(row[3]):.9g}", int(row[4])])


def predict_class(params: ModelParams, x) -> np.ndarray:
    with no_grad():
        return classify_class(encode_content(np.atleast_2d(x), params).mean, params).data.argmax(axis=1)


def score_instances(params: ModelParams, ds: FactoredDataset, split: int = TEST) -> InstanceScores:
    idx = np.flatnonzero(ds.split == split)
    x = ds.x[idx]
    return InstanceScores(idx, ds.y[idx].copy(), predict_class(params, x), ova_score(x, params))


def accuracy(params: ModelParams, x, y) -> float:
    if len(x) == 0:
        raise ValueError("accuracy of an empty set")
    return float((predict_class(params, x) == np.asarray(y)).mean())


def corrupted_accuracy(params: ModelParams, x, y, value_range=(0.0, 1.0), seed: int = 0,
                       kinds=CORRUPTIONS, severities=range(1, MAX_SEVERITY + 1)) -> float:
    """Mean accuracy over every (corruption kind, severity) pair."""
    accs = [accuracy(params, corrupt(x, k, s, seed=seed + 97 * s, value_range=value_range), y)
            for k in kinds for s in severities]
    return float(np.mean(accs))


def _per_class(scores: InstanceScores, num_known: int) -> list[dict]:
    rows = []
    for c in np.unique(scores.true_class):
        m = scores.true_class == c
        known = bool(c < num_known)
        rows.append({"class": int(c), "known": known, "count": int(m.sum()),
                     "accuracy": float((scores.predicted_class[m] == c).mean()) if known else None,
                     "mean_ova_score": float(scores.ova_score[m].mean()),
                     "flagged_ood": float(scores.is_ood[m].mean())})
    return rows


def _confusion(scores: InstanceScores, known: np.ndarray) -> dict:
    flag = scores.is_ood
    return {"id_kept": int((known & ~flag).sum()), "id_rejected": int((known & flag).sum()),
            "ood_rejected": int((~known & flag).sum()), "ood_kept": int((~known & ~flag).sum())}


def _detection_report(task: str, params: ModelParams, ds: FactoredDataset) -> tuple[EvalReport, InstanceScores]:
    scores = score_instances(params, ds)
    known = scores.true_class < ds.num_known_classes
    if not known.any():
        raise ValueError("test split has no known-class instances")
    rep = EvalReport(task=task,
                     closed_set_accuracy=float((scores.predicted_class[known] == scores.true_class[known]).mean()),
                     per_class=_per_class(scores, ds.num_known_classes),
                     confusion=_confusion(scores, known))
    if (~known).any():
        rep.auroc = auroc(scores.ova_score[known], scores.ova_score[~known])
        rep.unknown_recall = float(scores.is_ood[~known].mean())
    return rep, scores


def run_ood_detection(params: ModelParams, ds: FactoredDataset) -> EvalReport:
    """Score every test instance with the content branch; AUROC of known vs unknown classes."""
    return _detection_report("ood_detection", params, ds)[0]


def run_open_set_ssl(params: ModelParams, ds: FactoredDataset, corruption_seed: int = 0) -> EvalReport:
    """Clean and corrupted accuracy on known-class test data, plus detection metrics."""
    rep, scores = _detection_report("open_set_ssl", params, ds)
    test = ds.part("test")
    known = test.is_known
    rep.corrupted_accuracy = corrupted_accuracy(params, test.x[known], test.y[known], ds.value_range,
                                                corruption_seed)
    return rep


def run_open_set_da(params: ModelParams, ds: FactoredDataset) -> EvalReport:
    """Known-class target accuracy counting rejections as errors, unknown recall and their harmonic mean."""
    rep, scores = _detection_report("open_set_da", params, ds)
    known = scores.true_class < ds.num_known_classes
    ok = (scores.predicted_class == scores.true_class) & ~scores.is_ood
    rep.known_accuracy = float(ok[known].mean())
    if rep.unknown_recall is not None:
        rep.harmonic_mean = harmonic_mean(rep.known_accuracy, rep.unknown_recall)
    return rep


RUNNERS = {"ood_detection": run_ood_detection, "open_set_ssl": run_open_set_ssl,
           "open_set_da": run_open_set_da}


# ---------------------------------------------------------------------------
# disentanglement probe

def probe_set(ds: FactoredDataset, num_augmentations: int, seed: int = 0):
    """Known-class test instances, each restyled with a balanced random pool id."""
    test = ds.part("test")
    test = test.subset(test.is_known)
    rng = np.random.default_rng(seed)
    aug = rng.permutation(np.arange(len(test)) % (num_augmentations + 1))
    return apply_styles(test.x, aug, num_augmentations, ds.value_range), test.y.astype(np.int64), aug


def cross_prediction(params: ModelParams, ds: FactoredDataset, num_augmentations: int,
                     seed: int = 0) -> CrossPrediction:
    """Apply the class and domain heads to the content and style posterior means."""
    x, y, d = probe_set(ds, num_augmentations, seed)
    with no_grad():
        c = encode_content(x, params).mean
        s = encode_style(x, params).mean
        cc = classify_class(c, params).data.argmax(1)
        cd = classify_domain(c, params).data.argmax(1)
        sc = classify_class(s, params).data.argmax(1)
        sd = classify_domain(s, params).data.argmax(1)
    num_domains = params.config.num_domains
    return CrossPrediction(float((cc == y).mean()), float((cd == d).mean()),
                           float((sc == y).mean()), float((sd == d).mean()),
                           1.0 / params.config.num_classes, 1.0 / num_domains)


def cross_prediction_factors(ds: FactoredDataset) -> CrossPrediction:
    """The same grid with nearest-prototype readouts of the ground-truth factors.

    The domain here is the dataset's own style id.  Validates the probe: on
    disentangled factors the matched cells are perfect and the crossed cells
    sit at chance.
    """
    if ds.world is None:
        raise ValueError("dataset has no generating world attached")
    test = ds.part("test")
    test = test.subset(test.is_known)
    cp = ds.world.class_prototypes[:ds.num_known_classes]
    sp = ds.world.style_prototypes

    def nearest(z, protos):
        return np.linalg.norm(z[:, None, :] - protos[None], axis=-1).argmin(axis=1)

    y, d = test.y, test.domain
    return CrossPrediction(float((nearest(test.content_factors, cp) == y).mean()),
                           float((nearest(test.content_factors, sp) == d).mean()),
                           float((nearest(test.style_factors, cp) == y).mean()),
                           float((nearest(test.style_factors, sp) == d).mean()),
                           1.0 / ds.num_known_classes, 1.0 / ds.num_domains)


# ---------------------------------------------------------------------------
# pipeline

def build_pools(task: TaskSpec, ds: FactoredDataset, cfg: TrainConfig) -> DataPools:
    target = None
    if task.kind == "open_set_da":
        target = cfg.num_augmentations + 1 if task.target_domain is None else task.target_domain
        if target <= cfg.num_augmentations:
            raise ValueError("target domain label must not collide with a style-pool label")
    return DataPools.from_dataset(ds, target_domain=target, heldout_size=cfg.heldout_size)


def config_for(task: TaskSpec, cfg: TrainConfig) -> TrainConfig:
    """Switch on the task-specific training behaviour."""
    if task.kind == "open_set_ssl":
        return replace(cfg, filter_ood_unlabeled=True)
    if task.kind == "open_set_da":
        return replace(cfg, filter_ood_unlabeled=True, targeted_positive=True)
    return cfg


@dataclass
class TaskRun:
    task: TaskSpec
    dataset: FactoredDataset
    result: TrainResult
    report: EvalReport


def run_task(task: TaskSpec, cfg: TrainConfig, data_seed: int | None = None,
             probe: bool = True) -> TaskRun:
    """Generate data, train, evaluate; the data seed defaults to the training seed."""
    task.validate()
    seed = cfg.seed if data_seed is None else data_seed
    ds = generate_synthetic(task.factors, seed)
    cfg = config_for(task, cfg)
    result = train_hood(cfg, build_pools(task, ds, cfg))
    report = RUNNERS[task.kind](result.params, ds)
    if probe:
        report.cross_prediction = cross_prediction(result.params, ds, cfg.num_augmentations, seed)
    report.validate()
    return TaskRun(task, ds, result, report)


SWEEP_METRIC = "corrupted_accuracy"


def sweep_augmentations(task: TaskSpec, cfg: TrainConfig, sizes=range(2, 7)) -> list[dict]:
    """Train once per pool size and report the sweep metric for each.

    The metric is corrupted accuracy when the task produces it, else AUROC.
    """
    rows = []
    for a in sizes:
        run = run_task(task, replace(cfg, num_augmentations=int(a)), probe=False)
        r = run.report
        metric = r.corrupted_accuracy if r.corrupted_accuracy is not None else r.auroc
        rows.append({"num_augmentations": int(a), "metric": metric,
                     "closed_set_accuracy": r.closed_set_accuracy,
                     "corrupted_accuracy": r.corrupted_accuracy, "auroc": r.auroc})
    return rows


def interior_optimum(rows: list[dict]) -> bool:
    """True when the best pool size is neither the smallest nor the largest."""
    vals = [r["metric"] for r in rows]
    best = int(np.argmax(vals))
    return 0 < best < len(vals) - 1
