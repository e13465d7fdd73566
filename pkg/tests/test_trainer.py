import csv
import math

import numpy as np
import pytest

from hood.data import FactorSpec, generate_synthetic
from hood.model import ModelConfig, init_params, save_checkpoint
from hood.tasks import build_pools, open_set_ssl_task
from hood.trainer import (LOG_COLUMNS, DataPools, TrainConfig, TrainingDiverged, assign_pseudo_labels, train_hood,
                          write_log_csv)

TINY_SPEC = FactorSpec(num_labeled=48, num_unlabeled=60, num_test=60, unlabeled_unknown_fraction=0.3)
TINY = dict(max_iter=30, augmentation_iter=10, batch_size=8, hidden=16, latent_dim=4, heldout_size=16,
            intervention={"steps": 3})


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic(TINY_SPEC, seed=0)


def _pools(ds):
    return DataPools.from_dataset(ds, heldout_size=16)


@pytest.fixture(scope="module")
def tiny_run(tiny_ds):
    cfg = TrainConfig(**TINY, filter_ood_unlabeled=True)
    return train_hood(cfg, _pools(tiny_ds))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.pseudo_threshold == 0.95 and cfg.num_augmentations == 4
        assert cfg.augmentation_iter == cfg.max_iter // 5
        assert cfg.intervention.epsilon == 0.03 and cfg.intervention.steps == 15

    @pytest.mark.parametrize("kw", [dict(max_iter=10, augmentation_iter=11), dict(max_iter=10, augmentation_iter=10),
                                    dict(augmentation_iter=0), dict(pseudo_threshold=0.0),
                                    dict(pseudo_threshold=1.5), dict(batch_size=0), dict(grad_clip=-1.0),
                                    dict(clip_mode="layer"), dict(heldout_every=0), dict(lr_horizon=0)])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(**TINY)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"max_iters": 3})


def _oracle_params(scale=20.0):
    """Content encoder is the identity on 4-d inputs and the class head reads off the largest coordinate."""
    cfg = ModelConfig(input_dim=4, num_classes=4, num_domains=2, content_dim=4, style_dim=4,
                      hidden=8, head_hidden=8, ova_hidden=8)
    p = init_params(cfg)
    eye = np.eye(4, dtype=np.float32)
    split = np.hstack([eye, -eye])           # x -> [x, -x], relu keeps both halves
    merge = np.vstack([eye, -eye])           # relu(x) - relu(-x) = x
    for group, top in ((p.theta_c, np.hstack([merge, np.zeros((8, 4), np.float32)])), (p.phi_c, scale * merge)):
        group["0.w"].data = split.copy()
        group["1.w"].data = np.eye(8, dtype=np.float32)
        group["2.w"].data = top.astype(np.float32)
        for k in ("0.b", "1.b", "2.b"):
            group[k].data = np.zeros_like(group[k].data)
    return p


class TestPseudoLabels:
    def test_oracle_model_on_separable_data(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, 400)
        x = np.eye(4)[y] + 0.05 * rng.standard_normal((400, 4))
        out = assign_pseudo_labels(_oracle_params(), x.astype(np.float32), 0.95)
        assert out.included.mean() >= 0.95
        assert (out.label[out.included] == y[out.included]).all()

    def test_threshold_extremes(self):
        x = np.random.default_rng(1).uniform(0, 1, (20, 4)).astype(np.float32)
        params = _oracle_params(scale=1.0)
        assert not assign_pseudo_labels(params, x, 1.0).included.any()
        assert assign_pseudo_labels(params, x, 0.0).included.all()

    def test_empty(self):
        out = assign_pseudo_labels(_oracle_params(), np.zeros((0, 4), np.float32), 0.95)
        assert len(out) == 0


class TestTrainLoop:
    def test_log_shape(self, tiny_run):
        assert len(tiny_run.log) == TINY["max_iter"]
        assert [r["iter"] for r in tiny_run.log] == list(range(1, 31))
        assert set(LOG_COLUMNS) <= set(tiny_run.log[0])

    def test_pools_fill_at_augmentation_iter(self, tiny_run):
        log = tiny_run.log
        assert all(r["n_benign"] == 0 and r["n_malign"] == 0 for r in log[:9])
        assert all(r["n_benign"] > 0 and r["n_malign"] > 0 for r in log[9:])
        assert tiny_run.counters["augmentation_rounds"] == 1

    def test_routing_counters(self, tiny_run):
        c = tiny_run.counters
        assert c["benign_class_supervised"] > 0 and c["benign_label_mismatch"] == 0
        assert c["malign_ova_unknown"] > 0 and c["malign_in_elbo"] == 0

    def test_exclusion_bookkeeping(self, tiny_run):
        assert all(r["n_included"] + r["n_excluded"] == TINY["batch_size"] for r in tiny_run.log)

    def test_heldout_cadence(self, tiny_run):
        seen = [r["iter"] for r in tiny_run.log if not math.isnan(r["heldout_tilde_elbo"])]
        assert seen == [10, 20, 30]

    def test_lr_follows_schedule(self, tiny_run):
        lrs = [r["lr"] for r in tiny_run.log]
        assert lrs[0] == pytest.approx(3e-2) and all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_reproducible_bytes(self, tiny_ds, tiny_run, tmp_path):
        again = train_hood(TrainConfig(**TINY, filter_ood_unlabeled=True), _pools(tiny_ds))
        save_checkpoint(tiny_run.params, tmp_path / "a")
        save_checkpoint(again.params, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_ablation_switches_empty_pools(self, tiny_ds):
        res = train_hood(TrainConfig(**TINY, use_benign=False, use_malign=False), _pools(tiny_ds))
        assert res.log[-1]["n_benign"] == 0 and res.log[-1]["n_malign"] == 0
        assert res.counters["malign_ova_unknown"] == 0

    def test_write_log_csv(self, tiny_run, tmp_path):
        write_log_csv(tiny_run.log, tmp_path / "log.csv")
        with open(tmp_path / "log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == TINY["max_iter"] and tuple(rows[0]) == LOG_COLUMNS

    def test_no_labeled_data(self):
        pools = DataPools(np.zeros((0, 4), np.float32), np.zeros(0, np.int64), np.zeros((0, 4), np.float32))
        with pytest.raises(ValueError, match="labeled"):
            train_hood(TrainConfig(**TINY), pools)

    def test_divergence_saves_batch(self, tiny_ds, tmp_path):
        cfg = TrainConfig(**{**TINY, "base_lr": 1e9, "grad_clip": None, "crash_dir": str(tmp_path)})
        with pytest.raises(TrainingDiverged) as info:
            train_hood(cfg, _pools(tiny_ds))
        saved = np.load(info.value.path)
        assert "x" in saved.files and len(saved["x"]) > 0
        assert str(tmp_path) in info.value.path


def test_ssl_pools_come_from_task(tiny_ds):
    pools = build_pools(open_set_ssl_task(), tiny_ds, TrainConfig(**TINY))
    assert len(pools.unlabeled_x) == TINY_SPEC.num_unlabeled
    assert (pools.labeled_y < TINY_SPEC.num_known_classes).all()
