import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hood.data import FactorSpec, generate_synthetic
from hood.model import ModelConfig, init_params
from hood.tasks import (BUILDERS, CrossPrediction, EvalReport, InstanceScores, TaskSpec, auroc, build_pools,
                        config_for, corrupted_accuracy, cross_prediction, cross_prediction_factors,
                        harmonic_mean, interior_optimum, open_set_da_task, open_set_ssl_task, run_ood_detection,
                        run_open_set_da, run_open_set_ssl)
from hood.trainer import TrainConfig

scores = st.lists(st.integers(0, 6).map(lambda v: v / 6), min_size=1, max_size=12)


class TestAuroc:
    def test_examples(self):
        assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
        assert auroc([0.3, 0.5, 0.5], [0.3, 0.5, 0.5]) == 0.5
        assert auroc([0.3, 0.6], [0.4, 0.7]) == 0.75

    @settings(max_examples=200, deadline=None)
    @given(scores, scores)
    def test_matches_pairwise_count(self, a, b):
        assert abs(auroc(a, b) - oracles.auroc_pairs(a, b)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(scores, scores)
    def test_monotone_invariance(self, a, b):
        f = lambda v: np.exp(3 * np.asarray(v)) - 7.0
        assert auroc(f(a), f(b)) == pytest.approx(auroc(a, b), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=20, unique=True), st.integers(1, 19))
    def test_swap_sums_to_one(self, vals, cut):
        cut = min(cut, len(vals) - 1)
        a, b = vals[:cut], vals[cut:]
        assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)

    def test_random_scorer_near_half(self):
        vals = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            vals.append(auroc(rng.uniform(size=600), rng.uniform(size=400)))
        assert abs(np.mean(vals) - 0.5) <= 0.05

    @pytest.mark.parametrize("a, b", [([], [0.1]), ([0.1], []), ([np.nan], [0.2])])
    def test_errors(self, a, b):
        with pytest.raises(ValueError):
            auroc(a, b)


def test_harmonic_mean():
    assert harmonic_mean(0.5, 1.0) == pytest.approx(2 / 3)
    assert harmonic_mean(0.0, 0.0) == 0.0


class TestTaskSpec:
    def test_builders_validate(self):
        for kind, build in BUILDERS.items():
            task = build()
            task.validate()
            assert task.kind == kind
            assert TaskSpec.from_dict(json.loads(json.dumps(task.to_dict()))) == task

    @pytest.mark.parametrize("task", [
        TaskSpec("segmentation"),
        TaskSpec("ood_detection", FactorSpec(unlabeled_unknown_fraction=0.2)),
        TaskSpec("open_set_ssl", FactorSpec()),
        TaskSpec("open_set_ssl", FactorSpec(unlabeled_unknown_fraction=0.3, source_styles=(0,))),
        TaskSpec("open_set_da", FactorSpec(unlabeled_unknown_fraction=0.3)),
        TaskSpec("open_set_da", FactorSpec(unlabeled_unknown_fraction=0.3, source_styles=(0, 1),
                                           target_styles=(1, 0))),
    ])
    def test_invalid(self, task):
        with pytest.raises(ValueError):
            task.validate()

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            TaskSpec.from_dict({"kind": "ood_detection", "colour": 1})

    def test_config_for(self):
        cfg = TrainConfig()
        assert config_for(open_set_ssl_task(), cfg).filter_ood_unlabeled
        da = config_for(open_set_da_task(), cfg)
        assert da.filter_ood_unlabeled and da.targeted_positive
        assert config_for(BUILDERS["ood_detection"](), cfg) == cfg

    def test_da_target_label(self):
        ds = generate_synthetic(open_set_da_task(num_unlabeled=30, num_test=30).factors, 0)
        cfg = TrainConfig()
        assert build_pools(open_set_da_task(), ds, cfg).target_domain == cfg.num_augmentations + 1
        with pytest.raises(ValueError, match="collide"):
            build_pools(open_set_da_task(target_domain=2), ds, cfg)


SMALL = FactorSpec(num_labeled=60, num_unlabeled=60, num_test=300, unlabeled_unknown_fraction=0.3)


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(SMALL, 0)


def _params(seed=0, num_domains=5):
    return init_params(ModelConfig(num_classes=6, num_domains=num_domains, hidden=16, head_hidden=16,
                                   ova_hidden=16), seed)


class TestProbe:
    def test_ground_truth_factors(self, small_ds):
        cp = cross_prediction_factors(small_ds)
        assert cp.matched == (1.0, 1.0)
        assert max(cp.crossed_excess) <= 0.15

    def test_untrained_model_near_chance(self, small_ds):
        grids = np.array([cross_prediction(_params(s), small_ds, 4, seed=s).grid() for s in range(5)])
        mean = grids.mean(axis=0)
        np.testing.assert_allclose(mean[:, 0], 1 / 6, atol=0.1)
        np.testing.assert_allclose(mean[:, 1], 1 / 5, atol=0.1)

    def test_cells_in_unit_interval(self, small_ds):
        g = np.array(cross_prediction(_params(1), small_ds, 4).grid())
        assert ((g >= 0) & (g <= 1)).all()


class TestRunners:
    def test_reports_validate(self, small_ds):
        p = _params()
        for run in (run_ood_detection, run_open_set_ssl):
            rep = run(p, small_ds)
            rep.validate()
            assert rep.auroc is not None and rep.confusion["id_kept"] + rep.confusion["id_rejected"] > 0
        da_ds = generate_synthetic(open_set_da_task(num_unlabeled=30, num_test=120).factors, 0)
        rep = run_open_set_da(_params(num_domains=6), da_ds)
        assert rep.harmonic_mean == pytest.approx(harmonic_mean(rep.known_accuracy, rep.unknown_recall))

    def test_corrupted_accuracy_in_unit_interval(self, small_ds):
        rep = run_open_set_ssl(_params(), small_ds)
        assert 0 <= rep.corrupted_accuracy <= 1

    def test_corrupted_accuracy_is_mean_of_cells(self, small_ds):
        p = _params()
        test = small_ds.part("test")
        x, y = test.x[test.is_known], test.y[test.is_known]
        cells = [corrupted_accuracy(p, x, y, kinds=(k,), severities=(s,))
                 for k in ("gaussian_noise", "smoothing", "gamma") for s in range(1, 6)]
        assert corrupted_accuracy(p, x, y) == pytest.approx(np.mean(cells))

    def test_report_json_round_trip(self, small_ds, tmp_path):
        rep = run_ood_detection(_params(), small_ds)
        rep.cross_prediction = CrossPrediction(1, 0, 0, 1, 1 / 6, 1 / 5)
        rep.to_json(tmp_path / "r.json")
        back = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert back == rep

    def test_report_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            EvalReport("ood_detection", closed_set_accuracy=1.2).validate()

    def test_scores_csv(self, tmp_path):
        s = InstanceScores(np.array([3, 4]), np.array([0, 7]), np.array([0, 1]), np.array([0.1, 0.5]))
        s.write_csv(tmp_path / "s.csv")
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert list(rows[0]) == ["instance_id", "true_class", "predicted_class", "ova_score", "is_ood"]
        assert rows[1]["is_ood"] == "1" and rows[0]["is_ood"] == "0"


@pytest.mark.parametrize("vals, want", [([1, 2, 3, 2, 1], True), ([3, 2, 1, 1, 1], False), ([1, 2, 3, 4, 5], False),
                                        ([2, 2, 2, 2, 2], False), ([1, 3, 3, 1, 1], True)])
def test_interior_optimum(vals, want):
    assert interior_optimum([{"metric": v} for v in vals]) is want
