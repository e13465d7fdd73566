import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from hood.data import (DATASET_MAGIC, LABELED, TEST, FactorSpec, generate_synthetic, load_dataset, make_world,
                       render, save_dataset)
from hood.errors import FileFormatError, TruncatedFileError, VersionMismatchError

SMALL = FactorSpec(num_labeled=60, num_unlabeled=120, num_test=90, unlabeled_unknown_fraction=0.3)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(FactorSpec(), seed=0)


def test_noise_free_render_is_exact():
    spec = FactorSpec(noise=0.0, within_class_spread=0.0, style_spread=0.0, num_labeled=18,
                      num_unlabeled=0, num_test=0, value_range=(-100.0, 100.0))
    out = generate_synthetic(spec, seed=4)
    world = make_world(spec, np.random.default_rng(4))
    want = render(world, world.class_prototypes[out.content_id], world.style_prototypes[out.style_id])
    np.testing.assert_allclose(out.x, want.astype(np.float32), rtol=1e-6)
    # every (class, style) pair shows up exactly once
    pairs = set(zip(out.content_id.tolist(), out.style_id.tolist()))
    assert len(pairs) == 18


def test_same_seed_bitwise_identical():
    assert generate_synthetic(SMALL, 3).equals(generate_synthetic(SMALL, 3))
    assert not generate_synthetic(SMALL, 3).equals(generate_synthetic(SMALL, 4))


def test_labels_follow_factors(ds):
    np.testing.assert_array_equal(ds.y, ds.content_id)
    np.testing.assert_array_equal(ds.domain, ds.style_id)


def test_linear_probe_on_factors(ds):
    """Content factors determine the class; style factors carry nothing about it."""
    tr, te = (ds.split != TEST) & ds.is_known, (ds.split == TEST) & ds.is_known
    content = LogisticRegression(max_iter=2000).fit(ds.content_factors[tr], ds.y[tr])
    assert content.score(ds.content_factors[te], ds.y[te]) == 1.0
    style = LogisticRegression(max_iter=2000).fit(ds.style_factors[tr], ds.y[tr])
    chance = 1.0 / ds.num_known_classes
    assert style.score(ds.style_factors[te], ds.y[te]) <= chance + 0.05


def test_content_style_index_independence(ds):
    cy = np.eye(ds.y.max() + 1)[ds.content_id]
    sy = np.eye(ds.style_id.max() + 1)[ds.style_id]
    corr = np.corrcoef(np.hstack([cy, sy]).T)[: cy.shape[1], cy.shape[1]:]
    assert np.nanmax(np.abs(corr)) <= 0.02


def test_unknown_classes_confined(ds):
    assert (ds.y[ds.split == LABELED] < ds.num_known_classes).all()
    test_unk = (~ds.is_known[ds.split == TEST]).mean()
    assert test_unk == pytest.approx(FactorSpec().test_unknown_fraction, abs=1e-9)


def test_prototypes_distinct(ds):
    p = ds.world.class_prototypes
    dist = np.linalg.norm(p[:, None] - p[None], axis=-1) + np.eye(len(p)) * 1e9
    assert dist.min() > 0.5


def test_source_target_styles():
    spec = FactorSpec(num_labeled=30, num_unlabeled=30, num_test=30, source_styles=(0,), target_styles=(1, 2))
    out = generate_synthetic(spec, 0)
    assert set(out.style_id[out.split == LABELED].tolist()) == {0}
    assert set(out.style_id[out.split != LABELED].tolist()) <= {1, 2}


@pytest.mark.parametrize("bad, match", [
    (dict(num_known_classes=0), "known class"),
    (dict(input_dim=4, factor_dim=8), "too small"),
    (dict(value_range=(1.0, 0.0)), "value range"),
    (dict(source_styles=(7,)), "style index"),
])
def test_spec_errors(bad, match):
    with pytest.raises(ValueError, match=match):
        generate_synthetic(FactorSpec(**bad), 0)


def test_spec_from_dict_rejects_unknown_field():
    with pytest.raises(ValueError, match="unknown"):
        FactorSpec.from_dict({"num_lables": 3})
    assert FactorSpec.from_dict({"value_range": [0, 2]}).value_range == (0, 2)


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        d = generate_synthetic(SMALL, 1)
        save_dataset(d, tmp_path / "d.hdat")
        assert load_dataset(tmp_path / "d.hdat").equals(d)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40))
    def test_round_trip_random_sizes(self, tmp_path_factory, seed, n):
        d = generate_synthetic(FactorSpec(num_labeled=n, num_unlabeled=0, num_test=n, input_dim=16), seed)
        path = tmp_path_factory.mktemp("rt") / "d.hdat"
        save_dataset(d, path)
        assert load_dataset(path).equals(d)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "d").write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(FileFormatError, match="magic"):
            load_dataset(tmp_path / "d")

    def test_version(self, tmp_path):
        (tmp_path / "d").write_bytes(DATASET_MAGIC + (2).to_bytes(4, "little") + bytes(64))
        with pytest.raises(VersionMismatchError):
            load_dataset(tmp_path / "d")

    def test_truncated(self, tmp_path):
        save_dataset(generate_synthetic(SMALL, 1), tmp_path / "d")
        raw = (tmp_path / "d").read_bytes()
        (tmp_path / "d").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            load_dataset(tmp_path / "d")

    def test_label_out_of_range(self, tmp_path):
        d = generate_synthetic(SMALL, 1)
        d.y[0] = 99
        save_dataset(d, tmp_path / "d")
        with pytest.raises(FileFormatError, match="outside"):
            load_dataset(tmp_path / "d")

    def test_errors_are_distinct(self):
        assert not issubclass(TruncatedFileError, VersionMismatchError)
        assert not issubclass(VersionMismatchError, TruncatedFileError)
