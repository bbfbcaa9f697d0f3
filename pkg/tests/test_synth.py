import numpy as np
import pytest

from fairvae import evalmetrics as em
from fairvae import synth


def test_fixed_seed_identical():
    a = synth.generate(synth.SynthConfig(n_users=300, n_items=50, seed=11))
    b = synth.generate(synth.SynthConfig(n_users=300, n_items=50, seed=11))
    assert (a.dataset.interactions.matrix != b.dataset.interactions.matrix).nnz == 0
    np.testing.assert_array_equal(a.dataset.labels.gender, b.dataset.labels.gender)
    np.testing.assert_array_equal(a.dataset.split.test, b.dataset.split.test)
    np.testing.assert_array_equal(a.factors, b.factors)


def test_seed_changes_data():
    a = synth.generate(synth.SynthConfig(n_users=300, n_items=50, seed=1))
    b = synth.generate(synth.SynthConfig(n_users=300, n_items=50, seed=2))
    assert (a.dataset.interactions.matrix != b.dataset.interactions.matrix).nnz > 0


def test_shapes_and_sizes():
    cfg = synth.SynthConfig(n_users=400, n_items=60, mean_items=12.0, seed=0)
    d = synth.generate(cfg).dataset
    counts = np.asarray(d.interactions.matrix.sum(axis=1)).ravel()
    assert d.interactions.matrix.shape == (400, 60)
    assert counts.min() >= cfg.min_items and abs(counts.mean() - 12.0) < 1.0
    assert set(np.unique(d.interactions.matrix.data)) == {1.0}


def test_planted_correlation():
    data = synth.generate(synth.SynthConfig(n_users=5000, n_items=20, rho=0.6, seed=0))
    for k, attr in enumerate((data.dataset.labels.gender, data.dataset.labels.age)):
        assert np.corrcoef(data.factors[:, k], attr)[0, 1] == pytest.approx(0.6, abs=0.03)


def test_rho_zero_factors_uninformative():
    data = synth.generate(synth.SynthConfig(n_users=2000, n_items=50, rho=0.0, seed=0))
    auc = em.probe_auc(data.factors, data.dataset.labels.gender)
    assert abs(auc - 0.5) < 0.05


def test_rho_high_factors_informative():
    data = synth.generate(synth.SynthConfig(n_users=2000, n_items=50, rho=0.9, seed=0))
    for attr in ("gender", "age"):
        assert em.probe_auc(data.factors, data.dataset.labels.attribute(attr)) > 0.8


def test_needs_two_factors():
    with pytest.raises(ValueError):
        synth.generate(synth.SynthConfig(n_factors=1))


def test_save_writes_factors(tmp_path):
    data = synth.generate(synth.SynthConfig(n_users=50, n_items=20, n_factors=3, seed=0))
    synth.save(tmp_path, data)
    lines = (tmp_path / "factors.tsv").read_text().splitlines()
    assert lines[0] == "user\tf0\tf1\tf2" and len(lines) == 51
