import math

import numpy as np
import pytest

from fairvae import numerics as nx
from fairvae import synth
from fairvae.errors import ConfigError
from fairvae.model import VAE, ModelConfig
from fairvae.training import TrainConfig, TrainingDivergence, train, validate


def small_model(variant, n_items=40, seed=0):
    split = 8 if variant in ("vaeemp", "vaegan") else None
    latent = 12 if split else 8
    return VAE(ModelConfig(variant, n_items, hidden=32, latent_dim=latent, split=split,
                           adv_hidden=(16,)), seed=seed)


def small_cfg(variant, **kw):
    kw.setdefault("epochs", 3)
    return TrainConfig(variant=variant, batch_size=60, beta=0.2 if variant == "vaerec" else 1.0, **kw)


def test_zero_epochs_returns_initial(tiny_synth):
    model = small_model("vaerec")
    before = model.state_dict()
    best, log = train(model, tiny_synth.dataset, small_cfg("vaerec", epochs=0))
    assert log == [] and best.epoch == 0
    for k, v in before.items():
        np.testing.assert_array_equal(best.params[k], v)


@pytest.mark.parametrize("variant", ["vaerec", "vaeemp", "vaegan", "vaeadv"])
def test_same_seed_identical(tiny_synth, variant):
    runs = [train(small_model(variant), tiny_synth.dataset, small_cfg(variant, epochs=2))[0]
            for _ in range(2)]
    assert runs[0].epoch == runs[1].epoch
    for k in runs[0].params:
        np.testing.assert_array_equal(runs[0].params[k], runs[1].params[k])


def test_log_one_entry_per_epoch(tiny_synth):
    _, log = train(small_model("vaerec"), tiny_synth.dataset, small_cfg("vaerec", epochs=4, patience=50))
    assert [e.epoch for e in log] == [1, 2, 3, 4]
    assert all(set(e.val_auc) == {"gender", "age"} for e in log)
    assert all(math.isfinite(e.loss["total"]) for e in log)


def test_best_checkpoint_is_argmax(tiny_synth):
    best, log = train(small_model("vaerec"), tiny_synth.dataset, small_cfg("vaerec", epochs=8, patience=50))
    ndcgs = [e.val_ndcg for e in log]
    assert best.epoch == log[int(np.argmax(ndcgs))].epoch
    restored = validate(best.build(), tiny_synth.dataset, cfg=small_cfg("vaerec"))
    assert restored.ndcg == pytest.approx(max(ndcgs), abs=1e-5)  # float32 storage


def test_early_stopping(tiny_synth):
    _, log = train(small_model("vaerec"), tiny_synth.dataset,
                   small_cfg("vaerec", epochs=60, patience=2, lr=3e-2))
    assert len(log) < 60


def test_variant_mismatch(tiny_synth):
    with pytest.raises(ConfigError):
        train(small_model("vaerec"), tiny_synth.dataset, small_cfg("vaeemp"))


@pytest.mark.parametrize("variant", ["vaeadv", "vaegan"])
def test_parameter_partition(variant):
    model = small_model(variant)
    main, adv = set(model.main_parameters()), set(model.adversary_parameters())
    assert main and adv and not main & adv
    assert main | adv == set(model.parameters())


def test_vaegan_logs_discriminator_accuracy(tiny_synth):
    _, log = train(small_model("vaegan"), tiny_synth.dataset, small_cfg("vaegan", epochs=2))
    assert all(0.0 <= e.disc_accuracy <= 1.0 for e in log)
    assert "disc_accuracy" in log[0].to_record()


def test_record_has_no_wall_time(tiny_synth):
    _, log = train(small_model("vaerec"), tiny_synth.dataset, small_cfg("vaerec", epochs=1))
    rec = log[0].to_record()
    assert "wall_time" not in rec and "disc_accuracy" not in rec
    assert "wall_time" in log[0].to_record(include_time=True)


def test_divergence_returns_last_good(tiny_synth):
    model = small_model("vaerec")

    def poison(entry):
        if entry.epoch == 2:
            w = next(iter(model.main_parameters().values()))
            w.data[...] = np.nan

    with pytest.raises(TrainingDivergence) as info:
        train(model, tiny_synth.dataset, small_cfg("vaerec", epochs=5, patience=50), log_callback=poison)
    exc = info.value
    assert exc.checkpoint.epoch == 2
    assert all(np.isfinite(v).all() for v in exc.checkpoint.params.values())
    assert [e.epoch for e in exc.log] == [1, 2]


class TestValidate:
    def test_deterministic(self, tiny_synth):
        model = small_model("vaeemp")
        a = validate(model, tiny_synth.dataset, cfg=small_cfg("vaeemp"))
        b = validate(model, tiny_synth.dataset, cfg=small_cfg("vaeemp"))
        assert a == b

    def test_ranges(self, tiny_synth):
        v = validate(small_model("vaerec"), tiny_synth.dataset, cfg=small_cfg("vaerec"))
        assert 0.0 <= v.ndcg <= 1.0
        assert all(0.0 <= x <= 1.0 for x in v.auc.values())
        assert v.disc_accuracy is None

    def test_untrained_ndcg_reported(self, tiny_synth):
        # chance-level smoke value; reported, not asserted against a threshold
        v = validate(small_model("vaerec", seed=9), tiny_synth.dataset, cfg=small_cfg("vaerec"))
        print(f"untrained NDCG@10 {v.ndcg:.4f}")


@pytest.mark.slow
def test_vaeemp_independence_term_halves():
    data = synth.generate(synth.SynthConfig(rho=0.9, seed=0)).dataset
    model = VAE(ModelConfig("vaeemp", data.interactions.n_items, latent_dim=24, split=16), seed=0)
    best, log = train(model, data, TrainConfig(variant="vaeemp", beta=1.0))
    first = log[0].loss["independence"]
    at_best = next(e for e in log if e.epoch == best.epoch).loss["independence"]
    assert at_best <= 0.5 * first, (first, at_best)
