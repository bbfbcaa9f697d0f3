import pytest

from fairvae.config import AUTO, DEFAULTS, RunConfig, describe, parse_config_text, parse_widths
from fairvae.errors import ConfigError


def test_defaults_complete():
    cfg = RunConfig()
    assert set(cfg) == set(DEFAULTS)
    assert cfg["train.batch_size"] == 500 and cfg["train.patience"] == 20 and cfg["train.epochs"] == 200


def test_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig({"train.epoch": 3})


@pytest.mark.parametrize("key,raw", [("train.epochs", "ten"), ("eval.sampled", "maybe"), ("loss.alpha", "")])
def test_bad_values(key, raw):
    with pytest.raises(ConfigError):
        RunConfig({key: raw})


def test_bool_and_numeric_parsing():
    cfg = RunConfig({"eval.sampled": "yes", "train.lr": "0.01", "seed": "7"})
    assert cfg["eval.sampled"] is True and cfg["train.lr"] == 0.01 and cfg["seed"] == 7


@pytest.mark.parametrize("variant,latent,split,beta", [("vaerec", 64, 42, 0.2), ("vaeemp", 24, 16, 1.0),
                                                       ("vaegan", 24, 16, 1.0), ("vaeadv", 24, 16, 1.0)])
def test_auto_resolution(variant, latent, split, beta):
    r = RunConfig({"model.variant": variant}).resolved()
    assert (r["model.latent_dim"], r["model.split"], r["loss.beta"]) == (latent, split, beta)


def test_explicit_values_beat_auto():
    r = RunConfig({"model.variant": "vaeemp", "model.latent_dim": "30", "loss.beta": "0.5"}).resolved()
    assert r["model.latent_dim"] == 30 and r["model.split"] == 20 and r["loss.beta"] == 0.5
    assert RunConfig()["model.latent_dim"] == AUTO


def test_text_round_trip(tmp_path):
    cfg = RunConfig({"train.lr": "0.0003", "eval.sampled": "true", "model.adv_hidden": "32,32"})
    (tmp_path / "run.cfg").write_text(cfg.to_text())
    assert RunConfig.from_file(tmp_path / "run.cfg") == cfg
    assert RunConfig.from_file(tmp_path / "run.cfg").to_text() == cfg.to_text()


def test_file_overrides_and_comments(tmp_path):
    (tmp_path / "a.cfg").write_text("# comment\nseed = 3   # trailing\n\ntrain.epochs=5\n")
    cfg = RunConfig.from_file(tmp_path / "a.cfg", {"seed": "9"})
    assert cfg["seed"] == 9 and cfg["train.epochs"] == 5


def test_malformed_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("seed = 1\nnonsense\n")


def test_widths():
    assert parse_widths("64,64") == (64, 64) and parse_widths(" ") == ()
    with pytest.raises(ConfigError):
        parse_widths("64,x")


def test_describe_lists_every_key():
    text = describe()
    assert all(k in text for k in DEFAULTS)
