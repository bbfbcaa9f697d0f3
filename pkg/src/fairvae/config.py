"""Flat run configuration: ``key = value`` files, CLI overrides, documented defaults."""

from __future__ import annotations

from pathlib import Path
from typing import Any

from fairvae.errors import ConfigError

AUTO = "auto"

# key: (default, type, description)
DEFAULTS: dict[str, tuple[Any, type, str]] = {
    "seed": (0, int, "master seed; every random stream is derived from it"),
    "data.kind": ("movielens", str, "raw dataset kind for prepare: movielens | lastfm"),
    "data.rating_threshold": (4.0, float, "MovieLens ratings at or above this become positives"),
    "data.age_threshold": (35, int, "users with age >= threshold are senior"),
    "data.min_item_positives": (5, int, "MovieLens items with fewer positives are dropped"),
    "data.min_item_events": (110, int, "LastFM artists with fewer listening events are dropped"),
    "data.lastfm_value": ("count", str, "third LastFM column: count | timestamp"),
    "data.since": (-1, int, "with timestamp values, keep events at or after this (-1 = all)"),
    "split.train": (0.8, float, "fraction of users for training"),
    "split.val": (0.1, float, "fraction of users for validation"),
    "split.test": (0.1, float, "fraction of users for testing"),
    "split.foldin_fraction": (0.8, float, "share of an evaluation user's items fed to the model"),
    "model.variant": ("vaerec", str, "vaerec | vaeadv | vaegan | vaeemp | slim"),
    "model.hidden": (600, int, "hidden width of encoders and decoder"),
    "model.latent_dim": (AUTO, int, "latent size; auto = 64 for vaerec, 24 otherwise"),
    "model.split": (AUTO, int, "z size of split variants; auto = 2/3 of latent_dim"),
    "model.adv_hidden": ("64,64", str, "hidden widths of adversary/discriminator"),
    "model.sensitive_hidden": ("", str, "hidden widths of the sensitive decoder (empty = linear)"),
    "model.logvar_clip": (10.0, float, "encoder log-variance clamp magnitude"),
    "loss.beta": (AUTO, float, "prior KL weight; auto = 0.2 for vaerec, 1.0 otherwise"),
    "loss.alpha": (10.0, float, "sensitive re-classification weight"),
    "loss.gamma": (5.0, float, "z-b independence weight"),
    "loss.adv_weight": (1.0, float, "weight of the adversary-fooling term (vaeadv)"),
    "train.epochs": (200, int, "epoch budget"),
    "train.batch_size": (500, int, "users per minibatch"),
    "train.lr": (1e-3, float, "Adam learning rate"),
    "train.adversary_steps": (5, int, "adversary updates per main update"),
    "train.patience": (20, int, "early-stopping patience in validations"),
    "train.dropout": (0.5, float, "input dropout rate"),
    "train.validate_every": (1, int, "validate every n epochs"),
    "eval.k_ndcg": (10, int, "cutoff for NDCG"),
    "eval.k_fair": (100, int, "cutoff for chi-square and Kendall-Tau"),
    "eval.probe_folds": (5, int, "cross-validation folds of the AUC probe"),
    "eval.probe_C": (1.0, float, "inverse L2 strength of the AUC probe"),
    "eval.bootstrap": (1000, int, "user bootstrap resamples for spreads (0 = off)"),
    "eval.sampled": (False, bool, "also evaluate in sampled-latent mode"),
    "eval.kt_penalty": (0.5, float, "Kendall-Tau penalty for pairs missing from one list"),
    "eval.chi2_min_expected": (3.0, float, "minimum expected count per chi-square cell"),
    "eval.split": ("test", str, "users to evaluate: test | val"),
    "slim.l1": (1.0, float, "SLIM L1 penalty"),
    "slim.l2": (1.0, float, "SLIM L2 penalty"),
    "slim.max_iters": (100, int, "SLIM coordinate-descent sweeps per column"),
    "slim.tol": (1e-5, float, "SLIM convergence threshold on coordinate change"),
    "synth.n_users": (2000, int, "synthetic users"),
    "synth.n_items": (300, int, "synthetic items"),
    "synth.n_factors": (16, int, "synthetic preference factors"),
    "synth.rho": (0.9, float, "correlation between each leaked factor and its binary attribute"),
    "synth.item_scale": (1.5, float, "strength of factor-driven preferences"),
    "synth.leak_scale": (1.0, float, "multiplier on the item loadings of the two leaked factors"),
    "synth.popularity": (1.0, float, "spread of item popularity logits"),
    "synth.mean_items": (30.0, float, "mean interactions per synthetic user"),
}


def _parse(key: str, raw, kind: type):
    if isinstance(raw, str):
        raw = raw.strip()
        if raw == AUTO and DEFAULTS[key][0] == AUTO:
            return AUTO
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            lowered = str(raw).lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


class RunConfig(dict):
    """Flat key -> value mapping with every key present; unknown keys are rejected."""

    def __init__(self, overrides: dict | None = None):
        super().__init__({k: v[0] for k, v in DEFAULTS.items()})
        for k, v in (overrides or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = _parse(key, value, DEFAULTS[key][1])

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> RunConfig:
        values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
        values.update(overrides or {})
        return cls(values)

    def resolved(self) -> dict:
        """Copy with ``auto`` entries replaced by their variant-dependent values."""
        out = dict(self)
        variant = out["model.variant"]
        if out["model.latent_dim"] == AUTO:
            out["model.latent_dim"] = 64 if variant in ("vaerec", "slim") else 24
        if out["model.split"] == AUTO:
            out["model.split"] = out["model.latent_dim"] * 2 // 3
        if out["loss.beta"] == AUTO:
            out["loss.beta"] = 0.2 if variant in ("vaerec", "slim") else 1.0
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.items()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def parse_widths(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse layer widths {text!r}") from None


def describe() -> str:
    return "".join(f"{k} = {_fmt(d)}    # {doc}\n" for k, (d, _, doc) in DEFAULTS.items())
