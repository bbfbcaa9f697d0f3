"""Planted-factor synthetic datasets with tunable attribute leakage.

Binary attributes are drawn first. Factor 0 mixes standardized gender with Gaussian
noise so that its correlation with gender is exactly ``rho``; factor 1 does the same
for age group, the remaining factors are pure noise. ``rho = 0`` makes attributes
independent of preferences and ``leak_scale`` scales how strongly the two leaked
factors drive item choice. Each user's items are drawn without replacement from a
softmax over items driven by the factors (Gumbel top-n).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from fairvae import dataio
from fairvae import numerics as nx


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 300
    n_factors: int = 16
    rho: float = 0.9
    item_scale: float = 1.5
    leak_scale: float = 1.0
    popularity: float = 1.0
    mean_items: float = 30.0
    min_items: int = 5
    senior_share: float = 0.3
    female_share: float = 0.4
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass
class SynthData:
    dataset: dataio.Dataset
    factors: np.ndarray
    item_factors: np.ndarray


def generate(cfg: SynthConfig) -> SynthData:
    rng = nx.make_rng([cfg.seed, 17])
    n, m, f = cfg.n_users, cfg.n_items, cfg.n_factors
    if f < 2:
        raise ValueError("need at least two factors to plant both attributes")
    gender = (rng.random(n) < cfg.female_share).astype(int)
    age = (rng.random(n) < cfg.senior_share).astype(int)
    u = rng.standard_normal((n, f))
    mix = np.sqrt(max(0.0, 1.0 - cfg.rho ** 2))
    for k, attr in enumerate((gender, age)):
        std = attr.std()
        centred = (attr - attr.mean()) / std if std > 0 else np.zeros(n)
        u[:, k] = cfg.rho * centred + mix * u[:, k]
    v = rng.standard_normal((m, f)) * cfg.item_scale / np.sqrt(f)
    v[:, :2] *= cfg.leak_scale
    pop = rng.standard_normal(m) * cfg.popularity
    logits = u @ v.T + pop[None, :]
    sizes = np.maximum(cfg.min_items, rng.poisson(cfg.mean_items, size=n))
    sizes = np.minimum(sizes, m - 1)
    gumbel = rng.gumbel(size=(n, m))
    order = np.argsort(-(logits + gumbel), axis=1, kind="stable")
    rows = np.repeat(np.arange(n), sizes)
    cols = np.concatenate([order[i, : sizes[i]] for i in range(n)])
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, m))
    width_u, width_i = len(str(n - 1)), len(str(m - 1))
    users = [f"u{i:0{width_u}d}" for i in range(n)]
    items = [f"i{j:0{width_i}d}" for j in range(m)]
    im = dataio.InteractionMatrix(users, items, mat)
    labels = dataio.SensitiveLabels(gender, age)
    split = dataio.split_users(im, labels, cfg.fractions, seed=cfg.seed)
    return SynthData(dataio.Dataset(im, labels, split), u, v)


def save(directory, data: SynthData) -> None:
    dataio.save_dataset(directory, data.dataset)
    d = Path(directory)
    with (d / "factors.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("user\t" + "\t".join(f"f{k}" for k in range(data.factors.shape[1])) + "\n")
        for name, row in zip(data.dataset.interactions.users, data.factors):
            fh.write(name + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
