"""Network graphs for the four VAE variants and their auxiliary networks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from fairvae import numerics as nx
from fairvae.errors import ConfigError, ModelError, ShapeError
from fairvae.numerics import Tensor
from fairvae.objectives import SPLIT_VARIANTS, VARIANTS

logger = logging.getLogger(__name__)

N_ATTRIBUTES = 2  # gender, age group


@dataclass
class EncoderConfig:
    input_dim: int
    hidden: tuple[int, ...] = (600,)
    latent_dim: int = 64
    split: int | None = None

    def __post_init__(self):
        if self.split is None:
            self.split = self.latent_dim
        self.hidden = tuple(self.hidden)
        if not self.hidden:
            raise ConfigError("encoder needs at least one hidden layer")
        if not 0 < self.split <= self.latent_dim:
            raise ConfigError(f"split index {self.split} outside (0, {self.latent_dim}]")


@dataclass
class SensitiveDecoderConfig:
    input_dim: int
    hidden: tuple[int, ...] = ()
    n_heads: int = N_ATTRIBUTES


@dataclass
class AdversaryConfig:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    n_heads: int = N_ATTRIBUTES


@dataclass
class ModelConfig:
    """Full architecture description; stored verbatim in checkpoints."""

    variant: str
    n_items: int
    hidden: int = 600
    latent_dim: int = 64
    split: int | None = None
    adv_hidden: tuple[int, ...] = (64, 64)
    sensitive_hidden: tuple[int, ...] = ()
    logvar_clip: float = nx.LOGVAR_CLIP
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant in SPLIT_VARIANTS:
            if self.split is None or not 0 < self.split < self.latent_dim:
                raise ConfigError("split variants need 0 < split < latent_dim")
        else:
            self.split = self.latent_dim
        self.adv_hidden = tuple(self.adv_hidden)
        self.sensitive_hidden = tuple(self.sensitive_hidden)

    @property
    def b_dim(self) -> int:
        return self.latent_dim - self.split

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adv_hidden"] = list(self.adv_hidden)
        d["sensitive_hidden"] = list(self.sensitive_hidden)
        return d


@dataclass
class LatentState:
    """Variational parameters for a batch; z is ``[:, :split]`` and b is ``[:, split:]``."""

    mean: Tensor
    log_var: Tensor
    split: int

    @property
    def z_mean(self) -> np.ndarray:
        return self.mean.data[:, : self.split]

    def sample(self, rng: np.random.Generator | None = None, eps=None) -> Tensor:
        return nx.gaussian_sample(self.mean, self.log_var, rng=rng, eps=eps)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        # LeCun-normal init keeps SELU activations self-normalizing.
        self.W = Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in),
                        requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def parameters(self) -> Iterator[Tensor]:
        yield self.W
        yield self.b


class MLP:
    def __init__(self, sizes: list[int], rng: np.random.Generator, name: str,
                 activation: str = "selu", slope: float = 0.2):
        self.layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.activation = activation
        self.slope = slope
        self.in_dim = sizes[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.in_dim:
            raise ShapeError(f"expected {self.in_dim} input columns, got {x.data.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nx.selu(x) if self.activation == "selu" else nx.leaky_relu(x, self.slope)
        return x

    def parameters(self) -> Iterator[Tensor]:
        for layer in self.layers:
            yield from layer.parameters()


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise ModelError(f"non-finite activation in {where}")
    return t


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


class VAE:
    """One of the four recommender variants.

    Non-split variants use a single encoder whose full latent is z. Split variants
    run two separate encoders over the same input, one producing z and one b; only z
    reaches the item decoder.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = nx.make_rng([seed, 1])
        c = config
        self.encoders: dict[str, MLP] = {}
        if c.variant in SPLIT_VARIANTS:
            self.encoders["enc_z"] = MLP([c.n_items, c.hidden, 2 * c.split], rng, "enc_z")
            self.encoders["enc_b"] = MLP([c.n_items, c.hidden, 2 * c.b_dim], rng, "enc_b")
        else:
            self.encoders["enc"] = MLP([c.n_items, c.hidden, 2 * c.latent_dim], rng, "enc")
        self.decoder = MLP([c.split, c.hidden, c.n_items], rng, "dec")
        self.sensitive_decoder = None
        self.adversary = None
        self.discriminator = None
        if c.variant in SPLIT_VARIANTS:
            self.sensitive_decoder = MLP([c.b_dim, *c.sensitive_hidden, N_ATTRIBUTES], rng,
                                         "sens", activation="leaky", slope=c.leaky_slope)
        if c.variant == "vaeadv":
            self.adversary = MLP([c.split, *c.adv_hidden, N_ATTRIBUTES], rng, "adv",
                                 activation="leaky", slope=c.leaky_slope)
        if c.variant == "vaegan":
            self.discriminator = MLP([c.latent_dim, *c.adv_hidden, 1], rng, "disc",
                                     activation="leaky", slope=c.leaky_slope)

    @property
    def split(self) -> int:
        return self.config.split

    def main_parameters(self) -> dict[str, Tensor]:
        nets = list(self.encoders.values()) + [self.decoder]
        if self.sensitive_decoder is not None:
            nets.append(self.sensitive_decoder)
        return {p.name: p for net in nets for p in net.parameters()}

    def adversary_parameters(self) -> dict[str, Tensor]:
        net = self.adversary if self.adversary is not None else self.discriminator
        if net is None:
            return {}
        return {p.name: p for p in net.parameters()}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.main_parameters(), **self.adversary_parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ModelError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()

    def _head(self, net: MLP, x: Tensor, dim: int) -> tuple[Tensor, Tensor]:
        out = net(x)
        clip = self.config.logvar_clip
        return out[:, :dim], nx.clip(out[:, dim:], -clip, clip)

    def encode(self, x) -> LatentState:
        """Variational parameters for a batch of interaction rows (L2-normalized first)."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.n_items:
            raise ShapeError(f"expected rows over {self.config.n_items} items, got {x.shape}")
        inp = Tensor(l2_normalize(x))
        c = self.config
        if c.variant in SPLIT_VARIANTS:
            mz, lz = self._head(self.encoders["enc_z"], inp, c.split)
            mb, lb = self._head(self.encoders["enc_b"], inp, c.b_dim)
            mean, log_var = nx.concat([mz, mb]), nx.concat([lz, lb])
        else:
            mean, log_var = self._head(self.encoders["enc"], inp, c.latent_dim)
        _check_finite(mean, "encoder mean")
        _check_finite(log_var, "encoder log-variance")
        return LatentState(mean, log_var, c.split)

    def decode(self, z) -> Tensor:
        """Item logits from the z-part only."""
        z = nx._lift(z)
        if z.data.shape[-1] != self.split:
            raise ShapeError(f"decoder takes z of dim {self.split}, got {z.data.shape[-1]}")
        return _check_finite(self.decoder(z), "decoder")

    def sensitive_logits(self, b) -> Tensor:
        if self.sensitive_decoder is None:
            raise ConfigError(f"variant {self.config.variant} has no sensitive decoder")
        return _check_finite(self.sensitive_decoder(nx._lift(b)), "sensitive decoder")

    def decode_sensitive(self, b) -> Tensor:
        return nx.sigmoid(self.sensitive_logits(b))

    def adversary_logits(self, z) -> Tensor:
        if self.adversary is None:
            raise ConfigError(f"variant {self.config.variant} has no adversary")
        return _check_finite(self.adversary(nx._lift(z)), "adversary")

    def adversary_classify(self, z) -> Tensor:
        return nx.sigmoid(self.adversary_logits(z))

    def discriminate(self, latent) -> Tensor:
        """Logit per row estimating log q(z,b) - log q(z)q(b)."""
        if self.discriminator is None:
            raise ConfigError(f"variant {self.config.variant} has no discriminator")
        return _check_finite(self.discriminator(nx._lift(latent)), "discriminator")[:, 0]

    def item_scores(self, x, mode: str = "deterministic",
                    rng: np.random.Generator | None = None) -> np.ndarray:
        """Inference path: decode the latent mean, or one seeded latent draw."""
        with nx.no_grad():
            state = self.encode(x)
            if mode == "deterministic":
                z = state.mean.data[:, : self.split]
            elif mode == "sampled":
                z = state.sample(rng).data[:, : self.split]
            else:
                raise ConfigError(f"unknown inference mode {mode!r}")
            return self.decode(Tensor(z)).data

    def representations(self, x, mode: str = "deterministic",
                        rng: np.random.Generator | None = None) -> np.ndarray:
        """The z-part of the latent used for recommendation (probe input)."""
        with nx.no_grad():
            state = self.encode(x)
            if mode == "sampled":
                return state.sample(rng).data[:, : self.split]
            return state.z_mean.copy()


def shuffle_b(samples, split: int, rng: np.random.Generator) -> np.ndarray:
    """Permute the b-part rows across the batch, leaving z rows untouched."""
    arr = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64)
    out = arr.copy()
    if arr.shape[0] < 2:
        logger.warning("shuffle_b on a batch of %d rows is a no-op", arr.shape[0])
        return out
    out[:, split:] = arr[rng.permutation(arr.shape[0]), split:]
    return out
