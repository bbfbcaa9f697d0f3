"""Loss terms for the VAE variants and their per-variant composition.

All terms are written as tape ops so one ``backward()`` on the composed total
reaches every encoder/decoder parameter. Terms that are objectives in the
maximization form (log-likelihoods) are returned as such; ``compose`` flips
signs so the returned total is a loss to minimize.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from fairvae import numerics as nx
from fairvae.errors import ConfigError, NumericError, ShapeError
from fairvae.numerics import Tensor

VARIANTS = ("vaerec", "vaeadv", "vaegan", "vaeemp")
SPLIT_VARIANTS = ("vaegan", "vaeemp")
COV_RIDGE = 1e-6


def _as_batch(t: Tensor) -> tuple[Tensor, bool]:
    if t.data.ndim == 1:
        return nx.take(t, (None, slice(None))), True
    return t, False


def multinomial_ll(x, logits) -> Tensor:
    """``sum_i x_i log softmax(logits)_i`` per row (a scalar for 1-d input).

    Zero entries of ``x`` only enter through the softmax normalizer.
    """
    logits = nx._lift(logits)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape != logits.shape:
        raise ShapeError(f"x {x.shape} and logits {logits.shape} differ")
    lg, single = _as_batch(logits)
    per_row = (nx.log_softmax(lg) * x.reshape(lg.shape)).sum(axis=1)
    return per_row[0] if single else per_row


def gaussian_prior_kl(mean, log_var) -> Tensor:
    """KL from N(mean, exp(log_var)) to N(0, I) per row, summed over dims."""
    mean, log_var = nx._lift(mean), nx._lift(log_var)
    terms = nx.square(mean) + nx.exp(log_var) - 1.0 - log_var
    axis = None if mean.data.ndim == 1 else 1
    return terms.sum(axis=axis) * 0.5


def sensitive_ce(s, probs) -> Tensor:
    """Binary cross-entropy on probabilities, averaged over attributes and batch."""
    probs = nx._lift(probs)
    s = np.asarray(s, dtype=np.float64)
    if np.any(probs.data <= 0.0) or np.any(probs.data >= 1.0):
        raise NumericError("sensitive_ce needs probabilities strictly inside (0, 1)")
    ce = -(nx.log(probs) * s + nx.log(1.0 - probs) * (1.0 - s))
    return ce.mean()


def sensitive_ce_logits(s, logits) -> Tensor:
    """Same quantity as ``sensitive_ce`` computed stably from logits."""
    return nx.bce_with_logits(nx._lift(logits), s).mean()


def split_covariances(cov1: np.ndarray, split: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return the block-diagonal copy of ``cov1`` and the two diagonal blocks."""
    cov2 = np.zeros_like(cov1)
    zz = cov1[:split, :split]
    bb = cov1[split:, split:]
    cov2[:split, :split] = zz
    cov2[split:, split:] = bb
    return cov2, zz, bb


def _logdet(m: np.ndarray, what: str) -> float:
    sign, value = np.linalg.slogdet(m)
    if sign <= 0 or not np.isfinite(value):
        raise NumericError(f"{what} covariance is singular or not positive definite")
    return float(value)


def gaussian_split_kl(cov1: np.ndarray, split: int) -> float:
    """KL between zero-mean Gaussians with ``cov1`` and its z/b block-diagonal copy.

    The block-diagonal inverse is assembled from the two block inverses.
    """
    cov1 = np.asarray(cov1, dtype=np.float64)
    d = cov1.shape[0]
    cov2, zz, bb = split_covariances(cov1, split)
    inv2 = np.zeros_like(cov1)
    inv2[:split, :split] = np.linalg.inv(zz)
    inv2[split:, split:] = np.linalg.inv(bb)
    logdet2 = _logdet(zz, "z-block") + _logdet(bb, "b-block")
    logdet1 = _logdet(cov1, "joint")
    return 0.5 * (logdet2 - logdet1 - d + float(np.sum(inv2 * cov1)))


def empiric_kl(samples, split: int, ridge: float = COV_RIDGE) -> Tensor:
    """Gaussian KL penalty on the z/b cross-covariance of a batch of latent samples.

    The batch covariance (mean-centred, 1/(n-1), plus ``ridge * I``) is compared to
    the same matrix with its z-b cross blocks zeroed.
    """
    samples = nx._lift(samples)
    z = samples.data
    n, d = z.shape
    if not 0 < split < d:
        raise ShapeError(f"split index {split} must lie strictly inside latent dim {d}")
    if n < 2:
        raise ShapeError("empiric_kl needs at least two samples")
    centred = z - z.mean(axis=0, keepdims=True)
    cov1 = centred.T @ centred / (n - 1) + ridge * np.eye(d)
    value = gaussian_split_kl(cov1, split)
    if not np.isfinite(value):
        raise NumericError("empiric_kl is not finite")

    def backward(g):
        _, zz, bb = split_covariances(cov1, split)
        inv1 = np.linalg.inv(cov1)
        inv2 = np.zeros_like(cov1)
        inv2[:split, :split] = np.linalg.inv(zz)
        inv2[split:, split:] = np.linalg.inv(bb)
        mask = np.zeros((d, d), dtype=bool)
        mask[:split, :split] = True
        mask[split:, split:] = True
        # Sigma2 = mask * Sigma1, so its inverse and trace term feed back through the mask.
        sandwich = inv2 @ cov1 @ inv2
        grad_cov = 0.5 * (inv2 * mask - inv1 + inv2 - sandwich * mask)
        grad_cov = 0.5 * (grad_cov + grad_cov.T)
        return (g * (2.0 / (n - 1)) * (centred @ grad_cov),)

    return nx._record(np.asarray(value), (samples,), backward)


def gan_kl_estimate(logits) -> Tensor:
    """Density-ratio estimate of the z-b total correlation: the batch-mean logit."""
    return nx._lift(logits).mean()


def discriminator_loss(real_logits, shuffled_logits) -> Tensor:
    """Binary cross-entropy with unshuffled samples as class 1 and shuffled as class 0."""
    real = nx.bce_with_logits(nx._lift(real_logits), 1.0).mean()
    fake = nx.bce_with_logits(nx._lift(shuffled_logits), 0.0).mean()
    return (real + fake) * 0.5


@dataclass
class LossBreakdown:
    reconstruction: float = 0.0
    prior_kl: float = 0.0
    sensitive_ce: float = 0.0
    independence: float = 0.0
    adversary: float = 0.0
    total: float = 0.0
    beta: float = 0.0
    alpha: float = 0.0
    gamma: float = 0.0
    adv_weight: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


_REQUIRED = {
    "vaerec": ("reconstruction", "prior_kl"),
    "vaeadv": ("reconstruction", "prior_kl", "adversary"),
    "vaegan": ("reconstruction", "prior_kl", "sensitive_ce", "independence"),
    "vaeemp": ("reconstruction", "prior_kl", "sensitive_ce", "independence"),
}


def compose(variant: str, parts: dict, beta: float, alpha: float = 0.0,
            gamma: float = 0.0, adv_weight: float = 0.0) -> tuple[Tensor, LossBreakdown]:
    """Weighted total loss for ``variant`` and a float breakdown for logging.

    ``parts`` holds batch-mean terms in loss form: ``reconstruction`` is the negative
    multinomial log-likelihood, ``sensitive_ce`` the re-classification cross-entropy,
    ``independence`` the z-b divergence estimate, and ``adversary`` the adversary's
    cross-entropy on z (which the encoder tries to increase).
    """
    if variant not in _REQUIRED:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    missing = [k for k in _REQUIRED[variant] if k not in parts]
    if missing:
        raise ConfigError(f"variant {variant} needs loss parts {missing}")
    p = {k: nx._lift(v) for k, v in parts.items()}
    total = p["reconstruction"] + p["prior_kl"] * beta
    if variant == "vaeadv":
        total = total - p["adversary"] * adv_weight
    elif variant in SPLIT_VARIANTS:
        total = total + p["sensitive_ce"] * alpha + p["independence"] * gamma
    breakdown = LossBreakdown(
        **{k: float(v.data) for k, v in p.items() if k in LossBreakdown.__dataclass_fields__},
        total=float(total.data), beta=beta, alpha=alpha, gamma=gamma, adv_weight=adv_weight,
    )
    return total, breakdown
