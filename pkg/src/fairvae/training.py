"""Optimization loops for the four VAE variants."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from fairvae import dataio
from fairvae import evalmetrics as em
from fairvae import numerics as nx
from fairvae import objectives as obj
from fairvae.errors import ConfigError, NumericError, TrainingError
from fairvae.model import VAE, ModelConfig, shuffle_b
from fairvae.numerics import Tensor

logger = logging.getLogger(__name__)

ATTRIBUTES = ("gender", "age")


@dataclass
class TrainConfig:
    variant: str = "vaerec"
    epochs: int = 200
    batch_size: int = 500
    seed: int = 0
    lr: float = 1e-3
    adversary_steps: int = 5
    patience: int = 20
    beta: float = 0.2
    alpha: float = 10.0
    gamma: float = 5.0
    adv_weight: float = 1.0
    dropout: float = 0.5
    foldin_fraction: float = 0.8
    probe_folds: int = 5
    probe_C: float = 1.0
    validate_every: int = 1

    def __post_init__(self):
        if self.variant not in obj.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("batch_size", "adversary_steps", "patience", "validate_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


@dataclass
class TrainLogEntry:
    epoch: int
    loss: dict
    val_ndcg: float
    val_auc: dict
    wall_time: float
    disc_accuracy: float | None = None

    def to_record(self, include_time: bool = False) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        if d["disc_accuracy"] is None:
            d.pop("disc_accuracy")
        return d


@dataclass
class ModelCheckpoint:
    """Parameters of one epoch plus everything needed to rebuild the model."""

    model_config: dict
    params: dict[str, np.ndarray]
    run_config: dict = field(default_factory=dict)
    vocab: str = ""
    epoch: int = 0

    def build(self) -> VAE:
        cfg = dict(self.model_config)
        model = VAE(ModelConfig(**cfg))
        model.load_state_dict(self.params)
        return model


class TrainingDivergence(TrainingError):
    def __init__(self, message: str, checkpoint: ModelCheckpoint, log: list[TrainLogEntry]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


@dataclass
class Validation:
    ndcg: float
    auc: dict[str, float]
    disc_accuracy: float | None = None


def validate(model: VAE, data: dataio.Dataset, users=None, cfg: TrainConfig | None = None,
             partition: dataio.EvalPartition | None = None) -> Validation:
    """Deterministic-mode NDCG@10 and per-attribute probe AUC on validation users."""
    cfg = cfg or TrainConfig(variant=model.config.variant)
    if partition is None:
        users = data.split.val if users is None else users
        partition = dataio.make_eval_partition(data.interactions, users, cfg.foldin_fraction, cfg.seed)
    recs = em.recommend_top_k(model, partition.foldin, 10)
    ndcg = em.weighted_mean(em.ndcg_scores(recs, partition.holdout, 10))
    reps = model.representations(partition.foldin.toarray())
    labels = data.labels.subset(partition.users)
    auc = {}
    for attr in ATTRIBUTES:
        try:
            auc[attr] = em.probe_auc(reps, labels.attribute(attr), cfg.probe_folds, cfg.probe_C, cfg.seed)
        except em.UndefinedMetricError:
            auc[attr] = math.nan
    disc = None
    if model.discriminator is not None:
        disc = discriminator_accuracy(model, partition.foldin.toarray(), nx.make_rng([cfg.seed, 13]))
    return Validation(ndcg, auc, disc)


def discriminator_accuracy(model: VAE, rows: np.ndarray, rng: np.random.Generator) -> float:
    with nx.no_grad():
        samples = model.encode(rows).sample(rng).data
        shuffled = shuffle_b(samples, model.split, rng)
        real = model.discriminate(Tensor(samples)).data
        fake = model.discriminate(Tensor(shuffled)).data
    return float(((real > 0).sum() + (fake <= 0).sum()) / (2 * len(real)))


def _checkpoint(model: VAE, run_config: dict, vocab: str, epoch: int) -> ModelCheckpoint:
    return ModelCheckpoint(model.config.to_dict(), model.state_dict(), dict(run_config), vocab, epoch)


def _adversary_phase(model: VAE, opt: nx.Adam, batch: dataio.Batch, cfg: TrainConfig,
                     rng: np.random.Generator) -> float:
    with nx.no_grad():
        state = model.encode(batch.inputs)
        samples = state.sample(rng).data
    loss_value = math.nan
    for _ in range(cfg.adversary_steps):
        opt.zero_grad()
        if model.adversary is not None:
            loss = obj.sensitive_ce_logits(batch.labels,
                                           model.adversary_logits(Tensor(samples[:, : model.split])))
        else:
            shuffled = shuffle_b(samples, model.split, rng)
            loss = obj.discriminator_loss(model.discriminate(Tensor(samples)),
                                          model.discriminate(Tensor(shuffled)))
        loss.backward()
        opt.step()
        loss_value = float(loss.data)
    return loss_value


def main_loss(model: VAE, batch: dataio.Batch, cfg: TrainConfig, rng: np.random.Generator):
    """Composed loss for one batch; returns ``(total Tensor, LossBreakdown)``."""
    state = model.encode(batch.inputs)
    sample = state.sample(rng)
    z = sample[:, : model.split]
    logits = model.decode(z)
    parts = {
        "reconstruction": -obj.multinomial_ll(batch.targets, logits).mean(),
        "prior_kl": obj.gaussian_prior_kl(state.mean, state.log_var).mean(),
    }
    v = cfg.variant
    if v == "vaeadv":
        parts["adversary"] = obj.sensitive_ce_logits(batch.labels, model.adversary_logits(z))
    elif v in obj.SPLIT_VARIANTS:
        b = sample[:, model.split:]
        parts["sensitive_ce"] = obj.sensitive_ce_logits(batch.labels, model.sensitive_logits(b))
        if v == "vaeemp":
            parts["independence"] = obj.empiric_kl(sample, model.split)
        else:
            parts["independence"] = obj.gan_kl_estimate(model.discriminate(sample))
    return obj.compose(v, parts, cfg.beta, cfg.alpha, cfg.gamma, cfg.adv_weight)


def train(model: VAE, data: dataio.Dataset, cfg: TrainConfig, run_config: dict | None = None,
          log_callback=None) -> tuple[ModelCheckpoint, list[TrainLogEntry]]:
    """Train ``model`` on the training users; return the best-validation-NDCG checkpoint.

    Adversarial variants run ``adversary_steps`` updates of the adversary (or the
    discriminator) on detached latent samples before every main update. The main
    optimizer only owns encoder/decoder parameters, the adversary optimizer only the
    adversary's, so neither ever steps on the other's gradients.
    """
    if model.config.variant != cfg.variant:
        raise ConfigError(f"model variant {model.config.variant} != config variant {cfg.variant}")
    run_config = run_config or {}
    vocab = data.interactions.vocab_checksum()
    im = data.interactions
    rng = nx.make_rng([cfg.seed, 5])
    main_params = model.main_parameters()
    adv_params = model.adversary_parameters()
    main_opt = nx.Adam(main_params, lr=cfg.lr)
    adv_opt = nx.Adam(adv_params, lr=cfg.lr) if adv_params else None
    val_part = dataio.make_eval_partition(im, data.split.val, cfg.foldin_fraction, cfg.seed)
    best = _checkpoint(model, run_config, vocab, 0)
    last_good = best
    best_ndcg = -math.inf
    since_best = 0
    log: list[TrainLogEntry] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        n_batches = 0
        for batch in dataio.make_batches(im, data.split.train, cfg.batch_size, cfg.dropout, rng,
                                         data.labels, training=True):
            if adv_opt is not None:
                _adversary_phase(model, adv_opt, batch, cfg, rng)
            main_opt.zero_grad()
            if adv_opt is not None:
                adv_opt.zero_grad()
            try:
                total, breakdown = main_loss(model, batch, cfg, rng)
            except NumericError as exc:
                raise TrainingDivergence(f"epoch {epoch}: {exc}", last_good, log) from exc
            if not math.isfinite(breakdown.total):
                raise TrainingDivergence(f"epoch {epoch}: non-finite loss", last_good, log)
            total.backward()
            try:
                main_opt.step()
            except TrainingError as exc:
                raise TrainingDivergence(f"epoch {epoch}: {exc}", last_good, log) from exc
            if adv_opt is not None:
                adv_opt.zero_grad()
            for k, v in breakdown.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        mean_loss = {k: v / n_batches for k, v in sums.items()}
        last_good = _checkpoint(model, run_config, vocab, epoch)
        if epoch % cfg.validate_every and epoch != cfg.epochs:
            continue
        val = validate(model, data, cfg=cfg, partition=val_part)
        if val.disc_accuracy is not None and not 0.45 <= val.disc_accuracy <= 0.95:
            logger.warning("epoch %d: discriminator accuracy %.3f outside [0.45, 0.95]",
                           epoch, val.disc_accuracy)
        entry = TrainLogEntry(epoch, mean_loss, val.ndcg, val.auc, time.perf_counter() - t0,
                              val.disc_accuracy)
        log.append(entry)
        if log_callback is not None:
            log_callback(entry)
        logger.info("epoch %d loss %.4f val ndcg %.4f auc %s", epoch, mean_loss["total"],
                    val.ndcg, {k: round(v, 3) for k, v in val.auc.items()})
        if val.ndcg > best_ndcg:
            best_ndcg, best, since_best = val.ndcg, last_good, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best.epoch)
                break
    return best, log
