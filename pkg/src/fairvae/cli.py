"""Experiment front door: ``fairvae prepare|synth|train|evaluate|report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from fairvae import checkpoint as ckpt_io
from fairvae import dataio
from fairvae import evalmetrics as em
from fairvae import slim as slim_mod
from fairvae import synth
from fairvae.config import RunConfig, describe, parse_widths
from fairvae.errors import ConfigError, DataError, FairVAEError
from fairvae.model import VAE, ModelConfig
from fairvae.training import TrainConfig, TrainingDivergence, train

logger = logging.getLogger("fairvae")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(overrides)


def _fractions(cfg: dict) -> tuple[float, float, float]:
    return cfg["split.train"], cfg["split.val"], cfg["split.test"]


def _write_dataset(out: Path, data: dataio.Dataset, report: dict, cfg: RunConfig) -> None:
    dataio.save_dataset(out, data)
    _dump_json(out / "report.json", {"ingestion": report, "config": cfg.resolved(),
                                     "split_sizes": {s: int(len(data.split.users(s)))
                                                     for s in dataio.SPLIT_NAMES}})
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    r = cfg.resolved()
    if not args.users:
        raise DataError("prepare requires --users: a user attribute file (user, gender, age)")
    for label, path in (("ratings/events", args.ratings), ("users", args.users)):
        if not Path(path).exists():
            raise DataError(f"{label} file not found: {path}")
    kind = args.kind or r["data.kind"]
    if kind == "movielens":
        im, labels, report = dataio.ingest_movielens(
            args.ratings, args.users, r["data.rating_threshold"], r["data.age_threshold"],
            r["data.min_item_positives"])
    elif kind == "lastfm":
        since = r["data.since"] if r["data.since"] >= 0 else None
        im, labels, report = dataio.ingest_lastfm(
            args.ratings, args.users, r["data.min_item_events"], r["data.age_threshold"],
            r["data.lastfm_value"], since)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    split = dataio.split_users(im, labels, _fractions(r), r["seed"], r["split.foldin_fraction"])
    out = Path(args.out)
    _write_dataset(out, dataio.Dataset(im, labels, split), report.to_dict(), cfg)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    r = cfg.resolved()
    sc = synth.SynthConfig(n_users=r["synth.n_users"], n_items=r["synth.n_items"],
                           n_factors=r["synth.n_factors"], rho=r["synth.rho"],
                           item_scale=r["synth.item_scale"], leak_scale=r["synth.leak_scale"],
                           popularity=r["synth.popularity"],
                           mean_items=r["synth.mean_items"], seed=r["seed"],
                           fractions=_fractions(r))
    data = synth.generate(sc)
    out = Path(args.out)
    synth.save(out, data)
    d = data.dataset
    report = {"dataset": "synthetic", "n_users": d.interactions.n_users,
              "n_items": d.interactions.n_items, "n_records": int(d.interactions.matrix.nnz),
              "n_female": int(d.labels.gender.sum()), "n_senior": int(d.labels.age.sum())}
    _write_dataset(out, d, report, cfg)
    return 0


def model_config_from(r: dict, n_items: int) -> ModelConfig:
    return ModelConfig(variant=r["model.variant"], n_items=n_items, hidden=r["model.hidden"],
                       latent_dim=int(r["model.latent_dim"]), split=int(r["model.split"]),
                       adv_hidden=parse_widths(r["model.adv_hidden"]),
                       sensitive_hidden=parse_widths(r["model.sensitive_hidden"]),
                       logvar_clip=r["model.logvar_clip"])


def train_config_from(r: dict) -> TrainConfig:
    return TrainConfig(variant=r["model.variant"], epochs=r["train.epochs"],
                       batch_size=r["train.batch_size"], seed=r["seed"], lr=r["train.lr"],
                       adversary_steps=r["train.adversary_steps"], patience=r["train.patience"],
                       beta=float(r["loss.beta"]), alpha=r["loss.alpha"], gamma=r["loss.gamma"],
                       adv_weight=r["loss.adv_weight"], dropout=r["train.dropout"],
                       foldin_fraction=r["split.foldin_fraction"], probe_folds=r["eval.probe_folds"],
                       probe_C=r["eval.probe_C"], validate_every=r["train.validate_every"])


def cmd_train(args) -> int:
    cfg = _load_config(args)
    r = cfg.resolved()
    data = dataio.load_dataset(args.data, r["split.foldin_fraction"], r["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    if r["model.variant"] == "slim":
        train_rows = data.interactions.matrix[data.split.train]
        model = slim_mod.fit_slim(train_rows, r["slim.l1"], r["slim.l2"], r["slim.max_iters"],
                                  r["slim.tol"], vocab=data.interactions.vocab_checksum())
        slim_mod.save_slim(out / "model.slim", model)
        return 0
    tc = train_config_from(r)
    model = VAE(model_config_from(r, data.interactions.n_items), seed=r["seed"])
    log_path, time_path = out / "train_log.jsonl", out / "timing.jsonl"
    with log_path.open("w", encoding="utf-8") as log_fh, time_path.open("w", encoding="utf-8") as t_fh:
        def on_epoch(entry):
            log_fh.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")
            t_fh.write(json.dumps({"epoch": entry.epoch, "wall_time": entry.wall_time}) + "\n")
            log_fh.flush()

        try:
            best, _ = train(model, data, tc, run_config=r, log_callback=on_epoch)
        except TrainingDivergence as exc:
            ckpt_io.save(out / "last_good.fvrec", exc.checkpoint)
            _dump_json(out / "error.json", {"error": str(exc), "last_good_epoch": exc.checkpoint.epoch})
            raise
    ckpt_io.save(out / "model.fvrec", best)
    return 0


def _load_recommender(path: Path, vocab: str):
    head = path.read_bytes()[:16]
    if head.startswith(ckpt_io.MAGIC):
        ck = ckpt_io.load(path, expected_vocab=vocab)
        return ck.build(), ck.model_config["variant"], ck.run_config
    if head.startswith(b"# " + slim_mod.FORMAT.encode()):
        return slim_mod.load_slim(path, expected_vocab=vocab), "slim", {}
    raise DataError(f"{path} is neither a checkpoint nor a SLIM model")


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    r = cfg.resolved()
    data = dataio.load_dataset(args.data, r["split.foldin_fraction"], r["seed"])
    model, variant, model_run = _load_recommender(Path(args.model), data.interactions.vocab_checksum())
    modes = ["deterministic"]
    if r["eval.sampled"]:
        if variant == "slim":
            raise ConfigError("sampled mode needs a VAE checkpoint")
        modes.append("sampled")
    ec = em.EvalConfig(k_ndcg=r["eval.k_ndcg"], k_fair=r["eval.k_fair"],
                       probe_folds=r["eval.probe_folds"], probe_C=r["eval.probe_C"],
                       bootstrap=r["eval.bootstrap"], kt_penalty=r["eval.kt_penalty"],
                       chi2_min_expected=r["eval.chi2_min_expected"], seed=r["seed"])
    users = data.split.users(r["eval.split"])
    body = em.evaluate(model, data, users, ec, r["split.foldin_fraction"], modes)
    report = {"format": "fvrec-report", "version": 1, "model": args.name or variant,
              "variant": variant, "seed": r["seed"], "config": r, "model_config": model_run, **body}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, report)
    return 0


_COLUMNS = [("NDCG@10", "ndcg@10"), ("AUC G", "auc_gender"), ("AUC A", "auc_age"),
            ("chi2@100 G", "chi2@100_gender"), ("chi2@100 A", "chi2@100_age"),
            ("K.T@100 G", "kendall_tau@100_gender"), ("K.T@100 A", "kendall_tau@100_age")]


def _cell(entry) -> str:
    if entry is None:
        return "-"
    v, s = entry["value"], entry["std"]
    digits = 1 if abs(v) >= 100 else 3
    spread = "" if np.isnan(s) else f"±{s:.{digits}f}"
    return f"{v:.{digits}f}{spread}"


def render_table(reports: list[dict]) -> str:
    rows = [["Model"] + [c for c, _ in _COLUMNS]]
    for rep in reports:
        for mode, metrics in rep["modes"].items():
            name = rep["model"] if mode == "deterministic" else f"{rep['model']} sampled"
            rows.append([name] + [_cell(metrics.get(key)) for _, key in _COLUMNS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        rep = json.loads(Path(path).read_text(encoding="utf-8"))
        if rep.get("format") != "fvrec-report":
            raise DataError(f"{path} is not an evaluation report")
        reports.append(rep)
    text = render_table(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(describe())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairvae", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("prepare", help="ingest raw files into the canonical dataset format")
    common(p)
    p.add_argument("--kind", choices=["movielens", "lastfm"])
    p.add_argument("--ratings", required=True, help="ratings (MovieLens) or events (LastFM) file")
    p.add_argument("--users", help="user attribute file (user, gender, age)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a planted-leakage synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a VAE variant or SLIM")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute the metric suite for a trained model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model.fvrec or model.slim")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--name", help="row label in rendered tables")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render evaluation reports as a results table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config", help="print every config key with its default")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except FairVAEError as exc:
        print(f"fairvae {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
