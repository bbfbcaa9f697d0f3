"""SLIM: non-negative elastic-net item-item regression with a zero diagonal.

Each column j solves

    min_w  0.5 * ||x_j - X w||^2 + l1 * sum(w) + 0.5 * l2 * ||w||^2,  w >= 0, w_j = 0

by cyclic coordinate descent on the Gram matrix G = X^T X. Because X and w are
non-negative, an item with zero co-occurrence with j has a non-negative gradient
at zero and stays at zero, so only co-occurring items are visited.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

from fairvae.errors import CheckpointError, VocabularyMismatch

FORMAT = "fvrec-slim"
VERSION = 1


@numba.njit(cache=True)
def _cd_column(G, j, active, l1, l2, max_iters, tol, track):
    w = np.zeros(G.shape[0])
    gw = np.zeros(G.shape[0])  # G @ w restricted to active updates
    history = np.empty(max_iters + 1)
    n_hist = 0
    if track:
        history[0] = 0.0
        n_hist = 1
    for _ in range(max_iters):
        max_change = 0.0
        for a in range(active.shape[0]):
            k = active[a]
            old = w[k]
            denom = G[k, k] + l2
            if denom <= 0.0:
                continue
            # gw[k] includes G[k,k]*old; remove it to get the partial residual term.
            rho = G[k, j] - (gw[k] - G[k, k] * old) - l1
            new = rho / denom if rho > 0.0 else 0.0
            delta = new - old
            if delta != 0.0:
                w[k] = new
                for b in range(active.shape[0]):
                    m = active[b]
                    gw[m] += G[m, k] * delta
                if abs(delta) > max_change:
                    max_change = abs(delta)
        if track:
            obj = 0.0
            for a in range(active.shape[0]):
                k = active[a]
                obj += 0.5 * w[k] * gw[k] - G[k, j] * w[k] + l1 * w[k] + 0.5 * l2 * w[k] * w[k]
            history[n_hist] = obj
            n_hist += 1
        if max_change < tol:
            break
    return w, history[:n_hist]


def column_objective(G: np.ndarray, j: int, w: np.ndarray, l1: float, l2: float) -> float:
    """Column objective up to the constant 0.5 * G[j, j]."""
    return float(0.5 * w @ G @ w - G[:, j] @ w + l1 * w.sum() + 0.5 * l2 * w @ w)


@dataclass
class SlimModel:
    W: sp.csc_matrix
    l1: float
    l2: float
    vocab: str = ""

    def score(self, rows) -> np.ndarray:
        """Item scores ``rows @ W`` for dense or sparse interaction rows."""
        out = sp.csr_matrix(rows) @ self.W
        return np.asarray(out.todense())

    def item_scores(self, rows, mode: str = "deterministic", rng=None) -> np.ndarray:
        return self.score(rows)


def fit_slim(X, l1: float = 1.0, l2: float = 1.0, max_iters: int = 100, tol: float = 1e-5,
             track_objective: bool = False, vocab: str = ""):
    """Fit SLIM. With ``track_objective`` also return per-column objective histories."""
    if l1 < 0 or l2 < 0:
        raise ValueError("penalties must be non-negative")
    X = sp.csr_matrix(X, dtype=np.float64)
    G = np.asarray((X.T @ X).todense())
    n = G.shape[0]
    rows, cols, vals = [], [], []
    histories = []
    for j in range(n):
        active = np.flatnonzero(G[:, j] > 0)
        active = active[active != j].astype(np.int64)
        if len(active) == 0:
            if track_objective:
                histories.append(np.zeros(1))
            continue
        w, hist = _cd_column(G, j, active, float(l1), float(l2), int(max_iters), float(tol),
                             track_objective)
        nz = np.flatnonzero(w > 0)
        rows.extend(nz.tolist())
        cols.extend([j] * len(nz))
        vals.extend(w[nz].tolist())
        if track_objective:
            histories.append(hist)
    W = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    model = SlimModel(W, float(l1), float(l2), vocab)
    return (model, histories) if track_objective else model


def save_slim(path, model: SlimModel) -> None:
    coo = model.W.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {FORMAT} v{VERSION} vocab={model.vocab} n_items={model.W.shape[0]} "
                 f"l1={model.l1!r} l2={model.l2!r}\n")
        for k in order:
            fh.write(f"{coo.row[k]}\t{coo.col[k]}\t{float(coo.data[k])!r}\n")


def load_slim(path, expected_vocab: str | None = None) -> SlimModel:
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) < 3 or header[1] != FORMAT:
            raise CheckpointError(f"{path} is not a SLIM model file")
        meta = dict(kv.split("=", 1) for kv in header[3:])
        rows, cols, vals = [], [], []
        for line in fh:
            r, c, v = line.split("\t")
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    if expected_vocab is not None and meta.get("vocab") != expected_vocab:
        raise VocabularyMismatch("SLIM model item vocabulary does not match the dataset")
    n = int(meta["n_items"])
    W = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return SlimModel(W, float(meta["l1"]), float(meta["l2"]), meta.get("vocab", ""))
