"""Ingestion, preprocessing, user-disjoint splits and minibatching."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from fairvae import numerics as nx
from fairvae.errors import DataError, ParseError, StratificationError

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
MALE, FEMALE = 0, 1
YOUNG, SENIOR = 0, 1

_GENDERS = {"m": MALE, "male": MALE, "man": MALE, "f": FEMALE, "female": FEMALE, "woman": FEMALE}


def _id_key(ids: Sequence[str]):
    if all(i.lstrip("-").isdigit() for i in ids):
        return lambda s: (int(s), s)
    return lambda s: s


def sorted_ids(ids) -> list[str]:
    ids = list(ids)
    return sorted(ids, key=_id_key(ids))


@dataclass
class InteractionMatrix:
    """Binary user x item matrix with external-id vocabularies (sorted by id)."""

    users: list[str]
    items: list[str]
    matrix: sp.csr_matrix

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        if self.matrix.shape != (len(self.users), len(self.items)):
            raise DataError("matrix shape does not match vocabularies")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    @property
    def item_index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.items)}

    def row_items(self, u: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[u]:m.indptr[u + 1]]

    def dense_rows(self, rows) -> np.ndarray:
        return self.matrix[np.asarray(rows)].toarray()

    def vocab_checksum(self) -> str:
        return vocab_checksum(self.items)


def vocab_checksum(items: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(items).encode("utf-8")).hexdigest()


@dataclass
class SensitiveLabels:
    """Binary attributes per user row: gender (1 = female) and age group (1 = senior)."""

    gender: np.ndarray
    age: np.ndarray

    def __post_init__(self):
        self.gender = np.asarray(self.gender, dtype=np.int64)
        self.age = np.asarray(self.age, dtype=np.int64)

    def as_matrix(self) -> np.ndarray:
        return np.stack([self.gender, self.age], axis=1).astype(np.float64)

    def attribute(self, name: str) -> np.ndarray:
        if name not in ("gender", "age"):
            raise DataError(f"unknown attribute {name!r}")
        return getattr(self, name)

    def subset(self, rows) -> SensitiveLabels:
        rows = np.asarray(rows)
        return SensitiveLabels(self.gender[rows], self.age[rows])

    def cells(self) -> np.ndarray:
        return self.gender * 2 + self.age


@dataclass
class IngestionReport:
    dataset: str
    n_users: int = 0
    n_items: int = 0
    n_records: int = 0
    n_female: int = 0
    n_male: int = 0
    n_senior: int = 0
    n_young: int = 0
    raw_records: int = 0
    unparseable_user_records: int = 0
    users_missing_attributes: int = 0
    users_without_positives: int = 0
    items_filtered: int = 0
    age_threshold: int = 35
    age_rule: str = "senior iff age >= threshold"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(d.pop("extra"))
        return d


@dataclass
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    foldin_fraction: float = 0.8
    seed: int = 0

    def users(self, name: str) -> np.ndarray:
        if name not in SPLIT_NAMES:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def assignment(self, n_users: int) -> list[str]:
        out = [""] * n_users
        for name in SPLIT_NAMES:
            for u in self.users(name):
                out[int(u)] = name
        return out


@dataclass
class Dataset:
    """A prepared dataset: interactions, labels and the user split."""

    interactions: InteractionMatrix
    labels: SensitiveLabels
    split: SplitSpec


def _detect_separator(line: str) -> str:
    if "::" in line:
        return "::"
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    raise DataError(f"cannot detect a separator in {line!r}")


def read_records(path, min_fields: int) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(line_no, fields)`` with an auto-detected separator.

    A first line whose third field is not numeric is treated as a header.
    """
    path = Path(path)
    sep = None
    with path.open(encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if sep is None:
                sep = _detect_separator(line)
            fields = [f.strip() for f in line.split(sep)]
            if len(fields) < min_fields:
                raise ParseError(path, line_no, f"expected at least {min_fields} fields, got {len(fields)}")
            yield line_no, fields


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_user_attributes(path, age_threshold: int = 35):
    """Map user id -> (gender, age group); unparseable users are counted and dropped."""
    attrs: dict[str, tuple[int, int]] = {}
    dropped = 0
    for line_no, fields in read_records(path, 3):
        if line_no == 1 and not _is_number(fields[2]):
            continue
        user, gender, age = fields[0], fields[1].lower(), fields[2]
        g = _GENDERS.get(gender)
        try:
            a = int(float(age))
        except ValueError:
            a = None
        if g is None or a is None or a <= 0:
            dropped += 1
            continue
        attrs[user] = (g, SENIOR if a >= age_threshold else YOUNG)
    return attrs, dropped


def _build(dataset: str, pairs: dict[str, set[str]], attrs, dropped_attr: int,
           raw_records: int, item_keep: set[str] | None, age_threshold: int,
           extra: dict | None = None):
    report = IngestionReport(dataset=dataset, raw_records=raw_records,
                             unparseable_user_records=dropped_attr, age_threshold=age_threshold,
                             extra=extra or {})
    kept: dict[str, set[str]] = {}
    all_items = set()
    for user, items in pairs.items():
        if user not in attrs:
            report.users_missing_attributes += 1
            continue
        all_items |= items
        if item_keep is not None:
            items = items & item_keep
        if not items:
            report.users_without_positives += 1
            continue
        kept[user] = items
    if not kept:
        raise DataError(f"{dataset}: no users remain after preprocessing")
    users = sorted_ids(kept)
    items = sorted_ids(set().union(*kept.values()))
    report.items_filtered = len(all_items) - len(items)
    item_idx = {v: i for i, v in enumerate(items)}
    rows, cols = [], []
    for r, u in enumerate(users):
        for v in kept[u]:
            rows.append(r)
            cols.append(item_idx[v])
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(users), len(items)))
    im = InteractionMatrix(users, items, mat)
    labels = SensitiveLabels([attrs[u][0] for u in users], [attrs[u][1] for u in users])
    report.n_users, report.n_items, report.n_records = im.n_users, im.n_items, int(mat.nnz)
    report.n_female = int(labels.gender.sum())
    report.n_male = im.n_users - report.n_female
    report.n_senior = int(labels.age.sum())
    report.n_young = im.n_users - report.n_senior
    return im, labels, report


def ingest_movielens(ratings_path, users_path, rating_threshold: float = 4.0,
                     age_threshold: int = 35, min_item_positives: int = 5):
    """MovieLens ratings to implicit positives (rating >= threshold) with binary attributes.

    Returns ``(InteractionMatrix, SensitiveLabels, IngestionReport)``.
    """
    attrs, dropped = read_user_attributes(users_path, age_threshold)
    pairs: dict[str, set[str]] = defaultdict(set)
    raw = 0
    for line_no, fields in read_records(ratings_path, 3):
        if line_no == 1 and not _is_number(fields[2]):
            continue
        try:
            rating = float(fields[2])
        except ValueError:
            raise ParseError(ratings_path, line_no, f"rating {fields[2]!r} is not a number") from None
        raw += 1
        if rating >= rating_threshold:
            pairs[fields[0]].add(fields[1])
    counts = Counter(v for items in pairs.values() for v in items)
    keep = {v for v, c in counts.items() if c >= min_item_positives}
    return _build("movielens", pairs, attrs, dropped, raw, keep, age_threshold,
                  {"rating_threshold": rating_threshold, "min_item_positives": min_item_positives})


def ingest_lastfm(events_path, users_path, min_item_events: int = 110,
                  age_threshold: int = 35, value: str = "count", since: int | None = None):
    """Listening records to binary user-artist interactions.

    ``value="count"`` reads the third column as a play count; ``value="timestamp"``
    treats each row as one event and, with ``since``, keeps only events at or after it.
    Artists with fewer than ``min_item_events`` events are removed.
    """
    if value not in ("count", "timestamp"):
        raise DataError(f"value must be 'count' or 'timestamp', got {value!r}")
    attrs, dropped = read_user_attributes(users_path, age_threshold)
    pairs: dict[str, set[str]] = defaultdict(set)
    events: Counter = Counter()
    raw = 0
    for line_no, fields in read_records(events_path, 3):
        if line_no == 1 and not _is_number(fields[2]):
            continue
        try:
            v = float(fields[2])
        except ValueError:
            raise ParseError(events_path, line_no, f"value {fields[2]!r} is not a number") from None
        raw += 1
        if value == "timestamp":
            if since is not None and v < since:
                continue
            n = 1
        else:
            n = v
        if n <= 0:
            continue
        user, artist = fields[0], fields[1]
        events[artist] += n
        pairs[user].add(artist)
    keep = {v for v, c in events.items() if c >= min_item_events}
    return _build("lastfm", pairs, attrs, dropped, raw, keep, age_threshold,
                  {"min_item_events": min_item_events})


def _apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder integer allocation of ``total`` proportional to ``weights``."""
    exact = weights * total / weights.sum()
    base = np.floor(exact).astype(int)
    rest = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base


def split_users(matrix: InteractionMatrix, labels: SensitiveLabels,
                fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
                foldin_fraction: float = 0.8) -> SplitSpec:
    """Stratified user-disjoint train/val/test split over the four gender x age cells.

    Split totals follow the fractions exactly (largest remainder) and every cell's
    count per split is the floor or ceiling of its proportional share.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = matrix.n_users
    cells = labels.cells()
    cell_ids = np.arange(4)
    sizes = np.array([(cells == c).sum() for c in cell_ids])
    for c, size in zip(cell_ids, sizes):
        if 0 < size < 3:
            raise StratificationError(f"group cell {c} (gender*2+age) has only {size} users")
    present = sizes > 0
    totals = _apportion(fr, n)
    exact = sizes[:, None] * fr[None, :]
    counts = np.floor(exact).astype(int)
    row_need = sizes - counts.sum(axis=1)
    col_need = totals - counts.sum(axis=0)
    frac = exact - counts
    # Distribute the leftover units: at most one extra per (cell, split).
    for c in np.argsort(-row_need, kind="stable"):
        for _ in range(int(row_need[c])):
            candidates = [s for s in range(3) if col_need[s] > 0 and counts[c, s] == np.floor(exact[c, s])]
            if not candidates:
                raise StratificationError("cannot balance stratified split")
            s = max(candidates, key=lambda j: (col_need[j], frac[c, j], -j))
            counts[c, s] += 1
            col_need[s] -= 1
    rng = nx.make_rng([seed, 2])
    parts: dict[str, list[np.ndarray]] = {s: [] for s in SPLIT_NAMES}
    for c in cell_ids[present]:
        members = np.flatnonzero(cells == c)
        members = members[rng.permutation(len(members))]
        start = 0
        for s, name in enumerate(SPLIT_NAMES):
            parts[name].append(members[start:start + counts[c, s]])
            start += counts[c, s]
    out = {name: np.sort(np.concatenate(parts[name])) for name in SPLIT_NAMES}
    return SplitSpec(out["train"], out["val"], out["test"], foldin_fraction, seed)


def foldin_partition(items: np.ndarray, fraction: float, seed) -> tuple[np.ndarray, np.ndarray] | None:
    """Random fold-in/holdout partition of one user's items; ``None`` if fewer than two."""
    items = np.asarray(items)
    n = len(items)
    if n < 2:
        return None
    n_fold = min(max(math.ceil(fraction * n - 1e-9), 1), n - 1)
    perm = nx.make_rng(seed).permutation(n)
    return np.sort(items[perm[:n_fold]]), np.sort(items[perm[n_fold:]])


@dataclass
class EvalPartition:
    """Fold-in rows and holdout sets for a group of evaluation users."""

    users: np.ndarray
    foldin: sp.csr_matrix
    holdout: list[np.ndarray]
    excluded: np.ndarray


def make_eval_partition(matrix: InteractionMatrix, users: np.ndarray, fraction: float,
                        seed: int) -> EvalPartition:
    kept, excluded, rows, cols, holdouts = [], [], [], [], []
    for u in np.asarray(users):
        part = foldin_partition(matrix.row_items(int(u)), fraction, [seed, 3, int(u)])
        if part is None:
            excluded.append(int(u))
            continue
        fold, hold = part
        rows.extend([len(kept)] * len(fold))
        cols.extend(fold.tolist())
        holdouts.append(hold)
        kept.append(int(u))
    if excluded:
        logger.info("%d users with fewer than 2 positives excluded from ranking evaluation", len(excluded))
    foldin = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(kept), matrix.n_items))
    return EvalPartition(np.array(kept, dtype=np.int64), foldin, holdouts,
                         np.array(excluded, dtype=np.int64))


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    users: np.ndarray


def make_batches(matrix: InteractionMatrix, users: np.ndarray, batch_size: int,
                 dropout_rate: float, rng: np.random.Generator,
                 labels: SensitiveLabels | None = None, training: bool = True) -> Iterator[Batch]:
    """Shuffled minibatches with inverted input dropout on positives.

    Users are split into ``ceil(n / batch_size)`` near-equal batches so no batch is
    much smaller than the rest. With ``training=False`` order is kept and dropout off.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise DataError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    users = np.asarray(users)
    order = users[rng.permutation(len(users))] if training else users
    n_batches = max(1, math.ceil(len(order) / batch_size))
    full_labels = labels.as_matrix() if labels is not None else None
    for chunk in np.array_split(order, n_batches):
        if len(chunk) == 0:
            continue
        targets = matrix.dense_rows(chunk)
        if training and dropout_rate > 0.0:
            keep = rng.random(targets.shape) >= dropout_rate
            inputs = targets * keep / (1.0 - dropout_rate)
        else:
            inputs = targets.copy()
        lab = full_labels[chunk] if full_labels is not None else np.zeros((len(chunk), 2))
        yield Batch(inputs, targets, lab, chunk)


# Canonical on-disk format -------------------------------------------------------------

def _write_tsv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


def _read_tsv(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def save_dataset(directory, data: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    im, lab = data.interactions, data.labels
    _write_tsv(d / "items.tsv", ["index", "item"], enumerate(im.items))
    _write_tsv(d / "users.tsv", ["index", "user", "gender", "age_group"],
               ((i, u, "female" if lab.gender[i] else "male", "senior" if lab.age[i] else "young")
                for i, u in enumerate(im.users)))
    coo = im.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    _write_tsv(d / "interactions.tsv", ["user", "item"],
               ((im.users[coo.row[k]], im.items[coo.col[k]]) for k in order))
    assignment = data.split.assignment(im.n_users)
    _write_tsv(d / "split.tsv", ["user", "split"], ((u, assignment[i]) for i, u in enumerate(im.users)))


def load_dataset(directory, foldin_fraction: float = 0.8, seed: int = 0) -> Dataset:
    d = Path(directory)
    items = [r[1] for r in _read_tsv(d / "items.tsv")]
    user_rows = _read_tsv(d / "users.tsv")
    users = [r[1] for r in user_rows]
    gender = [FEMALE if r[2] == "female" else MALE for r in user_rows]
    age = [SENIOR if r[3] == "senior" else YOUNG for r in user_rows]
    uidx = {u: i for i, u in enumerate(users)}
    iidx = {v: i for i, v in enumerate(items)}
    rows, cols = [], []
    for r in _read_tsv(d / "interactions.tsv"):
        try:
            rows.append(uidx[r[0]])
            cols.append(iidx[r[1]])
        except KeyError as exc:
            raise DataError(f"interactions.tsv references unknown id {exc}") from None
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(users), len(items)))
    split_of = {r[0]: r[1] for r in _read_tsv(d / "split.tsv")}
    groups = {name: [] for name in SPLIT_NAMES}
    for i, u in enumerate(users):
        s = split_of.get(u)
        if s not in groups:
            raise DataError(f"user {u} has no valid split assignment")
        groups[s].append(i)
    split = SplitSpec(*(np.array(groups[s], dtype=np.int64) for s in SPLIT_NAMES),
                      foldin_fraction=foldin_fraction, seed=seed)
    return Dataset(InteractionMatrix(users, items, mat), SensitiveLabels(gender, age), split)
