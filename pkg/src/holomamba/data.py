"""Interaction ingestion, ID remapping and leave-one-out sequence splits.

Row layout of a :class:`DatasetSplit` for a user with chronological
history ``[i_1, ..., i_N]`` (``N >= 2``) and window ``L``:

* ``test_target``  = ``i_N`` (held out)
* ``inputs``       = last ``L`` items of ``i_1 .. i_{N-1}``, left-padded;
  the evaluation input, scored at its final position
* ``train_inputs`` = last ``L`` items of ``i_1 .. i_{N-2}``, left-padded
* ``train_targets``= last ``L`` items of ``i_2 .. i_{N-1}``, aligned with
  ``train_inputs`` (teacher forcing), so ``train_targets[t]`` is the item
  after ``train_inputs[t]``; the final training position targets
  ``i_{N-1}``. Wherever ``train_inputs`` is padding the target is 0.

Example, history ``[5, 3, 7, 2, 9]`` and ``L = 6``::

    inputs        [0 0 5 3 7 2]   test_target 9
    train_inputs  [0 0 0 5 3 7]
    train_targets [0 0 0 3 7 2]
"""
from __future__ import annotations

import ast
import gzip
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple

import numpy as np

from . import container
from .errors import DataError
from .tensor import Rng

log = logging.getLogger(__name__)

UNKNOWN_ATTR = "UNKNOWN"
AMAZON_ATTR_BUCKETS = 50
MALFORMED_LIMIT = 0.01


class RawInteraction(NamedTuple):
    user: str
    item: str
    timestamp: int
    attr_source: str | None = None


@dataclass
class IngestReport:
    lines: int = 0
    malformed: int = 0

    def check(self, source) -> None:
        if self.lines and self.malformed / self.lines > MALFORMED_LIMIT:
            raise DataError(f"{source}: {self.malformed} of {self.lines} lines malformed (limit {MALFORMED_LIMIT:.0%})")


@dataclass
class IdMaps:
    user_map: dict[str, int] = field(default_factory=dict)
    item_map: dict[str, int] = field(default_factory=dict)
    attr_map: dict[str, int] = field(default_factory=dict)


@dataclass
class DatasetSplit:
    inputs: np.ndarray
    attrs: np.ndarray
    train_inputs: np.ndarray
    train_attrs: np.ndarray
    train_targets: np.ndarray
    test_target: np.ndarray
    num_items: int
    num_attrs: int
    L: int
    dropped_users: int = 0

    @property
    def num_users(self) -> int:
        return int(self.test_target.shape[0])

    @property
    def vocab_items(self) -> int:
        return self.num_items + 1

    @property
    def vocab_attrs(self) -> int:
        return self.num_attrs + 1

    def subset(self, rows) -> "DatasetSplit":
        rows = np.asarray(rows)
        return DatasetSplit(self.inputs[rows], self.attrs[rows], self.train_inputs[rows],
                            self.train_attrs[rows], self.train_targets[rows], self.test_target[rows],
                            self.num_items, self.num_attrs, self.L)

    def sidecar(self) -> dict:
        return {"num_users": self.num_users, "num_items": self.num_items, "num_attrs": self.num_attrs, "L": self.L}

    _ARRAYS = ("inputs", "attrs", "train_inputs", "train_attrs", "train_targets", "test_target")

    def save(self, path) -> None:
        path = Path(path)
        if self.num_items >= 2 ** 24 or self.num_attrs >= 2 ** 24:
            raise DataError("ids beyond 2^24 cannot be stored exactly in the float32 container")
        container.write_arrays(path, {name: getattr(self, name) for name in self._ARRAYS})
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        arrays = container.read_arrays(path)
        ints = {name: arrays[name].astype(np.int64) for name in cls._ARRAYS}
        split = cls(**ints, num_items=meta["num_items"], num_attrs=meta["num_attrs"], L=meta["L"])
        if split.num_users != meta["num_users"]:
            raise DataError(f"{path}: sidecar says {meta['num_users']} users, arrays hold {split.num_users}")
        return split


# ---------------------------------------------------------------------------
# raw ingestion
# ---------------------------------------------------------------------------

def _read_movies(movies_path) -> tuple[dict[str, str], IngestReport]:
    genres: dict[str, str] = {}
    report = IngestReport()
    with open(movies_path, encoding="iso-8859-1") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            report.lines += 1
            parts = line.split("::")
            if len(parts) != 3 or not parts[0]:
                report.malformed += 1
                continue
            first = parts[2].split("|")[0].strip()
            genres[parts[0]] = first or UNKNOWN_ATTR
    report.check(movies_path)
    return genres, report


def iter_movielens_ratings(ratings_path, report: IngestReport) -> Iterator[RawInteraction]:
    with open(ratings_path, encoding="iso-8859-1") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            report.lines += 1
            parts = line.split("::")
            try:
                if len(parts) != 4 or not parts[0] or not parts[1]:
                    raise ValueError
                ts = int(parts[3])
                if ts < 0:
                    raise ValueError
            except ValueError:
                report.malformed += 1
                continue
            yield RawInteraction(parts[0], parts[1], ts)


def ingest_movielens(ratings_path, movies_path) -> tuple[list[RawInteraction], dict[str, str], IngestReport]:
    """Parse MovieLens-1M ``ratings.dat`` and ``movies.dat``.

    Every rating counts as an implicit interaction. Returns the interactions
    (each tagged with its movie's first genre), the item -> first-genre map
    and the ratings ingest report. Movies with no genre, or missing from
    ``movies.dat``, fall into the ``UNKNOWN`` bucket.
    """
    for p in (ratings_path, movies_path):
        if not Path(p).is_file():
            raise FileNotFoundError(f"missing MovieLens file: {p}")
    genres, _ = _read_movies(movies_path)
    report = IngestReport()
    interactions = [r._replace(attr_source=genres.get(r.item, UNKNOWN_ATTR))
                    for r in iter_movielens_ratings(ratings_path, report)]
    report.check(ratings_path)
    log.info("movielens: %d interactions, %d malformed lines skipped", len(interactions), report.malformed)
    return interactions, genres, report


def _parse_review(line: str) -> dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # some Amazon dumps are Python dict literals rather than strict JSON
        return ast.literal_eval(line)


def ingest_amazon(path) -> tuple[list[RawInteraction], IngestReport]:
    """Stream a gzip JSON-lines review dump (reviewerID, asin, unixReviewTime)."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing Amazon review file: {path}")
    report = IngestReport()
    out: list[RawInteraction] = []
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            report.lines += 1
            try:
                rec = _parse_review(line)
                user, item, ts = rec["reviewerID"], rec["asin"], int(rec["unixReviewTime"])
                if ts < 0:
                    raise ValueError
            except (ValueError, SyntaxError, KeyError, TypeError):
                report.malformed += 1
                continue
            out.append(RawInteraction(str(user), str(item), ts))
    report.check(path)
    log.info("amazon: %d interactions, %d malformed lines skipped", len(out), report.malformed)
    return out, report


# ---------------------------------------------------------------------------
# filtering, remapping, sequences
# ---------------------------------------------------------------------------

def five_core_filter(interactions: list[RawInteraction], min_count: int = 5) -> list[RawInteraction]:
    """Keep interactions of users with at least ``min_count`` of them (one pass, users only)."""
    counts = Counter(r.user for r in interactions)
    kept = [r for r in interactions if counts[r.user] >= min_count]
    if not kept:
        raise DataError(f"no user has {min_count} or more interactions")
    return kept


def assign_attr_amazon(item_index: int) -> int:
    return item_index % AMAZON_ATTR_BUCKETS + 1


def _chronological(interactions: Iterable[RawInteraction]) -> list[tuple[int, RawInteraction]]:
    indexed = list(enumerate(interactions))
    indexed.sort(key=lambda pair: (pair[1].user, pair[1].timestamp, pair[0]))
    return indexed


def remap_ids(interactions: list[RawInteraction], with_attrs: bool = False) -> IdMaps:
    """Contiguous ids from 1 in first-appearance order of a pass sorted by
    (user, timestamp, file order). With ``with_attrs`` the attribute sources
    are mapped too and ``UNKNOWN`` is always given the last id."""
    maps = IdMaps()
    for _, r in _chronological(interactions):
        maps.user_map.setdefault(r.user, len(maps.user_map) + 1)
        maps.item_map.setdefault(r.item, len(maps.item_map) + 1)
        if with_attrs and r.attr_source is not None and r.attr_source != UNKNOWN_ATTR:
            maps.attr_map.setdefault(r.attr_source, len(maps.attr_map) + 1)
    if with_attrs:
        maps.attr_map[UNKNOWN_ATTR] = len(maps.attr_map) + 1
    return maps


def movielens_attr_assignment(interactions: list[RawInteraction], maps: IdMaps) -> Callable[[int], int]:
    table = {}
    for r in interactions:
        table[maps.item_map[r.item]] = maps.attr_map[r.attr_source or UNKNOWN_ATTR]
    return table.__getitem__


def _left_pad(seq: list[int], L: int) -> list[int]:
    seq = seq[-L:]
    return [0] * (L - len(seq)) + seq


def pack_histories(histories: list[list[int]], attr_of: Callable[[int], int], L: int,
                   num_items: int, num_attrs: int) -> DatasetSplit:
    """Leave-one-out rows from chronological item histories (see module doc)."""
    if L < 1:
        raise DataError(f"L must be >= 1, got {L}")
    kept = [h for h in histories if len(h) >= 2]
    dropped = len(histories) - len(kept)
    if dropped:
        log.warning("excluded %d users with fewer than 2 interactions", dropped)
    if not kept:
        raise DataError("no user has at least 2 interactions")
    U = len(kept)
    inputs = np.zeros((U, L), dtype=np.int64)
    train_inputs = np.zeros((U, L), dtype=np.int64)
    train_targets = np.zeros((U, L), dtype=np.int64)
    test_target = np.zeros(U, dtype=np.int64)
    for row, hist in enumerate(kept):
        prefix = hist[:-1]
        test_target[row] = hist[-1]
        inputs[row] = _left_pad(prefix, L)
        train_inputs[row] = _left_pad(prefix[:-1], L) if len(prefix) > 1 else 0
        train_targets[row] = _left_pad(prefix[1:], L) if len(prefix) > 1 else 0
    lookup = np.zeros(num_items + 1, dtype=np.int64)
    lookup[1:] = [attr_of(i) for i in range(1, num_items + 1)]
    return DatasetSplit(inputs, lookup[inputs], train_inputs, lookup[train_inputs], train_targets,
                        test_target, num_items, num_attrs, L, dropped_users=dropped)


def build_sequences(interactions: list[RawInteraction], id_maps: IdMaps,
                    attr_assignment: Callable[[int], int], L: int, num_attrs: int) -> DatasetSplit:
    """Per-user chronological (stable) leave-one-out split, truncated to ``L``."""
    per_user: dict[int, list[int]] = {}
    for _, r in _chronological(interactions):
        per_user.setdefault(id_maps.user_map[r.user], []).append(id_maps.item_map[r.item])
    histories = [per_user[u] for u in sorted(per_user)]
    return pack_histories(histories, attr_assignment, L, len(id_maps.item_map), num_attrs)


def prepare_movielens(ratings_path, movies_path, L: int = 50) -> tuple[DatasetSplit, dict]:
    raw, _, report = ingest_movielens(ratings_path, movies_path)
    kept = five_core_filter(raw)
    maps = remap_ids(kept, with_attrs=True)
    split = build_sequences(kept, maps, movielens_attr_assignment(kept, maps), L, len(maps.attr_map))
    return split, _counts(raw, kept, report, split)


def prepare_amazon(path, L: int = 50) -> tuple[DatasetSplit, dict]:
    raw, report = ingest_amazon(path)
    kept = five_core_filter(raw)
    maps = remap_ids(kept)
    split = build_sequences(kept, maps, assign_attr_amazon, L, AMAZON_ATTR_BUCKETS)
    return split, _counts(raw, kept, report, split)


def _counts(raw, kept, report: IngestReport, split: DatasetSplit) -> dict:
    return {
        "lines": report.lines,
        "malformed": report.malformed,
        "interactions_retained": len(kept),
        "interactions_dropped": len(raw) - len(kept),
        **split.sidecar(),
    }


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthetic_generate(num_users: int, cycle_len: int, L: int, seed: int,
                       num_items: int | None = None, history_len: int | None = None) -> DatasetSplit:
    """Users who each repeat their own item cycle forever.

    By default every user gets ``cycle_len`` items nobody else uses, so the
    successor of any item is unique. Passing ``num_items`` smaller than
    ``num_users * cycle_len`` instead draws each cycle from a shared catalog.
    Each history starts at a random phase of its cycle and has
    ``history_len`` items (default ``L + 1``). Attributes follow the
    Amazon hash rule.
    """
    if cycle_len < 2:
        raise DataError(f"cycle_len must be >= 2, got {cycle_len}")
    rng = Rng(seed)
    disjoint = num_items is None
    if disjoint:
        num_items = num_users * cycle_len
        pool = rng.permutation(num_items) + 1
    elif num_items < cycle_len:
        raise DataError(f"num_items={num_items} cannot hold a cycle of {cycle_len}")
    length = history_len or L + 1
    histories = []
    for u in range(num_users):
        if disjoint:
            cycle = pool[u * cycle_len:(u + 1) * cycle_len]
        else:
            cycle = rng.choice(num_items, cycle_len) + 1
        phase = int(rng.integers(0, cycle_len))
        histories.append([int(cycle[(phase + t) % cycle_len]) for t in range(length)])
    return pack_histories(histories, assign_attr_amazon, L, num_items, AMAZON_ATTR_BUCKETS)
