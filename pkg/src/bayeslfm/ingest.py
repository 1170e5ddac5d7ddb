"""Parsing of MovieLens ``::``-separated rating files into dense-indexed datasets.

Dense ids are assigned in order of first appearance in the file, so the
mapping never depends on hash iteration order. Variance is the population
(divide-by-N) variance.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import EmptyDatasetError, ParseError


class Interaction(NamedTuple):
    user: int
    item: int
    rating: float
    timestamp: int


@dataclass(frozen=True)
class Stats:
    m: int
    n: int
    count: int
    r_mean: float
    r_var: float
    r_min: float
    r_max: float
    sparsity: float

    def as_dict(self):
        return {
            "m": self.m,
            "n": self.n,
            "count": self.count,
            "r_mean": self.r_mean,
            "r_var": self.r_var,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "sparsity": self.sparsity,
            "variance": "population",
        }


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Observed interactions over a fixed user/item index.

    The arrays are parallel and in file order. ``user_ids[u]`` is the raw id of
    dense user ``u`` (likewise for items). Subsets produced by :meth:`subset`
    share the index of their parent, so ``m``/``n`` cover users and items that
    may have no interactions in the subset.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    _positions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("users", "items", "ratings", "timestamps", "user_ids", "item_ids"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if self._positions is None:
            object.__setattr__(self, "_positions", np.arange(len(self.users), dtype=np.int64))
        self._positions.setflags(write=False)

    @property
    def m(self):
        return len(self.user_ids)

    @property
    def n(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.ratings)

    @property
    def positions(self):
        """Row positions of these interactions in the originally parsed file."""
        return self._positions

    @cached_property
    def user_index(self):
        return {int(raw): u for u, raw in enumerate(self.user_ids)}

    @cached_property
    def item_index(self):
        return {int(raw): i for i, raw in enumerate(self.item_ids)}

    @property
    def interactions(self):
        return [
            Interaction(int(u), int(i), float(r), int(t))
            for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps)
        ]

    def __iter__(self):
        return iter(self.interactions)

    @cached_property
    def r_mean(self):
        _require_nonempty(self)
        return math.fsum(self.ratings.tolist()) / len(self)

    @cached_property
    def r_var(self):
        _require_nonempty(self)
        dev = self.ratings - self.r_mean
        return math.fsum((dev * dev).tolist()) / len(self)

    @cached_property
    def r_min(self):
        _require_nonempty(self)
        return float(self.ratings.min())

    @cached_property
    def r_max(self):
        _require_nonempty(self)
        return float(self.ratings.max())

    @property
    def sparsity(self):
        return 1.0 - len(self) / (self.m * self.n)

    def subset(self, rows):
        """Return a view holding the interactions selected by ``rows``.

        ``rows`` is a boolean mask or an integer index array into this
        dataset's interaction arrays; the user/item index is shared.
        """
        rows = np.asarray(rows)
        return RatingsDataset(
            users=self.users[rows],
            items=self.items[rows],
            ratings=self.ratings[rows],
            timestamps=self.timestamps[rows],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            _positions=self._positions[rows],
        )

    def user_counts(self):
        return np.bincount(self.users, minlength=self.m)

    def item_counts(self):
        return np.bincount(self.items, minlength=self.n)


def _require_nonempty(ds):
    if len(ds) == 0:
        raise EmptyDatasetError()


def from_arrays(users, items, ratings, timestamps=None, m=None, n=None):
    """Build a dataset directly from dense index arrays.

    Raw ids are taken equal to dense ids. Mostly useful for synthetic data.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if timestamps is None:
        timestamps = np.arange(len(ratings), dtype=np.int64)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if m is None:
        m = int(users.max()) + 1 if len(users) else 0
    if n is None:
        n = int(items.max()) + 1 if len(items) else 0
    if len(users) and (users.min() < 0 or users.max() >= m):
        raise ValueError("user index out of range")
    if len(items) and (items.min() < 0 or items.max() >= n):
        raise ValueError("item index out of range")
    return RatingsDataset(
        users=users,
        items=items,
        ratings=ratings,
        timestamps=timestamps,
        user_ids=np.arange(m, dtype=np.int64),
        item_ids=np.arange(n, dtype=np.int64),
    )


def parse_movielens(stream, sep="::"):
    """Parse ``user::item::rating::timestamp`` lines.

    ``stream`` may be a text stream, an iterable of lines, or a string holding
    the whole file. Blank lines are skipped; LF and CRLF endings both work.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    user_index = {}
    item_index = {}
    users, items, ratings, timestamps = [], [], [], []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            raise ParseError(f"expected 4 '{sep}'-separated fields, got {len(parts)}", lineno)
        try:
            raw_user = int(parts[0])
            raw_item = int(parts[1])
            rating = float(parts[2])
            timestamp = int(parts[3])
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", lineno) from None
        if not math.isfinite(rating):
            raise ParseError(f"rating is not finite: {parts[2]!r}", lineno)
        users.append(user_index.setdefault(raw_user, len(user_index)))
        items.append(item_index.setdefault(raw_item, len(item_index)))
        ratings.append(rating)
        timestamps.append(timestamp)

    if not ratings:
        raise EmptyDatasetError()

    return RatingsDataset(
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        ratings=np.array(ratings, dtype=np.float64),
        timestamps=np.array(timestamps, dtype=np.int64),
        user_ids=np.fromiter(user_index, dtype=np.int64, count=len(user_index)),
        item_ids=np.fromiter(item_index, dtype=np.int64, count=len(item_index)),
    )


def load_movielens(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_movielens(fh)


def dataset_stats(ds):
    _require_nonempty(ds)
    return Stats(
        m=ds.m,
        n=ds.n,
        count=len(ds),
        r_mean=ds.r_mean,
        r_var=ds.r_var,
        r_min=ds.r_min,
        r_max=ds.r_max,
        sparsity=ds.sparsity,
    )


def format_stats(stats):
    """One-line dataset summary: counts, sparsity and rating moments."""
    return (
        f"interactions={stats.count:,} users={stats.m:,} items={stats.n:,} "
        f"sparsity={100 * stats.sparsity:.2f}% "
        f"mean={stats.r_mean:.6f} variance={stats.r_var:.6f} "
        f"range=[{stats.r_min:.6f}, {stats.r_max:.6f}]"
    )


CANONICAL_HEADER = ("user", "item", "rating", "timestamp")


def write_canonical(ds, fh):
    """Write interactions as CSV ``user,item,rating,timestamp`` using raw ids."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CANONICAL_HEADER)
    raw_u = ds.user_ids[ds.users]
    raw_i = ds.item_ids[ds.items]
    for u, i, r, t in zip(raw_u.tolist(), raw_i.tolist(), ds.ratings.tolist(), ds.timestamps.tolist()):
        writer.writerow((u, i, repr(r), t))


def read_canonical(fh, index_from=None):
    """Read a canonical CSV back into a dataset.

    Without ``index_from`` dense ids are reassigned by first appearance, which
    reproduces the index of the dataset that was written. With ``index_from``
    the raw ids are mapped through that dataset's index instead (used for
    split files, which must share the full dataset's index).
    """
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise EmptyDatasetError()
    if tuple(header) != CANONICAL_HEADER:
        raise ParseError(f"unexpected header {header!r}", 1)

    if index_from is None:
        lines = ("::".join(row) for row in reader)
        return parse_movielens(lines)

    u_index, i_index = index_from.user_index, index_from.item_index
    users, items, ratings, timestamps = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            users.append(u_index[int(row[0])])
            items.append(i_index[int(row[1])])
            ratings.append(float(row[2]))
            timestamps.append(int(row[3]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad row ({exc})", lineno) from None
        except KeyError as exc:
            raise ParseError(f"raw id {exc} not in index", lineno) from None
    return RatingsDataset(
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        ratings=np.array(ratings, dtype=np.float64),
        timestamps=np.array(timestamps, dtype=np.int64),
        user_ids=index_from.user_ids,
        item_ids=index_from.item_ids,
    )


def write_stats_json(stats, fh, extra=None):
    payload = stats.as_dict()
    if extra:
        payload.update(extra)
    json.dump(payload, fh, indent=2, sort_keys=True)
    fh.write("\n")
