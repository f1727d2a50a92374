"""Rating tables, triplet I/O, binarization and unbiased-set splitting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._rng import substream


class DataFormatError(ValueError):
    """Raised for malformed or inconsistent rating files."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatingTable:
    """Immutable set of (user, item, value) records over a fixed universe.

    ``values`` holds raw ratings before :func:`binarize` and 0/1 labels after.
    ``observed`` is the o_ui flag of each record.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    observed: np.ndarray = field(default=None)

    def __post_init__(self):
        users = _frozen(self.users, np.int64)
        items = _frozen(self.items, np.int64)
        values = _frozen(self.values, np.float64)
        observed = np.ones(len(users), dtype=bool) if self.observed is None else self.observed
        observed = _frozen(observed, bool)
        if not (len(users) == len(items) == len(values) == len(observed)):
            raise DataFormatError("record arrays differ in length")
        if self.num_users < 1 or self.num_items < 1:
            raise DataFormatError("universe dimensions must be positive")
        if len(users):
            if users.min() < 0 or users.max() >= self.num_users:
                raise DataFormatError(f"user index out of range [0, {self.num_users})")
            if items.min() < 0 or items.max() >= self.num_items:
                raise DataFormatError(f"item index out of range [0, {self.num_items})")
            keys = users * self.num_items + items
            if len(np.unique(keys)) != len(keys):
                dup = _first_duplicate(keys)
                raise DataFormatError(
                    f"duplicate pair ({dup // self.num_items}, {dup % self.num_items})"
                )
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    def __len__(self):
        return len(self.users)

    def __eq__(self, other):
        if not isinstance(other, RatingTable):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.observed, other.observed)
        )

    __hash__ = None

    @property
    def num_pairs(self):
        return self.num_users * self.num_items

    def keys(self):
        """Flat pair index ``user * num_items + item`` per record."""
        return self.users * self.num_items + self.items

    def subset(self, index) -> "RatingTable":
        index = np.asarray(index)
        return RatingTable(
            self.num_users,
            self.num_items,
            self.users[index],
            self.items[index],
            self.values[index],
            self.observed[index],
        )

    def with_values(self, values) -> "RatingTable":
        return RatingTable(
            self.num_users, self.num_items, self.users, self.items, values, self.observed
        )

    def dense(self, fill=np.nan):
        """Values as a num_users x num_items matrix; missing pairs get ``fill``."""
        out = np.full((self.num_users, self.num_items), fill, dtype=np.float64)
        out[self.users, self.items] = self.values
        return out


def _first_duplicate(keys):
    seen = set()
    for k in keys.tolist():
        if k in seen:
            return k
        seen.add(k)
    return -1


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class IdMapping:
    """Raw identifiers in dense-index order."""

    user_ids: tuple
    item_ids: tuple


def _parse_lines(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such triplet file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) not in (3, 4):
                raise DataFormatError(f"{path}:{lineno}: expected 'user item rating', got {stripped!r}")
            yield lineno, parts


def load_triplets(path, num_users: Optional[int] = None, num_items: Optional[int] = None) -> RatingTable:
    """Read a ``user item rating [observed]`` file with dense 0-based indices.

    Dimensions default to ``max index + 1``. A fourth column, when present,
    is the 0/1 observed flag.
    """
    users, items, values, observed = [], [], [], []
    seen = {}
    for lineno, parts in _parse_lines(path):
        try:
            u, i = int(parts[0]), int(parts[1])
            v = float(parts[2])
            o = int(parts[3]) if len(parts) == 4 else 1
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: malformed line {' '.join(parts)!r}") from None
        if u < 0 or i < 0 or not math.isfinite(v) or o not in (0, 1):
            raise DataFormatError(f"{path}:{lineno}: malformed line {' '.join(parts)!r}")
        if (num_users is not None and u >= num_users) or (num_items is not None and i >= num_items):
            raise DataFormatError(f"{path}:{lineno}: index ({u}, {i}) exceeds declared dimensions")
        if (u, i) in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate pair ({u}, {i}), first at line {seen[(u, i)]}")
        seen[(u, i)] = lineno
        users.append(u)
        items.append(i)
        values.append(v)
        observed.append(bool(o))
    if num_users is None:
        num_users = max(users, default=-1) + 1
    if num_items is None:
        num_items = max(items, default=-1) + 1
    return RatingTable(num_users, num_items, users, items, values, observed)


def load_raw_triplets(path, mapping: Optional[IdMapping] = None):
    """Read triplets with arbitrary raw ids, remapping them to dense indices.

    Ids are numbered in order of first appearance, continuing from
    ``mapping`` when given so several files share one index space. Returns
    the table and the (extended) :class:`IdMapping`.
    """
    user_index, item_index = {}, {}
    if mapping is not None:
        user_index = {raw: k for k, raw in enumerate(mapping.user_ids)}
        item_index = {raw: k for k, raw in enumerate(mapping.item_ids)}
    users, items, values = [], [], []
    seen = set()
    for lineno, parts in _parse_lines(path):
        ru, ri = parts[0], parts[1]
        try:
            v = float(parts[2])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: malformed line {' '.join(parts)!r}") from None
        u = user_index.setdefault(ru, len(user_index))
        i = item_index.setdefault(ri, len(item_index))
        if (u, i) in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate pair ({ru}, {ri})")
        seen.add((u, i))
        users.append(u)
        items.append(i)
        values.append(v)
    table = RatingTable(max(len(user_index), 1), max(len(item_index), 1), users, items, values)
    return table, IdMapping(tuple(user_index), tuple(item_index))


def _fmt(v):
    return format(float(v), ".17g")


def write_triplets(table: RatingTable, path) -> None:
    """Write ``table`` as UTF-8 TSV. Observed flags are written only if some are 0."""
    flags = not table.observed.all()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# num_users={table.num_users} num_items={table.num_items}\n")
        for u, i, v, o in zip(table.users.tolist(), table.items.tolist(), table.values.tolist(), table.observed.tolist()):
            if flags:
                fh.write(f"{u}\t{i}\t{_fmt(v)}\t{int(o)}\n")
            else:
                fh.write(f"{u}\t{i}\t{_fmt(v)}\n")


def read_dimensions(path):
    """Dimensions from a header written by :func:`write_triplets`, if any."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# num_users="):
        fields = dict(tok.split("=") for tok in first[1:].split())
        return int(fields["num_users"]), int(fields["num_items"])
    return None


def load_table(path, num_users=None, num_items=None) -> RatingTable:
    """:func:`load_triplets`, taking dimensions from the file header when present."""
    dims = read_dimensions(path)
    if dims is not None:
        num_users = num_users if num_users is not None else dims[0]
        num_items = num_items if num_items is not None else dims[1]
    return load_triplets(path, num_users, num_items)


def write_id_mapping(mapping: IdMapping, stem) -> tuple:
    """Write ``<stem>.users.tsv`` and ``<stem>.items.tsv`` as ``raw_id<TAB>index``."""
    paths = []
    for kind, ids in (("users", mapping.user_ids), ("items", mapping.item_ids)):
        p = Path(f"{stem}.{kind}.tsv")
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            for idx, raw in enumerate(ids):
                fh.write(f"{raw}\t{idx}\n")
        paths.append(p)
    return tuple(paths)


def load_rating_matrix(path, missing: float = 0.0) -> RatingTable:
    """Convert a whitespace-separated users x items matrix to a table.

    Entries equal to ``missing`` are dropped (Coat's raw release uses 0).
    """
    mat = np.loadtxt(path, dtype=np.float64, ndmin=2)
    users, items = np.nonzero(mat != missing)
    return RatingTable(mat.shape[0], mat.shape[1], users, items, mat[users, items])


def binarize(table: RatingTable, threshold: float = 3.0) -> RatingTable:
    """Label 1 where the rating is strictly above ``threshold``, else 0."""
    return table.with_values((table.values > threshold).astype(np.float64))


def split_unbiased(table: RatingTable, spec: SplitSpec = SplitSpec()):
    """Uniform random (validation, test) partition of an unbiased table.

    The validation part holds ``round(fraction * n)`` records. Both parts keep
    the input's record order.
    """
    n = len(table)
    if n == 0:
        raise ValueError("cannot split an empty table")
    n_val = int(math.floor(spec.validation_fraction * n + 0.5))
    perm = substream(spec.seed, "split").permutation(n)
    val_idx = np.sort(perm[:n_val])
    test_idx = np.sort(perm[n_val:])
    return table.subset(val_idx), table.subset(test_idx)
