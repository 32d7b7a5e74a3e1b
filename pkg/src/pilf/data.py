"""Sparse incomplete rating matrices: storage, ingestion, splitting and synthesis."""

from __future__ import annotations

import io
import math
import os
import warnings
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Literal, NamedTuple, Sequence

import numpy as np

from .model import LatentFactors

RatingFormat = Literal["movielens-dat", "csv"]
FORMATS: tuple[str, ...] = ("movielens-dat", "csv")


class ParseError(ValueError):
    """Raised when a ratings file cannot be read; carries the 1-based line number."""

    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateEntryError(ParseError):
    def __init__(self, user: str, item: str, first_line: int, line: int) -> None:
        ValueError.__init__(
            self,
            f"duplicate rating for user {user!r}, item {item!r} "
            f"on lines {first_line} and {line}",
        )
        self.line = line
        self.first_line = first_line


class ColdNodeWarning(UserWarning):
    """Some row or column of a generated matrix has no observed entries."""


class RatingTriple(NamedTuple):
    row: int
    col: int
    value: float


class HdiMatrix:
    """Immutable set of known entries of a ``num_rows x num_cols`` matrix.

    Entries are stored as parallel ``rows``/``cols``/``values`` arrays, stably
    sorted by row, so the entries of row ``m`` occupy the contiguous slice
    ``row_ptr[m]:row_ptr[m + 1]``. Column access goes through ``col_order``, a
    permutation of entry positions sorted by column, sliced by ``col_ptr``.
    """

    def __init__(
        self,
        num_rows: int,
        num_cols: int,
        rows: Sequence[int] | np.ndarray,
        cols: Sequence[int] | np.ndarray,
        values: Sequence[float] | np.ndarray,
        row_ids: Sequence[str] | None = None,
        col_ids: Sequence[str] | None = None,
    ) -> None:
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have equal length")
        if num_rows < 1 or num_cols < 1:
            raise ValueError("matrix dimensions must be positive")
        if rows.size:
            if rows.min() < 0 or rows.max() >= num_rows:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= num_cols:
                raise ValueError("column index out of range")
        if not np.all(np.isfinite(values)):
            raise ValueError("ratings must be finite")
        keys = rows * num_cols + cols
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate (row, col) entries")
        if row_ids is not None and len(row_ids) != num_rows:
            raise ValueError("row id map does not match num_rows")
        if col_ids is not None and len(col_ids) != num_cols:
            raise ValueError("column id map does not match num_cols")

        order = np.argsort(rows, kind="stable")
        self.num_rows = int(num_rows)
        self.num_cols = int(num_cols)
        self.rows = rows[order]
        self.cols = cols[order]
        self.values = values[order]
        self.row_ptr = np.zeros(num_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=num_rows), out=self.row_ptr[1:])
        self.col_order = np.argsort(self.cols, kind="stable")
        self.col_ptr = np.zeros(num_cols + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.cols, minlength=num_cols), out=self.col_ptr[1:])
        for arr in (self.rows, self.cols, self.values, self.row_ptr, self.col_order, self.col_ptr):
            arr.flags.writeable = False
        self.row_ids = list(row_ids) if row_ids is not None else None
        self.col_ids = list(col_ids) if col_ids is not None else None

    def __len__(self) -> int:
        return int(self.rows.size)

    def __repr__(self) -> str:
        return (
            f"HdiMatrix({self.num_rows}x{self.num_cols}, "
            f"nnz={len(self)}, density={self.density:.4g})"
        )

    @property
    def nnz(self) -> int:
        return len(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.num_rows, self.num_cols

    @property
    def density(self) -> float:
        return len(self) / (self.num_rows * self.num_cols)

    def triple(self, i: int) -> RatingTriple:
        return RatingTriple(int(self.rows[i]), int(self.cols[i]), float(self.values[i]))

    @property
    def entries(self) -> list[RatingTriple]:
        return [RatingTriple(int(r), int(c), float(v))
                for r, c, v in zip(self.rows, self.cols, self.values)]

    def __iter__(self) -> Iterator[RatingTriple]:
        return iter(self.entries)

    def row_slice(self, m: int) -> slice:
        return slice(int(self.row_ptr[m]), int(self.row_ptr[m + 1]))

    def col_positions(self, n: int) -> np.ndarray:
        """Entry positions whose column is ``n``."""
        return self.col_order[self.col_ptr[n]:self.col_ptr[n + 1]]

    def row_degree(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def col_degree(self) -> np.ndarray:
        return np.diff(self.col_ptr)

    def has_cold_nodes(self) -> bool:
        return bool((self.row_degree() == 0).any() or (self.col_degree() == 0).any())

    def subset(self, positions: np.ndarray) -> HdiMatrix:
        """New matrix with the entries at ``positions``, same shape and id maps."""
        positions = np.asarray(positions, dtype=np.int64)
        return HdiMatrix(
            self.num_rows, self.num_cols,
            self.rows[positions], self.cols[positions], self.values[positions],
            self.row_ids, self.col_ids,
        )

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.float64)
        out[self.rows, self.cols] = self.values
        return out


def _open_binary(source: str | os.PathLike | BinaryIO | bytes) -> BinaryIO:
    if isinstance(source, bytes):
        return io.BytesIO(source)
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb")
    return source


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def parse_ratings(
    source: str | os.PathLike | BinaryIO | bytes, fmt: RatingFormat = "movielens-dat"
) -> HdiMatrix:
    """Read a MovieLens ``::`` file or a ``user,item,rating[,timestamp]`` csv.

    User and item ids are remapped to dense indices in first-appearance order;
    the original tokens are kept in ``row_ids``/``col_ids``. Any timestamp
    column is ignored. Raises :class:`ParseError` on malformed lines and
    :class:`DuplicateEntryError` on repeated (user, item) pairs.
    """
    if fmt == "movielens-dat":
        sep, min_fields, max_fields = "::", 4, 4
    elif fmt == "csv":
        sep, min_fields, max_fields = ",", 3, 4
    else:
        raise ValueError(f"unknown ratings format {fmt!r}; expected one of {FORMATS}")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: dict[tuple[int, int], int] = {}
    rows: list[int] = []
    cols: list[int] = []
    values: list[float] = []

    stream = _open_binary(source)
    try:
        for lineno, raw in enumerate(stream, start=1):
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError as exc:
                raise ParseError(f"invalid UTF-8 ({exc.reason})", lineno) from None
            if not line.strip():
                continue
            fields = [f.strip() for f in line.split(sep)]
            if not (min_fields <= len(fields) <= max_fields):
                if min_fields == max_fields:
                    expected = str(min_fields)
                else:
                    expected = f"{min_fields}-{max_fields}"
                raise ParseError(f"expected {expected} fields, got {len(fields)}", lineno)
            user, item, rating_tok = fields[0], fields[1], fields[2]
            if fmt == "csv" and lineno == 1 and not any(map(_is_number, fields)):
                continue  # header
            try:
                rating = float(rating_tok)
            except ValueError:
                raise ParseError(f"non-numeric rating {rating_tok!r}", lineno) from None
            if not math.isfinite(rating):
                raise ParseError(f"non-finite rating {rating_tok!r}", lineno)
            if not user or not item:
                raise ParseError("empty user or item id", lineno)

            m = user_index.setdefault(user, len(user_index))
            n = item_index.setdefault(item, len(item_index))
            first = seen.setdefault((m, n), lineno)
            if first != lineno:
                raise DuplicateEntryError(user, item, first, lineno)
            rows.append(m)
            cols.append(n)
            values.append(rating)
    finally:
        if stream is not source:
            stream.close()

    if not rows:
        raise ParseError("no ratings found", 0)
    return HdiMatrix(
        len(user_index), len(item_index), rows, cols, values,
        row_ids=list(user_index), col_ids=list(item_index),
    )


def write_csv(matrix: HdiMatrix, dest: str | os.PathLike | io.TextIOBase) -> None:
    """Write the canonical ``row,col,value`` csv (values round-trip exactly)."""
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8", newline="\n") if own else dest
    try:
        fh.write("row,col,value\n")
        for r, c, v in zip(matrix.rows.tolist(), matrix.cols.tolist(), matrix.values.tolist()):
            fh.write(f"{r},{c},{v!r}\n")
    finally:
        if own:
            fh.close()


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        fractions = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(not 0.0 <= f <= 1.0 for f in fractions):
            raise ValueError(f"split fractions must lie in [0, 1], got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fractions)!r}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> SplitSpec:
        """Build from ``"0.8,0.1,0.1"``."""
        parts = [float(p) for p in text.replace("/", ",").split(",") if p.strip()]
        if len(parts) != 3:
            raise ValueError(f"split needs three fractions, got {text!r}")
        return cls(*parts, seed=seed)


def split_ratings(
    matrix: HdiMatrix, spec: SplitSpec
) -> tuple[HdiMatrix, HdiMatrix, HdiMatrix]:
    """Seeded shuffle of the known entries sliced into train/validation/test."""
    n = len(matrix)
    if n < 10:
        raise ValueError(f"need at least 10 known entries to split, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    # the epsilon keeps exact products such as 0.7 * 10 from flooring to 6
    n_train = min(n, math.floor(spec.train_fraction * n + 1e-9))
    n_val = min(n - n_train, math.floor(spec.validation_fraction * n + 1e-9))
    return (
        matrix.subset(perm[:n_train]),
        matrix.subset(perm[n_train:n_train + n_val]),
        matrix.subset(perm[n_train + n_val:]),
    )


def generate_synthetic(
    num_rows: int,
    num_cols: int,
    rank: int,
    density: float,
    noise_std: float = 0.0,
    seed: int = 0,
) -> tuple[HdiMatrix, LatentFactors]:
    """Sample a low-rank matrix with uniform [0, 1) factors at a random cell subset.

    Returns the observed matrix and the generating factors. A
    :class:`ColdNodeWarning` is issued when some row or column ends up empty.
    """
    if rank < 1 or rank > min(num_rows, num_cols):
        raise ValueError(f"rank must be in [1, {min(num_rows, num_cols)}], got {rank}")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")

    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(num_rows, rank))
    y = rng.uniform(0.0, 1.0, size=(num_cols, rank))
    total = num_rows * num_cols
    count = max(1, round(density * total))
    cells = np.sort(rng.choice(total, size=count, replace=False))
    rows, cols = np.divmod(cells, num_cols)
    values = np.einsum("ij,ij->i", x[rows], y[cols])
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=count)

    matrix = HdiMatrix(num_rows, num_cols, rows, cols, values)
    if matrix.has_cold_nodes():
        warnings.warn(
            f"synthetic matrix at density {density} has rows or columns without entries",
            ColdNodeWarning,
            stacklevel=2,
        )
    return matrix, LatentFactors(x, y)
