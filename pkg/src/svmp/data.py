"""Ratings ingestion, synthetic data, run-log CSV and state checkpoints."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, TextIO

import numpy as np

from .model import FactorState
from .rng import Stream, stream

CSV_HEADER = ["t", "ratings_accessed", "elbo", "rho", "diverged"]
CHECKPOINT_MAGIC = b"SVMP1"
MAX_PATTERN_RETRIES = 100


class RatingsFormatError(ValueError):
    """Malformed ratings input."""


class CheckpointError(ValueError):
    """Unreadable or invalid checkpoint stream."""


class ConvergenceCSVError(ValueError):
    """Unreadable convergence log."""


@dataclass(frozen=True)
class RunLogEntry:
    t: int
    ratings_accessed: int
    elbo: float
    rho: float
    diverged: bool


@dataclass(eq=False)
class SparseRatings:
    """Observed ratings with per-user and per-item inverted indexes.

    ``user_children[m]`` lists the positions (into the triplet arrays) of
    user ``m``'s ratings in ascending order; likewise ``item_children``.
    """

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    M: int
    N: int
    user_children: list[np.ndarray] = field(init=False, repr=False)
    item_children: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.values)
        if self.users.shape != (n,) or self.items.shape != (n,):
            raise ValueError("users, items and values must be 1-d arrays of equal length")
        if n and (self.users.min() < 0 or self.users.max() >= self.M):
            raise ValueError("user index out of range")
        if n and (self.items.min() < 0 or self.items.max() >= self.N):
            raise ValueError("item index out of range")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ratings must be finite")
        keys = self.users * self.N + self.items
        if len(np.unique(keys)) != n:
            raise ValueError("duplicate (user, item) pair")
        self.user_children = _invert(self.users, self.M)
        self.item_children = _invert(self.items, self.N)

    @classmethod
    def from_triplets(cls, triplets: Iterable[tuple[int, int, float]], M: int | None = None,
                      N: int | None = None) -> "SparseRatings":
        triplets = list(triplets)
        users = np.array([t[0] for t in triplets], dtype=np.int64)
        items = np.array([t[1] for t in triplets], dtype=np.int64)
        values = np.array([t[2] for t in triplets], dtype=np.float64)
        if M is None:
            M = int(users.max()) + 1 if len(users) else 0
        if N is None:
            N = int(items.max()) + 1 if len(items) else 0
        return cls(users, items, values, M, N)

    def __len__(self):
        return len(self.values)

    @property
    def triplets(self) -> list[tuple[int, int, float]]:
        return [(int(u), int(i), float(r)) for u, i, r in zip(self.users, self.items, self.values)]

    def transposed(self) -> "SparseRatings":
        return SparseRatings(self.items, self.users, self.values, self.N, self.M)

    def max_children(self) -> int:
        return max(max((len(c) for c in self.user_children), default=0),
                   max((len(c) for c in self.item_children), default=0))


def _invert(index: np.ndarray, size: int) -> list[np.ndarray]:
    order = np.argsort(index, kind="stable")
    bounds = np.searchsorted(index[order], np.arange(size + 1))
    return [order[bounds[j]:bounds[j + 1]] for j in range(size)]


@dataclass(frozen=True)
class SyntheticTruth:
    U: np.ndarray
    V: np.ndarray


def load_ratings(source: BinaryIO | bytes) -> SparseRatings:
    """Parse ``user<TAB>item<TAB>rating`` lines; ``#`` lines and blank lines skipped.

    Ids are re-indexed densely in order of first appearance.
    """
    raw = source if isinstance(source, (bytes, bytearray)) else source.read()
    try:
        text = bytes(raw).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RatingsFormatError(f"input is not UTF-8: {exc}") from None
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    triplets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#") or not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            raise RatingsFormatError(f"line {lineno}: expected user<TAB>item<TAB>rating")
        try:
            value = float(parts[2])
        except ValueError:
            raise RatingsFormatError(f"line {lineno}: rating {parts[2]!r} is not a number") from None
        if not math.isfinite(value):
            raise RatingsFormatError(f"line {lineno}: rating must be finite")
        u = user_ids.setdefault(parts[0], len(user_ids))
        i = item_ids.setdefault(parts[1], len(item_ids))
        if (u, i) in seen:
            raise RatingsFormatError(f"line {lineno}: duplicate pair ({parts[0]!r}, {parts[1]!r})")
        seen.add((u, i))
        triplets.append((u, i, value))
    if not triplets:
        raise RatingsFormatError("no ratings in input")
    return SparseRatings.from_triplets(triplets, len(user_ids), len(item_ids))


def generate_synthetic(M: int, N: int, K: int, density: float, noise_sd: float,
                       seed) -> tuple[SparseRatings, SyntheticTruth]:
    """Draw traits from the N(0, 1) prior and observe each cell w.p. ``density``.

    The observation pattern is redrawn until every user and item has at least
    one rating.
    """
    if min(M, N, K) < 1:
        raise ValueError("M, N and K must be positive")
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    rng = stream(seed, Stream.DATA)
    U = rng.standard_normal((M, K))
    V = rng.standard_normal((N, K))
    for _ in range(MAX_PATTERN_RETRIES):
        mask = rng.random((M, N)) < density
        if mask.any(axis=1).all() and mask.any(axis=0).all():
            break
    else:
        raise ValueError(f"no observation pattern covering all rows within {MAX_PATTERN_RETRIES} draws")
    users, items = np.nonzero(mask)
    noise = rng.standard_normal(len(users))
    values = np.einsum("ck,ck->c", U[users], V[items]) + noise_sd * noise
    return SparseRatings(users, items, values, M, N), SyntheticTruth(U, V)


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_convergence_csv(entries: Iterable[RunLogEntry], sink: TextIO) -> None:
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for e in entries:
        w.writerow([e.t, e.ratings_accessed, _fmt(e.elbo), _fmt(e.rho), int(e.diverged)])


def read_convergence_csv(source: TextIO | str) -> list[RunLogEntry]:
    if isinstance(source, str):
        source = io.StringIO(source)
    rows = csv.reader(source)
    header = next(rows, None)
    if header != CSV_HEADER:
        raise ConvergenceCSVError(f"bad header {header!r}, expected {CSV_HEADER!r}")
    out = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(CSV_HEADER):
            raise ConvergenceCSVError(f"line {lineno}: expected {len(CSV_HEADER)} fields")
        try:
            t, acc, elbo_, rho, div = int(row[0]), int(row[1]), float(row[2]), float(row[3]), int(row[4])
        except ValueError:
            raise ConvergenceCSVError(f"line {lineno}: non-numeric field") from None
        if div not in (0, 1):
            raise ConvergenceCSVError(f"line {lineno}: diverged must be 0 or 1")
        out.append(RunLogEntry(t, acc, elbo_, rho, bool(div)))
    return out


def checkpoint_save(state: FactorState, sink: BinaryIO) -> None:
    """``SVMP1`` magic, ``(M, N, K)`` as little-endian u64, then float64 pairs."""
    sink.write(CHECKPOINT_MAGIC)
    sink.write(struct.pack("<3Q", state.M, state.N, state.K))
    for prec, mtp in ((state.u_precision, state.u_mtp), (state.v_precision, state.v_mtp)):
        sink.write(np.stack([prec, mtp], axis=-1).astype("<f8").tobytes())


def _read_exact(source: BinaryIO, n: int) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def checkpoint_load(source: BinaryIO) -> FactorState:
    """Inverse of :func:`checkpoint_save`.

    Rejects non-positive precisions.  NaN and infinite values are kept so that
    the final state of a diverged run stays inspectable.
    """
    if _read_exact(source, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    M, N, K = struct.unpack("<3Q", _read_exact(source, 24))
    if K == 0:
        raise CheckpointError("K must be positive")
    grids = []
    for rows in (M, N):
        a = np.frombuffer(_read_exact(source, rows * K * 16), dtype="<f8").reshape(rows, K, 2)
        grids.extend([a[..., 0].astype(np.float64), a[..., 1].astype(np.float64)])
    if source.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    for prec in (grids[0], grids[2]):
        if np.any(prec <= 0.0):
            raise CheckpointError("checkpoint holds a non-positive precision")
    return FactorState(*grids)
