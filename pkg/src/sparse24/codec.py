"""Compressed N:M storage: values plus packed positional metadata.

A conforming R x C matrix compresses to R x C*n/m kept values and one
ceil(log2 m)-bit intra-group index per kept value. Metadata is packed
little-endian within bytes, groups in value order, low bit field first.
This packing is a documented convention of this library, not a hardware claim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import DenseMatrix, NMPattern, NumericFormat, ShapeError


class ConformanceError(ValueError):
    """Input violates the N:M sparsity constraint."""

    def __init__(self, row: int, group: int, nonzeros: int, pattern: NMPattern):
        self.row = row
        self.group = group
        super().__init__(
            f"row {row}, group {group}: {nonzeros} nonzeros exceed {pattern} pattern"
        )


class MetadataError(ValueError):
    """Malformed positional metadata."""


@dataclass(frozen=True)
class Mask:
    """Kept-position marker with exactly n true bits per aligned group."""

    bits: np.ndarray  # bool, 2-D

    def __post_init__(self):
        self.bits.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def check(self, pattern: NMPattern) -> None:
        pattern.check_divides(self.cols)
        groups = self.bits.reshape(self.rows, -1, pattern.m)
        counts = groups.sum(axis=2)
        if not np.all(counts == pattern.n):
            r, g = np.argwhere(counts != pattern.n)[0]
            raise ConformanceError(int(r), int(g), int(counts[r, g]), pattern)


@dataclass(frozen=True)
class SparseNM:
    """Compressed operand: kept values and per-value intra-group indices.

    ``values`` has shape (R, C*n/m); ``meta`` has the same shape and holds the
    unpacked intra-group index of each kept value, strictly increasing within
    every group.
    """

    cols_orig: int
    pattern: NMPattern
    values: np.ndarray
    meta: np.ndarray
    fmt: NumericFormat

    def __post_init__(self):
        self.values.setflags(write=False)
        self.meta.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols_kept(self) -> int:
        return self.values.shape[1]

    @property
    def groups_per_row(self) -> int:
        return self.cols_orig // self.pattern.m

    def validate(self) -> None:
        p = self.pattern
        if self.values.shape != self.meta.shape:
            raise MetadataError("values/meta shape mismatch")
        if self.cols_kept != self.groups_per_row * p.n:
            raise MetadataError(
                f"expected {self.groups_per_row * p.n} kept columns, got {self.cols_kept}"
            )
        grouped = self.meta.astype(np.int64).reshape(self.rows, self.groups_per_row, p.n)
        if grouped.size:
            if grouped.min() < 0 or grouped.max() >= p.m:
                raise MetadataError(f"metadata index out of range [0, {p.m})")
            if p.n > 1 and not np.all(np.diff(grouped, axis=2) > 0):
                raise MetadataError("metadata indices not strictly increasing within group")

    def column_indices(self) -> np.ndarray:
        """Original column index of every kept value, shape (R, C*n/m)."""
        p = self.pattern
        base = np.repeat(np.arange(self.groups_per_row) * p.m, p.n)
        return base[None, :] + self.meta


def check_conformance(a: DenseMatrix, pattern: NMPattern, raise_on_fail: bool = False) -> bool:
    """True iff every aligned group of m row elements has at most n nonzeros."""
    pattern.check_divides(a.cols)
    groups = (a.data != 0).reshape(a.rows, -1, pattern.m)
    counts = groups.sum(axis=2)
    ok = bool(np.all(counts <= pattern.n))
    if not ok and raise_on_fail:
        r, g = np.argwhere(counts > pattern.n)[0]
        raise ConformanceError(int(r), int(g), int(counts[r, g]), pattern)
    return ok


def compress(a: DenseMatrix, pattern: NMPattern) -> SparseNM:
    """Compress a conforming matrix into value + metadata form.

    Groups with fewer than n nonzeros still store n slots: all nonzeros are
    kept, and remaining slots take the smallest unused indices in ascending
    order with value 0 (canonical padding).
    """
    check_conformance(a, pattern, raise_on_fail=True)
    n, m = pattern.n, pattern.m
    rows = a.rows
    groups = a.data.reshape(rows, -1, m)
    nz = groups != 0
    # Rank nonzeros first (by index), then pad with unused indices ascending.
    # Sorting key: zeros get their index pushed past m so nonzero indices come
    # first, both halves staying in ascending index order.
    idx = np.broadcast_to(np.arange(m), nz.shape)
    key = np.where(nz, idx, idx + m)
    order = np.argsort(key, axis=2, kind="stable")[:, :, :n]
    meta = np.sort(order, axis=2).astype(np.uint8)
    values = np.take_along_axis(groups, meta, axis=2)
    return SparseNM(
        cols_orig=a.cols,
        pattern=pattern,
        values=values.reshape(rows, -1).copy(),
        meta=meta.reshape(rows, -1).copy(),
        fmt=a.fmt,
    )


def decompress(s: SparseNM) -> DenseMatrix:
    """Inverse of :func:`compress`; bit-exact."""
    s.validate()
    out = np.zeros((s.rows, s.cols_orig), dtype=s.values.dtype)
    cols = s.column_indices()
    rows = np.broadcast_to(np.arange(s.rows)[:, None], cols.shape)
    out[rows, cols] = s.values
    return DenseMatrix(out, s.fmt)


def storage_bits(s: SparseNM) -> int:
    """Exact bit count of kept values plus packed metadata (no padding)."""
    kept = s.values.size
    return kept * s.fmt.elem_bits + kept * s.pattern.meta_bits


def dense_storage_bits(rows: int, cols: int, fmt: NumericFormat) -> int:
    return rows * cols * fmt.elem_bits


def apply_mask(a: DenseMatrix, mask: Mask) -> DenseMatrix:
    """Elementwise product of a matrix with a kept-position mask."""
    if a.data.shape != mask.bits.shape:
        raise ShapeError(f"mask shape {mask.bits.shape} != matrix shape {a.data.shape}")
    return DenseMatrix(np.where(mask.bits, a.data, a.data.dtype.type(0)), a.fmt)
