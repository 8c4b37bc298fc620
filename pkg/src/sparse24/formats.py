"""Numeric formats, dense matrix container, and reference GEMM.

All low-precision formats are emulated on top of 32-bit arithmetic with
explicit rounding so results are reproducible across platforms. FP32-accumulate
modes round products only (FP16/BF16/TF32 products are exact in float32);
FP16-accumulate mode rounds every product and every accumulation step.
Accumulation order is fixed (ascending k) so float results are bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class ElemType(Enum):
    FP32 = "fp32"
    TF32 = "tf32"
    FP16 = "fp16"
    BF16 = "bf16"
    INT8 = "int8"


class AccType(Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    INT32 = "int32"


@dataclass(frozen=True)
class NumericFormat:
    """An (input operand, accumulator) precision pair."""

    elem: ElemType
    acc: AccType

    def __post_init__(self):
        if (self.elem, self.acc) not in _ALLOWED_PAIRS:
            raise FormatError(f"unsupported format pair {self.elem.value}/{self.acc.value}")

    @property
    def is_integer(self) -> bool:
        return self.elem is ElemType.INT8

    @property
    def elem_bits(self) -> int:
        return _ELEM_BITS[self.elem]

    @property
    def sparse_capable(self) -> bool:
        # FP32/FP32 is the one mode with no sparse variant.
        return not (self.elem is ElemType.FP32 and self.acc is AccType.FP32)

    @property
    def sparse_k_multiple(self) -> int:
        """Inner-dimension alignment required for sparse multiplication."""
        return 32 if self.is_integer else 16

    def __str__(self) -> str:
        return f"{self.elem.value}/{self.acc.value}"


_ALLOWED_PAIRS = {
    (ElemType.FP32, AccType.FP32),
    (ElemType.TF32, AccType.FP32),
    (ElemType.FP16, AccType.FP32),
    (ElemType.BF16, AccType.FP32),
    (ElemType.FP16, AccType.FP16),
    (ElemType.INT8, AccType.INT32),
}

_ELEM_BITS = {
    ElemType.FP32: 32,
    ElemType.TF32: 32,  # stored as fp32 words
    ElemType.FP16: 16,
    ElemType.BF16: 16,
    ElemType.INT8: 8,
}

FP32 = NumericFormat(ElemType.FP32, AccType.FP32)
TF32 = NumericFormat(ElemType.TF32, AccType.FP32)
FP16 = NumericFormat(ElemType.FP16, AccType.FP32)
BF16 = NumericFormat(ElemType.BF16, AccType.FP32)
FP16_FP16 = NumericFormat(ElemType.FP16, AccType.FP16)
INT8 = NumericFormat(ElemType.INT8, AccType.INT32)

ALL_FORMATS = (FP32, TF32, FP16, BF16, FP16_FP16, INT8)


class FormatError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def round_array(x: np.ndarray, elem: ElemType) -> np.ndarray:
    """Round values into the target element type (round-to-nearest-even).

    Float formats return float32 arrays holding exactly-representable values;
    INT8 saturates to [-128, 127] and returns int32. TF32 keeps the FP32 value
    with the mantissa truncated to 10 explicit bits.
    """
    x = np.asarray(x, dtype=np.float32)
    if elem is ElemType.FP32:
        return x.copy()
    if elem is ElemType.FP16:
        return x.astype(np.float16).astype(np.float32)
    if elem is ElemType.BF16:
        bits = x.view(np.uint32) if x.flags["C_CONTIGUOUS"] else np.ascontiguousarray(x).view(np.uint32)
        rounded = bits + 0x7FFF + ((bits >> 16) & 1)
        return (rounded & np.uint32(0xFFFF0000)).view(np.float32).copy()
    if elem is ElemType.TF32:
        bits = np.ascontiguousarray(x).view(np.uint32)
        return (bits & np.uint32(0xFFFFE000)).view(np.float32).copy()
    if elem is ElemType.INT8:
        return np.clip(np.rint(x), -128, 127).astype(np.int32)
    raise FormatError(f"unknown element type {elem}")


def round_to_format(x: float, fmt: NumericFormat) -> float:
    """Scalar convenience wrapper around :func:`round_array`."""
    return round_array(np.array([x], dtype=np.float32), fmt.elem)[0].item()


@dataclass(frozen=True)
class DenseMatrix:
    """Row-major 2-D operand. ``data`` holds format-rounded values
    (float32 for float formats, int32 in [-128, 127] for INT8)."""

    data: np.ndarray
    fmt: NumericFormat

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"expected 2-D data, got ndim={self.data.ndim}")
        self.data.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_values(cls, values, fmt: NumericFormat) -> "DenseMatrix":
        """Build a matrix, rounding arbitrary values into the element format."""
        arr = np.ascontiguousarray(values, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"expected 2-D values, got ndim={arr.ndim}")
        return cls(round_array(arr, fmt.elem), fmt)

    def validate(self) -> None:
        """Check that every element is representable in the element format."""
        rounded = round_array(self.data.astype(np.float32), self.fmt.elem)
        if self.fmt.is_integer:
            ok = np.array_equal(rounded, self.data)
        else:
            ok = np.array_equal(rounded, self.data)
        if not ok:
            raise FormatError(f"data not representable in {self.fmt.elem.value}")


@dataclass(frozen=True)
class GemmShape:
    m: int
    n: int
    k: int

    def __post_init__(self):
        if min(self.m, self.n, self.k) <= 0:
            raise ShapeError(f"GEMM dims must be positive, got {self}")

    def check_sparse(self, fmt: NumericFormat) -> None:
        if not fmt.sparse_capable:
            raise FormatError(f"format {fmt} has no sparse mode")
        mult = fmt.sparse_k_multiple
        if self.k % mult != 0:
            raise ShapeError(f"sparse K={self.k} must be a multiple of {mult} for {fmt}")


@dataclass(frozen=True)
class NMPattern:
    """Keep ``n`` of every aligned group of ``m`` values along a row."""

    n: int
    m: int

    def __post_init__(self):
        if not 0 < self.n < self.m:
            raise ValueError(f"need 0 < n < m, got {self.n}:{self.m}")

    @property
    def meta_bits(self) -> int:
        return max(1, (self.m - 1).bit_length())

    def check_divides(self, cols: int) -> None:
        if cols % self.m != 0:
            raise ShapeError(f"group size {self.m} does not divide {cols} columns")

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        n, _, m = text.partition(":")
        return cls(int(n), int(m))


PATTERN_24 = NMPattern(2, 4)
PATTERN_12 = NMPattern(1, 2)


def _wrap_int32(x: np.ndarray) -> np.ndarray:
    low = np.bitwise_and(x, np.int64(0xFFFFFFFF))
    return np.where(low >= 2**31, low - 2**32, low).astype(np.int32)


def gemm_dense(a: DenseMatrix, b: DenseMatrix, fmt: NumericFormat | None = None) -> DenseMatrix:
    """Reference dense GEMM with the documented emulation semantics.

    The result carries accumulator-format values in ``data`` (int32 for the
    INT8/INT32 mode, float32 otherwise). Summation is ascending over k.
    """
    if fmt is None:
        fmt = a.fmt
    if a.fmt.elem is not fmt.elem or b.fmt.elem is not fmt.elem:
        raise FormatError(f"operand formats {a.fmt}/{b.fmt} do not match mode {fmt}")
    if a.cols != b.rows:
        raise ShapeError(f"inner dims differ: {a.cols} vs {b.rows}")

    if fmt.is_integer:
        res = a.data.astype(np.int64) @ b.data.astype(np.int64)
        return DenseMatrix(_wrap_int32(res), fmt)

    if fmt.acc is AccType.FP16:
        acc = np.zeros((a.rows, b.cols), dtype=np.float16)
        for k in range(a.cols):
            prod = (a.data[:, k : k + 1] * b.data[k : k + 1, :]).astype(np.float16)
            acc = acc + prod
        return DenseMatrix(acc.astype(np.float32), fmt)

    acc = np.zeros((a.rows, b.cols), dtype=np.float32)
    for k in range(a.cols):
        acc += a.data[:, k : k + 1] * b.data[k : k + 1, :]
    return DenseMatrix(acc, fmt)
