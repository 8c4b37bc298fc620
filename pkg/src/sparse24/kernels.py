"""Sparse x dense GEMM over the compressed operand, plus a CPU bench harness.

The kernel gathers rows of B through the positional metadata (one gathered row
per kept value) and never materializes the decompressed operand; the
instrumented multiply-add counter proves it touches exactly M*N*K*n/m terms.
Accumulation walks kept values in ascending original-column order, so a given
plan is deterministic and the output is independent of tiling and thread count.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .codec import SparseNM
from .formats import (
    AccType,
    DenseMatrix,
    FormatError,
    GemmShape,
    NMPattern,
    NumericFormat,
    ShapeError,
    _wrap_int32,
    gemm_dense,
)


@dataclass
class MultiplyAddCounter:
    """Counts multiply-add operations actually issued by the kernel."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += n


@dataclass(frozen=True)
class SpmmPlan:
    """Output blocking and worker count for the sparse kernel."""

    shape: GemmShape
    tile: tuple[int, int, int] = (64, 64, 64)
    threads: int = 1

    def __post_init__(self):
        tr, tc, td = self.tile
        if min(tr, tc, td) <= 0:
            raise ShapeError(f"tile dims must be positive, got {self.tile}")
        if self.threads <= 0:
            raise ShapeError("threads must be positive")

    def check(self, pattern: NMPattern) -> None:
        if self.tile[2] % pattern.m != 0:
            raise ShapeError(
                f"tile depth {self.tile[2]} must be a multiple of group size {pattern.m}"
            )


def spmm_flops(shape: GemmShape, pattern: NMPattern) -> int:
    """Multiply-add count of the sparse kernel: M*N*K*n/m."""
    return shape.m * shape.n * shape.k * pattern.n // pattern.m


def spmm(
    a: SparseNM,
    b: DenseMatrix,
    fmt: NumericFormat | None = None,
    plan: SpmmPlan | None = None,
    counter: MultiplyAddCounter | None = None,
) -> DenseMatrix:
    """Compute decompress(a) @ b without decompressing a.

    Bit-exact against the dense reference in INT8/INT32 mode; within the
    documented accumulator-ulp bound in float modes.
    """
    if fmt is None:
        fmt = a.fmt
    if a.fmt.elem is not fmt.elem or b.fmt.elem is not fmt.elem:
        raise FormatError(f"operand formats {a.fmt}/{b.fmt} do not match mode {fmt}")
    if a.cols_orig != b.rows:
        raise ShapeError(f"inner dims differ: {a.cols_orig} vs {b.rows}")
    shape = GemmShape(a.rows, b.cols, a.cols_orig)
    shape.check_sparse(fmt)
    if plan is None:
        plan = SpmmPlan(shape)
    plan.check(a.pattern)

    cols = a.column_indices()  # (R, kept) B-row offset per kept value
    kept = a.cols_kept
    tr, tc, _ = plan.tile

    if fmt.is_integer:
        acc_dtype = np.int64
        vals = a.values.astype(np.int64)
        bdat = b.data.astype(np.int64)
    elif fmt.acc is AccType.FP16:
        acc_dtype = np.float16
        vals = a.values
        bdat = b.data
    else:
        acc_dtype = np.float32
        vals = a.values
        bdat = b.data

    row_blocks = [(r0, min(r0 + tr, shape.m)) for r0 in range(0, shape.m, tr)]
    col_blocks = [(c0, min(c0 + tc, shape.n)) for c0 in range(0, shape.n, tc)]
    out = np.zeros((shape.m, shape.n), dtype=acc_dtype)

    def run_tile(r0: int, r1: int, c0: int, c1: int) -> int:
        tile = np.zeros((r1 - r0, c1 - c0), dtype=acc_dtype)
        tvals = vals[r0:r1]
        tcols = cols[r0:r1]
        bsub = bdat[:, c0:c1]
        madds = 0
        for j in range(kept):
            gathered = bsub[tcols[:, j], :]
            if fmt.acc is AccType.FP16:
                prod = (tvals[:, j : j + 1] * gathered).astype(np.float16)
                tile = tile + prod
            else:
                tile += tvals[:, j : j + 1] * gathered
            madds += tile.shape[0] * tile.shape[1]
        out[r0:r1, c0:c1] = tile
        return madds

    tiles = [(r0, r1, c0, c1) for r0, r1 in row_blocks for c0, c1 in col_blocks]
    if plan.threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=plan.threads) as pool:
            total = sum(pool.map(lambda t: run_tile(*t), tiles))
    else:
        total = sum(run_tile(*t) for t in tiles)
    if counter is not None:
        counter.add(total)

    if fmt.is_integer:
        out = _wrap_int32(out)
    else:
        out = out.astype(np.float32)
    return DenseMatrix(out, fmt)


def float_tolerance(oracle: DenseMatrix, k: int) -> float:
    """Elementwise bound for float-mode equivalence checks: 2*K ulps of the
    accumulator format at the result's peak magnitude."""
    peak = float(np.max(np.abs(oracle.data))) if oracle.data.size else 0.0
    if oracle.fmt.acc is AccType.FP16:
        ulp = float(np.spacing(np.float16(max(peak, 1e-3))))
    else:
        ulp = float(np.spacing(np.float32(max(peak, 1e-30))))
    return 2.0 * k * ulp


@dataclass
class BenchRow:
    m: int
    n: int
    k: int
    dense_ns: int
    sparse_ns: int
    speedup: float
    flops_ratio: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    HEADER = "M,N,K,dense_ns,sparse_ns,speedup,flops_ratio"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER.split(","))
        for r in self.rows:
            writer.writerow(
                [r.m, r.n, r.k, r.dense_ns, r.sparse_ns, f"{r.speedup:.4f}", f"{r.flops_ratio:.4f}"]
            )
        return buf.getvalue()


def bench(
    sizes: list[GemmShape],
    fmt: NumericFormat,
    repeats: int = 5,
    pattern: NMPattern | None = None,
    seed: int = 0,
) -> BenchReport:
    """Median wall-clock comparison of the dense reference vs the sparse kernel
    on random conforming operands. flops_ratio reports the multiply-add ratio
    (m/n), e.g. 2.0 for 2:4."""
    from .pruning import prune_magnitude  # local import to avoid a cycle
    from .codec import apply_mask, compress

    if pattern is None:
        pattern = NMPattern(2, 4)
    rng = np.random.default_rng(seed)
    report = BenchReport()
    for shape in sizes:
        shape.check_sparse(fmt)
        a = _random_dense(rng, shape.m, shape.k, fmt)
        b = _random_dense(rng, shape.k, shape.n, fmt)
        pruned = apply_mask(a, prune_magnitude(a, pattern).mask)
        sp = compress(pruned, pattern)
        plan = SpmmPlan(shape, tile=(shape.m, shape.n, pattern.m))

        dense_ns = _median_ns(lambda: gemm_dense(pruned, b, fmt), repeats)
        sparse_ns = _median_ns(lambda: spmm(sp, b, fmt, plan), repeats)
        report.rows.append(
            BenchRow(
                m=shape.m,
                n=shape.n,
                k=shape.k,
                dense_ns=dense_ns,
                sparse_ns=sparse_ns,
                speedup=dense_ns / sparse_ns if sparse_ns else float("inf"),
                flops_ratio=pattern.m / pattern.n,
            )
        )
    return report


def _random_dense(rng: np.random.Generator, rows: int, cols: int, fmt: NumericFormat) -> DenseMatrix:
    if fmt.is_integer:
        return DenseMatrix.from_values(
            rng.integers(-128, 128, size=(rows, cols)).astype(np.float32), fmt
        )
    return DenseMatrix.from_values(rng.standard_normal((rows, cols), dtype=np.float32), fmt)


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))
