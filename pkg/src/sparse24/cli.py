"""Command-line surface. Data/CSV goes to stdout, diagnostics to stderr;
usage errors exit 2, data errors exit 1."""

from __future__ import annotations

import sys

import click
import numpy as np

from . import archive as ar
from .calibration import CalibMethod, Granularity, calibrate
from .codec import ConformanceError, Mask, SparseNM, apply_mask, check_conformance, compress, decompress
from .formats import (
    ALL_FORMATS,
    FP32,
    DenseMatrix,
    FormatError,
    GemmShape,
    NMPattern,
    ShapeError,
)
from .kernels import bench as run_bench
from .kernels import spmm
from .pruning import (
    SearchBudget,
    find_permutation,
    find_transposable_mask,
    permute_columns,
    prune_magnitude,
)
from .workflow import TinyNet, make_blobs, parse_recipe, run_recipe, RecipeError

_FORMATS = {str(f): f for f in ALL_FORMATS}
_FORMATS.update({f.elem.value: f for f in ALL_FORMATS if f.acc.value != "fp16"})

DATA_ERRORS = (
    ConformanceError,
    FormatError,
    ShapeError,
    ar.ArchiveError,
    RecipeError,
    KeyError,
    ValueError,
    OSError,
)


def _fail(exc: BaseException) -> None:
    code = getattr(exc, "code", None)
    prefix = f"error[{code}]" if code else "error"
    click.echo(f"{prefix}: {exc}", err=True)
    sys.exit(1)


def _load_entry(path: str, name: str | None, want):
    arch = ar.read_archive(path)
    if name is None:
        matching = [k for k, v in arch.entries.items() if isinstance(v, want)]
        if len(matching) != 1:
            raise ValueError(
                f"{path}: need exactly one {want.__name__} entry or an explicit --entry "
                f"(found {len(matching)})"
            )
        name = matching[0]
    entry = arch.entries[name]
    if not isinstance(entry, want):
        raise ValueError(f"{path}:{name} is {type(entry).__name__}, expected {want.__name__}")
    return name, entry


@click.group()
def main():
    """Tools for N:M structured sparsity: compression, sparse GEMM, pruning,
    calibration, benchmarking, and a train/prune/retrain demo."""


@main.command("compress")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
@click.option("--pattern", default="2:4", show_default=True)
@click.option("--entry", default=None, help="Entry name (defaults to the only dense entry).")
def cmd_compress(src, dst, pattern, entry):
    """Compress a conforming dense entry into value+metadata form."""
    try:
        p = NMPattern.parse(pattern)
        name, dense = _load_entry(src, entry, DenseMatrix)
        ar.write_archive(ar.TensorArchive().add(name, compress(dense, p)), dst)
    except DATA_ERRORS as exc:
        _fail(exc)
    click.echo(f"compressed {name} -> {dst}", err=True)


@main.command("decompress")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
@click.option("--entry", default=None)
def cmd_decompress(src, dst, entry):
    """Expand a compressed entry back to its dense form."""
    try:
        name, sp = _load_entry(src, entry, SparseNM)
        ar.write_archive(ar.TensorArchive().add(name, decompress(sp)), dst)
    except DATA_ERRORS as exc:
        _fail(exc)
    click.echo(f"decompressed {name} -> {dst}", err=True)


@main.command("check")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.option("--pattern", default="2:4", show_default=True)
@click.option("--entry", default=None)
def cmd_check(src, pattern, entry):
    """Verify that a dense entry satisfies the N:M constraint."""
    try:
        p = NMPattern.parse(pattern)
        name, dense = _load_entry(src, entry, DenseMatrix)
        check_conformance(dense, p, raise_on_fail=True)
    except DATA_ERRORS as exc:
        _fail(exc)
    click.echo(f"{name}: conforms to {p}")


@main.command("prune")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
@click.option("--pattern", default="2:4", show_default=True)
@click.option("--permute", type=click.Choice(["off", "greedy", "exhaustive"]), default="off")
@click.option("--transposable", type=click.Choice(["off", "greedy", "exhaustive"]), default="off")
@click.option("--entry", default=None)
@click.option("--seed", default=0, show_default=True)
def cmd_prune(src, dst, pattern, permute, transposable, entry, seed):
    """Magnitude-prune a dense entry; optionally permute columns first or
    enforce the constraint along both rows and columns."""
    try:
        p = NMPattern.parse(pattern)
        name, dense = _load_entry(src, entry, DenseMatrix)
        out = ar.TensorArchive()
        if transposable != "off":
            if p != NMPattern(2, 4):
                raise ValueError("row+column masks support the 2:4 pattern only")
            result = find_transposable_mask(dense, mode=transposable)
        elif permute != "off":
            budget = SearchBudget(mode=permute, seed=seed)
            perm, result = find_permutation(dense, p, budget)
            dense = permute_columns(dense, perm)
            out.add(
                f"{name}.permutation",
                DenseMatrix(perm.perm.astype(np.float32)[None, :], FP32),
            )
        else:
            result = prune_magnitude(dense, p)
        out.add(name, apply_mask(dense, result.mask))
        out.add(f"{name}.mask", result.mask)
        ar.write_archive(out, dst)
    except DATA_ERRORS as exc:
        _fail(exc)
    click.echo(
        f"pruned {name}: retained |w| = {result.retained_magnitude:.4f}, "
        f"lost |w| = {result.lost_magnitude:.4f}",
        err=True,
    )


@main.command("spmm")
@click.argument("a_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("b_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("c_path", type=click.Path(dir_okay=False))
@click.option("--a-entry", default=None)
@click.option("--b-entry", default=None)
def cmd_spmm(a_path, b_path, c_path, a_entry, b_entry):
    """Multiply a compressed operand with a dense one."""
    try:
        name_a, sp = _load_entry(a_path, a_entry, SparseNM)
        _, dense = _load_entry(b_path, b_entry, DenseMatrix)
        result = spmm(sp, dense)
        # accumulator values can exceed the input element range, so the
        # on-disk result is always FP32
        out = DenseMatrix(result.data.astype(np.float32), FP32)
        ar.write_archive(ar.TensorArchive().add("c", out), c_path)
    except DATA_ERRORS as exc:
        _fail(exc)
    click.echo(f"spmm {name_a}: wrote {c_path}", err=True)


@main.command("calibrate")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
@click.option("--method", default="max", show_default=True, help="max | entropy | percentile=P")
@click.option(
    "--granularity",
    type=click.Choice([g.value for g in Granularity]),
    default="per_tensor",
    show_default=True,
)
def cmd_calibrate(src, dst, method, granularity):
    """Compute quantization scales from every dense entry in an archive."""
    try:
        arch = ar.read_archive(src)
        samples = [v for v in arch.entries.values() if isinstance(v, DenseMatrix)]
        scales = calibrate(samples, CalibMethod.parse(method), Granularity(granularity))
        ar.write_archive(ar.TensorArchive().add("scales", scales), dst)
    except DATA_ERRORS as exc:
        _fail(exc)
    for s in scales.scales:
        click.echo(f"{s!r}")


@main.command("bench")
@click.option(
    "--sizes",
    default="128x128x64,128x128x256,128x128x1024",
    show_default=True,
    help="Comma-separated MxNxK triples.",
)
@click.option("--format", "fmt_name", default="int8", show_default=True)
@click.option("--pattern", default="2:4", show_default=True)
@click.option("--repeats", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_bench(sizes, fmt_name, pattern, repeats, seed):
    """Wall-clock sparse-vs-dense comparison; CSV on stdout."""
    try:
        fmt = _FORMATS[fmt_name]
        shapes = []
        for part in sizes.split(","):
            m, n, k = (int(v) for v in part.lower().split("x"))
            shapes.append(GemmShape(m, n, k))
        report = run_bench(shapes, fmt, repeats=repeats, pattern=NMPattern.parse(pattern), seed=seed)
    except DATA_ERRORS as exc:
        _fail(exc)
    click.echo(report.to_csv(), nl=False)


@main.command("demo-workflow")
@click.option("--recipe", "recipe_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--features", default=64, show_default=True)
@click.option("--classes", default=4, show_default=True)
@click.option("--samples", default=512, show_default=True)
@click.option("--hidden", default="64", show_default=True, help="Comma-separated hidden sizes.")
@click.option("--seed", default=0, show_default=True)
def cmd_demo_workflow(recipe_path, features, classes, samples, hidden, seed):
    """Run a recipe end to end on the synthetic classification task."""
    try:
        with open(recipe_path) as f:
            recipe = parse_recipe(f.read())
        data = make_blobs(samples=samples, features=features, classes=classes, seed=seed)
        sizes = [features] + [int(h) for h in hidden.split(",") if h.strip()] + [classes]
        net = TinyNet.init(sizes, seed=seed)
        report = run_recipe(recipe, net, data)
    except DATA_ERRORS as exc:
        _fail(exc)
    for phase in report["phases"]:
        metrics = {k: v for k, v in phase.items() if k not in ("name", "kind", "weight_scales")}
        rendered = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items())
        click.echo(f"{phase['name']} ({phase['kind']}): {rendered}")
    click.echo(f"final_accuracy={report['final_accuracy']:.4f}")


if __name__ == "__main__":
    main()
