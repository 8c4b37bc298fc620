"""Bit-exact little-endian tensor archive ("S24T" container).

Layout (all integers little-endian):

    magic       4 bytes  "S24T"
    version     u16      (currently 1)
    entry_count u32
    entries...

Each entry:

    name_len    u16, then name_len bytes UTF-8
    kind        u8   (0=dense, 1=sparse_nm, 2=scale_set, 3=mask)
    elem        u8   (0=fp32, 1=tf32, 2=fp16, 3=bf16, 4=int8)   [dense/sparse]
    acc         u8   (0=fp32, 1=fp16, 2=int32)                  [dense/sparse]
    rows        u32
    cols        u32  (original column count for sparse entries)
    n, m        u8 each (sparse entries only)
    granularity u8   (scale_set only: 0=per_tensor, 1=per_channel, 2=per_row)
    payload_len u64, then payload bytes

Payloads: dense values row-major in the element width (bf16 as raw upper-half
bits); sparse entries store values then metadata, each metadata row packed
into ceil(log2 m)-bit fields little-endian within bytes and padded to a byte
boundary; scale sets are float64; masks pack one bit per element, rows padded
to byte boundaries. See docs/format.md for a hex-dump walkthrough.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .calibration import Granularity, ScaleSet
from .codec import Mask, SparseNM
from .formats import AccType, DenseMatrix, ElemType, NMPattern, NumericFormat

MAGIC = b"S24T"
VERSION = 1

KIND_DENSE, KIND_SPARSE, KIND_SCALES, KIND_MASK = range(4)

_ELEM_CODES = {ElemType.FP32: 0, ElemType.TF32: 1, ElemType.FP16: 2, ElemType.BF16: 3, ElemType.INT8: 4}
_ACC_CODES = {AccType.FP32: 0, AccType.FP16: 1, AccType.INT32: 2}
_GRAN_CODES = {Granularity.PER_TENSOR: 0, Granularity.PER_CHANNEL: 1, Granularity.PER_ROW: 2}
_ELEM_BY_CODE = {v: k for k, v in _ELEM_CODES.items()}
_ACC_BY_CODE = {v: k for k, v in _ACC_CODES.items()}
_GRAN_BY_CODE = {v: k for k, v in _GRAN_CODES.items()}


class ArchiveError(ValueError):
    code = "archive_error"


class BadMagicError(ArchiveError):
    code = "bad_magic"


class VersionMismatchError(ArchiveError):
    code = "version_mismatch"


class TruncatedError(ArchiveError):
    code = "truncated"


class InvariantError(ArchiveError):
    code = "invariant_violation"


Entry = DenseMatrix | SparseNM | ScaleSet | Mask


@dataclass
class TensorArchive:
    entries: dict[str, Entry] = field(default_factory=dict)

    def add(self, name: str, entry: Entry) -> "TensorArchive":
        self.entries[name] = entry
        return self

    def __getitem__(self, name: str) -> Entry:
        return self.entries[name]


def _elem_dtype(elem: ElemType) -> np.dtype:
    if elem is ElemType.INT8:
        return np.dtype("<i1")
    if elem is ElemType.FP16:
        return np.dtype("<f2")
    if elem is ElemType.BF16:
        return np.dtype("<u2")
    return np.dtype("<f4")


def _encode_values(arr: np.ndarray, elem: ElemType) -> bytes:
    if elem is ElemType.INT8:
        return np.ascontiguousarray(arr, dtype="<i1").tobytes()
    if elem is ElemType.FP16:
        return np.ascontiguousarray(arr, dtype=np.float32).astype("<f2").tobytes()
    if elem is ElemType.BF16:
        bits = np.ascontiguousarray(arr, dtype=np.float32).view(np.uint32) >> 16
        return bits.astype("<u2").tobytes()
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _decode_values(raw: bytes, elem: ElemType, shape: tuple[int, int]) -> np.ndarray:
    flat = np.frombuffer(raw, dtype=_elem_dtype(elem))
    if flat.size != shape[0] * shape[1]:
        raise TruncatedError(f"payload holds {flat.size} values, expected {shape[0] * shape[1]}")
    if elem is ElemType.INT8:
        return flat.astype(np.int32).reshape(shape)
    if elem is ElemType.FP16:
        return flat.astype(np.float32).reshape(shape)
    if elem is ElemType.BF16:
        return (flat.astype(np.uint32) << 16).view(np.float32).reshape(shape)
    return flat.astype(np.float32).reshape(shape)


def pack_bit_fields(rows: np.ndarray, bits_per_field: int) -> bytes:
    """Pack each row's small integers into bits_per_field-bit fields,
    little-endian within bytes, each row padded to a byte boundary."""
    out = bytearray()
    for row in rows:
        acc = 0
        pos = 0
        for v in row:
            acc |= int(v) << pos
            pos += bits_per_field
        out += int(acc).to_bytes((pos + 7) // 8 if pos else 0, "little")
    return bytes(out)


def unpack_bit_fields(raw: bytes, n_rows: int, per_row: int, bits_per_field: int) -> np.ndarray:
    row_bytes = (per_row * bits_per_field + 7) // 8
    if len(raw) != n_rows * row_bytes:
        raise TruncatedError(f"bit payload is {len(raw)} bytes, expected {n_rows * row_bytes}")
    mask = (1 << bits_per_field) - 1
    out = np.empty((n_rows, per_row), dtype=np.uint8)
    for r in range(n_rows):
        acc = int.from_bytes(raw[r * row_bytes : (r + 1) * row_bytes], "little")
        for j in range(per_row):
            out[r, j] = (acc >> (j * bits_per_field)) & mask
    return out


def _entry_payload(entry: Entry) -> bytes:
    if isinstance(entry, DenseMatrix):
        return _encode_values(entry.data, entry.fmt.elem)
    if isinstance(entry, SparseNM):
        values = _encode_values(entry.values, entry.fmt.elem)
        meta = pack_bit_fields(entry.meta, entry.pattern.meta_bits)
        return values + meta
    if isinstance(entry, ScaleSet):
        return np.ascontiguousarray(entry.scales, dtype="<f8").tobytes()
    if isinstance(entry, Mask):
        return pack_bit_fields(entry.bits.astype(np.uint8), 1)
    raise InvariantError(f"unsupported entry type {type(entry).__name__}")


def write_archive(archive: TensorArchive, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(archive.entries)))
        for name, entry in archive.entries.items():
            payload = _entry_payload(entry)
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            if isinstance(entry, DenseMatrix):
                f.write(
                    struct.pack(
                        "<BBBII",
                        KIND_DENSE,
                        _ELEM_CODES[entry.fmt.elem],
                        _ACC_CODES[entry.fmt.acc],
                        entry.rows,
                        entry.cols,
                    )
                )
            elif isinstance(entry, SparseNM):
                f.write(
                    struct.pack(
                        "<BBBIIBB",
                        KIND_SPARSE,
                        _ELEM_CODES[entry.fmt.elem],
                        _ACC_CODES[entry.fmt.acc],
                        entry.rows,
                        entry.cols_orig,
                        entry.pattern.n,
                        entry.pattern.m,
                    )
                )
            elif isinstance(entry, ScaleSet):
                f.write(
                    struct.pack(
                        "<BBI", KIND_SCALES, _GRAN_CODES[entry.granularity], len(entry.scales)
                    )
                )
            elif isinstance(entry, Mask):
                f.write(struct.pack("<BII", KIND_MASK, entry.rows, entry.cols))
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(
                f"need {n} bytes at offset {self.pos}, only {len(self.raw) - self.pos} left"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_archive(path) -> TensorArchive:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise BadMagicError("bad magic (not an S24T archive)")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise VersionMismatchError(f"archive version {version}, reader supports {VERSION}")
    archive = TensorArchive()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (kind,) = r.unpack("<B")
        if kind == KIND_DENSE:
            elem_c, acc_c, rows, cols = r.unpack("<BBII")
            fmt = _lookup_format(elem_c, acc_c)
            (plen,) = r.unpack("<Q")
            data = _decode_values(r.take(plen), fmt.elem, (rows, cols))
            archive.add(name, DenseMatrix(data, fmt))
        elif kind == KIND_SPARSE:
            elem_c, acc_c, rows, cols, n, m = r.unpack("<BBIIBB")
            fmt = _lookup_format(elem_c, acc_c)
            try:
                pattern = NMPattern(n, m)
            except ValueError as exc:
                raise InvariantError(str(exc)) from exc
            if cols % m:
                raise InvariantError(f"group size {m} does not divide {cols} columns")
            kept = cols * n // m
            (plen,) = r.unpack("<Q")
            payload = r.take(plen)
            vbytes = rows * kept * _elem_dtype(fmt.elem).itemsize
            if plen < vbytes:
                raise TruncatedError("sparse payload shorter than its value block")
            values = _decode_values(payload[:vbytes], fmt.elem, (rows, kept))
            meta = unpack_bit_fields(payload[vbytes:], rows, kept, pattern.meta_bits)
            entry = SparseNM(cols, pattern, values, meta, fmt)
            try:
                entry.validate()
            except ValueError as exc:
                raise InvariantError(str(exc)) from exc
            archive.add(name, entry)
        elif kind == KIND_SCALES:
            gran_c, n_scales = r.unpack("<BI")
            if gran_c not in _GRAN_BY_CODE:
                raise InvariantError(f"unknown granularity code {gran_c}")
            (plen,) = r.unpack("<Q")
            scales = np.frombuffer(r.take(plen), dtype="<f8")
            if len(scales) != n_scales:
                raise TruncatedError(f"{len(scales)} scales in payload, header says {n_scales}")
            try:
                archive.add(name, ScaleSet(_GRAN_BY_CODE[gran_c], scales.astype(np.float64)))
            except ValueError as exc:
                raise InvariantError(str(exc)) from exc
        elif kind == KIND_MASK:
            rows, cols = r.unpack("<II")
            (plen,) = r.unpack("<Q")
            bits = unpack_bit_fields(r.take(plen), rows, cols, 1)
            archive.add(name, Mask(bits.astype(bool)))
        else:
            raise InvariantError(f"unknown entry kind {kind}")
    return archive


def _lookup_format(elem_c: int, acc_c: int) -> NumericFormat:
    if elem_c not in _ELEM_BY_CODE or acc_c not in _ACC_BY_CODE:
        raise InvariantError(f"unknown format codes elem={elem_c} acc={acc_c}")
    try:
        return NumericFormat(_ELEM_BY_CODE[elem_c], _ACC_BY_CODE[acc_c])
    except ValueError as exc:
        raise InvariantError(str(exc)) from exc
