"""On-disk formats: activation dumps, calibration caches, JSON reports.

Activation dump (``.aqd``), little-endian throughout::

    b"AQD1" | u32 rank | rank x u64 dims | u8 dtype (0 = float32) | payload

Dumps live at ``<root>/<layer>/<batch index>.aqd``.

Calibration cache: a ``PTQCALIB v1`` header line, then one
``name<TAB>scalehex<TAB>bits<TAB>method<TAB>p`` line per entry, where
``scalehex`` is the 16 hex digits of the big-endian IEEE-754 double and
``p`` is ``-`` for methods without a cut-off.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .calibrators import METHOD_TAGS, CalibMethod, CalibResult
from .quant import MAX_BITS, MIN_BITS

DUMP_MAGIC = b"AQD1"
DUMP_SUFFIX = ".aqd"
DTYPE_F32 = 0
CACHE_HEADER = "PTQCALIB v1"
REPORT_SCHEMA = 1


class FormatError(ValueError):
    pass


# -- activation dumps -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActivationDump:
    layer: str
    data: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ActivationDump):
            return NotImplemented
        return (
            self.layer == other.layer
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def encode_dump(data) -> bytes:
    arr = np.asarray(data)
    with np.errstate(over="ignore"):
        f32 = arr.astype("<f4")
    if not np.all(np.isfinite(f32)):
        raise FormatError("non-finite payload")
    head = DUMP_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<B", DTYPE_F32) + f32.tobytes(order="C")


def decode_dump(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != DUMP_MAGIC:
        raise FormatError("bad magic")
    if len(buf) < 8:
        raise FormatError("truncated")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off + 1:
        raise FormatError("truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    (dtype,) = struct.unpack_from("<B", buf, off)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    count = math.prod(shape)
    payload = buf[off + 1 :]
    if len(payload) < 4 * count:
        raise FormatError("truncated")
    if len(payload) > 4 * count:
        raise FormatError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite payload")
    return arr.astype(np.float32)


def write_dump(path, dump: ActivationDump) -> None:
    Path(path).write_bytes(encode_dump(dump.data))


def read_dump(path, layer: str | None = None) -> ActivationDump:
    path = Path(path)
    return ActivationDump(layer if layer is not None else path.parent.name, decode_dump(path.read_bytes()))


def dump_path(root, layer: str, batch: int) -> Path:
    return Path(root) / layer / f"{batch}{DUMP_SUFFIX}"


def save_dump(root, layer: str, batch: int, data) -> Path:
    """Write ``data`` as batch ``batch`` of ``layer`` under ``root``."""
    if not layer or "/" in layer or os.sep in layer or layer in (".", ".."):
        raise FormatError(f"invalid layer name {layer!r}")
    path = dump_path(root, layer, batch)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dump(path, ActivationDump(layer, np.asarray(data)))
    return path


def list_dumps(root) -> dict[str, list[Path]]:
    """Layer name -> dump files in batch order. Layers are sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dump directory {root} does not exist")
    out = {}
    for layer_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = []
        for f in layer_dir.glob(f"*{DUMP_SUFFIX}"):
            try:
                files.append((int(f.stem), f))
            except ValueError:
                raise FormatError(f"layer {layer_dir.name}: dump file {f.name} is not named <batch index>{DUMP_SUFFIX}")
        if files:
            out[layer_dir.name] = [f for _, f in sorted(files)]
    if not out:
        raise FormatError(f"no dumps found under {root}")
    return out


def iter_layer(files: list[Path]) -> Iterator[np.ndarray]:
    for f in files:
        yield decode_dump(f.read_bytes())


# -- calibration cache ------------------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    name: str
    scale: float
    bits: int
    method: str
    p: float | None = None

    @classmethod
    def from_result(cls, name: str, result: CalibResult) -> CacheEntry:
        return cls(name, float(result.scale), result.bits, result.method.kind, result.method.p)


@dataclass(frozen=True)
class CalibrationCache:
    entries: tuple = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for e in entries:
            if e.name in seen:
                raise FormatError(f"duplicate layer name {e.name!r}")
            seen.add(e.name)

    def __getitem__(self, name: str) -> CacheEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


def scale_to_hex(x: float) -> str:
    return struct.pack(">d", x).hex()


def hex_to_scale(s: str) -> float:
    if len(s) != 16 or s != s.lower():
        raise ValueError(f"scale must be 16 lowercase hex digits, got {s!r}")
    return struct.unpack(">d", bytes.fromhex(s))[0]


def serialize_cache(cache: CalibrationCache) -> str:
    lines = [CACHE_HEADER]
    for e in cache.entries:
        if any(ch in e.name for ch in "\t\r\n") or not e.name:
            raise FormatError(f"layer name {e.name!r} cannot be stored in a cache")
        p = "-" if e.p is None else repr(float(e.p))
        lines.append(f"{e.name}\t{scale_to_hex(e.scale)}\t{e.bits}\t{e.method}\t{p}")
    return "\n".join(lines) + "\n"


def parse_cache(text: str) -> CalibrationCache:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != CACHE_HEADER:
        raise FormatError(f"line 1: expected header {CACHE_HEADER!r}")
    entries, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"line {lineno}: expected 5 tab-separated fields, got {len(fields)}")
        name, shex, bits, method, p = fields
        try:
            scale = hex_to_scale(shex)
            bits = int(bits)
            pval = None if p == "-" else float(p)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not name:
            raise FormatError(f"line {lineno}: empty layer name")
        if not (math.isfinite(scale) and scale > 0):
            raise FormatError(f"line {lineno}: scale must be positive and finite")
        if not (MIN_BITS <= bits <= MAX_BITS):
            raise FormatError(f"line {lineno}: bits out of range")
        if method not in METHOD_TAGS:
            raise FormatError(f"line {lineno}: unknown method {method!r}")
        if (pval is None) != (method not in ("percentile", "clipped-mse")):
            raise FormatError(f"line {lineno}: p field does not match method {method!r}")
        if name in seen:
            raise FormatError(f"line {lineno}: duplicate layer name {name!r}")
        seen.add(name)
        entries.append(CacheEntry(name, scale, bits, method, pval))
    return CalibrationCache(tuple(entries))


def write_cache(path, cache: CalibrationCache) -> None:
    Path(path).write_bytes(serialize_cache(cache).encode("utf-8"))


def read_cache(path) -> CalibrationCache:
    return parse_cache(Path(path).read_bytes().decode("utf-8"))


# -- reports ----------------------------------------------------------------------------


def calib_entry(result: CalibResult) -> dict:
    return {
        "scale": float(result.scale),
        "scale_hex": scale_to_hex(result.scale),
        "bits": result.bits,
        "method": result.method.kind,
        "p": result.method.p,
    }


def report_to_dict(report) -> dict:
    """JSON-ready dict of a ``SearchReport``."""
    return {
        "schema_version": REPORT_SCHEMA,
        "kind": "stablequant",
        "act_bits": report.act_bits,
        "weight_bits": report.weight_bits,
        "gamma": report.gamma,
        "baseline_error": report.baseline_error,
        "deltas": dict(report.deltas),
        "clip_set": list(report.clip_set),
        "grid": list(report.grid),
        "scores": list(report.scores),
        "p_opt": report.p_opt,
        "per_layer": {name: calib_entry(r) for name, r in report.activations.items()},
        "weights": {name: calib_entry(r) for name, r in report.weights.items()},
        "final_error": report.final_error,
    }


def _result_from_entry(entry: dict) -> CalibResult:
    scale = hex_to_scale(entry["scale_hex"])
    if scale != entry["scale"]:
        raise FormatError("scale and scale_hex disagree")
    return CalibResult(scale, CalibMethod(entry["method"], entry["p"]), int(entry["bits"]), chosen_bin=-1)


def report_from_dict(doc: dict):
    from .search import SearchReport

    if doc.get("schema_version") != REPORT_SCHEMA or doc.get("kind") != "stablequant":
        raise FormatError("not a stablequant report (schema_version/kind mismatch)")
    try:
        return SearchReport(
            clip_set=list(doc["clip_set"]),
            grid=[float(p) for p in doc["grid"]],
            scores=[float(y) for y in doc["scores"]],
            p_opt=float(doc["p_opt"]),
            activations={k: _result_from_entry(v) for k, v in doc["per_layer"].items()},
            weights={k: _result_from_entry(v) for k, v in doc["weights"].items()},
            baseline_error=float(doc["baseline_error"]),
            final_error=float(doc["final_error"]),
            act_bits=int(doc["act_bits"]),
            weight_bits=int(doc["weight_bits"]),
            gamma=float(doc["gamma"]),
            deltas={k: float(v) for k, v in doc["deltas"].items()},
        )
    except KeyError as exc:
        raise FormatError(f"report is missing field {exc}") from None


def dumps_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def write_report(path, report) -> None:
    doc = report if isinstance(report, dict) else report_to_dict(report)
    Path(path).write_text(dumps_json(doc), encoding="utf-8")


def read_report(path):
    return report_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
