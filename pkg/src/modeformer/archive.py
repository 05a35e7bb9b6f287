"""Byte-exact persistence: trajectory archives, checkpoints, CSV, PGM.

Trajectory archive layout (normative):

    JSON header, utf-8, keys sorted, containing "magic": "PDEARCH1",
    the trajectory spec fields, caption, and the value shape
    b"\\n\\x00"
    payload: float32, little-endian, C (row-major) order

Checkpoint layout:

    JSON header, utf-8, keys sorted: "magic": "MODELCKPT1", free-form
    "meta" (config, step, rng state, ...), "shapes": {name: [...]}
    b"\\n\\x00"
    for each name in ascending order:
        u32 LE  name byte length
        name    utf-8
        u64 LE  payload byte length
        payload float64 little-endian C-order

Writes go through a temp file + os.replace, so a crash never leaves a torn
file at the target path. Metrics tables are RFC-4180 CSV (CRLF line ends);
floats are rendered with repr() so parsing them back is exact.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from typing import Iterable, Sequence

import numpy as np

from .datagen import PdeSpec, Trajectory

__all__ = [
    "ArchiveError",
    "write_archive",
    "read_archive",
    "save_checkpoint",
    "load_checkpoint",
    "write_csv",
    "read_csv",
    "write_pgm",
]

_MAGIC_ARCHIVE = "PDEARCH1"
_MAGIC_CKPT = "MODELCKPT1"
_SEP = b"\n\x00"


class ArchiveError(ValueError):
    """Malformed, truncated, or wrong-version container."""


def _atomic_write(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _split_header(buf: bytes, path: str) -> tuple[dict, bytes]:
    cut = buf.find(_SEP)
    if cut < 0:
        raise ArchiveError(f"{path}: no header separator found")
    try:
        header = json.loads(buf[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: header is not valid JSON: {exc}") from None
    return header, buf[cut + len(_SEP):]


# --------------------------------------------------------------------------
# trajectory archives

def write_archive(path: str, traj: Trajectory) -> None:
    values = np.asarray(traj.values, dtype=np.float64)
    if values.size == 0:
        raise ArchiveError("refusing to write an archive with a zero extent")
    spec = traj.spec
    header = {
        "magic": _MAGIC_ARCHIVE,
        "dtype": "f32le",
        "order": "C",
        "shape": list(values.shape),
        "family": spec.family,
        "coefficients": {k: float(v) for k, v in sorted(spec.coefficients.items())},
        "extents": list(spec.extents),
        "lengths": [float(x) for x in spec.lengths],
        "n_steps": spec.n_steps,
        "dt": spec.dt,
        "seed": spec.seed,
        "ic_modes": spec.ic_modes,
        "ic_decay": spec.ic_decay,
        "substeps": spec.substeps,
        "caption": traj.caption,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = values.astype("<f4").tobytes(order="C")
    _atomic_write(path, head + _SEP + payload)


def read_archive(path: str) -> Trajectory:
    with open(path, "rb") as fh:
        buf = fh.read()
    header, payload = _split_header(buf, path)
    if header.get("magic") != _MAGIC_ARCHIVE:
        raise ArchiveError(f"{path}: bad magic {header.get('magic')!r}")
    shape = tuple(int(n) for n in header["shape"])
    if any(n <= 0 for n in shape):
        raise ArchiveError(f"{path}: zero extent in shape {shape}")
    expect = int(np.prod(shape)) * 4
    if len(payload) < expect:
        raise ArchiveError(f"{path}: truncated payload ({len(payload)} < {expect} bytes)")
    if len(payload) > expect:
        raise ArchiveError(f"{path}: {len(payload) - expect} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    spec = PdeSpec(
        family=header["family"],
        coefficients={k: float(v) for k, v in header["coefficients"].items()},
        extents=tuple(int(n) for n in header["extents"]),
        lengths=tuple(float(x) for x in header["lengths"]),
        n_steps=int(header["n_steps"]),
        dt=float(header["dt"]),
        seed=int(header["seed"]),
        ic_modes=int(header["ic_modes"]),
        ic_decay=float(header["ic_decay"]),
        substeps=header.get("substeps"),
    )
    return Trajectory(spec, values, header["caption"])


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(arrays)
    shapes = {}
    chunks = []
    for name in names:
        arr = np.asarray(arrays[name], dtype=np.float64)  # keeps 0-d shape ()
        shapes[name] = list(arr.shape)
        raw = arr.astype("<f8").tobytes(order="C")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(raw)) + raw)
    header = {"magic": _MAGIC_CKPT, "meta": meta, "shapes": shapes}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(path, head + _SEP + b"".join(chunks))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    header, payload = _split_header(buf, path)
    if header.get("magic") != _MAGIC_CKPT:
        raise ArchiveError(f"{path}: bad magic {header.get('magic')!r}")
    shapes = header["shapes"]
    arrays: dict[str, np.ndarray] = {}
    off = 0
    while off < len(payload):
        if off + 4 > len(payload):
            raise ArchiveError(f"{path}: truncated blob name length")
        (nlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        name = payload[off: off + nlen].decode("utf-8")
        off += nlen
        if off + 8 > len(payload):
            raise ArchiveError(f"{path}: truncated blob size for {name!r}")
        (blen,) = struct.unpack_from("<Q", payload, off)
        off += 8
        if off + blen > len(payload):
            raise ArchiveError(f"{path}: truncated payload for {name!r}")
        if name not in shapes:
            raise ArchiveError(f"{path}: blob {name!r} missing from header shapes")
        shape = tuple(int(n) for n in shapes[name])
        arr = np.frombuffer(payload[off: off + blen], dtype="<f8")
        if arr.size != int(np.prod(shape)):
            raise ArchiveError(f"{path}: blob {name!r} size does not match shape {shape}")
        arrays[name] = arr.reshape(shape).copy()
        off += blen
    missing = set(shapes) - set(arrays)
    if missing:
        raise ArchiveError(f"{path}: blobs missing for {sorted(missing)}")
    return arrays, header["meta"]


# --------------------------------------------------------------------------
# CSV + PGM

def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ArchiveError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_pgm(path: str, image: np.ndarray, lo: float | None = None,
              hi: float | None = None) -> None:
    """Grayscale P5 frame; values are min-max scaled to 0..255 by default."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ArchiveError(f"PGM wants a 2-D array, got {img.shape}")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    span = hi - lo
    if span <= 0:
        scaled = np.zeros_like(img)
    else:
        scaled = np.clip((img - lo) / span, 0.0, 1.0)
    data = (scaled * 255.0).round().astype(np.uint8)
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, head + data.tobytes(order="C"))
