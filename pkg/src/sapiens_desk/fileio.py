"""On-disk formats: PFM float maps, PNG images and masks, keypoint text
files, JSON-line manifests, delimited metric tables, and the binary
checkpoint container.

Everything written here is byte-deterministic for fixed inputs: fixed key
order in manifests, shortest-roundtrip float formatting in text files, and
little-endian fixed-width fields in checkpoints.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptCheckpointError, IOFailureError

__all__ = [
    "read_pfm", "write_pfm", "read_image", "write_image", "read_mask",
    "write_mask", "read_keypoints", "write_keypoints",
    "read_scored_keypoints", "write_scored_keypoints",
    "ManifestRecord", "read_manifest", "write_manifest",
    "write_csv", "read_csv", "parse_kv_text", "format_kv_text",
    "Checkpoint", "save_checkpoint", "load_checkpoint", "ensure_fresh",
]


def ensure_fresh(path: str | Path, overwrite: bool) -> Path:
    """Refuse to reuse an existing output path unless overwrite is set."""
    p = Path(path)
    if p.exists() and not overwrite:
        raise IOFailureError(f"{p} already exists; pass overwrite to replace it")
    return p


# -- PFM float maps ------------------------------------------------------------

def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Store a [H,W] or [H,W,3] float map, little-endian, rows bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise IOFailureError(f"PFM wants HxW or HxWx3, got {data.shape}")
    h, w = data.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(header + b"\n")
            f.write(f"{w} {h}\n".encode())
            f.write(b"-1.0\n")  # negative scale marks little-endian payload
            f.write(np.flipud(data).astype("<f4").tobytes())
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_pfm(path: str | Path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise IOFailureError(f"{path}: not a PFM file")
    channels = 3 if parts[0] == b"PF" else 1
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dt = "<f4" if scale < 0 else ">f4"
    flat = np.frombuffer(parts[3], dtype=dt, count=h * w * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(flat.reshape(shape)).astype(np.float32)


# -- PNG images and masks --------------------------------------------------------

def write_image(path: str | Path, img: np.ndarray) -> None:
    """Float [0,1] HxWx3 to 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    return arr / 255.0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise IOFailureError("mask ids must fit in a byte")
    try:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.int64)
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e


# -- keypoint text files ----------------------------------------------------------

def write_keypoints(path: str | Path, coords: np.ndarray, vis: np.ndarray) -> None:
    """One "x y visibility" row per keypoint."""
    lines = [f"{repr(float(x))} {repr(float(y))} {int(v)}"
             for (x, y), v in zip(np.asarray(coords), np.asarray(vis))]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_keypoints(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    coords = np.array([[float(r[0]), float(r[1])] for r in rows], dtype=np.float64)
    vis = np.array([int(r[2]) for r in rows], dtype=np.int64)
    return coords, vis


def write_scored_keypoints(path: str | Path, coords: np.ndarray,
                           scores: np.ndarray) -> None:
    """Predicted keypoints: "x y score" rows with a float confidence."""
    lines = [f"{repr(float(x))} {repr(float(y))} {repr(float(s))}"
             for (x, y), s in zip(np.asarray(coords), np.asarray(scores))]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_scored_keypoints(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    coords = np.array([[float(r[0]), float(r[1])] for r in rows], dtype=np.float64)
    scores = np.array([float(r[2]) for r in rows], dtype=np.float64)
    return coords, scores


# -- manifests ---------------------------------------------------------------------

@dataclass
class ManifestRecord:
    """One sample: image path, size, person boxes, and label-file paths.

    Paths are relative to the manifest's own directory. The keypoints file,
    when present, annotates persons[0] (the front-most figure).
    """
    id: str
    image: str
    width: int
    height: int
    persons: list = field(default_factory=list)  # {"box": [x, y, w, h], "score": s}
    keypoints: str | None = None
    mask: str | None = None
    depth: str | None = None
    normal: str | None = None


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    try:
        with open(path, "w") as f:
            for rec in records:
                f.write(json.dumps(asdict(rec), sort_keys=True,
                                   separators=(",", ":")) + "\n")
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    return [ManifestRecord(**json.loads(ln)) for ln in lines if ln.strip()]


# -- delimited tables ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, header: list[str], rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    if not rows:
        raise IOFailureError(f"{path}: empty table")
    return rows[0], rows[1:]


# -- flat key=value text -------------------------------------------------------------

def format_kv_text(pairs: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(pairs.items()))


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln in text.splitlines():
        stripped = ln.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CorruptCheckpointError(f"bad key=value line: {ln!r}")
        k, v = stripped.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- checkpoints ----------------------------------------------------------------------

_MAGIC = b"SAPD"
_VERSION = 1


@dataclass
class Checkpoint:
    """Named tensors plus a flat text config describing what they are."""
    config: dict[str, str]
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Binary layout, all integers little-endian u32 unless noted:
    magic "SAPD", version, config-blob length + UTF-8 blob, tensor count,
    then per tensor: name length + name, rank, extents, float32 payload."""
    blob = format_kv_text(ckpt.config).encode()
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(ckpt.tensors)))
            for name, arr in ckpt.tensors.items():
                nb = name.encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                arr = np.asarray(arr)
                f.write(struct.pack("<I", arr.ndim))
                for extent in arr.shape:
                    f.write(struct.pack("<I", extent))
                f.write(arr.astype("<f4", copy=False).tobytes())
    except OSError as e:
        raise IOFailureError(f"writing {path}: {e}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IOFailureError(f"reading {path}: {e}") from e
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpointError(f"{path}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != _MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version = u32()
    if version != _VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    config = parse_kv_text(bytes(take(u32())).decode())
    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode()
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if pos != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(config, tensors)
