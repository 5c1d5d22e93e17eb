"""Image, raw-array and checkpoint file formats.

Checkpoints are a directory holding ``params.bin`` (every array as
little-endian float64, concatenated in manifest order) and
``manifest.json`` listing ``name``, ``shape``, byte ``offset`` and
``nbytes`` for each entry plus free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import InvalidShape, MissingEntry

CKPT_FORMAT = "mwgs-params-1"


def to_bytes8(img):
    return np.rint(255.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6 (RGB) or P5 (single channel) with 8-bit samples."""
    data = to_bytes8(img)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise InvalidShape(f"cannot write image of shape {data.shape} as PPM")
    h, w = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path):
    """Read a P5/P6 file written by :func:`write_ppm`; returns floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise InvalidShape(f"{path}: unsupported PNM variant {magic!r}/{maxval}")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    data = data.reshape(h, w, c) if c == 3 else data.reshape(h, w)
    return data.astype(np.float64) / 255.0


def write_png(path, img):
    from PIL import Image

    Image.fromarray(to_bytes8(img)).save(path)


def read_image(path):
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, img):
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_ppm(path, img)


def write_raw(path, arr):
    """Little-endian float64 rows plus a ``.json`` shape sidecar."""
    arr = np.asarray(arr, dtype="<f8", order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"shape": list(arr.shape), "dtype": "<f8"}))


def read_raw(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype="<f8").reshape(tuple(meta["shape"])).copy()


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_params(directory, params: dict, meta: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        b = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    (directory / "params.bin").write_bytes(b"".join(chunks))
    manifest = {"format": CKPT_FORMAT, "entries": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_params(directory):
    """Returns ``(params, meta)``."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise MissingEntry(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    blob = (directory / "params.bin").read_bytes()
    params = {}
    for e in manifest["entries"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        params[e["name"]] = arr.reshape(tuple(e["shape"])).astype(np.float64)
    return params, manifest.get("meta", {})
