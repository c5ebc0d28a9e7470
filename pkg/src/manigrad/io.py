"""On-disk formats: NTF tensors, PGM heatmaps, CSV tables, MGM model files.

NTF layout::

    b"NTF1\\n" + json({"dtype": "f64", "shape": [...]}) + b"\\n" + little-endian f64 payload

MGM layout::

    json({"formatVersion", "layerSpecs", "tensorIndex", ...}) + b"\\n" + blobs

where ``tensorIndex`` lists ``{name, shape, byteOffset, byteLength}`` with
offsets counted from the first byte after the manifest newline.
"""

from __future__ import annotations

import csv
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, FormatVersionError

NTF_MAGIC = b"NTF1\n"
MGM_FORMAT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _check_shape(shape):
    if len(shape) == 0 or any((not isinstance(s, int)) or s <= 0 for s in shape):
        raise FormatError(f"tensor shape must be a non-empty list of positive extents, got {list(shape)}")


def ntf_encode(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    shape = [int(s) for s in arr.shape]
    _check_shape(shape)
    header = json.dumps({"dtype": "f64", "shape": shape}, separators=(",", ":")).encode()
    return NTF_MAGIC + header + b"\n" + arr.astype("<f8").tobytes(order="C")


def ntf_decode(payload: bytes, name="<bytes>") -> np.ndarray:
    if not payload.startswith(NTF_MAGIC):
        raise FormatError(f"{name}: missing NTF1 magic")
    end = payload.find(b"\n", len(NTF_MAGIC))
    if end < 0:
        raise FormatError(f"{name}: unterminated NTF header")
    try:
        header = json.loads(payload[len(NTF_MAGIC):end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: bad NTF header: {exc}") from None
    if header.get("dtype") != "f64":
        raise FormatError(f"{name}: unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list):
        raise FormatError(f"{name}: header has no shape")
    _check_shape(shape)
    body = payload[end + 1:]
    expected = 8 * int(np.prod(shape))
    if len(body) != expected:
        raise FormatError(f"{name}: payload is {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)


def ntf_write(path, array) -> None:
    atomic_write_bytes(path, ntf_encode(array))


def ntf_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return ntf_decode(fh.read(), name=str(path))


def pgm_encode(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {list(img.shape)}")
    pixels = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def pgm_write(path, image) -> None:
    """Write a [0, 1] image as binary 8-bit PGM."""
    atomic_write_bytes(path, pgm_encode(image))


def pgm_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise FormatError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end():]
    if len(body) < w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    pix = np.frombuffer(body[: w * h], dtype=np.uint8)
    return pix.reshape(h, w).astype(np.float64) / 255.0


def csv_append(path, row: dict, header) -> None:
    """Append ``row`` to a CSV file, writing ``header`` first if the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(row)


def csv_write(path, rows, header) -> None:
    import io as _io

    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode())


def csv_read(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mgm_encode(layer_specs, tensors: dict, meta: dict | None = None) -> bytes:
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        blob = arr.astype("<f8").tobytes(order="C")
        index.append({"name": name, "shape": [int(s) for s in arr.shape],
                      "byteOffset": offset, "byteLength": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"formatVersion": MGM_FORMAT_VERSION, "layerSpecs": layer_specs, "tensorIndex": index}
    if meta:
        manifest["meta"] = meta
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return head + b"\n" + b"".join(blobs)


def mgm_decode(payload: bytes, name="<bytes>"):
    end = payload.find(b"\n")
    if end < 0:
        raise FormatError(f"{name}: unterminated MGM manifest")
    try:
        manifest = json.loads(payload[:end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: bad MGM manifest: {exc}") from None
    version = manifest.get("formatVersion")
    if version != MGM_FORMAT_VERSION:
        raise FormatVersionError(f"{name}: formatVersion {version!r}, expected {MGM_FORMAT_VERSION}")
    body = payload[end + 1:]
    tensors = {}
    for entry in manifest["tensorIndex"]:
        lo, n = entry["byteOffset"], entry["byteLength"]
        if lo + n > len(body) or n != 8 * int(np.prod(entry["shape"])):
            raise FormatError(f"{name}: tensor {entry['name']!r} overruns the payload")
        arr = np.frombuffer(body[lo:lo + n], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return manifest, tensors


def mgm_write(path, layer_specs, tensors, meta=None) -> None:
    atomic_write_bytes(path, mgm_encode(layer_specs, tensors, meta))


def mgm_read(path):
    with open(path, "rb") as fh:
        return mgm_decode(fh.read(), name=str(path))
