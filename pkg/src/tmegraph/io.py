"""On-disk formats: raw images + sidecars, masks, CSVs, binary containers.

Every writer here is deterministic: JSON is emitted with sorted keys,
floats are formatted with repr (shortest round-trip), and no timestamps are
embedded. Reruns with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__

CONTAINER_MAGIC = b"TMGB"
CONTAINER_VERSION = 1


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def artifact_meta(seed, cfg=None) -> dict:
    return {"tool": f"tmegraph/{__version__}", "seed": seed,
            "config_hash": config_hash(cfg) if cfg is not None else None}


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# -- multiplex images: float32 LE raw planes + JSON sidecar ---------------------

def write_raw_image(base_path, image: np.ndarray, channel_names, meta=None):
    """image is (H, W, B); the .raw file stores B planes of H*W float32 LE."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    h, w, b = image.shape
    planes = np.ascontiguousarray(image.transpose(2, 0, 1), dtype="<f4")
    with open(base.with_suffix(".raw"), "wb") as f:
        f.write(planes.tobytes())
    sidecar = {"height": h, "width": w, "channels": b,
               "channel_names": list(channel_names),
               "dtype": "<f4", "layout": "planes"}
    if meta:
        sidecar["meta"] = meta
    write_json(base.with_suffix(".json"), sidecar)
    return base.with_suffix(".raw")


def read_raw_image(base_path):
    base = Path(base_path)
    side = read_json(base.with_suffix(".json"))
    h, w, b = side["height"], side["width"], side["channels"]
    planes = np.fromfile(base.with_suffix(".raw"), dtype="<f4").reshape(b, h, w)
    return planes.transpose(1, 2, 0), side["channel_names"]


# -- binary masks: 8-bit PNG ----------------------------------------------------

def write_mask_png(path, mask: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray((mask.astype(np.uint8) * 255), mode="L")
    img.save(path, format="PNG")
    return path


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


# -- CSV with a metadata comment line -------------------------------------------

def _fmt(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    if meta is not None:
        pairs = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
        buf.write(f"# {pairs}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    return path


def read_csv(path):
    """Returns (header, rows as list of str lists); skips comment lines."""
    with open(path, encoding="utf-8", newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.reader(lines)
    table = list(reader)
    return table[0], table[1:]


# -- binary container: versioned header + named arrays --------------------------

def write_container(path, arrays: dict, header: dict | None = None):
    """Single binary file: magic, version, JSON header, raw array payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(arrays.keys())
    specs = []
    payload = b""
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        specs.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "nbytes": len(raw)})
        payload += raw
    head = {"arrays": specs, "header": header or {}}
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(head_bytes)))
        f.write(head_bytes)
        f.write(payload)
    return path


def read_container(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"{path}: not a tmegraph container (magic {magic!r})")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        head = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in head["arrays"]:
            raw = f.read(spec["nbytes"])
            arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]))
            arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return arrays, head["header"]
