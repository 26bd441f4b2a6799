"""Synthetic video generation, checkpoints, and metrics logs.

Checkpoints are a directory holding a JSON manifest plus a raw binary
payload of little-endian float64 arrays in manifest order, with a sha256
over the payload. Metrics are append-only JSONL, one object per step.
All formats round-trip losslessly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

MOTION_CLASSES = 8
STATIC_LABEL = 8  # sentinel class for the zero-velocity arm


class IntegrityError(IOError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    label: int = None
    dense_target: np.ndarray = None  # (T, H, W) distance-to-nearest-shape
    provenance: dict = field(default_factory=dict)


def motion_octant(vx: float, vy: float) -> int:
    """Quantize a velocity vector into one of 8 direction classes."""
    ang = np.arctan2(vy, vx) % (2.0 * np.pi)
    return int(ang // (np.pi / 4.0)) % 8


def _render_shapes(dims, shapes):
    t_len, h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.zeros((t_len, h, w, 3))
    dist_all = np.full((t_len, h, w), np.inf)
    for sh in shapes:
        for t in range(t_len):
            cx = sh["cx"] + sh["vx"] * t
            cy = sh["cy"] + sh["vy"] * t
            if sh["kind"] == "disk":
                dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - sh["radius"]
            else:  # square (Chebyshev metric)
                dist = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - sh["radius"]
            alpha = np.clip(0.5 - dist, 0.0, 1.0)  # 1px antialiased edge
            frames[t] += alpha[..., None] * sh["color"][None, None, :]
            dist_all[t] = np.minimum(dist_all[t], np.maximum(dist, 0.0))
    return np.clip(frames, 0.0, 1.0), dist_all


def synth_video(kind: str, seed: int, dims, static: bool = False) -> VideoClip:
    """Deterministic synthetic clip.

    moving_shapes: 1-3 antialiased shapes translating with constant
    per-clip velocity; label is the dominant (fastest) shape's motion
    octant, or the static sentinel for the zero-velocity arm.

    gradient_field: same moving scene plus a smooth background ramp;
    dense_target holds the analytic distance to the nearest shape
    boundary (a depth analog), in pixels scaled by 8/max(H, W).
    """
    if kind not in ("moving_shapes", "gradient_field"):
        raise ValueError(f"unknown generator kind {kind!r}")
    t_len, h, w = dims
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, 4))
    shapes = []
    for _ in range(n_shapes):
        speed = 0.0 if static else rng.uniform(0.8, 2.5)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        shapes.append(
            {
                "kind": "disk" if rng.uniform() < 0.5 else "square",
                "cx": rng.uniform(0.3, 0.7) * w,
                "cy": rng.uniform(0.3, 0.7) * h,
                "radius": rng.uniform(0.10, 0.22) * min(h, w),
                "vx": speed * np.cos(ang),
                "vy": speed * np.sin(ang),
                "color": rng.uniform(0.3, 1.0, size=3),
            }
        )
    frames, dist = _render_shapes(dims, shapes)
    if kind == "gradient_field":
        ramp = (np.arange(w) / max(1, w - 1))[None, None, :, None] * 0.2
        frames = np.clip(frames + ramp, 0.0, 1.0)
        dense = dist * (8.0 / max(h, w))
    else:
        dense = None
    if static:
        label = STATIC_LABEL
    else:
        dom = max(shapes, key=lambda s: s["vx"] ** 2 + s["vy"] ** 2)
        label = motion_octant(dom["vx"], dom["vy"])
    return VideoClip(
        frames=frames,
        label=label,
        dense_target=dense,
        provenance={"generator": kind, "seed": int(seed), "static": bool(static)},
    )


def batch_frames(clips):
    return np.stack([c.frames for c in clips], axis=0)


# -- checkpoints --------------------------------------------------------


def write_checkpoint(path, meta: dict, arrays):
    """Write manifest.json + payload.bin under directory `path`.

    `arrays` is an ordered name -> float64 ndarray mapping. Byte-identical
    for identical inputs.
    """
    os.makedirs(path, exist_ok=True)
    directory = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        raw = arr.astype("<f8", copy=False).tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f8",
             "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = dict(meta)
    manifest["tensors"] = directory
    manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    with open(os.path.join(path, "payload.bin"), "wb") as f:
        f.write(payload)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_checkpoint(path):
    """Load (meta, arrays) back; raises IntegrityError on corruption."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(path, "payload.bin"), "rb") as f:
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch")
    arrays = {}
    for entry in manifest["tensors"]:
        lo = entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(payload):
            raise IntegrityError("payload truncated")
        arr = np.frombuffer(payload[lo:hi], dtype=entry["dtype"]).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "payload_sha256")}
    return meta, arrays


# -- metrics ------------------------------------------------------------


class MetricsWriter:
    """Append-only JSONL metrics; one writer per file by contract."""

    def __init__(self, path):
        self.path = path
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._fh = open(path, "a")
        else:
            self._fh = None

    def append(self, record: dict):
        if self._fh is None:
            return
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
