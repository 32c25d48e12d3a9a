"""On-disk formats for projection stacks, volumes, checkpoints, manifests.

All binary formats are little-endian with fixed magics:

* ``XMPJ``: projection stacks.  Magic ``XMPJ``, version u32, channel tag
  u8 (0 absorbance, 1 phase, 2 intensity), dims T, V, H, W as u32, then
  T*V*H*W float32 values, then a CRC32 (u32) of every preceding byte.
* ``XVOL``: a single volume.  Magic ``XVOL``, dims nx, ny, nz as u32,
  float32 payload, trailing CRC32 of the preceding bytes.
* ``ONIXCKPT``: model weights.  Magic ``ONIXCKPT``, version u32, then a
  sequence of records (name length u32, name UTF-8, dtype tag u8
  (0 float32, 1 float64), ndims u32, dims u32 each, payload), then a
  trailing CRC32 (u32) of every preceding byte.  Arrays are stored with
  their exact dtype; other dtypes are rejected at write time.

Dataset manifests are JSON.  The ``eval_only`` section holds information
a training run must not see (absolute view azimuths, per-experiment true
scenario parameters); ``load_manifest`` strips it unless explicitly asked.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np


class OnixIOError(IOError):
    """Malformed, truncated, or corrupted artifact file."""


CHANNEL_TAGS = {0: "absorbance", 1: "phase", 2: "intensity"}
CHANNEL_IDS = {v: k for k, v in CHANNEL_TAGS.items()}

_XMPJ_MAGIC = b"XMPJ"
_XVOL_MAGIC = b"XVOL"
_CKPT_MAGIC = b"ONIXCKPT"


def _take(buf: bytes, offset: int, count: int, path: str):
    if offset + count > len(buf):
        raise OnixIOError(f"{path}: truncated at byte {len(buf)} (needed {offset + count})")
    return buf[offset:offset + count], offset + count


def _check_crc(buf: bytes, path: str) -> bytes:
    if len(buf) < 4:
        raise OnixIOError(f"{path}: truncated at byte {len(buf)} (no room for checksum)")
    body, tail = buf[:-4], buf[-4:]
    expect = struct.unpack("<I", tail)[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != expect:
        raise OnixIOError(f"{path}: CRC32 mismatch at byte {len(buf) - 4} "
                          f"(stored {expect:#010x}, computed {actual:#010x})")
    return body


# ---------------------------------------------------------------------------
# XMPJ projection stacks
# ---------------------------------------------------------------------------

def write_xmpj(path: str, stack: np.ndarray, channel, version: int = 1) -> None:
    """Write a (T, V, H, W) float stack for one channel."""
    arr = np.ascontiguousarray(stack, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError(f"projection stack must be (T, V, H, W), got {stack.shape}")
    tag = CHANNEL_IDS[channel] if isinstance(channel, str) else int(channel)
    if tag not in CHANNEL_TAGS:
        raise ValueError(f"unknown channel {channel!r}")
    header = _XMPJ_MAGIC + struct.pack("<IB", version, tag)
    header += struct.pack("<4I", *arr.shape)
    body = header + arr.tobytes()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_xmpj_header(path: str):
    """Read (version, channel_name, (T, V, H, W)) without loading data."""
    with open(path, "rb") as f:
        head = f.read(25)
    if len(head) < 25:
        raise OnixIOError(f"{path}: truncated at byte {len(head)} (incomplete header)")
    if head[:4] != _XMPJ_MAGIC:
        raise OnixIOError(f"{path}: bad magic {head[:4]!r}, expected {_XMPJ_MAGIC!r}")
    version, tag = struct.unpack("<IB", head[4:9])
    dims = struct.unpack("<4I", head[9:25])
    if tag not in CHANNEL_TAGS:
        raise OnixIOError(f"{path}: unknown channel tag {tag}")
    return version, CHANNEL_TAGS[tag], dims


def read_xmpj(path: str):
    """Read a stack; returns (array (T, V, H, W) float32, channel_name)."""
    with open(path, "rb") as f:
        buf = f.read()
    body = _check_crc(buf, path)
    if body[:4] != _XMPJ_MAGIC:
        raise OnixIOError(f"{path}: bad magic {body[:4]!r}, expected {_XMPJ_MAGIC!r}")
    raw, off = _take(body, 4, 5, path)
    version, tag = struct.unpack("<IB", raw)
    if tag not in CHANNEL_TAGS:
        raise OnixIOError(f"{path}: unknown channel tag {tag}")
    raw, off = _take(body, off, 16, path)
    dims = struct.unpack("<4I", raw)
    count = int(np.prod(dims))
    raw, off = _take(body, off, 4 * count, path)
    if off != len(body):
        raise OnixIOError(f"{path}: {len(body) - off} unexpected trailing bytes")
    arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return arr, CHANNEL_TAGS[tag]


# ---------------------------------------------------------------------------
# XVOL volumes
# ---------------------------------------------------------------------------

def write_xvol(path: str, volume: np.ndarray) -> None:
    arr = np.ascontiguousarray(volume, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"volume must be 3-d, got {volume.shape}")
    body = _XVOL_MAGIC + struct.pack("<3I", *arr.shape) + arr.tobytes()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_xvol(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    body = _check_crc(buf, path)
    if body[:4] != _XVOL_MAGIC:
        raise OnixIOError(f"{path}: bad magic {body[:4]!r}, expected {_XVOL_MAGIC!r}")
    raw, off = _take(body, 4, 12, path)
    dims = struct.unpack("<3I", raw)
    count = int(np.prod(dims))
    raw, off = _take(body, off, 4 * count, path)
    if off != len(body):
        raise OnixIOError(f"{path}: {len(body) - off} unexpected trailing bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_DTYPES = {0: "<f4", 1: "<f8"}
_CKPT_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path: str, state: dict, version: int = 1) -> None:
    """Write named float arrays; names are stored in sorted order so the
    byte stream is a pure function of the state.  Arrays keep their exact
    dtype (float32 or float64); anything else raises ValueError rather
    than being silently converted."""
    chunks = [_CKPT_MAGIC + struct.pack("<I", version)]
    for name in sorted(state.keys()):
        arr = np.ascontiguousarray(state[name])
        if arr.dtype not in _CKPT_DTYPE_TAGS:
            raise ValueError(f"checkpoint arrays must be float32 or float64; "
                             f"{name!r} has dtype {arr.dtype}")
        tag = _CKPT_DTYPE_TAGS[arr.dtype]
        arr = arr.astype(_CKPT_DTYPES[tag], copy=False)  # force little-endian
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    body = _check_crc(buf, path)
    raw, off = _take(body, 0, 12, path)
    if raw[:8] != _CKPT_MAGIC:
        raise OnixIOError(f"{path}: bad magic {raw[:8]!r}, expected {_CKPT_MAGIC!r}")
    state: dict[str, np.ndarray] = {}
    while off < len(body):
        raw, off = _take(body, off, 4, path)
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _take(body, off, name_len, path)
        name = raw.decode("utf-8")
        raw, off = _take(body, off, 5, path)
        dtype_tag, ndim = struct.unpack("<BI", raw)
        if dtype_tag not in _CKPT_DTYPES:
            raise OnixIOError(f"{path}: unknown dtype tag {dtype_tag} in record {name!r}")
        dtype = np.dtype(_CKPT_DTYPES[dtype_tag])
        raw, off = _take(body, off, 4 * ndim, path)
        dims = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(dims)) if ndim else 1
        raw, off = _take(body, off, dtype.itemsize * count, path)
        if name in state:
            raise OnixIOError(f"{path}: duplicate record {name!r}")
        state[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return state


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def save_manifest(dataset_dir: str, manifest: dict) -> str:
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(dataset_dir: str, include_eval: bool = False) -> dict:
    """Load a dataset manifest; the sealed ``eval_only`` section is
    removed unless the caller is an evaluation tool."""
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise OnixIOError(f"{path}: no manifest found")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != "onix4d-dataset":
        raise OnixIOError(f"{path}: not a dataset manifest")
    if not include_eval:
        manifest.pop("eval_only", None)
    return manifest


def validate_dataset(dataset_dir: str) -> dict:
    """Cross-check manifest entries against the referenced stack headers.

    Returns the (unsealed) manifest on success; raises OnixIOError on any
    missing file or dimension mismatch.
    """
    manifest = load_manifest(dataset_dir)
    det = manifest["detector"]
    t_count = manifest["timeline"]["count"]
    for exp in manifest["experiments"]:
        n_views = len(exp["rel_angles_deg"])
        for channel, fname in exp["files"].items():
            path = os.path.join(dataset_dir, fname)
            if not os.path.exists(path):
                raise OnixIOError(f"{path}: referenced by manifest but missing")
            _, tag, dims = read_xmpj_header(path)
            if tag != channel:
                raise OnixIOError(f"{path}: channel tag {tag!r} but manifest says {channel!r}")
            if dims != (t_count, n_views, det["height"], det["width"]):
                raise OnixIOError(f"{path}: dims {dims} do not match manifest "
                                  f"({t_count}, {n_views}, {det['height']}, {det['width']})")
    return manifest


# ---------------------------------------------------------------------------
# image output
# ---------------------------------------------------------------------------

def write_pgm(path: str, image: np.ndarray) -> None:
    """8-bit binary PGM for quick visual inspection of frames."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM output expects a 2-d image")
    if img.dtype != np.uint8:
        lo, hi = float(img.min()), float(img.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img = ((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())
