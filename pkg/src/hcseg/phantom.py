"""Synthetic four-modality brain tumour phantoms and the HCV1 volume format.

Each phantom is a 2-D slice with a brain ellipse and, in 90% of samples, a
nested tumour: an outer edema ellipse (label 2) containing a tumour core
ellipse (label 1, necrosis) which contains an enhancing ellipse (label 3).
Contrast is split across channels on purpose: FLAIR alone outlines the whole
tumour, T1ce alone separates the core and enhancing parts, and T1/T2 only
carry contrasts below the noise level.

Random numbers come from numpy's PCG64 generator seeded per sample, which is
stable across platforms for a given numpy major version.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
NOISE_SIGMA = 0.1
TUMOR_FREE_FRACTION = 0.1
MIN_SIZE = 32

# tissue classes: outside, brain, edema, necrosis, enhancing
# rows follow MODALITIES
_INTENSITY = np.array([
    [0.0, 0.50, 0.45, 0.42, 0.47],  # T1: weak, redundant
    [0.0, 0.50, 0.50, 1.10, 1.80],  # T1ce: core and enhancing contrast
    [0.0, 0.50, 0.58, 0.60, 0.55],  # T2: weak, redundant
    [0.0, 0.50, 1.60, 1.60, 1.60],  # FLAIR: whole-tumour contrast
])


@dataclass
class PhantomSample:
    image: Tensor  # (4, H, W) float32, channels T1, T1ce, T2, FLAIR
    labels: np.ndarray  # (H, W) uint8 in {0, 1, 2, 3}
    seed: int
    brain: np.ndarray | None = None


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def gen_phantom(seed: int, h: int = 48, w: int = 48) -> PhantomSample:
    """Deterministically generate one phantom from ``seed``."""
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"phantom size must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = min(h, w)

    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 + rng.uniform(-0.03, 0.03) * w
    brain = _ellipse(yy, xx, cy, cx, rng.uniform(0.42, 0.47) * h,
                     rng.uniform(0.36, 0.42) * w, rng.uniform(-0.2, 0.2))

    tissue = brain.astype(np.int64)  # 0 outside, 1 brain
    labels = np.zeros((h, w), dtype=np.uint8)
    if rng.random() >= TUMOR_FREE_FRACTION:
        a = rng.uniform(0.16, 0.24) * size
        b = a * rng.uniform(0.65, 1.0)
        theta = rng.uniform(0, np.pi)
        ty = cy + rng.uniform(-0.15, 0.15) * h
        tx = cx + rng.uniform(-0.12, 0.12) * w
        wt = _ellipse(yy, xx, ty, tx, b, a, theta) & brain

        k_tc = rng.uniform(0.55, 0.7)
        oy, ox = rng.uniform(-0.12, 0.12, size=2) * b
        tc = _ellipse(yy, xx, ty + oy, tx + ox, k_tc * b, k_tc * a,
                      theta + rng.uniform(-0.3, 0.3)) & wt

        k_et = rng.uniform(0.5, 0.65) * k_tc
        oy2, ox2 = rng.uniform(-0.1, 0.1, size=2) * b
        et = _ellipse(yy, xx, ty + oy + oy2, tx + ox + ox2, k_et * b, k_et * a,
                      theta + rng.uniform(-0.3, 0.3)) & tc

        labels[wt] = 2
        labels[tc] = 1
        labels[et] = 3
        tissue[wt] = 2
        tissue[tc] = 3
        tissue[et] = 4

    image = _INTENSITY[:, tissue] + rng.normal(0.0, NOISE_SIGMA, size=(4, h, w))
    mu = image.mean(axis=(1, 2), keepdims=True)
    sd = image.std(axis=(1, 2), keepdims=True)
    image = ((image - mu) / sd).astype(np.float32)
    return PhantomSample(image=Tensor(image), labels=labels, seed=int(seed), brain=brain)


# -- HCV1 volume files ----------------------------------------------------------

VOLUME_MAGIC = b"HCV1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}


class VolumeFormatError(ValueError):
    pass


def _dtype_code(dtype):
    dtype = np.dtype(dtype)
    for code, dt in _DTYPE_CODES.items():
        if dt.kind == dtype.kind and dt.itemsize == dtype.itemsize:
            return code
    raise VolumeFormatError(f"no volume dtype code for {dtype}")


def write_volume(path, t, comment: str = "") -> None:
    """Write a tensor or array as an HCV1 volume.

    Layout: magic ``HCV1``, u8 rank, rank x u32 extents, u8 dtype code,
    u16 comment length, comment bytes (utf-8), little-endian payload.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _dtype_code(arr.dtype)
    note = comment.encode("utf-8")
    header = VOLUME_MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<BH", code, len(note)) + note
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path, with_comment: bool = False):
    """Read an HCV1 volume.

    Float payloads come back as :class:`Tensor`, integer payloads as numpy
    arrays.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    try:
        pos = 4
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        extents = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        code, note_len = struct.unpack_from("<BH", raw, pos)
        pos += 3
    except struct.error:
        raise VolumeFormatError(f"{path}: truncated header") from None
    if code not in _DTYPE_CODES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    comment = raw[pos:pos + note_len].decode("utf-8", errors="replace")
    pos += note_len
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
    payload = raw[pos:]
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(extents)
    arr = arr.astype(dtype.newbyteorder("="))
    out = Tensor(arr) if dtype.kind == "f" else arr
    return (out, comment) if with_comment else out


# -- dataset splits ---------------------------------------------------------------

SPLITS = ("train", "val", "test")


def make_splits(n_train: int, n_val: int, n_test: int, base_seed: int = 0):
    """Three disjoint, deterministic lists of phantom seeds."""
    counts = (n_train, n_val, n_test)
    if any(c < 0 for c in counts):
        raise ValueError("split sizes must be non-negative")
    total = sum(counts)
    rng = np.random.Generator(np.random.PCG64(int(base_seed)))
    seeds, seen = [], set()
    while len(seeds) < total:
        for s in rng.integers(0, 2**31 - 1, size=total - len(seeds)).tolist():
            if s not in seen:
                seen.add(s)
                seeds.append(s)
    out, start = [], 0
    for c in counts:
        out.append(seeds[start:start + c])
        start += c
    return tuple(out)


MANIFEST = "manifest.csv"


def write_dataset(root, splits: dict, size: int = 48) -> str:
    """Write phantoms as ``<split>/<seed>.img.hcv`` / ``.lbl.hcv`` plus a manifest."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for split in SPLITS:
        d = os.path.join(root, split)
        os.makedirs(d, exist_ok=True)
        for seed in splits.get(split, []):
            s = gen_phantom(seed, size, size)
            write_volume(os.path.join(d, f"{seed}.img.hcv"), s.image, comment="channels=" + ",".join(MODALITIES))
            write_volume(os.path.join(d, f"{seed}.lbl.hcv"), s.labels, comment="labels=0 bg,1 ncr,2 ed,3 et")
            rows.append((split, seed))
    path = os.path.join(root, MANIFEST)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "seed", "size"])
        for split, seed in rows:
            w.writerow([split, seed, size])
    return path


def read_manifest(root):
    path = os.path.join(root, MANIFEST)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    out = {s: [] for s in SPLITS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["split"]].append(int(row["seed"]))
    return out


def load_split(root, split):
    """Return ``(images (N, 4, H, W) float32, labels (N, H, W) uint8, seeds)``."""
    seeds = read_manifest(root)[split]
    imgs, lbls = [], []
    for seed in seeds:
        imgs.append(read_volume(os.path.join(root, split, f"{seed}.img.hcv")).data)
        lbls.append(read_volume(os.path.join(root, split, f"{seed}.lbl.hcv")))
    if not seeds:
        return np.zeros((0, 4, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8), []
    return np.stack(imgs), np.stack(lbls), seeds
