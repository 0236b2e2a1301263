"""Dataset ingestion, batching, and checkpoint serialization.

File formats:
  IDX         big-endian magic 0x00000803 (u8 images, n x H x W) and
              0x00000801 (u8 labels).
  CIFAR       3073-byte records: 1 label byte + 3072 pixel bytes
              (row-major R, G, B planes, 32 x 32).
  Checkpoint  magic "ZGC1", u32-LE header length, JSON header, float64-LE
              payload (parameter groups then momentum buffers, header
              order), u64-LE payload byte count as footer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ParamSet

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CKPT_MAGIC = b"ZGC1"
CKPT_SCHEMA = 1


class DataFormatError(ValueError):
    """Malformed input file; message carries path and position."""


@dataclass
class Dataset:
    """Inputs [n, C, H, W] scaled to [0,1], integer labels, split tag."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be [n, C, H, W], got shape {self.inputs.shape}")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0,1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split)


def train_val_split(ds: Dataset, val_fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Disjoint shuffled split; the tail val_fraction becomes the val set."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0,1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    return (ds.subset(order[:-n_val], "train"), ds.subset(order[-n_val:], "val"))


# -- IDX ---------------------------------------------------------------------

def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"{path}: truncated while reading {what} at offset {f.tell() - len(buf)}: "
            f"wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels are divided by 255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * h * w, images_path, f"{n} {h}x{w} images")
        if f.read(1):
            raise DataFormatError(f"{images_path}: trailing bytes after {n} images")
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        labels_raw = _read_exact(f, n_labels, labels_path, f"{n_labels} labels")
    if n != n_labels:
        raise DataFormatError(
            f"{images_path} has {n} images but {labels_path} has {n_labels} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write [n, 1, H, W] float [0,1] images and labels as an IDX pair."""
    n, c, h, w = images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel")
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# -- CIFAR binary --------------------------------------------------------------

def load_cifar(*paths) -> Dataset:
    """Concatenate CIFAR binary batch files (label byte + 3072 pixel bytes)."""
    all_images, all_labels = [], []
    for path in map(Path, paths):
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % 3073 != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a positive multiple of 3073-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        all_labels.append(records[:, 0].astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels))


# -- synthetic bars ------------------------------------------------------------

def synth_blobs(seed, n: int, classes: int, noise: float = 0.15) -> Dataset:
    """Balanced 8x8 bar dataset: class = bar position/orientation.

    Classes 0-3 are horizontal 2-pixel bars, 4-7 vertical. Pixel noise is
    Gaussian (sigma = noise) and clamped to [0,1]; noise=0 gives exact bars.
    """
    if not 1 <= classes <= 8:
        raise ValueError(f"classes must lie in 1..8, got {classes}")
    if n % classes != 0:
        raise ValueError(f"n={n} not divisible by classes={classes}; histogram must be uniform")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.zeros((n, 1, 8, 8))
    for c in range(classes):
        rows = labels == c
        if c < 4:
            images[rows, 0, 2 * c:2 * c + 2, :] = 1.0
        else:
            images[rows, 0, :, 2 * (c - 4):2 * (c - 4) + 2] = 1.0
    if noise > 0.0:
        images = np.clip(images + rng.normal(0.0, noise, size=images.shape), 0.0, 1.0)
    return Dataset(images, labels)


# -- batching ------------------------------------------------------------------

def batches(ds: Dataset, batch_size: int, epoch_seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    return [(ds.inputs[order[i:i + batch_size]], ds.labels[order[i:i + batch_size]])
            for i in range(0, len(ds), batch_size)]


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(state, path) -> None:
    """Serialize a TrainState; save followed by load is bit-exact."""
    groups = list(state.params.groups.items()) + \
        [(f"momentum.{k}", v) for k, v in state.momentum.groups.items()]
    header = {
        "schema": CKPT_SCHEMA,
        "arch": state.arch.to_dict(),
        "epoch": state.epoch,
        "attack": state.attack.to_dict(),
        "schedule": state.schedule.to_dict(),
        "rng": state.lineage.to_dict(),
        "groups": [[name, list(arr.shape)] for name, arr in groups],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in groups)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<Q", len(payload)))


def load_checkpoint(path):
    """Restore a TrainState; rejects bad magic, schema, truncation, shapes."""
    from .trainer import LrSchedule, TrainState  # deferred: trainer imports this module
    from .attacks import AttackSpec
    from .engine import ArchSpec
    from .streams import RngLineage

    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != CKPT_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {CKPT_MAGIC!r}")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4, path, "header length"))
        header = json.loads(_read_exact(f, header_len, path, "header"))
        if header.get("schema") != CKPT_SCHEMA:
            raise DataFormatError(
                f"{path}: unknown checkpoint schema {header.get('schema')!r}, "
                f"expected {CKPT_SCHEMA}")
        payload_start = f.tell()
        body = f.read()
    if len(body) < 8:
        raise DataFormatError(f"{path}: truncated before footer at offset {payload_start}")
    payload, footer = body[:-8], body[-8:]
    (declared,) = struct.unpack("<Q", footer)
    if declared != len(payload):
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes but footer declares {declared}; "
            f"file is corrupt")

    arch = ArchSpec.from_dict(header["arch"])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["groups"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise DataFormatError(
                f"{path}: payload ends inside group {name!r} at byte {payload_start + offset}")
        arrays[name] = np.frombuffer(payload[offset:offset + nbytes],
                                     dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataFormatError(f"{path}: {len(payload) - offset} unexpected trailing payload bytes")

    params = ParamSet({k: v for k, v in arrays.items() if not k.startswith("momentum.")})
    momentum = ParamSet({k[len("momentum."):]: v for k, v in arrays.items()
                         if k.startswith("momentum.")})
    from .engine import param_shapes
    expected = [(n, s) for n, s, _ in param_shapes(arch)]
    got = [(n, tuple(v.shape)) for n, v in params.groups.items()]
    if expected != got:
        raise DataFormatError(f"{path}: header groups {got} do not match arch layout {expected}")

    return TrainState(
        arch=arch,
        params=params,
        momentum=momentum,
        epoch=int(header["epoch"]),
        lineage=RngLineage.from_dict(header["rng"]),
        attack=AttackSpec.from_dict(header["attack"]),
        schedule=LrSchedule.from_dict(header["schedule"]),
    )
