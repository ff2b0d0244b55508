"""Paired-image dataset ingestion, resizing, flip augmentation, batching.

Dataset roots hold `original/` and `bokeh/` directories with files matched
by basename (extension ignored), or a manifest file of tab-separated
`input_path<TAB>gt_path` lines. Everything downstream of decoding is
deterministic in (seed, epoch): the shuffle order and every flip decision
are derived from counter-based streams, never from worker timing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, EmptyDataset, MissingFile
from .layers import resize_bilinear_array
from .tensor import Rng, Tensor

IMAGE_EXTS = (".png", ".jpg", ".jpeg")

# disjoint 64-bit Philox stream ids per purpose
_STREAM_SHUFFLE = 1 << 60
_STREAM_AUGMENT = 2 << 60


@dataclass(frozen=True)
class AugmentSpec:
    hflip: bool = True
    vflip: bool = True


class PairedDataset:
    """List of (input_path, gt_path) records plus the training resolution."""

    def __init__(self, records, train_resolution=(1024, 1024)):
        self.records = list(records)
        self.train_resolution = tuple(train_resolution)

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_root(cls, root: str, train_resolution=(1024, 1024),
                  input_dir: str = "original", gt_dir: str = "bokeh") -> "PairedDataset":
        in_dir = os.path.join(root, input_dir)
        gt_dir = os.path.join(root, gt_dir)
        if not os.path.isdir(in_dir) or not os.path.isdir(gt_dir):
            raise MissingFile(f"dataset root must contain {input_dir}/ and {gt_dir}/: {root}")

        def index(d):
            out = {}
            for fn in sorted(os.listdir(d)):
                stem, ext = os.path.splitext(fn)
                if ext.lower() in IMAGE_EXTS:
                    out[stem] = os.path.join(d, fn)
            return out

        inputs, gts = index(in_dir), index(gt_dir)
        records = [(inputs[s], gts[s]) for s in sorted(inputs) if s in gts]
        if not records:
            raise EmptyDataset(f"no paired images under {root}")
        return cls(records, train_resolution)

    @classmethod
    def from_manifest(cls, path: str, train_resolution=(1024, 1024)) -> "PairedDataset":
        if not os.path.isfile(path):
            raise MissingFile(f"manifest not found: {path}")
        records = []
        base = os.path.dirname(os.path.abspath(path))
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DecodeError(f"manifest line is not input<TAB>gt: {line!r}")
                records.append(tuple(
                    p if os.path.isabs(p) else os.path.join(base, p) for p in parts))
        if not records:
            raise EmptyDataset(f"manifest is empty: {path}")
        return cls(records, train_resolution)


def decode_image(path: str) -> np.ndarray:
    """8-bit RGB file -> float32 (3, h, w) in [0, 1]."""
    if not os.path.isfile(path):
        raise MissingFile(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    return arr.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)


def encode_image(arr: np.ndarray, path: str) -> None:
    """float32 (3, h, w) in [0, 1] -> 8-bit PNG."""
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path, format="PNG")


def load_pair(record, train_resolution=(1024, 1024)) -> tuple[np.ndarray, np.ndarray]:
    """Decode both files and resize to the training resolution."""
    th, tw = train_resolution
    out = []
    for path in record:
        img = decode_image(path)
        out.append(resize_bilinear_array(img[None], th, tw)[0])
    return out[0], out[1]


def augment(pair, spec: AugmentSpec, seed: int, epoch: int, index: int):
    """Seeded flips; the same decision applies to both images of the pair."""
    rng = Rng(seed, stream=_STREAM_AUGMENT + (epoch << 32) + index)
    a, b = pair
    if spec.hflip and rng.bernoulli(0.5):
        a = np.ascontiguousarray(a[:, :, ::-1])
        b = np.ascontiguousarray(b[:, :, ::-1])
    if spec.vflip and rng.bernoulli(0.5):
        a = np.ascontiguousarray(a[:, ::-1, :])
        b = np.ascontiguousarray(b[:, ::-1, :])
    return a, b


def epoch_order(dataset: PairedDataset, seed: int, epoch: int) -> np.ndarray:
    """Record indices in this epoch's shuffled order."""
    rng = Rng(seed, stream=_STREAM_SHUFFLE + epoch)
    return rng.permutation(len(dataset))


def batches_per_epoch(dataset: PairedDataset, batch_size: int) -> int:
    return len(dataset) // batch_size


def make_batch(dataset: PairedDataset, indices, seed: int, epoch: int,
               spec: AugmentSpec | None = None) -> tuple[Tensor, Tensor]:
    """Decode, augment, and stack the given records into (b, 3, h, w) tensors."""
    xs, ys = [], []
    for idx in indices:
        pair = load_pair(dataset.records[idx], dataset.train_resolution)
        if spec is not None:
            pair = augment(pair, spec, seed, epoch, int(idx))
        xs.append(pair[0])
        ys.append(pair[1])
    return Tensor(np.stack(xs)), Tensor(np.stack(ys))


def batches(dataset: PairedDataset, batch_size: int, seed: int, epoch: int,
            spec: AugmentSpec | None = None):
    """Stream this epoch's batches; the final short batch is dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no records")
    order = epoch_order(dataset, seed, epoch)
    for b in range(batches_per_epoch(dataset, batch_size)):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield make_batch(dataset, idx, seed, epoch, spec)
