"""Datasets, mega-batch streams, replay assembly and label/sample manipulation.

Every :class:`Dataset` carries ``index``: the row ids of its samples in the
source dataset it was cut from.  Partitions, replay buffers and stream
manifests are all expressed in terms of those ids.
"""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import InputError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise InputError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise InputError(f"{inputs.shape[0]} inputs but labels of shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        index = np.arange(len(labels)) if self.index is None else np.asarray(self.index, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.inputs[rows], self.labels[rows], self.class_count, self.index[rows])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        if not parts:
            raise InputError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].class_count,
            np.concatenate([p.index for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class MegaBatch:
    train: Dataset
    val: Dataset


@dataclass(frozen=True, eq=False)
class MegaBatchStream:
    mega_batches: tuple
    test: Dataset

    def __len__(self) -> int:
        return len(self.mega_batches)

    def manifest(self) -> dict:
        """Per-mega-batch source row ids; enough to rebuild the stream exactly."""
        return {
            "megabatches": [
                {"train": mb.train.index.tolist(), "val": mb.val.index.tolist()}
                for mb in self.mega_batches
            ],
            "test": self.test.index.tolist(),
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), separators=(",", ":")) + "\n")


def stream_from_manifest(source: Dataset, test: Dataset, manifest: dict) -> MegaBatchStream:
    pos = {int(i): r for r, i in enumerate(source.index)}
    mbs = tuple(
        MegaBatch(source.take([pos[i] for i in m["train"]]), source.take([pos[i] for i in m["val"]]))
        for m in manifest["megabatches"]
    )
    return MegaBatchStream(mbs, test)


def make_stream(source: Dataset, t: int, val_fraction: float, test: Dataset,
                rng: np.random.Generator) -> MegaBatchStream:
    """Randomly split ``source`` into ``t`` equal mega-batches, each with a val slice.

    When ``t`` does not divide the source size the first ``N mod t``
    mega-batches get one extra sample.
    """
    n = len(source)
    if t < 1:
        raise InputError("t must be >= 1")
    if t > n:
        raise InputError(f"cannot cut {n} samples into {t} mega-batches")
    if not 0 < val_fraction < 1:
        raise InputError("val_fraction must lie in (0, 1)")
    perm = rng.permutation(n)
    base, extra = divmod(n, t)
    mbs, start = [], 0
    for i in range(t):
        size = base + (1 if i < extra else 0)
        rows = perm[start:start + size]
        start += size
        rows = rows[rng.permutation(size)]
        n_val = _round_half_up(val_fraction * size)
        mbs.append(MegaBatch(source.take(rows[n_val:]), source.take(rows[:n_val])))
    return MegaBatchStream(tuple(mbs), test)


# -- replay -----------------------------------------------------------------

@dataclass(frozen=True)
class FullReplay:
    tag = "full"


@dataclass(frozen=True)
class NoReplay:
    tag = "none"


@dataclass(frozen=True)
class BufferedReplay:
    capacity: int
    tag = "buffered"

    def __post_init__(self):
        if self.capacity < 1:
            raise InputError("buffer capacity must be >= 1")


ReplayPolicy = Union[FullReplay, NoReplay, BufferedReplay]


@dataclass(eq=False)
class ReplayBuffer:
    """Class-balanced reservoir over every finished mega-batch.

    ``seen[c]`` counts how many class-``c`` samples have ever been offered;
    the stored class-``c`` rows are a uniform sample without replacement of
    those.
    """

    capacity: int
    samples: Optional[Dataset] = None
    provenance: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seen: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return 0 if self.samples is None else len(self.samples)


def balanced_quotas(available: np.ndarray, capacity: int) -> np.ndarray:
    """Equal per-class shares of ``capacity`` capped by availability.

    Capacity left over by small classes is spread over the others; a
    remainder that cannot be split evenly goes to the lowest class ids.
    """
    available = np.asarray(available, dtype=np.int64)
    quota = np.zeros_like(available)
    left = min(int(capacity), int(available.sum()))
    while left > 0:
        open_ = np.flatnonzero(quota < available)
        share = left // len(open_)
        if share == 0:
            quota[open_[:left]] += 1
            break
        for c in open_:
            add = min(share, available[c] - quota[c])
            quota[c] += add
            left -= add
    return quota


def update_buffer(buffer: ReplayBuffer, finished: Dataset, megabatch: int,
                  rng: np.random.Generator) -> ReplayBuffer:
    """Offer a finished mega-batch's training split to the reservoir."""
    if buffer.capacity < 1:
        raise InputError("buffer capacity must be >= 1")
    c_count = finished.class_count
    seen_before = np.zeros(c_count, dtype=np.int64) if buffer.seen is None else buffer.seen
    seen = seen_before + finished.class_counts()
    quotas = balanced_quotas(seen, buffer.capacity)
    old = buffer.samples
    keep_parts, keep_prov = [], []
    for c in range(c_count):
        new_rows = np.flatnonzero(finished.labels == c)
        old_rows = np.zeros(0, dtype=np.int64) if old is None else np.flatnonzero(old.labels == c)
        q = int(quotas[c])
        if q == 0:
            continue
        # Hypergeometric split: how many of the q slots come from the new batch.
        from_new = 0
        if len(new_rows) and seen_before[c]:
            from_new = int(rng.hypergeometric(len(new_rows), int(seen_before[c]), q))
        elif len(new_rows):
            from_new = q
        from_new = max(from_new, q - len(old_rows))
        from_new = min(from_new, len(new_rows))
        pick_old = old_rows[rng.permutation(len(old_rows))[:q - from_new]] if len(old_rows) else old_rows
        pick_new = new_rows[rng.permutation(len(new_rows))[:from_new]]
        if len(pick_old):
            keep_parts.append(old.take(pick_old))
            keep_prov.append(buffer.provenance[pick_old])
        if len(pick_new):
            keep_parts.append(finished.take(pick_new))
            keep_prov.append(np.full(len(pick_new), megabatch, dtype=np.int64))
    samples = Dataset.concat(keep_parts) if keep_parts else None
    prov = np.concatenate(keep_prov) if keep_prov else np.zeros(0, dtype=np.int64)
    return ReplayBuffer(buffer.capacity, samples, prov, seen)


def assemble_training_set(stream: MegaBatchStream, i: int, policy: ReplayPolicy,
                          buffer: Optional[ReplayBuffer] = None) -> Dataset:
    """Training data for mega-batch ``i`` (1-based) under a replay policy."""
    if not 1 <= i <= len(stream):
        raise InputError(f"mega-batch index {i} outside 1..{len(stream)}")
    current = stream.mega_batches[i - 1].train
    if isinstance(policy, FullReplay):
        return Dataset.concat(mb.train for mb in stream.mega_batches[:i])
    if isinstance(policy, NoReplay):
        return current
    if isinstance(policy, BufferedReplay):
        if buffer is None or buffer.samples is None:
            return current
        return Dataset.concat([current, buffer.samples])
    raise InputError(f"unknown replay policy {policy!r}")


# -- sample manipulation ------------------------------------------------------

def corrupt_labels(data: Dataset, rate: float, rng: np.random.Generator) -> Dataset:
    """Resample each label with probability ``rate`` uniformly over all classes.

    The draw may return the original label, so the expected fraction of
    changed labels is ``rate * (C - 1) / C``.
    """
    if not 0 <= rate <= 1:
        raise InputError("noise rate must lie in [0, 1]")
    hit = rng.random(len(data)) < rate
    draws = rng.integers(0, data.class_count, size=len(data))
    labels = np.where(hit, draws, data.labels)
    return Dataset(data.inputs, labels, data.class_count, data.index)


def cap_per_class(data: Dataset, n_per_class: int, rng: np.random.Generator) -> Dataset:
    """Keep at most ``n_per_class`` uniformly chosen samples of every class."""
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    keep = []
    for c in range(data.class_count):
        rows = np.flatnonzero(data.labels == c)
        if len(rows) > n_per_class:
            rows = np.sort(rng.choice(rows, size=n_per_class, replace=False))
        keep.append(rows)
    return data.take(np.sort(np.concatenate(keep)))


def sample_subset(train: Dataset, rng: np.random.Generator, fraction: Optional[float] = None,
                  count: Optional[int] = None) -> Dataset:
    """Uniform random subset used for importance estimation."""
    if (fraction is None) == (count is None):
        raise InputError("give exactly one of fraction or count")
    n = len(train)
    size = _round_half_up(fraction * n) if fraction is not None else int(count)
    if fraction is not None and not 0 < fraction <= 1:
        raise InputError("fraction must lie in (0, 1]")
    if size < 1 or size > n:
        raise InputError(f"subset size {size} outside 1..{n}")
    if size == n:
        return train
    return train.take(np.sort(rng.choice(n, size=size, replace=False)))


def simplex_means(n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex with the given pairwise distance."""
    if dim < n_classes - 1:
        raise InputError(f"a regular {n_classes}-simplex needs dim >= {n_classes - 1}, got {dim}")
    centered = np.eye(n_classes) - 1.0 / n_classes
    # Orthonormal coordinates of the (C-1)-dim centered subspace.
    u, _, _ = np.linalg.svd(centered)
    coords = centered @ u[:, :n_classes - 1]
    means = np.zeros((n_classes, dim))
    means[:, :n_classes - 1] = coords * (separation / math.sqrt(2.0))
    return means


def synth_blobs(n_classes: int, n_per_class: int, dim: int, separation: float,
                rng: np.random.Generator) -> Dataset:
    """Unit-variance Gaussian clusters centred on a regular simplex."""
    if n_classes < 2 or dim < 2:
        raise InputError("need at least 2 classes and 2 dimensions")
    means = simplex_means(n_classes, dim, separation)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    inputs = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], n_classes)


# -- file loaders -------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Decode an unsigned-byte IDX file (optionally gzipped) into an array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ParseError(f"{path}: file shorter than the magic number (byte 0)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ParseError(f"{path}: bad magic 0x{magic:08x} at byte 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated dimension header at byte {len(raw)}")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + math.prod(shape)
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for shape {shape}, file ends at byte {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def load_idx(images_path, labels_path, class_count: Optional[int] = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim < 2 or labels.ndim != 1:
        raise ParseError(f"{images_path}: unexpected IDX ranks {images.ndim}/{labels.ndim} at byte 3")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images (byte 4)")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    c = class_count if class_count is not None else int(labels.max()) + 1
    return Dataset(inputs, labels, c)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise InputError("IDX writer handles label vectors and image stacks only")
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def load_csv(path, label_column: str, class_count: Optional[int] = None) -> Dataset:
    """Numeric CSV with a header row; every other column becomes a feature."""
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file (row 0)")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise ParseError(f"{path}: label column {label_column!r} not in header (row 1)")
    li = header.index(label_column)
    feats, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        values = []
        for col, cell in enumerate(row):
            try:
                values.append(float(cell))
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {col + 1}") from None
        label = values.pop(li)
        if label != int(label):
            raise ParseError(f"{path}: non-integer label {label!r} at row {r}, column {li + 1}")
        feats.append(values)
        labels.append(int(label))
    inputs = np.asarray(feats, dtype=np.float64).reshape(len(labels), len(header) - 1)
    labels = np.asarray(labels, dtype=np.int64)
    c = class_count if class_count is not None else int(labels.max()) + 1
    return Dataset(inputs, labels, c)
