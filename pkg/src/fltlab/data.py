"""Dataset ingestion (IDX containers, synthetic generators) and non-IID
partitioning of samples across clients."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# intra-class spread of the blob generator, in pixel units
BLOB_SPREAD = 0.08


@dataclass
class Dataset:
    images: list[np.ndarray]
    labels: list[int]
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        for y in self.labels:
            if not 0 <= int(y) < self.classes:
                raise ShapeError(f"label {y} out of range for {self.classes} classes")

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        return Dataset(
            [self.images[i] for i in indices],
            [self.labels[i] for i in indices],
            self.classes,
        )

    def by_class(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {c: [] for c in range(self.classes)}
        for i, y in enumerate(self.labels):
            groups[int(y)].append(i)
        return groups


@dataclass
class PartitionPlan:
    clients: int
    per_client: int
    classes_per_client: int
    seed: int = 0

    def validate(self, ds: Dataset):
        if self.clients < 1:
            raise ConfigError("client count must be >= 1")
        if self.clients * self.per_client > len(ds):
            raise ConfigError(
                f"{self.clients} x {self.per_client} samples exceed dataset size {len(ds)}"
            )
        if not 1 <= self.classes_per_client <= ds.classes:
            raise ConfigError("classes-per-client cap out of range")


def _read_be32(f, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"truncated IDX header while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(image_path, label_path) -> Dataset:
    """Read an IDX image/label pair; pixels scaled into [0, 1] by 1/255."""
    with open(image_path, "rb") as f:
        magic = _read_be32(f, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, "image count")
        rows = _read_be32(f, "row count")
        cols = _read_be32(f, "column count")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise DataFormatError("truncated IDX image payload")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(label_path, "rb") as f:
        magic = _read_be32(f, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be32(f, "label count")
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise DataFormatError("truncated IDX label payload")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != label_count:
        raise DataFormatError(f"image count {count} != label count {label_count}")
    classes = int(labels.max()) + 1 if label_count else 1
    images = [pixels[i].astype(np.float64) / 255.0 for i in range(count)]
    return Dataset(images, [int(y) for y in labels], max(classes, 2))


def save_idx(images, labels, image_path, label_path):
    """Write images (float [0,1], rescaled x255 and rounded) and labels."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim != 3:
        raise ShapeError("save_idx expects 2-D images")
    byte_pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    count, rows, cols = byte_pixels.shape
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(byte_pixels.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(bytes(int(y) for y in labels))


def synth_blobs(classes, dims, per_class, separation, seed) -> Dataset:
    """Gaussian blobs around orthogonally displaced class centers.

    Centers sit at pairwise distance separation * BLOB_SPREAD around the
    mid-gray point; samples are clipped into [0, 1].
    """
    if classes < 1 or per_class < 1:
        raise ConfigError("counts must be positive")
    rows, cols = dims
    d = rows * cols
    if classes > d:
        raise ConfigError("more classes than pixels; centers cannot be orthogonal")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(d, classes)))
    radius = separation * BLOB_SPREAD / np.sqrt(2.0)
    centers = 0.5 + radius * basis.T
    images, labels = [], []
    for c in range(classes):
        for _ in range(per_class):
            px = centers[c] + rng.normal(0.0, BLOB_SPREAD, size=d)
            images.append(np.clip(px, 0.0, 1.0).reshape(rows, cols))
            labels.append(c)
    return Dataset(images, labels, classes)


def synth_patterns(
    classes,
    dims,
    per_class,
    seed,
    block: int = 4,
    noise: float = 0.04,
    lo: float = 0.05,
    hi: float = 0.95,
    bright_fraction: float = 0.5,
) -> Dataset:
    """Near-binary block-pattern prototypes per class plus pixel noise.

    Each class prototype assigns lo/hi to constant block x block tiles
    (hi with probability bright_fraction), so images span the pixel range
    and carry low-frequency structure; samples are the prototype plus
    Gaussian noise, clipped into [0, 1].
    """
    if classes < 1 or per_class < 1:
        raise ConfigError("counts must be positive")
    rows, cols = dims
    if rows % block or cols % block:
        raise ConfigError(f"image dims {dims} not divisible by block {block}")
    rng = np.random.default_rng(seed)
    br, bc = rows // block, cols // block
    prototypes = []
    for _ in range(classes):
        tiles = (rng.random(size=(br, bc)) < bright_fraction).astype(np.float64)
        proto = lo + (hi - lo) * np.kron(tiles, np.ones((block, block)))
        prototypes.append(proto)
    images, labels = [], []
    for c in range(classes):
        for _ in range(per_class):
            px = prototypes[c] + rng.normal(0.0, noise, size=(rows, cols))
            images.append(np.clip(px, 0.0, 1.0))
            labels.append(c)
    return Dataset(images, labels, classes)


def train_test_split(ds: Dataset, test_per_class: int, seed) -> tuple[Dataset, Dataset]:
    """Seeded per-class holdout split."""
    rng = np.random.default_rng(seed)
    test_idx, train_idx = [], []
    for c, idxs in sorted(ds.by_class().items()):
        perm = rng.permutation(len(idxs))
        chosen = [idxs[i] for i in perm]
        test_idx.extend(chosen[:test_per_class])
        train_idx.extend(chosen[test_per_class:])
    return ds.subset(sorted(train_idx)), ds.subset(sorted(test_idx))


def partition(ds: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Deal each client per_client samples from at most classes_per_client
    distinct classes; disjoint across clients, deterministic given seed."""
    plan.validate(ds)
    rng = np.random.default_rng([plan.seed, 0xD5])
    pools = {}
    for c, idxs in sorted(ds.by_class().items()):
        arr = list(idxs)
        rng.shuffle(arr)
        pools[c] = arr
    shards = []
    cap = plan.classes_per_client
    for _ in range(plan.clients):
        # greedy: the classes with the most remaining samples keep the plan feasible
        order = sorted(pools, key=lambda c: (-len(pools[c]), c))
        chosen = [c for c in order if pools[c]][:cap]
        avail = sum(len(pools[c]) for c in chosen)
        if avail < plan.per_client:
            raise ConfigError(
                f"infeasible plan: {plan.per_client} samples needed from "
                f"{cap} classes, only {avail} available"
            )
        take: list[int] = []
        quota = plan.per_client
        for j, c in enumerate(chosen):
            want = -(-quota // (len(chosen) - j))  # ceil split of what is left
            grab = min(want, len(pools[c]), quota)
            take.extend(pools[c][:grab])
            pools[c] = pools[c][grab:]
            quota -= grab
        # top up from chosen classes that still have samples
        for c in chosen:
            while quota > 0 and pools[c]:
                take.append(pools[c].pop(0))
                quota -= 1
        if quota > 0:
            raise ConfigError("infeasible plan: class pools exhausted")
        shards.append(ds.subset(take))
    return shards
