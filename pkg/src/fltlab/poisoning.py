"""Targeted data-poisoning transforms (label flip, backdoor trigger,
clean-label blend) and the compromised-client schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, ShapeError

POISON_KINDS = ("dirty_label", "backdoor", "clean_label")


@dataclass
class PoisonSpec:
    kind: str
    source_class: int
    target_class: int
    fraction: float                  # share of compromised clients
    availability: float = 0.0        # alpha-biased sampling inside the window
    window: tuple[int, int] = (0, 0)  # [start, end) in rounds
    # backdoor
    trigger: np.ndarray | None = None
    trigger_offset: tuple[int, int] = (0, 0)
    # clean-label
    blend: float = 0.0
    # share of a malicious shard the backdoor / clean-label transform touches
    shard_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in POISON_KINDS:
            raise ConfigError(f"unknown poison kind {self.kind!r}")
        if self.source_class == self.target_class:
            raise ConfigError("source and target class must differ")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("compromised fraction must be in (0,1)")
        if not 0.0 <= self.availability <= 1.0:
            raise ConfigError("availability must be in [0,1]")
        if self.kind == "clean_label" and not 0.0 <= self.blend <= 0.5:
            raise ConfigError("blend coefficient must be in [0, 0.5]")
        if self.window[0] > self.window[1]:
            raise ConfigError("attack window start exceeds end")


def flip_labels(shard: Dataset, source: int, target: int) -> Dataset:
    """Relabel every source-class sample as the target class."""
    labels = [target if int(y) == source else int(y) for y in shard.labels]
    return Dataset(list(shard.images), labels, shard.classes)


def apply_backdoor(
    shard: Dataset,
    trigger: np.ndarray,
    offset: tuple[int, int],
    target: int,
    indices=None,
) -> Dataset:
    """Add the trigger patch over the designated region and relabel.

    Pixels outside the patch are untouched; results are clamped to [0,1].
    Poisons every sample unless `indices` restricts it.
    """
    trigger = np.asarray(trigger, dtype=np.float64)
    r0, c0 = offset
    sample = shard.images[0]
    if r0 < 0 or c0 < 0 or r0 + trigger.shape[0] > sample.shape[0] or c0 + trigger.shape[1] > sample.shape[1]:
        raise ShapeError(
            f"trigger {trigger.shape} at {offset} exceeds image bounds {sample.shape}"
        )
    chosen = set(range(len(shard))) if indices is None else set(indices)
    images, labels = [], []
    for i, (im, y) in enumerate(zip(shard.images, shard.labels)):
        if i in chosen:
            im = im.copy()
            region = im[r0 : r0 + trigger.shape[0], c0 : c0 + trigger.shape[1]]
            im[r0 : r0 + trigger.shape[0], c0 : c0 + trigger.shape[1]] = np.clip(
                region + trigger, 0.0, 1.0
            )
            labels.append(target)
        else:
            labels.append(int(y))
        images.append(im)
    return Dataset(images, labels, shard.classes)


def blend_clean_label(shard: Dataset, exemplar: np.ndarray, beta: float, indices=None) -> Dataset:
    """x' = clamp(x + beta * exemplar); labels untouched."""
    exemplar = np.asarray(exemplar, dtype=np.float64)
    chosen = set(range(len(shard))) if indices is None else set(indices)
    images = []
    for i, im in enumerate(shard.images):
        if i in chosen:
            if exemplar.shape != im.shape:
                raise ShapeError(f"exemplar {exemplar.shape} vs image {im.shape}")
            im = np.clip(im + beta * exemplar, 0.0, 1.0)
        images.append(im)
    return Dataset(images, list(shard.labels), shard.classes)


@dataclass
class PoisonPlan:
    """Resolved attack schedule: who is malicious, when, and what they do."""

    spec: PoisonSpec
    malicious_ids: frozenset[int]
    exemplar: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def in_window(self, t: int) -> bool:
        return self.spec.window[0] <= t < self.spec.window[1]

    def poison_shard(self, shard: Dataset, rng) -> Dataset:
        s = self.spec
        if s.kind == "dirty_label":
            return flip_labels(shard, s.source_class, s.target_class)
        n_poison = max(1, int(round(s.shard_fraction * len(shard))))
        indices = sorted(rng.choice(len(shard), size=min(n_poison, len(shard)), replace=False))
        if s.kind == "backdoor":
            return apply_backdoor(shard, s.trigger, s.trigger_offset, s.target_class, indices)
        return blend_clean_label(shard, self.exemplar, s.blend, indices)


def poison_plan(
    spec: PoisonSpec,
    n_clients: int,
    total_rounds: int,
    rng,
    dataset: Dataset | None = None,
) -> PoisonPlan:
    """Mark floor(fraction * N) clients malicious and bind the transform.

    Clean-label poisoning fixes one target-class exemplar at plan time.
    """
    n_malicious = int(spec.fraction * n_clients)
    if n_malicious < 1:
        raise ConfigError(
            f"fraction {spec.fraction} of {n_clients} clients yields no malicious client"
        )
    if spec.window[1] > total_rounds:
        raise ConfigError("attack window extends past the final round")
    ids = frozenset(int(i) for i in rng.choice(n_clients, size=n_malicious, replace=False))
    exemplar = None
    if spec.kind == "clean_label":
        if dataset is None:
            raise ConfigError("clean-label plan needs a dataset to draw the exemplar")
        pool = dataset.by_class()[spec.target_class]
        if not pool:
            raise ConfigError("no target-class sample available for the exemplar")
        exemplar = dataset.images[pool[int(rng.integers(len(pool)))]]
    if spec.kind == "backdoor" and spec.trigger is None:
        raise ConfigError("backdoor plan needs a trigger patch")
    return PoisonPlan(spec=spec, malicious_ids=ids, exemplar=exemplar)
