"""Server-side poisoned-update detection: per-class gradient slices, PCA
projection, 2-means clustering, density and temporal filtering, and
outlier-removal aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .numcore import FlatVector, ModelSpec

UNCERTAIN = -1


@dataclass
class TraceRecord:
    round: int
    client_id: int
    norm: float
    slices: dict[int, np.ndarray]
    is_malicious: bool | None = None


@dataclass
class GradientTrace:
    """Ordered per-round, per-client recorded updates."""

    records: list[TraceRecord] = field(default_factory=list)
    classes: int = 0

    def add(self, record: TraceRecord):
        self.records.append(record)
        self.classes = max(self.classes, max(record.slices, default=-1) + 1)

    def clients(self) -> list[int]:
        return sorted({r.client_id for r in self.records})

    def rounds(self) -> list[int]:
        return sorted({r.round for r in self.records})


def extract_class_slice(vector: FlatVector, spec: ModelSpec, c: int) -> np.ndarray:
    """Final-layer weight row for class c plus its bias entry, flattened."""
    if not 0 <= c < spec.classes:
        raise ShapeError(f"class {c} out of range")
    last = len(spec.layer_dims) - 1
    row = vector.segment(f"W{last}")[c]
    bias = vector.segment(f"b{last}")[c]
    return np.concatenate([row, [bias]])


@dataclass
class PCAResult:
    projections: np.ndarray     # (n, 2)
    explained: np.ndarray       # top-2 variance fractions
    degenerate: bool = False


def pca2(points) -> PCAResult:
    """Mean-centered projection onto the top-2 principal directions.

    Eigenvectors are ordered by descending eigenvalue with the sign fixed
    so each direction's largest-magnitude coordinate is positive.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateInputError("pca2 needs at least two points")
    centered = X - X.mean(axis=0)
    if not np.any(centered):
        return PCAResult(np.zeros((X.shape[0], 2)), np.zeros(2), degenerate=True)
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    vecs = eigvecs[:, order]
    vals = np.clip(eigvals[order], 0.0, None)
    for j in range(vecs.shape[1]):
        pivot = np.argmax(np.abs(vecs[:, j]))
        if vecs[pivot, j] < 0:
            vecs[:, j] = -vecs[:, j]
    proj = centered @ vecs
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
        vals = np.pad(vals, (0, 2 - vals.shape[0]))
    total = eigvals.clip(0.0, None).sum()
    explained = vals / total if total > 0 else np.zeros(2)
    return PCAResult(proj, explained)


@dataclass
class TwoMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    degenerate: bool = False


def two_means(points2d, seed, max_iter: int = 100, tol: float = 1e-9) -> TwoMeansResult:
    """2-means with seeded farthest-point initialization."""
    X = np.asarray(points2d, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateInputError("two_means needs at least two points")
    if np.allclose(X, X[0]):
        return TwoMeansResult(np.zeros(len(X), dtype=int), np.stack([X[0], X[0]]), degenerate=True)
    rng = np.random.default_rng(seed)
    first = X[int(rng.integers(len(X)))]
    second = X[int(np.argmax(((X - first) ** 2).sum(axis=1)))]
    centroids = np.stack([first, second])
    assignments = np.zeros(len(X), dtype=int)
    for _ in range(max_iter):
        d = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = d.argmin(axis=1)
        new = centroids.copy()
        for j in (0, 1):
            members = X[assignments == j]
            if len(members) == 0:
                far = int(np.argmax(d.min(axis=1)))
                members = X[far : far + 1]
                assignments[far] = j
            new[j] = members.mean(axis=0)
        drift = np.abs(new - centroids).max()
        centroids = new
        if drift < tol:
            break
    return TwoMeansResult(assignments, centroids)


def density_filter(points2d, assignments, centroids, q: float) -> np.ndarray:
    """Relabel points near the cluster boundary as uncertain.

    A point whose centroid-distance ratio d0/d1 falls in [1-q, 1+q] is out
    of scope for flagging evidence.
    """
    if not 0.0 < q < 0.5:
        raise ConfigError("density parameter q must be in (0, 0.5)")
    X = np.asarray(points2d, dtype=np.float64)
    out = np.asarray(assignments).copy()
    d0 = np.sqrt(((X - centroids[0]) ** 2).sum(axis=1))
    d1 = np.sqrt(((X - centroids[1]) ** 2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d1 > 0, d0 / d1, np.inf)
        ratio = np.where((d0 == 0) & (d1 == 0), 1.0, ratio)
    out[(ratio >= 1.0 - q) & (ratio <= 1.0 + q)] = UNCERTAIN
    return out


def silhouette2(points2d, assignments) -> float:
    """Mean silhouette coefficient for a 2-cluster labeling."""
    X = np.asarray(points2d, dtype=np.float64)
    labels = np.asarray(assignments)
    scores = []
    for j in (0, 1):
        members = X[labels == j]
        others = X[labels == 1 - j]
        if len(members) < 1 or len(others) < 1:
            return 0.0
        for p in members:
            a = (
                np.sqrt(((members - p) ** 2).sum(axis=1)).sum() / (len(members) - 1)
                if len(members) > 1
                else 0.0
            )
            b = np.sqrt(((others - p) ** 2).sum(axis=1)).mean()
            denom = max(a, b)
            scores.append((b - a) / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


@dataclass
class DetectionReport:
    flagged: set[int]
    temporal_scores: dict[int, float]
    suspect_classes: list[int]
    scatter: list[dict]                   # x, y, cluster, truth rows per analyzed record
    per_round_suspect: dict[tuple[int, int], int]   # (class, round) -> suspect cluster or -1
    precision: float | None = None
    recall: float | None = None
    false_positive_rate: float | None = None

    def summarize(self, truth: set[int], observed: list[int]):
        flagged = self.flagged
        tp = len(flagged & truth)
        fp = len(flagged - truth)
        fn = len(truth - flagged)
        honest = len([c for c in observed if c not in truth])
        self.precision = tp / (tp + fp) if flagged else (1.0 if not truth else 0.0)
        self.recall = tp / (tp + fn) if truth else 1.0
        self.false_positive_rate = fp / honest if honest else 0.0


def flag_malicious(
    trace: GradientTrace,
    window: int = 10,
    density_q: float = 0.1,
    norm_rule: bool = True,
    silhouette_threshold: float = 0.5,
    classes=None,
    seed: int = 0,
    flag_threshold: float = 0.5,
) -> DetectionReport:
    """Minority-cluster flagging with density and temporal confirmation.

    Per suspect class: PCA + 2-means over all recorded slices, density
    filtering, then per round the minority cluster is the suspect (with
    the norm rule on it must also carry the larger mean update norm).  A
    client is flagged when at least `flag_threshold` of its last `window`
    appearances fall in the suspect cluster.
    """
    if not trace.records:
        raise DegenerateInputError("empty gradient trace")
    class_list = list(classes) if classes is not None else list(range(trace.classes))
    suspect_classes: list[int] = []
    scatter: list[dict] = []
    per_round_suspect: dict[tuple[int, int], int] = {}
    votes: dict[int, list[int]] = {c: [] for c in trace.clients()}

    for cls in class_list:
        recs = [r for r in trace.records if cls in r.slices]
        if len(recs) < 2:
            continue
        pca = pca2([r.slices[cls] for r in recs])
        if pca.degenerate:
            continue
        km = two_means(pca.projections, seed=[seed, cls])
        if km.degenerate:
            continue
        filtered = density_filter(pca.projections, km.assignments, km.centroids, density_q)
        certain = filtered != UNCERTAIN
        if silhouette2(pca.projections[certain], filtered[certain]) < silhouette_threshold:
            continue
        suspect_classes.append(cls)
        for r, (x, y), a in zip(recs, pca.projections, filtered):
            scatter.append(
                {
                    "x": float(x),
                    "y": float(y),
                    "cluster": int(a),
                    "truth": int(bool(r.is_malicious)) if r.is_malicious is not None else -1,
                    "class": cls,
                    "round": r.round,
                    "client": r.client_id,
                }
            )
        for t in sorted({r.round for r in recs}):
            round_idx = [i for i, r in enumerate(recs) if r.round == t]
            labels = filtered[round_idx]
            n0 = int(np.sum(labels == 0))
            n1 = int(np.sum(labels == 1))
            if n0 == n1:
                if not norm_rule:
                    per_round_suspect[(cls, t)] = -1
                    continue
                suspect = _larger_norm_cluster(recs, round_idx, labels)
            else:
                suspect = 0 if n0 < n1 else 1
                if n0 == 0 or n1 == 0:
                    per_round_suspect[(cls, t)] = -1
                    continue
                if norm_rule and _larger_norm_cluster(recs, round_idx, labels) != suspect:
                    suspect = -1
            per_round_suspect[(cls, t)] = suspect
            if suspect == -1:
                continue
            for i in round_idx:
                if filtered[i] == UNCERTAIN:
                    continue
                votes[recs[i].client_id].append(1 if filtered[i] == suspect else 0)

    temporal = {}
    flagged = set()
    for client, v in votes.items():
        recent = v[-window:]
        score = float(np.mean(recent)) if recent else 0.0
        temporal[client] = score
        if recent and score >= flag_threshold:
            flagged.add(client)
    report = DetectionReport(
        flagged=flagged,
        temporal_scores=temporal,
        suspect_classes=suspect_classes,
        scatter=scatter,
        per_round_suspect=per_round_suspect,
    )
    truth = {r.client_id for r in trace.records if r.is_malicious}
    known = any(r.is_malicious is not None for r in trace.records)
    if known:
        report.summarize(truth, trace.clients())
    return report


def _larger_norm_cluster(recs, round_idx, labels) -> int:
    means = []
    for j in (0, 1):
        norms = [recs[i].norm for i, a in zip(round_idx, labels) if a == j]
        means.append(np.mean(norms) if norms else -np.inf)
    if means[0] == means[1]:
        return -1
    return int(np.argmax(means))
