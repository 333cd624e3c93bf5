"""Gradient sanitization ladder: compression, Gaussian noise, fixed and
dynamic differential privacy, plus Renyi-divergence epsilon accounting.

Scale conventions: the per-coordinate noise standard deviation is
sigma_t * S (noise scale times sensitivity); zeta_t denotes that product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .numcore import FlatVector

KINDS = ("none", "compression", "gaussian", "fixed_dp", "dynamic_dp")
DECAYS = ("linear", "staircase", "exponential", "cyclic")
SITES = ("per_example", "per_client_update")

DEFAULT_ORDERS = (1.5,) + tuple(float(a) for a in range(2, 65))


@dataclass
class NoisePolicy:
    kind: str = "none"
    ratio: float = 0.0              # compression
    variance: float = 0.0           # plain gaussian
    clip_bound: float = 1.0         # C, for DP kinds
    sigma0: float = 1.0
    sigmaT: float = 1.0
    decay: str = "exponential"
    stages: int = 4                 # staircase
    period: int = 0                 # cyclic; 0 means rounds/5
    site: str = "per_example"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.decay not in DECAYS:
            raise ConfigError(f"unknown decay {self.decay!r}")
        if self.site not in SITES:
            raise ConfigError(f"unknown injection site {self.site!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("compression ratio must be in [0,1]")
        if self.kind in ("fixed_dp", "dynamic_dp"):
            if self.clip_bound <= 0:
                raise ConfigError("clipping bound must be positive")
            if not self.sigma0 >= self.sigmaT > 0:
                raise ConfigError("need sigma0 >= sigmaT > 0")

    @property
    def is_dp(self) -> bool:
        return self.kind in ("fixed_dp", "dynamic_dp")


@dataclass(frozen=True)
class SensitivityRecord:
    value: float
    source: str              # "fixed_clip" or "l2max"
    round: int = -1
    client: int = -1


def compress(g: FlatVector, ratio: float) -> FlatVector:
    """Zero the floor(ratio * dim) smallest-magnitude coordinates."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("compression ratio must be in [0,1]")
    k = int(math.floor(ratio * g.dim))
    out = g.values.copy()
    if k > 0:
        # stable sort keeps index order on magnitude ties
        drop = np.argsort(np.abs(out), kind="stable")[:k]
        out[drop] = 0.0
    return FlatVector(out, g.segments)


def add_gaussian(g: FlatVector, variance: float, rng) -> FlatVector:
    if variance < 0:
        raise ConfigError("variance must be non-negative")
    if variance == 0:
        return g.copy()
    noise = rng.normal(0.0, math.sqrt(variance), size=g.dim)
    return FlatVector(g.values + noise, g.segments)


def clip(g: FlatVector, bound: float) -> FlatVector:
    norm = g.l2()
    if norm <= bound:
        return g.copy()
    return FlatVector(g.values * (bound / norm), g.segments)


def l2max_sensitivity(per_example: list[FlatVector], bound: float) -> SensitivityRecord:
    """S = min(max per-example l2 norm, clipping bound)."""
    if not per_example:
        raise DegenerateInputError("empty per-example gradient list")
    max_norm = max(g.l2() for g in per_example)
    return SensitivityRecord(value=min(max_norm, bound), source="l2max")


def fixed_sensitivity(bound: float) -> SensitivityRecord:
    return SensitivityRecord(value=bound, source="fixed_clip")


def noise_scale_at(policy: NoisePolicy, t: int, total_rounds: int) -> float:
    """sigma_t under the policy's decay schedule, for 0 <= t <= T."""
    if not 0 <= t <= total_rounds:
        raise ConfigError(f"round {t} outside [0, {total_rounds}]")
    s0, sT = policy.sigma0, policy.sigmaT
    if total_rounds == 0 or s0 == sT:
        return s0
    frac = t / total_rounds

    def exponential(f):
        return s0 * (sT / s0) ** f

    if policy.decay == "linear":
        return s0 - (s0 - sT) * frac
    if policy.decay == "exponential":
        return exponential(frac)
    if policy.decay == "staircase":
        stage_len = total_rounds / policy.stages
        stage = int(t // stage_len)
        return exponential(min(stage * stage_len, total_rounds) / total_rounds)
    # cyclic: restart at the exponential envelope every `period` rounds,
    # then fall linearly toward sigmaT inside the cycle
    period = policy.period if policy.period > 0 else max(total_rounds // 5, 1)
    start = (t // period) * period
    envelope = exponential(start / total_rounds)
    return envelope + (sT - envelope) * ((t - start) / period)


def dp_perturb(
    grads,
    policy: NoisePolicy,
    sensitivity: SensitivityRecord,
    sigma_t: float,
    rng,
) -> FlatVector:
    """Clip and noise at the configured injection site.

    per_example: each per-example gradient is clipped to C and gets
    independent N(0, (sigma_t S)^2) per coordinate, then the batch mean is
    returned.  per_client_update: the single update is clipped once and
    noised once.
    """
    std = sigma_t * sensitivity.value
    if policy.site == "per_example":
        if isinstance(grads, FlatVector):
            grads = [grads]
        if not grads:
            raise DegenerateInputError("empty gradient batch")
        noisy = []
        for g in grads:
            c = clip(g, policy.clip_bound)
            if std > 0:
                c = FlatVector(c.values + rng.normal(0.0, std, size=c.dim), c.segments)
            noisy.append(c.values)
        first = grads[0]
        return FlatVector(np.mean(noisy, axis=0), first.segments)
    g = grads if isinstance(grads, FlatVector) else _mean_vector(grads)
    c = clip(g, policy.clip_bound)
    if std > 0:
        c = FlatVector(c.values + rng.normal(0.0, std, size=c.dim), c.segments)
    return c


def _mean_vector(grads) -> FlatVector:
    return FlatVector(np.mean([g.values for g in grads], axis=0), grads[0].segments)


def gaussian_renyi_divergence(order: float, sigma: float) -> float:
    """Renyi divergence of one Gaussian-mechanism release at this order."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    return order / (2.0 * sigma * sigma)


@dataclass
class PrivacyLedger:
    """Accumulates per-order Renyi divergences across rounds and converts
    to (epsilon, delta)."""

    delta: float = 1e-5
    orders: tuple[float, ...] = DEFAULT_ORDERS
    accumulated: dict[float, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must be in (0,1)")
        if not self.orders or any(a <= 1.0 for a in self.orders):
            raise ConfigError("order grid must be non-empty with orders > 1")
        for a in self.orders:
            self.accumulated.setdefault(a, 0.0)

    def step(self, sigma_t: float, round_index: int = -1, sensitivity: float = float("nan")):
        for a in self.orders:
            self.accumulated[a] += gaussian_renyi_divergence(a, sigma_t)
        self.history.append(
            {
                "round": round_index,
                "sigma_t": sigma_t,
                "S": sensitivity,
                "zeta": sigma_t * sensitivity,
                "epsilon": self.epsilon(),
            }
        )

    def epsilon(self) -> float:
        """Smallest epsilon over the order grid at the fixed delta."""
        log_inv_delta = math.log(1.0 / self.delta)
        return min(
            self.accumulated[a] + log_inv_delta / (a - 1.0) for a in self.orders
        )

    def epsilon_at(self, order: float) -> float:
        return self.accumulated[order] + math.log(1.0 / self.delta) / (order - 1.0)


class DefenseHook:
    """Binds a NoisePolicy to a federation run.

    The hook owns the round's sigma_t, tracks per-client sensitivities,
    and sanitizes gradients at the policy's injection site.  With
    kind=none it is the identity.
    """

    def __init__(self, policy: NoisePolicy, total_rounds: int, ledger: PrivacyLedger | None = None):
        self.policy = policy
        self.total_rounds = max(total_rounds, 1)
        self.ledger = ledger
        self.sigma_t = policy.sigma0 if policy.is_dp else 0.0
        self.round_sensitivities: list[float] = []
        self._round = 0

    def start_round(self, t: int):
        self._round = t
        if self.policy.is_dp:
            self.sigma_t = noise_scale_at(self.policy, t, self.total_rounds)
        self.round_sensitivities = []

    def finish_round(self):
        if self.ledger is not None and self.policy.is_dp:
            mean_s = (
                float(np.mean(self.round_sensitivities))
                if self.round_sensitivities
                else self.policy.clip_bound
            )
            self.ledger.step(self.sigma_t, round_index=self._round, sensitivity=mean_s)

    def _sensitivity(self, per_example_clipped: list[FlatVector]) -> SensitivityRecord:
        if self.policy.kind == "dynamic_dp":
            return l2max_sensitivity(per_example_clipped, self.policy.clip_bound)
        return fixed_sensitivity(self.policy.clip_bound)

    def sanitize_batch(self, per_example: list[FlatVector], rng) -> FlatVector:
        """per_example site: applied to every local SGD step's batch."""
        mean = _mean_vector(per_example)
        if self.policy.kind in ("none", "compression", "gaussian"):
            return mean
        if self.policy.site != "per_example":
            return mean
        clipped = [clip(g, self.policy.clip_bound) for g in per_example]
        record = self._sensitivity(clipped)
        self.round_sensitivities.append(record.value)
        return dp_perturb(clipped, self.policy, record, self.sigma_t, rng)

    def sanitize_update(self, update: FlatVector, per_example_norm_max: float, rng) -> FlatVector:
        """per_client_update site: applied once to the shared update."""
        p = self.policy
        if p.kind == "none":
            return update
        if p.kind == "compression":
            return compress(update, p.ratio)
        if p.kind == "gaussian":
            return add_gaussian(update, p.variance, rng)
        if p.site != "per_client_update":
            return update
        if p.kind == "dynamic_dp":
            record = SensitivityRecord(
                value=min(per_example_norm_max, p.clip_bound), source="l2max"
            )
        else:
            record = fixed_sensitivity(p.clip_bound)
        self.round_sensitivities.append(record.value)
        return dp_perturb(update, p, record, self.sigma_t, rng)
