"""The federated round loop: availability-biased client sampling, local
SGD with defense/poison hooks, and the three server aggregation rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import forensics
from .data import Dataset
from .errors import AggregationError, ConfigError, DegenerateInputError
from .metrics import eval_model
from .numcore import (
    FlatVector,
    ModelSpec,
    loss_and_param_grad,
    per_example_grads,
)
from .poisoning import PoisonPlan
from .privacy import DefenseHook

PAYLOADS = ("gradient", "weights", "delta")
AGGREGATIONS = ("fedsgd", "fedavg", "delta")
PAYLOAD_FOR_RULE = {"fedsgd": "gradient", "fedavg": "weights", "delta": "delta"}

# rng stream tags: (master_seed, tag, round, client)
STREAM_SAMPLING = 1
STREAM_TRAIN = 2
STREAM_DEFENSE = 3
STREAM_POISON = 4


@dataclass
class GlobalState:
    round: int
    params: FlatVector
    lr: float

    def __post_init__(self):
        if self.round < 0 or self.lr <= 0:
            raise ConfigError("round must be >= 0 and global lr positive")


@dataclass
class TrainingConfig:
    n_clients: int
    participants: int
    rounds: int
    local_iters: int = 1
    batch_size: int = 1
    local_lr: float = 0.1
    global_lr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.participants <= self.n_clients:
            raise ConfigError("participants must be within [1, clients]")
        if self.rounds < 0 or self.local_iters < 1 or self.batch_size < 1:
            raise ConfigError("rounds >= 0 and local iterations/batch >= 1 required")


@dataclass
class ClientUpdate:
    client_id: int
    n_samples: int
    kind: str
    vector: FlatVector

    def __post_init__(self):
        if self.kind not in PAYLOADS:
            raise ConfigError(f"unknown payload kind {self.kind!r}")
        if self.n_samples < 1:
            raise ConfigError("sample count must be >= 1")


def sample_clients(
    n_clients: int,
    k: int,
    malicious_ids,
    availability: float,
    in_window: bool,
    rng,
) -> list[int]:
    """Pick k distinct ids; inside the attack window each selection slot is
    malicious with probability `availability`."""
    if k > n_clients:
        raise ConfigError("cannot sample more clients than exist")
    if not 0.0 <= availability <= 1.0:
        raise ConfigError("availability must be in [0,1]")
    malicious = sorted(set(int(i) for i in malicious_ids))
    if in_window and availability > 0 and not malicious:
        raise ConfigError("availability bias requires a non-empty malicious set")
    if not in_window or availability == 0.0:
        return [int(i) for i in rng.choice(n_clients, size=k, replace=False)]
    honest = [i for i in range(n_clients) if i not in set(malicious)]
    mal = list(malicious)
    chosen = []
    for _ in range(k):
        pick_malicious = rng.random() < availability
        pool = mal if (pick_malicious and mal) else (honest if honest else mal)
        idx = int(rng.integers(len(pool)))
        chosen.append(pool.pop(idx))
    return chosen


def local_train(
    spec: ModelSpec,
    params: FlatVector,
    shard: Dataset,
    local_iters: int,
    batch_size: int,
    local_lr: float,
    rng,
    client_id: int = 0,
    payload: str = "gradient",
    defense: DefenseHook | None = None,
    defense_rng=None,
) -> ClientUpdate:
    """Run seeded local SGD and emit the requested payload kind.

    The shared "gradient" is (w(t) - w_k(t+1)) / local_lr, which reduces to
    the plain batch gradient when local_iters == 1.
    """
    if len(shard) == 0:
        raise DegenerateInputError("empty shard")
    if len(shard) < batch_size:
        raise DegenerateInputError(
            f"shard of {len(shard)} smaller than batch {batch_size}"
        )
    w = params.copy()
    max_norm = 0.0
    for _ in range(local_iters):
        idx = rng.choice(len(shard), size=batch_size, replace=False)
        batch = [(shard.images[i], shard.labels[i]) for i in idx]
        grads = per_example_grads(spec, w, batch)
        max_norm = max(max_norm, max(g.l2() for g in grads))
        if defense is not None:
            step = defense.sanitize_batch(grads, defense_rng)
        else:
            step = FlatVector(np.mean([g.values for g in grads], axis=0), w.segments)
        if local_lr != 0.0:
            w = FlatVector(w.values - local_lr * step.values, w.segments)
    if payload == "gradient":
        if local_lr == 0.0:
            vec = FlatVector(np.zeros(w.dim), w.segments)
        else:
            vec = FlatVector((params.values - w.values) / local_lr, w.segments)
    elif payload == "weights":
        vec = w
    else:
        vec = FlatVector(w.values - params.values, w.segments)
    if defense is not None:
        vec = defense.sanitize_update(vec, max_norm, defense_rng)
    return ClientUpdate(client_id=client_id, n_samples=len(shard), kind=payload, vector=vec)


def _check_kind(updates: list[ClientUpdate], kind: str):
    if not updates:
        raise AggregationError("no updates to aggregate")
    bad = {u.kind for u in updates} - {kind}
    if bad:
        raise AggregationError(f"expected {kind} payloads, got {sorted(bad)}")


def _sorted_weighted(updates: list[ClientUpdate]):
    ordered = sorted(updates, key=lambda u: u.client_id)
    n_total = sum(u.n_samples for u in ordered)
    return ordered, n_total


def aggregate_fedsgd(params: FlatVector, lr: float, updates: list[ClientUpdate]) -> FlatVector:
    """w(t+1) = w(t) - lr * sum_k (n_k/n) grad_k, reduced in client-id order."""
    _check_kind(updates, "gradient")
    ordered, n = _sorted_weighted(updates)
    acc = np.zeros(params.dim)
    for u in ordered:
        acc += (u.n_samples / n) * u.vector.values
    return FlatVector(params.values - lr * acc, params.segments)


def aggregate_fedavg(updates: list[ClientUpdate]) -> FlatVector:
    """w(t+1) = sum_k (n_k/n) w_k(t+1)."""
    _check_kind(updates, "weights")
    ordered, n = _sorted_weighted(updates)
    acc = np.zeros(ordered[0].vector.dim)
    for u in ordered:
        acc += (u.n_samples / n) * u.vector.values
    return FlatVector(acc, ordered[0].vector.segments)


def aggregate_delta(params: FlatVector, updates: list[ClientUpdate]) -> FlatVector:
    """w(t+1) = w(t) + sum_k (n_k/n) delta_k."""
    _check_kind(updates, "delta")
    ordered, n = _sorted_weighted(updates)
    acc = np.zeros(params.dim)
    for u in ordered:
        acc += (u.n_samples / n) * u.vector.values
    return FlatVector(params.values + acc, params.segments)


def aggregate(rule: str, params: FlatVector, lr: float, updates: list[ClientUpdate]) -> FlatVector:
    if rule == "fedsgd":
        return aggregate_fedsgd(params, lr, updates)
    if rule == "fedavg":
        return aggregate_fedavg(updates)
    if rule == "delta":
        return aggregate_delta(params, updates)
    raise ConfigError(f"unknown aggregation rule {rule!r}")


def aggregate_with_removal(
    rule: str,
    params: FlatVector,
    lr: float,
    updates: list[ClientUpdate],
    flagged,
) -> FlatVector:
    """Drop flagged clients' updates; remaining n_k/n weights renormalize."""
    kept = [u for u in updates if u.client_id not in flagged]
    if not kept:
        raise AggregationError("all updates flagged; nothing to aggregate")
    return aggregate(rule, params, lr, kept)


@dataclass
class Scenario:
    """Composition of sampling, hooks, and aggregation for one run."""

    aggregation: str = "fedsgd"
    defense: DefenseHook | None = None
    poison: PoisonPlan | None = None
    test_images: list = field(default_factory=list)
    test_labels: list = field(default_factory=list)
    victim_class: int = 0
    record_trace: bool = False
    trace_classes: list[int] | None = None
    excluded_clients: frozenset = frozenset()

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation rule {self.aggregation!r}")


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    trace: forensics.GradientTrace | None = None
    initial_params: FlatVector | None = None
    final_params: FlatVector | None = None
    states: list[FlatVector] = field(default_factory=list)


def run_federation(
    config: TrainingConfig,
    spec: ModelSpec,
    shards: list[Dataset],
    scenario: Scenario,
    initial_params: FlatVector,
) -> RunLog:
    """Run T federated rounds and record the per-round evaluation curve."""
    if len(shards) != config.n_clients:
        raise ConfigError(f"{len(shards)} shards for {config.n_clients} clients")
    log = RunLog(initial_params=initial_params.copy())
    params = initial_params.copy()
    if scenario.record_trace:
        log.trace = forensics.GradientTrace()
    plan = scenario.poison
    payload = PAYLOAD_FOR_RULE[scenario.aggregation]

    def evaluate(t):
        row = {"round": t}
        if len(scenario.test_images):
            rep = eval_model(
                spec, params, scenario.test_images, scenario.test_labels,
                scenario.victim_class,
            )
            row.update(
                accuracy=rep.accuracy, victim_f1=rep.victim_f1, rest_f1=rep.rest_f1
            )
        return row

    log.rows.append(evaluate(0))
    for t in range(config.rounds):
        in_window = plan.in_window(t) if plan is not None else False
        sample_rng = np.random.default_rng([config.seed, STREAM_SAMPLING, t])
        selected = sample_clients(
            config.n_clients,
            config.participants,
            plan.malicious_ids if plan is not None else (),
            plan.spec.availability if (plan is not None and in_window) else 0.0,
            in_window,
            sample_rng,
        )
        if scenario.defense is not None:
            scenario.defense.start_round(t)
        updates = []
        for cid in selected:
            shard = shards[cid]
            if plan is not None and in_window and cid in plan.malicious_ids:
                poison_rng = np.random.default_rng([config.seed, STREAM_POISON, t, cid])
                shard = plan.poison_shard(shard, poison_rng)
            train_rng = np.random.default_rng([config.seed, STREAM_TRAIN, t, cid])
            defense_rng = np.random.default_rng([config.seed, STREAM_DEFENSE, t, cid])
            updates.append(
                local_train(
                    spec,
                    params,
                    shard,
                    config.local_iters,
                    config.batch_size,
                    config.local_lr,
                    train_rng,
                    client_id=cid,
                    payload=payload,
                    defense=scenario.defense,
                    defense_rng=defense_rng,
                )
            )
        updates.sort(key=lambda u: u.client_id)
        if log.trace is not None:
            cls_list = (
                scenario.trace_classes
                if scenario.trace_classes is not None
                else list(range(spec.classes))
            )
            for u in updates:
                log.trace.add(
                    forensics.TraceRecord(
                        round=t,
                        client_id=u.client_id,
                        norm=u.vector.l2(),
                        slices={
                            c: forensics.extract_class_slice(u.vector, spec, c)
                            for c in cls_list
                        },
                        is_malicious=(
                            u.client_id in plan.malicious_ids if plan is not None else False
                        ),
                    )
                )
        params = aggregate_with_removal(
            scenario.aggregation, params, config.global_lr, updates,
            scenario.excluded_clients,
        )
        if scenario.defense is not None:
            scenario.defense.finish_round()
        row = evaluate(t + 1)
        row["update_norm"] = float(np.mean([u.vector.l2() for u in updates]))
        if scenario.defense is not None and scenario.defense.policy.is_dp:
            row["sigma_t"] = scenario.defense.sigma_t
            if scenario.defense.ledger is not None:
                row["epsilon"] = scenario.defense.ledger.epsilon()
        log.rows.append(row)
        log.states.append(params.copy())
    log.final_params = params
    return log
