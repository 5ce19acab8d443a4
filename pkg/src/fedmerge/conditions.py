"""Seedable adverse-condition schedules for the round loop.

One run gets exactly one condition:

* ``normal`` — no interference; trajectories are byte-identical to running
  without any schedule at all.
* ``packet_loss`` — a fixed affected subset of clients loses the tail of
  its local pass: on a per-round Bernoulli(loss_prob) hit only the first
  epoch completes. An optional drop_prob extension can additionally lose
  the whole update (default off).
* ``poisoning`` — a fixed affected subset has a seeded fraction of its
  training labels flipped once at setup, before round 0.
* ``delay`` — the affected subset trains against a stale broadcast from
  ``delay_rounds`` earlier (clamped at round 0).

Every draw comes from a generator keyed by (seed, purpose tag, client id,
round), so schedules are pure functions of their ids: no draw order to
get wrong, nothing mutated after construction, and distinct purposes
cannot steal each other's randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .datasets import Dataset, poison_labels
from .engine import ClientState
from .errors import ConfigInvalid
from .vectors import ParamVector

CONDITIONS = ("normal", "packet_loss", "poisoning", "delay")

# purpose tags keeping the per-seed substreams apart
_TAG_SELECT = 11
_TAG_LOSS = 12
_TAG_DROP = 13
_TAG_POISON = 14


@dataclass(frozen=True)
class AdversityConfig:
    """Which condition applies and how hard it hits."""

    condition: str = "normal"
    affected_fraction: float = 0.3
    loss_prob: float = 0.8
    poison_fraction: float = 0.8
    poison_mode: str = "flip_map"
    delay_rounds: int = 2
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigInvalid(f"condition must be one of {CONDITIONS}")
        for name in ("affected_fraction", "loss_prob", "poison_fraction", "drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name} must be in [0, 1], got {v}")
        if self.delay_rounds < 0:
            raise ConfigInvalid("delay_rounds must be >= 0")


def select_affected(num_clients: int, fraction: float, seed: int) -> list[int]:
    """Seeded sample of floor(fraction * num_clients) client ids."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigInvalid(f"fraction must be in [0, 1], got {fraction}")
    k = math.floor(fraction * num_clients + 1e-9)
    if k == 0:
        return []
    rng = np.random.default_rng([seed, _TAG_SELECT])
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def mark_affected(clients: list[ClientState], config: AdversityConfig) -> list[ClientState]:
    """Stamp the condition's flag onto the seeded affected subset.

    Flags ride along through merging (OR semantics), so the schedule can
    key off them even after the roster changes.
    """
    if config.condition == "normal":
        return list(clients)
    affected = set(select_affected(len(clients), config.affected_fraction, config.seed))
    out = []
    for pos, client in enumerate(clients):
        if pos not in affected:
            out.append(client)
            continue
        if config.condition == "packet_loss":
            flags = replace(client.flags, loss_affected=True)
        elif config.condition == "poisoning":
            flags = replace(client.flags, poisoned=True)
        else:
            flags = replace(client.flags, delay=config.delay_rounds)
        out.append(replace(client, flags=flags))
    return out


def _bernoulli(seed: int, tag: int, client_id: int, t: int, p: float) -> bool:
    if p <= 0.0:
        return False
    if p >= 1.0:
        return True
    return bool(np.random.default_rng([seed, tag, client_id, t]).uniform() < p)


class Schedule:
    """Round-loop adapter: answers epoch, broadcast, and delivery queries."""

    def __init__(self, config: AdversityConfig):
        self.config = config

    def effective_epochs(self, client: ClientState, t: int, configured: int) -> int:
        if self.config.condition != "packet_loss" or not client.flags.loss_affected:
            return configured
        hit = _bernoulli(self.config.seed, _TAG_LOSS, client.id, t, self.config.loss_prob)
        return 1 if hit else configured

    def broadcast_view(
        self,
        history: list[tuple[ParamVector, ParamVector]],
        client: ClientState,
        t: int,
    ) -> tuple[ParamVector, ParamVector]:
        if self.config.condition != "delay" or client.flags.delay <= 0:
            return history[t]
        return history[max(0, t - client.flags.delay)]

    def update_delivered(self, client: ClientState, t: int) -> bool:
        if self.config.condition != "packet_loss" or not client.flags.loss_affected:
            return True
        return not _bernoulli(self.config.seed, _TAG_DROP, client.id, t, self.config.drop_prob)


def apply_poisoning(
    clients: list[ClientState], dataset: Dataset, config: AdversityConfig
) -> Dataset:
    """Flip labels on a seeded share of each poisoned client's samples.

    Runs once at setup. Each flagged client contributes
    floor(poison_fraction * n_i) of its own indices, chosen without
    replacement from its partition; everything else is untouched.
    """
    if config.condition != "poisoning" or config.poison_fraction == 0.0:
        return dataset
    chosen: list[np.ndarray] = []
    for client in clients:
        if not client.flags.poisoned:
            continue
        part = np.asarray(client.partition_indices)
        k = math.floor(config.poison_fraction * len(part) + 1e-9)
        if k == 0:
            continue
        rng = np.random.default_rng([config.seed, _TAG_POISON, client.id])
        chosen.append(part[rng.choice(len(part), size=k, replace=False)])
    if not chosen:
        return dataset
    indices = np.concatenate(chosen)
    return poison_labels(dataset, indices, config.poison_mode, seed=config.seed)
