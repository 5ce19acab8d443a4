"""SCAFFOLD round state machine: broadcast, local training, aggregation.

Two formula modes exist side by side:

* ``standard`` follows the reference control-variate convention: local
  steps move along -eta_l*(g - c_i + c), the local control update is
  displacement-based, and the server steps toward the weighted client
  displacement.
* ``paper_literal`` executes the printed update rules verbatim: the local
  correction (c - c_i) is added unscaled after the gradient step, the
  local control closes over the last minibatch gradient, and the server
  update carries a minus sign (which moves the global model away from the
  clients and cannot learn; it exists so the printed forms stay testable).

Local training consumes an injected objective: any callable mapping
(params, sample_indices) -> (loss, grad). Closed-form objectives make the
arithmetic testable without a neural network; `DatasetObjective` adapts
the MLP and a dataset to the same surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from . import mlp
from .datasets import Dataset
from .errors import DimensionMismatch, NoDeliveredUpdates, NonFiniteLoss
from .vectors import ParamVector

MODES = ("paper_literal", "standard")

Objective = Callable[[ParamVector, np.ndarray], tuple[float, ParamVector]]


@dataclass
class ClientFlags:
    """Adversity markers attached to a node."""

    poisoned: bool = False
    loss_affected: bool = False
    delay: int = 0

    def merged_with(self, other: "ClientFlags") -> "ClientFlags":
        return ClientFlags(
            poisoned=self.poisoned or other.poisoned,
            loss_affected=self.loss_affected or other.loss_affected,
            delay=max(self.delay, other.delay),
        )


@dataclass
class ClientState:
    """One simulated node: its data slice, local model and control vector."""

    id: int
    partition_indices: np.ndarray
    x_i: ParamVector
    c_i: ParamVector
    flags: ClientFlags = field(default_factory=ClientFlags)

    def __post_init__(self):
        self.partition_indices = np.asarray(self.partition_indices, dtype=np.int64)
        if self.n_i < 1:
            raise ValueError(f"client {self.id} has no samples")
        if self.x_i.shape != self.c_i.shape:
            raise DimensionMismatch("local model and control vector dims differ")

    @property
    def n_i(self) -> int:
        return int(self.partition_indices.shape[0])


@dataclass
class ServerState:
    """Global model/control pair plus the round schedule knobs."""

    x: ParamVector
    c: ParamVector
    t: int = 0
    eta_g: float = 1.0
    eta_l: float = 0.05
    local_epochs: int = 1
    mode: str = "standard"

    def __post_init__(self):
        if self.x.shape != self.c.shape:
            raise DimensionMismatch("global model and control vector dims differ")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class ClientUpdate:
    """What a client sends back: new model, new control, its weight."""

    client_id: int
    x_new: ParamVector
    c_new: ParamVector
    n_i: int
    delivered: bool = True
    mean_loss: float = float("nan")


@dataclass
class RoundReport:
    """Bookkeeping for one communication round."""

    round: int
    delivered_ids: list[int]
    skipped: bool = False
    mean_local_loss: float = float("nan")


class AdversitySchedule(Protocol):
    """What the round loop asks of an adversity model (duck-typed)."""

    def effective_epochs(self, client: ClientState, t: int, configured: int) -> int: ...

    def broadcast_view(
        self, history: list[tuple[ParamVector, ParamVector]], client: ClientState, t: int
    ) -> tuple[ParamVector, ParamVector]: ...

    def update_delivered(self, client: ClientState, t: int) -> bool: ...


class DatasetObjective:
    """Adapts the MLP and a dataset to the (params, indices) -> (loss, grad) surface."""

    def __init__(self, spec: mlp.ModelSpec, dataset: Dataset):
        self.spec = spec
        self.dataset = dataset

    def __call__(self, params: ParamVector, indices: np.ndarray) -> tuple[float, ParamVector]:
        batch = mlp.Batch(
            inputs=self.dataset.inputs[indices], labels=self.dataset.labels[indices]
        )
        return mlp.loss_and_grad(self.spec, params, batch)


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator | None):
    order = indices if rng is None else rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def client_local_update(
    client: ClientState,
    x_t: ParamVector,
    c_t: ParamVector,
    objective: Objective,
    epochs: int,
    eta_l: float,
    batch_size: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> ClientUpdate:
    """Run one client's local training pass and produce its update.

    The local model restarts from the broadcast x_t. Minibatches walk the
    client's partition in order after an optional per-epoch shuffle. A
    non-finite loss marks the update undelivered instead of raising.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if x_t.shape != c_t.shape or x_t.shape != client.c_i.shape:
        raise DimensionMismatch("broadcast/control dims disagree with client state")
    x = x_t.copy()
    c_i = client.c_i
    correction = c_t - c_i
    steps = 0
    last_grad = np.zeros_like(x)
    loss_sum = 0.0
    try:
        for _ in range(epochs):
            for batch_idx in _batches(client.partition_indices, batch_size, rng):
                loss, g = objective(x, batch_idx)
                if mode == "paper_literal":
                    x = x - eta_l * g + correction
                else:
                    x = x - eta_l * (g - c_i + c_t)
                steps += 1
                last_grad = g
                loss_sum += loss
    except NonFiniteLoss:
        return ClientUpdate(
            client_id=client.id,
            x_new=client.x_i,
            c_new=client.c_i,
            n_i=client.n_i,
            delivered=False,
        )

    if mode == "paper_literal":
        c_new = c_i + (c_t - c_i) - eta_l * last_grad
    else:
        c_new = c_i - c_t + (x_t - x) / (steps * eta_l)
    return ClientUpdate(
        client_id=client.id,
        x_new=x,
        c_new=c_new,
        n_i=client.n_i,
        delivered=True,
        mean_loss=loss_sum / steps,
    )


def server_aggregate(
    server: ServerState, updates: list[ClientUpdate], mode: str | None = None
) -> ParamVector:
    """Combine delivered client models into the next global model.

    Weights are n_i/n over delivered updates only. standard mode steps
    toward the weighted displacement; paper_literal applies the printed
    minus sign.
    """
    mode = server.mode if mode is None else mode
    delivered = [u for u in updates if u.delivered]
    if not delivered:
        raise NoDeliveredUpdates("no delivered updates to aggregate")
    n = float(sum(u.n_i for u in delivered))
    delta = np.zeros_like(server.x)
    for u in delivered:
        delta += (u.n_i / n) * (u.x_new - server.x)
    if mode == "paper_literal":
        return server.x - server.eta_g * delta
    return server.x + server.eta_g * delta


def update_global_control(
    c_t: ParamVector, updates: list[ClientUpdate], K: int | None = None
) -> ParamVector:
    """c <- c + (1/K) * sum(c_i_new - c) over delivered updates.

    The per-client term subtracts the global control, not the client's
    previous local control, matching the printed aggregation rule. K
    defaults to the delivered count.
    """
    delivered = [u for u in updates if u.delivered]
    if not delivered:
        raise NoDeliveredUpdates("no delivered updates for the control average")
    if K is None:
        K = len(delivered)
    if K < 1:
        raise ValueError("K must be >= 1")
    acc = np.zeros_like(c_t)
    for u in delivered:
        acc += u.c_new - c_t
    return c_t + acc / K


def run_round(
    server: ServerState,
    clients: list[ClientState],
    objective: Objective,
    batch_size: int,
    adversity: AdversitySchedule | None = None,
    history: list[tuple[ParamVector, ParamVector]] | None = None,
    shuffle_rng_for: Callable[[int, int], np.random.Generator] | None = None,
) -> tuple[ServerState, list[ClientState], RoundReport]:
    """Execute one communication round and return the successor states.

    Broadcast (possibly stale under a delay schedule), train every client,
    filter undelivered updates, aggregate model and control, persist each
    delivered client's new local state. If every update is dropped the
    round still counts but the global state is unchanged.
    """
    t = server.t
    if history is not None:
        if len(history) != t:
            raise ValueError(f"history has {len(history)} snapshots, expected {t}")
        history.append((server.x, server.c))

    updates: list[ClientUpdate] = []
    for client in clients:
        x_view, c_view = server.x, server.c
        epochs = server.local_epochs
        if adversity is not None:
            if history is not None:
                x_view, c_view = adversity.broadcast_view(history, client, t)
            epochs = adversity.effective_epochs(client, t, server.local_epochs)
        rng = shuffle_rng_for(client.id, t) if shuffle_rng_for is not None else None
        update = client_local_update(
            client, x_view, c_view, objective, epochs, server.eta_l, batch_size, server.mode, rng
        )
        if adversity is not None and update.delivered:
            update.delivered = adversity.update_delivered(client, t)
        updates.append(update)

    delivered = [u for u in updates if u.delivered]
    if not delivered:
        report = RoundReport(round=t, delivered_ids=[], skipped=True)
        return replace(server, t=t + 1), clients, report

    x_next = server_aggregate(server, updates)
    c_next = update_global_control(server.c, updates)
    by_id = {u.client_id: u for u in delivered}
    new_clients = []
    for client in clients:
        u = by_id.get(client.id)
        if u is None:
            new_clients.append(client)
        else:
            new_clients.append(replace(client, x_i=u.x_new, c_i=u.c_new))
    report = RoundReport(
        round=t,
        delivered_ids=[u.client_id for u in delivered],
        mean_local_loss=float(np.mean([u.mean_loss for u in delivered])),
    )
    return replace(server, x=x_next, c=c_next, t=t + 1), new_clients, report
