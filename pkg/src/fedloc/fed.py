"""Federated averaging over virtual clients.

One round: the server broadcasts the global parameters, every client
runs its local epochs on its own shard, and the server replaces the
global model with the dataset-size-weighted average of the client
results. Only parameters and batch-norm running statistics travel;
optimizer moments start fresh each round. The weighted average is
accumulated in float64 and cast back to float32, which makes the
single-client and all-clients-equal cases bit-exact identities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .channel import BIT_RESOLUTION, payload_bits
from .dataset import Partition, ProcessedSet
from .errors import ConfigError, NumericError
from .hmodel import (
    HMlpConfig,
    HierNet,
    build_model,
    evaluate,
    evaluate_loss,
    fit_epochs,
    train_stream,
)
from .metrics import LocalizationMetrics


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 5
    local_epochs: int = 10
    batch_size: int = 64
    rounds: int = 100
    lr: float = 5e-4
    beta1: float = 0.1
    beta2: float = 0.99
    convergence_tol: float = 1e-4
    patience: int = 5
    seed: int = 0
    local_optimizer: str = "adam"

    def __post_init__(self):
        if self.n_clients < 1 or self.local_epochs < 1 or self.rounds < 1:
            raise ConfigError("n_clients, local_epochs and rounds must all be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.local_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown local optimizer {self.local_optimizer!r}")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    n_records: int
    state: dict[str, np.ndarray]
    loss_trajectory: tuple[float, ...]

    def checksum(self) -> str:
        return nn.state_checksum(sorted(self.state.items()))


@dataclass(frozen=True)
class RoundReport:
    round_idx: int
    client_losses: tuple[tuple[float, ...], ...]  # per client, per local epoch
    client_checksums: tuple[str, ...]
    eval_loss: float
    metrics: LocalizationMetrics
    uplink_bits_total: int
    downlink_bits: int

    def final_client_losses(self) -> tuple[float, ...]:
        return tuple(traj[-1] for traj in self.client_losses)


def server_init(model_cfg: HMlpConfig, seed: int) -> HierNet:
    """Build and initialize the global model (round 0)."""
    return build_model(model_cfg, seed)


def broadcast(state: dict[str, np.ndarray], n_clients: int) -> list[dict[str, np.ndarray]]:
    """Independent value copies of the global state, one per client."""
    return [{name: arr.copy() for name, arr in state.items()} for _ in range(n_clients)]


def client_local_training(
    shard: ProcessedSet,
    global_state: dict[str, np.ndarray],
    model_cfg: HMlpConfig,
    cfg: FedConfig,
    client_id: int,
    round_idx: int,
) -> ClientUpdate:
    """Local epochs on one client's shard, starting from the broadcast
    parameters with a fresh optimizer. The shuffle/dropout stream is
    derived from (seed, client_id, round_idx) so reruns and reorderings
    reproduce bit-identical results."""
    if len(shard) == 0:
        raise NumericError(f"client {client_id}: empty shard")
    net = build_model(model_cfg, cfg.seed)
    net.import_state(global_state)
    params = [arr for _, arr in net.trainable()]
    if cfg.local_optimizer == "sgd":
        optimizer: nn.Adam | nn.SGD = nn.SGD(params, lr=cfg.lr)
    else:
        optimizer = nn.Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = train_stream(cfg.seed, client_id, round_idx)
    history = fit_epochs(
        net, shard, cfg.local_epochs, cfg.batch_size, optimizer, rng,
        context=f"client {client_id} round {round_idx}",
    )
    return ClientUpdate(
        client_id=client_id,
        n_records=len(shard),
        state=net.export_state(),
        loss_trajectory=tuple(row["global_loss"] for row in history),
    )


def aggregate(updates: list[ClientUpdate]) -> dict[str, np.ndarray]:
    """Dataset-size-weighted average of client states.

    Summation runs in client-id order with float64 accumulation, then
    casts back to float32: permutation of the input list cannot change
    the result, and a single client (or all-equal clients) comes back
    bit-identical.
    """
    if not updates:
        raise NumericError("aggregate needs at least one client update")
    if any(u.n_records <= 0 for u in updates):
        raise NumericError("client dataset sizes must be positive")
    ordered = sorted(updates, key=lambda u: u.client_id)
    names = sorted(ordered[0].state)
    for u in ordered[1:]:
        if sorted(u.state) != names:
            raise NumericError("client states disagree on tensor names")
    total = float(sum(u.n_records for u in ordered))
    merged: dict[str, np.ndarray] = {}
    for name in names:
        shape = ordered[0].state[name].shape
        acc = np.zeros(shape, dtype=np.float64)
        for u in ordered:
            if u.state[name].shape != shape:
                raise NumericError(f"{name}: client tensor shapes disagree")
            acc += u.n_records * u.state[name].astype(np.float64)
        merged[name] = (acc / total).astype(np.float32)
    return merged


def run_federation(
    train_set: ProcessedSet,
    partition: Partition,
    eval_set: ProcessedSet,
    cfg: FedConfig,
    model_cfg: HMlpConfig,
    on_round: Callable[[RoundReport], None] | None = None,
) -> tuple[HierNet, list[RoundReport]]:
    """Round loop: broadcast, local training, aggregate, evaluate.

    Stops after `rounds` rounds or once the relative eval-loss
    improvement stays below `convergence_tol` for `patience` consecutive
    rounds. Completed-round reports are preserved even when a later
    client fails.
    """
    if partition.n_clients != cfg.n_clients:
        raise ConfigError(
            f"partition has {partition.n_clients} shards but config says "
            f"{cfg.n_clients} clients"
        )
    net = server_init(model_cfg, cfg.seed)
    global_state = net.export_state()
    shards = [train_set.subset(idx) for idx in partition.client_shards]
    payload = payload_bits(net.parameter_count(), BIT_RESOLUTION)

    reports: list[RoundReport] = []
    prev_loss: float | None = None
    stall_streak = 0
    for r in range(cfg.rounds):
        client_states = broadcast(global_state, cfg.n_clients)
        updates = [
            client_local_training(shards[c], client_states[c], model_cfg, cfg, c, r)
            for c in range(cfg.n_clients)
        ]
        global_state = aggregate(updates)
        net.import_state(global_state)
        eval_loss, _ = evaluate_loss(net, eval_set)
        report = RoundReport(
            round_idx=r,
            client_losses=tuple(u.loss_trajectory for u in updates),
            client_checksums=tuple(u.checksum() for u in updates),
            eval_loss=eval_loss,
            metrics=evaluate(net, eval_set),
            uplink_bits_total=cfg.n_clients * payload,
            downlink_bits=payload,
        )
        reports.append(report)
        if on_round is not None:
            on_round(report)

        if prev_loss is not None:
            improvement = (prev_loss - eval_loss) / max(abs(prev_loss), 1e-12)
            stall_streak = stall_streak + 1 if improvement < cfg.convergence_tol else 0
            if stall_streak >= cfg.patience:
                break
        prev_loss = eval_loss
    return net, reports
