"""Analytical link-budget model for the federation rounds.

Capacities follow the Shannon form with unit noise variance. The
downlink broadcast is limited by the weakest client; the uplink spectrum
is shared evenly, so each of C clients gets T_U/C channel uses at the
multi-access rate log2(1 + C |h|^2 P_U). Budgets are reporting-only:
the training loop always delivers full payloads and infeasibility is
flagged, never simulated as loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

BIT_RESOLUTION = 32

FADING_MODES = ("unit", "rayleigh", "fixed")

_DOWNLINK, _UPLINK = 0, 1


@dataclass(frozen=True)
class ChannelConfig:
    """Link parameters; channel uses T and powers P are linear scale."""

    t_down: float = 1e6
    t_up: float = 1e6
    p_down: float = 1.0
    p_up: float = 1.0
    fading: str = "unit"
    rayleigh_scale: float = 1.0
    seed: int = 0
    bit_resolution: int = BIT_RESOLUTION
    # fading="fixed" only: per-client squared gains, cycled when a round
    # involves more clients than entries
    fixed_down_gains: tuple[float, ...] = (1.0,)
    fixed_up_gains: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if min(self.t_down, self.t_up, self.p_down, self.p_up) <= 0:
            raise ConfigError("channel uses and powers must be positive")
        if self.fading not in FADING_MODES:
            raise ConfigError(f"unknown fading mode {self.fading!r}; choose from {FADING_MODES}")
        if self.fading == "rayleigh" and self.rayleigh_scale <= 0:
            raise ConfigError("rayleigh_scale must be positive")
        if self.bit_resolution < 1:
            raise ConfigError("bit_resolution must be >= 1")
        if self.fading == "fixed":
            for gains in (self.fixed_down_gains, self.fixed_up_gains):
                if len(gains) == 0 or min(gains) < 0:
                    raise ConfigError("fixed gains must be a nonempty tuple of values >= 0")


def squared_gain(cfg: ChannelConfig, link: int, round_idx: int, client: int) -> float:
    """|g|^2 (downlink) or |h|^2 (uplink) for one client in one round.

    Unit fading is the constant 1, so every round looks the same; fixed
    fading reads the configured per-client gain tables; Rayleigh amplitude
    fading makes the squared gain exponential, drawn from a stream keyed
    by (link, round, client) so gains are quasi-static within a round and
    reproducible across reruns.
    """
    if cfg.fading == "unit":
        return 1.0
    if cfg.fading == "fixed":
        gains = cfg.fixed_down_gains if link == _DOWNLINK else cfg.fixed_up_gains
        return float(gains[client % len(gains)])
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(link, round_idx, client))
    )
    return float(rng.exponential(cfg.rayleigh_scale))


def downlink_bits(cfg: ChannelConfig, n_clients: int, round_idx: int = 0) -> float:
    """Broadcast budget: min over clients of T_D log2(1 + |g|^2 P_D)."""
    if n_clients < 1:
        raise ConfigError("downlink budget needs at least one client")
    return min(
        cfg.t_down * math.log2(1.0 + squared_gain(cfg, _DOWNLINK, round_idx, c) * cfg.p_down)
        for c in range(n_clients)
    )


def uplink_bits_per_client(
    cfg: ChannelConfig, n_clients: int, client: int, round_idx: int = 0
) -> float:
    """Per-client upload budget under even sharing:
    (T_U / C) log2(1 + C |h|^2 P_U)."""
    if not 0 <= client < n_clients:
        raise ConfigError(f"client {client} outside [0, {n_clients})")
    gain = squared_gain(cfg, _UPLINK, round_idx, client)
    return (cfg.t_up / n_clients) * math.log2(1.0 + n_clients * gain * cfg.p_up)


def payload_bits(n_params: int, bit_resolution: int = BIT_RESOLUTION) -> int:
    """Bits one device transmits for a full model: parameter count times
    bits per parameter."""
    if n_params < 0 or bit_resolution < 1:
        raise ConfigError("parameter count must be >= 0 and resolution >= 1")
    return n_params * bit_resolution


def feasibility_report(
    cfg: ChannelConfig, n_params: int, client_counts: list[int], round_idx: int = 0
) -> list[dict]:
    """Per-client-count accounting table: payload, budgets, and whether
    the payload fits each budget. Input for load-vs-participants plots."""
    payload = payload_bits(n_params, cfg.bit_resolution)
    rows = []
    for n_clients in client_counts:
        if n_clients < 1:
            raise ConfigError(f"client count must be >= 1, got {n_clients}")
        per_client = min(
            uplink_bits_per_client(cfg, n_clients, c, round_idx) for c in range(n_clients)
        )
        down = downlink_bits(cfg, n_clients, round_idx)
        rows.append(
            {
                "n_clients": n_clients,
                "payload_bits": payload,
                "per_client_uplink_bits": per_client,
                "total_uplink_bits": n_clients * payload,
                "downlink_bits": down,
                "uplink_feasible": payload <= per_client,
                "downlink_feasible": payload <= down,
            }
        )
    return rows
