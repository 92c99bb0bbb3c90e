"""Hierarchical multitask positioning network and its training loops.

A shared trunk feeds three heads: building classification, floor
classification, and planar location regression. The hierarchy wiring
decides what the lower heads see: "concat-probs" appends the building
head's softmax to the floor branch input and the floor softmax to the
location branch input, "concat-logits" appends raw logits instead, and
"flat" attaches every head directly to the trunk. Gradients flow through
the concatenated head outputs back into the trunk and upper heads; there
is no stop-gradient anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import nn
from .dataset import ProcessedSet, denormalize_coords
from .errors import ConfigError, NumericError
from .metrics import LocalizationMetrics, compute_metrics

WIRINGS = ("concat-probs", "concat-logits", "flat")

DEFAULT_ALPHAS = (0.1, 0.3, 0.6)


@dataclass(frozen=True)
class HMlpConfig:
    """Architecture description; defaults reproduce the reference setup."""

    input_dim: int
    n_buildings: int
    n_floors: int
    trunk_widths: tuple[int, int] = (256, 128)
    trunk_dropout: float = 0.3
    branch_hidden: int = 128
    branch_dropout: float = 0.1
    alphas: tuple[float, float, float] = DEFAULT_ALPHAS
    wiring: str = "concat-probs"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.wiring not in WIRINGS:
            raise ConfigError(f"unknown wiring {self.wiring!r}; choose from {WIRINGS}")
        if min(self.alphas) <= 0:
            raise ConfigError(f"loss weights must be positive, got {self.alphas}")
        if self.input_dim < 1 or self.n_buildings < 1 or self.n_floors < 1:
            raise ConfigError("input_dim and class counts must be >= 1")

    @property
    def trunk_out(self) -> int:
        return self.trunk_widths[-1]

    @property
    def floor_in(self) -> int:
        return self.trunk_out + (0 if self.wiring == "flat" else self.n_buildings)

    @property
    def location_in(self) -> int:
        return self.trunk_out + (0 if self.wiring == "flat" else self.n_floors)

    def to_dict(self) -> dict:
        return {
            "kind": "hier-mlp",
            "input_dim": self.input_dim,
            "n_buildings": self.n_buildings,
            "n_floors": self.n_floors,
            "trunk_widths": list(self.trunk_widths),
            "trunk_dropout": self.trunk_dropout,
            "branch_hidden": self.branch_hidden,
            "branch_dropout": self.branch_dropout,
            "alphas": list(self.alphas),
            "wiring": self.wiring,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "layer_order": "dense-bn-relu-dropout",
            "init": {"relu_layers": "he-uniform", "heads": "glorot-uniform"},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HMlpConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            n_buildings=int(d["n_buildings"]),
            n_floors=int(d["n_floors"]),
            trunk_widths=tuple(d.get("trunk_widths", (256, 128))),
            trunk_dropout=float(d.get("trunk_dropout", 0.3)),
            branch_hidden=int(d.get("branch_hidden", 128)),
            branch_dropout=float(d.get("branch_dropout", 0.1)),
            alphas=tuple(d.get("alphas", DEFAULT_ALPHAS)),
            wiring=str(d.get("wiring", "concat-probs")),
            bn_momentum=float(d.get("bn_momentum", 0.9)),
            bn_eps=float(d.get("bn_eps", 1e-5)),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    lr: float = 5e-4
    beta1: float = 0.1
    beta2: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")


@dataclass(frozen=True)
class PositionEstimate:
    """One record's estimate: classes, planar position in meters, and the
    head distributions behind the argmax decisions."""

    building: int
    floor: int
    x: float
    y: float
    building_probs: np.ndarray
    floor_probs: np.ndarray


class ForwardOut(NamedTuple):
    logits_b: np.ndarray
    probs_b: np.ndarray
    logits_f: np.ndarray
    probs_f: np.ndarray
    location: np.ndarray


class _Sequential:
    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x, *, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def _block(in_dim: int, out_dim: int, dropout: float, rng, prefix: str, cfg: HMlpConfig) -> list:
    return [
        nn.Dense(in_dim, out_dim, rng=rng, init="he", name=f"{prefix}.fc"),
        nn.BatchNorm(out_dim, momentum=cfg.bn_momentum, eps=cfg.bn_eps, name=f"{prefix}.bn"),
        nn.ReLU(name=f"{prefix}.relu"),
        nn.Dropout(dropout, name=f"{prefix}.drop"),
    ]


class HierNet:
    """The assembled network. Heads are wired building -> floor ->
    location (acyclic); the trunk is constructed first so that identical
    seeds give identical trunk initializations across wirings."""

    def __init__(self, cfg: HMlpConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        w1, w2 = cfg.trunk_widths
        self.trunk = _Sequential(
            _block(cfg.input_dim, w1, cfg.trunk_dropout, rng, "trunk1", cfg)
            + _block(w1, w2, cfg.trunk_dropout, rng, "trunk2", cfg)
        )
        self.head_b = nn.Dense(cfg.trunk_out, cfg.n_buildings, rng=rng, init="glorot",
                               name="building.out")
        self.floor = _Sequential(
            _block(cfg.floor_in, cfg.branch_hidden, cfg.branch_dropout, rng, "floor", cfg)
            + [nn.Dense(cfg.branch_hidden, cfg.n_floors, rng=rng, init="glorot",
                        name="floor.out")]
        )
        self.loc = _Sequential(
            _block(cfg.location_in, cfg.branch_hidden, cfg.branch_dropout, rng, "loc", cfg)
            + [nn.Dense(cfg.branch_hidden, 2, rng=rng, init="glorot", name="loc.out")]
        )
        self._all_layers = (
            self.trunk.layers + [self.head_b] + self.floor.layers + self.loc.layers
        )

    # ---- forward / backward ----

    def forward(self, x: np.ndarray, *, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOut:
        t = self.trunk.forward(x, training=training, rng=rng)
        logits_b = self.head_b.forward(t, training=training, rng=rng)
        probs_b = nn.softmax(logits_b)
        if self.cfg.wiring == "concat-probs":
            floor_in = np.concatenate([t, probs_b], axis=1)
        elif self.cfg.wiring == "concat-logits":
            floor_in = np.concatenate([t, logits_b], axis=1)
        else:
            floor_in = t
        logits_f = self.floor.forward(floor_in, training=training, rng=rng)
        probs_f = nn.softmax(logits_f)
        if self.cfg.wiring == "concat-probs":
            loc_in = np.concatenate([t, probs_f], axis=1)
        elif self.cfg.wiring == "concat-logits":
            loc_in = np.concatenate([t, logits_f], axis=1)
        else:
            loc_in = t
        location = self.loc.forward(loc_in, training=training, rng=rng)
        return ForwardOut(logits_b, probs_b, logits_f, probs_f, location)

    def backward(self, out: ForwardOut, dlogits_b: np.ndarray,
                 dlogits_f: np.ndarray, dlocation: np.ndarray) -> None:
        w = self.cfg.trunk_out
        d_loc_in = self.loc.backward(dlocation)
        if self.cfg.wiring == "flat":
            dt_loc, dzf_extra = d_loc_in, 0.0
        else:
            dt_loc = d_loc_in[:, :w]
            tail = d_loc_in[:, w:]
            if self.cfg.wiring == "concat-probs":
                dzf_extra = nn.softmax_jvp_backward(out.probs_f, tail)
            else:
                dzf_extra = tail
        d_floor_in = self.floor.backward(dlogits_f + dzf_extra)
        if self.cfg.wiring == "flat":
            dt_floor, dzb_extra = d_floor_in, 0.0
        else:
            dt_floor = d_floor_in[:, :w]
            tail = d_floor_in[:, w:]
            if self.cfg.wiring == "concat-probs":
                dzb_extra = nn.softmax_jvp_backward(out.probs_b, tail)
            else:
                dzb_extra = tail
        dt_building = self.head_b.backward(dlogits_b + dzb_extra)
        self.trunk.backward(dt_building + dt_floor + dt_loc)

    # ---- parameter plumbing ----

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self._all_layers:
            out.extend(layer.trainable())
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self._all_layers:
            out.extend(layer.gradients())
        return out

    def stateful(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self._all_layers:
            out.extend(layer.stateful())
        return out

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return self.trainable() + self.stateful()

    def parameter_count(self) -> int:
        return sum(int(arr.size) for _, arr in self.trainable())

    def checksum(self) -> str:
        return nn.state_checksum(self.named_tensors())

    def export_state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.named_tensors()}

    def import_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        if set(own) != set(tensors):
            raise NumericError("tensor names do not match this architecture")
        for name, arr in own.items():
            src = tensors[name]
            if src.shape != arr.shape:
                raise NumericError(f"{name}: shape {src.shape} != expected {arr.shape}")
            np.copyto(arr, src)


def build_model(cfg: HMlpConfig, seed: int) -> HierNet:
    return HierNet(cfg, seed)


def parameter_count(cfg: HMlpConfig) -> int:
    return build_model(cfg, seed=0).parameter_count()


# ---- losses ----


def multitask_loss(out: ForwardOut, buildings: np.ndarray, floors: np.ndarray,
                   coords: np.ndarray, alphas: tuple[float, float, float]
                   ) -> tuple[float, dict[str, float]]:
    """Normalized weighted sum of the three head losses:
    (a_b L_b + a_f L_f + a_l L_l) / (a_b + a_f + a_l)."""
    total, per_head, _ = _multitask_loss_grads(out, buildings, floors, coords, alphas)
    return total, per_head


def _multitask_loss_grads(out: ForwardOut, buildings, floors, coords, alphas):
    a_b, a_f, a_l = alphas
    norm = a_b + a_f + a_l
    loss_b, dzb, _ = nn.softmax_xent(out.logits_b, buildings)
    loss_f, dzf, _ = nn.softmax_xent(out.logits_f, floors)
    loss_l, dloc = nn.mse_loss(out.location, coords.astype(out.location.dtype))
    total = (a_b * loss_b + a_f * loss_f + a_l * loss_l) / norm
    per_head = {"building": loss_b, "floor": loss_f, "location": loss_l}
    scale = np.float32
    grads = (dzb * scale(a_b / norm), dzf * scale(a_f / norm), dloc * scale(a_l / norm))
    return total, per_head, grads


# ---- training ----


def train_stream(seed: int, client_id: int = 0, round_idx: int = 0) -> np.random.Generator:
    """Batch-order/dropout stream for one training task. Central training
    is the (client 0, round 0) stream, so a single-client federation
    round consumes exactly the same randomness as its central twin."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(client_id, round_idx))
    )


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    slices = [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    # a trailing single record cannot pass train-mode batch norm; fold it
    # into the previous batch
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        last = slices.pop()
        prev = slices.pop()
        slices.append(slice(prev.start, last.stop))
    return slices


def fit_epochs(
    net: HierNet,
    data: ProcessedSet,
    epochs: int,
    batch_size: int,
    optimizer: nn.Adam,
    rng: np.random.Generator,
    context: str = "central",
) -> list[dict]:
    """Run shuffled mini-batch epochs in place; returns per-epoch history
    rows (epoch, global_loss, loss_b, loss_f, loss_l), training-mode
    losses averaged over the epoch."""
    n = len(data)
    if n == 0:
        raise NumericError(f"{context}: cannot train on an empty set")
    alphas = net.cfg.alphas
    params = [arr for _, arr in net.trainable()]
    history: list[dict] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        sums = {"total": 0.0, "building": 0.0, "floor": 0.0, "location": 0.0}
        for bi, sl in enumerate(_batch_slices(n, batch_size)):
            idx = order[sl]
            try:
                out = net.forward(data.features[idx], training=True, rng=rng)
                total, per_head, (dzb, dzf, dloc) = _multitask_loss_grads(
                    out, data.buildings[idx], data.floors[idx], data.coords[idx], alphas
                )
                net.backward(out, dzb, dzf, dloc)
                optimizer.step(params, net.gradients())
            except NumericError as exc:
                raise NumericError(f"{context}: epoch {epoch} batch {bi}: {exc}") from exc
            k = len(idx)
            sums["total"] += total * k
            for head, value in per_head.items():
                sums[head] += value * k
        history.append(
            {
                "epoch": epoch,
                "global_loss": sums["total"] / n,
                "loss_b": sums["building"] / n,
                "loss_f": sums["floor"] / n,
                "loss_l": sums["location"] / n,
            }
        )
    return history


def train_central(
    train_set: ProcessedSet, model_cfg: HMlpConfig, cfg: TrainConfig
) -> tuple[HierNet, list[dict]]:
    """Plain (non-federated) training per the reference configuration."""
    net = build_model(model_cfg, cfg.seed)
    optimizer = nn.Adam(
        [arr for _, arr in net.trainable()],
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
    )
    rng = train_stream(cfg.seed)
    history = fit_epochs(net, train_set, cfg.epochs, cfg.batch_size, optimizer, rng)
    return net, history


# ---- inference ----


@dataclass(frozen=True)
class Predictions:
    buildings: np.ndarray    # (n,) int64 argmax, ties to the lowest index
    floors: np.ndarray       # (n,) int64
    xy_norm: np.ndarray      # (n, 2) float64
    xy_meters: np.ndarray    # (n, 2) float64
    probs_b: np.ndarray
    probs_f: np.ndarray

    def estimates(self) -> Iterator[PositionEstimate]:
        for i in range(len(self.buildings)):
            yield PositionEstimate(
                building=int(self.buildings[i]),
                floor=int(self.floors[i]),
                x=float(self.xy_meters[i, 0]),
                y=float(self.xy_meters[i, 1]),
                building_probs=self.probs_b[i],
                floor_probs=self.probs_f[i],
            )


def predict(net: HierNet, features: np.ndarray,
            norm_bounds: tuple[float, float, float, float]) -> Predictions:
    """Eval-mode inference: dropout off, batch-norm running statistics.
    Locations are denormalized to meters with the given bounds."""
    out = net.forward(features, training=False)
    xy_norm = out.location.astype(np.float64)
    return Predictions(
        buildings=out.probs_b.argmax(axis=1).astype(np.int64),
        floors=out.probs_f.argmax(axis=1).astype(np.int64),
        xy_norm=xy_norm,
        xy_meters=denormalize_coords(xy_norm, norm_bounds),
        probs_b=out.probs_b,
        probs_f=out.probs_f,
    )


def evaluate(net: HierNet, data: ProcessedSet) -> LocalizationMetrics:
    """Metric bundle on one set, distances in meters. Pure: parameters
    and running statistics are untouched."""
    preds = predict(net, data.features, data.norm_bounds)
    return compute_metrics(
        preds.buildings,
        preds.floors,
        preds.xy_meters,
        data.buildings,
        data.floors,
        data.coords_meters(),
    )


def evaluate_loss(net: HierNet, data: ProcessedSet) -> tuple[float, dict[str, float]]:
    """Eval-mode multitask loss on one set (used for convergence checks)."""
    out = net.forward(data.features, training=False)
    return multitask_loss(out, data.buildings, data.floors, data.coords, net.cfg.alphas)


# ---- persistence ----


def save_model(out_dir, net: HierNet, extra_meta: dict | None = None):
    meta = {"architecture": net.cfg.to_dict(), "seed": net.seed}
    if extra_meta:
        meta.update(extra_meta)
    return nn.save_checkpoint(out_dir, net.named_tensors(), meta)


def load_model(ckpt_dir) -> tuple[HierNet, dict]:
    meta, tensors = nn.load_checkpoint(ckpt_dir)
    cfg = HMlpConfig.from_dict(meta["architecture"])
    net = build_model(cfg, seed=int(meta.get("seed", 0)))
    net.import_state(tensors)
    return net, meta
