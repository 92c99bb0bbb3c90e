"""UJIIndoorLoc-style fingerprint ingestion and preprocessing.

Pipeline: load the raw CSV, drop access points that carry no information,
convert the remaining RSSI readings to a bounded "powed" representation,
normalize coordinates, split train/test, and shard the training data
across simulated federation clients.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, ParseError, PartitionError, SchemaError

MISSING_SENTINEL = 100.0
RSSI_VALID_MIN = -104.0
RSSI_VALID_MAX = 0.0

PARTITION_STRATEGIES = ("iid-uniform", "by-user", "by-building")


@dataclass(frozen=True)
class CsvSchema:
    """Column naming convention of the input CSV."""

    ap_prefix: str = "WAP"
    x_col: str = "LONGITUDE"
    y_col: str = "LATITUDE"
    floor_col: str = "FLOOR"
    building_col: str = "BUILDINGID"
    user_col: str = "USERID"
    phone_col: str = "PHONEID"
    timestamp_col: str = "TIMESTAMP"

    def mandatory_columns(self) -> tuple[str, ...]:
        return (
            self.x_col,
            self.y_col,
            self.floor_col,
            self.building_col,
            self.user_col,
            self.phone_col,
            self.timestamp_col,
        )


UJI_SCHEMA = CsvSchema()


@dataclass(frozen=True)
class Fingerprint:
    """One survey record: an RSSI vector plus its position labels."""

    rssi: np.ndarray
    building: int
    floor: int
    x: float
    y: float
    user_id: int
    phone_id: int
    timestamp: int


@dataclass(frozen=True)
class FingerprintSet:
    """A fingerprint survey stored column-wise.

    ``rssi`` holds one row per record and one column per retained AP, raw
    dBm with ``MISSING_SENTINEL`` for APs that were not detected.
    """

    rssi: np.ndarray          # (n, n_aps) float64
    buildings: np.ndarray     # (n,) int64
    floors: np.ndarray        # (n,) int64
    x: np.ndarray             # (n,) float64, meters in the dataset frame
    y: np.ndarray             # (n,) float64
    user_ids: np.ndarray      # (n,) int64
    phone_ids: np.ndarray     # (n,) int64
    timestamps: np.ndarray    # (n,) int64
    ap_ids: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.ap_ids)) != len(self.ap_ids):
            raise SchemaError("duplicate AP column identifiers")
        if self.rssi.shape != (len(self.buildings), len(self.ap_ids)):
            raise SchemaError(
                f"RSSI matrix shape {self.rssi.shape} inconsistent with "
                f"{len(self.buildings)} records x {len(self.ap_ids)} APs"
            )

    def __len__(self) -> int:
        return self.rssi.shape[0]

    @property
    def n_aps(self) -> int:
        return len(self.ap_ids)

    @property
    def n_buildings(self) -> int:
        return int(self.buildings.max()) + 1 if len(self) else 0

    @property
    def n_floors(self) -> int:
        return int(self.floors.max()) + 1 if len(self) else 0

    @property
    def coord_bounds(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) enclosing every record."""
        return (
            float(self.x.min()),
            float(self.x.max()),
            float(self.y.min()),
            float(self.y.max()),
        )

    def fingerprint(self, i: int) -> Fingerprint:
        return Fingerprint(
            rssi=self.rssi[i].copy(),
            building=int(self.buildings[i]),
            floor=int(self.floors[i]),
            x=float(self.x[i]),
            y=float(self.y[i]),
            user_id=int(self.user_ids[i]),
            phone_id=int(self.phone_ids[i]),
            timestamp=int(self.timestamps[i]),
        )

    @property
    def records(self) -> list[Fingerprint]:
        """Materialize per-record views; intended for small sets."""
        return [self.fingerprint(i) for i in range(len(self))]


@dataclass(frozen=True)
class PreprocessConfig:
    """Knobs of the preprocessing pipeline.

    ``min_rssi`` is derived from the data (global minimum non-missing
    reading minus 1 dBm) when left at None.
    """

    visibility_threshold: float = 0.98
    missing_sentinel: float = MISSING_SENTINEL
    min_rssi: float | None = None
    powed_exponent: float = math.e

    def __post_init__(self):
        if not 0.0 < self.visibility_threshold <= 1.0:
            raise ConfigError(
                f"visibility_threshold must be in (0, 1], got {self.visibility_threshold}"
            )

    def config_hash(self) -> str:
        text = (
            f"tau={self.visibility_threshold!r};sentinel={self.missing_sentinel!r};"
            f"min_rssi={self.min_rssi!r};beta={self.powed_exponent!r}"
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ProcessedSet:
    """Model-ready fingerprints: powed features plus normalized labels."""

    features: np.ndarray      # (n, d) float32 in [0, 1]
    buildings: np.ndarray     # (n,) int64
    floors: np.ndarray        # (n,) int64
    coords: np.ndarray        # (n, 2) float64, normalized to training bounds
    norm_bounds: tuple[float, float, float, float]
    ap_ids: tuple[str, ...]
    min_rssi: float
    n_buildings: int
    n_floors: int
    user_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "ProcessedSet":
        indices = np.asarray(indices)
        return replace(
            self,
            features=self.features[indices],
            buildings=self.buildings[indices],
            floors=self.floors[indices],
            coords=self.coords[indices],
            user_ids=self.user_ids[indices] if len(self.user_ids) else self.user_ids,
        )

    def coords_meters(self) -> np.ndarray:
        """Labels denormalized back to the dataset's metric frame."""
        return denormalize_coords(self.coords, self.norm_bounds)


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of the training indices, one shard per client."""

    client_shards: tuple[np.ndarray, ...]
    strategy: str
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)

    def shard_sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.client_shards)


def normalize_coords(xy: np.ndarray, bounds: tuple[float, float, float, float]) -> np.ndarray:
    x_min, x_max, y_min, y_max = bounds
    span_x = x_max - x_min or 1.0
    span_y = y_max - y_min or 1.0
    out = np.empty_like(xy, dtype=np.float64)
    out[:, 0] = (xy[:, 0] - x_min) / span_x
    out[:, 1] = (xy[:, 1] - y_min) / span_y
    return out


def denormalize_coords(xy: np.ndarray, bounds: tuple[float, float, float, float]) -> np.ndarray:
    x_min, x_max, y_min, y_max = bounds
    out = np.empty_like(xy, dtype=np.float64)
    out[:, 0] = xy[:, 0] * (x_max - x_min) + x_min
    out[:, 1] = xy[:, 1] * (y_max - y_min) + y_min
    return out


def load_csv(path: str | Path, schema: CsvSchema = UJI_SCHEMA) -> FingerprintSet:
    """Read one UJIIndoorLoc-dialect CSV into a FingerprintSet.

    AP columns are recognized by ``schema.ap_prefix`` and kept in file
    order. Raises SchemaError for missing mandatory columns and
    ParseError (with the offending row number) for non-numeric cells or
    RSSI values outside the sentinel/[-104, 0] dBm contract.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path.name}: {exc}") from exc

    ap_cols = [c for c in frame.columns if c.startswith(schema.ap_prefix)]
    if not ap_cols:
        raise SchemaError(f"{path.name}: no '{schema.ap_prefix}*' AP columns in header")
    missing = [c for c in schema.mandatory_columns() if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing mandatory column(s) {missing}")

    rssi = frame[ap_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad_rows = np.flatnonzero(~np.isfinite(rssi).all(axis=1))
    if len(bad_rows):
        # +2: header line plus 1-based numbering
        raise ParseError(f"{path.name}: non-numeric RSSI value at row {bad_rows[0] + 2}")

    observed = rssi != MISSING_SENTINEL
    out_of_range = observed & ((rssi < RSSI_VALID_MIN) | (rssi > RSSI_VALID_MAX))
    if out_of_range.any():
        row = int(np.flatnonzero(out_of_range.any(axis=1))[0])
        raise ParseError(
            f"{path.name}: RSSI outside [{RSSI_VALID_MIN:g}, {RSSI_VALID_MAX:g}] dBm "
            f"at row {row + 2}"
        )

    def int_col(name: str) -> np.ndarray:
        values = pd.to_numeric(frame[name], errors="coerce")
        if values.isna().any():
            row = int(values.index[values.isna()][0])
            raise ParseError(f"{path.name}: non-numeric {name} at row {row + 2}")
        return values.to_numpy(dtype=np.int64)

    return FingerprintSet(
        rssi=rssi,
        buildings=int_col(schema.building_col),
        floors=int_col(schema.floor_col),
        x=frame[schema.x_col].to_numpy(dtype=np.float64),
        y=frame[schema.y_col].to_numpy(dtype=np.float64),
        user_ids=int_col(schema.user_col),
        phone_ids=int_col(schema.phone_col),
        timestamps=int_col(schema.timestamp_col),
        ap_ids=tuple(ap_cols),
    )


def ap_visibility(fps: FingerprintSet, sentinel: float = MISSING_SENTINEL) -> np.ndarray:
    """Per-AP fraction of records in which the AP was captured."""
    return (fps.rssi != sentinel).mean(axis=0)


def select_aps(fps: FingerprintSet, cfg: PreprocessConfig) -> FingerprintSet:
    """Two-stage AP reduction.

    Stage 1 drops APs missing in every record; stage 2 drops APs whose
    visibility is below 1 - visibility_threshold. The keep rule uses >=
    on the boundary. Record order is preserved.
    """
    if len(fps) == 0:
        raise DataError("cannot select APs on an empty fingerprint set")
    visibility = ap_visibility(fps, cfg.missing_sentinel)
    # tolerance so a count sitting exactly on the boundary survives roundoff
    cutoff = 1.0 - cfg.visibility_threshold - 1e-12
    keep = (visibility > 0.0) & (visibility >= cutoff)
    if not keep.any():
        raise DataError("AP selection eliminated every access point")
    idx = np.flatnonzero(keep)
    return replace(
        fps,
        rssi=fps.rssi[:, idx],
        ap_ids=tuple(fps.ap_ids[i] for i in idx),
    )


def derive_min_rssi(fps: FingerprintSet, cfg: PreprocessConfig) -> float:
    """Global minimum non-missing reading diminished by 1 dBm."""
    observed = fps.rssi[fps.rssi != cfg.missing_sentinel]
    if observed.size == 0:
        raise DataError("no observed RSSI readings; cannot derive min_rssi")
    return float(observed.min()) - 1.0


def powed(values: np.ndarray, min_rssi: float, exponent: float) -> np.ndarray:
    """Map dBm readings into [0, 1]: ((v - min) / -min) ** beta."""
    return ((values - min_rssi) / (-min_rssi)) ** exponent


def powed_transform(
    fps: FingerprintSet,
    cfg: PreprocessConfig,
    norm_bounds: tuple[float, float, float, float] | None = None,
    clamp: bool = False,
) -> ProcessedSet:
    """Convert raw RSSI to powed features and normalize coordinates.

    Missing sentinels are first replaced by ``min_rssi`` (from the config
    or derived from the data). ``norm_bounds`` defaults to this set's own
    coordinate bounds, i.e. fitting on training data; pass the training
    bounds when transforming held-out data. When fitting, a configured
    min_rssi at or above the weakest observed reading is an error; with
    ``clamp`` (held-out data run through a fitted pipeline), readings
    below the fitted floor are lifted onto it instead.
    """
    min_rssi = cfg.min_rssi if cfg.min_rssi is not None else derive_min_rssi(fps, cfg)
    observed = fps.rssi[fps.rssi != cfg.missing_sentinel]
    if observed.size and float(observed.min()) <= min_rssi:
        if not clamp:
            raise ConfigError(
                f"min_rssi={min_rssi:g} is not strictly below the weakest observed "
                f"reading {float(observed.min()):g}"
            )
    raw = np.where(fps.rssi == cfg.missing_sentinel, min_rssi, fps.rssi)
    if clamp:
        raw = np.maximum(raw, min_rssi)
    features = powed(raw, min_rssi, cfg.powed_exponent).astype(np.float32)

    bounds = norm_bounds if norm_bounds is not None else fps.coord_bounds
    coords = normalize_coords(np.column_stack([fps.x, fps.y]), bounds)
    return ProcessedSet(
        features=features,
        buildings=fps.buildings.copy(),
        floors=fps.floors.copy(),
        coords=coords,
        norm_bounds=bounds,
        ap_ids=fps.ap_ids,
        min_rssi=min_rssi,
        n_buildings=fps.n_buildings,
        n_floors=fps.n_floors,
        user_ids=fps.user_ids.copy(),
    )


def split_indices(
    buildings: np.ndarray,
    floors: np.ndarray,
    ratio: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test index split; ratio is the training fraction.

    Deterministic for a fixed seed. Strata are (building, floor) pairs;
    each stratum contributes round(n * (1 - ratio)) test records, at
    least one when it has two or more. Singleton strata go to training
    with a warning.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    pairs = sorted(set(zip(buildings.tolist(), floors.tolist())))
    for b, f in pairs:
        stratum = np.flatnonzero((buildings == b) & (floors == f))
        if len(stratum) < 2:
            warnings.warn(
                f"stratum (building={b}, floor={f}) has {len(stratum)} record(s); "
                "keeping it in the training split"
            )
            train_idx.append(stratum)
            continue
        shuffled = rng.permutation(stratum)
        n_test = int(round(len(stratum) * (1.0 - ratio)))
        n_test = min(max(n_test, 1), len(stratum) - 1)
        test_idx.append(shuffled[:n_test])
        train_idx.append(shuffled[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return train, test


def train_test_split(
    ps: ProcessedSet, ratio: float, seed: int
) -> tuple[ProcessedSet, ProcessedSet]:
    train, test = split_indices(ps.buildings, ps.floors, ratio, seed)
    return ps.subset(train), ps.subset(test)


def partition_clients(
    ps: ProcessedSet, n_clients: int, strategy: str = "iid-uniform", seed: int = 0
) -> Partition:
    """Shard training indices across simulated clients.

    iid-uniform shuffles and deals near-equal shards; by-user and
    by-building assign whole groups round-robin in order of descending
    group size.
    """
    n = len(ps)
    if not 1 <= n_clients <= n:
        raise PartitionError(f"client count {n_clients} not in [1, {n}]")
    if strategy not in PARTITION_STRATEGIES:
        raise PartitionError(f"unknown strategy {strategy!r}; choose from {PARTITION_STRATEGIES}")

    if strategy == "iid-uniform":
        order = np.random.default_rng(seed).permutation(n)
        base, extra = divmod(n, n_clients)
        shards = []
        start = 0
        for c in range(n_clients):
            size = base + (1 if c < extra else 0)
            shards.append(np.sort(order[start:start + size]))
            start += size
    else:
        key = ps.user_ids if strategy == "by-user" else ps.buildings
        if len(key) != n:
            raise PartitionError(f"no grouping metadata available for strategy {strategy!r}")
        group_ids = np.unique(key)
        if n_clients > len(group_ids):
            raise PartitionError(
                f"{n_clients} clients but only {len(group_ids)} groups under {strategy!r}"
            )
        groups = sorted(
            (np.flatnonzero(key == g) for g in group_ids),
            key=lambda idx: (-len(idx), int(key[idx[0]])),
        )
        assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for i, grp in enumerate(groups):
            assigned[i % n_clients].append(grp)
        shards = [np.sort(np.concatenate(parts)) for parts in assigned]

    partition = Partition(client_shards=tuple(shards), strategy=strategy, seed=seed)
    covered = np.concatenate(partition.client_shards)
    if len(np.unique(covered)) != n or len(covered) != n:
        raise PartitionError("internal error: shards are not a disjoint cover")
    if any(len(s) == 0 for s in partition.client_shards):
        raise PartitionError("internal error: empty client shard")
    return partition


def apply_fitted_pipeline(
    raw: FingerprintSet, fitted: ProcessedSet, cfg: PreprocessConfig
) -> ProcessedSet:
    """Run held-out data through a training-fitted pipeline.

    The raw set is projected onto the training AP selection (columns the
    raw set lacks read as the missing sentinel), then powed-transformed
    with the training min_rssi and coordinate bounds. Held-out
    coordinates may land outside [0, 1].
    """
    col_of = {ap: j for j, ap in enumerate(raw.ap_ids)}
    projected = np.full((len(raw), len(fitted.ap_ids)), cfg.missing_sentinel, dtype=np.float64)
    for j, ap in enumerate(fitted.ap_ids):
        if ap in col_of:
            projected[:, j] = raw.rssi[:, col_of[ap]]
    projected_set = replace(raw, rssi=projected, ap_ids=fitted.ap_ids)
    fixed_cfg = replace(cfg, min_rssi=fitted.min_rssi)
    out = powed_transform(projected_set, fixed_cfg, norm_bounds=fitted.norm_bounds, clamp=True)
    return replace(out, n_buildings=fitted.n_buildings, n_floors=fitted.n_floors)


def save_processed(ps: ProcessedSet, out_dir: str | Path, cfg: PreprocessConfig) -> Path:
    """Write the processed-set cache: key/value manifest, little-endian
    float32 feature blob (row-major), and a label sidecar CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = np.ascontiguousarray(ps.features, dtype="<f4")
    (out_dir / "features.f32").write_bytes(features.tobytes())

    manifest_lines = [
        f"n_records={len(ps)}",
        f"n_aps={ps.n_features}",
        "ap_ids=" + ",".join(ps.ap_ids),
        "bounds=" + ",".join(f"{v!r}" for v in ps.norm_bounds),
        f"min_rssi={ps.min_rssi!r}",
        f"n_buildings={ps.n_buildings}",
        f"n_floors={ps.n_floors}",
        f"config_hash={cfg.config_hash()}",
    ]
    (out_dir / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")

    labels = pd.DataFrame(
        {
            "building": ps.buildings,
            "floor": ps.floors,
            "x_norm": ps.coords[:, 0],
            "y_norm": ps.coords[:, 1],
            "user_id": ps.user_ids if len(ps.user_ids) else np.zeros(len(ps), dtype=np.int64),
        }
    )
    labels.to_csv(out_dir / "labels.csv", index=False)
    return out_dir


def load_processed(cache_dir: str | Path) -> ProcessedSet:
    """Reload a processed-set cache written by save_processed."""
    cache_dir = Path(cache_dir)
    manifest: dict[str, str] = {}
    for line in (cache_dir / "manifest.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            manifest[key] = value
    n = int(manifest["n_records"])
    d = int(manifest["n_aps"])
    features = np.frombuffer((cache_dir / "features.f32").read_bytes(), dtype="<f4")
    if features.size != n * d:
        raise DataError(f"feature blob holds {features.size} floats, expected {n * d}")
    features = features.reshape(n, d).copy()

    labels = pd.read_csv(cache_dir / "labels.csv")
    return ProcessedSet(
        features=features,
        buildings=labels["building"].to_numpy(dtype=np.int64),
        floors=labels["floor"].to_numpy(dtype=np.int64),
        coords=labels[["x_norm", "y_norm"]].to_numpy(dtype=np.float64),
        norm_bounds=tuple(float(v) for v in manifest["bounds"].split(",")),
        ap_ids=tuple(manifest["ap_ids"].split(",")),
        min_rssi=float(manifest["min_rssi"]),
        n_buildings=int(manifest["n_buildings"]),
        n_floors=int(manifest["n_floors"]),
        user_ids=labels["user_id"].to_numpy(dtype=np.int64),
    )
