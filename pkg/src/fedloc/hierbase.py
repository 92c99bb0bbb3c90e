"""Classical hierarchical estimator used as baseline and cross-check.

Building and floor are chosen by nearest mean Euclidean distance between
the query's powed RSSI vector and the stored fingerprints of each
building (then of each floor within the chosen building). Fine-grained
location comes from a per-floor ridge regression of coordinates on
features. The single-query ops are deliberately naive; the batched
localizer reproduces them with chunked distance algebra.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import ProcessedSet, denormalize_coords
from .errors import DataError, NumericError
from .hmodel import PositionEstimate
from .metrics import LocalizationMetrics, compute_metrics

DEFAULT_RIDGE = 1e-2


@dataclass(frozen=True)
class FloorProfile:
    floor: int
    fingerprints: np.ndarray   # (m, d) powed features
    coords: np.ndarray         # (m, 2) normalized


@dataclass(frozen=True)
class BuildingProfile:
    building: int
    floors: tuple[FloorProfile, ...]

    @property
    def fingerprints(self) -> np.ndarray:
        """Row-union of the per-floor fingerprint sets."""
        return np.concatenate([f.fingerprints for f in self.floors], axis=0)

    @property
    def n_rows(self) -> int:
        return sum(len(f.fingerprints) for f in self.floors)


@dataclass(frozen=True)
class FloorRegressor:
    beta: np.ndarray           # (d, 2)
    eps: np.ndarray            # (2,)
    lam: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return features.astype(np.float64) @ self.beta + self.eps


def build_profiles(train: ProcessedSet) -> list[BuildingProfile]:
    """One profile per building with one sub-profile per observed floor.
    Every training row lands in exactly one sub-profile. A floor index
    that exists globally but has no rows in some building is skipped with
    a warning."""
    if len(train) == 0:
        raise DataError("cannot build profiles from an empty training set")
    profiles = []
    for b in np.unique(train.buildings):
        floors = []
        in_b = train.buildings == b
        for f in range(train.n_floors):
            rows = np.flatnonzero(in_b & (train.floors == f))
            if len(rows) == 0:
                if f <= int(train.floors[in_b].max()):
                    warnings.warn(f"building {b}: no records on floor {f}; cell omitted")
                continue
            floors.append(
                FloorProfile(
                    floor=f,
                    fingerprints=train.features[rows].astype(np.float64),
                    coords=train.coords[rows],
                )
            )
        profiles.append(BuildingProfile(building=int(b), floors=tuple(floors)))
    return profiles


def _mean_distance(query: np.ndarray, rows: np.ndarray) -> float:
    diff = rows - query.astype(np.float64)
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def select_building(query: np.ndarray, profiles: list[BuildingProfile]) -> int:
    """Building whose fingerprints have the smallest mean Euclidean
    distance to the query; ties go to the lowest building id."""
    if not profiles:
        raise DataError("no building profiles")
    best_b, best_d = -1, np.inf
    for p in sorted(profiles, key=lambda p: p.building):
        d = _mean_distance(query, p.fingerprints)
        if d < best_d:
            best_b, best_d = p.building, d
    return best_b


def select_floor(query: np.ndarray, profile: BuildingProfile) -> int:
    """Nearest floor by mean distance, restricted to the chosen
    building's floors; ties go to the lowest floor id."""
    if not profile.floors:
        raise DataError(f"building {profile.building} has no floor profiles")
    best_f, best_d = -1, np.inf
    for fp in sorted(profile.floors, key=lambda f: f.floor):
        d = _mean_distance(query, fp.fingerprints)
        if d < best_d:
            best_f, best_d = fp.floor, d
    return best_f


def fit_floor_regressor(sub: FloorProfile, lam: float = DEFAULT_RIDGE) -> FloorRegressor:
    """Centered ridge least squares mapping features to coordinates:
    beta = (Xc'Xc + lam I)^-1 Xc'(l - l_mean), eps = l_mean - x_mean beta."""
    X = sub.fingerprints.astype(np.float64)
    l = sub.coords.astype(np.float64)
    if len(X) == 0:
        raise DataError("cannot fit a regressor on an empty sub-profile")
    x_mean = X.mean(axis=0)
    l_mean = l.mean(axis=0)
    Xc = X - x_mean
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    try:
        beta = np.linalg.solve(gram, Xc.T @ (l - l_mean))
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"singular regression system at lam={lam:g}; raise the ridge strength"
        ) from exc
    if not np.isfinite(beta).all():
        raise NumericError(f"non-finite regression coefficients at lam={lam:g}")
    return FloorRegressor(beta=beta, eps=l_mean - x_mean @ beta, lam=lam)


def localize(
    query: np.ndarray,
    profiles: list[BuildingProfile],
    regressors: dict[tuple[int, int], FloorRegressor],
    norm_bounds: tuple[float, float, float, float],
) -> PositionEstimate:
    """Chain building selection, floor selection, and the per-floor
    regressor; coordinates are denormalized to meters. Head
    distributions are the degenerate one-hot of the argmin choice."""
    b = select_building(query, profiles)
    profile = next(p for p in profiles if p.building == b)
    f = select_floor(query, profile)
    xy_norm = regressors[(b, f)].predict(query[None, :])
    xy = denormalize_coords(xy_norm, norm_bounds)[0]
    n_b = max(p.building for p in profiles) + 1
    n_f = max(fp.floor for p in profiles for fp in p.floors) + 1
    probs_b = np.zeros(n_b)
    probs_b[b] = 1.0
    probs_f = np.zeros(n_f)
    probs_f[f] = 1.0
    return PositionEstimate(
        building=b, floor=f, x=float(xy[0]), y=float(xy[1]),
        building_probs=probs_b, floor_probs=probs_f,
    )


class HierarchicalLocalizer:
    """Batch front-end over the profile/regressor primitives.

    Fit stores all fingerprints cell-grouped so queries can be resolved
    with one chunked distance computation per batch instead of a Python
    loop per profile row.
    """

    def __init__(self, lam: float = DEFAULT_RIDGE):
        self.lam = lam
        self.profiles: list[BuildingProfile] = []
        self.regressors: dict[tuple[int, int], FloorRegressor] = {}
        self.norm_bounds: tuple[float, float, float, float] | None = None

    def fit(self, train: ProcessedSet) -> "HierarchicalLocalizer":
        self.profiles = build_profiles(train)
        self.regressors = {
            (p.building, fp.floor): fit_floor_regressor(fp, self.lam)
            for p in self.profiles
            for fp in p.floors
        }
        self.norm_bounds = train.norm_bounds
        # cell-grouped stack for the batched distance path
        cells = [(p.building, fp.floor, fp.fingerprints) for p in self.profiles
                 for fp in p.floors]
        self._cell_keys = [(b, f) for b, f, _ in cells]
        self._stack = np.concatenate([rows for _, _, rows in cells], axis=0)
        counts = np.array([len(rows) for _, _, rows in cells])
        self._offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
        self._counts = counts
        return self

    def _cell_mean_distances(self, queries: np.ndarray, chunk: int = 256) -> np.ndarray:
        """(n_queries, n_cells) mean distance from each query to each
        (building, floor) fingerprint cell."""
        stack = self._stack
        sq_rows = (stack * stack).sum(axis=1)
        out = np.empty((len(queries), len(self._cell_keys)))
        for start in range(0, len(queries), chunk):
            q = queries[start:start + chunk].astype(np.float64)
            sq_q = (q * q).sum(axis=1, keepdims=True)
            d2 = sq_q + sq_rows - 2.0 * (q @ stack.T)
            d = np.sqrt(np.clip(d2, 0.0, None))
            sums = np.add.reduceat(d, self._offsets, axis=1)
            out[start:start + chunk] = sums / self._counts
        return out

    def predict(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(buildings, floors, xy_meters) for a feature batch."""
        if self.norm_bounds is None:
            raise DataError("localizer is not fitted")
        dists = self._cell_mean_distances(features)
        keys = np.array(self._cell_keys)  # (n_cells, 2)
        buildings = np.empty(len(features), dtype=np.int64)
        floors = np.empty(len(features), dtype=np.int64)
        xy_norm = np.empty((len(features), 2))
        b_ids = np.unique(keys[:, 0])
        # building score = row-count weighted mean of its cells' means
        b_scores = np.stack(
            [
                (dists[:, keys[:, 0] == b] * self._counts[keys[:, 0] == b]).sum(axis=1)
                / self._counts[keys[:, 0] == b].sum()
                for b in b_ids
            ],
            axis=1,
        )
        chosen_b = b_ids[np.argmin(b_scores, axis=1)]
        for b in b_ids:
            in_b = np.flatnonzero(chosen_b == b)
            if len(in_b) == 0:
                continue
            cell_idx = np.flatnonzero(keys[:, 0] == b)
            local = np.argmin(dists[np.ix_(in_b, cell_idx)], axis=1)
            chosen_f = keys[cell_idx[local], 1]
            buildings[in_b] = b
            floors[in_b] = chosen_f
            for f in np.unique(chosen_f):
                rows = in_b[chosen_f == f]
                xy_norm[rows] = self.regressors[(int(b), int(f))].predict(features[rows])
        return buildings, floors, denormalize_coords(xy_norm, self.norm_bounds)

    def evaluate(self, data: ProcessedSet) -> LocalizationMetrics:
        buildings, floors, xy_m = self.predict(data.features)
        return compute_metrics(
            buildings, floors, xy_m,
            data.buildings, data.floors, data.coords_meters(),
        )
