"""Shared fixtures: a synthetic survey in the canonical CSV dialect plus
small ready-made processed sets.

The synthetic site has two buildings far apart on the x axis, each with
its own floors. Every (building, floor) cell gets a handful of dedicated
anchor APs whose RSSI falls off with distance, so classification is
learnable and location carries real signal. Extra columns reproduce the
real survey's header. A block of never-captured APs and a block of
rarely-captured APs exercise both reduction stages.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from fedloc.dataset import (
    PreprocessConfig,
    ProcessedSet,
    apply_fitted_pipeline,
    load_csv,
    powed_transform,
    select_aps,
    train_test_split,
)

FLOORS_PER_BUILDING = (3, 2)
BUILDING_SPAN = (60.0, 40.0)   # meters per building footprint
BUILDING_GAP = 120.0
N_ANCHORS_PER_CELL = 6
N_DEAD_APS = 8                 # never captured anywhere
N_RARE_APS = 4                 # captured in ~1% of records

MISSING = 100


def _cells():
    return [(b, f) for b, n in enumerate(FLOORS_PER_BUILDING) for f in range(n)]


def _anchor_positions(rng):
    """Anchor AP coordinates per cell, spread over the cell's footprint."""
    anchors = {}
    for b, f in _cells():
        x0 = b * BUILDING_GAP
        xs = rng.uniform(x0 + 5, x0 + BUILDING_SPAN[0] - 5, N_ANCHORS_PER_CELL)
        ys = rng.uniform(5, BUILDING_SPAN[1] - 5, N_ANCHORS_PER_CELL)
        anchors[(b, f)] = np.column_stack([xs, ys])
    return anchors


def synth_survey_frame(n_records: int, seed: int) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    cells = _cells()
    anchors = _anchor_positions(np.random.default_rng(1234))  # site layout is fixed
    n_anchor_aps = len(cells) * N_ANCHORS_PER_CELL
    n_aps = n_anchor_aps + N_RARE_APS + N_DEAD_APS

    rssi = np.full((n_records, n_aps), MISSING, dtype=np.int64)
    rows = {
        "LONGITUDE": np.zeros(n_records),
        "LATITUDE": np.zeros(n_records),
        "FLOOR": np.zeros(n_records, dtype=np.int64),
        "BUILDINGID": np.zeros(n_records, dtype=np.int64),
        "SPACEID": rng.integers(1, 250, n_records),
        "RELATIVEPOSITION": rng.integers(1, 3, n_records),
        "USERID": np.zeros(n_records, dtype=np.int64),
        "PHONEID": rng.integers(1, 5, n_records),
        "TIMESTAMP": 1_370_000_000 + np.arange(n_records),
    }

    for i in range(n_records):
        b, f = cells[rng.integers(len(cells))]
        x = b * BUILDING_GAP + rng.uniform(0, BUILDING_SPAN[0])
        y = rng.uniform(0, BUILDING_SPAN[1])
        rows["LONGITUDE"][i] = x
        rows["LATITUDE"][i] = y
        rows["FLOOR"][i] = f
        rows["BUILDINGID"][i] = b
        # users stick to one building; user ids 1..6
        rows["USERID"][i] = 1 + b * 3 + rng.integers(3)
        # same-building anchors are audible, attenuated by distance and
        # floor separation
        for fa in range(FLOORS_PER_BUILDING[b]):
            base = cells.index((b, fa)) * N_ANCHORS_PER_CELL
            pos = anchors[(b, fa)]
            dist = np.hypot(pos[:, 0] - x, pos[:, 1] - y)
            level = -35 - 20 * np.log10(1 + dist) - 9 * abs(f - fa) + rng.normal(0, 1.5, len(pos))
            level = np.clip(np.round(level), -100, -25).astype(np.int64)
            audible = level > -92
            rssi[i, base:base + N_ANCHORS_PER_CELL] = np.where(audible, level, MISSING)
    # rare APs: captured in exactly 1% of records (below a 2% visibility floor)
    n_rare_hits = max(1, n_records // 100)
    for j in range(N_RARE_APS):
        hit = rng.choice(n_records, size=n_rare_hits, replace=False)
        rssi[hit, n_anchor_aps + j] = rng.integers(-90, -60, n_rare_hits)

    frame = pd.DataFrame(
        rssi, columns=[f"WAP{j + 1:03d}" for j in range(n_aps)]
    )
    for name, col in rows.items():
        frame[name] = col
    return frame


def write_survey_csvs(out_dir: Path, n_train: int = 600, n_val: int = 120,
                      seed: int = 42) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    synth_survey_frame(n_train, seed).to_csv(out_dir / "trainingData.csv", index=False)
    synth_survey_frame(n_val, seed + 1).to_csv(out_dir / "validationData.csv", index=False)
    return out_dir


@pytest.fixture(scope="session")
def survey_dir(tmp_path_factory) -> Path:
    return write_survey_csvs(tmp_path_factory.mktemp("survey"))


@pytest.fixture(scope="session")
def pipeline_sets(survey_dir):
    """(train, test, validation) processed sets fitted on the synthetic
    training file, split 90/10."""
    cfg = PreprocessConfig()
    raw = load_csv(survey_dir / "trainingData.csv")
    full = powed_transform(select_aps(raw, cfg), cfg)
    train, test = train_test_split(full, 0.9, seed=0)
    val = apply_fitted_pipeline(load_csv(survey_dir / "validationData.csv"), full, cfg)
    return {"train": train, "test": test, "validation": val, "full": full}


def make_processed(n: int, d: int, n_buildings: int = 2, n_floors: int = 3,
                   seed: int = 0, bounds=(0.0, 10.0, 0.0, 20.0)) -> ProcessedSet:
    """Random processed set for unit tests; features in [0, 1]."""
    rng = np.random.default_rng(seed)
    return ProcessedSet(
        features=rng.random((n, d)).astype(np.float32),
        buildings=rng.integers(0, n_buildings, n),
        floors=rng.integers(0, n_floors, n),
        coords=rng.random((n, 2)),
        norm_bounds=bounds,
        ap_ids=tuple(f"WAP{j + 1:03d}" for j in range(d)),
        min_rssi=-105.0,
        n_buildings=n_buildings,
        n_floors=n_floors,
        user_ids=rng.integers(1, 5, n),
    )
