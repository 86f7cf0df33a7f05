"""Shared fixtures: tiny datasets and run configs sized for test speed.

Everything here runs on shapes small enough that a full train/eval cycle
stays in seconds; the acceptance suite owns the desk-scale runs.
"""

import json
from pathlib import Path

import pytest
import torch

from ceseg.config import RunConfig
from ceseg.data import generate_dataset

torch.set_num_threads(1)

TINY_OVERRIDES = {
    "phantom": {"n_cases": 6, "shape": (8, 16, 16), "radius_range": (2, 4),
                "drift_amplitude": 1.0, "noise_sigma": 0.3},
    "train": {"epochs": 2, "batch_slices": 4},
}


def apply_overrides(cfg: RunConfig, nested: dict) -> RunConfig:
    for section, overrides in nested.items():
        cfg = cfg.with_overrides(section, overrides)
    return cfg


def tiny_config(**extra) -> RunConfig:
    cfg = apply_overrides(RunConfig(), TINY_OVERRIDES)
    if extra:
        cfg = apply_overrides(cfg, extra)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """6 phantom cases, 8x16x16, written once per session."""
    root = tmp_path_factory.mktemp("tiny-data")
    manifest = generate_dataset(tiny_config().phantom, root)
    return manifest


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("tiny-cfg")
    path = root / "run.json"
    serializable = {k: {kk: list(vv) if isinstance(vv, tuple) else vv
                        for kk, vv in sec.items()}
                    for k, sec in TINY_OVERRIDES.items()}
    path.write_text(json.dumps(serializable))
    return path
