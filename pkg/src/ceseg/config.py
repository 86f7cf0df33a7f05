"""Configuration dataclasses and the JSON run-config loader.

A run config file is a single JSON object with up to three sections:

    {"model": {...}, "train": {...}, "phantom": {...}}

Every section is optional and falls back to defaults. Unknown keys anywhere
are rejected so a typo cannot silently run with defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

# Named profiles adjust the experiment scale without touching the science.
# paper_defaults is the full-size schedule; desk_scale fits a laptop CPU.
PROFILES = {
    "paper_defaults": {},
    "desk_scale": {
        "train": {"epochs": 60, "batch_slices": 16},
        # contrast_jitter makes some slices ambiguous on their own while their
        # neighbors stay confident, so the slice-context path has signal to add.
        "phantom": {"shape": (32, 64, 64), "contrast_jitter": 0.8},
    },
}
# Applying a profile is a preset: it stamps train.profile and overwrites the
# fields listed above; everything else keeps its configured value.


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the backbone and the context block."""

    in_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    embed_channels: int = 8
    neighbor_interval: int = 1  # slice offset used when borrowing context
    match_radius: int = 3  # search window half-width, pixels
    attention_expansion: int = 64  # hidden-width multiplier in the merge gate
    bn_momentum: float = 0.1

    def __post_init__(self):
        _require(self.in_channels >= 1, "in_channels must be >= 1")
        _require(self.base_channels >= 1, "base_channels must be >= 1")
        _require(self.depth >= 1, "depth must be >= 1")
        _require(self.embed_channels >= 1, "embed_channels must be >= 1")
        _require(self.neighbor_interval >= 1, "neighbor_interval must be >= 1")
        _require(self.match_radius >= 0, "match_radius must be >= 0")
        _require(self.attention_expansion >= 1, "attention_expansion must be >= 1")
        _require(0.0 < self.bn_momentum < 1.0, "bn_momentum must be in (0, 1)")

    @property
    def downsample_factor(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule. Defaults follow the full-scale recipe."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_slices: int = 50
    epochs: int = 300
    seed: int = 0
    aux_loss_weight: float = 1.0  # weight on the plain decoder-output loss term
    dice_smooth: float = 1e-5
    augment: bool = True
    profile: str = "paper_defaults"

    def __post_init__(self):
        _require(
            self.profile in PROFILES,
            f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}",
        )
        _require(self.lr > 0, "lr must be > 0")
        _require(0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)")
        _require(self.weight_decay >= 0, "weight_decay must be >= 0")
        _require(self.batch_slices >= 1, "batch_slices must be >= 1")
        _require(self.epochs >= 1, "epochs must be >= 1")
        _require(self.aux_loss_weight >= 0, "aux_loss_weight must be >= 0")
        _require(self.dice_smooth >= 0, "dice_smooth must be >= 0")

    def check_against_model(self, model: ModelConfig) -> None:
        # The context path needs both a slice and its neighbor inside one batch
        # window, with room for the edge rule on either end.
        minimum = 2 * (model.neighbor_interval + 1)
        _require(
            self.batch_slices >= minimum,
            f"batch_slices must be >= 2*(neighbor_interval+1) = {minimum}, "
            f"got {self.batch_slices}",
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic volume generator parameters.

    Each case is a stack of slices containing a bright organ-like structure:
    a union of 1..max_components constant-cross-section ellipses extruded
    along z, whose centers drift smoothly from slice to slice. The primary
    component spans at least 60% of the slices.
    """

    n_cases: int = 30
    shape: tuple[int, int, int] = (32, 64, 64)  # (slices, height, width)
    spacing_mm: tuple[float, float, float] = (1.5, 1.0, 1.0)  # (z, y, x)
    max_components: int = 3
    radius_range: tuple[float, float] = (6.0, 14.0)  # in-plane semi-axes, voxels
    drift_amplitude: float = 4.0  # max per-axis center excursion, voxels
    noise_sigma: float = 0.5
    intensity_contrast: float = 1.0
    contrast_jitter: float = 0.0  # per-slice contrast loss fraction, [0, 1)
    seed: int = 0

    def __post_init__(self):
        _require(self.n_cases >= 1, "n_cases must be >= 1")
        _require(len(self.shape) == 3, "shape must be (slices, height, width)")
        d, h, w = self.shape
        _require(d >= 3 and h >= 8 and w >= 8, "shape too small for a phantom")
        _require(len(self.spacing_mm) == 3, "spacing_mm must have 3 entries")
        _require(all(s > 0 for s in self.spacing_mm), "spacing_mm must be positive")
        _require(1 <= self.max_components <= 3, "max_components must be in 1..3")
        lo, hi = self.radius_range
        _require(0 < lo <= hi, "radius_range must satisfy 0 < lo <= hi")
        _require(self.drift_amplitude >= 0, "drift_amplitude must be >= 0")
        _require(self.noise_sigma >= 0, "noise_sigma must be >= 0")
        _require(self.intensity_contrast > 0, "intensity_contrast must be > 0")
        _require(0 <= self.contrast_jitter < 1, "contrast_jitter must be in [0, 1)")
        margin = hi + self.drift_amplitude + 2
        _require(
            2 * margin <= min(h, w),
            f"radius_range + drift_amplitude need fit margin {margin:.1f} "
            f"per side, but min(height, width) is {min(h, w)}",
        )


@dataclass(frozen=True)
class PathsConfig:
    """File locations a command needs beyond its flags; resolved against cwd."""

    data: str | None = None  # dataset manifest
    out: str | None = None  # output directory (the --out flag overrides)
    checkpoint: str | None = None  # for eval


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_profile(self, profile: str) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigurationError(
                f"unknown profile {profile!r}; choose from {sorted(PROFILES)}"
            )
        out = self.with_overrides("train", {"profile": profile})
        for section, overrides in PROFILES[profile].items():
            out = out.with_overrides(section, overrides)
        return out

    def with_overrides(self, section: str, overrides: dict) -> "RunConfig":
        current = getattr(self, section)
        updated = dataclasses.replace(current, **overrides)
        return dataclasses.replace(self, **{section: updated})

    def with_seed(self, seed: int) -> "RunConfig":
        out = self.with_overrides("train", {"seed": seed})
        return out.with_overrides("phantom", {"seed": seed})

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "phantom": dataclasses.asdict(self.phantom),
            "paths": dataclasses.asdict(self.paths),
        }


_SECTION_TYPES = {
    "model": ModelConfig,
    "train": TrainConfig,
    "phantom": PhantomSpec,
    "paths": PathsConfig,
}
_TUPLE_FIELDS = {"shape", "spacing_mm", "radius_range"}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def _build_section(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigurationError(f"section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) {sorted(unknown)} in section {where!r}; "
            f"known keys: {sorted(known)}"
        )
    coerced = {
        k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
        for k, v in payload.items()
    }
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigurationError(f"bad section {where!r}: {exc}") from exc


def run_config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigurationError("run config must be a JSON object")
    unknown = set(payload) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigurationError(
            f"unknown section(s) {sorted(unknown)}; "
            f"known sections: {sorted(_SECTION_TYPES)}"
        )
    sections = {
        name: _build_section(cls, payload.get(name, {}), name)
        for name, cls in _SECTION_TYPES.items()
    }
    return RunConfig(**sections)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(payload)


def config_digest(config: RunConfig) -> str:
    """Stable hash of the scientific config, stored in checkpoints.

    Paths and the schedule length (train.epochs) are excluded: resuming may
    legitimately extend a run, and per-epoch randomness is keyed by the epoch
    index, so extending never changes earlier steps.
    """
    payload = config.to_dict()
    payload.pop("paths", None)
    payload["train"].pop("epochs", None)
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
