"""Dice training loss and 3D evaluation metrics.

Masks are numpy arrays [slices, height, width]; spacing is given in
millimeters per voxel in the same axis order (z, y, x). All overlap metrics
are percentages, surface distances are millimeters.

Surface definition: a foreground voxel with at least one background voxel
among its 6 face-neighbors; outside the volume counts as background. The
symmetric surface distances pool both directed distance sets into one
multiset before taking the mean (ASSD) or the 95th percentile (95HD), so
both metrics are exactly symmetric in their arguments.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage, stats

from .errors import DegenerateSampleError, EmptyMaskError, FormatError, InputError

METRIC_KEYS = ("dsc_pct", "assd_mm", "hd95_mm", "sensitivity_pct", "precision_pct")

# ---------------------------------------------------------------------------
# training loss


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss, averaged over channels.

    1 - (1/C) * sum_c (2*sum(y*p) + smooth) / (sum(y) + sum(p) + smooth)

    pred in [0,1], target binary, same shape. For inputs with >= 2 dims, dim 1
    is the channel dim; everything else is flattened per channel. The smooth
    term guards empty masks; with smooth=0 an everywhere-empty channel is
    scored as a perfect match.
    """
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if smooth < 0:
        raise InputError(f"smooth must be >= 0, got {smooth}")
    if pred.ndim >= 2:
        channels = pred.shape[1]
        p = pred.transpose(0, 1).reshape(channels, -1)
        t = target.transpose(0, 1).reshape(channels, -1)
    else:
        p = pred.reshape(1, -1)
        t = target.reshape(1, -1)
    t = t.to(p.dtype)
    intersection = (p * t).sum(dim=1)
    denom = p.sum(dim=1) + t.sum(dim=1)
    ratio = (2.0 * intersection + smooth) / (denom + smooth)
    ratio = torch.where(denom + smooth > 0, ratio, torch.ones_like(ratio))
    return 1.0 - ratio.mean()


# ---------------------------------------------------------------------------
# overlap metrics


def _as_bool_pair(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise InputError(
            f"shape mismatch: pred {pred_mask.shape} vs gt {gt_mask.shape}"
        )
    return pred_mask.astype(bool), gt_mask.astype(bool)


def dsc_3d(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Volumetric Dice overlap in percent; two empty masks agree perfectly (100)."""
    pred, gt = _as_bool_pair(pred_mask, gt_mask)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def sensitivity(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """100*TP/(TP+FN); an empty ground truth leaves nothing to detect -> 100."""
    pred, gt = _as_bool_pair(pred_mask, gt_mask)
    positives = int(gt.sum())
    if positives == 0:
        return 100.0
    return 100.0 * int(np.logical_and(pred, gt).sum()) / positives


def precision(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """100*TP/(TP+FP); an empty prediction makes no false claims -> 100."""
    pred, gt = _as_bool_pair(pred_mask, gt_mask)
    predicted = int(pred.sum())
    if predicted == 0:
        return 100.0
    return 100.0 * int(np.logical_and(pred, gt).sum()) / predicted


# ---------------------------------------------------------------------------
# surface metrics

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


def _surface_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise InputError(f"expected a 3D mask, got {mask.ndim} dims")
    if not mask.any():
        raise EmptyMaskError("cannot extract a surface from an empty mask")
    interior = ndimage.binary_erosion(mask, structure=_FACE_STRUCTURE, border_value=0)
    return mask & ~interior


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Coordinates [n, 3] of foreground voxels with a face-adjacent background
    voxel (out-of-bounds counts as background), in lexicographic order."""
    return np.argwhere(_surface_mask(mask))


def surface_distances(
    pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: tuple[float, float, float]
) -> np.ndarray:
    """Pooled bidirectional surface-distance multiset in mm.

    Concatenates {pred-surface voxel -> nearest gt-surface voxel} with the
    opposite direction. Euclidean distances honor anisotropic spacing.
    """
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise InputError(f"spacing must be 3 positive values, got {spacing}")
    pred, gt = _as_bool_pair(pred_mask, gt_mask)
    pred_surface = _surface_mask(pred)
    gt_surface = _surface_mask(gt)
    dist_to_gt = ndimage.distance_transform_edt(~gt_surface, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~pred_surface, sampling=spacing)
    return np.concatenate([dist_to_gt[pred_surface], dist_to_pred[gt_surface]])


def assd(
    pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: tuple[float, float, float]
) -> float:
    """Average symmetric surface distance in mm."""
    return float(surface_distances(pred_mask, gt_mask, spacing).mean())


def hd95(
    pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: tuple[float, float, float]
) -> float:
    """95th percentile (linear interpolation) of the pooled surface distances, mm."""
    return float(np.percentile(surface_distances(pred_mask, gt_mask, spacing), 95))


# ---------------------------------------------------------------------------
# paired significance test


def paired_wilcoxon(a, b) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired per-case metrics.

    Zero differences are dropped. Uses the exact null distribution for up to
    25 informative pairs and the tie-corrected normal approximation above
    that.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape:
        raise InputError(f"need two equal-length 1D sequences, got {a.shape} and {b.shape}")
    if a.size < 6:
        raise InputError(f"need at least 6 pairs, got {a.size}")
    diff = a - b
    diff = diff[diff != 0]
    if diff.size == 0:
        raise DegenerateSampleError("all paired differences are zero")
    method = "exact" if diff.size <= 25 else "approx"
    result = stats.wilcoxon(diff, alternative="two-sided", method=method)
    return float(result.pvalue)


# ---------------------------------------------------------------------------
# report container


@dataclass
class MetricsReport:
    """Per-case metric rows plus aggregates, serializable to JSON and CSV.

    per_case rows hold case_id and the five metric values; a case whose
    surface metrics failed (empty prediction) carries None there plus an
    "error" note instead of being dropped silently.
    """

    per_case: list[dict]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    comparisons: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_cases(cls, per_case: list[dict], meta: dict | None = None) -> "MetricsReport":
        aggregate = {}
        for key in METRIC_KEYS:
            values = [c[key] for c in per_case if c.get(key) is not None]
            if not values:
                continue
            arr = np.asarray(values, dtype=float)
            sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            aggregate[key] = {"mean": float(arr.mean()), "sd": sd, "n": int(arr.size)}
        return cls(per_case=per_case, aggregate=aggregate, meta=meta or {})

    def metric_by_case(self, key: str) -> dict[str, float | None]:
        return {c["case_id"]: c.get(key) for c in self.per_case}

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "per_case": self.per_case,
            "aggregate": self.aggregate,
            "comparisons": self.comparisons,
            "meta": self.meta,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        path = Path(path)
        if not path.is_file():
            raise FormatError(f"report not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"report {path} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or "per_case" not in payload:
            raise FormatError(f"report {path} lacks a per_case section")
        return cls(
            per_case=payload["per_case"],
            aggregate=payload.get("aggregate", {}),
            comparisons=payload.get("comparisons"),
            meta=payload.get("meta", {}),
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["case_id", *METRIC_KEYS, "error"])
            for case in self.per_case:
                row = [case["case_id"]]
                row += ["" if case.get(k) is None else f"{case[k]:.6f}" for k in METRIC_KEYS]
                row.append(case.get("error", ""))
                writer.writerow(row)
        return path
