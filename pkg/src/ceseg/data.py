"""Volumes on disk, synthetic phantom generation, preprocessing, augmentation.

On-disk volume format: a JSON sidecar `<case_id>.json` next to a raw payload
`<case_id>.raw`. The sidecar carries

    {"shape": [slices, height, width],
     "spacing_mm": [x, y, z],
     "dtype": "f32" | "u8",
     "order": "row-major D,H,W"}

and the payload is the voxel array in that order, little-endian. Intensity
volumes are f32, masks are u8 with values {0, 1}. In memory the spacing is
kept in array-axis order (z, y, x) so it lines up with shape indexing; the
sidecar field follows the conventional (x, y, z) order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates, zoom

from .config import PhantomSpec
from .errors import ConfigurationError, FormatError, InputError, NormalizationError

ORDER_TAG = "row-major D,H,W"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
SPLITS = ("train", "val", "test")


@dataclass
class Volume:
    """An intensity volume. voxels: float32 [slices, height, width]."""

    case_id: str
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]  # (z, y, x)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise InputError(f"volume {self.case_id}: expected 3 dims, got {self.voxels.ndim}")
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)


@dataclass
class MaskVolume:
    """A binary mask volume. labels: uint8 [slices, height, width], values {0, 1}."""

    case_id: str
    labels: np.ndarray
    spacing_mm: tuple[float, float, float]  # (z, y, x)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise InputError(f"mask {self.case_id}: expected 3 dims, got {self.labels.ndim}")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.max(initial=0) > 1:
            raise InputError(f"mask {self.case_id}: labels must be in {{0, 1}}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)


@dataclass
class SliceStack:
    """A contiguous run of slices cut from one volume, ready for the model."""

    case_id: str
    start: int  # index of the first slice within the source volume
    images: np.ndarray  # float32 [n, height, width]
    masks: np.ndarray | None = None  # uint8 [n, height, width]


# ---------------------------------------------------------------------------
# raw + sidecar I/O


def save_volume(vol: Volume | MaskVolume, out_dir: str | Path) -> Path:
    """Write `<case_id>.json` + `<case_id>.raw` into out_dir; returns the sidecar path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(vol, MaskVolume):
        data, dtype_tag = vol.labels, "u8"
    else:
        data, dtype_tag = vol.voxels, "f32"
    sidecar = {
        "shape": [int(s) for s in data.shape],
        "spacing_mm": [float(s) for s in vol.spacing_mm[::-1]],  # (z,y,x) -> (x,y,z)
        "dtype": dtype_tag,
        "order": ORDER_TAG,
    }
    json_path = out_dir / f"{vol.case_id}.json"
    raw_path = out_dir / f"{vol.case_id}.raw"
    raw_path.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype_tag]).tobytes())
    json_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return json_path


def load_volume(json_path: str | Path) -> Volume | MaskVolume:
    """Read a sidecar + payload pair; dtype decides Volume (f32) vs MaskVolume (u8)."""
    json_path = Path(json_path)
    if not json_path.is_file():
        raise FormatError(f"sidecar not found: {json_path}")
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar {json_path} is not valid JSON: {exc}") from exc
    for key in ("shape", "spacing_mm", "dtype", "order"):
        if key not in meta:
            raise FormatError(f"sidecar {json_path} missing key {key!r}")
    if meta["order"] != ORDER_TAG:
        raise FormatError(f"sidecar {json_path}: unsupported order {meta['order']!r}")
    if meta["dtype"] not in _DTYPES:
        raise FormatError(f"sidecar {json_path}: unsupported dtype {meta['dtype']!r}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise FormatError(f"sidecar {json_path}: bad shape {meta['shape']}")
    spacing_xyz = [float(s) for s in meta["spacing_mm"]]
    if len(spacing_xyz) != 3:
        raise FormatError(f"sidecar {json_path}: bad spacing_mm {meta['spacing_mm']}")
    dtype = _DTYPES[meta["dtype"]]
    raw_path = json_path.with_suffix(".raw")
    if not raw_path.is_file():
        raise FormatError(f"payload not found: {raw_path}")
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"payload {raw_path}: expected {expected} bytes for shape {shape}, "
            f"got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    case_id = json_path.stem
    spacing = tuple(spacing_xyz[::-1])  # (x,y,z) -> (z,y,x)
    if meta["dtype"] == "u8":
        return MaskVolume(case_id, data.copy(), spacing)
    return Volume(case_id, data.copy(), spacing)


# ---------------------------------------------------------------------------
# dataset manifest

def write_manifest(entries: list[dict], path: str | Path) -> Path:
    path = Path(path)
    for e in entries:
        if e.get("split") not in SPLITS:
            raise InputError(f"manifest entry {e.get('case_id')}: bad split {e.get('split')!r}")
    path.write_text(json.dumps(entries, indent=2) + "\n")
    return path


def load_manifest(path: str | Path) -> list[dict]:
    """Returns the entry list with image/mask paths resolved against the manifest dir."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise FormatError(f"manifest {path} must be a JSON list of case entries")
    base = path.parent
    out = []
    for e in entries:
        if not isinstance(e, dict):
            raise FormatError(f"manifest {path}: entries must be objects")
        missing = {"case_id", "image", "mask", "split"} - set(e)
        if missing:
            raise FormatError(f"manifest {path}: entry missing {sorted(missing)}")
        if e["split"] not in SPLITS:
            raise FormatError(f"manifest {path}: bad split {e['split']!r}")
        resolved = dict(e)
        resolved["image"] = str((base / e["image"]).resolve())
        resolved["mask"] = str((base / e["mask"]).resolve())
        out.append(resolved)
    return out


def load_case(entry: dict) -> tuple[Volume, MaskVolume]:
    image = load_volume(entry["image"])
    mask = load_volume(entry["mask"])
    if not isinstance(image, Volume):
        raise FormatError(f"case {entry['case_id']}: image file holds a mask dtype")
    if not isinstance(mask, MaskVolume):
        raise FormatError(f"case {entry['case_id']}: mask file holds an intensity dtype")
    if image.voxels.shape != mask.labels.shape:
        raise FormatError(
            f"case {entry['case_id']}: image shape {image.voxels.shape} != "
            f"mask shape {mask.labels.shape}"
        )
    return image, mask


# ---------------------------------------------------------------------------
# synthetic phantoms


def _component_mask(
    shape: tuple[int, int, int],
    z_extent: tuple[int, int],
    center: tuple[float, float],
    radii: tuple[float, float],
    drift: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """Ellipse with fixed radii extruded over a z-slab; center drifts per slice."""
    n_slices, height, width = shape
    mask = np.zeros(shape, dtype=bool)
    yy, xx = np.ogrid[:height, :width]
    z0, z1 = z_extent
    cy0, cx0 = center
    ry, rx = radii
    dy, dx = drift
    for z in range(z0, z1 + 1):
        cy = cy0 + dy[z]
        cx = cx0 + dx[z]
        mask[z] = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def _drift_path(rng: np.random.Generator, n_slices: int, amplitude: float) -> np.ndarray:
    """Smooth per-slice offset in [-amplitude, amplitude]; all zero when amplitude 0."""
    if amplitude == 0:
        return np.zeros(n_slices)
    a = rng.uniform(0.3, 1.0) * amplitude
    cycles = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n_slices) / max(n_slices - 1, 1)
    return a * np.sin(2.0 * np.pi * cycles * t + phase)


def generate_phantom_case(spec: PhantomSpec, case_index: int) -> tuple[Volume, MaskVolume]:
    """Deterministically generate one case from (spec.seed, case_index)."""
    rng = np.random.default_rng([spec.seed, case_index])
    n_slices, height, width = spec.shape
    lo, hi = spec.radius_range

    # Primary component: guaranteed to span >= 60% of the slices.
    half = rng.uniform(0.32, 0.45) * n_slices
    zc = rng.uniform(0.40, 0.60) * n_slices
    z0 = max(0, int(round(zc - half)))
    z1 = min(n_slices - 1, int(round(zc + half)))
    radii = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    margin_y = radii[0] + spec.drift_amplitude + 1
    margin_x = radii[1] + spec.drift_amplitude + 1
    center = (
        rng.uniform(margin_y, height - margin_y),
        rng.uniform(margin_x, width - margin_x),
    )
    drift = (
        _drift_path(rng, n_slices, spec.drift_amplitude),
        _drift_path(rng, n_slices, spec.drift_amplitude),
    )
    mask = _component_mask(spec.shape, (z0, z1), center, radii, drift)

    n_extra = int(rng.integers(0, spec.max_components))
    for _ in range(n_extra):
        # Satellites are smaller, overlap the primary z-slab, and sit close
        # enough to blend into one organ-like union most of the time.
        scale = rng.uniform(0.35, 0.75)
        s_radii = (max(2.0, radii[0] * scale), max(2.0, radii[1] * scale))
        s_len = max(2, int(round((z1 - z0) * rng.uniform(0.3, 0.8))))
        s_z0 = int(rng.integers(z0, max(z0, z1 - s_len) + 1))
        s_z1 = min(z1, s_z0 + s_len)
        offset_y = rng.uniform(-0.9, 0.9) * radii[0]
        offset_x = rng.uniform(-0.9, 0.9) * radii[1]
        s_center = (
            float(np.clip(center[0] + offset_y, s_radii[0] + 1, height - s_radii[0] - 1)),
            float(np.clip(center[1] + offset_x, s_radii[1] + 1, width - s_radii[1] - 1)),
        )
        s_drift = (
            _drift_path(rng, n_slices, spec.drift_amplitude),
            _drift_path(rng, n_slices, spec.drift_amplitude),
        )
        mask |= _component_mask(spec.shape, (s_z0, s_z1), s_center, s_radii, s_drift)

    # Image: foreground contrast on a faint smooth gradient plus white noise.
    # The per-voxel gradient step is << contrast, so with zero noise every
    # boundary voxel is strictly brighter than its background neighbors.
    grad = rng.uniform(-0.15, 0.15, size=3) * spec.intensity_contrast
    zz = np.arange(n_slices)[:, None, None] / max(n_slices - 1, 1)
    yy = np.arange(height)[None, :, None] / max(height - 1, 1)
    xx = np.arange(width)[None, None, :] / max(width - 1, 1)
    background = grad[0] * zz + grad[1] * yy + grad[2] * xx
    slice_contrast = np.full((n_slices, 1, 1), spec.intensity_contrast)
    if spec.contrast_jitter > 0:
        # Organ visibility varies slice to slice (think apex/base fading):
        # some slices are near-ambiguous on their own while their neighbors
        # stay confident, which is the regime slice context is meant for.
        fade = 1.0 - spec.contrast_jitter * rng.random(n_slices)
        slice_contrast = slice_contrast * fade[:, None, None]
    image = background + slice_contrast * mask
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=spec.shape)

    case_id = f"case_{case_index:03d}"
    vol = Volume(case_id, image.astype(np.float32), spec.spacing_mm)
    msk = MaskVolume(case_id, mask.astype(np.uint8), spec.spacing_mm)
    return vol, msk


def assign_splits(n_cases: int) -> list[str]:
    """60/20/20 split by index; cases are i.i.d. so no shuffle is needed."""
    n_train = int(round(0.6 * n_cases))
    n_val = int(round(0.2 * n_cases))
    tags = ["train"] * n_train + ["val"] * n_val
    tags += ["test"] * (n_cases - len(tags))
    return tags


def generate_dataset(spec: PhantomSpec, out_dir: str | Path, folds: int = 0) -> Path:
    """Write all cases + manifest.json (and fold manifests when folds >= 2).

    Returns the main manifest path. Layout: out_dir/images/, out_dir/masks/.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "masks"
    tags = assign_splits(spec.n_cases)
    entries = []
    for i in range(spec.n_cases):
        vol, msk = generate_phantom_case(spec, i)
        coverage = (msk.labels.any(axis=(1, 2))).mean()
        if coverage < 0.6:
            raise InputError(
                f"{vol.case_id}: organ spans only {coverage:.0%} of slices; "
                "phantom spec produced an invalid case"
            )
        save_volume(vol, images_dir)
        save_volume(msk, masks_dir)
        entries.append(
            {
                "case_id": vol.case_id,
                "image": f"images/{vol.case_id}.json",
                "mask": f"masks/{msk.case_id}.json",
                "split": tags[i],
            }
        )
    manifest_path = write_manifest(entries, out_dir / "manifest.json")
    if folds >= 2:
        if folds > spec.n_cases:
            raise ConfigurationError(f"cannot make {folds} folds from {spec.n_cases} cases")
        for k in range(folds):
            fold_entries = []
            for i, e in enumerate(entries):
                chunk = i * folds // spec.n_cases
                if chunk == k:
                    split = "test"
                elif chunk == (k + 1) % folds:
                    split = "val"
                else:
                    split = "train"
                fold_entries.append({**e, "split": split})
            write_manifest(fold_entries, out_dir / f"manifest_fold{k}.json")
    return manifest_path


# ---------------------------------------------------------------------------
# preprocessing


def _zscore(values: np.ndarray, case_id: str) -> np.ndarray:
    std = float(values.std())
    if std == 0.0 or not np.isfinite(std):
        raise NormalizationError(f"{case_id}: zero or non-finite intensity variance")
    return (values - float(values.mean())) / std


def preprocess_ct(vol: Volume, clip_lo: float = -100.0, clip_hi: float = 200.0) -> Volume:
    """CT route: clip the HU range that covers soft tissue, then z-score."""
    clipped = np.clip(vol.voxels, clip_lo, clip_hi)
    return Volume(vol.case_id, _zscore(clipped, vol.case_id), vol.spacing_mm)


def preprocess_mr(vol: Volume) -> Volume:
    """MR / generic intensity route: per-volume z-score only."""
    return Volume(vol.case_id, _zscore(vol.voxels, vol.case_id), vol.spacing_mm)


# ---------------------------------------------------------------------------
# augmentation


def _elastic_field(
    rng: np.random.Generator, height: int, width: int, grid: int, delta: float
) -> np.ndarray:
    """Smooth [2, height, width] displacement field with max |d| = delta voxels."""
    control = rng.uniform(-1.0, 1.0, size=(2, grid, grid))
    field = np.stack(
        [zoom(c, (height / grid, width / grid), order=3)[:height, :width] for c in control]
    )
    peak = np.abs(field).max()
    if peak > 0:
        field *= delta / peak
    return field


def augment(
    vol: Volume,
    mask: MaskVolume,
    seed: int,
    p: float = 0.5,
    brightness_frac: float = 0.1,
    contrast_range: tuple[float, float] = (0.9, 1.1),
    elastic_delta: float = 3.0,
    elastic_grid: int = 4,
) -> tuple[Volume, MaskVolume]:
    """Randomly perturb a training case. Deterministic for a given seed.

    Draw order is fixed: contrast coin (+ factor), brightness coin (+ shift),
    elastic coin (+ one field per slice). Intensities are linear transforms of
    the whole volume; the elastic warp is applied slice-wise with the same
    field for image (bilinear) and mask (nearest), so masks stay binary.
    """
    if vol.voxels.shape != mask.labels.shape:
        raise InputError(
            f"{vol.case_id}: image shape {vol.voxels.shape} != mask shape {mask.labels.shape}"
        )
    rng = np.random.default_rng(seed)
    image = vol.voxels.astype(np.float32, copy=True)
    labels = mask.labels

    if rng.random() < p:
        factor = rng.uniform(*contrast_range)
        mean = image.mean()
        image = mean + factor * (image - mean)

    if rng.random() < p:
        value_range = float(image.max() - image.min())
        image = image + rng.uniform(-brightness_frac, brightness_frac) * value_range

    if rng.random() < p:
        n_slices, height, width = image.shape
        warped_img = np.empty_like(image)
        warped_lbl = np.empty_like(labels)
        rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        for z in range(n_slices):
            field = _elastic_field(rng, height, width, elastic_grid, elastic_delta)
            coords = np.stack([rows + field[0], cols + field[1]])
            warped_img[z] = map_coordinates(image[z], coords, order=1, mode="nearest")
            warped_lbl[z] = map_coordinates(labels[z], coords, order=0, mode="nearest")
        image, labels = warped_img, warped_lbl

    return (
        Volume(vol.case_id, image, vol.spacing_mm),
        MaskVolume(mask.case_id, labels, mask.spacing_mm),
    )
