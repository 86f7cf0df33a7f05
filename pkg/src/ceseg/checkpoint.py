"""Checkpoint archive: every parameter array plus config in one zip file.

Layout: `manifest.json` describing the run (config, variant, epoch, array
directory) and one `arrays/<name>` entry per tensor, stored as raw
little-endian bytes (f32 for all floating tensors, i64 for integer buffers
such as batch-norm step counters). Optimizer momentum buffers ride along so
training can resume bit-exactly.

Writing is byte-deterministic: entries are sorted by name, stored without
compression, and stamped with a fixed timestamp, so identical state produces
identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_digest, run_config_from_dict
from .errors import FormatError

FORMAT_TAG = "ceseg-checkpoint"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_FLOAT = np.dtype("<f4")
_INT = np.dtype("<i8")


@dataclass
class Checkpoint:
    run_config: RunConfig
    variant: str
    epoch: int
    config_hash: str
    best_val_dsc: float | None
    arrays: dict[str, np.ndarray]
    kinds: dict[str, str]  # name -> param | buffer | optim

    def group_parameter_counts(self) -> dict[str, int]:
        """Learnable scalar counts per parameter group (buffers excluded)."""
        counts = {"backbone": 0, "ce_block": 0}
        for name, kind in self.kinds.items():
            if kind != "param":
                continue
            size = int(np.prod(self.arrays[name].shape)) if self.arrays[name].shape else 1
            if name.startswith("backbone."):
                counts["backbone"] += size
            elif name.startswith("ce."):
                counts["ce_block"] += size
        counts["total"] = counts["backbone"] + counts["ce_block"]
        return counts


def _collect_arrays(prefix: str, module: torch.nn.Module) -> tuple[dict, dict]:
    arrays, kinds = {}, {}
    param_names = {n for n, _ in module.named_parameters()}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        value = tensor.detach().cpu().numpy()
        arrays[key] = value.astype(_INT if value.dtype.kind in "iu" else _FLOAT)
        kinds[key] = "param" if name in param_names else "buffer"
    return arrays, kinds


def _collect_optimizer(
    optimizer: torch.optim.Optimizer, named_params: list[tuple[str, torch.nn.Parameter]]
) -> tuple[dict, dict]:
    arrays, kinds = {}, {}
    for name, param in named_params:
        state = optimizer.state.get(param, {})
        buf = state.get("momentum_buffer")
        if buf is not None:
            key = f"optim.{name}.momentum_buffer"
            arrays[key] = buf.detach().cpu().numpy().astype(_FLOAT)
            kinds[key] = "optim"
    return arrays, kinds


def save_checkpoint(
    path: str | Path,
    run_config: RunConfig,
    variant: str,
    epoch: int,
    backbone: torch.nn.Module,
    block: torch.nn.Module | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    named_params: list[tuple[str, torch.nn.Parameter]] | None = None,
    best_val_dsc: float | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays, kinds = _collect_arrays("backbone", backbone)
    if block is not None:
        a, k = _collect_arrays("ce", block)
        arrays.update(a)
        kinds.update(k)
    if optimizer is not None:
        if named_params is None:
            raise FormatError("named_params is required to serialize optimizer state")
        a, k = _collect_optimizer(optimizer, named_params)
        arrays.update(a)
        kinds.update(k)

    manifest = {
        "format": FORMAT_TAG,
        "version": 1,
        "variant": variant,
        "epoch": epoch,
        "config": {k: v for k, v in run_config.to_dict().items() if k != "paths"},
        "config_hash": config_digest(run_config),
        "best_val_dsc": best_val_dsc,
        "arrays": [
            {
                "name": name,
                "shape": list(arrays[name].shape),
                "dtype": "i8" if arrays[name].dtype == _INT else "f32",
                "kind": kinds[name],
            }
            for name in sorted(arrays)
        ],
    }

    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"arrays/{name}", date_time=_FIXED_DATE)
            zf.writestr(info, np.ascontiguousarray(arrays[name]).tobytes())
    path.write_bytes(buffer.getvalue())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "manifest.json" not in names:
                raise FormatError(f"checkpoint {path} has no manifest.json")
            manifest = json.loads(zf.read("manifest.json"))
            _check_manifest(manifest, path)
            arrays, kinds = {}, {}
            for entry in manifest["arrays"]:
                name = entry["name"]
                member = f"arrays/{name}"
                if member not in names:
                    raise FormatError(f"checkpoint {path} missing array {name}")
                dtype = _INT if entry["dtype"] == "i8" else _FLOAT
                raw = zf.read(member)
                shape = tuple(int(s) for s in entry["shape"])
                expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
                if len(raw) != expected:
                    raise FormatError(
                        f"checkpoint {path}: array {name} has {len(raw)} bytes, "
                        f"expected {expected}"
                    )
                arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
                kinds[name] = entry["kind"]
    except zipfile.BadZipFile as exc:
        raise FormatError(f"checkpoint {path} is not a valid archive: {exc}") from exc
    return Checkpoint(
        run_config=run_config_from_dict(manifest["config"]),
        variant=manifest["variant"],
        epoch=int(manifest["epoch"]),
        config_hash=manifest["config_hash"],
        best_val_dsc=manifest["best_val_dsc"],
        arrays=arrays,
        kinds=kinds,
    )


def _check_manifest(manifest: dict, path: Path) -> None:
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise FormatError(f"checkpoint {path}: unrecognized manifest format")
    for key in ("variant", "epoch", "config", "config_hash", "arrays"):
        if key not in manifest:
            raise FormatError(f"checkpoint {path}: manifest missing {key!r}")
    if not isinstance(manifest["arrays"], list):
        raise FormatError(f"checkpoint {path}: manifest arrays must be a list")
    for entry in manifest["arrays"]:
        if not {"name", "shape", "dtype", "kind"} <= set(entry):
            raise FormatError(f"checkpoint {path}: malformed array entry {entry}")


def load_module_state(checkpoint: Checkpoint, prefix: str, module: torch.nn.Module) -> None:
    """Copy `prefix.*` arrays into the module, strictly matching its state dict."""
    state = {}
    for name, value in checkpoint.arrays.items():
        if name.startswith(prefix + ".") and checkpoint.kinds[name] in ("param", "buffer"):
            state[name[len(prefix) + 1 :]] = torch.from_numpy(value)
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise FormatError(f"checkpoint lacks {prefix} arrays: {sorted(missing)[:5]}")
    module.load_state_dict(state, strict=True)


def load_optimizer_state(
    checkpoint: Checkpoint,
    optimizer: torch.optim.Optimizer,
    named_params: list[tuple[str, torch.nn.Parameter]],
) -> None:
    for name, param in named_params:
        key = f"optim.{name}.momentum_buffer"
        if key in checkpoint.arrays:
            optimizer.state[param] = {
                "momentum_buffer": torch.from_numpy(checkpoint.arrays[key].copy())
            }
