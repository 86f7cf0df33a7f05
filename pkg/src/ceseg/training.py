"""End-to-end optimization and evaluation orchestration.

One training iteration samples a contiguous slice window from a single
volume (neighboring slices must coexist in a batch for the context path),
runs the forward pass, and takes one SGD step on

    loss = dice(final prediction, gt) + aux_loss_weight * dice(decoder prediction, gt)

for the context variant, or plain dice on the decoder output for the
baseline. With a fixed seed and single-threaded execution the whole run is
bit-reproducible; all data-side randomness derives from (seed, epoch, case)
so a resumed run continues exactly where the interrupted one left off.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import MiniUNet
from .ce_block import ContextBlock, ce_forward
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_module_state,
    load_optimizer_state,
    save_checkpoint,
)
from .config import ModelConfig, RunConfig, config_digest
from .data import (
    MaskVolume,
    Volume,
    augment,
    load_case,
    load_manifest,
    preprocess_mr,
    save_volume,
)
from .errors import (
    ConfigurationError,
    EmptyMaskError,
    InputError,
    TrainingDivergedError,
)
from .metrics import MetricsReport, assd, dice_loss, dsc_3d, hd95, precision, sensitivity

VARIANTS = ("baseline", "ce")
LOG_NAME = "train_log.jsonl"
BEST_NAME = "checkpoint_best.zip"
LAST_NAME = "checkpoint_last.zip"


def build_model(
    config: ModelConfig, seed: int, variant: str
) -> tuple[MiniUNet, ContextBlock | None]:
    """Deterministically initialize the backbone (and context block for 'ce')."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    torch.manual_seed(seed)
    backbone = MiniUNet(config)
    block = ContextBlock(config) if variant == "ce" else None
    return backbone, block


def named_model_params(
    backbone: MiniUNet, block: ContextBlock | None
) -> list[tuple[str, torch.nn.Parameter]]:
    """Stable (name, parameter) order shared by the optimizer and checkpoints."""
    params = [(f"backbone.{n}", p) for n, p in backbone.named_parameters()]
    if block is not None:
        params += [(f"ce.{n}", p) for n, p in block.named_parameters()]
    return params


def make_optimizer(params, lr: float, momentum: float, weight_decay: float):
    # torch SGD: weight decay is added to the gradient, the momentum buffer
    # starts at zero, and the step is lr * buffer. That is the documented
    # update rule of this package, so use it directly.
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def predict_volume(
    backbone: MiniUNet, block: ContextBlock | None, voxels: np.ndarray
) -> np.ndarray:
    """Probability volume [slices, h, w] for a preprocessed intensity volume."""
    was_training = backbone.training
    backbone.eval()
    if block is not None:
        block.eval()
    with torch.no_grad():
        stack = torch.from_numpy(np.ascontiguousarray(voxels, dtype=np.float32)).unsqueeze(1)
        if block is None:
            _, prob = backbone(stack)
        else:
            prob = ce_forward(backbone, block, stack).prob_final
        result = prob.squeeze(1).numpy()
    if was_training:
        backbone.train()
        if block is not None:
            block.train()
    return result


@dataclass
class TrainResult:
    checkpoint_best: Path
    checkpoint_last: Path
    log_path: Path
    history: list[dict]


def _load_split(manifest_path: str | Path, split: str) -> list[tuple[Volume, MaskVolume]]:
    entries = [e for e in load_manifest(manifest_path) if e["split"] == split]
    cases = []
    for entry in entries:
        vol, mask = load_case(entry)
        cases.append((preprocess_mr(vol), mask))
    return cases


def _augment_seed(seed: int, epoch: int, case_index: int) -> int:
    return int(np.random.SeedSequence([seed, 2, epoch, case_index]).generate_state(1)[0])


def _forward_loss(backbone, block, images, masks, train_cfg):
    if block is None:
        _, prob = backbone(images)
        loss = dice_loss(prob, masks, train_cfg.dice_smooth)
        return loss, {"dice_decoder": float(loss.detach())}
    outputs = ce_forward(backbone, block, images)
    loss_final = dice_loss(outputs.prob_final, masks, train_cfg.dice_smooth)
    loss_decoder = dice_loss(outputs.prob_decoder, masks, train_cfg.dice_smooth)
    loss = loss_final + train_cfg.aux_loss_weight * loss_decoder
    return loss, {
        "dice_final": float(loss_final.detach()),
        "dice_decoder": float(loss_decoder.detach()),
    }


def train(
    run_config: RunConfig,
    manifest_path: str | Path,
    out_dir: str | Path,
    variant: str = "ce",
    resume: str | Path | None = None,
) -> TrainResult:
    model_cfg, train_cfg = run_config.model, run_config.train
    train_cfg.check_against_model(model_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_cases = _load_split(manifest_path, "train")
    val_cases = _load_split(manifest_path, "val")
    if not train_cases:
        raise InputError(f"manifest {manifest_path} has no train cases")
    min_slices = 2 * (model_cfg.neighbor_interval + 1)
    for vol, _ in train_cases + val_cases:
        if vol.voxels.shape[0] < min_slices:
            raise InputError(
                f"case {vol.case_id} has {vol.voxels.shape[0]} slices; "
                f"need >= {min_slices} for the context path"
            )

    backbone, block = build_model(model_cfg, train_cfg.seed, variant)
    params = named_model_params(backbone, block)
    optimizer = make_optimizer(
        [p for _, p in params], train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay
    )

    start_epoch = 0
    best_val = None
    log_path = out_dir / LOG_NAME
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_hash != config_digest(run_config):
            raise ConfigurationError(
                "resume checkpoint was trained with a different config "
                f"(hash {ckpt.config_hash[:12]} != {config_digest(run_config)[:12]})"
            )
        if ckpt.variant != variant:
            raise ConfigurationError(
                f"resume checkpoint is variant {ckpt.variant!r}, requested {variant!r}"
            )
        load_module_state(ckpt, "backbone", backbone)
        if block is not None:
            load_module_state(ckpt, "ce", block)
        load_optimizer_state(ckpt, optimizer, params)
        start_epoch = ckpt.epoch
        best_val = ckpt.best_val_dsc
    else:
        if log_path.exists():
            log_path.unlink()

    backbone.train()
    if block is not None:
        block.train()

    history: list[dict] = []
    best_path = out_dir / BEST_NAME
    last_path = out_dir / LAST_NAME

    for epoch in range(start_epoch + 1, train_cfg.epochs + 1):
        tic = time.perf_counter()
        rng = np.random.default_rng([train_cfg.seed, 1, epoch])
        order = rng.permutation(len(train_cases))
        losses = []
        for case_index in order:
            vol, mask = train_cases[case_index]
            n_slices = vol.voxels.shape[0]
            window = min(train_cfg.batch_slices, n_slices)
            start = int(rng.integers(0, n_slices - window + 1))
            sub_vol = Volume(vol.case_id, vol.voxels[start : start + window], vol.spacing_mm)
            sub_mask = MaskVolume(
                mask.case_id, mask.labels[start : start + window], mask.spacing_mm
            )
            if train_cfg.augment:
                sub_vol, sub_mask = augment(
                    sub_vol, sub_mask, _augment_seed(train_cfg.seed, epoch, int(case_index))
                )
            images = torch.from_numpy(sub_vol.voxels).unsqueeze(1)
            masks = torch.from_numpy(sub_mask.labels.astype(np.float32)).unsqueeze(1)

            loss, terms = _forward_loss(backbone, block, images, masks, train_cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    epoch, vol.case_id, float(loss.detach())
                ) from None
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        val_dsc = None
        if val_cases:
            scores = []
            for vol, mask in val_cases:
                prob = predict_volume(backbone, block, vol.voxels)
                scores.append(dsc_3d(prob >= 0.5, mask.labels))
            val_dsc = float(np.mean(scores))

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_dsc": val_dsc,
            "lr": train_cfg.lr,
            "wall_s": round(time.perf_counter() - tic, 3),
        }
        history.append(record)
        with open(log_path, "a") as handle:
            handle.write(json.dumps(record) + "\n")

        if val_dsc is not None and (best_val is None or val_dsc > best_val):
            best_val = val_dsc
            save_checkpoint(
                best_path, run_config, variant, epoch, backbone, block,
                optimizer, params, best_val_dsc=best_val,
            )
        save_checkpoint(
            last_path, run_config, variant, epoch, backbone, block,
            optimizer, params, best_val_dsc=best_val,
        )

    if not best_path.exists():
        # No validation split: the last state doubles as the selected model.
        save_checkpoint(
            best_path, run_config, variant, train_cfg.epochs, backbone, block,
            optimizer, params, best_val_dsc=best_val,
        )
    return TrainResult(best_path, last_path, log_path, history)


def evaluate(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    split: str = "test",
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Segment every case of a split and score it in 3D.

    Probabilities are thresholded at 0.5 (0.5 itself counts as foreground).
    Cases whose surface metrics cannot be computed (empty prediction) keep
    their overlap metrics and carry an error note instead of aborting the
    report. With out_dir set, writes report.json, report.csv, and the
    predicted masks under predictions/.
    """
    ckpt = load_checkpoint(checkpoint_path)
    model_cfg = ckpt.run_config.model
    backbone, block = build_model(model_cfg, 0, ckpt.variant)
    load_module_state(ckpt, "backbone", backbone)
    if block is not None:
        load_module_state(ckpt, "ce", block)
    backbone.eval()
    if block is not None:
        block.eval()

    entries = [e for e in load_manifest(manifest_path) if e["split"] == split]
    if not entries:
        raise InputError(f"manifest {manifest_path} has no cases in split {split!r}")

    predictions_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        predictions_dir = out_dir / "predictions"
        predictions_dir.mkdir(parents=True, exist_ok=True)

    per_case = []
    for entry in entries:
        vol, mask = load_case(entry)
        prob = predict_volume(backbone, block, preprocess_mr(vol).voxels)
        pred = prob >= 0.5
        if predictions_dir is not None:
            save_volume(
                MaskVolume(vol.case_id, pred.astype(np.uint8), vol.spacing_mm),
                predictions_dir,
            )
        row = {
            "case_id": entry["case_id"],
            "dsc_pct": dsc_3d(pred, mask.labels),
            "sensitivity_pct": sensitivity(pred, mask.labels),
            "precision_pct": precision(pred, mask.labels),
        }
        try:
            row["assd_mm"] = assd(pred, mask.labels, vol.spacing_mm)
            row["hd95_mm"] = hd95(pred, mask.labels, vol.spacing_mm)
        except EmptyMaskError as exc:
            row["assd_mm"] = None
            row["hd95_mm"] = None
            row["error"] = str(exc)
        per_case.append(row)

    log_path = Path(checkpoint_path).parent / LOG_NAME
    meta = {
        "checkpoint": str(Path(checkpoint_path).resolve()),
        "manifest": str(Path(manifest_path).resolve()),
        "split": split,
        "variant": ckpt.variant,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "train_log": str(log_path.resolve()) if log_path.is_file() else None,
        "predictions": str(predictions_dir.resolve()) if predictions_dir else None,
    }
    report = MetricsReport.from_cases(per_case, meta)
    if out_dir is not None:
        report.to_json(out_dir / "report.json")
        report.to_csv(out_dir / "report.csv")
    return report


def count_parameters(checkpoint: str | Path | Checkpoint) -> dict[str, int]:
    """Exact learnable scalar counts {backbone, ce_block, total} of a checkpoint."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    return checkpoint.group_parameter_counts()
