"""Contextual embedding block: slice matching plus attention-based merging.

The block turns the backbone's per-slice output into a context-aware
prediction in four steps:

1. embed:   project decoder features into a low-dimensional embedding space
            (three conv+BN+ReLU layers).
2. match:   for every pixel, search a (2*radius+1)^2 window in the
            neighboring slice's embedding map and keep the smallest pairwise
            embedding distance among pixels the neighbor predicts as organ.
3. refine:  fuse [features, matching distance, neighbor probability] through
            two conv+BN+ReLU layers and a 1x1 sigmoid head into a refined
            probability map.
4. merge:   re-weight the (decoder, refined) probability pair with a small
            squeeze-excitation gate and fuse them through a final conv head.

The pairwise distance between embeddings p and q is

    d = 1 - 2 / (1 + exp(||p - q||^2))

which is computed in the algebraically identical but overflow-free form
tanh(||p - q||^2 / 2).

Neighbor choice: slice n looks at slice n - interval, except the first
`interval` slices, which look forward at n + interval. A stack therefore
needs at least 2*interval slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvBNReLU, MiniUNet
from .config import ModelConfig
from .errors import InputError

# Sentinel for window positions with no usable candidate; any real distance
# is <= 1.0, so the sentinel never wins the min while a candidate exists.
_INVALID = 2.0


def distance_from_squared(squared: torch.Tensor) -> torch.Tensor:
    """Map a squared embedding distance to the bounded pairwise distance.

    Equivalent to 1 - 2/(1 + exp(squared)); the tanh form avoids exp overflow
    for large inputs.
    """
    return torch.tanh(squared / 2.0)


def pairwise_embedding_distance(e_p: torch.Tensor, e_q: torch.Tensor) -> torch.Tensor:
    """Bounded distance in [0, 1) between two embedding vectors."""
    if e_p.shape != e_q.shape:
        raise InputError(f"embedding shapes differ: {tuple(e_p.shape)} vs {tuple(e_q.shape)}")
    return distance_from_squared((e_p - e_q).pow(2).sum())


def neighbor_indices(n_slices: int, interval: int) -> list[int]:
    """Index of the context slice for each slice in a stack.

    Slice i borrows from i - interval; the first `interval` slices have no
    earlier neighbor and borrow from i + interval instead.
    """
    if interval < 1:
        raise InputError(f"interval must be >= 1, got {interval}")
    if n_slices < 2 * interval:
        raise InputError(
            f"need at least {2 * interval} slices for interval {interval}, got {n_slices}"
        )
    return [i + interval if i < interval else i - interval for i in range(n_slices)]


def neighboring_matching(
    embed_cur: torch.Tensor,
    embed_nb: torch.Tensor,
    prob_nb: torch.Tensor,
    radius: int,
    fg_threshold: float = 0.5,
) -> torch.Tensor:
    """Per-pixel minimum embedding distance to organ pixels of the neighbor slice.

    embed_cur, embed_nb: [n, c, h, w] (or [c, h, w]); prob_nb: [n, 1, h, w]
    (or [1, h, w] / [h, w]). Organ pixels are those with prob_nb >= fg_threshold.
    The search is restricted to a (2*radius+1)^2 window around each pixel;
    positions outside the image are skipped. Pixels whose window holds no organ
    candidate get distance 1.0 (no context) and zero gradient.

    Returns [n, 1, h, w] (or [1, h, w] for unbatched inputs). The minimum is
    found without building a graph, then the winning candidate's distance is
    recomputed differentiably, so gradients flow through the argmin branch
    into both embedding maps while memory stays flat in the window size.
    """
    squeeze = embed_cur.ndim == 3
    if squeeze:
        embed_cur = embed_cur.unsqueeze(0)
        embed_nb = embed_nb.unsqueeze(0)
        prob_nb = prob_nb.reshape(1, 1, *prob_nb.shape[-2:])
    if embed_cur.shape != embed_nb.shape:
        raise InputError(
            f"embedding shapes differ: {tuple(embed_cur.shape)} vs {tuple(embed_nb.shape)}"
        )
    if radius < 0:
        raise InputError(f"radius must be >= 0, got {radius}")
    n, c, h, w = embed_cur.shape
    prob_nb = prob_nb.reshape(n, 1, h, w)
    organ = (prob_nb >= fg_threshold).float()
    side = 2 * radius + 1

    pad = [radius] * 4
    emb_pad = F.pad(embed_nb, pad)
    organ_pad = F.pad(organ, pad)

    with torch.no_grad():
        stacked = embed_cur.new_full((n, side * side, h, w), _INVALID)
        for i, (dy, dx) in enumerate(_window_offsets(radius)):
            e_shift = emb_pad[:, :, radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            o_shift = organ_pad[:, :, radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            d2 = (embed_cur - e_shift).pow(2).sum(dim=1, keepdim=True)
            dist = distance_from_squared(d2)
            stacked[:, i : i + 1] = torch.where(o_shift > 0, dist, torch.full_like(dist, _INVALID))
        dmin, argmin = stacked.min(dim=1, keepdim=True)
        has_candidate = dmin <= 1.0

        # Winning offset -> absolute neighbor coordinates, clamped so the
        # gather below stays in bounds even where no candidate exists.
        off_y = argmin // side - radius
        off_x = argmin % side - radius
        yy = torch.arange(h, device=embed_cur.device).view(1, 1, h, 1)
        xx = torch.arange(w, device=embed_cur.device).view(1, 1, 1, w)
        ny = (yy + off_y).clamp_(0, h - 1)
        nx = (xx + off_x).clamp_(0, w - 1)
        lin = (ny * w + nx).reshape(n, 1, h * w).expand(n, c, h * w)

    selected = torch.gather(embed_nb.reshape(n, c, h * w), 2, lin).reshape(n, c, h, w)
    d2_sel = (embed_cur - selected).pow(2).sum(dim=1, keepdim=True)
    dist_sel = distance_from_squared(d2_sel)
    out = torch.where(has_candidate, dist_sel, torch.ones_like(dist_sel))
    return out.squeeze(0) if squeeze else out


def _window_offsets(radius: int):
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            yield dy, dx


def brute_force_matching(
    embed_cur: torch.Tensor,
    embed_nb: torch.Tensor,
    prob_nb: torch.Tensor,
    radius: int | None = None,
    fg_threshold: float = 0.5,
) -> torch.Tensor:
    """Reference matcher that enumerates every candidate pair explicitly.

    radius=None searches the whole slice (the exhaustive global scan that the
    windowed search approximates); an integer restricts candidates to the same
    clipped window as neighboring_matching, in the same row-major order, so
    local mode must agree with it element-exactly. Quadratic cost: meant for
    small test inputs (<= 32x32), kept as the oracle for the fast path and
    never called by it.
    """
    squeeze = embed_cur.ndim == 3
    if squeeze:
        embed_cur = embed_cur.unsqueeze(0)
        embed_nb = embed_nb.unsqueeze(0)
        prob_nb = prob_nb.reshape(1, 1, *prob_nb.shape[-2:])
    if embed_cur.shape != embed_nb.shape:
        raise InputError(
            f"embedding shapes differ: {tuple(embed_cur.shape)} vs {tuple(embed_nb.shape)}"
        )
    n, c, h, w = embed_cur.shape
    prob_nb = prob_nb.reshape(n, 1, h, w)
    organ = prob_nb[:, 0] >= fg_threshold
    out = torch.ones((n, 1, h, w), dtype=embed_cur.dtype, device=embed_cur.device)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                if radius is None:
                    ys, xs = organ[b].nonzero(as_tuple=True)
                else:
                    cand = []
                    for dy, dx in _window_offsets(radius):
                        qy, qx = y + dy, x + dx
                        if 0 <= qy < h and 0 <= qx < w and organ[b, qy, qx]:
                            cand.append((qy, qx))
                    if not cand:
                        continue
                    ys = torch.tensor([q[0] for q in cand])
                    xs = torch.tensor([q[1] for q in cand])
                if len(ys) == 0:
                    continue
                diff = embed_cur[b, :, y, x].unsqueeze(1) - embed_nb[b, :, ys, xs]
                dists = distance_from_squared(diff.pow(2).sum(dim=0))
                out[b, 0, y, x] = dists.min()
    return out.squeeze(0) if squeeze else out


class ContextBlock(nn.Module):
    """Learnable parts of the contextual embedding path."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        base, m = config.base_channels, config.bn_momentum

        self.embed_head = nn.Sequential(
            ConvBNReLU(base, base, bn_momentum=m),
            ConvBNReLU(base, base, bn_momentum=m),
            ConvBNReLU(base, config.embed_channels, bn_momentum=m),
        )
        # features + matching distance + neighbor probability
        self.refine_convs = nn.Sequential(
            ConvBNReLU(base + 2, base, bn_momentum=m),
            ConvBNReLU(base, base, bn_momentum=m),
        )
        self.refine_head = nn.Conv2d(base, 1, 1)

        hidden = 2 * config.attention_expansion
        self.gate_fc1 = nn.Linear(2, hidden)
        self.gate_fc2 = nn.Linear(hidden, 2)

        self.merge_convs = ConvBNReLU(2, base, bn_momentum=m)
        self.merge_head = nn.Conv2d(base, 1, 1)

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        """[n, base, h, w] -> [n, embed_channels, h, w]."""
        return self.embed_head(features)

    def refine(
        self, features: torch.Tensor, distance: torch.Tensor, prob_nb: torch.Tensor
    ) -> torch.Tensor:
        """Fuse matching evidence into a refined probability map [n, 1, h, w]."""
        fused = torch.cat([features, distance, prob_nb], dim=1)
        return torch.sigmoid(self.refine_head(self.refine_convs(fused)))

    def merge_squeeze(self, stacked: torch.Tensor) -> torch.Tensor:
        """Global average pool per channel: [n, 2, h, w] -> [n, 2]."""
        return stacked.mean(dim=(2, 3))

    def merge_score(self, squeezed: torch.Tensor) -> torch.Tensor:
        """Channel attention scores in (0, 1): [n, 2] -> [n, 2]."""
        return torch.sigmoid(self.gate_fc2(F.relu(self.gate_fc1(squeezed))))

    def merge(
        self, prob_decoder: torch.Tensor, prob_refined: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Attention-weighted fusion of the two predictions.

        Returns (final probability [n, 1, h, w], channel scores [n, 2]).
        """
        stacked = torch.cat([prob_decoder, prob_refined], dim=1)
        score = self.merge_score(self.merge_squeeze(stacked))
        weighted = stacked * score[:, :, None, None]
        final = torch.sigmoid(self.merge_head(self.merge_convs(weighted)))
        return final, score


@dataclass
class ContextOutputs:
    """Everything ce_forward computes, kept for losses, metrics, and inspection."""

    features: torch.Tensor  # [n, base, h, w] decoder features
    prob_decoder: torch.Tensor  # [n, 1, h, w] plain backbone prediction
    embeddings: torch.Tensor  # [n, embed_channels, h, w]
    neighbor_index: list[int]  # context slice index per slice
    distance: torch.Tensor  # [n, 1, h, w] matching distance map
    prob_refined: torch.Tensor  # [n, 1, h, w]
    prob_final: torch.Tensor  # [n, 1, h, w]
    gate: torch.Tensor  # [n, 2] attention scores


def ce_forward(
    backbone: MiniUNet,
    block: ContextBlock,
    slices: torch.Tensor,
    interval: int | None = None,
    radius: int | None = None,
    fg_threshold: float = 0.5,
) -> ContextOutputs:
    """Run the backbone plus context path on a stack of consecutive slices.

    slices: [n, in_channels, h, w], ordered as they appear in the volume.
    Slice neighbors are resolved within this stack, so n >= 2*interval.
    Neighbor probability maps are the backbone's own decoder outputs
    (not recursively refined ones). interval/radius default to the block's
    configured values.
    """
    if slices.ndim != 4:
        raise InputError(f"expected [n, c, h, w] slices, got {tuple(slices.shape)}")
    if interval is None:
        interval = block.config.neighbor_interval
    if radius is None:
        radius = block.config.match_radius
    idx = neighbor_indices(slices.shape[0], interval)

    features, prob_decoder = backbone(slices)
    embeddings = block.embed(features)

    prob_nb = prob_decoder[idx]
    distance = neighboring_matching(
        embeddings, embeddings[idx], prob_nb, radius, fg_threshold
    )
    prob_refined = block.refine(features, distance, prob_nb)
    prob_final, gate = block.merge(prob_decoder, prob_refined)
    return ContextOutputs(
        features=features,
        prob_decoder=prob_decoder,
        embeddings=embeddings,
        neighbor_index=idx,
        distance=distance,
        prob_refined=prob_refined,
        prob_final=prob_final,
        gate=gate,
    )


def build_context_block(config: ModelConfig, seed: int = 0) -> ContextBlock:
    """Construct with deterministic initialization for a given seed."""
    torch.manual_seed(seed)
    return ContextBlock(config)
