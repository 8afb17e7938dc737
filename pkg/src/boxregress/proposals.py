"""Object proposal generation: seed grid, refinement, scoring, decay NMS.

Seed boxes of several scales and aspect ratios are placed on a uniform
lattice, refined by a trained model, scored by how many refined
neighbors pile up on the same spot, and ranked by a non-maximum
suppression that divides overlapping neighbors' scores instead of
deleting them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import Box, boxes_to_array, iou_pairwise
from .errors import DataFormatError
from .ioutil import atomic_write
from .model import RegressorModel, refine

# A refined box counts toward a seed's score above this overlap.
NEIGHBOR_IOU = 0.7


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and self.score >= 0):
            raise ValueError(f"proposal score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class SeedGridConfig:
    """Seed box sizes as fractions of the image's short side."""

    scales: tuple[float, ...] = (0.125, 0.25, 0.5, 0.75)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: float = 0.0625

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be nonempty and positive, got {self.scales}")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"aspect_ratios must be nonempty and positive, got {self.aspect_ratios}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")


def clip_box(b: Box, image_w: float, image_h: float, min_side: float = 1.0) -> Box:
    """Clip a box to image bounds, keeping at least min_side per axis."""
    xmin = max(b.x - 0.5 * b.w, 0.0)
    xmax = min(b.x + 0.5 * b.w, image_w)
    ymin = max(b.y - 0.5 * b.h, 0.0)
    ymax = min(b.y + 0.5 * b.h, image_h)
    w = max(xmax - xmin, min_side)
    h = max(ymax - ymin, min_side)
    cx = min(max(0.5 * (xmin + xmax), 0.5 * w), image_w - 0.5 * w)
    cy = min(max(0.5 * (ymin + ymax), 0.5 * h), image_h - 0.5 * h)
    return Box(cx, cy, w, h)


def seed_grid(image_w: float, image_h: float, cfg: SeedGridConfig = SeedGridConfig()) -> list[Box]:
    """One box per (scale, aspect ratio, lattice position), clipped.

    Lattice centers start at half a stride from the image border and
    cover the whole image; enumeration order is scales, then ratios,
    then rows, then columns.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image dims must be positive, got {image_w} x {image_h}")
    short = min(image_w, image_h)
    step = cfg.stride * short
    xs = np.arange(0.5 * step, image_w, step)
    ys = np.arange(0.5 * step, image_h, step)
    out = []
    for scale in cfg.scales:
        for ratio in cfg.aspect_ratios:
            w = scale * short * math.sqrt(ratio)
            h = scale * short / math.sqrt(ratio)
            for cy in ys:
                for cx in xs:
                    out.append(clip_box(Box(float(cx), float(cy), w, h), image_w, image_h))
    return out


def score_proposals(boxes: Sequence[Box]) -> list[float]:
    """Score each box by its count of near-duplicate neighbors.

    The score of box n is the number of other boxes with IoU(b_n, b_m)
    strictly above 0.7.
    """
    n = len(boxes)
    if n == 0:
        return []
    arr = boxes_to_array(boxes)
    counts = np.zeros(n, dtype=np.int64)
    block = 512
    for start in range(0, n, block):
        sub = iou_pairwise(arr[start : start + block], arr)
        counts[start : start + block] = (sub > NEIGHBOR_IOU).sum(axis=1)
    # Self-IoU is 1 and always counted above; remove it.
    return [float(c - 1) for c in counts]


def decay_nms(
    proposals: Sequence[Proposal], iou_thresh: float = 0.6, decay: float = 10.0
) -> list[Proposal]:
    """Rank proposals, dividing overlapping neighbors' scores by `decay`.

    Repeatedly emits the highest-score remaining proposal (ties break to
    the lower input index), then divides by `decay` the score of every
    remaining proposal whose IoU with the emitted one exceeds
    iou_thresh. Nothing is deleted: the result is a permutation of the
    input carrying the decayed scores as of emission time.
    """
    if decay <= 1:
        raise ValueError(f"decay must be > 1, got {decay}")
    n = len(proposals)
    if n == 0:
        return []
    arr = boxes_to_array([p.box for p in proposals])
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    remaining = np.ones(n, dtype=bool)
    out: list[Proposal] = []
    for _ in range(n):
        pick = int(np.argmax(np.where(remaining, scores, -np.inf)))
        out.append(Proposal(proposals[pick].box, float(scores[pick])))
        remaining[pick] = False
        if remaining.any():
            overlaps = iou_pairwise(arr[pick : pick + 1], arr)[0]
            scores[remaining & (overlaps > iou_thresh)] /= decay
    return out


def generate_proposals(
    model: RegressorModel,
    scene,
    grid_cfg: SeedGridConfig = SeedGridConfig(),
    iterations: int = 1,
    nms_iou: float = 0.6,
    decay: float = 10.0,
) -> list[Proposal]:
    """Full pipeline: seed, refine, score, rank; output boxes clipped."""
    seeds = seed_grid(scene.width, scene.height, grid_cfg)
    refined = refine(model, scene, seeds, iterations=iterations)[-1]
    scores = score_proposals(refined)
    ranked = decay_nms([Proposal(b, s) for b, s in zip(refined, scores)], nms_iou, decay)
    return [Proposal(clip_box(p.box, scene.width, scene.height), p.score) for p in ranked]


def save_proposals(path: str, by_image: dict[str, list[Proposal]]) -> None:
    """Write proposals as comma-separated lines.

    Each line is: image id, xmin, ymin, xmax, ymax, score. Floats keep
    full double precision.
    """
    with atomic_write(path) as f:
        for image_id, props in by_image.items():
            for p in props:
                xmin, ymin, xmax, ymax = (
                    p.box.x - 0.5 * p.box.w,
                    p.box.y - 0.5 * p.box.h,
                    p.box.x + 0.5 * p.box.w,
                    p.box.y + 0.5 * p.box.h,
                )
                f.write(f"{image_id},{xmin!r},{ymin!r},{xmax!r},{ymax!r},{p.score!r}\n")


def load_proposals(path: str) -> dict[str, list[Proposal]]:
    """Read a proposals file; per-image order is preserved."""
    out: dict[str, list[Proposal]] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataFormatError(f"{path}: {e}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"{path}: line {lineno}: expected 6 fields, got {len(parts)}")
        image_id = parts[0]
        try:
            xmin, ymin, xmax, ymax, score = (float(v) for v in parts[1:])
        except ValueError:
            raise DataFormatError(f"{path}: line {lineno}: non-numeric field") from None
        try:
            box = Box(0.5 * (xmin + xmax), 0.5 * (ymin + ymax), xmax - xmin, ymax - ymin)
            prop = Proposal(box, score)
        except ValueError as e:
            raise DataFormatError(f"{path}: line {lineno}: {e}") from None
        out.setdefault(image_id, []).append(prop)
    return out
