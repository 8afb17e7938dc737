"""IoU regression loss, its analytic gradient, and the smooth-L1 baseline.

The loss between a refined box and its target is -ln(IoU + epsilon).
Gradients are taken with respect to the predicted offsets, i.e. through
the box transform and the IoU computation by the chain rule. At points
where the intersection extent switches between box edges the gradient
uses the midpoint of the two one-sided derivatives, so exact symmetric
optima (refined box equal to the target) get a zero gradient.

The *_terms_batch functions are the single implementation; the scalar
operations wrap them row-wise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .boxes import (
    Box,
    Offsets,
    apply_offsets,
    apply_offsets_array,
    encode_offsets_array,
    iou,
    match_nearest_gt,
)


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-6          # stabilizer inside the logarithm
    smooth_l1_delta: float = 1.0   # quadratic/linear switch point
    fallback_weight: float = 1.0   # scale on the zero-overlap gradient fallback

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.smooth_l1_delta <= 0:
            raise ValueError(f"smooth_l1_delta must be positive, got {self.smooth_l1_delta}")
        if self.fallback_weight < 0:
            raise ValueError(f"fallback_weight must be >= 0, got {self.fallback_weight}")


class LossGradient(NamedTuple):
    grad: np.ndarray      # d loss / d (tx, ty, tw, th)
    used_fallback: bool   # True when the boxes were disjoint


def iou_loss(u: Box, v: Box, cfg: LossConfig = LossConfig()) -> float:
    """-ln(IoU(u, v) + epsilon); strictly decreasing in IoU."""
    return -math.log(iou(u, v) + cfg.epsilon)


def smooth_l1_terms_batch(
    preds: np.ndarray, targets: np.ndarray, cfg: LossConfig = LossConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Rowwise smooth-L1 loss and gradient between (N, 4) offset arrays."""
    delta = cfg.smooth_l1_delta
    d = preds - targets
    quad = np.abs(d) < delta
    loss = np.where(quad, 0.5 * d * d / delta, np.abs(d) - 0.5 * delta).sum(axis=1)
    grad = np.where(quad, d / delta, np.sign(d))
    return loss, grad


def smooth_l1_loss(pred: Offsets, target: Offsets, cfg: LossConfig = LossConfig()) -> float:
    """Componentwise smooth-L1 distance between offset vectors, summed."""
    loss, _ = smooth_l1_terms_batch(pred.as_array()[None, :], target.as_array()[None, :], cfg)
    return float(loss[0])


def smooth_l1_grad(pred: Offsets, target: Offsets, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of smooth_l1_loss with respect to pred."""
    _, grad = smooth_l1_terms_batch(pred.as_array()[None, :], target.as_array()[None, :], cfg)
    return grad[0]


def _edge_weight(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Subgradient of min(a, b) in a: 1 where a selects, 0 where b does,
    # midpoint at exact ties.
    return np.where(a < b, 1.0, np.where(a == b, 0.5, 0.0))


def iou_loss_terms_batch(
    preds: np.ndarray,
    input_boxes: np.ndarray,
    gts: np.ndarray,
    cfg: LossConfig = LossConfig(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU loss and offset gradient for matched rows.

    preds are (N, 4) offsets, input_boxes and gts (N, 4) center-form
    boxes. Returns (loss, grad, fallback) of shapes (N,), (N, 4), (N,).
    Rows whose refined box is disjoint from its target get the zero IoU
    loss value but the smooth-L1 gradient toward the encoded target,
    scaled by cfg.fallback_weight, with the fallback flag set.
    """
    refined = apply_offsets_array(input_boxes, preds)
    if not np.isfinite(refined).all():
        raise OverflowError("refined boxes out of numeric range")

    rx_lo = refined[:, 0] - 0.5 * refined[:, 2]
    rx_hi = refined[:, 0] + 0.5 * refined[:, 2]
    ry_lo = refined[:, 1] - 0.5 * refined[:, 3]
    ry_hi = refined[:, 1] + 0.5 * refined[:, 3]
    gx_lo = gts[:, 0] - 0.5 * gts[:, 2]
    gx_hi = gts[:, 0] + 0.5 * gts[:, 2]
    gy_lo = gts[:, 1] - 0.5 * gts[:, 3]
    gy_hi = gts[:, 1] + 0.5 * gts[:, 3]

    iw = np.minimum(rx_hi, gx_hi) - np.maximum(rx_lo, gx_lo)
    ih = np.minimum(ry_hi, gy_hi) - np.maximum(ry_lo, gy_lo)
    overlap = (iw > 0.0) & (ih > 0.0)

    inter = np.where(overlap, iw * ih, 0.0)
    union = refined[:, 2] * refined[:, 3] + gts[:, 2] * gts[:, 3] - inter
    iou_val = inter / union
    loss = -np.log(iou_val + cfg.epsilon)

    # Which box edge bounds the intersection on each side (0.5 at ties).
    wx_hi = _edge_weight(rx_hi, gx_hi)
    wx_lo = _edge_weight(gx_lo, rx_lo)
    wy_hi = _edge_weight(ry_hi, gy_hi)
    wy_lo = _edge_weight(gy_lo, ry_lo)

    # IoU = I / (A_r + A_g - I):
    # dIoU/dq = (dI/dq * (U + I) - I * dA_r/dq) / U^2, then
    # dL/dq = -dIoU/dq / (IoU + eps).
    scale = -1.0 / ((iou_val + cfg.epsilon) * union * union)
    upi = union + inter
    dl_rx = scale * ih * (wx_hi - wx_lo) * upi
    dl_ry = scale * iw * (wy_hi - wy_lo) * upi
    dl_rw = scale * (ih * 0.5 * (wx_hi + wx_lo) * upi - inter * refined[:, 3])
    dl_rh = scale * (iw * 0.5 * (wy_hi + wy_lo) * upi - inter * refined[:, 2])

    # Chain through the box transform to the offsets.
    grad = np.column_stack(
        [
            dl_rx * input_boxes[:, 2],
            dl_ry * input_boxes[:, 3],
            dl_rw * refined[:, 2],
            dl_rh * refined[:, 3],
        ]
    )

    fallback = ~overlap
    if fallback.any():
        targets = encode_offsets_array(input_boxes[fallback], gts[fallback])
        _, fb_grad = smooth_l1_terms_batch(preds[fallback], targets, cfg)
        grad[fallback] = cfg.fallback_weight * fb_grad
    return loss, grad, fallback


def iou_loss_value_and_grad(
    pred: Offsets, input_box: Box, gt: Box, cfg: LossConfig = LossConfig()
) -> tuple[float, np.ndarray, bool]:
    """Loss value plus gradient with respect to pred, in one pass."""
    loss, grad, fallback = iou_loss_terms_batch(
        pred.as_array()[None, :],
        np.array([[input_box.x, input_box.y, input_box.w, input_box.h]]),
        np.array([[gt.x, gt.y, gt.w, gt.h]]),
        cfg,
    )
    return float(loss[0]), grad[0], bool(fallback[0])


def iou_loss_grad(
    pred: Offsets, input_box: Box, gt: Box, cfg: LossConfig = LossConfig()
) -> LossGradient:
    """Gradient of iou_loss(apply_offsets(input_box, pred), gt) in pred.

    When the refined box and gt are disjoint the IoU gradient vanishes
    identically; the result is then the smooth-L1 gradient toward
    encode_offsets(input_box, gt) scaled by cfg.fallback_weight, with
    the fallback flag set.
    """
    _, grad, used_fallback = iou_loss_value_and_grad(pred, input_box, gt, cfg)
    return LossGradient(grad, used_fallback)


def batch_iou_loss(
    inputs: Sequence[tuple[Box, Offsets]],
    gts: Sequence[Box],
    cfg: LossConfig = LossConfig(),
) -> float:
    """Mean IoU loss over (input box, predicted offsets) pairs.

    Each refined box is scored against its best-overlapping ground truth.
    """
    if len(inputs) == 0:
        raise ValueError("batch_iou_loss requires a nonempty input list")
    if len(gts) == 0:
        raise ValueError("batch_iou_loss requires a nonempty ground-truth list")
    total = 0.0
    for b, pred in inputs:
        g = gts[match_nearest_gt(b, gts)]
        total += iou_loss(apply_offsets(b, pred), g, cfg)
    return total / len(inputs)
