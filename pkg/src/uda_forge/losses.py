"""Training objectives and their composition into the student loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .detector import (CELL_PITCH, GRID, N_CELLS, STAGES, BOX_MAX, BOX_MIN, Detection,
                       MaskPattern, Params, discriminate, discriminate_backward)
from .numerics import sigmoid

# largest |tanh| target used when inverting the centre offset
OFFSET_CLIP = 0.99
STAGE_WEIGHTS = {"backbone": 0.3, "encoder": 1.0, "decoder": 1.0}


@dataclass
class LossBreakdown:
    l_sup: float = 0.0
    l_unsup: float = 0.0
    l_dis_bac: float = 0.0
    l_dis_enc: float = 0.0
    l_dis_dec: float = 0.0
    l_adv: float = 0.0
    l_mask: float = 0.0
    l_teach: float = 0.0
    l_total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _bce_with_logits(z: np.ndarray, y: np.ndarray):
    loss = np.logaddexp(0.0, z) - y * z
    return loss, sigmoid(z) - y


def _smooth_l1(d: np.ndarray):
    a = np.abs(d)
    loss = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    grad = np.where(a < 1.0, d, np.sign(d))
    return loss, grad


def assign_cell(cx: float, cy: float) -> int:
    """Cell holding a point; points on a cell border go to the lower cell."""
    col = min(max(int(np.ceil(cx / CELL_PITCH)) - 1, 0), GRID - 1)
    row = min(max(int(np.ceil(cy / CELL_PITCH)) - 1, 0), GRID - 1)
    return row * GRID + col


def encode_targets(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive-cell indicator ``[256]`` and regression targets ``[256, 4]``.

    Boxes are visited in sorted order so the result does not depend on the
    order of the input list; the first box to claim a cell keeps it.
    """
    pos = np.zeros(N_CELLS)
    target = np.zeros((N_CELLS, 4))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    for cx, cy, w, h in sorted(map(tuple, boxes)):
        cell = assign_cell(cx, cy)
        if pos[cell]:
            continue
        pos[cell] = 1.0
        col, row = cell % GRID, cell // GRID
        ox = np.clip(2.0 * (cx / CELL_PITCH - col - 0.5), -OFFSET_CLIP, OFFSET_CLIP)
        oy = np.clip(2.0 * (cy / CELL_PITCH - row - 0.5), -OFFSET_CLIP, OFFSET_CLIP)
        target[cell] = (np.arctanh(ox), np.arctanh(oy),
                        np.log(np.clip(w, BOX_MIN, BOX_MAX) / CELL_PITCH),
                        np.log(np.clip(h, BOX_MIN, BOX_MAX) / CELL_PITCH))
    return pos, target


def _single_detection_loss(raw: np.ndarray, boxes: np.ndarray):
    pos, target = encode_targets(boxes)
    cls, dz = _bce_with_logits(raw[:, 0], pos)
    draw = np.zeros_like(raw)
    draw[:, 0] = dz / N_CELLS
    loss = cls.mean()
    n_pos = int(pos.sum())
    if n_pos:
        idx = np.flatnonzero(pos)
        reg, dreg = _smooth_l1(raw[idx, 1:] - target[idx])
        loss += reg.sum() / n_pos
        draw[idx, 1:] = dreg / n_pos
    return float(loss), draw


def _is_single(raw: np.ndarray) -> bool:
    return raw.ndim == 2


def supervised_loss(raw: np.ndarray, gt_boxes) -> tuple[float, np.ndarray]:
    """Dense objectness BCE (mean over cells) plus smooth-L1 box regression
    (mean over positive cells).

    ``raw`` is ``[256, 5]`` with ``gt_boxes`` an ``[k, 4]`` array, or
    ``[N, 256, 5]`` with a list of per-image arrays; the batch loss is the
    mean over images.
    """
    if _is_single(raw):
        loss, draw = _single_detection_loss(raw, gt_boxes)
        return loss, draw.astype(raw.dtype)
    if len(gt_boxes) != raw.shape[0]:
        raise ValueError("one box list per image required")
    n = raw.shape[0]
    total, draws = 0.0, np.zeros_like(raw)
    for i in range(n):
        loss, draw = _single_detection_loss(raw[i], gt_boxes[i])
        total += loss
        draws[i] = draw / n
    return total / n, draws


def _pseudo_boxes(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)


def unsupervised_loss(raw_on_strong: np.ndarray, pseudo) -> tuple[float, np.ndarray]:
    """Same functional form as :func:`supervised_loss` with pseudo-boxes as targets.

    ``pseudo`` is a list of detections (single image) or a list of such lists.
    """
    if _is_single(raw_on_strong):
        return supervised_loss(raw_on_strong, _pseudo_boxes(pseudo))
    return supervised_loss(raw_on_strong, [_pseudo_boxes(p) for p in pseudo])


def adversarial_losses(params: Params, features: Mapping[str, np.ndarray], domain_label,
                       grl_lambda: float = 1.0, weights: Mapping[str, float] | None = None):
    """Per-stage discriminator BCE and their weighted sum.

    Returns ``(per_stage, l_adv, dfeatures, grads)``. ``dfeatures`` already
    carries the gradient reversal; ``grads`` are the plain discriminator
    parameter gradients of the weighted sum.
    """
    weights = STAGE_WEIGHTS if weights is None else weights
    per_stage, dfeatures, grads = {}, {}, {}
    l_adv = 0.0
    for stage in STAGES:
        if stage not in features:
            continue
        logit, cache = discriminate(params, stage, features[stage], grl_lambda)
        label = np.broadcast_to(np.asarray(domain_label, dtype=np.float64), np.shape(logit))
        bce, dz = _bce_with_logits(logit.astype(np.float64), label)
        n = max(bce.size, 1)
        per_stage[stage] = float(bce.mean())
        beta = weights.get(stage, 0.0)
        l_adv += beta * per_stage[stage]
        dfeat, g = discriminate_backward(params, cache, beta * dz / n)
        dfeatures[stage] = dfeat
        grads.update(g)
    return per_stage, l_adv, dfeatures, grads


def mask_loss(recon: np.ndarray, target: np.ndarray, pattern: MaskPattern,
              whole_map: bool = False) -> tuple[float, np.ndarray]:
    """Mean squared reconstruction error over masked cells and all channels.

    Maps are ``[.., C, 16, 16]``; the target is treated as a constant. With
    ``whole_map`` every cell counts.
    """
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {target.shape}")
    diff = recon - target
    if whole_map:
        weight = np.ones(diff.shape, dtype=bool)
    else:
        weight = np.broadcast_to(pattern.mask[..., None, :, :], diff.shape)
    count = int(weight.sum())
    if count == 0:
        return 0.0, np.zeros_like(recon)
    sq = np.where(weight, diff * diff, 0)
    loss = float(sq.sum(dtype=np.float64) / count)
    return loss, (np.where(weight, 2.0 * diff, 0) / count).astype(recon.dtype)


def total_loss(parts: Mapping[str, float], lambda_unsup: float = 1.0, lambda_mask: float = 1.0,
               mae_active: bool = True, mode: str = "adapt") -> LossBreakdown:
    """Compose the objective from precomputed parts.

    ``parts`` keys: ``l_sup``, ``l_unsup``, ``l_adv``, ``l_mask`` and
    optionally ``l_dis_bac`` / ``l_dis_enc`` / ``l_dis_dec`` for reporting.
    """
    if mode not in ("adapt", "source_pretrain"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "source_pretrain" and (parts.get("l_unsup", 0.0) or parts.get("l_adv", 0.0)):
        raise ValueError("source_pretrain has no unsupervised or adversarial terms")
    b = LossBreakdown(
        l_sup=float(parts.get("l_sup", 0.0)),
        l_dis_bac=float(parts.get("l_dis_bac", 0.0)),
        l_dis_enc=float(parts.get("l_dis_enc", 0.0)),
        l_dis_dec=float(parts.get("l_dis_dec", 0.0)),
        l_mask=float(parts.get("l_mask", 0.0)),
    )
    if mode == "adapt":
        b.l_unsup = float(parts.get("l_unsup", 0.0))
        b.l_adv = float(parts.get("l_adv", 0.0))
    b.l_teach = b.l_sup + lambda_unsup * b.l_unsup + b.l_adv
    b.l_total = b.l_teach + (lambda_mask * b.l_mask if mae_active else 0.0)
    return b
