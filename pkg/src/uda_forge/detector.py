"""Toy dense detector: conv backbone, per-cell encoder, detection head, MAE
branch and the three domain discriminators.

Every forward returns ``(output, cache)`` and has a matching ``*_backward``
taking that cache. Parameters live in a flat ``dict[str, ndarray]``; batched
inputs carry a leading image axis.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Rng, conv2d, conv2d_backward, linear, linear_backward, sigmoid

Params = dict[str, np.ndarray]

GRID = 16
N_CELLS = GRID * GRID
CHANNELS = 16
CELL_PITCH = 4
BOX_MIN, BOX_MAX = 2.0, 64.0
STAGES = ("backbone", "encoder", "decoder")

BACKBONE_KEYS = ("backbone.conv1.weight", "backbone.conv1.bias",
                 "backbone.conv2.weight", "backbone.conv2.bias")
ENCODER_KEYS = ("encoder.weight", "encoder.bias")

PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "backbone.conv1.weight": (8, 1, 3, 3),
    "backbone.conv1.bias": (8,),
    "backbone.conv2.weight": (16, 8, 3, 3),
    "backbone.conv2.bias": (16,),
    "encoder.weight": (16, 16),
    "encoder.bias": (16,),
    "head.hidden.weight": (16, 16),
    "head.hidden.bias": (16,),
    "head.out.weight": (16, 5),
    "head.out.bias": (5,),
    "mask_query": (16,),
    "mae_decoder.weight": (16, 16),
    "mae_decoder.bias": (16,),
    **{f"disc.{s}.{p}": shape for s in STAGES
       for p, shape in (("weight", (16, 1)), ("bias", (1,)))},
}

OBJECTNESS_PRIOR = 0.01


def init_params(rng: Rng, dtype=np.float32) -> Params:
    """He-normal weights, zero biases, objectness bias set from a 1% prior."""
    params: Params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("bias") or name == "mask_query":
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            if name == "head.out.weight":
                std = 0.01
            elif name.startswith("disc.") or name == "mae_decoder.weight":
                std = np.sqrt(1.0 / fan_in)
            arr = rng.normal(int(np.prod(shape)), 0.0, std).reshape(shape)
        params[name] = arr.astype(dtype)
    params["head.out.bias"][0] = np.log(OBJECTNESS_PRIOR / (1 - OBJECTNESS_PRIOR))
    return params


def zero_params(dtype=np.float32) -> Params:
    return {k: np.zeros(s, dtype=dtype) for k, s in PARAM_SHAPES.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def validate_params(params: Params) -> None:
    missing = set(PARAM_SHAPES) - set(params)
    if missing:
        raise KeyError(f"missing parameters: {sorted(missing)}")
    for k, shape in PARAM_SHAPES.items():
        if params[k].shape != shape:
            raise ValueError(f"{k} has shape {params[k].shape}, expected {shape}")


# --------------------------------------------------------------------------
# Feature maps and masking
# --------------------------------------------------------------------------

@dataclass
class FeatureMaps:
    levels: list[np.ndarray]  # X_1 [.., 8, 32, 32], X_2 [.., 16, 16, 16]

    @property
    def top(self) -> np.ndarray:
        return self.levels[-1]


@dataclass
class MaskPattern:
    mask: np.ndarray  # bool [.., 16, 16], True = masked

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())


def to_tokens(fmap: np.ndarray) -> np.ndarray:
    """``[.., C, H, W]`` -> ``[.., H*W, C]`` (row-major cell index)."""
    lead = fmap.shape[:-3]
    c = fmap.shape[-3]
    moved = np.moveaxis(fmap, -3, -1)
    return np.ascontiguousarray(moved.reshape(*lead, -1, c))


def from_tokens(tokens: np.ndarray, grid: int = GRID) -> np.ndarray:
    lead = tokens.shape[:-2]
    c = tokens.shape[-1]
    return np.ascontiguousarray(np.moveaxis(tokens.reshape(*lead, grid, grid, c), -1, -3))


def backbone_forward(params: Params, image: np.ndarray):
    """``image`` is ``[1,64,64]`` or ``[N,1,64,64]``."""
    if image.shape[-3:] != (1, 64, 64):
        raise ValueError(f"backbone expects 1x64x64 images, got {image.shape}")
    z1 = conv2d(image, params["backbone.conv1.weight"], params["backbone.conv1.bias"], 2)
    x1 = np.maximum(z1, 0)
    z2 = conv2d(x1, params["backbone.conv2.weight"], params["backbone.conv2.bias"], 2)
    x2 = np.maximum(z2, 0)
    return FeatureMaps([x1, x2]), (image, z1, x1, z2)


def backbone_backward(params: Params, cache, dx2: np.ndarray, dx1: np.ndarray | None = None) -> Params:
    image, z1, x1, z2 = cache
    dz2 = dx2 * (z2 > 0)
    dx1_, dk2, db2 = conv2d_backward(dz2, x1, params["backbone.conv2.weight"], 2)
    if dx1 is not None:
        dx1_ = dx1_ + dx1
    dz1 = dx1_ * (z1 > 0)
    _, dk1, db1 = conv2d_backward(dz1, image, params["backbone.conv1.weight"], 2)
    return {"backbone.conv1.weight": dk1, "backbone.conv1.bias": db1,
            "backbone.conv2.weight": dk2, "backbone.conv2.bias": db2}


def sample_mask(mu: float, rng: Rng, n_images: int | None = None) -> MaskPattern:
    """``round(mu * 256)`` distinct cells per image, uniformly at random."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    k = int(round(mu * N_CELLS))
    count = 1 if n_images is None else n_images
    mask = np.zeros((count, N_CELLS), dtype=bool)
    for i in range(count):
        order = np.argsort(rng.uniform(N_CELLS), kind="stable")
        mask[i, order[:k]] = True
    mask = mask.reshape(count, GRID, GRID)
    return MaskPattern(mask[0] if n_images is None else mask)


def apply_mask(f: FeatureMaps, mu: float, rng: Rng) -> tuple[FeatureMaps, MaskPattern]:
    """Zero whole level-K cells. The input maps are left untouched."""
    top = f.top
    n_images = None if top.ndim == 3 else top.shape[0]
    pattern = sample_mask(mu, rng, n_images)
    masked = top * ~pattern.mask[..., None, :, :]
    return FeatureMaps([*f.levels[:-1], masked]), pattern


# --------------------------------------------------------------------------
# Encoder, MAE branch, detection head
# --------------------------------------------------------------------------

def encoder_forward(params: Params, tokens: np.ndarray):
    """Shared per-cell linear + relu over ``[.., 256, 16]`` tokens."""
    z = linear(tokens, params["encoder.weight"], params["encoder.bias"])
    return np.maximum(z, 0), (tokens, z)


def encoder_backward(params: Params, cache, denc: np.ndarray):
    tokens, z = cache
    dz = denc * (z > 0)
    dtok, dW, db = linear_backward(dz, tokens, params["encoder.weight"])
    return dtok, {"encoder.weight": dW, "encoder.bias": db}


def fill_mask_queries(encoded: np.ndarray, pattern: MaskPattern, q_m: np.ndarray) -> np.ndarray:
    cells = pattern.mask.reshape(*pattern.mask.shape[:-2], -1)[..., None]
    return np.where(cells, q_m, encoded)


def fill_mask_queries_backward(dfilled: np.ndarray, pattern: MaskPattern):
    cells = pattern.mask.reshape(*pattern.mask.shape[:-2], -1)[..., None]
    denc = np.where(cells, 0, dfilled).astype(dfilled.dtype)
    dq = np.where(cells, dfilled, 0).reshape(-1, dfilled.shape[-1]).sum(axis=0)
    return denc, dq


def mae_decode(params: Params, filled: np.ndarray):
    """Per-cell linear projection back to the level-K map ``[.., 16, 16, 16]``."""
    out = linear(filled, params["mae_decoder.weight"], params["mae_decoder.bias"])
    return from_tokens(out), filled


def mae_decode_backward(params: Params, cache, drecon: np.ndarray):
    filled = cache
    dout = to_tokens(drecon)
    dfilled, dW, db = linear_backward(dout, filled, params["mae_decoder.weight"])
    return dfilled, {"mae_decoder.weight": dW, "mae_decoder.bias": db}


def detect_forward(params: Params, encoded: np.ndarray):
    """Raw per-cell predictions ``[.., 256, 5]``: logit, dx, dy, log w, log h.

    The cache's second entry is the hidden ("decoder") activation, which the
    decoder-stage discriminator consumes.
    """
    zh = linear(encoded, params["head.hidden.weight"], params["head.hidden.bias"])
    hidden = np.maximum(zh, 0)
    raw = linear(hidden, params["head.out.weight"], params["head.out.bias"])
    return raw, (encoded, hidden, zh)


def detect_backward(params: Params, cache, draw: np.ndarray, dhidden: np.ndarray | None = None):
    encoded, hidden, zh = cache
    dh, dWo, dbo = linear_backward(draw, hidden, params["head.out.weight"])
    if dhidden is not None:
        dh = dh + dhidden
    dzh = dh * (zh > 0)
    denc, dWh, dbh = linear_backward(dzh, encoded, params["head.hidden.weight"])
    return denc, {"head.out.weight": dWo, "head.out.bias": dbo,
                  "head.hidden.weight": dWh, "head.hidden.bias": dbh}


def cell_centers() -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(N_CELLS)
    return idx % GRID, idx // GRID  # (cell_x, cell_y)


def decode_boxes(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores ``[.., 256]`` and boxes ``[.., 256, 4]`` in image pixels."""
    cx_idx, cy_idx = cell_centers()
    scores = sigmoid(raw[..., 0])
    cx = (cx_idx + 0.5 + np.tanh(raw[..., 1]) / 2) * CELL_PITCH
    cy = (cy_idx + 0.5 + np.tanh(raw[..., 2]) / 2) * CELL_PITCH
    w = np.clip(CELL_PITCH * np.exp(np.minimum(raw[..., 3], 10.0)), BOX_MIN, BOX_MAX)
    h = np.clip(CELL_PITCH * np.exp(np.minimum(raw[..., 4], 10.0)), BOX_MIN, BOX_MAX)
    return scores, np.stack([cx, cy, w, h], axis=-1)


# --------------------------------------------------------------------------
# Detections and NMS
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    score: float
    cell: int = -1

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between ``a [4]`` and each row of ``b [n, 4]`` (cx, cy, w, h)."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[2] * a[3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
        cells: np.ndarray | None = None) -> list[int]:
    """Greedy NMS; ties in score broken by ascending cell index."""
    if cells is None:
        cells = np.arange(len(scores))
    order = np.lexsort((cells, -scores))
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        if rest.size == 0:
            break
        order = rest[box_iou(boxes[i], boxes[rest]) <= iou_threshold]
    return keep


def decode_detections(raw: np.ndarray, score_threshold: float = 0.05,
                      nms_iou: float = 0.5) -> list[Detection]:
    """Score filter (``score >= threshold``) followed by greedy NMS for one image."""
    scores, boxes = decode_boxes(np.asarray(raw, dtype=np.float64))
    cand = np.flatnonzero(scores >= score_threshold)
    if cand.size == 0:
        return []
    keep = nms(boxes[cand], scores[cand], nms_iou, cells=cand)
    return [Detection(*(float(v) for v in boxes[cand[k]]), float(scores[cand[k]]), int(cand[k]))
            for k in keep]


# --------------------------------------------------------------------------
# Domain discriminators with gradient reversal
# --------------------------------------------------------------------------

def _pool(features: np.ndarray) -> np.ndarray:
    if features.ndim >= 3 and features.shape[-3:] == (CHANNELS, GRID, GRID):
        return features.mean(axis=(-2, -1))
    return features.mean(axis=-2)


def discriminate(params: Params, stage: str, features: np.ndarray, grl_lambda: float = 1.0):
    """Domain logit per image from mean-pooled stage features.

    ``features``: level-K map ``[.., 16, 16, 16]`` or tokens ``[.., 256, 16]``.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown discriminator stage {stage!r}")
    pooled = _pool(features)
    logit = linear(pooled, params[f"disc.{stage}.weight"], params[f"disc.{stage}.bias"])[..., 0]
    return logit, (stage, features.shape, pooled, grl_lambda)


def discriminate_backward(params: Params, cache, dlogit: np.ndarray):
    """Returns ``(dfeatures, grads)``; ``dfeatures`` is already reversed by ``-lambda``."""
    stage, shape, pooled, lam = cache
    dlogit = np.asarray(dlogit, dtype=pooled.dtype)[..., None]
    dpooled, dW, db = linear_backward(dlogit, pooled, params[f"disc.{stage}.weight"])
    dpooled = -lam * dpooled
    if len(shape) >= 3 and shape[-3:] == (CHANNELS, GRID, GRID):
        dfeat = np.broadcast_to(dpooled[..., None, None] / (GRID * GRID), shape)
    else:
        dfeat = np.broadcast_to(dpooled[..., None, :] / shape[-2], shape)
    grads = {f"disc.{stage}.weight": dW, f"disc.{stage}.bias": db}
    return np.ascontiguousarray(dfeat).astype(pooled.dtype), grads


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

MAGIC = b"DMST"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    """Binary layout: magic, u32 version, then per tensor (sorted by name)
    u32 name length, name, u32 rank, u32 dims, little-endian f32 data."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        out[name] = arr.astype(np.float32)
        pos += 4 * count
    return out


def prefixed(params: Params, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unprefixed(tensors: dict[str, np.ndarray], prefix: str) -> Params:
    lead = prefix + "/"
    out = {k[len(lead):]: v for k, v in tensors.items() if k.startswith(lead)}
    if not out:
        raise KeyError(f"checkpoint has no tensors under {prefix!r}")
    return out


def batch_detections(raw: np.ndarray, score_threshold: float = 0.05,
                     nms_iou: float = 0.5) -> list[list[Detection]]:
    return [decode_detections(r, score_threshold, nms_iou) for r in raw]


def iter_stage_keys(stages: Iterable[str]) -> list[str]:
    return [f"disc.{s}.{p}" for s in stages for p in ("weight", "bias")]
