"""Finite-difference check of the full student objective.

ReLU and smooth-L1 have kinks where central differences are meaningless,
so instances are drawn with small weights and sign-definite biases and
rejected until every pre-activation sits at least ``margin`` away from zero.
"""
from __future__ import annotations

import numpy as np

from . import detector as det
from .losses import encode_targets
from .numerics import Rng, fd_check
from .objective import ObjectiveConfig, StudentBatch, grl_surrogate, student_objective
from .synthdata import SOURCE_SPEC, TARGET_SPEC, generate_sample

_WEIGHT_SCALE = {"backbone.conv1.weight": 0.1, "backbone.conv2.weight": 0.03}
_SIGNED_BIASES = ("backbone.conv1.bias", "backbone.conv2.bias", "encoder.bias", "head.hidden.bias")


def _smooth_params(rng: Rng) -> det.Params:
    p = det.init_params(rng, np.float64)
    for k, v in p.items():
        if k.endswith("weight"):
            p[k] = _WEIGHT_SCALE.get(k, 0.1) * rng.normal(v.size).reshape(v.shape)
    for k in _SIGNED_BIASES:
        n = p[k].size
        sign = np.where(rng.uniform(n) < 0.6, 1.0, -1.0)
        p[k] = sign * rng.uniform(n, 1.0, 2.0)
    p["head.out.bias"] = rng.normal(5, 0.0, 0.5)
    p["mask_query"] = rng.normal(det.CHANNELS, 0.0, 0.5)
    return p


def kink_margin(params: det.Params, batch: StudentBatch) -> float:
    """Smallest distance of any ReLU input, or smooth-L1 residual, from its kink."""
    images = batch.images
    fm, (_, z1, _, z2) = det.backbone_forward(params, images)
    enc, (_, ez) = det.encoder_forward(params, det.to_tokens(fm.top))
    raw, (_, _, hz) = det.detect_forward(params, enc)
    keep = ~batch.mask.mask[:, None, :, :]
    _, (_, mz) = det.encoder_forward(params, det.to_tokens(fm.top * keep))
    m = min(np.abs(a).min() for a in (z1, z2, ez, hz, mz))
    for i, boxes in enumerate([*batch.src_boxes, *batch.tgt_boxes]):
        pos, target = encode_targets(boxes)
        idx = np.flatnonzero(pos)
        if idx.size:
            m = min(m, np.abs(np.abs(raw[i, idx, 1:] - target[idx]) - 1.0).min())
    return float(m)


def smooth_instance(seed: int, margin: float = 0.05, max_tries: int = 200):
    """Parameters and a two-image batch (one source, one target) whose
    kinks are at least ``margin`` away."""
    rng = Rng(seed)
    for _ in range(max_tries):
        r = rng.spawn()
        p = _smooth_params(r)
        s = generate_sample(SOURCE_SPEC, r.spawn(), "source")
        t = generate_sample(TARGET_SPEC, r.spawn(), "target")
        pseudo = np.array([[r.uniform(None, 8.0, 56.0), r.uniform(None, 8.0, 56.0),
                            r.uniform(None, 4.0, 16.0), r.uniform(None, 4.0, 16.0)]])
        batch = StudentBatch(s.image[None].astype(np.float64), [s.boxes],
                             t.image[None].astype(np.float64), [pseudo],
                             det.sample_mask(0.3, r, 2))
        if kink_margin(p, batch) >= margin:
            return p, batch
    raise RuntimeError(f"no instance with kink margin {margin} after {max_tries} tries")


def objective_grad_error(seed: int, cfg: ObjectiveConfig | None = None, eps: float = 1e-3,
                         max_coords: int | None = 4) -> float:
    """Max relative FD error of the full objective, GRL path included."""
    cfg = cfg or ObjectiveConfig()
    params, batch = smooth_instance(seed)
    value = grl_surrogate(params, batch, cfg)
    _, grads = student_objective(params, batch, cfg)
    return fd_check(lambda q: (value(q), grads), params, eps=eps, value_fn=value,
                    max_coords=max_coords, seed=seed)
