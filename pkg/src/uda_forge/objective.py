"""The full student objective: one forward/backward through backbone,
encoder, detection head, discriminators and the MAE branch."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import detector as det
from .detector import MaskPattern, Params
from .losses import STAGE_WEIGHTS, adversarial_losses, mask_loss, supervised_loss, total_loss


@dataclass
class StudentBatch:
    src_images: np.ndarray  # [Ns, 1, 64, 64]
    src_boxes: list[np.ndarray]
    tgt_images: np.ndarray | None = None  # [Nt, 1, 64, 64]
    tgt_boxes: list[np.ndarray] = field(default_factory=list)  # pseudo-labels
    mask: MaskPattern | None = None  # one pattern per image of the concatenated batch

    @property
    def images(self) -> np.ndarray:
        if self.tgt_images is None or len(self.tgt_images) == 0:
            return self.src_images
        return np.concatenate([self.src_images, self.tgt_images])

    @property
    def n_src(self) -> int:
        return len(self.src_images)

    @property
    def n_tgt(self) -> int:
        return 0 if self.tgt_images is None else len(self.tgt_images)


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: str = "adapt"  # or "source_pretrain"
    lambda_unsup: float = 1.0
    lambda_mask: float = 1.0
    grl_lambda: float = 1.0
    stage_weights: tuple[tuple[str, float], ...] = tuple(STAGE_WEIGHTS.items())
    use_adv: bool = True
    mae_active: bool = True
    mask_whole_map: bool = False


def student_objective(params: Params, batch: StudentBatch, cfg: ObjectiveConfig,
                      target_params: Params | None = None, with_grads: bool = True):
    """Returns ``(LossBreakdown, grads)`` (``grads`` is None when not requested).

    Discriminator parameters receive the plain gradient of the adversarial
    term; everything upstream of a discriminator receives it reversed. The
    reconstruction target is a constant; ``target_params`` computes it from
    other weights (used to finite-difference the stop-gradient).
    """
    adapt = cfg.mode == "adapt"
    ns, nt = batch.n_src, batch.n_tgt
    n = ns + nt
    dtype = params["encoder.weight"].dtype
    images = batch.images.astype(dtype, copy=False)

    fm, bcache = det.backbone_forward(params, images)
    x2 = fm.top
    enc, ecache = det.encoder_forward(params, det.to_tokens(x2))
    raw, hcache = det.detect_forward(params, enc)
    hidden = hcache[1]

    parts: dict[str, float] = {}
    draw = np.zeros_like(raw)
    parts["l_sup"], draw[:ns] = supervised_loss(raw[:ns], batch.src_boxes)
    if adapt and nt:
        l_unsup, d_t = supervised_loss(raw[ns:], batch.tgt_boxes)
        parts["l_unsup"] = l_unsup
        draw[ns:] = cfg.lambda_unsup * d_t

    adv = None
    if adapt and cfg.use_adv:
        labels = np.concatenate([np.zeros(ns), np.ones(nt)])
        adv = adversarial_losses(params, {"backbone": x2, "encoder": enc, "decoder": hidden},
                                 labels, cfg.grl_lambda, dict(cfg.stage_weights))
        per_stage = adv[0]
        parts.update(l_adv=adv[1], l_dis_bac=per_stage["backbone"],
                     l_dis_enc=per_stage["encoder"], l_dis_dec=per_stage["decoder"])

    mae = None
    if cfg.mae_active:
        pattern = batch.mask
        if pattern is None:
            raise ValueError("MAE branch active but no mask pattern supplied")
        if pattern.mask.shape != (n, det.GRID, det.GRID):
            raise ValueError("mask pattern must cover every image in the batch")
        keep = ~pattern.mask[:, None, :, :]
        menc, mcache = det.encoder_forward(params, det.to_tokens(x2 * keep))
        filled = det.fill_mask_queries(menc, pattern, params["mask_query"])
        recon, dcache = det.mae_decode(params, filled)
        target = x2
        if target_params is not None:
            target = det.backbone_forward(target_params, images)[0].top
        parts["l_mask"], drecon = mask_loss(recon, target, pattern, cfg.mask_whole_map)
        mae = (pattern, keep, mcache, dcache, drecon)

    breakdown = total_loss(parts, cfg.lambda_unsup, cfg.lambda_mask, cfg.mae_active, cfg.mode)
    if not with_grads:
        return breakdown, None

    grads: Params = {k: np.zeros_like(v) for k, v in params.items()}

    def add(g: Params) -> None:
        for k, v in g.items():
            grads[k] += v

    dx2 = np.zeros_like(x2)
    denc = np.zeros_like(enc)
    dhidden = None
    if adv is not None:
        _, _, dfeat, g = adv
        add(g)
        dx2 += dfeat["backbone"]
        denc += dfeat["encoder"]
        dhidden = dfeat["decoder"]

    if mae is not None:
        pattern, keep, mcache, dcache, drecon = mae
        dfilled, g = det.mae_decode_backward(params, dcache, drecon * dtype.type(cfg.lambda_mask))
        add(g)
        dmenc, dq = det.fill_mask_queries_backward(dfilled, pattern)
        grads["mask_query"] += dq
        dmtok, g = det.encoder_backward(params, mcache, dmenc)
        add(g)
        dx2 += det.from_tokens(dmtok) * keep

    denc_h, g = det.detect_backward(params, hcache, draw, dhidden)
    add(g)
    denc += denc_h
    dtok, g = det.encoder_backward(params, ecache, denc)
    add(g)
    dx2 += det.from_tokens(dtok)
    add(det.backbone_backward(params, bcache, dx2))
    return breakdown, {k: v.astype(dtype, copy=False) for k, v in grads.items()}


def objective_value(params: Params, batch: StudentBatch, cfg: ObjectiveConfig) -> float:
    return student_objective(params, batch, cfg, with_grads=False)[0].l_total


def grl_surrogate(base: Params, batch: StudentBatch, cfg: ObjectiveConfig):
    """Scalar function whose ordinary gradient at ``base`` equals the
    gradient returned by :func:`student_objective` (reversal and the
    constant reconstruction target included).

    ``S(p) = L_rest(p) + L_adv(disc=p, feats=base) - lambda * L_adv(disc=base, feats=p)``
    """
    disc_keys = set(det.iter_stage_keys(det.STAGES))
    no_adv = replace(cfg, use_adv=False)
    adv_only = replace(cfg, mae_active=False)

    def adv_value(p: Params) -> float:
        return student_objective(p, batch, adv_only, with_grads=False)[0].l_adv

    def value(p: Params) -> float:
        rest = student_objective(p, batch, no_adv, target_params=base, with_grads=False)[0].l_total
        if cfg.mode != "adapt" or not cfg.use_adv:
            return rest
        disc_from_p = {k: (p[k] if k in disc_keys else base[k]) for k in p}
        feats_from_p = {k: (base[k] if k in disc_keys else p[k]) for k in p}
        return rest + adv_value(disc_from_p) - cfg.grl_lambda * adv_value(feats_from_p)

    return value


def predict_raw(params: Params, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Inference forward pass, ``[N, 256, 5]``."""
    out = []
    for i in range(0, len(images), chunk):
        fm, _ = det.backbone_forward(params, images[i : i + chunk])
        enc, _ = det.encoder_forward(params, det.to_tokens(fm.top))
        raw, _ = det.detect_forward(params, enc)
        out.append(raw)
    if not out:
        return np.zeros((0, det.N_CELLS, 5), dtype=np.float32)
    return np.concatenate(out)


def pooled_features(params: Params, images: np.ndarray) -> dict[str, np.ndarray]:
    fm, _ = det.backbone_forward(params, images)
    enc, _ = det.encoder_forward(params, det.to_tokens(fm.top))
    _, hcache = det.detect_forward(params, enc)
    return {"backbone": fm.top, "encoder": enc, "decoder": hcache[1]}
