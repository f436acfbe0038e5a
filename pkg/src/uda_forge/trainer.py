"""Source pretraining and teacher-student adaptation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detector as det
from .config import RunConfig
from .control import (ACRState, AnnealState, anneal_update, cosine_step, ema_update,
                      filter_pseudo_labels, mae_branch_active, selective_retrain)
from .detector import Params
from .evaluation import FrocCurve, froc, image_metrics, write_froc_csv
from .losses import LossBreakdown
from .numerics import AdamState, Rng, adam_step
from .objective import ObjectiveConfig, StudentBatch, pooled_features, predict_raw, student_objective
from .synthdata import Sample, generate_dataset, stack_images, strong_augment, weak_augment

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "epoch", "l_sup", "l_unsup", "l_adv", "l_mask", "l_total",
               "mu", "eta_t", "delta", "C", "n_pseudo")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Datasets:
    source: list[Sample]
    target: list[Sample]
    source_holdout: list[Sample]


@dataclass
class Seeds:
    source_data: int
    target_data: int
    holdout_data: int
    init: int
    pretrain: int
    adapt: int

    @classmethod
    def from_seed(cls, seed: int) -> "Seeds":
        r = Rng(seed)
        return cls(*(r.next_u64() for _ in range(6)))


def build_datasets(cfg: RunConfig) -> Datasets:
    s = Seeds.from_seed(cfg.seed)
    return Datasets(
        source=generate_dataset(cfg.source_spec, cfg.n_source, s.source_data, "source"),
        target=generate_dataset(cfg.target_spec, cfg.n_target, s.target_data, "target"),
        source_holdout=generate_dataset(cfg.source_spec, cfg.n_source_holdout, s.holdout_data, "source"),
    )


@dataclass
class EvalResult:
    curve: FrocCurve
    accuracy: float
    f1: float
    detections: list[list[det.Detection]]


def evaluate(params: Params, samples: list[Sample], score_threshold: float = 0.05,
             nms_iou: float = 0.5, fpi_points=(0.05, 0.1, 0.3, 0.5, 1.0, 2.0),
             image_threshold: float = 0.5) -> EvalResult:
    """Inference with the given (teacher) weights followed by the FROC sweep."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    det.validate_params(params)
    raw = predict_raw(params, stack_images(samples))
    dets = det.batch_detections(raw, score_threshold, nms_iou)
    gts = [s.boxes for s in samples]
    acc, f1 = image_metrics(dets, gts, image_threshold)
    return EvalResult(froc(dets, gts, fpi_points), acc, f1, dets)


def _make_adam(lr: float, lr_backbone: float) -> AdamState:
    return AdamState(lr=lr, lr_groups={"backbone.": lr_backbone})


def _anneal_state(cfg: RunConfig, T_i: int) -> AnnealState:
    return AnnealState(mu=cfg.mu0, eta_min=cfg.eta_min, eta_max=cfg.eta_max, T_i=T_i,
                       ema_beta=cfg.ema_beta_lbar, mu_min=cfg.mu_min, mu_max=cfg.mu_max)


def _check_finite(b: LossBreakdown, dump_path: Path | None, context: dict) -> None:
    if all(math.isfinite(v) for v in b.as_dict().values()):
        return
    if dump_path is not None:
        dump_path.parent.mkdir(parents=True, exist_ok=True)
        with open(dump_path, "w") as fh:
            for k, v in {**context, **b.as_dict()}.items():
                fh.write(f"{k}={v}\n")
    raise TrainingDiverged(f"non-finite loss at {context}; diagnostic dump: {dump_path}")


# --------------------------------------------------------------------------
# Source pretraining
# --------------------------------------------------------------------------

def pretrain_source(cfg: RunConfig, data: Datasets | None = None,
                    out_dir: str | Path | None = None) -> Params:
    """Supervised + reconstruction training on labelled source images."""
    data = data or build_datasets(cfg)
    if not data.source:
        raise ValueError("source dataset is empty")
    seeds = Seeds.from_seed(cfg.seed)
    params = det.init_params(Rng(seeds.init))
    adam = _make_adam(cfg.pretrain_lr, cfg.pretrain_lr_backbone)
    rng = Rng(seeds.pretrain)
    order_rng, aug_rng, mask_rng = rng.spawn(), rng.spawn(), rng.spawn()
    anneal = _anneal_state(cfg, cfg.T_i)
    obj = ObjectiveConfig(mode="source_pretrain", lambda_mask=cfg.lambda_mask,
                          mae_active=True, mask_whole_map=cfg.mask_whole_map)
    out = Path(out_dir) if out_dir is not None else None
    bs = cfg.batch_size
    it = 0
    for epoch in range(cfg.E_pre):
        perm = order_rng.permutation(len(data.source))
        for start in range(0, len(perm), bs):
            views = [weak_augment(data.source[i], aug_rng)[0] for i in perm[start : start + bs]]
            mu = anneal.mu if cfg.enable_ma else cfg.fixed_mask_ratio
            batch = StudentBatch(stack_images(views), [v.boxes for v in views],
                                 mask=det.sample_mask(mu, mask_rng, len(views)))
            b, grads = student_objective(params, batch, obj)
            _check_finite(b, out / "diagnostic.txt" if out else None,
                          {"stage": "pretrain", "iter": it, "epoch": epoch, "mu": mu,
                           "batch": ",".join(map(str, perm[start : start + bs]))})
            adam_step(params, grads, adam)
            if cfg.enable_ma:
                anneal = anneal_update(anneal, b.l_mask)
            it += 1
        log.debug("pretrain epoch %d done", epoch)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        det.save_checkpoint(out / "source.ckpt", {**det.prefixed(params, "teacher"),
                                                  **det.prefixed(params, "student")})
    return params


def load_params(path: str | Path, prefix: str = "teacher") -> Params:
    params = det.unprefixed(det.load_checkpoint(path), prefix)
    det.validate_params(params)
    return params


# --------------------------------------------------------------------------
# Adaptation
# --------------------------------------------------------------------------

@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    froc_snapshots: list[FrocCurve] = field(default_factory=list)
    pseudo_counts: list[int] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    probe_accuracy: list[float] = field(default_factory=list)  # index 0 = before adaptation
    teacher: Params | None = None
    student: Params | None = None
    reinit_snapshots: list[Params] = field(default_factory=list)


def domain_probe_accuracy(params: Params, src: np.ndarray, tgt: np.ndarray,
                          stage: str = "backbone", steps: int = 300) -> float:
    """Held-out accuracy of a freshly fitted logistic domain probe on
    mean-pooled stage features (half the probe images fit, half score)."""
    feats = pooled_features(params, np.concatenate([src, tgt]))[stage]
    x = feats.mean(axis=(-2, -1)) if feats.ndim == 4 else feats.mean(axis=-2)
    x = x.astype(np.float64)
    y = np.concatenate([np.zeros(len(src)), np.ones(len(tgt))])
    idx = np.arange(len(y))
    fit, score = idx % 2 == 0, idx % 2 == 1
    mu, sd = x[fit].mean(0), x[fit].std(0) + 1e-6
    z = (x - mu) / sd
    w, b = np.zeros(z.shape[1]), 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(z[fit] @ w + b)))
        g = p - y[fit]
        w -= 0.5 * (z[fit].T @ g / fit.sum() + 1e-3 * w)
        b -= 0.5 * g.mean()
    pred = (z[score] @ w + b) > 0
    return float((pred == y[score].astype(bool)).mean())


def adapt(cfg: RunConfig, source_params: Params, data: Datasets | None = None,
          out_dir: str | Path | None = None) -> TrainReport:
    """Teacher-student adaptation from a source checkpoint."""
    data = data or build_datasets(cfg)
    det.validate_params(source_params)
    if not data.target or not data.source:
        raise ValueError("adaptation needs source and target data")
    source = det.copy_params(source_params)
    teacher = det.copy_params(source_params)
    student = det.copy_params(source_params)
    adam = _make_adam(cfg.lr, cfg.lr_backbone)
    rng = Rng(Seeds.from_seed(cfg.seed).adapt)
    order_rng, aug_rng, mask_rng = rng.spawn(), rng.spawn(), rng.spawn()

    half = max(cfg.batch_size // 2, 1)
    iters_per_epoch = math.ceil(len(data.target) / half)
    e_total = cfg.e_total or max(cfg.E_teach * iters_per_epoch, 1)
    acr = ACRState(cfg.c_soft, cfg.c_hard, cfg.alpha_acr, 0, e_total)
    anneal = _anneal_state(cfg, cfg.T_i)
    weights = (("backbone", cfg.beta_bac), ("encoder", cfg.beta_enc), ("decoder", cfg.beta_dec))
    out = Path(out_dir) if out_dir is not None else None

    n_probe = min(cfg.probe_size, len(data.source_holdout) or len(data.source), len(data.target))
    probe_src = stack_images((data.source_holdout or data.source)[:n_probe])
    probe_tgt = stack_images(data.target[:n_probe])
    report = TrainReport()
    if n_probe >= 4:
        report.probe_accuracy.append(domain_probe_accuracy(student, probe_src, probe_tgt))

    src_perm, src_pos = order_rng.permutation(len(data.source)), 0
    it = 0
    for epoch in range(cfg.E_teach):
        if cfg.enable_selective and epoch == cfg.E_reinit and epoch > 0:
            selective_retrain(student, source)
            report.reinit_snapshots.append(det.copy_params(student))
        mae_active = mae_branch_active(epoch, cfg.E_decay)
        obj = ObjectiveConfig(mode="adapt", lambda_unsup=cfg.lambda_unsup,
                              lambda_mask=cfg.lambda_mask, grl_lambda=cfg.grl_lambda,
                              stage_weights=weights, use_adv=cfg.enable_adv,
                              mae_active=mae_active, mask_whole_map=cfg.mask_whole_map)
        tgt_perm = order_rng.permutation(len(data.target))
        sums: dict[str, float] = {}
        n_rows = 0
        epoch_pseudo = 0
        for start in range(0, len(tgt_perm), half):
            tgt_idx = tgt_perm[start : start + half]
            src_idx = []
            for _ in range(len(tgt_idx)):
                if src_pos == len(src_perm):
                    src_perm, src_pos = order_rng.permutation(len(data.source)), 0
                src_idx.append(src_perm[src_pos])
                src_pos += 1

            C = acr.threshold if cfg.enable_acr else cfg.c_hard
            delta = acr.delta if cfg.enable_acr else 1.0

            # teacher labels the weak target view; the student sees strong views
            tgt_views, tgt_strong = [], []
            for i in tgt_idx:
                weak, record = weak_augment(data.target[i], aug_rng)
                tgt_views.append(weak)
                tgt_strong.append(strong_augment(data.target[i], record, aug_rng,
                                                 blur_sigma=cfg.strong_blur_sigma))
            src_strong = []
            for i in src_idx:
                _, record = weak_augment(data.source[i], aug_rng)
                src_strong.append(strong_augment(data.source[i], record, aug_rng,
                                                 blur_sigma=cfg.strong_blur_sigma))
            raw_t = predict_raw(teacher, stack_images(tgt_views))
            pseudo = [filter_pseudo_labels(d, C)
                      for d in det.batch_detections(raw_t, min(C, 1.0), cfg.nms_iou)]
            pseudo_boxes = [np.array([p.box for p in ps]).reshape(-1, 4) for ps in pseudo]
            n_pseudo = sum(len(p) for p in pseudo)

            mu = anneal.mu if cfg.enable_ma else cfg.fixed_mask_ratio
            n_batch = len(src_strong) + len(tgt_strong)
            batch = StudentBatch(
                stack_images(src_strong), [s.boxes for s in src_strong],
                stack_images(tgt_strong), pseudo_boxes,
                det.sample_mask(mu, mask_rng, n_batch) if mae_active else None)
            b, grads = student_objective(student, batch, obj)
            _check_finite(b, out / "diagnostic.txt" if out else None,
                          {"stage": "adapt", "iter": it, "epoch": epoch, "mu": mu, "C": C,
                           "source_batch": ",".join(map(str, src_idx)),
                           "target_batch": ",".join(map(str, tgt_idx))})
            adam_step(student, grads, adam)

            eta_t = cosine_step(anneal)
            if mae_active and cfg.enable_ma:
                anneal = anneal_update(anneal, b.l_mask)
            ema_update(teacher, student, cfg.gamma_ema)
            acr = acr.advance()

            row = {"iter": it, "epoch": epoch, "l_sup": b.l_sup, "l_unsup": b.l_unsup,
                   "l_adv": b.l_adv, "l_mask": b.l_mask, "l_total": b.l_total, "mu": mu,
                   "eta_t": eta_t, "delta": delta, "C": C, "n_pseudo": n_pseudo}
            report.rows.append(row)
            report.thresholds.append(C)
            report.pseudo_counts.append(n_pseudo)
            for k in ("l_sup", "l_unsup", "l_adv", "l_mask", "l_total"):
                sums[k] = sums.get(k, 0.0) + row[k]
            n_rows += 1
            epoch_pseudo += n_pseudo
            it += 1

        summary = {"epoch": epoch, **{k: v / max(n_rows, 1) for k, v in sums.items()},
                   "n_pseudo": epoch_pseudo, "C_end": report.thresholds[-1] if report.thresholds else None}
        if cfg.froc_every and (epoch + 1) % cfg.froc_every == 0:
            res = evaluate(teacher, data.target, cfg.score_threshold, cfg.nms_iou, cfg.fpi)
            report.froc_snapshots.append(res.curve)
            summary["froc"] = res.curve.points
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                write_froc_csv(res.curve, out / f"froc_epoch_{epoch}.csv")
        report.epochs.append(summary)
        log.debug("adapt epoch %d: %s", epoch, summary)

    if n_probe >= 4:
        report.probe_accuracy.append(domain_probe_accuracy(student, probe_src, probe_tgt))
    report.teacher, report.student = teacher, student
    if out is not None:
        write_adapt_outputs(report, out)
    return report


def write_train_log(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in LOG_COLUMNS])
    return path


def write_adapt_outputs(report: TrainReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_train_log(report.rows, out / "train_log.csv")
    det.save_checkpoint(out / "adapt.ckpt", {**det.prefixed(report.teacher, "teacher"),
                                             **det.prefixed(report.student, "student")})
    lines = [f"iterations={len(report.rows)}", f"epochs={len(report.epochs)}"]
    for e in report.epochs:
        froc_txt = ""
        if "froc" in e:
            froc_txt = " " + " ".join(f"R@{f:g}={r:.4f}" for f, r in e["froc"])
        lines.append(f"epoch {e['epoch']}: l_total={e.get('l_total', 0.0):.5f} "
                     f"n_pseudo={e['n_pseudo']}{froc_txt}")
    if report.probe_accuracy:
        lines.append("domain_probe_accuracy=" + ",".join(f"{a:.4f}" for a in report.probe_accuracy))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
