"""FROC analysis with centre-in-box matching, image-level metrics and the
CSV/SVG artefacts."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detection

DEFAULT_FPI = (0.05, 0.1, 0.3, 0.5, 1.0, 2.0)


@dataclass
class MatchResult:
    is_tp: list[bool]  # per detection, input order
    gt_hit: list[bool]
    order: list[int]  # detection indices by descending score

    @property
    def n_tp(self) -> int:
        return sum(self.is_tp)

    @property
    def n_fp(self) -> int:
        return len(self.is_tp) - self.n_tp


@dataclass
class FrocCurve:
    points: list[tuple[float, float]]  # (fpi, recall) at the requested FPI values
    n_images: int
    n_gt_boxes: int
    sweep: list[tuple[float, float]] = field(default_factory=list)  # every threshold

    def recall_at(self, fpi: float) -> float:
        for f, r in self.points:
            if f == fpi:
                return r
        raise KeyError(f"FPI {fpi} not on this curve")


def _score_order(scores: Sequence[float]) -> list[int]:
    # descending score, earlier list position first on ties
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def center_in_box(cx: float, cy: float, gt) -> bool:
    gcx, gcy, gw, gh = gt
    return (gcx - gw / 2 <= cx <= gcx + gw / 2) and (gcy - gh / 2 <= cy <= gcy + gh / 2)


def match_detections(dets: Sequence[Detection], gts) -> MatchResult:
    """Greedy centre-in-box matching; each GT box is consumed at most once."""
    gts = [tuple(g) for g in np.asarray(gts, dtype=np.float64).reshape(-1, 4)]
    order = _score_order([d.score for d in dets])
    hit = [False] * len(gts)
    is_tp = [False] * len(dets)
    for i in order:
        d = dets[i]
        for j, g in enumerate(gts):
            if not hit[j] and center_in_box(d.cx, d.cy, g):
                hit[j] = True
                is_tp[i] = True
                break
    return MatchResult(is_tp, hit, order)


def _recall_at(points: list[tuple[Fraction, Fraction]], fpi_points) -> list[tuple[float, float]]:
    out = []
    for p in fpi_points:
        # decimal reading, so 3 FPs on 10 images sits exactly at FPI 0.3
        allowed = Fraction(repr(float(p)))
        best = max((r for f, r in points if f <= allowed), default=Fraction(0))
        out.append((float(p), float(best)))
    return out


def froc(all_dets: Sequence[Sequence[Detection]], all_gts, fpi_points=DEFAULT_FPI) -> FrocCurve:
    """Threshold sweep over every distinct detection score.

    Recall at an FPI value is the best recall over thresholds whose FPI does
    not exceed it (step convention, no interpolation).
    """
    n_images = len(all_dets)
    if n_images == 0:
        raise ValueError("FROC needs at least one image")
    if len(all_gts) != n_images:
        raise ValueError("detections and ground truth cover different image counts")
    fpi_points = list(fpi_points)
    if fpi_points != sorted(fpi_points):
        raise ValueError("fpi_points must be ascending")
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in all_gts)

    flat: list[tuple[float, bool]] = []
    for dets, gts in zip(all_dets, all_gts):
        m = match_detections(dets, gts)
        flat.extend((d.score, tp) for d, tp in zip(dets, m.is_tp))
    flat.sort(key=lambda x: -x[0])

    exact = [(Fraction(0), Fraction(0))]
    tp = fp = 0
    i = 0
    while i < len(flat):
        s = flat[i][0]
        while i < len(flat) and flat[i][0] == s:
            tp += flat[i][1]
            fp += not flat[i][1]
            i += 1
        exact.append((Fraction(fp, n_images), Fraction(tp, n_gt) if n_gt else Fraction(0)))
    return FrocCurve(
        points=_recall_at(exact, fpi_points),
        n_images=n_images,
        n_gt_boxes=n_gt,
        sweep=[(float(f), float(r)) for f, r in exact],
    )


def image_metrics(all_dets: Sequence[Sequence[Detection]], all_gts,
                  score_threshold: float = 0.5) -> tuple[float, float]:
    """Image-level accuracy and F1: an image is called positive when any
    detection reaches the threshold."""
    tp = fp = fn = tn = 0
    for dets, gts in zip(all_dets, all_gts):
        pred = any(d.score >= score_threshold for d in dets)
        truth = len(np.asarray(gts).reshape(-1, 4)) > 0
        if pred and truth:
            tp += 1
        elif pred:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    n = tp + fp + fn + tn
    accuracy = (tp + tn) / n if n else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def write_froc_csv(curve: FrocCurve, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpi", "recall"])
        for f, r in curve.points:
            w.writerow([repr(float(f)), repr(float(r))])
    return path


def read_froc_csv(path: str | Path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        return [(float(row["fpi"]), float(row["recall"])) for row in csv.DictReader(fh)]


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def render_froc_svg(curves: dict[str, FrocCurve], path: str | Path,
                    width: int = 480, height: int = 360) -> Path:
    """Recall against FPI on a log-x axis, one polyline per curve."""
    path = Path(path)
    left, right, top, bottom = 60, 130, 20, 50
    pw, ph = width - left - right, height - top - bottom
    fmin, fmax = 0.025, 4.0

    def sx(f: float) -> float:
        f = min(max(f, fmin), fmax)
        return left + pw * (np.log(f) - np.log(fmin)) / (np.log(fmax) - np.log(fmin))

    def sy(r: float) -> float:
        return top + ph * (1.0 - r)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for f in DEFAULT_FPI:
        x = sx(f)
        parts.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" font-size="10" text-anchor="middle">{f:g}</text>')
    for r in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(r)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{r:.2f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 12}" font-size="12" text-anchor="middle">'
                 'false positives per image</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2})">sensitivity</text>')
    for k, (label, curve) in enumerate(curves.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = curve.points
        coords = " ".join(f"{sx(f):.2f},{sy(r):.2f}" for f, r in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 16 * k
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 34}" y="{ly + 4}" font-size="11">{_escape(label)}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_detections_csv(all_dets: Sequence[Sequence[Detection]], path: str | Path) -> Path:
    """Interchange format ``image_id,cx,cy,w,h,score``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "cx", "cy", "w", "h", "score"])
        for i, dets in enumerate(all_dets):
            for d in dets:
                w.writerow([i, *(repr(float(v)) for v in (d.cx, d.cy, d.w, d.h, d.score))])
    return path


def read_detections_csv(path: str | Path, n_images: int | None = None) -> list[list[Detection]]:
    rows: dict[int, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["image_id"])
            rows.setdefault(i, []).append(Detection(
                float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]),
                float(row["score"])))
    n = n_images if n_images is not None else (max(rows) + 1 if rows else 0)
    return [rows.get(i, []) for i in range(n)]
