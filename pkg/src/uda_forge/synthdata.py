"""Synthetic two-domain lesion images and the weak/strong augmentation pair."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import Rng

IMAGE_SIZE = 64


@dataclass(frozen=True)
class DomainSpec:
    background_mean: float = 0.35
    background_noise_sd: float = 0.05
    lesion_intensity_range: tuple[float, float] = (0.5, 0.8)
    lesion_radius_range: tuple[float, float] = (3.0, 6.0)
    # probabilities of 0, 1, 2 lesions
    lesion_count_distribution: tuple[float, ...] = (0.4, 0.5, 0.1)
    global_contrast: float = 1.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        for name in ("lesion_intensity_range", "lesion_radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered lo <= hi")
        probs = self.lesion_count_distribution
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("lesion_count_distribution must be probabilities summing to 1")
        if not (0.0 <= self.background_mean <= 1.0):
            raise ValueError("background_mean must lie in [0, 1]")
        if self.background_noise_sd < 0 or self.blur_sigma < 0 or self.global_contrast < 0:
            raise ValueError("noise sd, blur sigma and contrast must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SOURCE_SPEC = DomainSpec()
TARGET_SPEC = DomainSpec(
    background_mean=0.55,
    background_noise_sd=0.10,
    lesion_intensity_range=(0.35, 0.6),
    lesion_radius_range=(2.0, 5.0),
    global_contrast=0.8,
    blur_sigma=0.5,
)


@dataclass(frozen=True)
class AugmentationRecord:
    flipped: bool
    contrast_factor: float = 1.0
    noise_seed: int = 0
    blur_applied: bool = False
    downscale_applied: bool = False


@dataclass
class Sample:
    image: np.ndarray  # [1, 64, 64] float32 in [0, 1]
    domain: str  # "source" | "target"
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # (cx, cy, w, h)
    aug: AugmentationRecord | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)


def _contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.mean()
    return mean + factor * (img - mean)


def generate_sample(spec: DomainSpec, rng: Rng, domain: str = "source") -> Sample:
    size = IMAGE_SIZE
    img = rng.normal(size * size, spec.background_mean, spec.background_noise_sd)
    img = np.clip(img, 0.0, 1.0).reshape(size, size)

    u = rng.uniform()
    count, acc = len(spec.lesion_count_distribution) - 1, 0.0
    for k, p in enumerate(spec.lesion_count_distribution):
        acc += p
        if u < acc:
            count = k
            break

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    boxes = []
    margin = 4.0
    for _ in range(count):
        sigma = rng.uniform(None, *spec.lesion_radius_range)
        peak = rng.uniform(None, *spec.lesion_intensity_range)
        cx = rng.uniform(None, margin, size - 1 - margin)
        cy = rng.uniform(None, margin, size - 1 - margin)
        img = img + peak * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
        x0, x1 = max(0.0, cx - 2 * sigma), min(size - 1.0, cx + 2 * sigma)
        y0, y1 = max(0.0, cy - 2 * sigma), min(size - 1.0, cy + 2 * sigma)
        boxes.append(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))

    if spec.global_contrast != 1.0:
        img = _contrast(img, spec.global_contrast)
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="reflect")
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img[None], domain, np.array(boxes).reshape(-1, 4))


def generate_dataset(spec: DomainSpec, n: int, seed: int, domain: str) -> list[Sample]:
    """``n`` samples, each drawn from its own child seed of ``seed``."""
    base = Rng(seed)
    return [generate_sample(spec, Rng(base.next_u64()), domain) for _ in range(n)]


def flip_boxes(boxes: np.ndarray, width: int = IMAGE_SIZE) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0] = width - 1 - out[:, 0]
    return out


def weak_augment(s: Sample, rng: Rng, flip: bool | None = None) -> tuple[Sample, AugmentationRecord]:
    """Random horizontal flip with probability 0.5 (``flip`` forces the choice)."""
    if flip is None:
        flip = rng.uniform() < 0.5
    record = AugmentationRecord(flipped=bool(flip))
    if not flip:
        return Sample(s.image.copy(), s.domain, s.boxes.copy(), record), record
    img = np.ascontiguousarray(s.image[..., ::-1])
    return Sample(img, s.domain, flip_boxes(s.boxes, s.image.shape[-1]), record), record


def strong_augment(s: Sample, record: AugmentationRecord, rng: Rng, *,
                   blur_sigma: float = 1.0, contrast_range: tuple[float, float] = (0.7, 1.3),
                   downscale: bool = True, contrast_factor: float | None = None) -> Sample:
    """Shared flip, Gaussian blur, contrast jitter, 2x resolution drop.

    ``s`` is the un-augmented sample; the flip is taken from ``record`` so
    teacher boxes predicted on the weak view line up with this view.
    """
    noise_seed = rng.state
    if contrast_factor is None:
        contrast_factor = rng.uniform(None, *contrast_range)
    img = s.image[0].astype(np.float64)
    boxes = s.boxes.copy()
    if record.flipped:
        img = img[:, ::-1]
        boxes = flip_boxes(boxes, img.shape[-1])
    if blur_sigma > 0:
        img = gaussian_filter(img, blur_sigma, mode="reflect")
    img = np.clip(_contrast(img, contrast_factor), 0.0, 1.0)
    if downscale:
        img = np.repeat(np.repeat(img[::2, ::2], 2, axis=0), 2, axis=1)
    applied = AugmentationRecord(
        flipped=record.flipped,
        contrast_factor=float(contrast_factor),
        noise_seed=noise_seed,
        blur_applied=blur_sigma > 0,
        downscale_applied=downscale,
    )
    return Sample(img.astype(np.float32)[None], s.domain, boxes, applied)


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


# --------------------------------------------------------------------------
# On-disk dataset manifest
# --------------------------------------------------------------------------

def write_dataset(path: str | Path, samples: list[Sample], spec: DomainSpec | None = None,
                  extra_meta: dict | None = None) -> Path:
    """``images.bin`` (LE f32, N x 1 x 64 x 64), ``labels.csv``, ``meta.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = stack_images(samples) if samples else np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    images.astype("<f4").tofile(path / "images.bin")
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "cx", "cy", "w", "h"])
        for i, s in enumerate(samples):
            for b in s.boxes:
                w.writerow([i, *(repr(float(v)) for v in b)])
    meta = {"n_images": len(samples), "domain": samples[0].domain if samples else ""}
    if spec is not None:
        meta.update(spec.to_dict())
    meta.update(extra_meta or {})
    with open(path / "meta.txt", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
    return path


def read_meta(path: str | Path) -> dict[str, str]:
    meta = {}
    for line in Path(path, "meta.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta


def read_labels(path: str | Path) -> dict[int, list[tuple[float, float, float, float]]]:
    out: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["image_id"]), []).append(
                tuple(float(row[k]) for k in ("cx", "cy", "w", "h")))
    return out


def read_dataset(path: str | Path) -> list[Sample]:
    path = Path(path)
    if not (path / "images.bin").exists():
        raise FileNotFoundError(f"no dataset at {path}")
    meta = read_meta(path)
    raw = np.fromfile(path / "images.bin", dtype="<f4").astype(np.float32)
    images = raw.reshape(-1, 1, IMAGE_SIZE, IMAGE_SIZE)
    labels = read_labels(path / "labels.csv")
    domain = meta.get("domain", "source")
    return [Sample(images[i].copy(), domain, np.array(labels.get(i, [])).reshape(-1, 4))
            for i in range(images.shape[0])]
