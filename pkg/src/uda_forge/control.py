"""Training control: mask-ratio annealing, adaptive confidence thresholds,
EMA teacher updates, pseudo-label filtering and selective retraining."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .detector import BACKBONE_KEYS, ENCODER_KEYS, Detection, Params


@dataclass(frozen=True)
class AnnealState:
    mu: float = 0.3
    eta_min: float = 0.05
    eta_max: float = 0.15
    T_i: int = 100
    T_c: int = 0
    loss_mean: float | None = None  # running mean of the mask loss; None until first observation
    ema_beta: float = 0.9
    mu_min: float = 0.05
    mu_max: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.eta_min <= self.eta_max:
            raise ValueError("need 0 <= eta_min <= eta_max")
        if not 0.0 <= self.mu_min <= self.mu_max <= 1.0:
            raise ValueError("need 0 <= mu_min <= mu_max <= 1")
        if self.T_i < 0 or not 0 <= self.T_c <= max(self.T_i, 0):
            raise ValueError("need 0 <= T_c <= T_i")


def cosine_step(s: AnnealState) -> float:
    """Warm-restart cosine schedule for the annealing step."""
    if s.T_i == 0:
        raise ValueError("T_i must be positive")
    return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + math.cos(math.pi * s.T_c / s.T_i))


def anneal_update(s: AnnealState, loss: float) -> AnnealState:
    """Raise the mask ratio when the reconstruction loss beats its running
    mean, lower it otherwise.

    The first observation only seeds the running mean.
    """
    if not math.isfinite(loss) or loss < 0:
        raise ValueError("mask loss must be finite and nonnegative")
    eta_t = cosine_step(s)
    mu = s.mu
    if s.loss_mean is None:
        loss_mean = float(loss)
    else:
        mu = mu + eta_t if loss < s.loss_mean else mu - eta_t
        loss_mean = s.ema_beta * s.loss_mean + (1.0 - s.ema_beta) * loss
    mu = min(max(mu, s.mu_min), s.mu_max)
    t_c = s.T_c + 1
    if t_c >= s.T_i:
        t_c = 0
    return replace(s, mu=mu, loss_mean=loss_mean, T_c=t_c)


def acr_delta(t: float, e: float, alpha: float) -> float:
    if e == 0:
        raise ValueError("total iterations e must be positive")
    return 2.0 / (1.0 + math.exp(-alpha * t / e)) - 1.0


def blend_confidence(c_soft: float, c_hard: float, delta: float) -> float:
    return (1.0 - delta) * c_soft + delta * c_hard


@dataclass(frozen=True)
class ACRState:
    c_soft: float = 0.15
    c_hard: float = 0.80
    alpha: float = 5.0
    t: int = 0
    e: int = 1

    def __post_init__(self):
        if not 0.0 <= self.c_soft <= self.c_hard <= 1.0:
            raise ValueError("need 0 <= c_soft <= c_hard <= 1")
        if self.e <= 0:
            raise ValueError("total iterations e must be positive")

    @property
    def delta(self) -> float:
        return acr_delta(min(self.t, self.e), self.e, self.alpha)

    @property
    def threshold(self) -> float:
        return acr_threshold(self)

    def advance(self) -> "ACRState":
        return replace(self, t=self.t + 1)


def acr_threshold(s: ACRState) -> float:
    return blend_confidence(s.c_soft, s.c_hard, s.delta)


def filter_pseudo_labels(dets: Sequence[Detection], C: float) -> list[Detection]:
    return [d for d in dets if d.score > C]


def ema_update(teacher: Params, student: Params, gamma: float) -> Params:
    """``teacher <- gamma * teacher + (1 - gamma) * student``, in place."""
    if set(teacher) != set(student):
        raise KeyError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}")
        if gamma == 1.0:
            continue
        t *= t.dtype.type(gamma)
        t += t.dtype.type(1.0 - gamma) * s
    return teacher


def selective_retrain(student: Params, source: Params) -> Params:
    """Reset the student's backbone and encoder to the source-trained weights."""
    for name in (*BACKBONE_KEYS, *ENCODER_KEYS):
        if name not in student or name not in source:
            raise KeyError(f"missing tensor {name}")
        if student[name].shape != source[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        student[name] = np.array(source[name], copy=True)
    return student


def mae_branch_active(epoch: int, E_decay: int) -> bool:
    return epoch < E_decay
