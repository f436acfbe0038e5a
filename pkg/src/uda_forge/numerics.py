"""Small deterministic tensor kernels with hand-written backward passes.

Arrays are plain ``numpy.ndarray``. Training runs in float32; every kernel
preserves the dtype of its inputs so the same code can be checked in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class NonFiniteError(ValueError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


# --------------------------------------------------------------------------
# SplitMix64
# --------------------------------------------------------------------------

def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 numpy arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The state advances by a fixed odd constant, so the k-th output is a pure
    function of ``seed + k * gamma``. Bulk draws exploit this to vectorise
    while producing exactly the same stream as repeated :meth:`next_u64`.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            states = np.uint64(self.state) + k * np.uint64(GOLDEN_GAMMA)
            out = _mix64_array(states)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        """Uniform draws in ``[low, high)`` built from the top 53 bits."""
        if n is None:
            u = (self.next_u64() >> 11) * 2.0**-53
            return low + (high - low) * u
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int | None = None, mean: float = 0.0, sd: float = 1.0):
        """Box-Muller; every variate consumes two uniforms (cosine branch only)."""
        m = 1 if n is None else n
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        z = mean + sd * z
        return float(z[0]) if n is None else z

    def integers(self, high: int) -> int:
        """Uniform integer in ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        return min(int(self.uniform() * high), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        """Child generator seeded from the next output of this stream."""
        return Rng(self.next_u64())


def rng_next(state: int) -> tuple[int, int]:
    """Functional form: returns ``(output, new_state)``."""
    new_state = (int(state) + GOLDEN_GAMMA) & MASK64
    return _mix64(new_state), new_state


# --------------------------------------------------------------------------
# Dense kernels
# --------------------------------------------------------------------------

def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients ``(dx, dW, db)``; leading axes of ``x`` are summed for dW, db."""
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"conv2d expects [C,H,W] or [N,C,H,W], got {x.shape}")


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]
    # [N, C, Ho, Wo, 3, 3] -> [N*Ho*Wo, C*9]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    return cols, ho, wo


def conv2d(x: np.ndarray, k: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 convolution, zero padding 1. Accepts ``[C,H,W]`` or ``[N,C,H,W]``."""
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if k.ndim != 4 or k.shape[1:] != (c, 3, 3) or bias.shape != (k.shape[0],):
        raise ValueError(f"conv2d shape mismatch: x{x.shape} k{k.shape} b{bias.shape}")
    if h < 3 or w < 3:
        raise ValueError("conv2d needs H, W >= 3")
    cols, ho, wo = _im2col(xb, stride)
    y = cols @ k.reshape(k.shape[0], -1).T + bias
    y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    return y[0] if single else y


def conv2d_backward(dy: np.ndarray, x: np.ndarray, k: np.ndarray, stride: int = 1):
    """Gradients ``(dx, dk, dbias)`` for :func:`conv2d`."""
    xb, single = _as_batch(x)
    dyb = dy[None] if single else dy
    n, c, h, w = xb.shape
    cout = k.shape[0]
    cols, ho, wo = _im2col(xb, stride)
    dy2 = dyb.transpose(0, 2, 3, 1).reshape(-1, cout)
    dk = (dy2.T @ cols).reshape(k.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ k.reshape(cout, -1)).reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, 1 : h + 1, 1 : w + 1]
    return (dx[0] if single else dx), dk, db


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(kind: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dy * (x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return dy * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # per-parameter learning rates keyed by name prefix
    lr_groups: dict[str, float] = field(default_factory=dict)
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.lr_groups.items():
            if name.startswith(prefix):
                return lr
        return self.lr


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place. Returns ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        check_finite(g, f"gradient {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name in sorted(grads):
        p = params[name]
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr_for(name) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params


# --------------------------------------------------------------------------
# Finite-difference gradient checking
# --------------------------------------------------------------------------

def fd_check(f: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
             params: Mapping[str, np.ndarray], eps: float = 1e-3,
             names: list[str] | None = None,
             value_fn: Callable[[dict[str, np.ndarray]], float] | None = None,
             max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> (value, grads)``. Parameters are promoted to float64; the
    step for each coordinate is ``eps * (|value| + 1)``. ``value_fn`` may be
    given to skip the backward pass during the perturbed evaluations.
    ``max_coords`` caps the coordinates checked per tensor (sampled with a
    seeded generator); by default every coordinate is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = f(p64)
    value = value_fn if value_fn is not None else (lambda p: f(p)[0])
    worst = 0.0
    for name in names if names is not None else sorted(p64):
        arr = p64[name]
        ga = np.asarray(grads[name], dtype=np.float64)
        flat = arr.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = sorted(Rng(seed).permutation(flat.size)[:max_coords].tolist())
        for i in coords:
            orig = flat[i]
            h = eps * (abs(orig) + 1.0)
            flat[i] = orig + h
            fp = float(value(p64))
            flat[i] = orig - h
            fm = float(value(p64))
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            g_an = float(ga.reshape(-1)[i])
            err = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
            worst = max(worst, err)
    return worst
